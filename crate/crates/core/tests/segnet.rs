use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::graph::GcaOptions;
use voxgraph::segnet::{load_pretrained, predict_labels, NetworkConfig, SegNet};
use voxgraph::tensor::{Checkpoint, Tape, Tensor};

/// Parameter count by walking the layer list by hand.
fn count_oracle(cfg: &NetworkConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k * k + cout;
    let w = |s: usize| cfg.base_width << s;
    let k = cfg.kernel_size;
    let reps = cfg.blocks_per_stage;
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for s in 0..cfg.n_stages - 1 {
        for _ in 0..reps {
            total += conv(cin, w(s), k);
            cin = w(s);
        }
        total += conv(w(s), w(s + 1), 2);
        cin = w(s + 1);
    }
    let wb = w(cfg.n_stages - 1);
    total += reps * conv(wb, wb, k);
    for s in (0..cfg.n_stages - 1).rev() {
        total += w(s + 1) * w(s) * 8 + w(s);
        total += conv(2 * w(s), w(s), k) + (reps - 1) * conv(w(s), w(s), k);
        let voxels: usize = cfg.roi.iter().map(|e| e >> s).product();
        if voxels <= cfg.gca.dense_cap {
            let c = w(s);
            // q, k, v with source, target and score weights, then γ and the merge.
            total += 3 * (2 * c * c + c) + 1 + (c * 2 * c + c);
        }
    }
    total += conv(w(0), cfg.n_classes, 1);
    if cfg.deep_sup {
        for lvl in 1..cfg.n_stages {
            total += conv(w(lvl), cfg.n_classes, 1);
        }
    }
    total
}

#[test]
fn parameter_count_matches_layer_walk() {
    let cfg = NetworkConfig::default();
    let (_, params) = SegNet::new::<f32>(cfg.clone(), 0).unwrap();
    assert_eq!(params.num_elements(), count_oracle(&cfg));
    assert_eq!(params.num_elements(), 259_133);
    for cfg in [
        NetworkConfig { n_stages: 2, base_width: 8, deep_sup: false, ..Default::default() },
        NetworkConfig { blocks_per_stage: 2, roi: [16; 3], ..Default::default() },
        NetworkConfig { kernel_size: 5, gca: GcaOptions { dense_cap: 100, ..Default::default() }, ..Default::default() },
    ] {
        let (_, params) = SegNet::new::<f32>(cfg.clone(), 0).unwrap();
        assert_eq!(params.num_elements(), count_oracle(&cfg), "{:?}", cfg);
    }
}

#[test]
fn output_shapes_across_a_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n_stages in [2, 3] {
        for base_width in [8, 16] {
            for extent in [16, 32] {
                let cfg = NetworkConfig { n_stages, base_width, roi: [extent; 3], ..Default::default() };
                let (net, params) = SegNet::new::<f32>(cfg, 1).unwrap();
                let mut tape = Tape::inference();
                let x = tape.constant(Tensor::from_fn(&[1, 4, extent, extent, extent], |_| rng.random_range(-1.0f32..1.0)));
                let out = net.forward(&mut tape, &params, x).unwrap();
                assert_eq!(tape.shape(out.logits), [1, 4, extent, extent, extent]);
                assert_eq!(out.aux.len(), n_stages - 1);
                for (k, a) in out.aux.iter().enumerate() {
                    let e = extent >> (k + 1);
                    assert_eq!(tape.shape(*a), [1, 4, e, e, e]);
                }
            }
        }
    }
}

#[test]
fn attention_runs_only_at_stages_within_the_cap() {
    let (net, params) = SegNet::new::<f32>(NetworkConfig::default(), 2).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 4, 32, 32, 32]));
    let out = net.forward(&mut tape, &params, x).unwrap();
    assert_eq!(out.gca_stages, vec![(1, [16, 16, 16])]);
    assert_eq!(out.attention.len(), 1);
    assert_eq!(tape.shape(out.attention[0]), [1, 4096, 4096]);

    let four = NetworkConfig { n_stages: 4, base_width: 4, ..Default::default() };
    let (net, params) = SegNet::new::<f32>(four, 2).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 4, 32, 32, 32]));
    let out = net.forward(&mut tape, &params, x).unwrap();
    assert_eq!(out.gca_stages, vec![(2, [8, 8, 8]), (1, [16, 16, 16])]);
    let names: Vec<String> = params.iter().map(|(_, p)| p.name.clone()).filter(|n| n.starts_with("gca.")).collect();
    assert!(names.contains(&"gca.1.q.w_src".to_string()));
    assert!(names.contains(&"gca.2.gamma".to_string()));
    assert!(names.contains(&"gca.1.merge.weight".to_string()));
    assert!(!names.iter().any(|n| n.starts_with("gca.0.")));
}

#[test]
fn zero_weights_give_a_uniform_posterior() {
    let cfg = NetworkConfig { roi: [16; 3], ..Default::default() };
    let (net, mut params) = SegNet::new::<f32>(cfg, 3).unwrap();
    for p in params.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let logits = net.predict(&params, Tensor::from_fn(&[1, 4, 16, 16, 16], |i| (i % 7) as f32)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let mut tape = Tape::inference();
    let l = tape.constant(logits);
    let p = tape.softmax(l, 1).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| v == 0.25));
    assert!(predict_labels(tape.value(l)).unwrap()[0].data.iter().all(|&v| v == 0));
}

#[test]
fn argmax_matches_scan_with_low_index_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Coarse values make ties common.
    let logits = Tensor::from_fn(&[2, 4, 3, 4, 5], |_| rng.random_range(0..3) as f32);
    let labels = predict_labels(&logits).unwrap();
    let n = 60;
    for b in 0..2 {
        for v in 0..n {
            let mut best = 0;
            for c in 1..4 {
                if logits.data()[(b * 4 + c) * n + v] > logits.data()[(b * 4 + best) * n + v] {
                    best = c;
                }
            }
            assert_eq!(labels[b].data[v], best as u8);
        }
    }
    let mut one = Tensor::zeros(&[1, 4, 1, 1, 1]);
    one.data_mut()[3] = 1.0;
    assert_eq!(predict_labels(&one).unwrap()[0].data, vec![3]);
}

#[test]
fn forward_is_deterministic() {
    let cfg = NetworkConfig { roi: [16; 3], ..Default::default() };
    let (net, params) = SegNet::new::<f32>(cfg.clone(), 5).unwrap();
    let (_, again) = SegNet::new::<f32>(cfg, 5).unwrap();
    assert_eq!(params.flatten_values(), again.flatten_values());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[2, 4, 16, 16, 16], |_| rng.random_range(-1.0f32..1.0));
    let a = net.predict(&params, x.clone()).unwrap();
    let b = net.predict(&params, x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(SegNet::new::<f32>(NetworkConfig { roi: [30, 32, 32], ..Default::default() }, 0).is_err());
    assert!(SegNet::new::<f32>(NetworkConfig { kernel_size: 4, ..Default::default() }, 0).is_err());
    assert!(SegNet::new::<f32>(NetworkConfig { n_stages: 1, ..Default::default() }, 0).is_err());
    let (net, params) = SegNet::new::<f32>(NetworkConfig { roi: [16; 3], ..Default::default() }, 0).unwrap();
    assert!(net.predict(&params, Tensor::zeros(&[1, 4, 16, 16, 18])).is_err());
    assert!(net.predict(&params, Tensor::zeros(&[1, 3, 16, 16, 16])).is_err());
}

#[test]
fn pretrained_weights_load_by_name() {
    let cfg = NetworkConfig { roi: [16; 3], base_width: 8, ..Default::default() };
    let (_, source) = SegNet::new::<f32>(cfg.clone(), 7).unwrap();
    let (_, mut target) = SegNet::new::<f32>(cfg.clone(), 8).unwrap();
    let mut ckpt = Checkpoint::new([0; 32], 0, 0);
    ckpt.put_params(&source);
    load_pretrained(&mut target, &ckpt).unwrap();
    assert_eq!(target.flatten_values(), source.flatten_values());
    let (_, mut wider) = SegNet::new::<f32>(NetworkConfig { base_width: 16, ..cfg }, 8).unwrap();
    assert!(load_pretrained(&mut wider, &ckpt).is_err());
}
