//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion does. The desk-scale training run dominates
//! the runtime.

mod common;

use std::io::Write;
use std::time::Instant;

use common::{
    accumulation_gap, dice_oracle, hausdorff_oracle, iou_oracle, mask_pairs, random_nifti, resume_is_bitwise,
    same_bits,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::data::nifti::{read_volume, write_volume};
use voxgraph::data::{generate_synthetic_case, synth_id, synth_seed};
use voxgraph::graph::{build_grid_graph, Connectivity, GcaBlock, GcaOptions};
use voxgraph::inference::{axis_starts, sliding_window_infer, Blending, SlidingWindow};
use voxgraph::metrics::{dice, dice_from_pr, hd95, hd_max, iou, precision_recall, Hd95Variant};
use voxgraph::tensor::{ParamStore, Tape, Tensor};
use voxgraph::trainer::{plan_split, runlog, CaseSource, MemoryDataset, RunLogRow, TrainConfig, Trainer};
use voxgraph::verify;

const GIB: u64 = 1 << 30;

/// Writes past the test harness's output capture so every line lands in the
/// log whether or not the test passes.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line);
    let _ = out.flush();
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let reports = verify::check_all(2024).expect("gradient checks run");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .expect("non-empty");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 600.0,
        format!(
            "{} checks, max relative error {:.2e} in {}, failing {:?}, {:.1}s (limit 600s)",
            reports.len(),
            worst.max_relative_error,
            worst.name,
            failed,
            secs
        ),
    )
}

fn metric_oracles() -> Outcome {
    let spacings = [[1.0; 3], [1.5, 0.8, 1.1]];
    let mut mismatches = 0;
    let pairs = mask_pairs(200, 12, 2024);
    for (k, (a, b)) in pairs.iter().enumerate() {
        let spacing = spacings[k % 2];
        mismatches += usize::from(dice(a, b).unwrap().to_bits() != dice_oracle(a, b).to_bits());
        mismatches += usize::from(iou(a, b).unwrap().to_bits() != iou_oracle(a, b).to_bits());
        let got = (
            hd95(a, b, spacing, Hd95Variant::Standard).unwrap().map(f64::to_bits),
            hd_max(a, b, spacing).unwrap().map(f64::to_bits),
        );
        let want = match hausdorff_oracle(a, b, spacing) {
            Some((p, m)) => (Some(p.to_bits()), Some(m.to_bits())),
            None => (None, None),
        };
        mismatches += usize::from(got != want);
    }
    outcome(mismatches == 0, format!("{} pairs at 12³, {} mismatches", pairs.len(), mismatches))
}

fn dice_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for (a, b) in mask_pairs(200, 12, 2024) {
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
        if a.count() > 0 && b.count() > 0 {
            let (p, r) = precision_recall(&a, &b).unwrap();
            worst = worst.max((d - dice_from_pr(p, r)).abs());
        }
    }
    outcome(worst < 1e-12, format!("max deviation {:.2e} (limit 1e-12)", worst))
}

fn gca_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut row_err: f64 = 0.0;
    let mut identity_exact = true;
    for (d, h, w) in [(2, 2, 2), (3, 2, 1), (4, 4, 4), (1, 1, 5)] {
        let mut params = ParamStore::<f32>::new();
        let block = GcaBlock::new(&mut params, "gca", 4, GcaOptions::default(), &mut rng).unwrap();
        let edges = build_grid_graph(d, h, w, Connectivity::Six);
        let x = Tensor::from_fn(&[2, 4, d, h, w], |_| rng.random_range(-3.0f32..3.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = block.forward(&mut tape, &params, xv, &edges).unwrap();
        for row in tape.value(out.attention).data().chunks(d * h * w) {
            row_err = row_err.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
        block.set_identity(&mut params);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = block.forward(&mut tape, &params, xv, &edges).unwrap();
        identity_exact &= tape.value(out.output) == &x;
    }

    let (b, n, c) = (2, 8, 3);
    let mut params = ParamStore::<f64>::new();
    let block = GcaBlock::new(&mut params, "gca", c, GcaOptions::default(), &mut rng).unwrap();
    params.get_mut(block.gamma).value = Tensor::new(vec![1], vec![0.8]).unwrap();
    let edges = build_grid_graph(2, 2, 2, Connectivity::Six);
    let x = Tensor::from_fn(&[b, n, c], |_| rng.random_range(-1.0..1.0));
    let run = |x: Tensor<f64>, edges: &voxgraph::graph::EdgeIndex| {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = block.attend_nodes(&mut tape, &params, xv, edges).unwrap();
        tape.value(out.output).data().to_vec()
    };
    let reference = run(x.clone(), &edges);
    let mut perm_err: f64 = 0.0;
    for _ in 0..50 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut xp = vec![0.0; b * n * c];
        for bi in 0..b {
            for i in 0..n {
                for ch in 0..c {
                    xp[(bi * n + perm[i]) * c + ch] = x.data()[(bi * n + i) * c + ch];
                }
            }
        }
        let yp = run(Tensor::new(vec![b, n, c], xp).unwrap(), &edges.permuted(&perm));
        for bi in 0..b {
            for i in 0..n {
                for ch in 0..c {
                    let diff = yp[(bi * n + perm[i]) * c + ch] - reference[(bi * n + i) * c + ch];
                    perm_err = perm_err.max(diff.abs());
                }
            }
        }
    }
    outcome(
        row_err < 1e-6 && identity_exact && perm_err < 1e-6,
        format!(
            "row-sum error {:.2e}, identity exact {}, 50 permutations max deviation {:.2e}",
            row_err, identity_exact, perm_err
        ),
    )
}

/// Desk-scale training plus the resource checks on its run log.
fn desk_training() -> (Outcome, Outcome) {
    let mut config = TrainConfig::default();
    config.set("max_epochs", "30").unwrap();
    config.validate().unwrap();
    let cases = (0..250)
        .map(|i| generate_synthetic_case(&synth_id(i), synth_seed(config.seed, i), 32, [1.0; 3]).unwrap())
        .collect();
    let data = MemoryDataset { cases };
    let split = plan_split(&config, &data.ids()).unwrap();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    say(&format!(
        "  training: {} train / {} val cases, fold {}, seed {}, {} cores",
        split.train.len(),
        split.val.len(),
        config.fold,
        config.seed,
        cores
    ));

    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut trainer = Trainer::new(config).unwrap();
    let result = trainer.fit(&data, Some(dir.path()), |row| {
        let line = runlog::to_csv(std::slice::from_ref(row));
        say(&format!("  epoch {}", line.lines().nth(1).unwrap_or("")));
    });
    let wall = start.elapsed().as_secs_f64();
    let rows: Vec<RunLogRow> = match result {
        Ok(o) => o.runlog,
        Err(e) => {
            let msg = format!("training failed: {}", e);
            return (outcome(false, msg.clone()), outcome(false, msg));
        }
    };

    let best_wt = rows.iter().filter_map(|r| r.val.map(|v| v.dice[2])).fold(0.0, f64::max);
    let ratio = rows.last().unwrap().train_loss / rows[0].train_loss;
    let training = outcome(
        split.train.len() == 200 && split.val.len() == 50 && best_wt >= 0.90 && ratio < 0.5 && wall < 1800.0,
        format!(
            "best val WT Dice {:.4} (need ≥ 0.90), loss epoch {}/epoch 1 = {:.3} (need < 0.5), wall {:.0}s on {} cores (limit 1800s on 8)",
            best_wt,
            rows.len(),
            ratio,
            wall,
            cores
        ),
    );

    let logged = std::fs::read_to_string(dir.path().join(voxgraph::trainer::RUNLOG_FILE)).unwrap();
    let header_ok = logged
        .lines()
        .next()
        .is_some_and(|h| h.split(',').any(|c| c == "epoch_seconds") && h.split(',').any(|c| c == "peak_rss_bytes"));
    let parsed = runlog::from_csv(&logged).unwrap();
    let complete = parsed.len() == 30 && parsed.iter().all(|r| r.epoch_seconds > 0.0 && r.peak_rss_bytes > 0);
    let peak = parsed.iter().map(|r| r.peak_rss_bytes).max().unwrap_or(0);
    let resources = outcome(
        header_ok && complete && peak < 4 * GIB,
        format!(
            "peak RSS {:.2} GiB (limit 4), time and memory columns present {}, filled for all {} epochs {}",
            peak as f64 / GIB as f64,
            header_ok,
            parsed.len(),
            complete
        ),
    );
    (training, resources)
}

fn trainer_invariants() -> Outcome {
    let gap = accumulation_gap(2024);
    let dir = tempfile::tempdir().unwrap();
    let resumed = resume_is_bitwise(dir.path());
    outcome(
        gap < 1e-6 && resumed,
        format!("accumulation max deviation {:.2e} (limit 1e-6), resume bitwise {}", gap, resumed),
    )
}

fn sliding_window() -> Outcome {
    let rois = [8, 16, 32];
    let overlaps = [0.0, 0.25, 0.5];
    let values = [0.3f32, -1.7, 2.5];
    let model = |x: Tensor<f32>| -> voxgraph::Result<Tensor<f32>> {
        let s = x.shape().to_vec();
        let n: usize = s[2..].iter().product();
        Ok(Tensor::from_fn(&[s[0], 3, s[2], s[3], s[4]], |i| values[(i / n) % 3]))
    };
    let mut uncovered = 0;
    let mut worst: f32 = 0.0;
    let mut combos = 0;
    for roi in rois {
        for overlap in overlaps {
            for extent in 1..=64 {
                let Ok(starts) = axis_starts(extent, roi, overlap) else {
                    uncovered += usize::from(extent >= roi);
                    continue;
                };
                let mut covered = vec![false; extent];
                for &s in &starts {
                    covered[s..s + roi].iter_mut().for_each(|c| *c = true);
                }
                uncovered += covered.iter().filter(|c| !**c).count();
                let side = roi.min(8);
                for blending in [Blending::Gaussian, Blending::Constant] {
                    let sw = SlidingWindow {
                        roi: [roi, side, side],
                        overlap,
                        sw_batch: 2,
                        blending,
                        parallel: true,
                    };
                    let out = sliding_window_infer(&Tensor::zeros(&[1, extent, side, side]), &sw, model).unwrap();
                    let n = extent * side * side;
                    for (i, v) in out.data().iter().enumerate() {
                        let want = values[i / n];
                        worst = worst.max((v - want).abs() / want.abs().max(1.0));
                    }
                    combos += 1;
                }
            }
        }
    }
    outcome(
        uncovered == 0 && worst <= 1e-5,
        format!(
            "{} (extent, roi, overlap, blending) runs, {} uncovered voxels, constant model max relative deviation {:.2e}",
            combos, uncovered, worst
        ),
    )
}

fn nifti_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = 0;
    for k in 0..100 {
        let vol = random_nifti(&mut rng, k);
        let path = dir.path().join(format!("v{}.nii", k));
        write_volume(&path, &vol).unwrap();
        failures += usize::from(!read_volume(&path).is_ok_and(|back| same_bits(&vol, &back)));
    }
    outcome(failures == 0, format!("100 volumes over u8/i16/f32, {} not bitwise equal", failures))
}

#[test]
fn acceptance() {
    voxgraph::tune_allocator();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |n: usize, f: &dyn Fn() -> Outcome| {
        let o = f();
        say(&format!("criterion {}: {} {}", n, if o.passed { "PASS" } else { "FAIL" }, o.detail));
        results.push((n, o));
    };
    run(1, &gradient_fidelity);
    run(2, &metric_oracles);
    run(3, &dice_identities);
    run(4, &gca_invariants);
    run(6, &trainer_invariants);
    run(7, &sliding_window);
    run(8, &nifti_round_trip);
    let (training, resources) = desk_training();
    run(5, &|| outcome(training.passed, training.detail.clone()));
    run(9, &|| outcome(resources.passed, resources.detail.clone()));

    results.sort_by_key(|(n, _)| *n);
    say("summary:");
    for (n, o) in &results {
        say(&format!("criterion {}: {}", n, if o.passed { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failing criteria: {:?}", failed);
}
