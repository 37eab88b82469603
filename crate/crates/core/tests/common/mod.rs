//! Oracles and generators shared by the integration suites and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::volume::Mask;

/// Pairs of masks at `n³` mixing sparse noise, dense noise, cuboids, shifted
/// copies and empty masks.
pub fn mask_pairs(count: usize, n: usize, seed: u64) -> Vec<(Mask, Mask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [n; 3];
    let total = n * n * n;
    let noise = |rng: &mut ChaCha8Rng, p: f64| Mask::new(dims, (0..total).map(|_| rng.random_bool(p)).collect()).unwrap();
    let cuboid = |rng: &mut ChaCha8Rng| {
        let lo: Vec<usize> = (0..3).map(|_| rng.random_range(0..n)).collect();
        let hi: Vec<usize> = lo.iter().map(|&l| rng.random_range(l..n) + 1).collect();
        let mut m = Mask::empty(dims);
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    let i = m.index(z, y, x);
                    m.data[i] = true;
                }
            }
        }
        m
    };
    (0..count)
        .map(|k| match k % 5 {
            0 => {
                let p = rng.random_range(0.01..0.2);
                (noise(&mut rng, p), noise(&mut rng, p))
            }
            1 => {
                let (p, q) = (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9));
                (noise(&mut rng, p), noise(&mut rng, q))
            }
            2 => (cuboid(&mut rng), cuboid(&mut rng)),
            3 => {
                // A cuboid against a copy with a few voxels flipped.
                let a = cuboid(&mut rng);
                let mut b = a.clone();
                for _ in 0..rng.random_range(0..6) {
                    let i = rng.random_range(0..total);
                    b.data[i] = !b.data[i];
                }
                (a, b)
            }
            _ => {
                if k % 10 == 4 {
                    (Mask::empty(dims), noise(&mut rng, 0.1))
                } else {
                    (noise(&mut rng, 0.05), cuboid(&mut rng))
                }
            }
        })
        .collect()
}

pub struct Counts {
    pub inter: usize,
    pub pred: usize,
    pub gt: usize,
    pub union: usize,
}

pub fn counts(a: &Mask, b: &Mask) -> Counts {
    let mut c = Counts { inter: 0, pred: 0, gt: 0, union: 0 };
    for i in 0..a.data.len() {
        if a.data[i] {
            c.pred += 1;
        }
        if b.data[i] {
            c.gt += 1;
        }
        if a.data[i] && b.data[i] {
            c.inter += 1;
        }
        if a.data[i] || b.data[i] {
            c.union += 1;
        }
    }
    c
}

pub fn dice_oracle(a: &Mask, b: &Mask) -> f64 {
    let c = counts(a, b);
    if c.pred + c.gt == 0 {
        1.0
    } else {
        2.0 * c.inter as f64 / (c.pred + c.gt) as f64
    }
}

pub fn iou_oracle(a: &Mask, b: &Mask) -> f64 {
    let c = counts(a, b);
    if c.union == 0 {
        1.0
    } else {
        c.inter as f64 / c.union as f64
    }
}

/// Voxels with a 6-neighbour position that is off the grid or unset.
pub fn boundary_oracle(m: &Mask) -> Vec<[i64; 3]> {
    let [d, h, w] = m.dims.map(|e| e as i64);
    let on = |z: i64, y: i64, x: i64| z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w && m.data[((z * h + y) * w + x) as usize];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !on(z, y, x) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !on(z + a, y + b, x + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn distance(p: [i64; 3], q: [i64; 3], spacing: [f64; 3]) -> f64 {
    let dz = (p[0] - q[0]) as f64 * spacing[0];
    let dy = (p[1] - q[1]) as f64 * spacing[1];
    let dx = (p[2] - q[2]) as f64 * spacing[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Every nearest distance from `from` to `to`, computed pair by pair.
pub fn nearest_all_pairs(from: &[[i64; 3]], to: &[[i64; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&p| {
            let all: Vec<f64> = to.iter().map(|&q| distance(p, q, spacing)).collect();
            all.into_iter().fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Linear interpolation between order statistics at rank `q·(n − 1)`.
pub fn percentile_oracle(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// `(hd95, hd_max)` by brute force, `None` when either mask is empty.
pub fn hausdorff_oracle(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Option<(f64, f64)> {
    let (ba, bb) = (boundary_oracle(a), boundary_oracle(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let da = nearest_all_pairs(&ba, &bb, spacing);
    let db = nearest_all_pairs(&bb, &ba, spacing);
    let max_a = da.iter().cloned().fold(0.0, f64::max);
    let max_b = db.iter().cloned().fold(0.0, f64::max);
    let p95 = percentile_oracle(da, 0.95).max(percentile_oracle(db, 0.95));
    Some((p95, max_a.max(max_b)))
}

/// Random NIfTI volume of one of the supported dtypes, chosen by `k % 3`.
/// Float payloads are arbitrary bit patterns, NaNs included.
pub fn random_nifti(rng: &mut ChaCha8Rng, k: usize) -> voxgraph::data::nifti::NiftiVolume {
    use voxgraph::data::nifti::{NiftiVolume, VoxelData};
    let dims = [rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12)];
    let n: usize = dims.iter().product();
    let data = match k % 3 {
        0 => VoxelData::U8((0..n).map(|_| rng.random()).collect()),
        1 => VoxelData::I16((0..n).map(|_| rng.random()).collect()),
        _ => VoxelData::F32((0..n).map(|_| f32::from_bits(rng.random())).collect()),
    };
    let pixdim = [0; 3].map(|_| rng.random_range(0.2f32..4.0));
    NiftiVolume::new(dims, pixdim, data).unwrap()
}

/// Bit-level equality, so NaN payloads count.
pub fn same_bits(a: &voxgraph::data::nifti::NiftiVolume, b: &voxgraph::data::nifti::NiftiVolume) -> bool {
    use voxgraph::data::nifti::VoxelData;
    let payload = match (&a.data, &b.data) {
        (VoxelData::U8(x), VoxelData::U8(y)) => x == y,
        (VoxelData::I16(x), VoxelData::I16(y)) => x == y,
        (VoxelData::F32(x), VoxelData::F32(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
        _ => false,
    };
    payload && a.dims == b.dims && a.pixdim.map(f32::to_bits) == b.pixdim.map(f32::to_bits)
}

/// Small but complete training setup: 16³ cases, two stages, narrow
/// channels, no data workers.
pub fn tiny_config() -> voxgraph::trainer::TrainConfig {
    let mut cfg = voxgraph::trainer::TrainConfig::default();
    for (k, v) in [
        ("mednext_size", "S"),
        ("n_stages", "2"),
        ("roi_x", "16"),
        ("roi_y", "16"),
        ("roi_z", "16"),
        ("num_workers", "0"),
        ("max_epochs", "3"),
        ("accumulate_grad_batches", "2"),
        ("n_folds", "3"),
        ("fold", "0"),
        ("seed", "7"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

pub fn tiny_dataset(n: usize, seed: u64) -> voxgraph::trainer::MemoryDataset {
    use voxgraph::data::{generate_synthetic_case, synth_id, synth_seed};
    let cases = (0..n)
        .map(|i| generate_synthetic_case(&synth_id(i), synth_seed(seed, i), 16, [1.0; 3]).unwrap())
        .collect();
    voxgraph::trainer::MemoryDataset { cases }
}

/// Largest parameter difference between one AdamW step on a pooled batch of
/// four and the same step after accumulating four single-case micro-batches,
/// in 64-bit arithmetic. With `mean_batch` Dice is taken per case and then
/// averaged, so the pooled loss is the mean of the micro-batch losses.
pub fn accumulation_gap(seed: u64) -> f64 {
    use voxgraph::losses::LossConfig;
    use voxgraph::segnet::SegNet;
    use voxgraph::tensor::Tensor;
    use voxgraph::trainer::{accumulate_gradients, AdamW};
    use voxgraph::volume::LabelVolume;

    let cfg = voxgraph::verify::end2end_config();
    let (net, init) = SegNet::new::<f64>(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 4;
    let per_case = cfg.in_channels * 512;
    let x: Vec<f64> = (0..batch * per_case).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<LabelVolume> = (0..batch)
        .map(|_| LabelVolume::new([8; 3], (0..512).map(|_| rng.random_range(0..4u8)).collect()).unwrap())
        .collect();
    let loss = LossConfig::default();

    let mut pooled = init.clone();
    let input = Tensor::new(vec![batch, cfg.in_channels, 8, 8, 8], x.clone()).unwrap();
    accumulate_gradients(&net, &mut pooled, input, &labels, &loss, 1.0).unwrap();

    let mut micro = init.clone();
    for b in 0..batch {
        let input = Tensor::new(vec![1, cfg.in_channels, 8, 8, 8], x[b * per_case..(b + 1) * per_case].to_vec()).unwrap();
        accumulate_gradients(&net, &mut micro, input, &labels[b..b + 1], &loss, 1.0 / batch as f64).unwrap();
    }

    let mut opt_a = AdamW::new(&pooled);
    let mut opt_b = AdamW::new(&micro);
    opt_a.step(&mut pooled, 1e-3, 1e-6);
    opt_b.step(&mut micro, 1e-3, 1e-6);
    let grads = pooled.flatten_grads().into_iter().zip(micro.flatten_grads()).map(|(a, b)| (a - b).abs());
    let values = pooled.flatten_values().into_iter().zip(micro.flatten_values()).map(|(a, b)| (a - b).abs());
    grads.chain(values).fold(0.0, f64::max)
}

/// Trains three epochs straight through and again as two epochs, a
/// checkpoint written to disk and reloaded, then one more epoch. Returns
/// whether parameters, optimizer step count and the deterministic run-log
/// columns agree bitwise.
pub fn resume_is_bitwise(dir: &std::path::Path) -> bool {
    use voxgraph::tensor::Checkpoint;
    use voxgraph::trainer::{plan_split, CaseSource, Trainer};

    let cfg = tiny_config();
    let data = tiny_dataset(6, 3);
    let split = plan_split(&cfg, &data.ids()).unwrap();

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        straight.train_epoch(&data, &split).unwrap();
    }

    let mut first = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..2 {
        first.train_epoch(&data, &split).unwrap();
    }
    let path = dir.join("resume.ckpt");
    first.checkpoint().unwrap().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(cfg, &Checkpoint::load(&path).unwrap()).unwrap();
    resumed.train_epoch(&data, &split).unwrap();

    let bits = |t: &Trainer| t.params().flatten_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let log = |t: &Trainer| {
        t.runlog()
            .iter()
            .map(|r| format!("{:?}", r.deterministic_part()))
            .collect::<Vec<_>>()
    };
    bits(&straight) == bits(&resumed)
        && straight.optimizer_steps() == resumed.optimizer_steps()
        && log(&straight) == log(&resumed)
}
