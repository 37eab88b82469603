//! Finite-difference verification suites: every tape operation, one graph
//! cross attention block, and a small end-to-end network under the training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph_tensor::gradcheck::{check_all_ops, finite_diff_check_params, DEFAULT_EPS};
use voxgraph_tensor::{ParamStore, Tape, Tensor, Var};

use crate::error::Result;
use crate::graph::{build_grid_graph, Connectivity, GcaBlock, GcaOptions};
use crate::losses::{combined_loss, LossConfig};
use crate::segnet::{NetworkConfig, SegNet};
use crate::volume::LabelVolume;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(v * r)` with `r` drawn from `seed`.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(tape.shape(v), &mut rng));
    let p = tape.mul(v, r)?;
    Ok(tape.sum(p))
}

pub fn check_ops(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(check_all_ops(seed)?
        .into_iter()
        .map(|c| CheckReport {
            name: format!("op.{}", c.op),
            max_relative_error: c.max_relative_error,
            coordinates: 0,
        })
        .collect())
}

/// One attention block on a 2×2×2 grid with two channels, checked with
/// respect to its input and every parameter including γ.
pub fn check_gca(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<f64>::new();
    let block = GcaBlock::new(&mut params, "gca", 2, GcaOptions::default(), &mut rng)?;
    // γ starts at zero, which would hide the attention path from the check.
    params.get_mut(block.gamma).value = Tensor::new(vec![1], vec![0.7])?;
    let edges = build_grid_graph(2, 2, 2, Connectivity::Six);
    let x = random(&[1, 2, 2, 2, 2], &mut rng);
    // The input rides along as a parameter so one pass covers it too.
    let input = params.add("input", x)?;
    let proj_seed = rng.random();
    let report = finite_diff_check_params(
        |t, p| {
            let xv = t.param(p, input);
            let out = block.forward(t, p, xv, &edges).map_err(to_tensor_err)?;
            project(t, out.output, proj_seed).map_err(to_tensor_err)
        },
        &mut params,
        DEFAULT_EPS,
    )?;
    Ok(vec![CheckReport {
        name: format!("gca (worst {})", report.worst.unwrap_or_default()),
        max_relative_error: report.max_relative_error,
        coordinates: report.coordinates,
    }])
}

/// Configuration of the end-to-end check: 8³ input, two stages, attention on
/// the full-resolution decoder stage, deep supervision on.
pub fn end2end_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 4,
        n_classes: 4,
        base_width: 2,
        n_stages: 2,
        kernel_size: 3,
        blocks_per_stage: 1,
        deep_sup: true,
        roi: [8; 3],
        gca: GcaOptions::default(),
    }
}

/// Gradient of the combined loss through the whole network with respect to
/// every parameter.
pub fn check_end2end(seed: u64) -> Result<Vec<CheckReport>> {
    let cfg = end2end_config();
    let (net, mut params) = SegNet::new::<f64>(cfg.clone(), seed)?;
    for (_, block) in net.gca_blocks() {
        params.get_mut(block.gamma).value = Tensor::new(vec![1], vec![0.5])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random(&[1, cfg.in_channels, 8, 8, 8], &mut rng);
    let labels = LabelVolume::new([8; 3], (0..512).map(|_| rng.random_range(0..cfg.n_classes as u8)).collect())?;
    let loss_cfg = LossConfig::default();
    let labels = [labels];
    let report = finite_diff_check_params(
        |t, p| {
            let xv = t.constant(x.clone());
            let out = net.forward(t, p, xv).map_err(to_tensor_err)?;
            combined_loss(t, out.logits, &out.aux, &labels, &loss_cfg).map_err(to_tensor_err)
        },
        &mut params,
        DEFAULT_EPS,
    )?;
    Ok(vec![CheckReport {
        name: format!("end2end.params (worst {})", report.worst.unwrap_or_default()),
        max_relative_error: report.max_relative_error,
        coordinates: report.coordinates,
    }])
}

fn to_tensor_err(e: crate::Error) -> voxgraph_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => voxgraph_tensor::TensorError::InvalidArgument {
            op: "verify",
            detail: other.to_string(),
        },
    }
}

/// All three suites.
pub fn check_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = check_ops(seed)?;
    out.extend(check_gca(seed)?);
    out.extend(check_end2end(seed)?);
    Ok(out)
}
