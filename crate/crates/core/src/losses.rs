//! Cross-entropy and soft Dice with deep-supervision weighting.

use std::sync::Arc;

use voxgraph_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossType {
    CrossEntropy,
    Dice,
    Combined,
}

impl LossType {
    /// Numeric codes used in configuration files: 1, 2, 3.
    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(LossType::CrossEntropy),
            2 => Some(LossType::Dice),
            3 => Some(LossType::Combined),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            LossType::CrossEntropy => 1,
            LossType::Dice => 2,
            LossType::Combined => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub w_ce: f64,
    pub w_dice: f64,
    pub dice_eps: f64,
    /// Average per-item Dice over the batch; otherwise pool the batch into one volume.
    pub mean_batch: bool,
    pub loss_type: LossType,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_ce: 1.0,
            w_dice: 1.0,
            dice_eps: 1e-5,
            mean_batch: true,
            loss_type: LossType::Combined,
        }
    }
}

impl LossConfig {
    fn weights(&self) -> (f64, f64) {
        match self.loss_type {
            LossType::CrossEntropy => (self.w_ce, 0.0),
            LossType::Dice => (0.0, self.w_dice),
            LossType::Combined => (self.w_ce, self.w_dice),
        }
    }
}

/// Weights `1, 1/2, 1/4, ...` for the main head and each auxiliary level,
/// normalised to sum to one.
pub fn deep_supervision_weights(n_outputs: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n_outputs).map(|k| 0.5f64.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// `[B, n_classes, D, H, W]` indicator tensor.
pub fn one_hot<T: Element>(labels: &[LabelVolume], n_classes: usize) -> Result<Tensor<T>> {
    let dims = check_batch(labels)?;
    let s: usize = dims.iter().product();
    let mut out = Tensor::zeros(&[labels.len(), n_classes, dims[0], dims[1], dims[2]]);
    let data = out.data_mut();
    for (b, lv) in labels.iter().enumerate() {
        for (v, &l) in lv.data.iter().enumerate() {
            if l as usize >= n_classes {
                return Err(Error::Data(format!("label {} outside 0..{}", l, n_classes)));
            }
            data[(b * n_classes + l as usize) * s + v] = T::one();
        }
    }
    Ok(out)
}

fn check_batch(labels: &[LabelVolume]) -> Result<[usize; 3]> {
    let first = labels.first().ok_or_else(|| Error::Data("empty label batch".into()))?;
    if labels.iter().any(|l| l.dims != first.dims) {
        return Err(Error::Data("label volumes in a batch differ in shape".into()));
    }
    Ok(first.dims)
}

/// Nearest-neighbour downsampling by `factor`: output voxel `o` takes input
/// voxel `floor((o + 0.5) · factor)` on every axis.
pub fn downsample_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    if factor == 0 || labels.dims.iter().any(|&e| e % factor != 0) {
        return Err(Error::Data(format!(
            "dims {:?} not divisible by {}",
            labels.dims, factor
        )));
    }
    let [d, h, w] = labels.dims.map(|e| e / factor);
    let pick = |o: usize| (2 * o + 1) * factor / 2;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                data.push(labels.data[(pick(z) * labels.dims[1] + pick(y)) * labels.dims[2] + pick(x)]);
            }
        }
    }
    Ok(LabelVolume { dims: [d, h, w], data })
}

/// Soft Dice on probabilities against a one-hot target, averaged over classes.
pub fn soft_dice_loss<T: Element>(tape: &mut Tape<T>, probs: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    if tape.shape(probs) != tape.shape(target) {
        return Err(Error::Config(format!(
            "dice: probabilities {:?} vs target {:?}",
            tape.shape(probs),
            tape.shape(target)
        )));
    }
    let nd = tape.shape(probs).len();
    if nd < 3 {
        return Err(Error::Config("dice expects [B, C, spatial...]".into()));
    }
    let axes: Vec<usize> = if cfg.mean_batch {
        (2..nd).collect()
    } else {
        std::iter::once(0).chain(2..nd).collect()
    };
    let eps = T::from_f64_lossy(cfg.dice_eps);
    let pt = tape.mul(probs, target)?;
    let inter = tape.sum_axes(pt, &axes)?;
    let psum = tape.sum_axes(probs, &axes)?;
    let tsum = tape.sum_axes(target, &axes)?;
    let num = tape.scale(inter, T::from_f64_lossy(2.0));
    let num = tape.add_scalar(num, eps);
    let den = tape.add(psum, tsum)?;
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(num, den)?;
    let mean_ratio = tape.mean(ratio);
    let neg = tape.scale(mean_ratio, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean over voxels and batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[LabelVolume]) -> Result<Var> {
    let dims = check_batch(labels)?;
    let shape = tape.shape(logits);
    if shape.len() != 5 || shape[0] != labels.len() || shape[2..] != dims {
        return Err(Error::Config(format!(
            "cross entropy: logits {:?} vs {} label volumes of {:?}",
            shape,
            labels.len(),
            dims
        )));
    }
    let classes: Arc<[usize]> = labels
        .iter()
        .flat_map(|l| l.data.iter().map(|&v| v as usize))
        .collect();
    if let Some(&bad) = classes.iter().find(|&&c| c >= shape[1]) {
        return Err(Error::Data(format!("label {} outside 0..{}", bad, shape[1])));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.select_class(logp, classes)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

/// `w_ce · CE + w_dice · Dice` of one head.
pub fn head_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[LabelVolume], cfg: &LossConfig) -> Result<Var> {
    let (w_ce, w_dice) = cfg.weights();
    let mut terms = Vec::new();
    if w_ce != 0.0 {
        let ce = cross_entropy(tape, logits, labels)?;
        terms.push(tape.scale(ce, T::from_f64_lossy(w_ce)));
    }
    if w_dice != 0.0 {
        let n_classes = tape.shape(logits)[1];
        let probs = tape.softmax(logits, 1)?;
        let target = tape.constant(one_hot(labels, n_classes)?);
        let dice = soft_dice_loss(tape, probs, target, cfg)?;
        terms.push(tape.scale(dice, T::from_f64_lossy(w_dice)));
    }
    let mut total = terms
        .first()
        .copied()
        .ok_or_else(|| Error::Config("all loss weights are zero".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Deep-supervised loss: the main head plus each auxiliary head (entry `k - 1`
/// at resolution `1 / 2^k`) against nearest-neighbour downsampled labels.
pub fn combined_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    aux: &[Var],
    labels: &[LabelVolume],
    cfg: &LossConfig,
) -> Result<Var> {
    let weights = deep_supervision_weights(1 + aux.len());
    let main = head_loss(tape, logits, labels, cfg)?;
    let mut total = tape.scale(main, T::from_f64_lossy(weights[0]));
    for (k, (&a, &w)) in aux.iter().zip(&weights[1..]).enumerate() {
        let factor = 1usize << (k + 1);
        let small = labels
            .iter()
            .map(|l| downsample_labels(l, factor))
            .collect::<Result<Vec<_>>>()?;
        let term = head_loss(tape, a, &small, cfg)?;
        let term = tape.scale(term, T::from_f64_lossy(w));
        total = tape.add(total, term)?;
    }
    Ok(total)
}
