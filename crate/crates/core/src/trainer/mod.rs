//! Training loop: accumulation windows, AdamW under a cosine-with-warmup
//! schedule, per-epoch validation by sliding-window inference, checkpoints.

pub mod config;
pub mod monitor;
pub mod optim;
pub mod runlog;
pub mod schedule;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use voxgraph_tensor::{Checkpoint, Element, ParamStore, Tape, Tensor};

use crate::data::{
    append_channel, augment, binarize, case_seed, crop_or_pad, crop_or_pad_labels, pad_extents, znormalize, Case,
    DiskDataset, SplitPlan,
};
use crate::error::{Error, Result};
use crate::inference::{postprocess, sliding_window_infer};
use crate::losses::{combined_loss, head_loss, LossConfig};
use crate::metrics::dice;
use crate::segnet::{load_pretrained, predict_labels, SegNet};
use crate::volume::{LabelVolume, Region};

pub use config::TrainConfig;
pub use monitor::{Monitor, ResourceSample};
pub use optim::AdamW;
pub use runlog::{best_row, RunLogRow, Validation, RUNLOG_HEADER};
pub use schedule::{cosine_warmup_lr, warmup_steps};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Anything that can list and load cases.
pub trait CaseSource: Sync {
    fn ids(&self) -> Vec<String>;
    fn load(&self, id: &str) -> Result<Case>;
}

impl CaseSource for DiskDataset {
    fn ids(&self) -> Vec<String> {
        self.ids.clone()
    }

    fn load(&self, id: &str) -> Result<Case> {
        DiskDataset::load(self, id)
    }
}

/// Cases held in memory, looked up by id.
#[derive(Debug, Clone, Default)]
pub struct MemoryDataset {
    pub cases: Vec<Case>,
}

impl CaseSource for MemoryDataset {
    fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }

    fn load(&self, id: &str) -> Result<Case> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no case {:?}", id)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Train/validation ids for a config. Debug runs keep the first two sorted
/// ids, training on one and validating on the other.
pub fn plan_split(config: &TrainConfig, ids: &[String]) -> Result<Split> {
    if ids.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if config.is_debugging {
        sorted.truncate(config::DEBUG_CASES);
        let val = vec![sorted.last().cloned().expect("nonempty")];
        return Ok(Split {
            train: vec![sorted[0].clone()],
            val,
        });
    }
    let plan = SplitPlan {
        n_folds: config.n_folds,
        fold: config.fold,
        seed: config.seed,
    };
    let (train, val) = plan.split(&sorted)?;
    Ok(Split {
        train: if config.all_samples_as_train { sorted } else { train },
        val,
    })
}

/// Normalize, crop or pad to the roi and, with `aug_type=1`, augment with a
/// generator seeded from `(seed, case id, epoch)`.
pub fn prepare_training_case(config: &TrainConfig, mut case: Case, epoch: usize) -> Result<Case> {
    znormalize(&mut case.image)?;
    let case = crop_or_pad(&case, config.roi())?;
    if config.aug_type == 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(config.seed, &case.id, epoch as u64));
        Ok(augment(&case, &mut rng)?.0)
    } else {
        Ok(case)
    }
}

/// Stacks case images into `[B, C, D, H, W]`, appending the tumour mask as an
/// extra channel when `binary_channel` is set.
pub fn model_input(config: &TrainConfig, cases: &[&Case]) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = None;
    for case in cases {
        let image = if config.binary_channel {
            append_channel(&case.image, &binarize(&case.labels))?
        } else {
            case.image.clone()
        };
        if shape.get_or_insert_with(|| image.shape().to_vec()) != image.shape() {
            return Err(Error::Data("cases in one batch differ in shape".into()));
        }
        data.extend_from_slice(image.data());
    }
    let mut full = vec![cases.len()];
    full.extend(shape.unwrap_or_default());
    Ok(Tensor::new(full, data)?)
}

/// Forward and backward of one micro-batch. Gradients of `weight · loss`
/// are added to `params`; the unweighted loss is returned.
pub fn accumulate_gradients<T: Element>(
    net: &SegNet,
    params: &mut ParamStore<T>,
    input: Tensor<T>,
    labels: &[LabelVolume],
    loss: &LossConfig,
    weight: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let out = net.forward(&mut tape, params, x)?;
    let total = combined_loss(&mut tape, out.logits, &out.aux, labels, loss)?;
    let value = tape.value(total).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", value)));
    }
    let scaled = tape.scale(total, T::from_f64_lossy(weight));
    tape.backward(scaled, params)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub runlog: Vec<RunLogRow>,
    /// Epoch and mean Dice of the best validation.
    pub best: Option<(usize, f64)>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    config: TrainConfig,
    net: SegNet,
    params: ParamStore<f32>,
    optim: AdamW<f32>,
    epochs_done: usize,
    runlog: Vec<RunLogRow>,
    monitor: Monitor,
    workers: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (net, mut params) = SegNet::new::<f32>(config.network()?, config.seed)?;
        if let Some(path) = &config.mednext_ckpt {
            let ckpt = Checkpoint::load(path).map_err(|e| Error::file(path, e.to_string()))?;
            load_pretrained(&mut params, &ckpt)?;
        }
        let optim = AdamW::new(&params);
        let workers = match config.num_workers {
            0 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} data workers: {}", n, e)))?,
            ),
        };
        Ok(Trainer {
            config,
            net,
            params,
            optim,
            epochs_done: 0,
            runlog: Vec::new(),
            monitor: Monitor::start(),
            workers,
        })
    }

    /// Continues from a checkpoint written by [`checkpoint`](Self::checkpoint)
    /// under the same configuration.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::Config(
                "checkpoint was written under a different configuration; resume with the config saved next to it".into(),
            ));
        }
        let mut t = Trainer::new(config)?;
        ckpt.load_params(&mut t.params)?;
        t.optim = AdamW::load(&t.params, ckpt)?;
        t.epochs_done = ckpt.epoch as usize;
        t.runlog = match ckpt.metadata.get("runlog") {
            Some(csv) => runlog::from_csv(csv)?,
            None => Vec::new(),
        };
        if t.runlog.len() != t.epochs_done {
            return Err(Error::Data("checkpoint run log does not match its epoch count".into()));
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn runlog(&self) -> &[RunLogRow] {
        &self.runlog
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optim.t
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        let micro = n_train.div_ceil(self.config.batch_size);
        micro.div_ceil(self.config.accumulate_grad_batches)
    }

    fn schedule(&self, n_train: usize) -> (usize, usize) {
        let total = self.steps_per_epoch(n_train) * self.config.effective_epochs();
        (total, warmup_steps(total, self.config.warmup_fraction))
    }

    fn load_prepared(&self, data: &dyn CaseSource, ids: &[String], epoch: usize) -> Result<Vec<Case>> {
        let prep = |id: &String| prepare_training_case(&self.config, data.load(id)?, epoch);
        match &self.workers {
            Some(pool) => pool.install(|| ids.par_iter().map(prep).collect()),
            None => ids.iter().map(prep).collect(),
        }
    }

    /// Runs one epoch over `split.train`, validating when due.
    pub fn train_epoch(&mut self, data: &dyn CaseSource, split: &Split) -> Result<RunLogRow> {
        if split.train.is_empty() {
            return Err(Error::Data("no training cases".into()));
        }
        let epoch = self.epochs_done + 1;
        self.monitor.restart();
        let (total_steps, warmup) = self.schedule(split.train.len());
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(case_seed(self.config.seed, "epoch-order", epoch as u64)));
        let micro_batches: Vec<&[String]> = order.chunks(self.config.batch_size).collect();
        let loss_cfg = self.config.loss();
        let mut losses = Vec::with_capacity(micro_batches.len());
        let mut lr = 0.0;
        for window in micro_batches.chunks(self.config.accumulate_grad_batches) {
            let ids: Vec<String> = window.iter().flat_map(|b| b.iter().cloned()).collect();
            let cases = self.load_prepared(data, &ids, epoch)?;
            let weight = 1.0 / window.len() as f64;
            let mut inputs = Vec::with_capacity(window.len());
            let mut offset = 0;
            for batch in window {
                let group: Vec<&Case> = cases[offset..offset + batch.len()].iter().collect();
                offset += batch.len();
                let labels: Vec<LabelVolume> = group.iter().map(|c| c.labels.clone()).collect();
                inputs.push((model_input(&self.config, &group)?, labels, *batch));
            }
            // Micro-batches run concurrently, each into its own gradient buffer;
            // buffers are summed in window order so the result does not depend
            // on the thread count.
            let (net, base) = (&self.net, &self.params);
            let results: Vec<Result<(f64, ParamStore<f32>)>> = inputs
                .into_par_iter()
                .map(|(input, labels, batch)| {
                    let mut local = base.clone();
                    let loss = accumulate_gradients(net, &mut local, input, &labels, &loss_cfg, weight).map_err(|e| {
                        match e {
                            Error::Numerical(m) => {
                                Error::Numerical(format!("{} at epoch {} on batch {:?}", m, epoch, batch))
                            }
                            other => other,
                        }
                    })?;
                    Ok((loss, local))
                })
                .collect();
            for r in results {
                let (loss, local) = r?;
                for (p, (_, q)) in self.params.iter_mut().zip(local.iter()) {
                    for (g, &d) in p.grad.data_mut().iter_mut().zip(q.grad.data()) {
                        *g += d;
                    }
                }
                losses.push(loss);
            }
            lr = cosine_warmup_lr(self.optim.t as usize + 1, total_steps, warmup, self.config.lr);
            self.optim.step(&mut self.params, lr, self.config.weight_decay);
            self.params.zero_grad();
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val = if epoch % self.config.check_val_every_n_epoch == 0 && !split.val.is_empty() {
            Some(self.validate(data, &split.val)?)
        } else {
            None
        };
        let res = self.monitor.sample();
        let row = RunLogRow {
            epoch,
            train_loss,
            val,
            lr,
            epoch_seconds: res.wall.as_secs_f64(),
            peak_rss_bytes: res.peak_rss_bytes,
        };
        self.runlog.push(row.clone());
        self.epochs_done = epoch;
        Ok(row)
    }

    /// Mean main-head loss and per-region Dice over full-volume sliding-window
    /// predictions.
    pub fn validate(&self, data: &dyn CaseSource, ids: &[String]) -> Result<Validation> {
        let per_case: Vec<Result<(f64, [f64; 3])>> = ids
            .par_iter()
            .map(|id| {
                let mut case = data.load(id)?;
                znormalize(&mut case.image)?;
                let original = case.labels.dims;
                let padded = crop_or_pad(&case, pad_extents(original, self.config.roi()))?;
                let (logits, loss) = evaluate_volume(&self.config, &self.net, &self.params, &padded)?;
                let mut pred = crop_or_pad_labels(&predict_labels(&logits)?.remove(0), original);
                if self.config.postprocess {
                    pred = postprocess(&pred, self.config.min_component_voxels);
                }
                let mut d = [0.0; 3];
                for (k, r) in Region::ALL.into_iter().enumerate() {
                    d[k] = dice(&pred.region(r), &case.labels.region(r))?;
                }
                Ok((loss, d))
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut dice_sum = [0.0; 3];
        for r in per_case {
            let (loss, d) = r?;
            loss_sum += loss;
            for k in 0..3 {
                dice_sum[k] += d[k];
            }
        }
        let n = ids.len() as f64;
        Ok(Validation {
            loss: loss_sum / n,
            dice: dice_sum.map(|d| d / n),
        })
    }

    /// Parameters, optimizer state and run log.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.config.hash(), self.epochs_done as u64, self.optim.t);
        ckpt.put_params(&self.params);
        self.optim.save(&self.params, &mut ckpt)?;
        ckpt.metadata.insert("config".into(), self.config.to_kv());
        ckpt.metadata.insert("runlog".into(), runlog::to_csv(&self.runlog));
        Ok(ckpt)
    }

    /// Trains until the epoch budget is spent. With `out_dir`, writes the
    /// resolved config, `last.ckpt` and the run log after every epoch and
    /// `best.ckpt` whenever mean validation Dice improves.
    pub fn fit(
        &mut self,
        data: &dyn CaseSource,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&RunLogRow),
    ) -> Result<TrainOutcome> {
        let split = plan_split(&self.config, &data.ids())?;
        let mut paths = (None, None);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), self.config.to_kv())?;
        }
        while self.epochs_done < self.config.effective_epochs() {
            let previous_best = best_row(&self.runlog).and_then(|r| r.val).map(|v| v.mean_dice());
            let row = self.train_epoch(data, &split)?;
            on_epoch(&row);
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint()?;
                let last = dir.join(LAST_CHECKPOINT);
                ckpt.save(&last)?;
                std::fs::write(dir.join(RUNLOG_FILE), runlog::to_csv(&self.runlog))?;
                paths.0 = Some(last);
                let improved = match (row.val, previous_best) {
                    (Some(v), Some(b)) => v.mean_dice() > b,
                    (Some(_), None) => true,
                    _ => false,
                };
                if improved {
                    let best = dir.join(BEST_CHECKPOINT);
                    let mut ckpt = ckpt;
                    ckpt.metadata.insert("best_epoch".into(), row.epoch.to_string());
                    ckpt.save(&best)?;
                    paths.1 = Some(best);
                }
            }
        }
        if let Some(dir) = out_dir {
            let best = dir.join(BEST_CHECKPOINT);
            if paths.1.is_none() && best.exists() {
                paths.1 = Some(best);
            }
        }
        Ok(TrainOutcome {
            runlog: self.runlog.clone(),
            best: best_row(&self.runlog).and_then(|r| r.val.map(|v| (r.epoch, v.mean_dice()))),
            last_checkpoint: paths.0,
            best_checkpoint: paths.1,
        })
    }
}

/// Sliding-window logits `[1, K, D, H, W]` of a normalized case at least roi
/// in size, and the main-head loss against its labels.
pub fn evaluate_volume(
    config: &TrainConfig,
    net: &SegNet,
    params: &ParamStore<f32>,
    case: &Case,
) -> Result<(Tensor<f32>, f64)> {
    let image = if config.binary_channel {
        append_channel(&case.image, &binarize(&case.labels))?
    } else {
        case.image.clone()
    };
    let logits = sliding_window_infer(&image, &config.sliding_window(), |tile| net.predict(params, tile))?;
    let mut shape = vec![1];
    shape.extend_from_slice(logits.shape());
    let logits = logits.reshape(&shape)?;
    let mut tape = Tape::<f32>::inference();
    let l = tape.constant(logits.clone());
    let labels = std::slice::from_ref(&case.labels);
    let loss = head_loss(&mut tape, l, labels, &config.loss())?;
    Ok((logits, tape.value(loss).data()[0] as f64))
}

/// Trains under `config` on `data`, writing checkpoints and the run log to
/// `out_dir`.
pub fn train(config: TrainConfig, data: &dyn CaseSource, out_dir: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    trainer.fit(data, Some(out_dir), |_| {})
}

/// Configuration, network and weights stored in a training checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TrainConfig, SegNet, ParamStore<f32>)> {
    let text = ckpt
        .metadata
        .get("config")
        .ok_or_else(|| Error::Data("checkpoint carries no training configuration".into()))?;
    let config = TrainConfig::parse(text)?;
    let (net, mut params) = SegNet::new::<f32>(config.network()?, config.seed)?;
    ckpt.load_params(&mut params)?;
    Ok((config, net, params))
}

/// Labels for a raw `[C, D, H, W]` image: normalized, padded up to the roi,
/// predicted tile by tile, cropped back and optionally cleaned up.
pub fn segment(config: &TrainConfig, net: &SegNet, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<LabelVolume> {
    if config.binary_channel {
        return Err(Error::Config(
            "binary_channel=true models take the tumour mask as input and cannot segment unlabelled volumes".into(),
        ));
    }
    let shape = image.shape();
    if shape.len() != 4 {
        return Err(Error::Data(format!("expected a [C, D, H, W] image, got {:?}", shape)));
    }
    let original = [shape[1], shape[2], shape[3]];
    let mut case = Case {
        id: String::new(),
        image: image.clone(),
        labels: LabelVolume::zeros(original),
        spacing: [1.0; 3],
    };
    znormalize(&mut case.image)?;
    let padded = crop_or_pad(&case, pad_extents(original, config.roi()))?;
    let logits = sliding_window_infer(&padded.image, &config.sliding_window(), |tile| net.predict(params, tile))?;
    let shape = [&[1], logits.shape()].concat();
    let logits = logits.reshape(&shape)?;
    let pred = crop_or_pad_labels(&predict_labels(&logits)?.remove(0), original);
    Ok(if config.postprocess {
        postprocess(&pred, config.min_component_voxels)
    } else {
        pred
    })
}
