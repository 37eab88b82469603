//! Flat `key=value` training configuration. Keys mirror the training-parameter
//! table verbatim; a handful of extension keys expose choices the table leaves
//! open.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::GcaOptions;
use crate::inference::{Blending, SlidingWindow};
use crate::losses::{LossConfig, LossType};
use crate::segnet::{size_preset, NetworkConfig};

/// Tiny-run limits applied by `is_debugging`.
pub const DEBUG_CASES: usize = 2;
pub const DEBUG_EPOCHS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub is_debugging: bool,
    pub all_samples_as_train: bool,
    pub fold: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub mednext_size: String,
    pub mednext_ksize: usize,
    pub mednext_ckpt: Option<PathBuf>,
    pub deep_sup: bool,
    pub batch_size: usize,
    pub sw_batch_size: usize,
    pub num_workers: usize,
    pub roi_x: usize,
    pub roi_y: usize,
    pub roi_z: usize,
    pub infer_overlap: f64,
    pub aug_type: u32,
    pub loss_type: u32,
    pub mean_batch: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_scheduler: String,
    pub n_gpus: usize,
    pub pin_memory: bool,
    pub check_val_every_n_epoch: usize,
    pub precision: u32,
    pub amp_backend: String,
    pub accumulate_grad_batches: usize,

    // Extension keys.
    pub warmup_fraction: f64,
    pub n_folds: usize,
    pub n_stages: usize,
    pub gca_dense_cap: usize,
    pub gca_scaled: bool,
    pub gca_heads: usize,
    pub w_ce: f64,
    pub w_dice: f64,
    pub dice_eps: f64,
    pub binary_channel: bool,
    pub blending: Blending,
    pub postprocess: bool,
    pub min_component_voxels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            is_debugging: false,
            all_samples_as_train: false,
            fold: 4,
            seed: 42,
            max_epochs: 75,
            mednext_size: "B".into(),
            mednext_ksize: 3,
            mednext_ckpt: None,
            deep_sup: true,
            batch_size: 1,
            sw_batch_size: 2,
            num_workers: 4,
            roi_x: 32,
            roi_y: 32,
            roi_z: 32,
            infer_overlap: 0.5,
            aug_type: 1,
            loss_type: 3,
            mean_batch: true,
            lr: 3e-4,
            weight_decay: 1e-6,
            lr_scheduler: "cosine-with-warmup".into(),
            n_gpus: 1,
            pin_memory: true,
            check_val_every_n_epoch: 1,
            precision: 32,
            amp_backend: "native".into(),
            accumulate_grad_batches: 4,
            warmup_fraction: 0.05,
            n_folds: 5,
            n_stages: 3,
            gca_dense_cap: 4096,
            gca_scaled: true,
            gca_heads: 1,
            w_ce: 1.0,
            w_dice: 1.0,
            dice_eps: 1e-5,
            binary_channel: false,
            blending: Blending::Gaussian,
            postprocess: true,
            min_component_voxels: 10,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "True" | "TRUE" | "1" => Ok(true),
        "false" | "False" | "FALSE" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected a boolean, got {:?}", key, v))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse {:?} as a number", key, v)))
}

fn blending_name(b: Blending) -> &'static str {
    match b {
        Blending::Constant => "constant",
        Blending::Gaussian => "gaussian",
    }
}

impl TrainConfig {
    /// Applies one `key=value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "is_debugging" => self.is_debugging = parse_bool(key, v)?,
            "all_samples_as_train" => self.all_samples_as_train = parse_bool(key, v)?,
            "fold" => self.fold = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "mednext_size" => self.mednext_size = v.to_string(),
            "mednext_ksize" => self.mednext_ksize = parse_num(key, v)?,
            "mednext_ckpt" => {
                self.mednext_ckpt = match v {
                    "" | "None" | "none" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "deep_sup" => self.deep_sup = parse_bool(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "sw_batch_size" => self.sw_batch_size = parse_num(key, v)?,
            "num_workers" => self.num_workers = parse_num(key, v)?,
            "roi_x" => self.roi_x = parse_num(key, v)?,
            "roi_y" => self.roi_y = parse_num(key, v)?,
            "roi_z" => self.roi_z = parse_num(key, v)?,
            "infer_overlap" => self.infer_overlap = parse_num(key, v)?,
            "aug_type" => self.aug_type = parse_num(key, v)?,
            "loss_type" => self.loss_type = parse_num(key, v)?,
            "mean_batch" => self.mean_batch = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "lr_scheduler" => self.lr_scheduler = v.to_string(),
            "n_gpus" => self.n_gpus = parse_num(key, v)?,
            "pin_memory" => self.pin_memory = parse_bool(key, v)?,
            "check_val_every_n_epoch" => self.check_val_every_n_epoch = parse_num(key, v)?,
            "precision" => self.precision = parse_num(key, v)?,
            "amp_backend" => self.amp_backend = v.to_string(),
            "accumulate_grad_batches" => self.accumulate_grad_batches = parse_num(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_num(key, v)?,
            "n_folds" => self.n_folds = parse_num(key, v)?,
            "n_stages" => self.n_stages = parse_num(key, v)?,
            "gca_dense_cap" => self.gca_dense_cap = parse_num(key, v)?,
            "gca_scaled" => self.gca_scaled = parse_bool(key, v)?,
            "gca_heads" => self.gca_heads = parse_num(key, v)?,
            "w_ce" => self.w_ce = parse_num(key, v)?,
            "w_dice" => self.w_dice = parse_num(key, v)?,
            "dice_eps" => self.dice_eps = parse_num(key, v)?,
            "binary_channel" => self.binary_channel = parse_bool(key, v)?,
            "blending" => {
                self.blending = match v {
                    "gaussian" => Blending::Gaussian,
                    "constant" => Blending::Constant,
                    _ => return Err(Error::Config(format!("blending: expected gaussian or constant, got {:?}", v))),
                }
            }
            "postprocess" => self.postprocess = parse_bool(key, v)?,
            "min_component_voxels" => self.min_component_voxels = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {:?}", lineno + 1, raw)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {:?} given twice", lineno + 1, k)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {}", lineno + 1, m)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.precision != 32 {
            return bad(format!(
                "precision={} is not supported: training runs in full 32-bit precision only (set precision=32)",
                self.precision
            ));
        }
        if self.lr_scheduler != "cosine-with-warmup" {
            return bad(format!("lr_scheduler {:?} is not supported; use cosine-with-warmup", self.lr_scheduler));
        }
        if self.n_gpus > 1 {
            return bad(format!("n_gpus={}: only single-process CPU training is available", self.n_gpus));
        }
        if size_preset(&self.mednext_size).is_none() {
            return bad(format!("mednext_size {:?} must be one of S, B, M", self.mednext_size));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.accumulate_grad_batches == 0 {
            return bad("max_epochs, batch_size and accumulate_grad_batches must be positive".into());
        }
        if self.sw_batch_size == 0 || self.check_val_every_n_epoch == 0 {
            return bad("sw_batch_size and check_val_every_n_epoch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.infer_overlap) {
            return bad(format!("infer_overlap {} must lie in [0, 1)", self.infer_overlap));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} must lie in [0, 1)", self.warmup_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.aug_type > 1 {
            return bad(format!("aug_type {} unknown: 0 disables augmentation, 1 enables it", self.aug_type));
        }
        if self.aug_type == 1 && !(self.roi_x == self.roi_y && self.roi_y == self.roi_z) {
            return bad("aug_type=1 rotates in-plane and needs a cubic roi (roi_x = roi_y = roi_z)".into());
        }
        if LossType::from_code(self.loss_type).is_none() {
            return bad(format!(
                "loss_type {} unknown: 1 cross-entropy, 2 Dice, 3 combined",
                self.loss_type
            ));
        }
        if self.n_folds < 2 || self.fold >= self.n_folds {
            return bad(format!("fold {} must be below n_folds {} (n_folds ≥ 2)", self.fold, self.n_folds));
        }
        if self.gca_heads == 0 {
            return bad("gca_heads must be positive".into());
        }
        self.network()?.validate()
    }

    pub fn roi(&self) -> [usize; 3] {
        // Volumes are [D, H, W] = [z, y, x].
        [self.roi_z, self.roi_y, self.roi_x]
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let (base_width, blocks_per_stage) = size_preset(&self.mednext_size)
            .ok_or_else(|| Error::Config(format!("mednext_size {:?} must be one of S, B, M", self.mednext_size)))?;
        Ok(NetworkConfig {
            in_channels: 4 + usize::from(self.binary_channel),
            n_classes: 4,
            base_width,
            n_stages: self.n_stages,
            kernel_size: self.mednext_ksize,
            blocks_per_stage,
            deep_sup: self.deep_sup,
            roi: self.roi(),
            gca: GcaOptions {
                dense_cap: self.gca_dense_cap,
                scaled: self.gca_scaled,
                heads: self.gca_heads,
            },
        })
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            w_ce: self.w_ce,
            w_dice: self.w_dice,
            dice_eps: self.dice_eps,
            mean_batch: self.mean_batch,
            loss_type: LossType::from_code(self.loss_type).unwrap_or(LossType::Combined),
        }
    }

    pub fn sliding_window(&self) -> SlidingWindow {
        SlidingWindow {
            roi: self.roi(),
            overlap: self.infer_overlap,
            sw_batch: self.sw_batch_size,
            blending: self.blending,
            parallel: true,
        }
    }

    /// Every key with its resolved value, one `key=value` per line, in a
    /// fixed order. Parsing the result reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{}={}", k, v);
        };
        kv("is_debugging", self.is_debugging.to_string());
        kv("all_samples_as_train", self.all_samples_as_train.to_string());
        kv("fold", self.fold.to_string());
        kv("seed", self.seed.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("mednext_size", self.mednext_size.clone());
        kv("mednext_ksize", self.mednext_ksize.to_string());
        kv(
            "mednext_ckpt",
            self.mednext_ckpt
                .as_ref()
                .map_or("None".into(), |p| p.display().to_string()),
        );
        kv("deep_sup", self.deep_sup.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("sw_batch_size", self.sw_batch_size.to_string());
        kv("num_workers", self.num_workers.to_string());
        kv("roi_x", self.roi_x.to_string());
        kv("roi_y", self.roi_y.to_string());
        kv("roi_z", self.roi_z.to_string());
        kv("infer_overlap", self.infer_overlap.to_string());
        kv("aug_type", self.aug_type.to_string());
        kv("loss_type", self.loss_type.to_string());
        kv("mean_batch", self.mean_batch.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr_scheduler", self.lr_scheduler.clone());
        kv("n_gpus", self.n_gpus.to_string());
        kv("pin_memory", self.pin_memory.to_string());
        kv("check_val_every_n_epoch", self.check_val_every_n_epoch.to_string());
        kv("precision", self.precision.to_string());
        kv("amp_backend", self.amp_backend.clone());
        kv("accumulate_grad_batches", self.accumulate_grad_batches.to_string());
        kv("warmup_fraction", self.warmup_fraction.to_string());
        kv("n_folds", self.n_folds.to_string());
        kv("n_stages", self.n_stages.to_string());
        kv("gca_dense_cap", self.gca_dense_cap.to_string());
        kv("gca_scaled", self.gca_scaled.to_string());
        kv("gca_heads", self.gca_heads.to_string());
        kv("w_ce", self.w_ce.to_string());
        kv("w_dice", self.w_dice.to_string());
        kv("dice_eps", self.dice_eps.to_string());
        kv("binary_channel", self.binary_channel.to_string());
        kv("blending", blending_name(self.blending).into());
        kv("postprocess", self.postprocess.to_string());
        kv("min_component_voxels", self.min_component_voxels.to_string());
        s
    }

    /// SHA-256 of [`to_kv`](Self::to_kv), stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv().as_bytes()).into()
    }

    /// Epoch budget after applying `is_debugging`.
    pub fn effective_epochs(&self) -> usize {
        if self.is_debugging {
            self.max_epochs.min(DEBUG_EPOCHS)
        } else {
            self.max_epochs
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn table_values_parse() {
        let cfg = TrainConfig::parse("is_debugging=False\nmednext_ckpt=None\nlr=3e-4\n# comment\n\ninfer_overlap=0.5\n").unwrap();
        assert!(!cfg.is_debugging);
        assert_eq!(cfg.mednext_ckpt, None);
        assert_eq!(cfg.lr, 3e-4);
    }

    #[test]
    fn rejects_unknown_duplicate_and_half_precision() {
        let e = TrainConfig::parse("learning_rate=1").unwrap_err().to_string();
        assert!(e.contains("unknown config key"), "{}", e);
        assert!(TrainConfig::parse("fold=1\nfold=2").is_err());
        let e = TrainConfig::parse("precision=16").unwrap_err().to_string();
        assert!(e.contains("precision=16 is not supported"), "{}", e);
        assert!(TrainConfig::parse("loss_type=7").is_err());
        assert!(TrainConfig::parse("fold").is_err());
    }
}
