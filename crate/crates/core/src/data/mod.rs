//! Cases, synthetic generation, file IO, preprocessing and splitting.

pub mod augment;
pub mod dataset;
pub mod nifti;
pub mod preprocess;
pub mod split;
pub mod synth;

use sha2::{Digest, Sha256};
use voxgraph_tensor::Tensor;

use crate::volume::LabelVolume;

pub use augment::{augment, AugmentParams};
pub use dataset::{read_case, read_manifest, write_case, write_manifest, DiskDataset};
pub use preprocess::{append_channel, binarize, crop_or_pad, crop_or_pad_labels, pad_extents, znormalize};
pub use split::SplitPlan;
pub use synth::generate_synthetic_case;

/// Modality order of image channels.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    /// `[channels, D, H, W]`.
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
    /// Millimetres per voxel along D, H, W.
    pub spacing: [f64; 3],
}

/// Deterministic 64-bit seed from a global seed, a case id and an epoch.
pub fn case_seed(seed: u64, case_id: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((case_id.len() as u64).to_le_bytes());
    h.update(case_id.as_bytes());
    h.update(epoch.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seed of synthetic case `index` in a set generated from `seed`.
pub fn synth_seed(seed: u64, index: usize) -> u64 {
    case_seed(seed, "synth", index as u64)
}

pub fn synth_id(index: usize) -> String {
    format!("case_{:04}", index)
}
