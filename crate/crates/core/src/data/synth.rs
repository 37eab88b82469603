//! Synthetic multi-modal tumour phantoms.
//!
//! A brain ellipsoid holds an edema ellipsoid (label 2); inside it sits a core
//! ellipsoid whose centre is necrotic (label 1) and whose rim enhances
//! (label 3). Outside the brain every channel is exactly zero. The intensity
//! constants are invented for this phantom and carry no clinical meaning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use voxgraph_tensor::Tensor;

use crate::data::Case;
use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Mean intensity per tissue and channel (T1, T1ce, T2, FLAIR). Row 0 is
/// healthy brain, rows 1 to 3 follow the label values.
pub const TISSUE_MEANS: [[f32; 4]; 4] = [
    [0.6, 0.5, 0.4, 0.4],
    [0.3, 0.3, 0.9, 0.6],
    [0.5, 0.5, 0.8, 1.0],
    [0.5, 1.2, 0.7, 0.8],
];
pub const NOISE_SIGMA: f32 = 0.1;

/// Core radii relative to the edema radii.
pub const CORE_SCALE: f64 = 0.6;
/// Necrotic radii relative to the edema radii.
pub const NECROSIS_SCALE: f64 = 0.35;

pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn scaled(&self, s: f64, shift: [f64; 3]) -> Ellipsoid {
        Ellipsoid {
            center: [0, 1, 2].map(|a| self.center[a] + shift[a]),
            radii: self.radii.map(|r| r * s),
        }
    }
}

/// A phantom of `size³` voxels, fully determined by `seed`.
pub fn generate_synthetic_case(id: &str, seed: u64, size: usize, spacing: [f64; 3]) -> Result<Case> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::Config(format!(
            "synthetic size {} not in {:?}",
            size, SUPPORTED_SIZES
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let brain = Ellipsoid {
        center: [0; 3].map(|_| mid + rng.random_range(-0.03..0.03) * s),
        radii: [0; 3].map(|_| rng.random_range(0.40..0.46) * s),
    };
    let edema_radii = [0; 3].map(|_| rng.random_range(0.12..0.22) * s);
    let edema = Ellipsoid {
        center: [0; 3].map(|_| mid + rng.random_range(-0.12..0.12) * s),
        radii: edema_radii,
    };
    // The core drifts a little inside the edema so the rim is not concentric.
    let drift = [0; 3].map(|a| rng.random_range(-0.15..0.15) * edema_radii[a]);
    let core = edema.scaled(CORE_SCALE, drift);
    let necrosis = edema.scaled(NECROSIS_SCALE, drift);

    let n = size * size * size;
    let mut labels = vec![0u8; n];
    let mut inside = vec![false; n];
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * size + y) * size + x;
                if !brain.contains(p) {
                    continue;
                }
                inside[i] = true;
                labels[i] = if necrosis.contains(p) {
                    1
                } else if core.contains(p) {
                    3
                } else if edema.contains(p) {
                    2
                } else {
                    0
                };
            }
        }
    }
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("positive sigma");
    let mut image = vec![0f32; 4 * n];
    for c in 0..4 {
        for i in 0..n {
            if inside[i] {
                let v = TISSUE_MEANS[labels[i] as usize][c] + noise.sample(&mut rng);
                // Exact zero is reserved for background outside the brain.
                image[c * n + i] = if v == 0.0 { f32::MIN_POSITIVE } else { v };
            }
        }
    }
    Ok(Case {
        id: id.to_string(),
        image: Tensor::new(vec![4, size, size, size], image)?,
        labels: LabelVolume::new([size; 3], labels)?,
        spacing,
    })
}
