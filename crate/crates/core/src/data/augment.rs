//! Random axis flips, in-plane quarter turns and per-channel brightness.

use rand::Rng;
use voxgraph_tensor::Tensor;

use crate::data::Case;
use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.9, 1.1);

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Flip along D, H, W.
    pub flips: [bool; 3],
    /// Counter-clockwise quarter turns in the H × W plane.
    pub quarter_turns: u8,
    pub brightness: Vec<f32>,
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        AugmentParams {
            flips: [false; 3],
            quarter_turns: 0,
            brightness: vec![1.0; channels],
        }
    }

    /// Draws flips (D, H, W order), then the turn count, then one brightness
    /// factor per channel.
    pub fn sample(channels: usize, rng: &mut impl Rng) -> Self {
        let flips = [0; 3].map(|_| rng.random_bool(FLIP_PROBABILITY));
        let quarter_turns = rng.random_range(0..4u8);
        let brightness = (0..channels)
            .map(|_| rng.random_range(BRIGHTNESS_RANGE.0..BRIGHTNESS_RANGE.1))
            .collect();
        AugmentParams {
            flips,
            quarter_turns,
            brightness,
        }
    }

    /// Destination of voxel `p` in a volume of extents `dims` (H = W required
    /// when turning).
    pub fn map_point(&self, p: [usize; 3], dims: [usize; 3]) -> [usize; 3] {
        let mut q = p;
        for a in 0..3 {
            if self.flips[a] {
                q[a] = dims[a] - 1 - q[a];
            }
        }
        let n = dims[2];
        for _ in 0..self.quarter_turns {
            // (y, x) → (n-1-x, y)
            q = [q[0], n - 1 - q[2], q[1]];
        }
        q
    }

    fn check(&self, dims: [usize; 3], channels: usize) -> Result<()> {
        if self.quarter_turns % 4 != 0 && dims[1] != dims[2] {
            return Err(Error::Config(format!(
                "in-plane rotation needs a square H × W plane, got {:?}",
                dims
            )));
        }
        if self.brightness.len() != channels {
            return Err(Error::Config(format!(
                "{} brightness factors for {} channels",
                self.brightness.len(),
                channels
            )));
        }
        Ok(())
    }
}

fn transport<T: Copy + Default>(src: &[T], dims: [usize; 3], params: &AugmentParams) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    let [d, h, w] = dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let [tz, ty, tx] = params.map_point([z, y, x], dims);
                out[(tz * h + ty) * w + tx] = src[(z * h + y) * w + x];
            }
        }
    }
    out
}

/// Applies `params` to a case. Spatial moves hit image and labels alike;
/// brightness scales the image only.
pub fn apply(case: &Case, params: &AugmentParams) -> Result<Case> {
    let dims = case.labels.dims;
    let c = case.image.shape()[0];
    params.check(dims, c)?;
    let n: usize = dims.iter().product();
    let mut image = Vec::with_capacity(c * n);
    for ch in 0..c {
        let moved = transport(&case.image.data()[ch * n..(ch + 1) * n], dims, params);
        let s = params.brightness[ch];
        image.extend(moved.into_iter().map(|v| v * s));
    }
    Ok(Case {
        id: case.id.clone(),
        image: Tensor::new(case.image.shape().to_vec(), image)?,
        labels: LabelVolume {
            dims,
            data: transport(&case.labels.data, dims, params),
        },
        spacing: case.spacing,
    })
}

/// Samples parameters and applies them; cubic volumes only.
pub fn augment(case: &Case, rng: &mut impl Rng) -> Result<(Case, AugmentParams)> {
    let dims = case.labels.dims;
    if dims[0] != dims[1] || dims[1] != dims[2] {
        return Err(Error::Config(format!("augmentation needs a cubic volume, got {:?}", dims)));
    }
    let params = AugmentParams::sample(case.image.shape()[0], rng);
    Ok((apply(case, &params)?, params))
}
