//! Sliding-window inference and morphological clean-up of label maps.

use std::collections::VecDeque;

use rayon::prelude::*;
use voxgraph_tensor::Tensor;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Mask, Region};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub extents: [usize; 3],
    pub roi: [usize; 3],
    /// Tile start coordinates per axis, strictly increasing.
    pub starts: [Vec<usize>; 3],
}

/// Starts `0, stride, 2·stride, ...` that fit, plus `extent - roi` as the last.
pub fn axis_starts(extent: usize, roi: usize, overlap: f64) -> Result<Vec<usize>> {
    if roi == 0 || roi > extent {
        return Err(Error::Config(format!(
            "roi {} must be between 1 and the volume extent {}; pad the volume first",
            roi, extent
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {} must lie in [0, 1)", overlap)));
    }
    let stride = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + roi <= extent).collect();
    if *starts.last().expect("start 0 always fits") != extent - roi {
        starts.push(extent - roi);
    }
    Ok(starts)
}

pub fn plan_tiles(extents: [usize; 3], roi: [usize; 3], overlap: f64) -> Result<TilePlan> {
    Ok(TilePlan {
        extents,
        roi,
        starts: [
            axis_starts(extents[0], roi[0], overlap)?,
            axis_starts(extents[1], roi[1], overlap)?,
            axis_starts(extents[2], roi[2], overlap)?,
        ],
    })
}

impl TilePlan {
    /// Tile origins in z-major order.
    pub fn tiles(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for &z in &self.starts[0] {
            for &y in &self.starts[1] {
                for &x in &self.starts[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Blending {
    Constant,
    #[default]
    Gaussian,
}

/// Per-voxel tile weights, separable Gaussian with `σ = roi / 8` centred in the tile.
pub fn blend_weights(roi: [usize; 3], blending: Blending) -> Vec<f32> {
    let axis = |n: usize| -> Vec<f64> {
        match blending {
            Blending::Constant => vec![1.0; n],
            Blending::Gaussian => {
                let sigma = n as f64 / 8.0;
                let c = (n as f64 - 1.0) / 2.0;
                (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
            }
        }
    };
    let (wz, wy, wx) = (axis(roi[0]), axis(roi[1]), axis(roi[2]));
    let mut out = Vec::with_capacity(roi.iter().product());
    for z in &wz {
        for y in &wy {
            for x in &wx {
                // Keeps corners strictly positive in f32.
                out.push(((z * y * x) as f32).max(f32::MIN_POSITIVE));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlidingWindow {
    pub roi: [usize; 3],
    pub overlap: f64,
    pub sw_batch: usize,
    pub blending: Blending,
    /// Evaluate tile batches on the rayon pool. Accumulation order is fixed,
    /// so results match sequential evaluation exactly.
    pub parallel: bool,
}

impl Default for SlidingWindow {
    fn default() -> Self {
        SlidingWindow {
            roi: [32; 3],
            overlap: 0.5,
            sw_batch: 2,
            blending: Blending::Gaussian,
            parallel: false,
        }
    }
}

fn extract(volume: &Tensor<f32>, origin: [usize; 3], roi: [usize; 3], out: &mut Vec<f32>) {
    let s = volume.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    for ch in 0..c {
        for z in 0..roi[0] {
            for y in 0..roi[1] {
                let base = ((ch * d + origin[0] + z) * h + origin[1] + y) * w + origin[2];
                out.extend_from_slice(&volume.data()[base..base + roi[2]]);
            }
        }
    }
}

/// Runs `forward` over tiles of `volume [C, D, H, W]` and blends the
/// `[b, K, roi]` outputs into `[K, D, H, W]` logits.
pub fn sliding_window_infer<F>(volume: &Tensor<f32>, sw: &SlidingWindow, forward: F) -> Result<Tensor<f32>>
where
    F: Fn(Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let &[c, d, h, w] = volume.shape() else {
        return Err(Error::Config(format!("volume must be [C, D, H, W], got {:?}", volume.shape())));
    };
    if sw.sw_batch == 0 {
        return Err(Error::Config("sw_batch_size must be at least 1".into()));
    }
    let plan = plan_tiles([d, h, w], sw.roi, sw.overlap)?;
    let tiles = plan.tiles();
    let roi = sw.roi;
    let tile_n: usize = roi.iter().product();
    let run_batch = |batch: &[[usize; 3]]| -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(batch.len() * c * tile_n);
        for &t in batch {
            extract(volume, t, roi, &mut data);
        }
        let input = Tensor::new(vec![batch.len(), c, roi[0], roi[1], roi[2]], data)?;
        let out = forward(input)?;
        let s = out.shape();
        if s.len() != 5 || s[0] != batch.len() || s[2..] != roi {
            return Err(Error::Config(format!(
                "tile model returned {:?} for a batch of {} tiles of {:?}",
                s,
                batch.len(),
                roi
            )));
        }
        Ok(out)
    };
    let batches: Vec<&[[usize; 3]]> = tiles.chunks(sw.sw_batch).collect();
    let outputs: Vec<Tensor<f32>> = if sw.parallel {
        batches.par_iter().map(|b| run_batch(b)).collect::<Result<_>>()?
    } else {
        batches.iter().map(|b| run_batch(b)).collect::<Result<_>>()?
    };

    let k = outputs[0].shape()[1];
    let weights = blend_weights(roi, sw.blending);
    let n = d * h * w;
    let mut acc = vec![0f32; k * n];
    let mut norm = vec![0f32; n];
    for (batch, out) in batches.iter().zip(&outputs) {
        for (bi, &[oz, oy, ox]) in batch.iter().enumerate() {
            for z in 0..roi[0] {
                for y in 0..roi[1] {
                    let row = ((oz + z) * h + oy + y) * w + ox;
                    let wrow = (z * roi[1] + y) * roi[2];
                    for x in 0..roi[2] {
                        norm[row + x] += weights[wrow + x];
                    }
                    for ch in 0..k {
                        let src = &out.data()[(bi * k + ch) * tile_n + wrow..][..roi[2]];
                        let dst = &mut acc[ch * n + row..][..roi[2]];
                        for x in 0..roi[2] {
                            dst[x] += weights[wrow + x] * src[x];
                        }
                    }
                }
            }
        }
    }
    for ch in 0..k {
        for (v, &s) in acc[ch * n..(ch + 1) * n].iter_mut().zip(&norm) {
            *v /= s;
        }
    }
    Ok(Tensor::new(vec![k, d, h, w], acc)?)
}

const FACE_OFFSETS: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];

fn neighbours(dims: [usize; 3], i: usize) -> impl Iterator<Item = usize> {
    let [d, h, w] = dims;
    let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
    FACE_OFFSETS.iter().filter_map(move |&(dz, dy, dx)| {
        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
            None
        } else {
            Some(((nz as usize * h) + ny as usize) * w + nx as usize)
        }
    })
}

/// Face-connected components as lists of voxel indices.
pub fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.data.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for j in neighbours(mask.dims, i) {
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

pub fn dilate(mask: &Mask) -> Mask {
    let data = (0..mask.data.len())
        .map(|i| mask.data[i] || neighbours(mask.dims, i).any(|j| mask.data[j]))
        .collect();
    Mask { dims: mask.dims, data }
}

/// Erosion that treats voxels outside the volume as foreground, so that
/// closing never shrinks a mask touching the border.
pub fn erode(mask: &Mask) -> Mask {
    let data = (0..mask.data.len())
        .map(|i| mask.data[i] && neighbours(mask.dims, i).all(|j| mask.data[j]))
        .collect();
    Mask { dims: mask.dims, data }
}

pub fn close(mask: &Mask) -> Mask {
    erode(&dilate(mask))
}

/// Drops whole-tumour components smaller than `min_component_voxels`, then
/// closes WT, TC and ET in that order, keeping ET ⊆ TC ⊆ WT.
pub fn postprocess(labels: &LabelVolume, min_component_voxels: usize) -> LabelVolume {
    let mut cleaned = labels.clone();
    for comp in components(&labels.region(Region::Wt)) {
        if comp.len() < min_component_voxels {
            for i in comp {
                cleaned.data[i] = 0;
            }
        }
    }
    let wt = close(&cleaned.region(Region::Wt));
    let tc = close(&cleaned.region(Region::Tc)).and(&wt);
    let et = close(&cleaned.region(Region::Et)).and(&tc);
    LabelVolume::from_regions(&wt, &tc, &et)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_examples() {
        assert_eq!(axis_starts(32, 32, 0.5).unwrap(), vec![0]);
        assert_eq!(axis_starts(160, 128, 0.5).unwrap(), vec![0, 32]);
        assert_eq!(axis_starts(48, 16, 0.5).unwrap(), vec![0, 8, 16, 24, 32]);
        assert!(axis_starts(8, 16, 0.5).is_err());
    }

    #[test]
    fn corner_has_three_face_neighbours() {
        assert_eq!(neighbours([3, 3, 3], 0).count(), 3);
        assert_eq!(neighbours([3, 3, 3], 13).count(), 6);
    }

    #[test]
    fn closing_fills_a_one_voxel_gap() {
        let mut m = Mask::empty([1, 1, 7]);
        m.data[2] = true;
        m.data[4] = true;
        assert_eq!(close(&m).data, vec![false, false, true, true, true, false, false]);
    }
}
