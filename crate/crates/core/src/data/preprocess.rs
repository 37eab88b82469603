use voxgraph_tensor::Tensor;

use crate::data::Case;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Mask};

pub const STD_FLOOR: f64 = 1e-8;

fn channels_and_voxels(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [c, d, h, w] => Ok((*c, d * h * w)),
        s => Err(Error::Data(format!("image must be [C, D, H, W], got {:?}", s))),
    }
}

/// Per-channel standardisation over the voxels where any channel is nonzero.
/// Voxels outside that mask stay zero.
pub fn znormalize(image: &mut Tensor<f32>) -> Result<()> {
    let (c, n) = channels_and_voxels(image)?;
    let data = image.data_mut();
    let mask: Vec<bool> = (0..n).map(|i| (0..c).any(|ch| data[ch * n + i] != 0.0)).collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(());
    }
    for ch in 0..c {
        let lane = &mut data[ch * n..(ch + 1) * n];
        let mean = lane.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).sum::<f64>() / count as f64;
        let var = lane
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for (v, &m) in lane.iter_mut().zip(&mask) {
            if m {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
    Ok(())
}

/// For each axis, `(source start, destination start, length)` of the copied window.
fn windows(from: [usize; 3], to: [usize; 3]) -> [(usize, usize, usize); 3] {
    [0, 1, 2].map(|a| {
        if from[a] >= to[a] {
            ((from[a] - to[a]) / 2, 0, to[a])
        } else {
            (0, (to[a] - from[a]) / 2, from[a])
        }
    })
}

fn remap<T: Copy>(src: &[T], from: [usize; 3], to: [usize; 3], fill: T) -> Vec<T> {
    let w = windows(from, to);
    let mut out = vec![fill; to.iter().product()];
    for z in 0..w[0].2 {
        for y in 0..w[1].2 {
            let s = ((w[0].0 + z) * from[1] + w[1].0 + y) * from[2] + w[2].0;
            let d = ((w[0].1 + z) * to[1] + w[1].1 + y) * to[2] + w[2].1;
            out[d..d + w[2].2].copy_from_slice(&src[s..s + w[2].2]);
        }
    }
    out
}

/// Centre crop along axes longer than `roi` and symmetric zero padding along
/// shorter ones. Image and labels move together.
pub fn crop_or_pad(case: &Case, roi: [usize; 3]) -> Result<Case> {
    if roi.contains(&0) {
        return Err(Error::Config(format!("roi {:?} has a zero extent", roi)));
    }
    let (c, n) = channels_and_voxels(&case.image)?;
    let from = case.labels.dims;
    let out_n: usize = roi.iter().product();
    let mut image = Vec::with_capacity(c * out_n);
    for ch in 0..c {
        image.extend(remap(&case.image.data()[ch * n..(ch + 1) * n], from, roi, 0.0));
    }
    Ok(Case {
        id: case.id.clone(),
        image: Tensor::new(vec![c, roi[0], roi[1], roi[2]], image)?,
        labels: LabelVolume {
            dims: roi,
            data: remap(&case.labels.data, from, roi, 0),
        },
        spacing: case.spacing,
    })
}

/// Label-only counterpart of [`crop_or_pad`], used to map predictions made on
/// a padded volume back to the original grid.
pub fn crop_or_pad_labels(labels: &LabelVolume, dims: [usize; 3]) -> LabelVolume {
    LabelVolume {
        dims,
        data: remap(&labels.data, labels.dims, dims, 0),
    }
}

/// Extents at least `roi` along every axis, so a sliding window fits.
pub fn pad_extents(dims: [usize; 3], roi: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims[a].max(roi[a]))
}

/// Tumour indicator: every nonzero label.
pub fn binarize(labels: &LabelVolume) -> Mask {
    Mask {
        dims: labels.dims,
        data: labels.data.iter().map(|&l| l > 0).collect(),
    }
}

/// Appends `mask` as one more image channel.
pub fn append_channel(image: &Tensor<f32>, mask: &Mask) -> Result<Tensor<f32>> {
    let (c, n) = channels_and_voxels(image)?;
    if mask.data.len() != n {
        return Err(Error::Data("mask and image differ in voxel count".into()));
    }
    let mut data = image.data().to_vec();
    data.extend(mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    let mut shape = image.shape().to_vec();
    shape[0] = c + 1;
    Ok(Tensor::new(shape, data)?)
}
