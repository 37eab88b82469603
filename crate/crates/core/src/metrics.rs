//! Overlap and boundary-distance metrics over tumour composites.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{region_composites, LabelVolume, Mask, Region};

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Data(format!("mask shapes differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// `(|A ∩ B|, |A|, |B|)`.
fn overlap(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    check_dims(pred, gt)?;
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    Ok((inter, a, b))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`; 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, a, b) = overlap(pred, gt)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// `(precision, recall)`, each 0 when its denominator is empty.
pub fn precision_recall(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let (i, a, b) = overlap(pred, gt)?;
    let p = if a == 0 { 0.0 } else { i as f64 / a as f64 };
    let r = if b == 0 { 0.0 } else { i as f64 / b as f64 };
    Ok((p, r))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn dice_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mask voxels with a face neighbour outside the mask or outside the volume.
pub fn boundary(mask: &Mask) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.data[mask.index(z, y, x)] {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                let open = edge
                    || !mask.data[mask.index(z - 1, y, x)]
                    || !mask.data[mask.index(z + 1, y, x)]
                    || !mask.data[mask.index(z, y - 1, x)]
                    || !mask.data[mask.index(z, y + 1, x)]
                    || !mask.data[mask.index(z, y, x - 1)]
                    || !mask.data[mask.index(z, y, x + 1)];
                if open {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn sq_dist(p: [usize; 3], q: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (p[a] as f64 - q[a] as f64) * spacing[a];
        s += d * d;
    }
    s
}

/// Distance from each point of `from` to its nearest point of `to`.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.par_iter()
        .map(|&p| {
            to.iter()
                .map(|&q| sq_dist(p, q, spacing))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Linear interpolation between order statistics at rank `q · (n - 1)`.
/// Sorts `values` in place. Returns `None` for an empty slice.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(values[lo] + (rank - lo as f64) * (values[hi] - values[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hd95Variant {
    /// 95th percentile of nearest-boundary distances, symmetrised by max.
    #[default]
    Standard,
    /// 95th percentile over every boundary-to-boundary pair distance.
    PaperLiteral,
}

/// 95th-percentile Hausdorff distance in millimetres. `None` when either
/// mask is empty.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: [f64; 3], variant: Hd95Variant) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    Ok(match variant {
        Hd95Variant::Standard => {
            let a = percentile(&mut directed(&bp, &bg, spacing), 0.95);
            let b = percentile(&mut directed(&bg, &bp, spacing), 0.95);
            a.zip(b).map(|(a, b)| a.max(b))
        }
        Hd95Variant::PaperLiteral => {
            let mut all: Vec<f64> = bp
                .par_iter()
                .flat_map_iter(|&p| bg.iter().map(move |&q| sq_dist(p, q, spacing).sqrt()))
                .collect();
            percentile(&mut all, 0.95)
        }
    })
}

/// Symmetric Hausdorff distance between boundary sets. `None` when either
/// mask is empty.
pub fn hd_max(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let a = directed(&bp, &bg, spacing).into_iter().fold(0.0, f64::max);
    let b = directed(&bg, &bp, spacing).into_iter().fold(0.0, f64::max);
    Ok(Some(a.max(b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case_id: String,
    pub fold: Option<usize>,
    pub region: Region,
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub hd_max: Option<f64>,
    /// Semicolon-separated notes such as `pred_empty`.
    pub flags: String,
}

/// One row per composite region.
pub fn evaluate_case(
    case_id: &str,
    fold: Option<usize>,
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: [f64; 3],
    variant: Hd95Variant,
) -> Result<Vec<MetricsRow>> {
    if pred.dims != gt.dims {
        return Err(Error::Data(format!(
            "case {}: prediction {:?} vs ground truth {:?}",
            case_id, pred.dims, gt.dims
        )));
    }
    let p = region_composites(pred);
    let g = region_composites(gt);
    Region::ALL
        .iter()
        .enumerate()
        .map(|(i, &region)| {
            let mut flags = Vec::new();
            if p[i].count() == 0 {
                flags.push("pred_empty");
            }
            if g[i].count() == 0 {
                flags.push("gt_empty");
            }
            Ok(MetricsRow {
                case_id: case_id.to_string(),
                fold,
                region,
                dice: dice(&p[i], &g[i])?,
                iou: iou(&p[i], &g[i])?,
                hd95: hd95(&p[i], &g[i], spacing, variant)?,
                hd_max: hd_max(&p[i], &g[i], spacing)?,
                flags: flags.join(";"),
            })
        })
        .collect()
}

/// Row for a case whose prediction could not be produced.
pub fn missing_rows(case_id: &str, fold: Option<usize>, reason: &str) -> Vec<MetricsRow> {
    Region::ALL
        .iter()
        .map(|&region| MetricsRow {
            case_id: case_id.to_string(),
            fold,
            region,
            dice: f64::NAN,
            iou: f64::NAN,
            hd95: None,
            hd_max: None,
            flags: reason.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionSummary {
    pub cases: usize,
    pub dice: f64,
    pub iou: f64,
    /// Mean over the cases where the distance is defined.
    pub hd95: Option<f64>,
    pub hd_max: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Per-region means over rows with finite overlap scores.
pub fn summarize(rows: &[MetricsRow]) -> BTreeMap<Region, RegionSummary> {
    let mut out = BTreeMap::new();
    for region in Region::ALL {
        let sel: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| r.region == region && r.dice.is_finite())
            .collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        out.insert(
            region,
            RegionSummary {
                cases: sel.len(),
                dice: sel.iter().map(|r| r.dice).sum::<f64>() / n,
                iou: sel.iter().map(|r| r.iou).sum::<f64>() / n,
                hd95: mean_defined(sel.iter().map(|r| r.hd95)),
                hd_max: mean_defined(sel.iter().map(|r| r.hd_max)),
            },
        );
    }
    out
}

/// [`summarize`] grouped by fold; rows without a fold are grouped under `None`.
pub fn summarize_by_fold(rows: &[MetricsRow]) -> BTreeMap<Option<usize>, BTreeMap<Region, RegionSummary>> {
    let mut groups: BTreeMap<Option<usize>, Vec<MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.fold).or_default().push(r.clone());
    }
    groups.into_iter().map(|(k, v)| (k, summarize(&v))).collect()
}

pub const CSV_HEADER: &str = "case_id,fold,region,dice,iou,hd95,hd_max,flags";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{}", x)).unwrap_or_default()
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let fin = |x: f64| if x.is_finite() { format!("{}", x) } else { String::new() };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.case_id,
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            r.region,
            fin(r.dice),
            fin(r.iou),
            opt(r.hd95),
            opt(r.hd_max),
            r.flags
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[usize]) -> Mask {
        let mut m = Mask::empty(dims);
        for &i in on {
            m.data[i] = true;
        }
        m
    }

    #[test]
    fn counts_example() {
        let a = mask([1, 1, 6], &[0, 1, 2, 3]);
        let b = mask([1, 1, 6], &[2, 3, 4, 5]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = Mask::empty([1, 1, 6]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert_eq!(hd95(&a, &e, [1.0; 3], Hd95Variant::Standard).unwrap(), None);
    }

    #[test]
    fn single_voxels_three_apart() {
        let a = mask([1, 1, 4], &[0]);
        let b = mask([1, 1, 4], &[3]);
        assert_eq!(hd95(&a, &b, [1.0; 3], Hd95Variant::Standard).unwrap(), Some(3.0));
        assert_eq!(hd_max(&a, &b, [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(hd95(&a, &b, [2.0; 3], Hd95Variant::Standard).unwrap(), Some(6.0));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 2.0, 3.0, 0.0];
        assert_eq!(percentile(&mut v, 0.5), Some(2.0));
        assert_eq!(percentile(&mut v, 0.95), Some(3.8));
    }
}
