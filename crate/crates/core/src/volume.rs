//! Label volumes, binary masks and the tumour region composites.

use std::fmt;

use crate::error::{Error, Result};

pub const N_LABELS: usize = 4;

/// Integer class volume: 0 background, 1 necrotic core, 2 edema, 3 enhancing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Data(format!(
                "{} labels for dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= N_LABELS) {
            return Err(Error::Data(format!("label {} outside 0..{}", bad, N_LABELS)));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn counts(&self) -> [usize; N_LABELS] {
        let mut c = [0; N_LABELS];
        for &l in &self.data {
            c[l as usize] += 1;
        }
        c
    }

    pub fn region(&self, r: Region) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&l| r.contains(l)).collect(),
        }
    }

    /// Rebuilds labels from nested composites: ET → 3, TC∖ET → 1, WT∖TC → 2.
    pub fn from_regions(wt: &Mask, tc: &Mask, et: &Mask) -> Self {
        let data = (0..wt.data.len())
            .map(|i| {
                if et.data[i] {
                    3
                } else if tc.data[i] {
                    1
                } else if wt.data[i] {
                    2
                } else {
                    0
                }
            })
            .collect();
        LabelVolume { dims: wt.dims, data }
    }
}

/// Binary volume in `[D, H, W]` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Data(format!("{} voxels for dims {:?}", data.len(), dims)));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            data: vec![false; dims.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.dims;
        [i / (h * w), (i / w) % h, i % w]
    }
}

/// Evaluation composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Et => label == 3,
            Region::Tc => label == 1 || label == 3,
            Region::Wt => (1..=3).contains(&label),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        })
    }
}

/// The three composites of a label volume.
pub fn region_composites(labels: &LabelVolume) -> [Mask; 3] {
    Region::ALL.map(|r| labels.region(r))
}
