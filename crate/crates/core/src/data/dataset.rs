//! On-disk layout: `<root>/<case_id>/{t1,t1ce,t2,flair,seg}.nii` plus a
//! `manifest.txt` listing case ids one per line.

use std::fs;
use std::path::{Path, PathBuf};

use voxgraph_tensor::Tensor;

use crate::data::nifti::{read_volume, write_volume, NiftiVolume, VoxelData};
use crate::data::{Case, MODALITIES};
use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const MANIFEST: &str = "manifest.txt";
pub const SEG_FILE: &str = "seg.nii";

fn nifti_err(path: &Path, e: crate::data::nifti::NiftiError) -> Error {
    Error::file(path, e.to_string())
}

pub fn write_manifest(root: &Path, ids: &[String]) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    fs::write(root.join(MANIFEST), s)?;
    Ok(())
}

/// Case ids from the manifest, or from the subdirectories when there is none.
pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST);
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    if !root.is_dir() {
        return Err(Error::file(root, "dataset directory does not exist"));
    }
    let mut ids: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(SEG_FILE).exists() || e.path().join("t1.nii").exists())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn write_labels(path: &Path, labels: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    let vol = NiftiVolume::from_dhw(labels.dims, spacing, VoxelData::U8(labels.data.clone()))
        .map_err(|e| nifti_err(path, e))?;
    write_volume(path, &vol).map_err(|e| nifti_err(path, e))
}

pub fn read_labels(path: &Path) -> Result<(LabelVolume, [f64; 3])> {
    let vol = read_volume(path).map_err(|e| nifti_err(path, e))?;
    let data: Vec<u8> = match &vol.data {
        VoxelData::U8(v) => v.clone(),
        other => other
            .to_f32()
            .into_iter()
            .map(|x| {
                if x.fract() == 0.0 && (0.0..=255.0).contains(&x) {
                    Ok(x as u8)
                } else {
                    Err(Error::file(path, format!("non-integer label value {}", x)))
                }
            })
            .collect::<Result<_>>()?,
    };
    let labels = LabelVolume::new(vol.shape_dhw(), data).map_err(|e| Error::file(path, e.to_string()))?;
    Ok((labels, vol.spacing_dhw()))
}

pub fn write_case(root: &Path, case: &Case) -> Result<PathBuf> {
    let dir = root.join(&case.id);
    fs::create_dir_all(&dir)?;
    let dims = case.labels.dims;
    let n: usize = dims.iter().product();
    if case.image.shape() != [MODALITIES.len(), dims[0], dims[1], dims[2]] {
        return Err(Error::Data(format!(
            "case {}: image {:?} does not match {} modalities of {:?}",
            case.id,
            case.image.shape(),
            MODALITIES.len(),
            dims
        )));
    }
    for (c, name) in MODALITIES.iter().enumerate() {
        let path = dir.join(format!("{}.nii", name));
        let vol = NiftiVolume::from_dhw(dims, case.spacing, VoxelData::F32(case.image.data()[c * n..(c + 1) * n].to_vec()))
            .map_err(|e| nifti_err(&path, e))?;
        write_volume(&path, &vol).map_err(|e| nifti_err(&path, e))?;
    }
    write_labels(&dir.join(SEG_FILE), &case.labels, case.spacing)?;
    Ok(dir)
}

/// Reads the four modalities of case `id` with their `[D, H, W]` shape and spacing.
pub fn read_image(root: &Path, id: &str) -> Result<(Tensor<f32>, [usize; 3], [f64; 3])> {
    let dir = root.join(id);
    let mut data = Vec::new();
    let mut shape = None;
    let mut spacing = [1.0; 3];
    for name in MODALITIES {
        let path = dir.join(format!("{}.nii", name));
        let vol = read_volume(&path).map_err(|e| nifti_err(&path, e))?;
        let s = vol.shape_dhw();
        match shape {
            None => {
                shape = Some(s);
                spacing = vol.spacing_dhw();
            }
            Some(prev) if prev != s => {
                return Err(Error::file(&path, format!("shape {:?} differs from {:?}", s, prev)));
            }
            _ => {}
        }
        data.extend(vol.data.to_f32());
    }
    let dims = shape.expect("at least one modality");
    let image = Tensor::new(vec![MODALITIES.len(), dims[0], dims[1], dims[2]], data)?;
    Ok((image, dims, spacing))
}

pub fn read_case(root: &Path, id: &str) -> Result<Case> {
    let (image, dims, spacing) = read_image(root, id)?;
    let seg = root.join(id).join(SEG_FILE);
    let (labels, _) = read_labels(&seg)?;
    if labels.dims != dims {
        return Err(Error::file(&seg, format!("labels {:?} vs image {:?}", labels.dims, dims)));
    }
    Ok(Case {
        id: id.to_string(),
        image,
        labels,
        spacing,
    })
}

/// Dataset directory with its manifest.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
}

impl DiskDataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::file(&root, "dataset directory does not exist"));
        }
        let ids = read_manifest(&root)?;
        Ok(DiskDataset { root, ids })
    }

    pub fn load(&self, id: &str) -> Result<Case> {
        read_case(&self.root, id)
    }

    /// Reads every case and checks shapes and label range.
    pub fn validate(&self) -> Result<usize> {
        for id in &self.ids {
            self.load(id)?;
        }
        Ok(self.ids.len())
    }
}
