//! Single-file, uncompressed, little-endian NIfTI-1 volumes with uint8, int16
//! or float32 voxels.
//!
//! The file stores `(nx, ny, nz)` with x varying fastest, which is exactly the
//! row-major `[D, H, W] = [nz, ny, nx]` layout used elsewhere in the crate.

use std::path::Path;

use thiserror::Error;

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte empty extension block.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a NIfTI-1 file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("not a NIfTI-1 file: header size field is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("unsupported datatype code {0} (supported: 2 uint8, 4 int16, 16 float32)")]
    UnsupportedDtype(i16),
    #[error("unsupported dimensionality: dim = {0:?}")]
    UnsupportedDims([i16; 8]),
    #[error("truncated file: {what} needs {needed} bytes, found {found}")]
    Truncated { what: &'static str, needed: usize, found: usize },
    #[error("voxel count {0} does not match dims {1:?}")]
    LengthMismatch(usize, [usize; 3]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> (i16, i16) {
        match self {
            VoxelData::U8(_) => (DT_UINT8, 8),
            VoxelData::I16(_) => (DT_INT16, 16),
            VoxelData::F32(_) => (DT_FLOAT32, 32),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    /// `(nx, ny, nz)` as stored in the header.
    pub dims: [usize; 3],
    /// Voxel size in mm along x, y, z.
    pub pixdim: [f32; 3],
    pub data: VoxelData,
}

impl NiftiVolume {
    pub fn new(dims: [usize; 3], pixdim: [f32; 3], data: VoxelData) -> Result<Self, NiftiError> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(NiftiError::LengthMismatch(data.len(), dims));
        }
        Ok(NiftiVolume { dims, pixdim, data })
    }

    /// Builds a volume from `[D, H, W]` data and spacing in the same order.
    pub fn from_dhw(shape: [usize; 3], spacing: [f64; 3], data: VoxelData) -> Result<Self, NiftiError> {
        Self::new(
            [shape[2], shape[1], shape[0]],
            [spacing[2] as f32, spacing[1] as f32, spacing[0] as f32],
            data,
        )
    }

    pub fn shape_dhw(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn spacing_dhw(&self) -> [f64; 3] {
        [self.pixdim[2] as f64, self.pixdim[1] as f64, self.pixdim[0] as f64]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (code, bitpix) = self.data.code();
        let mut h = vec![0u8; DATA_OFFSET];
        put_i32(&mut h, 0, HEADER_SIZE as i32);
        h[38] = b'r'; // regular
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = self.dims[a] as i16;
        }
        for (i, d) in dim.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * i, *d);
        }
        put_i16(&mut h, 70, code);
        put_i16(&mut h, 72, bitpix);
        let mut pixdim = [1f32; 8];
        pixdim[1..4].copy_from_slice(&self.pixdim);
        for (i, p) in pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * i, *p);
        }
        put_f32(&mut h, 108, DATA_OFFSET as f32);
        put_f32(&mut h, 112, 1.0); // scl_slope
        h[123] = 2; // millimetres
        h[344..348].copy_from_slice(MAGIC);
        match &self.data {
            VoxelData::U8(v) => h.extend_from_slice(v),
            VoxelData::I16(v) => v.iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
            VoxelData::F32(v) => v.iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
        }
        h
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::Truncated {
                what: "header",
                needed: HEADER_SIZE,
                found: bytes.len(),
            });
        }
        let sizeof_hdr = get_i32(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
                return Err(NiftiError::BigEndian);
            }
            return Err(NiftiError::BadHeaderSize(sizeof_hdr));
        }
        let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
        if &magic != MAGIC {
            return Err(NiftiError::BadMagic(magic));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = get_i16(bytes, 40 + 2 * i);
        }
        let nd = dim[0];
        if !(1..=7).contains(&nd) || dim[1..=nd as usize].iter().any(|&d| d < 1) || dim[4..=(nd.max(3) as usize)].iter().any(|&d| d != 1) {
            return Err(NiftiError::UnsupportedDims(dim));
        }
        let dims = [0, 1, 2].map(|a| if (a as i16) < nd { dim[a + 1] as usize } else { 1 });
        let code = get_i16(bytes, 70);
        let width = match code {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            DT_FLOAT32 => 4,
            other => return Err(NiftiError::UnsupportedDtype(other)),
        };
        let pixdim = [1, 2, 3].map(|i| {
            let p = get_f32(bytes, 76 + 4 * i);
            if i as i16 <= nd { p } else { 1.0 }
        });
        let offset = get_f32(bytes, 108).max(DATA_OFFSET as f32) as usize;
        let n: usize = dims.iter().product();
        let needed = offset + n * width;
        if bytes.len() < needed {
            return Err(NiftiError::Truncated {
                what: "voxel payload",
                needed,
                found: bytes.len(),
            });
        }
        let raw = &bytes[offset..needed];
        let data = match code {
            DT_UINT8 => VoxelData::U8(raw.to_vec()),
            DT_INT16 => VoxelData::I16(raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()),
            _ => VoxelData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        NiftiVolume::new(dims, pixdim, data)
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &NiftiVolume) -> Result<(), NiftiError> {
    std::fs::write(path, volume.to_bytes())?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<NiftiVolume, NiftiError> {
    NiftiVolume::from_bytes(&std::fs::read(path)?)
}

fn put_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], at: usize, v: i32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], at: usize, v: f32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn get_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn get_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}
