//! GITK array container: the on-disk exchange format for phantoms, masks,
//! buckets, reconstructions, and model checkpoints.
//!
//! Layout, all little-endian regardless of host:
//!
//! ```text
//! magic   4 bytes  "GITK"
//! version u32      currently 1
//! dtype   u32      1 = f32, 2 = f64, 3 = u16
//! ndim    u32
//! dims    ndim x u64
//! payload prod(dims) * sizeof(dtype), row-major
//! metalen u32
//! meta    metalen bytes of UTF-8 JSON (must parse to an object)
//! ```

use crate::error::{GhostError, Result};
use crate::image::Image;
use std::io::{Read, Write};
use std::path::Path;

pub const GITK_MAGIC: [u8; 4] = *b"GITK";
pub const GITK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum GitkData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl GitkData {
    pub fn len(&self) -> usize {
        match self {
            GitkData::F32(v) => v.len(),
            GitkData::F64(v) => v.len(),
            GitkData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_code(&self) -> u32 {
        match self {
            GitkData::F32(_) => 1,
            GitkData::F64(_) => 2,
            GitkData::U16(_) => 3,
        }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        match self {
            GitkData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            GitkData::F64(v) => v.clone(),
            GitkData::U16(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GitkArray {
    pub dims: Vec<u64>,
    pub data: GitkData,
    pub metadata: serde_json::Value,
}

impl GitkArray {
    pub fn new(dims: Vec<u64>, data: GitkData, metadata: serde_json::Value) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(GhostError::Format(format!(
                "payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if !metadata.is_object() {
            return Err(GhostError::Format("metadata must be a JSON object".into()));
        }
        Ok(GitkArray {
            dims,
            data,
            metadata,
        })
    }

    pub fn from_image(image: &Image, metadata: serde_json::Value) -> Result<Self> {
        GitkArray::new(
            vec![image.height as u64, image.width as u64],
            GitkData::F64(image.pixels.clone()),
            metadata,
        )
    }

    pub fn to_image(&self) -> Result<Image> {
        if self.dims.len() != 2 {
            return Err(GhostError::Format(format!(
                "expected a 2-D array for an image, got dims {:?}",
                self.dims
            )));
        }
        Image::new(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.data.as_f64_vec(),
        )
    }
}

pub fn write_gitk(path: &Path, array: &GitkArray) -> Result<()> {
    let meta_bytes = serde_json::to_vec(&array.metadata)?;
    let mut out = Vec::new();
    out.extend_from_slice(&GITK_MAGIC);
    out.extend_from_slice(&GITK_VERSION.to_le_bytes());
    out.extend_from_slice(&array.data.dtype_code().to_le_bytes());
    out.extend_from_slice(&(array.dims.len() as u32).to_le_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &array.data {
        GitkData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        GitkData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        GitkData::U16(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GhostError::Format(format!(
                "truncated container: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_gitk(path: &Path) -> Result<GitkArray> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != GITK_MAGIC {
        return Err(GhostError::Format("bad magic, not a GITK container".into()));
    }
    let version = cur.u32()?;
    if version != GITK_VERSION {
        return Err(GhostError::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let dtype = cur.u32()?;
    let ndim = cur.u32()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(cur.u64()?);
    }
    let count: u64 = dims.iter().product();
    let count = count as usize;
    let data = match dtype {
        1 => {
            let raw = cur.take(count * 4)?;
            GitkData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        2 => {
            let raw = cur.take(count * 8)?;
            GitkData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        3 => {
            let raw = cur.take(count * 2)?;
            GitkData::U16(
                raw.chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => {
            return Err(GhostError::Format(format!("unknown dtype code {other}")));
        }
    };
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    let metadata: serde_json::Value = serde_json::from_slice(meta_bytes)?;
    GitkArray::new(dims, data, metadata)
}
