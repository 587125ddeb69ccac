//! The TNSR tensor file format and the bundle container built on it.
//!
//! A TNSR record is:
//!
//! ```text
//! b"TNSR" | u8 version=1 | u8 dtype (0=f32, 1=f64, 2=u8) | u8 ndim
//!        | ndim × u32 LE extents | row-major LE payload
//! ```
//!
//! A bundle (checkpoints, parameter sets) is `b"TNSB" | u8 version=1 |
//! u32 LE manifest length | manifest JSON | one TNSR record per manifest entry`.
//! The manifest carries a free-form JSON `header` and the ordered tensor names.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const BUNDLE_MAGIC: &[u8; 4] = b"TNSB";
pub const VERSION: u8 = 1;

/// A decoded record of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8 { shape, .. } => shape,
        }
    }

    /// Converts float records to `T`; fails on u8 records.
    pub fn into_float<T: Scalar>(self) -> Option<Tensor<T>> {
        match self {
            AnyTensor::F32(t) => Some(t.cast()),
            AnyTensor::F64(t) => Some(t.cast()),
            AnyTensor::U8 { .. } => None,
        }
    }
}

fn header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(u8::try_from(shape.len()).expect("rank fits in u8"));
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits in u32").to_le_bytes());
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.len() * T::DTYPE.size());
    header(&mut out, T::DTYPE, t.shape());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(numel(shape), data.len());
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + data.len());
    header(&mut out, DType::U8, shape);
    out.extend_from_slice(data);
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], String> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or("truncated record")?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one record from the front of `bytes`, returning it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> std::result::Result<(AnyTensor, usize), String> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err("bad magic".into());
    }
    let fixed = take(bytes, &mut pos, 3)?;
    if fixed[0] != VERSION {
        return Err(format!("unsupported version {}", fixed[0]));
    }
    let dtype = DType::from_code(fixed[1]).ok_or_else(|| format!("unknown dtype code {}", fixed[1]))?;
    let ndim = fixed[2] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = take(bytes, &mut pos, 4)?;
        shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let n = numel(&shape);
    let payload = take(bytes, &mut pos, n * dtype.size())?;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect()).map_err(|e| e.to_string())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect()).map_err(|e| e.to_string())?),
        DType::U8 => AnyTensor::U8 {
            shape,
            data: payload.to_vec(),
        },
    };
    Ok((t, pos))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes).map_err(|msg| Error::Format {
        path: path.into(),
        msg,
    })?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn write_file<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub header: serde_json::Value,
    pub tensors: Vec<String>,
}

/// Named tensors plus a structured header.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub header: serde_json::Value,
    pub tensors: IndexMap<String, AnyTensor>,
}

impl Bundle {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let any = match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            _ => AnyTensor::F64(t.cast()),
        };
        self.tensors.insert(name.to_string(), any);
    }

    /// All float tensors converted to `T`, in stored order.
    pub fn floats<T: Scalar>(&self) -> IndexMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| v.clone().into_float().map(|t| (k.clone(), t)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            header: self.header.clone(),
            tensors: self.tensors.keys().cloned().collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            match t {
                AnyTensor::F32(t) => out.extend(encode(t)),
                AnyTensor::F64(t) => out.extend(encode(t)),
                AnyTensor::U8 { shape, data } => out.extend(encode_u8(shape, data)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        if take(bytes, &mut pos, 4)? != BUNDLE_MAGIC {
            return Err("bad bundle magic".into());
        }
        let v = take(bytes, &mut pos, 1)?[0];
        if v != VERSION {
            return Err(format!("unsupported bundle version {v}"));
        }
        let len = take(bytes, &mut pos, 4)?;
        let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
        let manifest: Manifest = serde_json::from_slice(take(bytes, &mut pos, len)?).map_err(|e| e.to_string())?;
        let mut tensors = IndexMap::new();
        for name in manifest.tensors {
            let (t, used) = decode(&bytes[pos..]).map_err(|e| format!("{name}: {e}"))?;
            pos += used;
            tensors.insert(name, t);
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(Self {
            header: manifest.header,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.into(),
            msg,
        })
    }
}
