//! Named-tensor archive.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//! mapping each tensor name to `{dtype, shape, data_offsets}` (offsets relative
//! to the start of the data section) plus an optional `__metadata__` string map,
//! then the raw little-endian, row-major tensor bytes. The byte layout is the
//! one used by `.safetensors` files, so checkpoints exported by common tooling
//! load without conversion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers above this size; a corrupt length prefix would otherwise
/// trigger a huge allocation.
const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
    I64,
    I32,
    U8,
    BOOL,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::U8 | Dtype::BOOL => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_f64(t: &Tensor, dtype: Dtype) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * dtype.size());
        for &v in t.as_standard_layout().iter() {
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F16 => bytes.extend_from_slice(&f32_to_f16_bits(v as f32).to_le_bytes()),
                Dtype::BF16 => {
                    let bits = (v as f32).to_bits();
                    let rounded = bits.wrapping_add(0x7fff + ((bits >> 16) & 1));
                    bytes.extend_from_slice(&((rounded >> 16) as u16).to_le_bytes())
                }
                Dtype::I64 => bytes.extend_from_slice(&(v as i64).to_le_bytes()),
                Dtype::I32 => bytes.extend_from_slice(&(v as i32).to_le_bytes()),
                Dtype::U8 => bytes.push(v as u8),
                Dtype::BOOL => bytes.push(u8::from(v != 0.0)),
            }
        }
        Self {
            dtype,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_f64(&self) -> Tensor {
        let n: usize = self.shape.iter().product();
        let size = self.dtype.size();
        let mut out = Vec::with_capacity(n);
        for chunk in self.bytes.chunks_exact(size) {
            let v = match self.dtype {
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                Dtype::F16 => f16_bits_to_f32(u16::from_le_bytes(chunk.try_into().unwrap())) as f64,
                Dtype::BF16 => {
                    f32::from_bits((u16::from_le_bytes(chunk.try_into().unwrap()) as u32) << 16) as f64
                }
                Dtype::I64 => i64::from_le_bytes(chunk.try_into().unwrap()) as f64,
                Dtype::I32 => i32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                Dtype::U8 | Dtype::BOOL => chunk[0] as f64,
            };
            out.push(v);
        }
        ArrayD::from_shape_vec(IxDyn(&self.shape), out).expect("validated at read time")
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// In-memory archive: an ordered name → tensor map plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    tensors: BTreeMap<String, StoredTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor, dtype: Dtype) {
        self.tensors.insert(name.into(), StoredTensor::from_f64(t, dtype));
    }

    pub fn insert_stored(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .map(StoredTensor::to_f64)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).unwrap(),
            );
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let entry = HeaderEntry {
                dtype: t.dtype,
                shape: t.shape.clone(),
                data_offsets: [offset, offset + t.bytes.len()],
            };
            offset += t.bytes.len();
            header.insert(name.clone(), serde_json::to_value(entry).unwrap());
        }
        let mut header_bytes = serde_json::to_vec(&header).unwrap();
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Archive {
            path: origin.to_path_buf(),
            msg,
        };
        if bytes.len() < 8 {
            return Err(bad("file shorter than the length prefix".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if n > MAX_HEADER_BYTES || 8 + n as usize > bytes.len() {
            return Err(bad(format!("header length {n} exceeds file size {}", bytes.len())));
        }
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..8 + n as usize]).map_err(|e| bad(e.to_string()))?;
        let data = &bytes[8 + n as usize..];
        let mut archive = Archive::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                archive.metadata =
                    serde_json::from_value(value).map_err(|e| bad(format!("metadata: {e}")))?;
                continue;
            }
            let entry: HeaderEntry =
                serde_json::from_value(value).map_err(|e| bad(format!("entry `{name}`: {e}")))?;
            let [start, end] = entry.data_offsets;
            let count: usize = entry.shape.iter().product();
            if start > end || end > data.len() || end - start != count * entry.dtype.size() {
                return Err(bad(format!(
                    "entry `{name}` offsets [{start}, {end}) do not fit {:?} {:?} in {} data bytes",
                    entry.dtype,
                    entry.shape,
                    data.len()
                )));
            }
            archive.tensors.insert(
                name,
                StoredTensor {
                    dtype: entry.dtype,
                    shape: entry.shape,
                    bytes: data[start..end].to_vec(),
                },
            );
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(PathBuf::from(path)));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Read the single tensor stored in `path` (or the one named `name` when given).
pub fn read_single(path: &Path) -> Result<Tensor> {
    let archive = Archive::read(path)?;
    let mut it = archive.iter();
    match (it.next(), it.next()) {
        (Some((_, t)), None) => Ok(t.to_f64()),
        (None, _) => Err(Error::Archive {
            path: path.to_path_buf(),
            msg: "archive holds no tensors".into(),
        }),
        _ => archive
            .tensor("data")
            .map_err(|_| Error::Archive {
                path: path.to_path_buf(),
                msg: "archive holds several tensors and none is named `data`".into(),
            }),
    }
}

/// Write a single tensor under the name `data`.
pub fn write_single(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut a = Archive::new();
    a.insert("data", t, dtype);
    a.write(path)
}

fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = match (exp, frac) {
        (0, 0) => sign,
        (0, f) => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut f = f;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            sign | ((e as u32) << 23) | ((f & 0x3ff) << 13)
        }
        (0x1f, f) => sign | 0x7f80_0000 | (f << 13),
        (e, f) => sign | ((e + 127 - 15) << 23) | (f << 13),
    };
    f32::from_bits(bits)
}

fn f32_to_f16_bits(v: f32) -> u16 {
    let bits = v.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let frac = bits & 0x7f_ffff;
    if exp == 0xff {
        return sign | 0x7c00 | if frac != 0 { 0x200 } else { 0 };
    }
    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }
    if e <= 0 {
        if e < -10 {
            return sign;
        }
        let m = (frac | 0x80_0000) >> (1 - e);
        return sign | ((m + 0x1000) >> 13) as u16;
    }
    let half = sign | ((e as u16) << 10) | (frac >> 13) as u16;
    // round to nearest
    if frac & 0x1000 != 0 {
        half + 1
    } else {
        half
    }
}
