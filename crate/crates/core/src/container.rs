//! Little-endian named-array container.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   b"HTARRAY1"
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: {"arrays": [{name, dtype, shape, offset, nbytes}, ...]}
//! padding            zero bytes up to the next multiple of 8
//! data               array payloads; `offset` is relative to the start of this section
//! ```
//!
//! Supported dtypes are `f64`, `u32`, `i32` and `utf8` (shape `[byte_len]`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HTARRAY1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    I32(Vec<i32>),
    Utf8(String),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
            ArrayData::I32(_) => "i32",
            ArrayData::Utf8(_) => "utf8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::Utf8(s) => s.len(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::Utf8(s) => s.as_bytes().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<Entry>,
}

/// Ordered collection of named arrays.
#[derive(Debug, Clone, Default)]
pub struct Container {
    arrays: BTreeMap<String, Array>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data: ArrayData::F64(data),
            },
        );
    }

    pub fn insert_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data: ArrayData::U32(data),
            },
        );
    }

    pub fn insert_i32(&mut self, name: &str, shape: &[usize], data: Vec<i32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data: ArrayData::I32(data),
            },
        );
    }

    pub fn insert_str(&mut self, name: &str, value: &str) {
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: vec![value.len()],
                data: ArrayData::Utf8(value.to_string()),
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.get(name)?.shape)
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            other => Err(Error::Format(format!(
                "array `{name}` has dtype {}, expected f64",
                other.dtype()
            ))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U32(v) => Ok((&a.shape, v)),
            other => Err(Error::Format(format!(
                "array `{name}` has dtype {}, expected u32",
                other.dtype()
            ))),
        }
    }

    pub fn i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I32(v) => Ok((&a.shape, v)),
            other => Err(Error::Format(format!(
                "array `{name}` has dtype {}, expected i32",
                other.dtype()
            ))),
        }
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::Utf8(s) => Ok(s),
            other => Err(Error::Format(format!(
                "array `{name}` has dtype {}, expected utf8",
                other.dtype()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut data = Vec::new();
        for (name, a) in &self.arrays {
            while data.len() % 8 != 0 {
                data.push(0);
            }
            let bytes = a.data.to_bytes();
            entries.push(Entry {
                name: name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
                offset: data.len() as u64,
                nbytes: bytes.len() as u64,
            });
            data.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header { arrays: entries }).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        while out.len() % 8 != 0 {
            out.push(0);
        }
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let data_start = hend.div_ceil(8) * 8;
        let data = bytes.get(data_start..).unwrap_or(&[]);

        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::Format(format!("array `{}` runs past end of file", e.name)))?;
            let raw = &data[start..end];
            let count: usize = e.shape.iter().product();
            let decoded = match e.dtype.as_str() {
                "f64" => ArrayData::F64(
                    decode_words::<8>(raw, count, &e.name)?
                        .map(f64::from_le_bytes)
                        .collect(),
                ),
                "u32" => ArrayData::U32(
                    decode_words::<4>(raw, count, &e.name)?
                        .map(u32::from_le_bytes)
                        .collect(),
                ),
                "i32" => ArrayData::I32(
                    decode_words::<4>(raw, count, &e.name)?
                        .map(i32::from_le_bytes)
                        .collect(),
                ),
                "utf8" => {
                    if raw.len() != count {
                        return Err(Error::Format(format!("string `{}` length mismatch", e.name)));
                    }
                    ArrayData::Utf8(
                        String::from_utf8(raw.to_vec())
                            .map_err(|_| Error::Format(format!("string `{}` is not UTF-8", e.name)))?,
                    )
                }
                other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
            };
            debug_assert_eq!(decoded.len(), count);
            arrays.insert(
                e.name,
                Array {
                    shape: e.shape,
                    data: decoded,
                },
            );
        }
        Ok(Self { arrays })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}

fn decode_words<'a, const N: usize>(
    raw: &'a [u8],
    count: usize,
    name: &str,
) -> Result<impl Iterator<Item = [u8; N]> + 'a> {
    if raw.len() != count * N {
        return Err(Error::Format(format!(
            "array `{name}` holds {} bytes, shape needs {}",
            raw.len(),
            count * N
        )));
    }
    Ok(raw.chunks_exact(N).map(|c| c.try_into().unwrap()))
}
