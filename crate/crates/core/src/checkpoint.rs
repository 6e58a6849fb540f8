//! Little-endian checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic    b"PFCK"
//! version  u32
//! count    u32
//! repeated count times:
//!   name_len u32, name (utf-8)
//!   dtype    u8   (0 = f64, 1 = f32, 2 = u8, 3 = u32)
//!   rank     u8
//!   dims     u64 * rank
//!   values   raw little-endian, product(dims) elements
//! ```
//!
//! Model metadata (dimensions, loss weights) travels as a `u8` entry named
//! [`META_ENTRY`] holding key-value text.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;
pub const META_ENTRY: &str = "__meta__";

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F64(Tensor),
    F32 { shape: Vec<usize>, values: Vec<f32> },
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F64(_) => 0,
            EntryData::F32 { .. } => 1,
            EntryData::U8(_) => 2,
            EntryData::U32(_) => 3,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            EntryData::F64(t) => t.shape().to_vec(),
            EntryData::F32 { shape, .. } => shape.clone(),
            EntryData::U8(v) => vec![v.len()],
            EntryData::U32(v) => vec![v.len()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, EntryData)>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: EntryData) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| n == name) {
            slot.1 = data;
        } else {
            self.entries.push((name.to_string(), data));
        }
    }

    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_meta(&mut self, text: &str) {
        self.insert(META_ENTRY, EntryData::U8(text.as_bytes().to_vec()));
    }

    pub fn meta(&self) -> Option<String> {
        match self.get(META_ENTRY) {
            Some(EntryData::U8(b)) => String::from_utf8(b.clone()).ok(),
            _ => None,
        }
    }

    /// Stores every parameter as `prefix.name`.
    pub fn insert_params(&mut self, prefix: &str, ps: &ParameterSet) {
        for (name, t) in ps.iter() {
            self.insert(&format!("{prefix}.{name}"), EntryData::F64(t.clone()));
        }
    }

    /// Loads every parameter of `ps` from `prefix.name` entries.
    pub fn load_params(&self, prefix: &str, ps: &mut ParameterSet) -> Result<()> {
        let mut loaded = ParameterSet::new();
        let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}.{name}");
            match self.get(&key) {
                Some(EntryData::F64(t)) => {
                    loaded.add(&name, t.clone());
                }
                Some(EntryData::F32 { shape, values }) => {
                    loaded.add(&name, Tensor::new(shape, values.iter().map(|&v| v as f64).collect())?);
                }
                _ => return Err(fmt_err(format!("missing tensor {key}"))),
            }
        }
        ps.load_from(&loaded)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.tag());
            let dims = data.dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                EntryData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::F32 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::U8(v) => out.extend_from_slice(v),
                EntryData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| fmt_err("entry name is not utf-8"))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = match tag {
                0 => {
                    let raw = r.take(numel * 8)?;
                    let vals = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::F64(Tensor::new(&dims, vals)?)
                }
                1 => {
                    let raw = r.take(numel * 4)?;
                    let values = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::F32 { shape: dims, values }
                }
                2 => EntryData::U8(r.take(numel)?.to_vec()),
                3 => {
                    let raw = r.take(numel * 4)?;
                    EntryData::U32(raw.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                t => return Err(fmt_err(format!("unknown dtype tag {t} for {name}"))),
            };
            ck.entries.push((name, data));
        }
        if r.pos != buf.len() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn digest(&self) -> String {
        let d = Sha256::digest(self.to_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}
