//! `CTEX1` checkpoint container.
//!
//! ```text
//! magic    5 bytes   "CTEX1"
//! records  repeated until end of file:
//!   name_len  u32 LE
//!   name      name_len bytes, UTF-8
//!   dtype     u8      0 = u8, 1 = f32, 2 = f64
//!   rank      u32 LE
//!   dims      rank x u64 LE
//!   values    product(dims) little-endian elements
//! ```
//!
//! Text metadata (architecture, map settings) is stored as rank-1 `u8`
//! records.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CTEX1";

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    fn code(&self) -> u8 {
        match self {
            RecordData::U8(_) => 0,
            RecordData::F32(_) => 1,
            RecordData::F64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::U8(v) => v.len(),
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.dims.iter().product::<usize>() != record.data.len() {
            return Err(Error::Checkpoint(format!(
                "record {} has {} values for dims {:?}",
                record.name,
                record.data.len(),
                record.dims
            )));
        }
        if self.get(&record.name).is_some() {
            return Err(Error::Checkpoint(format!(
                "duplicate record {}",
                record.name
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.push(Record {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: RecordData::F64(t.data().to_vec()),
        })
    }

    pub fn push_meta(&mut self, name: &str, text: &str) -> Result<()> {
        self.push(Record {
            name: name.to_string(),
            dims: vec![text.len()],
            data: RecordData::U8(text.as_bytes().to_vec()),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Floating-point record as an `f64` tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        let data = match &r.data {
            RecordData::F64(v) => v.clone(),
            RecordData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            RecordData::U8(_) => {
                return Err(Error::Checkpoint(format!("record {name} is not numeric")))
            }
        };
        Tensor::new(r.dims.clone(), data)
    }

    pub fn meta(&self, name: &str) -> Result<String> {
        match self.get(name).map(|r| &r.data) {
            Some(RecordData::U8(bytes)) => String::from_utf8(bytes.clone())
                .map_err(|_| Error::Checkpoint(format!("record {name} is not UTF-8"))),
            Some(_) => Err(Error::Checkpoint(format!("record {name} is not text"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.code());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::U8(v) => out.extend_from_slice(v),
                RecordData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if !buf.starts_with(MAGIC) {
            return Err(Error::Checkpoint("missing CTEX1 magic".into()));
        }
        let mut rd = Reader {
            buf,
            pos: MAGIC.len(),
        };
        let mut ck = Checkpoint::new();
        while rd.pos < buf.len() {
            let name_len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let code = rd.take(1)?[0];
            let rank = rd.u32()? as usize;
            let dims = (0..rank)
                .map(|_| rd.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("record {name} is too large")))?;
            let data = match code {
                0 => RecordData::U8(rd.take(n)?.to_vec()),
                1 => RecordData::F32(
                    rd.take(
                        n.checked_mul(4)
                            .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
                    )?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                ),
                2 => RecordData::F64(
                    rd.take(
                        n.checked_mul(8)
                            .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                ),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "record {name} has unknown dtype code {other}"
                    )))
                }
            };
            ck.push(Record { name, dims, data })?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
