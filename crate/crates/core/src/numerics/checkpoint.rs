//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PGV1" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 bytes | rows: u64 | cols: u64 | rows*cols f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGV1";
pub const FORMAT_VERSION: u32 = 1;

/// An ordered list of named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor2)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            records: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor2) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every store parameter from this checkpoint. Missing names and
    /// shape disagreements are errors; extra records are ignored.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            store.set_value(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, t) in &self.records {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?.ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut records = Vec::new();
        while let Some(len) = read_u32(&mut r)? {
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(truncated)?;
                data.push(f64::from_le_bytes(buf));
            }
            records.push((name, Tensor2::from_vec(rows, cols, data)?));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("truncated record".into())
}

/// Reads a u32, or `None` on a clean EOF before the first byte.
fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(Error::Checkpoint("truncated record".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}
