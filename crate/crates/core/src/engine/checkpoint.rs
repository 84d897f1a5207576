//! Little-endian binary checkpoint container.
//!
//! ```text
//! "SPRL" | version u32 | meta_len u32 | meta (UTF-8 JSON)
//!        | record_count u32 | record*
//! record := name_len u32 | name | rank u32 | dim u32 * rank | f32 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPRL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.records.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record {name:?}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(w, self.meta.as_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.records {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta = String::from_utf8(read_bytes(r)?)
            .map_err(|e| Error::Format(format!("checkpoint meta is not UTF-8: {e}")))?;
        let count = read_u32(r)?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?)
                .map_err(|e| Error::Format(format!("record name is not UTF-8: {e}")))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub(crate) fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > (1 << 30) {
        return Err(Error::Format(format!("implausible length {n}")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
