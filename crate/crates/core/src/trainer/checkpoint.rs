//! Checkpoint file format (little-endian):
//!
//! ```text
//! magic    b"FPED"
//! version  u32 = 1
//! kind     u32 (2 = stage-1 model, 3 = stage-2 generator)
//! config   u32 byte length + UTF-8 key = value text
//! blocks   u32 count, then per block:
//!            u16 name length + UTF-8 name, u8 rank, rank x u32 dims,
//!            product(dims) x f64 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::datagen::io::MAGIC;
use crate::error::{FpedError, Result};
use crate::numerics::{ParamStore, Tensor};

const VERSION: u32 = 1;
pub const KIND_STAGE1: u32 = 2;
pub const KIND_STAGE2: u32 = 3;

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub kind: u32,
    pub config: String,
    pub blocks: Vec<(String, Tensor)>,
}

impl CheckpointFile {
    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Parameters in file order.
    pub fn params(&self, prefix_excluded: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in &self.blocks {
            if !n.starts_with(prefix_excluded) {
                s.add(n.clone(), t.clone());
            }
        }
        s
    }
}

pub fn write_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(file.kind)?;
    w.write_u32::<LE>(file.config.len() as u32)?;
    w.write_all(file.config.as_bytes())?;
    w.write_u32::<LE>(file.blocks.len() as u32)?;
    for (name, t) in &file.blocks {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(FpedError::Checkpoint(format!("block {name} cannot be encoded")));
        }
        w.write_u16::<LE>(nb.len() as u16)?;
        w.write_all(nb)?;
        w.write_u8(t.rank() as u8)?;
        for &d in t.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f64::<LE>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FpedError::Checkpoint("not an FPED file".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(FpedError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.read_u32::<LE>()?;
    if kind != KIND_STAGE1 && kind != KIND_STAGE2 {
        return Err(FpedError::Checkpoint(format!("file kind {kind} is not a checkpoint")));
    }
    let n = r.read_u32::<LE>()? as usize;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let config = String::from_utf8(cfg).map_err(|_| FpedError::Checkpoint("config is not UTF-8".into()))?;
    let count = r.read_u32::<LE>()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = r.read_u16::<LE>()? as usize;
        let mut nb = vec![0u8; nl];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| FpedError::Checkpoint("block name is not UTF-8".into()))?;
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LE>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        r.read_f64_into::<LE>(&mut data)?;
        let t = Tensor::new(&shape, data).map_err(|e| FpedError::Checkpoint(format!("block {name}: {e}")))?;
        blocks.push((name, t));
    }
    Ok(CheckpointFile { kind, config, blocks })
}
