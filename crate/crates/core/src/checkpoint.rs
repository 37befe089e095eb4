//! Binary checkpoints for warm starts and resumable training.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic        8 bytes  "FEMBCKPT"
//! version      u32      1
//! cfg_digest   32 bytes SHA-256 of the model architecture
//! round        u64      rounds completed
//! backbone_len u64
//! head_len     u64      0 when only the backbone is released
//! clip_norm    f64      current clip norm (+inf when clipping is off)
//! params       (backbone_len + head_len) x f64
//! velocity_len u64      0 or backbone_len + head_len
//! velocity     velocity_len x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamVector;

pub const MAGIC: &[u8; 8] = b"FEMBCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg_digest: [u8; 32],
    pub round: u64,
    pub backbone: ParamVector,
    pub head: Option<ParamVector>,
    pub clip_norm: f64,
    pub velocity: Option<ParamVector>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let head_len = self.head.as_ref().map_or(0, ParamVector::len);
        let total = self.backbone.len() + head_len;
        if let Some(v) = &self.velocity {
            if v.len() != total {
                return Err(Error::Checkpoint(format!(
                    "velocity length {} does not match parameter length {total}",
                    v.len()
                )));
            }
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.cfg_digest)?;
        w.write_all(&self.round.to_le_bytes())?;
        w.write_all(&(self.backbone.len() as u64).to_le_bytes())?;
        w.write_all(&(head_len as u64).to_le_bytes())?;
        w.write_all(&self.clip_norm.to_le_bytes())?;
        write_reals(w, self.backbone.as_slice())?;
        if let Some(h) = &self.head {
            write_reals(w, h.as_slice())?;
        }
        match &self.velocity {
            Some(v) => {
                w.write_all(&(v.len() as u64).to_le_bytes())?;
                write_reals(w, v.as_slice())?;
            }
            None => w.write_all(&0u64.to_le_bytes())?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut cfg_digest = [0u8; 32];
        r.read_exact(&mut cfg_digest)?;
        let round = read_u64(r)?;
        let backbone_len = read_len(r)?;
        let head_len = read_len(r)?;
        let clip_norm = f64::from_le_bytes(read_array(r)?);
        let backbone = ParamVector::new(read_reals(r, backbone_len)?)?;
        let head = match head_len {
            0 => None,
            n => Some(ParamVector::new(read_reals(r, n)?)?),
        };
        let velocity = match read_len(r)? {
            0 => None,
            n if n == backbone_len + head_len => Some(ParamVector::new(read_reals(r, n)?)?),
            n => {
                return Err(Error::Checkpoint(format!(
                    "velocity length {n} does not match parameter length {}",
                    backbone_len + head_len
                )))
            }
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            cfg_digest,
            round,
            backbone,
            head,
            clip_norm,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_reals(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    let n = read_u64(r)?;
    // 2^32 reals is far beyond any desk-scale model
    if n > u32::MAX as u64 {
        return Err(Error::Checkpoint(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_reals(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
