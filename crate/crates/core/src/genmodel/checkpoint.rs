//! Binary model checkpoint.
//!
//! Little-endian layout, version 1:
//!
//! ```text
//! magic         8 bytes   "MVGANCKP"
//! version       u32
//! config_len    u32       byte length of the JSON-encoded ModelConfig
//! config        config_len bytes (UTF-8 JSON)
//! seed          u64       run seed
//! step          u64       completed outer steps
//! 3 x params    u64 count, then count x f64     (theta_e, theta_g, theta_d)
//! n_optim       u32
//! n_optim x     u8 kind (0 = sgd, 1 = adam), u64 step_count,
//!               f64 learning_rate, f64 beta1, f64 beta2, f64 epsilon,
//!               u64 count, count x f64 (m), u64 count, count x f64 (v)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::neural::{OptimizerKind, OptimizerState, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVGANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizers: Vec<OptimizerState>,
    pub seed: u64,
    pub step: u64,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(values.len() as u64)?;
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>().map_err(truncated)?;
    if n > (1 << 36) {
        return Err(Error::Checkpoint(format!("implausible block length {n}")));
    }
    (0..n)
        .map(|_| r.read_f64::<LittleEndian>().map_err(truncated))
        .collect()
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable: {e}"))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config encoding: {e}")))?;
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(config.len() as u32).map_err(io)?;
        w.write_all(&config).map_err(io)?;
        w.write_u64::<LittleEndian>(self.seed).map_err(io)?;
        w.write_u64::<LittleEndian>(self.step).map_err(io)?;
        for p in [&self.params.theta_e, &self.params.theta_g, &self.params.theta_d] {
            write_f64s(w, p.as_slice()).map_err(io)?;
        }
        w.write_u32::<LittleEndian>(self.optimizers.len() as u32).map_err(io)?;
        for o in &self.optimizers {
            let kind = match o.kind {
                OptimizerKind::Sgd => 0u8,
                OptimizerKind::Adam => 1u8,
            };
            w.write_u8(kind).map_err(io)?;
            w.write_u64::<LittleEndian>(o.step_count).map_err(io)?;
            for v in [o.learning_rate, o.beta1, o.beta2, o.epsilon] {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
            write_f64s(w, &o.m).map_err(io)?;
            write_f64s(w, &o.v).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut config = vec![0u8; len];
        r.read_exact(&mut config).map_err(truncated)?;
        let config: ModelConfig = serde_json::from_slice(&config)
            .map_err(|e| Error::Checkpoint(format!("config decoding: {e}")))?;
        config.validate()?;
        let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let step = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let params = ModelParams {
            theta_e: ParamSet::new(read_f64s(r)?),
            theta_g: ParamSet::new(read_f64s(r)?),
            theta_d: ParamSet::new(read_f64s(r)?),
        };
        params.check(&config)?;
        let n = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut optimizers = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let kind = match r.read_u8().map_err(truncated)? {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::Adam,
                k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
            };
            let step_count = r.read_u64::<LittleEndian>().map_err(truncated)?;
            let mut hyper = [0.0; 4];
            for h in &mut hyper {
                *h = r.read_f64::<LittleEndian>().map_err(truncated)?;
            }
            let m = read_f64s(r)?;
            let v = read_f64s(r)?;
            optimizers.push(OptimizerState {
                kind,
                step_count,
                learning_rate: hyper[0],
                beta1: hyper[1],
                beta2: hyper[2],
                epsilon: hyper[3],
                m,
                v,
            });
        }
        Ok(Self {
            config,
            params,
            optimizers,
            seed,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}
