//! The `DFCK` checkpoint container.
//!
//! Layout (little-endian): magic `DFCK`, `u32` version, 32-byte SHA-256 of the
//! configuration text, `u64` training step, then the configuration text itself
//! (`u32` length + UTF-8 TOML). Parameters follow as a named-tensor block, then an
//! optional optimizer block and the training progress record.
//!
//! A named-tensor block is a `u32` count and, per tensor, a `u32`-prefixed name,
//! `u32` rank, `u64` dims and `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use diffcore::{AdamConfig, AdamState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{FilterError, Result};
use crate::fusion::{ArchConfig, Architecture};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Early-stopping and scheduling progress of an end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    /// Completed end-to-end epochs.
    pub epoch: u64,
    pub bad_epochs: u64,
    pub best_validation: f64,
    pub stopped: bool,
    /// Parameters at the best validation loss so far.
    pub best_store: Option<ParamStore>,
}

impl Default for TrainMeta {
    fn default() -> Self {
        Self {
            epoch: 0,
            bad_epochs: 0,
            best_validation: f64::INFINITY,
            stopped: false,
            best_store: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigText {
    arch: ArchConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub meta: TrainMeta,
}

fn bad(reason: impl Into<String>) -> FilterError {
    FilterError::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn put_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    put_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    for &v in t.data() {
        put_f64(w, v)?;
    }
    Ok(())
}

fn put_store(w: &mut impl Write, s: &ParamStore) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    for e in s.entries() {
        put_str(w, &e.name)?;
        put_tensor(w, &e.value)?;
    }
    Ok(())
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get_bytes(r)?))
}

const MAX_LEN: u64 = 1 << 28;

fn get_len(r: &mut impl Read, v: u64) -> Result<usize> {
    let _ = r;
    if v > MAX_LEN {
        return Err(bad(format!("implausible length {v}")));
    }
    Ok(v as usize)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as u64;
    let n = get_len(r, n)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| bad("name is not UTF-8"))
}

fn get_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = get_u32(r)? as usize;
    if rank > 8 {
        return Err(bad(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = get_u64(r)?;
        shape.push(get_len(r, d)?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("tensor too large"))?;
    get_len(r, n as u64)?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(get_f64(r)?);
    }
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

fn get_store(r: &mut impl Read) -> Result<ParamStore> {
    let n = get_u32(r)?;
    let mut s = ParamStore::new();
    for _ in 0..n {
        let name = get_str(r)?;
        let t = get_tensor(r)?;
        s.add(name, t);
    }
    Ok(s)
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.entries()
            .iter()
            .zip(b.entries())
            .all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
}

/// SHA-256 of a configuration text.
pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    pub fn new(
        arch: &Architecture,
        train: &TrainConfig,
        adam: Option<&AdamState>,
        meta: &TrainMeta,
    ) -> Self {
        Self {
            arch: arch.config.clone(),
            train: train.clone(),
            step: adam.map_or(0, |a| a.step),
            params: arch.store.clone(),
            adam: adam.cloned(),
            meta: meta.clone(),
        }
    }

    pub fn config_text(&self) -> Result<String> {
        toml::to_string(&ConfigText {
            arch: self.arch.clone(),
            train: self.train.clone(),
        })
        .map_err(|e| FilterError::Config(e.to_string()))
    }

    /// Rebuilds the architecture and installs the stored parameters.
    pub fn architecture(&self) -> Result<Architecture> {
        let mut a = Architecture::new(self.arch.clone(), 0)?;
        if !same_layout(&a.store, &self.params) {
            return Err(bad("parameters do not match the architecture"));
        }
        a.store = self.params.clone();
        Ok(a)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let text = self.config_text()?;
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        w.write_all(&config_hash(&text))?;
        put_u64(w, self.step)?;
        put_str(w, &text)?;
        put_store(w, &self.params)?;
        match &self.adam {
            Some(a) => {
                w.write_all(&[1])?;
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    put_f64(w, v)?;
                }
                put_u64(w, a.step)?;
                put_u32(w, a.first.len() as u32)?;
                for (m, v) in a.first.iter().zip(&a.second) {
                    put_tensor(w, m)?;
                    put_tensor(w, v)?;
                }
                for &s in &a.lr_scale {
                    put_f64(w, s)?;
                }
            }
            None => w.write_all(&[0])?,
        }
        let m = &self.meta;
        put_u64(w, m.epoch)?;
        put_u64(w, m.bad_epochs)?;
        put_f64(w, m.best_validation)?;
        w.write_all(&[m.stopped as u8])?;
        match &m.best_store {
            Some(s) => {
                w.write_all(&[1])?;
                put_store(w, s)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        if &get_bytes::<4>(r)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = get_bytes(r)?;
        let step = get_u64(r)?;
        let text = get_str(r)?;
        if config_hash(&text) != hash {
            return Err(bad("configuration hash mismatch"));
        }
        let cfg: ConfigText = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let params = get_store(r)?;
        let adam = match get_bytes::<1>(r)?[0] {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: get_f64(r)?,
                    beta1: get_f64(r)?,
                    beta2: get_f64(r)?,
                    eps: get_f64(r)?,
                };
                let astep = get_u64(r)?;
                let n = get_u32(r)? as usize;
                if n != params.len() {
                    return Err(bad("optimizer state does not match parameters"));
                }
                let (mut first, mut second) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    first.push(get_tensor(r)?);
                    second.push(get_tensor(r)?);
                }
                let mut lr_scale = Vec::with_capacity(n);
                for _ in 0..n {
                    lr_scale.push(get_f64(r)?);
                }
                Some(AdamState {
                    config,
                    step: astep,
                    first,
                    second,
                    lr_scale,
                })
            }
            f => return Err(bad(format!("bad optimizer flag {f}"))),
        };
        let epoch = get_u64(r)?;
        let bad_epochs = get_u64(r)?;
        let best_validation = get_f64(r)?;
        let stopped = get_bytes::<1>(r)?[0] != 0;
        let best_store = match get_bytes::<1>(r)?[0] {
            0 => None,
            _ => {
                let s = get_store(r)?;
                if !same_layout(&s, &params) {
                    return Err(bad("best parameters do not match the architecture"));
                }
                Some(s)
            }
        };
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            arch: cfg.arch,
            train: cfg.train,
            step,
            params,
            adam,
            meta: TrainMeta {
                epoch,
                bad_epochs,
                best_validation,
                stopped,
                best_store,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
