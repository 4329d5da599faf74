//! Versioned little-endian checkpoint container.
//!
//! Layout: magic, format version, config hash, step, validation metrics,
//! model config and vocabulary as JSON, named parameter tensors, optional
//! Adam moments, then a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Vocab;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::Tensor;

use super::OptimState;

const MAGIC: &[u8; 8] = b"GKCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Optimizer updates applied when saved.
    pub step: u64,
    /// Validation metric of these parameters.
    pub valid_metric: f64,
    /// Best validation metric seen by the run so far.
    pub best_valid: f64,
    pub model: Model,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.config_hash);
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.valid_metric.to_le_bytes());
        w.extend_from_slice(&self.best_valid.to_le_bytes());
        put_bytes(&mut w, &json(&self.model.config)?);
        put_bytes(&mut w, &json(&self.model.vocab)?);
        let named = self.model.params.named();
        w.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            put_bytes(&mut w, name.as_bytes());
            put_tensor(&mut w, t);
        }
        match &self.optim {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step.to_le_bytes());
                w.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
                for t in o.m.iter().chain(&o.v) {
                    put_tensor(&mut w, t);
                }
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let valid_metric = r.f64()?;
        let best_valid = r.f64()?;
        let config: ModelConfig = unjson(r.bytes()?)?;
        let vocab: Vocab = unjson(r.bytes()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| corrupt("parameter name"))?;
            tensors.push((name, r.tensor()?));
        }
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ModelParams::zeros(&config, &vocab);
        {
            let slots = params.named_mut();
            if slots.len() != tensors.len() {
                return Err(Error::Checkpoint(format!("{} tensors stored, model needs {}", tensors.len(), slots.len())));
            }
            for ((name, slot), (stored, t)) in slots.into_iter().zip(tensors) {
                if name != stored || slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("tensor {stored} {:?} does not fit {name}", t.shape())));
                }
                *slot = t;
            }
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let ostep = r.u64()?;
                let n = r.u32()? as usize;
                let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(OptimState { m, v, step: ostep })
            }
            _ => return Err(corrupt("optimizer flag")),
        };
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config_hash, step, valid_metric, best_valid, model: Model { config, vocab, params }, optim })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint ({what})"))
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn unjson<T: serde::de::DeserializeOwned>(b: &[u8]) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u64).to_le_bytes());
    w.extend_from_slice(b);
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| corrupt("length"))?;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape"))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| corrupt("shape"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}
