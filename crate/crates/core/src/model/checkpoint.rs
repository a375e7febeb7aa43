//! Versioned binary checkpoint: magic, version, the model and training
//! configs as TOML, the iteration counter, named parameters
//! (name, shape, little-endian f64 data), momentum buffers and the bank
//! snapshot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, SgdMomentum, TrainConfig, TrainState};
use crate::bank::{ByteReader, PrototypeBank};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"PVCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Configs {
    model: ModelConfig,
    train: TrainConfig,
}

/// Byte-level checkpoint codec.
pub struct Checkpoint;

impl Checkpoint {
    pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
        let configs = Configs { model: state.model.config().clone(), train: state.train.clone() };
        let text = toml::to_string(&configs).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, text.as_bytes());
        out.extend_from_slice(&(state.iteration as u64).to_le_bytes());
        let params = state.model.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (_, name, t) in params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out.extend_from_slice(&state.optimizer.momentum.to_le_bytes());
        for v in &state.optimizer.velocity {
            put_f64s(&mut out, v.data());
        }
        match &state.bank {
            Some(b) => {
                out.push(1);
                put_bytes(&mut out, &b.snapshot());
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(r.error_at(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(8, &format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let text = take_bytes(&mut r)?;
        let text = std::str::from_utf8(text).map_err(|_| r.error_at(at, "config is not UTF-8"))?;
        let configs: Configs = toml::from_str(text).map_err(|e| r.error_at(at, &format!("config: {e}")))?;
        let iteration = r.u64()? as usize;
        let mut model = Model::new(configs.model, 0)?;
        let count = r.u64()? as usize;
        if count != model.params().len() {
            return Err(r.error_at(r.offset() - 8, &format!("{count} parameters, model has {}", model.params().len())));
        }
        for id in model.params().ids().collect::<Vec<_>>() {
            let at = r.offset();
            let name = take_bytes(&mut r)?;
            if name != model.params().name(id).as_bytes() {
                return Err(r.error_at(at, &format!("unexpected parameter {:?}", String::from_utf8_lossy(name))));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != model.params().get(id).shape() {
                return Err(r.error_at(at, &format!("shape {shape:?} for {}", model.params().name(id))));
            }
            let n = shape.iter().product();
            let data = r.f64s(n)?;
            *model.params_mut().get_mut(id) = Tensor::new(shape, data).map_err(|e| r.error_at(at, &e.to_string()))?;
        }
        let momentum = r.f64()?;
        let mut optimizer = SgdMomentum::new(model.params(), momentum);
        for v in &mut optimizer.velocity {
            let data = r.f64s(v.len())?;
            *v = Tensor::new(v.shape().to_vec(), data)?;
        }
        let at = r.offset();
        let bank = match r.take(1)?[0] {
            0 => None,
            1 => {
                let at = r.offset();
                let snap = take_bytes(&mut r)?;
                Some(PrototypeBank::restore(snap).map_err(|e| match e {
                    Error::Parse { offset, message } => Error::Parse { offset: at + 8 + offset, message },
                    other => other,
                })?)
            }
            f => return Err(r.error_at(at, &format!("bad bank flag {f}"))),
        };
        if r.remaining() != 0 {
            return Err(r.error_at(r.offset(), "trailing bytes after checkpoint"));
        }
        if bank.as_ref().map(|b| b.dim()) != model.bank_dim() {
            return Err(r.error_at(at, "bank dimension does not match the model"));
        }
        configs.train.validate()?;
        Ok(TrainState { model, bank, optimizer, train: configs.train, iteration })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_bytes<'a>(r: &mut ByteReader<'a>) -> Result<&'a [u8]> {
    let at = r.offset();
    let n = r.u64()?;
    if n > r.remaining() as u64 {
        return Err(r.error_at(at, &format!("length {n} exceeds remaining {} bytes", r.remaining())));
    }
    r.take(n as usize)
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, Checkpoint::to_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
