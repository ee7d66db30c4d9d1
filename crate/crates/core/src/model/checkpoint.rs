//! Binary checkpoint: magic, version, model config echo, then named blocks
//! of dimension-prefixed little-endian `f64` values.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ParamStore, TwoStreamModel};
use crate::autodiff::Tensor;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSCKPT01";
const VERSION: u32 = 1;

/// Raw checkpoint contents before they are matched against a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub config_echo: String,
    pub params: ParamStore,
}

pub fn encode_checkpoint(model: &TwoStreamModel, epoch: u32) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(MAGIC);
    w.u32(VERSION);
    w.u32(epoch);
    w.str(&model.config.echo());
    w.u32(model.params.len() as u32);
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        w.str(name);
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.bytes
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Reader::new(bytes, "checkpoint");
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let epoch = c.u32()?;
    let config_echo = c.str()?;
    let blocks = c.u32()? as usize;
    let mut names = Vec::with_capacity(blocks);
    let mut tensors = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let name = c.str()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("block {name}: {e}")))?,
        );
        names.push(name);
    }
    c.finish()?;
    Ok(Checkpoint {
        epoch,
        config_echo,
        params: ParamStore::new(names, tensors)?,
    })
}

pub fn save_checkpoint(path: &Path, model: &TwoStreamModel, epoch: u32) -> Result<()> {
    fs::write(path, encode_checkpoint(model, epoch))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint, rejecting it unless it was written for `config`.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(TwoStreamModel, u32)> {
    let ck = read_checkpoint(path)?;
    let expected = config.echo();
    if ck.config_echo != expected {
        let diff = expected
            .lines()
            .zip(ck.config_echo.lines())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected `{a}`, found `{b}`"))
            .unwrap_or_else(|| "config echo differs".into());
        return Err(Error::CheckpointMismatch(diff));
    }
    // Same config implies the same block layout; verify anyway.
    let reference = TwoStreamModel::init(config.clone(), 0)?;
    if reference.params.names() != ck.params.names()
        || reference
            .params
            .tensors()
            .iter()
            .zip(ck.params.tensors())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::CheckpointMismatch("parameter blocks differ".into()));
    }
    Ok((
        TwoStreamModel {
            config: config.clone(),
            params: ck.params,
        },
        ck.epoch,
    ))
}
