//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CINP" | version u32 | config_len u64 | config JSON | step u64
//! | n_tensors u32 | n_tensors x record
//! | adam: step_count u64, beta1 f64, beta2 f64, epsilon f64, weight_decay f64,
//!         n_slots u32, n_slots x (first record, second record)
//! | SHA-256 of everything above
//! record = name_len u32 | name | dtype u8 (0 = f64) | ndim u32 | ndim x u64 | payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::Config;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::objectives::TrainedModel;
use crate::tensor::{AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"CINP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Parameters, optimizer state, and the config they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: usize,
    pub params: ModelParams,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn new(config: Config, model: TrainedModel) -> Self {
        Self { config, step: model.step, params: model.params, optimizer: model.optimizer }
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel { params: self.params, optimizer: self.optimizer, step: self.step }
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.config).expect("config serializes");
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(ckpt.step as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    let adam = &ckpt.optimizer;
    out.extend_from_slice(&adam.step_count.to_le_bytes());
    for x in [adam.beta1, adam.beta2, adam.epsilon, adam.weight_decay] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(adam.first_moment.len() as u32).to_le_bytes());
    for (i, (m, v)) in adam.first_moment.iter().zip(&adam.second_moment).enumerate() {
        put_record(&mut out, &format!("m{i}"), &[m.len()], m);
        put_record(&mut out, &format!("v{i}"), &[v.len()], v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("length overflows usize".into()))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::CorruptCheckpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = self.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| self.len()).collect::<Result<_>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: implausible shape {shape:?}")))?;
        let bytes = self.take(numel * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, shape, data))
    }
}

/// Parses a checkpoint and checks every tensor against the shapes its config implies.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let config_len = r.len()?;
    let config: Config = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("embedded config: {e}")))?;
    let step = r.len()?;

    let expected = init_params(&config.model, 0)?;
    let n = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let (name, shape, data) = r.record()?;
        let want = expected
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected tensor `{name}`")))?;
        if want.shape() != shape.as_slice() {
            return Err(Error::shape("load_checkpoint", format!("{name}: stored {shape:?}, config implies {:?}", want.shape())));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if let Some(missing) = expected.names().find(|k| !tensors.contains_key(*k)) {
        return Err(Error::CorruptCheckpoint(format!("missing tensor `{missing}`")));
    }
    let params = ModelParams::from_map(tensors);

    let step_count = r.u64()?;
    let (beta1, beta2, epsilon, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let slots = r.u32()? as usize;
    if slots != params.len() {
        return Err(Error::CorruptCheckpoint(format!("{slots} optimizer slots for {} tensors", params.len())));
    }
    let mut first_moment = Vec::with_capacity(slots);
    let mut second_moment = Vec::with_capacity(slots);
    for (_, p) in params.iter() {
        let (_, _, m) = r.record()?;
        let (_, _, v) = r.record()?;
        if m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::shape("load_checkpoint", "optimizer moment length differs from its tensor"));
        }
        first_moment.push(m);
        second_moment.push(v);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let optimizer = AdamState { first_moment, second_moment, step_count, beta1, beta2, epsilon, weight_decay };
    Ok(Checkpoint { config, step, params, optimizer })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
