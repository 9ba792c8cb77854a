//! Single-file versioned checkpoints.
//!
//! A checkpoint carries the phase cursor (iteration, epoch), every parameter
//! tensor keyed by name and sub-network, the full optimizer state, and the
//! stream descriptor (master seed plus counters) from which every random
//! draw of the run derives — reloading and resuming therefore reproduces the
//! exact subsequent loss sequence. Files embed the config digest and a
//! payload hash; corrupt or version-mismatched files are rejected before any
//! state is applied.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Adam, ParamId, Subnet};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"UDALNCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::Adapt => 1,
        }
    }

    fn from_code(c: u8) -> Result<Phase> {
        match c {
            0 => Ok(Phase::Pretrain),
            1 => Ok(Phase::Adapt),
            _ => Err(Error::Checkpoint(format!("unknown phase code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub phase: Phase,
    pub iteration: u64,
    pub epoch: u64,
    pub epoch_start_iter: u64,
    pub master_seed: u64,
    pub config_digest: [u8; 32],
    pub shape_digest: [u8; 32],
    pub params: Vec<(String, Subnet, ArrayD<f64>)>,
    pub adam_m: Vec<ArrayD<f64>>,
    pub adam_v: Vec<ArrayD<f64>>,
    pub adam_t: Vec<u64>,
}

impl Checkpoint {
    /// Snapshots the model and optimizer at a phase cursor.
    pub fn capture(
        model: &Model,
        adam: &Adam,
        cfg: &TrainConfig,
        phase: Phase,
        iteration: u64,
        epoch: u64,
        epoch_start_iter: u64,
    ) -> Checkpoint {
        let params = model
            .store
            .ids()
            .map(|p| {
                (
                    model.store.name(p).to_string(),
                    model.store.subnet(p),
                    model.store.value(p).clone(),
                )
            })
            .collect();
        let (m, v, t) = adam.state();
        Checkpoint {
            version: FORMAT_VERSION,
            phase,
            iteration,
            epoch,
            epoch_start_iter,
            master_seed: cfg.seed,
            config_digest: cfg.digest(),
            shape_digest: cfg.shape_digest(),
            params,
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            adam_t: t.to_vec(),
        }
    }

    /// Writes parameters and optimizer state back into a freshly built model.
    /// The model must have the identical shape (names and tensor shapes).
    pub fn apply(&self, model: &mut Model, adam: &mut Adam, cfg: &TrainConfig) -> Result<()> {
        if self.shape_digest != cfg.shape_digest() {
            return Err(Error::Checkpoint(
                "checkpoint was trained with a different model shape".into(),
            ));
        }
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, subnet, value) in &self.params {
            let p = model
                .store
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if model.store.subnet(p) != *subnet
                || model.store.value(p).shape() != value.shape()
            {
                return Err(Error::Checkpoint(format!("parameter {name} mismatch")));
            }
            *model.store.value_mut(p) = value.clone();
        }
        adam.restore(self.adam_m.clone(), self.adam_v.clone(), self.adam_t.clone());
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = Vec::with_capacity(1 << 20);
        body.extend_from_slice(MAGIC);
        put_u32(&mut body, self.version);
        body.push(self.phase.code());
        put_u64(&mut body, self.iteration);
        put_u64(&mut body, self.epoch);
        put_u64(&mut body, self.epoch_start_iter);
        put_u64(&mut body, self.master_seed);
        body.extend_from_slice(&self.config_digest);
        body.extend_from_slice(&self.shape_digest);
        put_u32(&mut body, self.params.len() as u32);
        for (name, subnet, value) in &self.params {
            let name_bytes = name.as_bytes();
            put_u32(&mut body, name_bytes.len() as u32);
            body.extend_from_slice(name_bytes);
            body.push(*subnet as u8);
            put_tensor(&mut body, value);
        }
        for i in 0..self.params.len() {
            put_tensor(&mut body, &self.adam_m[i]);
            put_tensor(&mut body, &self.adam_v[i]);
            put_u64(&mut body, self.adam_t[i]);
        }
        let hash: [u8; 32] = Sha256::digest(&body).into();
        body.extend_from_slice(&hash);

        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        // write-then-rename keeps a crash from leaving a torn file behind
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 32 + MAGIC.len() {
            return Err(Error::Checkpoint(format!(
                "{} is truncated",
                path.display()
            )));
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let hash: [u8; 32] = Sha256::digest(body).into();
        if hash != stored_hash {
            return Err(Error::Checkpoint(format!(
                "{} is corrupt (payload hash mismatch); no state applied",
                path.display()
            )));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        let magic = cur.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} does not match supported version {FORMAT_VERSION}"
            )));
        }
        let phase = Phase::from_code(cur.u8()?)?;
        let iteration = cur.u64()?;
        let epoch = cur.u64()?;
        let epoch_start_iter = cur.u64()?;
        let master_seed = cur.u64()?;
        let config_digest: [u8; 32] = cur.take(32)?.try_into().expect("fixed width");
        let shape_digest: [u8; 32] = cur.take(32)?.try_into().expect("fixed width");
        let count = cur.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?;
            let subnet_code = cur.u8()?;
            let subnet = Subnet::ALL
                .get(subnet_code as usize)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("bad subnet code {subnet_code}")))?;
            let value = cur.tensor()?;
            params.push((name, subnet, value));
        }
        let mut adam_m = Vec::with_capacity(count);
        let mut adam_v = Vec::with_capacity(count);
        let mut adam_t = Vec::with_capacity(count);
        for _ in 0..count {
            adam_m.push(cur.tensor()?);
            adam_v.push(cur.tensor()?);
            adam_t.push(cur.u64()?);
        }
        Ok(Checkpoint {
            version,
            phase,
            iteration,
            epoch,
            epoch_start_iter,
            master_seed,
            config_digest,
            shape_digest,
            params,
            adam_m,
            adam_v,
            adam_t,
        })
    }

    /// Rebuilds a model and optimizer pair from this checkpoint.
    pub fn restore_model(&self, cfg: &TrainConfig) -> Result<(Model, Adam)> {
        let mut model = Model::new(cfg)?;
        let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2);
        self.apply(&mut model, &mut adam, cfg)?;
        Ok((model, adam))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &ArrayD<f64>) {
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("fixed")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("fixed")))
    }

    fn tensor(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("fixed")))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

/// The sub-network key set every checkpoint must cover.
pub fn subnet_key_set() -> Vec<&'static str> {
    Subnet::ALL.iter().map(|s| s.name()).collect()
}

/// Convenience: ids of a model's parameters grouped by sub-network name.
pub fn params_by_subnet(model: &Model) -> Vec<(&'static str, Vec<ParamId>)> {
    Subnet::ALL
        .iter()
        .map(|s| {
            (
                s.name(),
                model
                    .store
                    .ids()
                    .filter(|&p| model.store.subnet(p) == *s)
                    .collect(),
            )
        })
        .collect()
}
