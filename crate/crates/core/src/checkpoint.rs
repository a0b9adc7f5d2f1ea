//! Versioned binary checkpoints: model config, named f64 tensors, optimizer
//! moments and the trainer's RNG position.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, ForcingMode, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFVG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// `stage1` or `stage2`.
    pub stage: String,
    /// Optimizer updates completed in `stage`.
    pub step: u64,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn model(&self) -> &Model {
        &self.trainer.model
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.raw(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.str(&self.stage)?;
        w.u64(self.step)?;
        let model = &self.trainer.model;
        let config: String = model.config.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.str(&config)?;

        w.u32(model.params.len() as u32)?;
        for (_, p) in model.params.iter() {
            w.str(&p.name)?;
            w.u8(p.trainable as u8)?;
            w.u32(p.value.dims().len() as u32)?;
            for &d in p.value.dims() {
                w.u64(d as u64)?;
            }
            w.f64s(p.value.data())?;
        }

        let opt = &self.trainer.opt;
        for x in [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
            w.f64(x)?;
        }
        w.u64(opt.step)?;
        w.u32(opt.m.len() as u32)?;
        for (m, v) in opt.m.iter().zip(&opt.v) {
            w.u64(m.len() as u64)?;
            w.f64s(m)?;
            w.f64s(v)?;
        }

        let rng = &self.trainer.rng;
        w.raw(&rng.get_seed())?;
        w.u64(rng.get_stream())?;
        w.u128(rng.get_word_pos())?;
        w.str(&self.trainer.mode.to_string())?;
        w.u64(self.trainer.accumulation_window.map_or(0, |a| a as u64))?;
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let stage = r.str()?;
        let step = r.u64()?;
        let mut config = ModelConfig::default();
        for line in r.str()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {line:?}")))?;
            config.set(k, v)?;
        }
        let mut model = Model::new(config, 0)?;

        let n = r.u32()? as usize;
        if n != model.params.len() {
            return Err(Error::Format(format!("{n} tensors, model has {}", model.params.len())));
        }
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = r.str()?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let p = model.params.get(id);
            if p.name != name || p.value.dims() != dims.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} {dims:?} does not match {} {:?}",
                    p.name,
                    p.value.dims()
                )));
            }
            let len = p.value.len();
            *model.params.value_mut(id) = Tensor::new(dims, r.f64s(len)?)?;
            model.params.set_param_trainable(id, trainable);
        }

        let mut opt = AdamW::new(&model.params, 0.0);
        opt.lr = r.f64()?;
        opt.beta1 = r.f64()?;
        opt.beta2 = r.f64()?;
        opt.eps = r.f64()?;
        opt.weight_decay = r.f64()?;
        opt.step = r.u64()?;
        let n_moments = r.u32()? as usize;
        if n_moments != opt.m.len() {
            return Err(Error::Format(format!("{n_moments} moment tables, expected {}", opt.m.len())));
        }
        for i in 0..n_moments {
            let len = r.u64()? as usize;
            if len != opt.m[i].len() {
                return Err(Error::Format(format!("moment table {i} has {len} entries")));
            }
            opt.m[i] = r.f64s(len)?;
            opt.v[i] = r.f64s(len)?;
        }

        let mut rng = ChaCha8Rng::from_seed(r.bytes::<32>()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        let mode: ForcingMode = r.str()?.parse()?;
        let accumulation_window = match r.u64()? {
            0 => None,
            a => Some(a as usize),
        };
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            stage,
            step,
            trainer: Trainer {
                model,
                opt,
                rng,
                mode,
                accumulation_window,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
