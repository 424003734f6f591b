//! Binary checkpoints that resume a stage bit-exactly.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CVSPCKPT" | version u32
//! stage u8 | replication u32 | c_index u32 | c f64 | epoch u64 | csv_rows u64
//! config hash [32]
//! rng seed [32] | rng stream u64 | rng word position u128
//! adam step u64 | bad epochs u64 | stopped u8 | best metric (flag u8, f64)
//! params:  count u32, tensor records
//! masks:   count u32, mask records
//! moments: count u32, (first, second) tensor record pairs named after their parameter
//! best:    count u32, tensor records
//! ```
//!
//! A tensor record is `name_len u32, name, dtype u8 (0 real, 1 complex),
//! ndim u32, dims u64…, re f64…, im f64…`. A mask record is
//! `name_len u32, name, len u64, bits` packed least-significant bit first.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tensor};
use crate::ctensor::{CTensor, RTensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{AdamState, Stage, StageState};

const MAGIC: &[u8; 8] = b"CVSPCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub name: String,
    pub keep: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Where in an experiment a checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub stage: Stage,
    pub replication: u32,
    pub c_index: u32,
    pub c: f64,
    pub csv_rows: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub position: Position,
    /// Epochs completed in this stage.
    pub epoch: u64,
    pub config_hash: [u8; 32],
    pub rng: RngState,
    pub adam_step: u64,
    pub bad_epochs: u64,
    pub stopped: bool,
    pub best_metric: Option<f64>,
    pub params: Vec<TensorRecord>,
    pub masks: Vec<MaskRecord>,
    pub moments: Vec<(String, Tensor, Tensor)>,
    pub best: Vec<TensorRecord>,
}

fn records(store: &ParamStore) -> Vec<TensorRecord> {
    store
        .iter()
        .map(|(_, p)| TensorRecord {
            name: p.name.clone(),
            value: p.value().clone(),
        })
        .collect()
}

fn restore_store(store: &mut ParamStore, recs: &[TensorRecord]) -> Result<()> {
    if recs.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            recs.len(),
            store.len()
        )));
    }
    for r in recs {
        let id = store
            .find(&r.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", r.name)))?;
        store
            .get_mut(id)
            .set_value(r.value.clone())
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", r.name)))?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        state: &StageState,
        position: Position,
        config_hash: [u8; 32],
    ) -> Self {
        let masks = model
            .layers()
            .iter()
            .filter_map(|l| {
                l.mask().map(|keep| MaskRecord {
                    name: l.name().to_string(),
                    keep,
                })
            })
            .collect();
        let moments = state
            .adam
            .moments
            .iter()
            .map(|(id, (m, v))| (model.store.get(*id).name.clone(), m.clone(), v.clone()))
            .collect();
        Self {
            position,
            epoch: state.epoch as u64,
            config_hash,
            rng: RngState::capture(&state.noise),
            adam_step: state.adam.step,
            bad_epochs: state.bad_epochs as u64,
            stopped: state.stopped,
            best_metric: state.best_metric,
            params: records(&model.store),
            masks,
            moments,
            best: state.best_params.as_ref().map(records).unwrap_or_default(),
        }
    }

    /// Loads parameters and masks into `model` and rebuilds the stage state.
    pub fn restore(&self, model: &mut Model) -> Result<StageState> {
        restore_store(&mut model.store, &self.params)?;
        for m in &self.masks {
            model.apply_layer_mask(&m.name, &m.keep)?;
        }
        let mut adam = AdamState {
            step: self.adam_step,
            ..AdamState::default()
        };
        for (name, m, v) in &self.moments {
            let id = model.store.find(name).ok_or_else(|| {
                Error::Checkpoint(format!("moments for unknown parameter `{name}`"))
            })?;
            adam.moments.insert(id, (m.clone(), v.clone()));
        }
        let best_params = if self.best.is_empty() {
            None
        } else {
            let mut store = model.store.clone();
            restore_store(&mut store, &self.best)?;
            Some(store)
        };
        Ok(StageState {
            epoch: self.epoch as usize,
            adam,
            noise: self.rng.restore(),
            best_metric: self.best_metric,
            best_params,
            bad_epochs: self.bad_epochs as usize,
            stopped: self.stopped,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let p = &self.position;
        w.push(p.stage.tag());
        w.extend_from_slice(&p.replication.to_le_bytes());
        w.extend_from_slice(&p.c_index.to_le_bytes());
        w.extend_from_slice(&p.c.to_le_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&p.csv_rows.to_le_bytes());
        w.extend_from_slice(&self.config_hash);
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&self.adam_step.to_le_bytes());
        w.extend_from_slice(&self.bad_epochs.to_le_bytes());
        w.push(u8::from(self.stopped));
        w.push(u8::from(self.best_metric.is_some()));
        w.extend_from_slice(&self.best_metric.unwrap_or(0.0).to_le_bytes());
        write_len(&mut w, self.params.len());
        self.params
            .iter()
            .for_each(|r| write_tensor(&mut w, &r.name, &r.value));
        write_len(&mut w, self.masks.len());
        for m in &self.masks {
            write_name(&mut w, &m.name);
            w.extend_from_slice(&(m.keep.len() as u64).to_le_bytes());
            let mut bytes = vec![0u8; m.keep.len().div_ceil(8)];
            for (i, _) in m.keep.iter().enumerate().filter(|(_, k)| **k) {
                bytes[i / 8] |= 1 << (i % 8);
            }
            w.extend_from_slice(&bytes);
        }
        write_len(&mut w, self.moments.len());
        for (name, m, v) in &self.moments {
            write_tensor(&mut w, name, m);
            write_tensor(&mut w, name, v);
        }
        write_len(&mut w, self.best.len());
        self.best
            .iter()
            .for_each(|r| write_tensor(&mut w, &r.name, &r.value));
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stage = Stage::from_tag(r.u8()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let replication = r.u32()?;
        let c_index = r.u32()?;
        let c = r.f64()?;
        let epoch = r.u64()?;
        let csv_rows = r.u64()?;
        let config_hash = r.array()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let adam_step = r.u64()?;
        let bad_epochs = r.u64()?;
        let stopped = r.flag()?;
        let has_best = r.flag()?;
        let best_value = r.f64()?;
        let params = r.tensors()?;
        let n = r.u32()?;
        let mut masks = Vec::new();
        for _ in 0..n {
            let name = r.name()?;
            let len = r.u64()? as usize;
            let bits = r.take(len.div_ceil(8))?;
            let keep = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            masks.push(MaskRecord { name, keep });
        }
        let n = r.u32()?;
        let mut moments = Vec::new();
        for _ in 0..n {
            let m = r.tensor()?;
            let v = r.tensor()?;
            if m.name != v.name {
                return Err(Error::Checkpoint(format!(
                    "moment pair `{}`/`{}` mismatched",
                    m.name, v.name
                )));
            }
            moments.push((m.name, m.value, v.value));
        }
        let best = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            position: Position {
                stage,
                replication,
                c_index,
                c,
                csv_rows,
            },
            epoch,
            config_hash,
            rng,
            adam_step,
            bad_epochs,
            stopped,
            best_metric: has_best.then_some(best_value),
            params,
            masks,
            moments,
            best,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_hash(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash != expected {
            return Err(Error::Checkpoint(
                "config hash differs from the checkpoint's".into(),
            ));
        }
        Ok(())
    }
}

fn write_len(w: &mut Vec<u8>, n: usize) {
    w.extend_from_slice(&(n as u32).to_le_bytes());
}

fn write_name(w: &mut Vec<u8>, name: &str) {
    write_len(w, name.len());
    w.extend_from_slice(name.as_bytes());
}

fn write_tensor(w: &mut Vec<u8>, name: &str, t: &Tensor) {
    write_name(w, name);
    w.push(u8::from(t.is_complex()));
    write_len(w, t.shape().len());
    t.shape()
        .iter()
        .for_each(|&d| w.extend_from_slice(&(d as u64).to_le_bytes()));
    for part in t.components() {
        part.iter()
            .for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad flag byte {b}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn tensor(&mut self) -> Result<TensorRecord> {
        let name = self.name()?;
        let complex = self.flag()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
        let re = self.floats(n)?;
        let value = if complex {
            Tensor::Complex(CTensor::new(shape, re, self.floats(n)?)?)
        } else {
            Tensor::Real(RTensor::new(shape, re)?)
        };
        Ok(TensorRecord { name, value })
    }

    fn tensors(&mut self) -> Result<Vec<TensorRecord>> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}
