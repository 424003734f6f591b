//! Three-stage training: pre-train, sparsify, fine-tune.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruning::compression_rate;
use crate::varlayers::Mode;

/// Starting `log α` when entering the sparsify stage.
pub const SPARSIFY_INIT_LOG_ALPHA: f64 = -8.0;
/// Bounds on `log σ²` during sparsification.
pub const LOG_SIGMA2_RANGE: (f64, f64) = (-20.0, 5.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Sparsify,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Sparsify, Stage::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sparsify => "sparsify",
            Stage::Finetune => "finetune",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        Self::ALL
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage tag {t}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopMetric {
    Loss,
    Accuracy,
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(StopMetric::Loss),
            "accuracy" => Ok(StopMetric::Accuracy),
            _ => Err(Error::InvalidArgument(format!(
                "unknown early-stopping metric `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub metric: StopMetric,
}

/// Settings for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// `(epoch, factor)`: from that (0-based) epoch on, the rate is `base_lr · factor`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub kl_coeff: f64,
    pub tau: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl StagePlan {
    pub fn new(stage: Stage, epochs: usize, seed: u64) -> Self {
        Self {
            stage,
            epochs,
            batch_size: 16,
            base_lr: 1e-3,
            lr_schedule: vec![(10, 0.1)],
            kl_coeff: 1e-2,
            tau: crate::pruning::DEFAULT_TAU,
            clip_norm: 0.5,
            seed,
            early_stop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{} plan needs positive batch size, learning rate and clip norm",
                self.stage
            )));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument(
                "learning-rate schedule epochs must increase strictly".into(),
            ));
        }
        if self.stage == Stage::Sparsify {
            check_kl_coeff(self.kl_coeff)?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let factor = self
            .lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(1.0, |(_, f)| *f);
        self.base_lr * factor
    }
}

fn check_kl_coeff(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain {
            what: "KL coefficient C",
            value: c,
            expected: "0 < C <= 1",
        });
    }
    Ok(())
}

/// Adam moments over the real components of each parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update of every parameter present in `grads`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.get(id).name.clone()));
        }
        if g.shape() != store.value(id).shape() {
            return Err(crate::error::shape_mismatch(
                "adam_step",
                store.value(id).shape(),
                g.shape(),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (id, g) in grads.iter() {
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (g.zeros_like(), g.zeros_like()));
        let value = store.get_mut(id).value_mut();
        let gs = g.components();
        for (((w, m), v), g) in value
            .components_mut()
            .into_iter()
            .zip(m.components_mut())
            .zip(v.components_mut())
            .zip(gs)
        {
            for i in 0..w.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Rescales all gradients so that their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Domain {
            what: "clip norm",
            value: max_norm,
            expected: "> 0",
        });
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// Features and labels held in memory.
#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    /// `[N, H, W]`.
    pub x: CTensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(name: impl Into<String>, x: CTensor, labels: Vec<usize>) -> Result<Self> {
        if x.shape().len() != 3 || x.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: x.shape().first().copied().unwrap_or(0),
                labels: labels.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            x,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(CTensor, Vec<usize>)> {
        let s = self.x.shape();
        let hw = s[1] * s[2];
        let mut re = Vec::with_capacity(idx.len() * hw);
        let mut im = Vec::with_capacity(idx.len() * hw);
        for &i in idx {
            re.extend_from_slice(&self.x.re()[i * hw..(i + 1) * hw]);
            im.extend_from_slice(&self.x.im()[i * hw..(i + 1) * hw]);
        }
        Ok((
            CTensor::new(vec![idx.len(), s[1], s[2]], re, im)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

fn correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let l = logits.as_real()?;
    let k = l.shape()[1];
    Ok(labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &l.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count())
}

/// `mean CE(Re logits) + (C/N) Σ penalty`, plus the two terms' values.
pub fn objective_sparsify<'t, R: rand::Rng + ?Sized>(
    model: &Model,
    tape: &'t Tape,
    x: &Tensor,
    labels: &[usize],
    c: f64,
    n_train: usize,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    check_kl_coeff(c)?;
    if n_train == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let logits = model.forward(tape, x, rng)?;
    let ce = logits.cross_entropy(labels)?;
    let kl = model.penalty_var(tape)?;
    Ok((ce.add(kl.scale(c / n_train as f64))?, logits))
}

/// Mean cross-entropy and accuracy with means only (masks respected).
pub fn evaluate(model: &mut Model, split: &Split, batch_size: usize) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split `{}` is empty",
            split.name
        )));
    }
    let saved = model.mode();
    if saved == Mode::Stochastic {
        model.set_mode(Mode::Deterministic)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut hits) = (0.0, 0usize);
    let idx: Vec<usize> = (0..split.len()).collect();
    let result = (|| -> Result<()> {
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, y) = split.batch(chunk)?;
            let tape = Tape::new();
            let logits = model.forward(&tape, &model.prepare_input(&x)?, &mut rng)?;
            loss += logits.cross_entropy(&y)?.scalar()? * chunk.len() as f64;
            hits += correct(&logits.value(), &y)?;
        }
        Ok(())
    })();
    model.set_mode(saved)?;
    result?;
    Ok((loss / split.len() as f64, hits as f64 / split.len() as f64))
}

/// Metrics of one epoch on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub stage: Stage,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub kl_term: f64,
    pub compression_rate: f64,
}

/// Mutable progress of a stage; everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct StageState {
    /// Next epoch to run.
    pub epoch: usize,
    pub adam: AdamState,
    pub noise: ChaCha8Rng,
    pub best_metric: Option<f64>,
    pub best_params: Option<ParamStore>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

impl StageState {
    pub fn new(plan: &StagePlan) -> Self {
        let mut noise = ChaCha8Rng::seed_from_u64(plan.seed);
        noise.set_stream(u64::from(plan.stage.tag()) + 1);
        Self {
            epoch: 0,
            adam: AdamState::default(),
            noise,
            best_metric: None,
            best_params: None,
            bad_epochs: 0,
            stopped: false,
        }
    }
}

/// Epoch order: a seeded permutation that depends only on the stage seed and epoch.
pub fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((u64::from(stage.tag()) + 1) << 32) | epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Prepares the model for sparsification: every weight starts at a small `log α`.
pub fn begin_sparsify(model: &mut Model) -> Result<()> {
    model.reset_log_alpha(SPARSIFY_INIT_LOG_ALPHA)?;
    model.set_mode(Mode::Stochastic)
}

/// Thresholds `log α` at `tau`, installs the masks and switches to masked mode.
pub fn finish_sparsify(model: &mut Model, tau: f64) -> Result<f64> {
    let mask = model.compute_masks(tau)?;
    let rate = compression_rate(&mask)?;
    model.apply_masks(&mask)?;
    Ok(rate)
}

/// Runs (or resumes) a stage. `after_epoch` sees the metrics rows and the
/// state once each epoch is complete, e.g. to write checkpoints.
pub fn run_stage(
    model: &mut Model,
    train: &Split,
    val: Option<&Split>,
    plan: &StagePlan,
    state: &mut StageState,
    after_epoch: &mut dyn FnMut(&Model, &StageState, &[EpochMetrics]) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mode = match plan.stage {
        Stage::Pretrain => Mode::Deterministic,
        Stage::Sparsify => Mode::Stochastic,
        Stage::Finetune => Mode::Masked,
    };
    model
        .set_mode(mode)
        .map_err(|_| Error::Training(format!("{} stage needs sparsity masks", plan.stage)))?;
    if plan.early_stop.is_some() && val.is_none() {
        return Err(Error::Training(
            "early stopping needs a validation split".into(),
        ));
    }
    let n = train.len();
    let mut report = Vec::new();
    while state.epoch < plan.epochs && !state.stopped {
        let epoch = state.epoch;
        let lr = plan.lr_at(epoch);
        let order = epoch_order(n, plan.seed, plan.stage, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(plan.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let x = model.prepare_input(&x)?;
            let tape = Tape::new();
            let (loss, logits) = if plan.stage == Stage::Sparsify {
                objective_sparsify(model, &tape, &x, &y, plan.kl_coeff, n, &mut state.noise)?
            } else {
                let logits = model.forward(&tape, &x, &mut state.noise)?;
                (logits.cross_entropy(&y)?, logits)
            };
            loss_sum += loss.scalar()? * chunk.len() as f64;
            hits += correct(&logits.value(), &y)?;
            let mut grads = loss.backward()?;
            clip_global_norm(&mut grads, plan.clip_norm)?;
            adam_step(&mut model.store, &grads, &mut state.adam, lr)
                .map_err(|e| Error::Training(format!("{} epoch {epoch}: {e}", plan.stage)))?;
            match plan.stage {
                Stage::Sparsify => model.clamp_log_sigma2(LOG_SIGMA2_RANGE.0, LOG_SIGMA2_RANGE.1),
                Stage::Finetune => model.reapply_masks(),
                Stage::Pretrain => {}
            }
        }
        let compression = match plan.stage {
            Stage::Sparsify => {
                compression_rate(&model.compute_masks(plan.tau)?).unwrap_or(f64::INFINITY)
            }
            _ => compression_rate(&model.current_masks()).unwrap_or(f64::INFINITY),
        };
        let kl = model.penalty_value()?;
        let mut rows = vec![EpochMetrics {
            stage: plan.stage,
            epoch,
            split: train.name.clone(),
            loss: loss_sum / n as f64,
            accuracy: hits as f64 / n as f64,
            kl_term: kl,
            compression_rate: compression,
        }];
        if let Some(val) = val {
            let (vl, va) = evaluate(model, val, 256)?;
            rows.push(EpochMetrics {
                split: val.name.clone(),
                loss: vl,
                accuracy: va,
                ..rows[0].clone()
            });
            if let Some(es) = plan.early_stop {
                let score = match es.metric {
                    StopMetric::Loss => vl,
                    StopMetric::Accuracy => -va,
                };
                if state.best_metric.is_none_or(|b| score < b) {
                    state.best_metric = Some(score);
                    state.best_params = Some(model.store.clone());
                    state.bad_epochs = 0;
                } else {
                    state.bad_epochs += 1;
                    if state.bad_epochs >= es.patience {
                        state.stopped = true;
                    }
                }
            }
        }
        state.epoch += 1;
        after_epoch(model, state, &rows)?;
        report.extend(rows);
    }
    if let Some(best) = state.best_params.take() {
        model.store = best;
    }
    Ok(report)
}
