//! Experiment runner: data preparation, replications, C branches, checkpoints and metrics.
//!
//! Each replication pre-trains once and then branches into one
//! sparsify → fine-tune run per `C`. Every epoch appends rows to
//! `metrics.csv` and rewrites `checkpoint.ckpt`; the pre-trained model of each
//! replication is kept in `pretrain_r{index}.ckpt` so that later branches can
//! start from it after a restart.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{featurize, load_idx, subset_and_rest, synthetic_gaussians, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::pipeline::{
    begin_sparsify, evaluate, finish_sparsify, run_stage, Split, Stage, StagePlan, StageState,
};

use checkpoint::{Checkpoint, Position};
pub use config::ExperimentConfig;
use metrics::{MetricRow, MetricsWriter, FINAL_STAGE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";

const EVAL_BATCH: usize = 256;

/// Train / validation / test splits as complex features.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Split,
    pub val: Option<Split>,
    pub test: Split,
    pub input: (usize, usize),
    pub n_classes: usize,
}

fn to_split(ds: &Dataset, cfg: &ExperimentConfig, name: &str) -> Result<Split> {
    let x = featurize(ds, cfg.dataset.features, cfg.dataset.dft_norm)?;
    Split::new(name, x, ds.labels.clone())
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let full = match &cfg.dataset.source {
        config::DataSource::Idx { images, labels } => load_idx(images, labels)?,
        config::DataSource::Synthetic {
            n_per_class,
            classes,
            dim,
        } => synthetic_gaussians(*n_per_class, *classes, *dim, cfg.dataset.seed)?,
    };
    let n = match cfg.dataset.subset {
        0 => full.len() / 2,
        n => n,
    };
    let (train, rest) = subset_and_rest(&full, n, cfg.dataset.seed)?;
    let v = cfg.dataset.val;
    if v >= rest.len() {
        return Err(Error::Config(format!(
            "`dataset.val = {v}` leaves no test images out of {}",
            rest.len()
        )));
    }
    let val_idx: Vec<usize> = (0..v).collect();
    let test_idx: Vec<usize> = (v..rest.len()).collect();
    let val = (v > 0)
        .then(|| {
            rest.select(&val_idx, "val")
                .and_then(|d| to_split(&d, cfg, "val"))
        })
        .transpose()?;
    let test = to_split(&rest.select(&test_idx, "test")?, cfg, "test")?;
    Ok(Prepared {
        train: to_split(&train, cfg, "train")?,
        val,
        test,
        input: full.image_shape(),
        n_classes: full.n_classes,
    })
}

pub fn model_spec(cfg: &ExperimentConfig, data: &Prepared) -> ModelSpec {
    ModelSpec {
        kind: cfg.model.kind,
        arch: cfg.model.arch,
        width: cfg.model.width,
        penalty: cfg.penalty,
        input: data.input,
        n_classes: data.n_classes,
        hidden: cfg.model.hidden.clone(),
        real_input: cfg.model.real_input,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Abort with [`Error::Interrupted`] once this many epochs have run in
    /// this invocation; used to exercise restarts.
    pub interrupt_after: Option<usize>,
}

/// Summary returned after all replications finish.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub rows: Vec<MetricRow>,
}

impl RunSummary {
    pub fn finals(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.is_final())
    }

    /// Test accuracy after pre-training for one replication seed.
    pub fn pretrain_accuracy(&self, replication: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.replication == replication
                    && r.stage == Stage::Pretrain.name()
                    && r.split == "test"
            })
            .map(|r| r.accuracy)
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Prepared,
    hash: [u8; 32],
    out: &'a Path,
    writer: MetricsWriter,
    log: &'a mut dyn FnMut(&str),
    epochs_left: Option<usize>,
}

impl Runner<'_> {
    fn fresh_model(&self, seed: u64) -> Result<Model> {
        Model::new(
            model_spec(self.cfg, self.data),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn pretrain_path(&self, ri: usize) -> PathBuf {
        self.out.join(format!("pretrain_r{ri}.ckpt"))
    }

    /// Runs one stage from `state`, then its closing rows.
    fn step(
        &mut self,
        model: &mut Model,
        plan: &StagePlan,
        mut state: StageState,
        pos: Position,
        seed: u64,
    ) -> Result<()> {
        let (tau, c) = (self.cfg.tau, pos.c);
        let hash = self.hash;
        let ck_path = self.out.join(CHECKPOINT_FILE);
        let writer = &mut self.writer;
        let epochs_left = &mut self.epochs_left;
        let val = if plan.early_stop.is_some() {
            self.data.val.as_ref()
        } else {
            None
        };
        run_stage(
            model,
            &self.data.train,
            val,
            plan,
            &mut state,
            &mut |m, st, rows| {
                let rows: Vec<MetricRow> = rows
                    .iter()
                    .map(|r| MetricRow {
                        epoch: r.epoch + 1,
                        ..MetricRow::from_epoch(r, seed, tau, c)
                    })
                    .collect();
                writer.write(&rows)?;
                let pos = Position {
                    csv_rows: writer.rows(),
                    ..pos
                };
                Checkpoint::capture(m, st, pos, hash).save(&ck_path)?;
                match *epochs_left {
                    Some(0 | 1) => Err(Error::Interrupted),
                    Some(n) => {
                        *epochs_left = Some(n - 1);
                        Ok(())
                    }
                    None => Ok(()),
                }
            },
        )?;

        let done = state.epoch;
        let mut closing = Vec::new();
        if plan.stage == Stage::Pretrain {
            let (loss, acc) = evaluate(model, &self.data.test, EVAL_BATCH)?;
            closing.push(self.row(seed, Stage::Pretrain.name(), done, loss, acc, model, c)?);
            (self.log)(&format!(
                "replication {seed}: pretrain test accuracy {acc:.4}"
            ));
        }
        if plan.stage == Stage::Finetune {
            let (loss, acc) = evaluate(model, &self.data.test, EVAL_BATCH)?;
            closing.push(self.row(seed, FINAL_STAGE, done, loss, acc, model, c)?);
            let rate = closing[0].compression_rate;
            (self.log)(&format!(
                "replication {seed}, C = {c}: compression {rate:.2}x, test accuracy {acc:.4}"
            ));
        }
        self.writer.write(&closing)
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        seed: u64,
        stage: &str,
        epoch: usize,
        loss: f64,
        acc: f64,
        model: &Model,
        c: f64,
    ) -> Result<MetricRow> {
        Ok(MetricRow {
            replication: seed,
            stage: stage.into(),
            epoch,
            split: "test".into(),
            loss,
            accuracy: acc,
            kl_term: model.penalty_value()?,
            compression_rate: crate::pruning::compression_rate(&model.current_masks())
                .unwrap_or(f64::INFINITY),
            tau: self.cfg.tau,
            c,
        })
    }
}

/// Runs every replication and `C` branch. With `resume`, continues from the
/// last checkpoint in the output directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: RunOptions,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    let data = prepare_data(cfg)?;
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let metrics_path = out.join(METRICS_FILE);
    let ck_path = out.join(CHECKPOINT_FILE);

    let resume = if opts.resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        ck.check_hash(&hash)?;
        Some(ck)
    } else {
        None
    };
    let writer = match &resume {
        Some(ck) => MetricsWriter::resume(&metrics_path, ck.position.csv_rows)?,
        None => MetricsWriter::create(&metrics_path)?,
    };
    std::fs::write(out.join(CONFIG_FILE), cfg.canonical(true))?;
    let mut runner = Runner {
        cfg,
        data: &data,
        hash,
        out,
        writer,
        log,
        epochs_left: opts.interrupt_after,
    };

    for (ri, &seed) in cfg.replications.iter().enumerate() {
        let pos_of = |stage, ci: usize, c| Position {
            stage,
            replication: ri as u32,
            c_index: ci as u32,
            c,
            csv_rows: 0,
        };
        // Where to pick up inside this replication, if anywhere.
        let here = resume
            .as_ref()
            .filter(|ck| ck.position.replication as usize == ri);
        if resume
            .as_ref()
            .is_some_and(|ck| (ck.position.replication as usize) > ri)
        {
            continue;
        }

        let pretrained = match here {
            Some(ck) if ck.position.stage != Stage::Pretrain => {
                let mut m = runner.fresh_model(seed)?;
                let base = Checkpoint::load(runner.pretrain_path(ri))?;
                base.check_hash(&hash)?;
                base.restore(&mut m)?;
                m
            }
            _ => {
                let mut m = runner.fresh_model(seed)?;
                let plan = cfg.plan(Stage::Pretrain, seed, 0.0);
                let state = match here {
                    Some(ck) => ck.restore(&mut m)?,
                    None => StageState::new(&plan),
                };
                runner.step(&mut m, &plan, state, pos_of(Stage::Pretrain, 0, 0.0), seed)?;
                let st = StageState::new(&plan);
                Checkpoint::capture(&m, &st, pos_of(Stage::Pretrain, 0, 0.0), hash)
                    .save(runner.pretrain_path(ri))?;
                m
            }
        };

        for (ci, &c) in cfg.c_grid.iter().enumerate() {
            let resume_here = here.filter(|ck| ck.position.stage != Stage::Pretrain);
            if resume_here.is_some_and(|ck| (ck.position.c_index as usize) > ci) {
                continue;
            }
            let resume_here = resume_here.filter(|ck| ck.position.c_index as usize == ci);
            let sparsify = cfg.plan(Stage::Sparsify, seed, c);
            let finetune = cfg.plan(Stage::Finetune, seed, c);

            let mut m = pretrained.clone();
            let finetune_state = match resume_here {
                Some(ck) if ck.position.stage == Stage::Finetune => {
                    m = runner.fresh_model(seed)?;
                    ck.restore(&mut m)?
                }
                _ => {
                    let state = match resume_here {
                        Some(ck) => {
                            m = runner.fresh_model(seed)?;
                            ck.restore(&mut m)?
                        }
                        None => {
                            begin_sparsify(&mut m)?;
                            StageState::new(&sparsify)
                        }
                    };
                    runner.step(
                        &mut m,
                        &sparsify,
                        state,
                        pos_of(Stage::Sparsify, ci, c),
                        seed,
                    )?;
                    finish_sparsify(&mut m, cfg.tau)?;
                    StageState::new(&finetune)
                }
            };
            runner.step(
                &mut m,
                &finetune,
                finetune_state,
                pos_of(Stage::Finetune, ci, c),
                seed,
            )?;
        }
    }
    drop(runner);
    Ok(RunSummary {
        rows: metrics::read_metrics(&metrics_path)?,
        metrics_path,
    })
}
