//! Flat `key = value` experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws* comment?
//! key     := segment ('.' segment)*        segment := [a-z0-9_]+
//! value   := item (',' item)*              items are trimmed; lists only where noted
//! ```
//!
//! Every key is optional and has a default. Unknown or repeated keys are
//! rejected. Paths are resolved against the directory of the config file.
//!
//! | key | type | default |
//! |-----|------|---------|
//! | `dataset.source` | `idx` or `synthetic` | `synthetic` |
//! | `dataset.images`, `dataset.labels` | path | |
//! | `dataset.synthetic.n_per_class` / `.classes` / `.dim` | int | 64 / 4 / 16 |
//! | `dataset.subset` | int, training images drawn without replacement | 0 (half) |
//! | `dataset.seed` | int, subset seed | 0 |
//! | `dataset.val` | int, held out of the non-training rest for early stopping | 0 |
//! | `dataset.features` | `raw` or `fft` | `raw` |
//! | `dataset.dft_norm` | `none` or `ortho` | `none` |
//! | `model.kind` | `real` or `complex` | `complex` |
//! | `model.arch` | `dense` or `conv` | `dense` |
//! | `model.width` | float | 1 |
//! | `model.hidden` | int list (dense only) | `256` |
//! | `model.real_input` | `real_part` or `both` | `real_part` |
//! | `penalty.kind` | `cvd`, `card`, `rvd`, `rard`, `rscale` | `cvd` |
//! | `penalty.exact_grad` | bool | false |
//! | `<stage>.epochs` | int | 10 / 20 / 10 |
//! | `<stage>.batch_size` | int | 16 |
//! | `<stage>.lr` | float | 1e-3 |
//! | `<stage>.lr_schedule` | `epoch:factor` list or `none` | `10:0.1` |
//! | `<stage>.clip_norm` | float | 0.5 |
//! | `<stage>.early_stop` | `none`, `loss:PATIENCE`, `accuracy:PATIENCE` | `none` |
//! | `experiment.c_grid` | float list | `0.01` |
//! | `experiment.tau` | float | -0.5 |
//! | `experiment.replications` | seed list | `0,1,2,3,4` |
//! | `experiment.scale` | int, divides stage lengths | 1 |
//! | `output.dir` | path | `out` |
//!
//! `<stage>` is one of `pretrain`, `sparsify`, `finetune`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::ctensor::DftNorm;
use crate::data::Features;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelKind, RealInput};
use crate::pipeline::{EarlyStop, Stage, StagePlan, StopMetric};
use crate::pruning::DEFAULT_TAU;
use crate::varlayers::{PenaltyKind, PenaltySpec};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Synthetic {
        n_per_class: usize,
        classes: usize,
        dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Training-set size; 0 takes half of the data.
    pub subset: usize,
    pub seed: u64,
    pub val: usize,
    pub features: Features,
    pub dft_norm: DftNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub arch: Arch,
    pub width: f64,
    pub hidden: Vec<usize>,
    pub real_input: RealInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: Vec<(usize, f64)>,
    pub clip_norm: f64,
    pub early_stop: Option<EarlyStop>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub penalty: PenaltySpec,
    /// Indexed by `Stage as usize`.
    pub stages: [StageConfig; 3],
    pub c_grid: Vec<f64>,
    pub tau: f64,
    pub replications: Vec<u64>,
    pub scale: usize,
    pub output_dir: PathBuf,
}

const STAGE_KEYS: [&str; 6] = [
    "epochs",
    "batch_size",
    "lr",
    "lr_schedule",
    "clip_norm",
    "early_stop",
];

const KEYS: [&str; 22] = [
    "dataset.source",
    "dataset.images",
    "dataset.labels",
    "dataset.synthetic.n_per_class",
    "dataset.synthetic.classes",
    "dataset.synthetic.dim",
    "dataset.subset",
    "dataset.seed",
    "dataset.val",
    "dataset.features",
    "dataset.dft_norm",
    "model.kind",
    "model.arch",
    "model.width",
    "model.hidden",
    "model.real_input",
    "penalty.kind",
    "penalty.exact_grad",
    "experiment.c_grid",
    "experiment.tau",
    "experiment.replications",
    "experiment.scale",
];

fn is_known(key: &str) -> bool {
    if KEYS.contains(&key) || key == "output.dir" {
        return true;
    }
    key.split_once('.').is_some_and(|(stage, field)| {
        Stage::ALL.iter().any(|s| s.name() == stage) && STAGE_KEYS.contains(&field)
    })
}

/// Parsed `key → value` pairs before typing.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
    base: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let valid = !k.is_empty()
                && k.split('.').all(|s| {
                    !s.is_empty()
                        && s.bytes()
                            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
                });
            if !valid {
                return Err(Error::Config(format!(
                    "line {}: malformed key `{k}`",
                    n + 1
                )));
            }
            if raw.entries.contains_key(k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    n + 1
                )));
            }
            raw.set(k, v)?;
        }
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut raw = Self::parse(&std::fs::read_to_string(path)?)?;
        raw.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(raw)
    }

    /// Sets or overrides one entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn typed<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key).map_or(Ok(default), |v| parse_value(key, v))
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|item| parse_value(key, item.trim()))
                .collect(),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|p| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                self.base.join(p)
            }
        })
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_schedule(key: &str, v: &str) -> Result<Vec<(usize, f64)>> {
    if v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (e, f) = item.trim().split_once(':').ok_or_else(|| {
                Error::Config(format!("`{key}`: expected `epoch:factor`, got `{item}`"))
            })?;
            Ok((parse_value(key, e.trim())?, parse_value(key, f.trim())?))
        })
        .collect()
}

fn parse_early_stop(key: &str, v: &str) -> Result<Option<EarlyStop>> {
    if v == "none" {
        return Ok(None);
    }
    let (m, p) = v.split_once(':').ok_or_else(|| {
        Error::Config(format!(
            "`{key}`: expected `none` or `metric:patience`, got `{v}`"
        ))
    })?;
    let metric: StopMetric = m
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
    let patience: usize = parse_value(key, p.trim())?;
    if patience == 0 {
        return Err(Error::Config(format!("`{key}`: patience must be positive")));
    }
    Ok(Some(EarlyStop { patience, metric }))
}

fn enum_value<T>(raw: &RawConfig, key: &str, default: T, table: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    match raw.get(key) {
        None => Ok(default),
        Some(v) => table
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("`{key}`: unknown value `{v}`"))),
    }
}

const DFT_NORMS: [(&str, DftNorm); 2] = [("none", DftNorm::None), ("ortho", DftNorm::Ortho)];
const REAL_INPUTS: [(&str, RealInput); 2] = [
    ("real_part", RealInput::RealPart),
    ("both", RealInput::Both),
];

fn stage_defaults(stage: Stage) -> StageConfig {
    StageConfig {
        epochs: match stage {
            Stage::Sparsify => 20,
            _ => 10,
        },
        batch_size: 16,
        lr: 1e-3,
        lr_schedule: vec![(10, 0.1)],
        clip_norm: 0.5,
        early_stop: None,
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let source = match raw.get("dataset.source").unwrap_or("synthetic") {
            "idx" => DataSource::Idx {
                images: raw.path("dataset.images").ok_or_else(|| {
                    Error::Config("`dataset.source = idx` needs `dataset.images`".into())
                })?,
                labels: raw.path("dataset.labels").ok_or_else(|| {
                    Error::Config("`dataset.source = idx` needs `dataset.labels`".into())
                })?,
            },
            "synthetic" => DataSource::Synthetic {
                n_per_class: raw.typed("dataset.synthetic.n_per_class", 64)?,
                classes: raw.typed("dataset.synthetic.classes", 4)?,
                dim: raw.typed("dataset.synthetic.dim", 16)?,
            },
            other => {
                return Err(Error::Config(format!(
                    "`dataset.source`: unknown value `{other}`"
                )))
            }
        };
        let dataset = DatasetConfig {
            source,
            subset: raw.typed("dataset.subset", 0)?,
            seed: raw.typed("dataset.seed", 0)?,
            val: raw.typed("dataset.val", 0)?,
            features: raw
                .get("dataset.features")
                .map_or(Ok(Features::Raw), str::parse)
                .map_err(|e| Error::Config(format!("`dataset.features`: {e}")))?,
            dft_norm: enum_value(raw, "dataset.dft_norm", DftNorm::None, &DFT_NORMS)?,
        };
        let model = ModelConfig {
            kind: raw
                .get("model.kind")
                .map_or(Ok(ModelKind::Complex), str::parse)
                .map_err(|e| Error::Config(format!("`model.kind`: {e}")))?,
            arch: raw
                .get("model.arch")
                .map_or(Ok(Arch::Dense), str::parse)
                .map_err(|e| Error::Config(format!("`model.arch`: {e}")))?,
            width: raw.typed("model.width", 1.0)?,
            hidden: raw.list("model.hidden", vec![256])?,
            real_input: enum_value(raw, "model.real_input", RealInput::RealPart, &REAL_INPUTS)?,
        };
        let kind: PenaltyKind = raw
            .get("penalty.kind")
            .map_or(Ok(PenaltyKind::Cvd), str::parse)
            .map_err(|e| Error::Config(format!("`penalty.kind`: {e}")))?;
        let penalty =
            PenaltySpec::new(kind).with_exact_grad(raw.typed("penalty.exact_grad", false)?);
        let stages = Stage::ALL.map(|s| -> Result<StageConfig> {
            let d = stage_defaults(s);
            let key = |f: &str| format!("{s}.{f}");
            Ok(StageConfig {
                epochs: raw.typed(&key("epochs"), d.epochs)?,
                batch_size: raw.typed(&key("batch_size"), d.batch_size)?,
                lr: raw.typed(&key("lr"), d.lr)?,
                lr_schedule: raw
                    .get(&key("lr_schedule"))
                    .map_or(Ok(d.lr_schedule), |v| {
                        parse_schedule(&key("lr_schedule"), v)
                    })?,
                clip_norm: raw.typed(&key("clip_norm"), d.clip_norm)?,
                early_stop: raw
                    .get(&key("early_stop"))
                    .map_or(Ok(None), |v| parse_early_stop(&key("early_stop"), v))?,
            })
        });
        let [p, s, f] = stages;
        let cfg = Self {
            dataset,
            model,
            penalty,
            stages: [p?, s?, f?],
            c_grid: raw.list("experiment.c_grid", vec![1e-2])?,
            tau: raw.typed("experiment.tau", DEFAULT_TAU)?,
            replications: raw.list("experiment.replications", vec![0, 1, 2, 3, 4])?,
            scale: raw.typed("experiment.scale", 1)?,
            output_dir: raw
                .path("output.dir")
                .unwrap_or_else(|| raw.base.join("out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return bad(format!(
                "`experiment.c_grid` must be non-empty with 0 < C <= 1, got {:?}",
                self.c_grid
            ));
        }
        if self.replications.is_empty() {
            return bad("`experiment.replications` is empty".into());
        }
        if self.scale == 0 {
            return bad("`experiment.scale` must be at least 1".into());
        }
        if !self.tau.is_finite() {
            return bad("`experiment.tau` must be finite".into());
        }
        if self.model.kind == ModelKind::Complex && !self.penalty.kind.is_complex() {
            return bad(format!(
                "penalty `{}` needs `model.kind = real`",
                self.penalty.kind
            ));
        }
        if self.model.kind == ModelKind::Real && self.penalty.kind.is_complex() {
            return bad(format!(
                "penalty `{}` needs `model.kind = complex`",
                self.penalty.kind
            ));
        }
        if self.stages.iter().any(|s| s.early_stop.is_some()) && self.dataset.val == 0 {
            return bad("early stopping needs `dataset.val > 0`".into());
        }
        for stage in Stage::ALL {
            self.plan(stage, 0, self.c_grid[0])
                .validate()
                .map_err(|e| Error::Config(format!("{stage}: {e}")))?;
        }
        Ok(())
    }

    /// Stage length after dividing by `scale` (rounded up, zero stays zero).
    pub fn scaled(&self, epochs: usize) -> usize {
        epochs.div_ceil(self.scale)
    }

    /// Concrete plan for one stage of one replication.
    pub fn plan(&self, stage: Stage, seed: u64, c: f64) -> StagePlan {
        let sc = &self.stages[stage as usize];
        StagePlan {
            stage,
            epochs: self.scaled(sc.epochs),
            batch_size: sc.batch_size,
            base_lr: sc.lr,
            lr_schedule: sc
                .lr_schedule
                .iter()
                .map(|&(e, f)| (self.scaled(e), f))
                .collect(),
            kl_coeff: c,
            tau: self.tau,
            clip_norm: sc.clip_norm,
            seed: stage_seed(seed, stage),
            early_stop: sc.early_stop,
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn canonical(&self, with_output: bool) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |v: &[String]| v.join(", ");
        match &self.dataset.source {
            DataSource::Idx { images, labels } => {
                put("dataset.source", "idx".into());
                put("dataset.images", images.display().to_string());
                put("dataset.labels", labels.display().to_string());
            }
            DataSource::Synthetic {
                n_per_class,
                classes,
                dim,
            } => {
                put("dataset.source", "synthetic".into());
                put("dataset.synthetic.n_per_class", n_per_class.to_string());
                put("dataset.synthetic.classes", classes.to_string());
                put("dataset.synthetic.dim", dim.to_string());
            }
        }
        put("dataset.subset", self.dataset.subset.to_string());
        put("dataset.seed", self.dataset.seed.to_string());
        put("dataset.val", self.dataset.val.to_string());
        put("dataset.features", self.dataset.features.to_string());
        let norm = DFT_NORMS
            .iter()
            .find(|(_, n)| *n == self.dataset.dft_norm)
            .map(|(s, _)| *s);
        put("dataset.dft_norm", norm.unwrap_or("none").into());
        put("model.kind", self.model.kind.to_string());
        put("model.arch", self.model.arch.to_string());
        put("model.width", format!("{:?}", self.model.width));
        put(
            "model.hidden",
            join(
                &self
                    .model
                    .hidden
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>(),
            ),
        );
        let ri = REAL_INPUTS
            .iter()
            .find(|(_, r)| *r == self.model.real_input)
            .map(|(s, _)| *s);
        put("model.real_input", ri.unwrap_or("real_part").into());
        put("penalty.kind", self.penalty.kind.to_string());
        put("penalty.exact_grad", self.penalty.exact_grad.to_string());
        for stage in Stage::ALL {
            let sc = &self.stages[stage as usize];
            put(&format!("{stage}.epochs"), sc.epochs.to_string());
            put(&format!("{stage}.batch_size"), sc.batch_size.to_string());
            put(&format!("{stage}.lr"), format!("{:?}", sc.lr));
            let sched: Vec<String> = sc
                .lr_schedule
                .iter()
                .map(|(e, f)| format!("{e}:{f:?}"))
                .collect();
            put(
                &format!("{stage}.lr_schedule"),
                if sched.is_empty() {
                    "none".into()
                } else {
                    join(&sched)
                },
            );
            put(&format!("{stage}.clip_norm"), format!("{:?}", sc.clip_norm));
            let es = match sc.early_stop {
                None => "none".to_string(),
                Some(EarlyStop {
                    patience,
                    metric: StopMetric::Loss,
                }) => format!("loss:{patience}"),
                Some(EarlyStop {
                    patience,
                    metric: StopMetric::Accuracy,
                }) => format!("accuracy:{patience}"),
            };
            put(&format!("{stage}.early_stop"), es);
        }
        put(
            "experiment.c_grid",
            join(
                &self
                    .c_grid
                    .iter()
                    .map(|c| format!("{c:?}"))
                    .collect::<Vec<_>>(),
            ),
        );
        put("experiment.tau", format!("{:?}", self.tau));
        put(
            "experiment.replications",
            join(
                &self
                    .replications
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>(),
            ),
        );
        put("experiment.scale", self.scale.to_string());
        if with_output {
            put("output.dir", self.output_dir.display().to_string());
        }
        s
    }

    /// SHA-256 of the canonical form without the output directory.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical(false).as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seed of one stage's shuffling and noise streams for a replication seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (u64::from(stage.tag()) + 1)
}
