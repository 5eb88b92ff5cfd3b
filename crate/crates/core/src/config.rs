//! Pipeline configuration: one TOML table per module. Unknown keys are
//! rejected. Command line flags override the file, the file overrides defaults.
//!
//! The echo written next to outputs leaves out `run.workers` and `run.out`:
//! neither changes any result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::vocab::VOCAB_SIZE;
use crate::backbone::{PretrainConfig, TransformerConfig};
use crate::error::{Error, Result};
use crate::routing::RouterConfig;
use crate::search::SearchConfig;
use crate::supervision::{LossConfig, TrainConfig};
use crate::tasks::CorpusSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub tasks: TasksConfig,
    pub search: SearchConfig,
    pub router: RouterConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    #[serde(skip_serializing)]
    pub workers: usize,
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Counter,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Counter,
            layers: 8,
            dim: 32,
            heads: 4,
            ffn: 128,
            max_seq: 64,
        }
    }
}

impl BackboneConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
            vocab: VOCAB_SIZE,
            max_seq: self.max_seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksConfig {
    /// Multiplier on the per-stratum base sizes.
    pub scale: f64,
    pub filler_min: usize,
    pub filler_max: usize,
    /// Every `holdout_every`-th instance is held out for evaluation.
    pub holdout_every: usize,
}

impl Default for TasksConfig {
    fn default() -> Self {
        let spec = CorpusSpec::default();
        TasksConfig {
            scale: 1.0,
            filler_min: spec.filler_min,
            filler_max: spec.filler_max,
            holdout_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub p_grid: Vec<f64>,
    /// Also train the loss and window-count variants.
    pub ablations: bool,
    /// Also train on one stratum family and evaluate on the other.
    pub ood: bool,
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            p_grid: (0..=8).map(|i| -1.0 + 0.25 * i as f64).collect(),
            ablations: true,
            ood: true,
            svg: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            layers: self.backbone.layers,
            filler_min: self.tasks.filler_min,
            filler_max: self.tasks.filler_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.layers < 3 {
            return Err(Error::Config("backbone.layers must be at least 3".into()));
        }
        if b.dim == 0 {
            return Err(Error::Config("backbone.dim must be positive".into()));
        }
        if b.kind == BackboneKind::Counter && b.dim < 2 * b.layers + 2 {
            return Err(Error::Config(format!(
                "counter backbone needs dim >= {} for {} layers",
                2 * b.layers + 2,
                b.layers
            )));
        }
        if b.kind == BackboneKind::Transformer {
            b.transformer().validate()?;
        }
        let t = &self.tasks;
        if !(t.scale > 0.0 && t.scale.is_finite()) {
            return Err(Error::Config("tasks.scale must be positive".into()));
        }
        if t.filler_min > t.filler_max {
            return Err(Error::Config("tasks.filler_min exceeds filler_max".into()));
        }
        if t.holdout_every < 2 {
            return Err(Error::Config("tasks.holdout_every must be at least 2".into()));
        }
        self.search.validate()?;
        if self.router.windows == 0 || self.router.hidden == 0 {
            return Err(Error::Config("router.windows and router.hidden must be positive".into()));
        }
        self.loss.validate()?;
        if self.train.batch == 0 || !(self.train.lr_max > 0.0) {
            return Err(Error::Config("train.batch and train.lr_max must be positive".into()));
        }
        if let Some(p) = self.eval.p_grid.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("eval.p_grid value {p} outside [-1, 1]")));
        }
        Ok(())
    }
}
