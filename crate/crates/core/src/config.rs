//! Strict JSON experiment configuration.
//!
//! Every section is optional and unknown keys are rejected. [`ExperimentConfig::effective`]
//! fills every default so the echoed document pins the run completely.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GeneratorConfig, Mode};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossOptions, Reduction};
use crate::model::ModelConfig;
use crate::objective::{default_lambda, parse_combo, ObjectiveSpec, WeightedLoss};
use crate::stats::MeanNormDivisor;
use crate::trainer::TrainConfig;

/// Generator parameters; omitted fields take the defaults of the
/// objective's mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phases: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition_peak: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GeneratorSection {
    pub fn resolve(&self, mode: Mode) -> GeneratorConfig {
        let d = GeneratorConfig::for_mode(mode);
        GeneratorConfig {
            classes: self.classes.unwrap_or(d.classes),
            dim: self.dim.unwrap_or(d.dim),
            length: self.length.unwrap_or(d.length),
            phases: self.phases.unwrap_or(d.phases),
            alpha: self.alpha.unwrap_or(d.alpha),
            noise: self.noise.unwrap_or(d.noise),
            transition_peak: self.transition_peak.unwrap_or(d.transition_peak),
            clip_len: self.clip_len.unwrap_or(d.clip_len),
            gap: self.gap.unwrap_or(d.gap),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    fn from_resolved(g: &GeneratorConfig) -> Self {
        Self {
            classes: Some(g.classes),
            dim: Some(g.dim),
            length: Some(g.length),
            phases: Some(g.phases),
            alpha: Some(g.alpha),
            noise: Some(g.noise),
            transition_peak: Some(g.transition_peak),
            clip_len: Some(g.clip_len),
            gap: Some(g.gap),
            seed: Some(g.seed),
        }
    }
}

/// Where the data comes from: generated, or `train.earf` / `test.earf`
/// inside `path`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_size: usize,
    pub test_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { train_size: 4000, test_size: 1000, path: None }
    }
}

/// `dim` and `classes` default to the data's; if given they must match it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub hidden: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { dim: None, hidden: 64, classes: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossEntry {
    pub kind: LossKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub mode: Mode,
    pub losses: Vec<LossEntry>,
    pub transition_head: bool,
    pub reduction: Reduction,
    pub mean_norm: MeanNormDivisor,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            mode: Mode::Early,
            losses: Vec::new(),
            transition_head: true,
            reduction: Reduction::Mean,
            mean_norm: MeanNormDivisor::Entries,
        }
    }
}

impl ObjectiveSection {
    pub fn spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            mode: self.mode,
            losses: self
                .losses
                .iter()
                .map(|e| WeightedLoss { kind: e.kind, lambda: e.lambda.unwrap_or_else(|| default_lambda(e.kind)) })
                .collect(),
            transition_head: self.transition_head,
            options: LossOptions { reduction: self.reduction, mean_norm: self.mean_norm },
        }
    }

    /// Same section with the loss list replaced by `kinds` at default λ.
    pub fn with_kinds(&self, kinds: &[LossKind]) -> Self {
        Self {
            losses: kinds.iter().map(|k| LossEntry { kind: *k, lambda: Some(default_lambda(*k)) }).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Observation fractions for early prediction; the first is tracked per
    /// epoch.
    pub p: Vec<f64>,
    pub top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { p: vec![0.25], top_k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    /// `"Baseline"`, a kind, or kinds joined by `+`.
    pub kinds: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let mut kinds = vec!["Baseline".to_string()];
        kinds.extend(LossKind::ALL.iter().map(|k| k.name().to_string()));
        kinds.push("JVS+JCC+JFIP".into());
        Self { seeds: vec![0, 1, 2, 3, 4], kinds }
    }
}

impl SweepSection {
    pub fn combos(&self) -> Result<Vec<Vec<LossKind>>> {
        self.kinds.iter().map(|k| parse_combo(k)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: GeneratorSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub objective: ObjectiveSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn mode(&self) -> Mode {
        self.objective.mode
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator.resolve(self.mode())
    }

    /// Overrides both the training and the generator seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.generator.seed = Some(seed);
    }

    /// Model shape for data of dimension `dim` with `classes` classes.
    pub fn model_config(&self, dim: usize, classes: usize) -> Result<ModelConfig> {
        let check = |name: &str, given: Option<usize>, actual: usize| match given {
            Some(g) if g != actual => Err(Error::Config(format!("model.{name} = {g} but the data has {actual}"))),
            _ => Ok(()),
        };
        check("dim", self.model.dim, dim)?;
        check("classes", self.model.classes, classes)?;
        let mc = ModelConfig { dim, hidden: self.model.hidden, classes };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.path.is_none() {
            self.generator_config().validate(self.mode())?;
        }
        let spec = self.objective.spec();
        spec.validate()?;
        self.train.validate(&spec)?;
        if self.eval.p.is_empty() || self.eval.p.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::Config(format!("eval.p must be a non-empty list in (0, 1], got {:?}", self.eval.p)));
        }
        if self.eval.top_k == 0 {
            return Err(Error::Config("eval.top_k must be positive".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be positive".into()));
        }
        self.sweep.combos()?;
        Ok(())
    }

    /// The fully defaulted configuration: generator fields resolved for the
    /// mode, model shape pinned, every λ explicit.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        let g = self.generator_config();
        out.generator = GeneratorSection::from_resolved(&g);
        if self.dataset.path.is_none() {
            out.model.dim.get_or_insert(g.dim);
            out.model.classes.get_or_insert(g.classes);
        }
        for e in &mut out.objective.losses {
            e.lambda.get_or_insert(default_lambda(e.kind));
        }
        out
    }
}
