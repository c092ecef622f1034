// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: a JSON document whose every field has a
//! default, so `{}` is a complete config. [`ExperimentConfig::resolve`]
//! fills the task-dependent defaults and the result is what reports echo.

use std::path::{Path, PathBuf};

use lofit_core::localize::{k_from_percent, SelectionMethod};
use lofit_core::tasks::{CounterfactualConfig, RelationsConfig, TruthfulnessConfig};
use lofit_core::train::PretrainConfig;
use lofit_core::{ModelConfig, TaskKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-tuning learning rate for cross-entropy tasks.
pub const DEFAULT_LR_SUPERVISED: f32 = 0.1;
/// Bias-tuning learning rate for preference (DPO) tuning.
pub const DEFAULT_LR_PREFERENCE: f32 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub selection: SelectionSection,
    pub training: TrainingSection,
    pub sweep: SweepSection,
    pub transfer: TransferSection,
    pub paths: PathsSection,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: "relations".into(),
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            selection: SelectionSection::default(),
            training: TrainingSection::default(),
            sweep: SweepSection::default(),
            transfer: TransferSection::default(),
            paths: PathsSection::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    /// Seed for the base model's weight initialization.
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            d_model: 64,
            vocab_size: lofit_core::tasks::VOCAB_SIZE,
            max_seq: 16,
            mlp_hidden: 128,
            init_seed: 1,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig::new(self.n_layers, self.n_heads, self.d_model, self.vocab_size, self.max_seq, self.mlp_hidden)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Seed of every task generator; fixed across fine-tuning seeds.
    pub seed: u64,
    pub relations: RelationsSection,
    pub counterfactual: CounterfactualSection,
    pub truthfulness: TruthfulnessSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 1,
            relations: RelationsSection::default(),
            counterfactual: CounterfactualSection::default(),
            truthfulness: TruthfulnessSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationsSection {
    pub n: usize,
    pub pretrain_one_hop: usize,
    pub pretrain_compose: usize,
    pub pretrain_shortcut: usize,
    pub compose_percent: usize,
    pub probes: usize,
}

impl Default for RelationsSection {
    fn default() -> Self {
        let c = RelationsConfig::default();
        Self {
            n: c.n,
            pretrain_one_hop: c.pretrain_one_hop,
            pretrain_compose: c.pretrain_compose,
            pretrain_shortcut: c.pretrain_shortcut,
            compose_percent: c.compose_percent,
            probes: c.probes,
        }
    }
}

impl From<&RelationsSection> for RelationsConfig {
    fn from(s: &RelationsSection) -> Self {
        Self {
            n: s.n,
            pretrain_one_hop: s.pretrain_one_hop,
            pretrain_compose: s.pretrain_compose,
            pretrain_shortcut: s.pretrain_shortcut,
            compose_percent: s.compose_percent,
            probes: s.probes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualSection {
    pub n: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub fact_repeats: usize,
    pub pretrain_fact_edits: usize,
    pub pretrain_ignored_edits: usize,
    pub follow_percent: usize,
    pub probes: usize,
}

impl Default for CounterfactualSection {
    fn default() -> Self {
        let c = CounterfactualConfig::default();
        Self {
            n: c.n,
            n_entities: c.n_entities,
            n_relations: c.n_relations,
            fact_repeats: c.fact_repeats,
            pretrain_fact_edits: c.pretrain_fact_edits,
            pretrain_ignored_edits: c.pretrain_ignored_edits,
            follow_percent: c.follow_percent,
            probes: c.probes,
        }
    }
}

impl From<&CounterfactualSection> for CounterfactualConfig {
    fn from(s: &CounterfactualSection) -> Self {
        Self {
            n: s.n,
            n_entities: s.n_entities,
            n_relations: s.n_relations,
            fact_repeats: s.fact_repeats,
            pretrain_fact_edits: s.pretrain_fact_edits,
            pretrain_ignored_edits: s.pretrain_ignored_edits,
            follow_percent: s.follow_percent,
            probes: s.probes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthfulnessSection {
    pub n: usize,
    pub misconceived_quarters: usize,
    pub repeats: usize,
    pub truthful_copies: usize,
}

impl Default for TruthfulnessSection {
    fn default() -> Self {
        let c = TruthfulnessConfig::default();
        Self { n: c.n, misconceived_quarters: c.misconceived_quarters, repeats: c.repeats, truthful_copies: c.truthful_copies }
    }
}

impl From<&TruthfulnessSection> for TruthfulnessConfig {
    fn from(s: &TruthfulnessSection) -> Self {
        Self { n: s.n, misconceived_quarters: s.misconceived_quarters, repeats: s.repeats, truthful_copies: s.truthful_copies }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Tasks whose corpora form the base model's training data. Empty means
    /// the experiment's own task. Transfer experiments need every task involved.
    pub tasks: Vec<String>,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub patience: usize,
    pub min_delta: f32,
    /// Every n-th corpus example is held out for the plateau check.
    pub dev_every: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            tasks: Vec::new(),
            lr: p.train.lr,
            epochs: 15,
            batch_size: p.train.batch_size,
            weight_decay: p.train.weight_decay,
            patience: p.patience,
            min_delta: p.min_delta,
            dev_every: 20,
            seed: 1,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self) -> PretrainConfig {
        PretrainConfig {
            train: TrainConfig {
                lr: self.lr,
                epochs: self.epochs,
                batch_size: self.batch_size,
                weight_decay: self.weight_decay,
                seed: self.seed,
                ..TrainConfig::default()
            },
            patience: self.patience,
            min_delta: self.min_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// lofit_norm (alias lofit), bias_norm, iti_probe, layer_probe or random.
    pub method: String,
    /// Explicit head count; overrides `percent`.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// Percentage of all heads, used when `K` is absent.
    pub percent: f64,
    pub lambda: f32,
    pub sigma_a: f32,
    /// Learning rate of the scaling-factor step.
    pub lr: f32,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { method: "lofit_norm".into(), k: None, percent: 10.0, lambda: 5e-3, sigma_a: 1e-3, lr: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Bias-tuning learning rate; absent means 0.1 for cross-entropy tasks
    /// and 0.3 for preference tuning.
    pub lr: Option<f32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub adam_eps: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    /// DPO temperature.
    pub beta: f32,
    pub sigma_v: f32,
    /// `tuned` trains offsets by gradient descent; `mean_difference` uses
    /// the learning-free mean activation difference on the same heads.
    pub offsets: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            adam_eps: t.adam_eps,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            beta: t.beta,
            sigma_v: 1e-3,
            offsets: "tuned".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Ascending head percentages.
    pub percents: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { percents: vec![1.0, 3.0, 10.0, 20.0] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    /// Task whose heads are used; absent means every task.
    pub source: Option<String>,
    /// Task the offsets are tuned on; absent means every task.
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Output directory; the `--out` flag overrides it.
    pub out: PathBuf,
    /// Base checkpoint; absent means `<out>/base.lft`.
    pub base: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: PathBuf::from("runs"), base: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetSource {
    Tuned,
    MeanDifference,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = crate::formats::read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if cfg.paths.out.is_relative() {
            cfg.paths.out = dir.join(&cfg.paths.out);
        }
        if let Some(b) = cfg.paths.base.as_mut().filter(|b| b.is_relative()) {
            *b = dir.join(&*b);
        }
        Ok(cfg)
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        parse_task(&self.task)
    }

    pub fn method(&self) -> Result<SelectionMethod> {
        self.selection.method.parse().map_err(|e: lofit_core::Error| Error::Config(e.to_string()))
    }

    pub fn offset_source(&self) -> Result<OffsetSource> {
        match self.training.offsets.as_str() {
            "tuned" => Ok(OffsetSource::Tuned),
            "mean_difference" => Ok(OffsetSource::MeanDifference),
            other => Err(Error::Config(format!("unknown offsets source {other:?} (expected tuned or mean_difference)"))),
        }
    }

    pub fn pretrain_tasks(&self) -> Result<Vec<TaskKind>> {
        if self.pretrain.tasks.is_empty() {
            return Ok(vec![self.task_kind()?]);
        }
        let mut out = Vec::new();
        for t in &self.pretrain.tasks {
            let k = parse_task(t)?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn base_path(&self) -> PathBuf {
        self.paths.base.clone().unwrap_or_else(|| self.paths.out.join("base.lft"))
    }

    /// Number of heads from `K` or `percent`.
    pub fn k(&self, model: &ModelConfig) -> Result<usize> {
        let k = match self.selection.k {
            Some(k) => k,
            None => k_from_percent(model, self.selection.percent)?,
        };
        if k == 0 || k > model.total_heads() {
            return Err(Error::Config(format!("K = {k} must be in 1..={}", model.total_heads())));
        }
        Ok(k)
    }

    /// Bias-tuning hyperparameters for `task` and `seed`.
    pub fn train_config(&self, task: TaskKind, seed: u64) -> TrainConfig {
        let default_lr = if task.is_multiple_choice() { DEFAULT_LR_PREFERENCE } else { DEFAULT_LR_SUPERVISED };
        let t = &self.training;
        TrainConfig {
            lr: t.lr.unwrap_or(default_lr),
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            adam_eps: t.adam_eps,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            lambda: 0.0,
            beta: t.beta,
            seed,
        }
    }

    /// Checks every field and fills the defaults that depend on the task
    /// (`K`, `training.lr`, `pretrain.tasks`), so the result has no hidden
    /// defaults left.
    pub fn resolve(&self) -> Result<Self> {
        let mut out = self.clone();
        let task = self.task_kind()?;
        let model = self.model.to_config()?;
        self.method()?;
        self.offset_source()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        out.selection.k = Some(self.k(&model)?);
        out.selection.method = self.method()?.name().to_string();
        if !(self.selection.lambda >= 0.0) || !(self.selection.sigma_a >= 0.0) || !(self.selection.lr > 0.0) {
            return Err(Error::Config("selection lambda and sigma_a must be >= 0 and lr > 0".into()));
        }
        out.training.lr = Some(self.train_config(task, 0).lr);
        self.train_config(task, 0).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain.to_config().train.validate().map_err(|e| Error::Config(e.to_string()))?;
        out.pretrain.tasks = self.pretrain_tasks()?.iter().map(|k| k.name().to_string()).collect();
        for w in self.sweep.percents.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Config(format!("sweep percents must be strictly ascending: {:?}", self.sweep.percents)));
            }
        }
        for p in &self.sweep.percents {
            k_from_percent(&model, *p).map_err(|e| Error::Config(e.to_string()))?;
        }
        for t in [&self.transfer.source, &self.transfer.target].into_iter().flatten() {
            parse_task(t)?;
        }
        Ok(out)
    }
}

pub fn parse_task(s: &str) -> Result<TaskKind> {
    s.parse().map_err(|e: lofit_core::Error| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_a_complete_config() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let r = cfg.resolve().unwrap();
        // 10% of 32 heads.
        assert_eq!(r.selection.k, Some(3));
        assert_eq!(r.training.lr, Some(DEFAULT_LR_SUPERVISED));
        assert_eq!(r.pretrain.tasks, vec!["relations".to_string()]);
    }

    #[test]
    fn truthfulness_defaults_to_the_preference_rate() {
        let cfg = ExperimentConfig { task: "truthfulness".into(), ..Default::default() };
        assert_eq!(cfg.resolve().unwrap().training.lr, Some(DEFAULT_LR_PREFERENCE));
    }

    #[test]
    fn unknown_fields_and_values_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"tsak": "relations"}"#).is_err());
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.resolve().is_err()
        };
        assert!(bad(|c| c.task = "qa".into()));
        assert!(bad(|c| c.selection.method = "magic".into()));
        assert!(bad(|c| c.seeds.clear()));
        assert!(bad(|c| c.selection.k = Some(33)));
        assert!(bad(|c| c.sweep.percents = vec![10.0, 3.0]));
        assert!(bad(|c| c.training.offsets = "learned".into()));
    }

    #[test]
    fn resolve_is_idempotent() {
        let r = ExperimentConfig::default().resolve().unwrap();
        assert_eq!(r.resolve().unwrap(), r);
    }
}
