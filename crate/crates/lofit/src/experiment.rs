// SPDX-License-Identifier: MIT OR Apache-2.0

//! Building blocks shared by the CLI commands and the acceptance suite:
//! task generation, base pretraining, head selection, offset tuning and
//! parallel evaluation.

use std::collections::BTreeMap;

use lofit_core::intervene::extract_iti_offsets;
use lofit_core::localize::{
    bias_norm_scores, best_layer, layer_heads, norm_scores, probe_scores, random_heads, select_top_k, train_head_probes,
    train_layer_probes, train_scaling_factors, HeadScoreTable, SelectionConfig, SelectionMethod,
};
use lofit_core::tasks::{
    evaluate, gen_counterfactual_task, gen_relations_task, gen_truthfulness_task, labeled_pairs,
    pretraining_corpus, CompositionTable, EvalReport,
};
use lofit_core::train::{pretrain, tune_biases, Objective, PretrainSummary, SupervisedExample};
use lofit_core::{HeadId, HookSource, InterventionSet, Model, NoHooks, PreferencePair, Rng, StepRecord, TaskData, TaskKind};

use crate::config::{ExperimentConfig, OffsetSource};
use crate::error::{Error, Result};
use crate::formats::HeadSetFile;

/// Threshold of the competent-base gate on held-out probes.
pub const GATE_PROBE_EM: f64 = 0.9;
/// The misconceived base must score below this MC1 on truthfulness.
pub const GATE_MISCONCEIVED_MC1: f64 = 0.5;

pub fn generate_task(kind: TaskKind, cfg: &ExperimentConfig) -> Result<TaskData> {
    let d = &cfg.data;
    Ok(match kind {
        TaskKind::Relations => gen_relations_task(d.seed, &(&d.relations).into(), &CompositionTable::kinship())?,
        TaskKind::Counterfactual => gen_counterfactual_task(d.seed, &(&d.counterfactual).into())?.data,
        TaskKind::Truthfulness => gen_truthfulness_task(d.seed, &(&d.truthfulness).into())?.0,
    })
}

/// Task data for every kind in `kinds`, generated once each.
pub fn generate_tasks(kinds: &[TaskKind], cfg: &ExperimentConfig) -> Result<BTreeMap<TaskKind, TaskData>> {
    kinds.iter().map(|&k| Ok((k, generate_task(k, cfg)?))).collect()
}

/// Training data of the intervention: gold answers for generation tasks,
/// preference pairs for truthfulness.
#[derive(Debug, Clone)]
pub enum TaskObjective {
    Supervised(Vec<SupervisedExample>),
    Preference(Vec<PreferencePair>),
}

impl TaskObjective {
    pub fn for_task(data: &TaskData) -> Self {
        if data.kind.is_multiple_choice() {
            TaskObjective::Preference(data.preferences.clone())
        } else {
            TaskObjective::Supervised(data.train_supervised())
        }
    }

    pub fn as_objective(&self) -> Objective<'_> {
        match self {
            TaskObjective::Supervised(x) => Objective::CrossEntropy(x),
            TaskObjective::Preference(x) => Objective::Preference(x),
        }
    }
}

// --------------------------------------------------------------------------
// Base model
// --------------------------------------------------------------------------

pub fn pretrain_base(
    cfg: &ExperimentConfig,
    tasks: &BTreeMap<TaskKind, TaskData>,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<(Model, PretrainSummary)> {
    let kinds = cfg.pretrain_tasks()?;
    let datas: Vec<&TaskData> = kinds
        .iter()
        .map(|k| tasks.get(k).ok_or_else(|| Error::Config(format!("task {k} was not generated"))))
        .collect::<Result<_>>()?;
    let (train, dev) = pretraining_corpus(&datas, cfg.pretrain.seed, cfg.pretrain.dev_every);
    let mut model = Model::build(cfg.model.to_config()?, &mut Rng::new(cfg.model.init_seed))?;
    let summary = pretrain(&mut model, &train, &dev, &cfg.pretrain.to_config(), log)?;
    model.freeze();
    Ok((model, summary))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GateResult {
    pub task: String,
    /// Exact match on held-out competent-mode probes.
    pub probe_em: f64,
    /// Headline test metric without intervention.
    pub zero_shot: f64,
    pub passed: bool,
}

/// Competent-base gate: probes above 90% EM, and for truthfulness a
/// misconceived base (test MC1 below 0.5).
pub fn gate(model: &Model, data: &TaskData, threads: usize) -> Result<GateResult> {
    // Probes are scored by exact match for every task; any generation kind selects that.
    let probe_em = eval_parallel(model, &NoHooks, TaskKind::Relations, &data.probes, threads)?.em.unwrap_or(0.0);
    let zero = eval_parallel(model, &NoHooks, data.kind, &data.splits.test, threads)?;
    let zero_shot = lofit_core::tasks::headline(&zero);
    let mut passed = probe_em > GATE_PROBE_EM;
    if data.kind.is_multiple_choice() {
        passed &= zero_shot < GATE_MISCONCEIVED_MC1;
    }
    Ok(GateResult { task: data.kind.name().into(), probe_em, zero_shot, passed })
}

// --------------------------------------------------------------------------
// Selection and tuning
// --------------------------------------------------------------------------

/// Runs `method` on the task's training data and returns the head-set file.
#[allow(clippy::too_many_arguments)]
pub fn select_heads(
    model: &Model,
    data: &TaskData,
    cfg: &ExperimentConfig,
    method: SelectionMethod,
    k: usize,
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<HeadSetFile> {
    let config = &model.config;
    let obj = TaskObjective::for_task(data);
    let train_cfg = cfg.train_config(data.kind, seed);
    let s = &cfg.selection;
    let sel = SelectionConfig { k, lambda: s.lambda, sigma_a: s.sigma_a, seed, lr: s.lr };
    sel.validate(config)?;
    let (heads, table, lambda): (Vec<HeadId>, Option<HeadScoreTable>, f32) = match method {
        SelectionMethod::LofitNorm => {
            let a = train_scaling_factors(model, obj.as_objective(), &sel, &train_cfg, log)?;
            let t = norm_scores(&a.a, method)?;
            (select_top_k(&t, k)?, Some(t), s.lambda)
        }
        SelectionMethod::BiasNorm => {
            let t = bias_norm_scores(model, obj.as_objective(), &train_cfg, cfg.training.sigma_v, log)?;
            (select_top_k(&t, k)?, Some(t), 0.0)
        }
        SelectionMethod::ItiProbe => {
            let probes = train_head_probes(model, &labeled_pairs(&data.splits.train))?;
            let t = probe_scores(&probes);
            (select_top_k(&t, k)?, Some(t), 0.0)
        }
        SelectionMethod::LayerProbe => {
            let probes = train_layer_probes(model, &labeled_pairs(&data.splits.train))?;
            let t = lofit_core::localize::layer_probe_scores(config, &probes)?;
            (layer_heads(config, best_layer(&probes)?)?, Some(t), 0.0)
        }
        SelectionMethod::Random => (random_heads(config, k, seed)?, None, 0.0),
    };
    let mut file = HeadSetFile::new(&heads, table.as_ref(), method.name(), lambda, seed);
    if method == SelectionMethod::LofitNorm {
        file.sigma_a = Some(s.sigma_a);
    }
    file.task = Some(data.kind.name().into());
    Ok(file)
}

/// Offsets for `heads` on the task's training data, by gradient tuning
/// (cross-entropy or DPO) or by mean activation difference.
pub fn tune_offsets(
    model: &Model,
    data: &TaskData,
    cfg: &ExperimentConfig,
    heads: &[HeadId],
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<InterventionSet> {
    match cfg.offset_source()? {
        OffsetSource::Tuned => {
            let obj = TaskObjective::for_task(data);
            let train_cfg = cfg.train_config(data.kind, seed);
            let (offsets, _) = tune_biases(model, heads, obj.as_objective(), &train_cfg, cfg.training.sigma_v, log)?;
            Ok(offsets.to_intervention())
        }
        OffsetSource::MeanDifference => Ok(extract_iti_offsets(model, &labeled_pairs(&data.splits.train), heads, 1.0)?),
    }
}

// --------------------------------------------------------------------------
// Evaluation
// --------------------------------------------------------------------------

/// `LOFIT_THREADS`, defaulting to one thread.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("LOFIT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("LOFIT_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// [`evaluate`] fanned out over up to `threads` contiguous chunks. Results
/// are merged in example order, so the report does not depend on `threads`.
pub fn eval_parallel(
    model: &Model,
    hooks: &(dyn HookSource + Sync),
    kind: TaskKind,
    data: &[lofit_core::TaskExample],
    threads: usize,
) -> Result<EvalReport> {
    let threads = threads.clamp(1, data.len().max(1));
    let chunk = data.len().div_ceil(threads).max(1);
    let parts: Vec<Result<EvalReport>> = if threads == 1 {
        vec![evaluate(model, hooks, kind, data).map_err(Error::from)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = data
                .chunks(chunk)
                .map(|c| s.spawn(move || evaluate(model, hooks, kind, c).map_err(Error::from)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        })
    };
    let mut per_example = Vec::with_capacity(data.len());
    for p in parts {
        per_example.extend(p?.per_example);
    }
    let indicator = |b: Option<bool>| b.map(|x| if x { 1.0 } else { 0.0 });
    let em = mean_of(per_example.iter().filter_map(|r| indicator(r.em)));
    let mc1 = mean_of(per_example.iter().filter_map(|r| indicator(r.mc1)));
    let mc2 = mean_of(per_example.iter().filter_map(|r| r.mc2));
    Ok(EvalReport { em, mc1, mc2, n: per_example.len(), per_example })
}
