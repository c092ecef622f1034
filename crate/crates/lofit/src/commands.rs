// SPDX-License-Identifier: MIT OR Apache-2.0

//! The CLI commands as library functions. Each writes its artifacts under
//! the context's output directory and returns what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lofit_core::localize::{emd, jaccard, k_from_percent, layer_distribution, logit_lens_for_head, param_count, LOGIT_LENS_TOP_K};
use lofit_core::train::PretrainSummary;
use lofit_core::{HeadId, InterventionSet, Model, NoHooks, StepRecord, TaskData, TaskKind};
use serde::{Deserialize, Serialize};

use crate::config::{parse_task, ExperimentConfig};
use crate::error::{Error, Result};
use crate::experiment::{eval_parallel, gate, generate_task, generate_tasks, pretrain_base, select_heads, tune_offsets, GateResult};
use crate::formats::{
    read_json, sha256_file, sha256_hex, write_dataset, write_json, write_preferences, HeadSetFile, InterventionFile, TrainingLog,
};
use crate::report::{write_csv, HeadsUsed, MetricRow, RunReport, Timing};
use crate::checkpoint;

/// Resolved configuration plus run-wide settings.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    /// Applies the `--out` and `--seed` overrides, then resolves defaults.
    pub fn new(mut cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>, threads: usize) -> Result<Self> {
        if let Some(o) = out {
            cfg.paths.out = o;
        }
        if let Some(s) = seed {
            cfg.seeds = vec![s];
        }
        let cfg = cfg.resolve()?;
        Ok(Self { out: cfg.paths.out.clone(), cfg, threads: threads.max(1) })
    }

    pub fn task(&self) -> TaskKind {
        self.cfg.task_kind().expect("resolved config has a valid task")
    }

    /// First configured seed; single-run commands use only this one.
    pub fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn config_hash(&self) -> Result<String> {
        let text = serde_json::to_vec(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        Ok(sha256_hex(&text))
    }

    /// Loads the base checkpoint and checks it has the configured shape.
    pub fn load_base(&self) -> Result<Model> {
        let path = self.cfg.base_path();
        if !path.exists() {
            return Err(Error::Config(format!("base checkpoint {} does not exist; run `lofit pretrain` first", path.display())));
        }
        let mut model = checkpoint::load(&path)?;
        let want = self.cfg.model.to_config()?;
        if model.config != want {
            return Err(Error::format(&path, format!("checkpoint has shape {:?}, config asks for {:?}", model.config, want)));
        }
        model.freeze();
        Ok(model)
    }

    fn write_timing(&self, command: &str, start: Instant) -> Result<()> {
        let t = Timing { command: command.into(), wall_clock_s: start.elapsed().as_secs_f64() };
        write_json(&self.path(&format!("timing_{command}.json")), &t)
    }

    fn artifacts(&self, files: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        out.insert("config".to_string(), self.config_hash()?);
        for (name, p) in files {
            out.insert(name.to_string(), sha256_file(p)?);
        }
        Ok(out)
    }
}

/// Runs `body` with a step logger writing to `path`; the first write error
/// wins over the body's result.
fn with_log<T>(path: &Path, body: impl FnOnce(&mut dyn FnMut(&StepRecord)) -> Result<T>) -> Result<T> {
    let mut log = TrainingLog::create(path)?;
    let mut failed = None;
    let out = body(&mut |r| {
        if failed.is_none() {
            failed = log.append(r).err();
        }
    });
    match failed {
        Some(e) => Err(e),
        None => out,
    }
}

fn heads_pairs(heads: &[HeadId]) -> Vec<[usize; 2]> {
    heads.iter().map(|h| [h.layer, h.head]).collect()
}

// --------------------------------------------------------------------------
// pretrain
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummaryRecord {
    pub epochs_run: usize,
    pub train_losses: Vec<f32>,
    pub dev_losses: Vec<f32>,
}

impl From<&PretrainSummary> for PretrainSummaryRecord {
    fn from(s: &PretrainSummary) -> Self {
        Self { epochs_run: s.epochs_run, train_losses: s.train_losses.clone(), dev_losses: s.dev_losses.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config: ExperimentConfig,
    pub summary: PretrainSummaryRecord,
    pub gate: Vec<GateResult>,
    pub gate_passed: bool,
    pub artifacts: BTreeMap<String, String>,
}

/// Trains the base model on the configured tasks' corpora, writes the
/// checkpoint, the task datasets and the competence gate.
pub fn pretrain(ctx: &Context) -> Result<PretrainReport> {
    let start = Instant::now();
    let kinds = ctx.cfg.pretrain_tasks()?;
    let tasks = generate_tasks(&kinds, &ctx.cfg)?;
    for (k, d) in &tasks {
        write_task_files(&ctx.path("data"), *k, d)?;
    }
    let (model, summary) = with_log(&ctx.path("pretrain_log.jsonl"), |log| pretrain_base(&ctx.cfg, &tasks, log))?;
    let base = ctx.cfg.base_path();
    checkpoint::save(&model, &base)?;
    let gates: Vec<GateResult> = tasks.values().map(|d| gate(&model, d, ctx.threads)).collect::<Result<_>>()?;
    let report = PretrainReport {
        config: ctx.cfg.clone(),
        summary: (&summary).into(),
        gate_passed: gates.iter().all(|g| g.passed),
        gate: gates,
        artifacts: ctx.artifacts(&[("base", &base), ("pretrain_log", &ctx.path("pretrain_log.jsonl"))])?,
    };
    write_json(&ctx.path("pretrain_report.json"), &report)?;
    ctx.write_timing("pretrain", start)?;
    Ok(report)
}

fn write_task_files(dir: &Path, kind: TaskKind, d: &TaskData) -> Result<()> {
    let dir = dir.join(kind.name());
    write_dataset(&dir.join("train.jsonl"), &d.splits.train)?;
    write_dataset(&dir.join("dev.jsonl"), &d.splits.dev)?;
    write_dataset(&dir.join("test.jsonl"), &d.splits.test)?;
    write_dataset(&dir.join("probes.jsonl"), &d.probes)?;
    if !d.preferences.is_empty() {
        write_preferences(&dir.join("preferences.jsonl"), &d.preferences)?;
    }
    Ok(())
}

// --------------------------------------------------------------------------
// select / tune / eval
// --------------------------------------------------------------------------

/// Writes `heads.json` and, for trained selectors, `select_log.jsonl`.
pub fn select(ctx: &Context) -> Result<HeadSetFile> {
    let start = Instant::now();
    let model = ctx.load_base()?;
    let data = generate_task(ctx.task(), &ctx.cfg)?;
    let method = ctx.cfg.method()?;
    let k = ctx.cfg.k(&model.config)?;
    let file = with_log(&ctx.path("select_log.jsonl"), |log| select_heads(&model, &data, &ctx.cfg, method, k, ctx.seed(), log))?;
    write_json(&ctx.path("heads.json"), &file)?;
    ctx.write_timing("select", start)?;
    Ok(file)
}

/// Tunes offsets on the heads of `heads_path` and writes `intervention.json`.
pub fn tune(ctx: &Context, heads_path: &Path) -> Result<InterventionSet> {
    let start = Instant::now();
    let model = ctx.load_base()?;
    let heads = HeadSetFile::load(heads_path, &model.config)?;
    let data = generate_task(ctx.task(), &ctx.cfg)?;
    let iv = with_log(&ctx.path("tune_log.jsonl"), |log| tune_offsets(&model, &data, &ctx.cfg, &heads.head_ids(), ctx.seed(), log))?;
    write_json(&ctx.path("intervention.json"), &InterventionFile::from_set(&iv))?;
    ctx.write_timing("tune", start)?;
    Ok(iv)
}

/// Test-split metrics without intervention and, if given, with it. Writes
/// `report.json` and `report.csv`.
pub fn eval(ctx: &Context, intervention: Option<&Path>) -> Result<RunReport> {
    let start = Instant::now();
    let model = ctx.load_base()?;
    let data = generate_task(ctx.task(), &ctx.cfg)?;
    let task = ctx.task().name();
    let seed = ctx.seed();
    let mut rows = vec![MetricRow::new("zero_shot", task, seed, &eval_parallel(&model, &NoHooks, ctx.task(), &data.splits.test, ctx.threads)?)];
    let mut heads = Vec::new();
    let mut inputs: Vec<(&str, PathBuf)> = vec![("base", ctx.cfg.base_path())];
    if let Some(p) = intervention {
        let iv = InterventionFile::load(p)?;
        iv.validate_for(&model.config).map_err(|e| Error::format(p, e.to_string()))?;
        let r = eval_parallel(&model, &iv, ctx.task(), &data.splits.test, ctx.threads)?;
        let mut row = MetricRow::new("intervention", task, seed, &r);
        row.k = Some(iv.len());
        rows.push(row);
        heads.push(HeadsUsed { label: "intervention".into(), heads: heads_pairs(&iv.targets()) });
        inputs.push(("intervention", p.to_path_buf()));
    }
    write_csv(&ctx.path("report.csv"), &rows)?;
    let mut report = RunReport::new("eval", ctx.cfg.clone(), heads, rows);
    inputs.push(("report_csv", ctx.path("report.csv")));
    let refs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    report.artifacts = ctx.artifacts(&refs)?;
    write_json(&ctx.path("report.json"), &report)?;
    ctx.write_timing("eval", start)?;
    Ok(report)
}

// --------------------------------------------------------------------------
// sweep-k
// --------------------------------------------------------------------------

/// Select, tune and evaluate for every `(percent, seed)`; writes `sweep.csv`
/// (one line per cell) and `sweep_report.json` (with the zero-shot row).
pub fn sweep_k(ctx: &Context) -> Result<RunReport> {
    let start = Instant::now();
    let model = ctx.load_base()?;
    let kind = ctx.task();
    let data = generate_task(kind, &ctx.cfg)?;
    let method = ctx.cfg.method()?;
    let mut rows = Vec::new();
    let mut heads = Vec::new();
    for &pct in &ctx.cfg.sweep.percents {
        let k = k_from_percent(&model.config, pct)?;
        for &seed in &ctx.cfg.seeds {
            let hs = select_heads(&model, &data, &ctx.cfg, method, k, seed, &mut |_| {})?;
            let iv = tune_offsets(&model, &data, &ctx.cfg, &hs.head_ids(), seed, &mut |_| {})?;
            let r = eval_parallel(&model, &iv, kind, &data.splits.test, ctx.threads)?;
            let mut row = MetricRow::new(method.name(), kind.name(), seed, &r);
            row.k = Some(hs.k);
            row.k_percent = Some(pct);
            rows.push(row);
            heads.push(HeadsUsed { label: format!("{pct}% seed {seed}"), heads: hs.heads.clone() });
        }
    }
    write_csv(&ctx.path("sweep.csv"), &rows)?;
    let zero = eval_parallel(&model, &NoHooks, kind, &data.splits.test, ctx.threads)?;
    let mut all = vec![MetricRow::new("zero_shot", kind.name(), ctx.seed(), &zero)];
    all.extend(rows);
    let mut report = RunReport::new("sweep-k", ctx.cfg.clone(), heads, all);
    report.artifacts = ctx.artifacts(&[("base", &ctx.cfg.base_path()), ("sweep_csv", &ctx.path("sweep.csv"))])?;
    write_json(&ctx.path("sweep_report.json"), &report)?;
    ctx.write_timing("sweep-k", start)?;
    Ok(report)
}

// --------------------------------------------------------------------------
// transfer
// --------------------------------------------------------------------------

/// Tunes offsets on each target task using heads selected on each source
/// task, plus a random-heads control and a zero-shot row per target.
/// With `heads_path`, that file supplies the (single) source's heads.
pub fn transfer(ctx: &Context, heads_path: Option<&Path>) -> Result<RunReport> {
    let start = Instant::now();
    let model = ctx.load_base()?;
    let pick = |t: &Option<String>| -> Result<Vec<TaskKind>> {
        match t {
            Some(s) => Ok(vec![parse_task(s)?]),
            None => Ok(TaskKind::ALL.to_vec()),
        }
    };
    let given = match heads_path {
        Some(p) => Some(HeadSetFile::load(p, &model.config)?),
        None => None,
    };
    let sources = match &given {
        Some(f) => {
            let t = f.task.as_ref().ok_or_else(|| Error::format(heads_path.unwrap(), "head set does not name its task"))?;
            let src = parse_task(t)?;
            if ctx.cfg.transfer.source.as_ref().is_some_and(|s| parse_task(s).ok() != Some(src)) {
                return Err(Error::Config(format!("head set is from {src} but transfer.source says otherwise")));
            }
            vec![src]
        }
        None => pick(&ctx.cfg.transfer.source)?,
    };
    let targets = pick(&ctx.cfg.transfer.target)?;
    let trained_on = ctx.cfg.pretrain_tasks()?;
    for t in sources.iter().chain(&targets) {
        if !trained_on.contains(t) {
            return Err(Error::Config(format!(
                "transfer involves {t}, but the base model is configured as pretrained on {trained_on:?}; set pretrain.tasks"
            )));
        }
    }
    let mut kinds: Vec<TaskKind> = sources.iter().chain(&targets).copied().collect();
    kinds.sort();
    kinds.dedup();
    let tasks = generate_tasks(&kinds, &ctx.cfg)?;
    let method = ctx.cfg.method()?;
    let k = ctx.cfg.k(&model.config)?;

    let mut rows = Vec::new();
    let mut heads = Vec::new();
    for &t in &targets {
        let r = eval_parallel(&model, &NoHooks, t, &tasks[&t].splits.test, ctx.threads)?;
        rows.push(MetricRow::new("zero_shot", t.name(), ctx.seed(), &r));
    }
    for &seed in &ctx.cfg.seeds {
        for &src in &sources {
            let hs = match &given {
                Some(f) => f.clone(),
                None => select_heads(&model, &tasks[&src], &ctx.cfg, method, k, seed, &mut |_| {})?,
            };
            heads.push(HeadsUsed { label: format!("{src} seed {seed}"), heads: hs.heads.clone() });
            for &t in &targets {
                let iv = tune_offsets(&model, &tasks[&t], &ctx.cfg, &hs.head_ids(), seed, &mut |_| {})?;
                let r = eval_parallel(&model, &iv, t, &tasks[&t].splits.test, ctx.threads)?;
                let mut row = MetricRow::new(if src == t { "same_task" } else { "transfer" }, t.name(), seed, &r);
                row.source = Some(src.name().into());
                row.k = Some(hs.k);
                rows.push(row);
            }
        }
        for &t in &targets {
            let rh = lofit_core::localize::random_heads(&model.config, k, seed)?;
            let iv = tune_offsets(&model, &tasks[&t], &ctx.cfg, &rh, seed, &mut |_| {})?;
            let r = eval_parallel(&model, &iv, t, &tasks[&t].splits.test, ctx.threads)?;
            let mut row = MetricRow::new("random", t.name(), seed, &r);
            row.k = Some(k);
            rows.push(row);
            heads.push(HeadsUsed { label: format!("random seed {seed}"), heads: heads_pairs(&rh) });
        }
    }
    write_csv(&ctx.path("transfer.csv"), &rows)?;
    let mut report = RunReport::new("transfer", ctx.cfg.clone(), heads, rows);
    let (base, csv) = (ctx.cfg.base_path(), ctx.path("transfer.csv"));
    let mut inputs: Vec<(&str, &Path)> = vec![("base", &base), ("transfer_csv", &csv)];
    if let Some(p) = heads_path {
        inputs.push(("heads", p));
    }
    report.artifacts = ctx.artifacts(&inputs)?;
    write_json(&ctx.path("transfer_report.json"), &report)?;
    ctx.write_timing("transfer", start)?;
    Ok(report)
}

// --------------------------------------------------------------------------
// analyze
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensToken {
    pub token: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub layer: usize,
    pub head: usize,
    pub top: Vec<LensToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSetSummary {
    pub file: String,
    pub method: String,
    pub task: Option<String>,
    #[serde(rename = "K")]
    pub k: usize,
    pub param_count: usize,
    pub layer_histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub d_head: usize,
    /// `K × d_head` of the intervention, when one is given.
    pub param_count: Option<usize>,
    pub logit_lens: Vec<LensEntry>,
    pub head_sets: Vec<HeadSetSummary>,
    /// `jaccard[i][j]` = |T_i ∩ T_j| / |T_i|.
    pub jaccard: Vec<Vec<f64>>,
    pub emd: Vec<Vec<f64>>,
    pub artifacts: BTreeMap<String, String>,
}

/// Logit lens of each offset, pairwise head-set similarity and layer
/// histograms. Writes `analysis.json`.
pub fn analyze(ctx: &Context, intervention: Option<&Path>, head_files: &[PathBuf]) -> Result<Analysis> {
    let start = Instant::now();
    let model = ctx.load_base()?;
    let cfg = &model.config;
    let mut artifacts = ctx.artifacts(&[("base", &ctx.cfg.base_path())])?;
    let mut logit_lens = Vec::new();
    let mut pc = None;
    if let Some(p) = intervention {
        let iv = InterventionFile::load(p)?;
        iv.validate_for(cfg).map_err(|e| Error::format(p, format!("intervention does not fit the model: {e}")))?;
        for (h, v) in iv.offsets() {
            let scaled: Vec<f32> = v.iter().map(|x| x * iv.alpha).collect();
            let top = logit_lens_for_head(&model, *h, &scaled, LOGIT_LENS_TOP_K)?;
            logit_lens.push(LensEntry {
                layer: h.layer,
                head: h.head,
                top: top.into_iter().map(|(token, score)| LensToken { token, score }).collect(),
            });
        }
        pc = Some(param_count(iv.len(), cfg.d_head));
        artifacts.insert("intervention".into(), sha256_file(p)?);
    }
    let mut sets = Vec::new();
    let mut summaries = Vec::new();
    for (i, p) in head_files.iter().enumerate() {
        let f = HeadSetFile::load(p, cfg)?;
        let ids = f.head_ids();
        summaries.push(HeadSetSummary {
            file: p.display().to_string(),
            method: f.method.clone(),
            task: f.task.clone(),
            k: f.k,
            param_count: param_count(f.k, cfg.d_head),
            layer_histogram: layer_distribution(&ids, cfg.n_layers)?,
        });
        artifacts.insert(format!("heads_{i}"), sha256_file(p)?);
        sets.push(ids);
    }
    let n = sets.len();
    let mut jac = vec![vec![0.0; n]; n];
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            jac[i][j] = jaccard(&sets[i], &sets[j])?;
            dist[i][j] = emd(&summaries[i].layer_histogram, &summaries[j].layer_histogram)?;
        }
    }
    let analysis = Analysis { d_head: cfg.d_head, param_count: pc, logit_lens, head_sets: summaries, jaccard: jac, emd: dist, artifacts };
    write_json(&ctx.path("analysis.json"), &analysis)?;
    ctx.write_timing("analyze", start)?;
    Ok(analysis)
}

/// Reads a report written by [`eval`], [`sweep_k`] or [`transfer`].
pub fn read_report(path: &Path) -> Result<RunReport> {
    read_json(path)
}
