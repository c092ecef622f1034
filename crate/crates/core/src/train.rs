// SPDX-License-Identifier: MIT OR Apache-2.0

//! Losses, AdamW, and the training loops.
//!
//! Intervention training never touches base weights: the model is borrowed
//! immutably and loaded onto each step's graph as constants, so only the
//! hook parameters (scaling factors or offsets) are leaves with gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::intervene::OffsetParams;
use crate::model::{HeadId, Hooks, Model, NoHooks};
use crate::rng::Rng;
use crate::tasks::{PreferencePair, EOS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub adam_eps: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    /// L1 weight on scaling factors (Step 1 only).
    pub lambda: f32,
    /// DPO implicit-reward temperature.
    pub beta: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            epochs: 5,
            batch_size: 8,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            lambda: 0.0,
            beta: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive, got {}", self.lr);
        ensure!(self.epochs > 0, "epochs must be positive");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        ensure!(self.adam_eps > 0.0, "adam_eps must be positive");
        ensure!(self.lambda >= 0.0, "lambda must be >= 0, got {}", self.lambda);
        ensure!(self.beta > 0.0, "beta must be positive, got {}", self.beta);
        Ok(())
    }
}

/// One optimizer step, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub l1_penalty: f32,
    pub lr: f32,
}

/// Supervised next-token example: the loss covers `target` only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedExample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl SupervisedExample {
    /// Target is `gold` followed by the end token.
    pub fn with_eos(prompt: &[usize], gold: &[usize]) -> Self {
        let mut target = gold.to_vec();
        target.push(EOS);
        Self { prompt: prompt.to_vec(), target }
    }
}

/// Training signal for the hooked loops.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy(&'a [SupervisedExample]),
    Preference(&'a [PreferencePair]),
}

impl Objective<'_> {
    pub fn len(&self) -> usize {
        match self {
            Objective::CrossEntropy(d) => d.len(),
            Objective::Preference(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// --------------------------------------------------------------------------
// Losses
// --------------------------------------------------------------------------

/// Mean negative log-likelihood of `targets` over rows where `mask` is set.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let rows = g.shape(logits)[0];
    ensure!(
        targets.len() == rows && mask.len() == rows,
        "cross-entropy inputs disagree: {rows} rows, {} targets, {} mask entries",
        targets.len(),
        mask.len()
    );
    let count = mask.iter().filter(|&&m| m).count();
    ensure!(count > 0, "cross-entropy mask selects no positions");
    let lp = g.log_softmax(logits);
    let picked = g.gather(lp, targets)?;
    let groups: Vec<Option<usize>> = mask.iter().map(|&m| m.then_some(0)).collect();
    let total = g.group_sum(picked, &groups, 1)?;
    Ok(g.scale(total, -1.0 / count as f32))
}

/// Value-only cross-entropy on a `[rows, vocab]` logits tensor.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f32> {
    ensure!(logits.shape().len() == 2, "logits must be rank 2, got {:?}", logits.shape());
    let mut g = Graph::new();
    let l = g.leaf(logits);
    let loss = cross_entropy_loss(&mut g, l, targets, mask)?;
    Ok(g.scalar(loss))
}

/// `-mean log sigmoid(beta * ((pc - pr) - (rc - rr)))` over a batch.
pub fn dpo_loss_graph(g: &mut Graph, policy_chosen: Var, policy_rejected: Var, ref_chosen: &[f32], ref_rejected: &[f32], beta: f32) -> Result<Var> {
    ensure!(beta > 0.0, "DPO beta must be positive, got {beta}");
    let n = g.value(policy_chosen).len();
    ensure!(
        g.value(policy_rejected).len() == n && ref_chosen.len() == n && ref_rejected.len() == n,
        "DPO inputs have mismatched batch sizes"
    );
    let ref_margin: Vec<f32> = ref_chosen.iter().zip(ref_rejected).map(|(c, r)| c - r).collect();
    let ref_margin = g.constant(&[n], ref_margin)?;
    let policy_margin = g.sub(policy_chosen, policy_rejected)?;
    let margin = g.sub(policy_margin, ref_margin)?;
    let scaled = g.scale(margin, beta);
    let ls = g.log_sigmoid(scaled);
    let total = g.sum(ls);
    Ok(g.scale(total, -1.0 / n as f32))
}

/// Value-only DPO loss.
pub fn dpo_loss(policy_chosen: &[f32], policy_rejected: &[f32], ref_chosen: &[f32], ref_rejected: &[f32], beta: f32) -> Result<f32> {
    ensure!(!policy_chosen.is_empty(), "DPO needs at least one pair");
    let mut g = Graph::new();
    let pc = g.constant(&[policy_chosen.len()], policy_chosen.to_vec())?;
    let pr = g.constant(&[policy_rejected.len()], policy_rejected.to_vec())?;
    let loss = dpo_loss_graph(&mut g, pc, pr, ref_chosen, ref_rejected, beta)?;
    Ok(g.scalar(loss))
}

/// Rows, targets and mask for next-token prediction over each example's
/// target span, in a batch right-padded to the longest sequence.
struct TokenBatch {
    seqs: Vec<Vec<usize>>,
    targets: Vec<usize>,
    mask: Vec<bool>,
    /// Per row, the example whose continuation it scores.
    groups: Vec<Option<usize>>,
}

fn token_batch<'a>(items: impl Iterator<Item = (&'a [usize], &'a [usize])>) -> Result<TokenBatch> {
    let seqs: Vec<(usize, Vec<usize>)> = items
        .map(|(p, t)| {
            ensure!(!p.is_empty() && !t.is_empty(), "examples need a nonempty prompt and target");
            Ok((p.len(), [p, t].concat()))
        })
        .collect::<Result<_>>()?;
    let width = seqs.iter().map(|(_, s)| s.len()).max().unwrap_or(1);
    let rows = seqs.len() * width;
    let mut targets = vec![0; rows];
    let mut mask = vec![false; rows];
    let mut groups = vec![None; rows];
    for (b, (plen, s)) in seqs.iter().enumerate() {
        for pos in plen - 1..s.len() - 1 {
            let r = b * width + pos;
            targets[r] = s[pos + 1];
            mask[r] = true;
            groups[r] = Some(b);
        }
    }
    Ok(TokenBatch { seqs: seqs.into_iter().map(|(_, s)| s).collect(), targets, mask, groups })
}

/// Per-example summed log-probability of each continuation, as a graph vector.
fn continuation_logprobs(g: &mut Graph, logits: Var, batch: &TokenBatch) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let picked = g.gather(lp, &batch.targets)?;
    g.group_sum(picked, &batch.groups, batch.seqs.len())
}

// --------------------------------------------------------------------------
// AdamW
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

/// Decoupled-weight-decay Adam. Parameters without a gradient are treated
/// as having a zero gradient. Fails on the first non-finite gradient.
pub fn adamw_step(params: &mut [(&str, &mut Tensor)], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    ensure!(
        state.m.len() == params.len() && state.m.iter().zip(params.iter()).all(|(m, (_, p))| m.len() == p.len()),
        "optimizer state does not match parameter shapes"
    );
    for (name, p) in params.iter() {
        if let Some(g) = p.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { param: String::from(*name), detail: "non-finite gradient".into() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::powf(cfg.adam_beta1, t as f32);
    let bc2 = 1.0 - libm::powf(cfg.adam_beta2, t as f32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            data[j] -= cfg.lr * cfg.weight_decay * data[j];
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * grad[j];
            v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * grad[j] * grad[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= cfg.lr * mh / (libm::sqrtf(vh) + cfg.adam_eps);
        }
    }
    Ok(())
}

// --------------------------------------------------------------------------
// Hooked training (scaling factors, offsets)
// --------------------------------------------------------------------------

/// Named trainable tensors for the hooked loops.
#[derive(Debug, Clone, PartialEq)]
pub struct HookParams {
    pub heads: Vec<HeadId>,
    pub tensors: Vec<Tensor>,
}

impl HookParams {
    pub fn from_map(map: &BTreeMap<HeadId, Tensor>) -> Self {
        Self { heads: map.keys().copied().collect(), tensors: map.values().cloned().collect() }
    }

    pub fn into_map(self) -> BTreeMap<HeadId, Tensor> {
        self.heads.into_iter().zip(self.tensors).collect()
    }
}

/// Which hook the parameters drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookKind {
    /// `z ← (1 + A) ⊙ z`
    Scale,
    /// `z ← z + v`
    Offset,
}

/// Installs one hook per layer built from per-head parameter leaves; heads
/// without a parameter contribute a constant (1 for scaling, 0 for offsets)
/// and therefore receive no gradient.
pub fn hooks_from_params(g: &mut Graph, model: &Model, heads: &[HeadId], vars: &[Var], kind: HookKind) -> Result<Hooks> {
    let cfg = &model.config;
    let mut hooks = Hooks::none(cfg);
    for l in 0..cfg.n_layers {
        let mut parts = Vec::with_capacity(cfg.n_heads);
        let mut any = false;
        for i in 0..cfg.n_heads {
            match heads.iter().position(|&h| h == HeadId::new(l, i)) {
                Some(idx) => {
                    parts.push(vars[idx]);
                    any = true;
                }
                None => parts.push(g.constant(&[cfg.d_head], vec![0.0; cfg.d_head])?),
            }
        }
        if !any {
            continue;
        }
        let row = g.concat(&parts)?;
        match kind {
            HookKind::Scale => hooks.layers[l].head_scale = Some(g.add_scalar(row, 1.0)),
            HookKind::Offset => hooks.layers[l].head_offset = Some(row),
        }
    }
    Ok(hooks)
}

/// Task loss for one batch of the objective, given installed hooks.
fn objective_loss(
    g: &mut Graph,
    model: &Model,
    hooks: &Hooks,
    objective: Objective<'_>,
    idx: &[usize],
    ref_cache: &[(f32, f32)],
    beta: f32,
) -> Result<Var> {
    let w = model.load(g, false);
    match objective {
        Objective::CrossEntropy(data) => {
            let batch = token_batch(idx.iter().map(|&i| (data[i].prompt.as_slice(), data[i].target.as_slice())))?;
            let refs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
            let fw = model.forward_graph(g, &w, &refs, hooks)?;
            cross_entropy_loss(g, fw.logits, &batch.targets, &batch.mask)
        }
        Objective::Preference(data) => {
            let items = idx
                .iter()
                .map(|&i| (data[i].prompt.as_slice(), data[i].chosen.as_slice()))
                .chain(idx.iter().map(|&i| (data[i].prompt.as_slice(), data[i].rejected.as_slice())));
            let batch = token_batch(items)?;
            let refs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
            let fw = model.forward_graph(g, &w, &refs, hooks)?;
            let lp = continuation_logprobs(g, fw.logits, &batch)?;
            let n = idx.len();
            let chosen = select_half(g, lp, n, 0)?;
            let rejected = select_half(g, lp, n, 1)?;
            let rc: Vec<f32> = idx.iter().map(|&i| ref_cache[i].0).collect();
            let rr: Vec<f32> = idx.iter().map(|&i| ref_cache[i].1).collect();
            dpo_loss_graph(g, chosen, rejected, &rc, &rr, beta)
        }
    }
}

/// Entries `[half*n, (half+1)*n)` of a length-`2n` vector.
fn select_half(g: &mut Graph, v: Var, n: usize, half: usize) -> Result<Var> {
    let groups: Vec<Option<usize>> = (0..2 * n).map(|i| (i / n == half).then_some(i % n)).collect();
    g.group_sum(v, &groups, n)
}

/// Reference (zero-intervention) log-probabilities of chosen and rejected
/// continuations, computed once per pair.
pub fn reference_logprobs(model: &Model, pairs: &[PreferencePair]) -> Result<Vec<(f32, f32)>> {
    pairs
        .iter()
        .map(|p| {
            let lp = model.sequence_logprobs(&p.prompt, &[&p.chosen, &p.rejected], &NoHooks)?;
            Ok((lp[0] as f32, lp[1] as f32))
        })
        .collect()
}

/// Shared loop for Step 1 (scaling) and Step 2 (offsets).
pub fn train_hook_params(
    model: &Model,
    params: &mut HookParams,
    kind: HookKind,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<f32>> {
    cfg.validate()?;
    ensure!(!objective.is_empty(), "training dataset is empty");
    ensure!(!params.heads.is_empty(), "no trainable parameters");
    let ref_cache = match objective {
        Objective::Preference(pairs) => reference_logprobs(model, pairs)?,
        Objective::CrossEntropy(_) => Vec::new(),
    };
    let mut rng = Rng::new(cfg.seed).fork(0x5EED_0001);
    let mut order: Vec<usize> = (0..objective.len()).collect();
    let mut state = OptimizerState::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let names: Vec<String> = params.heads.iter().map(|h| format!("{}.L{}H{}", kind_name(kind), h.layer, h.head)).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.tensors.iter().map(|t| g.leaf(t)).collect();
            let hooks = hooks_from_params(&mut g, model, &params.heads, &vars, kind)?;
            let task = objective_loss(&mut g, model, &hooks, objective, chunk, &ref_cache, cfg.beta)?;
            let mut loss = task;
            let mut penalty = 0.0;
            if cfg.lambda > 0.0 {
                let norms: Vec<Var> = vars.iter().map(|&v| g.l1_norm(v)).collect();
                let stacked = g.concat(&norms)?;
                let sum = g.sum(stacked);
                let pen = g.scale(sum, cfg.lambda);
                penalty = g.scalar(pen);
                loss = g.add(task, pen)?;
            }
            let task_value = g.scalar(task);
            if !task_value.is_finite() {
                return Err(Error::Divergence { param: "loss".into(), detail: format!("non-finite loss at epoch {epoch}") });
            }
            g.backward(loss)?;
            for (t, &v) in params.tensors.iter_mut().zip(&vars) {
                t.zero_grad();
                if let Some(gr) = g.grad(v) {
                    t.accumulate_grad(gr)?;
                }
            }
            let mut refs: Vec<(&str, &mut Tensor)> =
                names.iter().map(String::as_str).zip(params.tensors.iter_mut()).collect();
            adamw_step(&mut refs, &mut state, cfg)?;
            log(&StepRecord { step: state.step, epoch, loss: task_value + penalty, l1_penalty: penalty, lr: cfg.lr });
            total += task_value as f64;
            batches += 1;
        }
        epoch_losses.push((total / batches as f64) as f32);
    }
    for t in &mut params.tensors {
        t.zero_grad();
    }
    Ok(epoch_losses)
}

fn kind_name(kind: HookKind) -> &'static str {
    match kind {
        HookKind::Scale => "scale",
        HookKind::Offset => "offset",
    }
}

/// Mean task loss over a dataset with fixed hook parameters (no updates).
pub fn evaluate_hook_loss(model: &Model, params: &HookParams, kind: HookKind, objective: Objective<'_>, cfg: &TrainConfig) -> Result<f32> {
    ensure!(!objective.is_empty(), "dataset is empty");
    let ref_cache = match objective {
        Objective::Preference(pairs) => reference_logprobs(model, pairs)?,
        Objective::CrossEntropy(_) => Vec::new(),
    };
    let order: Vec<usize> = (0..objective.len()).collect();
    let mut total = 0.0f64;
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.tensors.iter().map(|t| g.leaf(t)).collect();
        let hooks = hooks_from_params(&mut g, model, &params.heads, &vars, kind)?;
        let loss = objective_loss(&mut g, model, &hooks, objective, chunk, &ref_cache, cfg.beta)?;
        total += g.scalar(loss) as f64 * chunk.len() as f64;
    }
    Ok((total / objective.len() as f64) as f32)
}

/// Full-dataset task loss (plus the L1 penalty when `lambda > 0`) and its
/// gradient with respect to each hook parameter, from one graph.
pub fn hook_loss_and_grad(
    model: &Model,
    params: &HookParams,
    kind: HookKind,
    objective: Objective<'_>,
    lambda: f32,
    beta: f32,
) -> Result<(f32, Vec<Vec<f32>>)> {
    ensure!(!objective.is_empty(), "dataset is empty");
    let ref_cache = match objective {
        Objective::Preference(pairs) => reference_logprobs(model, pairs)?,
        Objective::CrossEntropy(_) => Vec::new(),
    };
    let idx: Vec<usize> = (0..objective.len()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(&t)
        })
        .collect();
    let hooks = hooks_from_params(&mut g, model, &params.heads, &vars, kind)?;
    let mut loss = objective_loss(&mut g, model, &hooks, objective, &idx, &ref_cache, beta)?;
    if lambda > 0.0 {
        let norms: Vec<Var> = vars.iter().map(|&v| g.l1_norm(v)).collect();
        let stacked = g.concat(&norms)?;
        let sum = g.sum(stacked);
        let pen = g.scale(sum, lambda);
        loss = g.add(loss, pen)?;
    }
    g.backward(loss)?;
    let grads = vars.iter().zip(&params.tensors).map(|(&v, t)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])).collect();
    Ok((g.scalar(loss), grads))
}

/// Step 2: trains offsets for the heads in `targets` only, with the base
/// model frozen. The result applies with `alpha = 1`.
pub fn tune_biases(
    model: &Model,
    targets: &[HeadId],
    objective: Objective<'_>,
    cfg: &TrainConfig,
    sigma_v: f32,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<(OffsetParams, Vec<f32>)> {
    ensure!(!objective.is_empty(), "bias tuning dataset is empty");
    ensure!(!targets.is_empty(), "bias tuning needs at least one target head");
    let mut rng = Rng::new(cfg.seed).fork(0x0FF5_E7);
    let init = OffsetParams::init(&model.config, targets, sigma_v, &mut rng)?;
    let mut params = HookParams::from_map(&init.v);
    let no_l1 = TrainConfig { lambda: 0.0, ..cfg.clone() };
    let losses = train_hook_params(model, &mut params, HookKind::Offset, objective, &no_l1, log)?;
    Ok((OffsetParams { v: params.into_map(), sigma: sigma_v }, losses))
}

/// Result of the two-step pipeline; only `offsets` is needed at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LofitResult {
    pub targets: Vec<HeadId>,
    pub scores: crate::localize::HeadScoreTable,
    pub offsets: OffsetParams,
}

/// Step 1 (scaling factors with L1, norm scoring, top-K) then Step 2 (bias
/// tuning on the selected heads). The scaling factors are discarded.
pub fn tune_scaling_then_biases(
    model: &Model,
    objective: Objective<'_>,
    sel: &crate::localize::SelectionConfig,
    train_cfg: &TrainConfig,
    sigma_v: f32,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<LofitResult> {
    use crate::localize::{norm_scores, select_top_k, train_scaling_factors, SelectionMethod};
    sel.validate(&model.config)?;
    let a = train_scaling_factors(model, objective, sel, train_cfg, log)?;
    let scores = norm_scores(&a.a, SelectionMethod::LofitNorm)?;
    let targets = select_top_k(&scores, sel.k)?;
    let cfg = TrainConfig { seed: sel.seed, ..train_cfg.clone() };
    let (offsets, _) = tune_biases(model, &targets, objective, &cfg, sigma_v, log)?;
    Ok(LofitResult { targets, scores, offsets })
}

// --------------------------------------------------------------------------
// Full-weight pretraining of the toy base model
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Stop after this many epochs without a dev-loss improvement.
    pub patience: usize,
    pub min_delta: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { lr: 3e-3, epochs: 40, batch_size: 32, weight_decay: 0.01, ..TrainConfig::default() },
            patience: 3,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub epochs_run: usize,
    pub train_losses: Vec<f32>,
    pub dev_losses: Vec<f32>,
}

/// Mean per-token cross-entropy of a frozen model on supervised examples.
pub fn dataset_loss(model: &Model, data: &[SupervisedExample], batch_size: usize) -> Result<f32> {
    ensure!(!data.is_empty(), "dataset is empty");
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let w = model.load(&mut g, false);
        let batch = token_batch(chunk.iter().map(|e| (e.prompt.as_slice(), e.target.as_slice())))?;
        let refs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
        let fw = model.forward_graph(&mut g, &w, &refs, &Hooks::none(&model.config))?;
        let loss = cross_entropy_loss(&mut g, fw.logits, &batch.targets, &batch.mask)?;
        let n = batch.mask.iter().filter(|&&m| m).count();
        total += g.scalar(loss) as f64 * n as f64;
        count += n;
    }
    Ok((total / count as f64) as f32)
}

/// Trains every weight of `model` on `data` until the dev loss stops
/// improving for `patience` epochs or the epoch cap is reached.
pub fn pretrain(
    model: &mut Model,
    data: &[SupervisedExample],
    dev: &[SupervisedExample],
    cfg: &PretrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<PretrainSummary> {
    cfg.train.validate()?;
    ensure!(!data.is_empty(), "pretraining corpus is empty");
    ensure!(!model.frozen, "cannot pretrain a frozen model");
    let mut rng = Rng::new(cfg.train.seed).fork(0xBA5E);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = OptimizerState::default();
    let mut summary = PretrainSummary { epochs_run: 0, train_losses: Vec::new(), dev_losses: Vec::new() };
    let mut best = f32::INFINITY;
    let mut since_best = 0;
    for epoch in 0..cfg.train.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let mut g = Graph::new();
            let w = model.load(&mut g, true);
            let batch = token_batch(chunk.iter().map(|&i| (data[i].prompt.as_slice(), data[i].target.as_slice())))?;
            let refs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
            let fw = model.forward_graph(&mut g, &w, &refs, &Hooks::none(&model.config))?;
            let loss = cross_entropy_loss(&mut g, fw.logits, &batch.targets, &batch.mask)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { param: "loss".into(), detail: format!("non-finite loss at epoch {epoch}") });
            }
            g.backward(loss)?;
            let vars = w.ordered();
            let mut named = model.named_tensors_mut();
            for ((_, t), &v) in named.iter_mut().zip(&vars) {
                t.zero_grad();
                if let Some(gr) = g.grad(v) {
                    t.accumulate_grad(gr)?;
                }
            }
            let mut refs: Vec<(&str, &mut Tensor)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
            adamw_step(&mut refs, &mut state, &cfg.train)?;
            log(&StepRecord { step: state.step, epoch, loss: value, l1_penalty: 0.0, lr: cfg.train.lr });
            total += value as f64;
            batches += 1;
        }
        for (_, t) in model.named_tensors_mut() {
            t.zero_grad();
        }
        summary.epochs_run = epoch + 1;
        summary.train_losses.push((total / batches as f64) as f32);
        if dev.is_empty() {
            continue;
        }
        let dl = dataset_loss(model, dev, 64)?;
        summary.dev_losses.push(dl);
        if dl < best - cfg.min_delta {
            best = dl;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(summary)
}
