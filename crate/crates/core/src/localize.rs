// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head selection (scaling-factor norms and the baselines) and head-set
//! analysis: Jaccard overlap, layer distributions, EMD, logit lens.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::graph::sigmoid;
use crate::intervene::{last_token_activations, LabeledPair, ScalingParams, DEFAULT_SIGMA};
use crate::model::{HeadId, Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{train_hook_params, tune_biases, HookKind, HookParams, Objective, StepRecord, TrainConfig};

pub const PROBE_L2: f64 = 1e-3;
pub const PROBE_ITERS: usize = 200;
pub const PROBE_LR: f64 = 0.1;
/// Fraction of pairs (taken from the end) held out to score probes.
pub const PROBE_VAL_FRACTION: f64 = 0.2;
pub const LOGIT_LENS_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SelectionMethod {
    LofitNorm,
    BiasNorm,
    ItiProbe,
    LayerProbe,
    Random,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 5] = [
        SelectionMethod::LofitNorm,
        SelectionMethod::BiasNorm,
        SelectionMethod::ItiProbe,
        SelectionMethod::LayerProbe,
        SelectionMethod::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::LofitNorm => "lofit_norm",
            SelectionMethod::BiasNorm => "bias_norm",
            SelectionMethod::ItiProbe => "iti_probe",
            SelectionMethod::LayerProbe => "layer_probe",
            SelectionMethod::Random => "random",
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    /// Accepts the canonical names plus the short forms `lofit`, `bias`, `iti`.
    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "lofit" => SelectionMethod::LofitNorm,
            "bias" => SelectionMethod::BiasNorm,
            "iti" => SelectionMethod::ItiProbe,
            _ => *SelectionMethod::ALL
                .iter()
                .find(|m| m.name() == s)
                .ok_or_else(|| Error::invalid(format!("unknown selection method {s:?}")))?,
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreTable {
    pub scores: BTreeMap<HeadId, f64>,
    pub method: SelectionMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub k: usize,
    pub lambda: f32,
    pub sigma_a: f32,
    pub seed: u64,
    /// Learning rate for the scaling-factor step.
    pub lr: f32,
}

impl SelectionConfig {
    pub fn new(k: usize, lambda: f32, seed: u64) -> Self {
        Self { k, lambda, sigma_a: DEFAULT_SIGMA, seed, lr: 5e-3 }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        ensure!(self.k >= 1, "K must be positive");
        ensure!(self.k <= config.total_heads(), "K = {} exceeds the {} heads of the model", self.k, config.total_heads());
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be >= 0, got {}", self.lambda);
        ensure!(self.sigma_a >= 0.0, "sigma_A must be >= 0, got {}", self.sigma_a);
        Ok(())
    }
}

/// Number of heads for a percentage of the model. Models with at least 256
/// heads round to the nearest multiple of 16 (32 for 3% of 1024 heads);
/// smaller models round to the nearest integer, with a floor of one head.
pub fn k_from_percent(config: &ModelConfig, percent: f64) -> Result<usize> {
    ensure!(percent > 0.0 && percent <= 100.0, "head percentage must be in (0, 100], got {percent}");
    let total = config.total_heads();
    let raw = percent / 100.0 * total as f64;
    let k = if total >= 256 { libm::round(raw / 16.0) as usize * 16 } else { libm::round(raw) as usize };
    Ok(k.clamp(1, total))
}

/// `K × d_head`, the number of learned scalars shipped by bias tuning.
pub fn param_count(k: usize, d_head: usize) -> usize {
    k * d_head
}

// --------------------------------------------------------------------------
// Scoring and selection
// --------------------------------------------------------------------------

/// L2 norm of each head's parameter vector.
pub fn norm_scores(params: &BTreeMap<HeadId, Tensor>, method: SelectionMethod) -> Result<HeadScoreTable> {
    let scores: BTreeMap<HeadId, f64> = params.iter().map(|(&h, t)| (h, t.l2_norm() as f64)).collect();
    ensure!(scores.values().all(|s| s.is_finite()), "non-finite head score");
    Ok(HeadScoreTable { scores, method })
}

/// Top `k` heads by score, ties broken by ascending `(layer, head)`;
/// returned in `(layer, head)` order.
pub fn select_top_k(table: &HeadScoreTable, k: usize) -> Result<Vec<HeadId>> {
    ensure!(k >= 1, "K must be positive");
    ensure!(k <= table.scores.len(), "K = {k} exceeds the {} scored heads", table.scores.len());
    let mut ranked: Vec<(HeadId, f64)> = table.scores.iter().map(|(&h, &s)| (h, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<HeadId> = ranked[..k].iter().map(|(h, _)| *h).collect();
    out.sort();
    Ok(out)
}

/// `k` heads drawn uniformly without replacement.
pub fn random_heads(config: &ModelConfig, k: usize, seed: u64) -> Result<Vec<HeadId>> {
    let total = config.total_heads();
    ensure!(k >= 1 && k <= total, "K = {k} must be in 1..={total}");
    let mut rng = Rng::new(seed).fork(0x7A4D);
    let mut out: Vec<HeadId> = rng
        .sample_without_replacement(total, k)
        .into_iter()
        .map(|i| HeadId::new(i / config.n_heads, i % config.n_heads))
        .collect();
    out.sort();
    Ok(out)
}

/// Step 1: trains `1 + A` scalings on every head, with an L1 penalty of
/// weight `lambda`, while the base model stays frozen.
pub fn train_scaling_factors(
    model: &Model,
    objective: Objective<'_>,
    sel: &SelectionConfig,
    train_cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<ScalingParams> {
    ensure!(sel.lambda >= 0.0, "lambda must be >= 0, got {}", sel.lambda);
    ensure!(!objective.is_empty(), "scaling-factor dataset is empty");
    let mut rng = Rng::new(sel.seed).fork(0x5CA1E);
    let init = ScalingParams::init(&model.config, sel.sigma_a, &mut rng)?;
    let mut params = HookParams::from_map(&init.a);
    let cfg = TrainConfig { lr: sel.lr, lambda: sel.lambda, seed: sel.seed, ..train_cfg.clone() };
    train_hook_params(model, &mut params, HookKind::Scale, objective, &cfg, log)?;
    Ok(ScalingParams { a: params.into_map(), sigma: sel.sigma_a })
}

/// Bias-based baseline: tunes offsets on every head and scores by norm.
pub fn bias_norm_scores(
    model: &Model,
    objective: Objective<'_>,
    train_cfg: &TrainConfig,
    sigma_v: f32,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<HeadScoreTable> {
    let all: Vec<HeadId> = model.config.all_heads().collect();
    let (offsets, _) = tune_biases(model, &all, objective, train_cfg, sigma_v, log)?;
    norm_scores(&offsets.v, SelectionMethod::BiasNorm)
}

// --------------------------------------------------------------------------
// Probes
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub val_accuracy: f64,
}

impl ProbeModel {
    pub fn probability(&self, x: &[f32]) -> f64 {
        let z: f64 = self.weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + self.bias;
        sigmoid(z as f32) as f64
    }

    pub fn predict(&self, x: &[f32]) -> bool {
        self.probability(x) >= 0.5
    }

    pub fn accuracy(&self, xs: &[Vec<f32>], ys: &[bool]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count() as f64 / xs.len() as f64
    }
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the mean logistic loss plus
/// `PROBE_L2 / 2 · ‖w‖²`, from zero weights.
pub fn fit_logistic(xs: &[Vec<f32>], ys: &[bool]) -> Result<(Vec<f64>, f64)> {
    ensure!(!xs.is_empty() && xs.len() == ys.len(), "probe needs matching nonempty features and labels");
    let positives = ys.iter().filter(|&&y| y).count();
    if positives == 0 || positives == ys.len() {
        return Err(Error::DegenerateData(format!("probe training labels are single-class ({positives} of {} positive)", ys.len())));
    }
    let dim = xs[0].len();
    ensure!(xs.iter().all(|x| x.len() == dim), "probe features have inconsistent lengths");
    let n = xs.len() as f64;
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut gw = vec![0.0f64; dim];
    for _ in 0..PROBE_ITERS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = w.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + b;
            let err = sigmoid64(z) - if y { 1.0 } else { 0.0 };
            for (g, &v) in gw.iter_mut().zip(x) {
                *g += err * v as f64;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * (g / n + PROBE_L2 * *wi);
        }
        b -= PROBE_LR * gb / n;
    }
    Ok((w, b))
}

/// Fits on `train` and reports accuracy on `val`.
pub fn fit_probe(train_x: &[Vec<f32>], train_y: &[bool], val_x: &[Vec<f32>], val_y: &[bool]) -> Result<ProbeModel> {
    let (weights, bias) = fit_logistic(train_x, train_y)?;
    let mut p = ProbeModel { weights, bias, val_accuracy: 0.0 };
    p.val_accuracy = p.accuracy(val_x, val_y);
    Ok(p)
}

/// Per-pair features (positive, negative); the last `PROBE_VAL_FRACTION`
/// of pairs form the validation split.
fn probe_split(n_pairs: usize) -> Result<usize> {
    ensure!(n_pairs >= 2, "probing needs at least 2 labeled pairs, got {n_pairs}");
    let n_val = libm::round(n_pairs as f64 * PROBE_VAL_FRACTION) as usize;
    Ok(n_pairs - n_val.clamp(1, n_pairs - 1))
}

fn probe_dataset<'a>(
    pos: &'a [Vec<f32>],
    neg: &'a [Vec<f32>],
    range: core::ops::Range<usize>,
) -> (Vec<Vec<f32>>, Vec<bool>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in range {
        xs.push(pos[i].clone());
        ys.push(true);
        xs.push(neg[i].clone());
        ys.push(false);
    }
    (xs, ys)
}

/// Fits a probe per feature group: `features[group][pair]` for positives
/// and negatives.
pub fn probes_from_features(pos: &[Vec<Vec<f32>>], neg: &[Vec<Vec<f32>>]) -> Result<Vec<ProbeModel>> {
    ensure!(pos.len() == neg.len(), "positive and negative feature groups differ");
    pos.iter()
        .zip(neg)
        .map(|(p, q)| {
            ensure!(p.len() == q.len(), "positive and negative pair counts differ");
            let split = probe_split(p.len())?;
            let (tx, ty) = probe_dataset(p, q, 0..split);
            let (vx, vy) = probe_dataset(p, q, split..p.len());
            fit_probe(&tx, &ty, &vx, &vy)
        })
        .collect()
}

/// Per-head probes on last-token activations `z^(l,i)`.
pub fn train_head_probes(model: &Model, pairs: &[LabeledPair]) -> Result<BTreeMap<HeadId, ProbeModel>> {
    let (pos, neg) = last_token_activations(model, pairs, 32)?;
    let cfg = &model.config;
    let dh = cfg.d_head;
    let heads: Vec<HeadId> = cfg.all_heads().collect();
    let slice = |acts: &[Vec<Vec<f32>>], h: HeadId| -> Vec<Vec<f32>> {
        acts.iter().map(|a| a[h.layer][h.head * dh..(h.head + 1) * dh].to_vec()).collect()
    };
    let pf: Vec<Vec<Vec<f32>>> = heads.iter().map(|&h| slice(&pos, h)).collect();
    let nf: Vec<Vec<Vec<f32>>> = heads.iter().map(|&h| slice(&neg, h)).collect();
    Ok(heads.into_iter().zip(probes_from_features(&pf, &nf)?).collect())
}

/// Per-layer probes on the concatenation of all head activations.
pub fn train_layer_probes(model: &Model, pairs: &[LabeledPair]) -> Result<Vec<ProbeModel>> {
    let (pos, neg) = last_token_activations(model, pairs, 32)?;
    let by_layer = |acts: &[Vec<Vec<f32>>], l: usize| -> Vec<Vec<f32>> { acts.iter().map(|a| a[l].clone()).collect() };
    let pf: Vec<_> = (0..model.config.n_layers).map(|l| by_layer(&pos, l)).collect();
    let nf: Vec<_> = (0..model.config.n_layers).map(|l| by_layer(&neg, l)).collect();
    probes_from_features(&pf, &nf)
}

pub fn probe_scores(probes: &BTreeMap<HeadId, ProbeModel>) -> HeadScoreTable {
    HeadScoreTable { scores: probes.iter().map(|(&h, p)| (h, p.val_accuracy)).collect(), method: SelectionMethod::ItiProbe }
}

/// Every head scored by its layer's probe accuracy.
pub fn layer_probe_scores(config: &ModelConfig, probes: &[ProbeModel]) -> Result<HeadScoreTable> {
    ensure!(probes.len() == config.n_layers, "expected {} layer probes, got {}", config.n_layers, probes.len());
    let scores = config.all_heads().map(|h| (h, probes[h.layer].val_accuracy)).collect();
    Ok(HeadScoreTable { scores, method: SelectionMethod::LayerProbe })
}

/// Best layer by validation accuracy, lowest index on ties.
pub fn best_layer(probes: &[ProbeModel]) -> Result<usize> {
    ensure!(!probes.is_empty(), "no layer probes");
    let mut best = 0;
    for (l, p) in probes.iter().enumerate() {
        if p.val_accuracy > probes[best].val_accuracy {
            best = l;
        }
    }
    Ok(best)
}

pub fn layer_heads(config: &ModelConfig, layer: usize) -> Result<Vec<HeadId>> {
    ensure!(layer < config.n_layers, "layer {layer} out of range");
    Ok((0..config.n_heads).map(|h| HeadId::new(layer, h)).collect())
}

// --------------------------------------------------------------------------
// Head-set analysis
// --------------------------------------------------------------------------

/// `|T_i ∩ T_j| / |T_i|`, asymmetric in its arguments.
pub fn jaccard(ti: &[HeadId], tj: &[HeadId]) -> Result<f64> {
    let a: BTreeSet<HeadId> = ti.iter().copied().collect();
    ensure!(!a.is_empty(), "Jaccard overlap needs a nonempty first set");
    let b: BTreeSet<HeadId> = tj.iter().copied().collect();
    Ok(a.intersection(&b).count() as f64 / a.len() as f64)
}

/// Fraction of selected heads in each layer.
pub fn layer_distribution(t: &[HeadId], n_layers: usize) -> Result<Vec<f64>> {
    ensure!(!t.is_empty(), "layer distribution needs a nonempty head set");
    let mut counts = vec![0usize; n_layers];
    for h in t {
        ensure!(h.layer < n_layers, "head {h} outside a {n_layers}-layer model");
        counts[h.layer] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / t.len() as f64).collect())
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    ensure!(!p.is_empty(), "{name} is empty");
    ensure!(p.iter().all(|&x| x >= 0.0 && x.is_finite()), "{name} has a negative or non-finite entry");
    let s: f64 = p.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-6, "{name} sums to {s}, not 1");
    Ok(())
}

/// One-dimensional earth mover's distance with ground distance `|l1 - l2|`.
pub fn emd(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure!(p.len() == q.len(), "distributions have different lengths {} and {}", p.len(), q.len());
    check_distribution(p, "first distribution")?;
    check_distribution(q, "second distribution")?;
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        total += f64::abs(cp - cq);
    }
    // The last CDF difference is zero up to rounding.
    Ok(total - f64::abs(cp - cq))
}

/// Projects an offset through a head's `W^O` slice (`[d_head, d]`) and the
/// unembedding (`[d, vocab]`), and returns the `top_k` tokens by softmax
/// probability, ties by token id.
pub fn logit_lens(v: &[f32], w_o_slice: &Tensor, unembed: &Tensor, top_k: usize) -> Result<Vec<(usize, f64)>> {
    let (dh, d) = match w_o_slice.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::invalid(format!("W^O slice must be rank 2, got {s:?}"))),
    };
    ensure!(v.len() == dh, "offset length {} does not match W^O slice rows {dh}", v.len());
    ensure!(unembed.shape().len() == 2 && unembed.shape()[0] == d, "unembedding shape {:?} does not match d = {d}", unembed.shape());
    let vocab = unembed.shape()[1];
    ensure!(top_k <= vocab, "top_k = {top_k} exceeds vocabulary size {vocab}");
    let mut resid = vec![0.0f64; d];
    for (i, &vi) in v.iter().enumerate() {
        for (j, r) in resid.iter_mut().enumerate() {
            *r += vi as f64 * w_o_slice.data()[i * d + j] as f64;
        }
    }
    let mut logits = vec![0.0f64; vocab];
    for (j, &r) in resid.iter().enumerate() {
        for (t, l) in logits.iter_mut().enumerate() {
            *l += r * unembed.data()[j * vocab + t] as f64;
        }
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let z: f64 = exps.iter().sum();
    let mut ranked: Vec<(usize, f64)> = exps.into_iter().map(|e| e / z).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    Ok(ranked)
}

/// [`logit_lens`] for one head of `model`.
pub fn logit_lens_for_head(model: &Model, head: HeadId, v: &[f32], top_k: usize) -> Result<Vec<(usize, f64)>> {
    model.config.check_head(head)?;
    let cfg = &model.config;
    let rows = &model.layers[head.layer].w_o.data()[head.head * cfg.d_head * cfg.d_model..(head.head + 1) * cfg.d_head * cfg.d_model];
    let slice = Tensor::new(&[cfg.d_head, cfg.d_model], rows.to_vec())?;
    logit_lens(v, &slice, &model.unembed, top_k)
}
