// SPDX-License-Identifier: MIT OR Apache-2.0

//! Localized interventions on attention-head activations.
//!
//! An [`InterventionSet`] names a set of target heads, an offset vector per
//! target, and a strength `alpha`; applied, it rewrites `z ← z + alpha·v` at
//! every position for each targeted head. [`ScalingParams`] rescale head
//! outputs as `z ← (1 + A) ⊙ z`. Offsets can be learned ([`OffsetParams`]) or
//! extracted without training: mean activation differences between positive
//! and negative examples, or a residual-stream [`ContrastVector`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::model::{HeadId, HookSource, Hooks, Model, ModelConfig, NoHooks};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default strength for mean-difference (ITI-style) offsets.
pub const ITI_ALPHA: f32 = 15.0;
/// Default strength for residual contrast vectors.
pub const REPE_ALPHA: f32 = 5.0;
/// Default init stddev for scaling factors and offsets.
pub const DEFAULT_SIGMA: f32 = 0.001;

/// `z + alpha * v`, elementwise.
pub fn apply_offset(z: &[f32], v: &[f32], alpha: f32) -> Result<Vec<f32>> {
    ensure!(z.len() == v.len(), "offset length {} does not match activation length {}", v.len(), z.len());
    Ok(z.iter().zip(v).map(|(a, b)| a + alpha * b).collect())
}

/// `(1 + a) * z`, elementwise.
pub fn apply_scaling(z: &[f32], a: &[f32]) -> Result<Vec<f32>> {
    ensure!(z.len() == a.len(), "scaling length {} does not match activation length {}", a.len(), z.len());
    Ok(z.iter().zip(a).map(|(x, s)| (1.0 + s) * x).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSet {
    offsets: BTreeMap<HeadId, Vec<f32>>,
    pub alpha: f32,
}

impl InterventionSet {
    pub fn empty(alpha: f32) -> Self {
        Self { offsets: BTreeMap::new(), alpha }
    }

    /// All offsets must share one length.
    pub fn new(offsets: BTreeMap<HeadId, Vec<f32>>, alpha: f32) -> Result<Self> {
        ensure!(alpha.is_finite(), "alpha must be finite");
        if let Some(len) = offsets.values().next().map(Vec::len) {
            ensure!(len > 0, "offset vectors must be nonempty");
            for (h, v) in &offsets {
                ensure!(v.len() == len, "offset for head {h} has length {}, expected {len}", v.len());
            }
        }
        Ok(Self { offsets, alpha })
    }

    /// Targets in ascending `(layer, head)` order.
    pub fn targets(&self) -> Vec<HeadId> {
        self.offsets.keys().copied().collect()
    }

    pub fn offsets(&self) -> &BTreeMap<HeadId, Vec<f32>> {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Checks every target and offset length against a model shape.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        for (&h, v) in &self.offsets {
            config.check_head(h)?;
            ensure!(
                v.len() == config.d_head,
                "offset for head {h} has length {}, model d_head is {}",
                v.len(),
                config.d_head
            );
        }
        Ok(())
    }

    /// Union of two sets with disjoint targets. Empty sets merge with any alpha.
    pub fn merge(&self, other: &InterventionSet) -> Result<InterventionSet> {
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        ensure!(
            self.alpha == other.alpha,
            "cannot merge interventions with different alpha ({} vs {})",
            self.alpha,
            other.alpha
        );
        if let Some(h) = other.offsets.keys().find(|h| self.offsets.contains_key(h)) {
            return Err(Error::Conflict(format!("head {h} is targeted by both interventions")));
        }
        let mut offsets = self.offsets.clone();
        offsets.extend(other.offsets.iter().map(|(k, v)| (*k, v.clone())));
        InterventionSet::new(offsets, self.alpha)
    }
}

/// Builds per-layer `[n_heads * d_head]` rows from per-head vectors, with
/// `fill` for heads that have none.
fn head_rows(config: &ModelConfig, per_head: impl Fn(HeadId) -> Option<Vec<f32>>, fill: f32) -> Vec<Option<Vec<f32>>> {
    (0..config.n_layers)
        .map(|l| {
            let mut row = vec![fill; config.n_heads * config.d_head];
            let mut any = false;
            for i in 0..config.n_heads {
                if let Some(v) = per_head(HeadId::new(l, i)) {
                    row[i * config.d_head..(i + 1) * config.d_head].copy_from_slice(&v);
                    any = true;
                }
            }
            any.then_some(row)
        })
        .collect()
}

impl HookSource for InterventionSet {
    fn install(&self, g: &mut Graph, config: &ModelConfig) -> Result<Hooks> {
        self.validate_for(config)?;
        let rows = head_rows(
            config,
            |h| self.offsets.get(&h).map(|v| v.iter().map(|x| self.alpha * x).collect()),
            0.0,
        );
        let mut hooks = Hooks::none(config);
        for (l, row) in rows.into_iter().enumerate() {
            if let Some(row) = row {
                hooks.layers[l].head_offset = Some(g.constant(&[row.len()], row)?);
            }
        }
        Ok(hooks)
    }
}

/// Per-head scaling factors `A`, one `[d_head]` tensor per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingParams {
    pub a: BTreeMap<HeadId, Tensor>,
    pub sigma: f32,
}

impl ScalingParams {
    /// Draws `A ~ N(0, sigma)` for every head in `(layer, head)` order.
    pub fn init(config: &ModelConfig, sigma: f32, rng: &mut Rng) -> Result<Self> {
        let mut a = BTreeMap::new();
        for h in config.all_heads() {
            a.insert(h, Tensor::randn(&[config.d_head], 0.0, sigma, rng)?.with_grad());
        }
        Ok(Self { a, sigma })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut a = BTreeMap::new();
        for h in config.all_heads() {
            a.insert(h, Tensor::zeros(&[config.d_head])?.with_grad());
        }
        Ok(Self { a, sigma: 0.0 })
    }

    /// `sum_heads ||A_head||_1`
    pub fn l1_total(&self) -> f32 {
        self.a.values().map(Tensor::l1_norm).sum()
    }
}

impl HookSource for ScalingParams {
    fn install(&self, g: &mut Graph, config: &ModelConfig) -> Result<Hooks> {
        for (&h, t) in &self.a {
            config.check_head(h)?;
            ensure!(t.len() == config.d_head, "scaling for head {h} has length {}", t.len());
        }
        let rows = head_rows(config, |h| self.a.get(&h).map(|t| t.data().iter().map(|x| 1.0 + x).collect()), 1.0);
        let mut hooks = Hooks::none(config);
        for (l, row) in rows.into_iter().enumerate() {
            if let Some(row) = row {
                hooks.layers[l].head_scale = Some(g.constant(&[row.len()], row)?);
            }
        }
        Ok(hooks)
    }
}

/// Learnable offsets `v`, one `[d_head]` tensor per targeted head.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetParams {
    pub v: BTreeMap<HeadId, Tensor>,
    pub sigma: f32,
}

impl OffsetParams {
    pub fn init(config: &ModelConfig, targets: &[HeadId], sigma: f32, rng: &mut Rng) -> Result<Self> {
        ensure!(!targets.is_empty(), "offset parameters need at least one target head");
        let mut v = BTreeMap::new();
        for &h in targets {
            config.check_head(h)?;
            ensure!(!v.contains_key(&h), "duplicate target head {h}");
            v.insert(h, Tensor::randn(&[config.d_head], 0.0, sigma, rng)?.with_grad());
        }
        Ok(Self { v, sigma })
    }

    pub fn trainable_scalars(&self) -> usize {
        self.v.values().map(Tensor::len).sum()
    }

    /// The learned offsets as an intervention applied with `alpha = 1`.
    pub fn to_intervention(&self) -> InterventionSet {
        let offsets = self.v.iter().map(|(h, t)| (*h, t.data().to_vec())).collect();
        InterventionSet { offsets, alpha: 1.0 }
    }
}

/// A positive and a negative token sequence for the same prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Last-token head activations for every positive and negative sequence,
/// computed in chunks of `chunk` sequences per forward pass.
pub fn last_token_activations(
    model: &Model,
    pairs: &[LabeledPair],
    chunk: usize,
) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<Vec<f32>>>)> {
    let pos: Vec<&[usize]> = pairs.iter().map(|p| p.positive.as_slice()).collect();
    let neg: Vec<&[usize]> = pairs.iter().map(|p| p.negative.as_slice()).collect();
    let run = |seqs: &[&[usize]]| -> Result<Vec<Vec<Vec<f32>>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for c in seqs.chunks(chunk.max(1)) {
            out.extend(model.last_token_heads(c, &NoHooks)?);
        }
        Ok(out)
    };
    Ok((run(&pos)?, run(&neg)?))
}

/// Mean-difference offsets: for each target head, the mean last-token
/// activation over positives minus the mean over negatives.
pub fn extract_iti_offsets(model: &Model, pairs: &[LabeledPair], targets: &[HeadId], alpha: f32) -> Result<InterventionSet> {
    ensure!(!pairs.is_empty(), "mean-difference extraction needs at least one pair");
    ensure!(!targets.is_empty(), "mean-difference extraction needs at least one target head");
    for &h in targets {
        model.config.check_head(h)?;
    }
    let (pos, neg) = last_token_activations(model, pairs, 32)?;
    let dh = model.config.d_head;
    let n = pairs.len() as f64;
    let mut offsets = BTreeMap::new();
    for &h in targets {
        let span = h.head * dh..(h.head + 1) * dh;
        let mut diff = vec![0.0f64; dh];
        for (p, q) in pos.iter().zip(&neg) {
            for (j, (a, b)) in p[h.layer][span.clone()].iter().zip(&q[h.layer][span.clone()]).enumerate() {
                diff[j] += (*a as f64 - *b as f64) / n;
            }
        }
        offsets.insert(h, diff.into_iter().map(|x| x as f32).collect());
    }
    InterventionSet::new(offsets, alpha)
}

/// A residual-stream direction added (times `alpha`) to the input of `layer`
/// at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastVector {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub alpha: f32,
}

/// Residual `h^layer` at the last token of `positive` minus that of `negative`.
pub fn extract_contrast_vector(model: &Model, positive: &[usize], negative: &[usize], layer: usize, alpha: f32) -> Result<ContrastVector> {
    ensure!(
        layer < model.config.n_layers,
        "layer {layer} out of range for a {}-layer model",
        model.config.n_layers
    );
    let a = model.forward(positive, &NoHooks, true)?;
    let b = model.forward(negative, &NoHooks, true)?;
    let va = a.residuals[layer].row(positive.len() - 1);
    let vb = b.residuals[layer].row(negative.len() - 1);
    Ok(ContrastVector { layer, vector: va.iter().zip(vb).map(|(x, y)| x - y).collect(), alpha })
}

impl HookSource for ContrastVector {
    fn install(&self, g: &mut Graph, config: &ModelConfig) -> Result<Hooks> {
        ensure!(self.layer < config.n_layers, "contrast layer {} out of range", self.layer);
        ensure!(
            self.vector.len() == config.d_model,
            "contrast vector length {} does not match d_model {}",
            self.vector.len(),
            config.d_model
        );
        let mut hooks = Hooks::none(config);
        let row = self.vector.iter().map(|x| self.alpha * x).collect();
        hooks.layers[self.layer].residual_add = Some(g.constant(&[config.d_model], row)?);
        Ok(hooks)
    }
}
