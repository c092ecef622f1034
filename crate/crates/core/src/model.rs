// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer with per-head hook points.
//!
//! Each block computes
//!
//! ```text
//! a   = W_O · concat(z^(l,1), ..., z^(l,H))        z = per-head attention output
//! h'  = h + a
//! h^{l+1} = h' + MLP(h')
//! ```
//!
//! with RMS normalization at the input of the attention and MLP sublayers.
//! Hooks act on the concatenated head activations after attention and before
//! the `W_O` projection, so an offset or scaling for head `(l, i)` touches
//! exactly the slice `[i*d_head, (i+1)*d_head)` of that vector, at every
//! position. A residual hook adds a vector to the block input.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Derives `d_head = d_model / n_heads`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_seq: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        ensure!(n_heads > 0, "n_heads must be positive");
        ensure!(d_model % n_heads == 0, "d_model {d_model} is not divisible by n_heads {n_heads}");
        let cfg = Self { n_layers, n_heads, d_model, d_head: d_model / n_heads, vocab_size, max_seq, mlp_hidden };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_layers > 0 && self.n_heads > 0 && self.d_model > 0 && self.d_head > 0,
            "model dimensions must be positive: {self:?}"
        );
        ensure!(self.vocab_size > 0 && self.mlp_hidden > 0, "vocab_size and mlp_hidden must be positive");
        ensure!(
            self.d_model == self.n_heads * self.d_head,
            "d_model {} must equal n_heads {} x d_head {}",
            self.d_model,
            self.n_heads,
            self.d_head
        );
        ensure!(self.max_seq >= 2, "max_seq must be at least 2, got {}", self.max_seq);
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Every head in ascending `(layer, head)` order.
    pub fn all_heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
    }

    pub fn check_head(&self, id: HeadId) -> Result<()> {
        ensure!(
            id.layer < self.n_layers && id.head < self.n_heads,
            "head {id} out of range for a {}x{} model",
            self.n_layers,
            self.n_heads
        );
        Ok(())
    }
}

/// An attention head, 0-based `(layer, head)`. Orders by layer, then head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[n_heads * d_head, d_model]`
    pub w_o: Tensor,
    pub mlp_norm: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// `[d_model, vocab_size]`
    pub unembed: Tensor,
    /// Frozen models never put their own weights on a graph as trainable.
    pub frozen: bool,
}

/// Per-layer hook variables living on a graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerHooks {
    /// `[n_heads * d_head]` multiplier applied to the concatenated head outputs.
    pub head_scale: Option<Var>,
    /// `[n_heads * d_head]` offset added to the concatenated head outputs.
    pub head_offset: Option<Var>,
    /// `[d_model]` vector added to the block input (residual stream).
    pub residual_add: Option<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct Hooks {
    pub layers: Vec<LayerHooks>,
}

impl Hooks {
    pub fn none(config: &ModelConfig) -> Self {
        Self { layers: vec![LayerHooks::default(); config.n_layers] }
    }

    pub fn is_empty(&self) -> bool {
        self.layers
            .iter()
            .all(|h| h.head_scale.is_none() && h.head_offset.is_none() && h.residual_add.is_none())
    }
}

/// Anything that can place hooks on a graph: learning-free interventions,
/// contrast vectors, or nothing at all.
pub trait HookSource {
    fn install(&self, g: &mut Graph, config: &ModelConfig) -> Result<Hooks>;
}

impl<T: HookSource + ?Sized> HookSource for &T {
    fn install(&self, g: &mut Graph, config: &ModelConfig) -> Result<Hooks> {
        (**self).install(g, config)
    }
}

/// The no-op hook source.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl HookSource for NoHooks {
    fn install(&self, _g: &mut Graph, config: &ModelConfig) -> Result<Hooks> {
        Ok(Hooks::none(config))
    }
}

/// Model weights placed on a graph.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub mlp_norm: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Graph handles produced by one batched forward pass. All `[rows, ..]`
/// tensors use `rows = batch * seq` with sequences right-padded to `seq`.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub batch: usize,
    pub seq: usize,
    /// `[rows, vocab]`
    pub logits: Var,
    /// Block inputs `h^0 .. h^L`, each `[rows, d_model]` (`L + 1` entries).
    pub residuals: Vec<Var>,
    /// Concatenated head activations entering `W_O`, per layer `[rows, n_heads * d_head]`.
    pub head_concat: Vec<Var>,
    /// Attention sublayer outputs, per layer `[rows, d_model]`.
    pub attn_out: Vec<Var>,
    /// MLP sublayer outputs, per layer `[rows, d_model]`.
    pub mlp_out: Vec<Var>,
}

impl GraphForward {
    pub fn row(&self, batch_index: usize, position: usize) -> usize {
        batch_index * self.seq + position
    }
}

/// Materialized forward pass for a single sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[seq, vocab]`
    pub logits: Tensor,
    /// `z^(l,i)` as `[seq, d_head]`; empty unless tracing was requested.
    pub head_activations: BTreeMap<HeadId, Tensor>,
    /// `h^0 .. h^L` as `[seq, d_model]`; empty unless tracing was requested.
    pub residuals: Vec<Tensor>,
    pub attn_out: Vec<Tensor>,
    pub mlp_out: Vec<Tensor>,
}

fn init(shape: &[usize], std: f32, rng: &mut Rng) -> Result<Tensor> {
    Tensor::randn(shape, 0.0, std, rng)
}

impl Model {
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hd = config.n_heads * config.d_head;
        let attn_std = 1.0 / libm::sqrtf(d as f32);
        let resid_std = attn_std / libm::sqrtf(2.0 * config.n_layers as f32);
        let layers = (0..config.n_layers)
            .map(|_| {
                Ok(LayerWeights {
                    attn_norm: Tensor::filled(&[d], 1.0)?,
                    w_q: init(&[d, hd], attn_std, rng)?,
                    w_k: init(&[d, hd], attn_std, rng)?,
                    w_v: init(&[d, hd], attn_std, rng)?,
                    w_o: init(&[hd, d], resid_std, rng)?,
                    mlp_norm: Tensor::filled(&[d], 1.0)?,
                    w_in: init(&[d, config.mlp_hidden], attn_std, rng)?,
                    b_in: Tensor::zeros(&[config.mlp_hidden])?,
                    w_out: init(&[config.mlp_hidden, d], 1.0 / libm::sqrtf(config.mlp_hidden as f32) / libm::sqrtf(2.0 * config.n_layers as f32), rng)?,
                    b_out: Tensor::zeros(&[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tok_embed: init(&[config.vocab_size, d], 1.0, rng)?,
            pos_embed: init(&[config.max_seq, d], 0.5, rng)?,
            layers,
            final_norm: Tensor::filled(&[d], 1.0)?,
            unembed: init(&[d, config.vocab_size], attn_std, rng)?,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Every weight tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_embed".into(), &self.tok_embed), ("pos_embed".into(), &self.pos_embed)];
        for (l, w) in self.layers.iter().enumerate() {
            for (name, t) in w.fields() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("tok_embed".into(), &mut self.tok_embed), ("pos_embed".into(), &mut self.pos_embed)];
        for (l, w) in self.layers.iter_mut().enumerate() {
            for (name, t) in w.fields_mut() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    /// Rebuilds a model from named tensors; every expected name must be present
    /// with the shape the config implies.
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut model = Model::build(config, &mut Rng::new(0))?;
        for (name, slot) in model.named_tensors_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| crate::Error::invalid(format!("missing tensor `{name}`")))?;
            ensure!(
                t.shape() == slot.shape(),
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            );
            *slot = t;
        }
        ensure!(tensors.is_empty(), "unexpected tensors: {:?}", tensors.keys().collect::<Vec<_>>());
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places the weights on `g`; they are trainable iff `trainable` and the
    /// model is not frozen.
    pub fn load(&self, g: &mut Graph, trainable: bool) -> WeightVars {
        let train = trainable && !self.frozen;
        let mut put = |t: &Tensor| {
            if train {
                let mut t = t.clone();
                t.requires_grad = true;
                g.leaf(&t)
            } else {
                g.constant(t.shape(), t.data().to_vec()).expect("weights have valid shapes")
            }
        };
        let tok_embed = put(&self.tok_embed);
        let pos_embed = put(&self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|w| LayerVars {
                attn_norm: put(&w.attn_norm),
                w_q: put(&w.w_q),
                w_k: put(&w.w_k),
                w_v: put(&w.w_v),
                w_o: put(&w.w_o),
                mlp_norm: put(&w.mlp_norm),
                w_in: put(&w.w_in),
                b_in: put(&w.b_in),
                w_out: put(&w.w_out),
                b_out: put(&w.b_out),
            })
            .collect();
        let final_norm = put(&self.final_norm);
        let unembed = put(&self.unembed);
        WeightVars { tok_embed, pos_embed, layers, final_norm, unembed }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        ensure!(!tokens.is_empty(), "token sequence is empty");
        ensure!(
            tokens.len() <= self.config.max_seq,
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            self.config.max_seq
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(crate::Error::invalid(format!(
                "token id {bad} out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Batched forward on a graph. Sequences are right-padded with token 0;
    /// causal masking keeps padding from influencing real positions.
    pub fn forward_graph(&self, g: &mut Graph, w: &WeightVars, seqs: &[&[usize]], hooks: &Hooks) -> Result<GraphForward> {
        ensure!(!seqs.is_empty(), "forward needs at least one sequence");
        for s in seqs {
            self.check_tokens(s)?;
        }
        let cfg = &self.config;
        ensure!(
            hooks.layers.is_empty() || hooks.layers.len() == cfg.n_layers,
            "hooks cover {} layers, model has {}",
            hooks.layers.len(),
            cfg.n_layers
        );
        let batch = seqs.len();
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(batch * seq);
        let mut pos = Vec::with_capacity(batch * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(core::iter::repeat(0).take(seq - s.len()));
            pos.extend(0..seq);
        }
        let tok = g.embed(w.tok_embed, &ids)?;
        let p = g.embed(w.pos_embed, &pos)?;
        let mut h = g.add(tok, p)?;

        let scale = 1.0 / libm::sqrtf(cfg.d_head as f32);
        let mut residuals = Vec::with_capacity(cfg.n_layers + 1);
        let mut head_concat = Vec::with_capacity(cfg.n_layers);
        let mut attn_out = Vec::with_capacity(cfg.n_layers);
        let mut mlp_out = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let hk = hooks.layers.get(l).copied().unwrap_or_default();
            if let Some(r) = hk.residual_add {
                h = g.add_row(h, r)?;
            }
            residuals.push(h);

            let x = g.rms_norm(h, lw.attn_norm, RMS_EPS)?;
            let q = g.matmul(x, lw.w_q)?;
            let k = g.matmul(x, lw.w_k)?;
            let v = g.matmul(x, lw.w_v)?;
            let q = g.split_heads(q, batch, seq, cfg.n_heads)?;
            let k = g.split_heads(k, batch, seq, cfg.n_heads)?;
            let v = g.split_heads(v, batch, seq, cfg.n_heads)?;
            let scores = g.matmul_ex(q, k, true)?;
            let scores = g.scale(scores, scale);
            let scores = g.causal_mask(scores)?;
            let probs = g.softmax(scores);
            let ctx = g.matmul(probs, v)?;
            let mut z = g.merge_heads(ctx, batch, cfg.n_heads)?;
            if let Some(s) = hk.head_scale {
                z = g.mul_row(z, s)?;
            }
            if let Some(o) = hk.head_offset {
                z = g.add_row(z, o)?;
            }
            head_concat.push(z);
            let a = g.matmul(z, lw.w_o)?;
            attn_out.push(a);
            let mid = g.add(h, a)?;

            let x = g.rms_norm(mid, lw.mlp_norm, RMS_EPS)?;
            let u = g.matmul(x, lw.w_in)?;
            let u = g.add_row(u, lw.b_in)?;
            let u = g.relu(u);
            let m = g.matmul(u, lw.w_out)?;
            let m = g.add_row(m, lw.b_out)?;
            mlp_out.push(m);
            h = g.add(mid, m)?;
        }
        residuals.push(h);
        let x = g.rms_norm(h, w.final_norm, RMS_EPS)?;
        let logits = g.matmul(x, w.unembed)?;
        Ok(GraphForward { batch, seq, logits, residuals, head_concat, attn_out, mlp_out })
    }

    /// Single-sequence forward. With `trace` the per-head activations,
    /// residual stream, and sublayer outputs are materialized too.
    pub fn forward(&self, tokens: &[usize], hooks: &dyn HookSource, trace: bool) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let w = self.load(&mut g, false);
        let hk = hooks.install(&mut g, &self.config)?;
        let fw = self.forward_graph(&mut g, &w, &[tokens], &hk)?;
        let mut out = ForwardTrace {
            logits: g.to_tensor(fw.logits),
            head_activations: BTreeMap::new(),
            residuals: Vec::new(),
            attn_out: Vec::new(),
            mlp_out: Vec::new(),
        };
        if trace {
            let (t, dh) = (tokens.len(), self.config.d_head);
            for (l, &z) in fw.head_concat.iter().enumerate() {
                let zv = g.value(z);
                let width = self.config.n_heads * dh;
                for i in 0..self.config.n_heads {
                    let mut data = Vec::with_capacity(t * dh);
                    for pos in 0..t {
                        data.extend_from_slice(&zv[pos * width + i * dh..pos * width + (i + 1) * dh]);
                    }
                    out.head_activations.insert(HeadId::new(l, i), Tensor::new(&[t, dh], data)?);
                }
            }
            out.residuals = fw.residuals.iter().map(|&v| g.to_tensor(v)).collect();
            out.attn_out = fw.attn_out.iter().map(|&v| g.to_tensor(v)).collect();
            out.mlp_out = fw.mlp_out.iter().map(|&v| g.to_tensor(v)).collect();
        }
        Ok(out)
    }

    /// Last-position activations of every head for each sequence, as
    /// `out[seq_index][layer]` = concatenated `[n_heads * d_head]` vector.
    pub fn last_token_heads(&self, seqs: &[&[usize]], hooks: &dyn HookSource) -> Result<Vec<Vec<Vec<f32>>>> {
        let mut g = Graph::new();
        let w = self.load(&mut g, false);
        let hk = hooks.install(&mut g, &self.config)?;
        let fw = self.forward_graph(&mut g, &w, seqs, &hk)?;
        let width = self.config.n_heads * self.config.d_head;
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(b, s)| {
                let r = fw.row(b, s.len() - 1);
                fw.head_concat.iter().map(|&z| g.value(z)[r * width..(r + 1) * width].to_vec()).collect()
            })
            .collect())
    }

    /// Greedy decoding. The hooks are re-installed for every step, so an
    /// intervention applies at every position of every decoding step. The
    /// returned continuation excludes the end token.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        hooks: &dyn HookSource,
        max_new: usize,
        end_token: Option<usize>,
    ) -> Result<Vec<usize>> {
        ensure!(!prompt.is_empty(), "prompt is empty");
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.max_seq {
                break;
            }
            let mut g = Graph::new();
            let w = self.load(&mut g, false);
            let hk = hooks.install(&mut g, &self.config)?;
            let fw = self.forward_graph(&mut g, &w, &[&seq], &hk)?;
            let v = self.config.vocab_size;
            let last = &g.value(fw.logits)[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(last);
            if Some(next) == end_token {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// `sum_t log p(continuation_t | prompt, continuation_<t)`.
    pub fn sequence_logprob(&self, prompt: &[usize], continuation: &[usize], hooks: &dyn HookSource) -> Result<f64> {
        Ok(self.sequence_logprobs(prompt, &[continuation], hooks)?[0])
    }

    /// Scores several continuations of one prompt in a single batched pass.
    pub fn sequence_logprobs(&self, prompt: &[usize], continuations: &[&[usize]], hooks: &dyn HookSource) -> Result<Vec<f64>> {
        ensure!(!prompt.is_empty(), "prompt is empty");
        ensure!(!continuations.is_empty(), "no continuations to score");
        ensure!(continuations.iter().all(|c| !c.is_empty()), "continuation is empty");
        let full: Vec<Vec<usize>> = continuations.iter().map(|c| [prompt, c].concat()).collect();
        let refs: Vec<&[usize]> = full.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new();
        let w = self.load(&mut g, false);
        let hk = hooks.install(&mut g, &self.config)?;
        let fw = self.forward_graph(&mut g, &w, &refs, &hk)?;
        let v = self.config.vocab_size;
        let logits = g.value(fw.logits);
        let mut row = vec![0.0; v];
        Ok(continuations
            .iter()
            .enumerate()
            .map(|(b, c)| {
                let mut total = 0.0f64;
                for (j, &tok) in c.iter().enumerate() {
                    let r = fw.row(b, prompt.len() + j - 1);
                    crate::graph::log_softmax_row(&logits[r * v..(r + 1) * v], &mut row);
                    total += row[tok] as f64;
                }
                total
            })
            .collect())
    }
}

impl LayerWeights {
    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("attn_norm", &self.attn_norm),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("mlp_norm", &self.mlp_norm),
            ("w_in", &self.w_in),
            ("b_in", &self.b_in),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_in", &mut self.w_in),
            ("b_in", &mut self.b_in),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }
}

impl WeightVars {
    /// Graph handles in the same order as [`Model::named_tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.w_q, l.w_k, l.w_v, l.w_o, l.mlp_norm, l.w_in, l.b_in, l.w_out, l.b_out]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
