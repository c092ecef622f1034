// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference cases for every graph primitive and for the hooked
//! transformer loss. Shared by the core tests and the acceptance target.

#![allow(dead_code)]

use lofit_core::gradcheck::{compare_gradient, finite_diff_check, FiniteDiffReport};
use lofit_core::train::{hook_loss_and_grad, HookKind, HookParams, Objective, SupervisedExample};
use lofit_core::{Graph, HeadId, Model, ModelConfig, PreferencePair, Result, Rng, Tensor, Var};

pub const STEP: f32 = 1e-3;
pub const TOL: f32 = 1e-3;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: FiniteDiffReport,
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, rng).unwrap()
}

/// Random values with |x| >= 0.1, keeping kinks (relu, |x|) out of reach of the step.
fn randn_away(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for x in t.data_mut() {
        if x.abs() < 0.1 {
            *x = if *x < 0.0 { -0.1 - x.abs() } else { 0.1 + x.abs() };
        }
    }
    t
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for x in t.data_mut() {
        *x = 0.5 + x.abs();
    }
    t
}

fn constant(g: &mut Graph, t: &Tensor) -> Var {
    g.constant(t.shape(), t.data().to_vec()).unwrap()
}

/// `sum(out ⊙ w)` with fixed random weights, so every output coordinate
/// matters. The weights are small to keep the scalar O(1): the f32 round-off
/// of a central difference grows with |f| / h.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(g.shape(out).to_vec().as_slice(), w.data().to_vec())?;
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn case(
    out: &mut Vec<CaseResult>,
    name: &'static str,
    seed: u64,
    x: Tensor,
    out_shape: &[usize],
    rng: &mut Rng,
    f: Build,
) {
    let w = scaled(randn(out_shape, rng), 0.25);
    let report = finite_diff_check(
        move |g, v| {
            let y = f(g, v)?;
            weighted(g, y, &w)
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
    out.push(CaseResult { name, seed, report });
}

/// One seeded case for each primitive (and each differentiable operand).
pub fn primitive_cases(seed: u64) -> Vec<CaseResult> {
    let mut rng = Rng::new(seed).fork(0x6AAD);
    let r = &mut rng;
    let mut out = Vec::new();
    let o = &mut out;

    let b = randn(&[4, 5], r);
    case(o, "matmul (left)", seed, randn(&[3, 4], r), &[3, 5], r, Box::new(move |g, x| {
        let bv = constant(g, &b);
        g.matmul(x, bv)
    }));
    let a = randn(&[3, 4], r);
    case(o, "matmul (right)", seed, randn(&[4, 5], r), &[3, 5], r, Box::new(move |g, x| {
        let av = constant(g, &a);
        g.matmul(av, x)
    }));
    let a = randn(&[3, 4], r);
    case(o, "matmul transposed (right)", seed, randn(&[5, 4], r), &[3, 5], r, Box::new(move |g, x| {
        let av = constant(g, &a);
        g.matmul_ex(av, x, true)
    }));
    let b = randn(&[2, 4, 2], r);
    case(o, "batched matmul (left)", seed, randn(&[2, 3, 4], r), &[2, 3, 2], r, Box::new(move |g, x| {
        let bv = constant(g, &b);
        g.matmul(x, bv)
    }));
    let a = randn(&[2, 3, 4], r);
    case(o, "batched matmul transposed (right)", seed, randn(&[2, 5, 4], r), &[2, 3, 5], r, Box::new(move |g, x| {
        let av = constant(g, &a);
        g.matmul_ex(av, x, true)
    }));
    let c = randn(&[3, 4], r);
    case(o, "add", seed, randn(&[3, 4], r), &[3, 4], r, Box::new(move |g, x| {
        let cv = constant(g, &c);
        g.add(cv, x)
    }));
    let c = randn(&[3, 4], r);
    case(o, "sub (right)", seed, randn(&[3, 4], r), &[3, 4], r, Box::new(move |g, x| {
        let cv = constant(g, &c);
        g.sub(cv, x)
    }));
    let c = randn(&[3, 4], r);
    case(o, "mul", seed, randn(&[3, 4], r), &[3, 4], r, Box::new(move |g, x| {
        let cv = constant(g, &c);
        g.mul(x, cv)
    }));
    let c = randn(&[3, 4], r);
    case(o, "add_row (row)", seed, randn(&[4], r), &[3, 4], r, Box::new(move |g, x| {
        let cv = constant(g, &c);
        g.add_row(cv, x)
    }));
    let row = randn(&[4], r);
    case(o, "mul_row (matrix)", seed, randn(&[3, 4], r), &[3, 4], r, Box::new(move |g, x| {
        let rv = constant(g, &row);
        g.mul_row(x, rv)
    }));
    let c = randn(&[3, 4], r);
    case(o, "mul_row (row)", seed, randn(&[4], r), &[3, 4], r, Box::new(move |g, x| {
        let cv = constant(g, &c);
        g.mul_row(cv, x)
    }));
    case(o, "scale", seed, randn(&[6], r), &[6], r, Box::new(|g, x| Ok(g.scale(x, -1.7))));
    case(o, "add_scalar", seed, randn(&[6], r), &[6], r, Box::new(|g, x| Ok(g.add_scalar(x, 0.3))));
    case(o, "log", seed, positive(&[6], r), &[6], r, Box::new(|g, x| Ok(g.log(x))));
    case(o, "exp", seed, randn(&[6], r), &[6], r, Box::new(|g, x| Ok(g.exp(x))));
    case(o, "sigmoid", seed, randn(&[6], r), &[6], r, Box::new(|g, x| Ok(g.sigmoid(x))));
    case(o, "log_sigmoid", seed, randn(&[6], r), &[6], r, Box::new(|g, x| Ok(g.log_sigmoid(x))));
    case(o, "relu", seed, randn_away(&[6], r), &[6], r, Box::new(|g, x| Ok(g.relu(x))));
    case(o, "softmax", seed, randn(&[3, 5], r), &[3, 5], r, Box::new(|g, x| Ok(g.softmax(x))));
    case(o, "log_softmax", seed, randn(&[3, 5], r), &[3, 5], r, Box::new(|g, x| Ok(g.log_softmax(x))));
    let gain = randn(&[5], r);
    case(o, "rms_norm (input)", seed, randn(&[3, 5], r), &[3, 5], r, Box::new(move |g, x| {
        let gv = constant(g, &gain);
        g.rms_norm(x, gv, 1e-5)
    }));
    let xs = randn(&[3, 5], r);
    case(o, "rms_norm (gain)", seed, randn(&[5], r), &[3, 5], r, Box::new(move |g, x| {
        let xv = constant(g, &xs);
        g.rms_norm(xv, x, 1e-5)
    }));
    case(o, "embed", seed, randn(&[5, 3], r), &[4, 3], r, Box::new(|g, x| g.embed(x, &[2, 0, 2, 4])));
    let c = randn(&[3, 2], r);
    case(o, "concat", seed, randn(&[3, 4], r), &[3, 6], r, Box::new(move |g, x| {
        let cv = constant(g, &c);
        g.concat(&[cv, x])
    }));
    case(o, "split_heads", seed, randn(&[6, 4], r), &[4, 3, 2], r, Box::new(|g, x| g.split_heads(x, 2, 3, 2)));
    case(o, "merge_heads", seed, randn(&[4, 3, 2], r), &[6, 4], r, Box::new(|g, x| g.merge_heads(x, 2, 2)));
    // The mask constant is huge, so the check goes through a softmax.
    case(o, "causal_mask", seed, randn(&[2, 3, 3], r), &[2, 3, 3], r, Box::new(|g, x| {
        let m = g.causal_mask(x)?;
        Ok(g.softmax(m))
    }));
    case(o, "sum", seed, randn(&[7], r), &[1], r, Box::new(|g, x| Ok(g.sum(x))));
    case(o, "l1_norm", seed, randn_away(&[7], r), &[1], r, Box::new(|g, x| Ok(g.l1_norm(x))));
    case(o, "l2_norm", seed, randn(&[7], r), &[1], r, Box::new(|g, x| Ok(g.l2_norm(x))));
    case(o, "gather", seed, randn(&[4, 5], r), &[4], r, Box::new(|g, x| g.gather(x, &[4, 0, 2, 2])));
    case(o, "group_sum", seed, randn(&[6], r), &[3], r, Box::new(|g, x| {
        g.group_sum(x, &[Some(0), None, Some(2), Some(0), Some(1), None], 3)
    }));
    case(o, "reshape", seed, randn(&[2, 6], r), &[3, 4], r, Box::new(|g, x| g.reshape(x, &[3, 4])));
    out
}

// --------------------------------------------------------------------------
// Transformer loss
// --------------------------------------------------------------------------

pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(2, 2, 8, 16, 8, 12).unwrap()
}

fn tokens(rng: &mut Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| 2 + rng.below(14)).collect()
}

/// Flattens hook parameters into one tensor and checks the loss gradient.
fn check_params(
    model: &Model,
    params: &HookParams,
    kind: HookKind,
    objective: Objective<'_>,
    lambda: f32,
) -> FiniteDiffReport {
    let flat: Vec<f32> = params.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    let x = Tensor::from_vec(flat).unwrap();
    let rebuild = |t: &Tensor| {
        let mut p = params.clone();
        let mut off = 0;
        for pt in &mut p.tensors {
            let n = pt.len();
            pt.data_mut().copy_from_slice(&t.data()[off..off + n]);
            off += n;
        }
        p
    };
    let (_, grads) = hook_loss_and_grad(model, params, kind, objective, lambda, 0.5).unwrap();
    let analytic: Vec<f32> = grads.concat();
    compare_gradient(
        |t| Ok(hook_loss_and_grad(model, &rebuild(t), kind, objective, lambda, 0.5)?.0),
        &analytic,
        &x,
        STEP,
        TOL,
    )
    .unwrap()
}

/// Scaling factors A (all heads, with and without the L1 term) and offsets
/// v (two heads), under cross-entropy and DPO losses.
pub fn transformer_cases(seed: u64) -> Vec<CaseResult> {
    let mut rng = Rng::new(seed).fork(0x7F0D);
    let model = {
        let mut m = Model::build(tiny_config(), &mut rng).unwrap();
        m.freeze();
        m
    };
    let sup: Vec<SupervisedExample> =
        (0..3).map(|_| SupervisedExample::with_eos(&tokens(&mut rng, 3), &tokens(&mut rng, 2))).collect();
    let prefs: Vec<PreferencePair> = (0..3)
        .map(|_| PreferencePair { prompt: tokens(&mut rng, 3), chosen: tokens(&mut rng, 1), rejected: tokens(&mut rng, 2) })
        .collect();
    let cfg = &model.config;
    let scale = HookParams {
        heads: cfg.all_heads().collect(),
        tensors: cfg.all_heads().map(|_| randn_away(&[cfg.d_head], &mut rng)).map(|t| scaled(t, 0.2)).collect(),
    };
    let offset = HookParams {
        heads: vec![HeadId::new(0, 1), HeadId::new(1, 0)],
        tensors: (0..2).map(|_| scaled(randn(&[cfg.d_head], &mut rng), 0.5)).collect(),
    };
    let mut out = Vec::new();
    let mut push = |name, report| out.push(CaseResult { name, seed, report });
    push("loss wrt A (cross-entropy)", check_params(&model, &scale, HookKind::Scale, Objective::CrossEntropy(&sup), 0.0));
    push("loss wrt A (cross-entropy + L1)", check_params(&model, &scale, HookKind::Scale, Objective::CrossEntropy(&sup), 0.05));
    push("loss wrt A (DPO)", check_params(&model, &scale, HookKind::Scale, Objective::Preference(&prefs), 0.0));
    push("loss wrt v (cross-entropy)", check_params(&model, &offset, HookKind::Offset, Objective::CrossEntropy(&sup), 0.0));
    push("loss wrt v (DPO)", check_params(&model, &offset, HookKind::Offset, Objective::Preference(&prefs), 0.0));
    out
}

fn scaled(mut t: Tensor, c: f32) -> Tensor {
    for x in t.data_mut() {
        *x *= c;
    }
    t
}
