// SPDX-License-Identifier: MIT OR Apache-2.0

//! The graph forward pass against a naive f64 re-implementation written
//! with plain loops, with and without head hooks.

use std::collections::BTreeMap;

use lofit_core::model::RMS_EPS;
use lofit_core::{HeadId, InterventionSet, Model, ModelConfig, NoHooks, Rng, ScalingParams, Tensor};

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().map(|&x| x as f64).collect()).collect()
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn matmul(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| (0..w[0].len()).map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum()).collect())
        .collect()
}

fn rms(x: &[Vec<f64>], gain: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

/// Per-layer `[n_heads * d_head]` multipliers and offsets on `z`.
struct NaiveHooks {
    scale: Vec<Vec<f64>>,
    offset: Vec<Vec<f64>>,
}

impl NaiveHooks {
    fn identity(cfg: &ModelConfig) -> Self {
        let w = cfg.n_heads * cfg.d_head;
        Self { scale: vec![vec![1.0; w]; cfg.n_layers], offset: vec![vec![0.0; w]; cfg.n_layers] }
    }
}

fn naive_forward(m: &Model, tokens: &[usize], hooks: &NaiveHooks) -> Vec<Vec<f64>> {
    let cfg = m.config;
    let (tok, pos) = (mat(&m.tok_embed), mat(&m.pos_embed));
    let mut h: Vec<Vec<f64>> =
        tokens.iter().enumerate().map(|(p, &t)| tok[t].iter().zip(&pos[p]).map(|(a, b)| a + b).collect()).collect();
    let n = tokens.len();
    let dh = cfg.d_head;
    for (l, lw) in m.layers.iter().enumerate() {
        let x = rms(&h, &vec64(&lw.attn_norm));
        let (q, k, v) = (matmul(&x, &mat(&lw.w_q)), matmul(&x, &mat(&lw.w_k)), matmul(&x, &mat(&lw.w_v)));
        let mut z = vec![vec![0.0; cfg.n_heads * dh]; n];
        for head in 0..cfg.n_heads {
            let span = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i][span.clone()].iter().zip(&k[j][span.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    for d in 0..dh {
                        z[i][head * dh + d] += w / tot * v[j][head * dh + d];
                    }
                }
            }
        }
        for row in z.iter_mut() {
            for (c, x) in row.iter_mut().enumerate() {
                *x = *x * hooks.scale[l][c] + hooks.offset[l][c];
            }
        }
        let a = matmul(&z, &mat(&lw.w_o));
        let mid: Vec<Vec<f64>> = h.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect();
        let x = rms(&mid, &vec64(&lw.mlp_norm));
        let b_in = vec64(&lw.b_in);
        let u: Vec<Vec<f64>> =
            matmul(&x, &mat(&lw.w_in)).into_iter().map(|r| r.iter().zip(&b_in).map(|(x, b)| (x + b).max(0.0)).collect()).collect();
        let b_out = vec64(&lw.b_out);
        let out = matmul(&u, &mat(&lw.w_out));
        h = mid.iter().zip(&out).map(|(r, o)| r.iter().zip(o).zip(&b_out).map(|((x, y), b)| x + y + b).collect()).collect();
    }
    matmul(&rms(&h, &vec64(&m.final_norm)), &mat(&m.unembed))
}

fn assert_close(got: &Tensor, want: &[Vec<f64>], tol: f64) {
    let v = want[0].len();
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let g = got.data()[i * v + j] as f64;
            assert!((g - w).abs() <= tol * (1.0 + w.abs()), "logit [{i}, {j}]: got {g}, want {w}");
        }
    }
}

fn model(seed: u64) -> Model {
    Model::build(ModelConfig::new(2, 4, 16, 24, 10, 20).unwrap(), &mut Rng::new(seed)).unwrap()
}

#[test]
fn forward_matches_naive_reference() {
    for seed in 0..5 {
        let m = model(seed);
        let mut rng = Rng::new(100 + seed);
        let tokens: Vec<usize> = (0..1 + rng.below(10)).map(|_| rng.below(24)).collect();
        let got = m.forward(&tokens, &NoHooks, false).unwrap();
        assert_close(&got.logits, &naive_forward(&m, &tokens, &NaiveHooks::identity(&m.config)), 1e-4);
    }
}

#[test]
fn hand_computed_logits_when_blocks_write_nothing() {
    // With W_O, w_out and b_out zero every block adds nothing, so the
    // logits are rms_norm(tok + pos) times the unembedding.
    let cfg = ModelConfig::new(1, 1, 2, 3, 2, 2).unwrap();
    let mut m = Model::build(cfg, &mut Rng::new(0)).unwrap();
    m.tok_embed = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 2.0, 3.0, 4.0]).unwrap();
    m.pos_embed = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    m.unembed = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, -1.0]).unwrap();
    for lw in &mut m.layers {
        lw.w_o = Tensor::zeros(&[2, 2]).unwrap();
        lw.w_out = Tensor::zeros(&[2, 2]).unwrap();
    }
    let logits = m.forward(&[2, 0], &NoHooks, false).unwrap().logits;
    // Position 0: h = (3, 4), rms = sqrt(12.5). Position 1: h = (2, 1), rms = sqrt(2.5).
    let eps = RMS_EPS as f64;
    let (r0, r1) = ((12.5 + eps).sqrt(), (2.5 + eps).sqrt());
    let want = [[3.0 / r0, 4.0 / r0, -1.0 / r0], [2.0 / r1, 1.0 / r1, 1.0 / r1]];
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            assert!((logits.data()[i * 3 + j] as f64 - w).abs() < 1e-6);
        }
    }
}

#[test]
fn hooked_forward_matches_naive_reference() {
    let m = model(7);
    let cfg = m.config;
    let mut rng = Rng::new(11);
    let tokens = [3, 9, 1, 17, 5];

    let mut offsets = BTreeMap::new();
    let alpha = 1.5f32;
    let mut naive = NaiveHooks::identity(&cfg);
    for h in [HeadId::new(0, 2), HeadId::new(1, 0), HeadId::new(1, 3)] {
        let v: Vec<f32> = (0..cfg.d_head).map(|_| rng.normal() as f32).collect();
        for (d, x) in v.iter().enumerate() {
            naive.offset[h.layer][h.head * cfg.d_head + d] = (alpha * x) as f64;
        }
        offsets.insert(h, v);
    }
    let iv = InterventionSet::new(offsets, alpha).unwrap();
    let got = m.forward(&tokens, &iv, false).unwrap();
    assert_close(&got.logits, &naive_forward(&m, &tokens, &naive), 1e-4);

    let sp = ScalingParams::init(&cfg, 0.5, &mut rng).unwrap();
    let mut naive = NaiveHooks::identity(&cfg);
    for (h, a) in &sp.a {
        for (d, x) in a.data().iter().enumerate() {
            naive.scale[h.layer][h.head * cfg.d_head + d] = 1.0 + *x as f64;
        }
    }
    let got = m.forward(&tokens, &sp, false).unwrap();
    assert_close(&got.logits, &naive_forward(&m, &tokens, &naive), 1e-4);
}

#[test]
fn traced_head_activations_are_slices_of_z() {
    let m = model(3);
    let tokens = [4, 8, 15, 16];
    let tr = m.forward(&tokens, &NoHooks, true).unwrap();
    assert_eq!(tr.head_activations.len(), m.config.total_heads());
    assert_eq!(tr.residuals.len(), m.config.n_layers + 1);
    // attn_out = z W_O, reassembled from per-head slices.
    for l in 0..m.config.n_layers {
        let mut z = vec![vec![0.0f64; m.config.n_heads * m.config.d_head]; tokens.len()];
        for i in 0..m.config.n_heads {
            let t = &tr.head_activations[&HeadId::new(l, i)];
            for (p, row) in z.iter_mut().enumerate() {
                for d in 0..m.config.d_head {
                    row[i * m.config.d_head + d] = t.row(p)[d] as f64;
                }
            }
        }
        assert_close(&tr.attn_out[l], &matmul(&z, &mat(&m.layers[l].w_o)), 1e-5);
    }
}
