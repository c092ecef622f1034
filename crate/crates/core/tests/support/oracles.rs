// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force reference implementations of the evaluation and head-set
//! metrics, written without reusing any library code path.

#![allow(dead_code)]

use lofit_core::localize::{emd, jaccard, layer_distribution};
use lofit_core::tasks::{exact_match, mc_scores, EOS};
use lofit_core::{HeadId, Rng};

/// MC1 and MC2 straight from the definitions: probabilities are `exp` of
/// the raw log-probabilities, no max shift, and MC1 requires the gold to
/// beat every distractor strictly.
pub fn ref_mc(gold: &[f64], distractors: &[f64]) -> (bool, f64) {
    let pg: f64 = gold.iter().map(|x| x.exp()).sum();
    let pd: f64 = distractors.iter().map(|x| x.exp()).sum();
    let mut mc1 = false;
    for &g in gold {
        if distractors.iter().all(|&d| g > d) {
            mc1 = true;
        }
    }
    (mc1, pg / (pg + pd))
}

/// Exact match: tokens up to (not including) the first end token must equal the gold.
pub fn ref_em(output: &[usize], gold: &[usize]) -> bool {
    let mut cut = Vec::new();
    for &t in output {
        if t == EOS {
            break;
        }
        cut.push(t);
    }
    cut.len() == gold.len() && cut.iter().zip(gold).all(|(a, b)| a == b)
}

/// Overlap over the size of the first set, by nested loops.
pub fn ref_jaccard(ti: &[(usize, usize)], tj: &[(usize, usize)]) -> f64 {
    let mut uniq_i: Vec<(usize, usize)> = Vec::new();
    for h in ti {
        if !uniq_i.contains(h) {
            uniq_i.push(*h);
        }
    }
    let shared = uniq_i.iter().filter(|h| tj.contains(h)).count();
    shared as f64 / uniq_i.len() as f64
}

/// Earth mover's distance between integer mass vectors (same total) as a
/// transport problem with cost |i - j|, solved exactly by successive
/// shortest paths (Bellman-Ford) one unit at a time. Returns cost / total.
pub fn ref_emd_units(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len());
    let total: usize = a.iter().sum();
    assert_eq!(total, b.iter().sum::<usize>());
    // flow[i][j]: units shipped from supply bin i to demand bin j.
    let mut flow = vec![vec![0i64; n]; n];
    let mut supply: Vec<i64> = a.iter().map(|&x| x as i64).collect();
    let mut demand: Vec<i64> = b.iter().map(|&x| x as i64).collect();
    // Nodes 0..n are supply bins, n..2n demand bins.
    for _ in 0..total {
        let mut dist = vec![i64::MAX / 4; 2 * n];
        let mut prev = vec![usize::MAX; 2 * n];
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0;
            }
        }
        for _ in 0..2 * n {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    let c = (i as i64 - j as i64).abs();
                    // Forward arc i -> j (unbounded capacity).
                    if dist[i] + c < dist[n + j] {
                        dist[n + j] = dist[i] + c;
                        prev[n + j] = i;
                        changed = true;
                    }
                    // Residual arc j -> i where flow can be undone.
                    if flow[i][j] > 0 && dist[n + j] - c < dist[i] {
                        dist[i] = dist[n + j] - c;
                        prev[i] = n + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..n).filter(|&j| demand[j] > 0).min_by_key(|&j| dist[n + j]).unwrap();
        let mut node = n + sink;
        loop {
            let p = prev[node];
            if p == usize::MAX {
                break;
            }
            if node >= n {
                flow[p][node - n] += 1;
            } else {
                flow[node][p - n] -= 1;
            }
            node = p;
        }
        supply[node] -= 1;
        demand[sink] -= 1;
    }
    let mut cost = 0i64;
    for i in 0..n {
        for j in 0..n {
            cost += flow[i][j] * (i as i64 - j as i64).abs();
        }
    }
    cost as f64 / total as f64
}

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub metric: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_heads(rng: &mut Rng, k: usize) -> Vec<(usize, usize)> {
    let idx = rng.sample_without_replacement(20, k);
    idx.into_iter().map(|i| (i / 5, i % 5)).collect()
}

fn to_ids(h: &[(usize, usize)]) -> Vec<HeadId> {
    h.iter().map(|&(l, i)| HeadId::new(l, i)).collect()
}

/// Random instances of at most ten elements for each metric, checked
/// against the references: exact for EM and Jaccard, 1e-9 for MC2 and EMD.
pub fn metric_checks(seed: u64) -> Vec<OracleCheck> {
    let mut rng = Rng::new(seed).fork(0x0AC1E);
    let mut out = Vec::new();

    // MC1 / MC2 on 1 gold and up to 9 distractors, with occasional ties.
    let mut worst_mc2 = 0.0f64;
    let mut mc1_ok = true;
    for _ in 0..50 {
        let n = 1 + rng.below(9);
        let mut lps: Vec<f64> = (0..n + 1).map(|_| -(rng.uniform() * 8.0)).collect();
        if rng.below(4) == 0 {
            lps[1] = lps[0];
        }
        let (m1, m2) = mc_scores(&lps[..1], &lps[1..]).unwrap();
        let (r1, r2) = ref_mc(&lps[..1], &lps[1..]);
        mc1_ok &= m1 == r1;
        worst_mc2 = worst_mc2.max((m2 - r2).abs());
    }
    out.push(OracleCheck { metric: "MC1", passed: mc1_ok, detail: "50 questions, exact".into() });
    out.push(OracleCheck { metric: "MC2", passed: worst_mc2 <= 1e-9, detail: format!("max |diff| {worst_mc2:e}") });

    // EM on outputs of up to 10 tokens, with end tokens and near misses.
    let mut em_ok = true;
    for _ in 0..100 {
        let glen = 1 + rng.below(4);
        let gold: Vec<usize> = (0..glen).map(|_| 2 + rng.below(6)).collect();
        let mut output = gold.clone();
        match rng.below(4) {
            0 => {}
            1 => {
                let i = rng.below(glen);
                output[i] = 2 + (output[i] - 2 + 1) % 6;
            }
            2 => output.push(EOS),
            _ => output.extend((0..rng.below(10 - glen)).map(|_| rng.below(8))),
        }
        output.truncate(10);
        em_ok &= exact_match(&output, &gold) == ref_em(&output, &gold);
    }
    out.push(OracleCheck { metric: "EM", passed: em_ok, detail: "100 outputs, exact".into() });

    // Jaccard on head sets of up to 10 heads.
    let mut jac_ok = true;
    for _ in 0..50 {
        let (ki, kj) = (1 + rng.below(10), 1 + rng.below(10));
        let (ti, tj) = (random_heads(&mut rng, ki), random_heads(&mut rng, kj));
        jac_ok &= jaccard(&to_ids(&ti), &to_ids(&tj)).unwrap() == ref_jaccard(&ti, &tj);
    }
    out.push(OracleCheck { metric: "Jaccard", passed: jac_ok, detail: "50 pairs, exact".into() });

    // EMD between layer distributions of up to 10 layers.
    let mut worst_emd = 0.0f64;
    for _ in 0..50 {
        let layers = 2 + rng.below(9);
        let k = 1 + rng.below(10);
        let draw = |rng: &mut Rng| -> Vec<usize> {
            let mut c = vec![0usize; layers];
            for _ in 0..k {
                c[rng.below(layers)] += 1;
            }
            c
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let heads = |c: &[usize]| -> Vec<HeadId> {
            c.iter().enumerate().flat_map(|(l, &n)| (0..n).map(move |h| HeadId::new(l, h))).collect()
        };
        let p = layer_distribution(&heads(&a), layers).unwrap();
        let q = layer_distribution(&heads(&b), layers).unwrap();
        worst_emd = worst_emd.max((emd(&p, &q).unwrap() - ref_emd_units(&a, &b)).abs());
    }
    out.push(OracleCheck { metric: "EMD", passed: worst_emd <= 1e-9, detail: format!("max |diff| {worst_emd:e}") });
    out
}
