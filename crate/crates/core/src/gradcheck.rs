// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference gradient checking.
//!
//! Per coordinate the error is `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
//! The unit floor in the denominator keeps single-precision round-off in the
//! numeric estimate (about `ulp(f) / h`) from dominating coordinates whose
//! true gradient is close to zero.

use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
    pub max_rel_err: f32,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub tol: f32,
    pub passed: bool,
}

fn rel_err(a: f32, n: f32) -> f32 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares a supplied analytic gradient against central differences of `f`.
pub fn compare_gradient(
    f: impl Fn(&Tensor) -> Result<f32>,
    analytic: &[f32],
    x: &Tensor,
    h: f32,
    tol: f32,
) -> Result<FiniteDiffReport> {
    ensure!(h > 0.0, "finite-difference step must be positive, got {h}");
    ensure!(
        analytic.len() == x.len(),
        "analytic gradient length {} does not match input shape {:?}",
        analytic.len(),
        x.shape()
    );
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (plus, minus) = (orig + h, orig - h);
        probe.data_mut()[i] = plus;
        let up = f(&probe)?;
        probe.data_mut()[i] = minus;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        // Divide by the step actually taken after rounding to f32.
        numeric.push(((up as f64 - down as f64) / (plus as f64 - minus as f64)) as f32);
    }
    let (worst, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0f32), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(FiniteDiffReport {
        analytic: analytic.to_vec(),
        numeric,
        max_rel_err,
        worst,
        tol,
        passed: max_rel_err <= tol,
    })
}

/// Checks the gradient produced by [`Graph::backward`] for the scalar
/// function built by `f` from the leaf `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f32, tol: f32) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f32> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        ensure!(g.value(out).len() == 1, "checked function must return a scalar, got {:?}", g.shape(out));
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let mut xt = x.clone();
    xt.requires_grad = true;
    let v = g.leaf(&xt);
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; x.len()]);
    let mut plain = x.clone();
    plain.requires_grad = false;
    compare_gradient(eval, &analytic, &plain, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::randn(&[5], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let r = finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-3, 1e-3).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 5e-4, "{}", r.max_rel_err);
    }

    #[test]
    fn softmax_then_pick_passes() {
        for seed in 0..10 {
            let x = Tensor::randn(&[6], 0.0, 1.0, &mut Rng::new(seed)).unwrap();
            let r = finite_diff_check(
                |g, v| {
                    let s = g.softmax(v);
                    let s2 = g.reshape(s, &[1, 6])?;
                    let p = g.gather(s2, &[2])?;
                    Ok(g.sum(p))
                },
                &x,
                1e-3,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // d/dx sum(x^2) reported as x instead of 2x.
        let x = Tensor::from_vec(alloc::vec![0.5, -1.0, 2.0]).unwrap();
        let wrong: Vec<f32> = x.data().to_vec();
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum::<f32>());
        let r = compare_gradient(f, &wrong, &x, 1e-3, 1e-3).unwrap();
        assert!(!r.passed);
        let right: Vec<f32> = x.data().iter().map(|v| 2.0 * v).collect();
        assert!(compare_gradient(f, &right, &x, 1e-3, 1e-3).unwrap().passed);
    }

    #[test]
    fn step_must_be_positive() {
        let x = Tensor::from_vec(alloc::vec![1.0]).unwrap();
        assert!(finite_diff_check(|g, v| Ok(g.sum(v)), &x, 0.0, 1e-3).is_err());
    }
}
