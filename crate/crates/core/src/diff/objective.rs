//! Scalar objectives and their input derivatives.
//!
//! Gradients come from reverse-mode backpropagation. Hessian-vector products
//! run the same backward pass on dual numbers whose tangent is the probe
//! direction (forward-over-reverse), so `H·v` is exact up to rounding.

use std::ops::Range;

use super::models::{CriticNet, PolicyNet};
use super::net::softmax;
use super::scalar::{Dual, Scalar};
use crate::error::{Error, Result};

/// A twice-differentiable scalar function of a real vector.
pub trait Objective {
    fn input_dim(&self) -> usize;

    fn value_and_grad<S: Scalar>(&self, x: &[S]) -> Result<(S, Vec<S>)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(x)?.0)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn value_and_grad<S: Scalar>(&self, x: &[S]) -> Result<(S, Vec<S>)> {
        (**self).value_and_grad(x)
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        (**self).value(x)
    }
}

/// Action commitment cost `J(o, τ) = −log π(a* | o)` with the target action
/// `a*` held fixed.
#[derive(Clone, Copy, Debug)]
pub struct ActionCost<'a> {
    pub policy: &'a PolicyNet,
    pub target: usize,
}

impl<'a> ActionCost<'a> {
    pub fn new(policy: &'a PolicyNet, target: usize) -> Result<Self> {
        if target >= policy.action_count() {
            return Err(Error::dim("target action", policy.action_count(), target));
        }
        Ok(ActionCost { policy, target })
    }

    /// Cost with the greedy action at `o` as the target.
    pub fn greedy_at(policy: &'a PolicyNet, o: &[f64]) -> Result<Self> {
        Self::new(policy, policy.greedy(o)?)
    }
}

impl Objective for ActionCost<'_> {
    fn input_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    fn value_and_grad<S: Scalar>(&self, o: &[S]) -> Result<(S, Vec<S>)> {
        let net = self.policy.net();
        let trace = net.trace(o)?;
        let t = self.policy.temperature();
        let z = trace.output();
        let inv_t = 1.0 / t;
        // −z*/T + logsumexp(z/T), shifted by the max for stability
        let m = z.iter().map(|v| v.re() * inv_t).fold(f64::NEG_INFINITY, f64::max);
        let mut total = S::zero();
        for &v in z {
            total += (v.scale(inv_t) - S::cst(m)).exp();
        }
        let cost = total.ln() - (z[self.target].scale(inv_t) - S::cst(m));
        let p = softmax(z, t);
        let d_logits: Vec<S> = p
            .iter()
            .enumerate()
            .map(|(a, &pa)| {
                let tau = if a == self.target { 1.0 } else { 0.0 };
                (pa - S::cst(tau)).scale(inv_t)
            })
            .collect();
        let grad = net.backprop(&trace, d_logits, None);
        Ok((cost, grad))
    }
}

/// Critic cost `L_Q = −Q(x)` over the full critic input.
#[derive(Clone, Copy, Debug)]
pub struct CriticCost<'a> {
    pub critic: &'a CriticNet,
}

impl Objective for CriticCost<'_> {
    fn input_dim(&self) -> usize {
        self.critic.net().input_width()
    }

    fn value_and_grad<S: Scalar>(&self, x: &[S]) -> Result<(S, Vec<S>)> {
        let net = self.critic.net();
        let trace = net.trace(x)?;
        let q = trace.output()[0];
        let grad = net.backprop(&trace, vec![S::cst(-1.0)], None);
        Ok((-q, grad))
    }
}

/// `f(x) = ½ xᵀ A x` for a fixed symmetric `A`; the analytic test head.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    a: Vec<Vec<f64>>,
}

impl QuadraticForm {
    /// Symmetrizes `a` as `(A + Aᵀ)/2`.
    pub fn new(a: Vec<Vec<f64>>) -> Result<Self> {
        let n = a.len();
        if a.iter().any(|r| r.len() != n) {
            return Err(Error::dim(
                "quadratic form row",
                n,
                a.iter().map(|r| r.len()).max().unwrap_or(0),
            ));
        }
        let sym = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (a[i][j] + a[j][i])).collect())
            .collect();
        Ok(QuadraticForm { a: sym })
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.a
    }
}

impl Objective for QuadraticForm {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn value_and_grad<S: Scalar>(&self, x: &[S]) -> Result<(S, Vec<S>)> {
        if x.len() != self.a.len() {
            return Err(Error::dim("quadratic input", self.a.len(), x.len()));
        }
        let ax: Vec<S> = self
            .a
            .iter()
            .map(|row| {
                let mut acc = S::zero();
                for (&aij, &xj) in row.iter().zip(x) {
                    acc += xj.scale(aij);
                }
                acc
            })
            .collect();
        let mut v = S::zero();
        for (&xi, &axi) in x.iter().zip(&ax) {
            v += xi * axi;
        }
        Ok((v.scale(0.5), ax))
    }
}

/// Restriction of an objective to a contiguous slice of its input; the rest
/// of the input is frozen at `base`.
#[derive(Clone, Debug)]
pub struct Restricted<'a, F> {
    pub inner: &'a F,
    pub base: &'a [f64],
    pub slice: Range<usize>,
}

impl<F: Objective> Objective for Restricted<'_, F> {
    fn input_dim(&self) -> usize {
        self.slice.len()
    }

    fn value_and_grad<S: Scalar>(&self, x: &[S]) -> Result<(S, Vec<S>)> {
        if x.len() != self.slice.len() {
            return Err(Error::dim("restricted input", self.slice.len(), x.len()));
        }
        let mut full: Vec<S> = self.base.iter().map(|&b| S::cst(b)).collect();
        full[self.slice.clone()].copy_from_slice(x);
        let (v, g) = self.inner.value_and_grad(&full)?;
        Ok((v, g[self.slice.clone()].to_vec()))
    }
}

/// Exact input gradient of `f` at `x`.
pub fn grad_input<F: Objective>(f: &F, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f.input_dim() {
        return Err(Error::dim("gradient input", f.input_dim(), x.len()));
    }
    let (_, g) = f.value_and_grad(x)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(g)
}

/// Value and gradient in one pass.
pub fn value_grad<F: Objective>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != f.input_dim() {
        return Err(Error::dim("gradient input", f.input_dim(), x.len()));
    }
    let (v, g) = f.value_and_grad(x)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteResult("objective value"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((v, g))
}

/// `∇²f(x)·v` by forward-over-reverse differentiation.
pub fn hvp_input<F: Objective>(f: &F, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f.input_dim() {
        return Err(Error::dim("hvp input", f.input_dim(), x.len()));
    }
    if v.len() != x.len() {
        return Err(Error::dim("hvp direction", x.len(), v.len()));
    }
    let xd: Vec<Dual> = x.iter().zip(v).map(|(&xi, &vi)| Dual::new(xi, vi)).collect();
    let (_, g) = f.value_and_grad(&xd)?;
    let hv: Vec<f64> = g.iter().map(|d| d.eps).collect();
    if hv.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFiniteResult("hessian-vector product"));
    }
    Ok(hv)
}

/// Full Hessian of `f` at `x`, column by column from Hessian-vector products,
/// returned together with the largest asymmetry `max |H − Hᵀ|` seen before
/// symmetrizing.
pub fn hessian_input<F: Objective>(f: &F, x: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    let mut e = vec![0.0; d];
    for k in 0..d {
        e[k] = 1.0;
        cols.push(hvp_input(f, x, &e)?);
        e[k] = 0.0;
    }
    // cols[k] is column k, so H[r][k] = cols[k][r]
    let mut asym: f64 = 0.0;
    let mut h = vec![vec![0.0; d]; d];
    for r in 0..d {
        for c in 0..d {
            asym = asym.max((cols[c][r] - cols[r][c]).abs());
            h[r][c] = 0.5 * (cols[c][r] + cols[r][c]);
        }
    }
    Ok((h, asym))
}
