//! Diagonal Gaussians and independent Bernoullis over the trailing axis.
//!
//! All densities reduce over the last axis only, so a `[rows, d]` argument
//! yields one value per row and a `[d]` argument yields a scalar.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian with independent coordinates, parameterized by log-variance.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'g> {
    pub mean: Var<'g>,
    pub log_var: Var<'g>,
}

impl<'g> DiagGaussian<'g> {
    pub fn new(mean: Var<'g>, log_var: Var<'g>) -> Result<Self> {
        let (ms, ls) = (mean.shape(), log_var.shape());
        if ms != ls {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                lhs: ms,
                rhs: ls,
            });
        }
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` with the given shape.
    pub fn standard(graph: &'g Graph, shape: &[usize]) -> Self {
        Self {
            mean: graph.constant(Tensor::zeros(shape)),
            log_var: graph.constant(Tensor::zeros(shape)),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.mean.shape()
    }

    pub fn variance(&self) -> Tensor {
        self.log_var.value().map(f64::exp)
    }

    pub fn log_prob(&self, x: Var<'g>) -> Result<Var<'g>> {
        gaussian_log_prob(x, self)
    }

    pub fn rsample(&self, eps: Var<'g>) -> Result<Var<'g>> {
        gaussian_rsample(self, eps)
    }
}

/// Independent Bernoullis parameterized by logits.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliVec<'g> {
    pub logits: Var<'g>,
}

impl<'g> BernoulliVec<'g> {
    pub fn probs(&self) -> Tensor {
        self.logits.value().map(crate::autodiff::sigmoid)
    }

    pub fn log_prob(&self, x: Var<'g>) -> Result<Var<'g>> {
        bernoulli_log_prob(x, self)
    }
}

fn require_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

/// `Σ_j −½[ln 2π + lv_j + (x_j − μ_j)² e^{−lv_j}]`.
pub fn gaussian_log_prob<'g>(x: Var<'g>, g: &DiagGaussian<'g>) -> Result<Var<'g>> {
    require_same("gaussian_log_prob", &x, &g.mean)?;
    let quad = x.sub(g.mean)?.square()?.mul(g.log_var.neg()?.exp()?)?;
    g.log_var
        .add(quad)?
        .offset(LN_2PI)?
        .scale(-0.5)?
        .sum_last()
}

/// Closed-form `KL(q ‖ p)`:
/// `Σ_j ½[e^{lq−lp} + (μq−μp)² e^{−lp} − 1 + lp − lq]`.
pub fn gaussian_kl<'g>(q: &DiagGaussian<'g>, p: &DiagGaussian<'g>) -> Result<Var<'g>> {
    require_same("gaussian_kl", &q.mean, &p.mean)?;
    let ratio = q.log_var.sub(p.log_var)?.exp()?;
    let quad = q.mean.sub(p.mean)?.square()?.mul(p.log_var.neg()?.exp()?)?;
    ratio
        .add(quad)?
        .offset(-1.0)?
        .add(p.log_var)?
        .sub(q.log_var)?
        .scale(0.5)?
        .sum_last()
}

/// `μ + exp(½ lv) ⊙ ε`; `eps` is treated as a constant.
pub fn gaussian_rsample<'g>(g: &DiagGaussian<'g>, eps: Var<'g>) -> Result<Var<'g>> {
    require_same("gaussian_rsample", &eps, &g.mean)?;
    let eps = eps.stop_gradient();
    g.mean.add(g.log_var.scale(0.5)?.exp()?.mul(eps)?)
}

/// `Σ_j [x_j l_j − softplus(l_j)]`, the logit form of the Bernoulli
/// log-likelihood.
pub fn bernoulli_log_prob<'g>(x: Var<'g>, b: &BernoulliVec<'g>) -> Result<Var<'g>> {
    require_same("bernoulli_log_prob", &x, &b.logits)?;
    if let Some(bad) = x.value().data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Domain {
            op: "bernoulli_log_prob",
            detail: format!("non-binary observation {bad}"),
        });
    }
    x.mul(b.logits)?.sub(b.logits.softplus()?)?.sum_last()
}
