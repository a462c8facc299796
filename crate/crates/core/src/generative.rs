//! Generative models `p_θ(x, z)`: a standard-normal initial prior, a Gaussian
//! transition and an emission, in two families.
//!
//! * [`GenerativeSpec::Lorenz`]: Euler-discretized Lorenz dynamics with
//!   learnable `(σ, ρ, β)`, fixed process noise and identity emission.
//! * [`GenerativeSpec::GatedBernoulli`]: gated MLP transition and an MLP
//!   emission producing Bernoulli logits.
//!
//! All forward functions are batched: latent arguments are `[rows, n_z]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::distributions::{BernoulliVec, DiagGaussian};
use crate::error::{Error, Result};
use crate::params::{glorot, BoundParams, ParamSet};

/// Lorenz parameters `(σ, ρ, β)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzTheta {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzTheta {
    /// The experiment's values. Note σ and ρ are swapped relative to the
    /// classical (10, 28) convention; they are kept as published.
    fn default() -> Self {
        Self {
            sigma: 28.0,
            rho: 10.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl LorenzTheta {
    /// Each component multiplied by `1 + u`, `u ~ Uniform(-frac, frac)`.
    pub fn perturbed(&self, rng: &mut impl Rng, frac: f64) -> Self {
        let mut f = |v: f64| v * (1.0 + rng.random_range(-frac..=frac));
        Self {
            sigma: f(self.sigma),
            rho: f(self.rho),
            beta: f(self.beta),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma, self.rho, self.beta]
    }

    /// Plain-value drift `f(z)`.
    pub fn drift(&self, z: [f64; 3]) -> [f64; 3] {
        [
            self.sigma * (z[1] - z[0]),
            z[0] * (self.rho - z[2]),
            z[0] * z[1] - self.beta * z[2],
        ]
    }
}

pub const SIGMA: &str = "gen.sigma";
pub const RHO: &str = "gen.rho";
pub const BETA: &str = "gen.beta";

/// Architecture of the generative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum GenerativeSpec {
    Lorenz {
        /// Euler step in seconds.
        ts: f64,
        /// Process noise variance per dimension.
        process_var: f64,
        /// Observation noise variance per dimension.
        obs_var: f64,
    },
    GatedBernoulli {
        latent_dim: usize,
        obs_dim: usize,
        emission_hidden: usize,
    },
}

impl GenerativeSpec {
    pub fn lorenz_default() -> Self {
        GenerativeSpec::Lorenz {
            ts: 0.01,
            process_var: 0.1,
            obs_var: 0.1,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            GenerativeSpec::Lorenz { .. } => 3,
            GenerativeSpec::GatedBernoulli { latent_dim, .. } => *latent_dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            GenerativeSpec::Lorenz { .. } => 3,
            GenerativeSpec::GatedBernoulli { obs_dim, .. } => *obs_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GenerativeSpec::Lorenz {
                ts,
                process_var,
                obs_var,
            } => {
                if !(*ts > 0.0 && *process_var > 0.0 && *obs_var > 0.0) {
                    return Err(Error::Config(
                        "lorenz model needs positive ts and noise variances".into(),
                    ));
                }
            }
            GenerativeSpec::GatedBernoulli {
                latent_dim,
                obs_dim,
                emission_hidden,
            } => {
                if *latent_dim == 0 || *obs_dim == 0 || *emission_hidden == 0 {
                    return Err(Error::Config("gated model needs positive widths".into()));
                }
            }
        }
        Ok(())
    }

    /// Add freshly initialized generative parameters to `params`. For the
    /// Lorenz family `theta` gives the starting point.
    pub fn init_params(
        &self,
        rng: &mut impl Rng,
        theta: Option<LorenzTheta>,
        params: &mut ParamSet,
    ) {
        match self {
            GenerativeSpec::Lorenz { .. } => {
                let th = theta.unwrap_or_default();
                params.insert(SIGMA, Tensor::scalar(th.sigma));
                params.insert(RHO, Tensor::scalar(th.rho));
                params.insert(BETA, Tensor::scalar(th.beta));
            }
            GenerativeSpec::GatedBernoulli {
                latent_dim: n,
                obs_dim,
                emission_hidden,
            } => {
                let n = *n;
                for head in ["gate", "prop"] {
                    params.insert(format!("gen.trans.{head}.w1"), glorot(rng, n, n));
                    params.insert(format!("gen.trans.{head}.b1"), Tensor::zeros(&[n]));
                    params.insert(format!("gen.trans.{head}.w2"), glorot(rng, n, n));
                    params.insert(format!("gen.trans.{head}.b2"), Tensor::zeros(&[n]));
                }
                let mut eye = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    eye.data_mut()[i * n + i] = 1.0;
                }
                params.insert("gen.trans.lin.w", eye);
                params.insert("gen.trans.lin.b", Tensor::zeros(&[n]));
                params.insert("gen.trans.logvar.w", Tensor::zeros(&[n, n]));
                params.insert("gen.trans.logvar.b", Tensor::zeros(&[n]));
                params.insert("gen.emit.w1", glorot(rng, n, *emission_hidden));
                params.insert("gen.emit.b1", Tensor::zeros(&[*emission_hidden]));
                params.insert("gen.emit.w2", glorot(rng, *emission_hidden, *obs_dim));
                params.insert("gen.emit.b2", Tensor::zeros(&[*obs_dim]));
            }
        }
    }

    pub fn bind<'g>(&self, graph: &'g Graph, params: &BoundParams<'g>) -> Result<BoundGenerative<'g>> {
        self.validate()?;
        Ok(match self {
            GenerativeSpec::Lorenz {
                ts,
                process_var,
                obs_var,
            } => BoundGenerative::Lorenz(LorenzModel {
                graph,
                sigma: params.get(SIGMA)?,
                rho: params.get(RHO)?,
                beta: params.get(BETA)?,
                ts: *ts,
                process_log_var: process_var.ln(),
                obs_log_var: obs_var.ln(),
            }),
            GenerativeSpec::GatedBernoulli { latent_dim, obs_dim, .. } => {
                let layer = |prefix: &str| -> Result<Affine<'g>> {
                    Ok(Affine {
                        w: params.get(&format!("{prefix}.w"))?,
                        b: params.get(&format!("{prefix}.b"))?,
                    })
                };
                let pair = |prefix: &str, i: u8| -> Result<Affine<'g>> {
                    Ok(Affine {
                        w: params.get(&format!("{prefix}.w{i}"))?,
                        b: params.get(&format!("{prefix}.b{i}"))?,
                    })
                };
                BoundGenerative::Gated(GatedModel {
                    graph,
                    latent_dim: *latent_dim,
                    obs_dim: *obs_dim,
                    gate_hidden: pair("gen.trans.gate", 1)?,
                    gate_out: pair("gen.trans.gate", 2)?,
                    prop_hidden: pair("gen.trans.prop", 1)?,
                    prop_out: pair("gen.trans.prop", 2)?,
                    linear: layer("gen.trans.lin")?,
                    log_var: layer("gen.trans.logvar")?,
                    emit_hidden: pair("gen.emit", 1)?,
                    emit_out: pair("gen.emit", 2)?,
                })
            }
        })
    }
}

/// `x W + b` for `x: [rows, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Affine<'g> {
    pub w: Var<'g>,
    pub b: Var<'g>,
}

impl<'g> Affine<'g> {
    pub fn apply(&self, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(self.w)?.add(self.b)
    }
}

/// Emission distribution of one family.
#[derive(Clone, Copy, Debug)]
pub enum Emission<'g> {
    Gaussian(DiagGaussian<'g>),
    Bernoulli(BernoulliVec<'g>),
}

impl<'g> Emission<'g> {
    pub fn log_prob(&self, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            Emission::Gaussian(g) => g.log_prob(x),
            Emission::Bernoulli(b) => b.log_prob(x),
        }
    }
}

/// `f(z) = (σ(z₂−z₁), z₁(ρ−z₃), z₁z₂−βz₃)` over the trailing axis of `z`.
pub fn lorenz_drift<'g>(z: Var<'g>, sigma: Var<'g>, rho: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
    let shape = z.shape();
    if shape.last() != Some(&3) {
        return Err(Error::ShapeMismatch {
            op: "lorenz_drift",
            lhs: shape,
            rhs: vec![3],
        });
    }
    let (z1, z2, z3) = (z.select(0)?, z.select(1)?, z.select(2)?);
    let f1 = z2.sub(z1)?.mul(sigma)?;
    let f2 = z1.mul(rho.sub(z3)?)?;
    let f3 = z1.mul(z2)?.sub(beta.mul(z3)?)?;
    Var::stack(&[f1, f2, f3])
}

pub struct LorenzModel<'g> {
    graph: &'g Graph,
    pub sigma: Var<'g>,
    pub rho: Var<'g>,
    pub beta: Var<'g>,
    ts: f64,
    process_log_var: f64,
    obs_log_var: f64,
}

pub struct GatedModel<'g> {
    graph: &'g Graph,
    latent_dim: usize,
    obs_dim: usize,
    gate_hidden: Affine<'g>,
    gate_out: Affine<'g>,
    prop_hidden: Affine<'g>,
    prop_out: Affine<'g>,
    linear: Affine<'g>,
    log_var: Affine<'g>,
    emit_hidden: Affine<'g>,
    emit_out: Affine<'g>,
}

/// Generative parameters registered on a graph.
pub enum BoundGenerative<'g> {
    Lorenz(LorenzModel<'g>),
    Gated(GatedModel<'g>),
}

impl<'g> BoundGenerative<'g> {
    fn graph(&self) -> &'g Graph {
        match self {
            BoundGenerative::Lorenz(m) => m.graph,
            BoundGenerative::Gated(m) => m.graph,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            BoundGenerative::Lorenz(_) => 3,
            BoundGenerative::Gated(m) => m.latent_dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            BoundGenerative::Lorenz(_) => 3,
            BoundGenerative::Gated(m) => m.obs_dim,
        }
    }

    fn check_width(&self, op: &'static str, z: &Var<'g>, width: usize) -> Result<()> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != width {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape,
                rhs: vec![width],
            });
        }
        Ok(())
    }

    /// `p_0(z_1) = N(0, I)` for `rows` sequences.
    pub fn initial_prior(&self, rows: usize) -> DiagGaussian<'g> {
        DiagGaussian::standard(self.graph(), &[rows, self.latent_dim()])
    }

    /// `p(z_t | z_{t−1})`.
    pub fn transition(&self, z_prev: Var<'g>) -> Result<DiagGaussian<'g>> {
        self.check_width("transition", &z_prev, self.latent_dim())?;
        let shape = z_prev.shape();
        match self {
            BoundGenerative::Lorenz(m) => {
                let drift = lorenz_drift(z_prev, m.sigma, m.rho, m.beta)?;
                let mean = z_prev.add(drift.scale(m.ts)?)?;
                let log_var = m.graph.constant(Tensor::full(&shape, m.process_log_var));
                DiagGaussian::new(mean, log_var)
            }
            BoundGenerative::Gated(m) => {
                let gate = m
                    .gate_out
                    .apply(m.gate_hidden.apply(z_prev)?.tanh()?)?
                    .sigmoid()?;
                let proposed = m.prop_out.apply(m.prop_hidden.apply(z_prev)?.tanh()?)?;
                let linear = m.linear.apply(z_prev)?;
                let mean = gate
                    .one_minus()?
                    .mul(linear)?
                    .add(gate.mul(proposed)?)?;
                let log_var = m.log_var.apply(proposed)?;
                DiagGaussian::new(mean, log_var)
            }
        }
    }

    /// `p(x_t | z_t)`.
    pub fn emission(&self, z: Var<'g>) -> Result<Emission<'g>> {
        self.check_width("emission", &z, self.latent_dim())?;
        match self {
            BoundGenerative::Lorenz(m) => {
                let log_var = m.graph.constant(Tensor::full(&z.shape(), m.obs_log_var));
                Ok(Emission::Gaussian(DiagGaussian::new(z, log_var)?))
            }
            BoundGenerative::Gated(m) => {
                let logits = m.emit_out.apply(m.emit_hidden.apply(z)?.tanh()?)?;
                Ok(Emission::Bernoulli(BernoulliVec { logits }))
            }
        }
    }

    /// `log p(x, z)` per row: `log p_0(z_1) + Σ_t log p(x_t|z_t) +
    /// Σ_{t≥2} log p(z_t|z_{t−1})`, with step `t` weighted by `masks[t]`.
    ///
    /// `xs[t]`, `zs[t]` are `[rows, d]`; `masks[t]` is `[rows]` of 0/1.
    pub fn joint_log_prob(&self, xs: &[Var<'g>], zs: &[Var<'g>], masks: &[Var<'g>]) -> Result<Var<'g>> {
        if xs.is_empty() || xs.len() != zs.len() || xs.len() != masks.len() {
            return Err(Error::Data(format!(
                "joint_log_prob: {} observations, {} latents, {} masks",
                xs.len(),
                zs.len(),
                masks.len()
            )));
        }
        let rows = zs[0].shape()[0];
        let mut total = self.initial_prior(rows).log_prob(zs[0])?.mul(masks[0])?;
        for t in 0..xs.len() {
            let mut step = self.emission(zs[t])?.log_prob(xs[t])?;
            if t > 0 {
                step = step.add(self.transition(zs[t - 1])?.log_prob(zs[t])?)?;
            }
            total = total.add(step.mul(masks[t])?)?;
        }
        Ok(total)
    }

    /// Current `(σ, ρ, β)` of a Lorenz model.
    pub fn theta(&self) -> Option<LorenzTheta> {
        match self {
            BoundGenerative::Lorenz(m) => Some(LorenzTheta {
                sigma: m.sigma.item(),
                rho: m.rho.item(),
                beta: m.beta.item(),
            }),
            BoundGenerative::Gated(_) => None,
        }
    }
}

/// Read `(σ, ρ, β)` from a parameter set.
pub fn theta_from_params(params: &ParamSet) -> Option<LorenzTheta> {
    Some(LorenzTheta {
        sigma: params.get(SIGMA).ok()?.item(),
        rho: params.get(RHO).ok()?.item(),
        beta: params.get(BETA).ok()?.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::rng::substream;

    fn lorenz_params(theta: LorenzTheta) -> ParamSet {
        let mut p = ParamSet::new();
        GenerativeSpec::lorenz_default().init_params(&mut substream(0, "t", 0), Some(theta), &mut p);
        p
    }

    fn row<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap())
    }

    #[test]
    fn drift_examples() {
        let g = Graph::new();
        let th = LorenzTheta::default();
        let (s, r, b) = (g.scalar(th.sigma), g.scalar(th.rho), g.scalar(th.beta));
        let f = lorenz_drift(g.constant(Tensor::vector(vec![1.0, 1.0, 1.0])), s, r, b).unwrap();
        let v = f.value();
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 9.0);
        assert!((v.data()[2] + 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(th.drift([1.0, 1.0, 1.0]), [v.data()[0], v.data()[1], v.data()[2]]);

        let f0 = lorenz_drift(g.constant(Tensor::zeros(&[3])), s, r, b).unwrap();
        assert_eq!(f0.value().data(), &[0.0, 0.0, 0.0]);
        assert!(lorenz_drift(g.constant(Tensor::zeros(&[2])), s, r, b).is_err());
    }

    #[test]
    fn drift_derivative_in_rho_is_z1() {
        let g = Graph::new();
        let rho = g.param(Tensor::scalar(10.0));
        let z = g.constant(Tensor::vector(vec![1.7, -0.3, 2.0]));
        let f = lorenz_drift(z, g.scalar(28.0), rho, g.scalar(8.0 / 3.0)).unwrap();
        let grads = f.select(1).unwrap().backward().unwrap();
        assert_eq!(grads.get(&rho).unwrap().item(), 1.7);
    }

    #[test]
    fn lorenz_transition_and_emission() {
        let params = lorenz_params(LorenzTheta::default());
        let g = Graph::new();
        let bound = params.bind(&g);
        let model = GenerativeSpec::lorenz_default().bind(&g, &bound).unwrap();
        let tr = model.transition(row(&g, &[1.0, 1.0, 1.0])).unwrap();
        let m = tr.mean.value();
        assert!((m.data()[0] - 1.0).abs() < 1e-15);
        assert!((m.data()[1] - 1.09).abs() < 1e-15);
        assert!((m.data()[2] - 0.983_333_333_333_333_3).abs() < 1e-12);
        for v in tr.variance().data() {
            assert!((v - 0.1).abs() < 1e-15);
        }

        let z = row(&g, &[2.0, -1.0, 0.5]);
        let Emission::Gaussian(em) = model.emission(z).unwrap() else {
            panic!("lorenz emission is gaussian")
        };
        assert_eq!(em.mean.value().data(), &[2.0, -1.0, 0.5]);
        let lp = em.log_prob(z).unwrap().item();
        let expected = 3.0 * (-0.5 * (2.0 * std::f64::consts::PI * 0.1).ln());
        assert!((lp - expected).abs() < 1e-12);

        assert!(model.transition(row(&g, &[1.0, 1.0])).is_err());
    }

    #[test]
    fn initial_prior_is_standard_normal() {
        let params = lorenz_params(LorenzTheta::default());
        let g = Graph::new();
        let model = GenerativeSpec::lorenz_default()
            .bind(&g, &params.bind(&g))
            .unwrap();
        let p0 = model.initial_prior(1);
        assert_eq!(p0.mean.value().data(), &[0.0; 3]);
        assert_eq!(p0.variance().data(), &[1.0; 3]);
        let kl = crate::distributions::gaussian_kl(&p0, &p0).unwrap();
        assert_eq!(kl.value().data(), &[0.0]);
        let eps = row(&g, &[0.1, -0.2, 0.3]);
        assert_eq!(p0.rsample(eps).unwrap().value().data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn lorenz_theta_gradient_matches_finite_differences() {
        let z_prev = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -2.0, 0.5, 8.0]).unwrap();
        let z_next = Tensor::matrix(2, 3, vec![1.1, 2.3, 2.9, -2.4, 0.2, 7.9]).unwrap();
        let report = check_gradients(
            &[Tensor::scalar(27.0), Tensor::scalar(11.0), Tensor::scalar(2.5)],
            |g, v| {
                let bound = BoundParams::from_vars(
                    [SIGMA, RHO, BETA].map(String::from).into_iter().zip(v.iter().copied()),
                );
                let model = GenerativeSpec::lorenz_default().bind(g, &bound)?;
                model
                    .transition(g.constant(z_prev.clone()))?
                    .log_prob(g.constant(z_next.clone()))?
                    .sum()
            },
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn noiseless_trajectory_stays_bounded() {
        let th = LorenzTheta::default();
        let mut z = [1.0, 1.0, 1.0];
        for _ in 0..100 {
            let f = th.drift(z);
            for i in 0..3 {
                z[i] += 0.01 * f[i];
            }
            assert!(z.iter().all(|v| v.abs() < 1e3));
        }
    }

    fn gated_spec() -> GenerativeSpec {
        GenerativeSpec::GatedBernoulli {
            latent_dim: 3,
            obs_dim: 4,
            emission_hidden: 5,
        }
    }

    #[test]
    fn gated_transition_gate_off_is_linear() {
        let spec = gated_spec();
        let mut p = ParamSet::new();
        spec.init_params(&mut substream(5, "init", 0), None, &mut p);
        // Gate head saturated to zero; proposed-mean head zeroed.
        *p.get_mut("gen.trans.gate.w2").unwrap() = Tensor::zeros(&[3, 3]);
        *p.get_mut("gen.trans.gate.b2").unwrap() = Tensor::full(&[3], -50.0);
        *p.get_mut("gen.trans.lin.w").unwrap() =
            Tensor::matrix(3, 3, vec![0.5, 0.1, 0.0, -0.2, 1.0, 0.3, 0.0, 0.0, 2.0]).unwrap();
        *p.get_mut("gen.trans.lin.b").unwrap() = Tensor::vector(vec![0.1, 0.2, 0.3]);

        let g = Graph::new();
        let model = spec.bind(&g, &p.bind(&g)).unwrap();
        let z = row(&g, &[1.0, -2.0, 0.5]);
        let mean = model.transition(z).unwrap().mean.value();
        let BoundGenerative::Gated(m) = &model else { unreachable!() };
        let lin = m.linear.apply(z).unwrap().value();
        for (a, b) in mean.data().iter().zip(lin.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gated_transition_zero_heads_leave_scaled_linear_branch() {
        let spec = gated_spec();
        let mut p = ParamSet::new();
        spec.init_params(&mut substream(6, "init", 0), None, &mut p);
        for name in ["gen.trans.prop.w2", "gen.trans.gate.w2"] {
            *p.get_mut(name).unwrap() = Tensor::zeros(&[3, 3]);
        }
        let g = Graph::new();
        let model = spec.bind(&g, &p.bind(&g)).unwrap();
        let z = row(&g, &[0.3, -0.7, 1.2]);
        let tr = model.transition(z).unwrap();
        // g = sigmoid(0) = 1/2 and h(z) = 0, so mean = W z / 2 = z / 2 at init.
        for (a, b) in tr.mean.value().data().iter().zip([0.3, -0.7, 1.2]) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        assert_eq!(tr.log_var.value().data(), &[0.0; 3]);
    }

    #[test]
    fn zero_emission_network_gives_even_odds() {
        let spec = gated_spec();
        let mut p = ParamSet::new();
        spec.init_params(&mut substream(7, "init", 0), None, &mut p);
        *p.get_mut("gen.emit.w2").unwrap() = Tensor::zeros(&[5, 4]);
        let g = Graph::new();
        let model = spec.bind(&g, &p.bind(&g)).unwrap();
        let Emission::Bernoulli(b) = model.emission(row(&g, &[1.0, 2.0, 3.0])).unwrap() else {
            panic!("gated emission is bernoulli")
        };
        assert_eq!(b.probs().data(), &[0.5; 4]);
    }

    #[test]
    fn gated_gradients_match_finite_differences() {
        let spec = gated_spec();
        let mut p = ParamSet::new();
        spec.init_params(&mut substream(8, "init", 0), None, &mut p);
        let names: Vec<String> = p.names().cloned().collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let z_prev = Tensor::matrix(2, 3, vec![0.2, -0.5, 0.9, 1.1, 0.0, -0.3]).unwrap();
        let z = Tensor::matrix(2, 3, vec![0.1, -0.4, 1.0, 0.9, 0.2, -0.1]).unwrap();
        let x = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let report = check_gradients(
            &inputs,
            |g, v| {
                let bound = BoundParams::from_vars(names.iter().cloned().zip(v.iter().copied()));
                let model = spec.bind(g, &bound)?;
                let tr = model.transition(g.constant(z_prev.clone()))?;
                let zv = g.constant(z.clone());
                let lp = tr.log_prob(zv)?;
                let em = model.emission(zv)?.log_prob(g.constant(x.clone()))?;
                lp.add(em)?.sum()
            },
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn joint_log_prob_single_step() {
        let params = lorenz_params(LorenzTheta::default());
        let g = Graph::new();
        let model = GenerativeSpec::lorenz_default()
            .bind(&g, &params.bind(&g))
            .unwrap();
        let x = row(&g, &[0.5, 0.1, -0.2]);
        let z = row(&g, &[0.4, 0.0, -0.1]);
        let m = g.constant(Tensor::vector(vec![1.0]));
        let joint = model.joint_log_prob(&[x], &[z], &[m]).unwrap().item();
        let direct = model.initial_prior(1).log_prob(z).unwrap().item()
            + model.emission(z).unwrap().log_prob(x).unwrap().item();
        assert_eq!(joint, direct);
        assert!(model.joint_log_prob(&[x], &[z, z], &[m]).is_err());
    }
}
