//! Linear-Gaussian state-space model with exact likelihood and posterior,
//! used to check importance-weighted bounds against the truth.
//!
//! `z_1 ~ N(m0, P0)`, `z_t = A z_{t−1} + N(0, Q)`, `x_t = C z_t + N(0, R)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::log_sum_exp;
use crate::rng::{standard_normals, substream, substream2};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct Lgssm {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
    if !sym {
        return Err(Error::Linalg(format!("{what} is not symmetric")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::Linalg(format!("{what} is not positive definite")))
}

/// `log N(x; mean, cov)` through a Cholesky factor of `cov`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &Cholesky<f64, Dyn>) -> f64 {
    let d = x - mean;
    let l = cov.l();
    let w = l
        .solve_lower_triangular(&d)
        .expect("Cholesky factor has a positive diagonal");
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + w.norm_squared())
}

impl Lgssm {
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, m0: f64, p0: f64) -> Result<Self> {
        let s = |v| DMatrix::from_element(1, 1, v);
        let m = Self {
            a: s(a),
            c: s(c),
            q: s(q),
            r: s(r),
            m0: DVector::from_element(1, m0),
            p0: s(p0),
        };
        m.validate()?;
        Ok(m)
    }

    /// The instance used by the bound-tightness check.
    pub fn default_instance() -> Self {
        Self::scalar(0.9, 1.0, 0.5, 0.3, 0.0, 1.0).expect("valid constants")
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let d = self.c.nrows();
        let ok = self.a.ncols() == n
            && self.c.ncols() == n
            && self.q.shape() == (n, n)
            && self.r.shape() == (d, d)
            && self.m0.len() == n
            && self.p0.shape() == (n, n);
        if !ok {
            return Err(Error::Linalg("inconsistent LGSSM dimensions".into()));
        }
        chol(&self.q, "Q")?;
        chol(&self.r, "R")?;
        chol(&self.p0, "P0")?;
        Ok(())
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let n = self.latent_dim();
        let d = self.obs_dim();
        let lq = chol(&self.q, "Q")?.l();
        let lr = chol(&self.r, "R")?.l();
        let lp = chol(&self.p0, "P0")?.l();
        let mut zs = Vec::with_capacity(len);
        let mut xs = Vec::with_capacity(len);
        for t in 0..len {
            let z = if t == 0 {
                &self.m0 + &lp * DVector::from_vec(standard_normals(rng, n))
            } else {
                &self.a * &zs[t - 1] + &lq * DVector::from_vec(standard_normals(rng, n))
            };
            xs.push(&self.c * &z + &lr * DVector::from_vec(standard_normals(rng, d)));
            zs.push(z);
        }
        Ok((zs, xs))
    }

    /// `log p(x, z)` for full trajectories.
    pub fn joint_log_density(&self, xs: &[DVector<f64>], zs: &[DVector<f64>]) -> Result<f64> {
        let cq = chol(&self.q, "Q")?;
        let cr = chol(&self.r, "R")?;
        let cp = chol(&self.p0, "P0")?;
        let mut total = 0.0;
        for t in 0..zs.len() {
            total += if t == 0 {
                mvn_log_density(&zs[0], &self.m0, &cp)
            } else {
                mvn_log_density(&zs[t], &(&self.a * &zs[t - 1]), &cq)
            };
            total += mvn_log_density(&xs[t], &(&self.c * &zs[t]), &cr);
        }
        Ok(total)
    }
}

/// Exact `log p(x_{1:T})` by the Kalman prediction-error decomposition.
pub fn kalman_log_likelihood(m: &Lgssm, xs: &[DVector<f64>]) -> Result<f64> {
    m.validate()?;
    let mut mean = m.m0.clone();
    let mut cov = m.p0.clone();
    let mut total = 0.0;
    for (t, x) in xs.iter().enumerate() {
        if t > 0 {
            mean = &m.a * &mean;
            cov = &m.a * &cov * m.a.transpose() + &m.q;
        }
        let s = &m.c * &cov * m.c.transpose() + &m.r;
        let s = (&s + s.transpose()) * 0.5;
        let cs = chol(&s, "innovation covariance")?;
        let pred = &m.c * &mean;
        total += mvn_log_density(x, &pred, &cs);
        let gain = &cov * m.c.transpose() * cs.inverse();
        mean = &mean + &gain * (x - pred);
        cov = &cov - &gain * &m.c * &cov;
        cov = (&cov + cov.transpose()) * 0.5;
    }
    Ok(total)
}

/// Exact posterior over the stacked latent path `[z_1; …; z_T]`.
#[derive(Clone, Debug)]
pub struct GaussianPath {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `p(z_{1:T} | x_{1:T})`, from the block-tridiagonal precision of the
/// joint.
pub fn exact_posterior(m: &Lgssm, xs: &[DVector<f64>]) -> Result<GaussianPath> {
    m.validate()?;
    let n = m.latent_dim();
    let len = xs.len();
    if len == 0 {
        return Err(Error::Data("empty observation sequence".into()));
    }
    let inv = |mat: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> { Ok(chol(mat, what)?.inverse()) };
    let p0i = inv(&m.p0, "P0")?;
    let qi = inv(&m.q, "Q")?;
    let ri = inv(&m.r, "R")?;
    let mut prec = DMatrix::zeros(n * len, n * len);
    let mut info = DVector::zeros(n * len);
    let at_qi = m.a.transpose() * &qi;
    let ct_ri = m.c.transpose() * &ri;
    let obs_prec = &ct_ri * &m.c;
    for t in 0..len {
        let s = t * n;
        let mut block = obs_prec.clone();
        if t == 0 {
            block += &p0i;
            info.rows_mut(s, n).copy_from(&(&p0i * &m.m0));
        } else {
            block += &qi;
        }
        if t + 1 < len {
            block += &at_qi * &m.a;
            let cross = -(&at_qi);
            prec.view_mut((s, s + n), (n, n)).copy_from(&cross);
            prec.view_mut((s + n, s), (n, n)).copy_from(&cross.transpose());
        }
        let mut diag = prec.view_mut((s, s), (n, n));
        diag += &block;
        let add = &ct_ri * &xs[t];
        let mut slot = info.rows_mut(s, n);
        slot += add;
    }
    let cp = chol(&prec, "posterior precision")?;
    let cov = cp.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianPath {
        mean: cp.solve(&info),
        cov,
    })
}

/// Proposal `N(posterior mean, inflation · posterior covariance)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub inflation: f64,
}

impl Default for ProposalSpec {
    fn default() -> Self {
        Self { inflation: 2.0 }
    }
}

/// Draws `K`-sample estimates `logsumexp(log w) − ln K` under a fixed
/// Gaussian proposal over the whole latent path.
pub struct ImportanceSampler<'a> {
    model: &'a Lgssm,
    xs: &'a [DVector<f64>],
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    proposal: Cholesky<f64, Dyn>,
}

impl<'a> ImportanceSampler<'a> {
    pub fn new(model: &'a Lgssm, xs: &'a [DVector<f64>], spec: ProposalSpec) -> Result<Self> {
        if !(spec.inflation > 0.0) {
            return Err(Error::Config("proposal inflation must be positive".into()));
        }
        let post = exact_posterior(model, xs)?;
        let cov = post.cov * spec.inflation;
        let proposal = chol(&cov, "proposal covariance")?;
        Ok(Self {
            model,
            xs,
            mean: post.mean,
            factor: proposal.l(),
            proposal,
        })
    }

    pub fn log_weight(&self, rng: &mut impl Rng) -> Result<f64> {
        let n = self.model.latent_dim();
        let eps = DVector::from_vec(standard_normals(rng, self.mean.len()));
        let z = &self.mean + &self.factor * eps;
        let path: Vec<DVector<f64>> = (0..self.xs.len())
            .map(|t| z.rows(t * n, n).into_owned())
            .collect();
        let log_q = mvn_log_density(&z, &self.mean, &self.proposal);
        Ok(self.model.joint_log_density(self.xs, &path)? - log_q)
    }

    pub fn estimate(&self, k: usize, rng: &mut impl Rng) -> Result<f64> {
        let logw = (0..k).map(|_| self.log_weight(rng)).collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&logw) - (k as f64).ln())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRow {
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub exact: f64,
    pub trials: usize,
    pub rows: Vec<MonotonicityRow>,
}

pub const MIN_TRIALS: usize = 100;

impl MonotonicityReport {
    /// Consecutive means never drop by more than two combined standard
    /// errors.
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let se = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            w[1].mean >= w[0].mean - 2.0 * se
        })
    }

    /// Every mean is at most the exact value plus two standard errors.
    pub fn bounded(&self) -> bool {
        let slack = 1e-9 * self.exact.abs().max(1.0);
        self.rows
            .iter()
            .all(|r| r.mean <= self.exact + 2.0 * r.stderr + slack)
    }

    pub fn passes(&self) -> bool {
        self.monotone() && self.bounded()
    }
}

/// Mean and standard error of the `K`-sample estimate over `trials`
/// independent draws for each `K`, next to the exact log-likelihood.
pub fn monotonicity_report(
    m: &Lgssm,
    xs: &[DVector<f64>],
    k_list: &[usize],
    trials: usize,
    proposal: ProposalSpec,
    seed: u64,
) -> Result<MonotonicityReport> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::Config("K list must be non-empty and positive".into()));
    }
    let sampler = ImportanceSampler::new(m, xs, proposal)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for (j, &k) in k_list.iter().enumerate() {
        let draws = (0..trials)
            .map(|i| sampler.estimate(k, &mut substream2(seed, "oracle", j as u64, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mean = draws.iter().sum::<f64>() / trials as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        rows.push(MonotonicityRow {
            k,
            mean,
            stderr: (var / trials as f64).sqrt(),
        });
    }
    Ok(MonotonicityReport {
        exact: kalman_log_likelihood(m, xs)?,
        trials,
        rows,
    })
}

/// Observations of length `len` drawn from `m` under `seed`.
pub fn oracle_data(m: &Lgssm, len: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    Ok(m.sample(len, &mut substream(seed, "data", 0))?.1)
}
