//! Training bounds and their gradient surrogates.
//!
//! Per sequence and sample the DKF-factorized log weight is
//! `Σ_t m_t [log p(x_t|z_t) − c·KL_t]`, where `KL_1` is taken against the
//! initial prior and `KL_t` against the transition at the sampled `z_{t−1}`.
//! The DKF bound uses one sample. The importance-weighted bound draws `K`
//! samples per sequence and forms the surrogate `Σ_k w̃_k log w_k` with the
//! normalized weights `w̃` held constant, whose gradient is `Σ_k w̃_k ∇ log w_k`.
//!
//! The sampled log weight `log p(x, z) − log q(z | x)` is also provided; it
//! is what likelihood estimates use, and training can opt into it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Batch;
use crate::distributions::gaussian_kl;
use crate::error::{Error, Result};
use crate::generative::BoundGenerative;
use crate::inference::PosteriorRollout;
use crate::model::BoundModel;
use crate::rng::standard_normals;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Dkf,
    Iwdkf,
}

/// How training log weights are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightForm {
    /// Reconstruction minus closed-form KL terms.
    #[default]
    Analytic,
    /// `log p(x, z) − log q(z | x)` at the drawn latents.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub kind: BoundKind,
    /// Importance samples per sequence.
    pub k: usize,
    /// KL warm-up length in minibatch visits; 0 disables annealing.
    pub anneal_total_updates: u64,
    /// Inner Monte Carlo samples; only 1 is supported.
    pub mc_samples: usize,
    pub weight_form: WeightForm,
    /// Backpropagate into the inference network.
    pub inference_grad: bool,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            kind: BoundKind::Dkf,
            k: 1,
            anneal_total_updates: 0,
            mc_samples: 1,
            weight_form: WeightForm::Analytic,
            inference_grad: true,
        }
    }
}

impl BoundConfig {
    pub fn iwdkf(k: usize) -> Self {
        Self {
            kind: BoundKind::Iwdkf,
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.mc_samples != 1 {
            return Err(Error::Config("only one inner Monte Carlo sample is supported".into()));
        }
        if self.kind == BoundKind::Dkf && self.k != 1 {
            return Err(Error::Config("the DKF bound uses a single sample; set K = 1".into()));
        }
        Ok(())
    }
}

/// `min(1, update_index / total)`, or 1 when annealing is off.
pub fn anneal_coef(update_index: i64, total: i64) -> Result<f64> {
    if update_index < 0 || total < 0 {
        return Err(Error::Domain {
            op: "anneal_coef",
            detail: format!("update {update_index}, total {total}"),
        });
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok((update_index as f64 / total as f64).min(1.0))
}

/// `max + ln Σ exp(v − max)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogWeights {
    pub logw: Vec<f64>,
    pub tilde: Vec<f64>,
}

/// Self-normalized weights `exp(logw_k − logsumexp(logw))`, as plain values.
pub fn normalize_weights(logw: &[f64]) -> LogWeights {
    let lse = log_sum_exp(logw);
    let tilde = if lse == f64::NEG_INFINITY {
        vec![1.0 / logw.len() as f64; logw.len()]
    } else {
        logw.iter().map(|v| (v - lse).exp()).collect()
    };
    LogWeights {
        logw: logw.to_vec(),
        tilde,
    }
}

/// Standard-normal noise for a rollout: `steps` tensors of `[rows, dim]`.
pub fn draw_eps(rng: &mut impl Rng, steps: usize, rows: usize, dim: usize) -> Vec<Tensor> {
    (0..steps)
        .map(|_| {
            Tensor::matrix(rows, dim, standard_normals(rng, rows * dim)).expect("sized draw")
        })
        .collect()
}

/// Masked per-row sums over one rollout, each `[rows]`.
pub struct RolloutTerms<'g> {
    /// `Σ_t m_t log p(x_t | z_t)`.
    pub recon: Var<'g>,
    /// `Σ_t m_t KL(q_t ‖ p_t)` with `p_1` the initial prior.
    pub kl: Var<'g>,
}

fn masked_sum<'g>(parts: impl IntoIterator<Item = Result<Var<'g>>>) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for p in parts {
        let p = p?;
        total = Some(match total {
            Some(acc) => acc.add(p)?,
            None => p,
        });
    }
    total.ok_or_else(|| Error::Data("no time steps".into()))
}

fn check_rollout(xs: &[Var<'_>], masks: &[Var<'_>], rollout: &PosteriorRollout<'_>) -> Result<()> {
    if xs.len() != rollout.len() || masks.len() != rollout.len() || xs.is_empty() {
        return Err(Error::Data(format!(
            "{} observation steps, {} masks, rollout of {}",
            xs.len(),
            masks.len(),
            rollout.len()
        )));
    }
    let rows = rollout.z[0].shape()[0];
    if xs[0].shape()[0] != rows {
        return Err(Error::ShapeMismatch {
            op: "log_weight",
            lhs: xs[0].shape(),
            rhs: rollout.z[0].shape(),
        });
    }
    Ok(())
}

pub fn rollout_terms<'g>(
    generative: &BoundGenerative<'g>,
    xs: &[Var<'g>],
    masks: &[Var<'g>],
    rollout: &PosteriorRollout<'g>,
) -> Result<RolloutTerms<'g>> {
    check_rollout(xs, masks, rollout)?;
    let recon = masked_sum(
        rollout
            .z
            .iter()
            .zip(xs)
            .zip(masks)
            .map(|((z, x), m)| generative.emission(*z)?.log_prob(*x)?.mul(*m)),
    )?;
    let rows = rollout.z[0].shape()[0];
    let kl = masked_sum((0..rollout.len()).map(|t| {
        let prior = if t == 0 {
            generative.initial_prior(rows)
        } else {
            generative.transition(rollout.z[t - 1])?
        };
        gaussian_kl(&rollout.q[t], &prior)?.mul(masks[t])
    }))?;
    Ok(RolloutTerms { recon, kl })
}

/// `Σ_t m_t [log p(z_t | z_{t−1}) − log q(z_t | z_{t−1}, x)]` per row.
pub fn latent_log_ratio<'g>(
    generative: &BoundGenerative<'g>,
    masks: &[Var<'g>],
    rollout: &PosteriorRollout<'g>,
) -> Result<Var<'g>> {
    let rows = rollout.z.first().map_or(0, |z| z.shape()[0]);
    masked_sum((0..rollout.len()).map(|t| {
        let prior = if t == 0 {
            generative.initial_prior(rows)
        } else {
            generative.transition(rollout.z[t - 1])?
        };
        prior
            .log_prob(rollout.z[t])?
            .sub(rollout.q[t].log_prob(rollout.z[t])?)?
            .mul(masks[t])
    }))
}

/// Unnormalized log importance weight `log p(x, z) − log q(z | x)` per row.
pub fn log_weight<'g>(
    generative: &BoundGenerative<'g>,
    xs: &[Var<'g>],
    masks: &[Var<'g>],
    rollout: &PosteriorRollout<'g>,
) -> Result<Var<'g>> {
    check_rollout(xs, masks, rollout)?;
    generative
        .joint_log_prob(xs, &rollout.z, masks)?
        .sub(rollout.log_q(masks)?)
}

/// A bound evaluated on one batch.
pub struct Objective<'g> {
    /// Scalar whose gradient is the estimator; to be maximized.
    pub surrogate: Var<'g>,
    /// Bound value per sequence.
    pub bound: Vec<f64>,
    /// KL term per sequence, averaged over samples.
    pub kl: Vec<f64>,
}

fn check_anneal(c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Domain {
            op: "anneal",
            detail: format!("coefficient {c} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Per-row log weights for `k` rollouts of `batch`; rows are sample-major.
pub fn sample_log_weights<'g>(
    graph: &'g Graph,
    model: &BoundModel<'g>,
    batch: &Batch,
    eps: &[Tensor],
    k: usize,
    anneal: f64,
    form: WeightForm,
) -> Result<(Var<'g>, Var<'g>)> {
    check_anneal(anneal)?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let (xs, masks) = batch.bind(graph, 1)?;
    let hidden = model.inference.encode(&xs, &masks)?;
    let rollout = model.inference.rollout_from_hidden(&hidden, eps, k)?;
    let (xs, masks) = if k == 1 {
        (xs, masks)
    } else {
        batch.bind(graph, k)?
    };
    let terms = rollout_terms(&model.generative, &xs, &masks, &rollout)?;
    let logw = match form {
        WeightForm::Analytic => terms.recon.sub(terms.kl.scale(anneal)?)?,
        WeightForm::Sampled => {
            let ratio = latent_log_ratio(&model.generative, &masks, &rollout)?;
            terms.recon.add(ratio.scale(anneal)?)?
        }
    };
    Ok((logw, terms.kl))
}

/// Single-sample DKF bound with closed-form KL terms.
pub fn dkf_bound<'g>(
    graph: &'g Graph,
    model: &BoundModel<'g>,
    batch: &Batch,
    eps: &[Tensor],
    anneal: f64,
) -> Result<Objective<'g>> {
    let (logw, kl) = sample_log_weights(graph, model, batch, eps, 1, anneal, WeightForm::Analytic)?;
    Ok(Objective {
        surrogate: logw.sum()?,
        bound: logw.value().data().to_vec(),
        kl: kl.value().data().to_vec(),
    })
}

/// Importance-weighted surrogate over `k` samples per sequence.
/// `eps[t]` is `[k * B, n_z]`, sample-major.
pub fn iwdkf_loss<'g>(
    graph: &'g Graph,
    model: &BoundModel<'g>,
    batch: &Batch,
    eps: &[Tensor],
    k: usize,
    anneal: f64,
    form: WeightForm,
) -> Result<Objective<'g>> {
    let (logw, kl) = sample_log_weights(graph, model, batch, eps, k, anneal, form)?;
    let b = batch.size();
    let values = logw.value();
    let kl_values = kl.value();
    let mut tilde = vec![0.0; k * b];
    let mut bound = Vec::with_capacity(b);
    let mut kl_mean = Vec::with_capacity(b);
    let ln_k = (k as f64).ln();
    for i in 0..b {
        let column: Vec<f64> = (0..k).map(|s| values.data()[s * b + i]).collect();
        let w = normalize_weights(&column);
        for (s, t) in w.tilde.iter().enumerate() {
            tilde[s * b + i] = *t;
        }
        bound.push(log_sum_exp(&column) - ln_k);
        kl_mean.push((0..k).map(|s| kl_values.data()[s * b + i]).sum::<f64>() / k as f64);
    }
    let weights = graph.constant(Tensor::matrix(k, b, tilde)?);
    let surrogate = logw
        .reshape(&[k, b])?
        .mul(weights)?
        .sum_axis(0)?
        .sum()?;
    Ok(Objective {
        surrogate,
        bound,
        kl: kl_mean,
    })
}
