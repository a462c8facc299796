//! Evaluation: importance-sampled log-likelihood, state RMSE and parameter
//! errors.
//!
//! Each sequence draws its evaluation noise from a stream keyed by the run
//! seed and a fingerprint of the sequence content, and per-sequence results
//! are combined with a correctly rounded sum. Estimates are therefore
//! unaffected by sequence order, batch composition and padding.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{Batch, SequenceDataset};
use crate::error::{Error, Result};
use crate::generative::LorenzTheta;
use crate::model::ModelBundle;
use crate::objectives::{log_sum_exp, log_weight, rollout_terms};
use crate::rng::{fingerprint, standard_normals, substream};

/// Rows (samples × sequences) evaluated per graph.
const ROWS_PER_GRAPH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl ParamErrors {
    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma, self.rho, self.beta]
    }
}

pub fn param_errors(estimate: &LorenzTheta, truth: &LorenzTheta) -> ParamErrors {
    ParamErrors {
        sigma: (estimate.sigma - truth.sigma).abs(),
        rho: (estimate.rho - truth.rho).abs(),
        beta: (estimate.beta - truth.beta).abs(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Log-likelihood estimate per valid time step.
    pub ll_per_step: f64,
    /// Closed-form KL term per valid time step, averaged over samples.
    pub kl_per_step: f64,
    pub rmse_z: Option<f64>,
    pub param_errors: Option<ParamErrors>,
    pub theta: Option<LorenzTheta>,
    pub k: usize,
    pub sequences: usize,
    pub steps: usize,
}

/// Sum rounded once from the exact real sum (Shewchuk's partials).
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Round the partials (non-overlapping, increasing magnitude) to one value.
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Evaluation noise for one sequence: `k` blocks of `[T, n_z]` normals.
pub fn sequence_eval_noise(seed: u64, seq: &Tensor, k: usize, latent_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, "eval", fingerprint(seq.data()));
    let len = seq.shape()[0];
    (0..k)
        .map(|_| standard_normals(&mut rng, len * latent_dim))
        .collect()
}

/// Per-sequence `(log p̂(x), KL)` from `k` samples each.
fn score_chunk(
    ds: &SequenceDataset,
    indices: &[usize],
    bundle: &ModelBundle,
    k: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let batch = Batch::from_dataset(ds, indices)?;
    let b = batch.size();
    let nz = bundle.spec.inference.latent_dim;
    let mut eps: Vec<Tensor> = (0..batch.steps())
        .map(|_| Tensor::zeros(&[k * b, nz]))
        .collect();
    for (row, &i) in indices.iter().enumerate() {
        let noise = sequence_eval_noise(seed, &ds.sequences[i], k, nz);
        for (s, block) in noise.iter().enumerate() {
            for (t, step) in block.chunks(nz).enumerate() {
                let r = s * b + row;
                eps[t].data_mut()[r * nz..(r + 1) * nz].copy_from_slice(step);
            }
        }
    }
    let graph = Graph::new();
    let model = bundle.bind_frozen(&graph)?;
    let (xs, masks) = batch.bind(&graph, 1)?;
    let hidden = model.inference.encode(&xs, &masks)?;
    let rollout = model.inference.rollout_from_hidden(&hidden, &eps, k)?;
    let (xs, masks) = if k == 1 { (xs, masks) } else { batch.bind(&graph, k)? };
    let logw = log_weight(&model.generative, &xs, &masks, &rollout)?.value();
    let kl = rollout_terms(&model.generative, &xs, &masks, &rollout)?
        .kl
        .value();
    let ln_k = (k as f64).ln();
    Ok((0..b)
        .map(|i| {
            let column: Vec<f64> = (0..k).map(|s| logw.data()[s * b + i]).collect();
            let kls: Vec<f64> = (0..k).map(|s| kl.data()[s * b + i]).collect();
            (log_sum_exp(&column) - ln_k, exact_sum(&kls) / k as f64)
        })
        .collect())
}

fn chunks(len: usize, k: usize) -> Vec<Vec<usize>> {
    let per = (ROWS_PER_GRAPH / k.max(1)).max(1);
    (0..len)
        .collect::<Vec<_>>()
        .chunks(per)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Run `work` over index chunks on up to `threads` workers; results come
/// back in chunk order.
fn run_chunks<T: Send>(
    parts: &[Vec<usize>],
    threads: usize,
    work: impl Fn(&[usize]) -> Result<Vec<T>> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, parts.len().max(1));
    let mut slots: Vec<Option<Result<Vec<T>>>> = (0..parts.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, p) in slots.iter_mut().zip(parts) {
            *slot = Some(work(p));
        }
    } else {
        let per = parts.len().div_ceil(threads);
        thread::scope(|scope| {
            for (slot_group, part_group) in slots.chunks_mut(per).zip(parts.chunks(per)) {
                let work = &work;
                scope.spawn(move || {
                    for (slot, p) in slot_group.iter_mut().zip(part_group) {
                        *slot = Some(work(p));
                    }
                });
            }
        });
    }
    let mut out = Vec::new();
    for s in slots {
        out.extend(s.expect("every chunk evaluated")?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    pub threads: usize,
}

impl EvalConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, threads: 1 }
    }
}

/// Per-sequence log-likelihood estimates and KL terms.
pub fn score_sequences(ds: &SequenceDataset, bundle: &ModelBundle, cfg: &EvalConfig) -> Result<Vec<(f64, f64)>> {
    if cfg.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    run_chunks(&chunks(ds.len(), cfg.k), cfg.threads, |idx| {
        score_chunk(ds, idx, bundle, cfg.k, cfg.seed)
    })
}

/// `Σ_i [logsumexp_k log w_ik − ln K] / Σ_i T_i`.
pub fn estimate_marginal_ll(ds: &SequenceDataset, bundle: &ModelBundle, k: usize, seed: u64) -> Result<f64> {
    let scores = score_sequences(ds, bundle, &EvalConfig::new(k, seed))?;
    let ll: Vec<f64> = scores.iter().map(|s| s.0).collect();
    Ok(exact_sum(&ll) / ds.total_steps() as f64)
}

/// Posterior mean trajectories from a noise-free rollout, each `[T_i, n_z]`.
pub fn posterior_means(ds: &SequenceDataset, bundle: &ModelBundle, threads: usize) -> Result<Vec<Tensor>> {
    let nz = bundle.spec.inference.latent_dim;
    run_chunks(&chunks(ds.len(), 1), threads, |idx| {
        let batch = Batch::from_dataset(ds, idx)?;
        let b = batch.size();
        let eps: Vec<Tensor> = (0..batch.steps()).map(|_| Tensor::zeros(&[b, nz])).collect();
        let graph = Graph::new();
        let model = bundle.bind_frozen(&graph)?;
        let (xs, masks) = batch.bind(&graph, 1)?;
        let rollout = model.inference.rollout(&xs, &masks, &eps, 1)?;
        let values: Vec<_> = rollout.q.iter().map(|q| q.mean.value()).collect();
        idx.iter()
            .enumerate()
            .map(|(row, _)| {
                let len = batch.lengths[row];
                let data = values[..len]
                    .iter()
                    .flat_map(|m| m.row(row).to_vec())
                    .collect();
                Tensor::matrix(len, nz, data)
            })
            .collect()
    })
}

/// `sqrt((1/T) Σ_t ‖z_t − ẑ_t‖²)` for one `[T, n]` trajectory.
pub fn rmse_states(truth: &Tensor, estimate: &Tensor) -> Result<f64> {
    if truth.shape() != estimate.shape() || truth.ndim() != 2 || truth.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "rmse_states",
            lhs: truth.shape().to_vec(),
            rhs: estimate.shape().to_vec(),
        });
    }
    let sq: f64 = truth
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq / truth.shape()[0] as f64).sqrt())
}

/// Mean over sequences of the per-sequence state RMSE.
pub fn dataset_rmse(ds: &SequenceDataset, bundle: &ModelBundle, threads: usize) -> Result<Option<f64>> {
    let Some(truth) = &ds.true_states else {
        return Ok(None);
    };
    let means = posterior_means(ds, bundle, threads)?;
    let per: Vec<f64> = truth
        .iter()
        .zip(&means)
        .map(|(z, m)| rmse_states(z, m))
        .collect::<Result<_>>()?;
    Ok(Some(exact_sum(&per) / per.len() as f64))
}

/// Full report: likelihood and KL per step, plus ground-truth comparisons
/// when the dataset carries them.
pub fn evaluate(ds: &SequenceDataset, bundle: &ModelBundle, cfg: &EvalConfig) -> Result<BoundReport> {
    let scores = score_sequences(ds, bundle, cfg)?;
    let steps = ds.total_steps();
    let ll: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let kl: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let theta = bundle.theta();
    let param_errors = match (theta, ds.true_theta) {
        (Some(est), Some(truth)) => Some(param_errors(&est, &truth)),
        _ => None,
    };
    Ok(BoundReport {
        ll_per_step: exact_sum(&ll) / steps as f64,
        kl_per_step: exact_sum(&kl) / steps as f64,
        rmse_z: dataset_rmse(ds, bundle, cfg.threads)?,
        param_errors,
        theta,
        k: cfg.k,
        sequences: ds.len(),
        steps,
    })
}
