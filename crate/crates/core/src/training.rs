//! Adam training with epoch-aggregated or per-minibatch updates, KL
//! annealing, early stopping and checkpoints.
//!
//! Randomness for minibatch `j` of epoch `e` comes from streams keyed by
//! `(seed, e, j)`, so a checkpoint only needs the seed and the next epoch
//! index to resume bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{epoch_shuffle_seed, minibatches, Batch, SequenceDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, exact_sum, BoundReport, EvalConfig, ParamErrors};
use crate::model::{ModelBundle, ModelSpec};
use crate::objectives::{anneal_coef, dkf_bound, draw_eps, iwdkf_loss, BoundConfig, BoundKind};
use crate::params::{GradSet, ParamSet};
use crate::rng::substream2;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            let mut z = ParamSet::new();
            for (n, t) in p.iter() {
                z.insert(n.clone(), crate::Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }
}

/// One bias-corrected Adam step descending `grads`.
pub fn adam_step(params: &mut ParamSet, grads: &GradSet, state: &mut AdamState) -> Result<()> {
    for name in params.names() {
        if grads.get(name).is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name).expect("checked above");
        let m = state.first.get_mut(&name)?;
        let v = state.second.get_mut(&name)?;
        let p = params.get_mut(&name)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (((w, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// Accumulate over every minibatch, then update once.
    #[default]
    Epoch,
    /// Update after each minibatch.
    Minibatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub bound: BoundConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub update_mode: UpdateMode,
    /// Samples for the validation estimate; defaults to the training `K`.
    pub eval_k: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bound: BoundConfig::default(),
            batch_size: 10,
            max_epochs: 100,
            patience: 30,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: Some(10.0),
            update_mode: UpdateMode::Epoch,
            eval_k: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bound.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("minibatch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip norm must be positive".into()));
            }
        }
        if self.eval_k == Some(0) {
            return Err(Error::Config("evaluation K must be at least 1".into()));
        }
        Ok(())
    }

    pub fn eval_k(&self) -> usize {
        self.eval_k.unwrap_or(self.bound.k)
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k: self.eval_k(),
            seed: self.seed,
            threads: self.threads.max(1),
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub adam: AdamState,
    /// Minibatch visits so far; drives the anneal schedule.
    pub updates: u64,
    /// Index of the next epoch to run.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(bundle: ModelBundle, adam: AdamConfig) -> Self {
        let adam = AdamState::new(adam, &bundle.params);
        Self {
            bundle,
            adam,
            updates: 0,
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Training bound per valid step.
    pub bound: f64,
    /// KL term per valid step.
    pub kl: f64,
    /// `(update index, anneal coefficient)` for every minibatch visit.
    pub anneal: Vec<(u64, f64)>,
    /// Gradient norms before clipping, one per optimizer step.
    pub grad_norms: Vec<f64>,
}

struct BatchResult {
    grads: GradSet,
    bound: Vec<f64>,
    kl: Vec<f64>,
}

fn batch_gradients(
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    batch: &Batch,
    epoch: u64,
    index: usize,
    anneal: f64,
    scale: f64,
) -> Result<BatchResult> {
    let k = cfg.bound.k;
    let nz = bundle.spec.inference.latent_dim;
    let mut rng = substream2(cfg.seed, "rollout", epoch, index as u64);
    let eps = draw_eps(&mut rng, batch.steps(), k * batch.size(), nz);
    let graph = Graph::new();
    let model = bundle.bind(&graph, cfg.bound.inference_grad)?;
    let obj = match cfg.bound.kind {
        BoundKind::Dkf => dkf_bound(&graph, &model, batch, &eps, anneal)?,
        BoundKind::Iwdkf => iwdkf_loss(&graph, &model, batch, &eps, k, anneal, cfg.bound.weight_form)?,
    };
    let loss = obj.surrogate.scale(-scale)?;
    let grads = model.params.named_grads(&loss.backward()?);
    if !grads.is_finite() {
        return Err(Error::NonFinite { op: "gradient" });
    }
    Ok(BatchResult {
        grads,
        bound: obj.bound,
        kl: obj.kl,
    })
}

fn apply_update(state: &mut TrainState, cfg: &TrainConfig, mut grads: GradSet) -> Result<f64> {
    let norm = match cfg.clip_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    adam_step(&mut state.bundle.params, &grads, &mut state.adam)?;
    if !state.bundle.params.iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    Ok(norm)
}

/// One pass over `ds` in seeded minibatch order.
pub fn train_epoch(ds: &SequenceDataset, state: &mut TrainState, cfg: &TrainConfig) -> Result<EpochMetrics> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let epoch = state.epoch;
    let batches = minibatches(ds, cfg.batch_size, Some(epoch_shuffle_seed(cfg.seed, epoch)))?;
    let total = cfg.bound.anneal_total_updates as i64;
    let anneal: Vec<(u64, f64)> = (0..batches.len() as u64)
        .map(|j| {
            let u = state.updates + j;
            Ok((u, anneal_coef(u as i64, total)?))
        })
        .collect::<Result<_>>()?;

    let mut bounds = Vec::with_capacity(ds.len());
    let mut kls = Vec::with_capacity(ds.len());
    let mut grad_norms = Vec::new();
    match cfg.update_mode {
        UpdateMode::Epoch => {
            let scale = 1.0 / ds.total_steps() as f64;
            let bundle = &state.bundle;
            let results = parallel_map(batches.len(), cfg.threads, |j| {
                batch_gradients(bundle, cfg, &batches[j], epoch, j, anneal[j].1, scale)
            })?;
            let mut acc = GradSet::zeros_like(&state.bundle.params);
            for r in results {
                acc.accumulate(&r.grads)?;
                bounds.extend(r.bound);
                kls.extend(r.kl);
            }
            grad_norms.push(apply_update(state, cfg, acc)?);
        }
        UpdateMode::Minibatch => {
            for (j, batch) in batches.iter().enumerate() {
                let scale = 1.0 / batch.valid_steps() as f64;
                let r = batch_gradients(&state.bundle, cfg, batch, epoch, j, anneal[j].1, scale)?;
                bounds.extend(r.bound);
                kls.extend(r.kl);
                grad_norms.push(apply_update(state, cfg, r.grads)?);
            }
        }
    }
    state.updates += batches.len() as u64;
    state.epoch += 1;
    let steps = ds.total_steps() as f64;
    Ok(EpochMetrics {
        epoch,
        bound: exact_sum(&bounds) / steps,
        kl: exact_sum(&kls) / steps,
        anneal,
        grad_norms,
    })
}

/// `f(0..n)` on up to `threads` workers, results in index order.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let per = n.div_ceil(threads);
    thread::scope(|scope| {
        for (c, group) in slots.chunks_mut(per).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, slot) in group.iter_mut().enumerate() {
                    *slot = Some(f(c * per + i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("filled")).collect()
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_bound: f64,
    pub train_kl: f64,
    pub val_ll: f64,
    pub val_kl: f64,
    pub rmse_z: Option<f64>,
    pub param_errors: Option<ParamErrors>,
}

impl EpochRecord {
    fn new(m: &EpochMetrics, val: &BoundReport) -> Self {
        Self {
            epoch: m.epoch,
            train_bound: m.bound,
            train_kl: m.kl,
            val_ll: val.ll_per_step,
            val_kl: val.kl_per_step,
            rmse_z: val.rmse_z,
            param_errors: val.param_errors,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,train_bound,train_kl,val_ll,val_kl,rmse_z,err_sigma,err_rho,err_beta";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        let e = r.param_errors;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_bound,
            r.train_kl,
            r.val_ll,
            r.val_kl,
            opt(r.rmse_z),
            opt(e.map(|e| e.sigma)),
            opt(e.map(|e| e.rho)),
            opt(e.map(|e| e.beta)),
        )
        .expect("writing to a String");
    }
    out
}

/// Early-stopping bookkeeping carried in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub best_val_ll: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_since_best: usize,
}

impl Progress {
    /// Record a validation value; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: u64, val_ll: f64, patience: usize) -> (bool, bool) {
        if self.best_val_ll.is_none_or(|b| val_ll > b) {
            self.best_val_ll = Some(val_ll);
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
            (true, false)
        } else {
            self.epochs_since_best += 1;
            (false, self.epochs_since_best >= patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelSpec,
    pub params: ParamSet,
    pub adam: AdamState,
    pub updates: u64,
    pub rng: RngState,
    pub config: TrainConfig,
    pub progress: Progress,
    /// Validation estimate recorded when this checkpoint was taken.
    pub val_ll: Option<f64>,
}

impl Checkpoint {
    pub fn capture(state: &TrainState, cfg: &TrainConfig, progress: &Progress, val_ll: Option<f64>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: state.bundle.spec.clone(),
            params: state.bundle.params.clone(),
            adam: state.adam.clone(),
            updates: state.updates,
            rng: RngState {
                seed: cfg.seed,
                next_epoch: state.epoch,
            },
            config: cfg.clone(),
            progress: progress.clone(),
            val_ll,
        }
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            bundle: self.bundle(),
            adam: self.adam.clone(),
            updates: self.updates,
            epoch: self.rng.next_epoch,
        }
    }

    pub fn bundle(&self) -> ModelBundle {
        ModelBundle {
            spec: self.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: unsupported checkpoint version {other:?}",
                    path.display()
                )))
            }
        }
        serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub struct FitResult {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub anneal: Vec<(u64, f64)>,
    pub stopped_early: bool,
}

/// Train until `max_epochs` or until validation has not improved for
/// `patience` epochs. `on_epoch` sees every record as it is produced.
pub fn fit(
    train: &SequenceDataset,
    val: &SequenceDataset,
    state: TrainState,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    let progress = Progress {
        best_val_ll: None,
        best_epoch: None,
        epochs_since_best: 0,
    };
    resume(train, val, state, cfg, progress, on_epoch)
}

/// Continue a run from saved progress.
pub fn resume(
    train: &SequenceDataset,
    val: &SequenceDataset,
    mut state: TrainState,
    cfg: &TrainConfig,
    mut progress: Progress,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let eval = cfg.eval_config();
    let mut history = Vec::new();
    let mut anneal = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;
    while (state.epoch as usize) < cfg.max_epochs {
        let m = train_epoch(train, &mut state, cfg)?;
        anneal.extend_from_slice(&m.anneal);
        let report = evaluate(val, &state.bundle, &eval)?;
        let record = EpochRecord::new(&m, &report);
        on_epoch(&record);
        history.push(record);
        let (improved, stop) = progress.observe(m.epoch, report.ll_per_step, cfg.patience);
        if improved {
            best = Some(Checkpoint::capture(&state, cfg, &progress, Some(report.ll_per_step)));
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    let last_ll = history.last().map(|r| r.val_ll);
    let last = Checkpoint::capture(&state, cfg, &progress, last_ll);
    Ok(FitResult {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history,
        anneal,
        stopped_early,
    })
}
