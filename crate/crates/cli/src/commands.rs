use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqvi::data::{self, gen_synthetic_binary, load_pianoroll, LorenzConfig, SequenceDataset};
use seqvi::metrics::{evaluate, BoundReport, EvalConfig};
use seqvi::model::{ModelBundle, ModelSpec};
use seqvi::objectives::{BoundKind, WeightForm};
use seqvi::oracle::{monotonicity_report, oracle_data, Lgssm, MonotonicityReport, ProposalSpec};
use seqvi::rng::substream;
use seqvi::training::{fit, metrics_csv, Checkpoint, TrainConfig, TrainState, UpdateMode};

use crate::run::{load_config, threads_from_env, CliError, CliResult, RunDir};
use crate::{
    BoundChoice, EvalArgs, GenBinaryArgs, GenLorenzArgs, ModelChoice, OracleArgs, TrainArgs, UpdateChoice,
    WeightChoice,
};

/// Parse `"a,b,c"` into three split sizes, or `"a"` into a train size with
/// the other two left unchanged.
fn parse_seqs(text: &str, current: (usize, usize, usize)) -> CliResult<(usize, usize, usize)> {
    let parts = parse_list(text, "--seqs")?;
    match parts.as_slice() {
        [a] => Ok((*a, current.1, current.2)),
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(CliError::Usage(format!("--seqs expects N or TRAIN,VAL,TEST, got {text:?}"))),
    }
}

fn parse_list(text: &str, flag: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{flag}: {p:?} is not a non-negative integer")))
        })
        .collect()
}

fn save_splits(run: &mut RunDir, train: &SequenceDataset, val: &SequenceDataset, test: &SequenceDataset) -> CliResult<()> {
    for (name, ds) in [("train.json", train), ("val.json", val), ("test.json", test)] {
        ds.save(run.file(name))?;
    }
    Ok(())
}

pub fn gen_lorenz(a: GenLorenzArgs) -> CliResult<()> {
    let mut cfg = load_config(&LorenzConfig::default(), a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = &a.seqs {
        (cfg.train, cfg.val, cfg.test) = parse_seqs(s, (cfg.train, cfg.val, cfg.test))?;
    }
    if let Some(v) = a.len {
        cfg.len = v;
    }
    if let Some(v) = a.ts {
        cfg.ts = v;
    }
    if let Some(v) = a.noise_var {
        cfg.noise_var = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    cfg.validate()?;
    let mut run = RunDir::open(&a.common.out, a.common.force)?;
    let splits = data::gen_lorenz(&cfg)?;
    save_splits(&mut run, &splits.train, &splits.val, &splits.test)?;
    println!(
        "wrote {}/{}/{} Lorenz sequences of length {} to {}",
        cfg.train,
        cfg.val,
        cfg.test,
        cfg.len,
        run.dir.display()
    );
    let seed = cfg.seed;
    run.finish("gen-lorenz", &cfg, seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryConfig {
    pub obs_dim: usize,
    pub len: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for BinaryConfig {
    fn default() -> Self {
        Self {
            obs_dim: 16,
            len: 30,
            train: 64,
            val: 16,
            test: 16,
            seed: 0,
        }
    }
}

pub fn gen_binary(a: GenBinaryArgs) -> CliResult<()> {
    let mut cfg = load_config(&BinaryConfig::default(), a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = &a.seqs {
        (cfg.train, cfg.val, cfg.test) = parse_seqs(s, (cfg.train, cfg.val, cfg.test))?;
    }
    if let Some(v) = a.len {
        cfg.len = v;
    }
    if let Some(v) = a.dim {
        cfg.obs_dim = v;
    }
    if cfg.len == 0 || cfg.obs_dim == 0 || cfg.train == 0 || cfg.val == 0 || cfg.test == 0 {
        return Err(CliError::Usage(
            "length, width and every split size must be at least 1".into(),
        ));
    }
    let mut run = RunDir::open(&a.common.out, a.common.force)?;
    let total = cfg.train + cfg.val + cfg.test;
    let all = gen_synthetic_binary(cfg.obs_dim, cfg.len, total, cfg.seed)?;
    let idx: Vec<usize> = (0..total).collect();
    let (tr, rest) = idx.split_at(cfg.train);
    let (va, te) = rest.split_at(cfg.val);
    save_splits(&mut run, &all.subset(tr)?, &all.subset(va)?, &all.subset(te)?)?;
    println!(
        "wrote {}/{}/{} binary sequences ({} channels, length {}) to {}",
        cfg.train,
        cfg.val,
        cfg.test,
        cfg.obs_dim,
        cfg.len,
        run.dir.display()
    );
    let seed = cfg.seed;
    run.finish("gen-binary", &cfg, seed)
}

/// Merged settings of a training run, echoed into the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub model: ModelChoice,
    /// Encoder width; 32 for Lorenz, 200 for the gated model when unset.
    pub rnn_dim: Option<usize>,
    /// Gated model only; 100 when unset.
    pub latent_dim: Option<usize>,
    /// Gated model only; 100 when unset.
    pub emission_hidden: Option<usize>,
    /// Initial Lorenz parameters are the truth (or the defaults) scaled by
    /// `1 ± u`, `u ≤ theta_init_frac`.
    pub theta_init_frac: f64,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            data: None,
            model: ModelChoice::Lorenz,
            rnn_dim: None,
            latent_dim: None,
            emission_hidden: None,
            theta_init_frac: 0.2,
            train: TrainConfig::default(),
        }
    }
}

impl TrainRun {
    fn apply(&mut self, a: &TrainArgs) -> CliResult<()> {
        if let Some(d) = &a.data {
            self.data = Some(d.clone());
        }
        if let Some(m) = a.model {
            self.model = m;
        }
        let t = &mut self.train;
        if let Some(b) = a.bound {
            t.bound.kind = match b {
                BoundChoice::Dkf => BoundKind::Dkf,
                BoundChoice::Iwdkf => BoundKind::Iwdkf,
            };
        }
        if let Some(k) = a.k {
            t.bound.k = k;
        }
        if let Some(v) = a.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = a.batch {
            t.batch_size = v;
        }
        if let Some(v) = a.lr {
            t.adam.lr = v;
        }
        if let Some(v) = a.anneal_updates {
            t.bound.anneal_total_updates = v;
        }
        if let Some(v) = a.patience {
            t.patience = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(m) = a.update_mode {
            t.update_mode = match m {
                UpdateChoice::Epoch => UpdateMode::Epoch,
                UpdateChoice::Minibatch => UpdateMode::Minibatch,
            };
        }
        if let Some(w) = a.weight_form {
            t.bound.weight_form = match w {
                WeightChoice::Analytic => WeightForm::Analytic,
                WeightChoice::Sampled => WeightForm::Sampled,
            };
        }
        if a.freeze_inference {
            t.bound.inference_grad = false;
        }
        if let Some(v) = a.k_val {
            t.eval_k = Some(v);
        }
        if a.no_clip && a.clip_norm.is_some() {
            return Err(CliError::Usage("--clip-norm and --no-clip conflict".into()));
        }
        if let Some(v) = a.clip_norm {
            t.clip_norm = Some(v);
        }
        if a.no_clip {
            t.clip_norm = None;
        }
        if let Some(v) = a.rnn_dim {
            self.rnn_dim = Some(v);
        }
        if let Some(v) = a.latent_dim {
            self.latent_dim = Some(v);
        }
        if let Some(v) = a.emission_hidden {
            self.emission_hidden = Some(v);
        }
        if let Some(v) = a.theta_init_frac {
            self.theta_init_frac = v;
        }
        if !(0.0..1.0).contains(&self.theta_init_frac) {
            return Err(CliError::Usage("--theta-init-frac must lie in [0, 1)".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    fn spec(&self, obs_dim: usize) -> CliResult<ModelSpec> {
        let spec = match self.model {
            ModelChoice::Lorenz => {
                if obs_dim != 3 {
                    return Err(CliError::Usage(format!(
                        "the Lorenz model needs 3-dimensional observations, data has {obs_dim}"
                    )));
                }
                ModelSpec::lorenz(self.rnn_dim.unwrap_or(32))
            }
            ModelChoice::GatedBernoulli => ModelSpec::gated_bernoulli(
                obs_dim,
                self.latent_dim.unwrap_or(100),
                self.rnn_dim.unwrap_or(200),
                self.emission_hidden.unwrap_or(100),
            ),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Train and validation splits from a directory holding either
/// `train.json`/`val.json` or piano-roll `train.jsonl`/`val.jsonl`.
fn load_train_val(dir: &Path) -> CliResult<(SequenceDataset, SequenceDataset)> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("--data {} is not a directory", dir.display())));
    }
    let json = (dir.join("train.json"), dir.join("val.json"));
    if json.0.exists() && json.1.exists() {
        return Ok((SequenceDataset::load(&json.0)?, SequenceDataset::load(&json.1)?));
    }
    let roll = (dir.join("train.jsonl"), dir.join("val.jsonl"));
    if roll.0.exists() && roll.1.exists() {
        return Ok((load_pianoroll(&roll.0)?, load_pianoroll(&roll.1)?));
    }
    Err(CliError::Usage(format!(
        "{} holds neither train.json/val.json nor train.jsonl/val.jsonl",
        dir.display()
    )))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut run_cfg = load_config(&TrainRun::default(), a.common.config.as_deref())?;
    run_cfg.apply(&a)?;
    run_cfg.train.threads = threads_from_env()?;
    let data_dir = run_cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let (train_set, val_set) = load_train_val(&data_dir)?;
    let obs_dim = train_set
        .obs_dim()
        .ok_or_else(|| CliError::Usage("training set is empty".into()))?;
    if val_set.obs_dim() != Some(obs_dim) {
        return Err(CliError::Usage("train and val observation widths differ".into()));
    }
    let spec = run_cfg.spec(obs_dim)?;
    let cfg = run_cfg.train.clone();

    let theta = match run_cfg.model {
        ModelChoice::Lorenz => {
            let base = train_set.true_theta.unwrap_or_default();
            let mut rng = substream(cfg.seed, "theta", 0);
            Some(base.perturbed(&mut rng, run_cfg.theta_init_frac))
        }
        ModelChoice::GatedBernoulli => None,
    };
    let mut run = RunDir::open(&a.common.out, a.common.force)?;
    let bundle = ModelBundle::init(spec, cfg.seed, theta)?;
    if let Some(t) = theta {
        println!("initial theta: sigma={} rho={} beta={}", t.sigma, t.rho, t.beta);
    }

    let metrics_path = run.file("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&[]))?;
    let mut seen = Vec::new();
    let mut io_error = None;
    let outcome = fit(&train_set, &val_set, TrainState::new(bundle, cfg.adam.clone()), &cfg, |r| {
        seen.push(r.clone());
        println!(
            "epoch {:>4}  train_bound {:>12.6}  val_ll {:>12.6}  val_kl {:>10.6}",
            r.epoch, r.train_bound, r.val_ll, r.val_kl
        );
        if let Err(e) = fs::write(&metrics_path, metrics_csv(&seen)) {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let result = match outcome {
        Ok(r) => r,
        Err(e) => {
            eprintln!(
                "training aborted after {} completed epochs; metrics so far are in {}",
                seen.len(),
                metrics_path.display()
            );
            if let Some(last) = seen.last() {
                eprintln!(
                    "last epoch {}: train_bound {} val_ll {}",
                    last.epoch, last.train_bound, last.val_ll
                );
            }
            return Err(e.into());
        }
    };

    let mut anneal = String::from("update,anneal_coef\n");
    for (u, c) in &result.anneal {
        anneal.push_str(&format!("{u},{c}\n"));
    }
    run.write("anneal.csv", anneal)?;
    result.best.save(run.file("best.json"))?;
    result.last.save(run.file("last.json"))?;
    match result.best.progress.best_epoch {
        Some(e) => println!(
            "best epoch {e} with val_ll {}{}",
            result.best.val_ll.unwrap_or(f64::NAN),
            if result.stopped_early { " (stopped early)" } else { "" }
        ),
        None => println!("no epochs run"),
    }
    let seed = cfg.seed;
    run.finish("train", &run_cfg, seed)
}

pub const REPORT_HEADER: &str = "ll_per_step,kl_per_step,rmse_z,err_sigma,err_rho,err_beta,sigma,rho,beta,k,sequences,steps";

fn report_csv(r: &BoundReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let e = r.param_errors;
    let t = r.theta;
    format!(
        "{REPORT_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.ll_per_step,
        r.kl_per_step,
        opt(r.rmse_z),
        opt(e.map(|e| e.sigma)),
        opt(e.map(|e| e.rho)),
        opt(e.map(|e| e.beta)),
        opt(t.map(|t| t.sigma)),
        opt(t.map(|t| t.rho)),
        opt(t.map(|t| t.beta)),
        r.k,
        r.sequences,
        r.steps
    )
}

#[derive(Serialize)]
struct EvalRun<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    k_eval: usize,
    seed: u64,
    threads: usize,
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    if a.k_eval == 0 {
        return Err(CliError::Usage("--K-eval must be at least 1".into()));
    }
    let data_path = if a.data.is_dir() {
        a.data.join("test.json")
    } else {
        a.data.clone()
    };
    if !a.ckpt.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", a.ckpt.display())));
    }
    if !data_path.exists() {
        return Err(CliError::Usage(format!("dataset {} not found", data_path.display())));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = if data_path.extension().is_some_and(|e| e == "jsonl") {
        load_pianoroll(&data_path)?
    } else {
        SequenceDataset::load(&data_path)?
    };
    let seed = a.seed.unwrap_or(ckpt.config.seed);
    let threads = threads_from_env()?;
    let mut run = RunDir::open(&a.out, a.force)?;
    let eval_cfg = EvalConfig {
        k: a.k_eval,
        seed,
        threads,
    };
    let report = evaluate(&ds, &ckpt.bundle(), &eval_cfg)?;
    run.write_json("report.json", &report)?;
    run.write("report.csv", report_csv(&report))?;
    println!(
        "ll_per_step {}  kl_per_step {}  (K={}, {} sequences, {} steps)",
        report.ll_per_step, report.kl_per_step, report.k, report.sequences, report.steps
    );
    if let Some(r) = report.rmse_z {
        println!("rmse_z {r}");
    }
    if let Some(e) = report.param_errors {
        println!("param errors: sigma {} rho {} beta {}", e.sigma, e.rho, e.beta);
    }
    let echo = EvalRun {
        ckpt: &a.ckpt,
        data: &data_path,
        k_eval: a.k_eval,
        seed,
        threads,
    };
    run.finish("eval", &echo, seed)
}

#[derive(Serialize)]
struct OracleRun {
    k_list: Vec<usize>,
    trials: usize,
    seed: u64,
    len: usize,
    proposal: ProposalSpec,
    model: &'static str,
}

fn oracle_table(r: &MonotonicityReport) -> String {
    let mut out = format!("exact log-likelihood {}\n{:>6} {:>14} {:>12} {:>12}\n", r.exact, "K", "mean", "stderr", "gap");
    for row in &r.rows {
        out.push_str(&format!(
            "{:>6} {:>14.6} {:>12.6} {:>12.6}\n",
            row.k,
            row.mean,
            row.stderr,
            r.exact - row.mean
        ));
    }
    out
}

pub fn oracle_check(a: OracleArgs) -> CliResult<()> {
    let k_list = parse_list(&a.k_list, "--K-list")?;
    if a.len == 0 {
        return Err(CliError::Usage("--len must be at least 1".into()));
    }
    if !(a.inflation > 0.0) {
        return Err(CliError::Usage("--inflation must be positive".into()));
    }
    let mut run = match &a.out {
        Some(dir) => Some(RunDir::open(dir, a.force)?),
        None => None,
    };
    let m = Lgssm::default_instance();
    let xs = oracle_data(&m, a.len, a.seed)?;
    let proposal = ProposalSpec {
        inflation: a.inflation,
    };
    let report = monotonicity_report(&m, &xs, &k_list, a.trials, proposal, a.seed)?;
    print!("{}", oracle_table(&report));
    println!("monotone: {}  bounded: {}", report.monotone(), report.bounded());
    if let Some(run) = run.as_mut() {
        run.write_json("oracle.json", &report)?;
        let mut csv = String::from("k,mean,stderr,exact\n");
        for row in &report.rows {
            csv.push_str(&format!("{},{},{},{}\n", row.k, row.mean, row.stderr, report.exact));
        }
        run.write("oracle.csv", csv)?;
    }
    if let Some(run) = run {
        let echo = OracleRun {
            k_list: k_list.clone(),
            trials: a.trials,
            seed: a.seed,
            len: a.len,
            proposal,
            model: "scalar a=0.9 c=1 q=0.5 r=0.3 m0=0 p0=1",
        };
        run.finish("oracle-check", &echo, a.seed)?;
    }
    if report.passes() {
        Ok(())
    } else {
        Err(CliError::Property(
            "K-sample estimates are not monotone within two standard errors or exceed the exact value".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqvi::generative::LorenzTheta;

    #[test]
    fn seqs_accepts_one_or_three_counts() {
        assert_eq!(parse_seqs("5", (50, 10, 10)).unwrap(), (5, 10, 10));
        assert_eq!(parse_seqs("5,2,1", (50, 10, 10)).unwrap(), (5, 2, 1));
        assert!(parse_seqs("5,2", (50, 10, 10)).is_err());
        assert!(parse_seqs("x", (50, 10, 10)).is_err());
    }

    #[test]
    fn report_csv_leaves_missing_columns_empty() {
        let r = BoundReport {
            ll_per_step: -1.5,
            kl_per_step: 0.25,
            rmse_z: None,
            param_errors: None,
            theta: None,
            k: 3,
            sequences: 2,
            steps: 10,
        };
        let csv = report_csv(&r);
        assert_eq!(csv.lines().nth(1).unwrap(), "-1.5,0.25,,,,,,,,3,2,10");
    }

    #[test]
    fn lorenz_model_rejects_wrong_width() {
        let run = TrainRun::default();
        assert!(matches!(run.spec(2), Err(CliError::Usage(_))));
        assert!(run.spec(3).is_ok());
    }

    #[test]
    fn default_theta_is_used_without_ground_truth() {
        let ds = SequenceDataset::new(vec![seqvi::Tensor::zeros(&[2, 3])]).unwrap();
        assert_eq!(ds.true_theta.unwrap_or_default(), LorenzTheta::default());
    }
}
