mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use run::CliError;

#[derive(Parser)]
#[command(name = "seqvi", version, about = "Sequential variational inference: DKF and importance-weighted DKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Lorenz train/val/test splits.
    GenLorenz(GenLorenzArgs),
    /// Generate synthetic binary train/val/test splits.
    GenBinary(GenBinaryArgs),
    /// Train a model and write metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check bound tightening against the exact linear-Gaussian likelihood.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenLorenzArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence counts as TRAIN,VAL,TEST (or just TRAIN).
    #[arg(long)]
    seqs: Option<String>,
    /// Steps per sequence.
    #[arg(long)]
    len: Option<usize>,
    /// Euler step in seconds.
    #[arg(long)]
    ts: Option<f64>,
    /// Process and observation noise variance.
    #[arg(long)]
    noise_var: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct GenBinaryArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence counts as TRAIN,VAL,TEST (or just TRAIN).
    #[arg(long)]
    seqs: Option<String>,
    #[arg(long)]
    len: Option<usize>,
    /// Channels per step.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Lorenz,
    GatedBernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BoundChoice {
    Dkf,
    Iwdkf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum UpdateChoice {
    Epoch,
    Minibatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum WeightChoice {
    Analytic,
    Sampled,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory with train and val splits.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
    #[arg(long, value_enum)]
    bound: Option<BoundChoice>,
    /// Importance samples per sequence.
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// KL warm-up length in minibatch visits (0 disables).
    #[arg(long)]
    anneal_updates: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// When to apply optimizer steps.
    #[arg(long, value_enum)]
    update_mode: Option<UpdateChoice>,
    /// Training log-weight form.
    #[arg(long, value_enum)]
    weight_form: Option<WeightChoice>,
    /// Train only the generative model; the inference network stays fixed.
    #[arg(long)]
    freeze_inference: bool,
    /// Samples for the per-epoch validation estimate (default: K).
    #[arg(long = "K-val")]
    k_val: Option<usize>,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    rnn_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    emission_hidden: Option<usize>,
    /// Relative perturbation of the initial Lorenz parameters.
    #[arg(long)]
    theta_init_frac: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file, or a directory holding test.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "K-eval", default_value_t = 100)]
    k_eval: usize,
    /// Evaluation seed (default: the checkpoint's training seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long = "K-list", default_value = "1,5,15")]
    k_list: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequence length of the oracle instance.
    #[arg(long, default_value_t = 10)]
    len: usize,
    /// Proposal covariance as a multiple of the exact posterior's.
    #[arg(long, default_value_t = 2.0)]
    inflation: f64,
}

fn dispatch(cli: Cli) -> run::CliResult<()> {
    match cli.command {
        Command::GenLorenz(a) => commands::gen_lorenz(a),
        Command::GenBinary(a) => commands::gen_binary(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::OracleCheck(a) => commands::oracle_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(_) => eprintln!("error: {e}\n\nRun with --help for usage."),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
