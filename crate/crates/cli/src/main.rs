use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use bcnn::data::DatasetKind;
use bcnn::train::{evaluate, noise_sweep, train, Checkpoint, TrainConfig};
use bcnn::uncertainty::{NormalizerKind, DEFAULT_EVAL_SAMPLES};
use bcnn::zoo::{Arch, Mode};

#[derive(Parser)]
#[command(name = "bcnn", version, about = "Train and evaluate Bayesian CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics.csv and checkpoint.bin.
    Train(TrainArgs),
    /// Monte-Carlo evaluation of a checkpoint; writes uncertainty.csv.
    Eval(EvalArgs),
    /// Uncertainty under increasing pixel noise; writes sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Training images from the start of the split (0 = all).
    #[arg(long)]
    train_n: Option<usize>,
    /// Validation images from the start of the test split (0 = all).
    #[arg(long)]
    val_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stochastic passes per image for validation uncertainty.
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Score validation accuracy with the Monte-Carlo mean prediction.
    #[arg(long)]
    mc_validation: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Defaults to the checkpoint's data directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Stochastic forward passes per image.
    #[arg(long = "T", default_value_t = DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value = "softplus_n")]
    normalizer: NormalizerKind,
    /// Test images from the start of the split (all when omitted).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    gammas: Vec<f64>,
    #[arg(long = "T", default_value_t = DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    /// Validation images in the fixed slice.
    #[arg(long, default_value_t = 512)]
    slice: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() { c.$field = v; }
            )*};
        }
        set!(arch => arch, dataset => dataset, data_dir => data_dir, epochs => epochs,
            batch_size => batch_size, lr => learning_rate, mc_samples => mc_samples,
            weight_decay => weight_decay, mode => mode, train_n => train_n, val_n => val_n,
            seed => seed, eval_samples => eval_samples, checkpoint_every => checkpoint_every);
        c.mc_validation |= self.mc_validation;
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            let outcome = train(&cfg, &args.out, args.resume.as_deref(), &mut |row| {
                eprintln!(
                    "epoch {:>3}  nll {:.4}  kl {:.1}  train_acc {:.4}  val_acc {:.4}  aleatoric {:.6}  epistemic {:.6}  {:.1}s",
                    row.epoch,
                    row.train_nll,
                    row.train_kl,
                    row.train_acc,
                    row.val_acc,
                    row.val_aleatoric,
                    row.val_epistemic,
                    row.wall_seconds
                );
            })?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::Eval(args) => {
            let ck = Checkpoint::load(&args.checkpoint)?;
            let dataset = args.dataset.unwrap_or(ck.config.dataset);
            let data_dir = args.data_dir.clone().unwrap_or_else(|| ck.config.data_dir.clone());
            let s = evaluate(
                &ck,
                &data_dir,
                dataset,
                args.limit,
                args.samples,
                args.normalizer,
                args.seed,
                &args.out,
            )?;
            println!(
                "images {}  accuracy {:.4}  aleatoric {:.8}  epistemic {:.8}",
                s.images, s.accuracy, s.aleatoric, s.epistemic
            );
        }
        Command::Sweep(args) => {
            let ck = Checkpoint::load(&args.checkpoint)?;
            let rows = noise_sweep(&ck, &args.gammas, args.slice, args.samples, args.seed, &args.out)?;
            for r in rows {
                println!("gamma {:<6} aleatoric {:.8}  epistemic {:.8}", r.gamma, r.aleatoric, r.epistemic);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
