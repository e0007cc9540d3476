use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lsrgan::cli::{
    apply_config_file, apply_overrides, cmd_eval, cmd_sweep, cmd_synth, cmd_train, thread_cap,
    MetricKind, SweepParam,
};
use lsrgan::data::SynthSpec;
use lsrgan::training::TrainConfig;
use lsrgan::{Error, Result};

/// Feature-generating adversarial network for zero-shot learning with a
/// semantic-relationship band penalty, plus a synthetic-data harness and
/// the ZSL/GZSL evaluation suite.
#[derive(Parser)]
#[command(name = "lsrgan", version)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file (later lines override earlier ones)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set epochs=100 (repeatable; wins over the file)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(TrainConfig, SynthSpec)> {
        let mut train = TrainConfig::default();
        let mut synth = SynthSpec::default();
        if let Some(path) = &self.config {
            apply_config_file(&mut train, &mut synth, path)?;
        }
        apply_overrides(&mut train, &mut synth, &self.set)?;
        Ok((train, synth))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shared-latent dataset
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Spec file for the generator (same key=value format as --config,
        /// applied before it)
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for visual/semantic/split/latents files
        #[arg(long)]
        out: PathBuf,
        /// Synthetic generator seed (overrides synth_seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Within-class visual noise (overrides synth_sigma_x)
        #[arg(long)]
        sigma_x: Option<f64>,
    },
    /// Train on a dataset directory
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory containing visual.txt, semantic.txt, split.txt
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.bin and trace.csv
        #[arg(long)]
        out: PathBuf,
        /// Ablation switch (S1..S4)
        #[arg(long)]
        ablation: Option<String>,
        /// Training seed (overrides seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of zsl,gzsl,auc,confidence
        #[arg(long, default_value = "zsl,gzsl,auc,confidence")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation seed (defaults to the checkpoint's training seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train once per value of one band-loss parameter
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// One of epsilon, lambda_sr, n_c
        #[arg(long)]
        param: String,
        /// Comma-separated values
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<()> {
    let args = CliArgs::parse();
    let threads = thread_cap()?;
    log::debug!("thread cap {threads}");
    match args.command {
        Command::Synth {
            config,
            spec,
            out,
            seed,
            sigma_x,
        } => {
            let mut train = TrainConfig::default();
            let mut synth = SynthSpec::default();
            if let Some(path) = &spec {
                apply_config_file(&mut train, &mut synth, path)?;
            }
            if let Some(path) = &config.config {
                apply_config_file(&mut train, &mut synth, path)?;
            }
            apply_overrides(&mut train, &mut synth, &config.set)?;
            if let Some(s) = seed {
                synth.seed = s;
            }
            if let Some(sx) = sigma_x {
                synth.sigma_x = sx;
            }
            cmd_synth(&synth, &train, &out)
        }
        Command::Train {
            config,
            data,
            out,
            ablation,
            seed,
        } => {
            let (mut train, synth) = config.resolve()?;
            if let Some(a) = ablation {
                train.ablation = a.parse()?;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            cmd_train(&data, &train, &synth, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            metrics,
            out,
            seed,
        } => {
            let parsed: Result<Vec<MetricKind>> = metrics
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse())
                .collect();
            let parsed = parsed?;
            if parsed.is_empty() {
                return Err(Error::Config("no metrics requested".into()));
            }
            cmd_eval(&checkpoint, &data, &parsed, seed, &out)
        }
        Command::Sweep {
            config,
            data,
            param,
            values,
            out,
        } => {
            let (train, synth) = config.resolve()?;
            let param: SweepParam = param.parse()?;
            let values: Result<Vec<f64>> = values
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad sweep value '{s}'")))
                })
                .collect();
            cmd_sweep(&data, &train, &synth, param, &values?, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
