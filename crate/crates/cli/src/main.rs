//! `mam`: features, training, decoding, rendering and checks from the shell.
//!
//! Exit status is 0 on success, 1 on an internal failure and 2 on a user or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use mam::decoding::{DEFAULT_ALPHA, DEFAULT_BEAM};
use mam::features::{DEFAULT_BINS, DEFAULT_HOP_MS, DEFAULT_WIN_MS};
use mam::masking::MaskStrategy;
use mam::render::View;
use mam::toydata::ToySpec;
use mam::Error;

use commands::{DecodeArgs, FeatureArgs, GradcheckArgs, Metric, RenderArgs, TrainArgs, TrainKind};

#[derive(Parser)]
#[command(name = "mam", version, about = "Masked acoustic modeling for speech translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct TrainOpts {
    /// JSON file with `model`, `train` and `manifest` sections.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DecodeOpts {
    /// Checkpoint files or directories holding them, oldest first.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    length_penalty: f64,
    /// Average the parameters of the last N checkpoints; 0 averages all.
    #[arg(long, default_value_t = 5)]
    average_last: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
}

impl DecodeOpts {
    fn args(&self) -> DecodeArgs {
        DecodeArgs {
            checkpoints: self.checkpoints.clone(),
            beam: self.beam,
            length_penalty: self.length_penalty,
            average_last: self.average_last,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    TokenAccuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Original,
    Masked,
    Reconstructed,
    Attention,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Frame,
    Span,
}

#[derive(Subcommand)]
enum Command {
    /// Log-mel features for every `audio` entry of a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_WIN_MS)]
        win_ms: f64,
        #[arg(long, default_value_t = DEFAULT_HOP_MS)]
        hop_ms: f64,
        /// Per-utterance mean and variance normalization.
        #[arg(long)]
        cmvn: bool,
    },
    /// Encoder pre-training on reconstruction alone.
    Pretrain(TrainOpts),
    /// Training in the config's mode (default `st`).
    Train(TrainOpts),
    /// Training from a checkpoint (default mode `mam`).
    Finetune {
        #[command(flatten)]
        opts: TrainOpts,
        /// Overrides `train.init_from`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Beam-search translations, one line per manifest entry.
    Translate {
        #[command(flatten)]
        decode: DecodeOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grayscale PGM of a spectrogram view or an attention map.
    Render {
        #[arg(long)]
        feat: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "original")]
        what: ViewArg,
        /// Mask seed; falls back to MAM_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the checkpoint's masking ratio.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Encoder layer for `attention`; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint (or a hypothesis file for BLEU) on a manifest.
    Eval {
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Plain-text hypotheses, one per manifest line, instead of decoding.
        #[arg(long, conflicts_with = "checkpoints")]
        hyps: Option<PathBuf>,
        #[arg(long = "checkpoint", num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        length_penalty: f64,
        #[arg(long, default_value_t = 5)]
        average_last: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        /// Experiment config whose `model` section is checked; the toy model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Coordinates probed per tensor; 0 probes all.
        #[arg(long, default_value_t = 4)]
        probes: usize,
    },
    /// Writes the synthetic corpus: features plus train/dev/test manifests.
    GenToy {
        #[arg(long)]
        out_dir: PathBuf,
        /// JSON corpus settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Falls back to MAM_SEED, then the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Averages checkpoints into one file.
    Average {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        last: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 2 for anything the caller can fix, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFiniteLoss { .. } | Error::Numeric(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn seed_or_env(seed: Option<u64>) -> Result<Option<u64>> {
    match seed {
        Some(s) => Ok(Some(s)),
        None => config::env_seed(),
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Features {
            manifest,
            out_dir,
            bins,
            win_ms,
            hop_ms,
            cmvn,
        } => {
            let failed = commands::features(&FeatureArgs {
                manifest,
                out_dir,
                bins,
                win_ms,
                hop_ms,
                cmvn,
            })?;
            if !failed.is_empty() {
                eprintln!("{} utterance(s) failed: {}", failed.len(), failed.join(" "));
                return Ok(2);
            }
        }
        Command::Pretrain(o) => train(TrainKind::Pretrain, o, None)?,
        Command::Train(o) => train(TrainKind::Train, o, None)?,
        Command::Finetune { opts, init } => train(TrainKind::Finetune, opts, init)?,
        Command::Translate { decode, manifest, out } => commands::translate_cmd(&decode.args(), &manifest, &out)?,
        Command::Render {
            feat,
            checkpoint,
            what,
            seed,
            lambda,
            strategy,
            layer,
            head,
            out,
        } => commands::render_cmd(&RenderArgs {
            feat,
            checkpoint,
            what: match what {
                ViewArg::Original => View::Original,
                ViewArg::Masked => View::Masked,
                ViewArg::Reconstructed => View::Reconstructed,
                ViewArg::Attention => View::Attention,
            },
            seed: seed_or_env(seed)?.unwrap_or(0),
            lambda,
            strategy: strategy.map(|s| match s {
                StrategyArg::Frame => MaskStrategy::Frame,
                StrategyArg::Span => MaskStrategy::Span,
            }),
            layer,
            head,
            out,
        })?,
        Command::Eval {
            metric,
            manifest,
            hyps,
            checkpoints,
            beam,
            length_penalty,
            average_last,
            max_len,
        } => {
            let decode = DecodeArgs {
                checkpoints,
                beam,
                length_penalty,
                average_last,
                max_len,
            };
            let metric = match metric {
                MetricArg::Bleu => Metric::Bleu,
                MetricArg::TokenAccuracy => Metric::TokenAccuracy,
            };
            let score = commands::eval(&decode, &manifest, metric, hyps.as_deref())?;
            println!("{score:.4}");
        }
        Command::Gradcheck {
            config,
            tolerance,
            seeds,
            probes,
        } => {
            let passed = commands::gradcheck(&GradcheckArgs {
                config,
                tolerance,
                seeds,
                probes,
            })?;
            if !passed {
                return Ok(1);
            }
        }
        Command::GenToy { out_dir, config, seed } => {
            let mut toy: ToySpec = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path, source })?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => ToySpec::default(),
            };
            if let Some(s) = seed_or_env(seed)? {
                toy.seed = s;
            }
            commands::gen_toy(&toy, &out_dir)?;
        }
        Command::Average { checkpoints, last, out } => commands::average(&checkpoints, last, &out)?,
    }
    Ok(0)
}

fn train(kind: TrainKind, o: TrainOpts, init: Option<PathBuf>) -> Result<()> {
    commands::train(
        kind,
        &TrainArgs {
            config: o.config,
            init,
            out_dir: o.out_dir,
        },
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let mut msg = err.to_string();
            for cause in err.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&err))
        }
    }
}
