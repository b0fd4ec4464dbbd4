//! `organseg`: gradient checks, toy training, evaluation, feature
//! extraction and rendering on top of the `organseg` library.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use organseg::config::RunConfig;
use organseg::data::ClassPalette;

/// Exit code for invalid inputs, failed checks and diverged training.
const EXIT_VALIDATION: u8 = 1;
/// Exit code for filesystem errors and unreadable files.
const EXIT_IO: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "organseg", version, about = "Multi-scale organ segmentation toolkit")]
struct Cli {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Class palette as `id name r g b` lines; the built-in one otherwise.
    #[arg(long, global = true)]
    palette: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// One flag per run-configuration key. Values go through the same
/// validation as the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    pyramid_width: Option<String>,
    #[arg(long, global = true)]
    srnn_rounds: Option<String>,
    #[arg(long, global = true)]
    srnn_enabled: Option<String>,
    #[arg(long, global = true)]
    learning_rate: Option<String>,
    #[arg(long, global = true)]
    momentum: Option<String>,
    #[arg(long, global = true)]
    grad_clip: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    max_steps: Option<String>,
    #[arg(long, global = true)]
    threads: Option<String>,
    #[arg(long, global = true)]
    normalized_deltas: Option<String>,
    #[arg(long, global = true)]
    absent_class_policy: Option<String>,
    #[arg(long, global = true)]
    box_hidden: Option<String>,
    #[arg(long, global = true)]
    mask_width: Option<String>,
    #[arg(long, global = true)]
    roi_batch: Option<String>,
    #[arg(long, global = true)]
    roi_proposals: Option<String>,
    #[arg(long, global = true)]
    smooth_l1_beta: Option<String>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    run_dir: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 19] {
        [
            ("seed", &self.seed),
            ("pyramid_width", &self.pyramid_width),
            ("srnn_rounds", &self.srnn_rounds),
            ("srnn_enabled", &self.srnn_enabled),
            ("learning_rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("grad_clip", &self.grad_clip),
            ("batch_size", &self.batch_size),
            ("max_steps", &self.max_steps),
            ("threads", &self.threads),
            ("normalized_deltas", &self.normalized_deltas),
            ("absent_class_policy", &self.absent_class_policy),
            ("box_hidden", &self.box_hidden),
            ("mask_width", &self.mask_width),
            ("roi_batch", &self.roi_batch),
            ("roi_proposals", &self.roi_proposals),
            ("smooth_l1_beta", &self.smooth_l1_beta),
            ("dataset", &self.dataset),
            ("run_dir", &self.run_dir),
        ]
    }

    fn apply(&self, cfg: &mut RunConfig) -> organseg::Result<()> {
        for (k, v) in self.pairs() {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Central-difference gradient checks over every op and module.
    Gradcheck(commands::GradcheckArgs),
    /// Trains the full model on a small dataset and writes a checkpoint.
    TrainToy(commands::TrainArgs),
    /// Dice of a checkpoint's (or a directory's) masks against a dataset.
    Eval(commands::EvalArgs),
    /// Writes the feature pyramid and proposals for one image.
    Extract(commands::ExtractArgs),
    /// Blends a label mask over its image.
    Render(commands::RenderArgs),
    /// Writes synthetic image and mask pairs.
    SynthData(commands::SynthArgs),
    /// Per-class connected-component counts over a mask directory.
    Histogram(commands::HistogramArgs),
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    /// The command finished but its check did not hold.
    Failed(String),
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    let palette = match &cli.palette {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            ClassPalette::parse(&text)?
        }
        None => ClassPalette::default(),
    };
    let ctx = commands::Ctx { cfg, palette };
    rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.cfg.threads)
        .build_global()?;
    match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(&ctx, &a),
        Command::TrainToy(a) => commands::train_toy(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Extract(a) => commands::extract(&ctx, &a),
        Command::Render(a) => commands::render(&ctx, &a),
        Command::SynthData(a) => commands::synth_data(&ctx, &a),
        Command::Histogram(a) => commands::histogram(&ctx, &a),
    }
}

fn is_io(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<organseg::Error>().is_some_and(|e| e.is_io())
            || e.downcast_ref::<std::io::Error>().is_some()
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_io(&e) { EXIT_IO } else { EXIT_VALIDATION })
        }
    }
}
