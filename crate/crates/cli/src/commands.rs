//! One function per subcommand. Each writes its outputs into a run
//! directory and closes it with a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use organseg::checkpoint;
use organseg::config::RunConfig;
use organseg::data::dataset::{
    image_tensor, load_dataset, load_gray, load_mask, save_png, save_sample, Dataset, Sample,
};
use organseg::data::histogram::class_histogram;
use organseg::data::synth::synth_dataset;
use organseg::data::{render_overlay, ClassPalette};
use organseg::eval::{evaluate, evaluate_with, EvalReport};
use organseg::fpn::extract_pyramid;
use organseg::gradcheck::suite::run_suite;
use organseg::gradcheck::GradCheckOptions;
use organseg::model::{detect, ModelConfig, ModelWeights, TrainSample};
use organseg::train::{init_weights, train};
use organseg::Tensor4;

use crate::rundir::RunDir;
use crate::Outcome;

/// Precision of trained weights and of everything run on them.
type Real = f32;

pub struct Ctx {
    pub cfg: RunConfig,
    pub palette: ClassPalette,
}

impl Ctx {
    fn run_dir(&self, command: &str) -> Result<RunDir> {
        let root = self
            .cfg
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command));
        RunDir::create(root)
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = self
            .cfg
            .dataset
            .as_ref()
            .ok_or_else(|| anyhow!("no dataset given (use --dataset or `dataset = ...`)"))?;
        Ok(load_dataset(dir, &self.palette)?)
    }
}

fn to_dataset(samples: Vec<organseg::data::synth::SynthSample>) -> Dataset {
    Dataset {
        samples: samples
            .into_iter()
            .map(|s| Sample {
                name: s.name,
                image: s.image,
                mask: Some(s.mask),
            })
            .collect(),
        missing_masks: 0,
    }
}

/// Model structure from a checkpoint's own config, weights from its files.
fn load_model(dir: &Path) -> Result<(RunConfig, ModelConfig, ModelWeights<Tensor4<Real>>)> {
    let run = checkpoint::load_config(dir)?;
    let model = run.model_config()?;
    let mut weights = init_weights::<Real>(&run, &model)?;
    checkpoint::load_into(dir, &mut weights)?;
    Ok((run, model, weights))
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Only cases whose name contains one of these (repeatable).
    #[arg(long = "op")]
    ops: Vec<String>,
    /// Seeded trials per case.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Negates the convolution input gradient to show the check catches it.
    #[arg(long)]
    inject_conv_fault: bool,
}

pub fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<Outcome> {
    let opts = GradCheckOptions::default();
    let t0 = std::time::Instant::now();
    let results = run_suite(&a.ops, a.trials, ctx.cfg.seed, &opts, a.inject_conv_fault)?;
    if results.is_empty() {
        bail!("no gradient-check case matches {:?}", a.ops);
    }
    let mut report = String::new();
    let _ = writeln!(report, "op max_rel_error trials retried status");
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            report,
            "{} {:.3e} {} {} {status}",
            r.name, r.max_rel_error, r.trials, r.retried
        );
    }
    print!("{report}");
    log::info!(
        "{} cases, tolerance {:e}, {:.1}s",
        results.len(),
        opts.tolerance,
        t0.elapsed().as_secs_f64()
    );
    if let Some(root) = &ctx.cfg.run_dir {
        let mut rd = RunDir::create(root.clone())?;
        rd.write("gradcheck.txt", &report)?;
        rd.finish()?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train on this many generated images instead of `--dataset`.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Log the loss every this many steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

pub fn train_toy(ctx: &Ctx, a: &TrainArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let data = match a.synthetic {
        Some(n) => to_dataset(synth_dataset(cfg.seed, 0, n)),
        None => ctx.dataset()?,
    };
    let samples: Vec<TrainSample<Real>> = data
        .samples
        .iter()
        .filter_map(|s| s.mask.as_ref().map(|m| TrainSample::new(&s.image, m, &ctx.palette)))
        .collect();
    log::info!(
        "training on {} image(s) for {} step(s), srnn {}",
        samples.len(),
        cfg.max_steps,
        if cfg.srnn_enabled { "on" } else { "off" }
    );
    let t0 = std::time::Instant::now();
    let every = a.log_every.max(1);
    let result = train(cfg, &samples, |step, b| {
        if step % every == 0 {
            log::info!("step {step} ({:.0}s): {b}", t0.elapsed().as_secs_f64());
        }
    })?;

    let mut rd = ctx.run_dir("train-toy")?;
    rd.write("loss.csv", &result.csv())?;
    let last = result.history.last().map(|(s, b)| (*s, b.to_string()));
    let mut summary = String::new();
    if let Some((step, b)) = &last {
        let _ = writeln!(summary, "step={step}");
        for kv in b.split_whitespace() {
            let _ = writeln!(summary, "{kv}");
        }
    }
    if let Some(s) = result.diverged_at {
        let _ = writeln!(summary, "diverged_at={s}");
    }
    rd.write("loss.txt", &summary)?;
    let ckpt = rd.path("checkpoint");
    checkpoint::save(&ckpt, &result.weights, cfg)?;
    rd.record_tree(&ckpt)?;
    rd.write("config.txt", &cfg.to_text())?;
    let manifest = rd.finish()?;
    log::info!("wrote {}", manifest.display());

    match result.diverged_at {
        Some(s) => Ok(Outcome::Failed(format!(
            "loss diverged at step {s}; last finite step {}",
            s - 1
        ))),
        None => Ok(Outcome::Ok),
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train-toy`.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted masks named like the dataset's images.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<Outcome> {
    let data = ctx.dataset()?;
    let policy = ctx.cfg.absent_class_policy;
    let report: EvalReport = match (&a.checkpoint, &a.predictions) {
        (Some(dir), _) => {
            let (_, model, weights) = load_model(dir)?;
            evaluate(&model, &weights, &data, &ctx.palette, policy)?
        }
        (None, Some(dir)) => {
            let mut names = data.samples.iter().map(|s| s.name.clone());
            evaluate_with(&data, &ctx.palette, policy, |_| {
                let name = names.next().expect("one prediction per sample");
                load_mask(&dir.join(format!("{name}.png")), &ctx.palette)
            })?
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let summary = report.summary_kv(&ctx.palette);
    print!("{summary}");
    let mut rd = ctx.run_dir("eval")?;
    rd.write("dice.csv", &report.csv(&ctx.palette))?;
    rd.write("dice.txt", &summary)?;
    rd.finish()?;
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Grayscale input image.
    #[arg(long)]
    image: PathBuf,
    /// Checkpoint directory; seeded initial weights otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

pub fn extract(ctx: &Ctx, a: &ExtractArgs) -> Result<Outcome> {
    let (model, weights) = match &a.checkpoint {
        Some(dir) => {
            let (_, m, w) = load_model(dir)?;
            (m, w)
        }
        None => {
            let m = ctx.cfg.model_config()?;
            let w = init_weights::<Real>(&ctx.cfg, &m)?;
            (m, w)
        }
    };
    let img = image_tensor::<Real>(&load_gray(&a.image)?);
    let mut rd = ctx.run_dir("extract")?;
    let pyramid = extract_pyramid(&img, &model.extractor, &weights.extractor)
        .with_context(|| format!("extracting {}", a.image.display()))?;
    for p in pyramid.save(&rd.path("pyramid"))? {
        rd.record(&p);
    }
    let (proposals, detections) = detect(&model, &weights, &img)?;
    let mut text = String::new();
    for p in &proposals {
        let b = p.bbox;
        let _ = writeln!(text, "{} {} {} {} {} {}", p.level, b.x, b.y, b.w, b.h, p.score);
    }
    rd.write("proposals.txt", &text)?;
    let mut text = String::new();
    for d in &detections {
        let b = d.bbox;
        let name = ctx.palette.name(d.class);
        let _ = writeln!(text, "{name} {} {} {} {} {}", b.x, b.y, b.w, b.h, d.score);
    }
    rd.write("detections.txt", &text)?;
    rd.finish()?;
    log::info!("{} proposals, {} detections", proposals.len(), detections.len());
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    /// Palette-colored label mask.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    alpha: f64,
}

pub fn render(ctx: &Ctx, a: &RenderArgs) -> Result<Outcome> {
    let image = load_gray(&a.image)?;
    let mask = load_mask(&a.mask, &ctx.palette)?;
    let out = render_overlay(&image, &mask, &ctx.palette, a.alpha)?;
    let mut rd = ctx.run_dir("render")?;
    let p = rd.path("overlay.png");
    save_png(&out, &p)?;
    rd.record(&p);
    rd.finish()?;
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Index of the first image; disjoint ranges give disjoint sets.
    #[arg(long, default_value_t = 0)]
    start: usize,
}

/// The run directory becomes a dataset root with `images/` and `masks/`.
pub fn synth_data(ctx: &Ctx, a: &SynthArgs) -> Result<Outcome> {
    let mut rd = ctx.run_dir("synth-data")?;
    for s in synth_dataset(ctx.cfg.seed, a.start, a.count) {
        save_sample(rd.root(), &s.name, &s.image, &s.mask, &ctx.palette)?;
    }
    rd.write("palette.txt", &ctx.palette.to_text())?;
    for sub in ["images", "masks"] {
        rd.record_tree(&rd.path(sub))?;
    }
    rd.finish()?;
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct HistogramArgs {
    /// Directory of palette-colored masks.
    #[arg(long)]
    masks: PathBuf,
}

pub fn histogram(ctx: &Ctx, a: &HistogramArgs) -> Result<Outcome> {
    let h = class_histogram(&a.masks, &ctx.palette)?;
    let mut text = String::new();
    let _ = writeln!(text, "files={}", h.files);
    let _ = writeln!(text, "skipped={}", h.skipped);
    for id in ctx.palette.organ_ids() {
        let _ = writeln!(text, "{}={}", ctx.palette.name(id), h.counts[id as usize]);
    }
    print!("{text}");
    let mut rd = ctx.run_dir("histogram")?;
    rd.write("histogram.txt", &text)?;
    rd.finish()?;
    Ok(Outcome::Ok)
}
