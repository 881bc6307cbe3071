//! Command-line dispatch. Exit status: 0 success, 1 runtime error, 2 usage
//! error; failures also print a one-line JSON record on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lego_core::brick::{flops_breakdown, flops_estimate, param_count, FlopsMode};
use lego_core::panorama::{ClassMap, WindowPlan};
use lego_core::skip::{SkipMode, SkipSchedule};
use lego_core::stack::{Preconditioning, Stack, StackConfig};
use serde_json::json;

use crate::checkpoint::{read_manifest, Checkpoint};
use crate::classmap::load_class_map;
use crate::config::{preset, RunConfig, ENV_OUT_DIR, ENV_SEED, PRESETS};
use crate::error::{Error, Result};
use crate::output::{sample_file_name, write_grid, write_png, RunManifest};
use crate::run::train_run;
use crate::sampling::{model_from_checkpoint, sample_images, sample_panoramas, sampler_choice, SampleRequest};

#[derive(Debug, Parser)]
#[command(name = "lego", version, about = "Train and sample stacked patch-brick diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Sample images from a checkpoint and write a grid plus one file each.
    Sample(SampleArgs),
    /// Generate canvases larger than the training resolution.
    Panorama(PanoramaArgs),
    /// Print per-brick parameter counts and FLOPs.
    Flops(FlopsArgs),
    /// Dump a checkpoint manifest.
    Inspect(InspectArgs),
    /// Print a reference run configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint whose config hash differs.
    #[arg(long)]
    force: bool,
    /// Output directory (overrides the config and LEGO_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this many steps.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SkipArg {
    None,
    Pg,
    Pr,
}

impl From<SkipArg> for SkipMode {
    fn from(s: SkipArg) -> Self {
        match s {
            SkipArg::None => SkipMode::None,
            SkipArg::Pg => SkipMode::Pg,
            SkipArg::Pr => SkipMode::Pr,
        }
    }
}

#[derive(Debug, Args)]
struct SamplingArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Sampling steps (defaults to the checkpoint's sampler settings).
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale; omitted means no guidance.
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = SkipArg::None)]
    skip_mode: SkipArg,
    #[arg(long, default_value_t = 0)]
    t_break: usize,
    /// Base seed (else LEGO_SEED, else 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Class labels to cycle through (default: all classes).
    #[arg(long = "class")]
    classes: Vec<usize>,
    /// Use the raw weights instead of the EMA weights.
    #[arg(long)]
    raw_weights: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    common: SamplingArgs,
}

#[derive(Debug, Args)]
struct PanoramaArgs {
    #[command(flatten)]
    common: SamplingArgs,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Rectangles `x0 y0 x1 y1 class`, one per line; default is one class
    /// (the first `--class`, else 0) everywhere.
    #[arg(long)]
    class_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum, default_value_t = SkipArg::None)]
    skip_mode: SkipArg,
    #[arg(long, default_value_t = 0)]
    t_break: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: String,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Panorama(a) => panorama(a),
        Command::Flops(a) => flops(a),
        Command::Inspect(a) => inspect(a),
        Command::Config(a) => {
            print!("{}", preset(&a.preset)?.to_toml()?);
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = a.out {
        cfg.output.dir = out;
    }
    let outcome = train_run(&cfg, a.resume.as_deref(), a.force, a.max_steps)?;
    let last = outcome.records.last();
    println!(
        "{}",
        json!({
            "steps": outcome.steps,
            "final_loss": last.map(|r| r.loss),
            "checkpoint": outcome.last_checkpoint,
        })
    );
    Ok(())
}

fn seed_of(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(ENV_SEED) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{ENV_SEED}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn out_dir(flag: Option<PathBuf>, ckpt: &Path, default: String) -> PathBuf {
    flag.or_else(|| std::env::var_os(ENV_OUT_DIR).map(PathBuf::from))
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(default))
}

struct Loaded {
    ckpt: Checkpoint,
    model: Stack<f32>,
    req: SampleRequest,
    out: PathBuf,
}

fn load_for_sampling(a: SamplingArgs, what: &str) -> Result<Loaded> {
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let ckpt = Checkpoint::load(&a.ckpt, None, false)?;
    let model = model_from_checkpoint(&ckpt, !a.raw_weights)?;
    if let Some(c) = a.classes.iter().find(|&&c| c >= model.config.num_classes) {
        return Err(Error::Config(format!("class {c} out of range for {} classes", model.config.num_classes)));
    }
    let seed = seed_of(a.seed)?;
    let out = out_dir(a.out, &a.ckpt, format!("{what}-seed{seed}"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let req = SampleRequest {
        n: a.n,
        classes: a.classes,
        cfg_scale: a.cfg_scale.or(ckpt.sampler.cfg_scale),
        skip_mode: a.skip_mode.into(),
        t_break: a.t_break,
        seed,
        workers: a.workers,
    };
    Ok(Loaded { ckpt, model, req, out })
}

fn sample(a: SampleArgs) -> Result<()> {
    let steps = a.common.steps;
    let Loaded { ckpt, model, req, out } = load_for_sampling(a.common, "samples")?;
    let schedule = ckpt.schedule.build()?;
    let choice = sampler_choice(&model, &schedule, &ckpt.sampler, steps);
    let (images, classes, nfe) = sample_images(&model, &choice, &req)?;
    let mut manifest = RunManifest::new("sample", model.config.hash64(), req.seed);
    for (i, (img, class)) in images.iter().zip(&classes).enumerate() {
        let path = out.join(sample_file_name("sample", req.seed, i, *class));
        write_png(img, &path)?;
        manifest.outputs.push(path);
    }
    let grid = out.join("grid.png");
    write_grid(&images, &grid)?;
    manifest.outputs.push(grid);
    manifest.write(&out)?;
    println!("{}", json!({"images": images.len(), "nfe": nfe, "out": out}));
    Ok(())
}

fn panorama(a: PanoramaArgs) -> Result<()> {
    let steps = a.common.steps;
    let first_class = a.common.classes.first().copied().unwrap_or(0);
    let Loaded { ckpt, model, req, out } = load_for_sampling(a.common, "panorama")?;
    let r = model.config.resolution;
    if r.h != r.w {
        return Err(Error::Config("panoramas need a square training resolution".into()));
    }
    let plan = WindowPlan::new(a.height, a.width, (r.h, r.w), a.stride)?;
    let classes = model.config.num_classes;
    let class_map = match &a.class_map {
        Some(p) => load_class_map(p, a.height, a.width, classes)?,
        None => ClassMap::uniform(a.height, a.width, first_class),
    };
    let schedule = ckpt.schedule.build()?;
    let choice = sampler_choice(&model, &schedule, &ckpt.sampler, steps);
    let (images, nfe) = sample_panoramas(&model, &choice, &plan, &class_map, &req)?;
    let mut manifest = RunManifest::new("panorama", model.config.hash64(), req.seed);
    for (i, img) in images.iter().enumerate() {
        let path = out.join(format!("panorama-seed{}-{i:04}.png", req.seed));
        write_png(img, &path)?;
        manifest.outputs.push(path);
    }
    let grid = out.join("grid.png");
    write_grid(&images, &grid)?;
    manifest.outputs.push(grid);
    manifest.write(&out)?;
    println!(
        "{}",
        json!({"images": images.len(), "windows": plan.windows.len(), "nfe": nfe, "out": out})
    );
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let run = match (&a.config, &a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(Error::Config("pass --config or --preset".into())),
    };
    let cfg: &StackConfig = &run.model;
    let res = (cfg.resolution.h, cfg.resolution.w, cfg.resolution.c);
    let steps = match cfg.precond {
        Preconditioning::Ddpm => run.schedule.steps,
        Preconditioning::Edm { .. } => run.sampler.edm.steps,
    };
    let mode: SkipMode = a.skip_mode.into();
    let skip = match mode {
        SkipMode::None => None,
        _ => Some(SkipSchedule::new(mode, a.t_break, steps, cfg)?),
    };
    let fr = &cfg.patch_fraction;
    let train = flops_breakdown(&cfg.bricks, res, FlopsMode::Train, fr, None);
    let sample = flops_breakdown(&cfg.bricks, res, FlopsMode::Sample, fr, skip.as_ref());
    let total_params = param_count(&cfg.bricks, cfg.image_channels(), cfg.num_classes, cfg.time_freq_dim);
    let train_total = flops_estimate(&cfg.bricks, res, FlopsMode::Train, fr, None, cfg.time_freq_dim);
    let sample_total = flops_estimate(&cfg.bricks, res, FlopsMode::Sample, fr, skip.as_ref(), cfg.time_freq_dim);
    if a.json {
        let bricks: Vec<_> = cfg
            .bricks
            .iter()
            .zip(train.iter().zip(&sample))
            .map(|(b, (t, s))| {
                json!({
                    "r": b.r, "l": b.l, "d": b.d, "depth": b.depth, "kind": b.kind,
                    "params": t.params,
                    "train_flops": t.flops * t.weight,
                    "sample_flops": s.flops * s.weight,
                    "active_fraction": s.weight,
                })
            })
            .collect();
        let doc = json!({
            "config_hash": format!("{:016x}", cfg.hash64()),
            "bricks": bricks,
            "params": total_params,
            "train_flops": train_total,
            "sample_flops": sample_total,
        });
        println!("{doc:#}");
        return Ok(());
    }
    println!("config hash {:016x}", cfg.hash64());
    println!(
        "{:>5} {:>4} {:>3} {:>5} {:>5} {:>6} {:>12} {:>12} {:>12} {:>7}",
        "brick", "r", "l", "d", "depth", "kind", "params", "train GF", "sample GF", "active"
    );
    for (k, (b, (t, s))) in cfg.bricks.iter().zip(train.iter().zip(&sample)).enumerate() {
        let kind = match b.kind {
            lego_core::brick::BrickKind::PatchBrick => "patch",
            lego_core::brick::BrickKind::ImageBrick => "image",
        };
        println!(
            "{:>5} {:>4} {:>3} {:>5} {:>5} {:>6} {:>12} {:>12.4} {:>12.4} {:>7.3}",
            k + 1,
            b.r,
            b.l,
            b.d,
            b.depth,
            kind,
            t.params,
            t.flops * t.weight / 1e9,
            s.flops * s.weight / 1e9,
            s.weight
        );
    }
    println!("total params: {} ({:.2}M)", total_params, total_params as f64 / 1e6);
    println!("train forward FLOPs per image: {:.4}G", train_total / 1e9);
    println!("sampling FLOPs per image per step: {:.4}G", sample_total / 1e9);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let m = read_manifest(&a.ckpt)?;
    let cfg = &m.model;
    let expected = param_count(&cfg.bricks, cfg.image_channels(), cfg.num_classes, cfg.time_freq_dim);
    let stored: u64 = m
        .tensors
        .iter()
        .filter(|t| t.group == "params")
        .map(|t| t.shape.iter().product::<usize>() as u64)
        .sum();
    if a.json {
        let doc = json!({
            "version": m.version,
            "config_hash": m.config_hash,
            "step": m.step,
            "images_seen": m.images_seen,
            "params": stored,
            "param_count": expected,
            "tensors": m.tensors,
        });
        println!("{doc:#}");
    } else {
        println!("version {}  config hash {}  step {}  images {}", m.version, m.config_hash, m.step, m.images_seen);
        for t in &m.tensors {
            println!("{:<7} {:<40} {:?}", t.group, t.name, t.shape);
        }
        println!("params: {stored} (param_count: {expected})");
    }
    if stored != expected {
        return Err(Error::checkpoint(
            &a.ckpt,
            format!("stored parameters {stored} differ from param_count {expected}"),
        ));
    }
    Ok(())
}
