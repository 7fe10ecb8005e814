use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod eval;
mod plot;

use cascade_sr::base_sr::{pretrain_base, BaseSRModel, BaseTrainConfig};
use cascade_sr::checkpoint::{load_base, load_checkpoint, save_base, save_train_state};
use cascade_sr::config::RunConfig;
use cascade_sr::data::{make_synthetic_dataset, Dataset};
use cascade_sr::io::{load_image, save_image};
use cascade_sr::plan::{format_plan, plan_scales, Strategy, DEFAULT_FIXED_SCALE};
use cascade_sr::sampler::{super_resolve, SamplerConfig, ScgReference};
use cascade_sr::trainer::{run_training, RunOutputs, TrainState};
use cascade_sr::Error;

/// Arbitrary-scale image super-resolution with a cascade of residual
/// diffusion stages.
#[derive(Debug, Parser)]
#[command(name = "cascade-sr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the stage denoiser (and optionally a learned base model).
    Train(TrainArgs),
    /// Super-resolve one image with a trained checkpoint.
    Infer(InferArgs),
    /// PSNR/SSIM against ground truth and cross-scale SelfSSIM.
    Eval(eval::EvalArgs),
    /// Print the stage plan for a target scale.
    Plan(PlanArgs),
    /// Render a CSV (training log or guidance sweep) as a line plot.
    Plot(plot::PlotArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Input PNG.
    #[arg(long)]
    input: PathBuf,
    /// Total magnification, greater than 1.
    #[arg(long)]
    scale: f64,
    /// Denoiser checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Guidance strength; a comma-separated list gives one value per stage.
    /// Defaults to 0.2, or 0 with `--scg off`.
    #[arg(long, value_delimiter = ',')]
    zeta: Option<Vec<f64>>,
    /// Guidance reference: prev, init or off.
    #[arg(long, default_value = "prev")]
    scg: ScgReference,
    /// Stage split: rl (remainder last), rf (remainder first) or us (uniform).
    #[arg(long, default_value = "rl")]
    strategy: Strategy,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Write every stage output as stage_<i>.png into this directory.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    scale: f64,
    /// Input size as HxW, e.g. 32x48.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    input_size: (usize, usize),
    #[arg(long, default_value_t = DEFAULT_FIXED_SCALE)]
    fixed_scale: f64,
    #[arg(long, default_value = "rl")]
    strategy: Strategy,
    /// Also write the plan as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("{s:?} is not HxW"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub(crate) struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub(crate) fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_)
            | Error::ShapeMismatch { .. }
            | Error::TimestepOutOfRange { .. }
            | Error::UnsupportedImage { .. }
            | Error::Config(_)
            | Error::Dataset(_)
            | Error::Image(_) => 2,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self { code: 3, message: e.to_string() }
    }
}

pub(crate) type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => eval::cmd_eval(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Plot(args) => plot::cmd_plot(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let data = &cfg.data;
    Ok(match &data.train_dir {
        Some(dir) => Dataset::from_folder(dir)?,
        None => make_synthetic_dataset(
            data.synthetic_count,
            (data.synthetic_size, data.synthetic_size),
            data.synthetic_seed,
        )?
        .dataset()?,
    })
}

fn resolve_base(cfg: &RunConfig, dataset: &Dataset, out: &Path) -> Result<BaseSRModel, Failure> {
    match cfg.data.base_model.as_str() {
        "bicubic" => Ok(BaseSRModel::Bicubic),
        "learned" => {
            let base_cfg = BaseTrainConfig {
                epochs: cfg.data.base_epochs,
                seed: cfg.train.seed,
                ..Default::default()
            };
            let (model, report) = pretrain_base(dataset, &base_cfg)?;
            log::info!("base model gain over bicubic: {:+.3} dB", report.gain());
            save_base(out.join("base.safetensors"), &model)?;
            Ok(model)
        }
        path => Ok(load_base(path)?),
    }
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load_with_overrides(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = Some(out);
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_flat()?)?;
    let dataset = load_dataset(&cfg)?;
    let sched = cfg.schedule.build()?;
    let (mut state, base) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.schedule != sched {
                return Err(Failure::usage("checkpoint schedule differs from the configured schedule"));
            }
            let base = ckpt.base.clone();
            let mut state = ckpt.into_train_state()?;
            // Keep the learning-rate drop where the original run put it.
            let drop = state.config.drop_step();
            state.config.lr_drop_step = Some(drop);
            state.config.steps = cfg.train.steps;
            (state, base)
        }
        None => {
            let base = resolve_base(&cfg, &dataset, &out)?;
            (TrainState::new(&cfg.model, &cfg.train)?, base)
        }
    };
    log::info!(
        "training {} parameters on {} images from step {} to {}",
        state.params.parameter_count(),
        dataset.len(),
        state.step,
        state.config.steps
    );
    let save = |s: &TrainState, p: &Path| save_train_state(p, s, &sched, &base);
    let outputs = RunOutputs { dir: &out, save: &save };
    let rows = run_training(&mut state, &dataset, &sched, &base, Some(&outputs))?;
    if let Some(last) = rows.last() {
        log::info!("finished at step {} with loss {:.5}", last.step + 1, last.loss);
    }
    println!("{}", out.join(cascade_sr::trainer::LAST_CHECKPOINT).display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    if !(args.scale > 1.0) {
        return Err(Failure::usage(format!("--scale must be greater than 1, got {}", args.scale)));
    }
    let zeta = match (args.scg, args.zeta) {
        (ScgReference::Off, Some(z)) if z.iter().any(|&v| v != 0.0) => {
            return Err(Failure::usage("--scg off contradicts a non-zero --zeta"));
        }
        (ScgReference::Off, _) => vec![0.0],
        (_, Some(z)) => z,
        (_, None) => SamplerConfig::default().zeta,
    };
    let input = load_image(&args.input)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = SamplerConfig {
        zeta,
        seed: args.seed,
        reference: args.scg,
        strategy: args.strategy,
        fixed_scale: ckpt.params.config.max_scale,
    };
    let out = super_resolve(&input, args.scale, &ckpt.params, &ckpt.base, &ckpt.schedule, &cfg)?;
    log::info!("{}", format_plan(&out.plan).trim_end());
    if let Some(dir) = &args.dump_stages {
        std::fs::create_dir_all(dir)?;
        for (i, stage) in out.stages.iter().enumerate() {
            save_image(stage, dir.join(format!("stage_{}.png", i + 1)))?;
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_image(&out.image, &args.out)?;
    let (h, w) = out.image.resolution();
    println!("{} {h}x{w}", args.out.display());
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> CmdResult {
    let plan = plan_scales(args.scale, args.fixed_scale, args.input_size, args.strategy)?;
    print!("{}", format_plan(&plan));
    if let Some(path) = args.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "scale", "effective_scale_h", "effective_scale_w", "height", "width"])?;
        for i in 0..plan.n_stages() {
            let (h, wd) = plan.stage_resolutions[i];
            let (eh, ew) = plan.effective_scale(i);
            w.write_record([
                (i + 1).to_string(),
                plan.stage_scales[i].to_string(),
                eh.to_string(),
                ew.to_string(),
                h.to_string(),
                wd.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
