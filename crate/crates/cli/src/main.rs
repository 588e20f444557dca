//! `nerfcam` command line: dataset generation, training, rendering,
//! evaluation and perturbation sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 IO
//! error, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nerfcam::camera::PerturbationSpec;
use nerfcam::dataio::{load_checkpoint, load_dataset, save_checkpoint, write_png, CheckpointError, DataError, Dataset};
use nerfcam::renderer::render_image;
use nerfcam::synthscene::{make_dataset, AnalyticScene, DatasetSpec, Rig, SynthError};
use nerfcam::training::{
    run_ablation, write_eval_csv, write_log, write_trace_plots, AblationPlan, ConfigError, PerturbClass, Precision,
    TrainConfig, TrainError, Trainer,
};
use nerfcam::Real;

#[derive(Parser)]
#[command(name = "nerfcam", version, about = "Radiance fields with learned cameras")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with exact cameras.
    GenSynth(GenSynthArgs),
    /// Train a field and refine cameras.
    Train(TrainArgs),
    /// Render every view of a dataset from a checkpoint.
    Render(RenderArgs),
    /// Score held-out views and camera accuracy.
    Eval(EvalArgs),
    /// Sweep camera perturbations, with and without refinement.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Moving blobs over 8 timesteps.
    #[arg(long)]
    dynamic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Forward-facing rig instead of a ring.
    #[arg(long)]
    forward_facing: bool,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Quadrature samples of the reference renderer.
    #[arg(long, default_value_t = 512)]
    samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the dataset path of the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep cameras fixed (no refinement epochs).
    #[arg(long)]
    no_pose: bool,
    /// Start from origin cameras looking down -z with f = width.
    #[arg(long)]
    pose_free: bool,
    /// Camera perturbation, e.g. `rot=5deg,trans=10%,focal=25%,seed=1`.
    #[arg(long)]
    perturb: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the total epoch count.
    #[arg(long)]
    epochs: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write loss/ATE line plots.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Metrics CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Second checkpoint; adds `delta_*` columns (ours − baseline).
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Scene label for the CSV; defaults to the dataset directory name.
    #[arg(long)]
    scene: Option<String>,
    /// Also write the held-out renders as PNG next to the CSV.
    #[arg(long)]
    save_renders: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// intrinsics | rotation | translation | both
    #[arg(long)]
    class: PerturbClass,
    /// Grid half-width: percent, or degrees for rotation.
    #[arg(long)]
    range: f64,
    #[arg(long)]
    step: f64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    const CONFIG: u8 = 2;
    const NUMERICAL: u8 = 3;
    const IO: u8 = 4;
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                _ if t.is_numerical() => NUMERICAL,
                TrainError::Config(ConfigError::Io { .. }) => IO,
                TrainError::Config(_)
                | TrainError::Field(_)
                | TrainError::Perturb(_)
                | TrainError::NoCameras
                | TrainError::NoTrainingFrames
                | TrainError::SharedParameter(_) => CONFIG,
                TrainError::Data(_)
                | TrainError::Io { .. }
                | TrainError::Csv { .. }
                | TrainError::Checkpoint(_)
                | TrainError::CameraCount { .. }
                | TrainError::OptimizerState(_) => IO,
                _ => 1,
            };
        }
        if let Some(c) = cause.downcast_ref::<ConfigError>() {
            return if matches!(c, ConfigError::Io { .. }) { IO } else { CONFIG };
        }
        if let Some(s) = cause.downcast_ref::<SynthError>() {
            return if matches!(s, SynthError::Data(_)) { IO } else { CONFIG };
        }
        if cause.is::<DataError>() || cause.is::<CheckpointError>() || cause.is::<std::io::Error>() {
            return IO;
        }
        if cause.is::<UsageError>() {
            return CONFIG;
        }
    }
    1
}

/// Bad flag combinations and values.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let scene = if a.forward_facing {
        AnalyticScene::forward_facing()
    } else if a.dynamic {
        AnalyticScene::moving_blobs()
    } else {
        AnalyticScene::three_blobs()
    };
    let spec = DatasetSpec {
        n_views: a.views,
        ring_radius: a.radius,
        width: a.size,
        height: a.size,
        n_timesteps: if a.dynamic { 8 } else { 1 },
        seed: a.seed,
        rig: if a.forward_facing { Rig::ForwardFacing } else { Rig::Ring },
        oracle_samples: a.samples,
        ..DatasetSpec::default()
    };
    let ds = make_dataset(&scene, &spec, &a.out)?;
    log::info!("wrote {} frames to {} (hash {})", ds.images.len(), a.out.display(), ds.hash);
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(d) = &cfg.dataset {
        if d.is_relative() {
            cfg.dataset = Some(path.parent().unwrap_or(Path::new(".")).join(d));
        }
    }
    Ok(cfg)
}

fn dataset_path(cfg: &TrainConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    flag.or(cfg.dataset.as_ref())
        .cloned()
        .ok_or_else(|| usage("no dataset: pass --dataset or set `dataset` in the config"))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let ds_path = dataset_path(&cfg, a.dataset.as_ref())?;
    cfg.dataset = Some(ds_path.clone());
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
    }
    if a.no_pose {
        cfg.schedule.camera_epochs = Some(0);
    }
    if a.pose_free {
        cfg.camera.pose_free = true;
    }
    if let Some(p) = &a.perturb {
        cfg.camera.perturb = Some(PerturbationSpec::parse(p).map_err(|e| usage(format!("--perturb: {e}")))?);
    }
    cfg.validate()?;
    let ds = load_dataset(&ds_path)?;
    match cfg.precision {
        Precision::F64 => train_with::<f64>(cfg, ds, &a),
        Precision::F32 => train_with::<f32>(cfg, ds, &a),
    }
}

fn train_with<T: Real>(cfg: TrainConfig, ds: Dataset, a: &TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path)?;
            let mut t = Trainer::<T>::restore(&ck, ds)?;
            // flags given on the command line still apply to the continued run
            t.config.schedule.epochs = cfg.schedule.epochs.max(t.epoch);
            t
        }
        None => Trainer::<T>::new(cfg, ds)?,
    };
    std::fs::write(a.out.join("config.toml"), trainer.config.to_toml())?;
    let log_path = a.out.join("log.csv");
    let result = trainer.run(None, |_| {});
    // the log is written even when training aborts
    write_log(&trainer.history, &log_path)?;
    if a.plot {
        write_trace_plots(&trainer.history, &a.out.join("plots"))?;
    }
    result?;
    save_checkpoint(&trainer.checkpoint(), &a.out.join("checkpoint.ckpt"))?;
    if let Some((traj, focal)) = trainer.camera_errors()? {
        log::info!("final ATE {:.5}, rotation error {:.3} deg, focal error {:.3} px", traj.ate_rmse, traj.mean_rotation_error_deg(), focal);
    }
    Ok(())
}

/// Loads a checkpoint of either precision and applies `f` to the restored
/// trainer.
fn with_trainer<R>(ckpt: &Path, ds: Dataset, f: impl FnOnce(AnyTrainer) -> Result<R>) -> Result<R> {
    match load_checkpoint::<f64>(ckpt) {
        Ok(ck) => f(AnyTrainer::F64(Trainer::restore(&ck, ds)?)),
        Err(CheckpointError::Scalar { .. }) => {
            let ck = load_checkpoint::<f32>(ckpt)?;
            f(AnyTrainer::F32(Trainer::restore(&ck, ds)?))
        }
        Err(e) => Err(e.into()),
    }
}

enum AnyTrainer {
    F64(Trainer<f64>),
    F32(Trainer<f32>),
}

macro_rules! dispatch {
    ($t:expr, $v:ident => $body:expr) => {
        match $t {
            AnyTrainer::F64($v) => $body,
            AnyTrainer::F32($v) => $body,
        }
    };
}

fn render(a: RenderArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    with_trainer(&a.checkpoint, ds, |t| {
        dispatch!(t, t => {
            let ds = t.dataset();
            let train_cams = t.cameras();
            let holdout = t.holdout_cameras()?.unwrap_or_default();
            for frame in &ds.manifest.frames {
                let cam = match t.train_views().iter().position(|&v| v == frame.view) {
                    Some(i) => train_cams[i],
                    None => match holdout.iter().find(|(v, _)| *v == frame.view) {
                        Some((_, c)) => *c,
                        None => {
                            log::warn!("no camera for held-out view {}; skipped", frame.view);
                            continue;
                        }
                    },
                };
                let img = render_image(&t.store, &t.field, &cam, frame.time, &t.render, 1024)
                    .map_err(TrainError::Render)?;
                write_png(&img, &a.out.join(&frame.file))?;
            }
            Ok(())
        })
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let scene = a.scene.clone().unwrap_or_else(|| {
        a.dataset.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
    });
    let report = with_trainer(&a.checkpoint, ds.clone(), |t| dispatch!(t, t => Ok(t.evaluate()?)))?;
    let baseline = match &a.baseline {
        Some(b) => Some(with_trainer(b, ds, |t| dispatch!(t, t => Ok(t.evaluate()?)))?),
        None => None,
    };
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_eval_csv(&a.out, &scene, &report, baseline.as_ref())?;
    if a.save_renders {
        let dir = a.out.with_extension("renders");
        for v in &report.views {
            write_png(&v.render, &dir.join(format!("v{:03}_t{:03}.png", v.view, v.time_index)))?;
        }
    }
    log::info!("mean held-out PSNR {:.3} dB, SSIM {:.4}", report.mean_psnr(), report.mean_ssim());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    let ds_path = dataset_path(&cfg, a.dataset.as_ref())?;
    cfg.dataset = Some(ds_path.clone());
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
    }
    cfg.validate()?;
    let plan = AblationPlan {
        class: a.class,
        range: a.range,
        step: a.step,
        seeds: a.seeds,
        out_dir: a.out,
    };
    plan.validate()?;
    if plan.seeds.is_empty() {
        bail!(usage("no seeds"));
    }
    let ds = load_dataset(&ds_path)?;
    let rows = match cfg.precision {
        Precision::F64 => run_ablation::<f64>(&plan, &cfg, &ds)?,
        Precision::F32 => run_ablation::<f32>(&plan, &cfg, &ds)?,
    };
    log::info!("{} runs written to {}", rows.len(), plan.out_dir.join("sweep.csv").display());
    Ok(())
}
