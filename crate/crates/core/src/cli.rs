//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::features::{build_cost_store, load_patch_dir, write_cost_store, CostStore, LoadedPatches};
use crate::io::{
    assemble_rig, load_config, load_frames, load_ground_truth, parse_gt_extrinsics, render_gt_extrinsics,
    write_ground_truth, write_json, write_sparse_model, FeatureMode, GroundTruth, RunConfig, SparseIoError,
};
use crate::metrics::build_report;
use crate::pipeline::{refine, refine_single_frame, PipelineError};
use crate::robust::RobustLoss;
use crate::solver::SolverError;
use crate::synth::{generate_dome, Noise};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const THREADS_ENV: &str = "DOMECAL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "domecal", version, about = "Multi-frame intrinsics refinement for camera domes")]
pub struct Cli {
    /// Worker threads (falls back to DOMECAL_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine the intrinsics of a multi-frame capture.
    Refine(RefineArgs),
    /// Write a synthetic dome dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Directory with one COLMAP text model per frame, one subdirectory each.
    #[arg(long)]
    pub frames: PathBuf,
    /// Ground-truth extrinsics, `CAMERA_ID QW QX QY QZ TX TY TZ` per line.
    #[arg(long)]
    pub gt_extrinsics: PathBuf,
    /// Directory of feature or cost patch files. Enables the featuremetric term.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth JSON for evaluation, as written by `synth`.
    #[arg(long)]
    pub gt_intrinsics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub cameras: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 500)]
    pub points: usize,
    /// Keypoint noise standard deviation, px.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Constant per-camera keypoint displacement, px.
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    /// Relative focal perturbation of the initial intrinsics.
    #[arg(long, default_value_t = 0.01)]
    pub focal_rel: f64,
    /// Principal point perturbation of the initial intrinsics, px.
    #[arg(long, default_value_t = 3.0)]
    pub pp_abs: f64,
    /// Rotation perturbation of the initial extrinsics, degrees.
    #[arg(long, default_value_t = 0.5)]
    pub rot_deg: f64,
    /// Translation perturbation of the initial extrinsics.
    #[arg(long, default_value_t = 0.01)]
    pub trans: f64,
    /// Standard deviation of the initial point positions.
    #[arg(long, default_value_t = 0.0)]
    pub point_jitter: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<SparseIoError> for CliError {
    fn from(e: SparseIoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Solver {
                source: SolverError::NumericalFailure { .. },
                ..
            } => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let threads = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().map_err(|_| CliError::Input(format!("{THREADS_ENV}={v} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Input("thread count must be positive".into()));
        }
        // A pool that already exists (repeated calls in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_store(dir: &Path, frames: &[crate::model::FrameModel], config: &RunConfig) -> Result<CostStore<f64>, CliError> {
    let to_f64 = |s: CostStore<f32>| -> CostStore<f64> { s.into_iter().map(|(k, v)| (k, Arc::new(v.cast()))).collect() };
    match load_patch_dir(dir).map_err(input)? {
        LoadedPatches::Costs(costs) => Ok(to_f64(costs)),
        LoadedPatches::Features(features) => {
            let (store, stats) =
                build_cost_store(frames, &features, &RobustLoss::cauchy(config.cauchy_scale as f32)).map_err(input)?;
            log::info!(
                "built {} cost patches ({} observations without patch, {} keypoints outside their patch)",
                stats.cost_patches,
                stats.missing_feature_patches,
                stats.keypoints_out_of_patch
            );
            Ok(to_f64(store))
        }
    }
}

pub fn cmd_refine(args: &RefineArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    config.feature_mode = if args.features.is_some() {
        FeatureMode::CostMaps
    } else {
        FeatureMode::None
    };
    let bundles = load_frames(&args.frames)?;
    let required: Vec<_> = bundles[0].cameras.iter().map(|c| c.camera_id).collect();
    let gt = parse_gt_extrinsics(&args.gt_extrinsics, &required)?;
    let rig = assemble_rig(&bundles, &gt)?;
    for b in &bundles {
        if !b.promoted.is_empty() {
            log::info!("frame {}: SIMPLE_PINHOLE cameras {:?} promoted to PINHOLE", b.frame_id, b.promoted);
        }
    }
    log::info!(
        "{} frames, {} cameras, {} observations",
        rig.frames.len(),
        rig.cameras.len(),
        rig.frames.iter().map(|f| f.observation_count()).sum::<usize>()
    );
    let store = match &args.features {
        Some(dir) => Some(load_store(dir, &rig.frames, &config)?),
        None => None,
    };
    let (refined, trace) = refine(&rig, &config, store.as_ref())?;

    std::fs::create_dir_all(&args.out).map_err(|e| SparseIoError::io(&args.out, e))?;
    for (b, frame) in bundles.iter().zip(&refined.frames) {
        let name = b
            .source
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| format!("frame_{:03}", b.frame_id).into());
        write_sparse_model(frame, &refined.cameras, &args.out.join("frames").join(name))?;
    }
    let named: BTreeMap<String, _> = refined
        .cameras
        .iter()
        .map(|c| (format!("{}:{}", c.camera_id, c.name), refined.global_intrinsics[&c.camera_id]))
        .collect();
    write_json(&args.out.join("global_intrinsics.json"), &named)?;
    let trace_path = args.out.join("trace.jsonl");
    let file = std::fs::File::create(&trace_path).map_err(|e| SparseIoError::io(&trace_path, e))?;
    trace
        .write_json_lines(std::io::BufWriter::new(file))
        .map_err(|e| SparseIoError::io(&trace_path, e))?;

    if let Some(path) = &args.gt_intrinsics {
        let truth = load_ground_truth(path)?;
        // The per-frame rows are independent single-frame refinements, the
        // baseline the multi-frame estimate is compared against.
        let per_frame = rig
            .frames
            .par_iter()
            .map(|f| {
                refine_single_frame(f, &rig.cameras, &config, store.as_ref()).map(|(_, k, _)| (f.frame_id, k))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report =
            build_report(&per_frame, &refined.global_intrinsics, &truth.intrinsics(), &truth.dims()).map_err(input)?;
        write_json(&args.out.join("report.json"), &report)?;
        let table = report.render_table();
        std::fs::write(args.out.join("report.txt"), &table).map_err(|e| SparseIoError::io(&args.out, e))?;
        log::info!("evaluation against {}:\n{table}", path.display());
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let noise = Noise {
        keypoint_sigma: args.sigma,
        keypoint_bias: args.bias,
        focal_rel: args.focal_rel,
        pp_abs: args.pp_abs,
        rotation_deg: args.rot_deg,
        translation: args.trans,
        point_jitter: args.point_jitter,
    };
    let data = generate_dome(args.seed, args.cameras, args.frames, args.points, &noise).map_err(input)?;
    let frames_dir = args.out.join("frames");
    for frame in &data.initial.frames {
        write_sparse_model(
            frame,
            &data.initial.cameras,
            &frames_dir.join(format!("frame_{:03}", frame.frame_id)),
        )?;
    }
    let gt = data.ground_truth.gt_extrinsics();
    std::fs::write(args.out.join("gt_extrinsics.txt"), render_gt_extrinsics(&gt))
        .map_err(|e| SparseIoError::io(&args.out, e))?;
    write_cost_store(&args.out.join("features"), &data.costs).map_err(input)?;
    write_ground_truth(
        &args.out.join("ground_truth.json"),
        &GroundTruth::from_cameras(&data.ground_truth.cameras),
    )?;
    log::info!(
        "wrote {} frames with {} cameras to {}",
        data.initial.frames.len(),
        data.initial.cameras.len(),
        args.out.display()
    );
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    let result = configure_threads(cli.threads).and_then(|_| match &cli.command {
        Command::Refine(a) => cmd_refine(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
