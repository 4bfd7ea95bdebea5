//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config/IO error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datamodel::{
    load_dataset, load_jsonl, save_dataset, save_jsonl, CameraIntrinsics, DataError,
    KeypointPrediction, Keypoints2D, ObjectModel3D, SequenceDataset,
};
use crate::gradcheck::{loss_gradcheck, network_gradcheck, LOSS_TOLERANCE, NETWORK_TOLERANCE};
use crate::keyhead::{
    dump_gate_weights, gate_weights_csv, load_checkpoint, EncoderModel, KeyheadError, ModelConfig,
};
use crate::losses::LossError;
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::pose3d::{load_pose_lines, save_pose_lines, solve_records, PoseError, PoseLine};
use crate::synth::{
    generate_dataset, generate_sequences, motion_fixture_configs, SynthError, TrajectoryConfig,
};
use crate::tracking::{smooth_lines, NoiseParams, TrackingError};
use crate::trainer::{
    predict, prepare_frames, train_frames, write_log_csv, TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Number of loss configurations checked by `gradcheck`.
pub const GRADCHECK_LOSS_CONFIGS: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "dronekey",
    version,
    about = "Drone keypoint detection and 6DoF pose toolkit"
)]
struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sequence (or the three-sequence fixture) as JSONL.
    Generate(GenerateArgs),
    /// Train a keypoint model.
    Train(TrainArgs),
    /// Predict keypoints for every record of a dataset.
    Predict(PredictArgs),
    /// Recover per-frame 6DoF poses from keypoints.
    SolvePose(SolveArgs),
    /// Kalman-smooth a pose JSONL file per sequence.
    Smooth(SmoothArgs),
    /// Score keypoint predictions (OKS, SR90, SR95, AP).
    EvalKp(EvalArgs),
    /// Score pose estimates (MAE-angle, RMSE, MAE-absolute).
    EvalPose(EvalArgs),
    /// Finite-difference check of the loss and network gradients.
    Gradcheck,
    /// Write mean gate weights per layer as CSV.
    GateDump(GateDumpArgs),
    /// Run generate, train, predict, solve-pose, smooth and evaluation.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct CameraArgs {
    /// Image width, pixels.
    #[arg(long, default_value_t = 640)]
    width: u32,
    /// Image height, pixels.
    #[arg(long, default_value_t = 640)]
    height: u32,
    #[arg(long, default_value_t = 800.0)]
    fx: f64,
    #[arg(long, default_value_t = 800.0)]
    fy: f64,
    /// Principal point x (default: image center).
    #[arg(long)]
    cx: Option<f64>,
    /// Principal point y (default: image center).
    #[arg(long)]
    cy: Option<f64>,
    /// Distance from the body center to each propeller, meters.
    #[arg(long, default_value_t = 0.15)]
    half_diagonal: f64,
}

impl CameraArgs {
    fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx.unwrap_or(self.width as f64 / 2.0),
            cy: self.cy.unwrap_or(self.height as f64 / 2.0),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Frames per sequence.
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value = "seq")]
    sequence_id: String,
    /// Translate the drone between frames.
    #[arg(long)]
    translation: bool,
    /// Rotate the drone between frames.
    #[arg(long)]
    rotation: bool,
    /// Curved instead of straight-line motion.
    #[arg(long)]
    nonlinear: bool,
    /// Observation noise standard deviation, pixels.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 3.0)]
    depth_min: f64,
    #[arg(long, default_value_t = 8.0)]
    depth_max: f64,
    /// Maximum rotation per frame, degrees.
    #[arg(long, default_value_t = 2.0)]
    rate: f64,
    /// Write the linear / nonlinear / nonlinear_rotation fixture instead of
    /// one sequence; the motion flags and --sequence-id are ignored.
    #[arg(long)]
    fixture: bool,
    #[command(flatten)]
    camera: CameraArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset JSONL; repeat to train on several files.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Training config JSON (TrainConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log CSV (epoch,loss,scale).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["pred", "use_gt", "use_obs"])))]
struct SolveArgs {
    #[arg(long)]
    data: PathBuf,
    /// Keypoint predictions JSONL.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Use the ground-truth keypoints of the dataset.
    #[arg(long)]
    use_gt: bool,
    /// Use the noisy observed keypoints of the dataset.
    #[arg(long)]
    use_obs: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    /// Process noise, translation.
    #[arg(long, default_value_t = NoiseParams::default().q_pos)]
    q_pos: f64,
    /// Process noise, rotation.
    #[arg(long, default_value_t = NoiseParams::default().q_rot)]
    q_rot: f64,
    /// Measurement noise, translation.
    #[arg(long, default_value_t = NoiseParams::default().r_pos)]
    r_pos: f64,
    /// Measurement noise, rotation.
    #[arg(long, default_value_t = NoiseParams::default().r_rot)]
    r_rot: f64,
    /// Pass measured rotations through unfiltered.
    #[arg(long)]
    no_rotation_filter: bool,
}

impl NoiseArgs {
    fn params(&self) -> NoiseParams {
        NoiseParams {
            q_pos: self.q_pos,
            q_rot: self.q_rot,
            r_pos: self.r_pos,
            r_rot: self.r_rot,
            filter_rotation: !self.no_rotation_filter,
        }
    }
}

#[derive(Debug, Args)]
struct SmoothArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Report JSON; the table is printed to stdout unless --quiet.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("weights").required(true).args(["model", "layers"])))]
struct GateDumpArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dump a freshly initialized model with this many layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Frames to average over.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Directory for every intermediate and final artifact.
    #[arg(long)]
    out_dir: PathBuf,
    /// Frames per sequence.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training config JSON; --epochs, --learning-rate and --seed override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation noise, pixels.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    depth_min: f64,
    #[arg(long, default_value_t = 2.0)]
    depth_max: f64,
    #[command(flatten)]
    camera: CameraArgs,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn data(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.to_string(),
        }
    }

    fn numerical(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::data(e)
    }
}

impl From<KeyheadError> for CliError {
    fn from(e: KeyheadError) -> Self {
        match e {
            KeyheadError::NonFinite { .. } => CliError::numerical(e),
            _ => CliError::data(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Loss(LossError::NonFinite) => {
                CliError::numerical(e)
            }
            TrainError::Model(inner) => inner.into(),
            _ => CliError::data(e),
        }
    }
}

impl From<PoseError> for CliError {
    fn from(e: PoseError) -> Self {
        CliError::numerical(e)
    }
}

impl From<TrackingError> for CliError {
    fn from(e: TrackingError) -> Self {
        match e {
            TrackingError::InvalidNoise(_) | TrackingError::Empty => CliError::data(e),
            _ => CliError::numerical(e),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::data(e)
    }
}

type CliResult = Result<(), CliError>;

struct Ctx {
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        quiet: cli.quiet,
    };
    let result = match cli.threads {
        Some(0) => Err(CliError {
            code: EXIT_USAGE,
            message: "--threads must be >= 1".into(),
        }),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&ctx, cli.command)),
            Err(e) => Err(CliError::data(format!("thread pool: {e}"))),
        },
        None => dispatch(&ctx, cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> CliResult {
    match command {
        Command::Generate(a) => cmd_generate(ctx, &a),
        Command::Train(a) => cmd_train(ctx, &a),
        Command::Predict(a) => cmd_predict(ctx, &a),
        Command::SolvePose(a) => cmd_solve(ctx, &a),
        Command::Smooth(a) => cmd_smooth(ctx, &a),
        Command::EvalKp(a) => cmd_eval(ctx, &a, true),
        Command::EvalPose(a) => cmd_eval(ctx, &a, false),
        Command::Gradcheck => cmd_gradcheck(ctx),
        Command::GateDump(a) => cmd_gate_dump(ctx, &a),
        Command::Pipeline(a) => cmd_pipeline(ctx, &a),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| DataError::io(path, e).into())
}

fn write_report(report: &MetricsReport, path: &Path) -> CliResult {
    let text = serde_json::to_string_pretty(report).map_err(CliError::data)?;
    write_file(path, &(text + "\n"))
}

fn read_train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| DataError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> CliResult {
    let base = TrajectoryConfig {
        n_frames: a.frames,
        translation: a.translation,
        rotation: a.rotation,
        nonlinear: a.nonlinear,
        depth_range: (a.depth_min, a.depth_max),
        angular_rate_max: a.rate,
        seed: ctx.seed.unwrap_or(0),
        sigma_px: a.sigma,
        sequence_id: a.sequence_id.clone(),
    };
    let model = ObjectModel3D::square(a.camera.half_diagonal);
    let intr = a.camera.intrinsics();
    let ds = if a.fixture {
        generate_sequences(&motion_fixture_configs(&base), &model, &intr)?
    } else {
        generate_dataset(&base, &model, &intr)?
    };
    ds.validate()?;
    save_dataset(&ds, &a.out)?;
    ctx.info(format!("wrote {} frames to {}", ds.len(), a.out.display()));
    Ok(())
}

fn load_datasets(paths: &[PathBuf]) -> Result<SequenceDataset, CliError> {
    let parts = paths
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SequenceDataset::concat(&parts))
}

/// Trains with progress output; writes the checkpoint and optional log.
fn run_training(
    ctx: &Ctx,
    dataset: &SequenceDataset,
    init: Option<EncoderModel>,
    mut cfg: TrainConfig,
    out: &Path,
    log: Option<&Path>,
) -> Result<EncoderModel, CliError> {
    cfg.checkpoint_path = Some(out.to_path_buf());
    if let Some(log) = log {
        cfg.log_path = Some(log.to_path_buf());
    }
    cfg.validate()?;
    let model = match init {
        Some(m) => m,
        None => EncoderModel::init(cfg.model, cfg.seed)?,
    };
    let frames = prepare_frames(dataset, &model.config)?;
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let total = cfg.epochs;
    let outcome = train_frames(&frames, model, &cfg, |row, _| {
        if row.epoch % 10 == 0 || row.epoch + 1 == total {
            ctx.info(format!(
                "epoch {:>4}  loss {:.6e}  scale {:.6e}",
                row.epoch, row.loss, row.scale
            ));
        }
    })?;
    if let Some(path) = &cfg.log_path {
        write_log_csv(&outcome.log, path)?;
    }
    Ok(outcome.model)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CliResult {
    let mut cfg = read_train_config(a.config.as_deref())?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    let dataset = load_datasets(&a.data)?;
    let init = match &a.init {
        Some(p) => {
            let m = load_checkpoint(p)?;
            cfg.model = m.config;
            Some(m)
        }
        None => None,
    };
    run_training(ctx, &dataset, init, cfg, &a.out, a.log.as_deref())?;
    ctx.info(format!("wrote checkpoint {}", a.out.display()));
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: &PredictArgs) -> CliResult {
    let dataset = load_dataset(&a.data)?;
    let model = load_checkpoint(&a.model)?;
    let preds = predict(&dataset, &model)?;
    save_jsonl(&preds, &a.out)?;
    ctx.info(format!(
        "wrote {} predictions to {}",
        preds.len(),
        a.out.display()
    ));
    Ok(())
}

/// Keypoints aligned with the dataset records.
fn aligned_predictions(
    dataset: &SequenceDataset,
    preds: &[KeypointPrediction],
) -> Result<Vec<Keypoints2D>, CliError> {
    let order =
        crate::metrics::match_to_records(preds, dataset, |p| (p.sequence_id.clone(), p.frame_id))?;
    Ok(order.iter().map(|&i| preds[i].keypoints()).collect())
}

fn solve_and_report(
    ctx: &Ctx,
    dataset: &SequenceDataset,
    keypoints: &[Keypoints2D],
) -> Result<Vec<PoseLine>, CliError> {
    let solution = solve_records(&dataset.records, keypoints)?;
    if !solution.fallbacks.is_empty() {
        ctx.info(format!(
            "{} frame(s) failed to solve and reuse a neighbouring pose",
            solution.fallbacks.len()
        ));
    }
    Ok(solution.lines)
}

fn cmd_solve(ctx: &Ctx, a: &SolveArgs) -> CliResult {
    let dataset = load_dataset(&a.data)?;
    let keypoints: Vec<Keypoints2D> = if a.use_gt {
        dataset.records.iter().map(|r| r.kp2d_gt).collect()
    } else if a.use_obs {
        dataset.records.iter().map(|r| r.kp2d_obs).collect()
    } else {
        let path = a.pred.as_ref().expect("argument group requires one source");
        let preds: Vec<KeypointPrediction> = load_jsonl(path)?;
        aligned_predictions(&dataset, &preds)?
    };
    let lines = solve_and_report(ctx, &dataset, &keypoints)?;
    save_pose_lines(&lines, &a.out)?;
    ctx.info(format!(
        "wrote {} poses to {}",
        lines.len(),
        a.out.display()
    ));
    Ok(())
}

fn cmd_smooth(ctx: &Ctx, a: &SmoothArgs) -> CliResult {
    let lines = load_pose_lines(&a.input)?;
    let smoothed = smooth_lines(&lines, &a.noise.params())?;
    save_pose_lines(&smoothed, &a.out)?;
    ctx.info(format!(
        "wrote {} smoothed poses to {}",
        smoothed.len(),
        a.out.display()
    ));
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs, keypoints: bool) -> CliResult {
    let dataset = load_dataset(&a.data)?;
    let report = if keypoints {
        let preds: Vec<KeypointPrediction> = load_jsonl(&a.pred)?;
        evaluate(&dataset, Some(&preds), None)?
    } else {
        let lines = load_pose_lines(&a.pred)?;
        evaluate(&dataset, None, Some(&lines))?
    };
    if !ctx.quiet {
        print!("{}", report.table());
    }
    if let Some(out) = &a.out {
        write_report(&report, out)?;
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx) -> CliResult {
    let seed = ctx.seed.unwrap_or(0);
    let loss = loss_gradcheck(GRADCHECK_LOSS_CONFIGS, seed);
    let net = network_gradcheck(seed)?;
    println!(
        "loss     max_rel_error {:.3e} (tolerance {:.0e}, {} checks)",
        loss.max_rel_error, LOSS_TOLERANCE, loss.checked
    );
    println!(
        "network  max_rel_error {:.3e} (tolerance {:.0e}, {} checks)",
        net.max_rel_error, NETWORK_TOLERANCE, net.checked
    );
    let loss_ok = loss.max_rel_error <= LOSS_TOLERANCE;
    let net_ok = net.max_rel_error <= NETWORK_TOLERANCE;
    if loss_ok && net_ok {
        Ok(())
    } else {
        let worst = if loss_ok { &net.worst } else { &loss.worst };
        Err(CliError::numerical(format!(
            "gradient check failed at {worst}"
        )))
    }
}

fn cmd_gate_dump(ctx: &Ctx, a: &GateDumpArgs) -> CliResult {
    let dataset = load_dataset(&a.data)?;
    let model = match (&a.model, a.layers) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, Some(layers)) => {
            let config = ModelConfig {
                layers,
                ..ModelConfig::default()
            };
            EncoderModel::init(config, ctx.seed.unwrap_or(0))?
        }
        (None, None) => unreachable!("argument group requires one source"),
    };
    let weights = dump_gate_weights(&model, &dataset.records)?;
    write_file(&a.out, &gate_weights_csv(&weights))?;
    ctx.info(format!(
        "wrote {} gate weights to {}",
        weights.len(),
        a.out.display()
    ));
    Ok(())
}

/// Default training setup of `pipeline`.
pub fn pipeline_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

fn cmd_pipeline(ctx: &Ctx, a: &PipelineArgs) -> CliResult {
    let seed = ctx.seed.unwrap_or(0);
    fs::create_dir_all(&a.out_dir).map_err(|e| DataError::io(&a.out_dir, e))?;
    let path = |name: &str| a.out_dir.join(name);

    let base = TrajectoryConfig {
        n_frames: a.frames,
        depth_range: (a.depth_min, a.depth_max),
        seed,
        sigma_px: a.sigma,
        ..TrajectoryConfig::default()
    };
    let intr = a.camera.intrinsics();
    let dataset = generate_sequences(
        &motion_fixture_configs(&base),
        &ObjectModel3D::square(a.camera.half_diagonal),
        &intr,
    )?;
    dataset.validate()?;
    save_dataset(&dataset, &path("dataset.jsonl"))?;
    ctx.info(format!("generated {} frames", dataset.len()));

    let mut cfg = match &a.config {
        Some(p) => read_train_config(Some(p))?,
        None => pipeline_train_config(),
    };
    cfg.seed = seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    let model = run_training(
        ctx,
        &dataset,
        None,
        cfg.clone(),
        &path("model.json"),
        Some(&path("train_log.csv")),
    )?;

    let preds = predict(&dataset, &model)?;
    save_jsonl(&preds, &path("pred_kp.jsonl"))?;
    let keypoints: Vec<Keypoints2D> = preds.iter().map(|p| p.keypoints()).collect();

    let lines = solve_and_report(ctx, &dataset, &keypoints)?;
    save_pose_lines(&lines, &path("poses.jsonl"))?;
    let smoothed = smooth_lines(&lines, &a.noise.params())?;
    save_pose_lines(&smoothed, &path("poses_smoothed.jsonl"))?;

    let gates = dump_gate_weights(&model, &dataset.records)?;
    write_file(&path("gate_weights.csv"), &gate_weights_csv(&gates))?;

    let raw = evaluate(&dataset, Some(&preds), Some(&lines))?;
    write_report(&raw, &path("report_unsmoothed.json"))?;
    let report = evaluate(&dataset, Some(&preds), Some(&smoothed))?;
    write_report(&report, &path("report.json"))?;
    if !ctx.quiet {
        print!("{}", report.table());
    }
    Ok(())
}
