use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dpc_core::datakit::{
    generate_synthetic, ingest_kitti, read_kitti_poses, write_kitti_poses, IngestOptions, SequenceManifest,
    SyntheticSceneConfig,
};
use dpc_core::evaluation::{compound, evaluate, format_report_csv, format_table, polyline_csv, Trajectory};
use dpc_core::fsutil::write_atomic;
use dpc_core::imaging::io::write_flow;
use dpc_core::model::{load_checkpoint, ModelConfig};
use dpc_core::trainer::{
    build_dataset, correct_with_model, format_pairs, parse_pairs, parse_records_csv, select_epoch_gradient,
    select_epoch_loopclosure, train, MotionThresholds, SequenceData, TrainConfig,
};
use dpc_core::Twist;

#[derive(Parser)]
#[command(name = "dpc", version, about = "Learned pose corrections for visual odometry")]
struct Cli {
    /// Seed for every random choice; overrides the run config when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base directory for relative manifest entries (default: $DPC_DATA_ROOT,
    /// then the manifest's directory).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with a biased odometry prior.
    Synth(SynthArgs),
    /// Ingest sequences, compute flows and write the training pair index.
    Prepare(PrepareArgs),
    /// Train the corrector, writing per-epoch checkpoints and records.
    Train(TrainArgs),
    /// Pick an epoch from a records file.
    Select(SelectArgs),
    /// Apply a checkpoint to a sequence and write corrected relative poses.
    Correct(CorrectArgs),
    /// Segment error, mean ATE and plot data of an estimated trajectory.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Plane,
    Stadium,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "stadium")]
    scenario: Scenario,
    #[arg(long, default_value = "synth")]
    id: String,
    /// Truncate to this many frames (plane: number of frames).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 1)]
    laps: usize,
    #[arg(long, default_value_t = 12)]
    straight_steps: usize,
    #[arg(long, default_value_t = 16)]
    turn_steps: usize,
    /// Metres per frame.
    #[arg(long, default_value_t = 1.6)]
    step: f64,
    /// Plane depth in metres.
    #[arg(long, default_value_t = 6.0)]
    depth: f64,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Constant yaw bias of the prior, degrees per frame.
    #[arg(long, default_value_t = 0.3)]
    yaw_bias_deg: f64,
    /// Prior noise std per translation axis, metres.
    #[arg(long, default_value_t = 0.01)]
    noise_trans: f64,
    /// Prior noise std per rotation axis, degrees.
    #[arg(long, default_value_t = 0.02)]
    noise_rot_deg: f64,
}

#[derive(clap::Args)]
struct PrepareArgs {
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run config providing the network resolution.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1.5)]
    min_translation: f64,
    #[arg(long, default_value_t = 0.4)]
    min_rotation_deg: f64,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    val_manifest: PathBuf,
    /// Pair index written by `prepare`; built with default thresholds when
    /// absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Gradient,
    Loopclosure,
}

#[derive(clap::Args)]
struct SelectArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum)]
    criterion: Criterion,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum CorrectionMode {
    Full,
    RotationOnly,
}

#[derive(clap::Args)]
struct CorrectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    mode: CorrectionMode,
    /// Corrected inter-frame motions, one 3x4 pose per line.
    #[arg(long)]
    out: PathBuf,
    /// Also write the compounded corrected trajectory.
    #[arg(long)]
    trajectory_out: Option<PathBuf>,
    /// Rescale prior translations to ground-truth displacement first.
    #[arg(long)]
    rescale: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Row label; defaults to the estimate's file stem.
    #[arg(long)]
    name: Option<String>,
    /// Directory for report.csv and x-z polylines.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0)),
        Command::Prepare(a) => prepare(a, root),
        Command::Train(a) => train_cmd(a, cli.seed, root),
        Command::Select(a) => select(a),
        Command::Correct(a) => correct(a, root),
        Command::Eval(a) => eval(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let mut cfg = match a.scenario {
        Scenario::Plane => SyntheticSceneConfig::plane(seed, a.frames.unwrap_or(50), a.step, a.depth),
        Scenario::Stadium => SyntheticSceneConfig::stadium(seed, a.laps, a.straight_steps, a.turn_steps, a.step),
    };
    if let (Scenario::Stadium, Some(n)) = (a.scenario, a.frames) {
        cfg.motion.truncate(n.saturating_sub(1));
    }
    cfg.height = a.height;
    cfg.width = a.width;
    let rot = a.noise_rot_deg.to_radians();
    let cfg = cfg.with_bias(
        Twist::from_array([0.0, 0.0, 0.0, 0.0, a.yaw_bias_deg.to_radians(), 0.0]),
        [a.noise_trans, a.noise_trans, a.noise_trans, rot, rot, rot],
    );
    let seq = generate_synthetic(&cfg)?;
    let manifest = seq.write(&a.out, &a.id)?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_config_text(&read_text(p)?).with_context(|| format!("in {}", p.display())),
        None => Ok(TrainConfig::stereo()),
    }
}

fn ingest_options(m: &ModelConfig) -> IngestOptions {
    IngestOptions {
        height: m.height,
        width: m.width_px,
        channels: m.image_channels,
    }
}

fn load_sequence(path: &Path, root: Option<&Path>, opts: &IngestOptions) -> Result<SequenceData> {
    let m = SequenceManifest::load(path, root)?;
    info!("ingesting {} from {}", m.id, path.display());
    ingest_kitti(&m, opts).with_context(|| format!("ingesting {}", path.display()))
}

fn prepare(a: PrepareArgs, root: Option<&Path>) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let opts = ingest_options(&cfg.model);
    let mut index = Vec::new();
    for path in &a.manifest {
        let mut m = SequenceManifest::load(path, root)?;
        let seq = ingest_kitti(&m, &opts).with_context(|| format!("ingesting {}", path.display()))?;
        let dir = a.out.join(&m.id);
        let flows = dir.join("flows");
        for (i, f) in seq.flows.iter().enumerate() {
            write_flow(&flows.join(format!("{i:06}.flo")), f)?;
        }
        m.flows = Some(std::path::absolute(&flows)?);
        for p in [&mut m.images, &mut m.intrinsics, &mut m.vo] {
            *p = std::path::absolute(&*p)?;
        }
        if let Some(gt) = &mut m.gt {
            *gt = std::path::absolute(&*gt)?;
        }
        write_text(&dir.join("manifest.txt"), &m.to_text(&dir))?;
        index.push((seq.id.clone(), seq.frames.len(), seq.vo.clone()));
    }
    let thresholds = MotionThresholds {
        translation: a.min_translation,
        rotation: a.min_rotation_deg.to_radians(),
    };
    let pairs = build_dataset(&index, &thresholds)?;
    let total: usize = index.iter().map(|(_, n, _)| n - 1).sum();
    write_text(&a.out.join("pairs.txt"), &format_pairs(&pairs))?;
    println!("{} of {total} pairs kept", pairs.len());
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>, root: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let opts = ingest_options(&cfg.model);
    let sequences = a
        .manifest
        .iter()
        .map(|p| load_sequence(p, root, &opts))
        .collect::<Result<Vec<_>>>()?;
    let val = load_sequence(&a.val_manifest, root, &opts)?;
    let pairs = match &a.pairs {
        Some(p) => parse_pairs(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => {
            let index: Vec<_> = sequences.iter().map(|s| (s.id.clone(), s.frames.len(), s.vo.clone())).collect();
            build_dataset(&index, &MotionThresholds::default())?
        }
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join("config.txt"), &cfg.to_config_text())?;
    info!("training on {} pairs for {} epochs", pairs.len(), cfg.max_epochs);
    let outcome = train(&cfg, &sequences, &pairs, &val, &a.out)?;
    println!("{}", outcome.records_path.display());
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let records = parse_records_csv(&read_text(&a.records)?).with_context(|| format!("in {}", a.records.display()))?;
    let epoch = match a.criterion {
        Criterion::Gradient => select_epoch_gradient(&records)?,
        Criterion::Loopclosure => select_epoch_loopclosure(&records)?,
    };
    let r = records.iter().find(|r| r.epoch == epoch).expect("selected epoch is recorded");
    println!("epoch {epoch}");
    println!("checkpoint {}", r.checkpoint_path.display());
    Ok(())
}

fn correct(a: CorrectArgs, root: Option<&Path>) -> Result<()> {
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let seq = load_sequence(&a.manifest, root, &ingest_options(&params.config))?;
    if a.rescale && seq.gt.is_none() {
        bail!("--rescale needs ground truth in {}", a.manifest.display());
    }
    let corrected = correct_with_model(&params, &seq, a.rescale, a.mode == CorrectionMode::RotationOnly)?;
    // motions are written in the pose-file convention, `G_t^-1 * G_{t+1}`
    let motions: Vec<_> = corrected.iter().map(|t| t.inverse()).collect();
    write_kitti_poses(&a.out, &motions)?;
    if let Some(path) = &a.trajectory_out {
        write_kitti_poses(path, compound(&corrected)?.poses())?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let est = Trajectory::from_global(read_kitti_poses(&a.est)?).with_context(|| a.est.display().to_string())?;
    let gt = Trajectory::from_global(read_kitti_poses(&a.gt)?).with_context(|| a.gt.display().to_string())?;
    let name = a.name.unwrap_or_else(|| {
        a.est
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "estimate".into())
    });
    let row = evaluate(&name, &est, &gt)?;
    print!("{}", format_table(std::slice::from_ref(&row)));
    if let Some(dir) = &a.out_dir {
        write_text(&dir.join("report.csv"), &format_report_csv(std::slice::from_ref(&row)))?;
        write_text(&dir.join("est_xz.csv"), &polyline_csv(&est))?;
        write_text(&dir.join("gt_xz.csv"), &polyline_csv(&gt))?;
    }
    Ok(())
}
