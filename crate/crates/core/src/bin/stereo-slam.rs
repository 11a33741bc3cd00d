//! Command-line front end: `simulate`, `run` and `eval`.
//!
//! Exit codes: 0 on success, 2 when tracking was lost, 3 on bad input,
//! 1 when an output file cannot be written.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stereo_slam::eval::{evaluate, read_tum, write_tum, TrajectorySeries, DEFAULT_SUBSEQUENCE_LENGTHS};
use stereo_slam::lie::StereoCamera;
use stereo_slam::pipeline::{run, FeatureMode, PipelineConfig, RunStatus};
use stereo_slam::sim::{simulate, Sequence, SimSpec};
use stereo_slam::tracks::{read_tracks, write_tracks};

#[derive(Parser)]
#[command(name = "stereo-slam", version, about = "Stereo point and line SLAM back-end")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence to a track file.
    Simulate(SimulateArgs),
    /// Run odometry, mapping and loop closure on a track file or simulation.
    Run(RunArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec (`key = value`); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth trajectory of every frame (TUM).
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "sim", required_unless_present = "sim")]
    tracks: Option<PathBuf>,
    /// Simulation spec rendered in memory instead of reading tracks.
    #[arg(long)]
    sim: Option<PathBuf>,
    /// Pipeline configuration (`key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured feature mode: points, lines or pl.
    #[arg(long)]
    mode: Option<FeatureMode>,
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long = "sim-matrix")]
    sim_matrix: Option<PathBuf>,
    /// Event log, one JSON object per line.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Ground truth (TUM) used to add trajectory errors to the metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Forces the single-schedule execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    est: PathBuf,
    /// Subsequence lengths in meters.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SUBSEQUENCE_LENGTHS)]
    lengths: Vec<f64>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Input(String),
    Output(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 3,
            Failure::Output(_) => 1,
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Output(format!("{}: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<SimSpec, Failure> {
    SimSpec::from_kv(&read(path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Ground truth as camera-to-world poses in the first camera's frame, the
/// frame the estimator reports in.
fn ground_truth(seq: &Sequence) -> TrajectorySeries {
    let origin = seq.poses[0];
    seq.poses.iter().enumerate().map(|(k, p)| (k as f64, (p * &origin.inverse()).inverse())).collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let mut spec = match &args.spec {
        Some(p) => load_spec(p)?,
        None => SimSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let seq = simulate(&spec);
    let file = fs::File::create(&args.out).map_err(|e| Failure::Output(format!("{}: {e}", args.out.display())))?;
    write_tracks(std::io::BufWriter::new(file), &seq.frames).map_err(|e| Failure::Output(format!("{}: {e}", args.out.display())))?;
    if let Some(gt) = &args.gt {
        write(gt, &write_tum(&ground_truth(&seq)))?;
    }
    log::info!("wrote {} frames to {}", seq.frames.len(), args.out.display());
    Ok(0)
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_kv(&read(p)?).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }

    let (frames, sim_truth) = match (&args.tracks, &args.sim) {
        (_, Some(spec_path)) => {
            let spec = load_spec(spec_path)?;
            cfg.camera = spec.camera;
            let seq = simulate(&spec);
            let gt = ground_truth(&seq);
            (seq.frames, Some(gt))
        }
        (Some(path), None) => {
            let file = fs::File::open(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let cam: StereoCamera = cfg.camera;
            let frames = read_tracks(BufReader::new(file), &cam).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            (frames, None)
        }
        (None, None) => return Err(Failure::Input("either --tracks or --sim is required".into())),
    };
    let gt = match &args.gt {
        Some(p) => Some(read_tum(&read(p)?).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?),
        None => sim_truth,
    };

    let out = run(&cfg, &frames).map_err(|e| Failure::Input(e.to_string()))?;
    let trajectory = out.trajectory();
    let mut metrics = out.metrics();
    if let Some(gt) = &gt {
        match evaluate(gt, &trajectory, &DEFAULT_SUBSEQUENCE_LENGTHS) {
            Ok(report) => metrics.evaluation = Some(report),
            Err(e) => log::warn!("trajectory not evaluated: {e}"),
        }
    }

    if let Some(p) = &args.traj {
        write(p, &write_tum(&trajectory))?;
    }
    if let Some(p) = &args.map {
        write(p, &out.map.to_json())?;
    }
    if let Some(p) = &args.metrics {
        write(p, &(serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n"))?;
    }
    if let Some(p) = &args.sim_matrix {
        write(p, &out.similarity_csv())?;
    }
    if let Some(p) = &args.events {
        write(p, &out.events_jsonl())?;
    }
    match out.status {
        RunStatus::Completed => {
            log::info!("{} keyframes, {} loops accepted", metrics.keyframes, metrics.loops_accepted);
            Ok(0)
        }
        RunStatus::TrackingLost { frame } => {
            eprintln!("tracking lost at frame {frame}");
            Ok(2)
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<u8, Failure> {
    let parse = |p: &Path| read_tum(&read(p)?).map_err(|e| Failure::Input(format!("{}: {e}", p.display())));
    let gt = parse(&args.gt)?;
    let est = parse(&args.est)?;
    let report = evaluate(&gt, &est, &args.lengths).map_err(|e| Failure::Input(e.to_string()))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &args.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let _ = e.print();
        std::process::exit(if e.use_stderr() { 3 } else { 0 });
    });
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            match &f {
                Failure::Input(m) | Failure::Output(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
