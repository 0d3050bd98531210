//! `gcvd`: synthesize scenes, run the engine, evaluate and export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcvd_core::config::RunConfig;
use gcvd_core::error::{Error, Result};
use gcvd_core::exec::Executor;
use gcvd_core::pipeline::{evaluate_dirs, export_point_clouds, run_scene};
use gcvd_core::synth::{generate, SceneSpec};

/// Exit code for a report holding a NaN metric.
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "gcvd",
    version,
    about = "Offline video depth and pose estimation from monocular priors"
)]
struct Cli {
    /// Worker threads; 1 gives deterministic output.
    #[arg(long, global = true, env = "GCVD_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene with priors and ground truth.
    Synth(SynthArgs),
    /// Run the full pipeline on a scene directory.
    Run(RunArgs),
    /// Compare an estimate with ground truth.
    Eval(EvalArgs),
    /// Write point clouds for selected frames of a run.
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    /// Key-value scene spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Key-value run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    skip_pgo: bool,
    #[arg(long)]
    no_grad_loss: bool,
    #[arg(long)]
    no_mesh: bool,
    #[arg(long)]
    uniform_keyframes: bool,
    /// Also write point clouds for these frames, e.g. `0,60`.
    #[arg(long, value_delimiter = ',')]
    points: Vec<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory (or any directory with trajectory.txt and depths).
    #[arg(long)]
    est: PathBuf,
    /// Scene root or ground-truth directory.
    #[arg(long)]
    gt: PathBuf,
    /// Frame offset of the relative pose error.
    #[arg(long, default_value_t = 1)]
    rpe_step: usize,
    /// Also write the metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    /// Output directory for `points_%06d.xyz`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    frames: Vec<usize>,
}

fn synth(args: &SynthArgs, exec: &Executor) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => SceneSpec::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.frames {
        spec.frames = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    let scene = generate(&spec, exec)?;
    scene.write(&args.out, args.force)?;
    println!("wrote {} frames to {}", scene.frame_count(), args.out.display());
    Ok(())
}

fn run_config(args: &RunArgs, threads: usize) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.skip_pgo |= args.skip_pgo;
    cfg.no_grad_loss |= args.no_grad_loss;
    cfg.no_mesh |= args.no_mesh;
    cfg.uniform_keyframes |= args.uniform_keyframes;
    cfg.threads = threads;
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, threads: usize, exec: &Executor) -> Result<()> {
    let cfg = run_config(args, threads)?;
    let out = run_scene(&args.scene, &args.out, &cfg, args.force, exec)?;
    if !args.points.is_empty() {
        export_point_clouds(&args.out, &args.points, &args.out.join("points"))?;
    }
    print!("{}", out.report.to_text());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<bool> {
    let report = evaluate_dirs(&args.est, &args.gt, args.rpe_step)?;
    print!("{}", report.to_key_values());
    if let Some(p) = &args.csv {
        write_file(p, &report.to_csv())?;
    }
    Ok(!report.has_nan())
}

fn export(args: &ExportArgs) -> Result<()> {
    for p in export_point_clouds(&args.run, &args.frames, &args.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: config error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let exec = Executor::new(cli.threads);
    let result = match &cli.command {
        Command::Synth(a) => synth(a, &exec).map(|_| true),
        Command::Run(a) => run(a, cli.threads, &exec).map(|_| true),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: report contains a NaN metric");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
