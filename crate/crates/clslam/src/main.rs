//! Command-line front end: `gen` renders datasets, `run` executes the full
//! benchmark, `eval` scores trajectory files, `table` re-renders a saved
//! report. Exit codes: 0 success, 1 configuration or input problem, 2
//! runtime failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use clslam::config::{config_hash, load_config, ExperimentConfig};
use clslam::dataset::{read_pose_file, save_checkpoint, write_dataset};
use clslam::experiment::{parse_methods, render_scenes, run_experiment, RunOutput};
use clslam::report::{emit_report, read_report, render_text, scene_label, write_text_file};
use clslam_core::metrics::{
    median_scale_factor, relative_segment_errors, scale_trajectory, KITTI_SEGMENT_LENGTHS,
};
use clslam_core::toynets::{NetKind, ParamVector};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clslam", version, about = "Continual-SLAM workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render every configured scene into an on-disk dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train, deploy every method over the evaluation plan, and write
    /// report, log, and checkpoint files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// "all" or a comma-separated subset of
        /// cl_slam,fixed,expert_only,general_only,offline.
        #[arg(long, default_value = "all")]
        methods: String,
        /// Enables loop closure and pose-graph optimization on every
        /// deployment, overriding the config.
        #[arg(long)]
        loops: bool,
    },
    /// Score an estimated trajectory file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// Comma-separated segment lengths in meters; defaults to the
        /// 100..800 benchmark set.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// "median" rescales the estimate by the median per-step ratio
        /// before scoring; "none" compares as-is.
        #[arg(long, default_value = "none")]
        scale: String,
    },
    /// Print the text table of a saved report.json.
    Table {
        #[arg(long)]
        report: PathBuf,
    },
}

enum AppError {
    Config(String),
    Runtime(String),
}

impl AppError {
    fn code(&self) -> ExitCode {
        match self {
            AppError::Config(_) => ExitCode::from(1),
            AppError::Runtime(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> AppError {
    AppError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> AppError {
    AppError::Runtime(e.to_string())
}

fn load(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(ExperimentConfig, String), AppError> {
    let (mut config, raw) = load_config(path).map_err(config_err)?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    let hash = config_hash(&raw, config.master_seed);
    Ok((config, hash))
}

fn cmd_gen(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), AppError> {
    let (config, _) = load(&config, seed, out)?;
    let scenes = render_scenes(&config).map_err(runtime_err)?;
    let root = config.output_dir.join("datasets");
    for (sref, scene) in &scenes {
        let dir = root.join(scene_label(*sref));
        write_dataset(scene, &dir).map_err(runtime_err)?;
        println!("wrote {} frames to {}", scene.images.len(), dir.display());
    }
    Ok(())
}

fn save_weights(
    dir: &Path,
    stem: &str,
    config: &ExperimentConfig,
    weights: &(ParamVector, ParamVector),
) -> Result<(), AppError> {
    save_checkpoint(&dir.join(format!("{stem}_depth.tnet")), NetKind::Depth, &config.net, &weights.0)
        .map_err(runtime_err)?;
    save_checkpoint(&dir.join(format!("{stem}_pose.tnet")), NetKind::Pose, &config.net, &weights.1)
        .map_err(runtime_err)?;
    Ok(())
}

fn cmd_run(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    methods: String,
    loops: bool,
) -> Result<(), AppError> {
    let (config, hash) = load(&config, seed, out)?;
    let methods = parse_methods(&methods).map_err(AppError::Config)?;
    let loops_override = if loops { Some(true) } else { None };
    let RunOutput { table, logs, graphs, pretrained, offline } =
        run_experiment(&config, &hash, &methods, loops_override).map_err(runtime_err)?;

    let dir = &config.output_dir;
    emit_report(&table, dir).map_err(runtime_err)?;
    let log_dir = dir.join("logs");
    std::fs::create_dir_all(&log_dir).map_err(runtime_err)?;
    for (name, text) in &logs {
        write_text_file(&log_dir.join(name), text).map_err(runtime_err)?;
    }
    if !graphs.is_empty() {
        let graph_dir = dir.join("graphs");
        std::fs::create_dir_all(&graph_dir).map_err(runtime_err)?;
        for (name, text) in &graphs {
            write_text_file(&graph_dir.join(name), text).map_err(runtime_err)?;
        }
    }
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(runtime_err)?;
    save_weights(&ckpt_dir, "pretrained", &config, &pretrained)?;
    if let Some(offline) = &offline {
        save_weights(&ckpt_dir, "offline", &config, offline)?;
    }

    print!("{}", render_text(&table));
    println!("report written to {}", dir.join("report.json").display());
    Ok(())
}

fn cmd_eval(
    gt: PathBuf,
    est: PathBuf,
    lengths: Option<String>,
    step: usize,
    scale: String,
) -> Result<(), AppError> {
    let gt = read_pose_file(&gt).map_err(config_err)?;
    let mut est = read_pose_file(&est).map_err(config_err)?;
    let lengths: Vec<f64> = match &lengths {
        Some(text) => text
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| AppError::Config(format!("bad segment length: {e}")))?,
        None => KITTI_SEGMENT_LENGTHS.to_vec(),
    };
    match scale.as_str() {
        "none" => {}
        "median" => {
            let factor = median_scale_factor(&gt, &est).map_err(config_err)?;
            est = scale_trajectory(&est, factor);
            println!("scale_factor {factor}");
        }
        other => return Err(AppError::Config(format!("unknown scale mode {other:?}"))),
    }
    let errors = relative_segment_errors(&gt, &est, &lengths, step).map_err(config_err)?;
    println!("t_err_pct {}", errors.t_err);
    println!("r_err_deg_per_100m {}", errors.r_err);
    Ok(())
}

fn cmd_table(report: PathBuf) -> Result<(), AppError> {
    let table = read_report(&report).map_err(config_err)?;
    print!("{}", render_text(&table));
    Ok(())
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config, seed, out),
        Command::Run { config, seed, out, methods, loops } => {
            cmd_run(config, seed, out, methods, loops)
        }
        Command::Eval { gt, est, lengths, step, scale } => cmd_eval(gt, est, lengths, step, scale),
        Command::Table { report } => cmd_table(report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
