use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stream_ttt::formats::write_stream;
use stream_ttt::{execute, parse_config, report_figures, CliError, ExperimentConfig, Mode, Result, RunOptions};
use stream_ttt_core::streamgen::generate;

#[derive(Parser)]
#[command(name = "stream-ttt", version, about = "Online test-time training on streams: runs, sweeps, ablations and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config and STREAM_TTT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Parallel {
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the config's stream and write it as a stream file.
    GenStream {
        #[command(flatten)]
        common: Common,
    },
    /// Run the config in whatever mode it names.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        parallel: Parallel,
        /// Use this stream file instead of generating the stream.
        #[arg(long)]
        stream_file: Option<PathBuf>,
        /// Start from this frozen model instead of training one.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Window-size sweep on the quadratic model (mode theorem-sweep).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        parallel: Parallel,
    },
    /// Memory and baseline ablation suite (mode ablation-suite).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        parallel: Parallel,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Randomised check of the strong-convexity lemma (mode lemma-check).
    Lemma {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        parallel: Parallel,
    },
    /// Plot-ready CSVs from a finished bundle.
    Report {
        /// Bundle directory written by run, sweep or ablate.
        #[arg(long)]
        bundle: PathBuf,
        /// Where to write the tables (default: the bundle directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common, mode: Option<Mode>) -> Result<ExperimentConfig> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?,
        None if mode.is_some() => "{}".to_string(),
        None => return Err(CliError::Validation("--config is required".into())),
    };
    let text = match mode {
        Some(m) => {
            let mut value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("not valid JSON: {e}")))?;
            if let Some(obj) = value.as_object_mut() {
                obj.insert("mode".into(), serde_json::to_value(m).expect("mode serialises"));
            }
            value.to_string()
        }
        None => text,
    };
    let mut config = parse_config(&text, common.seed)?;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

/// Reads only `seed` and `stream` from the config, so a stream-only file is enough.
fn load_stream_only(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("not valid JSON: {e}")))?;
    let mut minimal = serde_json::json!({ "mode": "lemma-check" });
    for key in ["seed", "stream"] {
        if let Some(v) = value.get(key) {
            minimal[key] = v.clone();
        }
    }
    let mut config = parse_config(&minimal.to_string(), common.seed)?;
    if let Some(out) = common.out.clone().or_else(|| value.get("output_dir").and_then(|v| v.as_str()).map(PathBuf::from)) {
        config.output_dir = out;
    }
    Ok(config)
}

fn run(config: &ExperimentConfig, opts: RunOptions) -> Result<bool> {
    let bundle = execute(config, &config.output_dir, &opts)?;
    println!(
        "{}: wrote {} files to {}{}",
        config.mode.name(),
        bundle.files.len(),
        bundle.dir.display(),
        if bundle.valid { "" } else { " (INVALID: a run produced a non-finite value)" }
    );
    Ok(bundle.valid)
}

fn gen_stream(config: &ExperimentConfig) -> Result<bool> {
    let spec = config
        .stream_spec(0)
        .ok_or_else(|| CliError::Validation("stream: required for gen-stream".into()))?;
    let stream = generate(&spec).map_err(|e| CliError::Validation(format!("stream: {e}")))?;
    let dir: &Path = &config.output_dir;
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    let path = dir.join("stream.txt");
    write_stream(&path, &stream)?;
    println!("wrote {} frames to {}", stream.len(), path.display());
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenStream { common } => gen_stream(&load_stream_only(&common)?),
        Command::Run { common, parallel, stream_file, init_checkpoint } => {
            let config = load(&common, None)?;
            run(&config, RunOptions { jobs: parallel.jobs, stream_file, init_checkpoint })
        }
        Command::Sweep { common, parallel } => {
            let config = load(&common, Some(Mode::TheoremSweep))?;
            run(&config, RunOptions { jobs: parallel.jobs, ..RunOptions::default() })
        }
        Command::Ablate { common, parallel, init_checkpoint } => {
            let config = load(&common, Some(Mode::AblationSuite))?;
            run(&config, RunOptions { jobs: parallel.jobs, init_checkpoint, ..RunOptions::default() })
        }
        Command::Lemma { common, parallel } => {
            let config = load(&common, Some(Mode::LemmaCheck))?;
            run(&config, RunOptions { jobs: parallel.jobs, ..RunOptions::default() })
        }
        Command::Report { bundle, out } => {
            let out = out.unwrap_or_else(|| bundle.clone());
            for name in report_figures(&bundle, &out)? {
                println!("wrote {}", out.join(name).display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
