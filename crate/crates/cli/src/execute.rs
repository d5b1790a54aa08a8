//! Runs a resolved config and writes its report bundle.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};
use stream_ttt_core::models::{init_state, joint_train, ModelFamily, ModelState};
use stream_ttt_core::streamgen::{generate, shuffle_stream, Stream, StreamSpec};
use stream_ttt_core::theory::{
    aggregate_cells, argmin_k, lemma_check, optimal_k, random_lemma_instance, sweep_cell, verify_lemma, BoundReport,
};
use stream_ttt_core::tttloop::{
    ablation_plan, run_ablation_row, run_offline_all_frames, run_stream, AblationRow, RunTrace, Variant,
};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};
use crate::formats::{num, read_checkpoint, read_stream, write_checkpoint, Table};

/// Inputs that come from flags rather than the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for independent runs; 0 or 1 runs everything inline.
    pub jobs: usize,
    pub stream_file: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
}

/// What a finished (or partially finished) run left on disk.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    /// File names relative to `dir`, in write order, including `summary.json`.
    pub files: Vec<String>,
    /// False if any run stopped on a non-finite value.
    pub valid: bool,
    pub summary: Value,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(CliError::io(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// `base.ext` for a single replicate, `base_r{r}.ext` otherwise.
fn replicate_name(base: &str, ext: &str, replicate: usize, replicates: usize) -> String {
    if replicates == 1 {
        format!("{base}.{ext}")
    } else {
        format!("{base}_r{replicate}.{ext}")
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

/// Runs `config` and writes CSVs and `summary.json` into `dir`.
///
/// A run that stops on a non-finite value still writes its bundle, flagged
/// invalid; the caller turns that into a nonzero exit status.
pub fn execute(config: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> Result<ReportBundle> {
    config.validate()?;
    if opts.stream_file.is_some() && (!config.mode.needs_stream() || config.replicates != 1) {
        return Err(CliError::Validation("--stream-file needs a streaming mode with replicates = 1".into()));
    }
    if opts.init_checkpoint.is_some() && !config.mode.needs_stream() {
        return Err(CliError::Validation("--init-checkpoint needs a streaming mode".into()));
    }
    let start = Instant::now();
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut out = Writer { dir: dir.to_path_buf(), files: Vec::new() };
    let outcome = pool(opts.jobs)?.install(|| match config.mode {
        Mode::Online | Mode::Fixed | Mode::OfflineAllFrames => single_runs(config, opts, &mut out),
        Mode::AblationSuite => ablation(config, opts, &mut out),
        Mode::TheoremSweep => sweep(config, &mut out),
        Mode::LemmaCheck => lemma(config, &mut out),
    });
    let (valid, results, error) = match outcome {
        Ok((valid, results)) => (valid, results, None),
        Err(e @ CliError::Validation(_)) | Err(e @ CliError::Format { .. }) => return Err(e),
        Err(e) => (false, Value::Null, Some(e)),
    };
    let mut files = out.files.clone();
    files.push("summary.json".into());
    let summary = json!({
        "mode": config.mode.name(),
        "valid": valid,
        "error": error.as_ref().map(|e| e.to_string()),
        "results": results,
        "files": files,
        "config": serde_json::to_value(config).expect("config serialises"),
        "environment": {
            "version": env!("CARGO_PKG_VERSION"),
            "seed": config.seed,
            "wall_ms": start.elapsed().as_millis() as u64,
        },
    });
    out.write("summary.json", &serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
    match error {
        Some(e) => Err(e),
        None => Ok(ReportBundle { dir: dir.to_path_buf(), files: out.files, valid, summary }),
    }
}

struct Prepared {
    stream: Stream,
    state: ModelState,
}

/// Generates (or loads) the test stream and builds the frozen model of one replicate.
fn prepare(config: &ExperimentConfig, opts: &RunOptions, replicate: usize) -> Result<Prepared> {
    let model = config.model.as_ref().expect("validated");
    let stream = match &opts.stream_file {
        Some(path) => {
            let s = read_stream(path)?;
            let expected: Vec<usize> = config.stream.as_ref().expect("validated").dims();
            if s.header.dims != expected {
                return Err(CliError::Validation(format!(
                    "{}: stream dims {:?} do not match the config's {:?}",
                    path.display(),
                    s.header.dims,
                    expected
                )));
            }
            s
        }
        None => generate(&config.stream_spec(replicate).expect("validated")).map_err(|e| CliError::core("stream", e))?,
    };
    let seeds = config.replicate_seeds(replicate);
    let state = match (&opts.init_checkpoint, &config.training) {
        (Some(path), _) => read_checkpoint(path, model)?,
        (None, Some(training)) => {
            let spec = StreamSpec { seed: seeds.training_stream, ..training.stream.clone() };
            let train = generate(&spec).map_err(|e| CliError::core("training.stream", e))?;
            let joint = stream_ttt_core::models::JointTrainConfig { seed: seeds.joint, ..training.joint.clone() };
            joint_train(model, &train.frames, &joint, train.noise_seed()).map_err(|e| CliError::core("training", e))?
        }
        (None, None) => ModelState::frozen(init_state(model, seeds.joint)),
    };
    Ok(Prepared { stream, state })
}

fn trace_table(trace: &RunTrace) -> Table {
    let mut t = Table::new(&["t", "main_loss", "ssl_loss", "pred_error", "params_drift"]);
    for r in &trace.records {
        t.row(&[r.t.to_string(), num(r.main_loss), num(r.ssl_loss), num(r.pred_error), num(r.params_drift)]);
    }
    t
}

fn summary_json(trace: &RunTrace) -> Value {
    let s = trace.summary();
    json!({
        "frames": s.frames,
        "mean_main_loss": s.mean_main_loss,
        "mean_pred_error": s.mean_pred_error,
        "mean_iou": s.mean_iou,
        "valid": s.valid,
        "failure": trace.failure.as_ref().map(|f| json!({"t": f.t, "reason": f.reason})),
    })
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct SingleRun {
    trace: RunTrace,
    curve: Option<Vec<(usize, f64)>>,
    best_iteration: Option<usize>,
    state: ModelState,
}

fn single_runs(config: &ExperimentConfig, opts: &RunOptions, out: &mut Writer) -> Result<(bool, Value)> {
    let model = config.model.as_ref().expect("validated");
    let runs: Vec<SingleRun> = (0..config.replicates)
        .into_par_iter()
        .map(|r| -> Result<SingleRun> {
            let p = prepare(config, opts, r)?;
            let ttt = config.ttt_config(r);
            let rt = |e| CliError::core("run", e);
            Ok(match config.mode {
                Mode::Online => {
                    let trace = run_stream(&p.stream, model, &p.state, &ttt).map_err(rt)?;
                    SingleRun { trace, curve: None, best_iteration: None, state: p.state }
                }
                Mode::Fixed => {
                    let trace = run_stream(&p.stream, model, &p.state, &Variant::FixedModel.config(&ttt)).map_err(rt)?;
                    SingleRun { trace, curve: None, best_iteration: None, state: p.state }
                }
                _ => {
                    let res = run_offline_all_frames(&p.stream, model, &p.state, &ttt, &config.offline).map_err(rt)?;
                    SingleRun {
                        trace: res.best_trace,
                        curve: Some(res.curve),
                        best_iteration: Some(res.best_iteration),
                        state: p.state,
                    }
                }
            })
        })
        .collect::<Result<_>>()?;

    let n = config.replicates;
    let mut per = Vec::new();
    for (r, run) in runs.iter().enumerate() {
        out.write(&replicate_name("trace", "csv", r, n), trace_table(&run.trace).as_str())?;
        if let Some(curve) = &run.curve {
            let mut t = Table::new(&["iteration", "mean_pred_error"]);
            for &(it, err) in curve {
                t.row(&[it.to_string(), num(err)]);
            }
            out.write(&replicate_name("offline_curve", "csv", r, n), t.as_str())?;
        }
        let name = replicate_name("checkpoint", "json", r, n);
        write_checkpoint(&out.dir.join(&name), model, &run.state)?;
        out.files.push(name);
        let mut s = summary_json(&run.trace);
        s["replicate"] = json!(r);
        s["best_iteration"] = json!(run.best_iteration);
        per.push(s);
    }
    let errors: Vec<f64> = runs.iter().map(|r| r.trace.summary().mean_pred_error).collect();
    let (mean, stderr) = mean_stderr(&errors);
    let valid = runs.iter().all(|r| r.trace.is_valid());
    Ok((valid, json!({ "replicates": per, "mean_pred_error": mean, "stderr_pred_error": stderr })))
}

fn ablation(config: &ExperimentConfig, opts: &RunOptions, out: &mut Writer) -> Result<(bool, Value)> {
    let model = config.model.as_ref().expect("validated");
    let prepared: Vec<(Prepared, Stream)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let p = prepare(config, opts, r)?;
            let shuffled = shuffle_stream(&p.stream, config.replicate_seeds(r).shuffle)
                .map_err(|e| CliError::core("stream", e))?;
            Ok((p, shuffled))
        })
        .collect::<Result<_>>()?;
    let plan: Vec<Variant> = ablation_plan(&config.ablation_settings(0))
        .into_iter()
        .filter(|v| !matches!(v, Variant::TemporalSmoothing) || matches!(model, ModelFamily::Neural(_)))
        .collect();
    let tasks: Vec<(usize, Variant)> =
        (0..config.replicates).flat_map(|r| plan.iter().map(move |&v| (r, v))).collect();
    let rows: Vec<AblationRow> = tasks
        .par_iter()
        .map(|&(r, v)| {
            let (p, shuffled) = &prepared[r];
            run_ablation_row(v, &p.stream, shuffled, model, &p.state, &config.ttt_config(r), &config.ablation_settings(r))
                .map_err(|e| CliError::core("ablation", e))
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new(&[
        "replicate",
        "variant",
        "frames",
        "mean_main_loss",
        "mean_pred_error",
        "mean_iou",
        "best_iteration",
        "frozen_checksum",
        "valid",
    ]);
    for (&(r, _), row) in tasks.iter().zip(&rows) {
        let s = &row.summary;
        table.row(&[
            r.to_string(),
            row.variant.name(),
            s.frames.to_string(),
            num(s.mean_main_loss),
            num(s.mean_pred_error),
            s.mean_iou.map_or_else(String::new, num),
            row.best_iteration.map_or_else(String::new, |b| b.to_string()),
            format!("{:016x}", row.frozen_checksum),
            s.valid.to_string(),
        ]);
    }
    out.write("ablation.csv", table.as_str())?;

    let mut bars = Table::new(&["variant", "replicates", "mean_pred_error", "stderr_pred_error", "mean_main_loss"]);
    let mut variants = Vec::new();
    for (i, v) in plan.iter().enumerate() {
        let of_v: Vec<&AblationRow> = rows.iter().skip(i).step_by(plan.len()).collect();
        let errors: Vec<f64> = of_v.iter().map(|r| r.summary.mean_pred_error).collect();
        let losses: Vec<f64> = of_v.iter().map(|r| r.summary.mean_main_loss).collect();
        let (mean, stderr) = mean_stderr(&errors);
        let (loss, _) = mean_stderr(&losses);
        bars.row(&[v.name(), errors.len().to_string(), num(mean), num(stderr), num(loss)]);
        variants.push(json!({
            "variant": v.name(),
            "mean_pred_error": mean,
            "stderr_pred_error": stderr,
            "per_replicate": errors,
        }));
    }
    out.write("ablation_summary.csv", bars.as_str())?;
    let valid = rows.iter().all(|r| r.summary.valid);
    Ok((valid, json!({ "replicates": config.replicates, "variants": variants })))
}

fn sweep(config: &ExperimentConfig, out: &mut Writer) -> Result<(bool, Value)> {
    let s = config.sweep_section();
    let instance = config.theorem_instance();
    let cells: Vec<(usize, usize)> = s.k_grid.iter().flat_map(|&k| (0..s.trials).map(move |t| (k, t))).collect();
    let samples = cells
        .par_iter()
        .map(|&(k, t)| sweep_cell(&instance, k, t))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::core("sweep", e))?;
    let reports: Vec<BoundReport> = s
        .k_grid
        .iter()
        .zip(samples.chunks(s.trials))
        .map(|(&k, chunk)| aggregate_cells(&instance, k, chunk))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::core("sweep", e))?;

    let mut table = Table::new(&["k", "measured_mean", "measured_stderr", "oracle", "bias_term", "variance_term", "bound"]);
    let mut cross = Table::new(&["k", "cross_mean", "cross_stderr"]);
    for r in &reports {
        table.row(&[
            r.k.to_string(),
            num(r.measured_mean),
            num(r.measured_stderr),
            num(r.oracle),
            num(r.bias_term),
            num(r.variance_term),
            num(r.bound),
        ]);
        cross.row(&[r.k.to_string(), num(r.cross_mean), num(r.cross_stderr)]);
    }
    out.write("sweep.csv", table.as_str())?;
    out.write("sweep_cross.csv", cross.as_str())?;

    let sweet = optimal_k(s.alpha, s.beta, s.eta, s.sigma).map_err(|e| CliError::core("sweep", e))?;
    let dominated = reports.iter().filter(|r| r.measured_mean <= r.bound + 3.0 * r.measured_stderr).count();
    let valid = reports.iter().all(|r| r.measured_mean.is_finite() && r.measured_stderr.is_finite());
    Ok((
        valid,
        json!({
            "measured_argmin_k": argmin_k(&reports, |r| r.measured_mean),
            "oracle_argmin_k": argmin_k(&reports, |r| r.oracle),
            "bound_argmin_k": argmin_k(&reports, |r| r.bound),
            "sweet_spot_continuous": if sweet.continuous.is_finite() { json!(sweet.continuous) } else { json!("inf") },
            "sweet_spot_integer": sweet.grid,
            "grid_points": reports.len(),
            "grid_points_within_bound": dominated,
            "trials": s.trials,
        }),
    ))
}

fn lemma(config: &ExperimentConfig, out: &mut Writer) -> Result<(bool, Value)> {
    let seed = config.lemma_seed();
    let l = &config.lemma;
    let reports = (0..l.instances)
        .into_par_iter()
        .map(|i| {
            let inst = random_lemma_instance(seed, i, l.max_dim);
            verify_lemma(&inst.h, &inst.b, &inst.v, inst.alpha).map(|r| (inst.alpha, inst.b.len(), r))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::core("lemma", e))?;
    let mut table = Table::new(&["instance", "dim", "alpha", "gap", "bound", "holds"]);
    for (i, (alpha, dim, r)) in reports.iter().enumerate() {
        table.row(&[i.to_string(), dim.to_string(), num(*alpha), num(r.gap), num(r.bound), r.holds.to_string()]);
    }
    out.write("lemma.csv", table.as_str())?;
    let holding = reports.iter().filter(|(_, _, r)| r.holds).count();
    let max_ratio = reports
        .iter()
        .filter(|(_, _, r)| r.bound > 0.0)
        .map(|(_, _, r)| r.gap / r.bound)
        .fold(0.0, f64::max);
    let iso = lemma_check(seed, 0, l.max_dim).map_err(|e| CliError::core("lemma", e))?;
    Ok((
        true,
        json!({
            "instances": l.instances,
            "holding": holding,
            "max_ratio": max_ratio,
            "isotropic_error": iso.isotropic_error,
        }),
    ))
}
