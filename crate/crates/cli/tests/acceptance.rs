//! Acceptance suite. Runs every shipped preset, checks the ten acceptance
//! criteria and prints one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`, so the lines appear in plain `cargo test`
//! output. The process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use stream_ttt::formats::parse_csv;
use stream_ttt::{execute, parse_config, RunOptions};
use stream_ttt_core::models::{
    inner_objective_grad, mask_frame, neural_losses_and_grads, quad_main_grad, quad_main_loss, quad_ssl_grad,
    quad_ssl_loss, InnerContext, InnerObjective, ModelFamily, NeuralModelSpec, ParamBlocks, QuadModelSpec,
    SelfTrainConfig,
};
use stream_ttt_core::rng::{rng_from, standard_normal, SimRng};
use stream_ttt_core::streamgen::{Frame, LabeledFrame};

const SWEEP_PRESETS: [&str; 4] = ["paper-sweetspot", "sweep-fast-drift", "sweep-slow-drift", "sweep-high-noise"];

struct Run {
    dir: PathBuf,
    wall: Duration,
}

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Verdict {
        Verdict { pass, detail: detail.into() }
    }
}

fn presets() -> Vec<(String, PathBuf)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    let mut out: Vec<_> = fs::read_dir(&dir)
        .expect("presets directory")
        .map(|e| e.expect("preset entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    out
}

fn run_preset(path: &Path, out: &Path, jobs: usize) -> Run {
    let text = fs::read_to_string(path).expect("read preset");
    let config = parse_config(&text, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let start = Instant::now();
    let bundle = execute(&config, out, &RunOptions { jobs, ..RunOptions::default() })
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(bundle.valid, "{}: bundle marked invalid", path.display());
    Run { dir: bundle.dir, wall: start.elapsed() }
}

/// Rows of a CSV as column-name maps.
fn table(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let (header, rows) = parse_csv(&text);
    rows.into_iter().map(|r| header.iter().cloned().zip(r).collect()).collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("column {key} is not a number: {}", row[key]))
}

fn sweep_rows(run: &Run) -> Vec<BTreeMap<String, String>> {
    table(&run.dir.join("sweep.csv"))
}

fn argmin(rows: &[BTreeMap<String, String>], key: &str) -> usize {
    let best = rows.iter().min_by(|a, b| num(a, key).total_cmp(&num(b, key))).expect("non-empty sweep");
    num(best, "k") as usize
}

fn bound_dominance(run: &Run) -> Verdict {
    let rows = sweep_rows(run);
    let worst = rows
        .iter()
        .map(|r| (num(r, "measured_mean") - num(r, "bound")) / num(r, "measured_stderr").max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    let fast = run.wall < Duration::from_secs(60);
    Verdict::new(
        worst <= 3.0 && fast,
        format!("max (measured - bound)/stderr = {worst:.2} over {} k; {:.2} s with one job", rows.len(), run.wall.as_secs_f64()),
    )
}

fn oracle_agreement(run: &Run) -> Verdict {
    let rows = sweep_rows(run);
    let z = rows
        .iter()
        .map(|r| (num(r, "measured_mean") - num(r, "oracle")).abs() / num(r, "measured_stderr"))
        .fold(0.0, f64::max);
    let cross = table(&run.dir.join("sweep_cross.csv"));
    let cz = cross
        .iter()
        .map(|r| {
            let (m, s) = (num(r, "cross_mean"), num(r, "cross_stderr"));
            if m == 0.0 { 0.0 } else { m.abs() / s }
        })
        .fold(0.0, f64::max);
    Verdict::new(z < 3.0 && cz < 3.0, format!("max |measured - oracle|/stderr = {z:.2}; max |cross|/stderr = {cz:.2}"))
}

fn sweet_spot(runs: &BTreeMap<String, Run>) -> Verdict {
    let mut oracle_ok = true;
    let mut within = 0;
    let mut notes = Vec::new();
    for name in SWEEP_PRESETS {
        let run = &runs[name];
        let rows = sweep_rows(run);
        let measured = argmin(&rows, "measured_mean");
        let oracle = argmin(&rows, "oracle");
        let text = fs::read_to_string(run.dir.join("summary.json")).expect("summary");
        let summary: serde_json::Value = serde_json::from_str(&text).expect("summary json");
        let formula = summary["results"]["sweet_spot_continuous"].as_f64().expect("sweet spot");
        let ratio = formula / measured as f64;
        oracle_ok &= measured == oracle;
        if (0.5..=2.0).contains(&ratio) {
            within += 1;
        }
        notes.push(format!("{name}: measured {measured}, oracle {oracle}, formula {formula:.2}"));
    }
    Verdict::new(oracle_ok && within >= 3, format!("{within}/4 within x2; {}", notes.join("; ")))
}

fn lemma(run: &Run) -> Verdict {
    let rows = table(&run.dir.join("lemma.csv"));
    let holding = rows
        .iter()
        .filter(|r| num(r, "dim") <= 10.0 && num(r, "gap") <= num(r, "bound") + 1e-9)
        .count();
    let text = fs::read_to_string(run.dir.join("summary.json")).expect("summary");
    let summary: serde_json::Value = serde_json::from_str(&text).expect("summary json");
    let iso = summary["results"]["isotropic_error"].as_f64().expect("isotropic error");
    Verdict::new(
        rows.len() == 1000 && holding == rows.len() && iso < 1e-12,
        format!("{holding}/{} instances hold; isotropic error {iso:.2e}", rows.len()),
    )
}

struct Ablation {
    summary: BTreeMap<String, BTreeMap<String, String>>,
    per_replicate: Vec<BTreeMap<String, String>>,
}

impl Ablation {
    fn load(run: &Run) -> Ablation {
        let summary = table(&run.dir.join("ablation_summary.csv"))
            .into_iter()
            .map(|r| (r["variant"].clone(), r))
            .collect();
        Ablation { summary, per_replicate: table(&run.dir.join("ablation.csv")) }
    }

    fn mean(&self, variant: &str) -> f64 {
        num(&self.summary[variant], "mean_pred_error")
    }

    fn stderr(&self, variant: &str) -> f64 {
        num(&self.summary[variant], "stderr_pred_error")
    }

    fn replicates(&self, variant: &str) -> Vec<&BTreeMap<String, String>> {
        self.per_replicate.iter().filter(|r| r["variant"] == variant).collect()
    }
}

fn u_shape(a: &Ablation) -> Verdict {
    let (k1, k16, k256) = (a.mean("Online k=1"), a.mean("Online TTT-MAE"), a.mean("Online k=256"));
    Verdict::new(k16 < k1 && k16 < k256, format!("k=1 {k1:.4}, k=16 {k16:.4}, k=256 {k256:.4}"))
}

fn online_beats_offline(a: &Ablation) -> Verdict {
    let (on, off) = (a.mean("Online TTT-MAE"), a.mean("Offline All Frames"));
    Verdict::new(on < off, format!("online {on:.4}, offline best {off:.4}"))
}

fn shuffle(a: &Ablation) -> Verdict {
    let fixed = a.replicates("Fixed Model");
    let shuffled = a.replicates("Fixed Model (shuffled)");
    let keys = ["mean_pred_error", "mean_main_loss", "mean_iou"];
    let identical = fixed.len() == 5
        && fixed.len() == shuffled.len()
        && fixed.iter().zip(&shuffled).all(|(x, y)| keys.iter().all(|k| x[*k] == y[*k]))
        && ["mean_pred_error", "mean_main_loss"]
            .iter()
            .all(|k| a.summary["Fixed Model"][*k] == a.summary["Fixed Model (shuffled)"][*k]);
    let (on, on_se) = (a.mean("Online TTT-MAE"), a.stderr("Online TTT-MAE"));
    let (sh, sh_se) = (a.mean("Online TTT-MAE (shuffled)"), a.stderr("Online TTT-MAE (shuffled)"));
    let separated = on + on_se < sh - sh_se;
    Verdict::new(
        identical && separated,
        format!(
            "fixed summary bit-identical: {identical}; online {on:.4}±{on_se:.4} vs shuffled {sh:.4}±{sh_se:.4}"
        ),
    )
}

fn memory_ordering(a: &Ablation) -> Verdict {
    let both = a.mean("Online TTT-MAE");
    let implicit = a.mean("Implicit Memory Only");
    let none = a.mean("TTT-MAE No Mem.");
    let explicit = a.mean("Explicit Memory Only");
    Verdict::new(
        both <= implicit && implicit <= none && both <= explicit,
        format!("both {both:.4}, implicit {implicit:.4}, none {none:.4}, explicit {explicit:.4}"),
    )
}

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-9;
const PROBES: usize = 100;

fn block(p: &mut ParamBlocks, which: usize) -> &mut Vec<f64> {
    match which {
        0 => &mut p.f,
        1 => &mut p.g,
        _ => &mut p.h,
    }
}

/// Worst ratio of gradient error to tolerance over every coordinate of a block.
fn fd_ratio(params: &ParamBlocks, which: usize, analytic: &[f64], loss: &dyn Fn(&ParamBlocks) -> f64) -> f64 {
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = block(&mut probe, which)[i];
        block(&mut probe, which)[i] = orig + STEP;
        let up = loss(&probe);
        block(&mut probe, which)[i] = orig - STEP;
        let down = loss(&probe);
        block(&mut probe, which)[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max((a - numeric).abs() / (REL_TOL * a.abs().max(numeric.abs()) + ABS_FLOOR));
    }
    worst
}

fn random_blocks(rng: &mut SimRng, family: &ModelFamily, scale: f64) -> ParamBlocks {
    let (f, g, h) = family.block_sizes();
    let mut draw = |n| (0..n).map(|_| scale * standard_normal(rng)).collect::<Vec<f64>>();
    ParamBlocks { f: draw(f), g: draw(g), h: draw(h) }
}

fn random_video_frame(rng: &mut SimRng, n: usize) -> LabeledFrame {
    let values = (0..n).map(|_| 0.5 + 0.3 * standard_normal(rng)).collect();
    let label = (0..n).map(|_| if standard_normal(rng) > 0.3 { 1.0 } else { 0.0 }).collect();
    LabeledFrame { frame: Frame { index: 1, values }, label }
}

fn gradients() -> Verdict {
    let spec = NeuralModelSpec { height: 8, width: 8, patch_size: 4, hidden_dim: 5 };
    let family = ModelFamily::Neural(spec.clone());
    let self_train = SelfTrainConfig { lambda: 0.6, mask_ratio: 0.8 };
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |what: &'static str, r: f64| {
        let w = worst.entry(what).or_insert(0.0);
        *w = w.max(r);
    };
    let mut rng = rng_from(11, &[]);
    for probe in 0..PROBES {
        let params = random_blocks(&mut rng, &family, 0.5);
        let frame = random_video_frame(&mut rng, 64);
        let view = mask_frame(frame.values(), 0.8, probe as u64);
        let joint = neural_losses_and_grads(&spec, &params, &frame, &view).unwrap();
        let main = |p: &ParamBlocks| neural_losses_and_grads(&spec, p, &frame, &view).unwrap().main_loss;
        record("main", fd_ratio(&params, 0, &joint.main_grads.f, &main).max(fd_ratio(&params, 2, &joint.main_grads.h, &main)));

        let ctx = InnerContext { mask_seed: probe as u64, noise_seed: 0, mask_ratio: 0.8, self_train };
        for (name, kind) in [
            ("masked-recon", InnerObjective::MaskedRecon),
            ("entropy", InnerObjective::Entropy),
            ("self-train", InnerObjective::SelfTrain),
        ] {
            let g = inner_objective_grad(kind, &family, &params, &frame, &ctx).unwrap();
            let loss = |p: &ParamBlocks| inner_objective_grad(kind, &family, p, &frame, &ctx).unwrap().loss;
            record(name, fd_ratio(&params, 0, &g.f, &loss).max(fd_ratio(&params, 1, &g.g, &loss)));
        }

        let d = 1 + probe % 8;
        let w: Vec<f64> = (0..d * d).map(|_| standard_normal(&mut rng)).collect();
        let quad = QuadModelSpec { alpha: 0.2 + (probe % 5) as f64 * 0.5, w: Some(w), sigma: 1.0, dim: d };
        let theta: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let qframe = LabeledFrame { frame: Frame { index: probe + 1, values: x }, label: vec![0.0; d] };
        let qp = ParamBlocks { f: theta.clone(), g: vec![], h: vec![] };
        let gm = quad_main_grad(&quad, &theta, &qframe).unwrap();
        record("quadratic main", fd_ratio(&qp, 0, &gm, &|p| quad_main_loss(&quad, &p.f, &qframe).unwrap()));
        let gs = quad_ssl_grad(&quad, &theta, &qframe, 5).unwrap();
        record("quadratic ssl", fd_ratio(&qp, 0, &gs, &|p| quad_ssl_loss(&quad, &p.f, &qframe, 5).unwrap()));
    }
    let pass = worst.values().all(|&r| r <= 1.0);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", ");
    Verdict::new(pass, format!("{PROBES} probes each; worst error/tolerance: {detail}"))
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .expect("bundle dir")
        .map(|e| e.expect("bundle entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).expect("read csv")))
        .collect()
}

fn determinism(first: &BTreeMap<String, Run>, scratch: &Path) -> Verdict {
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (name, path) in presets() {
        let again = run_preset(&path, &scratch.join(format!("{name}-jobs8")), 8);
        let (a, b) = (csv_files(&first[&name].dir), csv_files(&again.dir));
        files += a.len();
        if a.is_empty() || a != b {
            mismatched.push(name);
        }
    }
    Verdict::new(
        mismatched.is_empty(),
        format!("{} presets, {files} CSVs compared; mismatches: {mismatched:?}", first.len()),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let scratch = tempfile::tempdir().expect("scratch dir");
    let runs: BTreeMap<String, Run> = presets()
        .into_iter()
        .map(|(name, path)| {
            let run = run_preset(&path, &scratch.path().join(&name), 1);
            (name, run)
        })
        .collect();
    let ablation = Ablation::load(&runs["ablation-regime-video"]);

    let verdicts = [
        ("1 bound dominance", bound_dominance(&runs["paper-sweetspot"])),
        ("2 oracle agreement", oracle_agreement(&runs["paper-sweetspot"])),
        ("3 sweet spot", sweet_spot(&runs)),
        ("4 strong-convexity lemma", lemma(&runs["lemma"])),
        ("5 U-shaped window curve", u_shape(&ablation)),
        ("6 online beats offline", online_beats_offline(&ablation)),
        ("7 shuffle ablation", shuffle(&ablation)),
        ("8 memory ordering", memory_ordering(&ablation)),
        ("9 gradient correctness", gradients()),
        ("10 determinism across --jobs", determinism(&runs, scratch.path())),
    ];
    let mut failed = 0;
    for (name, v) in &verdicts {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
