//! The per-frame adaptation loop, its baselines and ablation variants.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::memory::{select_init, InitPolicy, WindowBuffer};
use crate::models::{
    evaluate_main, inner_objective_grad, segmentation_metrics, InnerContext, InnerObjective, ModelFamily,
    ModelState, NeuralLayout, ParamBlocks, SelfTrainConfig,
};
use crate::rng::{self, tag};
use crate::streamgen::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TttConfig {
    pub window_size: usize,
    /// Gradient steps per frame; zero gives the fixed-model baseline.
    pub iters_per_frame: usize,
    /// Draws per step from the window; `None` uses every window frame once.
    pub batch_size: Option<usize>,
    pub lr: f64,
    /// Learning-rate multiplier for the neural encoder's reference levels.
    pub reference_lr_scale: f64,
    pub init_policy: InitPolicy,
    pub objective: InnerObjective,
    pub mask_ratio: f64,
    pub self_train: SelfTrainConfig,
    pub seed: u64,
    /// Keep per-frame foreground probabilities (neural model) in the trace.
    pub keep_predictions: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig {
            window_size: 16,
            iters_per_frame: 1,
            batch_size: Some(16),
            lr: 0.01,
            reference_lr_scale: 1.0,
            init_policy: InitPolicy::CarryOver,
            objective: InnerObjective::MaskedRecon,
            mask_ratio: 0.8,
            self_train: SelfTrainConfig::default(),
            seed: 0,
            keep_predictions: false,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::InvalidSpec("window_size must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidSpec("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidSpec("lr must be finite and non-negative".into()));
        }
        if !(self.reference_lr_scale >= 0.0) || !self.reference_lr_scale.is_finite() {
            return Err(Error::InvalidSpec("reference_lr_scale must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.self_train.mask_ratio) {
            return Err(Error::InvalidSpec("mask ratios must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.self_train.lambda) {
            return Err(Error::InvalidSpec("self-training lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Metrics recorded for frame `t` before frame `t + 1` is seen.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: usize,
    pub main_loss: f64,
    pub ssl_loss: f64,
    pub pred_error: f64,
    /// `‖(f, g)_t − (f₀, g₀)‖`.
    pub params_drift: f64,
    pub error_count: Option<usize>,
    /// Pixels scored (neural only, else 0).
    pub pixels: usize,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub t: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub frames: usize,
    pub mean_main_loss: f64,
    pub mean_pred_error: f64,
    pub mean_iou: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<FrameRecord>,
    pub predictions: Option<Vec<Vec<f64>>>,
    pub failure: Option<RunFailure>,
    pub final_params: ParamBlocks,
}

impl RunTrace {
    pub fn is_valid(&self) -> bool {
        self.failure.is_none()
    }

    /// Means over frames. Sums are taken in sorted order (or over integer
    /// error counts) so the summary does not depend on frame order.
    pub fn summary(&self) -> RunSummary {
        summarize(&self.records, self.is_valid())
    }
}

pub fn summarize(records: &[FrameRecord], valid: bool) -> RunSummary {
    let n = records.len().max(1) as f64;
    let losses: Vec<f64> = records.iter().map(|r| r.main_loss).collect();
    let counts: Option<Vec<usize>> = records.iter().map(|r| r.error_count).collect();
    let mean_pred_error = match counts {
        // Integer totals make the mean exact and independent of frame order.
        Some(c) if !records.is_empty() => {
            let pixels: usize = records.iter().map(|r| r.pixels).sum();
            c.iter().sum::<usize>() as f64 / pixels.max(1) as f64
        }
        _ => linalg::order_free_sum(&records.iter().map(|r| r.pred_error).collect::<Vec<_>>()) / n,
    };
    let ious: Option<Vec<f64>> = records.iter().map(|r| r.iou).collect();
    RunSummary {
        frames: records.len(),
        mean_main_loss: linalg::order_free_sum(&losses) / n,
        mean_pred_error,
        mean_iou: ious.filter(|v| !v.is_empty()).map(|v| linalg::order_free_sum(&v) / n),
        valid,
    }
}

fn drift(params: &ParamBlocks, frozen: &ParamBlocks) -> f64 {
    let sq: f64 = params
        .f
        .iter()
        .zip(&frozen.f)
        .chain(params.g.iter().zip(&frozen.g))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    libm::sqrt(sq)
}

fn inner_ctx(config: &TttConfig, mask_seed: u64, noise_seed: u64) -> InnerContext {
    InnerContext { mask_seed, noise_seed, mask_ratio: config.mask_ratio, self_train: config.self_train }
}

/// One gradient step on the mean inner objective over `batch`.
fn inner_step(
    family: &ModelFamily,
    params: &mut ParamBlocks,
    batch: &[&streamgen::LabeledFrame],
    config: &TttConfig,
    noise_seed: u64,
    seed_tags: [u64; 2],
) -> Result<()> {
    let mut gf = alloc::vec![0.0; params.f.len()];
    let mut gg = alloc::vec![0.0; params.g.len()];
    for (e, frame) in batch.iter().enumerate() {
        let mask_seed = rng::derive_seed(config.seed, &[tag::MASK, seed_tags[0], seed_tags[1], e as u64]);
        let grad = inner_objective_grad(config.objective, family, params, frame, &inner_ctx(config, mask_seed, noise_seed))?;
        if !grad.loss.is_finite() {
            return Err(Error::Diverged { step: seed_tags[0] as usize, what: "inner loss" });
        }
        crate::models::axpy(&mut gf, 1.0, &grad.f);
        crate::models::axpy(&mut gg, 1.0, &grad.g);
    }
    if let ModelFamily::Neural(spec) = family {
        let start = NeuralLayout::new(spec).mu_offset();
        gf[start..].iter_mut().for_each(|g| *g *= config.reference_lr_scale);
    }
    let scale = config.lr / batch.len() as f64;
    crate::models::axpy(&mut params.f, -scale, &gf);
    crate::models::axpy(&mut params.g, -scale, &gg);
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step: seed_tags[0] as usize, what: "parameters" })
    }
}

fn record_frame(
    family: &ModelFamily,
    params: &ParamBlocks,
    frozen: &ParamBlocks,
    frame: &streamgen::LabeledFrame,
    config: &TttConfig,
    noise_seed: u64,
) -> Result<(FrameRecord, Option<Vec<f64>>)> {
    let eval = evaluate_main(family, params, frame)?;
    let mask_seed = rng::derive_seed(config.seed, &[tag::EVAL, frame.index() as u64]);
    let ssl_loss = inner_objective_grad(config.objective, family, params, frame, &inner_ctx(config, mask_seed, noise_seed))?.loss;
    let record = FrameRecord {
        t: frame.index(),
        main_loss: eval.main_loss,
        ssl_loss,
        pred_error: eval.pred_error,
        params_drift: drift(params, frozen),
        error_count: eval.error_count,
        pixels: eval.probabilities.as_ref().map_or(0, Vec::len),
        iou: eval.iou,
    };
    Ok((record, eval.probabilities))
}

/// Streams over the frames in order: push `x_t` into the window, pick the
/// starting parameters, take `iters_per_frame` steps on the window's inner
/// objective, then predict `x_t` with `h₀ ∘ f_t`.
///
/// A non-finite loss stops the run; the trace keeps the frames done so far
/// and a failure record.
pub fn run_stream(stream: &Stream, family: &ModelFamily, state: &ModelState, config: &TttConfig) -> Result<RunTrace> {
    config.validate()?;
    family.validate()?;
    let frozen = state.frozen_init()?.clone();
    family.check_state(&frozen)?;
    let noise_seed = stream.noise_seed();
    let mut window = WindowBuffer::new(config.window_size)?;
    let mut params = frozen.clone();
    let mut records = Vec::with_capacity(stream.len());
    let mut predictions = config.keep_predictions.then(Vec::new);
    let mut failure = None;

    for frame in &stream.frames {
        let t = frame.index();
        window.push(frame.clone())?;
        params = select_init(config.init_policy, &params, &frozen);
        let mut step_result = Ok(());
        for it in 0..config.iters_per_frame {
            let positions: Vec<usize> = match config.batch_size {
                Some(b) => window.sample_positions(b, rng::derive_seed(config.seed, &[tag::BATCH, t as u64, it as u64]))?,
                None => (0..window.len()).collect(),
            };
            let batch: Vec<&streamgen::LabeledFrame> = positions.iter().filter_map(|&p| window.get(p)).collect();
            step_result = inner_step(family, &mut params, &batch, config, noise_seed, [t as u64, it as u64]);
            if step_result.is_err() {
                break;
            }
        }
        if let Err(e) = step_result {
            failure = Some(RunFailure { t, reason: alloc::format!("{e}") });
            break;
        }
        let (record, probs) = record_frame(family, &params, &frozen, frame, config, noise_seed)?;
        if !(record.main_loss.is_finite() && record.ssl_loss.is_finite()) {
            failure = Some(RunFailure { t, reason: "non-finite loss".into() });
            break;
        }
        records.push(record);
        if let (Some(all), Some(p)) = (predictions.as_mut(), probs) {
            all.push(p);
        }
    }
    Ok(RunTrace { records, predictions, failure, final_params: params })
}

/// Evaluates every frame with fixed parameters.
pub fn evaluate_stream(
    stream: &Stream,
    family: &ModelFamily,
    params: &ParamBlocks,
    frozen: &ParamBlocks,
    config: &TttConfig,
) -> Result<RunTrace> {
    let mut records = Vec::with_capacity(stream.len());
    let mut predictions = config.keep_predictions.then(Vec::new);
    for frame in &stream.frames {
        let (record, probs) = record_frame(family, params, frozen, frame, config, stream.noise_seed())?;
        records.push(record);
        if let (Some(all), Some(p)) = (predictions.as_mut(), probs) {
            all.push(p);
        }
    }
    Ok(RunTrace { records, predictions, failure: None, final_params: params.clone() })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OfflineConfig {
    pub total_iters: usize,
    pub eval_every: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig { total_iters: 2000, eval_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineResult {
    /// `(iteration, mean prediction error over the whole video)` at each evaluation.
    pub curve: Vec<(usize, f64)>,
    pub best_iteration: usize,
    /// Per-frame trace of the best evaluated model.
    pub best_trace: RunTrace,
}

/// Trains `f, g` on batches drawn uniformly from every frame of the video and
/// keeps the evaluated iteration with the lowest whole-video error.
pub fn run_offline_all_frames(
    stream: &Stream,
    family: &ModelFamily,
    state: &ModelState,
    config: &TttConfig,
    offline: &OfflineConfig,
) -> Result<OfflineResult> {
    config.validate()?;
    if offline.eval_every == 0 {
        return Err(Error::InvalidSpec("eval_every must be at least 1".into()));
    }
    if stream.is_empty() {
        return Err(Error::InvalidSpec("offline training needs a nonempty stream".into()));
    }
    let frozen = state.frozen_init()?.clone();
    family.check_state(&frozen)?;
    let batch_size = config.batch_size.unwrap_or(stream.len());
    let mut params = frozen.clone();
    let mut best = evaluate_stream(stream, family, &params, &frozen, config)?;
    let mut best_error = best.summary().mean_pred_error;
    let mut best_iteration = 0;
    let mut curve = alloc::vec![(0, best_error)];

    for it in 1..=offline.total_iters {
        let mut rng = rng::rng_from(config.seed, &[tag::BATCH, u64::MAX, it as u64]);
        let batch: Vec<&streamgen::LabeledFrame> =
            (0..batch_size).map(|_| &stream.frames[rand::Rng::random_range(&mut rng, 0..stream.len())]).collect();
        if let Err(e) = inner_step(family, &mut params, &batch, config, stream.noise_seed(), [u64::MAX - it as u64, 0]) {
            best.failure = Some(RunFailure { t: it, reason: alloc::format!("{e}") });
            return Ok(OfflineResult { curve, best_iteration, best_trace: best });
        }
        if it % offline.eval_every == 0 {
            let trace = evaluate_stream(stream, family, &params, &frozen, config)?;
            let err = trace.summary().mean_pred_error;
            curve.push((it, err));
            if err < best_error {
                best_error = err;
                best_iteration = it;
                best = trace;
            }
        }
    }
    Ok(OfflineResult { curve, best_iteration, best_trace: best })
}

/// Causal moving average over the last `w` predictions.
pub fn temporal_smooth(predictions: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    let w = w.max(1);
    (0..predictions.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(w);
            let span = &predictions[lo..=t];
            let n = span.len() as f64;
            (0..predictions[t].len()).map(|j| span.iter().map(|p| p[j]).sum::<f64>() / n).collect()
        })
        .collect()
}

/// Scores smoothed per-pixel probabilities against the stream's masks.
pub fn score_predictions(stream: &Stream, predictions: &[Vec<f64>]) -> Vec<FrameRecord> {
    stream
        .frames
        .iter()
        .zip(predictions)
        .map(|(frame, probs)| {
            let (loss, errors, iou) = segmentation_metrics(probs, &frame.label);
            FrameRecord {
                t: frame.index(),
                main_loss: loss,
                ssl_loss: 0.0,
                pred_error: errors as f64 / probs.len() as f64,
                params_drift: 0.0,
                error_count: Some(errors),
                pixels: probs.len(),
                iou: Some(iou),
            }
        })
        .collect()
}

/// Rows of the memory ablation and its baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FixedModel,
    TemporalSmoothing,
    NoMemory,
    ImplicitOnly,
    ExplicitOnly,
    Online,
    OfflineAllFrames,
    FixedShuffled,
    OnlineShuffled,
    /// Online adaptation with a given window size (window-size curve).
    Window(usize),
}

impl Variant {
    pub fn name(self) -> String {
        match self {
            Variant::FixedModel => "Fixed Model".into(),
            Variant::TemporalSmoothing => "Temporal Smoothing".into(),
            Variant::NoMemory => "TTT-MAE No Mem.".into(),
            Variant::ImplicitOnly => "Implicit Memory Only".into(),
            Variant::ExplicitOnly => "Explicit Memory Only".into(),
            Variant::Online => "Online TTT-MAE".into(),
            Variant::OfflineAllFrames => "Offline All Frames".into(),
            Variant::FixedShuffled => "Fixed Model (shuffled)".into(),
            Variant::OnlineShuffled => "Online TTT-MAE (shuffled)".into(),
            Variant::Window(k) => alloc::format!("Online k={k}"),
        }
    }

    pub fn uses_shuffled_stream(self) -> bool {
        matches!(self, Variant::FixedShuffled | Variant::OnlineShuffled)
    }

    /// The adaptation config this row runs with, derived from the base config.
    pub fn config(self, base: &TttConfig) -> TttConfig {
        let k = base.window_size.max(2);
        let with = |window_size, init_policy, iters| TttConfig { window_size, init_policy, iters_per_frame: iters, ..base.clone() };
        let iters = base.iters_per_frame;
        match self {
            Variant::FixedModel | Variant::FixedShuffled => with(1, InitPolicy::Reset, 0),
            Variant::TemporalSmoothing => TttConfig { keep_predictions: true, ..with(1, InitPolicy::Reset, 0) },
            Variant::NoMemory => with(1, InitPolicy::Reset, iters),
            Variant::ImplicitOnly => with(1, InitPolicy::CarryOver, iters),
            Variant::ExplicitOnly => with(k, InitPolicy::Reset, iters),
            Variant::Online | Variant::OnlineShuffled | Variant::OfflineAllFrames => with(k, InitPolicy::CarryOver, iters),
            Variant::Window(w) => with(w, InitPolicy::CarryOver, iters),
        }
    }
}

/// Settings shared by every row of an ablation suite.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AblationSettings {
    pub offline: OfflineConfig,
    /// Causal window for the temporal-smoothing baseline.
    pub smoothing_window: usize,
    pub shuffle_seed: u64,
    /// Extra online runs, one per window size.
    pub window_grid: Vec<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { offline: OfflineConfig::default(), smoothing_window: 4, shuffle_seed: 0, window_grid: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub summary: RunSummary,
    pub frozen_checksum: u64,
    pub best_iteration: Option<usize>,
}

/// Every row the suite runs, in report order.
pub fn ablation_plan(settings: &AblationSettings) -> Vec<Variant> {
    let mut plan = alloc::vec![
        Variant::FixedModel,
        Variant::TemporalSmoothing,
        Variant::NoMemory,
        Variant::ImplicitOnly,
        Variant::ExplicitOnly,
        Variant::Online,
        Variant::OfflineAllFrames,
        Variant::FixedShuffled,
        Variant::OnlineShuffled,
    ];
    plan.extend(settings.window_grid.iter().map(|&k| Variant::Window(k)));
    plan
}

/// Runs one ablation row. All rows start from the same frozen state.
pub fn run_ablation_row(
    variant: Variant,
    stream: &Stream,
    shuffled: &Stream,
    family: &ModelFamily,
    state: &ModelState,
    base: &TttConfig,
    settings: &AblationSettings,
) -> Result<AblationRow> {
    let frozen_checksum = state.frozen_init()?.checksum();
    let config = variant.config(base);
    let input = if variant.uses_shuffled_stream() { shuffled } else { stream };
    let (summary, best_iteration) = match variant {
        Variant::OfflineAllFrames => {
            let res = run_offline_all_frames(input, family, state, &config, &settings.offline)?;
            (res.best_trace.summary(), Some(res.best_iteration))
        }
        Variant::TemporalSmoothing => {
            let trace = run_stream(input, family, state, &config)?;
            let smoothed = match &trace.predictions {
                Some(p) => temporal_smooth(p, settings.smoothing_window),
                None => return Err(Error::Unsupported("temporal smoothing needs per-pixel predictions (neural model)")),
            };
            (summarize(&score_predictions(input, &smoothed), trace.is_valid()), None)
        }
        _ => (run_stream(input, family, state, &config)?.summary(), None),
    };
    Ok(AblationRow { variant, summary, frozen_checksum, best_iteration })
}

/// The full suite, sequentially.
pub fn run_ablation_suite(
    stream: &Stream,
    family: &ModelFamily,
    state: &ModelState,
    base: &TttConfig,
    settings: &AblationSettings,
) -> Result<Vec<AblationRow>> {
    let shuffled = streamgen::shuffle_stream(stream, settings.shuffle_seed)?;
    ablation_plan(settings)
        .into_iter()
        .filter(|v| !matches!(v, Variant::TemporalSmoothing) || matches!(family, ModelFamily::Neural(_)))
        .map(|v| run_ablation_row(v, stream, &shuffled, family, state, base, settings))
        .collect()
}
