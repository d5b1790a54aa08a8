//! Closed-form oracles for the window-size bias-variance bound on the
//! quadratic model, the Monte-Carlo sweep that checks them, and the
//! perturbed-minimizer lemma behind the bound.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{quad_noise, QuadModelSpec};
use crate::rng::{self, tag};
use crate::streamgen::{self, LabeledFrame, StreamKind, StreamSpec};

/// `(1/2α)(k²β²η² + σ²/k)`.
pub fn theorem_bound(alpha: f64, beta: f64, eta: f64, sigma: f64, k: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidSpec(alloc::format!("alpha must be positive, got {alpha}")));
    }
    if !(k >= 1.0) {
        return Err(Error::InvalidSpec(alloc::format!("window size must be at least 1, got {k}")));
    }
    Ok((k * k * beta * beta * eta * eta + sigma * sigma / k) / (2.0 * alpha))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalK {
    /// `(σ²/(β²η²))^{1/3}`; infinite when `βη = 0`.
    pub continuous: f64,
    /// The integer neighbour (`≥ 1`) with the smaller bound, if the optimum is finite.
    pub grid: Option<usize>,
}

pub fn optimal_k(alpha: f64, beta: f64, eta: f64, sigma: f64) -> Result<OptimalK> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidSpec("alpha must be positive".into()));
    }
    let drift = beta * beta * eta * eta;
    if drift == 0.0 {
        return Ok(OptimalK { continuous: f64::INFINITY, grid: None });
    }
    let continuous = libm::cbrt(sigma * sigma / drift);
    let lo = (libm::floor(continuous) as usize).max(1);
    let hi = (libm::ceil(continuous) as usize).max(1);
    let grid = if theorem_bound(alpha, beta, eta, sigma, hi as f64)? < theorem_bound(alpha, beta, eta, sigma, lo as f64)? {
        hi
    } else {
        lo
    };
    Ok(OptimalK { continuous, grid: Some(grid) })
}

/// Stationary point of the window-averaged self-supervised gradient,
/// `θ̃ = W x̄ + δ̄/α`.
pub fn closed_form_window_solution(spec: &QuadModelSpec, window: &[LabeledFrame], deltas: &[Vec<f64>]) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::InvalidSpec("window must be nonempty".into()));
    }
    if deltas.len() != window.len() {
        return Err(Error::DimensionMismatch { expected: window.len(), found: deltas.len() });
    }
    let d = spec.dim;
    let n = window.len() as f64;
    let mut x_bar = alloc::vec![0.0; d];
    let mut delta_bar = alloc::vec![0.0; d];
    for (frame, delta) in window.iter().zip(deltas) {
        if frame.values().len() != d || delta.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: frame.values().len().min(delta.len()) });
        }
        for i in 0..d {
            x_bar[i] += frame.values()[i] / n;
            delta_bar[i] += delta[i] / n;
        }
    }
    Ok(spec.optimum(&x_bar).into_iter().zip(delta_bar).map(|(w, dl)| w + dl / spec.alpha).collect())
}

/// The two exact components of the expected excess risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasVariance {
    /// `(α/2)‖W(x̄ − x_t)‖²`.
    pub bias_term: f64,
    /// `σ²/(2αk)`.
    pub variance_term: f64,
}

impl BiasVariance {
    pub fn total(&self) -> f64 {
        self.bias_term + self.variance_term
    }
}

/// Exact `E[ℓ_m(θ̃) − ℓ_m(θ*)]` for a full window of `k` frames on a
/// constant or linear-drift stream with per-step displacement `step`.
pub fn expected_excess_risk_oracle(spec: &QuadModelSpec, kind: StreamKind, step: &[f64], k: usize) -> Result<BiasVariance> {
    if k == 0 {
        return Err(Error::InvalidSpec("window size must be at least 1".into()));
    }
    let lag = match kind {
        StreamKind::LinearDrift => (k as f64 - 1.0) / 2.0,
        StreamKind::Constant => 0.0,
        _ => return Err(Error::Unsupported("the excess-risk oracle needs a constant or linear-drift stream")),
    };
    if step.len() != spec.dim {
        return Err(Error::DimensionMismatch { expected: spec.dim, found: step.len() });
    }
    // x̄ − x_t = −((k−1)/2)·step for an arithmetic progression
    let offset: Vec<f64> = step.iter().map(|s| -lag * s).collect();
    let w_offset = spec.optimum(&offset);
    Ok(BiasVariance {
        bias_term: 0.5 * spec.alpha * linalg::dot(&w_offset, &w_offset),
        variance_term: spec.sigma * spec.sigma / (2.0 * spec.alpha * k as f64),
    })
}

/// A quadratic instance with `W = (β/α) I`, so that `α‖W‖₂ = β` holds by construction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TheoremInstance {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub sigma: f64,
    pub dim: usize,
    /// Full-window frames scored per trial.
    pub eval_frames: usize,
    pub kind: StreamKind,
    pub seed: u64,
}

impl Default for TheoremInstance {
    fn default() -> Self {
        TheoremInstance { alpha: 1.0, beta: 1.0, eta: 0.02, sigma: 1.0, dim: 8, eval_frames: 16, kind: StreamKind::LinearDrift, seed: 0 }
    }
}

impl TheoremInstance {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidSpec("alpha must be positive".into()));
        }
        for (name, v) in [("beta", self.beta), ("eta", self.eta), ("sigma", self.sigma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(alloc::format!("{name} must be finite and non-negative")));
            }
        }
        if self.dim == 0 || self.eval_frames == 0 {
            return Err(Error::InvalidSpec("dim and eval_frames must be at least 1".into()));
        }
        if !matches!(self.kind, StreamKind::LinearDrift | StreamKind::Constant) {
            return Err(Error::Unsupported("theorem sweeps use constant or linear-drift streams"));
        }
        Ok(())
    }

    pub fn model(&self) -> QuadModelSpec {
        let scale = self.beta / self.alpha;
        let w = linalg::identity(self.dim).into_iter().map(|v| v * scale).collect();
        QuadModelSpec { alpha: self.alpha, w: Some(w), sigma: self.sigma, dim: self.dim }
    }

    fn stream_spec(&self, k: usize, trial: usize) -> StreamSpec {
        StreamSpec {
            kind: self.kind,
            length: k + self.eval_frames - 1,
            dim: self.dim,
            eta: self.eta,
            seed: rng::derive_seed(self.seed, &[tag::SWEEP, k as u64, trial as u64]),
            target_map: Some(self.model().target_map()),
            ..StreamSpec::default()
        }
    }
}

/// Per-trial averages over the scored frames of one `(k, trial)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSample {
    pub excess_risk: f64,
    /// `⟨W(x̄ − x_t), δ̄⟩`, the zero-mean cross term of the excess risk.
    pub cross_term: f64,
}

/// Runs one trial at window size `k`: a fresh stream, the closed-form `θ̃` on
/// each full window, and the measured excess risk `ℓ_m(θ̃) − ℓ_m(W x_t)`.
pub fn sweep_cell(instance: &TheoremInstance, k: usize, trial: usize) -> Result<CellSample> {
    instance.validate()?;
    if k == 0 {
        return Err(Error::InvalidSpec("window size must be at least 1".into()));
    }
    let spec = instance.model();
    let stream = streamgen::gen_latent_stream(&instance.stream_spec(k, trial))?;
    let deltas: Vec<Vec<f64>> = stream.frames.iter().map(|f| quad_noise(&spec, f.index(), stream.noise_seed())).collect();
    let (mut excess, mut cross) = (0.0, 0.0);
    for end in k..=stream.len() {
        let window = &stream.frames[end - k..end];
        let theta = closed_form_window_solution(&spec, window, &deltas[end - k..end])?;
        let current = &stream.frames[end - 1];
        let target = spec.optimum(current.values());
        let gap: Vec<f64> = theta.iter().zip(&target).map(|(a, b)| a - b).collect();
        excess += 0.5 * spec.alpha * linalg::dot(&gap, &gap);

        let kf = k as f64;
        let mut x_bar = alloc::vec![0.0; spec.dim];
        let mut delta_bar = alloc::vec![0.0; spec.dim];
        for (f, dl) in window.iter().zip(&deltas[end - k..end]) {
            for i in 0..spec.dim {
                x_bar[i] += f.values()[i] / kf;
                delta_bar[i] += dl[i] / kf;
            }
        }
        let bias_dir: Vec<f64> = spec.optimum(&x_bar).iter().zip(&target).map(|(a, b)| a - b).collect();
        cross += linalg::dot(&bias_dir, &delta_bar);
    }
    let n = instance.eval_frames as f64;
    Ok(CellSample { excess_risk: excess / n, cross_term: cross / n })
}

/// One row of a window-size sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub k: usize,
    pub trials: usize,
    pub measured_mean: f64,
    pub measured_stderr: f64,
    pub oracle: f64,
    pub bias_term: f64,
    pub variance_term: f64,
    pub bound: f64,
    pub cross_mean: f64,
    pub cross_stderr: f64,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Combines the trial samples of one window size with the analytic values.
/// `samples` must be in trial order for the result to be reproducible.
pub fn aggregate_cells(instance: &TheoremInstance, k: usize, samples: &[CellSample]) -> Result<BoundReport> {
    if samples.is_empty() {
        return Err(Error::InvalidSpec("at least one trial is required".into()));
    }
    let spec = instance.model();
    let step = streamgen::linear_drift_step(&instance.stream_spec(k, 0));
    let oracle = expected_excess_risk_oracle(&spec, instance.kind, &step, k)?;
    let excess: Vec<f64> = samples.iter().map(|s| s.excess_risk).collect();
    let cross: Vec<f64> = samples.iter().map(|s| s.cross_term).collect();
    let (measured_mean, measured_stderr) = mean_and_stderr(&excess);
    let (cross_mean, cross_stderr) = mean_and_stderr(&cross);
    Ok(BoundReport {
        k,
        trials: samples.len(),
        measured_mean,
        measured_stderr,
        oracle: oracle.total(),
        bias_term: oracle.bias_term,
        variance_term: oracle.variance_term,
        bound: theorem_bound(instance.alpha, instance.beta, instance.eta, instance.sigma, k as f64)?,
        cross_mean,
        cross_stderr,
    })
}

/// Sequential sweep over `k_grid` with `trials` independent streams per point.
pub fn theorem_sweep(instance: &TheoremInstance, k_grid: &[usize], trials: usize) -> Result<Vec<BoundReport>> {
    if trials == 0 {
        return Err(Error::InvalidSpec("trials must be at least 1".into()));
    }
    k_grid
        .iter()
        .map(|&k| {
            let samples = (0..trials).map(|trial| sweep_cell(instance, k, trial)).collect::<Result<Vec<_>>>()?;
            aggregate_cells(instance, k, &samples)
        })
        .collect()
}

/// Grid point with the smallest value (first on ties).
pub fn argmin_k(reports: &[BoundReport], value: impl Fn(&BoundReport) -> f64) -> Option<usize> {
    reports.iter().min_by(|a, b| value(a).total_cmp(&value(b))).map(|r| r.k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaReport {
    /// `f(x̃*) − f(x*)`.
    pub gap: f64,
    /// `‖v‖²/(2α)`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks the perturbed-minimizer inequality on `f(x) = ½xᵀHx + bᵀx` with the
/// linear perturbation `vᵀx`, solving both minimizers in closed form.
pub fn verify_lemma(h: &[f64], b: &[f64], v: &[f64], alpha: f64) -> Result<LemmaReport> {
    let d = b.len();
    if h.len() != d * d || v.len() != d {
        return Err(Error::DimensionMismatch { expected: d * d, found: h.len() });
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidSpec("alpha must be positive".into()));
    }
    let eig = linalg::symmetric_eigenvalues(h, d);
    let lambda_min = eig[0];
    if !(lambda_min > 1e-12) {
        return Err(Error::IllConditioned(alloc::format!("H is singular (λ_min = {lambda_min:e})")));
    }
    if lambda_min < alpha * (1.0 - 1e-12) {
        return Err(Error::IllConditioned(alloc::format!("λ_min(H) = {lambda_min} is below alpha = {alpha}")));
    }
    let hm = DMatrix::from_row_slice(d, d, h);
    let chol = hm
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("H is not positive definite".into()))?;
    let bv = DVector::from_column_slice(b);
    let vv = DVector::from_column_slice(v);
    let x_star = -chol.solve(&bv);
    let x_tilde = -chol.solve(&(&bv + &vv));
    let f = |x: &DVector<f64>| 0.5 * x.dot(&(&hm * x)) + bv.dot(x);
    let gap = f(&x_tilde) - f(&x_star);
    let bound = vv.norm_squared() / (2.0 * alpha);
    Ok(LemmaReport { gap, bound, holds: gap <= bound + 1e-9 })
}

/// A random lemma instance: `H = αI + MᵀM`, so `λ_min(H) ≥ α`.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaInstance {
    pub alpha: f64,
    pub h: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn random_lemma_instance(seed: u64, index: usize, max_dim: usize) -> LemmaInstance {
    let mut rng = rng::rng_from(seed, &[tag::LEMMA, index as u64]);
    let d = rng.random_range(1..=max_dim.max(1));
    let alpha = rng.random_range(0.05..3.0);
    let m: Vec<f64> = (0..d * d).map(|_| rng::standard_normal(&mut rng)).collect();
    let mut h = alloc::vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            h[i * d + j] = (0..d).map(|r| m[r * d + i] * m[r * d + j]).sum::<f64>() + if i == j { alpha } else { 0.0 };
        }
    }
    let b = (0..d).map(|_| 2.0 * rng::standard_normal(&mut rng)).collect();
    let v = (0..d).map(|_| rng::standard_normal(&mut rng)).collect();
    LemmaInstance { alpha, h, b, v }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaSummary {
    pub instances: usize,
    pub holding: usize,
    /// Largest `gap / bound` seen.
    pub max_ratio: f64,
    /// `|gap − bound|` on an isotropic instance, where the two must coincide.
    pub isotropic_error: f64,
}

pub fn lemma_check(seed: u64, instances: usize, max_dim: usize) -> Result<LemmaSummary> {
    let mut holding = 0;
    let mut max_ratio = 0.0_f64;
    for i in 0..instances {
        let inst = random_lemma_instance(seed, i, max_dim);
        let r = verify_lemma(&inst.h, &inst.b, &inst.v, inst.alpha)?;
        holding += usize::from(r.holds);
        if r.bound > 0.0 {
            max_ratio = max_ratio.max(r.gap / r.bound);
        }
    }
    let alpha = 0.7;
    let d = 5;
    let h: Vec<f64> = linalg::identity(d).into_iter().map(|x| x * alpha).collect();
    let v = [0.3, -1.2, 0.5, 2.0, -0.1];
    let iso = verify_lemma(&h, &[0.0; 5], &v, alpha)?;
    Ok(LemmaSummary { instances, holding, max_ratio, isotropic_error: libm::fabs(iso.gap - iso.bound) })
}
