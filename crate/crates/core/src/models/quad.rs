//! The quadratic theory model: `ℓ_m(θ) = (α/2)‖θ − W x_t‖²`, whose
//! self-supervised gradient differs from the main gradient by per-frame
//! Gaussian noise `δ_t`.

use alloc::vec::Vec;

use crate::error::{ensure_finite, Error, Result};
use crate::linalg;
use crate::rng::{self, tag};
use crate::streamgen::LabeledFrame;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct QuadModelSpec {
    /// Strong-convexity constant α.
    pub alpha: f64,
    /// Row-major `dim × dim` target map. Identity when absent.
    pub w: Option<Vec<f64>>,
    /// Noise scale σ: `E‖δ_t‖² = σ²`.
    pub sigma: f64,
    pub dim: usize,
}

impl Default for QuadModelSpec {
    fn default() -> Self {
        QuadModelSpec { alpha: 1.0, w: None, sigma: 1.0, dim: 8 }
    }
}

impl QuadModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidSpec(alloc::format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidSpec("sigma must be finite and non-negative".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dim must be at least 1".into()));
        }
        if let Some(w) = &self.w {
            if w.len() != self.dim * self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim * self.dim, found: w.len() });
            }
            ensure_finite(w, "W")?;
        }
        Ok(())
    }

    pub fn target_map(&self) -> Vec<f64> {
        self.w.clone().unwrap_or_else(|| linalg::identity(self.dim))
    }

    /// Lipschitz constant of `∇_θ ℓ_m` in `x`: `α‖W‖₂`.
    pub fn beta(&self) -> f64 {
        self.alpha * linalg::spectral_norm(&self.target_map(), self.dim, self.dim)
    }

    /// `θ* = W x`.
    pub fn optimum(&self, x: &[f64]) -> Vec<f64> {
        linalg::matvec(&self.target_map(), self.dim, x)
    }
}

fn check(spec: &QuadModelSpec, theta: &[f64], frame: &LabeledFrame) -> Result<()> {
    if theta.len() != spec.dim {
        return Err(Error::DimensionMismatch { expected: spec.dim, found: theta.len() });
    }
    if frame.values().len() != spec.dim {
        return Err(Error::DimensionMismatch { expected: spec.dim, found: frame.values().len() });
    }
    ensure_finite(theta, "theta")?;
    ensure_finite(frame.values(), "frame")
}

pub fn quad_main_loss(spec: &QuadModelSpec, theta: &[f64], frame: &LabeledFrame) -> Result<f64> {
    check(spec, theta, frame)?;
    let target = spec.optimum(frame.values());
    let sq: f64 = theta.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * spec.alpha * sq)
}

/// `∇_θ ℓ_m = α(θ − W x_t)`.
pub fn quad_main_grad(spec: &QuadModelSpec, theta: &[f64], frame: &LabeledFrame) -> Result<Vec<f64>> {
    check(spec, theta, frame)?;
    let target = spec.optimum(frame.values());
    Ok(theta.iter().zip(&target).map(|(a, b)| spec.alpha * (a - b)).collect())
}

/// `δ_t`: isotropic Gaussian with per-coordinate variance `σ²/d`, a pure
/// function of `(t, seed)`.
pub fn quad_noise(spec: &QuadModelSpec, index: usize, seed: u64) -> Vec<f64> {
    if spec.sigma == 0.0 {
        return alloc::vec![0.0; spec.dim];
    }
    let scale = spec.sigma / libm::sqrt(spec.dim as f64);
    let mut rng = rng::rng_from(seed, &[tag::DELTA, index as u64]);
    (0..spec.dim).map(|_| scale * rng::standard_normal(&mut rng)).collect()
}

/// `∇ℓ_s = ∇ℓ_m − δ_t`.
pub fn quad_ssl_grad(spec: &QuadModelSpec, theta: &[f64], frame: &LabeledFrame, noise_seed: u64) -> Result<Vec<f64>> {
    let mut g = quad_main_grad(spec, theta, frame)?;
    for (gi, di) in g.iter_mut().zip(quad_noise(spec, frame.index(), noise_seed)) {
        *gi -= di;
    }
    Ok(g)
}

/// `ℓ_s(θ) = ℓ_m(θ) − ⟨δ_t, θ⟩`, the loss whose gradient is [`quad_ssl_grad`].
pub fn quad_ssl_loss(spec: &QuadModelSpec, theta: &[f64], frame: &LabeledFrame, noise_seed: u64) -> Result<f64> {
    let main = quad_main_loss(spec, theta, frame)?;
    Ok(main - linalg::dot(&quad_noise(spec, frame.index(), noise_seed), theta))
}
