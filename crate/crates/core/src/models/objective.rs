//! Label-free inner objectives used at test time.

use alloc::vec::Vec;

use super::masking::mask_frame;
use super::neural::{main_backward_to_encoder, main_logits, sigmoid, softplus, ssl_loss_and_grads};
use super::quad::{quad_ssl_grad, quad_ssl_loss};
use super::{ModelFamily, ParamBlocks};
use crate::error::{Error, Result};
use crate::streamgen::LabeledFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum InnerObjective {
    /// Masked reconstruction (for the quadratic model: the noisy surrogate `ℓ_s`).
    #[default]
    MaskedRecon,
    /// Mean per-pixel entropy of the main-head prediction.
    Entropy,
    /// Cross-entropy against confident pseudo-labels, on a masked input.
    SelfTrain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SelfTrainConfig {
    /// A pixel becomes a pseudo-label only if its confidence is strictly above this.
    pub lambda: f64,
    pub mask_ratio: f64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig { lambda: 0.9, mask_ratio: 0.8 }
    }
}

/// Randomness and knobs for one inner-objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerContext {
    pub mask_seed: u64,
    pub noise_seed: u64,
    pub mask_ratio: f64,
    pub self_train: SelfTrainConfig,
}

/// Loss value and gradient for the blocks updated at test time. `h` is never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerGrad {
    pub loss: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

pub fn inner_objective_grad(
    kind: InnerObjective,
    family: &ModelFamily,
    params: &ParamBlocks,
    frame: &LabeledFrame,
    ctx: &InnerContext,
) -> Result<InnerGrad> {
    match (family, kind) {
        (ModelFamily::Quadratic(spec), InnerObjective::MaskedRecon) => Ok(InnerGrad {
            loss: quad_ssl_loss(spec, &params.f, frame, ctx.noise_seed)?,
            f: quad_ssl_grad(spec, &params.f, frame, ctx.noise_seed)?,
            g: Vec::new(),
        }),
        (ModelFamily::Quadratic(_), _) => {
            Err(Error::Unsupported("entropy and self-training need a predictive distribution (neural model)"))
        }
        (ModelFamily::Neural(spec), InnerObjective::MaskedRecon) => {
            let view = mask_frame(frame.values(), ctx.mask_ratio, ctx.mask_seed);
            let (loss, f, g) = ssl_loss_and_grads(spec, params, &view)?;
            Ok(InnerGrad { loss, f, g })
        }
        (ModelFamily::Neural(spec), InnerObjective::Entropy) => {
            let (logits, pass, layout) = main_logits(spec, params, frame.values())?;
            let n = logits.len() as f64;
            let mut loss = 0.0;
            let d_logits: Vec<f64> = logits
                .iter()
                .map(|&z| {
                    let p = sigmoid(z);
                    // H(p) = softplus(z) − z·p, dH/dz = −z·p(1−p)
                    loss += softplus(z) - z * p;
                    -z * p * (1.0 - p) / n
                })
                .collect();
            let zeros = alloc::vec![0.0; logits.len()];
            let f = main_backward_to_encoder(&layout, params, &pass, &zeros, &d_logits);
            Ok(InnerGrad { loss: loss / n, f, g: alloc::vec![0.0; params.g.len()] })
        }
        (ModelFamily::Neural(spec), InnerObjective::SelfTrain) => {
            let cfg = &ctx.self_train;
            let (logits, _, _) = main_logits(spec, params, frame.values())?;
            let pseudo: Vec<Option<f64>> = logits
                .iter()
                .map(|&z| {
                    let p = sigmoid(z);
                    (p.max(1.0 - p) > cfg.lambda).then_some(if p > 0.5 { 1.0 } else { 0.0 })
                })
                .collect();
            let selected = pseudo.iter().filter(|p| p.is_some()).count();
            if selected == 0 {
                return Ok(InnerGrad {
                    loss: 0.0,
                    f: alloc::vec![0.0; params.f.len()],
                    g: alloc::vec![0.0; params.g.len()],
                });
            }
            let view = mask_frame(frame.values(), cfg.mask_ratio, ctx.mask_seed);
            let masked_input = &view.input_with_mask[..view.len()];
            let mask = view.mask_channel();
            let (masked_logits, pass, layout) = super::neural::masked_logits(spec, params, masked_input, mask)?;
            let count = selected as f64;
            let mut loss = 0.0;
            let d_logits: Vec<f64> = masked_logits
                .iter()
                .zip(&pseudo)
                .map(|(&z, y)| match y {
                    Some(y) => {
                        loss += softplus(z) - y * z;
                        (sigmoid(z) - y) / count
                    }
                    None => 0.0,
                })
                .collect();
            let f = main_backward_to_encoder(&layout, params, &pass, mask, &d_logits);
            Ok(InnerGrad { loss: loss / count, f, g: alloc::vec![0.0; params.g.len()] })
        }
    }
}

