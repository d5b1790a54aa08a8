//! Model families (exact quadratic theory model and a small shared-encoder
//! network), self-supervised inner objectives and joint training.

mod masking;
mod neural;
mod objective;
mod quad;
mod train;

pub use masking::{mask_frame, MaskedView};
pub use neural::{
    neural_forward, neural_losses_and_grads, predict_probabilities, NeuralForward, NeuralLayout, NeuralLosses,
    NeuralModelSpec,
};
pub use objective::{inner_objective_grad, InnerContext, InnerGrad, InnerObjective, SelfTrainConfig};
pub use quad::{quad_main_grad, quad_main_loss, quad_noise, quad_ssl_grad, quad_ssl_loss, QuadModelSpec};
pub use train::{init_state, joint_train, training_objective, JointTrainConfig};
pub(crate) use train::axpy;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::streamgen::LabeledFrame;

/// Parameters split into encoder `f`, self-supervised head `g` and main head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlocks {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl ParamBlocks {
    pub fn zeros_like(other: &ParamBlocks) -> ParamBlocks {
        ParamBlocks {
            f: alloc::vec![0.0; other.f.len()],
            g: alloc::vec![0.0; other.g.len()],
            h: alloc::vec![0.0; other.h.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.f.len() + self.g.len() + self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `f`, `g`, `h` concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.f);
        out.extend_from_slice(&self.g);
        out.extend_from_slice(&self.h);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().chain(&self.g).chain(&self.h).all(|v| v.is_finite())
    }

    /// FNV-1a over the bit patterns of all parameters.
    pub fn checksum(&self) -> u64 {
        self.f.iter().chain(&self.g).chain(&self.h).fold(0xcbf2_9ce4_8422_2325_u64, |acc, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(acc, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        })
    }
}

/// Current parameters plus the jointly trained snapshot `(f₀, g₀, h₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamBlocks,
    pub frozen_init: Option<ParamBlocks>,
}

impl ModelState {
    /// A state whose frozen snapshot is its own parameters.
    pub fn frozen(params: ParamBlocks) -> ModelState {
        ModelState { frozen_init: Some(params.clone()), params }
    }

    pub fn frozen_init(&self) -> Result<&ParamBlocks> {
        self.frozen_init
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("model has no frozen initialization; run joint training first".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields))]
pub enum ModelFamily {
    Quadratic(QuadModelSpec),
    Neural(NeuralModelSpec),
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Quadratic(_) => "quadratic",
            ModelFamily::Neural(_) => "neural",
        }
    }

    /// Sizes of the `(f, g, h)` blocks.
    pub fn block_sizes(&self) -> (usize, usize, usize) {
        match self {
            ModelFamily::Quadratic(spec) => (spec.dim, 0, 0),
            ModelFamily::Neural(spec) => {
                let l = NeuralLayout::new(spec);
                (l.f_len(), l.g_len(), l.h_len())
            }
        }
    }

    pub fn check_state(&self, params: &ParamBlocks) -> Result<()> {
        let (f, g, h) = self.block_sizes();
        for (want, got) in [(f, params.f.len()), (g, params.g.len()), (h, params.h.len())] {
            if want != got {
                return Err(Error::DimensionMismatch { expected: want, found: got });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelFamily::Quadratic(spec) => spec.validate(),
            ModelFamily::Neural(spec) => spec.validate(),
        }
    }
}

/// Main-task evaluation of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub main_loss: f64,
    /// Excess risk (quadratic) or per-pixel error rate (neural).
    pub pred_error: f64,
    /// Number of misclassified pixels (neural only).
    pub error_count: Option<usize>,
    /// Intersection over union of the predicted mask (neural only).
    pub iou: Option<f64>,
    /// Per-pixel foreground probabilities (neural only).
    pub probabilities: Option<Vec<f64>>,
}

/// Evaluates the main task on the unmasked frame with the current parameters.
pub fn evaluate_main(family: &ModelFamily, params: &ParamBlocks, frame: &LabeledFrame) -> Result<Evaluation> {
    match family {
        ModelFamily::Quadratic(spec) => {
            let loss = quad_main_loss(spec, &params.f, frame)?;
            // ℓ_m attains zero at θ* = W x_t, so the loss is the excess risk.
            Ok(Evaluation { main_loss: loss, pred_error: loss, error_count: None, iou: None, probabilities: None })
        }
        ModelFamily::Neural(spec) => {
            let probs = predict_probabilities(spec, params, frame.values())?;
            let (main_loss, errors, iou) = segmentation_metrics(&probs, &frame.label);
            Ok(Evaluation {
                main_loss,
                pred_error: errors as f64 / probs.len() as f64,
                error_count: Some(errors),
                iou: Some(iou),
                probabilities: Some(probs),
            })
        }
    }
}

/// Mean binary cross-entropy, misclassified-pixel count at threshold 0.5, and IoU.
pub fn segmentation_metrics(probs: &[f64], label: &[f64]) -> (f64, usize, f64) {
    let mut bce = 0.0;
    let mut errors = 0;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in probs.iter().zip(label) {
        let p = p.clamp(1e-15, 1.0 - 1e-15);
        bce -= y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p);
        let pred = p > 0.5;
        let truth = y > 0.5;
        if pred != truth {
            errors += 1;
        }
        if pred && truth {
            inter += 1;
        }
        if pred || truth {
            union += 1;
        }
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (bce / probs.len() as f64, errors, iou)
}
