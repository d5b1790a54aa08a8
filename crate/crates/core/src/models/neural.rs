//! A patch-wise shared encoder with two heads.
//!
//! Each `p × p` patch is encoded on its own by one tanh layer whose weights are
//! shared across patches. The encoder input is the patch centred on a learned
//! per-patch reference level `μ_q` (masked pixels zeroed) together with the
//! binary mask channel:
//!
//! ```text
//! a = [ (1 − m) ⊙ (x − μ_q) ; m ]      z = tanh(A a + c)
//! recon = μ_q + G z + g_b              logits = H z + h_b
//! ```
//!
//! `f = (A, c, μ)`, `g = (G, g_b)`, `h = (H, h_b)`. The reference level sits in
//! the encoder, so adapting it on reconstruction also moves the input the main
//! head sees.

use alloc::vec::Vec;

use super::masking::MaskedView;
use super::ParamBlocks;
use crate::error::{ensure_finite, Error, Result};
use crate::streamgen::LabeledFrame;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NeuralModelSpec {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
}

impl Default for NeuralModelSpec {
    fn default() -> Self {
        NeuralModelSpec { height: 16, width: 16, patch_size: 4, hidden_dim: 16 }
    }
}

impl NeuralModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.hidden_dim == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("neural model sizes must be positive".into()));
        }
        if !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidSpec(alloc::format!(
                "{}×{} frame is not divisible into {}-pixel patches",
                self.height, self.width, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Offsets of each parameter tensor inside the flat blocks, and the
/// pixel index of every (patch, in-patch) slot.
#[derive(Debug, Clone)]
pub struct NeuralLayout {
    pub p2: usize,
    pub hidden: usize,
    pub patches: usize,
    pixel_of: Vec<usize>,
}

impl NeuralLayout {
    pub fn new(spec: &NeuralModelSpec) -> NeuralLayout {
        let p = spec.patch_size;
        let (ph, pw) = (spec.height / p, spec.width / p);
        let mut pixel_of = Vec::with_capacity(spec.pixels());
        for q in 0..ph * pw {
            let (qr, qc) = (q / pw, q % pw);
            for j in 0..p * p {
                let (r, c) = (qr * p + j / p, qc * p + j % p);
                pixel_of.push(r * spec.width + c);
            }
        }
        NeuralLayout { p2: p * p, hidden: spec.hidden_dim, patches: ph * pw, pixel_of }
    }

    fn in_dim(&self) -> usize {
        2 * self.p2
    }
    fn a_len(&self) -> usize {
        self.hidden * self.in_dim()
    }
    pub fn c_offset(&self) -> usize {
        self.a_len()
    }
    pub fn mu_offset(&self) -> usize {
        self.a_len() + self.hidden
    }
    pub fn f_len(&self) -> usize {
        self.mu_offset() + self.patches
    }
    pub fn g_len(&self) -> usize {
        self.p2 * self.hidden + self.p2
    }
    pub fn h_len(&self) -> usize {
        self.g_len()
    }

    fn pixels(&self, q: usize) -> &[usize] {
        &self.pixel_of[q * self.p2..(q + 1) * self.p2]
    }
}

/// Encoder activations for every patch of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPass {
    /// `patches × 2p²` encoder inputs.
    pub inputs: Vec<f64>,
    /// `patches × hidden` features.
    pub features: Vec<f64>,
}

fn encode(l: &NeuralLayout, f: &[f64], values: &[f64], mask: &[f64]) -> EncoderPass {
    let (in_dim, hidden) = (l.in_dim(), l.hidden);
    let (weights, rest) = f.split_at(l.a_len());
    let (bias, mu) = rest.split_at(hidden);
    let mut inputs = alloc::vec![0.0; l.patches * in_dim];
    let mut features = alloc::vec![0.0; l.patches * hidden];
    for q in 0..l.patches {
        let a = &mut inputs[q * in_dim..(q + 1) * in_dim];
        for (j, &px) in l.pixels(q).iter().enumerate() {
            let m = mask[px];
            a[j] = (1.0 - m) * (values[px] - mu[q]);
            a[l.p2 + j] = m;
        }
        let z = &mut features[q * hidden..(q + 1) * hidden];
        for k in 0..hidden {
            let row = &weights[k * in_dim..(k + 1) * in_dim];
            let pre: f64 = bias[k] + row.iter().zip(a.iter()).map(|(w, x)| w * x).sum::<f64>();
            z[k] = libm::tanh(pre);
        }
    }
    EncoderPass { inputs, features }
}

/// Per-pixel head output; the reconstruction head adds back `μ_q`.
fn head(l: &NeuralLayout, params: &[f64], pass: &EncoderPass, mu: Option<&[f64]>, n: usize) -> Vec<f64> {
    let hidden = l.hidden;
    let (weights, bias) = params.split_at(l.p2 * hidden);
    let mut out = alloc::vec![0.0; n];
    for q in 0..l.patches {
        let z = &pass.features[q * hidden..(q + 1) * hidden];
        let offset = mu.map_or(0.0, |m| m[q]);
        for (j, &px) in l.pixels(q).iter().enumerate() {
            let row = &weights[j * hidden..(j + 1) * hidden];
            out[px] = offset + bias[j] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    out
}

/// Accumulates head gradients (if `grad` is given) and returns `∂/∂z` per patch.
fn head_backward(
    l: &NeuralLayout,
    params: &[f64],
    pass: &EncoderPass,
    d_out: &[f64],
    mut grad: Option<&mut [f64]>,
) -> Vec<f64> {
    let hidden = l.hidden;
    let weights = &params[..l.p2 * hidden];
    let mut d_z = alloc::vec![0.0; l.patches * hidden];
    for q in 0..l.patches {
        let z = &pass.features[q * hidden..(q + 1) * hidden];
        let dz = &mut d_z[q * hidden..(q + 1) * hidden];
        for (j, &px) in l.pixels(q).iter().enumerate() {
            let d = d_out[px];
            if d == 0.0 {
                continue;
            }
            let row = &weights[j * hidden..(j + 1) * hidden];
            for k in 0..hidden {
                dz[k] += d * row[k];
            }
            if let Some(gr) = grad.as_deref_mut() {
                let (gw, gb) = gr.split_at_mut(l.p2 * hidden);
                for k in 0..hidden {
                    gw[j * hidden + k] += d * z[k];
                }
                gb[j] += d;
            }
        }
    }
    d_z
}

fn encoder_backward(l: &NeuralLayout, f: &[f64], pass: &EncoderPass, d_z: &[f64], mask: &[f64], grad_f: &mut [f64]) {
    let (in_dim, hidden) = (l.in_dim(), l.hidden);
    let weights = &f[..l.a_len()];
    let (c_off, mu_off) = (l.c_offset(), l.mu_offset());
    let mut d_pre = alloc::vec![0.0; hidden];
    for q in 0..l.patches {
        let z = &pass.features[q * hidden..(q + 1) * hidden];
        let a = &pass.inputs[q * in_dim..(q + 1) * in_dim];
        let dz = &d_z[q * hidden..(q + 1) * hidden];
        let mut any = false;
        for k in 0..hidden {
            d_pre[k] = dz[k] * (1.0 - z[k] * z[k]);
            any |= d_pre[k] != 0.0;
        }
        if !any {
            continue;
        }
        for k in 0..hidden {
            let dp = d_pre[k];
            grad_f[c_off + k] += dp;
            let g_row = &mut grad_f[k * in_dim..(k + 1) * in_dim];
            for (g, &x) in g_row.iter_mut().zip(a) {
                *g += dp * x;
            }
        }
        let mut d_mu = 0.0;
        for (j, &px) in l.pixels(q).iter().enumerate() {
            if mask[px] == 1.0 {
                continue;
            }
            let da: f64 = (0..hidden).map(|k| weights[k * in_dim + j] * d_pre[k]).sum();
            d_mu -= (1.0 - mask[px]) * da;
        }
        grad_f[mu_off + q] += d_mu;
    }
}

fn mu_of<'a>(l: &NeuralLayout, f: &'a [f64]) -> &'a [f64] {
    &f[l.mu_offset()..]
}

fn check(spec: &NeuralModelSpec, params: &ParamBlocks, n: usize) -> Result<NeuralLayout> {
    spec.validate()?;
    let l = NeuralLayout::new(spec);
    for (want, got) in [(l.f_len(), params.f.len()), (l.g_len(), params.g.len()), (l.h_len(), params.h.len())] {
        if want != got {
            return Err(Error::DimensionMismatch { expected: want, found: got });
        }
    }
    if n != spec.pixels() {
        return Err(Error::DimensionMismatch { expected: spec.pixels(), found: n });
    }
    Ok(l)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralForward {
    /// `g ∘ f` on the masked input, one value per pixel.
    pub reconstruction: Vec<f64>,
    /// `h ∘ f` on the unmasked frame, one logit per pixel.
    pub logits: Vec<f64>,
    pub masked_pass: EncoderPass,
    pub full_pass: EncoderPass,
}

pub fn neural_forward(spec: &NeuralModelSpec, params: &ParamBlocks, view: &MaskedView) -> Result<NeuralForward> {
    let n = view.len();
    let l = check(spec, params, n)?;
    let original = view.original();
    let mask = view.mask_channel();
    let masked_pass = encode(&l, &params.f, &original, mask);
    let zeros = alloc::vec![0.0; n];
    let full_pass = encode(&l, &params.f, &original, &zeros);
    let mu = mu_of(&l, &params.f);
    Ok(NeuralForward {
        reconstruction: head(&l, &params.g, &masked_pass, Some(mu), n),
        logits: head(&l, &params.h, &full_pass, None, n),
        masked_pass,
        full_pass,
    })
}

/// Foreground probabilities of `h ∘ f` on an unmasked frame.
pub fn predict_probabilities(spec: &NeuralModelSpec, params: &ParamBlocks, values: &[f64]) -> Result<Vec<f64>> {
    Ok(main_logits(spec, params, values)?.0.into_iter().map(sigmoid).collect())
}

pub(crate) fn main_logits(
    spec: &NeuralModelSpec,
    params: &ParamBlocks,
    values: &[f64],
) -> Result<(Vec<f64>, EncoderPass, NeuralLayout)> {
    let n = values.len();
    let l = check(spec, params, n)?;
    let zeros = alloc::vec![0.0; n];
    let pass = encode(&l, &params.f, values, &zeros);
    Ok((head(&l, &params.h, &pass, None, n), pass, l))
}

/// Backpropagates `d_logits` through `h` (frozen) into `f` for an input with
/// the given mask. Returns the encoder gradient.
pub(crate) fn main_backward_to_encoder(
    l: &NeuralLayout,
    params: &ParamBlocks,
    pass: &EncoderPass,
    mask: &[f64],
    d_logits: &[f64],
) -> Vec<f64> {
    let d_z = head_backward(l, &params.h, pass, d_logits, None);
    let mut grad_f = alloc::vec![0.0; params.f.len()];
    encoder_backward(l, &params.f, pass, &d_z, mask, &mut grad_f);
    grad_f
}

/// Reconstruction loss on masked pixels and its gradient for `(f, g)`.
pub(crate) fn ssl_loss_and_grads(
    spec: &NeuralModelSpec,
    params: &ParamBlocks,
    view: &MaskedView,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = view.len();
    let l = check(spec, params, n)?;
    if view.masked_idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let original = view.original();
    let mask = view.mask_channel();
    let pass = encode(&l, &params.f, &original, mask);
    let mu = mu_of(&l, &params.f);
    let recon = head(&l, &params.g, &pass, Some(mu), n);

    let m = view.masked_idx.len() as f64;
    let mut loss = 0.0;
    let mut d_recon = alloc::vec![0.0; n];
    for (&i, &target) in view.masked_idx.iter().zip(&view.masked_values) {
        let e = recon[i] - target;
        loss += e * e;
        d_recon[i] = 2.0 * e / m;
    }
    loss /= m;

    let mut grad_g = alloc::vec![0.0; params.g.len()];
    let d_z = head_backward(&l, &params.g, &pass, &d_recon, Some(&mut grad_g));
    let mut grad_f = alloc::vec![0.0; params.f.len()];
    encoder_backward(&l, &params.f, &pass, &d_z, mask, &mut grad_f);
    let mu_off = l.mu_offset();
    for q in 0..l.patches {
        grad_f[mu_off + q] += l.pixels(q).iter().map(|&px| d_recon[px]).sum::<f64>();
    }
    Ok((loss, grad_f, grad_g))
}

/// Mean per-pixel binary cross-entropy of `h ∘ f` on the unmasked frame and
/// its gradient for `(f, h)`.
pub(crate) fn main_loss_and_grads(
    spec: &NeuralModelSpec,
    params: &ParamBlocks,
    frame: &LabeledFrame,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (logits, pass, l) = main_logits(spec, params, frame.values())?;
    if frame.label.len() != logits.len() {
        return Err(Error::DimensionMismatch { expected: logits.len(), found: frame.label.len() });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let d_logits: Vec<f64> = logits
        .iter()
        .zip(&frame.label)
        .map(|(&z, &y)| {
            loss += softplus(z) - y * z;
            (sigmoid(z) - y) / n
        })
        .collect();
    let mut grad_h = alloc::vec![0.0; params.h.len()];
    let d_z = head_backward(&l, &params.h, &pass, &d_logits, Some(&mut grad_h));
    let mut grad_f = alloc::vec![0.0; params.f.len()];
    let zeros = alloc::vec![0.0; logits.len()];
    encoder_backward(&l, &params.f, &pass, &d_z, &zeros, &mut grad_f);
    Ok((loss / n, grad_f, grad_h))
}

/// Both losses and their exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralLosses {
    pub ssl_loss: f64,
    pub main_loss: f64,
    /// Gradient of `ℓ_s`; its `h` block is zero.
    pub ssl_grads: ParamBlocks,
    /// Gradient of `ℓ_m`; its `g` block is zero.
    pub main_grads: ParamBlocks,
}

impl NeuralLosses {
    /// Gradient of `ℓ_m + ssl_weight · ℓ_s`.
    pub fn combined(&self, ssl_weight: f64) -> ParamBlocks {
        let mix = |m: &[f64], s: &[f64]| m.iter().zip(s).map(|(a, b)| a + ssl_weight * b).collect();
        ParamBlocks {
            f: mix(&self.main_grads.f, &self.ssl_grads.f),
            g: mix(&self.main_grads.g, &self.ssl_grads.g),
            h: mix(&self.main_grads.h, &self.ssl_grads.h),
        }
    }
}

pub fn neural_losses_and_grads(
    spec: &NeuralModelSpec,
    params: &ParamBlocks,
    frame: &LabeledFrame,
    view: &MaskedView,
) -> Result<NeuralLosses> {
    ensure_finite(frame.values(), "frame")?;
    let (ssl_loss, sf, sg) = ssl_loss_and_grads(spec, params, view)?;
    let (main_loss, mf, mh) = main_loss_and_grads(spec, params, frame)?;
    Ok(NeuralLosses {
        ssl_loss,
        main_loss,
        ssl_grads: ParamBlocks { f: sf, g: sg, h: alloc::vec![0.0; params.h.len()] },
        main_grads: ParamBlocks { f: mf, g: alloc::vec![0.0; params.g.len()], h: mh },
    })
}

/// `h ∘ f` logits for an input with an explicit mask channel.
pub(crate) fn masked_logits(
    spec: &NeuralModelSpec,
    params: &ParamBlocks,
    values: &[f64],
    mask: &[f64],
) -> Result<(Vec<f64>, EncoderPass, NeuralLayout)> {
    let n = values.len();
    let l = check(spec, params, n)?;
    if mask.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: mask.len() });
    }
    let pass = encode(&l, &params.f, values, mask);
    Ok((head(&l, &params.h, &pass, None, n), pass, l))
}
