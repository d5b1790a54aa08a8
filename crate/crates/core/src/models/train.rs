//! Joint training of `f, g, h` on `ℓ_m + ℓ_s` before deployment.

use alloc::vec::Vec;
use rand::seq::SliceRandom;

use super::masking::mask_frame;
use super::neural::{main_loss_and_grads, ssl_loss_and_grads, NeuralLayout};
use super::quad::{quad_main_grad, quad_main_loss, quad_ssl_grad, quad_ssl_loss};
use super::{ModelFamily, ModelState, ParamBlocks};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::streamgen::LabeledFrame;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct JointTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight on `ℓ_s`; zero gives a main-task-only model.
    pub ssl_weight: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig { epochs: 60, lr: 0.5, batch_size: 8, ssl_weight: 1.0, mask_ratio: 0.8, seed: 0 }
    }
}

/// Random initial parameters.
pub fn init_state(family: &ModelFamily, seed: u64) -> ParamBlocks {
    let mut rng = rng::rng_from(seed, &[tag::INIT]);
    let mut normal = |scale: f64, n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng::standard_normal(&mut rng)).collect() };
    match family {
        ModelFamily::Quadratic(spec) => ParamBlocks { f: normal(1.0, spec.dim), g: Vec::new(), h: Vec::new() },
        ModelFamily::Neural(spec) => {
            let l = NeuralLayout::new(spec);
            let in_scale = 1.0 / libm::sqrt((2 * l.p2) as f64);
            let out_scale = 0.5 / libm::sqrt(l.hidden as f64);
            let mut f = normal(in_scale, l.c_offset());
            f.resize(l.f_len(), 0.0);
            let mut g = normal(out_scale, l.p2 * l.hidden);
            g.resize(l.g_len(), 0.0);
            let mut h = normal(out_scale, l.p2 * l.hidden);
            h.resize(l.h_len(), 0.0);
            ParamBlocks { f, g, h }
        }
    }
}

/// `ℓ_m + w·ℓ_s` for one sample and its gradient.
fn sample_objective(
    family: &ModelFamily,
    params: &ParamBlocks,
    frame: &LabeledFrame,
    ssl_weight: f64,
    mask_ratio: f64,
    mask_seed: u64,
    noise_seed: u64,
) -> Result<(f64, ParamBlocks)> {
    match family {
        ModelFamily::Quadratic(spec) => {
            let main = quad_main_loss(spec, &params.f, frame)?;
            let mut grad = quad_main_grad(spec, &params.f, frame)?;
            let mut loss = main;
            if ssl_weight != 0.0 {
                loss += ssl_weight * quad_ssl_loss(spec, &params.f, frame, noise_seed)?;
                for (g, s) in grad.iter_mut().zip(quad_ssl_grad(spec, &params.f, frame, noise_seed)?) {
                    *g += ssl_weight * s;
                }
            }
            Ok((loss, ParamBlocks { f: grad, g: Vec::new(), h: Vec::new() }))
        }
        ModelFamily::Neural(spec) => {
            let (main, mut gf, gh) = main_loss_and_grads(spec, params, frame)?;
            let mut gg = alloc::vec![0.0; params.g.len()];
            let mut loss = main;
            if ssl_weight != 0.0 {
                let view = mask_frame(frame.values(), mask_ratio, mask_seed);
                let (ssl, sf, sg) = ssl_loss_and_grads(spec, params, &view)?;
                loss += ssl_weight * ssl;
                for (a, b) in gf.iter_mut().zip(&sf) {
                    *a += ssl_weight * b;
                }
                for (a, b) in gg.iter_mut().zip(&sg) {
                    *a += ssl_weight * b;
                }
            }
            Ok((loss, ParamBlocks { f: gf, g: gg, h: gh }))
        }
    }
}

fn mask_seed(cfg: &JointTrainConfig, epoch: usize, sample: usize) -> u64 {
    rng::derive_seed(cfg.seed, &[tag::TRAIN, epoch as u64, sample as u64])
}

/// Mean joint objective over the whole training set with fixed masks.
pub fn training_objective(
    family: &ModelFamily,
    params: &ParamBlocks,
    train: &[LabeledFrame],
    cfg: &JointTrainConfig,
    noise_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, frame) in train.iter().enumerate() {
        let seed = rng::derive_seed(cfg.seed, &[tag::EVAL, i as u64]);
        total += sample_objective(family, params, frame, cfg.ssl_weight, cfg.mask_ratio, seed, noise_seed)?.0;
    }
    Ok(total / train.len() as f64)
}

/// Mini-batch gradient descent on the mean of `ℓ_m + w·ℓ_s` from a random
/// initialization. The result is stored as the frozen snapshot.
pub fn joint_train(
    family: &ModelFamily,
    train: &[LabeledFrame],
    cfg: &JointTrainConfig,
    noise_seed: u64,
) -> Result<ModelState> {
    family.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidSpec("joint training needs at least one sample".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::InvalidSpec("batch_size must be ≥ 1 and lr ≥ 0".into()));
    }
    let mut params = init_state(family, cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng::rng_from(cfg.seed, &[tag::TRAIN]);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = ParamBlocks::zeros_like(&params);
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = sample_objective(
                    family,
                    &params,
                    &train[i],
                    cfg.ssl_weight,
                    cfg.mask_ratio,
                    mask_seed(cfg, epoch, i),
                    noise_seed,
                )?;
                loss += l;
                add_into(&mut acc, &g);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step, what: "joint training loss" });
            }
            let scale = cfg.lr / batch.len() as f64;
            axpy(&mut params.f, -scale, &acc.f);
            axpy(&mut params.g, -scale, &acc.g);
            axpy(&mut params.h, -scale, &acc.h);
            step += 1;
        }
        if !params.is_finite() {
            return Err(Error::Diverged { step, what: "joint training parameters" });
        }
    }
    Ok(ModelState::frozen(params))
}

pub(crate) fn add_into(acc: &mut ParamBlocks, g: &ParamBlocks) {
    axpy(&mut acc.f, 1.0, &g.f);
    axpy(&mut acc.g, 1.0, &g.g);
    axpy(&mut acc.h, 1.0, &g.h);
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
