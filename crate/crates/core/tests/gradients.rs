//! Central-difference checks of every analytic gradient against an
//! independently written scalar forward pass.

use stream_ttt_core::models::{
    inner_objective_grad, mask_frame, neural_forward, neural_losses_and_grads, quad_main_grad, quad_main_loss,
    quad_ssl_grad, quad_ssl_loss, InnerContext, InnerObjective, MaskedView, ModelFamily, NeuralModelSpec,
    ParamBlocks, QuadModelSpec, SelfTrainConfig,
};
use stream_ttt_core::rng::{rng_from, standard_normal, SimRng};
use stream_ttt_core::streamgen::{Frame, LabeledFrame};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-9;
const PROBES: usize = 100;

fn spec() -> NeuralModelSpec {
    NeuralModelSpec { height: 8, width: 8, patch_size: 4, hidden_dim: 5 }
}

/// Scalar reference of the network, indexed pixel by pixel.
struct Reference<'a> {
    spec: &'a NeuralModelSpec,
    params: &'a ParamBlocks,
}

impl Reference<'_> {
    fn p(&self) -> usize {
        self.spec.patch_size
    }
    fn hidden(&self) -> usize {
        self.spec.hidden_dim
    }
    fn patch_of(&self, r: usize, c: usize) -> (usize, usize) {
        let p = self.p();
        ((r / p) * (self.spec.width / p) + c / p, (r % p) * p + c % p)
    }
    fn pixel(&self, q: usize, j: usize) -> usize {
        let p = self.p();
        let pw = self.spec.width / p;
        (q / pw * p + j / p) * self.spec.width + (q % pw) * p + j % p
    }
    fn mu(&self, q: usize) -> f64 {
        let p2 = self.p() * self.p();
        self.params.f[self.hidden() * 2 * p2 + self.hidden() + q]
    }
    fn feature(&self, q: usize, k: usize, x: &[f64], mask: &[f64]) -> f64 {
        let p2 = self.p() * self.p();
        let row = k * 2 * p2;
        let mut pre = self.params.f[self.hidden() * 2 * p2 + k];
        for j in 0..p2 {
            let px = self.pixel(q, j);
            let input = if mask[px] == 1.0 { 0.0 } else { x[px] - self.mu(q) };
            pre += self.params.f[row + j] * input + self.params.f[row + p2 + j] * mask[px];
        }
        pre.tanh()
    }
    fn out(&self, head: &[f64], r: usize, c: usize, x: &[f64], mask: &[f64]) -> f64 {
        let (q, j) = self.patch_of(r, c);
        let hd = self.hidden();
        let p2 = self.p() * self.p();
        let mut v = head[hd * p2 + j];
        for k in 0..hd {
            v += head[j * hd + k] * self.feature(q, k, x, mask);
        }
        v
    }
    fn reconstruction(&self, x: &[f64], mask: &[f64]) -> Vec<f64> {
        let w = self.spec.width;
        (0..x.len()).map(|i| self.mu(self.patch_of(i / w, i % w).0) + self.out(&self.params.g, i / w, i % w, x, mask)).collect()
    }
    fn logits(&self, x: &[f64], mask: &[f64]) -> Vec<f64> {
        let w = self.spec.width;
        (0..x.len()).map(|i| self.out(&self.params.h, i / w, i % w, x, mask)).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, y: f64) -> f64 {
    let p = sigmoid(z);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn ssl_loss(spec: &NeuralModelSpec, params: &ParamBlocks, x: &[f64], view: &MaskedView) -> f64 {
    let recon = Reference { spec, params }.reconstruction(x, view.mask_channel());
    view.masked_idx.iter().map(|&i| (recon[i] - x[i]).powi(2)).sum::<f64>() / view.masked_idx.len() as f64
}

fn main_loss(spec: &NeuralModelSpec, params: &ParamBlocks, frame: &LabeledFrame) -> f64 {
    let zeros = vec![0.0; frame.label.len()];
    let logits = Reference { spec, params }.logits(frame.values(), &zeros);
    logits.iter().zip(&frame.label).map(|(&z, &y)| bce(z, y)).sum::<f64>() / logits.len() as f64
}

fn entropy_loss(spec: &NeuralModelSpec, params: &ParamBlocks, x: &[f64]) -> f64 {
    let zeros = vec![0.0; x.len()];
    let logits = Reference { spec, params }.logits(x, &zeros);
    logits
        .iter()
        .map(|&z| {
            let p = sigmoid(z);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / logits.len() as f64
}

fn self_train_loss(spec: &NeuralModelSpec, params: &ParamBlocks, x: &[f64], pseudo: &[Option<f64>], view: &MaskedView) -> f64 {
    let masked: Vec<f64> = view.input_with_mask[..x.len()].to_vec();
    let logits = Reference { spec, params }.logits(&masked, view.mask_channel());
    let n = pseudo.iter().flatten().count() as f64;
    logits.iter().zip(pseudo).filter_map(|(&z, y)| y.map(|y| bce(z, y))).sum::<f64>() / n
}

fn random_params(rng: &mut SimRng, spec: &NeuralModelSpec, scale: f64) -> ParamBlocks {
    let family = ModelFamily::Neural(spec.clone());
    let (f, g, h) = family.block_sizes();
    let mut draw = |n| (0..n).map(|_| scale * standard_normal(rng)).collect::<Vec<f64>>();
    ParamBlocks { f: draw(f), g: draw(g), h: draw(h) }
}

fn random_frame(rng: &mut SimRng, spec: &NeuralModelSpec) -> LabeledFrame {
    let n = spec.height * spec.width;
    let values = (0..n).map(|_| 0.5 + 0.3 * standard_normal(rng)).collect();
    let label = (0..n).map(|_| if standard_normal(rng) > 0.3 { 1.0 } else { 0.0 }).collect();
    LabeledFrame { frame: Frame { index: 1, values }, label }
}

enum Block {
    F,
    G,
    H,
}

fn block_mut<'a>(p: &'a mut ParamBlocks, b: &Block) -> &'a mut Vec<f64> {
    match b {
        Block::F => &mut p.f,
        Block::G => &mut p.g,
        Block::H => &mut p.h,
    }
}

/// Worst coordinate error of `analytic` against central differences of `loss`.
fn check_block(params: &ParamBlocks, block: Block, analytic: &[f64], loss: impl Fn(&ParamBlocks) -> f64) -> f64 {
    let mut worst = 0.0_f64;
    let mut probe = params.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = block_mut(&mut probe, &block)[i];
        block_mut(&mut probe, &block)[i] = orig + STEP;
        let up = loss(&probe);
        block_mut(&mut probe, &block)[i] = orig - STEP;
        let down = loss(&probe);
        block_mut(&mut probe, &block)[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = (a - numeric).abs();
        let allowed = REL_TOL * a.abs().max(numeric.abs()) + ABS_FLOOR;
        worst = worst.max(err / allowed);
    }
    worst
}

fn assert_within(worst: f64, what: &str) {
    assert!(worst <= 1.0, "{what}: worst error is {worst:.3}× the allowed tolerance");
}

#[test]
fn reference_forward_matches_library() {
    let spec = spec();
    let mut rng = rng_from(1, &[]);
    for probe in 0..10 {
        let params = random_params(&mut rng, &spec, 0.5);
        let frame = random_frame(&mut rng, &spec);
        let view = mask_frame(frame.values(), 0.8, probe);
        let out = neural_forward(&spec, &params, &view).unwrap();
        let reference = Reference { spec: &spec, params: &params };
        let recon = reference.reconstruction(frame.values(), view.mask_channel());
        let logits = reference.logits(frame.values(), &vec![0.0; 64]);
        assert_eq!(out.reconstruction.len(), 64);
        assert_eq!(out.logits.len(), 64);
        for i in 0..64 {
            assert!((out.reconstruction[i] - recon[i]).abs() < 1e-12);
            assert!((out.logits[i] - logits[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_output_biases() {
    let spec = spec();
    let family = ModelFamily::Neural(spec.clone());
    let (f, g, h) = family.block_sizes();
    let mut params = ParamBlocks { f: vec![0.0; f], g: vec![0.0; g], h: vec![0.0; h] };
    let p2 = 16;
    for j in 0..p2 {
        params.g[g - p2 + j] = 0.1 * j as f64;
        params.h[h - p2 + j] = -0.2 * j as f64;
    }
    let mut rng = rng_from(2, &[]);
    let frame = random_frame(&mut rng, &spec);
    let out = neural_forward(&spec, &params, &mask_frame(frame.values(), 0.8, 3)).unwrap();
    for px in 0..64 {
        let j = (px / 8 % 4) * 4 + px % 4;
        assert_eq!(out.reconstruction[px], 0.1 * j as f64);
        assert_eq!(out.logits[px], -0.2 * j as f64);
    }
}

#[test]
fn neural_joint_gradients_match_finite_differences() {
    let spec = spec();
    let mut rng = rng_from(3, &[]);
    for probe in 0..PROBES {
        let params = random_params(&mut rng, &spec, 0.4);
        let frame = random_frame(&mut rng, &spec);
        let view = mask_frame(frame.values(), 0.8, probe as u64);
        let losses = neural_losses_and_grads(&spec, &params, &frame, &view).unwrap();
        assert!((losses.ssl_loss - ssl_loss(&spec, &params, frame.values(), &view)).abs() < 1e-12);
        assert!((losses.main_loss - main_loss(&spec, &params, &frame)).abs() < 1e-12);

        let s = |p: &ParamBlocks| ssl_loss(&spec, p, frame.values(), &view);
        assert_within(check_block(&params, Block::F, &losses.ssl_grads.f, s), "ssl/f");
        assert_within(check_block(&params, Block::G, &losses.ssl_grads.g, s), "ssl/g");
        assert!(losses.ssl_grads.h.iter().all(|&v| v == 0.0));

        let m = |p: &ParamBlocks| main_loss(&spec, p, &frame);
        assert_within(check_block(&params, Block::F, &losses.main_grads.f, m), "main/f");
        assert_within(check_block(&params, Block::H, &losses.main_grads.h, m), "main/h");
        assert!(losses.main_grads.g.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn inner_objective_gradients_match_finite_differences() {
    let spec = spec();
    let family = ModelFamily::Neural(spec.clone());
    let mut rng = rng_from(4, &[]);
    let self_train = SelfTrainConfig { lambda: 0.6, mask_ratio: 0.8 };
    let mut self_train_probes = 0;
    for probe in 0..PROBES {
        let params = random_params(&mut rng, &spec, 0.6);
        let frame = random_frame(&mut rng, &spec);
        let ctx = InnerContext { mask_seed: probe as u64, noise_seed: 0, mask_ratio: 0.8, self_train };
        let x = frame.values();

        let recon = inner_objective_grad(InnerObjective::MaskedRecon, &family, &params, &frame, &ctx).unwrap();
        let view = mask_frame(x, 0.8, ctx.mask_seed);
        let s = |p: &ParamBlocks| ssl_loss(&spec, p, x, &view);
        assert_within(check_block(&params, Block::F, &recon.f, s), "masked-recon/f");
        assert_within(check_block(&params, Block::G, &recon.g, s), "masked-recon/g");

        let ent = inner_objective_grad(InnerObjective::Entropy, &family, &params, &frame, &ctx).unwrap();
        assert!((ent.loss - entropy_loss(&spec, &params, x)).abs() < 1e-12);
        assert_within(check_block(&params, Block::F, &ent.f, |p| entropy_loss(&spec, p, x)), "entropy/f");
        assert!(ent.g.iter().all(|&v| v == 0.0));

        let st = inner_objective_grad(InnerObjective::SelfTrain, &family, &params, &frame, &ctx).unwrap();
        let zeros = vec![0.0; x.len()];
        let pseudo: Vec<Option<f64>> = Reference { spec: &spec, params: &params }
            .logits(x, &zeros)
            .iter()
            .map(|&z| {
                let p = sigmoid(z);
                (p.max(1.0 - p) > self_train.lambda).then_some(if p > 0.5 { 1.0 } else { 0.0 })
            })
            .collect();
        if pseudo.iter().any(Option::is_some) {
            self_train_probes += 1;
            let sview = mask_frame(x, self_train.mask_ratio, ctx.mask_seed);
            let l = |p: &ParamBlocks| self_train_loss(&spec, p, x, &pseudo, &sview);
            assert!((st.loss - l(&params)).abs() < 1e-12);
            assert_within(check_block(&params, Block::F, &st.f, l), "self-train/f");
        }
    }
    assert!(self_train_probes >= 90, "only {self_train_probes} probes had pseudo-labels");
}

#[test]
fn quadratic_gradients_match_finite_differences() {
    let mut rng = rng_from(5, &[]);
    for probe in 0..PROBES {
        let d = 1 + probe % 8;
        let w: Vec<f64> = (0..d * d).map(|_| standard_normal(&mut rng)).collect();
        let spec = QuadModelSpec { alpha: 0.1 + (probe % 7) as f64 * 0.4, w: Some(w), sigma: 1.3, dim: d };
        let theta: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let frame = LabeledFrame { frame: Frame { index: probe + 1, values: x }, label: vec![0.0; d] };
        let as_params = |f: Vec<f64>| ParamBlocks { f, g: vec![], h: vec![] };
        let params = as_params(theta.clone());
        let main = quad_main_grad(&spec, &theta, &frame).unwrap();
        assert_within(check_block(&params, Block::F, &main, |p| quad_main_loss(&spec, &p.f, &frame).unwrap()), "quad main");
        let ssl = quad_ssl_grad(&spec, &theta, &frame, 17).unwrap();
        assert_within(check_block(&params, Block::F, &ssl, |p| quad_ssl_loss(&spec, &p.f, &frame, 17).unwrap()), "quad ssl");
    }
}

#[test]
fn self_train_with_exclusive_full_confidence_is_zero() {
    let spec = spec();
    let family = ModelFamily::Neural(spec.clone());
    let mut rng = rng_from(6, &[]);
    let params = random_params(&mut rng, &spec, 3.0);
    let frame = random_frame(&mut rng, &spec);
    let ctx = InnerContext {
        mask_seed: 1,
        noise_seed: 0,
        mask_ratio: 0.8,
        self_train: SelfTrainConfig { lambda: 1.0, mask_ratio: 0.8 },
    };
    let g = inner_objective_grad(InnerObjective::SelfTrain, &family, &params, &frame, &ctx).unwrap();
    assert!(g.f.iter().chain(&g.g).all(|&v| v == 0.0));
}

#[test]
fn uniform_prediction_has_maximal_entropy() {
    let spec = spec();
    let family = ModelFamily::Neural(spec.clone());
    let (f, g, h) = family.block_sizes();
    let params = ParamBlocks { f: vec![0.0; f], g: vec![0.0; g], h: vec![0.0; h] };
    let mut rng = rng_from(7, &[]);
    let frame = random_frame(&mut rng, &spec);
    let ctx = InnerContext { mask_seed: 0, noise_seed: 0, mask_ratio: 0.8, self_train: SelfTrainConfig::default() };
    let e = inner_objective_grad(InnerObjective::Entropy, &family, &params, &frame, &ctx).unwrap();
    assert!((e.loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn entropy_and_self_train_reject_the_quadratic_model() {
    let family = ModelFamily::Quadratic(QuadModelSpec { dim: 2, ..QuadModelSpec::default() });
    let params = ParamBlocks { f: vec![0.0; 2], g: vec![], h: vec![] };
    let frame = LabeledFrame { frame: Frame { index: 1, values: vec![0.0; 2] }, label: vec![0.0; 2] };
    let ctx = InnerContext { mask_seed: 0, noise_seed: 0, mask_ratio: 0.8, self_train: SelfTrainConfig::default() };
    for kind in [InnerObjective::Entropy, InnerObjective::SelfTrain] {
        assert!(inner_objective_grad(kind, &family, &params, &frame, &ctx).is_err());
    }
}
