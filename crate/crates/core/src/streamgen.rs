//! Synthetic test streams: smooth latent paths, regime-switching paths and
//! small moving-square videos with per-pixel masks.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, dist};
use crate::rng::{self, tag};

/// Steps of smooth streams are shrunk by this factor so measured norms stay
/// within `eta` after floating-point rounding.
const STEP_SHRINK: f64 = 1.0 - 1e-9;

/// One stream element. Indices start at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: Frame,
    pub label: Vec<f64>,
}

impl LabeledFrame {
    pub fn index(&self) -> usize {
        self.frame.index
    }

    pub fn values(&self) -> &[f64] {
        &self.frame.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StreamKind {
    Constant,
    LinearDrift,
    BoundedRandomWalk,
    RegimeSwitch,
    ShapeVideo,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Constant => "constant",
            StreamKind::LinearDrift => "linear-drift",
            StreamKind::BoundedRandomWalk => "bounded-random-walk",
            StreamKind::RegimeSwitch => "regime-switch",
            StreamKind::ShapeVideo => "shape-video",
        }
    }

    pub fn is_latent(self) -> bool {
        !matches!(self, StreamKind::ShapeVideo)
    }
}

/// Rendering parameters for `shape-video` streams.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct VideoParams {
    pub height: usize,
    pub width: usize,
    /// Half-side of the square; the square covers `(2r+1)²` pixels.
    pub radius: usize,
    /// Shape speed in pixels per frame.
    pub speed: f64,
    /// Background brightness of each regime, cycled if there are more regimes.
    pub background_levels: Vec<f64>,
    /// Brightness of the square above the background.
    pub contrast: f64,
    /// Amplitude of the fixed per-regime background texture.
    pub texture: f64,
    /// Amplitude and period (frames) of the slow sinusoidal background drift.
    pub drift_amplitude: f64,
    pub drift_period: f64,
    /// Half-width of i.i.d. uniform per-pixel sensor noise.
    pub noise: f64,
}

impl Default for VideoParams {
    fn default() -> Self {
        VideoParams {
            height: 16,
            width: 16,
            radius: 2,
            speed: 0.5,
            background_levels: alloc::vec![0.1],
            contrast: 0.9,
            texture: 0.0,
            drift_amplitude: 0.0,
            drift_period: 200.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub length: usize,
    /// Latent dimension; ignored by `shape-video`.
    pub dim: usize,
    /// Maximum L2 distance between consecutive frames outside regime switches.
    pub eta: f64,
    /// Frame `r` in this list is followed by a regime switch between `r` and `r + 1`.
    pub regime_times: Vec<usize>,
    pub seed: u64,
    /// Row-major `dim × dim` label map; identity when absent.
    pub target_map: Option<Vec<f64>>,
    /// Regime-switch jump size as a multiple of `eta`.
    pub regime_jump: f64,
    pub video: VideoParams,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: StreamKind::LinearDrift,
            length: 100,
            dim: 8,
            eta: 0.02,
            regime_times: Vec::new(),
            seed: 0,
            target_map: None,
            regime_jump: 10.0,
            video: VideoParams::default(),
        }
    }
}

impl StreamSpec {
    pub fn dims(&self) -> Vec<usize> {
        match self.kind {
            StreamKind::ShapeVideo => alloc::vec![self.video.height, self.video.width],
            _ => alloc::vec![self.dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::InvalidSpec("stream length must be at least 1".into()));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidSpec(format!("eta must be finite and non-negative, got {}", self.eta)));
        }
        if !self.regime_jump.is_finite() || self.regime_jump < 0.0 {
            return Err(Error::InvalidSpec("regime_jump must be finite and non-negative".into()));
        }
        if self.regime_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("regime_times must be strictly increasing".into()));
        }
        if let Some(&bad) = self.regime_times.iter().find(|&&r| r < 1 || r >= self.length) {
            return Err(Error::InvalidSpec(format!(
                "regime time {bad} outside [1, {})",
                self.length
            )));
        }
        if !self.regime_times.is_empty()
            && !matches!(self.kind, StreamKind::RegimeSwitch | StreamKind::ShapeVideo)
        {
            return Err(Error::InvalidSpec(format!(
                "regime_times are not meaningful for {} streams",
                self.kind.name()
            )));
        }
        if self.kind.is_latent() {
            if self.dim == 0 {
                return Err(Error::InvalidSpec("latent dimension must be at least 1".into()));
            }
            if let Some(w) = &self.target_map {
                if w.len() != self.dim * self.dim {
                    return Err(Error::DimensionMismatch { expected: self.dim * self.dim, found: w.len() });
                }
                crate::error::ensure_finite(w, "target_map")?;
            }
        }
        Ok(())
    }

    /// The label map `W` (row-major `dim × dim`).
    pub fn target_map(&self) -> Vec<f64> {
        self.target_map.clone().unwrap_or_else(|| linalg::identity(self.dim))
    }
}

/// Stream metadata carried alongside the frames.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StreamHeader {
    pub kind: StreamKind,
    #[cfg_attr(feature = "serde", serde(rename = "T"))]
    pub length: usize,
    pub dims: Vec<usize>,
    pub eta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub header: StreamHeader,
    pub frames: Vec<LabeledFrame>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Seed that keys per-frame gradient noise for the quadratic model.
    pub fn noise_seed(&self) -> u64 {
        self.header.seed
    }

    /// L2 norms of consecutive frame differences, `result[i] = ‖x_{i+2} − x_{i+1}‖`.
    pub fn step_norms(&self) -> Vec<f64> {
        self.frames.windows(2).map(|w| dist(w[0].values(), w[1].values())).collect()
    }
}

fn header_for(spec: &StreamSpec) -> StreamHeader {
    StreamHeader {
        kind: spec.kind,
        length: spec.length,
        dims: spec.dims(),
        eta: spec.eta,
        seed: spec.seed,
    }
}

/// Per-step displacement of a `linear-drift` stream.
pub fn linear_drift_step(spec: &StreamSpec) -> Vec<f64> {
    let mut rng = rng::rng_from(spec.seed, &[tag::STREAM, 1]);
    let dir = rng::unit_vector(&mut rng, spec.dim);
    dir.into_iter().map(|u| u * spec.eta * STEP_SHRINK).collect()
}

/// Generates a latent (non-image) stream with labels `y_t = W x_t`.
pub fn gen_latent_stream(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    if !spec.kind.is_latent() {
        return Err(Error::Unsupported("gen_latent_stream needs a latent stream kind"));
    }
    let d = spec.dim;
    let w = spec.target_map();
    let mut rng = rng::rng_from(spec.seed, &[tag::STREAM, 0]);
    let mut x: Vec<f64> = (0..d).map(|_| rng::standard_normal(&mut rng)).collect();
    let step = linear_drift_step(spec);
    let origin = x.clone();

    let mut frames = Vec::with_capacity(spec.length);
    for t in 1..=spec.length {
        if t > 1 {
            match spec.kind {
                StreamKind::Constant => {}
                StreamKind::LinearDrift => {
                    let s = (t - 1) as f64;
                    for i in 0..d {
                        x[i] = origin[i] + s * step[i];
                    }
                }
                StreamKind::BoundedRandomWalk | StreamKind::RegimeSwitch => {
                    let jump = spec.regime_times.binary_search(&(t - 1)).is_ok();
                    let radius = if jump { spec.regime_jump * spec.eta } else { spec.eta * STEP_SHRINK };
                    let dir = rng::unit_vector(&mut rng, d);
                    for i in 0..d {
                        x[i] += radius * dir[i];
                    }
                }
                StreamKind::ShapeVideo => unreachable!(),
            }
        }
        crate::error::ensure_finite(&x, "latent stream")?;
        frames.push(LabeledFrame {
            frame: Frame { index: t, values: x.clone() },
            label: linalg::matvec(&w, d, &x),
        });
    }
    Ok(Stream { header: header_for(spec), frames })
}

struct ShapeState {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

impl ShapeState {
    fn advanced(&self, lo: f64, hi_x: f64, hi_y: f64) -> ShapeState {
        let (cx, vx) = reflect(self.cx + self.vx, self.vx, lo, hi_x);
        let (cy, vy) = reflect(self.cy + self.vy, self.vy, lo, hi_y);
        ShapeState { cx, cy, vx, vy }
    }
}

fn reflect(pos: f64, vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, 0.0);
    }
    if pos < lo {
        (2.0 * lo - pos, -vel)
    } else if pos > hi {
        (2.0 * hi - pos, -vel)
    } else {
        (pos, vel)
    }
}

fn regime_of(spec: &StreamSpec, t: usize) -> usize {
    spec.regime_times.iter().filter(|&&r| r < t).count()
}

struct VideoRenderer<'a> {
    spec: &'a StreamSpec,
    textures: Vec<Vec<f64>>,
}

impl<'a> VideoRenderer<'a> {
    fn new(spec: &'a StreamSpec) -> Self {
        let v = &spec.video;
        let n = v.height * v.width;
        let regimes = spec.regime_times.len() + 1;
        let textures = (0..regimes)
            .map(|r| {
                let mut rng = rng::rng_from(spec.seed, &[tag::SHAPE, 1, r as u64]);
                (0..n).map(|_| v.texture * rng.random_range(-1.0..=1.0)).collect()
            })
            .collect();
        VideoRenderer { spec, textures }
    }

    fn render(&self, t: usize, shape: &ShapeState) -> (Vec<f64>, Vec<f64>) {
        let v = &self.spec.video;
        let regime = regime_of(self.spec, t);
        let level = v.background_levels[regime % v.background_levels.len()];
        let drift = if v.drift_amplitude == 0.0 {
            0.0
        } else {
            v.drift_amplitude * libm::sin(2.0 * core::f64::consts::PI * t as f64 / v.drift_period)
        };
        let r = v.radius as i64;
        let (sx, sy) = (libm::round(shape.cx) as i64, libm::round(shape.cy) as i64);
        let mut noise_rng = rng::rng_from(self.spec.seed, &[tag::NOISE, t as u64]);
        let texture = &self.textures[regime];
        let mut values = Vec::with_capacity(v.height * v.width);
        let mut label = Vec::with_capacity(v.height * v.width);
        for row in 0..v.height as i64 {
            for col in 0..v.width as i64 {
                let inside = (row - sy).abs() <= r && (col - sx).abs() <= r;
                let idx = (row as usize) * v.width + col as usize;
                let clean = (level + drift + if inside { v.contrast } else { texture[idx] }).clamp(0.0, 1.0);
                let noisy = if v.noise > 0.0 {
                    (clean + v.noise * noise_rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0)
                } else {
                    clean
                };
                values.push(noisy);
                label.push(if inside { 1.0 } else { 0.0 });
            }
        }
        (values, label)
    }
}

/// Generates an `H × W` video of a bright square drifting over a background
/// whose brightness and texture change at the regime times. Labels are the
/// square's mask.
///
/// Outside regime switches, the shape holds still on any step where moving it
/// would push the frame-to-frame L2 distance over `eta`.
pub fn gen_shape_video(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    if spec.kind != StreamKind::ShapeVideo {
        return Err(Error::Unsupported("gen_shape_video needs kind shape-video"));
    }
    let v = &spec.video;
    if v.height < 8 || v.width < 8 {
        return Err(Error::InvalidSpec("video frames must be at least 8×8".into()));
    }
    let side = 2 * v.radius + 1;
    if side > v.height || side > v.width {
        return Err(Error::InvalidSpec(format!(
            "shape of side {side} does not fit a {}×{} frame",
            v.height, v.width
        )));
    }
    if v.background_levels.is_empty() {
        return Err(Error::InvalidSpec("background_levels must be nonempty".into()));
    }
    let params = [v.speed, v.texture, v.drift_amplitude, v.noise, v.contrast];
    if params.iter().any(|p| !p.is_finite() || *p < 0.0) || !(v.drift_period > 0.0) {
        return Err(Error::InvalidSpec("video parameters must be finite and non-negative".into()));
    }
    crate::error::ensure_finite(&v.background_levels, "background_levels")?;

    let lo = v.radius as f64;
    let hi_x = (v.width - 1 - v.radius) as f64;
    let hi_y = (v.height - 1 - v.radius) as f64;
    let mut rng = rng::rng_from(spec.seed, &[tag::SHAPE, 0]);
    let angle = rng.random_range(0.0..core::f64::consts::TAU);
    let mut shape = ShapeState {
        cx: rng.random_range(lo..=hi_x.max(lo)),
        cy: rng.random_range(lo..=hi_y.max(lo)),
        vx: v.speed * libm::cos(angle),
        vy: v.speed * libm::sin(angle),
    };
    let renderer = VideoRenderer::new(spec);

    let mut frames: Vec<LabeledFrame> = Vec::with_capacity(spec.length);
    for t in 1..=spec.length {
        let (values, label) = if let Some(prev) = frames.last() {
            let switching = spec.regime_times.binary_search(&(t - 1)).is_ok();
            let moved = shape.advanced(lo, hi_x, hi_y);
            let candidate = renderer.render(t, &moved);
            if switching || dist(&candidate.0, prev.values()) <= spec.eta {
                shape = moved;
                candidate
            } else {
                let held = renderer.render(t, &shape);
                if dist(&held.0, prev.values()) > spec.eta {
                    return Err(Error::InvalidSpec(format!(
                        "eta = {} is too small for the background drift/noise at frame {t}",
                        spec.eta
                    )));
                }
                held
            }
        } else {
            renderer.render(t, &shape)
        };
        frames.push(LabeledFrame { frame: Frame { index: t, values }, label });
    }
    Ok(Stream { header: header_for(spec), frames })
}

/// Dispatches on the stream kind.
pub fn generate(spec: &StreamSpec) -> Result<Stream> {
    match spec.kind {
        StreamKind::ShapeVideo => gen_shape_video(spec),
        _ => gen_latent_stream(spec),
    }
}

/// Uniformly permutes the frames (values and labels together) and re-indexes
/// them `1..=T` so the result is again a valid stream.
pub fn shuffle_stream(stream: &Stream, seed: u64) -> Result<Stream> {
    if stream.frames.is_empty() {
        return Err(Error::InvalidSpec("cannot shuffle an empty stream".into()));
    }
    let mut order: Vec<usize> = (0..stream.frames.len()).collect();
    let mut rng = rng::rng_from(seed, &[tag::SHUFFLE]);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let frames = order
        .iter()
        .enumerate()
        .map(|(pos, &src)| {
            let f = &stream.frames[src];
            LabeledFrame {
                frame: Frame { index: pos + 1, values: f.frame.values.clone() },
                label: f.label.clone(),
            }
        })
        .collect();
    Ok(Stream { header: stream.header.clone(), frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(kind: StreamKind, eta: f64, length: usize) -> StreamSpec {
        StreamSpec { kind, eta, length, dim: 4, seed: 11, ..StreamSpec::default() }
    }

    fn video(speed: f64, drift: f64) -> StreamSpec {
        StreamSpec {
            kind: StreamKind::ShapeVideo,
            length: 20,
            eta: 100.0,
            seed: 5,
            video: VideoParams { speed, drift_amplitude: drift, ..VideoParams::default() },
            ..StreamSpec::default()
        }
    }

    #[test]
    fn zero_drift_gives_identical_frames() {
        let s = gen_latent_stream(&latent(StreamKind::LinearDrift, 0.0, 5)).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.frames.iter().all(|f| f.values() == s.frames[0].values()));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = latent(StreamKind::RegimeSwitch, 0.1, 50);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let v = video(0.7, 0.05);
        assert_eq!(generate(&v).unwrap(), generate(&v).unwrap());
    }

    #[test]
    fn random_walk_respects_eta() {
        let s = gen_latent_stream(&latent(StreamKind::BoundedRandomWalk, 0.1, 1000)).unwrap();
        let max = s.step_norms().into_iter().fold(0.0, f64::max);
        assert!(max <= 0.1, "max step {max}");
        assert!(max > 0.099);
    }

    #[test]
    fn regime_jumps_only_at_declared_times() {
        let mut spec = latent(StreamKind::RegimeSwitch, 0.05, 200);
        spec.regime_times = alloc::vec![50, 120];
        let s = gen_latent_stream(&spec).unwrap();
        for (i, n) in s.step_norms().into_iter().enumerate() {
            let t = i + 1;
            if spec.regime_times.contains(&t) {
                assert!((n - 0.5).abs() < 1e-9);
            } else {
                assert!(n <= 0.05);
            }
        }
    }

    #[test]
    fn labels_apply_the_target_map() {
        let mut spec = latent(StreamKind::BoundedRandomWalk, 0.1, 3);
        spec.dim = 2;
        spec.target_map = Some(alloc::vec![2.0, 0.0, 1.0, -1.0]);
        let s = gen_latent_stream(&spec).unwrap();
        for f in &s.frames {
            let x = f.values();
            assert_eq!(f.label, alloc::vec![2.0 * x[0], x[0] - x[1]]);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gen_latent_stream(&latent(StreamKind::LinearDrift, f64::NAN, 5)).is_err());
        assert!(gen_latent_stream(&latent(StreamKind::LinearDrift, 0.1, 0)).is_err());
        let mut spec = latent(StreamKind::RegimeSwitch, 0.1, 10);
        spec.regime_times = alloc::vec![10];
        assert!(gen_latent_stream(&spec).is_err());
        spec.regime_times = alloc::vec![0];
        assert!(gen_latent_stream(&spec).is_err());
        let mut v = video(0.0, 0.0);
        v.video.radius = 8;
        assert!(gen_shape_video(&v).is_err());
    }

    #[test]
    fn static_video_is_constant() {
        let s = gen_shape_video(&video(0.0, 0.0)).unwrap();
        assert!(s.frames.iter().all(|f| f == &LabeledFrame {
            frame: Frame { index: f.index(), values: s.frames[0].values().to_vec() },
            label: s.frames[0].label.clone(),
        }));
    }

    #[test]
    fn interior_square_mask_has_full_area() {
        let s = gen_shape_video(&video(0.6, 0.0)).unwrap();
        for f in &s.frames {
            let count = f.label.iter().filter(|&&m| m == 1.0).count();
            assert_eq!(count, 25);
            assert!(f.label.iter().all(|&m| m == 0.0 || m == 1.0));
        }
    }

    #[test]
    fn video_respects_eta() {
        let mut spec = video(1.0, 0.02);
        spec.length = 300;
        spec.eta = 2.0;
        spec.video.radius = 0;
        let s = gen_shape_video(&spec).unwrap();
        let max = s.step_norms().into_iter().fold(0.0, f64::max);
        assert!(max <= 2.0, "max step {max}");
    }

    #[test]
    fn regime_switch_changes_background() {
        let mut spec = video(0.0, 0.0);
        spec.regime_times = alloc::vec![10];
        spec.video.background_levels = alloc::vec![0.1, 0.4];
        spec.eta = 0.0;
        let s = gen_shape_video(&spec).unwrap();
        let bg = |f: &LabeledFrame| f.values().iter().zip(&f.label).find(|(_, &m)| m == 0.0).unwrap().0.clone();
        assert_eq!(bg(&s.frames[9]), 0.1);
        assert_eq!(bg(&s.frames[10]), 0.4);
    }

    #[test]
    fn shuffle_of_single_frame_is_identity() {
        let s = gen_latent_stream(&latent(StreamKind::Constant, 0.0, 1)).unwrap();
        assert_eq!(shuffle_stream(&s, 3).unwrap(), s);
    }

    #[test]
    fn shuffle_breaks_smoothness() {
        let s = gen_latent_stream(&latent(StreamKind::BoundedRandomWalk, 0.1, 1000)).unwrap();
        let shuffled = shuffle_stream(&s, 9).unwrap();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let before = mean(s.step_norms());
        let after = mean(shuffled.step_norms());
        assert!(after >= 5.0 * before, "before {before}, after {after}");
        assert!(shuffled.frames.iter().enumerate().all(|(i, f)| f.index() == i + 1));
    }
}
