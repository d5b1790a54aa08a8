//! Experiment configuration: JSON in, fully resolved config out.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stream_ttt_core::models::{JointTrainConfig, ModelFamily};
use stream_ttt_core::rng::derive_seed;
use stream_ttt_core::streamgen::{StreamKind, StreamSpec};
use stream_ttt_core::theory::TheoremInstance;
use stream_ttt_core::tttloop::{AblationSettings, OfflineConfig, TttConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Online,
    OfflineAllFrames,
    Fixed,
    AblationSuite,
    TheoremSweep,
    LemmaCheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Online => "online",
            Mode::OfflineAllFrames => "offline-all-frames",
            Mode::Fixed => "fixed",
            Mode::AblationSuite => "ablation-suite",
            Mode::TheoremSweep => "theorem-sweep",
            Mode::LemmaCheck => "lemma-check",
        }
    }

    /// Modes that stream a video or latent sequence through a model.
    pub fn needs_stream(self) -> bool {
        matches!(self, Mode::Online | Mode::OfflineAllFrames | Mode::Fixed | Mode::AblationSuite)
    }
}

/// Joint training of the frozen model on a separate stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub stream: StreamSpec,
    #[serde(default)]
    pub joint: JointTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub smoothing_window: usize,
    /// Extra online rows, one per window size.
    pub window_grid: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { smoothing_window: 4, window_grid: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub k_grid: Vec<usize>,
    pub trials: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub sigma: f64,
    pub dim: usize,
    pub eval_frames: usize,
    pub kind: StreamKind,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            k_grid: (0..=8).map(|e| 1 << e).collect(),
            trials: 500,
            alpha: 1.0,
            beta: 1.0,
            eta: 0.02,
            sigma: 1.0,
            dim: 8,
            eval_frames: 16,
            kind: StreamKind::LinearDrift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaSection {
    pub instances: usize,
    pub max_dim: usize,
}

impl Default for LemmaSection {
    fn default() -> Self {
        LemmaSection { instances: 1000, max_dim: 10 }
    }
}

fn default_replicates() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A complete experiment. Every random choice is derived from `seed` (and the
/// replicate index), so sections carry no seeds of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Independent repetitions with derived seeds; results are reported per
    /// replicate and averaged.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelFamily>,
    #[serde(default)]
    pub ttt: TttConfig,
    /// Absent: the frozen model is the random initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default)]
    pub offline: OfflineConfig,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub lemma: LemmaSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Seeds of one replicate, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateSeeds {
    pub stream: u64,
    pub training_stream: u64,
    pub joint: u64,
    pub ttt: u64,
    pub shuffle: u64,
}

impl ExperimentConfig {
    pub fn replicate_seeds(&self, replicate: usize) -> ReplicateSeeds {
        let r = replicate as u64;
        let d = |tag: u64| derive_seed(self.seed, &[tag, r]);
        ReplicateSeeds { stream: d(1), training_stream: d(2), joint: d(3), ttt: d(4), shuffle: d(5) }
    }

    pub fn sweep_seed(&self) -> u64 {
        derive_seed(self.seed, &[6])
    }

    pub fn lemma_seed(&self) -> u64 {
        derive_seed(self.seed, &[7])
    }

    pub fn sweep_section(&self) -> SweepSection {
        self.sweep.clone().unwrap_or_default()
    }

    pub fn theorem_instance(&self) -> TheoremInstance {
        let s = self.sweep_section();
        TheoremInstance {
            alpha: s.alpha,
            beta: s.beta,
            eta: s.eta,
            sigma: s.sigma,
            dim: s.dim,
            eval_frames: s.eval_frames,
            kind: s.kind,
            seed: self.sweep_seed(),
        }
    }

    pub fn ablation_settings(&self, replicate: usize) -> AblationSettings {
        AblationSettings {
            offline: self.offline.clone(),
            smoothing_window: self.ablation.smoothing_window,
            shuffle_seed: self.replicate_seeds(replicate).shuffle,
            window_grid: self.ablation.window_grid.clone(),
        }
    }

    /// Stream and model of one replicate, with derived seeds.
    pub fn stream_spec(&self, replicate: usize) -> Option<StreamSpec> {
        self.stream.clone().map(|s| StreamSpec { seed: self.replicate_seeds(replicate).stream, ..s })
    }

    pub fn ttt_config(&self, replicate: usize) -> TttConfig {
        TttConfig { seed: self.replicate_seeds(replicate).ttt, ..self.ttt.clone() }
    }

    /// Checks ranges and mode-specific sections.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CliError::Validation(msg));
        if self.replicates == 0 {
            return fail("replicates: must be at least 1".into());
        }
        let mut seeded = Vec::new();
        if self.stream.as_ref().is_some_and(|s| s.seed != 0) {
            seeded.push("stream.seed");
        }
        if self.ttt.seed != 0 {
            seeded.push("ttt.seed");
        }
        if let Some(t) = &self.training {
            if t.stream.seed != 0 {
                seeded.push("training.stream.seed");
            }
            if t.joint.seed != 0 {
                seeded.push("training.joint.seed");
            }
        }
        if !seeded.is_empty() {
            return fail(format!("{}: seeds are derived from the top-level `seed`; remove this key", seeded.join(", ")));
        }

        self.ttt.validate().map_err(|e| CliError::core("ttt", e))?;
        if self.offline.eval_every == 0 {
            return fail("offline.eval_every: must be at least 1".into());
        }
        if self.ablation.smoothing_window == 0 {
            return fail("ablation.smoothing_window: must be at least 1".into());
        }
        if self.ablation.window_grid.contains(&0) {
            return fail("ablation.window_grid: window sizes must be at least 1".into());
        }

        if self.mode.needs_stream() {
            let Some(stream) = &self.stream else {
                return fail(format!("stream: required for mode {}", self.mode.name()));
            };
            let Some(model) = &self.model else {
                return fail(format!("model: required for mode {}", self.mode.name()));
            };
            stream.validate().map_err(|e| CliError::core("stream", e))?;
            model.validate().map_err(|e| CliError::core("model", e))?;
            check_compatible("stream", stream, model)?;
            if let Some(t) = &self.training {
                t.stream.validate().map_err(|e| CliError::core("training.stream", e))?;
                check_compatible("training.stream", &t.stream, model)?;
                if t.joint.batch_size == 0 || !(t.joint.lr >= 0.0) || !t.joint.lr.is_finite() {
                    return fail("training.joint: batch_size must be ≥ 1 and lr finite and ≥ 0".into());
                }
                if !(0.0..=1.0).contains(&t.joint.mask_ratio) {
                    return fail("training.joint.mask_ratio: must lie in [0, 1]".into());
                }
            }
            if matches!(model, ModelFamily::Quadratic(_))
                && !matches!(self.ttt.objective, stream_ttt_core::models::InnerObjective::MaskedRecon)
            {
                return fail("ttt.objective: the quadratic model only supports masked-recon".into());
            }
        }
        if self.mode == Mode::TheoremSweep {
            let s = self.sweep_section();
            if s.k_grid.is_empty() || s.k_grid.contains(&0) {
                return fail("sweep.k_grid: needs at least one window size, all ≥ 1".into());
            }
            if s.trials == 0 {
                return fail("sweep.trials: must be at least 1".into());
            }
            self.theorem_instance().validate().map_err(|e| CliError::core("sweep", e))?;
        }
        if self.mode == Mode::LemmaCheck && (self.lemma.instances == 0 || self.lemma.max_dim == 0) {
            return fail("lemma: instances and max_dim must be at least 1".into());
        }
        Ok(())
    }
}

fn check_compatible(section: &str, stream: &StreamSpec, model: &ModelFamily) -> Result<()> {
    let ok = match model {
        ModelFamily::Quadratic(q) => stream.kind.is_latent() && stream.dim == q.dim,
        ModelFamily::Neural(n) => {
            stream.kind == StreamKind::ShapeVideo && stream.video.height == n.height && stream.video.width == n.width
        }
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{section}: a {} stream does not match the {} model's input size",
            stream.kind.name(),
            model.name()
        )))
    }
}

/// Parses and validates a JSON config. Errors name the offending key path.
///
/// The master seed is taken from `seed_override`, else the config's `seed`,
/// else the `STREAM_TTT_SEED` environment variable, else 0.
pub fn parse_config(text: &str, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("not valid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Validation("the config must be a JSON object".into()))?;
    let seed = match (seed_override, obj.get("seed")) {
        (Some(s), _) => Some(s),
        (None, Some(_)) => None,
        (None, None) => Some(env_seed()?.unwrap_or(0)),
    };
    if let Some(s) = seed {
        obj.insert("seed".into(), s.into());
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Validation(inner.to_string())
        } else {
            CliError::Validation(format!("{path}: {inner}"))
        }
    })?;
    config.validate()?;
    Ok(config)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(crate::SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("{}: `{v}` is not an unsigned integer", crate::SEED_ENV))),
        Err(_) => Ok(None),
    }
}

/// Serialises the resolved config with every default spelled out.
pub fn to_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serialises")
}
