//! Experiment configuration files.

use std::path::{Path, PathBuf};

use kpomdp::{
    CollectMode, GridWorld, InitMode, KbrVariant, KernelChoice, LowRank, MedianSource, MedianSpread, Pendulum, PlanConfig,
    Regularizers, ReturnKind,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; every data set and evaluation seed derives from it.
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub kernels: KernelConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub histogram: HistogramConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvConfig {
    Grid(GridWorld),
    Pendulum(Pendulum),
    /// The two-state test POMDP.
    Oracle,
    /// A discrete POMDP read from a model file.
    Discrete { path: PathBuf },
}

impl EnvConfig {
    pub fn label(&self) -> &'static str {
        match self {
            EnvConfig::Grid(_) => "grid",
            EnvConfig::Pendulum(_) => "pendulum",
            EnvConfig::Oracle => "oracle",
            EnvConfig::Discrete { .. } => "discrete",
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, EnvConfig::Pendulum(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training-set sizes to sweep.
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub mode: CollectMode,
    #[serde(default)]
    pub prior_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub state: KernelChoice,
    pub action: KernelChoice,
    pub observation: KernelChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `None` uses `0.1 / sqrt(n)` for every regularizer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularizers: Option<Regularizers>,
    pub kbr: KbrVariant,
    pub low_rank: LowRank,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            regularizers: None,
            kbr: KbrVariant::Plain,
            low_rank: LowRank::Tolerance { tolerance: 1e-8 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Kernel,
    Histogram,
    Exact,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Kernel => "kernel",
            ControllerKind::Histogram => "histogram",
            ControllerKind::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizon: usize,
    pub episodes: usize,
    pub controllers: Vec<ControllerKind>,
    /// Defaults to the metric sum for the pendulum and the discounted return otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub returns: Option<ReturnKind>,
    /// Reset the kernel belief on prediction failure.
    pub reset: bool,
    /// Write one step log per episode.
    pub episode_logs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizon: 100,
            episodes: 20,
            controllers: vec![ControllerKind::Kernel],
            returns: None,
            reset: true,
            episode_logs: false,
        }
    }
}

/// Discretization used by the histogram controller on continuous environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramConfig {
    /// Bins per state coordinate over the training box.
    pub state_bins: Vec<usize>,
    pub observation_bins: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig {
            state_bins: vec![5, 5],
            observation_bins: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
            plot: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Grid,
    Pendulum,
    Oracle,
}

impl ExperimentConfig {
    /// Complete default configuration for a benchmark.
    pub fn preset(preset: Preset) -> Self {
        let median = |divisors: Vec<f64>, distances| KernelChoice::Median {
            divisors,
            distances,
            spread: MedianSpread::PerCoordinate,
        };
        match preset {
            Preset::Grid => ExperimentConfig {
                version: CONFIG_VERSION,
                seed: 1,
                env: EnvConfig::Grid(GridWorld::default()),
                data: DataConfig {
                    sizes: vec![500, 1000, 2000, 4000],
                    mode: CollectMode::Trajectory,
                    prior_samples: 0,
                },
                kernels: KernelConfig {
                    state: KernelChoice::Delta,
                    action: KernelChoice::Delta,
                    observation: KernelChoice::Delta,
                },
                model: ModelConfig::default(),
                plan: PlanConfig {
                    depth: 2,
                    discount: 0.95,
                    init_mode: InitMode::Qmdp,
                    pruning: true,
                    ..PlanConfig::default()
                },
                eval: EvalConfig {
                    controllers: vec![ControllerKind::Kernel, ControllerKind::Histogram, ControllerKind::Exact],
                    ..EvalConfig::default()
                },
                histogram: HistogramConfig::default(),
                output: OutputConfig::default(),
            },
            Preset::Pendulum => ExperimentConfig {
                version: CONFIG_VERSION,
                seed: 1,
                env: EnvConfig::Pendulum(Pendulum::default()),
                data: DataConfig {
                    sizes: vec![2000],
                    mode: CollectMode::Restart,
                    prior_samples: 0,
                },
                kernels: KernelConfig {
                    state: median(vec![30.0, 10.0], MedianSource::Own),
                    action: KernelChoice::Delta,
                    observation: median(vec![30.0], MedianSource::States),
                },
                model: ModelConfig::default(),
                plan: PlanConfig {
                    depth: 1,
                    discount: 0.95,
                    init_mode: InitMode::Reward,
                    ..PlanConfig::default()
                },
                eval: EvalConfig {
                    controllers: vec![ControllerKind::Kernel, ControllerKind::Histogram],
                    ..EvalConfig::default()
                },
                histogram: HistogramConfig::default(),
                output: OutputConfig::default(),
            },
            Preset::Oracle => ExperimentConfig {
                version: CONFIG_VERSION,
                seed: 1,
                env: EnvConfig::Oracle,
                data: DataConfig {
                    sizes: vec![64],
                    mode: CollectMode::Trajectory,
                    prior_samples: 0,
                },
                kernels: KernelConfig {
                    state: KernelChoice::Delta,
                    action: KernelChoice::Delta,
                    observation: KernelChoice::Delta,
                },
                model: ModelConfig::default(),
                plan: PlanConfig {
                    depth: 2,
                    discount: 0.9,
                    ..PlanConfig::default()
                },
                eval: EvalConfig {
                    controllers: vec![ControllerKind::Kernel, ControllerKind::Histogram, ControllerKind::Exact],
                    ..EvalConfig::default()
                },
                histogram: HistogramConfig::default(),
                output: OutputConfig::default(),
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(with_location(text, &msg)),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short hash of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(toml::to_string(self).expect("config serializes").as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn returns(&self) -> ReturnKind {
        self.eval.returns.unwrap_or(if self.env.is_continuous() {
            ReturnKind::Metric
        } else {
            ReturnKind::Discounted
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(HarnessError::Config(format!("`{key}`: {msg}")));
        if self.version != CONFIG_VERSION {
            return bad("version", format!("unsupported version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.data.sizes.is_empty() {
            return bad("sizes", "sweep is empty".into());
        }
        if self.data.sizes.contains(&0) {
            return bad("sizes", "sample sizes must be positive".into());
        }
        if self.eval.episodes == 0 {
            return bad("episodes", "at least one episode is required".into());
        }
        if self.eval.controllers.is_empty() {
            return bad("controllers", "no controller selected".into());
        }
        self.plan.validate().map_err(|e| HarnessError::Config(format!("`plan`: {e}")))?;
        if self.plan.pruning && self.plan.init_mode != InitMode::Qmdp {
            return bad("pruning", "pruning needs init_mode = \"qmdp\" for its bound".into());
        }
        if let LowRank::Fraction { fraction, .. } = self.model.low_rank {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return bad("fraction", format!("{fraction} is not in (0, 1]"));
            }
        }
        if let Some(r) = &self.model.regularizers {
            for (key, v) in [("state", r.state), ("state_action", r.state_action), ("kbr", r.kbr), ("obs", r.obs)] {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(key, format!("regularizer {v} must be positive"));
                }
            }
        }
        let continuous = self.env.is_continuous();
        for (key, k) in [
            ("state", &self.kernels.state),
            ("action", &self.kernels.action),
            ("observation", &self.kernels.observation),
        ] {
            let symbolic = !continuous || key == "action";
            match (k, symbolic) {
                (KernelChoice::Delta, false) => {
                    return bad(key, "delta kernel on a continuous space".into());
                }
                (KernelChoice::Gaussian { .. } | KernelChoice::Median { .. }, true) => {
                    return bad(key, "Gaussian kernel on a discrete space".into());
                }
                _ => {}
            }
        }
        if continuous && self.eval.controllers.contains(&ControllerKind::Exact) {
            return bad("controllers", "the exact controller needs a discrete environment".into());
        }
        if continuous {
            if self.histogram.state_bins.len() != 2 || self.histogram.state_bins.contains(&0) {
                return bad("state_bins", "need two positive bin counts".into());
            }
            if self.histogram.observation_bins == 0 {
                return bad("observation_bins", "must be positive".into());
            }
        }
        if let EnvConfig::Grid(g) = &self.env {
            if g.size < 2 || g.goal.0 >= g.size || g.goal.1 >= g.size {
                return bad("goal", format!("goal {:?} is not inside a {1}x{1} grid", g.goal, g.size));
            }
        }
        Ok(())
    }
}

/// Prefixes `msg` with the line of the first key it names.
fn with_location(text: &str, msg: &str) -> String {
    let key = msg.strip_prefix('`').and_then(|m| m.split('`').next());
    let line = key.and_then(|key| {
        text.lines().position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
    });
    match line {
        Some(i) => format!("line {}: {msg}", i + 1),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in [Preset::Grid, Preset::Pendulum, Preset::Oracle] {
            let cfg = ExperimentConfig::preset(p);
            let text = cfg.to_toml();
            assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::preset(Preset::Oracle).to_toml();
        text.push_str("\n[extra]\nfoo = 1\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(HarnessError::Config(_))));
    }

    #[test]
    fn validation_names_the_line() {
        let text = ExperimentConfig::preset(Preset::Oracle).to_toml().replace("episodes = 20", "episodes = 0");
        let Err(HarnessError::Config(msg)) = ExperimentConfig::parse(&text) else {
            panic!("expected a config error");
        };
        let line = text.lines().position(|l| l.trim_start().starts_with("episodes")).unwrap() + 1;
        assert!(msg.starts_with(&format!("line {line}:")), "{msg}");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::preset(Preset::Grid);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn pruning_requires_qmdp_bound() {
        let mut cfg = ExperimentConfig::preset(Preset::Grid);
        cfg.plan.init_mode = InitMode::Reward;
        assert!(cfg.validate().is_err());
    }
}
