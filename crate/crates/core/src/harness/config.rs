//! Experiment configuration: per-experiment defaults, JSON files and
//! `key=value` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{NtkError, Result};

/// The experiments the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Train,
    Gen,
    Sgd,
    Margin,
    Kernel,
    XorMargin,
    NtkLb,
    RandomLabel,
    KernelComplexity,
    InitLemmas,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::Train,
        Experiment::Gen,
        Experiment::Sgd,
        Experiment::Margin,
        Experiment::Kernel,
        Experiment::XorMargin,
        Experiment::NtkLb,
        Experiment::RandomLabel,
        Experiment::KernelComplexity,
        Experiment::InitLemmas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::Gen => "gen",
            Experiment::Sgd => "sgd",
            Experiment::Margin => "margin",
            Experiment::Kernel => "kernel",
            Experiment::XorMargin => "xor-margin",
            Experiment::NtkLb => "ntk-lb",
            Experiment::RandomLabel => "random-label",
            Experiment::KernelComplexity => "kernel-complexity",
            Experiment::InitLemmas => "init-lemmas",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = NtkError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| NtkError::Config(format!("unknown experiment `{s}`")))
    }
}

/// Which distribution an experiment samples from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Linear,
    Xor2,
}

/// Fully resolved settings of one run. Fields an experiment does not use are
/// still echoed so that every run directory is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out_dir: String,
    pub distribution: DistributionKind,
    pub d: usize,
    /// Planted margin of the linear distribution.
    pub gamma0: f64,
    /// Training-set size (GD) or stream length (SGD).
    pub n: usize,
    /// Use every point of the 2-XOR support instead of `n` draws.
    pub exhaustive: bool,
    pub held_out: usize,
    pub m: usize,
    /// Width sweep; overrides `m` when non-empty.
    pub widths: Vec<usize>,
    pub eta: f64,
    pub eps: f64,
    pub delta: f64,
    /// Step budget; `None` means the theorem's `T`.
    pub t_max: Option<usize>,
    /// Stop GD once the running-average risk reaches `eps`.
    pub stop_at_target: bool,
    pub eval_stride: usize,
    pub mc_samples: usize,
    pub noise_patterns: usize,
    pub trials: usize,
    pub replicates: usize,
    pub dims: Vec<usize>,
    pub target_error: f64,
    pub max_steps: usize,
    /// Kernel tag for the margin experiment: `k0`, `k1`, `k2` or `k1+k2`.
    pub kernel: String,
    /// Band half-width for the near-activation fractions.
    pub eps2: f64,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            seed: 0,
            out_dir: format!("runs/{}", experiment.name()),
            distribution: DistributionKind::Linear,
            d: 20,
            gamma0: 0.2,
            n: 200,
            exhaustive: false,
            held_out: 2000,
            m: 1024,
            widths: Vec::new(),
            eta: 1.0,
            eps: 0.05,
            delta: 0.05,
            t_max: Some(8000),
            stop_at_target: true,
            eval_stride: 1,
            mc_samples: 1_000_000,
            noise_patterns: 32,
            trials: 200,
            replicates: 1,
            dims: Vec::new(),
            target_error: 0.1,
            max_steps: 20_000,
            kernel: "k1".into(),
            eps2: 0.1,
        };
        match experiment {
            Experiment::Train => Self {
                widths: vec![256, 1024, 4096],
                ..base
            },
            Experiment::Gen => Self { n: 2000, ..base },
            Experiment::Sgd => Self {
                n: 5000,
                held_out: 1000,
                delta: 0.1,
                replicates: 50,
                ..base
            },
            Experiment::Margin => Self {
                distribution: DistributionKind::Xor2,
                d: 6,
                exhaustive: true,
                n: 64,
                mc_samples: 10_000,
                ..base
            },
            Experiment::Kernel => Self {
                d: 7,
                trials: 100,
                ..base
            },
            Experiment::XorMargin => Self {
                distribution: DistributionKind::Xor2,
                d: 8,
                mc_samples: 400_000,
                ..base
            },
            Experiment::NtkLb => Self {
                distribution: DistributionKind::Xor2,
                d: 102,
                m: 2,
                trials: 2000,
                ..base
            },
            Experiment::RandomLabel => Self {
                distribution: DistributionKind::Xor2,
                d: 6,
                exhaustive: true,
                n: 64,
                ..base
            },
            Experiment::KernelComplexity => Self {
                distribution: DistributionKind::Xor2,
                dims: vec![6, 8, 10],
                replicates: 9,
                exhaustive: true,
                ..base
            },
            Experiment::InitLemmas => Self {
                distribution: DistributionKind::Xor2,
                d: 8,
                exhaustive: true,
                widths: vec![1000, 10_000],
                trials: 50,
                ..base
            },
        }
    }

    /// Defaults for `experiment`, then the keys of `file` (if any), then each
    /// `key=value` override in order.
    pub fn resolve(
        experiment: Experiment,
        file: Option<&Value>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::defaults(experiment))?;
        let map = tree
            .as_object_mut()
            .expect("config serializes to an object");
        if let Some(file) = file {
            let obj = file
                .as_object()
                .ok_or_else(|| NtkError::Config("config file must hold a JSON object".into()))?;
            if let Some(name) = obj.get("experiment") {
                if name != &Value::String(experiment.name().into()) {
                    return Err(NtkError::Config(format!(
                        "config file is for experiment {name}, not `{experiment}`"
                    )));
                }
            }
            for (k, v) in obj {
                set_key(map, k, v.clone())?;
            }
        }
        for item in overrides {
            let (k, raw) = item
                .split_once('=')
                .ok_or_else(|| NtkError::Config(format!("override `{item}` is not key=value")))?;
            if k == "experiment" {
                return Err(NtkError::Config(
                    "the experiment is chosen by the subcommand".into(),
                ));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_key(map, k, value)?;
        }
        let config: Self =
            serde_json::from_value(tree).map_err(|e| NtkError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(experiment: Experiment, path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| NtkError::Config(e.to_string()))?;
        Self::resolve(experiment, Some(&value), overrides)
    }

    /// Widths to run: `widths` if set, else `[m]`.
    pub fn width_list(&self) -> Vec<usize> {
        if self.widths.is_empty() {
            vec![self.m]
        } else {
            self.widths.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NtkError::Config(msg.into()));
        if self.d == 0 || self.m == 0 || self.widths.contains(&0) {
            return bad("dimensions and widths must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return bad("eps must lie in (0, 1]");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if self.eval_stride == 0 {
            return bad("eval_stride must be positive");
        }
        if self.t_max == Some(0) {
            return bad("t_max must be positive");
        }
        if !(self.eps2 >= 0.0) {
            return bad("eps2 must be nonnegative");
        }
        if !(self.target_error > 0.0 && self.target_error < 1.0) {
            return bad("target_error must lie in (0, 1)");
        }
        Ok(())
    }
}

fn set_key(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    match map.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(NtkError::Config(format!("unknown config key `{key}`"))),
    }
}
