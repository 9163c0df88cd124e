//! Run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, ScheduleKind};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::graph::GraphSpec;
use crate::real::Real;
use crate::resource::ResourceKind;
use crate::rho::RhoSolverConfig;
use crate::solver::SolverKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Inline network description; exclusive with `graph_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    /// Network description file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_path: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub rho: RhoSolverConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub resource: ResourceKind,
    /// Weight-only iterations with all gates open before pruning starts.
    #[serde(default)]
    pub pretrain: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Write a snapshot every this many iterations (0: only at the end).
    #[serde(default)]
    pub snapshot_interval: u64,
    /// Write the per-iteration controller trace.
    #[serde(default = "yes")]
    pub trace: bool,
    /// Hard cap on pruning iterations across all phases.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(rename = "phase")]
    pub phases: Vec<PhaseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_batch() -> usize {
    32
}
fn default_eval_batch() -> usize {
    250
}
fn default_eval_interval() -> u64 {
    200
}
fn default_max_iterations() -> u64 {
    1_000_000
}
fn yes() -> bool {
    true
}

/// One stage of a run. A phase ends when any of its stop conditions holds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Stop after this many iterations in the phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    /// Stop once `F <= f_below * F(rho^0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_below: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleKind>,
    /// Weight learning rate for this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<Real>,
    /// Schedule asymptote as a fraction of `F(rho^0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0_fraction: Option<Real>,
    /// Set the asymptote to the value of `F` when the phase starts.
    #[serde(default)]
    pub freeze: bool,
    /// Keep the gates fixed (`alpha = 0`) and only fine-tune weights.
    #[serde(default)]
    pub fixed_gates: bool,
}

/// Settings for comparing pruning speeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub mu: Vec<Real>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Target as a fraction of `F(rho^0)`.
    pub target: Real,
    /// Half-width of the accuracy window, relative to the target.
    #[serde(default = "default_window")]
    pub window: Real,
    /// Pretrain once with this seed and start every run from those weights.
    /// Otherwise each seed pretrains its own network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_seed: Option<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_window() -> Real {
    0.04
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.graph, &self.graph_path) {
            (Some(_), Some(_)) => return Err(Error::Config("give either `graph` or `graph_path`, not both".into())),
            (None, None) => return Err(Error::Config("missing `graph` or `graph_path`".into())),
            _ => {}
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.phases.is_empty() {
            return Err(Error::Config("at least one [[phase]] is required".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.iterations.is_none() && p.f_below.is_none() {
                return Err(Error::Config(format!("phase {i} has no stop condition")));
            }
            if p.f_below.is_some_and(|f| !(f > 0.0 && f <= 1.0)) {
                return Err(Error::Config(format!("phase {i}: f_below must be in (0, 1]")));
            }
            if p.f0_fraction.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
                return Err(Error::Config(format!("phase {i}: f0_fraction must be in [0, 1]")));
            }
            if p.freeze && p.f0_fraction.is_some() {
                return Err(Error::Config(format!("phase {i}: `freeze` and `f0_fraction` conflict")));
            }
            if p.lr.is_some_and(|lr| !(lr > 0.0)) {
                return Err(Error::Config(format!("phase {i}: lr must be positive")));
            }
        }
        if let Some(s) = &self.sweep {
            if s.mu.len() < 2 {
                return Err(Error::Config("sweep needs at least two mu values".into()));
            }
            if s.seeds.is_empty() || !(s.target > 0.0 && s.target < 1.0) || !(s.window > 0.0 && s.window < 1.0) {
                return Err(Error::Config("sweep needs seeds, a target in (0, 1) and a window in (0, 1)".into()));
            }
        }
        self.gate.validate()?;
        self.rho.validate()?;
        self.controller.validate()?;
        if self.gate.rho_max != self.rho.rho_max {
            return Err(Error::Config(format!(
                "gate.rho_max ({}) and rho.rho_max ({}) differ",
                self.gate.rho_max, self.rho.rho_max
            )));
        }
        Ok(())
    }

    pub fn graph_spec(&self) -> Result<GraphSpec> {
        match (&self.graph, &self.graph_path) {
            (Some(g), _) => Ok(g.clone()),
            (None, Some(p)) => GraphSpec::load(&self.base_dir.join(p)),
            (None, None) => Err(Error::Config("missing `graph` or `graph_path`".into())),
        }
    }

    pub fn out_dir(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| self.base_dir.join(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
        seed = 3
        graph_path = "net.toml"
        eval_interval = 50

        [solver]
        kind = "sgd"
        lr = 0.05
        momentum = 0.9

        [controller]
        mu = 1e-4
        r = 2000

        [[phase]]
        f_below = 0.5

        [[phase]]
        iterations = 100
        freeze = true
        lr = 0.01
    "#;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = RunConfig::from_toml(DOC, Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.controller.mu, 1e-4);
        assert_eq!(cfg.controller.beta, 0.05);
        assert_eq!(cfg.phases.len(), 2);
        assert_eq!(cfg.batch_size, 32);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/tmp/x")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_settings() {
        let bad = [
            DOC.replace("eval_interval = 50", "eval_interval = 0"),
            DOC.replace("f_below = 0.5", "name = \"open\""),
            DOC.replace("graph_path = \"net.toml\"", ""),
            DOC.replace("mu = 1e-4", "mu = -1.0"),
            DOC.replace("seed = 3", "seed = 3\nunknown = 1"),
        ];
        for text in bad {
            assert!(RunConfig::from_toml(&text, Path::new(".")).is_err(), "{text}");
        }
    }
}
