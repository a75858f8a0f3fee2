//! Run configuration shared by the library and the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::Dedupe;

/// Weights of the objective components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub reg: f64,
    pub var: f64,
    pub tree: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, reg: 1.0, var: 1.0, tree: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Depth of the global tree.
    pub tree_depth: usize,
    pub trunk_dims: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Lower clamp on reach propensities used as loss divisors.
    pub propensity_floor: f64,
    /// Learn per-sample tree structures (pruning heads + REINFORCE).
    pub enable_tsl: bool,
    /// Reweight path losses by inverse propensity.
    pub enable_ucl: bool,
    /// Inference-time pruning threshold on the pruning probabilities.
    pub prune_threshold: f64,
    pub seed: u64,
    pub dedupe: Dedupe,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tree_depth: 6,
            trunk_dims: vec![64, 32],
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 10,
            loss_weights: LossWeights::default(),
            propensity_floor: 0.05,
            enable_tsl: true,
            enable_ucl: true,
            prune_threshold: 0.5,
            seed: 42,
            dedupe: Dedupe::Error,
            train_data: None,
            test_data: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tree_depth == 0 {
            return Err(Error::config("tree_depth must be >= 1"));
        }
        if self.trunk_dims.is_empty() || self.trunk_dims.contains(&0) {
            return Err(Error::config("trunk_dims must be non-empty and positive"));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 || (self.enable_tsl && self.batch_size < 2) {
            return Err(Error::config(
                "batch_size must be >= 1, and >= 2 with tree structure learning \
                 (the pairwise reward needs batch partners)",
            ));
        }
        let w = &self.loss_weights;
        if [w.ce, w.reg, w.var, w.tree].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(Error::config("propensity_floor must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::config("prune_threshold must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)
            .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
    }

    /// Copy with the two module toggles set; used by ablations.
    pub fn with_toggles(&self, tsl: bool, ucl: bool) -> RunConfig {
        RunConfig { enable_tsl: tsl, enable_ucl: ucl, ..self.clone() }
    }
}
