//! Lossless JSON checkpoints.
//!
//! Stores the run configuration, the tree's leaf boundaries (quantile and
//! raw), flat parameter and optimizer-moment arrays, and the rng state
//! (seed plus completed epochs; per-sample generators derive from those).
//! JSON floats round-trip exactly, so a restored model predicts
//! bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, MultiHeadNet};
use crate::train::Trainer;
use crate::tree::IntervalTree;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub input_dim: usize,
    pub quantile_boundaries: Vec<f64>,
    pub raw_boundaries: Vec<f64>,
    /// Network parameters in [`MultiHeadNet::flatten`] order.
    pub params: Vec<f64>,
    pub adam_t: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Rng state: the master seed plus how many epochs have consumed it.
    pub rng_seed: u64,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, tree: &IntervalTree) -> Self {
        let (quant, raw) = tree.leaf_boundaries();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: trainer.cfg.clone(),
            input_dim: trainer.net.input_dim,
            quantile_boundaries: quant,
            raw_boundaries: raw,
            params: trainer.net.flatten(),
            adam_t: trainer.adam.t,
            adam_m: trainer.adam.m.clone(),
            adam_v: trainer.adam.v.clone(),
            rng_seed: trainer.cfg.seed,
            epochs_done: trainer.epochs_done,
        }
    }

    pub fn restore(&self) -> Result<(Trainer, IntervalTree)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!(
                "checkpoint format {} unsupported (expected {})",
                self.format_version, FORMAT_VERSION
            )));
        }
        let tree = IntervalTree::from_boundaries(
            &self.quantile_boundaries,
            &self.raw_boundaries,
            self.config.tree_depth,
        )?;
        let mut net = MultiHeadNet::init(
            self.input_dim,
            &self.config.trunk_dims,
            tree.n_internal(),
            tree.prunable_count(),
            self.rng_seed,
        )?;
        net.assign_flat(&self.params)?;
        let mut adam = Adam::new(self.config.learning_rate, &net);
        if self.adam_m.len() != adam.m.len() || self.adam_v.len() != adam.v.len() {
            return Err(Error::config("checkpoint moments do not match the network"));
        }
        adam.t = self.adam_t;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok((
            Trainer { net, adam, cfg: self.config.clone(), epochs_done: self.epochs_done },
            tree,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: invalid checkpoint: {e}", path.display())))
    }
}
