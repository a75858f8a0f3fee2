//! Batched training of the progressive regression model.
//!
//! Each batch runs three phases: (1) forward passes, label paths, and
//! sampled pruning decisions per sample; (2) self-critical rewards against
//! frozen batch prediction buffers; (3) loss gradients routed through the
//! shared trunk, accumulated in fixed chunk order so parallel and
//! sequential runs produce bit-identical trajectories. One optimizer step
//! per batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{shuffle, Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{backward_into, Adam, ForwardTrace, GradientSet, HeadGrads, MultiHeadNet};
use crate::par;
use crate::tpm::{self, LossBreakdown, PredictMode, SampleLabel};
use crate::tree::IntervalTree;
use crate::tsl::{self, PruneDecision, RewardPair};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for a (seed, stream, index) triple; lets parallel
/// workers draw per-sample randomness without sharing state.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D) ^ splitmix64(index)));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Reserved stream tags for [`derive_rng`].
const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASK: u64 = 2;

struct PerSample {
    trace: ForwardTrace,
    label: SampleLabel,
    /// Expectation over the global tree, labels normalized by v_max.
    pred_global: f64,
    /// Expectation over the sampled pruned tree, same scale.
    pred_pruned: f64,
    decision: Option<PruneDecision>,
}

/// Owns the network and optimizer across epochs.
pub struct Trainer {
    pub net: MultiHeadNet,
    pub adam: Adam,
    pub cfg: RunConfig,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(tree: &IntervalTree, input_dim: usize, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = MultiHeadNet::init(
            input_dim,
            &cfg.trunk_dims,
            tree.n_internal(),
            tree.prunable_count(),
            cfg.seed,
        )?;
        let adam = Adam::new(cfg.learning_rate, &net);
        Ok(Trainer { net, adam, cfg: cfg.clone(), epochs_done: 0 })
    }

    /// One pass over the data in a fresh seeded shuffle; returns one loss
    /// breakdown per batch.
    pub fn train_epoch(&mut self, tree: &IntervalTree, data: &Dataset) -> Result<Vec<LossBreakdown>> {
        if data.is_empty() {
            return Err(Error::data("cannot train on an empty dataset"));
        }
        let epoch = self.epochs_done as u64;
        let seed = self.cfg.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, &mut derive_rng(seed, STREAM_SHUFFLE, epoch));

        let v_max = tree.v_max();
        let w = self.cfg.loss_weights;
        let ucl_floor = self.cfg.enable_ucl.then_some(self.cfg.propensity_floor);
        let tsl_on = self.cfg.enable_tsl;
        let mut history = Vec::new();

        for batch_ids in order.chunks(self.cfg.batch_size) {
            let batch: Vec<(usize, &Sample)> =
                batch_ids.iter().map(|&i| (i, &data.samples[i])).collect();
            let b = batch.len() as f64;

            // Phase 1: forward, labels, sampled pruning decisions.
            let net = &self.net;
            let prepared: Vec<Result<PerSample>> = par::map_indexed(&batch, |_, &(idx, sample)| {
                let trace = net.forward(&sample.x)?;
                let label = SampleLabel::for_value(tree, sample.y)?;
                let pred_global = tpm::dist_stats(&trace, tree, v_max)?.e;
                let (decision, pred_pruned) = if tsl_on {
                    let mut rng = derive_rng(seed, STREAM_MASK.wrapping_add(epoch << 8), idx as u64);
                    let decision = tsl::sample_mask(&trace.p, tree, &mut rng)?;
                    let pruned = tree.apply_prune(&decision.mask)?;
                    let pred = tpm::dist_stats(&trace, &pruned, v_max)?.e;
                    (Some(decision), pred)
                } else {
                    (None, pred_global)
                };
                Ok(PerSample { trace, label, pred_global, pred_pruned, decision })
            });
            let prepared: Vec<PerSample> =
                prepared.into_iter().collect::<Result<Vec<_>>>()?;

            // Phase 2: rewards against frozen batch buffers.
            let rewards: Vec<Option<RewardPair>> = if tsl_on {
                let ys: Vec<f64> = batch.iter().map(|(_, s)| s.y / v_max).collect();
                let pruned: Vec<f64> = prepared.iter().map(|p| p.pred_pruned).collect();
                let global: Vec<f64> = prepared.iter().map(|p| p.pred_global).collect();
                par::map_indexed(&prepared, |i, _| {
                    let others_pruned: Vec<(f64, f64)> = (0..prepared.len())
                        .filter(|&j| j != i)
                        .map(|j| (ys[j], pruned[j]))
                        .collect();
                    let others_global: Vec<(f64, f64)> = (0..prepared.len())
                        .filter(|&j| j != i)
                        .map(|j| (ys[j], global[j]))
                        .collect();
                    let r_pruned = tsl::sample_reward(ys[i], pruned[i], &others_pruned);
                    let r_global = tsl::sample_reward(ys[i], global[i], &others_global);
                    Some(RewardPair::new(r_pruned, r_global))
                })
            } else {
                vec![None; prepared.len()]
            };

            // Phase 3: gradients, folded per fixed-size chunk.
            #[derive(Clone)]
            struct Acc {
                grads: GradientSet,
                ce: f64,
                reg: f64,
                var: f64,
                tree: f64,
            }
            let items: Vec<usize> = (0..prepared.len()).collect();
            let chunks = par::fold_chunks(
                &items,
                par::CHUNK,
                || Acc {
                    grads: GradientSet::zeros_like(net),
                    ce: 0.0,
                    reg: 0.0,
                    var: 0.0,
                    tree: 0.0,
                },
                |mut acc, _, &i| {
                    let ps = &prepared[i];
                    let y_norm = batch[i].1.y / v_max;
                    let mut head_grads = HeadGrads::zeros(net);

                    tpm::ce_grads_into(
                        &ps.trace,
                        &ps.label,
                        ucl_floor,
                        w.ce / b,
                        &mut head_grads.classifier,
                    );
                    acc.ce += match ucl_floor {
                        Some(floor) => tpm::ce_ucl_loss(&ps.trace, tree, &ps.label, floor),
                        None => tpm::ce_loss(&ps.trace, tree, &ps.label),
                    };

                    let stats = tpm::dist_stats(&ps.trace, tree, v_max).expect("trace matches tree");
                    let (reg, var) = tpm::reg_var_grads_into(
                        &ps.trace,
                        tree,
                        &stats,
                        y_norm,
                        w.reg / b,
                        w.var / b,
                        &mut head_grads.classifier,
                    );
                    acc.reg += reg;
                    acc.var += var;

                    if let (Some(decision), Some(reward)) = (&ps.decision, &rewards[i]) {
                        tsl::reinforce_grads_into(
                            decision,
                            reward,
                            w.tree / b,
                            &mut head_grads.pruning,
                        );
                        acc.tree += tsl::reinforce_loss(decision, reward);
                    }

                    backward_into(net, &ps.trace, &head_grads, &mut acc.grads)
                        .expect("head grads match the network");
                    acc
                },
            );

            let mut grads = GradientSet::zeros_like(&self.net);
            let (mut ce, mut reg, mut var, mut tree_loss) = (0.0, 0.0, 0.0, 0.0);
            for c in chunks {
                grads.add_assign(&c.grads);
                ce += c.ce;
                reg += c.reg;
                var += c.var;
                tree_loss += c.tree;
            }
            let breakdown = LossBreakdown {
                ce: ce / b,
                reg: reg / b,
                var: var / b,
                tree: tree_loss / b,
                total: w.ce * ce / b + w.reg * reg / b + w.var * var / b + w.tree * tree_loss / b,
            };
            if !breakdown.total.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {} (ce={}, reg={}, var={}, tree={})",
                    self.epochs_done, breakdown.ce, breakdown.reg, breakdown.var, breakdown.tree
                )));
            }
            self.adam.step(&mut self.net, &grads)?;
            history.push(breakdown);
        }
        self.epochs_done += 1;
        Ok(history)
    }

    /// Run the configured number of epochs; returns per-epoch mean
    /// breakdowns.
    pub fn train(&mut self, tree: &IntervalTree, data: &Dataset) -> Result<Vec<LossBreakdown>> {
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let batches = self.train_epoch(tree, data)?;
            epochs.push(mean_breakdown(&batches));
        }
        Ok(epochs)
    }
}

pub fn mean_breakdown(batches: &[LossBreakdown]) -> LossBreakdown {
    let n = batches.len().max(1) as f64;
    let mut out = LossBreakdown { ce: 0.0, reg: 0.0, var: 0.0, tree: 0.0, total: 0.0 };
    for b in batches {
        out.ce += b.ce / n;
        out.reg += b.reg / n;
        out.var += b.var / n;
        out.tree += b.tree / n;
        out.total += b.total / n;
    }
    out
}

/// Predictions for a whole dataset, raw seconds, in input order.
pub fn predict_batch(
    net: &MultiHeadNet,
    tree: &IntervalTree,
    data: &Dataset,
    mode: PredictMode,
    prune_threshold: f64,
) -> Result<Vec<f64>> {
    par::map_indexed(&data.samples, |_, s| {
        tpm::predict(net, tree, &s.x, mode, prune_threshold)
    })
    .into_iter()
    .collect()
}
