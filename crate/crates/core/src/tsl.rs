//! Per-sample tree structure learning.
//!
//! The pruning heads emit a probability per prunable node; during training
//! a mask is drawn from independent Bernoullis and scored with a
//! self-critical reward (pruned-tree reward minus global-tree reward), and
//! the heads are updated with the REINFORCE estimator. At inference the
//! mask is the Bernoulli mode: prune where the probability clears a
//! threshold.
//!
//! An action dominated by a pruned ancestor cannot change the realized
//! tree, so dominated entries carry no log-probability and no gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tree::{IntervalTree, PruneMask};

/// A sampled pruning decision: probabilities, raw actions, which actions
/// were effective (not dominated), and the log-probability of the
/// effective actions.
#[derive(Debug, Clone)]
pub struct PruneDecision {
    pub p: Vec<f64>,
    pub mask: PruneMask,
    pub effective: Vec<bool>,
    pub logp: f64,
}

/// Per-sample rewards under the pruned and the global tree.
#[derive(Debug, Clone, Copy)]
pub struct RewardPair {
    pub r_pruned: f64,
    pub r_global: f64,
    pub advantage: f64,
}

impl RewardPair {
    pub fn new(r_pruned: f64, r_global: f64) -> Self {
        RewardPair { r_pruned, r_global, advantage: r_pruned - r_global }
    }
}

fn check_probs(p: &[f64], tree: &IntervalTree) -> Result<Vec<usize>> {
    let prunable = tree.prunable_ids();
    if p.len() != prunable.len() {
        return Err(Error::config(format!(
            "pruning probabilities cover {} nodes, tree has {} prunable",
            p.len(),
            prunable.len()
        )));
    }
    if p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::numerical("pruning probabilities must lie strictly in (0,1)"));
    }
    Ok(prunable)
}

/// Mark entries whose node has a pruned ancestor. `action_by_id` must be
/// addressable by node id.
fn effective_flags(
    tree: &IntervalTree,
    prunable: &[usize],
    action_by_id: &[bool],
) -> Vec<bool> {
    prunable
        .iter()
        .map(|&id| {
            let mut cur = tree.node(id).unwrap().parent;
            while let Some(pid) = cur {
                if action_by_id[pid] {
                    return false;
                }
                cur = tree.node(pid).unwrap().parent;
            }
            true
        })
        .collect()
}

/// Draw one mask from independent Bernoullis. Dominated entries keep their
/// sampled value in the mask but are excluded from `logp`.
pub fn sample_mask(p: &[f64], tree: &IntervalTree, rng: &mut impl Rng) -> Result<PruneDecision> {
    let prunable = check_probs(p, tree)?;
    let actions: Vec<bool> = p.iter().map(|&pi| rng.random::<f64>() < pi).collect();

    let max_id = tree.nodes().iter().map(|n| n.id).max().unwrap();
    let mut action_by_id = vec![false; max_id + 1];
    for (i, &id) in prunable.iter().enumerate() {
        action_by_id[id] = actions[i];
    }
    let effective = effective_flags(tree, &prunable, &action_by_id);
    let logp = actions
        .iter()
        .zip(p)
        .zip(&effective)
        .filter(|(_, &eff)| eff)
        .map(|((&a, &pi), _)| if a { pi.ln() } else { (1.0 - pi).ln() })
        .sum();
    Ok(PruneDecision { p: p.to_vec(), mask: PruneMask::new(actions), effective, logp })
}

/// The Bernoulli mode with ancestor dominance: prune where `p > threshold`,
/// with dominated actions zeroed out.
pub fn deterministic_mask(p: &[f64], tree: &IntervalTree, threshold: f64) -> Result<PruneMask> {
    let prunable = check_probs(p, tree)?;
    let raw: Vec<bool> = p.iter().map(|&pi| pi > threshold).collect();
    let max_id = tree.nodes().iter().map(|n| n.id).max().unwrap();
    let mut action_by_id = vec![false; max_id + 1];
    for (i, &id) in prunable.iter().enumerate() {
        action_by_id[id] = raw[i];
    }
    let effective = effective_flags(tree, &prunable, &action_by_id);
    Ok(PruneMask::new(raw.iter().zip(&effective).map(|(&a, &e)| a && e).collect()))
}

/// Reward of one sample against the rest of its batch: the fraction of
/// strictly concordant (prediction, label) orderings minus the sample's
/// squared error. Labels and predictions arrive normalized. A singleton
/// batch scores the concordance term as 0.5.
pub fn sample_reward(y: f64, y_hat: f64, batch_pairs: &[(f64, f64)]) -> f64 {
    let concordance = if batch_pairs.is_empty() {
        0.5
    } else {
        let hits = batch_pairs
            .iter()
            .filter(|(yj, yhj)| (y_hat - yhj) * (y - yj) > 0.0)
            .count();
        hits as f64 / batch_pairs.len() as f64
    };
    let err = y_hat - y;
    concordance - err * err
}

/// REINFORCE surrogate: `-advantage * logp`, advantage held constant. Its
/// gradient in each effective `p_i` is
/// `-advantage * (a_i / p_i - (1 - a_i) / (1 - p_i))`.
pub fn reinforce_loss(decision: &PruneDecision, rewards: &RewardPair) -> f64 {
    -rewards.advantage * decision.logp
}

/// Accumulate the REINFORCE gradient with respect to the pruning-head
/// outputs into `out` (indexed like `decision.p`), scaled by `weight`.
pub fn reinforce_grads_into(
    decision: &PruneDecision,
    rewards: &RewardPair,
    weight: f64,
    out: &mut [f64],
) {
    let adv = rewards.advantage;
    if adv == 0.0 {
        return;
    }
    for i in 0..decision.p.len() {
        if !decision.effective[i] {
            continue;
        }
        let pi = decision.p[i];
        let dlogp = if decision.mask.actions[i] { 1.0 / pi } else { -1.0 / (1.0 - pi) };
        out[i] += weight * (-adv) * dlogp;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(depth: usize) -> IntervalTree {
        let labels: Vec<f64> = (1..=64).map(|i| i as f64).collect();
        IntervalTree::from_labels(&labels, depth).unwrap()
    }

    #[test]
    fn extreme_probabilities_fix_the_sample() {
        let t = tree(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = sample_mask(&[1.0 - 1e-15, 1e-15], &t, &mut rng).unwrap();
        assert_eq!(d.mask.actions, vec![true, false]);
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let t = tree(3);
        let p = vec![0.3, 0.7, 0.5, 0.2, 0.9, 0.4];
        let a = sample_mask(&p, &t, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_mask(&p, &t, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.logp, b.logp);
    }

    #[test]
    fn sample_frequency_tracks_probability() {
        let t = tree(2);
        let p = [0.25, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            let d = sample_mask(&p, &t, &mut rng).unwrap();
            for (c, &a) in counts.iter_mut().zip(&d.mask.actions) {
                *c += a as usize;
            }
        }
        for (c, want) in counts.iter().zip(p) {
            let freq = *c as f64 / n as f64;
            assert!((freq - want).abs() < 0.01, "{freq} vs {want}");
        }
    }

    #[test]
    fn pruned_ancestor_silences_descendants() {
        let t = tree(3); // prunable ids 1..=6; children of 1 are 3, 4
        let p = vec![1.0 - 1e-15, 1e-15, 1.0 - 1e-15, 1e-15, 1e-15, 1e-15];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = sample_mask(&p, &t, &mut rng).unwrap();
        assert!(d.mask.actions[0]); // node 1 pruned
        assert!(!d.effective[2], "node 3 sits under pruned node 1");
        assert!(!d.effective[3], "node 4 sits under pruned node 1");
        assert!(d.effective[0] && d.effective[1]);
        // logp only counts effective entries.
        let direct: f64 = d
            .mask
            .actions
            .iter()
            .zip(&p)
            .zip(&d.effective)
            .filter(|(_, &e)| e)
            .map(|((&a, &pi), _)| if a { pi.ln() } else { (1.0 - pi).ln() })
            .sum();
        assert!((d.logp - direct).abs() < 1e-12);
        assert!(d.logp <= 0.0);
    }

    #[test]
    fn threshold_mask_rules() {
        let t = tree(2);
        let m = deterministic_mask(&[0.7, 0.3], &t, 0.5).unwrap();
        assert_eq!(m.actions, vec![true, false]);
        // Exactly 0.5 does not clear the strict threshold.
        let m = deterministic_mask(&[0.5, 0.5], &t, 0.5).unwrap();
        assert_eq!(m.actions, vec![false, false]);
    }

    #[test]
    fn threshold_mask_applies_dominance() {
        let t = tree(3);
        let m = deterministic_mask(&[0.9, 0.1, 0.9, 0.1, 0.1, 0.1], &t, 0.5).unwrap();
        assert!(m.actions[0]);
        assert!(!m.actions[2], "child of a pruned ancestor is zeroed");
    }

    #[test]
    fn deterministic_mask_is_sampling_fixed_point_at_extremes() {
        let t = tree(3);
        let p = vec![1.0 - 1e-15, 1e-15, 1e-15, 1e-15, 1.0 - 1e-15, 1e-15];
        let det = deterministic_mask(&p, &t, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = sample_mask(&p, &t, &mut rng).unwrap();
            // Compare realized trees: dominated raw draws do not matter.
            let a = t.apply_prune(&s.mask).unwrap();
            let b = t.apply_prune(&det).unwrap();
            assert_eq!(a.leaf_ids(), b.leaf_ids());
        }
    }

    #[test]
    fn reward_components() {
        // Perfect ordering and exact predictions.
        let r = sample_reward(0.2, 0.2, &[(0.4, 0.4), (0.6, 0.6)]);
        assert_eq!(r, 1.0);
        // Misordered pair plus squared error.
        let r = sample_reward(0.2, 0.3, &[(0.4, 0.1)]);
        assert!((r - (0.0 - 0.01)).abs() < 1e-15);
        // Singleton convention.
        assert_eq!(sample_reward(0.3, 0.3, &[]), 0.5);
    }

    #[test]
    fn reinforce_closed_form() {
        let decision = PruneDecision {
            p: vec![0.8],
            mask: PruneMask::new(vec![true]),
            effective: vec![true],
            logp: 0.8f64.ln(),
        };
        let rewards = RewardPair::new(0.6, 0.5);
        let loss = reinforce_loss(&decision, &rewards);
        assert!((loss - 0.022314355131420976).abs() < 1e-15);
        let mut g = vec![0.0];
        reinforce_grads_into(&decision, &rewards, 1.0, &mut g);
        assert!((g[0] - (-0.125)).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_means_zero_update() {
        let decision = PruneDecision {
            p: vec![0.3, 0.6],
            mask: PruneMask::new(vec![true, false]),
            effective: vec![true, true],
            logp: 0.3f64.ln() + 0.4f64.ln(),
        };
        let rewards = RewardPair::new(0.7, 0.7);
        assert_eq!(reinforce_loss(&decision, &rewards), 0.0);
        let mut g = vec![0.0, 0.0];
        reinforce_grads_into(&decision, &rewards, 1.0, &mut g);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn advantage_sign_steers_probability() {
        // One effective node: positive advantage must push p up for a = 1,
        // i.e. the loss gradient in p is negative (and vice versa).
        let mk = |a: bool, p: f64| PruneDecision {
            p: vec![p],
            mask: PruneMask::new(vec![a]),
            effective: vec![true],
            logp: if a { p.ln() } else { (1.0 - p).ln() },
        };
        let mut g = vec![0.0];
        reinforce_grads_into(&mk(true, 0.4), &RewardPair::new(1.0, 0.0), 1.0, &mut g);
        assert!(g[0] < 0.0);
        let mut g = vec![0.0];
        reinforce_grads_into(&mk(true, 0.4), &RewardPair::new(0.0, 1.0), 1.0, &mut g);
        assert!(g[0] > 0.0);
        let mut g = vec![0.0];
        reinforce_grads_into(&mk(false, 0.4), &RewardPair::new(1.0, 0.0), 1.0, &mut g);
        assert!(g[0] > 0.0, "rewarding a no-prune draw pushes p down");
    }
}
