//! Progressive regression over the discretization tree.
//!
//! The classifier at each internal node gives the conditional probability
//! that the label falls in the right child. Multiplying conditionals down
//! every root-to-leaf path yields a categorical distribution over leaf
//! intervals; its expectation (leaf midpoints) is the prediction and its
//! variance the uncertainty. Training maximizes path likelihood, optionally
//! reweighted by inverse reach propensities to undo the selection bias of
//! conditional training, plus expectation/variance regularizers.

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, MultiHeadNet};
use crate::tree::IntervalTree;
use crate::tsl;

/// Categorical distribution over the leaves of one tree for one input.
#[derive(Debug, Clone)]
pub struct LeafDistribution {
    pub leaf_ids: Vec<usize>,
    pub probs: Vec<f64>,
    /// Raw-space interval midpoints, the per-leaf representative values.
    pub midpoints: Vec<f64>,
}

/// Loss components of one batch (or epoch); `total` is the weighted sum.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub var: f64,
    pub tree: f64,
    pub total: f64,
}

/// A sample's target leaf and the binary step labels along its path:
/// `steps_right[j]` is true when the path turns right at level `j`.
#[derive(Debug, Clone)]
pub struct SampleLabel {
    pub y: f64,
    pub leaf_id: usize,
    pub path: Vec<usize>,
    pub steps_right: Vec<bool>,
}

impl SampleLabel {
    pub fn for_value(tree: &IntervalTree, y: f64) -> Result<Self> {
        let leaf_id = tree.leaf_for_value(y)?;
        let path = tree.path_to_leaf(leaf_id)?;
        let steps_right = path
            .windows(2)
            .map(|w| tree.node(w[0]).unwrap().right == Some(w[1]))
            .collect();
        Ok(SampleLabel { y, leaf_id, path, steps_right })
    }

    pub fn depth(&self) -> usize {
        self.path.len() - 1
    }
}

/// Probability of each leaf: the product of conditional step probabilities
/// along its path. Works on full and pruned trees alike; pruned trees read
/// the surviving nodes' heads.
pub fn leaf_distribution(trace: &ForwardTrace, tree: &IntervalTree) -> Result<LeafDistribution> {
    let n_leaves = tree.leaf_ids().len();
    let mut leaf_ids = Vec::with_capacity(n_leaves);
    let mut probs = Vec::with_capacity(n_leaves);
    let mut midpoints = Vec::with_capacity(n_leaves);
    // DFS, left first, so leaves come out in interval order.
    let mut stack = vec![(0usize, 1.0f64)];
    while let Some((id, acc)) = stack.pop() {
        let node = tree
            .node(id)
            .ok_or_else(|| Error::config(format!("tree is missing node {id}")))?;
        if node.is_leaf {
            leaf_ids.push(id);
            probs.push(acc);
            midpoints.push((node.v_lo + node.v_hi) / 2.0);
            continue;
        }
        let q = *trace
            .q
            .get(id)
            .ok_or_else(|| Error::config(format!("no classifier head for internal node {id}")))?;
        stack.push((node.right.unwrap(), acc * q));
        stack.push((node.left.unwrap(), acc * (1.0 - q)));
    }
    Ok(LeafDistribution { leaf_ids, probs, midpoints })
}

/// Expectation of the leaf-midpoint distribution.
pub fn expected_watch_time(dist: &LeafDistribution) -> f64 {
    dist.probs.iter().zip(&dist.midpoints).map(|(p, m)| p * m).sum()
}

/// Variance of the leaf-midpoint distribution, clamped at zero.
pub fn variance(dist: &LeafDistribution) -> f64 {
    let e: f64 = expected_watch_time(dist);
    let e2: f64 = dist.probs.iter().zip(&dist.midpoints).map(|(p, m)| p * m * m).sum();
    (e2 - e * e).max(0.0)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Negative log-likelihood of the labeled path, from logits.
pub fn ce_loss(trace: &ForwardTrace, _tree: &IntervalTree, label: &SampleLabel) -> f64 {
    label
        .path
        .windows(2)
        .zip(&label.steps_right)
        .map(|(w, &right)| {
            let z = trace.classifier_logits[w[0]];
            if right {
                softplus(-z) // -ln sigmoid(z)
            } else {
                softplus(z) // -ln (1 - sigmoid(z))
            }
        })
        .sum()
}

/// Model probability of reaching the `j`-th path node's parent, i.e. the
/// product of the first `j - 1` directional step probabilities, clamped to
/// `[floor, 1]`. The result is treated as a constant downstream: no
/// gradient flows through it.
pub fn propensity(trace: &ForwardTrace, label: &SampleLabel, j: usize, floor: f64) -> f64 {
    debug_assert!(j >= 1 && j <= label.depth());
    let mut prob = 1.0;
    for l in 0..j - 1 {
        let q = trace.q[label.path[l]];
        prob *= if label.steps_right[l] { q } else { 1.0 - q };
    }
    prob.clamp(floor, 1.0)
}

/// Path likelihood with each step reweighted by its inverse reach
/// propensity. Equals [`ce_loss`] whenever every propensity is 1.
pub fn ce_ucl_loss(
    trace: &ForwardTrace,
    _tree: &IntervalTree,
    label: &SampleLabel,
    floor: f64,
) -> f64 {
    let mut loss = 0.0;
    let mut reach = 1.0f64;
    for (j, w) in label.path.windows(2).enumerate() {
        let z = trace.classifier_logits[w[0]];
        let right = label.steps_right[j];
        let term = if right { softplus(-z) } else { softplus(z) };
        loss += term / reach.clamp(floor, 1.0);
        let q = trace.q[w[0]];
        reach *= if right { q } else { 1.0 - q };
    }
    loss
}

/// Squared error between a prediction and its target. Callers pass values
/// on a common scale (training normalizes both by `v_max`).
pub fn reg_loss(prediction: f64, y: f64) -> f64 {
    let d = prediction - y;
    d * d
}

/// Variance component of the objective.
pub fn var_loss(dist: &LeafDistribution) -> f64 {
    variance(dist)
}

/// Per-node statistics of the midpoint distribution used for closed-form
/// expectation/variance gradients. Midpoints are divided by `scale`.
#[derive(Debug, Clone)]
pub struct DistStats {
    /// Expectation of midpoint/scale.
    pub e: f64,
    /// Expectation of (midpoint/scale)^2.
    pub e2: f64,
    /// Conditional expectation of midpoint/scale given reaching each node.
    pub s0: Vec<f64>,
    /// Same for the squared midpoint.
    pub s2: Vec<f64>,
    /// Probability of reaching each node from the root.
    pub reach: Vec<f64>,
}

pub fn dist_stats(trace: &ForwardTrace, tree: &IntervalTree, scale: f64) -> Result<DistStats> {
    let size = tree.nodes().iter().map(|n| n.id).max().unwrap() + 1;
    let mut s0 = vec![0.0; size];
    let mut s2 = vec![0.0; size];
    let mut reach = vec![0.0; size];

    fn up(
        tree: &IntervalTree,
        trace: &ForwardTrace,
        scale: f64,
        id: usize,
        s0: &mut [f64],
        s2: &mut [f64],
    ) -> Result<(f64, f64)> {
        let node = tree.node(id).unwrap();
        let (a, b) = if node.is_leaf {
            let m = (node.v_lo + node.v_hi) / 2.0 / scale;
            (m, m * m)
        } else {
            let q = *trace
                .q
                .get(id)
                .ok_or_else(|| Error::config(format!("no classifier head for node {id}")))?;
            let (l0, l2) = up(tree, trace, scale, node.left.unwrap(), s0, s2)?;
            let (r0, r2) = up(tree, trace, scale, node.right.unwrap(), s0, s2)?;
            ((1.0 - q) * l0 + q * r0, (1.0 - q) * l2 + q * r2)
        };
        s0[id] = a;
        s2[id] = b;
        Ok((a, b))
    }
    let (e, e2) = up(tree, trace, scale, 0, &mut s0, &mut s2)?;

    let mut stack = vec![(0usize, 1.0f64)];
    while let Some((id, r)) = stack.pop() {
        reach[id] = r;
        let node = tree.node(id).unwrap();
        if !node.is_leaf {
            let q = trace.q[id];
            stack.push((node.left.unwrap(), r * (1.0 - q)));
            stack.push((node.right.unwrap(), r * q));
        }
    }
    Ok(DistStats { e, e2, s0, s2, reach })
}

/// Accumulate d(ce)/d(q_i) for the labeled path into `out` (indexed by
/// internal node id), scaled by `weight`. With `ucl_floor` set, each step
/// is divided by its clamped reach propensity, propensities detached.
pub fn ce_grads_into(
    trace: &ForwardTrace,
    label: &SampleLabel,
    ucl_floor: Option<f64>,
    weight: f64,
    out: &mut [f64],
) {
    let mut reach = 1.0f64;
    for (j, w) in label.path.windows(2).enumerate() {
        let q = trace.q[w[0]];
        let right = label.steps_right[j];
        let ips = match ucl_floor {
            Some(floor) => 1.0 / reach.clamp(floor, 1.0),
            None => 1.0,
        };
        let dq = if right { -1.0 / q } else { 1.0 / (1.0 - q) };
        out[w[0]] += weight * ips * dq;
        reach *= if right { q } else { 1.0 - q };
    }
}

/// Accumulate the expectation/variance objective gradients over every
/// internal node: `weight_reg * d(e - y)^2/dq + weight_var * d var/dq`.
/// Returns `(reg, var)` loss values on the `stats` scale.
pub fn reg_var_grads_into(
    trace: &ForwardTrace,
    tree: &IntervalTree,
    stats: &DistStats,
    y: f64,
    weight_reg: f64,
    weight_var: f64,
    out: &mut [f64],
) -> (f64, f64) {
    let e = stats.e;
    let var = (stats.e2 - e * e).max(0.0);
    let reg = (e - y) * (e - y);
    if weight_reg != 0.0 || weight_var != 0.0 {
        for id in tree.internal_ids() {
            let node = tree.node(id).unwrap();
            let (l, r) = (node.left.unwrap(), node.right.unwrap());
            let de = stats.reach[id] * (stats.s0[r] - stats.s0[l]);
            let de2 = stats.reach[id] * (stats.s2[r] - stats.s2[l]);
            let dvar = de2 - 2.0 * e * de;
            let dreg = 2.0 * (e - y) * de;
            out[id] += weight_reg * dreg + weight_var * dvar;
        }
    }
    let _ = trace;
    (reg, var)
}

/// Prediction mode: the fixed global tree or the per-input pruned tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Global,
    Pruned,
}

impl std::str::FromStr for PredictMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PredictMode::Global),
            "pruned" => Ok(PredictMode::Pruned),
            other => Err(Error::config(format!("unknown mode '{other}', want global|pruned"))),
        }
    }
}

/// Expected watch time in raw seconds, on the global tree or on the tree
/// pruned by thresholding the pruning heads.
pub fn predict(
    net: &MultiHeadNet,
    tree: &IntervalTree,
    x: &[f64],
    mode: PredictMode,
    prune_threshold: f64,
) -> Result<f64> {
    let trace = net.forward(x)?;
    predict_from_trace(&trace, tree, mode, prune_threshold)
}

pub fn predict_from_trace(
    trace: &ForwardTrace,
    tree: &IntervalTree,
    mode: PredictMode,
    prune_threshold: f64,
) -> Result<f64> {
    match mode {
        PredictMode::Global => Ok(dist_stats(trace, tree, 1.0)?.e),
        PredictMode::Pruned => {
            let mask = tsl::deterministic_mask(&trace.p, tree, prune_threshold)?;
            let pruned = tree.apply_prune(&mask)?;
            Ok(dist_stats(trace, &pruned, 1.0)?.e)
        }
    }
}

#[cfg(test)]
pub(crate) fn trace_with_q(q: Vec<f64>) -> ForwardTrace {
    let logits = q.iter().map(|&v: &f64| (v / (1.0 - v)).ln()).collect();
    ForwardTrace {
        input: vec![],
        activations: vec![vec![]],
        classifier_logits: logits,
        pruning_logits: vec![],
        q,
        p: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::PruneMask;

    fn depth2_tree() -> IntervalTree {
        let labels: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        IntervalTree::from_labels(&labels, 2).unwrap()
    }

    /// q indexed by internal node id: root 0.6, left child 0.3, right child 0.7.
    fn depth2_trace() -> ForwardTrace {
        trace_with_q(vec![0.6, 0.3, 0.7])
    }

    #[test]
    fn leaf_probabilities_multiply_along_paths() {
        let dist = leaf_distribution(&depth2_trace(), &depth2_tree()).unwrap();
        let expect = [0.28, 0.12, 0.18, 0.42];
        for (p, e) in dist.probs.iter().zip(expect) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(dist.midpoints, vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn uniform_conditionals_give_uniform_leaves() {
        for depth in 1..=5 {
            let labels: Vec<f64> = (1..=64).map(|i| i as f64).collect();
            let tree = IntervalTree::from_labels(&labels, depth).unwrap();
            let trace = trace_with_q(vec![0.5; tree.n_internal()]);
            let dist = leaf_distribution(&trace, &tree).unwrap();
            let want = 0.5f64.powi(depth as i32);
            assert!(dist.probs.iter().all(|p| (p - want).abs() < 1e-15));
        }
    }

    #[test]
    fn pruned_leaf_inherits_reach_probability() {
        let tree = depth2_tree();
        let pruned = tree.apply_prune(&PruneMask::new(vec![true, false])).unwrap();
        let dist = leaf_distribution(&depth2_trace(), &pruned).unwrap();
        let expect = [0.4, 0.18, 0.42];
        for (p, e) in dist.probs.iter().zip(expect) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_head_is_an_error() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![0.6]); // heads for nodes 1, 2 missing
        assert!(leaf_distribution(&trace, &tree).is_err());
    }

    #[test]
    fn expectation_and_variance_closed_forms() {
        let dist = leaf_distribution(&depth2_trace(), &depth2_tree()).unwrap();
        let e = expected_watch_time(&dist);
        assert!((e - 4.48).abs() < 1e-12);
        assert!((variance(&dist) - 6.3696).abs() < 1e-12);

        let uniform = LeafDistribution {
            leaf_ids: vec![3, 4, 5, 6],
            probs: vec![0.25; 4],
            midpoints: vec![1.0, 3.0, 5.0, 7.0],
        };
        assert!((expected_watch_time(&uniform) - 4.0).abs() < 1e-15);
        assert!((variance(&uniform) - 5.0).abs() < 1e-12);

        let onehot = LeafDistribution {
            leaf_ids: vec![3, 4],
            probs: vec![0.0, 1.0],
            midpoints: vec![1.0, 3.0],
        };
        assert_eq!(expected_watch_time(&onehot), 3.0);
        assert_eq!(variance(&onehot), 0.0);
    }

    #[test]
    fn ce_loss_sums_step_logs() {
        // Path that goes right twice with conditionals 0.6 then 0.7.
        let tree = depth2_tree();
        let trace = trace_with_q(vec![0.6, 0.3, 0.7]);
        let label = SampleLabel::for_value(&tree, 7.5).unwrap(); // rightmost leaf
        let loss = ce_loss(&trace, &tree, &label);
        assert!((loss - 0.8675005677047231).abs() < 1e-12);

        // exp(-ce) equals the labeled leaf's probability.
        let dist = leaf_distribution(&trace, &tree).unwrap();
        let idx = dist.leaf_ids.iter().position(|&id| id == label.leaf_id).unwrap();
        assert!(((-loss).exp() - dist.probs[idx]).abs() < 1e-12);
    }

    #[test]
    fn confident_classifier_drives_ce_to_zero() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![1.0 - 1e-12, 0.5, 1.0 - 1e-12]);
        let label = SampleLabel::for_value(&tree, 7.5).unwrap();
        assert!(ce_loss(&trace, &tree, &label) < 1e-10);
    }

    #[test]
    fn uniform_classifier_ce_is_depth_ln2() {
        for depth in 1..=4 {
            let labels: Vec<f64> = (1..=32).map(|i| i as f64).collect();
            let tree = IntervalTree::from_labels(&labels, depth).unwrap();
            let trace = trace_with_q(vec![0.5; tree.n_internal()]);
            let label = SampleLabel::for_value(&tree, 3.0).unwrap();
            let loss = ce_loss(&trace, &tree, &label);
            assert!((loss - depth as f64 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn propensity_is_prefix_product() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![0.6, 0.3, 0.7]);
        let label = SampleLabel::for_value(&tree, 7.5).unwrap(); // right, right
        assert_eq!(propensity(&trace, &label, 1, 0.05), 1.0);
        assert!((propensity(&trace, &label, 2, 0.05) - 0.6).abs() < 1e-15);

        let labels: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let tree3 = IntervalTree::from_labels(&labels, 3).unwrap();
        let trace3 = trace_with_q(vec![0.6, 0.5, 0.7, 0.5, 0.5, 0.5, 0.9]);
        let label3 = SampleLabel::for_value(&tree3, 8.0).unwrap(); // rightmost: 0 -> 2 -> 6 -> 14
        assert!((propensity(&trace3, &label3, 3, 0.05) - 0.42).abs() < 1e-15);
    }

    #[test]
    fn propensity_clamps_at_floor() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![0.01, 0.5, 0.5]);
        let label = SampleLabel::for_value(&tree, 7.5).unwrap();
        assert_eq!(propensity(&trace, &label, 2, 0.05), 0.05);
    }

    #[test]
    fn ucl_loss_reweights_by_propensity() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![0.6, 0.3, 0.7]);
        let label = SampleLabel::for_value(&tree, 7.5).unwrap();
        let loss = ce_ucl_loss(&trace, &tree, &label, 0.05);
        let want = 0.6f64.ln().abs() + 0.7f64.ln().abs() / 0.6;
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 1.1052838636638781).abs() < 1e-12);
    }

    #[test]
    fn ucl_matches_ce_on_depth_one() {
        let labels = [1.0, 2.0, 3.0, 4.0];
        let tree = IntervalTree::from_labels(&labels, 1).unwrap();
        let trace = trace_with_q(vec![0.37]);
        for y in [0.5, 3.5] {
            let label = SampleLabel::for_value(&tree, y).unwrap();
            assert_eq!(
                ce_loss(&trace, &tree, &label),
                ce_ucl_loss(&trace, &tree, &label, 0.05)
            );
        }
    }

    #[test]
    fn ucl_clamp_limits_the_divisor() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![0.01, 0.5, 0.5]);
        let label = SampleLabel::for_value(&tree, 7.5).unwrap();
        let loss = ce_ucl_loss(&trace, &tree, &label, 0.05);
        let want = 0.01f64.ln().abs() + 0.5f64.ln().abs() / 0.05;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn reg_and_var_losses() {
        assert_eq!(reg_loss(3.0, 3.0), 0.0);
        assert!((reg_loss(4.48, 3.48) - 1.0).abs() < 1e-12);
        let onehot = LeafDistribution {
            leaf_ids: vec![3],
            probs: vec![1.0],
            midpoints: vec![2.0],
        };
        assert_eq!(var_loss(&onehot), 0.0);
    }

    #[test]
    fn mass_is_conserved_under_pruning() {
        let tree = depth2_tree();
        let trace = depth2_trace();
        let full = leaf_distribution(&trace, &tree).unwrap();
        let pruned_tree = tree.apply_prune(&PruneMask::new(vec![true, false])).unwrap();
        let pruned = leaf_distribution(&trace, &pruned_tree).unwrap();
        // Collapsed node 1 absorbed leaves 3 and 4.
        let collapsed = pruned.probs[0];
        let absorbed = full.probs[0] + full.probs[1];
        assert!((collapsed - absorbed).abs() < 1e-12);
    }

    #[test]
    fn zero_net_predicts_uniform_mean() {
        let tree = depth2_tree();
        let mut net = MultiHeadNet::init(4, &[8], tree.n_internal(), tree.prunable_count(), 3).unwrap();
        net.assign_flat(&vec![0.0; net.param_count()]).unwrap();
        let x = [0.5, -1.0, 2.0, 0.0];
        let g = predict(&net, &tree, &x, PredictMode::Global, 0.5).unwrap();
        assert!((g - 4.0).abs() < 1e-12);
        // p = 0.5 is not strictly above the 0.5 threshold: nothing pruned.
        let p = predict(&net, &tree, &x, PredictMode::Pruned, 0.5).unwrap();
        assert_eq!(g, p);
    }

    #[test]
    fn one_hot_conditionals_predict_leaf_midpoint() {
        let tree = depth2_tree();
        let trace = trace_with_q(vec![1.0 - 1e-15, 0.5, 1.0 - 1e-15]);
        let e = predict_from_trace(&trace, &tree, PredictMode::Global, 0.5).unwrap();
        assert!((e - 7.0).abs() < 1e-9);
    }

    #[test]
    fn dist_stats_match_leaf_distribution() {
        let tree = depth2_tree();
        let trace = depth2_trace();
        let stats = dist_stats(&trace, &tree, 1.0).unwrap();
        let dist = leaf_distribution(&trace, &tree).unwrap();
        assert!((stats.e - expected_watch_time(&dist)).abs() < 1e-12);
        assert!(((stats.e2 - stats.e * stats.e) - variance(&dist)).abs() < 1e-12);
        assert!((stats.reach[1] - 0.4).abs() < 1e-15);
        assert!((stats.reach[6] - 0.42).abs() < 1e-15);
    }
}
