//! Label-space discretization tree.
//!
//! A full binary tree over the watch-time range: leaves are contiguous
//! intervals cut at empirical quantiles of the training labels, internal
//! nodes are unions of their children. Trees are immutable once built;
//! pruning returns a new tree in which each pruned node collapses into a
//! leaf covering its whole interval.
//!
//! Node ids are BFS indices of the *full* tree (root = 0, children of `i`
//! at `2i+1` / `2i+2`) and survive pruning unchanged, so per-node model
//! heads stay addressable on any pruned subtree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node of an [`IntervalTree`]: an interval in quantile space and in
/// raw label space, plus its position in the topology.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub depth: usize,
    pub q_lo: f64,
    pub q_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub is_leaf: bool,
}

/// How to handle tied quantile boundaries when building a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dedupe {
    /// Strictly-equal adjacent boundaries are an error.
    #[default]
    Error,
    /// Break ties by adding `k * 1e-9 * v_max` to the k-th duplicate.
    Jitter,
}

/// Binary pruning actions over the prunable nodes of a tree.
///
/// Prunable nodes are the internal, non-root nodes, indexed in BFS id
/// order. For a full depth-`d` tree there are `2^d - 2` of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub actions: Vec<bool>,
}

impl PruneMask {
    pub fn new(actions: Vec<bool>) -> Self {
        PruneMask { actions }
    }

    pub fn none(len: usize) -> Self {
        PruneMask { actions: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Discretization tree over `[0, v_max]`.
#[derive(Debug, Clone)]
pub struct IntervalTree {
    /// Surviving nodes, ascending by id (BFS order of the originating full tree).
    nodes: Vec<TreeNode>,
    /// id -> position in `nodes`; sized for the originating full tree.
    index: Vec<Option<usize>>,
    /// Depth of the deepest leaf.
    depth: usize,
    /// Right edge of the label range (max training label).
    v_max: f64,
    /// Leaf ids in left-to-right interval order.
    leaf_ids: Vec<usize>,
}

impl IntervalTree {
    /// Build a full binary tree of the given depth from raw labels,
    /// cutting leaves at empirical nearest-rank quantiles.
    pub fn from_labels(labels: &[f64], depth: usize) -> Result<Self> {
        Self::from_labels_with(labels, depth, Dedupe::Error)
    }

    /// As [`from_labels`](Self::from_labels) with an explicit tie policy.
    pub fn from_labels_with(labels: &[f64], depth: usize, dedupe: Dedupe) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::data("cannot build a tree from an empty label set"));
        }
        if depth == 0 {
            return Err(Error::config("tree depth must be >= 1"));
        }
        if labels.iter().any(|y| !y.is_finite() || *y < 0.0) {
            return Err(Error::data("labels must be finite and non-negative"));
        }

        let mut sorted = labels.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let n_leaves = 1usize << depth;
        let v_max = sorted[n - 1];

        // Nearest-rank quantile: value at index ceil(q * n) - 1 of the sorted
        // labels, with the edges pinned to 0 and v_max.
        let mut raw = Vec::with_capacity(n_leaves + 1);
        raw.push(0.0);
        for k in 1..n_leaves {
            let rank = (k * n).div_ceil(n_leaves); // ceil(k/2^d * n), exact in integers
            raw.push(sorted[rank - 1]);
        }
        raw.push(v_max);

        resolve_boundaries(&mut raw, v_max, dedupe)?;

        let quant: Vec<f64> = (0..=n_leaves).map(|k| k as f64 / n_leaves as f64).collect();
        Self::from_boundaries(&quant, &raw, depth)
    }

    /// Rebuild a full tree from explicit leaf boundaries (`2^depth + 1`
    /// values each, strictly increasing, raw starting at 0).
    pub fn from_boundaries(quant: &[f64], raw: &[f64], depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("tree depth must be >= 1"));
        }
        let n_leaves = 1usize << depth;
        if quant.len() != n_leaves + 1 || raw.len() != n_leaves + 1 {
            return Err(Error::config(format!(
                "expected {} boundaries for depth {}, got {} quantile / {} raw",
                n_leaves + 1,
                depth,
                quant.len(),
                raw.len()
            )));
        }
        for w in raw.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::data(format!(
                    "degenerate raw boundaries: {} and {} do not increase strictly",
                    w[0], w[1]
                )));
            }
        }
        let v_max = raw[n_leaves];
        let n_nodes = (1usize << (depth + 1)) - 1;
        let mut nodes = Vec::with_capacity(n_nodes);
        for id in 0..n_nodes {
            let level = (usize::BITS - (id + 1).leading_zeros() - 1) as usize;
            let offset = id - ((1 << level) - 1);
            let span = 1 << (depth - level); // leaf slots covered by this node
            let lo_slot = offset * span;
            let hi_slot = lo_slot + span;
            let is_leaf = level == depth;
            nodes.push(TreeNode {
                id,
                parent: if id == 0 { None } else { Some((id - 1) / 2) },
                left: if is_leaf { None } else { Some(2 * id + 1) },
                right: if is_leaf { None } else { Some(2 * id + 2) },
                depth: level,
                q_lo: quant[lo_slot],
                q_hi: quant[hi_slot],
                v_lo: raw[lo_slot],
                v_hi: raw[hi_slot],
                is_leaf,
            });
        }
        let leaf_ids: Vec<usize> = (n_nodes - n_leaves..n_nodes).collect();
        let index = (0..n_nodes).map(Some).collect();
        Ok(IntervalTree { nodes, index, depth, v_max, leaf_ids })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode> {
        self.index.get(id).copied().flatten().map(|i| &self.nodes[i])
    }

    pub fn root(&self) -> &TreeNode {
        self.node(0).expect("tree always has a root")
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Leaf ids in left-to-right interval order.
    pub fn leaf_ids(&self) -> &[usize] {
        &self.leaf_ids
    }

    /// Ids of internal nodes, ascending.
    pub fn internal_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| !n.is_leaf).map(|n| n.id)
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf).count()
    }

    /// Internal non-root node ids, ascending: the nodes a mask indexes.
    pub fn prunable_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| !n.is_leaf && n.parent.is_some())
            .map(|n| n.id)
            .collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf && n.parent.is_some()).count()
    }

    /// Root-to-leaf node ids for a leaf of this tree.
    pub fn path_to_leaf(&self, leaf_id: usize) -> Result<Vec<usize>> {
        let node = self
            .node(leaf_id)
            .ok_or_else(|| Error::config(format!("no node with id {leaf_id}")))?;
        if !node.is_leaf {
            return Err(Error::config(format!("node {leaf_id} is not a leaf")));
        }
        let mut path = vec![leaf_id];
        let mut cur = node;
        while let Some(pid) = cur.parent {
            path.push(pid);
            cur = self.node(pid).expect("parent of a kept node is kept");
        }
        path.reverse();
        Ok(path)
    }

    /// Leaf whose interval contains `y`. Intervals are `[v_lo, v_hi)` except
    /// the rightmost leaf, which is closed; values beyond `v_max` clamp to it.
    pub fn leaf_for_value(&self, y: f64) -> Result<usize> {
        if !y.is_finite() {
            return Err(Error::numerical(format!("label {y} is not finite")));
        }
        if y < 0.0 {
            return Err(Error::data(format!("negative label {y}")));
        }
        if y >= self.v_max {
            return Ok(*self.leaf_ids.last().unwrap());
        }
        // Leaves are contiguous and sorted; find the first with v_hi > y.
        let pos = self
            .leaf_ids
            .partition_point(|&id| self.node(id).unwrap().v_hi <= y);
        Ok(self.leaf_ids[pos])
    }

    /// Collapse every effectively-pruned node into a leaf and drop its
    /// descendants. An action is effective only when no ancestor is also
    /// pruned (ancestor dominance).
    pub fn apply_prune(&self, mask: &PruneMask) -> Result<IntervalTree> {
        let prunable = self.prunable_ids();
        if mask.len() != prunable.len() {
            return Err(Error::config(format!(
                "mask length {} does not match prunable count {}",
                mask.len(),
                prunable.len()
            )));
        }
        let mut action = vec![false; self.index.len()];
        for (i, &id) in prunable.iter().enumerate() {
            action[id] = mask.actions[i];
        }

        let mut kept: Vec<TreeNode> = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = self.node(id).expect("walk stays inside the tree");
            let mut node = node.clone();
            if action[id] {
                node.left = None;
                node.right = None;
                node.is_leaf = true;
            } else if let (Some(l), Some(r)) = (node.left, node.right) {
                stack.push(r);
                stack.push(l);
            }
            kept.push(node);
        }
        kept.sort_by_key(|n| n.id);

        let mut index = vec![None; self.index.len()];
        for (pos, n) in kept.iter().enumerate() {
            index[n.id] = Some(pos);
        }
        let mut leaf_ids: Vec<usize> = kept.iter().filter(|n| n.is_leaf).map(|n| n.id).collect();
        leaf_ids.sort_by(|&a, &b| {
            let va = kept[index[a].unwrap()].v_lo;
            let vb = kept[index[b].unwrap()].v_lo;
            va.partial_cmp(&vb).unwrap()
        });
        let depth = kept.iter().filter(|n| n.is_leaf).map(|n| n.depth).max().unwrap();
        Ok(IntervalTree { nodes: kept, index, depth, v_max: self.v_max, leaf_ids })
    }

    /// Check the structural invariants; used by tests.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::data(m));
        if self.node(0).is_none() {
            return err("missing root".into());
        }
        let root = self.root();
        if root.q_lo != 0.0 || root.q_hi != 1.0 || root.v_lo != 0.0 || root.v_hi != self.v_max {
            return err("root does not cover [0,1] x [0, v_max]".into());
        }
        for n in &self.nodes {
            if !(n.q_lo < n.q_hi) || !(n.v_lo < n.v_hi) {
                return err(format!("node {} has an empty interval", n.id));
            }
            match (n.left, n.right, n.is_leaf) {
                (None, None, true) => {}
                (Some(l), Some(r), false) => {
                    let (l, r) = (self.node(l).unwrap(), self.node(r).unwrap());
                    if l.q_lo != n.q_lo || r.q_hi != n.q_hi || l.q_hi != r.q_lo {
                        return err(format!("children of {} do not partition it", n.id));
                    }
                    if l.v_lo != n.v_lo || r.v_hi != n.v_hi || l.v_hi != r.v_lo {
                        return err(format!("children of {} do not partition it (raw)", n.id));
                    }
                }
                _ => return err(format!("node {} is neither leaf nor full internal", n.id)),
            }
        }
        let mut edge = 0.0;
        for &id in &self.leaf_ids {
            let leaf = self.node(id).unwrap();
            if leaf.v_lo != edge {
                return err(format!("leaf {} leaves a gap at {}", id, edge));
            }
            edge = leaf.v_hi;
        }
        if edge != self.v_max {
            return err(format!("leaves stop at {} instead of v_max {}", edge, self.v_max));
        }
        Ok(())
    }

    /// Quantile- and raw-space leaf boundaries, left to right
    /// (`leaves + 1` values each). Only meaningful for full trees.
    pub fn leaf_boundaries(&self) -> (Vec<f64>, Vec<f64>) {
        let mut quant = Vec::with_capacity(self.leaf_ids.len() + 1);
        let mut raw = Vec::with_capacity(self.leaf_ids.len() + 1);
        quant.push(0.0);
        raw.push(0.0);
        for &id in &self.leaf_ids {
            let n = self.node(id).unwrap();
            quant.push(n.q_hi);
            raw.push(n.v_hi);
        }
        (quant, raw)
    }
}

fn resolve_boundaries(raw: &mut [f64], v_max: f64, dedupe: Dedupe) -> Result<()> {
    let interior_ok = raw.windows(2).all(|w| w[0] < w[1]);
    if interior_ok {
        return Ok(());
    }
    match dedupe {
        Dedupe::Error => Err(Error::data(
            "degenerate quantiles: adjacent boundaries are equal (heavy label ties); \
             rerun with jitter dedupe to break ties"
                .to_string(),
        )),
        Dedupe::Jitter => {
            let eps = 1e-9 * v_max;
            if eps <= 0.0 {
                return Err(Error::data("all labels equal; no interval structure exists"));
            }
            // The k-th duplicate in a run lands k*eps above the first.
            for i in 1..raw.len() - 1 {
                if raw[i] <= raw[i - 1] {
                    raw[i] = raw[i - 1] + eps;
                }
            }
            if raw[raw.len() - 2] >= v_max {
                return Err(Error::data(
                    "degenerate quantiles persist after jitter: ties crowd the right edge",
                ));
            }
            Ok(())
        }
    }
}

/// Number of distinct subtrees reachable by pruning a full tree of the
/// given depth: `f(0) = 1`, `f(d) = 1 + f(d-1)^2`.
///
/// Panics on overflow (depth > 7).
pub fn count_valid_subtrees(depth: usize) -> u128 {
    let mut f: u128 = 1;
    for _ in 0..depth {
        f = f.checked_mul(f).and_then(|s| s.checked_add(1)).expect("subtree count overflow");
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn tree_1_to_8(depth: usize) -> IntervalTree {
        let labels: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        IntervalTree::from_labels(&labels, depth).unwrap()
    }

    #[test]
    fn quantile_cuts_on_1_to_8() {
        let t = tree_1_to_8(2);
        let leaves: Vec<(f64, f64)> =
            t.leaf_ids().iter().map(|&id| (t.node(id).unwrap().v_lo, t.node(id).unwrap().v_hi)).collect();
        assert_eq!(leaves, vec![(0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.0)]);
        let mids: Vec<f64> = leaves.iter().map(|(lo, hi)| (lo + hi) / 2.0).collect();
        assert_eq!(mids, vec![1.0, 3.0, 5.0, 7.0]);
        t.validate().unwrap();
    }

    #[test]
    fn degenerate_labels_error() {
        let err = IntervalTree::from_labels(&[5.0, 5.0, 5.0, 5.0], 1).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        // Jitter cannot save a point mass at the right edge either.
        assert!(IntervalTree::from_labels_with(&[5.0; 4], 1, Dedupe::Jitter).is_err());
    }

    #[test]
    fn jitter_resolves_interior_ties() {
        let labels = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0];
        assert!(IntervalTree::from_labels(&labels, 2).is_err());
        let t = IntervalTree::from_labels_with(&labels, 2, Dedupe::Jitter).unwrap();
        t.validate().unwrap();
        assert_eq!(t.leaf_ids().len(), 4);
    }

    #[test]
    fn node_counts_depth_3() {
        let t = tree_1_to_8(3);
        assert_eq!(t.nodes().len(), 15);
        assert_eq!(t.leaf_ids().len(), 8);
        assert_eq!(t.prunable_count(), 6);
    }

    #[test]
    fn paths_use_bfs_ids() {
        let t = tree_1_to_8(2);
        assert_eq!(t.path_to_leaf(6).unwrap(), vec![0, 2, 6]);
        let t1 = tree_1_to_8(1);
        assert_eq!(t1.path_to_leaf(1).unwrap(), vec![0, 1]);
        for &leaf in t.leaf_ids() {
            assert_eq!(t.path_to_leaf(leaf).unwrap()[0], 0);
        }
        assert!(t.path_to_leaf(0).is_err()); // root is not a leaf
    }

    #[test]
    fn leaf_lookup_conventions() {
        let t = tree_1_to_8(2); // leaves [0,2) [2,4) [4,6) [6,8]
        assert_eq!(t.leaf_for_value(4.0).unwrap(), t.leaf_ids()[2]);
        assert_eq!(t.leaf_for_value(8.0).unwrap(), *t.leaf_ids().last().unwrap());
        assert_eq!(t.leaf_for_value(100.0).unwrap(), *t.leaf_ids().last().unwrap());
        assert_eq!(t.leaf_for_value(0.0).unwrap(), t.leaf_ids()[0]);
        assert!(t.leaf_for_value(-1.0).is_err());
    }

    #[test]
    fn prune_collapses_node_into_leaf() {
        let t = tree_1_to_8(2);
        let pruned = t.apply_prune(&PruneMask::new(vec![true, false])).unwrap();
        assert_eq!(pruned.leaf_ids().to_vec(), vec![1, 5, 6]);
        pruned.validate().unwrap();
        let collapsed = pruned.node(1).unwrap();
        assert!(collapsed.is_leaf);
        assert_eq!((collapsed.v_lo, collapsed.v_hi), (0.0, 4.0));
    }

    #[test]
    fn empty_mask_is_identity() {
        let t = tree_1_to_8(3);
        let same = t.apply_prune(&PruneMask::none(6)).unwrap();
        assert_eq!(same.leaf_ids(), t.leaf_ids());
        assert_eq!(same.nodes().len(), t.nodes().len());
    }

    #[test]
    fn ancestor_dominates_descendant() {
        let t = tree_1_to_8(3);
        // prunable ids for depth 3: [1, 2, 3, 4, 5, 6]
        let ancestor_only = t.apply_prune(&PruneMask::new(vec![true, false, false, false, false, false])).unwrap();
        let both = t.apply_prune(&PruneMask::new(vec![true, false, true, false, false, false])).unwrap();
        assert_eq!(ancestor_only.leaf_ids(), both.leaf_ids());
    }

    #[test]
    fn mask_length_mismatch_errors() {
        let t = tree_1_to_8(2);
        assert!(t.apply_prune(&PruneMask::none(3)).is_err());
    }

    #[test]
    fn subtree_count_recurrence() {
        assert_eq!(count_valid_subtrees(0), 1);
        assert_eq!(count_valid_subtrees(1), 2);
        assert_eq!(count_valid_subtrees(2), 5);
        assert_eq!(count_valid_subtrees(3), 26);
        assert_eq!(count_valid_subtrees(4), 677);
    }

    /// Count the distinct leaf partitions a full tree can be pruned into:
    /// every ancestor-dominant mask through `apply_prune`, plus the one
    /// collapse masks cannot express (the root itself, which the mask
    /// excludes by definition).
    pub(crate) fn enumerate_distinct_partitions(depth: usize) -> usize {
        let labels: Vec<f64> = (1..=64).map(|i| i as f64).collect();
        let t = IntervalTree::from_labels(&labels, depth).unwrap();
        let k = t.prunable_count();
        let mut seen = HashSet::new();
        for bits in 0u32..(1 << k) {
            let mask = PruneMask::new((0..k).map(|i| bits >> i & 1 == 1).collect());
            let pruned = t.apply_prune(&mask).unwrap();
            seen.insert(pruned.leaf_ids().to_vec());
        }
        seen.insert(vec![0]); // root collapsed to a single leaf
        seen.len()
    }

    #[test]
    fn exhaustive_masks_match_recurrence() {
        for d in 1..=3 {
            assert_eq!(enumerate_distinct_partitions(d) as u128, count_valid_subtrees(d));
        }
    }

    proptest! {
        #[test]
        fn built_trees_partition_the_range(
            n in 8usize..200,
            depth in 1usize..5,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 100.0).collect();
            if let Ok(t) = IntervalTree::from_labels(&labels, depth) {
                t.validate().unwrap();
                prop_assert_eq!(t.nodes().len(), (1 << (depth + 1)) - 1);
                prop_assert_eq!(t.leaf_ids().len(), 1 << depth);
            }
        }

        #[test]
        fn pruned_trees_stay_valid_and_monotone(
            depth in 1usize..5,
            bits in 0u64..4096,
        ) {
            let labels: Vec<f64> = (1..=64).map(|i| i as f64).collect();
            let t = IntervalTree::from_labels(&labels, depth).unwrap();
            let k = t.prunable_count();
            let mask = PruneMask::new((0..k).map(|i| bits >> (i % 12) & 1 == 1).collect());
            let pruned = t.apply_prune(&mask).unwrap();
            pruned.validate().unwrap();
            prop_assert!(pruned.leaf_ids().len() <= t.leaf_ids().len());

            // Re-pruning with the mask restricted to surviving prunable nodes
            // is a no-op: every pruned node already became a leaf.
            let survivors = pruned.prunable_ids();
            let orig = t.prunable_ids();
            let restricted = PruneMask::new(
                survivors
                    .iter()
                    .map(|id| {
                        let pos = orig.iter().position(|o| o == id).unwrap();
                        mask.actions[pos]
                    })
                    .collect(),
            );
            let again = pruned.apply_prune(&restricted).unwrap();
            prop_assert_eq!(again.leaf_ids(), pruned.leaf_ids());
        }

        #[test]
        fn lookup_then_path_covers_value(y in 0.0f64..120.0) {
            let labels: Vec<f64> = (1..=100).map(|i| i as f64).collect();
            let t = IntervalTree::from_labels(&labels, 3).unwrap();
            let leaf = t.leaf_for_value(y).unwrap();
            let clamped = y.min(t.v_max());
            for id in t.path_to_leaf(leaf).unwrap() {
                let n = t.node(id).unwrap();
                prop_assert!(n.v_lo <= clamped && (clamped < n.v_hi || n.v_hi == t.v_max()));
            }
        }
    }
}
