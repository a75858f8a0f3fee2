//! Evaluation metrics and calibration diagnostics.
//!
//! Pair-based metrics count exact integers (parallel chunked counting is
//! safe), so results never depend on accumulation order. XAUC excludes
//! label-tied pairs entirely and gives no credit for prediction ties;
//! binary AUC is the rank statistic with half credit for score ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ForwardTrace;
use crate::par;
use crate::tpm;
use crate::tree::IntervalTree;

/// Evaluation summary serialized into CLI reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub xauc: f64,
    /// Mean AUC over internal-node classifiers whose evaluation slice has
    /// both classes; `None` when no node qualifies.
    pub avg_classifier_auc: Option<f64>,
    /// Internal nodes skipped because their slice was single-class.
    pub skipped_nodes: usize,
    /// Predicted leaf mass over empirical leaf count, per leaf
    /// (left-to-right); `None` for empty leaves. Ideal value 1.0.
    pub prior_posterior_ratios: Vec<Option<f64>>,
    /// Mean |ratio - 1| over non-empty leaves.
    pub mean_abs_ratio_dev: Option<f64>,
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::config(format!(
            "mae needs equal non-empty slices, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Fraction of label-distinct pairs whose predicted ordering matches the
/// label ordering. Prediction ties earn nothing.
pub fn xauc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.len() < 2 {
        return Err(Error::config("xauc needs at least two aligned samples"));
    }
    let n = y.len();
    let counts = par::fold_chunks(
        &(0..n).collect::<Vec<_>>(),
        256,
        || (0u64, 0u64),
        |(mut conc, mut valid), _, &i| {
            for j in i + 1..n {
                if y[i] == y[j] {
                    continue;
                }
                valid += 1;
                if (y_hat[i] - y_hat[j]) * (y[i] - y[j]) > 0.0 {
                    conc += 1;
                }
            }
            (conc, valid)
        },
    );
    let (conc, valid) = counts.iter().fold((0u64, 0u64), |(a, b), (c, v)| (a + c, b + v));
    if valid == 0 {
        return Err(Error::data("xauc undefined: all labels are tied"));
    }
    Ok(conc as f64 / valid as f64)
}

/// Rank-based AUC with half credit for tied scores.
pub fn binary_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(Error::config("binary_auc needs aligned non-empty slices"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("binary_auc undefined on single-class input"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks across tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-leaf ratio of predicted leaf mass to empirical leaf count over an
/// evaluation set, plus the mean absolute deviation from the ideal 1.0.
///
/// `traces` must align with `ys` and come from the same network.
pub fn prior_posterior_ratio(
    traces: &[ForwardTrace],
    tree: &IntervalTree,
    ys: &[f64],
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if ys.is_empty() || traces.len() != ys.len() {
        return Err(Error::config("ratio diagnostic needs a non-empty aligned eval set"));
    }
    let n_leaves = tree.leaf_ids().len();
    let sums = par::fold_chunks(
        traces,
        par::CHUNK,
        || (vec![0.0f64; n_leaves], vec![0u64; n_leaves]),
        |(mut mass, mut count), i, trace| {
            let dist = tpm::leaf_distribution(trace, tree).expect("trace matches tree");
            for (k, p) in dist.probs.iter().enumerate() {
                mass[k] += p;
            }
            let leaf = tree.leaf_for_value(ys[i]).expect("labels validated on load");
            let k = tree.leaf_ids().iter().position(|&id| id == leaf).unwrap();
            count[k] += 1;
            (mass, count)
        },
    );
    let mut mass = vec![0.0f64; n_leaves];
    let mut count = vec![0u64; n_leaves];
    for (m, c) in sums {
        for k in 0..n_leaves {
            mass[k] += m[k];
            count[k] += c[k];
        }
    }
    let ratios: Vec<Option<f64>> = mass
        .iter()
        .zip(&count)
        .map(|(m, &c)| if c == 0 { None } else { Some(m / c as f64) })
        .collect();
    let devs: Vec<f64> = ratios.iter().flatten().map(|r| (r - 1.0).abs()).collect();
    let mean_dev = if devs.is_empty() {
        None
    } else {
        Some(devs.iter().sum::<f64>() / devs.len() as f64)
    };
    Ok((ratios, mean_dev))
}

/// Mean AUC of the per-node classifiers, each evaluated on the samples
/// whose label falls inside that node's interval. Single-class nodes are
/// skipped and counted.
pub fn avg_classifier_auc(
    traces: &[ForwardTrace],
    tree: &IntervalTree,
    ys: &[f64],
) -> Result<(Option<f64>, usize)> {
    if ys.is_empty() || traces.len() != ys.len() {
        return Err(Error::config("classifier AUC needs a non-empty aligned eval set"));
    }
    let internal: Vec<usize> = tree.internal_ids().collect();
    let slot: std::collections::HashMap<usize, usize> =
        internal.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut per_node: Vec<(Vec<bool>, Vec<f64>)> = vec![(vec![], vec![]); internal.len()];
    for (trace, &y) in traces.iter().zip(ys) {
        let label = tpm::SampleLabel::for_value(tree, y)?;
        for (w, &right) in label.path.windows(2).zip(&label.steps_right) {
            let s = slot[&w[0]];
            per_node[s].0.push(right);
            per_node[s].1.push(trace.q[w[0]]);
        }
    }
    let mut aucs = Vec::new();
    let mut skipped = 0;
    for (labels, scores) in &per_node {
        match binary_auc(labels, scores) {
            Ok(a) => aucs.push(a),
            Err(_) => skipped += 1,
        }
    }
    let avg = if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    };
    Ok((avg, skipped))
}
