//! End-to-end harness: train/evaluate each method on a dataset, compare
//! them on shared trunk and optimizer settings, and sweep the global tree
//! depth.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, MseModel, OrdinalModel};
use crate::config::RunConfig;
use crate::data::{gen_synthetic, split, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::nn::MultiHeadNet;
use crate::par;
use crate::tpm::{self, LossBreakdown, PredictMode};
use crate::train::Trainer;
use crate::tree::IntervalTree;
use crate::tsl;

/// Methods the comparison harness can run. `PtpmNoTsl` / `PtpmNoUcl` are
/// the ablations with one module disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mse,
    Or,
    Tpm,
    Ptpm,
    PtpmNoTsl,
    PtpmNoUcl,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Mse, Method::Or, Method::Tpm, Method::Ptpm, Method::PtpmNoTsl, Method::PtpmNoUcl];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mse => "mse",
            Method::Or => "or",
            Method::Tpm => "tpm",
            Method::Ptpm => "ptpm",
            Method::PtpmNoTsl => "ptpm-tsl",
            Method::PtpmNoUcl => "ptpm-ucl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown method '{s}'; expected one of mse, or, tpm, ptpm, ptpm-tsl, ptpm-ucl"
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full evaluation of a tree model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: PredictMode,
    pub report: MetricsReport,
    /// Expected leaf depth under each sample's pruned-tree distribution,
    /// averaged over the eval set.
    pub mean_learned_depth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub mae: f64,
    pub xauc: f64,
    pub train_seconds: f64,
    /// Tree-model diagnostics; absent for the mse/or baselines.
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub depth: usize,
    pub xauc: f64,
    pub mae: f64,
    pub mean_learned_depth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

/// Build the global tree from the training labels and train a tree model
/// under the given toggles. Returns per-epoch loss means.
pub fn train_tree_model(
    train: &Dataset,
    cfg: &RunConfig,
) -> Result<(Trainer, IntervalTree, Vec<LossBreakdown>)> {
    let tree = IntervalTree::from_labels_with(&train.labels(), cfg.tree_depth, cfg.dedupe)?;
    let mut trainer = Trainer::new(&tree, train.feature_dim, cfg)?;
    let history = trainer.train(&tree, train)?;
    Ok((trainer, tree, history))
}

/// Evaluate a tree model: MAE/XAUC of the requested prediction mode, plus
/// calibration diagnostics computed on the global tree.
pub fn evaluate_tree_model(
    net: &MultiHeadNet,
    tree: &IntervalTree,
    cfg: &RunConfig,
    test: &Dataset,
    mode: PredictMode,
) -> Result<EvalSummary> {
    if test.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let traces = par::map_indexed(&test.samples, |_, s| net.forward(&s.x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let preds = par::map_indexed(&traces, |_, t| {
        tpm::predict_from_trace(t, tree, mode, cfg.prune_threshold)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = test.samples.iter().map(|s| s.y).collect();

    let mae = metrics::mae(&ys, &preds)?;
    let xauc = metrics::xauc(&ys, &preds)?;
    let (ratios, mean_dev) = metrics::prior_posterior_ratio(&traces, tree, &ys)?;
    let (avg_auc, skipped) = metrics::avg_classifier_auc(&traces, tree, &ys)?;

    let depth_sum: f64 = par::map_indexed(&traces, |_, t| -> Result<f64> {
        let mask = tsl::deterministic_mask(&t.p, tree, cfg.prune_threshold)?;
        let pruned = tree.apply_prune(&mask)?;
        let dist = tpm::leaf_distribution(t, &pruned)?;
        Ok(dist
            .leaf_ids
            .iter()
            .zip(&dist.probs)
            .map(|(&id, p)| pruned.node(id).unwrap().depth as f64 * p)
            .sum())
    })
    .into_iter()
    .sum::<Result<f64>>()?;

    Ok(EvalSummary {
        mode,
        report: MetricsReport {
            mae,
            xauc,
            avg_classifier_auc: avg_auc,
            skipped_nodes: skipped,
            prior_posterior_ratios: ratios,
            mean_abs_ratio_dev: mean_dev,
        },
        mean_learned_depth: depth_sum / test.len() as f64,
    })
}

fn method_config(method: Method, base: &RunConfig) -> RunConfig {
    match method {
        Method::Tpm => base.with_toggles(false, false),
        Method::Ptpm => base.with_toggles(true, true),
        Method::PtpmNoTsl => base.with_toggles(false, true),
        Method::PtpmNoUcl => base.with_toggles(true, false),
        Method::Mse | Method::Or => base.clone(),
    }
}

fn method_mode(method: Method) -> PredictMode {
    match method {
        // Without structure learning the pruning heads stay uninformed, so
        // these methods serve from the global tree.
        Method::Tpm | Method::PtpmNoTsl => PredictMode::Global,
        _ => PredictMode::Pruned,
    }
}

/// Train and evaluate one method.
pub fn run_method(
    method: Method,
    train: &Dataset,
    test: &Dataset,
    base_cfg: &RunConfig,
) -> Result<MethodOutcome> {
    let cfg = method_config(method, base_cfg);
    let ys: Vec<f64> = test.samples.iter().map(|s| s.y).collect();
    let started = Instant::now();
    match method {
        Method::Mse => {
            let (model, _) = baselines::mse_train(train, &cfg)?;
            let train_seconds = started.elapsed().as_secs_f64();
            let preds = mse_predict_batch(&model, test)?;
            Ok(MethodOutcome {
                method,
                mae: metrics::mae(&ys, &preds)?,
                xauc: metrics::xauc(&ys, &preds)?,
                train_seconds,
                eval: None,
            })
        }
        Method::Or => {
            let (model, _) = baselines::or_train(train, &cfg)?;
            let train_seconds = started.elapsed().as_secs_f64();
            let preds = or_predict_batch(&model, test)?;
            Ok(MethodOutcome {
                method,
                mae: metrics::mae(&ys, &preds)?,
                xauc: metrics::xauc(&ys, &preds)?,
                train_seconds,
                eval: None,
            })
        }
        _ => {
            let (trainer, tree, _) = train_tree_model(train, &cfg)?;
            let train_seconds = started.elapsed().as_secs_f64();
            let eval = evaluate_tree_model(&trainer.net, &tree, &cfg, test, method_mode(method))?;
            Ok(MethodOutcome {
                method,
                mae: eval.report.mae,
                xauc: eval.report.xauc,
                train_seconds,
                eval: Some(eval),
            })
        }
    }
}

pub fn mse_predict_batch(model: &MseModel, data: &Dataset) -> Result<Vec<f64>> {
    par::map_indexed(&data.samples, |_, s| baselines::mse_predict(model, &s.x))
        .into_iter()
        .collect()
}

pub fn or_predict_batch(model: &OrdinalModel, data: &Dataset) -> Result<Vec<f64>> {
    par::map_indexed(&data.samples, |_, s| baselines::or_predict(model, &s.x))
        .into_iter()
        .collect()
}

/// Train every requested method on shared settings.
pub fn compare(
    methods: &[Method],
    train: &Dataset,
    test: &Dataset,
    cfg: &RunConfig,
) -> Result<CompareReport> {
    let mut outcomes = Vec::with_capacity(methods.len());
    for &m in methods {
        outcomes.push(run_method(m, train, test, cfg)?);
    }
    Ok(CompareReport {
        seed: cfg.seed,
        train_size: train.len(),
        test_size: test.len(),
        outcomes,
    })
}

/// Aligned text rendering of a comparison report.
pub fn render_table(report: &CompareReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "seed {}  train {}  test {}\n",
        report.seed, report.train_size, report.test_size
    ));
    out.push_str(&format!(
        "{:<10} {:>10} {:>10} {:>12} {:>12}\n",
        "method", "mae", "xauc", "mean_depth", "train_s"
    ));
    for o in &report.outcomes {
        let depth = o
            .eval
            .as_ref()
            .map(|e| format!("{:.3}", e.mean_learned_depth))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<10} {:>10.4} {:>10.4} {:>12} {:>12.2}\n",
            o.method.name(),
            o.mae,
            o.xauc,
            depth,
            o.train_seconds
        ));
    }
    out
}

/// Retrain the full model at several global-tree depths and report XAUC
/// and the mean learned depth at each.
pub fn depth_sweep(
    depths: &[usize],
    train: &Dataset,
    test: &Dataset,
    cfg: &RunConfig,
) -> Result<SweepReport> {
    let mut entries = Vec::with_capacity(depths.len());
    for &depth in depths {
        let cfg = RunConfig { tree_depth: depth, ..cfg.clone() };
        let outcome = run_method(Method::Ptpm, train, test, &cfg)?;
        let eval = outcome.eval.expect("tree model always evaluates");
        entries.push(SweepEntry {
            depth,
            xauc: outcome.xauc,
            mae: outcome.mae,
            mean_learned_depth: eval.mean_learned_depth,
        });
    }
    Ok(SweepReport { entries })
}

/// The synthetic benchmark the comparison defaults to: heterogeneous
/// two-cluster watch times, 60k samples split 50k/10k.
pub fn default_benchmark_synth(seed: u64) -> SynthConfig {
    SynthConfig { seed, ..SynthConfig::default() }
}

/// Generate and split the default benchmark.
pub fn default_benchmark(seed: u64) -> Result<(Dataset, Dataset)> {
    let data = gen_synthetic(&default_benchmark_synth(seed))?;
    split(&data, 5.0 / 6.0, seed ^ 0x5B17)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistFamily;

    fn tiny_benchmark() -> (Dataset, Dataset) {
        let data = gen_synthetic(&SynthConfig {
            n_samples: 600,
            n_clusters: 2,
            feature_dim: 8,
            dists: vec![
                DistFamily::Lognormal { mu_ln: 6.0f64.ln(), sigma_ln: 0.5 },
                DistFamily::Lognormal { mu_ln: 50.0f64.ln(), sigma_ln: 0.5 },
            ],
            noise: 0.8,
            snr: 3.0,
            latent_weight: 2.0,
            y_max: 250.0,
            seed: 31,
        })
        .unwrap();
        split(&data, 0.8, 77).unwrap()
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            tree_depth: 3,
            trunk_dims: vec![16, 8],
            epochs: 6,
            batch_size: 64,
            learning_rate: 5e-3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn compare_runs_all_methods() {
        let (train, test) = tiny_benchmark();
        let report = compare(&Method::ALL, &train, &test, &tiny_config()).unwrap();
        assert_eq!(report.outcomes.len(), 6);
        for o in &report.outcomes {
            assert!(o.mae.is_finite() && o.xauc >= 0.0 && o.xauc <= 1.0);
            match o.method {
                Method::Mse | Method::Or => assert!(o.eval.is_none()),
                _ => assert!(o.eval.is_some()),
            }
        }
        let table = render_table(&report);
        assert!(table.contains("ptpm-tsl"));
        // Better than coin-flip ordering on clearly separable clusters.
        for o in &report.outcomes {
            assert!(o.xauc > 0.53, "{} scored {}", o.method, o.xauc);
        }
    }

    #[test]
    fn depth_sweep_bounds_learned_depth() {
        let (train, test) = tiny_benchmark();
        let report = depth_sweep(&[2, 3], &train, &test, &tiny_config()).unwrap();
        assert_eq!(report.entries.len(), 2);
        for e in &report.entries {
            assert!(e.mean_learned_depth <= e.depth as f64);
            assert!(e.mean_learned_depth > 0.0);
        }
    }

    #[test]
    fn run_method_is_deterministic() {
        let (train, test) = tiny_benchmark();
        let a = run_method(Method::Ptpm, &train, &test, &tiny_config()).unwrap();
        let b = run_method(Method::Ptpm, &train, &test, &tiny_config()).unwrap();
        assert_eq!(a.mae, b.mae);
        assert_eq!(a.xauc, b.xauc);
    }
}
