//! Comparison methods: threshold ordinal regression and direct
//! squared-error regression, trained on the same trunk architecture and
//! optimizer settings as the tree model so comparisons isolate the heads
//! and losses.

use crate::config::RunConfig;
use crate::data::{shuffle, Dataset};
use crate::error::{Error, Result};
use crate::nn::{backward_into, Adam, GradientSet, HeadActivation, HeadGrads, MultiHeadNet};
use crate::par;
use crate::train::derive_rng;
use crate::tree::IntervalTree;

/// Ordinal regression: K sigmoid heads, head k predicting `P(y > t_k)`.
/// Thresholds come from the interior leaf boundaries of the global tree.
#[derive(Debug, Clone)]
pub struct OrdinalModel {
    pub thresholds: Vec<f64>,
    pub v_max: f64,
    pub net: MultiHeadNet,
}

/// Single identity head trained on squared error of normalized labels.
#[derive(Debug, Clone)]
pub struct MseModel {
    pub net: MultiHeadNet,
    pub v_max: f64,
}

const STREAM_BASELINE_SHUFFLE: u64 = 7;

/// Shared mini-batch loop: `grad_fn(y, output, k)` returns dLoss/d(output)
/// for head `k`; `loss_fn` reports the per-sample loss for the history.
fn train_heads<G, L>(
    data: &Dataset,
    cfg: &RunConfig,
    net: &mut MultiHeadNet,
    grad_fn: G,
    loss_fn: L,
) -> Result<Vec<f64>>
where
    G: Fn(f64, f64, usize) -> f64 + Sync,
    L: Fn(f64, &[f64]) -> f64 + Sync,
{
    if data.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let mut adam = Adam::new(cfg.learning_rate, net);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, &mut derive_rng(cfg.seed, STREAM_BASELINE_SHUFFLE, epoch));
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            let b = batch_ids.len() as f64;
            let net_ref: &MultiHeadNet = net;
            let chunks = par::fold_chunks(
                batch_ids,
                par::CHUNK,
                || (GradientSet::zeros_like(net_ref), 0.0f64),
                |(mut grads, mut loss), _, &i| {
                    let sample = &data.samples[i];
                    let trace = net_ref.forward(&sample.x).expect("dims fixed at init");
                    let mut hg = HeadGrads::zeros(net_ref);
                    for k in 0..trace.q.len() {
                        hg.classifier[k] = grad_fn(sample.y, trace.q[k], k) / b;
                    }
                    loss += loss_fn(sample.y, &trace.q);
                    backward_into(net_ref, &trace, &hg, &mut grads).expect("shapes match");
                    (grads, loss)
                },
            );
            let mut grads = GradientSet::zeros_like(net);
            let mut batch_loss = 0.0;
            for (g, l) in chunks {
                grads.add_assign(&g);
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(Error::numerical("non-finite baseline loss"));
            }
            adam.step(net, &grads)?;
            epoch_loss += batch_loss;
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(epoch_losses)
}

/// Train the ordinal baseline. Returns the model and per-epoch mean loss.
pub fn or_train(data: &Dataset, cfg: &RunConfig) -> Result<(OrdinalModel, Vec<f64>)> {
    cfg.validate()?;
    let tree = IntervalTree::from_labels_with(&data.labels(), cfg.tree_depth, cfg.dedupe)?;
    let (_, raw) = tree.leaf_boundaries();
    let v_max = tree.v_max();
    let thresholds: Vec<f64> = raw[1..raw.len() - 1].to_vec();
    let mut net =
        MultiHeadNet::init(data.feature_dim, &cfg.trunk_dims, thresholds.len(), 0, cfg.seed)?;

    let th = thresholds.clone();
    let history = train_heads(
        data,
        cfg,
        &mut net,
        // Binary cross-entropy on I(y > t_k): d/dq = (q - t) / (q (1 - q)).
        |y, q, k| {
            let t = (y > th[k]) as u8 as f64;
            (q - t) / (q * (1.0 - q))
        },
        |y, qs| {
            qs.iter()
                .enumerate()
                .map(|(k, &q)| {
                    if y > th[k] {
                        -q.ln()
                    } else {
                        -(1.0 - q).ln()
                    }
                })
                .sum::<f64>()
        },
    )?;
    Ok((OrdinalModel { thresholds, v_max, net }, history))
}

/// Expectation decoding over the bins the thresholds induce:
/// `y = m_0 + sum_k P(y > t_k) (m_k - m_{k-1})` with bin midpoints `m_k`.
/// Monotone in every head output and bounded by `[m_0, m_K]`.
pub fn or_predict(model: &OrdinalModel, x: &[f64]) -> Result<f64> {
    let trace = model.net.forward(x)?;
    let mids = bin_midpoints(&model.thresholds, model.v_max);
    let mut y = mids[0];
    for (k, &p) in trace.q.iter().enumerate() {
        y += p * (mids[k + 1] - mids[k]);
    }
    Ok(y)
}

fn bin_midpoints(thresholds: &[f64], v_max: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(thresholds.len() + 2);
    edges.push(0.0);
    edges.extend_from_slice(thresholds);
    edges.push(v_max);
    edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

/// Train the direct-regression baseline (identity head, squared error on
/// labels normalized by the max training label).
pub fn mse_train(data: &Dataset, cfg: &RunConfig) -> Result<(MseModel, Vec<f64>)> {
    cfg.validate()?;
    let v_max = data
        .labels()
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut net = MultiHeadNet::init_with_activation(
        data.feature_dim,
        &cfg.trunk_dims,
        1,
        0,
        HeadActivation::Identity,
        cfg.seed,
    )?;
    let history = train_heads(
        data,
        cfg,
        &mut net,
        |y, out, _| 2.0 * (out - y / v_max),
        |y, outs| {
            let d = outs[0] - y / v_max;
            d * d
        },
    )?;
    Ok((MseModel { net, v_max }, history))
}

pub fn mse_predict(model: &MseModel, x: &[f64]) -> Result<f64> {
    Ok(model.net.forward(x)?.q[0] * model.v_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, DistFamily, Sample, SynthConfig};

    fn toy_dataset(n: usize) -> Dataset {
        gen_synthetic(&SynthConfig {
            n_samples: n,
            n_clusters: 2,
            feature_dim: 6,
            dists: vec![
                DistFamily::Lognormal { mu_ln: 5.0f64.ln(), sigma_ln: 0.4 },
                DistFamily::Lognormal { mu_ln: 60.0f64.ln(), sigma_ln: 0.4 },
            ],
            noise: 0.5,
            snr: 4.0,
            latent_weight: 2.0,
            y_max: 200.0,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn toy_config() -> RunConfig {
        RunConfig {
            tree_depth: 3,
            trunk_dims: vec![16, 8],
            batch_size: 50,
            epochs: 5,
            learning_rate: 5e-3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn or_loss_decreases_and_heads_calibrate() {
        let data = toy_dataset(400);
        let cfg = RunConfig { epochs: 80, learning_rate: 1e-2, ..toy_config() };
        let (model, history) = or_train(&data, &cfg).unwrap();
        for w in history[..5].windows(2) {
            assert!(w[1] < w[0], "loss should fall early on: {:?}", &history[..5]);
        }
        // Head positive rates roughly match empirical exceedance rates.
        let n = data.len() as f64;
        for (k, &t) in model.thresholds.iter().enumerate() {
            let empirical = data.samples.iter().filter(|s| s.y > t).count() as f64 / n;
            let mean_q: f64 = data
                .samples
                .iter()
                .map(|s| model.net.forward(&s.x).unwrap().q[k])
                .sum::<f64>()
                / n;
            assert!(
                (mean_q - empirical).abs() < 0.05,
                "head {k}: mean q {mean_q} vs empirical {empirical}"
            );
        }
    }

    #[test]
    fn or_training_is_deterministic() {
        let data = toy_dataset(120);
        let (a, _) = or_train(&data, &toy_config()).unwrap();
        let (b, _) = or_train(&data, &toy_config()).unwrap();
        assert_eq!(a.net.flatten(), b.net.flatten());
    }

    #[test]
    fn or_decoding_bounds_and_midpoint() {
        let thresholds = vec![2.0, 4.0, 6.0];
        let v_max = 8.0;
        let mids = bin_midpoints(&thresholds, v_max); // 1, 3, 5, 7
        assert_eq!(mids, vec![1.0, 3.0, 5.0, 7.0]);

        let mut net = MultiHeadNet::init(2, &[4], 3, 0, 0).unwrap();
        net.assign_flat(&vec![0.0; net.param_count()]).unwrap();
        let model = OrdinalModel { thresholds, v_max, net };
        // All heads at 0.5: midpoint of the [m_0, m_K] range.
        let y = or_predict(&model, &[0.0, 0.0]).unwrap();
        assert!((y - 4.0).abs() < 1e-12);

        // Saturated heads hit the extremes.
        let mut low = model.clone();
        for h in &mut low.net.classifier_heads {
            h.b = -40.0;
        }
        assert!((or_predict(&low, &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-9);
        let mut high = model.clone();
        for h in &mut high.net.classifier_heads {
            h.b = 40.0;
        }
        assert!((or_predict(&high, &[0.0, 0.0]).unwrap() - 7.0).abs() < 1e-9);
    }

    #[test]
    fn mse_converges_to_the_mean_on_constant_labels() {
        let samples: Vec<Sample> = (0..200)
            .map(|i| Sample {
                x: vec![(i % 7) as f64 / 7.0, 1.0],
                y: 12.0,
                cluster: None,
            })
            .collect();
        let data = Dataset { samples, feature_dim: 2 };
        let cfg = RunConfig {
            epochs: 300,
            batch_size: 200,
            learning_rate: 2e-2,
            ..toy_config()
        };
        let (model, _) = mse_train(&data, &cfg).unwrap();
        let pred = mse_predict(&model, &data.samples[0].x).unwrap();
        assert!((pred - 12.0).abs() / 12.0 < 0.01, "pred {pred}");
    }

    #[test]
    fn mse_zero_net_predicts_zero() {
        let mut net = MultiHeadNet::init_with_activation(
            2,
            &[4],
            1,
            0,
            HeadActivation::Identity,
            0,
        )
        .unwrap();
        net.assign_flat(&vec![0.0; net.param_count()]).unwrap();
        let model = MseModel { net, v_max: 100.0 };
        assert_eq!(mse_predict(&model, &[3.0, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn mse_training_is_deterministic() {
        let data = toy_dataset(120);
        let (a, _) = mse_train(&data, &toy_config()).unwrap();
        let (b, _) = mse_train(&data, &toy_config()).unwrap();
        assert_eq!(a.net.flatten(), b.net.flatten());
    }

    #[test]
    fn baselines_share_the_trunk_parameter_count() {
        let data = toy_dataset(64);
        let cfg = RunConfig { epochs: 1, ..toy_config() };
        let tree = IntervalTree::from_labels(&data.labels(), cfg.tree_depth).unwrap();
        let trainer = crate::train::Trainer::new(&tree, data.feature_dim, &cfg).unwrap();
        let (or_model, _) = or_train(&data, &cfg).unwrap();
        let (mse_model, _) = mse_train(&data, &cfg).unwrap();

        let trunk_params = |net: &MultiHeadNet| -> usize {
            net.trunk.iter().map(|l| l.w.len() + l.b.len()).sum()
        };
        let t = trunk_params(&trainer.net);
        assert_eq!(t, trunk_params(&or_model.net));
        assert_eq!(t, trunk_params(&mse_model.net));

        // Totals differ only by head counts (trunk_out + 1 params per head).
        let head_params = |n_heads: usize| n_heads * (cfg.trunk_dims.last().unwrap() + 1);
        assert_eq!(trainer.net.param_count(), t + head_params(7 + 6));
        assert_eq!(or_model.net.param_count(), t + head_params(7));
        assert_eq!(mse_model.net.param_count(), t + head_params(1));
    }
}
