//! Shared-trunk multi-head feedforward network with hand-rolled gradients.
//!
//! One ReLU trunk feeds two banks of scalar heads: classifier heads (one per
//! internal tree node, emitting the right-child probability) and pruning
//! heads (one per prunable node). Everything is double precision and the
//! backward pass is exact; `finite_diff_grad` is the independent oracle the
//! tests check it against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine layer, weights stored row-major `[out][in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Scalar affine head over the trunk output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Head {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Activation applied to every head of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    #[default]
    Sigmoid,
    /// Raw affine output; used by the plain-regression baseline.
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadNet {
    pub input_dim: usize,
    pub trunk_dims: Vec<usize>,
    pub trunk: Vec<DenseLayer>,
    pub classifier_heads: Vec<Head>,
    pub pruning_heads: Vec<Head>,
    pub head_activation: HeadActivation,
    pub rng_seed: u64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Post-ReLU activations per trunk layer.
    pub activations: Vec<Vec<f64>>,
    pub classifier_logits: Vec<f64>,
    pub pruning_logits: Vec<f64>,
    /// Classifier head outputs (conditional right-child probabilities).
    pub q: Vec<f64>,
    /// Pruning head outputs (pruning probabilities).
    pub p: Vec<f64>,
}

/// Loss gradients with respect to each head output.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub classifier: Vec<f64>,
    pub pruning: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros(net: &MultiHeadNet) -> Self {
        HeadGrads {
            classifier: vec![0.0; net.classifier_heads.len()],
            pruning: vec![0.0; net.pruning_heads.len()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadGrad {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Per-parameter accumulators mirroring the network shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientSet {
    pub trunk: Vec<LayerGrad>,
    pub classifier: Vec<HeadGrad>,
    pub pruning: Vec<HeadGrad>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MultiHeadNet {
    /// Glorot-uniform weights, zero biases, deterministic in the seed.
    pub fn init(
        input_dim: usize,
        trunk_dims: &[usize],
        n_classifier_heads: usize,
        n_pruning_heads: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::init_with_activation(
            input_dim,
            trunk_dims,
            n_classifier_heads,
            n_pruning_heads,
            HeadActivation::Sigmoid,
            seed,
        )
    }

    pub fn init_with_activation(
        input_dim: usize,
        trunk_dims: &[usize],
        n_classifier_heads: usize,
        n_pruning_heads: usize,
        head_activation: HeadActivation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || trunk_dims.is_empty() || trunk_dims.contains(&0) {
            return Err(Error::config("network dimensions must all be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect()
        };
        let mut trunk = Vec::with_capacity(trunk_dims.len());
        let mut prev = input_dim;
        for &dim in trunk_dims {
            trunk.push(DenseLayer {
                w: glorot(prev, dim, prev * dim),
                b: vec![0.0; dim],
                in_dim: prev,
                out_dim: dim,
            });
            prev = dim;
        }
        let heads = |n: usize, glorot: &mut dyn FnMut(usize, usize, usize) -> Vec<f64>| {
            (0..n).map(|_| Head { w: glorot(prev, 1, prev), b: 0.0 }).collect::<Vec<_>>()
        };
        let classifier_heads = heads(n_classifier_heads, &mut glorot);
        let pruning_heads = heads(n_pruning_heads, &mut glorot);
        Ok(MultiHeadNet {
            input_dim,
            trunk_dims: trunk_dims.to_vec(),
            trunk,
            classifier_heads,
            pruning_heads,
            head_activation,
            rng_seed: seed,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite feature value"));
        }
        let mut activations = Vec::with_capacity(self.trunk.len());
        let mut prev: &[f64] = x;
        for layer in &self.trunk {
            let mut a = vec![0.0; layer.out_dim];
            for (o, out) in a.iter_mut().enumerate() {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let z = layer.b[o] + dot(row, prev);
                *out = if z > 0.0 { z } else { 0.0 };
            }
            activations.push(a);
            prev = activations.last().unwrap();
        }
        let top = activations.last().unwrap();
        let apply = |h: &Head| h.b + dot(&h.w, top);
        let classifier_logits: Vec<f64> = self.classifier_heads.iter().map(apply).collect();
        let pruning_logits: Vec<f64> = self.pruning_heads.iter().map(apply).collect();
        let out = |z: &f64| match self.head_activation {
            HeadActivation::Sigmoid => sigmoid(*z),
            HeadActivation::Identity => *z,
        };
        let q = classifier_logits.iter().map(out).collect();
        let p = pruning_logits.iter().map(out).collect();
        Ok(ForwardTrace { input: x.to_vec(), activations, classifier_logits, pruning_logits, q, p })
    }

    pub fn param_count(&self) -> usize {
        let trunk: usize = self.trunk.iter().map(|l| l.w.len() + l.b.len()).sum();
        let heads: usize = self
            .classifier_heads
            .iter()
            .chain(&self.pruning_heads)
            .map(|h| h.w.len() + 1)
            .sum();
        trunk + heads
    }

    /// Flat parameter vector: trunk layers (weights then bias), classifier
    /// heads, pruning heads, in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.trunk {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        for h in self.classifier_heads.iter().chain(&self.pruning_heads) {
            out.extend_from_slice(&h.w);
            out.push(h.b);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config(format!(
                "flat vector has {} values, network has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.trunk {
            for w in &mut l.w {
                *w = *it.next().unwrap();
            }
            for b in &mut l.b {
                *b = *it.next().unwrap();
            }
        }
        for h in self.classifier_heads.iter_mut().chain(&mut self.pruning_heads) {
            for w in &mut h.w {
                *w = *it.next().unwrap();
            }
            h.b = *it.next().unwrap();
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GradientSet {
    pub fn zeros_like(net: &MultiHeadNet) -> Self {
        GradientSet {
            trunk: net
                .trunk
                .iter()
                .map(|l| LayerGrad { w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()] })
                .collect(),
            classifier: net
                .classifier_heads
                .iter()
                .map(|h| HeadGrad { w: vec![0.0; h.w.len()], b: 0.0 })
                .collect(),
            pruning: net
                .pruning_heads
                .iter()
                .map(|h| HeadGrad { w: vec![0.0; h.w.len()], b: 0.0 })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.trunk.iter_mut().zip(&other.trunk) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
        for (a, b) in self
            .classifier
            .iter_mut()
            .chain(&mut self.pruning)
            .zip(other.classifier.iter().chain(&other.pruning))
        {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            a.b += b.b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.trunk {
            for x in l.w.iter_mut().chain(&mut l.b) {
                *x *= factor;
            }
        }
        for h in self.classifier.iter_mut().chain(&mut self.pruning) {
            for x in &mut h.w {
                *x *= factor;
            }
            h.b *= factor;
        }
    }

    /// Flat view in the same order as [`MultiHeadNet::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        for h in self.classifier.iter().chain(&self.pruning) {
            out.extend_from_slice(&h.w);
            out.push(h.b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.iter().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
            && self
                .classifier
                .iter()
                .chain(&self.pruning)
                .all(|h| h.b.is_finite() && h.w.iter().all(|v| v.is_finite()))
    }
}

/// Exact gradients of `sum_h output_grad_h * head_output_h` with respect to
/// every parameter, accumulated into `out`.
pub fn backward_into(
    net: &MultiHeadNet,
    trace: &ForwardTrace,
    grads: &HeadGrads,
    out: &mut GradientSet,
) -> Result<()> {
    if grads.classifier.len() != net.classifier_heads.len()
        || grads.pruning.len() != net.pruning_heads.len()
        || out.trunk.len() != net.trunk.len()
    {
        return Err(Error::config("gradient shapes do not match the network"));
    }
    let top = trace.activations.last().expect("trunk is non-empty");
    let mut d_top = vec![0.0; top.len()];

    let apply_heads = |heads: &[Head],
                           outputs: &[f64],
                           gs: &[f64],
                           sinks: &mut [HeadGrad],
                           d_top: &mut [f64]| {
        for (i, head) in heads.iter().enumerate() {
            let g = gs[i];
            if g == 0.0 {
                continue;
            }
            let dz = match net.head_activation {
                HeadActivation::Sigmoid => {
                    let o = outputs[i];
                    g * o * (1.0 - o)
                }
                HeadActivation::Identity => g,
            };
            for (j, w) in head.w.iter().enumerate() {
                sinks[i].w[j] += dz * top[j];
                d_top[j] += dz * w;
            }
            sinks[i].b += dz;
        }
    };
    apply_heads(&net.classifier_heads, &trace.q, &grads.classifier, &mut out.classifier, &mut d_top);
    apply_heads(&net.pruning_heads, &trace.p, &grads.pruning, &mut out.pruning, &mut d_top);

    // Trunk backprop; ReLU derivative read off the cached activations.
    let mut d_act = d_top;
    for (l, layer) in net.trunk.iter().enumerate().rev() {
        let act = &trace.activations[l];
        let below: &[f64] = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
        let mut d_below = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            if act[o] <= 0.0 {
                continue; // ReLU gate closed
            }
            let dz = d_act[o];
            if dz == 0.0 {
                continue;
            }
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            let grow = &mut out.trunk[l].w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for j in 0..layer.in_dim {
                grow[j] += dz * below[j];
                d_below[j] += dz * row[j];
            }
            out.trunk[l].b[o] += dz;
        }
        d_act = d_below;
    }
    Ok(())
}

/// As [`backward_into`] but returning a fresh gradient set.
pub fn backward(net: &MultiHeadNet, trace: &ForwardTrace, grads: &HeadGrads) -> Result<GradientSet> {
    let mut out = GradientSet::zeros_like(net);
    backward_into(net, trace, grads, &mut out)?;
    Ok(out)
}

/// Central-difference gradient of an arbitrary scalar loss over the
/// network parameters. Test oracle; not used on any training path.
pub fn finite_diff_grad<F>(loss_fn: F, net: &MultiHeadNet, h: f64) -> GradientSet
where
    F: Fn(&MultiHeadNet) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let base = net.flatten();
    let mut probe = net.clone();
    let mut flat_grad = Vec::with_capacity(base.len());
    let mut perturbed = base.clone();
    for i in 0..base.len() {
        perturbed[i] = base[i] + h;
        probe.assign_flat(&perturbed).unwrap();
        let up = loss_fn(&probe);
        perturbed[i] = base[i] - h;
        probe.assign_flat(&perturbed).unwrap();
        let down = loss_fn(&probe);
        perturbed[i] = base[i];
        flat_grad.push((up - down) / (2.0 * h));
    }
    gradient_set_from_flat(net, &flat_grad)
}

/// Reshape a flat gradient vector into the network's structure.
pub fn gradient_set_from_flat(net: &MultiHeadNet, flat: &[f64]) -> GradientSet {
    let mut out = GradientSet::zeros_like(net);
    let mut it = flat.iter();
    for l in &mut out.trunk {
        for w in &mut l.w {
            *w = *it.next().unwrap();
        }
        for b in &mut l.b {
            *b = *it.next().unwrap();
        }
    }
    for h in out.classifier.iter_mut().chain(&mut out.pruning) {
        for w in &mut h.w {
            *w = *it.next().unwrap();
        }
        h.b = *it.next().unwrap();
    }
    out
}

/// Adam with bias correction; moment state lives here, flat-aligned with
/// [`MultiHeadNet::flatten`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, net: &MultiHeadNet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; net.param_count()],
            v: vec![0.0; net.param_count()],
        }
    }

    pub fn step(&mut self, net: &mut MultiHeadNet, grads: &GradientSet) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::numerical("non-finite gradient in optimizer step"));
        }
        let g = grads.flatten();
        if g.len() != self.m.len() {
            return Err(Error::config("gradient size does not match optimizer state"));
        }
        self.t += 1;
        let mut params = net.flatten();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        net.assign_flat(&params)
    }
}

#[cfg(test)]
pub(crate) fn grad_close(analytic: f64, numeric: f64) -> bool {
    if analytic.abs() < 1e-8 {
        (analytic - numeric).abs() <= 1e-7
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()) <= 1e-4
    }
}
