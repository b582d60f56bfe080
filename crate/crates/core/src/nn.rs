//! A minimal dense-network kit: fully connected layers with optional ReLU,
//! exact reverse-mode gradients, a diagonal Gaussian head, Adam, finite
//! difference checking, and a flat binary checkpoint format.
//!
//! Everything is `f64`; parameters live in one flat buffer per network so
//! optimizers and checkpoints can treat them uniformly.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AplError, Result};

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Stack of affine layers. Layer `l` stores its `output x input` weight
/// matrix row-major, followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    stamp: u64,
}

/// Activations recorded by [`DenseNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    /// Input to each layer, then the final output.
    values: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl DenseNet {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(layers: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        for (l, spec) in net.layers.clone().iter().enumerate() {
            let bound = (6.0 / (spec.input + spec.output) as f64).sqrt();
            let start = net.offsets[l];
            for w in &mut net.params[start..start + spec.input * spec.output] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    /// Builds a network with every parameter zero.
    pub fn zeros(layers: &[LayerSpec]) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(invalid(format!(
                    "layer dimensions do not chain: {} -> {}",
                    pair[0].output, pair[1].input
                )));
            }
        }
        if layers.iter().any(|l| l.input == 0 || l.output == 0) {
            return Err(invalid("layer dimensions must be positive"));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in layers {
            offsets.push(total);
            total += l.input * l.output + l.output;
        }
        Ok(DenseNet {
            layers: layers.to_vec(),
            offsets,
            params: vec![0.0; total],
            stamp: next_stamp(),
        })
    }

    /// `input -> hidden (ReLU) -> output (linear)`.
    pub fn mlp<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            &[
                LayerSpec { input, output: hidden, activation: Activation::Relu },
                LayerSpec { input: hidden, output, activation: Activation::None },
            ],
            rng,
        )
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.stamp = next_stamp();
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(invalid(format!("expected {} parameters, got {}", self.params.len(), p.len())));
        }
        self.params_mut().copy_from_slice(p);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Weight `(row, col)` and bias `row` of layer `l`.
    pub fn weight_index(&self, l: usize, row: usize, col: usize) -> usize {
        self.offsets[l] + row * self.layers[l].input + col
    }

    pub fn bias_index(&self, l: usize, row: usize) -> usize {
        let s = &self.layers[l];
        self.offsets[l] + s.input * s.output + row
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(invalid(format!("expected input of length {}, got {}", self.input_dim(), x.len())));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        values.push(x.to_vec());
        for (l, spec) in self.layers.iter().enumerate() {
            let input = &values[l];
            let w = &self.params[self.offsets[l]..self.offsets[l] + spec.input * spec.output];
            let b = &self.params[self.offsets[l] + spec.input * spec.output..][..spec.output];
            let z: Vec<f64> = (0..spec.output)
                .map(|r| b[r] + dot(&w[r * spec.input..(r + 1) * spec.input], input))
                .collect();
            let a = match spec.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::None => z.clone(),
            };
            pre.push(z);
            values.push(a);
        }
        let out = values.last().cloned().unwrap_or_default();
        Ok((
            out,
            ForwardCache {
                stamp: self.stamp,
                values,
                pre,
            },
        ))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Returns `(parameter gradient, input gradient)` for upstream gradient `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let gx = self.backward_into(cache, grad_out, &mut grads)?;
        Ok((grads, gx))
    }

    /// Like [`backward`](Self::backward) but adds parameter gradients into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if cache.stamp != self.stamp {
            return Err(AplError::InvalidState("forward cache is stale".into()));
        }
        if grad_out.len() != self.output_dim() {
            return Err(invalid(format!(
                "expected output gradient of length {}, got {}",
                self.output_dim(),
                grad_out.len()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(invalid("gradient buffer has the wrong length"));
        }
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            if spec.activation == Activation::Relu {
                for (gi, z) in g.iter_mut().zip(&cache.pre[l]) {
                    if *z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let input = &cache.values[l];
            let off = self.offsets[l];
            let w = &self.params[off..off + spec.input * spec.output];
            let mut gin = vec![0.0; spec.input];
            for r in 0..spec.output {
                let gr = g[r];
                if gr == 0.0 {
                    continue;
                }
                let row = r * spec.input;
                for c in 0..spec.input {
                    grads[off + row + c] += gr * input[c];
                    gin[c] += gr * w[row + c];
                }
                grads[off + spec.input * spec.output + r] += gr;
            }
            g = gin;
        }
        Ok(g)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in xs.iter().enumerate() {
        match best {
            Some(b) if xs[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian with state-independent log standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(dim: usize) -> Self {
        GaussianHead { log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), ls)| {
                let s = ls.exp();
                -(a - m) * (a - m) / (2.0 * s * s) - ls - HALF_LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        mean.iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `(∂ log p / ∂ mean, ∂ log p / ∂ log_std)`.
    pub fn log_prob_grads(&self, mean: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gm = Vec::with_capacity(mean.len());
        let mut gs = Vec::with_capacity(mean.len());
        for ((m, a), ls) in mean.iter().zip(action).zip(&self.log_std) {
            let var = (2.0 * ls).exp();
            gm.push((a - m) / var);
            gs.push((a - m) * (a - m) / var - 1.0);
        }
        (gm, gs)
    }
}

/// Sample an action, and report the log-probability of `action` and the entropy.
pub fn gaussian_ops<R: Rng + ?Sized>(
    head: &GaussianHead,
    mean: &[f64],
    action: &[f64],
    rng: &mut R,
) -> (Vec<f64>, f64, f64) {
    (head.sample(mean, rng), head.log_prob(mean, action), head.entropy())
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid(format!(
                "adam state holds {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(AplError::TrainingDiverged(format!("non-finite gradient at parameter {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(AplError::TrainingDiverged("parameters became non-finite".into()));
        }
        Ok(())
    }
}

/// Applies one Adam update to `params`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.update(params, grads)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradients; magnitudes below `floor`
/// are compared absolutely against `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"APLCKPT1";

/// JSON header plus a flat little-endian `f64` parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AplError::Format("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header = serde_json::from_slice(&header)?;
        r.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let params = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Checkpoint { header, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(input: usize, output: usize, activation: Activation) -> LayerSpec {
        LayerSpec { input, output, activation }
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = DenseNet::zeros(&[spec(3, 2, Activation::None)]).unwrap();
        let b = net.bias_index(0, 0);
        net.params_mut()[b] = 1.5;
        net.params_mut()[b + 1] = -2.0;
        assert_eq!(net.predict(&[4.0, 5.0, 6.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn identity_relu() {
        let mut net = DenseNet::zeros(&[spec(2, 2, Activation::Relu)]).unwrap();
        for i in 0..2 {
            let k = net.weight_index(0, i, i);
            net.params_mut()[k] = 1.0;
        }
        assert_eq!(net.predict(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn forward_is_pure_and_checks_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::mlp(5, 16, 3, &mut rng).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
        assert!(matches!(net.predict(&[1.0]), Err(AplError::InvalidArgument(_))));
        assert!(DenseNet::zeros(&[spec(2, 3, Activation::Relu), spec(4, 1, Activation::None)]).is_err());
    }

    #[test]
    fn linear_layer_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenseNet::new(&[spec(3, 2, Activation::None)], &mut rng).unwrap();
        let x = [1.0, 2.0, 3.0];
        let (_, cache) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&cache, &[1.0, 1.0]).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g[net.weight_index(0, r, c)], x[c]);
            }
            assert_eq!(g[net.bias_index(0, r)], 1.0);
        }
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        let mut net = DenseNet::zeros(&[spec(1, 1, Activation::Relu)]).unwrap();
        let k = net.weight_index(0, 0, 0);
        net.params_mut()[k] = 1.0;
        let (_, cache) = net.forward(&[-3.0]).unwrap();
        let (g, gx) = net.backward(&cache, &[1.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(gx, vec![0.0]);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DenseNet::mlp(2, 4, 1, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.5, 0.5]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &[1.0]), Err(AplError::InvalidState(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (i, h, o) in [(6, 6, 6), (12, 1, 1), (30, 128, 2), (30, 128, 1)] {
            let net = if h == 1 {
                DenseNet::new(&[spec(i, 1, Activation::None)], &mut rng).unwrap()
            } else {
                DenseNet::mlp(i, h, o, &mut rng).unwrap()
            };
            for _ in 0..10 {
                let x: Vec<f64> = (0..i).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let loss = |p: &[f64]| {
                    let mut n = net.clone();
                    n.set_params(p).unwrap();
                    n.predict(&x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                };
                let (_, cache) = net.forward(&x).unwrap();
                let (g, gx) = net.backward(&cache, &w).unwrap();
                let num = numeric_gradient(loss, net.params(), 1e-6);
                assert!(max_relative_error(&g, &num, 1e-6) < 1e-4);
                let num_x = numeric_gradient(
                    |xx: &[f64]| net.predict(xx).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>(),
                    &x,
                    1e-6,
                );
                assert!(max_relative_error(&gx, &num_x, 1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_properties() {
        let xs = [1.0, -2.0, 3.5, 0.0];
        let s = softmax(&xs);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 1000.0).collect();
        let t = softmax(&shifted);
        for (a, b) in s.iter().zip(&t) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(softmax(&[5.0]), vec![1.0]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn gaussian_closed_forms() {
        let head = GaussianHead::new(2);
        let mu = [0.3, -0.7];
        let lp = head.log_prob(&mu, &mu);
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((head.entropy() - (2.0 * std::f64::consts::PI * e).ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = GaussianHead { log_std: vec![0.5f64.ln(), 0.0] };
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let (s, _, _) = gaussian_ops(&head, &mu, &mu, &mut rng);
            sum[0] += s[0];
            sum[1] += s[1];
        }
        let std = head.std();
        for k in 0..2 {
            let m = sum[k] / n as f64;
            assert!((m - mu[k]).abs() < 3.0 * std[k] / (n as f64).sqrt());
        }
    }

    #[test]
    fn gaussian_grads_match_finite_differences() {
        let head = GaussianHead { log_std: vec![-0.3, 0.4] };
        let mu = [0.2, 0.1];
        let a = [0.9, -0.6];
        let (gm, gs) = head.log_prob_grads(&mu, &a);
        let nm = numeric_gradient(|m: &[f64]| head.log_prob(m, &a), &mu, 1e-6);
        let ns = numeric_gradient(
            |ls: &[f64]| GaussianHead { log_std: ls.to_vec() }.log_prob(&mu, &a),
            &head.log_std,
            1e-6,
        );
        assert!(max_relative_error(&gm, &nm, 1e-6) < 1e-6);
        assert!(max_relative_error(&gs, &ns, 1e-6) < 1e-6);
    }

    #[test]
    fn adam_zero_and_constant_gradient() {
        let mut st = AdamState::new(2, 1e-3);
        let mut p = [1.0, -1.0];
        adam_step(&mut st, &mut p, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12);

        let mut st = AdamState::new(2, 1e-3);
        let mut p = [0.0, 0.0];
        adam_step(&mut st, &mut p, &[3.0, -0.2]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut st = AdamState::new(1, 1e-3);
        let mut p = [0.0];
        assert!(matches!(adam_step(&mut st, &mut p, &[f64::NAN]), Err(AplError::TrainingDiverged(_))));
        assert!(adam_step(&mut st, &mut p, &[1.0, 2.0]).is_err());
    }

    /// Straight transcription of the published update rule.
    pub(crate) fn reference_adam(grad: impl Fn(&[f64; 2]) -> [f64; 2], start: [f64; 2], steps: usize) -> Vec<[f64; 2]> {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut x = start;
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        let mut trace = Vec::new();
        for t in 1..=steps {
            let g = grad(&x);
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - f64::powi(b1, t as i32));
                let vh = v[i] / (1.0 - f64::powi(b2, t as i32));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
            trace.push(x);
        }
        trace
    }

    #[test]
    fn adam_matches_reference_trace() {
        let grad = |x: &[f64; 2]| [2.0 * 3.0 * (x[0] - 1.0), 2.0 * 0.5 * (x[1] + 2.0)];
        let want = reference_adam(grad, [0.0, 0.0], 100);
        let mut st = AdamState::new(2, 0.01);
        let mut x = [0.0, 0.0];
        for w in &want {
            let g = grad(&x);
            adam_step(&mut st, &mut x, &g).unwrap();
            assert!((x[0] - w[0]).abs() <= 1e-10 && (x[1] - w[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = DenseNet::mlp(30, 128, 2, &mut rng).unwrap();
        let ck = Checkpoint {
            header: serde_json::json!({"layers": net.layers(), "step": 7}),
            params: net.params().to_vec(),
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(
            back.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            ck.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        assert!(Checkpoint::read(&b"nope"[..]).is_err());
    }
}
