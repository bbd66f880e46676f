//! Dense multilayer perceptrons with hand-written backpropagation, the softmax /
//! cross-entropy pair used by the scoring head, AdamW with linear warmup, and a
//! central finite-difference gradient oracle.
//!
//! Parameters of an [`Mlp`] live in one flat `Vec<f64>`: for each layer the
//! row-major weight matrix `(out, in)` followed by the bias vector. Gradients use
//! the same layout, so optimizers and gradient checks work on plain slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CE_FLOOR: f64 = 1e-12;

/// Fully connected network, ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Post-activation values for every layer of one forward pass.
///
/// `activations[0]` is the input, `activations[k]` the (ReLU'd) output of layer
/// `k - 1`, and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for k in 0..net.num_layers() {
            let (n_in, n_out) = (dims[k], dims[k + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let (w_off, _) = net.offsets(k);
            for w in &mut net.params[w_off..w_off + n_in * n_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Build from explicit per-layer `(weight, bias)` arrays.
    pub fn from_layers(dims: &[usize], layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        validate_dims(dims)?;
        if layers.len() != dims.len() - 1 {
            return Err(Error::input(format!(
                "expected {} layers, got {}",
                dims.len() - 1,
                layers.len()
            )));
        }
        let mut params = Vec::with_capacity(param_count(dims));
        for (k, (w, b)) in layers.iter().enumerate() {
            if w.len() != dims[k] * dims[k + 1] || b.len() != dims[k + 1] {
                return Err(Error::input(format!(
                    "layer {k}: expected weight {}x{} and bias {}, got {} and {}",
                    dims[k + 1],
                    dims[k],
                    dims[k + 1],
                    w.len(),
                    b.len()
                )));
            }
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        let net = Self {
            dims: dims.to_vec(),
            params,
        };
        net.ensure_finite()?;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::input(format!(
                "parameter length {} != {}",
                params.len(),
                self.params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::input(format!("non-finite parameter at index {i}")));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Offsets of layer `k`'s weight matrix and bias vector in the flat layout.
    fn offsets(&self, k: usize) -> (usize, usize) {
        let w_off = param_count(&self.dims[..=k]);
        (w_off, w_off + self.dims[k] * self.dims[k + 1])
    }

    /// Row-major weight matrix of layer `k`, shape `(dims[k+1], dims[k])`.
    pub fn weight(&self, k: usize) -> &[f64] {
        let (w, b) = self.offsets(k);
        &self.params[w..b]
    }

    pub fn bias(&self, k: usize) -> &[f64] {
        let (_, b) = self.offsets(k);
        &self.params[b..b + self.dims[k + 1]]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::input(format!("non-finite parameter at index {i}"))),
            None => Ok(()),
        }
    }

    fn affine(&self, k: usize, x: &[f64], relu: bool) -> Vec<f64> {
        let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
        let w = self.weight(k);
        let b = self.bias(k);
        (0..n_out)
            .map(|i| {
                let row = &w[i * n_in..(i + 1) * n_in];
                let z = row.iter().zip(x).fold(b[i], |acc, (wi, xi)| acc + wi * xi);
                if relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::input(format!(
                "input length {} != {}",
                x.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut h = x.to_vec();
        for k in 0..=last {
            h = self.affine(k, &h, k != last);
        }
        Ok(h)
    }

    /// Forward pass that keeps every activation for [`Mlp::backward_accumulate`].
    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(x.to_vec());
        for k in 0..=last {
            let next = self.affine(k, &activations[k], k != last);
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Backpropagate `upstream = dL/d(output)` through the pass recorded in
    /// `trace`, adding parameter gradients into `grads` (flat layout) and
    /// returning `dL/d(input)`. The ReLU subgradient at exactly 0 is 0.
    pub fn backward_accumulate(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::input(format!(
                "upstream gradient length {} != {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::input(format!(
                "gradient buffer length {} != {}",
                grads.len(),
                self.params.len()
            )));
        }
        if trace.activations.len() != self.dims.len() || trace.input().len() != self.dims[0] {
            return Err(Error::input("trace does not match network shape"));
        }
        let mut delta = upstream.to_vec();
        for k in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[k], self.dims[k + 1]);
            let (w_off, b_off) = self.offsets(k);
            let input = &trace.activations[k];
            let w = &self.params[w_off..b_off];
            let mut dx = vec![0.0; n_in];
            for i in 0..n_out {
                let di = delta[i];
                grads[b_off + i] += di;
                if di == 0.0 {
                    continue;
                }
                let g_row = &mut grads[w_off + i * n_in..w_off + (i + 1) * n_in];
                let w_row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    g_row[j] += di * input[j];
                    dx[j] += w_row[j] * di;
                }
            }
            if k > 0 {
                for (d, a) in dx.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    /// Parameter gradients and input gradient for a single input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward_trace(x)?;
        let mut grads = vec![0.0; self.params.len()];
        let dx = self.backward_accumulate(&trace, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format: MLP_FORMAT.to_string(),
            dims: self.dims.clone(),
            layers: (0..self.num_layers())
                .map(|k| LayerRecord {
                    weight: self.weight(k).to_vec(),
                    bias: self.bias(k).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self> {
        if ckpt.format != MLP_FORMAT {
            return Err(Error::input(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        let layers: Vec<_> = ckpt
            .layers
            .iter()
            .map(|l| (l.weight.clone(), l.bias.clone()))
            .collect();
        Self::from_layers(&ckpt.dims, &layers)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::input("an MLP needs at least input and output dims"));
    }
    if dims.contains(&0) {
        return Err(Error::input(format!("layer dims must be positive: {dims:?}")));
    }
    Ok(())
}

pub const MLP_FORMAT: &str = "mlp-v1";

/// Serialized network: a `dims` header and row-major parameter arrays per layer.
///
/// ```text
/// {"format":"mlp-v1","dims":[5,32,3],"layers":[{"weight":[...],"bias":[...]},...]}
/// ```
/// Floats are written in shortest round-trip form, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format: String,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ckpt = MlpCheckpoint::deserialize(d)?;
        Mlp::from_checkpoint(&ckpt).map_err(serde::de::Error::custom)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::input("softmax input is not finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::input(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-p.max(CE_FLOOR).ln())
}

/// Gradient of `cross_entropy(softmax(logits), label)` with respect to the logits.
///
/// Exact as long as the clamp floor is inactive.
pub fn softmax_cross_entropy_grad(probs: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probs.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, warmup_steps: u64, weight_decay: f64) -> Self {
        Self {
            lr,
            warmup_steps,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// `lr * min(1, step / warmup_steps)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step_count: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Learning rate that the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step_count)
    }

    /// Apply one update in place and return the learning rate used.
    ///
    /// Non-finite gradients are rejected before any state changes.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::input(format!(
                "optimizer expects {} parameters, got params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::input(format!("non-finite gradient at index {i}")));
        }
        let c = self.config;
        let lr = c.lr_at(self.step_count);
        self.step_count += 1;
        let bc1 = 1.0 - c.beta1.powf(self.step_count as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step_count as f64);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
        }
        Ok(lr)
    }
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut grads = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_fn(&p)?;
        p[i] = orig - h;
        let down = loss_fn(&p)?;
        p[i] = orig;
        grads.push((up - down) / (2.0 * h));
    }
    Ok(grads)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_network_passes_nonnegative_input() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let net = Mlp::from_layers(
            &[2, 2, 2],
            &[(eye.clone(), vec![0.0; 2]), (eye, vec![0.0; 2])],
        )
        .unwrap();
        assert_eq!(net.forward(&[0.5, 3.0]).unwrap(), vec![0.5, 3.0]);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = rng_from(11, &[]);
        let net = Mlp::init(&[2, 3, 2], &mut rng).unwrap();
        let x = [0.3, -1.2];
        let (w0, b0, w1, b1) = (net.weight(0), net.bias(0), net.weight(1), net.bias(1));
        let h: Vec<f64> = (0..3)
            .map(|i| (w0[2 * i] * x[0] + w0[2 * i + 1] * x[1] + b0[i]).max(0.0))
            .collect();
        let y: Vec<f64> = (0..2)
            .map(|i| w1[3 * i] * h[0] + w1[3 * i + 1] * h[1] + w1[3 * i + 2] * h[2] + b1[i])
            .collect();
        let out = net.forward(&x).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!(approx(*a, *b, 1e-14));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = rng_from(3, &[]);
        let net = Mlp::init(&[4, 5, 3], &mut rng).unwrap();
        let (g, dx) = net.backward(&[1.0, 2.0, 3.0, 4.0], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_linear_chain_rule() {
        let net = Mlp::from_layers(&[2, 1], &[(vec![0.5, -2.0], vec![0.0])]).unwrap();
        let x = [3.0, 7.0];
        let (g, dx) = net.backward(&x, &[1.0]).unwrap();
        assert_eq!(&g[..2], &x);
        assert_eq!(g[2], 1.0);
        assert_eq!(dx, vec![0.5, -2.0]);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let net = Mlp::zeros(&[2, 3, 1]).unwrap();
        assert!(net.backward(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        let trace = net.forward_trace(&[1.0, 1.0]).unwrap();
        let mut short = vec![0.0; 3];
        assert!(net.backward_accumulate(&trace, &[1.0], &mut short).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // Hidden pre-activation is exactly 0, so nothing flows into the first layer.
        let net = Mlp::from_layers(
            &[1, 1, 1],
            &[(vec![1.0], vec![-2.0]), (vec![3.0], vec![0.0])],
        )
        .unwrap();
        let (g, dx) = net.backward(&[2.0], &[1.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(dx, vec![0.0]);
    }

    fn sq_loss(net: &Mlp, x: &[f64], target: &[f64]) -> f64 {
        net.forward(x)
            .unwrap()
            .iter()
            .zip(target)
            .map(|(y, t)| (y - t) * (y - t))
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = rng_from(seed, &[1]);
            let net = Mlp::init(&[4, 8, 3], &mut rng).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = net.forward(&x).unwrap();
            let upstream: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            let (analytic, _) = net.backward(&x, &upstream).unwrap();
            let mut probe = net.clone();
            let numeric = finite_diff_grad(
                |p| {
                    probe.set_params(p)?;
                    Ok(sq_loss(&probe, &x, &target))
                },
                net.params(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!(approx(*v, 1.0 / 3.0, 1e-15));
        }
        let p = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!(p[0] >= 1.0 - 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!(approx(
            cross_entropy(&[1.0 / 3.0; 3], 2).unwrap(),
            3f64.ln(),
            1e-15
        ));
        assert!(approx(
            cross_entropy(&[0.7, 0.2, 0.1], 0).unwrap(),
            0.356_674_943_938_732_4,
            1e-12
        ));
        // Floor keeps a collapsed probability finite.
        assert!(approx(cross_entropy(&[1.0, 0.0], 1).unwrap(), -(1e-12f64).ln(), 1e-9));
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = [0.3, -1.1, 2.0];
        let probs = softmax(&logits).unwrap();
        let analytic = softmax_cross_entropy_grad(&probs, 1).unwrap();
        let numeric = finite_diff_grad(
            |z| cross_entropy(&softmax(z)?, 1),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-6);
    }

    #[test]
    fn adamw_zero_gradient_is_fixed_point() {
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0, 0.0), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adamw_first_warmup_step_is_noop() {
        let mut opt = AdamW::new(AdamWConfig::new(5e-6, 1000, 0.01), 2);
        let mut p = vec![1.0, 2.0];
        let lr = opt.step(&mut p, &[0.3, -0.7]).unwrap();
        assert_eq!(lr, 0.0);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.step_count(), 1);
        assert!(approx(opt.current_lr(), 5e-9, 1e-20));
    }

    #[test]
    fn adamw_matches_hand_rolled_scalar_trace() {
        let (lr, wd, b1, b2, eps): (f64, f64, f64, f64, f64) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let g = 0.5;
        // Reference trace, written out step by step.
        let mut p_ref = 2.0f64;
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        p_ref -= lr * ((m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps) + wd * p_ref);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        p_ref -= lr
            * ((m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps) + wd * p_ref);

        let mut opt = AdamW::new(AdamWConfig::new(lr, 0, wd), 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[g]).unwrap();
        opt.step(&mut p, &[g]).unwrap();
        assert!(approx(p[0], p_ref, 1e-15), "{} vs {}", p[0], p_ref);
    }

    #[test]
    fn adamw_rejects_nan_without_touching_state() {
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0, 0.0), 2);
        let mut p = vec![1.0, 1.0];
        let before = opt.clone();
        assert!(opt.step(&mut p, &[0.1, f64::NAN]).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt, before);
    }

    #[test]
    fn warmup_schedule_shape() {
        let c = AdamWConfig::new(1.0, 4, 0.0);
        let lrs: Vec<f64> = (0..8).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(AdamWConfig::new(0.3, 0, 0.0).lr_at(0), 0.3);
    }

    #[test]
    fn finite_diff_basics() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!(approx(g[0], 6.0, 1e-6));
        let g = finite_diff_grad(|_| Ok(4.2), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = rng_from(5, &[]);
        let net = Mlp::init(&[5, 7, 3], &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
        let bits = |m: &Mlp| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let text = r#"{"format":"mlp-v1","dims":[2,1],"layers":[{"weight":[1.0],"bias":[0.0]}]}"#;
        assert!(serde_json::from_str::<Mlp>(text).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn warmup_lr_is_monotone(lr in 1e-6f64..1.0, warmup in 0u64..50) {
            let c = AdamWConfig::new(lr, warmup, 0.0);
            for s in 0..warmup + 10 {
                prop_assert!(c.lr_at(s + 1) >= c.lr_at(s));
                if s >= warmup {
                    prop_assert_eq!(c.lr_at(s), lr);
                }
            }
        }

        #[test]
        fn checkpoint_round_trip(seed in 0u64..1000) {
            let mut rng = rng_from(seed, &[]);
            let net = Mlp::init(&[3, 4, 2], &mut rng).unwrap();
            let back: Mlp = serde_json::from_str(&serde_json::to_string(&net).unwrap()).unwrap();
            prop_assert_eq!(net, back);
        }
    }
}
