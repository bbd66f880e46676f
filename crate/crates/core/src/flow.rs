//! Rectified flow matching on a synthetic class-conditional Gaussian-mixture task.
//!
//! Data and noise are joined by the straight path `a_t = (1 - t) a0 + t eps`, whose
//! time derivative `eps - a0` is the regression target. Sampling starts from
//! noise at `t = 1` and Euler-integrates the learned field back to `t = 0`.
//! Classifier-free guidance mixes the conditional prediction with the prediction
//! under a learned null embedding.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Mlp, Trace};
use crate::seed::{rng_from, Rng as SeedRng};

/// Prompt analogue: a class id, its embedding, and whether a text channel is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub class_id: usize,
    pub embed: Vec<f64>,
    pub text_present: bool,
    #[serde(default)]
    pub drop_flag: bool,
}

impl Condition {
    /// One-hot class embedding.
    pub fn new(class_id: usize, num_classes: usize, text_present: bool) -> Self {
        let mut embed = vec![0.0; num_classes];
        if class_id < num_classes {
            embed[class_id] = 1.0;
        }
        Self {
            class_id,
            embed,
            text_present,
            drop_flag: false,
        }
    }

    /// Same condition with the embedding dropped (null embedding at the model).
    pub fn dropped(&self) -> Self {
        Self {
            drop_flag: true,
            ..self.clone()
        }
    }
}

/// Draw `count` conditions with uniform classes and `P(text) = text_prob`.
pub fn random_conditions<R: Rng + ?Sized>(
    count: usize,
    num_classes: usize,
    text_prob: f64,
    rng: &mut R,
) -> Vec<Condition> {
    (0..count)
        .map(|_| {
            let class_id = rng.random_range(0..num_classes);
            let text = rng.random::<f64>() < text_prob;
            Condition::new(class_id, num_classes, text)
        })
        .collect()
}

/// One point on the straight noise/data path with its velocity target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub a0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub a_t: Vec<f64>,
    pub v_target: Vec<f64>,
}

pub fn interpolate(a0: &[f64], eps: &[f64], t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("timestep {t} outside [0, 1]")));
    }
    if a0.len() != eps.len() {
        return Err(Error::input(format!(
            "data dim {} != noise dim {}",
            a0.len(),
            eps.len()
        )));
    }
    let a_t = a0
        .iter()
        .zip(eps)
        .map(|(x, e)| (1.0 - t) * x + t * e)
        .collect();
    let v_target = a0.iter().zip(eps).map(|(x, e)| e - x).collect();
    Ok(FlowSample {
        a0: a0.to_vec(),
        eps: eps.to_vec(),
        t,
        a_t,
        v_target,
    })
}

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTaskConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub components_per_class: usize,
    /// Norm of every component mean.
    pub mean_radius: f64,
    pub component_scale: f64,
    /// Weight of the first component; the rest share the remainder equally.
    pub primary_weight: f64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            num_classes: 4,
            components_per_class: 2,
            mean_radius: 2.0,
            component_scale: 0.5,
            primary_weight: 0.6,
        }
    }
}

/// Per-class Gaussian mixtures standing in for the real data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ToyTaskRecord", into = "ToyTaskRecord")]
pub struct ToyTask {
    dim: usize,
    classes: Vec<Vec<MixtureComponent>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyTaskRecord {
    dim: usize,
    classes: Vec<Vec<MixtureComponent>>,
}

impl TryFrom<ToyTaskRecord> for ToyTask {
    type Error = Error;
    fn try_from(r: ToyTaskRecord) -> Result<Self> {
        ToyTask::new(r.dim, r.classes)
    }
}

impl From<ToyTask> for ToyTaskRecord {
    fn from(t: ToyTask) -> Self {
        ToyTaskRecord {
            dim: t.dim,
            classes: t.classes,
        }
    }
}

impl ToyTask {
    pub fn new(dim: usize, classes: Vec<Vec<MixtureComponent>>) -> Result<Self> {
        if dim == 0 || classes.is_empty() {
            return Err(Error::input("task needs dim >= 1 and at least one class"));
        }
        for (k, comps) in classes.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::input(format!("class {k} has no components")));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 || comps.iter().any(|c| c.weight < 0.0) {
                return Err(Error::input(format!(
                    "class {k} mixture weights sum to {total}"
                )));
            }
            for c in comps {
                if c.mean.len() != dim || !(c.scale > 0.0 && c.scale.is_finite()) {
                    return Err(Error::input(format!(
                        "class {k}: component needs a {dim}-dim mean and positive scale"
                    )));
                }
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn generate(cfg: &ToyTaskConfig, seed: u64) -> Result<Self> {
        if cfg.components_per_class == 0 {
            return Err(Error::Config("components_per_class must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.primary_weight) {
            return Err(Error::Config("primary_weight must lie in [0, 1]".into()));
        }
        let mut rng = rng_from(seed, &[]);
        let n = cfg.components_per_class;
        let classes = (0..cfg.num_classes)
            .map(|_| {
                (0..n)
                    .map(|c| {
                        let dir = loop {
                            let v = standard_normal(cfg.dim, &mut rng);
                            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                            if norm > 1e-9 {
                                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
                            }
                        };
                        let weight = if n == 1 {
                            1.0
                        } else if c == 0 {
                            cfg.primary_weight
                        } else {
                            (1.0 - cfg.primary_weight) / (n - 1) as f64
                        };
                        MixtureComponent {
                            mean: dir.into_iter().map(|x| x * cfg.mean_radius).collect(),
                            scale: cfg.component_scale,
                            weight,
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(cfg.dim, classes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn components(&self, class_id: usize) -> &[MixtureComponent] {
        &self.classes[class_id]
    }

    fn class(&self, class_id: usize) -> Result<&[MixtureComponent]> {
        self.classes
            .get(class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::input(format!("class {class_id} out of range")))
    }

    pub fn sample_class<R: Rng + ?Sized>(&self, class_id: usize, rng: &mut R) -> Result<Vec<f64>> {
        let comps = self.class(class_id)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = comps.len() - 1;
        for (i, c) in comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &comps[chosen];
        Ok(c.mean
            .iter()
            .map(|m| m + c.scale * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// Weighted mean of the class mixture.
    pub fn class_mean(&self, class_id: usize) -> Result<Vec<f64>> {
        let comps = self.class(class_id)?;
        let mut mean = vec![0.0; self.dim];
        for c in comps {
            for (m, x) in mean.iter_mut().zip(&c.mean) {
                *m += c.weight * x;
            }
        }
        Ok(mean)
    }

    /// Mean of the highest-weight component (lowest index on ties).
    pub fn primary_mean(&self, class_id: usize) -> Result<&[f64]> {
        let comps = self.class(class_id)?;
        let mut best = 0;
        for (i, c) in comps.iter().enumerate() {
            if c.weight > comps[best].weight {
                best = i;
            }
        }
        Ok(&comps[best].mean)
    }

    /// Natural-log density of the class mixture at `x`.
    pub fn log_density(&self, class_id: usize, x: &[f64]) -> Result<f64> {
        let comps = self.class(class_id)?;
        if x.len() != self.dim {
            return Err(Error::input("sample dimension does not match task"));
        }
        let d = self.dim as f64;
        let logs: Vec<f64> = comps
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * c.scale * c.scale).ln()
                    - sq / (2.0 * c.scale * c.scale)
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }
}

/// The vector-field network `u(a_t, t, embed)` plus its learned null embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VelocityCheckpoint", into = "VelocityCheckpoint")]
pub struct VelocityModel {
    dim: usize,
    num_classes: usize,
    cond_drop_prob: f64,
    null_embed: Vec<f64>,
    net: Mlp,
}

pub const VELOCITY_FORMAT: &str = "velocity-v1";

/// On-disk form: header fields followed by the network checkpoint.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VelocityCheckpoint {
    format: String,
    dim: usize,
    num_classes: usize,
    cond_drop_prob: f64,
    null_embed: Vec<f64>,
    net: Mlp,
}

impl TryFrom<VelocityCheckpoint> for VelocityModel {
    type Error = Error;
    fn try_from(c: VelocityCheckpoint) -> Result<Self> {
        if c.format != VELOCITY_FORMAT {
            return Err(Error::input(format!("unsupported model format {:?}", c.format)));
        }
        VelocityModel::from_parts(c.dim, c.num_classes, c.cond_drop_prob, c.null_embed, c.net)
    }
}

impl From<VelocityModel> for VelocityCheckpoint {
    fn from(m: VelocityModel) -> Self {
        VelocityCheckpoint {
            format: VELOCITY_FORMAT.to_string(),
            dim: m.dim,
            num_classes: m.num_classes,
            cond_drop_prob: m.cond_drop_prob,
            null_embed: m.null_embed,
            net: m.net,
        }
    }
}

/// Forward pass record needed to backpropagate one prediction.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    trace: Trace,
    used_null: bool,
}

impl ModelTrace {
    pub fn output(&self) -> &[f64] {
        self.trace.output()
    }
}

impl VelocityModel {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_classes: usize,
        hidden: &[usize],
        cond_drop_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![dim + 1 + num_classes];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let net = Mlp::init(&dims, rng)?;
        Self::from_parts(dim, num_classes, cond_drop_prob, vec![0.0; num_classes], net)
    }

    pub fn from_parts(
        dim: usize,
        num_classes: usize,
        cond_drop_prob: f64,
        null_embed: Vec<f64>,
        net: Mlp,
    ) -> Result<Self> {
        if net.input_dim() != dim + 1 + num_classes || net.output_dim() != dim {
            return Err(Error::input(format!(
                "network dims {:?} do not fit sample dim {dim} with {num_classes} classes",
                net.dims()
            )));
        }
        if null_embed.len() != num_classes || null_embed.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("null embedding must be finite with one entry per class"));
        }
        if !(0.0..=1.0).contains(&cond_drop_prob) {
            return Err(Error::input(format!("cond_drop_prob {cond_drop_prob} outside [0, 1]")));
        }
        Ok(Self {
            dim,
            num_classes,
            cond_drop_prob,
            null_embed,
            net,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cond_drop_prob(&self) -> f64 {
        self.cond_drop_prob
    }

    pub fn null_embed(&self) -> &[f64] {
        &self.null_embed
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.null_embed.len()
    }

    /// Network parameters followed by the null embedding.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params().to_vec();
        p.extend_from_slice(&self.null_embed);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::input(format!(
                "parameter length {} != {}",
                params.len(),
                self.num_params()
            )));
        }
        let split = self.net.num_params();
        if params[split..].iter().any(|x| !x.is_finite()) {
            return Err(Error::input("non-finite null embedding"));
        }
        self.net.set_params(&params[..split])?;
        self.null_embed.copy_from_slice(&params[split..]);
        Ok(())
    }

    pub fn same_architecture(&self, other: &VelocityModel) -> bool {
        self.dim == other.dim
            && self.num_classes == other.num_classes
            && self.net.dims() == other.net.dims()
    }

    fn features(&self, a_t: &[f64], t: f64, cond: &Condition) -> Result<(Vec<f64>, bool)> {
        if a_t.len() != self.dim {
            return Err(Error::input(format!(
                "sample dim {} != model dim {}",
                a_t.len(),
                self.dim
            )));
        }
        let use_null = cond.drop_flag;
        let embed = if use_null { &self.null_embed } else { &cond.embed };
        if embed.len() != self.num_classes {
            return Err(Error::input(format!(
                "condition embedding length {} != {}",
                embed.len(),
                self.num_classes
            )));
        }
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.extend_from_slice(a_t);
        x.push(t);
        x.extend_from_slice(embed);
        Ok((x, use_null))
    }

    /// Velocity under `cond` (null embedding when `cond.drop_flag`).
    pub fn predict(&self, a_t: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        let (x, _) = self.features(a_t, t, cond)?;
        self.net.forward(&x)
    }

    pub fn predict_uncond(&self, a_t: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        self.predict(a_t, t, &cond.dropped())
    }

    pub fn trace(&self, a_t: &[f64], t: f64, cond: &Condition) -> Result<ModelTrace> {
        let (x, used_null) = self.features(a_t, t, cond)?;
        Ok(ModelTrace {
            trace: self.net.forward_trace(&x)?,
            used_null,
        })
    }

    /// Add `d loss / d params` for one traced prediction into `grads`
    /// (layout of [`VelocityModel::params`]).
    pub fn backprop(&self, trace: &ModelTrace, upstream: &[f64], grads: &mut [f64]) -> Result<()> {
        if grads.len() != self.num_params() {
            return Err(Error::input("gradient buffer does not match model"));
        }
        let split = self.net.num_params();
        let (g_net, g_null) = grads.split_at_mut(split);
        let dx = self.net.backward_accumulate(&trace.trace, upstream, g_net)?;
        if trace.used_null {
            for (g, d) in g_null.iter_mut().zip(&dx[self.dim + 1..]) {
                *g += d;
            }
        }
        Ok(())
    }

    /// Classifier-free guidance: `(1 - gamma) u_null + gamma u_cond`.
    ///
    /// Same value as `u_null + gamma (u_cond - u_null)`; this form returns the
    /// conditional prediction bit-exactly at `gamma = 1` and the unconditional
    /// one at `gamma = 0`.
    pub fn guided_velocity(
        &self,
        a_t: &[f64],
        t: f64,
        cond: &Condition,
        gamma: f64,
    ) -> Result<Vec<f64>> {
        let u_cond = self.predict(a_t, t, &Condition { drop_flag: false, ..cond.clone() })?;
        if gamma == 1.0 {
            return Ok(u_cond);
        }
        let u_null = self.predict_uncond(a_t, t, cond)?;
        Ok(u_null
            .iter()
            .zip(&u_cond)
            .map(|(n, c)| (1.0 - gamma) * n + gamma * c)
            .collect())
    }
}

/// Anything that can be Euler-integrated by [`integrate`].
pub trait VectorField {
    fn dim(&self) -> usize;
    fn velocity(&self, a: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>>;
}

/// A velocity model evaluated with a fixed guidance scale.
#[derive(Debug, Clone, Copy)]
pub struct Guided<'a> {
    pub model: &'a VelocityModel,
    pub gamma: f64,
}

impl VectorField for Guided<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn velocity(&self, a: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        self.model.guided_velocity(a, t, cond, self.gamma)
    }
}

/// Euler steps `a <- a - dt u(a, t)` from `t = 1` down to `t = 0`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    cond: &Condition,
    init: Vec<f64>,
    n_steps: usize,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::input("n_steps must be >= 1"));
    }
    if init.len() != field.dim() {
        return Err(Error::input("initial state dimension does not match field"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut a = init;
    for k in 0..n_steps {
        let t = 1.0 - k as f64 / n_steps as f64;
        let u = field.velocity(&a, t, cond)?;
        for (x, v) in a.iter_mut().zip(&u) {
            *x -= dt * v;
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::SamplingNonFinite { step: k });
        }
    }
    Ok(a)
}

/// Draw `a ~ N(0, I)` from `rng` and integrate the guided field to `t = 0`.
pub fn sample<R: Rng + ?Sized>(
    model: &VelocityModel,
    cond: &Condition,
    gamma: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let init = standard_normal(model.dim, rng);
    integrate(&Guided { model, gamma }, cond, init, n_steps)
}

/// A training example for the flow-matching regression.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExample {
    pub sample: FlowSample,
    pub cond: Condition,
}

fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over the batch of `||v_target - u(a_t, t, cond)||^2`.
pub fn fm_loss(model: &VelocityModel, batch: &[FlowExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let u = model.predict(&ex.sample.a_t, ex.sample.t, &ex.cond)?;
        total += squared_error(&u, &ex.sample.v_target);
    }
    Ok(total / batch.len() as f64)
}

/// [`fm_loss`] together with its gradient in the layout of [`VelocityModel::params`].
pub fn fm_loss_grad(model: &VelocityModel, batch: &[FlowExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let n = batch.len() as f64;
    let mut grads = vec![0.0; model.num_params()];
    let mut total = 0.0;
    for ex in batch {
        let trace = model.trace(&ex.sample.a_t, ex.sample.t, &ex.cond)?;
        let u = trace.output();
        total += squared_error(u, &ex.sample.v_target);
        let upstream: Vec<f64> = u
            .iter()
            .zip(&ex.sample.v_target)
            .map(|(p, v)| 2.0 * (p - v) / n)
            .collect();
        model.backprop(&trace, &upstream, &mut grads)?;
    }
    Ok((total / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cond_drop_prob: f64,
    pub heldout_size: usize,
    /// Fail if the held-out loss ends above this value.
    #[serde(default)]
    pub loss_ceiling: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 4000,
            batch_size: 64,
            optimizer: AdamWConfig::new(2e-3, 200, 0.0),
            cond_drop_prob: 0.1,
            heldout_size: 512,
            loss_ceiling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub final_train_loss: Option<f64>,
    pub heldout_loss: f64,
    /// Held-out loss of the zero-output model on the same batch.
    pub heldout_zero_baseline: f64,
}

/// Draw a flow-matching batch: uniform class, mixture data, Gaussian noise,
/// `t ~ U(0, 1)`, condition dropped with probability `drop_prob`.
pub fn draw_batch<R: Rng + ?Sized>(
    task: &ToyTask,
    batch_size: usize,
    drop_prob: f64,
    rng: &mut R,
) -> Result<Vec<FlowExample>> {
    (0..batch_size)
        .map(|_| {
            let class_id = rng.random_range(0..task.num_classes());
            let a0 = task.sample_class(class_id, rng)?;
            let eps = standard_normal(task.dim(), rng);
            let t: f64 = rng.random();
            let mut cond = Condition::new(class_id, task.num_classes(), false);
            cond.drop_flag = rng.random::<f64>() < drop_prob;
            Ok(FlowExample {
                sample: interpolate(&a0, &eps, t)?,
                cond,
            })
        })
        .collect()
}

/// Fit a velocity model to `task` with AdamW; deterministic in `seed`.
pub fn pretrain(
    task: &ToyTask,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(VelocityModel, PretrainReport)> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 || cfg.heldout_size == 0 {
        return Err(Error::Config("batch_size and heldout_size must be positive".into()));
    }
    let mut init_rng: SeedRng = rng_from(seed, &[0]);
    let mut model = VelocityModel::new(
        task.dim(),
        task.num_classes(),
        &cfg.hidden,
        cfg.cond_drop_prob,
        &mut init_rng,
    )?;
    let mut data_rng = rng_from(seed, &[1]);
    let mut opt = AdamW::new(cfg.optimizer, model.num_params());
    let mut params = model.params();
    let mut last_loss = None;
    for step in 0..cfg.steps {
        let batch = draw_batch(task, cfg.batch_size, cfg.cond_drop_prob, &mut data_rng)?;
        let (loss, grads) = fm_loss_grad(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                phase: "pretrain".into(),
                step,
                message: format!("loss {loss}"),
            });
        }
        opt.step(&mut params, &grads).map_err(|e| Error::Divergence {
            phase: "pretrain".into(),
            step,
            message: e.to_string(),
        })?;
        model.set_params(&params).map_err(|e| Error::Divergence {
            phase: "pretrain".into(),
            step,
            message: e.to_string(),
        })?;
        last_loss = Some(loss);
    }
    let mut heldout_rng = rng_from(seed, &[2]);
    let heldout = draw_batch(task, cfg.heldout_size, 0.0, &mut heldout_rng)?;
    let heldout_loss = fm_loss(&model, &heldout)?;
    let heldout_zero_baseline = heldout
        .iter()
        .map(|ex| ex.sample.v_target.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / heldout.len() as f64;
    if let Some(ceiling) = cfg.loss_ceiling {
        if heldout_loss.is_nan() || heldout_loss > ceiling {
            return Err(Error::Divergence {
                phase: "pretrain".into(),
                step: cfg.steps,
                message: format!("held-out loss {heldout_loss} above ceiling {ceiling}"),
            });
        }
    }
    Ok((
        model,
        PretrainReport {
            steps: cfg.steps,
            final_train_loss: last_loss,
            heldout_loss,
            heldout_zero_baseline,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, max_relative_error};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn small_model(seed: u64) -> VelocityModel {
        let mut rng = rng_from(seed, &[]);
        VelocityModel::new(3, 2, &[6], 0.1, &mut rng).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let a0 = [1.5, -2.0];
        let eps = [0.25, 0.75];
        assert_eq!(interpolate(&a0, &eps, 0.0).unwrap().a_t, a0.to_vec());
        assert_eq!(interpolate(&a0, &eps, 1.0).unwrap().a_t, eps.to_vec());
        let s = interpolate(&[1.0, 0.0], &[0.0, 1.0], 0.25).unwrap();
        assert_eq!(s.a_t, vec![0.75, 0.25]);
        assert_eq!(s.v_target, vec![-1.0, 1.0]);
    }

    #[test]
    fn interpolate_rejects_bad_input() {
        assert!(interpolate(&[0.0], &[0.0], 1.5).is_err());
        assert!(interpolate(&[0.0], &[0.0], -0.1).is_err());
        assert!(interpolate(&[0.0], &[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn zero_model_loss_is_mean_target_norm() {
        let mut model = small_model(1);
        model.set_params(&vec![0.0; model.num_params()]).unwrap();
        let mut rng = rng_from(2, &[]);
        let task = ToyTask::generate(
            &ToyTaskConfig {
                dim: 3,
                num_classes: 2,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let batch = draw_batch(&task, 16, 0.3, &mut rng).unwrap();
        let expected: f64 = batch
            .iter()
            .map(|ex| {
                ex.sample
                    .eps
                    .iter()
                    .zip(&ex.sample.a0)
                    .map(|(e, a)| (e - a) * (e - a))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 16.0;
        assert!((fm_loss(&model, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let task = ToyTask::generate(
            &ToyTaskConfig {
                dim: 3,
                num_classes: 2,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        for seed in 0..10 {
            let mut model = small_model(seed);
            // Non-zero null embedding so its gradient path is exercised.
            let mut p = model.params();
            let n = p.len();
            p[n - 2] = 0.3;
            p[n - 1] = -0.2;
            model.set_params(&p).unwrap();
            let mut rng = rng_from(seed, &[7]);
            let batch = draw_batch(&task, 6, 0.5, &mut rng).unwrap();
            let (_, analytic) = fm_loss_grad(&model, &batch).unwrap();
            let mut probe = model.clone();
            let numeric = finite_diff_grad(
                |p| {
                    probe.set_params(p)?;
                    fm_loss(&probe, &batch)
                },
                &model.params(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let model = small_model(4);
        let cond = Condition::new(1, 2, false);
        let a = [0.1, -0.4, 0.9];
        let u_c = model.predict(&a, 0.3, &cond).unwrap();
        let u_n = model.predict_uncond(&a, 0.3, &cond).unwrap();
        assert_eq!(model.guided_velocity(&a, 0.3, &cond, 1.0).unwrap(), u_c);
        assert_eq!(model.guided_velocity(&a, 0.3, &cond, 0.0).unwrap(), u_n);
        let g = model.guided_velocity(&a, 0.3, &cond, 4.5).unwrap();
        for i in 0..3 {
            let expected = u_n[i] + 4.5 * (u_c[i] - u_n[i]);
            assert!((g[i] - expected).abs() < 1e-12);
        }
    }

    struct ZeroField(usize);
    impl VectorField for ZeroField {
        fn dim(&self) -> usize {
            self.0
        }
        fn velocity(&self, _: &[f64], _: f64, _: &Condition) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    /// Straight-path oracle: velocity `a - a0`, which equals `eps - a0` at `t = 1`.
    struct StraightField(Vec<f64>);
    impl VectorField for StraightField {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, a: &[f64], t: f64, _: &Condition) -> Result<Vec<f64>> {
            Ok(a.iter().zip(&self.0).map(|(x, x0)| (x - x0) / t).collect())
        }
    }

    #[test]
    fn zero_field_returns_initial_noise() {
        let cond = Condition::new(0, 1, false);
        let init = vec![0.3, -1.0];
        assert_eq!(integrate(&ZeroField(2), &cond, init.clone(), 10).unwrap(), init);
    }

    #[test]
    fn straight_field_recovers_data_in_one_step() {
        let cond = Condition::new(0, 1, false);
        let a0 = vec![1.25, -0.5, 3.0];
        let eps = vec![0.5, 2.0, -1.0];
        let out = integrate(&StraightField(a0.clone()), &cond, eps, 1).unwrap();
        for (x, y) in out.iter().zip(&a0) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn integrate_requires_a_step() {
        let cond = Condition::new(0, 1, false);
        assert!(integrate(&ZeroField(1), &cond, vec![0.0], 0).is_err());
    }

    struct Exploding;
    impl VectorField for Exploding {
        fn dim(&self) -> usize {
            1
        }
        fn velocity(&self, a: &[f64], _: f64, _: &Condition) -> Result<Vec<f64>> {
            Ok(vec![if a[0] > 1e300 { f64::INFINITY } else { -1e308 }])
        }
    }

    #[test]
    fn non_finite_sampling_reports_step() {
        let cond = Condition::new(0, 1, false);
        let err = integrate(&Exploding, &cond, vec![0.0], 4).unwrap_err();
        assert!(matches!(err, Error::SamplingNonFinite { step: 1 }), "{err}");
    }

    #[test]
    fn zero_step_pretrain_returns_initialization() {
        let task = ToyTask::generate(&ToyTaskConfig::default(), 1).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            heldout_size: 8,
            ..Default::default()
        };
        let (model, report) = pretrain(&task, &cfg, 42).unwrap();
        let mut rng = rng_from(42, &[0]);
        let init = VelocityModel::new(8, 4, &cfg.hidden, cfg.cond_drop_prob, &mut rng).unwrap();
        assert_eq!(model, init);
        assert_eq!(report.final_train_loss, None);
    }

    #[test]
    fn pretrain_loss_ceiling_is_enforced() {
        let task = ToyTask::generate(&ToyTaskConfig::default(), 1).unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            heldout_size: 8,
            loss_ceiling: Some(1e-6),
            ..Default::default()
        };
        assert!(matches!(
            pretrain(&task, &cfg, 1),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn task_invariants_are_checked() {
        let comp = |w: f64, s: f64| MixtureComponent {
            mean: vec![0.0],
            scale: s,
            weight: w,
        };
        assert!(ToyTask::new(1, vec![vec![comp(0.5, 1.0), comp(0.4, 1.0)]]).is_err());
        assert!(ToyTask::new(1, vec![vec![comp(1.0, 0.0)]]).is_err());
        assert!(ToyTask::new(1, vec![vec![comp(0.5, 1.0), comp(0.5, 2.0)]]).is_ok());
    }

    #[test]
    fn log_density_of_single_gaussian() {
        let task = ToyTask::new(
            2,
            vec![vec![MixtureComponent {
                mean: vec![1.0, 0.0],
                scale: 2.0,
                weight: 1.0,
            }]],
        )
        .unwrap();
        let x = [2.0, 1.0];
        let expected = -(2.0 * std::f64::consts::PI * 4.0).ln() - 2.0 / 8.0;
        assert!((task.log_density(0, &x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = small_model(8);
        let text = serde_json::to_string(&model).unwrap();
        let back: VelocityModel = serde_json::from_str(&text).unwrap();
        assert_eq!(model, back);
    }

    proptest! {
        #[test]
        fn guidance_is_affine_in_gamma(g1 in -5.0f64..5.0, g2 in -5.0f64..5.0, seed in 0u64..50) {
            let model = small_model(seed);
            let cond = Condition::new(0, 2, true);
            let a = [0.2, 0.1, -0.3];
            let o1 = model.guided_velocity(&a, 0.5, &cond, g1).unwrap();
            let o2 = model.guided_velocity(&a, 0.5, &cond, g2).unwrap();
            let om = model.guided_velocity(&a, 0.5, &cond, (g1 + g2) / 2.0).unwrap();
            for i in 0..3 {
                prop_assert!((o1[i] + o2[i] - 2.0 * om[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn interpolant_identity(
            a0 in proptest::collection::vec(-5.0f64..5.0, 3),
            eps in proptest::collection::vec(-5.0f64..5.0, 3),
            t in 0.0f64..=1.0,
        ) {
            let s = interpolate(&a0, &eps, t).unwrap();
            for i in 0..3 {
                prop_assert_eq!(s.a_t[i], (1.0 - t) * a0[i] + t * eps[i]);
                prop_assert_eq!(s.v_target[i], eps[i] - a0[i]);
            }
        }

        #[test]
        fn sampling_is_reproducible(seed in 0u64..100) {
            let model = small_model(3);
            let cond = Condition::new(1, 2, false);
            let a = sample(&model, &cond, 4.5, 5, &mut rng_from(seed, &[])).unwrap();
            let b = sample(&model, &cond, 4.5, 5, &mut rng_from(seed, &[])).unwrap();
            prop_assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
