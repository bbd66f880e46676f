//! Five-metric scoring and the Good / Medium / Bad classification head.
//!
//! A [`ScoreExtractor`] turns a generated sample and its condition into a
//! [`ScoreVector`]; the [`ScoreHead`] standardizes that vector and maps it through
//! `Linear -> ReLU -> Linear -> softmax` to a [`ProbTriple`].
//!
//! The toy extractor's metrics, for a sample `x` of class `k`:
//!
//! | entry | meaning | formula |
//! |-------|---------|---------|
//! | s1 | semantic match to the class | `exp(-‖x - c_k‖² / tau)`, `c_k` = mean of the class's highest-weight component |
//! | s2 | semantic match through the text channel | `s1 · (1 + cos(x, c_k)) / 2` if text is present, else `0` |
//! | s3 | misalignment (lower is better) | distance from `x` to the nearest component mean of class `k` |
//! | s4 | quality | `exp(log p_k(x) / d)` |
//! | s5 | clipping penalty | `1 / (1 + max(0, ‖x‖∞ - clip))` |
//!
//! `cos` is taken as 0 when either vector is zero.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample, Condition, ToyTask, VelocityModel};
use crate::nn::{cross_entropy, softmax, softmax_cross_entropy_grad, AdamW, AdamWConfig, Mlp};
use crate::seed::rng_from;

pub const NUM_SCORES: usize = 5;
pub const NUM_LABELS: usize = 3;

/// The five metric scores `s1..s5` of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreVector {
    pub scores: [f64; NUM_SCORES],
    /// When false, `s2` carries the neutral value 0.
    pub text_present: bool,
}

impl ScoreVector {
    pub fn new(scores: [f64; NUM_SCORES], text_present: bool) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::input(format!("non-finite score vector {scores:?}")));
        }
        let mut scores = scores;
        if !text_present {
            scores[1] = 0.0;
        }
        Ok(Self {
            scores,
            text_present,
        })
    }
}

/// `(p(Good), p(Medium), p(Bad))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbTriple {
    pub good: f64,
    pub medium: f64,
    pub bad: f64,
}

impl ProbTriple {
    pub fn new(good: f64, medium: f64, bad: f64) -> Result<Self> {
        let p = Self { good, medium, bad };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform() -> Self {
        Self {
            good: 1.0 / 3.0,
            medium: 1.0 / 3.0,
            bad: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|p| !(0.0..=1.0).contains(p)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::input(format!("invalid probability triple {a:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.good, self.medium, self.bad]
    }

    fn from_probs(p: &[f64]) -> Self {
        Self {
            good: p[0],
            medium: p[1],
            bad: p[2],
        }
    }

    /// Most probable label; ties go to the lower index (Good before Medium before Bad).
    pub fn argmax(&self) -> Label {
        let a = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        Label::from_index(best).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Medium,
    Bad,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Good => 0,
            Label::Medium => 1,
            Label::Bad => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Good),
            1 => Some(Label::Medium),
            2 => Some(Label::Bad),
            _ => None,
        }
    }
}

/// One rated sample: its five scores and a category. Serialized one per line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedSample {
    pub scores: [f64; NUM_SCORES],
    pub text_present: bool,
    pub label: Label,
}

impl AnnotatedSample {
    pub fn new(scores: ScoreVector, label: Label) -> Self {
        Self {
            scores: scores.scores,
            text_present: scores.text_present,
            label,
        }
    }

    pub fn score_vector(&self) -> Result<ScoreVector> {
        ScoreVector::new(self.scores, self.text_present)
    }
}

pub trait ScoreExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, sample: &[f64], cond: &Condition) -> Result<ScoreVector>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyExtractorParams {
    pub tau: f64,
    pub clip: f64,
}

impl Default for ToyExtractorParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            clip: 3.0,
        }
    }
}

/// Closed-form metrics against the known toy distribution (see module docs).
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    task: ToyTask,
    params: ToyExtractorParams,
}

impl ToyExtractor {
    pub fn new(task: ToyTask, params: ToyExtractorParams) -> Result<Self> {
        if params.tau.is_nan() || params.tau <= 0.0 || !params.clip.is_finite() {
            return Err(Error::Config(format!("invalid toy extractor params {params:?}")));
        }
        Ok(Self { task, params })
    }
}

pub const TOY_EXTRACTOR: &str = "toy";

/// Look up a registered extractor.
pub fn extractor_by_name(
    name: &str,
    task: &ToyTask,
    params: ToyExtractorParams,
) -> Result<Box<dyn ScoreExtractor>> {
    match name {
        TOY_EXTRACTOR => Ok(Box::new(ToyExtractor::new(task.clone(), params)?)),
        other => Err(Error::Config(format!(
            "unknown score extractor {other:?} (available: {TOY_EXTRACTOR:?})"
        ))),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

impl ScoreExtractor for ToyExtractor {
    fn name(&self) -> &str {
        TOY_EXTRACTOR
    }

    fn extract(&self, sample: &[f64], cond: &Condition) -> Result<ScoreVector> {
        if sample.len() != self.task.dim() {
            return Err(Error::input("sample dimension does not match task"));
        }
        let k = cond.class_id;
        let centroid = self.task.primary_mean(k)?;
        let s1 = (-sq_dist(sample, centroid) / self.params.tau).exp();
        let s2 = if cond.text_present {
            s1 * 0.5 * (1.0 + cosine(sample, centroid))
        } else {
            0.0
        };
        let s3 = self
            .task
            .components(k)
            .iter()
            .map(|c| sq_dist(sample, &c.mean).sqrt())
            .fold(f64::INFINITY, f64::min);
        let s4 = (self.task.log_density(k, sample)? / self.task.dim() as f64).exp();
        let inf_norm = sample.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let s5 = 1.0 / (1.0 + (inf_norm - self.params.clip).max(0.0));
        ScoreVector::new([s1, s2, s3, s4, s5], cond.text_present)
    }
}

/// The `5 -> hidden -> 3` classification head with its input standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HeadCheckpoint", into = "HeadCheckpoint")]
pub struct ScoreHead {
    mean: [f64; NUM_SCORES],
    std: [f64; NUM_SCORES],
    net: Mlp,
}

pub const HEAD_FORMAT: &str = "score-head-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadCheckpoint {
    format: String,
    mean: [f64; NUM_SCORES],
    std: [f64; NUM_SCORES],
    net: Mlp,
}

impl TryFrom<HeadCheckpoint> for ScoreHead {
    type Error = Error;
    fn try_from(c: HeadCheckpoint) -> Result<Self> {
        if c.format != HEAD_FORMAT {
            return Err(Error::input(format!("unsupported head format {:?}", c.format)));
        }
        ScoreHead::from_parts(c.mean, c.std, c.net)
    }
}

impl From<ScoreHead> for HeadCheckpoint {
    fn from(h: ScoreHead) -> Self {
        HeadCheckpoint {
            format: HEAD_FORMAT.to_string(),
            mean: h.mean,
            std: h.std,
            net: h.net,
        }
    }
}

impl ScoreHead {
    pub fn from_parts(mean: [f64; NUM_SCORES], std: [f64; NUM_SCORES], net: Mlp) -> Result<Self> {
        if net.input_dim() != NUM_SCORES || net.output_dim() != NUM_LABELS || net.num_layers() != 2
        {
            return Err(Error::input(format!(
                "score head must be [5, hidden, 3], got {:?}",
                net.dims()
            )));
        }
        if mean.iter().chain(&std).any(|x| !x.is_finite()) || std.iter().any(|s| *s <= 0.0) {
            return Err(Error::input("normalization statistics must be finite, std > 0"));
        }
        Ok(Self { mean, std, net })
    }

    /// Head with identity normalization and the given network.
    pub fn unnormalized(net: Mlp) -> Result<Self> {
        Self::from_parts([0.0; NUM_SCORES], [1.0; NUM_SCORES], net)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn normalization(&self) -> (&[f64; NUM_SCORES], &[f64; NUM_SCORES]) {
        (&self.mean, &self.std)
    }

    /// Standardized features; `s2` is pinned to 0 when no text is present.
    pub fn normalize(&self, scores: &ScoreVector) -> [f64; NUM_SCORES] {
        let mut z: [f64; NUM_SCORES] =
            std::array::from_fn(|i| (scores.scores[i] - self.mean[i]) / self.std[i]);
        if !scores.text_present {
            z[1] = 0.0;
        }
        z
    }

    pub fn logits(&self, scores: &ScoreVector) -> Result<Vec<f64>> {
        if scores.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::input("non-finite score vector"));
        }
        self.net.forward(&self.normalize(scores))
    }
}

/// Per-feature mean / std over a training set; `s2` statistics use text-present
/// samples only. Degenerate spreads fall back to std 1.
pub fn fit_normalization(samples: &[ScoreVector]) -> ([f64; NUM_SCORES], [f64; NUM_SCORES]) {
    let mut mean = [0.0; NUM_SCORES];
    let mut std = [1.0; NUM_SCORES];
    for i in 0..NUM_SCORES {
        let vals: Vec<f64> = samples
            .iter()
            .filter(|s| i != 1 || s.text_present)
            .map(|s| s.scores[i])
            .collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        mean[i] = m;
        if var.sqrt() > 1e-12 {
            std[i] = var.sqrt();
        }
    }
    (mean, std)
}

/// `softmax(head(normalize(scores)))`.
pub fn score_probs(head: &ScoreHead, scores: &ScoreVector) -> Result<ProbTriple> {
    let p = softmax(&head.logits(scores)?)?;
    Ok(ProbTriple::from_probs(&p))
}

/// Fraction of samples whose most probable label (ties toward Good) matches.
pub fn head_accuracy(head: &ScoreHead, data: &[AnnotatedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("accuracy of an empty dataset"));
    }
    let mut correct = 0usize;
    for s in data {
        if score_probs(head, &s.score_vector()?)?.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy of the head over `batch`.
pub fn ce_loss(head: &ScoreHead, batch: &[AnnotatedSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut total = 0.0;
    for s in batch {
        let p = score_probs(head, &s.score_vector()?)?;
        total += cross_entropy(&p.as_array(), s.label.index())?;
    }
    Ok(total / batch.len() as f64)
}

/// [`ce_loss`] and its gradient with respect to the head's network parameters.
pub fn ce_loss_grad(head: &ScoreHead, batch: &[AnnotatedSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let n = batch.len() as f64;
    let mut grads = vec![0.0; head.net.num_params()];
    let mut total = 0.0;
    for s in batch {
        let z = head.normalize(&s.score_vector()?);
        let trace = head.net.forward_trace(&z)?;
        let p = softmax(trace.output())?;
        total += cross_entropy(&p, s.label.index())?;
        let upstream: Vec<f64> = softmax_cross_entropy_grad(&p, s.label.index())?
            .into_iter()
            .map(|g| g / n)
            .collect();
        head.net.backward_accumulate(&trace, &upstream, &mut grads)?;
    }
    Ok((total / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Fraction of the data held out for validation accuracy.
    pub val_fraction: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 2000,
            batch_size: 128,
            optimizer: AdamWConfig::new(1e-3, 0, 0.0),
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub final_loss: Option<f64>,
}

/// Deterministic train/validation split by a seeded shuffle.
pub fn split_train_val(
    data: &[AnnotatedSample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<AnnotatedSample>, Vec<AnnotatedSample>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from(seed, &[0]);
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = ((data.len() as f64) * val_fraction).floor() as usize;
    let val = idx[..n_val].iter().map(|&i| data[i]).collect();
    let train = idx[n_val..].iter().map(|&i| data[i]).collect();
    (train, val)
}

/// Fit the head to annotated samples by minimizing mean cross-entropy with AdamW.
pub fn train_head(
    data: &[AnnotatedSample],
    cfg: &HeadTrainConfig,
    seed: u64,
) -> Result<(ScoreHead, HeadReport)> {
    cfg.optimizer.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config(format!("invalid head training config {cfg:?}")));
    }
    for label in [Label::Good, Label::Medium, Label::Bad] {
        if !data.iter().any(|s| s.label == label) {
            return Err(Error::input(format!("no annotated samples labelled {label:?}")));
        }
    }
    let (train, val) = split_train_val(data, cfg.val_fraction, seed);
    if train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let vectors = train
        .iter()
        .map(AnnotatedSample::score_vector)
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = fit_normalization(&vectors);
    let mut init_rng = rng_from(seed, &[1]);
    let net = Mlp::init(&[NUM_SCORES, cfg.hidden, NUM_LABELS], &mut init_rng)?;
    let mut head = ScoreHead::from_parts(mean, std, net)?;

    let mut batch_rng = rng_from(seed, &[2]);
    let mut opt = AdamW::new(cfg.optimizer, head.net.num_params());
    let mut params = head.net.params().to_vec();
    let mut final_loss = None;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        batch.extend((0..cfg.batch_size).map(|_| train[batch_rng.random_range(0..train.len())]));
        let (loss, grads) = ce_loss_grad(&head, &batch)?;
        let diverged = |message: String| Error::Divergence {
            phase: "train-scorer".into(),
            step,
            message,
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        opt.step(&mut params, &grads).map_err(|e| diverged(e.to_string()))?;
        head.net.set_params(&params).map_err(|e| diverged(e.to_string()))?;
        final_loss = Some(loss);
    }
    let report = HeadReport {
        train_accuracy: head_accuracy(&head, &train)?,
        val_accuracy: if val.is_empty() {
            None
        } else {
            Some(head_accuracy(&head, &val)?)
        },
        train_size: train.len(),
        val_size: val.len(),
        final_loss,
    };
    Ok((head, report))
}

/// Hidden ground-truth rater:
/// `U = w · (s1, s2, -s3, s4, s5) + noise_std · N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAnnotator {
    pub weights: [f64; NUM_SCORES],
    pub noise_std: f64,
}

impl Default for SyntheticAnnotator {
    fn default() -> Self {
        Self {
            weights: [1.0, 0.25, 0.5, 1.0, 1.0],
            noise_std: 0.01,
        }
    }
}

impl SyntheticAnnotator {
    pub fn clean_utility(&self, s: &ScoreVector) -> f64 {
        let signed = [
            s.scores[0],
            s.scores[1],
            -s.scores[2],
            s.scores[3],
            s.scores[4],
        ];
        self.weights.iter().zip(signed).map(|(w, x)| w * x).sum()
    }

    pub fn utility<R: Rng + ?Sized>(&self, s: &ScoreVector, rng: &mut R) -> f64 {
        let noise: f64 = rng.sample(StandardNormal);
        self.clean_utility(s) + self.noise_std * noise
    }

    /// Tertile labels over the pool: the top third by utility is Good, the
    /// middle third Medium, the rest Bad (ties keep pool order).
    pub fn annotate<R: Rng + ?Sized>(
        &self,
        pool: &[ScoreVector],
        rng: &mut R,
    ) -> Vec<AnnotatedSample> {
        let utilities: Vec<f64> = pool.iter().map(|s| self.utility(s, rng)).collect();
        tertile_labels(&utilities)
            .into_iter()
            .zip(pool)
            .map(|(label, s)| AnnotatedSample::new(*s, label))
            .collect()
    }
}

/// Rank-based tertile labelling, highest utility first.
pub fn tertile_labels(utilities: &[f64]) -> Vec<Label> {
    let n = utilities.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| utilities[b].total_cmp(&utilities[a]));
    let mut labels = vec![Label::Bad; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = if 3 * rank < n {
            Label::Good
        } else if 3 * rank < 2 * n {
            Label::Medium
        } else {
            Label::Bad
        };
    }
    labels
}

/// Draw one guided sample per condition (seed derived from `seed` and the
/// condition index) and return its score vector.
pub fn score_generations(
    model: &VelocityModel,
    extractor: &dyn ScoreExtractor,
    conds: &[Condition],
    gamma: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<ScoreVector>> {
    use rayon::prelude::*;
    conds
        .par_iter()
        .enumerate()
        .map(|(i, cond)| {
            let mut rng = rng_from(seed, &[i as u64]);
            let x = sample(model, cond, gamma, n_steps, &mut rng)?;
            extractor.extract(&x, cond)
        })
        .collect()
}
