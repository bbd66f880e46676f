//! Flow-DPO objective and the two-stage curriculum trainer.
//!
//! For a pair with winner `w` and loser `l`, one timestep `t` shared by both
//! sides and independent noise `eps_w`, `eps_l`, let
//! `E_m^s = ‖v^s - u_m(a_t^s, t)‖²` for model `m ∈ {policy, reference}`. The
//! per-pair loss is
//!
//! ```text
//! z    = -(beta / 2) · [(E_pol^w - E_ref^w) - (E_pol^l - E_ref^l)]
//! loss = -ln σ(z)
//! ```
//!
//! so `z = 0` (loss `ln 2`) whenever the policy equals the reference.
//!
//! The curriculum trains first on pairs whose complexity score strictly exceeds
//! `score_delta` (clearly separated pairs), then on the rest, which always
//! includes the zero-score human pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{interpolate, standard_normal, Condition, VelocityModel};
use crate::nn::{AdamW, AdamWConfig};
use crate::pairgen::PreferencePair;
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Stage 1 on easy pairs, then stage 2 on the remainder.
    Curriculum,
    /// One stage over all pairs in random order.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub score_delta: f64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
    pub seed: u64,
}

impl DpoConfig {
    /// Full-scale settings: 12K steps at batch 8, AdamW 5e-6 with 1K warmup,
    /// beta 600, threshold 0.7.
    pub fn full_scale() -> Self {
        Self {
            beta: 600.0,
            score_delta: 0.7,
            stage1_steps: 6000,
            stage2_steps: 6000,
            batch_size: 8,
            optimizer: AdamWConfig::new(5e-6, 1000, 0.0),
            schedule: Schedule::Curriculum,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !self.score_delta.is_finite() {
            return Err(Error::Config("score_delta must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

impl Default for DpoConfig {
    /// Desk-scale defaults for the toy task.
    fn default() -> Self {
        Self {
            beta: 20.0,
            score_delta: 0.7,
            stage1_steps: 1000,
            stage2_steps: 1000,
            batch_size: 8,
            optimizer: AdamWConfig::new(1e-4, 80, 0.0),
            schedule: Schedule::Curriculum,
            seed: 0,
        }
    }
}

/// Partition of a dataset by the complexity threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSplit {
    pub stage1: Vec<PreferencePair>,
    pub stage2: Vec<PreferencePair>,
}

/// `score_c > score_delta` goes to stage 1, everything else to stage 2; order is kept.
pub fn split_curriculum(pairs: &[PreferencePair], score_delta: f64) -> CurriculumSplit {
    let (stage1, stage2) = pairs.iter().cloned().partition(|p| p.score_c > score_delta);
    CurriculumSplit { stage1, stage2 }
}

/// Noise shared by the policy and reference terms of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNoise {
    pub t: f64,
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
}

pub fn draw_noise<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<PairNoise> {
    (0..count)
        .map(|_| {
            let t = rng.random();
            let eps_w = standard_normal(dim, rng);
            let eps_l = standard_normal(dim, rng);
            PairNoise { t, eps_w, eps_l }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    /// Pre-sigmoid argument `z` per pair.
    pub args: Vec<f64>,
}

impl DpoLoss {
    pub fn mean_arg(&self) -> f64 {
        self.args.iter().sum::<f64>() / self.args.len() as f64
    }
}

/// `-ln σ(z)` without overflow.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `σ(-z)`, the magnitude of `d(-ln σ(z))/dz`.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

struct Side {
    a_t: Vec<f64>,
    v: Vec<f64>,
}

fn sides(pair: &PreferencePair, noise: &PairNoise) -> Result<(Side, Side)> {
    let w = interpolate(&pair.winner, &noise.eps_w, noise.t)?;
    let l = interpolate(&pair.loser, &noise.eps_l, noise.t)?;
    Ok((
        Side {
            a_t: w.a_t,
            v: w.v_target,
        },
        Side {
            a_t: l.a_t,
            v: l.v_target,
        },
    ))
}

fn conditional(cond: &Condition) -> Condition {
    Condition {
        drop_flag: false,
        ..cond.clone()
    }
}

fn sq_err(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_batch(
    policy: &VelocityModel,
    reference: &VelocityModel,
    pairs: &[&PreferencePair],
    noise: &[PairNoise],
) -> Result<()> {
    if !policy.same_architecture(reference) {
        return Err(Error::input("policy and reference architectures differ"));
    }
    if pairs.is_empty() || pairs.len() != noise.len() {
        return Err(Error::input(format!(
            "need one noise draw per pair ({} pairs, {} draws)",
            pairs.len(),
            noise.len()
        )));
    }
    Ok(())
}

/// Flow-DPO loss averaged over the batch.
pub fn flow_dpo_loss(
    policy: &VelocityModel,
    reference: &VelocityModel,
    pairs: &[&PreferencePair],
    noise: &[PairNoise],
    beta: f64,
) -> Result<DpoLoss> {
    check_batch(policy, reference, pairs, noise)?;
    let mut total = 0.0;
    let mut args = Vec::with_capacity(pairs.len());
    for (pair, nz) in pairs.iter().zip(noise) {
        let cond = conditional(&pair.cond);
        let (w, l) = sides(pair, nz)?;
        let e_pw = sq_err(&policy.predict(&w.a_t, nz.t, &cond)?, &w.v);
        let e_rw = sq_err(&reference.predict(&w.a_t, nz.t, &cond)?, &w.v);
        let e_pl = sq_err(&policy.predict(&l.a_t, nz.t, &cond)?, &l.v);
        let e_rl = sq_err(&reference.predict(&l.a_t, nz.t, &cond)?, &l.v);
        let z = -(beta / 2.0) * ((e_pw - e_rw) - (e_pl - e_rl));
        total += neg_log_sigmoid(z);
        args.push(z);
    }
    Ok(DpoLoss {
        loss: total / pairs.len() as f64,
        args,
    })
}

/// [`flow_dpo_loss`] and its gradient with respect to the policy parameters.
pub fn flow_dpo_loss_grad(
    policy: &VelocityModel,
    reference: &VelocityModel,
    pairs: &[&PreferencePair],
    noise: &[PairNoise],
    beta: f64,
) -> Result<(DpoLoss, Vec<f64>)> {
    check_batch(policy, reference, pairs, noise)?;
    let n = pairs.len() as f64;
    let mut grads = vec![0.0; policy.num_params()];
    let mut total = 0.0;
    let mut args = Vec::with_capacity(pairs.len());
    for (pair, nz) in pairs.iter().zip(noise) {
        let cond = conditional(&pair.cond);
        let (w, l) = sides(pair, nz)?;
        let tw = policy.trace(&w.a_t, nz.t, &cond)?;
        let tl = policy.trace(&l.a_t, nz.t, &cond)?;
        let e_pw = sq_err(tw.output(), &w.v);
        let e_pl = sq_err(tl.output(), &l.v);
        let e_rw = sq_err(&reference.predict(&w.a_t, nz.t, &cond)?, &w.v);
        let e_rl = sq_err(&reference.predict(&l.a_t, nz.t, &cond)?, &l.v);
        let z = -(beta / 2.0) * ((e_pw - e_rw) - (e_pl - e_rl));
        total += neg_log_sigmoid(z);
        args.push(z);

        // dL/dz = -σ(-z); dz/dE_pol^w = -beta/2; dz/dE_pol^l = +beta/2; dE/du = 2(u - v).
        let scale = sigmoid_neg(z) * beta / n;
        let up_w: Vec<f64> = tw.output().iter().zip(&w.v).map(|(u, v)| scale * (u - v)).collect();
        let up_l: Vec<f64> = tl.output().iter().zip(&l.v).map(|(u, v)| -scale * (u - v)).collect();
        policy.backprop(&tw, &up_w, &mut grads)?;
        policy.backprop(&tl, &up_l, &mut grads)?;
    }
    Ok((
        DpoLoss {
            loss: total / n,
            args,
        },
        grads,
    ))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Stage {
        stage: u8,
        pairs: usize,
        steps: u64,
        skipped: bool,
    },
    Step {
        step: u64,
        stage: u8,
        loss: f64,
        sigma_arg_mean: f64,
        lr: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn steps(&self) -> impl Iterator<Item = &LogRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, LogRecord::Step { .. }))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps()
            .map(|r| match r {
                LogRecord::Step { loss, .. } => *loss,
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn stage_skipped(&self, stage: u8) -> bool {
        self.records.iter().any(
            |r| matches!(r, LogRecord::Stage { stage: s, skipped: true, .. } if *s == stage),
        )
    }

    pub fn to_jsonl(&self) -> Result<String> {
        crate::io::to_jsonl(&self.records)
    }
}

struct StagePlan {
    stage: u8,
    pairs: Vec<PreferencePair>,
    steps: u64,
}

fn plan(pairs: &[PreferencePair], cfg: &DpoConfig) -> Vec<StagePlan> {
    match cfg.schedule {
        Schedule::Single => vec![StagePlan {
            stage: 1,
            pairs: pairs.to_vec(),
            steps: cfg.total_steps(),
        }],
        Schedule::Curriculum => {
            let split = split_curriculum(pairs, cfg.score_delta);
            // An empty stage hands its step budget to the other one.
            let (s1, s2) = match (split.stage1.is_empty(), split.stage2.is_empty()) {
                (true, _) => (0, cfg.total_steps()),
                (_, true) => (cfg.total_steps(), 0),
                _ => (cfg.stage1_steps, cfg.stage2_steps),
            };
            vec![
                StagePlan {
                    stage: 1,
                    pairs: split.stage1,
                    steps: s1,
                },
                StagePlan {
                    stage: 2,
                    pairs: split.stage2,
                    steps: s2,
                },
            ]
        }
    }
}

/// Align `policy_init` on `pairs` against a frozen copy of itself.
///
/// Batches are drawn with replacement from the current stage's pairs, and the
/// optimizer (with its warmup) restarts at every stage. All randomness comes
/// from one stream seeded by `cfg.seed`, consumed only by stages that run.
pub fn dpo_train(
    policy_init: &VelocityModel,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<(VelocityModel, TrainingLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::input("DPO needs a non-empty pair dataset"));
    }
    let reference = policy_init.clone();
    let mut policy = policy_init.clone();
    let mut rng = rng_from(cfg.seed, &[]);
    let mut log = TrainingLog::default();
    let mut global_step = 0u64;
    for stage in plan(pairs, cfg) {
        let skipped = stage.pairs.is_empty();
        log.records.push(LogRecord::Stage {
            stage: stage.stage,
            pairs: stage.pairs.len(),
            steps: if skipped { 0 } else { stage.steps },
            skipped,
        });
        if skipped {
            log::info!("stage {} has no pairs, skipped", stage.stage);
            continue;
        }
        let mut opt = AdamW::new(cfg.optimizer, policy.num_params());
        let mut params = policy.params();
        for _ in 0..stage.steps {
            let batch: Vec<&PreferencePair> = (0..cfg.batch_size)
                .map(|_| &stage.pairs[rng.random_range(0..stage.pairs.len())])
                .collect();
            let noise = draw_noise(batch.len(), policy.dim(), &mut rng);
            let (loss, grads) = flow_dpo_loss_grad(&policy, &reference, &batch, &noise, cfg.beta)?;
            let diverged = |message: String| Error::Divergence {
                phase: format!("dpo stage {}", stage.stage),
                step: global_step,
                message,
            };
            if !loss.loss.is_finite() {
                return Err(diverged(format!("loss {}", loss.loss)));
            }
            let lr = opt.step(&mut params, &grads).map_err(|e| diverged(e.to_string()))?;
            policy.set_params(&params).map_err(|e| diverged(e.to_string()))?;
            log.records.push(LogRecord::Step {
                step: global_step,
                stage: stage.stage,
                loss: loss.loss,
                sigma_arg_mean: loss.mean_arg(),
                lr,
            });
            global_step += 1;
        }
    }
    Ok((policy, log))
}
