//! Offline evaluation: distribution match, head-scored quality and pairwise
//! win rate of a policy against its reference.
//!
//! Prompt `i` always draws its initial noise from the seed derived from
//! `(seed, i)`, so the policy and reference samples for a prompt start from the
//! same point and their scores can be compared pair-wise.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample, Condition, ToyTask, VelocityModel};
use crate::io;
use crate::scorer::{score_probs, ScoreExtractor, ScoreHead};
use crate::seed::rng_from;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    total / (a.len() * b.len()) as f64
}

/// V-statistic energy distance `2 E‖X - Y‖ - E‖X - X'‖ - E‖Y - Y'‖`.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::input("energy distance needs two non-empty sets"));
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != d) {
        return Err(Error::input("energy distance: mixed sample dimensions"));
    }
    Ok(2.0 * mean_pairwise(x, y) - mean_pairwise(x, x) - mean_pairwise(y, y))
}

/// Sampling settings shared by every evaluation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub gamma: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma: 4.5,
            n_steps: 50,
            seed: 0,
            bootstrap_resamples: 2000,
        }
    }
}

/// One guided sample per prompt, prompt `i` seeded from `(seed, i)`.
pub fn prompt_samples(
    model: &VelocityModel,
    conds: &[Condition],
    gamma: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    conds
        .par_iter()
        .enumerate()
        .map(|(i, cond)| {
            let mut rng = rng_from(seed, &[i as u64]);
            sample(model, cond, gamma, n_steps, &mut rng)
        })
        .collect()
}

fn good_probs(
    samples: &[Vec<f64>],
    conds: &[Condition],
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .zip(conds)
        .map(|(x, cond)| Ok(score_probs(head, &extractor.extract(x, cond)?)?.good))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodProbEval {
    pub mean: f64,
    pub per_prompt: Vec<f64>,
}

/// Mean `p(Good)` over one sample per prompt.
pub fn mean_good_prob(
    model: &VelocityModel,
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
    conds: &[Condition],
    cfg: &EvalConfig,
) -> Result<GoodProbEval> {
    if conds.is_empty() {
        return Err(Error::input("no prompts to evaluate"));
    }
    let samples = prompt_samples(model, conds, cfg.gamma, cfg.n_steps, cfg.seed)?;
    let per_prompt = good_probs(&samples, conds, head, extractor)?;
    Ok(GoodProbEval {
        mean: per_prompt.iter().sum::<f64>() / per_prompt.len() as f64,
        per_prompt,
    })
}

/// 1 for a strict policy win, 0.5 for a tie, 0 for a loss.
pub fn outcome(policy_good: f64, reference_good: f64) -> f64 {
    if policy_good > reference_good {
        1.0
    } else if policy_good == reference_good {
        0.5
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinRateEval {
    pub win_rate: f64,
    pub per_prompt: Vec<f64>,
}

/// Fraction of prompts where the policy sample's `p(Good)` beats the reference's
/// under shared noise; ties count one half.
pub fn win_rate(
    policy: &VelocityModel,
    reference: &VelocityModel,
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
    conds: &[Condition],
    cfg: &EvalConfig,
) -> Result<WinRateEval> {
    if !policy.same_architecture(reference) {
        return Err(Error::input("policy and reference architectures differ"));
    }
    let pol = mean_good_prob(policy, head, extractor, conds, cfg)?;
    let reference = mean_good_prob(reference, head, extractor, conds, cfg)?;
    let per_prompt: Vec<f64> = pol
        .per_prompt
        .iter()
        .zip(&reference.per_prompt)
        .map(|(p, r)| outcome(*p, *r))
        .collect();
    Ok(WinRateEval {
        win_rate: per_prompt.iter().sum::<f64>() / per_prompt.len() as f64,
        per_prompt,
    })
}

/// One-sided percentile-bootstrap lower bound on the mean of `values`.
pub fn bootstrap_lower_bound(values: &[f64], resamples: usize, alpha: f64, seed: u64) -> Result<f64> {
    if values.is_empty() || resamples == 0 || !(0.0..1.0).contains(&alpha) {
        return Err(Error::input("bootstrap needs data, resamples > 0 and alpha in [0, 1)"));
    }
    let mut rng = rng_from(seed, &[]);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let idx = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    Ok(means[idx])
}

pub const REPORT_FORMAT: &str = "eval-report-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format: String,
    pub policy_id: String,
    pub reference_id: String,
    pub head_id: String,
    pub conditions_id: String,
    pub config: EvalConfig,
    pub n_prompts: usize,
    /// Policy samples vs. samples from the true task distribution.
    pub energy_distance: f64,
    pub energy_distance_reference: f64,
    pub mean_good_prob_policy: f64,
    pub mean_good_prob_reference: f64,
    /// Mean paired difference policy − reference in `p(Good)`.
    pub good_prob_margin: f64,
    /// One-sided 95% bootstrap lower bound on `good_prob_margin`.
    pub margin_ci_lower: f64,
    pub win_rate: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Fixed-order, human-readable summary.
    pub fn summary_table(&self) -> String {
        let rows = [
            ("prompts", self.n_prompts.to_string()),
            ("energy distance (policy)", format!("{:.6}", self.energy_distance)),
            ("energy distance (reference)", format!("{:.6}", self.energy_distance_reference)),
            ("mean p(Good) policy", format!("{:.6}", self.mean_good_prob_policy)),
            ("mean p(Good) reference", format!("{:.6}", self.mean_good_prob_reference)),
            ("p(Good) margin", format!("{:.6}", self.good_prob_margin)),
            ("margin 95% lower bound", format!("{:.6}", self.margin_ci_lower)),
            ("win rate", format!("{:.4}", self.win_rate)),
        ];
        rows.iter()
            .map(|(k, v)| format!("{k:<30}{v:>14}\n"))
            .collect()
    }
}

/// Per-prompt values behind a report, kept for recount checks.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetail {
    pub policy_good: Vec<f64>,
    pub reference_good: Vec<f64>,
    pub outcomes: Vec<f64>,
}

/// Compute every metric for `policy` against `reference` on `conds`.
pub fn evaluate(
    policy: &VelocityModel,
    reference: &VelocityModel,
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
    task: &ToyTask,
    conds: &[Condition],
    cfg: &EvalConfig,
) -> Result<(EvalReport, EvalDetail)> {
    if conds.is_empty() {
        return Err(Error::input("no prompts to evaluate"));
    }
    if !policy.same_architecture(reference) {
        return Err(Error::input("policy and reference architectures differ"));
    }
    let pol_samples = prompt_samples(policy, conds, cfg.gamma, cfg.n_steps, cfg.seed)?;
    let ref_samples = prompt_samples(reference, conds, cfg.gamma, cfg.n_steps, cfg.seed)?;
    let target = conds
        .iter()
        .enumerate()
        .map(|(i, c)| task.sample_class(c.class_id, &mut rng_from(cfg.seed, &[u64::MAX, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let policy_good = good_probs(&pol_samples, conds, head, extractor)?;
    let reference_good = good_probs(&ref_samples, conds, head, extractor)?;
    let n = conds.len() as f64;
    let outcomes: Vec<f64> = policy_good
        .iter()
        .zip(&reference_good)
        .map(|(p, r)| outcome(*p, *r))
        .collect();
    let diffs: Vec<f64> = policy_good
        .iter()
        .zip(&reference_good)
        .map(|(p, r)| p - r)
        .collect();
    let report = EvalReport {
        format: REPORT_FORMAT.to_string(),
        policy_id: io::json_id(policy)?,
        reference_id: io::json_id(reference)?,
        head_id: io::json_id(head)?,
        conditions_id: io::json_id(&conds)?,
        config: cfg.clone(),
        n_prompts: conds.len(),
        energy_distance: energy_distance(&pol_samples, &target)?,
        energy_distance_reference: energy_distance(&ref_samples, &target)?,
        mean_good_prob_policy: policy_good.iter().sum::<f64>() / n,
        mean_good_prob_reference: reference_good.iter().sum::<f64>() / n,
        good_prob_margin: diffs.iter().sum::<f64>() / n,
        margin_ci_lower: bootstrap_lower_bound(
            &diffs,
            cfg.bootstrap_resamples,
            0.05,
            crate::seed::derive_seed(cfg.seed, &[u64::MAX - 1]),
        )?,
        win_rate: outcomes.iter().sum::<f64>() / n,
    };
    Ok((
        report,
        EvalDetail {
            policy_good,
            reference_good,
            outcomes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{random_conditions, standard_normal, ToyTaskConfig};
    use crate::nn::Mlp;
    use crate::scorer::{ToyExtractor, ToyExtractorParams};

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = rng_from(1, &[]);
        let x: Vec<_> = (0..30).map(|_| standard_normal(3, &mut rng)).collect();
        assert!(energy_distance(&x, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn point_masses() {
        let x = vec![vec![0.0, 0.0]];
        let y = vec![vec![3.0, 4.0]];
        assert_eq!(energy_distance(&x, &y).unwrap(), 10.0);
    }

    #[test]
    fn energy_matches_brute_force_and_is_symmetric() {
        let mut rng = rng_from(2, &[]);
        let x: Vec<_> = (0..200).map(|_| standard_normal(4, &mut rng)).collect();
        let y: Vec<Vec<f64>> = (0..200)
            .map(|_| standard_normal(4, &mut rng).into_iter().map(|v| v + 0.5).collect())
            .collect();
        let mut xy = 0.0;
        let mut xx = 0.0;
        let mut yy = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                xy += dist(&x[i], &y[j]);
                xx += dist(&x[i], &x[j]);
                yy += dist(&y[i], &y[j]);
            }
        }
        let brute = (2.0 * xy - xx - yy) / 40_000.0;
        let fast = energy_distance(&x, &y).unwrap();
        assert!((fast - brute).abs() < 1e-10);
        assert!((energy_distance(&y, &x).unwrap() - fast).abs() < 1e-12);
        assert!(fast > 0.0);
    }

    #[test]
    fn energy_rejects_dimension_mismatch() {
        assert!(energy_distance(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
        assert!(energy_distance(&[], &[vec![0.0]]).is_err());
    }

    fn fixture() -> (ToyTask, VelocityModel, ScoreHead, ToyExtractor, Vec<Condition>) {
        let task = ToyTask::generate(
            &ToyTaskConfig {
                dim: 3,
                num_classes: 2,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let mut rng = rng_from(5, &[]);
        let model = VelocityModel::new(3, 2, &[8], 0.1, &mut rng).unwrap();
        let head = ScoreHead::unnormalized(Mlp::init(&[5, 6, 3], &mut rng).unwrap()).unwrap();
        let ex = ToyExtractor::new(task.clone(), ToyExtractorParams::default()).unwrap();
        let conds = random_conditions(100, 2, 0.5, &mut rng);
        (task, model, head, ex, conds)
    }

    fn cfg() -> EvalConfig {
        EvalConfig {
            n_steps: 5,
            seed: 9,
            bootstrap_resamples: 200,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_head_gives_one_third() {
        let (_, model, _, ex, conds) = fixture();
        let head = ScoreHead::unnormalized(Mlp::zeros(&[5, 2, 3]).unwrap()).unwrap();
        let g = mean_good_prob(&model, &head, &ex, &conds, &cfg()).unwrap();
        assert!(g.per_prompt.iter().all(|p| *p == 1.0 / 3.0));
        assert!((g.mean - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_good_prob_is_reproducible_and_recounts() {
        let (_, model, head, ex, conds) = fixture();
        let a = mean_good_prob(&model, &head, &ex, &conds, &cfg()).unwrap();
        let b = mean_good_prob(&model, &head, &ex, &conds, &cfg()).unwrap();
        assert_eq!(a, b);
        let mut total = 0.0;
        for p in &a.per_prompt {
            total += p;
        }
        assert_eq!(a.mean, total / 100.0);
    }

    #[test]
    fn self_win_rate_is_half() {
        let (_, model, head, ex, conds) = fixture();
        let w = win_rate(&model, &model.clone(), &head, &ex, &conds, &cfg()).unwrap();
        assert_eq!(w.win_rate, 0.5);
    }

    #[test]
    fn single_prompt_win() {
        let (_, model, head, ex, conds) = fixture();
        let mut other = model.clone();
        let p: Vec<f64> = model.params().iter().map(|x| x * 0.5).collect();
        other.set_params(&p).unwrap();
        let one = &conds[..1];
        let w = win_rate(&other, &model, &head, &ex, one, &cfg()).unwrap();
        let g_other = mean_good_prob(&other, &head, &ex, one, &cfg()).unwrap().mean;
        let g_model = mean_good_prob(&model, &head, &ex, one, &cfg()).unwrap().mean;
        assert_eq!(w.win_rate, outcome(g_other, g_model));
        assert_eq!(outcome(0.6, 0.4), 1.0);
    }

    #[test]
    fn report_fields_recompute_and_round_trip() {
        let (task, model, head, ex, conds) = fixture();
        let mut policy = model.clone();
        let p: Vec<f64> = model.params().iter().map(|x| x * 0.9).collect();
        policy.set_params(&p).unwrap();
        let (report, detail) = evaluate(&policy, &model, &head, &ex, &task, &conds, &cfg()).unwrap();
        let pol = mean_good_prob(&policy, &head, &ex, &conds, &cfg()).unwrap();
        let reference = mean_good_prob(&model, &head, &ex, &conds, &cfg()).unwrap();
        assert_eq!(report.mean_good_prob_policy, pol.mean);
        assert_eq!(report.mean_good_prob_reference, reference.mean);
        assert_eq!(detail.policy_good, pol.per_prompt);
        let w = win_rate(&policy, &model, &head, &ex, &conds, &cfg()).unwrap();
        assert_eq!(report.win_rate, w.win_rate);
        let wins = detail.outcomes.iter().sum::<f64>();
        assert_eq!(report.win_rate, wins / 100.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);

        let (again, _) = evaluate(&policy, &model, &head, &ex, &task, &conds, &cfg()).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn self_report_is_neutral() {
        let (task, model, head, ex, conds) = fixture();
        let (report, _) = evaluate(&model, &model, &head, &ex, &task, &conds, &cfg()).unwrap();
        assert_eq!(report.win_rate, 0.5);
        assert_eq!(report.good_prob_margin, 0.0);
        assert_eq!(report.energy_distance, report.energy_distance_reference);
    }

    #[test]
    fn bootstrap_bound_brackets_mean() {
        let values: Vec<f64> = (0..100).map(|i| (i % 7) as f64 * 0.1).collect();
        let mean = values.iter().sum::<f64>() / 100.0;
        let lb = bootstrap_lower_bound(&values, 1000, 0.05, 1).unwrap();
        assert!(lb < mean && lb > mean - 0.2);
        assert_eq!(bootstrap_lower_bound(&[0.25; 10], 50, 0.05, 1).unwrap(), 0.25);
    }
}
