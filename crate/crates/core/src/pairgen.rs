//! Preference-pair synthesis.
//!
//! For every prompt the generator draws `N` candidates, scores each one with the
//! head, and pairs the most probable Good candidate (winner) against the most
//! probable Bad candidate (loser). Each pair carries a complexity score
//!
//! ```text
//! score_c = ((p_w.good - p_l.good) + (p_l.bad - p_w.bad)) / 2
//! ```
//!
//! where high values mark pairs that are easy to tell apart. Annotator-labelled
//! ("human") pairs are merged in afterwards with `score_c` forced to 0.
//!
//! Pair files are JSON lines: an optional header record followed by pair
//! records, each tagged with `"kind"`.

use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample, Condition, VelocityModel};
use crate::io;
use crate::scorer::{score_probs, ProbTriple, ScoreExtractor, ScoreHead, SyntheticAnnotator};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Auto,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub cond: Condition,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub p_w: ProbTriple,
    pub p_l: ProbTriple,
    pub score_c: f64,
    pub origin: Origin,
}

impl PreferencePair {
    pub fn is_finite(&self) -> bool {
        self.winner.iter().chain(&self.loser).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairGenConfig {
    pub num_candidates: usize,
    pub gamma: f64,
    pub n_steps: usize,
    /// Auto pairs with `score_c` below this are dropped.
    pub min_gap: f64,
    pub seed: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        Self {
            num_candidates: 5,
            gamma: 4.5,
            n_steps: 50,
            min_gap: 0.05,
            seed: 0,
        }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates < 2 {
            return Err(Error::Config("num_candidates must be >= 2".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if self.min_gap.is_nan() || self.min_gap < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config("min_gap must be >= 0 and gamma finite".into()));
        }
        Ok(())
    }
}

pub const PAIRS_FORMAT: &str = "pairs-v1";

/// Provenance of a pair dataset: enough to regenerate its auto pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub model_id: String,
    pub head_id: String,
    pub extractor: String,
    pub conditions_id: String,
    pub config: PairGenConfig,
    pub num_prompts: usize,
    pub num_rejected: usize,
    pub num_filtered: usize,
    pub num_auto: usize,
    pub num_human: usize,
    #[serde(default)]
    pub human_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub header: DatasetHeader,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum PairRecord {
    Header(DatasetHeader),
    Pair(PreferencePair),
}

impl PairDataset {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut records = Vec::with_capacity(self.pairs.len() + 1);
        records.push(PairRecord::Header(self.header.clone()));
        records.extend(self.pairs.iter().cloned().map(PairRecord::Pair));
        io::to_jsonl(&records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, pairs) = read_pair_file(path)?;
        let header = header.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing dataset header record".into(),
        })?;
        Ok(Self { header, pairs })
    }
}

/// Write bare pair records (no header), the format [`ingest_human`] reads.
pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let records: Vec<PairRecord> = pairs.iter().cloned().map(PairRecord::Pair).collect();
    io::write_text(path, &io::to_jsonl(&records)?)
}

fn read_pair_file(path: &Path) -> Result<(Option<DatasetHeader>, Vec<PreferencePair>)> {
    let records: Vec<PairRecord> = io::read_jsonl(path)?;
    let mut header = None;
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        match r {
            PairRecord::Header(h) if header.is_none() && pairs.is_empty() => header = Some(h),
            PairRecord::Header(_) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: pairs.len() + 2,
                    message: "header record must come first".into(),
                })
            }
            PairRecord::Pair(p) => pairs.push(p),
        }
    }
    Ok((header, pairs))
}

/// Candidate seed for prompt `cond_index`, candidate `candidate`.
pub fn candidate_seed(base_seed: u64, cond_index: usize, candidate: usize) -> u64 {
    crate::seed::derive_seed(base_seed, &[cond_index as u64, candidate as u64])
}

/// `n` guided samples for one prompt, each from its own derived seed.
pub fn generate_candidates(
    model: &VelocityModel,
    cond: &Condition,
    cond_index: usize,
    n: usize,
    gamma: f64,
    n_steps: usize,
    base_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::input(format!("need at least 2 candidates, got {n}")));
    }
    (0..n)
        .map(|c| {
            let mut rng = rng_from(candidate_seed(base_seed, cond_index, c), &[]);
            sample(model, cond, gamma, n_steps, &mut rng)
        })
        .collect()
}

/// `(argmax good, argmax bad)` with ties to the smallest index, or `None` when
/// both land on the same candidate.
pub fn select_pair(probs: &[ProbTriple]) -> Result<Option<(usize, usize)>> {
    if probs.is_empty() {
        return Err(Error::input("no candidates to select from"));
    }
    let mut i = 0;
    let mut j = 0;
    for (k, p) in probs.iter().enumerate().skip(1) {
        if p.good > probs[i].good {
            i = k;
        }
        if p.bad > probs[j].bad {
            j = k;
        }
    }
    Ok((i != j).then_some((i, j)))
}

pub fn complexity_score(p_w: &ProbTriple, p_l: &ProbTriple) -> f64 {
    0.5 * ((p_w.good - p_l.good) + (p_l.bad - p_w.bad))
}

/// Drop auto pairs below `min_gap` and any pair with a non-finite sample entry.
pub fn refilter(pairs: Vec<PreferencePair>, min_gap: f64) -> Vec<PreferencePair> {
    pairs
        .into_iter()
        .filter(|p| p.is_finite() && (p.origin == Origin::Human || p.score_c >= min_gap))
        .collect()
}

/// Load annotator pairs; every pair becomes `Origin::Human` with `score_c = 0`.
pub fn ingest_human(path: &Path) -> Result<Vec<PreferencePair>> {
    let (_, pairs) = read_pair_file(path)?;
    Ok(pairs
        .into_iter()
        .map(|p| PreferencePair {
            score_c: 0.0,
            origin: Origin::Human,
            ..p
        })
        .collect())
}

/// Outcome of the best-vs-worst step for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptOutcome {
    Pair(PreferencePair),
    Rejected { cond_index: usize },
}

/// Generate, score and select for a single prompt.
pub fn pair_for_prompt(
    model: &VelocityModel,
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
    cond: &Condition,
    cond_index: usize,
    cfg: &PairGenConfig,
) -> Result<PromptOutcome> {
    let candidates = generate_candidates(
        model,
        cond,
        cond_index,
        cfg.num_candidates,
        cfg.gamma,
        cfg.n_steps,
        cfg.seed,
    )?;
    let probs = candidates
        .iter()
        .map(|x| score_probs(head, &extractor.extract(x, cond)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(match select_pair(&probs)? {
        Some((i, j)) => PromptOutcome::Pair(PreferencePair {
            cond: cond.clone(),
            winner: candidates[i].clone(),
            loser: candidates[j].clone(),
            p_w: probs[i],
            p_l: probs[j],
            score_c: complexity_score(&probs[i], &probs[j]),
            origin: Origin::Auto,
        }),
        None => PromptOutcome::Rejected { cond_index },
    })
}

/// Full auto-pair pipeline followed by the human-pair merge.
///
/// Prompts are processed in parallel; output order follows `conds`.
pub fn build_dataset(
    model: &VelocityModel,
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
    conds: &[Condition],
    cfg: &PairGenConfig,
    human_pairs: Option<&Path>,
) -> Result<PairDataset> {
    cfg.validate()?;
    let outcomes = conds
        .par_iter()
        .enumerate()
        .map(|(i, cond)| pair_for_prompt(model, head, extractor, cond, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut auto = Vec::with_capacity(outcomes.len());
    let mut rejected = 0;
    for outcome in outcomes {
        match outcome {
            PromptOutcome::Pair(p) => auto.push(p),
            PromptOutcome::Rejected { cond_index } => {
                debug!("prompt {cond_index}: best and worst candidate coincide, no pair");
                rejected += 1;
            }
        }
    }
    let before = auto.len();
    let mut pairs = refilter(auto, cfg.min_gap);
    let num_auto = pairs.len();
    let human = match human_pairs {
        Some(path) => ingest_human(path)?,
        None => Vec::new(),
    };
    let num_human = human.len();
    pairs.extend(human);
    info!(
        "{} prompts: {rejected} rejected, {} below min_gap, {num_auto} auto + {num_human} human pairs",
        conds.len(),
        before - num_auto
    );
    Ok(PairDataset {
        header: DatasetHeader {
            format: PAIRS_FORMAT.to_string(),
            model_id: io::json_id(model)?,
            head_id: io::json_id(head)?,
            extractor: extractor.name().to_string(),
            conditions_id: io::json_id(&conds)?,
            config: cfg.clone(),
            num_prompts: conds.len(),
            num_rejected: rejected,
            num_filtered: before - num_auto,
            num_auto,
            num_human,
            human_source: human_pairs.map(|p| p.display().to_string()),
        },
        pairs,
    })
}

/// Annotator-style pairs: two candidates per prompt, the one with the higher
/// hidden utility wins (ties go to the first). Probabilities are recorded from
/// the head for reference; `score_c` is 0.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_human_pairs(
    model: &VelocityModel,
    head: &ScoreHead,
    extractor: &dyn ScoreExtractor,
    annotator: &SyntheticAnnotator,
    conds: &[Condition],
    gamma: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    conds
        .par_iter()
        .enumerate()
        .map(|(i, cond)| {
            let candidates = generate_candidates(model, cond, i, 2, gamma, n_steps, seed)?;
            let mut rater = rng_from(seed, &[i as u64, u64::MAX]);
            let mut rated = Vec::with_capacity(2);
            for x in &candidates {
                let scores = extractor.extract(x, cond)?;
                rated.push((annotator.utility(&scores, &mut rater), score_probs(head, &scores)?));
            }
            let (w, l) = if rated[1].0 > rated[0].0 { (1, 0) } else { (0, 1) };
            Ok(PreferencePair {
                cond: cond.clone(),
                winner: candidates[w].clone(),
                loser: candidates[l].clone(),
                p_w: rated[w].1,
                p_l: rated[l].1,
                score_c: 0.0,
                origin: Origin::Human,
            })
        })
        .collect()
}

/// Path of the human pair file that sits next to a dataset.
pub fn default_human_path(dir: &Path) -> PathBuf {
    dir.join("human_pairs.jsonl")
}
