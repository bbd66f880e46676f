//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every key is optional and falls back to the shipped defaults
//! (`configs/default.toml`). Unknown keys are collected across the whole
//! file and reported together, as are invalid values.

use std::path::{Path, PathBuf};

use flowpref_core::dpo::{DpoConfig, Schedule};
use flowpref_core::eval::EvalConfig;
use flowpref_core::flow::{PretrainConfig, ToyTaskConfig};
use flowpref_core::nn::AdamWConfig;
use flowpref_core::pairgen::PairGenConfig;
use flowpref_core::scorer::{HeadTrainConfig, SyntheticAnnotator, ToyExtractorParams, NUM_SCORES};
use flowpref_core::seed::{derive_seed, stage};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskSection,
    pub pretrain: PretrainSection,
    pub scorer: ScorerSection,
    pub pairgen: PairGenSection,
    pub dpo: DpoSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSection {
    pub dim: usize,
    pub num_classes: usize,
    pub components_per_class: usize,
    pub mean_radius: f64,
    pub component_scale: f64,
    pub primary_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub hidden: Vec<usize>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub cond_drop_prob: f64,
    pub heldout_size: usize,
    pub loss_ceiling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSection {
    pub extractor: String,
    pub tau: f64,
    pub clip: f64,
    /// Generations drawn from the pretrained model and annotated.
    pub pool_size: usize,
    pub text_prob: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub annotator_weights: [f64; NUM_SCORES],
    pub annotator_noise: f64,
    pub hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairGenSection {
    pub num_prompts: usize,
    pub text_prob: f64,
    pub num_candidates: usize,
    pub gamma: f64,
    pub n_steps: usize,
    pub min_gap: f64,
    /// Prompts rated by the synthetic annotator when no human file is given.
    pub human_prompts: usize,
    pub human_pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoSection {
    pub beta: f64,
    pub score_delta: f64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub num_prompts: usize,
    pub text_prob: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub bootstrap_resamples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            task: TaskSection::default(),
            pretrain: PretrainSection::default(),
            scorer: ScorerSection::default(),
            pairgen: PairGenSection::default(),
            dpo: DpoSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        let c = ToyTaskConfig::default();
        Self {
            dim: c.dim,
            num_classes: c.num_classes,
            components_per_class: c.components_per_class,
            mean_radius: c.mean_radius,
            component_scale: c.component_scale,
            primary_weight: c.primary_weight,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let c = PretrainConfig::default();
        Self {
            hidden: c.hidden,
            steps: c.steps,
            batch_size: c.batch_size,
            lr: c.optimizer.lr,
            warmup_steps: c.optimizer.warmup_steps,
            weight_decay: c.optimizer.weight_decay,
            cond_drop_prob: c.cond_drop_prob,
            heldout_size: c.heldout_size,
            loss_ceiling: c.loss_ceiling,
        }
    }
}

impl Default for ScorerSection {
    fn default() -> Self {
        let head = HeadTrainConfig::default();
        let ex = ToyExtractorParams::default();
        let ann = SyntheticAnnotator::default();
        Self {
            extractor: flowpref_core::scorer::TOY_EXTRACTOR.to_string(),
            tau: ex.tau,
            clip: ex.clip,
            pool_size: 3000,
            text_prob: 0.5,
            gamma: 4.5,
            n_steps: 50,
            annotator_weights: ann.weights,
            annotator_noise: ann.noise_std,
            hidden: head.hidden,
            steps: head.steps,
            batch_size: head.batch_size,
            lr: head.optimizer.lr,
            warmup_steps: head.optimizer.warmup_steps,
            weight_decay: head.optimizer.weight_decay,
            val_fraction: head.val_fraction,
        }
    }
}

impl Default for PairGenSection {
    fn default() -> Self {
        let c = PairGenConfig::default();
        Self {
            num_prompts: 2000,
            text_prob: 0.5,
            num_candidates: c.num_candidates,
            gamma: c.gamma,
            n_steps: c.n_steps,
            min_gap: c.min_gap,
            human_prompts: 100,
            human_pairs: None,
        }
    }
}

impl Default for DpoSection {
    fn default() -> Self {
        let c = DpoConfig::default();
        Self {
            beta: c.beta,
            score_delta: c.score_delta,
            stage1_steps: c.stage1_steps,
            stage2_steps: c.stage2_steps,
            batch_size: c.batch_size,
            lr: c.optimizer.lr,
            warmup_steps: c.optimizer.warmup_steps,
            weight_decay: c.optimizer.weight_decay,
            schedule: c.schedule,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let c = EvalConfig::default();
        Self {
            num_prompts: 600,
            text_prob: 0.5,
            gamma: c.gamma,
            n_steps: c.n_steps,
            bootstrap_resamples: c.bootstrap_resamples,
        }
    }
}

/// Per-stage seeds, all derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub task: u64,
    pub pretrain: u64,
    pub annotate: u64,
    pub head: u64,
    pub pairs: u64,
    pub human: u64,
    pub dpo: u64,
    pub eval: u64,
    pub pool_conditions: u64,
    pub pair_conditions: u64,
    pub human_conditions: u64,
    pub eval_conditions: u64,
}

impl StageSeeds {
    pub fn new(seed: u64) -> Self {
        let conds = |k: u64| derive_seed(seed, &[stage::CONDITIONS, k]);
        Self {
            task: derive_seed(seed, &[stage::TASK]),
            pretrain: derive_seed(seed, &[stage::PRETRAIN]),
            annotate: derive_seed(seed, &[stage::ANNOTATE]),
            head: derive_seed(seed, &[stage::HEAD]),
            pairs: derive_seed(seed, &[stage::PAIRS]),
            human: derive_seed(seed, &[stage::HUMAN]),
            dpo: derive_seed(seed, &[stage::DPO]),
            eval: derive_seed(seed, &[stage::EVAL]),
            pool_conditions: conds(0),
            pair_conditions: conds(1),
            human_conditions: conds(2),
            eval_conditions: conds(3),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub beta: Option<f64>,
    pub score_delta: Option<f64>,
    pub num_candidates: Option<usize>,
    /// CFG scale for every sampling stage.
    pub gamma: Option<f64>,
    pub min_gap: Option<f64>,
    pub human_pairs: Option<PathBuf>,
}

impl Overrides {
    /// Apply to `cfg` and return `key=value` records for provenance. The
    /// output directory is not recorded, so artifact trees stay relocatable.
    pub fn apply(&self, cfg: &mut RunConfig) -> Vec<String> {
        let mut applied = Vec::new();
        let mut note = |key: &str, value: String| applied.push(format!("{key}={value}"));
        if let Some(v) = self.seed {
            cfg.seed = v;
            note("seed", v.to_string());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.beta {
            cfg.dpo.beta = v;
            note("dpo.beta", v.to_string());
        }
        if let Some(v) = self.score_delta {
            cfg.dpo.score_delta = v;
            note("dpo.score_delta", v.to_string());
        }
        if let Some(v) = self.num_candidates {
            cfg.pairgen.num_candidates = v;
            note("pairgen.num_candidates", v.to_string());
        }
        if let Some(v) = self.gamma {
            cfg.scorer.gamma = v;
            cfg.pairgen.gamma = v;
            cfg.eval.gamma = v;
            note("scorer.gamma", v.to_string());
            note("pairgen.gamma", v.to_string());
            note("eval.gamma", v.to_string());
        }
        if let Some(v) = self.min_gap {
            cfg.pairgen.min_gap = v;
            note("pairgen.min_gap", v.to_string());
        }
        if let Some(v) = &self.human_pairs {
            cfg.pairgen.human_pairs = Some(v.clone());
            note("pairgen.human_pairs", v.display().to_string());
        }
        applied
    }
}

impl RunConfig {
    /// Parse TOML, rejecting unknown keys (all of them are listed).
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::ConfigParse(e.to_string()))?;
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(value, |path| unknown.push(path.to_string()))
            .map_err(|e: toml::de::Error| CliError::ConfigParse(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(CliError::Config(
                unknown.into_iter().map(|k| format!("{k}: unknown key")).collect(),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Every invalid value, as `section.key: reason`.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str, why: &str| {
            if !ok {
                bad.push(format!("{key}: {why}"));
            }
        };
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let positive = |x: f64| x > 0.0 && x.is_finite();

        let t = &self.task;
        check(t.dim > 0, "task.dim", "must be positive");
        check(t.num_classes > 0, "task.num_classes", "must be positive");
        check(t.components_per_class > 0, "task.components_per_class", "must be positive");
        check(positive(t.mean_radius), "task.mean_radius", "must be positive");
        check(positive(t.component_scale), "task.component_scale", "must be positive");
        check(
            t.primary_weight > 0.0 && t.primary_weight <= 1.0,
            "task.primary_weight",
            "must lie in (0, 1]",
        );

        let p = &self.pretrain;
        check(p.hidden.iter().all(|h| *h > 0), "pretrain.hidden", "widths must be positive");
        check(p.batch_size > 0, "pretrain.batch_size", "must be positive");
        check(positive(p.lr), "pretrain.lr", "must be positive");
        check(p.weight_decay >= 0.0, "pretrain.weight_decay", "must be non-negative");
        check(prob(p.cond_drop_prob), "pretrain.cond_drop_prob", "must lie in [0, 1]");
        check(p.heldout_size > 0, "pretrain.heldout_size", "must be positive");

        let s = &self.scorer;
        check(
            s.extractor == flowpref_core::scorer::TOY_EXTRACTOR,
            "scorer.extractor",
            "only \"toy\" is available",
        );
        check(positive(s.tau), "scorer.tau", "must be positive");
        check(s.clip.is_finite(), "scorer.clip", "must be finite");
        check(s.pool_size >= 3, "scorer.pool_size", "needs at least one sample per label");
        check(prob(s.text_prob), "scorer.text_prob", "must lie in [0, 1]");
        check(s.gamma.is_finite(), "scorer.gamma", "must be finite");
        check(s.n_steps > 0, "scorer.n_steps", "must be positive");
        check(
            s.annotator_weights.iter().all(|w| w.is_finite()),
            "scorer.annotator_weights",
            "must be finite",
        );
        check(s.annotator_noise >= 0.0, "scorer.annotator_noise", "must be non-negative");
        check(s.hidden > 0, "scorer.hidden", "must be positive");
        check(s.batch_size > 0, "scorer.batch_size", "must be positive");
        check(positive(s.lr), "scorer.lr", "must be positive");
        check(s.weight_decay >= 0.0, "scorer.weight_decay", "must be non-negative");
        check(
            (0.0..1.0).contains(&s.val_fraction),
            "scorer.val_fraction",
            "must lie in [0, 1)",
        );

        let g = &self.pairgen;
        check(prob(g.text_prob), "pairgen.text_prob", "must lie in [0, 1]");
        check(g.num_candidates >= 2, "pairgen.num_candidates", "must be at least 2");
        check(g.gamma.is_finite(), "pairgen.gamma", "must be finite");
        check(g.n_steps > 0, "pairgen.n_steps", "must be positive");
        check(g.min_gap >= 0.0, "pairgen.min_gap", "must be non-negative");

        let d = &self.dpo;
        check(positive(d.beta), "dpo.beta", "must be positive");
        check(prob(d.score_delta), "dpo.score_delta", "must lie in [0, 1]");
        check(d.batch_size > 0, "dpo.batch_size", "must be positive");
        check(positive(d.lr), "dpo.lr", "must be positive");
        check(d.weight_decay >= 0.0, "dpo.weight_decay", "must be non-negative");

        let e = &self.eval;
        check(e.num_prompts > 0, "eval.num_prompts", "must be positive");
        check(prob(e.text_prob), "eval.text_prob", "must lie in [0, 1]");
        check(e.gamma.is_finite(), "eval.gamma", "must be finite");
        check(e.n_steps > 0, "eval.n_steps", "must be positive");
        check(e.bootstrap_resamples > 0, "eval.bootstrap_resamples", "must be positive");

        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::new(self.seed)
    }

    pub fn task_config(&self) -> ToyTaskConfig {
        let t = &self.task;
        ToyTaskConfig {
            dim: t.dim,
            num_classes: t.num_classes,
            components_per_class: t.components_per_class,
            mean_radius: t.mean_radius,
            component_scale: t.component_scale,
            primary_weight: t.primary_weight,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            hidden: p.hidden.clone(),
            steps: p.steps,
            batch_size: p.batch_size,
            optimizer: AdamWConfig::new(p.lr, p.warmup_steps, p.weight_decay),
            cond_drop_prob: p.cond_drop_prob,
            heldout_size: p.heldout_size,
            loss_ceiling: p.loss_ceiling,
        }
    }

    pub fn extractor_params(&self) -> ToyExtractorParams {
        ToyExtractorParams {
            tau: self.scorer.tau,
            clip: self.scorer.clip,
        }
    }

    pub fn annotator(&self) -> SyntheticAnnotator {
        SyntheticAnnotator {
            weights: self.scorer.annotator_weights,
            noise_std: self.scorer.annotator_noise,
        }
    }

    pub fn head_config(&self) -> HeadTrainConfig {
        let s = &self.scorer;
        HeadTrainConfig {
            hidden: s.hidden,
            steps: s.steps,
            batch_size: s.batch_size,
            optimizer: AdamWConfig::new(s.lr, s.warmup_steps, s.weight_decay),
            val_fraction: s.val_fraction,
        }
    }

    pub fn pairgen_config(&self) -> PairGenConfig {
        let g = &self.pairgen;
        PairGenConfig {
            num_candidates: g.num_candidates,
            gamma: g.gamma,
            n_steps: g.n_steps,
            min_gap: g.min_gap,
            seed: self.seeds().pairs,
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        let d = &self.dpo;
        DpoConfig {
            beta: d.beta,
            score_delta: d.score_delta,
            stage1_steps: d.stage1_steps,
            stage2_steps: d.stage2_steps,
            batch_size: d.batch_size,
            optimizer: AdamWConfig::new(d.lr, d.warmup_steps, d.weight_decay),
            schedule: d.schedule,
            seed: self.seeds().dpo,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            gamma: e.gamma,
            n_steps: e.n_steps,
            seed: self.seeds().eval,
            bootstrap_resamples: e.bootstrap_resamples,
        }
    }
}
