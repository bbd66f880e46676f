//! Pipeline stages and the on-disk artifact layout.
//!
//! Each stage owns one directory under the output root and writes a
//! `manifest.json` next to its artifacts. Manifests hold seeds, flag
//! overrides, the relevant config sections and content ids of every input
//! and output. Paths in artifacts are relative to the output root, so two
//! runs into different directories produce identical trees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowpref_core::dpo::{dpo_train, split_curriculum, LogRecord, TrainingLog};
use flowpref_core::eval::{evaluate, EvalReport};
use flowpref_core::flow::{
    pretrain, random_conditions, Condition, PretrainReport, ToyTask, VelocityModel,
};
use flowpref_core::io;
use flowpref_core::pairgen::{build_dataset, save_pairs, synthesize_human_pairs, PairDataset};
use flowpref_core::scorer::{
    extractor_by_name, score_generations, train_head, HeadReport, ScoreExtractor, ScoreHead,
};
use flowpref_core::seed::rng_from;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TASK: &str = "pretrain/task.json";
pub const MODEL: &str = "pretrain/model.json";
pub const PRETRAIN_REPORT: &str = "pretrain/report.json";
pub const ANNOTATIONS: &str = "scorer/annotations.jsonl";
pub const HEAD: &str = "scorer/head.json";
pub const HEAD_REPORT: &str = "scorer/report.json";
pub const PAIRS: &str = "pairs/pairs.jsonl";
pub const HUMAN_PAIRS: &str = "pairs/human_pairs.jsonl";
pub const POLICY: &str = "dpo/policy.json";
pub const TRAIN_LOG: &str = "dpo/train_log.jsonl";
pub const EVAL_REPORT: &str = "eval/report.json";
pub const PER_PROMPT: &str = "eval/per_prompt.jsonl";

/// Provenance record written by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub overrides: Vec<String>,
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Everything a stage needs: the effective config, the overrides that produced
/// it, and the output root.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub overrides: Vec<String>,
}

struct StageRun<'a> {
    ctx: &'a Context,
    manifest: Manifest,
}

impl<'a> StageRun<'a> {
    fn new(ctx: &'a Context, stage: &str) -> Self {
        Self {
            ctx,
            manifest: Manifest {
                stage: stage.to_string(),
                seed: ctx.cfg.seed,
                stage_seeds: BTreeMap::new(),
                overrides: ctx.overrides.clone(),
                config: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.ctx.cfg.out_dir.join(rel)
    }

    fn seed(&mut self, name: &str, value: u64) -> u64 {
        self.manifest.stage_seeds.insert(name.to_string(), value);
        value
    }

    fn section<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.manifest
            .config
            .insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let path = self.path(rel);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact { path, producer })
        }
    }

    fn note_input(&mut self, key: String, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.manifest.inputs.insert(key, io::content_id(&bytes));
        Ok(())
    }

    fn input_json<T: DeserializeOwned>(&mut self, rel: &str, producer: &'static str) -> Result<T> {
        let path = self.require(rel, producer)?;
        self.note_input(rel.to_string(), &path)?;
        Ok(io::read_json(&path)?)
    }

    fn output_text(&mut self, rel: &str, text: &str) -> Result<()> {
        io::write_text(&self.path(rel), text)?;
        self.manifest
            .outputs
            .insert(rel.to_string(), io::content_id(text.as_bytes()));
        Ok(())
    }

    fn output_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.output_text(rel, &text)
    }

    fn finish(self) -> Result<()> {
        let rel = format!("{}/manifest.json", self.manifest.stage);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        io::write_text(&self.path(&rel), &text)?;
        Ok(())
    }
}

/// Prompt set for the annotation pool.
pub fn pool_conditions(cfg: &RunConfig, num_classes: usize) -> Vec<Condition> {
    let s = &cfg.scorer;
    let mut rng = rng_from(cfg.seeds().pool_conditions, &[]);
    random_conditions(s.pool_size, num_classes, s.text_prob, &mut rng)
}

/// Prompt set for automatic pair generation.
pub fn pair_conditions(cfg: &RunConfig, num_classes: usize) -> Vec<Condition> {
    let g = &cfg.pairgen;
    let mut rng = rng_from(cfg.seeds().pair_conditions, &[]);
    random_conditions(g.num_prompts, num_classes, g.text_prob, &mut rng)
}

/// Prompt set rated by the synthetic annotator.
pub fn human_conditions(cfg: &RunConfig, num_classes: usize) -> Vec<Condition> {
    let g = &cfg.pairgen;
    let mut rng = rng_from(cfg.seeds().human_conditions, &[]);
    random_conditions(g.human_prompts, num_classes, g.text_prob, &mut rng)
}

/// Held-out evaluation prompts.
pub fn eval_conditions(cfg: &RunConfig, num_classes: usize) -> Vec<Condition> {
    let e = &cfg.eval;
    let mut rng = rng_from(cfg.seeds().eval_conditions, &[]);
    random_conditions(e.num_prompts, num_classes, e.text_prob, &mut rng)
}

fn extractor(cfg: &RunConfig, task: &ToyTask) -> Result<Box<dyn ScoreExtractor>> {
    Ok(extractor_by_name(&cfg.scorer.extractor, task, cfg.extractor_params())?)
}

/// Generate the task and pretrain the reference flow model.
pub fn run_pretrain(ctx: &Context) -> Result<PretrainReport> {
    let cfg = &ctx.cfg;
    let seeds = cfg.seeds();
    let mut run = StageRun::new(ctx, "pretrain");
    run.section("task", &cfg.task)?;
    run.section("pretrain", &cfg.pretrain)?;
    let task = ToyTask::generate(&cfg.task_config(), run.seed("task", seeds.task))?;
    let (model, report) = pretrain(&task, &cfg.pretrain_config(), run.seed("pretrain", seeds.pretrain))?;
    run.output_json(TASK, &task)?;
    run.output_json(MODEL, &model)?;
    run.output_json(PRETRAIN_REPORT, &report)?;
    run.finish()?;
    Ok(report)
}

/// Annotate generations with the synthetic rater and fit the score head.
pub fn run_train_scorer(ctx: &Context) -> Result<HeadReport> {
    let cfg = &ctx.cfg;
    let seeds = cfg.seeds();
    let mut run = StageRun::new(ctx, "scorer");
    run.section("scorer", &cfg.scorer)?;
    let task: ToyTask = run.input_json(TASK, "pretrain")?;
    let model: VelocityModel = run.input_json(MODEL, "pretrain")?;
    let ex = extractor(cfg, &task)?;
    let s = &cfg.scorer;
    run.seed("pool_conditions", seeds.pool_conditions);
    let conds = pool_conditions(cfg, task.num_classes());
    let annotate_seed = run.seed("annotate", seeds.annotate);
    let scores = score_generations(&model, ex.as_ref(), &conds, s.gamma, s.n_steps, annotate_seed)?;
    let annotations = cfg
        .annotator()
        .annotate(&scores, &mut rng_from(annotate_seed, &[u64::MAX]));
    let (head, report) = train_head(&annotations, &cfg.head_config(), run.seed("head", seeds.head))?;
    run.output_text(ANNOTATIONS, &io::to_jsonl(&annotations)?)?;
    run.output_json(HEAD, &head)?;
    run.output_json(HEAD_REPORT, &report)?;
    run.finish()?;
    Ok(report)
}

/// Best-vs-worst pair synthesis plus human (or synthetic-rater) pairs.
pub fn run_gen_pairs(ctx: &Context) -> Result<PairDataset> {
    let cfg = &ctx.cfg;
    let seeds = cfg.seeds();
    let mut run = StageRun::new(ctx, "pairs");
    run.section("pairgen", &cfg.pairgen)?;
    run.section("scorer", &cfg.scorer)?;
    let task: ToyTask = run.input_json(TASK, "pretrain")?;
    let model: VelocityModel = run.input_json(MODEL, "pretrain")?;
    let head: ScoreHead = run.input_json(HEAD, "train-scorer")?;
    let ex = extractor(cfg, &task)?;
    let g = &cfg.pairgen;
    let pair_cfg = cfg.pairgen_config();
    run.seed("pairs", pair_cfg.seed);
    run.seed("pair_conditions", seeds.pair_conditions);
    let conds = pair_conditions(cfg, task.num_classes());

    let (human_path, human_label) = match &g.human_pairs {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Io {
                    path: path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "human pair file not found"),
                });
            }
            let label = path.display().to_string();
            run.note_input(label.clone(), path)?;
            (Some(path.clone()), Some(label))
        }
        None if g.human_prompts > 0 => {
            run.seed("human_conditions", seeds.human_conditions);
            let hconds = human_conditions(cfg, task.num_classes());
            let human = synthesize_human_pairs(
                &model,
                &head,
                ex.as_ref(),
                &cfg.annotator(),
                &hconds,
                g.gamma,
                g.n_steps,
                run.seed("human", seeds.human),
            )?;
            let path = run.path(HUMAN_PAIRS);
            save_pairs(&path, &human)?;
            let bytes = std::fs::read(&path).map_err(|e| CliError::Io {
                path: path.clone(),
                source: e,
            })?;
            run.manifest
                .outputs
                .insert(HUMAN_PAIRS.to_string(), io::content_id(&bytes));
            (Some(path), Some(HUMAN_PAIRS.to_string()))
        }
        None => (None, None),
    };

    let mut dataset = build_dataset(&model, &head, ex.as_ref(), &conds, &pair_cfg, human_path.as_deref())?;
    dataset.header.human_source = human_label;
    run.output_text(PAIRS, &dataset.to_jsonl()?)?;
    run.finish()?;
    Ok(dataset)
}

/// Summary of a DPO run for display.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoSummary {
    pub stage1_pairs: usize,
    pub stage2_pairs: usize,
    pub log: TrainingLog,
}

impl DpoSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.log.records {
            if let LogRecord::Stage {
                stage,
                pairs,
                steps,
                skipped,
            } = r
            {
                if *skipped {
                    out.push_str(&format!("stage {stage}: {pairs} pairs, skipped\n"));
                } else {
                    out.push_str(&format!("stage {stage}: {pairs} pairs, {steps} steps\n"));
                }
            }
        }
        let losses = self.log.losses();
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            out.push_str(&format!("loss {first:.4} -> {last:.4}\n"));
        }
        out
    }
}

/// Curriculum Flow-DPO from the pretrained reference.
pub fn run_dpo(ctx: &Context) -> Result<DpoSummary> {
    let cfg = &ctx.cfg;
    let mut run = StageRun::new(ctx, "dpo");
    run.section("dpo", &cfg.dpo)?;
    let dpo_cfg = cfg.dpo_config();
    run.seed("dpo", dpo_cfg.seed);
    let model: VelocityModel = run.input_json(MODEL, "pretrain")?;
    let pairs_path = run.require(PAIRS, "gen-pairs")?;
    run.note_input(PAIRS.to_string(), &pairs_path)?;
    let dataset = PairDataset::load(&pairs_path)?;
    let split = split_curriculum(&dataset.pairs, dpo_cfg.score_delta);
    let (policy, log) = dpo_train(&model, &dataset.pairs, &dpo_cfg)?;
    run.output_json(POLICY, &policy)?;
    run.output_text(TRAIN_LOG, &log.to_jsonl()?)?;
    run.finish()?;
    Ok(DpoSummary {
        stage1_pairs: split.stage1.len(),
        stage2_pairs: split.stage2.len(),
        log,
    })
}

/// One line of `eval/per_prompt.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt: usize,
    pub class_id: usize,
    pub text_present: bool,
    pub policy_good: f64,
    pub reference_good: f64,
    pub outcome: f64,
}

/// Score the aligned policy against the reference on held-out prompts.
pub fn run_eval(ctx: &Context) -> Result<EvalReport> {
    let cfg = &ctx.cfg;
    let seeds = cfg.seeds();
    let mut run = StageRun::new(ctx, "eval");
    run.section("eval", &cfg.eval)?;
    run.section("scorer", &cfg.scorer)?;
    let eval_cfg = cfg.eval_config();
    run.seed("eval", eval_cfg.seed);
    let task: ToyTask = run.input_json(TASK, "pretrain")?;
    let reference: VelocityModel = run.input_json(MODEL, "pretrain")?;
    let head: ScoreHead = run.input_json(HEAD, "train-scorer")?;
    let policy: VelocityModel = run.input_json(POLICY, "dpo-train")?;
    let ex = extractor(cfg, &task)?;
    run.seed("eval_conditions", seeds.eval_conditions);
    let conds = eval_conditions(cfg, task.num_classes());
    let (report, detail) = evaluate(&policy, &reference, &head, ex.as_ref(), &task, &conds, &eval_cfg)?;
    let records: Vec<PromptRecord> = conds
        .iter()
        .enumerate()
        .map(|(i, c)| PromptRecord {
            prompt: i,
            class_id: c.class_id,
            text_present: c.text_present,
            policy_good: detail.policy_good[i],
            reference_good: detail.reference_good[i],
            outcome: detail.outcomes[i],
        })
        .collect();
    run.output_json(EVAL_REPORT, &report)?;
    run.output_text(PER_PROMPT, &io::to_jsonl(&records)?)?;
    run.finish()?;
    Ok(report)
}

/// Run all five stages in order and return the rendered summaries.
pub fn run_pipeline(ctx: &Context) -> Result<String> {
    let mut out = String::new();
    out.push_str(&render_pretrain(&run_pretrain(ctx)?));
    out.push_str(&render_head(&run_train_scorer(ctx)?));
    out.push_str(&render_pairs(&run_gen_pairs(ctx)?));
    out.push_str(&run_dpo(ctx)?.render());
    out.push_str(&run_eval(ctx)?.summary_table());
    Ok(out)
}

pub fn render_pretrain(r: &PretrainReport) -> String {
    format!(
        "pretrain: held-out loss {:.4} (zero-model baseline {:.4})\n",
        r.heldout_loss, r.heldout_zero_baseline
    )
}

pub fn render_head(r: &HeadReport) -> String {
    match r.val_accuracy {
        Some(v) => format!(
            "scorer: train accuracy {:.4}, validation accuracy {v:.4}\n",
            r.train_accuracy
        ),
        None => format!("scorer: train accuracy {:.4}\n", r.train_accuracy),
    }
}

pub fn render_pairs(d: &PairDataset) -> String {
    let h = &d.header;
    format!(
        "pairs: {} auto + {} human from {} prompts ({} rejected, {} filtered)\n",
        h.num_auto, h.num_human, h.num_prompts, h.num_rejected, h.num_filtered
    )
}
