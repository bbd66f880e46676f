use flowpref_core::dpo::{split_curriculum, LogRecord};
use flowpref_core::flow::{pretrain, random_conditions, PretrainConfig};
use flowpref_core::pairgen::{save_pairs, synthesize_human_pairs, Origin};
use flowpref_core::scorer::{score_generations, train_head, HeadTrainConfig, SyntheticAnnotator, ToyExtractorParams};
use flowpref_core::seed::rng_from;
use flowpref_core::{
    build_dataset, dpo_train, evaluate, DpoConfig, EvalConfig, PairDataset, PairGenConfig, ToyExtractor, ToyTask,
    ToyTaskConfig,
};

#[test]
fn library_pipeline_runs_end_to_end() {
    let task = ToyTask::generate(&ToyTaskConfig::default(), 1).unwrap();
    let k = task.num_classes();
    let (reference, pre) = pretrain(
        &task,
        &PretrainConfig {
            hidden: vec![32],
            steps: 400,
            heldout_size: 64,
            ..PretrainConfig::default()
        },
        2,
    )
    .unwrap();
    assert!(pre.heldout_loss < pre.heldout_zero_baseline);

    let ex = ToyExtractor::new(task.clone(), ToyExtractorParams::default()).unwrap();
    let pool = random_conditions(300, k, 0.5, &mut rng_from(3, &[]));
    let scores = score_generations(&reference, &ex, &pool, 4.5, 10, 4).unwrap();
    let annotator = SyntheticAnnotator::default();
    let annotations = annotator.annotate(&scores, &mut rng_from(4, &[1]));
    let (head, head_report) = train_head(
        &annotations,
        &HeadTrainConfig {
            steps: 300,
            ..HeadTrainConfig::default()
        },
        5,
    )
    .unwrap();
    assert!(head_report.val_accuracy.unwrap() > 1.0 / 3.0);

    let dir = tempfile::tempdir().unwrap();
    let human_path = dir.path().join("human.jsonl");
    let human_conds = random_conditions(8, k, 0.5, &mut rng_from(6, &[]));
    let human = synthesize_human_pairs(&reference, &head, &ex, &annotator, &human_conds, 4.5, 10, 7).unwrap();
    assert_eq!(human.len(), 8);
    save_pairs(&human_path, &human).unwrap();

    let pair_conds = random_conditions(60, k, 0.5, &mut rng_from(8, &[]));
    let pair_cfg = PairGenConfig {
        n_steps: 10,
        seed: 9,
        ..PairGenConfig::default()
    };
    let dataset = build_dataset(&reference, &head, &ex, &pair_conds, &pair_cfg, Some(&human_path)).unwrap();
    assert_eq!(dataset.header.num_human, 8);
    assert!(dataset.pairs.len() > 8 && dataset.pairs.len() <= 68);
    assert!(dataset
        .pairs
        .iter()
        .filter(|p| p.origin == Origin::Human)
        .all(|p| p.score_c == 0.0));
    let pairs_path = dir.path().join("pairs.jsonl");
    dataset.save(&pairs_path).unwrap();
    let reloaded = PairDataset::load(&pairs_path).unwrap();
    assert_eq!(reloaded, dataset);

    let dpo_cfg = DpoConfig {
        stage1_steps: 30,
        stage2_steps: 30,
        seed: 10,
        ..DpoConfig::default()
    };
    let split = split_curriculum(&dataset.pairs, dpo_cfg.score_delta);
    assert_eq!(split.stage1.len() + split.stage2.len(), dataset.pairs.len());
    let (policy, log) = dpo_train(&reference, &dataset.pairs, &dpo_cfg).unwrap();
    assert_eq!(log.losses().len(), 60);
    assert!(log.losses().iter().all(|l| l.is_finite()));
    assert!(log
        .records
        .iter()
        .any(|r| matches!(r, LogRecord::Stage { stage: 2, skipped: false, .. })));
    assert_ne!(policy.params(), reference.params());

    let eval_conds = random_conditions(100, k, 0.5, &mut rng_from(11, &[]));
    let eval_cfg = EvalConfig {
        n_steps: 10,
        bootstrap_resamples: 200,
        ..EvalConfig::default()
    };
    let (report, detail) = evaluate(&policy, &reference, &head, &ex, &task, &eval_conds, &eval_cfg).unwrap();
    assert_eq!(report.n_prompts, 100);
    assert_eq!(detail.outcomes.len(), 100);
    assert!((0.0..=1.0).contains(&report.win_rate));
    assert!(report.energy_distance >= 0.0 && report.energy_distance_reference >= 0.0);
    assert!(report.margin_ci_lower <= report.good_prob_margin);
    let (again, _) = evaluate(&policy, &reference, &head, &ex, &task, &eval_conds, &eval_cfg).unwrap();
    assert_eq!(again, report);
}
