use arn::dataset::{attribute_weights, build_vocabulary, generate_synthetic, GridSpec, Scene};
use arn::reconstruction::LossWeights;
use arn::training::{
    analytic_gradients, compare_gradients, gradient_check, lr_at, numeric_gradients, run_training,
    Checkpoint, TrainConfig, Trainer,
};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embed_dim: 6,
        hidden_dim: 5,
        subject_dim: 6,
        attention_hidden: 6,
        decoder_hidden: 6,
        max_iters: 20,
        log_every: 5,
        eval_every: 0,
        seed,
        ..TrainConfig::for_context(true)
    }
}

fn small_grid() -> GridSpec {
    GridSpec {
        noise_dims: 2,
        ..GridSpec::default()
    }
}

fn corpus(seed: u64, scenes: usize) -> Vec<Scene> {
    generate_synthetic(seed, scenes, 4, &small_grid()).unwrap()
}

fn trainer(config: TrainConfig, scenes: &[Scene]) -> Trainer {
    let vocab = build_vocabulary(scenes, 1);
    let attributes = attribute_weights(scenes).ok();
    let visual_dim = small_grid().visual_dim();
    Trainer::new(config, vocab, attributes, visual_dim).unwrap()
}

#[test]
fn zero_lambda_ignores_attribute_labels() {
    let scenes = corpus(3, 2);
    let config = tiny_config(5).with_weights(LossWeights {
        lambda: 0.0,
        ..LossWeights::CONTEXT_ENABLED_DEFAULT
    });
    let mut with = trainer(config.clone(), &scenes);
    let mut without = trainer(config, &scenes);
    let labelled = with.prepare(&scenes[0]).unwrap();
    let mut unlabelled = without.prepare(&scenes[0]).unwrap();
    for q in &mut unlabelled.queries {
        q.attributes = None;
    }
    assert!(labelled.queries.iter().any(|q| q.attributes.is_some()));
    for _ in 0..3 {
        let a = with.train_step(&labelled).unwrap().unwrap();
        let b = without.train_step(&unlabelled).unwrap().unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.adp, b.adp);
        assert_eq!(a.lan, b.lan);
    }
    assert_eq!(with.params, without.params);
}

#[test]
fn zero_learning_rate_repeats_the_breakdown() {
    let scenes = corpus(4, 1);
    let mut t = trainer(
        TrainConfig {
            lr0: 0.0,
            ..tiny_config(1)
        },
        &scenes,
    );
    let scene = t.prepare(&scenes[0]).unwrap();
    let first = t.train_step(&scene).unwrap().unwrap();
    let second = t.train_step(&scene).unwrap().unwrap();
    assert_eq!(first, second);
    assert_eq!(t.iteration(), 2);
}

#[test]
fn overfitting_one_scene_lowers_the_trailing_loss() {
    let scenes = corpus(9, 1);
    let mut t = trainer(
        TrainConfig {
            lr0: 5e-3,
            ..tiny_config(2)
        },
        &scenes,
    );
    let scene = t.prepare(&scenes[0]).unwrap();
    let totals: Vec<f64> = (0..200)
        .map(|_| t.train_step(&scene).unwrap().unwrap().total)
        .collect();
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let windows: Vec<f64> = totals.chunks(40).map(mean).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "window means {windows:?}");
    }
}

#[test]
fn all_zero_weights_leave_parameters_unchanged() {
    let scenes = corpus(6, 3);
    let config = tiny_config(8).with_weights(LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.0,
    });
    let mut t = trainer(config, &scenes);
    let initial = t.params.clone();
    for scene in &scenes {
        let prepared = t.prepare(scene).unwrap();
        let (grads, _) = analytic_gradients(
            &t.model,
            &t.params,
            &prepared,
            t.class_weights(),
            t.config.weights(),
        )
        .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        let breakdown = t.train_step(&prepared).unwrap().unwrap();
        assert_eq!(breakdown.total, 0.0);
    }
    assert_eq!(t.params, initial);
}

#[test]
fn scene_without_queries_is_skipped_and_counted() {
    let mut scenes = corpus(2, 1);
    let mut t = trainer(tiny_config(0), &scenes);
    scenes[0].queries.clear();
    let empty = t.prepare(&scenes[0]).unwrap();
    assert!(t.train_step(&empty).unwrap().is_none());
    assert_eq!(t.skipped(), 1);
    assert_eq!(t.iteration(), 0);
}

#[test]
fn schedule_drops_exactly_at_multiples_of_decay_every() {
    let config = TrainConfig {
        lr0: 1.0,
        decay_every: 7,
        decay_factor: 0.5,
        ..TrainConfig::default()
    };
    for it in 0..50u64 {
        let expected = 0.5f64.powi((it / 7) as i32);
        assert_eq!(lr_at(it, &config), expected);
    }
    assert_eq!(lr_at(0, &TrainConfig::default()), 4e-4);
    assert_eq!(lr_at(7999, &TrainConfig::default()), 4e-4);
}

#[test]
fn zero_iterations_checkpoint_the_initial_parameters() {
    let scenes = corpus(11, 4);
    let config = TrainConfig {
        max_iters: 0,
        ..tiny_config(13)
    };
    let outcome = run_training(&scenes, &[], &config, None).unwrap();
    let mut initial = trainer(config, &scenes).params;
    initial.quantize_f32();
    assert_eq!(outcome.checkpoint.iteration, 0);
    assert!(outcome.metrics.is_empty());
    assert_eq!(outcome.checkpoint.params, initial);
}

#[test]
fn same_seed_gives_identical_metric_logs() {
    let scenes = corpus(12, 6);
    let (train, val): (Vec<_>, Vec<_>) = scenes.into_iter().partition(|s| s.split == "train");
    let config = TrainConfig {
        eval_every: 10,
        ..tiny_config(21)
    };
    let dir = tempfile::tempdir().unwrap();
    let a = run_training(&train, &val, &config, Some(&dir.path().join("a"))).unwrap();
    let b = run_training(&train, &val, &config, Some(&dir.path().join("b"))).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert!(a.metrics.iter().any(|m| m.val_accuracy.is_some()));
    let log = |name: &str| std::fs::read(dir.path().join(name).join("metrics.jsonl")).unwrap();
    assert_eq!(log("a"), log("b"));
    let saved = Checkpoint::load(&dir.path().join("a").join("checkpoint.arnc")).unwrap();
    assert_eq!(saved, a.checkpoint);
}

#[test]
fn different_seeds_give_different_parameters() {
    let scenes = corpus(12, 3);
    let a = run_training(&scenes, &[], &tiny_config(1), None).unwrap();
    let b = run_training(&scenes, &[], &tiny_config(2), None).unwrap();
    assert_ne!(a.checkpoint.params, b.checkpoint.params);
}

fn checked_fixture(seed: u64, context_enabled: bool) -> (Trainer, arn::training::PreparedScene) {
    let grid = GridSpec {
        noise_dims: 1,
        ..GridSpec::default()
    };
    let scenes = generate_synthetic(seed, 1, 3, &grid).unwrap();
    let config = TrainConfig {
        embed_dim: 3,
        hidden_dim: 3,
        subject_dim: 3,
        attention_hidden: 4,
        decoder_hidden: 3,
        context_enabled,
        seed,
        ..TrainConfig::for_context(context_enabled)
    };
    let vocab = build_vocabulary(&scenes, 1);
    let attributes = attribute_weights(&scenes).ok();
    let t = Trainer::new(config, vocab, attributes, grid.visual_dim()).unwrap();
    let mut prepared = t.prepare(&scenes[0]).unwrap();
    prepared.queries.truncate(1);
    (t, prepared)
}

#[test]
fn zero_parameter_model_gradients_agree() {
    let (mut t, scene) = checked_fixture(1, true);
    t.params.fill(0.0);
    let report = gradient_check(
        &t.model,
        &t.params,
        &scene,
        t.class_weights(),
        t.config.weights(),
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failing());
}

#[test]
fn tiny_random_model_passes_the_gradient_check() {
    for (seed, context) in [(2, true), (3, false)] {
        let (t, scene) = checked_fixture(seed, context);
        let report = gradient_check(
            &t.model,
            &t.params,
            &scene,
            t.class_weights(),
            t.config.weights(),
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.failing());
        assert_eq!(report.blocks.len(), t.params.len());
    }
}

#[test]
fn corrupted_block_is_flagged() {
    let (t, scene) = checked_fixture(4, true);
    let weights = t.config.weights();
    let (mut analytic, frozen) =
        analytic_gradients(&t.model, &t.params, &scene, t.class_weights(), weights).unwrap();
    let numeric = numeric_gradients(
        &t.model,
        &t.params,
        &scene,
        t.class_weights(),
        weights,
        &frozen,
    )
    .unwrap();
    assert!(compare_gradients(&t.params, &analytic, &numeric, 1e-4).passed());
    let victim = t.params.id("grounding.subject.fc2.weight").unwrap();
    analytic.get_mut(victim).data_mut()[0] += 0.5;
    let report = compare_gradients(&t.params, &analytic, &numeric, 1e-4);
    let failing: Vec<&str> = report.failing().iter().map(|b| b.name.as_str()).collect();
    assert_eq!(failing, [t.params.name(victim)]);
}
