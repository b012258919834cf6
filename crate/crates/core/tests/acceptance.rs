//! Acceptance criteria, one line per criterion. Runs under its own harness so
//! the report is printed even when every check passes.

use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use arn::dataset::{
    generate_synthetic, read_features, write_features, write_manifest, GridSpec, Scene,
};
use arn::eval::evaluate;
use arn::geometry::{
    absolute_location, iou, location_feature, relative_offset, BBox, LOCATION_DIM,
};
use arn::model::{ArnModel, ModelConfig, TrainingQuery};
use arn::proposal_encoder::{Proposal, SceneGeometry};
use arn::reconstruction::{collaborative_loss, LossComponents};
use arn::training::{gradient_check, lr_at, run_training, Checkpoint, PreparedScene, TrainConfig};
use arn::{LossWeights, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    /// Soft criteria report a warning instead of failing the run.
    soft: bool,
    detail: String,
}

impl Outcome {
    fn hard(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            soft: false,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("normalization suite", normalization),
        ("gradient check", gradient),
        ("iou oracle", iou_oracle),
        ("geometry vectors", geometry_vectors),
        ("loss composition", loss_composition),
        ("schedule", schedule),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("ablation trend", ablation_trend),
        ("weak-supervision isolation", isolation),
        ("serialization", serialization),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| name.contains(f.as_str()) || *f == id.to_string())
        {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let status = match (outcome.pass, outcome.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => {
                failed += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {id:>2} [{status}] {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn tiny_config(rng: &mut ChaCha8Rng, context_enabled: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: rng.random_range(5..14),
        visual_dim: rng.random_range(1..7),
        embed_dim: rng.random_range(1..7),
        hidden_dim: rng.random_range(1..7),
        subject_dim: rng.random_range(1..7),
        attention_hidden: rng.random_range(1..7),
        decoder_hidden: rng.random_range(1..7),
        attribute_count: rng.random_range(0..4),
        context_enabled,
    }
}

fn random_box(rng: &mut ChaCha8Rng, width: f64, height: f64) -> BBox {
    let x0 = rng.random_range(0.0..width - 2.0);
    let y0 = rng.random_range(0.0..height - 2.0);
    let x1 = rng.random_range(x0 + 1.0..width);
    let y1 = rng.random_range(y0 + 1.0..height);
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn random_proposals(rng: &mut ChaCha8Rng, n: usize, visual_dim: usize) -> Vec<Proposal> {
    (0..n)
        .map(|id| Proposal {
            id,
            bbox: random_box(rng, 100.0, 80.0),
            category: rng.random_range(0..3),
            subject_raw: (0..visual_dim)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        })
        .collect()
}

fn is_distribution(values: &[f64]) -> bool {
    let sum: f64 = values.iter().sum();
    (sum - 1.0).abs() <= 1e-6 && values.iter().all(|&v| v >= 0.0)
}

fn normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = Vec::new();
    for trial in 0..1000 {
        let config = tiny_config(&mut rng, trial % 2 == 0);
        let mut params = ParamStore::new();
        let model = ArnModel::new(&mut params, config.clone(), &mut rng);
        // Large parameter scales push every softmax towards saturation.
        let scale = rng.random_range(0.1..20.0);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            for v in params.get_mut(id).data_mut() {
                *v = (*v + rng.random_range(-1.0..1.0)) * scale;
            }
        }
        let n = rng.random_range(1..9);
        let proposals = random_proposals(&mut rng, n, config.visual_dim);
        let geometry = SceneGeometry::new(&proposals, 100.0, 80.0).unwrap();
        let t = rng.random_range(1..20);
        let tokens: Vec<usize> = (0..t)
            .map(|_| rng.random_range(0..config.vocab_size))
            .collect();

        let encoded = model.query.encode(&params, &tokens).unwrap();
        let grounded = model.ground(&params, &geometry, &tokens).unwrap();
        let mut ok = encoded.attention.iter().all(|a| is_distribution(a));
        ok &= is_distribution(&encoded.weights);
        ok &= grounded
            .scores
            .per_modality
            .iter()
            .all(|s| is_distribution(s));
        ok &= is_distribution(&grounded.scores.fused);
        if !ok {
            bad.push(trial);
        }
    }
    let elapsed = start.elapsed();
    Outcome::hard(
        bad.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "{} of 1000 trials violated normalization; {:.2}s of 10s budget",
            bad.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Three proposals, one four-token query carrying attributes, every layer at most eight wide.
fn gradient_fixture(seed: u64) -> (ArnModel, ParamStore, PreparedScene, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        vocab_size: 9,
        visual_dim: 6,
        embed_dim: 8,
        hidden_dim: 5,
        subject_dim: 7,
        attention_hidden: 8,
        decoder_hidden: 6,
        attribute_count: 3,
        context_enabled: true,
    };
    let mut params = ParamStore::new();
    let model = ArnModel::new(&mut params, config, &mut rng);
    let proposals = random_proposals(&mut rng, 3, 6);
    let geometry = SceneGeometry::new(&proposals, 100.0, 80.0).unwrap();
    let queries = vec![TrainingQuery {
        tokens: (0..4).map(|_| rng.random_range(4..9)).collect(),
        attributes: Some(vec![1.0, 0.0, 1.0]),
    }];
    let scene = PreparedScene {
        image_id: format!("grad{seed}"),
        geometry,
        queries,
    };
    (model, params, scene, vec![0.5, 1.0, 0.25])
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let weights = LossWeights {
        alpha: 0.5,
        beta: 1.0,
        gamma: 2.0,
        lambda: 3.0,
    };
    let mut worst: Option<(String, f64)> = None;
    let mut pass = true;
    for seed in 0..3 {
        let (model, params, scene, class_weights) = gradient_fixture(seed);
        let report =
            gradient_check(&model, &params, &scene, &class_weights, weights, 1e-4).unwrap();
        pass &= report.passed();
        if let Some(b) = report.worst() {
            if worst.as_ref().is_none_or(|w| b.relative_error > w.1) {
                worst = Some((b.name.clone(), b.relative_error));
            }
        }
    }
    let elapsed = start.elapsed();
    let (name, err) = worst.unwrap_or_default();
    Outcome::hard(
        pass && elapsed < Duration::from_secs(60),
        format!(
            "worst block {name} at relative error {err:.2e} (limit 1e-4) over 3 fixtures; {:.1}s of 60s",
            elapsed.as_secs_f64()
        ),
    )
}

fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let lo_x = a[0].min(b[0]);
    let hi_x = a[2].max(b[2]);
    let lo_y = a[1].min(b[1]);
    let hi_y = a[3].max(b[3]);
    let covers = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    for x in lo_x..hi_x {
        for y in lo_y..hi_y {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

fn iou_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    let draw = |rng: &mut ChaCha8Rng| {
        let x0 = rng.random_range(0..30);
        let y0 = rng.random_range(0..30);
        [
            x0,
            y0,
            x0 + rng.random_range(1..20),
            y0 + rng.random_range(1..20),
        ]
    };
    for _ in 0..1000 {
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let ba = BBox::new(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64).unwrap();
        let bb = BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap();
        let v = iou(&ba, &bb).unwrap();
        worst = worst.max((v - raster_iou(a, b)).abs());
        exact &= v == iou(&bb, &ba).unwrap();
        exact &= iou(&ba, &ba).unwrap() == 1.0;
    }
    let elapsed = start.elapsed();
    Outcome::hard(
        worst <= 1e-9 && exact && elapsed < Duration::from_secs(5),
        format!(
            "max deviation from rasterization {worst:.1e}; symmetry and self-IoU exact: {exact}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn proposal(id: usize, b: [f64; 4], category: u32) -> Proposal {
    Proposal {
        id,
        bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        category,
        subject_raw: vec![0.0],
    }
}

/// Straight-line location feature: absolute part, then offsets to the five
/// nearest same-category proposals by centre distance (ties by id).
fn location_reference(target: &Proposal, pool: &[Proposal], w: f64, h: f64) -> Vec<f64> {
    let t = &target.bbox;
    let mut out = vec![
        t.x_tl() / w,
        t.y_tl() / h,
        t.x_br() / w,
        t.y_br() / h,
        (t.x_br() - t.x_tl()) * (t.y_br() - t.y_tl()) / (w * h),
    ];
    let cx = (t.x_tl() + t.x_br()) / 2.0;
    let cy = (t.y_tl() + t.y_br()) / 2.0;
    let mut others: Vec<(f64, usize, &Proposal)> = pool
        .iter()
        .filter(|p| p.id != target.id && p.category == target.category)
        .map(|p| {
            let px = (p.bbox.x_tl() + p.bbox.x_br()) / 2.0;
            let py = (p.bbox.y_tl() + p.bbox.y_br()) / 2.0;
            ((px - cx) * (px - cx) + (py - cy) * (py - cy), p.id, p)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (tw, th) = (t.x_br() - t.x_tl(), t.y_br() - t.y_tl());
    for slot in 0..5 {
        match others.get(slot) {
            Some((_, _, p)) => {
                let n = &p.bbox;
                out.extend([
                    (n.x_tl() - t.x_tl()) / tw,
                    (n.y_tl() - t.y_tl()) / th,
                    (n.x_br() - t.x_br()) / tw,
                    (n.y_br() - t.y_br()) / th,
                    (n.x_br() - n.x_tl()) * (n.y_br() - n.y_tl()) / (tw * th),
                ]);
            }
            None => out.extend([0.0; 5]),
        }
    }
    out
}

fn geometry_vectors() -> Outcome {
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).unwrap();
    let mut failures = Vec::new();
    let mut check = |name: &str, got: &[f64], want: &[f64]| {
        if got != want {
            failures.push(format!("{name}: {got:?} != {want:?}"));
        }
    };
    check(
        "full image",
        &absolute_location(&b(0.0, 0.0, 64.0, 48.0), 64.0, 48.0).unwrap(),
        &[0.0, 0.0, 1.0, 1.0, 1.0],
    );
    check(
        "left half",
        &absolute_location(&b(0.0, 0.0, 32.0, 48.0), 64.0, 48.0).unwrap(),
        &[0.0, 0.0, 0.5, 1.0, 0.5],
    );
    check(
        "point box",
        &absolute_location(&b(3.0, 3.0, 3.0, 3.0), 10.0, 10.0).unwrap(),
        &[0.3, 0.3, 0.3, 0.3, 0.0],
    );
    let unit = b(0.0, 0.0, 10.0, 10.0);
    check(
        "self offset",
        &relative_offset(&unit, &unit).unwrap(),
        &[0.0, 0.0, 0.0, 0.0, 1.0],
    );
    check(
        "right neighbour",
        &relative_offset(&unit, &b(10.0, 0.0, 20.0, 10.0)).unwrap(),
        &[1.0, 0.0, 1.0, 0.0, 1.0],
    );
    check(
        "inner quarter",
        &relative_offset(&unit, &b(0.0, 0.0, 5.0, 5.0)).unwrap(),
        &[0.0, 0.0, -0.5, -0.5, 0.25],
    );

    let single = [proposal(0, [10.0, 20.0, 30.0, 60.0], 0)];
    let f = location_feature(&single[0], &single, 100.0, 100.0)
        .unwrap()
        .flattened();
    let mut want = vec![0.1, 0.2, 0.3, 0.6, 0.08];
    want.extend([0.0; 25]);
    check("single proposal", &f, &want);

    let twins = [
        proposal(0, [10.0, 20.0, 30.0, 40.0], 0),
        proposal(1, [70.0, 20.0, 90.0, 40.0], 0),
    ];
    let left = location_feature(&twins[0], &twins, 100.0, 100.0).unwrap();
    let right = location_feature(&twins[1], &twins, 100.0, 100.0).unwrap();
    let mirrored: Vec<f64> = right.relatives[0]
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == 0 || k == 2 { -v } else { v })
        .collect();
    check("mirrored twins", &left.relatives[0], &mirrored);

    let scene = [
        proposal(0, [0.0, 0.0, 20.0, 20.0], 1),
        proposal(1, [30.0, 10.0, 50.0, 40.0], 1),
        proposal(2, [60.0, 5.0, 70.0, 25.0], 2),
    ];
    for p in &scene {
        let got = location_feature(p, &scene, 80.0, 50.0).unwrap().flattened();
        check(
            &format!("three-proposal scene, proposal {}", p.id),
            &got,
            &location_reference(p, &scene, 80.0, 50.0),
        );
    }
    assert_eq!(LOCATION_DIM, 30);
    let count = failures.len();
    Outcome::hard(
        failures.is_empty(),
        if failures.is_empty() {
            "worked examples match exactly".to_string()
        } else {
            format!("{count} mismatches, first {}", failures[0])
        },
    )
}

fn loss_composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut reduces = true;
    for _ in 0..1000 {
        let c = LossComponents {
            avis: rng.random_range(0.0..10.0),
            alan: rng.random_range(0.0..10.0),
            lan: rng.random_range(0.0..10.0),
            att: rng.random_bool(0.7).then(|| rng.random_range(0.0..10.0)),
        };
        let w = LossWeights {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            gamma: rng.random_range(0.0..40.0),
            lambda: rng.random_range(0.0..2.0),
        };
        let b = collaborative_loss(c, w);
        let adp = w.alpha * c.avis + w.beta * c.alan;
        let total = adp + w.gamma * c.lan + w.lambda * c.att.unwrap_or(0.0);
        worst = worst.max((b.adp - adp).abs()).max((b.total - total).abs());
        let zeroed = collaborative_loss(
            c,
            LossWeights {
                gamma: 0.0,
                lambda: 0.0,
                ..w
            },
        );
        reduces &= zeroed.total.to_bits() == zeroed.adp.to_bits();
    }
    Outcome::hard(
        worst <= 1e-9 && reduces,
        format!("max composition error {worst:.1e}; gamma=lambda=0 gives adp bit-identically: {reduces}"),
    )
}

fn schedule() -> Outcome {
    let config = TrainConfig::default();
    let got = [
        lr_at(0, &config),
        lr_at(8000, &config),
        lr_at(16000, &config),
    ];
    let want = [4e-4, 4e-5, 4e-6];
    let pass = got
        .iter()
        .zip(want)
        .all(|(g, w)| ((g - w) / w).abs() < 1e-12);
    Outcome::hard(
        pass,
        format!(
            "lr at 0/8000/16000 = {:e} / {:e} / {:e}",
            got[0], got[1], got[2]
        ),
    )
}

fn acceptance_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embed_dim: 64,
        hidden_dim: 64,
        subject_dim: 64,
        attention_hidden: 64,
        decoder_hidden: 64,
        max_iters: 3000,
        eval_every: 0,
        log_every: 500,
        seed,
        ..TrainConfig::for_context(true)
    }
}

/// Generates 800 train and 200 evaluation scenes, trains, and returns the
/// evaluation accuracy with its per-template breakdown.
fn synthetic_run(seed: u64, weights: LossWeights) -> (f64, String) {
    let scenes = generate_synthetic(seed, 1000, 5, &GridSpec::default()).unwrap();
    let (train, val): (Vec<Scene>, Vec<Scene>) =
        scenes.into_iter().partition(|s| s.split == "train");
    let config = acceptance_config(seed).with_weights(weights);
    let outcome = run_training(&train, &val, &config, None).unwrap();
    let (model, params) = outcome.checkpoint.restore().unwrap();
    let report = evaluate(
        &val,
        &model,
        &params,
        &outcome.checkpoint.vocabulary(),
        "val",
    )
    .unwrap();
    let templates: Vec<String> = report
        .per_template
        .iter()
        .map(|(t, tally)| format!("{t} {:.2}", tally.accuracy()))
        .collect();
    (report.accuracy, templates.join(", "))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn seeds_in_parallel(weights: LossWeights) -> Vec<(f64, String)> {
    std::thread::scope(|s| {
        let handles: Vec<_> = (1..=3)
            .map(|seed| s.spawn(move || synthetic_run(seed, weights)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// Full-loss runs, shared by the end-to-end and ablation criteria.
fn full_runs() -> &'static (Vec<(f64, String)>, Duration) {
    static RUNS: OnceLock<(Vec<(f64, String)>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = seeds_in_parallel(LossWeights::CONTEXT_ENABLED_DEFAULT);
        (runs, start.elapsed())
    })
}

fn synthetic_end_to_end() -> Outcome {
    let (runs, elapsed) = full_runs();
    let elapsed = *elapsed;
    let acc = median(runs.iter().map(|r| r.0).collect());
    let detail: Vec<String> = runs
        .iter()
        .enumerate()
        .map(|(k, (a, t))| format!("seed {} {a:.3} ({t})", k + 1))
        .collect();
    Outcome::hard(
        acc >= 0.80 && elapsed <= Duration::from_secs(900),
        format!(
            "median accuracy {acc:.3} (target >= 0.80, chance ~0.20) in {:.0}s; {}",
            elapsed.as_secs_f64(),
            detail.join("; ")
        ),
    )
}

fn ablation_trend() -> Outcome {
    let full = &full_runs().0;
    let lan_only = seeds_in_parallel(LossWeights {
        alpha: 0.0,
        beta: 0.0,
        lambda: 0.0,
        ..LossWeights::CONTEXT_ENABLED_DEFAULT
    });
    let f = median(full.iter().map(|r| r.0).collect());
    let l = median(lan_only.iter().map(|r| r.0).collect());
    let per_seed: Vec<String> = full
        .iter()
        .zip(lan_only.iter())
        .enumerate()
        .map(|(k, (a, b))| format!("seed {} {:.3} vs {:.3}", k + 1, a.0, b.0))
        .collect();
    Outcome {
        pass: f >= l,
        soft: true,
        detail: format!(
            "full median {f:.3} vs language-only median {l:.3}; {}",
            per_seed.join(", ")
        ),
    }
}

fn source_mentions_ground_truth(path: &Path) -> bool {
    let text = std::fs::read_to_string(path).unwrap();
    text.contains("gt_proposal") || text.contains("evaluation_view") || text.contains("set_gt")
}

fn isolation() -> Outcome {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let training_path = [
        "training.rs",
        "model.rs",
        "grounding.rs",
        "reconstruction.rs",
        "query_encoder.rs",
        "proposal_encoder.rs",
        "nn.rs",
        "graph.rs",
        "params.rs",
    ];
    let leaking: Vec<&str> = training_path
        .iter()
        .copied()
        .filter(|f| source_mentions_ground_truth(&src.join(f)))
        .collect();

    let scenes = generate_synthetic(4, 12, 4, &GridSpec::default()).unwrap();
    let mut scrambled = scenes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for scene in &mut scrambled {
        for q in &mut scene.queries {
            let gt = rng.random_bool(0.5).then(|| rng.random_range(0..100));
            q.set_gt_proposal(gt);
        }
    }
    let config = TrainConfig {
        embed_dim: 6,
        hidden_dim: 5,
        subject_dim: 6,
        attention_hidden: 6,
        decoder_hidden: 5,
        max_iters: 40,
        log_every: 5,
        eval_every: 0,
        seed: 2,
        ..TrainConfig::default()
    };
    let a = run_training(&scenes, &[], &config, None).unwrap();
    let b = run_training(&scrambled, &[], &config, None).unwrap();
    let identical = a.metrics == b.metrics && a.checkpoint.to_bytes() == b.checkpoint.to_bytes();
    Outcome::hard(
        leaking.is_empty() && identical,
        format!(
            "training sources naming ground truth: {leaking:?}; scrambled ground truth leaves metrics and parameters identical: {identical}"
        ),
    )
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rows: Vec<Vec<f64>> = (0..7)
        .map(|_| {
            (0..11)
                .map(|_| rng.random_range(-3.0..3.0) as f32 as f64)
                .collect()
        })
        .collect();
    let path = dir.path().join("x.arnf");
    write_features(&path, &rows).unwrap();
    let back = read_features(&path).unwrap();
    let features_exact = rows
        .iter()
        .flatten()
        .map(|v| v.to_bits())
        .eq(back.iter().flatten().map(|v| v.to_bits()));

    let scenes = generate_synthetic(6, 10, 4, &GridSpec::default()).unwrap();
    let config = TrainConfig {
        embed_dim: 6,
        hidden_dim: 5,
        subject_dim: 6,
        attention_hidden: 6,
        decoder_hidden: 5,
        max_iters: 10,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let outcome = run_training(&scenes, &[], &config, None).unwrap();
    let ckpt_path = dir.path().join("c.arnc");
    outcome.checkpoint.save(&ckpt_path).unwrap();
    let reloaded = Checkpoint::load(&ckpt_path).unwrap();
    let (m1, p1) = outcome.checkpoint.restore().unwrap();
    let (m2, p2) = reloaded.restore().unwrap();
    let vocab = reloaded.vocabulary();
    let mut forward_exact = reloaded == outcome.checkpoint;
    for s in &scenes {
        let geometry = SceneGeometry::new(&s.proposals, s.width, s.height).unwrap();
        for q in &s.queries {
            let tokens = vocab.encode(&q.tokens);
            let a = m1.ground(&p1, &geometry, &tokens).unwrap();
            let b = m2.ground(&p2, &geometry, &tokens).unwrap();
            forward_exact &= a.scores.fused.iter().map(|v| v.to_bits()).eq(b
                .scores
                .fused
                .iter()
                .map(|v| v.to_bits()));
        }
    }

    let write = |sub: &str| {
        let out = dir.path().join(sub);
        write_manifest(
            &out,
            &generate_synthetic(42, 25, 5, &GridSpec::default()).unwrap(),
        )
        .unwrap();
        let mut files: Vec<_> = walk(&out);
        files.sort();
        files
            .into_iter()
            .map(|p| {
                (
                    p.strip_prefix(&out).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect::<Vec<_>>()
    };
    let synth_reproducible = write("a") == write("b");
    Outcome::hard(
        features_exact && forward_exact && synth_reproducible,
        format!(
            "feature store bit-exact: {features_exact}; checkpoint reload forward bit-exact: {forward_exact}; synth byte-reproducible: {synth_reproducible}"
        ),
    )
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}
