//! Acceptance suite: one test per verification criterion, each printing a
//! PASS line with its measured values (visible with `--nocapture`).
//!
//! The heavier checks (overfit smoke run, multitask non-inferiority, the
//! ablation harness) train real models on generated phantoms at reduced
//! input resolution so the whole suite stays desk-scale.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use birads_net::dataset::{make_fold_plan, BBox, DatasetManifest, FoldPlan, ImageRecord};
use birads_net::evaluation::{
    confusion_metrics, evaluate_prepared, regression_metrics, run_ablation_suite,
};
use birads_net::lexicon::{
    category_to_likelihood, encode_labels, likelihood_to_category, BiradsCategory,
    DescriptorLabels, EchoPatternClass, MarginClass, OrientationClass, PosteriorClass,
    ShapeClass, TaskTargets, TumorClass,
};
use birads_net::model::checkpoint::{load_checkpoint, save_checkpoint};
use birads_net::model::{BiradsNet, EncoderSpec, ModelOutputs, ModelSpec};
use birads_net::objective::{agreement_loss, loss_gradients, total_loss, LossWeights};
use birads_net::phantom::generate_dataset;
use birads_net::preprocess::{
    apply_augmentation, augment, crop_region, draw_augmentation, equalize_histogram, hflip,
    AugmentConfig, PreprocessConfig,
};
use birads_net::training::{
    drive_training_loop, run_cross_validation, train_prepared_with_stop, PreparedDataset,
    TrainConfig,
};

/// Input resolution used by the training-based criteria. The architecture
/// contract itself is checked at the full 256 resolution in criterion 4.
const DESK_TARGET_SIZE: usize = 64;

fn desk_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        target_size: DESK_TARGET_SIZE,
        ..Default::default()
    }
}

#[test]
fn criterion_01_lexicon_exactness() {
    let start = Instant::now();
    let expected = [
        (BiradsCategory::Cat3, 0.01),
        (BiradsCategory::Cat4A, 0.06),
        (BiradsCategory::Cat4B, 0.30),
        (BiradsCategory::Cat4C, 0.725),
        (BiradsCategory::Cat5, 0.975),
    ];
    for (category, likelihood) in expected {
        assert_eq!(
            category_to_likelihood(category).unwrap(),
            likelihood,
            "category {category} must map to {likelihood} with zero tolerance"
        );
        assert_eq!(
            likelihood_to_category(likelihood),
            category,
            "round trip must recover {category}"
        );
    }
    assert_eq!(category_to_likelihood(BiradsCategory::Cat2).unwrap(), 0.0);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?} exceeds 1 s");
    println!("PASS criterion 01: lexicon mapping exact, round trip holds ({elapsed:?})");
}

fn hand_output(
    shape: [f64; 3],
    orientation: [f64; 2],
    margin: [f64; 2],
    echo: [f64; 6],
    posterior: [f64; 4],
    subtypes: [f64; 4],
    likelihood: f64,
    tumor: [f64; 2],
) -> ModelOutputs<f64> {
    ModelOutputs {
        shape: ndarray::arr1(&shape),
        orientation: ndarray::arr1(&orientation),
        margin: ndarray::arr1(&margin),
        echo: ndarray::arr1(&echo),
        posterior: ndarray::arr1(&posterior),
        subtypes: ndarray::arr1(&subtypes),
        likelihood,
        tumor: ndarray::arr1(&tumor),
    }
}

#[test]
fn criterion_02_loss_decomposition() {
    // Two hand-specified samples; every expected value below is computed
    // with explicit scalar arithmetic, independent of the objective module.
    let target_a = TaskTargets {
        shape: [1.0, 0.0, 0.0],
        orientation: [1.0, 0.0],
        margin: [1.0, 0.0],
        echo: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        posterior: [1.0, 0.0, 0.0, 0.0],
        subtypes: [0.0; 4],
        likelihood: 0.01,
        tumor: [1.0, 0.0],
    };
    let output_a = hand_output(
        [0.7, 0.2, 0.1],
        [0.6, 0.4],
        [0.8, 0.2],
        [0.3, 0.2, 0.2, 0.1, 0.1, 0.1],
        [0.4, 0.3, 0.2, 0.1],
        [0.2, 0.1, 0.3, 0.4],
        0.2,
        [0.9, 0.1],
    );
    let target_b = TaskTargets {
        shape: [0.0, 0.0, 1.0],
        orientation: [0.0, 1.0],
        margin: [0.0, 1.0],
        echo: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        posterior: [0.0, 0.0, 1.0, 0.0],
        subtypes: [1.0, 0.0, 0.0, 1.0],
        likelihood: 0.975,
        tumor: [0.0, 1.0],
    };
    let output_b = hand_output(
        [0.2, 0.3, 0.5],
        [0.35, 0.65],
        [0.45, 0.55],
        [0.1, 0.5, 0.1, 0.1, 0.1, 0.1],
        [0.2, 0.2, 0.5, 0.1],
        [0.7, 0.2, 0.1, 0.8],
        0.9,
        [0.3, 0.7],
    );

    let weights = LossWeights::default();
    let breakdown = total_loss(
        &[output_a, output_b],
        &[target_a, target_b],
        &weights,
    )
    .unwrap();

    // Per-task means over the two samples, written out by hand.
    let l = |p: f64| -p.ln();
    let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let task = [
        (l(0.7) + l(0.5)) / 2.0,
        (l(0.6) + l(0.65)) / 2.0,
        (l(0.8) + l(0.55)) / 2.0,
        (l(0.3) + l(0.5)) / 2.0,
        (l(0.4) + l(0.5)) / 2.0,
        (bce(0.2, 0.0) + bce(0.7, 1.0)) / 2.0,
        (bce(0.1, 0.0) + bce(0.2, 0.0)) / 2.0,
        (bce(0.3, 0.0) + bce(0.1, 0.0)) / 2.0,
        (bce(0.4, 0.0) + bce(0.8, 1.0)) / 2.0,
        ((0.2f64 - 0.01).powi(2) + (0.9f64 - 0.975).powi(2)) / 2.0,
        (l(0.9) + l(0.7)) / 2.0,
    ];
    let agreement_a = ((0.1f64 - 0.2).abs() - (0.0f64 - 0.01).abs()).powi(2);
    let agreement_b = ((0.7f64 - 0.9).abs() - (1.0f64 - 0.975).abs()).powi(2);
    let agreement = (agreement_a + agreement_b) / 2.0;

    let lambdas = [0.2, 0.2, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.2, 0.5];
    let hand_total: f64 = task
        .iter()
        .zip(&lambdas)
        .map(|(loss, weight)| loss * weight)
        .sum::<f64>()
        + 0.2 * agreement;

    assert!(
        (breakdown.total - hand_total).abs() < 1e-6,
        "total {} vs hand-computed {hand_total}",
        breakdown.total
    );
    for (k, expected) in task.iter().enumerate() {
        assert!(
            (breakdown.tasks[k] - expected).abs() < 1e-9,
            "task {k}: {} vs {expected}",
            breakdown.tasks[k]
        );
    }
    assert!((breakdown.agreement - agreement).abs() < 1e-12);

    // Worked example: gaps 0.5 vs 0.7 square to 0.04.
    let example = agreement_loss(&[0.3], &[0.8], &[0.3], &[1.0]).unwrap();
    assert!(
        (example - 0.04).abs() < 1e-12,
        "agreement example {example} != 0.04"
    );
    println!(
        "PASS criterion 02: loss decomposition matches hand computation (total {:.6})",
        breakdown.total
    );
}

fn mini_spec_f64(seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::new(EncoderSpec::tiny((4, 8)), seed);
    spec.head_hidden = 16;
    spec.branch_hidden = 8;
    spec.dropout = 0.0;
    spec
}

fn gradcheck_batch() -> (Vec<Array3<f64>>, Vec<TaskTargets>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let inputs: Vec<Array3<f64>> = (0..4)
        .map(|_| Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(0.0..1.0)))
        .collect();
    let targets = vec![
        encode_labels(
            &DescriptorLabels {
                shape: ShapeClass::Oval,
                orientation: OrientationClass::Parallel,
                margin: MarginClass::circumscribed(),
                echo: EchoPatternClass::Anechoic,
                posterior: PosteriorClass::None,
            },
            BiradsCategory::Cat3,
            TumorClass::Benign,
        )
        .unwrap(),
        encode_labels(
            &DescriptorLabels {
                shape: ShapeClass::Irregular,
                orientation: OrientationClass::NotParallel,
                margin: MarginClass::not_circumscribed(true, false, false, true),
                echo: EchoPatternClass::Hypoechoic,
                posterior: PosteriorClass::Shadowing,
            },
            BiradsCategory::Cat5,
            TumorClass::Malignant,
        )
        .unwrap(),
        encode_labels(
            &DescriptorLabels {
                shape: ShapeClass::Round,
                orientation: OrientationClass::Parallel,
                margin: MarginClass::not_circumscribed(false, true, true, false),
                echo: EchoPatternClass::Heterogeneous,
                posterior: PosteriorClass::Combined,
            },
            BiradsCategory::Cat4B,
            TumorClass::Benign,
        )
        .unwrap(),
        encode_labels(
            &DescriptorLabels {
                shape: ShapeClass::Oval,
                orientation: OrientationClass::NotParallel,
                margin: MarginClass::not_circumscribed(true, false, false, false),
                echo: EchoPatternClass::ComplexCysticSolid,
                posterior: PosteriorClass::Enhancement,
            },
            BiradsCategory::Cat4A,
            TumorClass::Benign,
        )
        .unwrap(),
    ];
    (inputs, targets)
}

fn batch_total_loss(
    model: &BiradsNet<f64>,
    inputs: &[Array3<f64>],
    targets: &[TaskTargets],
    weights: &LossWeights,
) -> f64 {
    let outputs: Vec<ModelOutputs<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| model.forward_train(x, i as u64).unwrap().0)
        .collect();
    total_loss(&outputs, targets, weights).unwrap().total
}

#[test]
fn criterion_03_gradient_check() {
    let start = Instant::now();
    let model = BiradsNet::<f64>::from_spec(mini_spec_f64(5)).unwrap();
    let (inputs, targets) = gradcheck_batch();
    let weights = LossWeights::default();

    // Analytic gradients of the batch total loss.
    let forward: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| model.forward_train(x, i as u64).unwrap())
        .collect();
    let outputs: Vec<ModelOutputs<f64>> = forward.iter().map(|(o, _)| o.clone()).collect();
    let output_grads = loss_gradients(&outputs, &targets, &weights).unwrap();
    let mut grads = model.params().zeros_like();
    for ((_, cache), g) in forward.iter().zip(&output_grads) {
        model.backward(cache, g, &mut grads);
    }

    // Deterministically sample parameters across every tensor.
    let total = model.param_len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut sampled: Vec<usize> = (0..260).map(|_| rng.random_range(0..total)).collect();
    sampled.sort_unstable();
    sampled.dedup();
    assert!(sampled.len() >= 100, "need at least 100 sampled parameters");

    let step = 1e-4;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0usize;
    for &flat in &sampled {
        let mut plus = model.clone();
        plus.nudge_param(flat, step);
        let loss_plus = batch_total_loss(&plus, &inputs, &targets, &weights);
        let mut minus = model.clone();
        minus.nudge_param(flat, -step);
        let loss_minus = batch_total_loss(&minus, &inputs, &targets, &weights);
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let analytic = model.grad_at(&grads, flat);
        if analytic.abs() > 1e-8 {
            nonzero += 1;
        }
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if (analytic - numeric).abs() > 1e-10 {
            worst = worst.max(rel);
        }
        assert!(
            rel < 1e-3 || (analytic - numeric).abs() < 1e-10,
            "parameter {flat}: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
        );
    }
    assert!(
        nonzero >= 100,
        "gradient check needs at least 100 informative comparisons, got {nonzero} of {}",
        sampled.len()
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "runtime {elapsed:?} exceeds 5 min");
    println!(
        "PASS criterion 03: {} parameters checked ({nonzero} with nonzero gradient), worst relative error {worst:.3e} ({elapsed:?})",
        sampled.len()
    );
}

#[test]
fn criterion_04_shape_contract() {
    let model = BiradsNet::<f32>::from_spec(ModelSpec::new(EncoderSpec::vgg16(), 11)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<Array3<f32>> = (0..6)
        .map(|_| Array3::from_shape_fn((3, 256, 256), |_| rng.random_range(0.0f32..1.0)))
        .collect();

    let fmap = model.backbone_features(&batch[0]).unwrap();
    assert_eq!(fmap.dim(), (512, 8, 8), "backbone feature maps must be 8x8x512");

    let outputs = model.infer_batch(&batch).unwrap();
    assert_eq!(outputs.len(), 6);
    for output in &outputs {
        output.check_invariants(1e-5).unwrap();
        assert_eq!(output.shape.len(), 3);
        assert_eq!(output.orientation.len(), 2);
        assert_eq!(output.margin.len(), 2);
        assert_eq!(output.subtypes.len(), 4);
        assert_eq!(output.echo.len(), 6);
        assert_eq!(output.posterior.len(), 4);
        assert_eq!(output.tumor.len(), 2);
    }
    println!("PASS criterion 04: batch of 6 yields arities (3,2,2,4 scalars,6,4,1,2), softmax sums within 1e-5, feature maps 8x8x512");
}

#[test]
fn criterion_05_schedule_correctness() {
    let mut config = TrainConfig::default();
    config.max_epochs = 200;

    // One improving epoch, then flat: the LR must drop exactly after 15
    // non-improving epochs, training must stop exactly after 30.
    let log = drive_training_loop(
        &config,
        |_, _| Ok(birads_net::objective::LossBreakdown::zeros()),
        |epoch| {
            let mut b = birads_net::objective::LossBreakdown::zeros();
            b.total = if epoch == 0 { 1.0 } else { 1.0 };
            // First epoch improves over "no best yet"; all later epochs tie.
            Ok(b)
        },
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(log.epochs.len(), 31, "stop after exactly 30 non-improving epochs");
    let drops: Vec<usize> = log
        .epochs
        .iter()
        .filter(|e| e.lr_dropped_now)
        .map(|e| e.epoch)
        .collect();
    assert_eq!(drops, vec![16], "LR drops exactly after the 15th non-improving epoch");
    assert_eq!(log.epochs[15].lr, 1e-5, "epoch 16 still ran at the initial LR");
    assert_eq!(log.epochs[16].lr, 1e-6, "epoch 17 runs at the reduced LR");
    assert!(
        log.epochs.iter().all(|e| e.lr == 1e-5 || e.lr == 1e-6),
        "LR only ever takes the two configured values"
    );

    // Strictly improving validation: no drop, no stop.
    let log = drive_training_loop(
        &config,
        |_, _| Ok(birads_net::objective::LossBreakdown::zeros()),
        |epoch| {
            let mut b = birads_net::objective::LossBreakdown::zeros();
            b.total = 1.0 / (epoch + 1) as f64;
            Ok(b)
        },
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(log.epochs.len(), 200);
    assert!(log.epochs.iter().all(|e| e.lr == 1e-5));
    assert!(log.epochs.iter().all(|e| !e.lr_dropped_now));
    println!("PASS criterion 05: LR drop after exactly 15 flat epochs, stop after exactly 30, at most one transition");
}

fn smoke_config(max_epochs: usize, lr: f64) -> TrainConfig {
    let mut config = TrainConfig::default();
    config.seed = 7;
    config.augment_enabled = false;
    config.preprocess = desk_preprocess();
    config.initial_lr = lr;
    config.reduced_lr = lr / 10.0;
    config.lr_patience = max_epochs.max(2) - 1;
    config.stop_patience = max_epochs.max(2);
    config.max_epochs = max_epochs;
    config
}

struct SmokeScores {
    tumor: f64,
    descriptors: [f64; 5],
}

fn training_scores(model: &BiradsNet<f32>, data: &PreparedDataset<f32>) -> SmokeScores {
    let report = evaluate_prepared(model, data, None).unwrap();
    SmokeScores {
        tumor: report.tumor_accuracy.unwrap(),
        descriptors: [
            report.shape_accuracy.unwrap(),
            report.orientation_accuracy.unwrap(),
            report.margin_accuracy.unwrap(),
            report.echo_accuracy.unwrap(),
            report.posterior_accuracy.unwrap(),
        ],
    }
}

impl SmokeScores {
    fn meets_targets(&self) -> bool {
        self.tumor >= 0.95 && self.descriptors.iter().all(|&a| a >= 0.90)
    }
}

#[test]
fn criterion_06_overfit_smoke() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(64, 21, dir.path()).unwrap();

    let config = smoke_config(200, 1e-3);
    let data = PreparedDataset::<f32>::load(&manifest.records, &config.preprocess).unwrap();
    let mut model = birads_net::training::build_fold_model(&config, 0).unwrap();

    let (best, log) = train_prepared_with_stop(&mut model, &data, &data, &config, |obs| {
        obs.epoch % 5 == 0 && training_scores(obs.model, &data).meets_targets()
    })
    .unwrap();

    let scores = training_scores(&best, &data);
    let elapsed = start.elapsed();
    assert!(
        scores.meets_targets(),
        "after {} epochs: tumor {:.3}, descriptors {:?}",
        log.epochs.len(),
        scores.tumor,
        scores.descriptors
    );
    assert!(log.epochs.len() <= 200, "must converge within 200 epochs");
    assert!(
        elapsed.as_secs_f64() < 1800.0,
        "runtime {elapsed:?} exceeds 30 minutes"
    );
    println!(
        "PASS criterion 06: {} epochs to tumor {:.3} / descriptors {:?} ({elapsed:?})",
        log.epochs.len(),
        scores.tumor,
        scores.descriptors
    );
}

fn cv_config(weights: LossWeights) -> TrainConfig {
    let mut config = TrainConfig::default();
    config.seed = 13;
    config.augment_enabled = false;
    config.preprocess = desk_preprocess();
    config.initial_lr = 1e-3;
    config.reduced_lr = 1e-4;
    config.max_epochs = 8;
    config.lr_patience = 7;
    config.stop_patience = 8;
    config.weights = weights;
    config
}

#[test]
fn criterion_07_multitask_direction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(500, 42, dir.path()).unwrap();
    let plan = make_fold_plan(&manifest, 5, 0.15, 7).unwrap();

    let multitask = run_cross_validation(&manifest, &plan, &cv_config(LossWeights::default()))
        .unwrap();
    let single = run_cross_validation(&manifest, &plan, &cv_config(LossWeights::tumor_only()))
        .unwrap();

    let multitask_acc = multitask.aggregate.tumor_accuracy.unwrap();
    let single_acc = single.aggregate.tumor_accuracy.unwrap();
    let elapsed = start.elapsed();
    assert!(
        multitask_acc >= single_acc - 0.02,
        "multitask {multitask_acc:.4} must not trail single-branch {single_acc:.4} by more than 0.02"
    );
    assert!(
        elapsed.as_secs_f64() < 4.0 * 3600.0,
        "runtime {elapsed:?} exceeds 4 h"
    );
    println!(
        "PASS criterion 07: multitask {multitask_acc:.4} vs single-branch {single_acc:.4} over 5 folds ({elapsed:?})"
    );
}

#[test]
fn criterion_08_ablation_harness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(100, 3, dir.path()).unwrap();
    let plan = make_fold_plan(&manifest, 5, 0.15, 5).unwrap();

    let mut config = cv_config(LossWeights::default());
    config.max_epochs = 2;
    config.lr_patience = 1;
    config.stop_patience = 2;
    config.augment_enabled = true;
    let rows = run_ablation_suite(&manifest, &plan, &config).unwrap();

    assert_eq!(rows.len(), 10, "five component toggles plus five ladder rows");
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "full",
            "no_augmentation",
            "no_pretraining",
            "single_channel",
            "no_cropping",
            "tumor_class_only",
            "plus_margin",
            "plus_orientation_shape",
            "plus_echo_posterior",
            "plus_likelihood_full"
        ]
    );

    // Component-toggle rows train all branches: every cell must be present.
    for row in &rows[..5] {
        for (name, value) in birads_net::evaluation::MetricsReport::FIELD_NAMES
            .iter()
            .zip(row_field_values(&row.metrics))
        {
            assert!(
                value.is_some(),
                "row `{}` is missing cell `{name}`",
                row.label
            );
        }
    }
    // Toggles are applied progressively.
    assert!(rows[1].augment == false && rows[0].augment == true);
    assert!(rows[2].augment == false && rows[2].pretrained == false);
    assert!(rows[3].three_channels == false && rows[3].augment == false);
    assert!(rows[4].crop == false && rows[4].three_channels == false);

    // Ladder rows: cells absent exactly for branches the row did not train.
    let tumor_only = &rows[5];
    assert!(tumor_only.metrics.tumor_accuracy.is_some());
    assert!(tumor_only.metrics.shape_accuracy.is_none());
    assert!(tumor_only.metrics.margin_accuracy.is_none());
    assert!(tumor_only.metrics.likelihood_mse.is_none());
    let with_margin = &rows[6];
    assert!(with_margin.metrics.margin_accuracy.is_some());
    assert!(with_margin.metrics.subtype_spiculated_accuracy.is_some());
    assert!(with_margin.metrics.shape_accuracy.is_none());
    let with_shape = &rows[7];
    assert!(with_shape.metrics.shape_accuracy.is_some());
    assert!(with_shape.metrics.orientation_accuracy.is_some());
    assert!(with_shape.metrics.echo_accuracy.is_none());
    let with_echo = &rows[8];
    assert!(with_echo.metrics.echo_accuracy.is_some());
    assert!(with_echo.metrics.posterior_accuracy.is_some());
    assert!(with_echo.metrics.likelihood_r2.is_none());
    let full = &rows[9];
    for value in row_field_values(&full.metrics) {
        assert!(value.is_some(), "full ladder row must fill every cell");
    }

    // The table serializes without absent mandatory cells.
    let out = dir.path().join("ablation.csv");
    birads_net::evaluation::write_ablation_csv(&rows, &out).unwrap();
    assert!(out.exists());
    let elapsed = start.elapsed();
    println!(
        "PASS criterion 08: 10 ablation rows with structurally-correct cells ({elapsed:?})"
    );
}

fn row_field_values(report: &birads_net::evaluation::MetricsReport) -> [Option<f64>; 14] {
    [
        report.tumor_accuracy,
        report.sensitivity,
        report.specificity,
        report.shape_accuracy,
        report.orientation_accuracy,
        report.margin_accuracy,
        report.echo_accuracy,
        report.posterior_accuracy,
        report.subtype_indistinct_accuracy,
        report.subtype_angular_accuracy,
        report.subtype_microlobulated_accuracy,
        report.subtype_spiculated_accuracy,
        report.likelihood_r2,
        report.likelihood_mse,
    ]
}

fn synthetic_manifest(benign: usize, malignant: usize) -> DatasetManifest {
    let labels = DescriptorLabels {
        shape: ShapeClass::Oval,
        orientation: OrientationClass::Parallel,
        margin: MarginClass::circumscribed(),
        echo: EchoPatternClass::Hypoechoic,
        posterior: PosteriorClass::None,
    };
    let mut records = Vec::new();
    for i in 0..benign + malignant {
        records.push(ImageRecord {
            image_path: format!("img_{i:05}.png").into(),
            bbox: BBox::new(10, 10, 50, 40),
            labels,
            category: BiradsCategory::Cat3,
            tumor_class: if i < benign {
                TumorClass::Benign
            } else {
                TumorClass::Malignant
            },
        });
    }
    DatasetManifest {
        records,
        source: "synthetic".into(),
    }
}

fn check_plan(plan: &FoldPlan, benign: usize, malignant: usize) {
    let n = benign + malignant;
    let global = malignant as f64 / n as f64;
    let mut test_union: Vec<usize> = Vec::new();
    for fold in &plan.folds {
        let mut all: Vec<usize> = fold
            .train
            .iter()
            .chain(&fold.val)
            .chain(&fold.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<usize>>(), "coverage + disjointness");
        test_union.extend_from_slice(&fold.test);
        for split in [&fold.train, &fold.val, &fold.test] {
            let m = split.iter().filter(|&&i| i >= benign).count() as f64;
            let ratio = m / split.len() as f64;
            let slack = 0.02 + 1.0 / split.len() as f64;
            assert!(
                (ratio - global).abs() <= slack,
                "stratification: ratio {ratio:.3} vs global {global:.3} (slack {slack:.3})"
            );
        }
    }
    test_union.sort_unstable();
    assert_eq!(
        test_union,
        (0..n).collect::<Vec<usize>>(),
        "test sets must partition the dataset"
    );
}

#[test]
fn criterion_09_split_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let k = rng.random_range(2..=6usize);
        let benign = rng.random_range(k..=60);
        let malignant = rng.random_range(k..=60);
        let val_fraction = rng.random_range(0.08..0.3);
        let seed = rng.random_range(0..u64::MAX / 2);
        let manifest = synthetic_manifest(benign, malignant);
        let plan = make_fold_plan(&manifest, k, val_fraction, seed).unwrap();
        check_plan(&plan, benign, malignant);
        let again = make_fold_plan(&manifest, k, val_fraction, seed).unwrap();
        assert_eq!(plan, again, "case {case}: identical seed must give identical plan");
    }
    let elapsed = start.elapsed();
    println!("PASS criterion 09: 1000 random fold plans satisfy all invariants ({elapsed:?})");
}

#[test]
fn criterion_10_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let n = rng.random_range(1..=1000usize);
        let preds: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.5).collect();
        let targets: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
        let metrics = confusion_metrics(&preds, &targets).unwrap();
        // Brute-force four-counter tally.
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            match (preds[i], targets[i]) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        assert_eq!(metrics.accuracy, (tp + tn) as f64 / n as f64);
        match metrics.sensitivity {
            Some(v) => assert_eq!(v, tp as f64 / (tp + fn_) as f64),
            None => assert_eq!(tp + fn_, 0),
        }
        match metrics.specificity {
            Some(v) => assert_eq!(v, tn as f64 / (tn + fp) as f64),
            None => assert_eq!(tn + fp, 0),
        }
    }

    // R-squared two ways.
    for _ in 0..200 {
        let n = rng.random_range(2..=100usize);
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (r2, mse) = regression_metrics(&preds, &targets).unwrap();
        let mean = targets.iter().sum::<f64>() / n as f64;
        let variance =
            targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
        if variance > 0.0 {
            assert!((r2.unwrap() - (1.0 - mse / variance)).abs() < 1e-10);
        }
    }

    // Worked sensitivity example: TP=10, FN=2.
    let mut preds = vec![true; 10];
    preds.extend([false, false]);
    let metrics = confusion_metrics(&preds, &vec![true; 12]).unwrap();
    assert!((metrics.sensitivity.unwrap() - 0.8333333333333334).abs() < 1e-12);
    let elapsed = start.elapsed();
    println!("PASS criterion 10: confusion and regression metrics match brute-force oracles ({elapsed:?})");
}

#[test]
fn criterion_11_preprocessing_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // Crop: always square with side min(H, W); contains the bbox when the
    // bbox fits inside such a square.
    for _ in 0..300 {
        let h = rng.random_range(64..400usize);
        let w = rng.random_range(64..400usize);
        let x0 = rng.random_range(0..w as u32 - 8);
        let y0 = rng.random_range(0..h as u32 - 8);
        let x1 = rng.random_range(x0 + 1..=(w as u32).min(x0 + 200));
        let y1 = rng.random_range(y0 + 1..=(h as u32).min(y0 + 200));
        let bbox = BBox::new(x0, y0, x1, y1);
        let (cx, cy, side) = crop_region(h, w, &bbox).unwrap();
        assert_eq!(side, h.min(w));
        assert!(cx + side <= w && cy + side <= h, "crop inside the image");
        if bbox.width() as usize <= side && bbox.height() as usize <= side {
            assert!(
                cx as u32 <= bbox.x0
                    && bbox.x1 <= (cx + side) as u32
                    && cy as u32 <= bbox.y0
                    && bbox.y1 <= (cy + side) as u32,
                "crop must contain a bbox that fits: crop ({cx},{cy},{side}), bbox {bbox:?}"
            );
        }
    }

    // Equalized linear ramp: near-uniform cumulative distribution.
    let ramp = Array2::from_shape_fn((256, 256), |(_, x)| x as f32 / 255.0);
    let eq = equalize_histogram(&ramp);
    let mut hist = [0usize; 256];
    for &v in eq.iter() {
        hist[((v as f64) * 255.0).round() as usize] += 1;
    }
    let mut running = 0.0;
    for (bin, count) in hist.iter().enumerate() {
        running += *count as f64;
        let ideal = (bin + 1) as f64 / 256.0;
        assert!(
            (running / eq.len() as f64 - ideal).abs() < 2.0 / 256.0,
            "CDF deviation at bin {bin}"
        );
    }

    // Double horizontal flip is the identity, bitwise.
    let image = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
        ((c * 97 + y * 13 + x * 7) % 251) as f32 / 251.0
    });
    assert_eq!(hflip(&hflip(&image)), image);

    // Augmentation never changes the labels.
    let targets = encode_labels(
        &DescriptorLabels {
            shape: ShapeClass::Round,
            orientation: OrientationClass::NotParallel,
            margin: MarginClass::not_circumscribed(false, true, false, true),
            echo: EchoPatternClass::Heterogeneous,
            posterior: PosteriorClass::Combined,
        },
        BiradsCategory::Cat4C,
        TumorClass::Malignant,
    )
    .unwrap();
    let config = AugmentConfig::default();
    for index in 0..50 {
        let seed = config.sample_seed(3, index);
        let (warped, passed) = augment(&image, &targets, &config, seed);
        assert_eq!(passed, targets, "labels must pass through unchanged");
        let again = apply_augmentation(&image, &draw_augmentation(&config, seed));
        assert_eq!(warped, again, "augmentation must be reproducible under its seed");
    }
    println!("PASS criterion 11: crop geometry, equalization uniformity, flip involution, label passthrough");
}

#[test]
fn criterion_12_checkpoint_roundtrip() {
    let model = BiradsNet::<f32>::from_spec(ModelSpec::new(EncoderSpec::vgg16(), 23)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch: Vec<Array3<f32>> = (0..2)
        .map(|_| Array3::from_shape_fn((3, 64, 64), |_| rng.random_range(0.0f32..1.0)))
        .collect();
    let before = model.infer_batch(&batch).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, &desk_preprocess(), dir.path()).unwrap();
    let (loaded, preprocess) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(preprocess.target_size, DESK_TARGET_SIZE);
    let after = loaded.infer_batch(&batch).unwrap();

    let mut max_delta = 0.0f64;
    for (a, b) in before.iter().zip(&after) {
        let pairs = [
            (&a.shape, &b.shape),
            (&a.orientation, &b.orientation),
            (&a.margin, &b.margin),
            (&a.echo, &b.echo),
            (&a.posterior, &b.posterior),
            (&a.subtypes, &b.subtypes),
            (&a.tumor, &b.tumor),
        ];
        for (x, y) in pairs {
            for (u, v) in x.iter().zip(y.iter()) {
                max_delta = max_delta.max((u - v).abs() as f64);
            }
        }
        max_delta = max_delta.max((a.likelihood - b.likelihood).abs() as f64);
    }
    assert!(
        max_delta < 1e-7,
        "round-trip output deviation {max_delta} exceeds 1e-7"
    );
    println!("PASS criterion 12: checkpoint round trip deviation {max_delta:.1e} < 1e-7");
}
