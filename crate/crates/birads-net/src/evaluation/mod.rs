//! Metrics, the ablation/branch-ladder harness, and per-image explanation
//! reports.
//!
//! Tumor-class metrics treat malignant as the positive class; a rate whose
//! denominator class is absent from the targets is reported as undefined
//! (`None`), never as zero. Descriptor accuracies are top-1 argmax match
//! rates; margin sub-type accuracies threshold the sigmoid outputs at 0.5;
//! likelihood quality is reported as R-squared and mean squared error against
//! the category-median targets.

pub mod figure;

pub use figure::render_report_figure;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, DatasetManifest, FoldPlan, ImageRecord};
use crate::error::{Error, Result};
use crate::lexicon::{
    likelihood_to_category, EchoPatternClass, OrientationClass, PosteriorClass,
    ShapeClass, TumorClass, DESCRIPTOR_NAMES, SUBTYPE_NAMES, TASK_ORDER,
};
use crate::model::{BiradsNet, ModelOutputs};
use crate::objective::LossWeights;
use crate::preprocess::{preprocess_image, PreprocessConfig};
use crate::training::{build_fold_model, train_one_fold, PreparedDataset, TrainConfig};
use ndarray::Array2;

/// Binary classification rates; undefined rates stay `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Accuracy, sensitivity, and specificity of binary predictions with
/// malignant (`true`) as the positive class.
pub fn confusion_metrics(preds: &[bool], targets: &[bool]) -> Result<ConfusionMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "confusion metrics need equal nonempty lengths, got {} vs {}",
            preds.len(),
            targets.len()
        )));
    }
    let mut tp = 0u64;
    let mut tn = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in preds.iter().zip(targets) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = preds.len() as f64;
    let positives = tp + fn_;
    let negatives = tn + fp;
    Ok(ConfusionMetrics {
        accuracy: (tp + tn) as f64 / n,
        sensitivity: (positives > 0).then(|| tp as f64 / positives as f64),
        specificity: (negatives > 0).then(|| tn as f64 / negatives as f64),
    })
}

/// R-squared (about the target mean) and MSE. R-squared is undefined for
/// constant targets; the MSE is always reported.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<(Option<f64>, f64)> {
    if preds.len() != targets.len() || preds.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "regression metrics need equal lengths >= 2, got {} vs {}",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>();
    let r2 = if ss_tot > 0.0 {
        let ss_res = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        Some(1.0 - ss_res / ss_tot)
    } else {
        None
    };
    Ok((r2, mse))
}

/// All reported metrics of one evaluation; cells for disabled branches are
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub tumor_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub shape_accuracy: Option<f64>,
    pub orientation_accuracy: Option<f64>,
    pub margin_accuracy: Option<f64>,
    pub echo_accuracy: Option<f64>,
    pub posterior_accuracy: Option<f64>,
    pub subtype_indistinct_accuracy: Option<f64>,
    pub subtype_angular_accuracy: Option<f64>,
    pub subtype_microlobulated_accuracy: Option<f64>,
    pub subtype_spiculated_accuracy: Option<f64>,
    pub likelihood_r2: Option<f64>,
    pub likelihood_mse: Option<f64>,
}

impl MetricsReport {
    fn field_values(&self) -> [Option<f64>; 14] {
        [
            self.tumor_accuracy,
            self.sensitivity,
            self.specificity,
            self.shape_accuracy,
            self.orientation_accuracy,
            self.margin_accuracy,
            self.echo_accuracy,
            self.posterior_accuracy,
            self.subtype_indistinct_accuracy,
            self.subtype_angular_accuracy,
            self.subtype_microlobulated_accuracy,
            self.subtype_spiculated_accuracy,
            self.likelihood_r2,
            self.likelihood_mse,
        ]
    }

    fn from_field_values(n: usize, values: [Option<f64>; 14]) -> Self {
        Self {
            n,
            tumor_accuracy: values[0],
            sensitivity: values[1],
            specificity: values[2],
            shape_accuracy: values[3],
            orientation_accuracy: values[4],
            margin_accuracy: values[5],
            echo_accuracy: values[6],
            posterior_accuracy: values[7],
            subtype_indistinct_accuracy: values[8],
            subtype_angular_accuracy: values[9],
            subtype_microlobulated_accuracy: values[10],
            subtype_spiculated_accuracy: values[11],
            likelihood_r2: values[12],
            likelihood_mse: values[13],
        }
    }

    pub const FIELD_NAMES: [&'static str; 14] = [
        "tumor_accuracy",
        "sensitivity",
        "specificity",
        "shape_accuracy",
        "orientation_accuracy",
        "margin_accuracy",
        "echo_accuracy",
        "posterior_accuracy",
        "subtype_indistinct_accuracy",
        "subtype_angular_accuracy",
        "subtype_microlobulated_accuracy",
        "subtype_spiculated_accuracy",
        "likelihood_r2",
        "likelihood_mse",
    ];
}

/// Unweighted mean over reports. A field is averaged when every report
/// defines it and stays `None` otherwise.
pub fn aggregate_reports<'a>(reports: impl Iterator<Item = &'a MetricsReport>) -> MetricsReport {
    let reports: Vec<&MetricsReport> = reports.collect();
    let k = reports.len();
    if k == 0 {
        return MetricsReport::from_field_values(0, [None; 14]);
    }
    let mut values = [None; 14];
    for (i, slot) in values.iter_mut().enumerate() {
        let fields: Vec<Option<f64>> = reports.iter().map(|r| r.field_values()[i]).collect();
        if fields.iter().all(|f| f.is_some()) {
            *slot = Some(fields.iter().map(|f| f.unwrap()).sum::<f64>() / k as f64);
        }
    }
    let n = reports.iter().map(|r| r.n).sum();
    MetricsReport::from_field_values(n, values)
}

fn argmax_f32(values: &ndarray::Array1<f32>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Which of the eleven tasks were trained, hence which metrics to report.
/// Derived from the loss weights of the run being evaluated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveTasks(BTreeSet<usize>);

impl ActiveTasks {
    pub fn all() -> Self {
        Self((0..11).collect())
    }

    pub fn from_weights(weights: &LossWeights) -> Self {
        Self(weights.active_tasks().into_iter().collect())
    }

    fn has(&self, task: usize) -> bool {
        self.0.contains(&task)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|&k| TASK_ORDER[k]).collect()
    }
}

/// Computes the metrics report from per-sample outputs and targets.
pub fn metrics_from_outputs(
    outputs: &[ModelOutputs<f32>],
    targets: &[crate::lexicon::TaskTargets],
    active: &ActiveTasks,
) -> Result<MetricsReport> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "metrics need equal nonempty lengths, got {} vs {}",
            outputs.len(),
            targets.len()
        )));
    }
    let n = outputs.len();

    let accuracy_of = |matches: usize| matches as f64 / n as f64;
    let descriptor_accuracy = |task: usize| -> Option<f64> {
        if !active.has(task) {
            return None;
        }
        let matches = outputs
            .iter()
            .zip(targets)
            .filter(|(o, t)| {
                let predicted = argmax_f32(o.descriptor(task));
                let truth = match task {
                    0 => t.shape_index(),
                    1 => t.orientation_index(),
                    2 => t.margin_index(),
                    3 => t.echo_index(),
                    _ => t.posterior_index(),
                };
                predicted == truth
            })
            .count();
        Some(accuracy_of(matches))
    };

    let subtype_accuracy = |sub: usize| -> Option<f64> {
        if !active.has(5 + sub) {
            return None;
        }
        let matches = outputs
            .iter()
            .zip(targets)
            .filter(|(o, t)| (o.subtypes[sub] >= 0.5) == (t.subtypes[sub] >= 0.5))
            .count();
        Some(accuracy_of(matches))
    };

    let (tumor_accuracy, sensitivity, specificity) = if active.has(10) {
        let preds: Vec<bool> = outputs.iter().map(|o| argmax_f32(&o.tumor) == 1).collect();
        let truth: Vec<bool> = targets.iter().map(|t| t.malignant_indicator() > 0.5).collect();
        let cm = confusion_metrics(&preds, &truth)?;
        (Some(cm.accuracy), cm.sensitivity, cm.specificity)
    } else {
        (None, None, None)
    };

    let (likelihood_r2, likelihood_mse) = if active.has(9) && n >= 2 {
        let preds: Vec<f64> = outputs.iter().map(|o| o.likelihood as f64).collect();
        let truth: Vec<f64> = targets.iter().map(|t| t.likelihood).collect();
        let (r2, mse) = regression_metrics(&preds, &truth)?;
        (r2, Some(mse))
    } else {
        (None, None)
    };

    Ok(MetricsReport {
        n,
        tumor_accuracy,
        sensitivity,
        specificity,
        shape_accuracy: descriptor_accuracy(0),
        orientation_accuracy: descriptor_accuracy(1),
        margin_accuracy: descriptor_accuracy(2),
        echo_accuracy: descriptor_accuracy(3),
        posterior_accuracy: descriptor_accuracy(4),
        subtype_indistinct_accuracy: subtype_accuracy(0),
        subtype_angular_accuracy: subtype_accuracy(1),
        subtype_microlobulated_accuracy: subtype_accuracy(2),
        subtype_spiculated_accuracy: subtype_accuracy(3),
        likelihood_r2,
        likelihood_mse,
    })
}

/// Inference over a prepared dataset followed by metric computation.
pub fn evaluate_prepared(
    model: &BiradsNet<f32>,
    data: &PreparedDataset<f32>,
    active: Option<&ActiveTasks>,
) -> Result<MetricsReport> {
    let outputs = model.infer_batch(&data.inputs)?;
    let all = ActiveTasks::all();
    metrics_from_outputs(&outputs, &data.targets, active.unwrap_or(&all))
}

/// Preprocesses `records` per `preprocess` and evaluates the model on them.
pub fn evaluate_model(
    model: &BiradsNet<f32>,
    records: &[ImageRecord],
    preprocess: &PreprocessConfig,
) -> Result<MetricsReport> {
    let data = PreparedDataset::<f32>::load(records, preprocess)?;
    evaluate_prepared(model, &data, None)
}

/// One probability entry of an explanation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub class: String,
    pub probability: f64,
}

/// Per-descriptor probability distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorDistribution {
    pub descriptor: String,
    pub predicted_class: String,
    pub classes: Vec<ClassProbability>,
}

/// Clinician-facing explanation of one prediction: the tumor verdict with
/// its probabilities, every descriptor distribution, the margin sub-type
/// probabilities, the likelihood of malignancy as a percentage, and the
/// assessment category decoded from the likelihood. A large disagreement
/// between the tumor probability and the likelihood raises an uncertainty
/// warning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub tumor_class: String,
    pub tumor_probabilities: Vec<ClassProbability>,
    pub descriptors: Vec<DescriptorDistribution>,
    pub margin_subtypes: Vec<ClassProbability>,
    /// Likelihood of malignancy in percent, rounded to one decimal.
    pub likelihood_percent: f64,
    /// Display form, e.g. "30.0%".
    pub likelihood_display: String,
    /// Assessment category decoded from the raw likelihood.
    pub birads_category: String,
    pub uncertainty_warning: bool,
}

fn class_probs<'a>(
    names: impl Iterator<Item = &'a str>,
    probs: &ndarray::Array1<f32>,
) -> Vec<ClassProbability> {
    names
        .zip(probs.iter())
        .map(|(class, &p)| ClassProbability {
            class: class.to_string(),
            probability: p as f64,
        })
        .collect()
}

/// Builds the explanation report from raw model outputs.
pub fn explanation_from_outputs(outputs: &ModelOutputs<f32>) -> ExplanationReport {
    outputs
        .check_invariants(1e-4)
        .expect("model outputs violate their own contract");
    let descriptor_classes: [Vec<&str>; 5] = [
        ShapeClass::ALL.iter().map(|c| c.as_str()).collect(),
        OrientationClass::ALL.iter().map(|c| c.as_str()).collect(),
        vec!["circumscribed", "not_circumscribed"],
        EchoPatternClass::ALL.iter().map(|c| c.as_str()).collect(),
        PosteriorClass::ALL.iter().map(|c| c.as_str()).collect(),
    ];
    let descriptors = (0..5)
        .map(|d| {
            let probs = outputs.descriptor(d);
            let classes = class_probs(descriptor_classes[d].iter().copied(), probs);
            DescriptorDistribution {
                descriptor: DESCRIPTOR_NAMES[d].to_string(),
                predicted_class: descriptor_classes[d][argmax_f32(probs)].to_string(),
                classes,
            }
        })
        .collect();

    let x10 = outputs.likelihood as f64;
    let x11_malignant = outputs.malignant_prob() as f64;
    let tumor_class = if argmax_f32(&outputs.tumor) == 1 {
        TumorClass::Malignant
    } else {
        TumorClass::Benign
    };
    let likelihood_percent = (x10 * 1000.0).round() / 10.0;
    ExplanationReport {
        tumor_class: tumor_class.as_str().to_string(),
        tumor_probabilities: class_probs(
            TumorClass::ALL.iter().map(|c| c.as_str()),
            &outputs.tumor,
        ),
        descriptors,
        margin_subtypes: class_probs(SUBTYPE_NAMES.iter().copied(), &outputs.subtypes),
        likelihood_percent,
        likelihood_display: format!("{likelihood_percent:.1}%"),
        birads_category: likelihood_to_category(x10).as_str().to_string(),
        uncertainty_warning: (x11_malignant - x10).abs() > 0.5,
    }
}

/// Runs the full pipeline on one image and produces the explanation report.
pub fn make_explanation_report(
    model: &BiradsNet<f32>,
    image: &Array2<f32>,
    bbox: &BBox,
    preprocess: &PreprocessConfig,
) -> Result<ExplanationReport> {
    let input = preprocess_image(image, bbox, preprocess)?;
    let outputs = model.infer(&input)?;
    Ok(explanation_from_outputs(&outputs))
}

/// One row of the ablation/ladder table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: String,
    pub label: String,
    pub augment: bool,
    pub pretrained: bool,
    pub three_channels: bool,
    pub crop: bool,
    pub active_tasks: Vec<String>,
    pub metrics: MetricsReport,
}

fn run_one_configuration(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    config: &TrainConfig,
    suite: &str,
    label: &str,
) -> Result<AblationRow> {
    let fold = &plan.folds[0];
    let train: Vec<ImageRecord> = fold.train.iter().map(|&i| manifest.records[i].clone()).collect();
    let val: Vec<ImageRecord> = fold.val.iter().map(|&i| manifest.records[i].clone()).collect();
    let test: Vec<ImageRecord> = fold.test.iter().map(|&i| manifest.records[i].clone()).collect();

    let mut model = build_fold_model(config, 0)?;
    let (best, _log) = train_one_fold(&mut model, &train, &val, config)?;
    let data = PreparedDataset::<f32>::load(&test, &config.preprocess)?;
    let active = ActiveTasks::from_weights(&config.weights);
    let metrics = evaluate_prepared(&best, &data, Some(&active))?;
    Ok(AblationRow {
        suite: suite.to_string(),
        label: label.to_string(),
        augment: config.augment_enabled,
        pretrained: config.pretrained.is_some(),
        three_channels: config.preprocess.use_three_channels,
        crop: config.preprocess.use_crop,
        active_tasks: active.names().iter().map(|s| s.to_string()).collect(),
        metrics,
    })
}

/// Runs the component-toggle ladder (toggles applied progressively: full,
/// then -augmentation, -pretraining, -extra channels, -cropping) and the
/// branch ladder (tumor-class only, +margin, +orientation+shape,
/// +echo+posterior, +likelihood) on the first fold of the plan. Every row
/// reports its metrics; cells for branches a row does not train are absent.
pub fn run_ablation_suite(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    base_config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    base_config.validate()?;
    if plan.folds.is_empty() {
        return Err(Error::FoldPlan("ablation needs at least one fold".into()));
    }
    let mut rows = Vec::new();

    // Component toggles, applied progressively.
    let mut toggled = base_config.clone();
    rows.push(run_one_configuration(
        manifest,
        plan,
        &toggled,
        "component_toggles",
        "full",
    )?);
    toggled.augment_enabled = false;
    rows.push(run_one_configuration(
        manifest,
        plan,
        &toggled,
        "component_toggles",
        "no_augmentation",
    )?);
    toggled.pretrained = None;
    rows.push(run_one_configuration(
        manifest,
        plan,
        &toggled,
        "component_toggles",
        "no_pretraining",
    )?);
    toggled.preprocess.use_three_channels = false;
    rows.push(run_one_configuration(
        manifest,
        plan,
        &toggled,
        "component_toggles",
        "single_channel",
    )?);
    toggled.preprocess.use_crop = false;
    rows.push(run_one_configuration(
        manifest,
        plan,
        &toggled,
        "component_toggles",
        "no_cropping",
    )?);

    // Branch ladder, each row adding branches to the previous one.
    let ladder = [
        ("tumor_class_only", LossWeights::tumor_only()),
        ("plus_margin", LossWeights::tumor_only().enable_margin()),
        (
            "plus_orientation_shape",
            LossWeights::tumor_only().enable_margin().enable_shape_orientation(),
        ),
        (
            "plus_echo_posterior",
            LossWeights::tumor_only()
                .enable_margin()
                .enable_shape_orientation()
                .enable_echo_posterior(),
        ),
        (
            "plus_likelihood_full",
            LossWeights::tumor_only()
                .enable_margin()
                .enable_shape_orientation()
                .enable_echo_posterior()
                .enable_likelihood(),
        ),
    ];
    for (label, weights) in ladder {
        let mut config = base_config.clone();
        config.weights = weights;
        rows.push(run_one_configuration(
            manifest,
            plan,
            &config,
            "branch_ladder",
            label,
        )?);
    }
    Ok(rows)
}

fn cell(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes the ablation table as CSV; absent cells are empty.
pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write!(file, "suite,label,augment,pretrained,three_channels,crop,active_tasks,n")?;
    for name in MetricsReport::FIELD_NAMES {
        write!(file, ",{name}")?;
    }
    writeln!(file)?;
    for row in rows {
        write!(
            file,
            "{},{},{},{},{},{},{},{}",
            row.suite,
            row.label,
            row.augment,
            row.pretrained,
            row.three_channels,
            row.crop,
            row.active_tasks.join("|"),
            row.metrics.n
        )?;
        for value in row.metrics.field_values() {
            write!(file, ",{}", cell(value))?;
        }
        writeln!(file)?;
    }
    file.flush()?;
    Ok(())
}

/// Writes the ablation table as pretty JSON.
pub fn write_ablation_json(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Config(format!("cannot serialize ablation table: {e}")))?;
    std::fs::write(path.as_ref(), json + "\n")?;
    Ok(())
}

/// Writes a metrics report as CSV (single data row) and JSON next to each
/// other using the given stem, e.g. `stem.csv` and `stem.json`.
pub fn write_metrics(report: &MetricsReport, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("cannot serialize metrics: {e}")))?;
    std::fs::write(stem.with_extension("json"), json + "\n")?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("csv"))?);
    write!(file, "n")?;
    for name in MetricsReport::FIELD_NAMES {
        write!(file, ",{name}")?;
    }
    writeln!(file)?;
    write!(file, "{}", report.n)?;
    for value in report.field_values() {
        write!(file, ",{}", cell(value))?;
    }
    writeln!(file)?;
    file.flush()?;
    Ok(())
}
