//! Optimization: Adam, validation-plateau learning-rate reduction, early
//! stopping, the per-fold training loop, and the cross-validation driver.
//!
//! Schedule semantics: "improvement" is a strictly lower validation total
//! loss than the best seen so far, with no minimum delta. Two patience
//! counters run off the same improvements: the LR counter (reset on
//! improvement and once on the LR drop) and the stop counter (reset on
//! improvement only), so a flat run of `stop_patience` epochs always stops
//! even though the LR dropped partway through. The LR transitions
//! `initial_lr -> reduced_lr` at most once.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, FoldPlan, ImageRecord};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_reports, evaluate_prepared, MetricsReport};
use crate::lexicon::{encode_labels, TaskTargets};
use crate::model::{build_model, BackboneConfig, BiradsNet, ModelSpec};
use crate::nn::ParamStore;
use crate::objective::{loss_gradients, total_loss, LossBreakdown, LossWeights};
use crate::preprocess::{
    apply_augmentation, draw_augmentation, preprocess_record, AugmentConfig, PreprocessConfig,
};
use crate::util::{derive_seed, s, Scalar};

/// Number of gradient-accumulation chunks per batch. Fixed (rather than tied
/// to the worker count) so summation order, and therefore results, do not
/// depend on how many threads run.
const GRAD_CHUNKS: usize = 4;

/// Full training configuration; serializable as JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub reduced_lr: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Toggles training-time augmentation.
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
    pub weights: LossWeights,
    /// Optional pretrained encoder archive; `None` trains from scratch.
    pub pretrained: Option<PathBuf>,
    /// Overrides the standard architecture (mainly for small experiments);
    /// the per-fold seed still comes from `seed`.
    pub model_spec: Option<ModelSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 6,
            initial_lr: 1e-5,
            reduced_lr: 1e-6,
            lr_patience: 15,
            stop_patience: 30,
            max_epochs: 500,
            seed: 0,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
            weights: LossWeights::default(),
            pretrained: None,
            model_spec: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.reduced_lr > 0.0 && self.reduced_lr < self.initial_lr) {
            return Err(Error::Config(
                "require 0 < reduced_lr < initial_lr".into(),
            ));
        }
        if self.lr_patience >= self.stop_patience {
            return Err(Error::Config("lr_patience must be below stop_patience".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        self.augment.validate()?;
        self.preprocess.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    /// Reads a config from JSON or TOML, by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Augmentation config with an effective seed: a zero seed derives one
    /// from the training seed so distinct runs get distinct streams.
    pub fn effective_augment(&self) -> AugmentConfig {
        let mut augment = self.augment.clone();
        if augment.seed == 0 {
            augment.seed = derive_seed(self.seed, 0xaa55_aa55);
        }
        augment
    }
}

/// Validation-plateau state machine.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    initial_lr: f64,
    reduced_lr: f64,
    lr_patience: usize,
    stop_patience: usize,
    best: Option<f64>,
    lr_wait: usize,
    stop_wait: usize,
    lr_dropped: bool,
}

/// Outcome of observing one validation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleDecision {
    pub improved: bool,
    /// LR in force for the *next* epoch.
    pub lr: f64,
    pub lr_dropped_now: bool,
    pub stop: bool,
    pub epochs_since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(
        initial_lr: f64,
        reduced_lr: f64,
        lr_patience: usize,
        stop_patience: usize,
    ) -> Self {
        Self {
            initial_lr,
            reduced_lr,
            lr_patience,
            stop_patience,
            best: None,
            lr_wait: 0,
            stop_wait: 0,
            lr_dropped: false,
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(
            config.initial_lr,
            config.reduced_lr,
            config.lr_patience,
            config.stop_patience,
        )
    }

    /// Current learning rate.
    pub fn lr(&self) -> f64 {
        if self.lr_dropped {
            self.reduced_lr
        } else {
            self.initial_lr
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds one epoch's validation loss and advances the schedule.
    pub fn observe(&mut self, val_loss: f64) -> ScheduleDecision {
        let improved = self.best.map_or(true, |best| val_loss < best);
        if improved {
            self.best = Some(val_loss);
            self.lr_wait = 0;
            self.stop_wait = 0;
        } else {
            self.lr_wait += 1;
            self.stop_wait += 1;
        }
        let mut lr_dropped_now = false;
        if !self.lr_dropped && self.lr_wait >= self.lr_patience {
            self.lr_dropped = true;
            self.lr_wait = 0;
            lr_dropped_now = true;
        }
        ScheduleDecision {
            improved,
            lr: self.lr(),
            lr_dropped_now,
            stop: self.stop_wait >= self.stop_patience,
            epochs_since_improvement: self.stop_wait,
        }
    }
}

/// One epoch's log record. The timestamp is the only nondeterministic field
/// and is isolated here so reruns differ in nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub lr: f64,
    pub best_val: f64,
    pub epochs_since_improvement: usize,
    pub improved: bool,
    pub lr_dropped_now: bool,
    pub timestamp_unix_s: u64,
}

/// Reason training ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    /// A caller-provided stop condition fired.
    Requested,
}

/// Full training history of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub stop_reason: StopReason,
    /// 1-based epoch whose parameters were returned as the best checkpoint.
    pub best_epoch: usize,
}

impl TrainLog {
    /// Appends one JSON record per epoch to `path`.
    pub fn write_ldjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path.as_ref())?);
        for epoch in &self.epochs {
            let line = serde_json::to_string(epoch)
                .map_err(|e| Error::Config(format!("cannot serialize log: {e}")))?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn now_unix_s() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// The shared epoch loop: runs training epochs, evaluates validation loss,
/// applies the plateau schedule, snapshots improvements, and stops on
/// plateau or the epoch cap. `run_epoch` receives the 0-based epoch and the
/// current LR; `eval_val` computes the validation breakdown; `on_improved`
/// is called whenever a new best epoch is recorded.
pub fn drive_training_loop(
    config: &TrainConfig,
    mut run_epoch: impl FnMut(usize, f64) -> Result<LossBreakdown>,
    mut eval_val: impl FnMut(usize) -> Result<LossBreakdown>,
    mut on_improved: impl FnMut(usize) -> Result<()>,
) -> Result<TrainLog> {
    config.validate()?;
    let mut schedule = PlateauSchedule::from_config(config);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut best_epoch = 0usize;

    for epoch in 0..config.max_epochs {
        let lr = schedule.lr();
        let train = run_epoch(epoch, lr)?;
        if let Some(component) = train.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                component,
                epoch: epoch + 1,
            });
        }
        let val = eval_val(epoch)?;
        if let Some(component) = val.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                component,
                epoch: epoch + 1,
            });
        }
        let decision = schedule.observe(val.total);
        if decision.improved {
            best_epoch = epoch + 1;
            on_improved(epoch)?;
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            train,
            val,
            lr,
            best_val: schedule.best().unwrap(),
            epochs_since_improvement: decision.epochs_since_improvement,
            improved: decision.improved,
            lr_dropped_now: decision.lr_dropped_now,
            timestamp_unix_s: now_unix_s(),
        });
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainLog {
        epochs,
        stop_reason,
        best_epoch,
    })
}

/// Adam with bias correction; moment coefficients (0.9, 0.999), epsilon 1e-8.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(like: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// One optimization step at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step_count += 1;
        let b1 = s::<T>(self.beta1);
        let b2 = s::<T>(self.beta2);
        let one_minus_b1 = s::<T>(1.0 - self.beta1);
        let one_minus_b2 = s::<T>(1.0 - self.beta2);
        let correction1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let scale = s::<T>(lr / correction1);
        let corr2 = s::<T>(1.0 / correction2);
        let eps = s::<T>(self.epsilon);

        let update = |params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + one_minus_b1 * g;
                v[i] = b2 * v[i] + one_minus_b2 * g * g;
                let v_hat = v[i] * corr2;
                params[i] = params[i] - scale * m[i] / (v_hat.sqrt() + eps);
            }
        };
        for i in 0..params.mats.len() {
            update(
                params.mats[i].as_slice_mut().unwrap(),
                grads.mats[i].as_slice().unwrap(),
                self.m.mats[i].as_slice_mut().unwrap(),
                self.v.mats[i].as_slice_mut().unwrap(),
            );
        }
        for i in 0..params.vecs.len() {
            update(
                params.vecs[i].as_slice_mut().unwrap(),
                grads.vecs[i].as_slice().unwrap(),
                self.m.vecs[i].as_slice_mut().unwrap(),
                self.v.vecs[i].as_slice_mut().unwrap(),
            );
        }
    }
}

/// A dataset preprocessed into encoder inputs and task targets, cached in
/// memory for the epoch loop.
pub struct PreparedDataset<T> {
    pub inputs: Vec<Array3<T>>,
    pub targets: Vec<TaskTargets>,
}

impl<T: Scalar> PreparedDataset<T> {
    pub fn load(records: &[ImageRecord], preprocess: &PreprocessConfig) -> Result<Self> {
        let inputs: Result<Vec<Array3<T>>> = records
            .par_iter()
            .map(|record| preprocess_record::<T>(record, preprocess))
            .collect();
        let targets: Result<Vec<TaskTargets>> = records
            .iter()
            .map(|record| encode_labels(&record.labels, record.category, record.tumor_class))
            .collect();
        Ok(Self {
            inputs: inputs?,
            targets: targets?,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Full-dataset loss in inference mode (no augmentation, no dropout).
pub fn dataset_loss<T: Scalar>(
    model: &BiradsNet<T>,
    data: &PreparedDataset<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let outputs = model.infer_batch(&data.inputs)?;
    total_loss(&outputs, &data.targets, weights)
}

/// Runs one gradient step over `indices` of the prepared dataset. Returns the
/// batch loss breakdown.
#[allow(clippy::too_many_arguments)]
fn train_batch<T: Scalar>(
    model: &mut BiradsNet<T>,
    optimizer: &mut Adam<T>,
    data: &PreparedDataset<T>,
    indices: &[usize],
    config: &TrainConfig,
    augment: &AugmentConfig,
    epoch: usize,
    lr: f64,
) -> Result<LossBreakdown> {
    // Forward in parallel; each sample gets deterministic augmentation and
    // dropout streams derived from (epoch, dataset index).
    let forward: Result<Vec<_>> = indices
        .par_iter()
        .map(|&idx| {
            let input = if config.augment_enabled {
                let draw = draw_augmentation(augment, augment.sample_seed(epoch, idx));
                apply_augmentation(&data.inputs[idx], &draw)
            } else {
                data.inputs[idx].clone()
            };
            let dropout_seed = derive_seed(
                config.seed ^ 0xd20f_0000,
                ((epoch as u64) << 32) ^ idx as u64,
            );
            model.forward_train(&input, dropout_seed)
        })
        .collect();
    let forward = forward?;

    let outputs: Vec<_> = forward.iter().map(|(out, _)| out.clone()).collect();
    let targets: Vec<_> = indices.iter().map(|&i| data.targets[i].clone()).collect();
    let breakdown = total_loss(&outputs, &targets, &config.weights)?;
    let grads_per_sample = loss_gradients(&outputs, &targets, &config.weights)?;

    // Backward in fixed-size chunks; chunk partials are summed in order so
    // results do not depend on thread count.
    let chunk = indices.len().div_ceil(GRAD_CHUNKS).max(1);
    let pairs: Vec<_> = forward
        .iter()
        .zip(grads_per_sample.iter())
        .collect();
    let partials: Vec<ParamStore<T>> = pairs
        .par_chunks(chunk)
        .map(|chunk_pairs| {
            let mut store = model.params().zeros_like();
            for ((_, cache), output_grads) in chunk_pairs {
                model.backward(cache, output_grads, &mut store);
            }
            store
        })
        .collect();
    let grads = partials
        .into_iter()
        .reduce(|mut acc, p| {
            acc.add_assign(&p);
            acc
        })
        .unwrap_or_else(|| model.params().zeros_like());
    optimizer.step(model.params_mut(), &grads, lr);
    Ok(breakdown)
}

/// Trains one fold: mini-batch Adam over the training records with the
/// plateau schedule driven by the validation loss. Returns the
/// best-validation-loss model and the full log. The input `model` is left at
/// its final (possibly post-best) state.
pub fn train_one_fold(
    model: &mut BiradsNet<f32>,
    train_records: &[ImageRecord],
    val_records: &[ImageRecord],
    config: &TrainConfig,
) -> Result<(BiradsNet<f32>, TrainLog)> {
    config.validate()?;
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::FoldPlan("train and validation sets must be nonempty".into()));
    }
    let train_data = PreparedDataset::<f32>::load(train_records, &config.preprocess)?;
    let val_data = PreparedDataset::<f32>::load(val_records, &config.preprocess)?;
    train_prepared(model, &train_data, &val_data, config)
}

/// Epoch-end snapshot passed to custom stop conditions.
pub struct EpochObservation<'a> {
    /// 1-based epoch index.
    pub epoch: usize,
    pub model: &'a BiradsNet<f32>,
    pub train: &'a LossBreakdown,
    pub val: &'a LossBreakdown,
}

/// [`train_one_fold`] over already-preprocessed datasets.
pub fn train_prepared(
    model: &mut BiradsNet<f32>,
    train_data: &PreparedDataset<f32>,
    val_data: &PreparedDataset<f32>,
    config: &TrainConfig,
) -> Result<(BiradsNet<f32>, TrainLog)> {
    train_prepared_with_stop(model, train_data, val_data, config, |_| false)
}

/// [`train_prepared`] with an additional caller stop condition, checked after
/// every epoch (e.g. stop once a target accuracy is reached). When the
/// condition fires, the model at that epoch is returned instead of the
/// best-validation checkpoint.
pub fn train_prepared_with_stop(
    model: &mut BiradsNet<f32>,
    train_data: &PreparedDataset<f32>,
    val_data: &PreparedDataset<f32>,
    config: &TrainConfig,
    mut extra_stop: impl FnMut(&EpochObservation) -> bool,
) -> Result<(BiradsNet<f32>, TrainLog)> {
    let augment = config.effective_augment();
    let mut optimizer = Adam::new(model.params());
    let mut best_params = model.params().clone();

    // Same epoch/schedule semantics as drive_training_loop, inlined because
    // the epoch body and the validation pass both need the model.
    let mut schedule = PlateauSchedule::from_config(config);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut best_epoch = 0usize;

    for epoch in 0..config.max_epochs {
        let lr = schedule.lr();
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed ^ 0x5348_0000,
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        let mut batch_breakdowns = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let breakdown = train_batch(
                model,
                &mut optimizer,
                train_data,
                batch,
                config,
                &augment,
                epoch,
                lr,
            )?;
            if let Some(component) = breakdown.first_non_finite() {
                return Err(Error::NonFiniteLoss {
                    component,
                    epoch: epoch + 1,
                });
            }
            batch_breakdowns.push(breakdown);
        }
        let train = LossBreakdown::mean(&batch_breakdowns);
        let val = dataset_loss(model, val_data, &config.weights)?;
        if let Some(component) = val.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                component,
                epoch: epoch + 1,
            });
        }

        let decision = schedule.observe(val.total);
        if decision.improved {
            best_epoch = epoch + 1;
            best_params = model.params().clone();
        }
        let requested = extra_stop(&EpochObservation {
            epoch: epoch + 1,
            model,
            train: &train,
            val: &val,
        });
        epochs.push(EpochLog {
            epoch: epoch + 1,
            train,
            val,
            lr,
            best_val: schedule.best().unwrap(),
            epochs_since_improvement: decision.epochs_since_improvement,
            improved: decision.improved,
            lr_dropped_now: decision.lr_dropped_now,
            timestamp_unix_s: now_unix_s(),
        });
        if requested {
            stop_reason = StopReason::Requested;
            best_params = model.params().clone();
            best_epoch = epoch + 1;
            break;
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let mut best_model = model.clone();
    *best_model.params_mut() = best_params;
    Ok((
        best_model,
        TrainLog {
            epochs,
            stop_reason,
            best_epoch,
        },
    ))
}

/// Outcome of one cross-validation fold.
pub struct FoldOutcome {
    pub fold: usize,
    pub model: BiradsNet<f32>,
    pub log: TrainLog,
    pub metrics: MetricsReport,
}

/// Outcome of a full cross-validation run.
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    /// Unweighted mean of the per-fold metrics.
    pub aggregate: MetricsReport,
}

fn select<'r>(records: &'r [ImageRecord], indices: &[usize]) -> Vec<ImageRecord> {
    indices.iter().map(|&i| records[i].clone()).collect()
}

/// Builds the fold model: the configured spec override or the standard
/// backbone, seeded per fold, with pretrained encoder weights when given.
pub fn build_fold_model(config: &TrainConfig, fold: usize) -> Result<BiradsNet<f32>> {
    let fold_seed = derive_seed(config.seed, 0x6d6f_0000 + fold as u64);
    match &config.model_spec {
        Some(spec) => {
            let mut spec = spec.clone();
            spec.seed = fold_seed;
            let mut model = BiradsNet::<f32>::from_spec(spec)?;
            if let Some(path) = &config.pretrained {
                crate::model::checkpoint::load_backbone_weights(&mut model, path)?;
            }
            Ok(model)
        }
        None => build_model(
            &BackboneConfig {
                pretrained_weights: config.pretrained.clone(),
                ..Default::default()
            },
            fold_seed,
        ),
    }
}

/// Trains and evaluates one model per fold of the plan; the aggregate report
/// is the unweighted mean over folds.
pub fn run_cross_validation(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    config: &TrainConfig,
) -> Result<CvOutcome> {
    config.validate()?;
    let mut folds = Vec::new();
    for (fold_idx, fold) in plan.folds.iter().enumerate() {
        let mut model = build_fold_model(config, fold_idx)?;
        let train_records = select(&manifest.records, &fold.train);
        let val_records = select(&manifest.records, &fold.val);
        let test_records = select(&manifest.records, &fold.test);

        let (best, log) = train_one_fold(&mut model, &train_records, &val_records, config)?;
        let test_data = PreparedDataset::<f32>::load(&test_records, &config.preprocess)?;
        let metrics = evaluate_prepared(&best, &test_data, None)?;
        folds.push(FoldOutcome {
            fold: fold_idx,
            model: best,
            log,
            metrics,
        });
    }
    let aggregate = aggregate_reports(folds.iter().map(|f| &f.metrics));
    Ok(CvOutcome { folds, aggregate })
}
