//! Per-task losses, the likelihood/tumor agreement term, and the weighted
//! total objective.
//!
//! Tasks 1-5 (descriptors) and 11 (tumor class) use categorical cross-entropy
//! with probabilities clamped to [1e-7, 1 - 1e-7]; tasks 6-9 (margin
//! sub-types) use binary cross-entropy per scalar; task 10 (likelihood) uses
//! squared error. All batch losses are means over samples. The agreement term
//! penalizes the squared difference between the predicted and ground-truth
//! gaps |X11 - X10| and |Y11 - Y10|, where X11 is the malignant-class
//! probability.
//!
//! [`loss_gradients`] produces exactly the derivatives of [`total_loss`],
//! including the clamp indicators, so analytic gradients and finite
//! differences of the total agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{TaskTargets, DESCRIPTOR_ARITIES, TASK_ORDER};
use crate::model::{ModelOutputs, OutputGrads};
use crate::util::{s, Scalar};

/// Probability clamp for cross-entropy stability.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default per-task weights; the tumor-class branch carries the largest one.
pub const DEFAULT_LAMBDAS: [f64; 11] =
    [0.2, 0.2, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.2, 0.5];

/// Default agreement-term weight.
pub const DEFAULT_LAMBDA_A: f64 = 0.2;

/// Weights of the eleven task losses plus the agreement term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: [f64; 11],
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDAS,
            lambda_a: DEFAULT_LAMBDA_A,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| l < 0.0) || self.lambda_a < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Only the tumor-class branch is trained.
    pub fn tumor_only() -> Self {
        let mut lambda = [0.0; 11];
        lambda[10] = DEFAULT_LAMBDAS[10];
        Self {
            lambda,
            lambda_a: 0.0,
        }
    }

    /// Enables the margin branch and its four sub-type tasks.
    pub fn enable_margin(mut self) -> Self {
        self.lambda[2] = DEFAULT_LAMBDAS[2];
        for k in 5..9 {
            self.lambda[k] = DEFAULT_LAMBDAS[k];
        }
        self
    }

    /// Enables the shape and orientation branches.
    pub fn enable_shape_orientation(mut self) -> Self {
        self.lambda[0] = DEFAULT_LAMBDAS[0];
        self.lambda[1] = DEFAULT_LAMBDAS[1];
        self
    }

    /// Enables the echo-pattern and posterior-features branches.
    pub fn enable_echo_posterior(mut self) -> Self {
        self.lambda[3] = DEFAULT_LAMBDAS[3];
        self.lambda[4] = DEFAULT_LAMBDAS[4];
        self
    }

    /// Enables the likelihood branch and the agreement term.
    pub fn enable_likelihood(mut self) -> Self {
        self.lambda[9] = DEFAULT_LAMBDAS[9];
        self.lambda_a = DEFAULT_LAMBDA_A;
        self
    }

    /// Task indices (0-based) with nonzero weight.
    pub fn active_tasks(&self) -> Vec<usize> {
        (0..11).filter(|&k| self.lambda[k] > 0.0).collect()
    }
}

/// All thirteen scalars of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// L1..L11 in task order.
    pub tasks: [f64; 11],
    pub agreement: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zeros() -> Self {
        Self {
            tasks: [0.0; 11],
            agreement: 0.0,
            total: 0.0,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (k, v) in self.tasks.iter().enumerate() {
            if !v.is_finite() {
                return Some(TASK_ORDER[k].to_string());
            }
        }
        if !self.agreement.is_finite() {
            return Some("agreement".into());
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::zeros();
        for item in items {
            for k in 0..11 {
                out.tasks[k] += item.tasks[k] / n;
            }
            out.agreement += item.agreement / n;
            out.total += item.total / n;
        }
        out
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn clamp_interior(p: f64) -> bool {
    p > PROB_CLAMP && p < 1.0 - PROB_CLAMP
}

fn categorical_cross_entropy<T: Scalar>(pred: &[T], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| -y * clamp_prob(p.as_f64()).ln())
        .sum()
}

fn binary_cross_entropy(pred: f64, target: f64) -> f64 {
    let p = clamp_prob(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Per-sample loss of one task (1-based index): cross-entropy for the
/// categorical tasks, binary cross-entropy for the sub-types, squared error
/// for the likelihood.
pub fn task_loss<T: Scalar>(task: usize, pred: &[T], target: &[f64]) -> Result<f64> {
    let arity_err = |expected: usize| {
        Err(Error::ShapeMismatch(format!(
            "task {task}: prediction has {} values, expected {expected}",
            pred.len()
        )))
    };
    match task {
        1..=5 => {
            let expected = DESCRIPTOR_ARITIES[task - 1];
            if pred.len() != expected || target.len() != expected {
                return arity_err(expected);
            }
            Ok(categorical_cross_entropy(pred, target))
        }
        6..=9 => {
            if pred.len() != 1 || target.len() != 1 {
                return arity_err(1);
            }
            Ok(binary_cross_entropy(pred[0].as_f64(), target[0]))
        }
        10 => {
            if pred.len() != 1 || target.len() != 1 {
                return arity_err(1);
            }
            let d = pred[0].as_f64() - target[0];
            Ok(d * d)
        }
        11 => {
            if pred.len() != 2 || target.len() != 2 {
                return arity_err(2);
            }
            Ok(categorical_cross_entropy(pred, target))
        }
        _ => Err(Error::ShapeMismatch(format!(
            "task index {task} out of range 1..=11"
        ))),
    }
}

/// Squared difference of the two risk gaps for one sample.
pub fn agreement_gap_loss(x10: f64, x11_malignant: f64, y10: f64, y11: f64) -> f64 {
    let predicted_gap = (x11_malignant - x10).abs();
    let target_gap = (y11 - y10).abs();
    let d = predicted_gap - target_gap;
    d * d
}

/// Batch-averaged agreement loss. `x11_malignant` and `y11` are the
/// malignant-class probability and 0/1 indicator respectively.
pub fn agreement_loss(
    x10: &[f64],
    x11_malignant: &[f64],
    y10: &[f64],
    y11: &[f64],
) -> Result<f64> {
    if x10.len() != x11_malignant.len() || x10.len() != y10.len() || x10.len() != y11.len() {
        return Err(Error::ShapeMismatch(
            "agreement loss inputs must have equal lengths".into(),
        ));
    }
    if x10.is_empty() {
        return Err(Error::ShapeMismatch("agreement loss needs a nonempty batch".into()));
    }
    let sum: f64 = x10
        .iter()
        .zip(x11_malignant)
        .zip(y10)
        .zip(y11)
        .map(|(((&a, &b), &c), &d)| agreement_gap_loss(a, b, c, d))
        .sum();
    Ok(sum / x10.len() as f64)
}

fn per_sample_task_losses<T: Scalar>(
    output: &ModelOutputs<T>,
    target: &TaskTargets,
) -> Result<[f64; 11]> {
    let mut losses = [0.0; 11];
    losses[0] = task_loss(1, output.shape.as_slice().unwrap(), &target.shape)?;
    losses[1] = task_loss(2, output.orientation.as_slice().unwrap(), &target.orientation)?;
    losses[2] = task_loss(3, output.margin.as_slice().unwrap(), &target.margin)?;
    losses[3] = task_loss(4, output.echo.as_slice().unwrap(), &target.echo)?;
    losses[4] = task_loss(5, output.posterior.as_slice().unwrap(), &target.posterior)?;
    for sub in 0..4 {
        losses[5 + sub] = task_loss(
            6 + sub,
            &[output.subtypes[sub]],
            &[target.subtypes[sub]],
        )?;
    }
    losses[9] = task_loss(10, &[output.likelihood], &[target.likelihood])?;
    losses[10] = task_loss(11, output.tumor.as_slice().unwrap(), &target.tumor)?;
    Ok(losses)
}

/// The weighted multitask objective over one batch: per-task batch means,
/// the agreement term, and `total = sum(lambda_k * L_k) + lambda_a * L_a`.
pub fn total_loss<T: Scalar>(
    outputs: &[ModelOutputs<T>],
    targets: &[TaskTargets],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch size mismatch: {} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    weights.validate()?;
    let n = outputs.len() as f64;
    let mut tasks = [0.0; 11];
    let mut agreement = 0.0;
    for (output, target) in outputs.iter().zip(targets) {
        let sample = per_sample_task_losses(output, target)?;
        for k in 0..11 {
            tasks[k] += sample[k] / n;
        }
        agreement += agreement_gap_loss(
            output.likelihood.as_f64(),
            output.malignant_prob().as_f64(),
            target.likelihood,
            target.malignant_indicator(),
        ) / n;
    }
    let total = tasks
        .iter()
        .zip(&weights.lambda)
        .map(|(l, w)| l * w)
        .sum::<f64>()
        + weights.lambda_a * agreement;
    Ok(LossBreakdown {
        tasks,
        agreement,
        total,
    })
}

fn cce_grad<T: Scalar>(pred: &ndarray::Array1<T>, target: &[f64], scale: f64) -> ndarray::Array1<T> {
    ndarray::Array1::from_shape_fn(pred.len(), |i| {
        let p = pred[i].as_f64();
        if clamp_interior(p) {
            s::<T>(scale * (-target[i] / clamp_prob(p)))
        } else {
            T::zero()
        }
    })
}

/// Gradients of [`total_loss`] with respect to every model output, one
/// [`OutputGrads`] per sample. Weights and the 1/batch factor are folded in.
pub fn loss_gradients<T: Scalar>(
    outputs: &[ModelOutputs<T>],
    targets: &[TaskTargets],
    weights: &LossWeights,
) -> Result<Vec<OutputGrads<T>>> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch size mismatch: {} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let inv_b = 1.0 / outputs.len() as f64;
    let mut grads = Vec::with_capacity(outputs.len());
    for (output, target) in outputs.iter().zip(targets) {
        let mut g = OutputGrads::zeros();
        g.shape = cce_grad(&output.shape, &target.shape, weights.lambda[0] * inv_b);
        g.orientation = cce_grad(
            &output.orientation,
            &target.orientation,
            weights.lambda[1] * inv_b,
        );
        g.margin = cce_grad(&output.margin, &target.margin, weights.lambda[2] * inv_b);
        g.echo = cce_grad(&output.echo, &target.echo, weights.lambda[3] * inv_b);
        g.posterior = cce_grad(
            &output.posterior,
            &target.posterior,
            weights.lambda[4] * inv_b,
        );

        for sub in 0..4 {
            let p = output.subtypes[sub].as_f64();
            let y = target.subtypes[sub];
            let grad = if clamp_interior(p) {
                let c = clamp_prob(p);
                weights.lambda[5 + sub] * inv_b * (-y / c + (1.0 - y) / (1.0 - c))
            } else {
                0.0
            };
            g.subtypes[sub] = s::<T>(grad);
        }

        let x10 = output.likelihood.as_f64();
        let x11m = output.malignant_prob().as_f64();
        let y10 = target.likelihood;
        let y11 = target.malignant_indicator();
        let mut d_likelihood = weights.lambda[9] * inv_b * 2.0 * (x10 - y10);

        g.tumor = cce_grad(&output.tumor, &target.tumor, weights.lambda[10] * inv_b);

        // Agreement: d/dgap of (gap - target_gap)^2 routed through |x11 - x10|.
        let gap = (x11m - x10).abs();
        let target_gap = (y11 - y10).abs();
        let sign = if x11m > x10 {
            1.0
        } else if x11m < x10 {
            -1.0
        } else {
            0.0
        };
        let agreement_factor = weights.lambda_a * inv_b * 2.0 * (gap - target_gap) * sign;
        g.tumor[1] = g.tumor[1] + s::<T>(agreement_factor);
        d_likelihood -= agreement_factor;

        g.likelihood = s::<T>(d_likelihood);
        grads.push(g);
    }
    Ok(grads)
}
