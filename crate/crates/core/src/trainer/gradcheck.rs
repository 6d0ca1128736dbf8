//! Finite-difference verification of backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{cross_entropy, loss_and_grad};
use crate::class::{BehaviorClass, ProbabilityVector};
use crate::model::{ClassifierModel, Gradients};
use crate::tokenizer::TokenWindow;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Minimum number of sampled coordinates.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error. Raised automatically to
    /// the round-off level of the central difference.
    pub floor: f64,
    pub seed: u64,
    /// Restrict sampling to tensors whose name contains this string.
    pub tensor_filter: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples: 200, step: 1e-5, floor: 1e-6, seed: 0, tensor_filter: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Tensor and in-tensor index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn loss_at(model: &ClassifierModel<f64>, window: &TokenWindow, label: BehaviorClass) -> f64 {
    let logits = model.logits(window).expect("valid window");
    cross_entropy(&ProbabilityVector::from_logits(&logits), label)
}

/// Compares analytic gradients with central differences on a random
/// parameter subsample. Passes iff the largest relative error
/// `|a - n| / max(|a|, |n|, floor)` is below `tolerance`.
pub fn grad_check(
    model: &ClassifierModel<f64>,
    window: &TokenWindow,
    label: BehaviorClass,
    tolerance: f64,
) -> GradCheckReport {
    grad_check_with(model, window, label, tolerance, &GradCheckOptions::default(), |_| {})
}

/// [`grad_check`] with explicit options. `tamper` may modify the analytic
/// gradient before comparison (used to confirm the check catches bugs).
pub fn grad_check_with(
    model: &ClassifierModel<f64>,
    window: &TokenWindow,
    label: BehaviorClass,
    tolerance: f64,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut Gradients<f64>),
) -> GradCheckReport {
    let (_, _, mut analytic) = loss_and_grad(model, window, label, None).expect("valid window");
    tamper(&mut analytic);

    let tensors: Vec<_> = model
        .tensors()
        .iter()
        .filter(|t| opts.tensor_filter.as_ref().is_none_or(|f| t.name.contains(f.as_str())))
        .collect();
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for t in &tensors {
        let share = (opts.samples * t.len()).div_ceil(total.max(1)).max(4).min(t.len());
        for _ in 0..share {
            coords.push((t.name.clone(), t.offset, rng.random_range(0..t.len())));
        }
    }

    let base = loss_at(model, window, label);
    let floor = opts.floor.max(64.0 * f64::EPSILON * base.abs().max(1.0) / opts.step);
    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (name, offset, idx) in &coords {
        let at = offset + idx;
        let orig = probe.params()[at];
        probe.params_mut()[at] = orig + opts.step;
        let plus = loss_at(&probe, window, label);
        probe.params_mut()[at] = orig - opts.step;
        let minus = loss_at(&probe, window, label);
        probe.params_mut()[at] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.0[at];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some((name.clone(), *idx));
        }
    }
    GradCheckReport {
        passed: max_rel < tolerance,
        max_rel_error: max_rel,
        coords_checked: coords.len(),
        worst,
    }
}
