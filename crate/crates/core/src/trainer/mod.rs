//! Supervised fine-tuning: cross-entropy over windows with AdamW updates.

mod adamw;
mod gradcheck;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};

use crate::class::{BehaviorClass, ProbabilityVector, NUM_CLASSES};
use crate::metrics::{confusion, multiclass_metrics, MetricsReport};
use crate::model::{ClassifierModel, Gradients, ModelError};
use crate::real::Real;
use crate::seed::mix_seed;
use crate::tokenizer::TokenWindow;

/// Learning rate used for pretrained-checkpoint fine-tuning.
pub const FINE_TUNE_LR: f64 = 1e-5;
/// Probability floor applied inside the logarithm of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("class {0} has no training windows")]
    ClassMissing(BehaviorClass),
    #[error("window {0} has no label")]
    Unlabeled(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NumericalFault(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 16, optimizer: AdamWConfig::default(), seed: 0, val_fraction: 0.2 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("learning rate {} invalid", self.optimizer.lr));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("validation fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metrics: Option<MetricsReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub train_windows: usize,
    pub val_windows: usize,
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probs: &ProbabilityVector, label: BehaviorClass) -> f64 {
    -probs.get(label).max(PROB_FLOOR).ln()
}

/// Loss, probabilities and parameter gradients for one labelled window.
/// `dropout_seed` switches dropout on.
pub fn loss_and_grad<T: Real>(
    model: &ClassifierModel<T>,
    window: &TokenWindow,
    label: BehaviorClass,
    dropout_seed: Option<u64>,
) -> Result<(f64, ProbabilityVector, Gradients<T>), ModelError> {
    let cache = model.forward_cached(window, dropout_seed)?;
    let probs = ProbabilityVector::from_logits(&cache.logits_f64());
    let loss = cross_entropy(&probs, label);
    let dlogits: Vec<T> = (0..NUM_CLASSES)
        .map(|c| {
            let target = if c == label.index() { 1.0 } else { 0.0 };
            T::from_f64_lossy(probs.0[c] - target)
        })
        .collect();
    Ok((loss, probs, model.backward(&cache, &dlogits)))
}

/// Stratified split of window indices into (train, validation).
pub fn stratified_split(labels: &[BehaviorClass], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5b117]));
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in BehaviorClass::ALL {
        let mut idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let n_val = if idx.len() < 2 { 0 } else { ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1) };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Argmax predictions over `windows`, scored against their labels.
pub fn evaluate<T: Real>(model: &ClassifierModel<T>, windows: &[TokenWindow]) -> Result<MetricsReport, TrainError> {
    let probs = model.forward_batch(windows)?;
    let truths = windows
        .iter()
        .enumerate()
        .map(|(i, w)| w.label.map(BehaviorClass::index).ok_or(TrainError::Unlabeled(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let preds: Vec<usize> = probs.iter().map(|p| p.argmax().index()).collect();
    let cm = confusion(&truths, &preds, NUM_CLASSES).expect("labels in range");
    multiclass_metrics(&cm).map_err(|e| TrainError::InvalidConfig(e.to_string()))
}

/// Wall-clock source for epoch timings; `None` records zero seconds.
pub type Clock = Option<fn() -> Instant>;

/// Trains `model` on labelled windows. Deterministic for fixed seeds: batch
/// gradients are computed in parallel but summed in window order.
pub fn train<T: Real>(
    mut model: ClassifierModel<T>,
    windows: &[TokenWindow],
    config: &TrainConfig,
) -> Result<(ClassifierModel<T>, TrainReport), TrainError> {
    let report = train_with_clock(&mut model, windows, config, Some(Instant::now), |_| {})?;
    Ok((model, report))
}

/// Full training loop. `clock = None` writes zero epoch timings, giving
/// byte-reproducible reports. `on_epoch` observes each finished epoch.
pub fn train_with_clock<T: Real>(
    model: &mut ClassifierModel<T>,
    windows: &[TokenWindow],
    config: &TrainConfig,
    clock: Clock,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let labels = windows
        .iter()
        .enumerate()
        .map(|(i, w)| w.label.ok_or(TrainError::Unlabeled(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let (train_idx, val_idx) = stratified_split(&labels, config.val_fraction, config.seed);
    for class in BehaviorClass::ALL {
        if !train_idx.iter().any(|&i| labels[i] == class) {
            return Err(TrainError::ClassMissing(class));
        }
    }
    let val_windows: Vec<TokenWindow> = val_idx.iter().map(|&i| windows[i].clone()).collect();

    let mut state = AdamWState::new(model.num_params());
    let mut report = TrainReport { epochs: Vec::new(), train_windows: train_idx.len(), val_windows: val_idx.len() };
    let batch_scale = |n: usize| T::one() / T::from_usize(n).unwrap();
    for epoch in 1..=config.epochs {
        let started = clock.map(|c| c());
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64])));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Gradients<T>)> = batch
                .par_iter()
                .map(|&i| {
                    let dropout_seed = mix_seed(&[config.seed, epoch as u64, i as u64]);
                    loss_and_grad(model, &windows[i], labels[i], Some(dropout_seed)).map(|(l, _, g)| (l, g))
                })
                .collect::<Result<_, _>>()?;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            loss_sum += first_loss;
            for (l, g) in iter {
                loss_sum += l;
                grads.add_assign(&g);
            }
            grads.scale(batch_scale(batch.len()));
            adamw_step(model.params_mut(), &grads.0, &mut state, &config.optimizer)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NumericalFault(format!("epoch {epoch} loss")));
        }
        let val_metrics = if val_windows.is_empty() { None } else { Some(evaluate(model, &val_windows)?) };
        let seconds = started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let entry = EpochReport { epoch, train_loss, val_metrics, seconds };
        log::info!("epoch {epoch}: train_loss={train_loss:.4} ({seconds:.1}s)");
        on_epoch(&entry);
        report.epochs.push(entry);
    }
    Ok(report)
}
