//! Turning per-window probabilities into device-level verdicts.
//!
//! A verdict pools `window_span` consecutive windows, takes the argmax class
//! and flags the span as malicious when the pooled probability of anything
//! other than Normal reaches the threshold. [`fit_stacker`] trains a
//! multinomial logistic regression on probability vectors as an optional
//! second stage.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::class::{BehaviorClass, ProbabilityVector, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecisionError {
    #[error("nothing to pool")]
    EmptyInput,
    #[error("{weights} weights for {inputs} inputs")]
    WeightMismatch { weights: usize, inputs: usize },
    #[error("invalid decision policy: {0}")]
    InvalidPolicy(String),
    #[error("no stacker training example for class {0}")]
    ClassMissing(BehaviorClass),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    MajorityVote,
    WeightedMean { weights: Vec<f64> },
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::MajorityVote => f.write_str("vote"),
            Aggregation::WeightedMean { weights } => {
                let w: Vec<String> = weights.iter().map(f64::to_string).collect();
                write!(f, "weighted:{}", w.join(","))
            }
        }
    }
}

/// Parses `mean`, `vote` or `weighted:w1,w2,...`.
impl FromStr for Aggregation {
    type Err = DecisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DecisionError::InvalidPolicy(format!("unknown aggregation `{s}`"));
        match s.trim() {
            "mean" => Ok(Aggregation::Mean),
            "vote" | "majority" => Ok(Aggregation::MajorityVote),
            other => {
                let list = other.strip_prefix("weighted:").ok_or_else(bad)?;
                let weights = list
                    .split(',')
                    .map(|w| w.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                validate_weights(&weights)?;
                Ok(Aggregation::WeightedMean { weights })
            }
        }
    }
}

fn validate_weights(weights: &[f64]) -> Result<(), DecisionError> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(DecisionError::InvalidPolicy("weights must be finite and non-negative".into()));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(DecisionError::InvalidPolicy("weights are all zero".into()));
    }
    Ok(())
}

fn normalized(mut v: [f64; NUM_CLASSES]) -> ProbabilityVector {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    ProbabilityVector(v)
}

/// Pools window probabilities into one vector.
///
/// Majority vote returns the one-hot of the most frequent argmax; ties go to
/// the highest mean probability among the tied classes, then the lowest index.
pub fn pool(probs: &[ProbabilityVector], method: &Aggregation) -> Result<ProbabilityVector, DecisionError> {
    if probs.is_empty() {
        return Err(DecisionError::EmptyInput);
    }
    let mut sums = [0.0; NUM_CLASSES];
    match method {
        Aggregation::Mean => {
            for p in probs {
                sums.iter_mut().zip(&p.0).for_each(|(s, x)| *s += x);
            }
            Ok(normalized(sums))
        }
        Aggregation::WeightedMean { weights } => {
            if weights.len() != probs.len() {
                return Err(DecisionError::WeightMismatch { weights: weights.len(), inputs: probs.len() });
            }
            validate_weights(weights)?;
            for (p, &w) in probs.iter().zip(weights) {
                sums.iter_mut().zip(&p.0).for_each(|(s, x)| *s += w * x);
            }
            Ok(normalized(sums))
        }
        Aggregation::MajorityVote => {
            let mut votes = [0usize; NUM_CLASSES];
            for p in probs {
                votes[p.argmax().index()] += 1;
                sums.iter_mut().zip(&p.0).for_each(|(s, x)| *s += x);
            }
            let top = *votes.iter().max().expect("non-empty");
            let mut winner = None::<usize>;
            for k in (0..NUM_CLASSES).filter(|&k| votes[k] == top) {
                if winner.is_none_or(|w| sums[k] > sums[w]) {
                    winner = Some(k);
                }
            }
            let class = BehaviorClass::from_index(winner.expect("some class has the top count")).unwrap();
            Ok(ProbabilityVector::one_hot(class))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    /// Threshold on the malicious probability `1 - P(Normal)`.
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Consecutive windows pooled into one verdict.
    pub window_span: usize,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        Self { threshold: 0.5, aggregation: Aggregation::Mean, window_span: 10 }
    }
}

impl DecisionPolicy {
    pub fn validate(&self) -> Result<(), DecisionError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DecisionError::InvalidPolicy(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.window_span == 0 {
            return Err(DecisionError::InvalidPolicy("window span must be >= 1".into()));
        }
        if let Aggregation::WeightedMean { weights } = &self.aggregation {
            validate_weights(weights)?;
            if weights.len() != self.window_span {
                return Err(DecisionError::WeightMismatch { weights: weights.len(), inputs: self.window_span });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    /// Half-open range of contributing window indices.
    #[serde(serialize_with = "range_pair")]
    pub window_range: Range<usize>,
    pub class: BehaviorClass,
    pub malicious: bool,
    pub probabilities: ProbabilityVector,
}

fn range_pair<S: Serializer>(r: &Range<usize>, s: S) -> Result<S::Ok, S::Error> {
    [r.start, r.end].serialize(s)
}

/// `1 - P(Normal)`.
pub fn malicious_probability(p: &ProbabilityVector) -> f64 {
    1.0 - p.get(BehaviorClass::Normal)
}

/// Flags `pooled` as malicious iff `1 - P(Normal) >= threshold`, evaluated as
/// `P(Normal) <= 1 - threshold` so that threshold 1 flags exactly the vectors
/// with zero Normal mass.
pub fn is_malicious(pooled: &ProbabilityVector, threshold: f64) -> bool {
    pooled.get(BehaviorClass::Normal) <= 1.0 - threshold
}

/// Verdict for an already pooled vector. The window range is left empty.
pub fn decide(pooled: &ProbabilityVector, policy: &DecisionPolicy) -> Verdict {
    Verdict {
        window_range: 0..0,
        class: pooled.argmax(),
        malicious: is_malicious(pooled, policy.threshold),
        probabilities: *pooled,
    }
}

/// One verdict per `window_span` consecutive windows; the last span may be
/// shorter, in which case weighted pooling uses the leading weights.
pub fn aggregate(probs: &[ProbabilityVector], policy: &DecisionPolicy) -> Result<Vec<Verdict>, DecisionError> {
    policy.validate()?;
    let mut out = Vec::with_capacity(probs.len().div_ceil(policy.window_span));
    for (i, chunk) in probs.chunks(policy.window_span).enumerate() {
        let method = match &policy.aggregation {
            Aggregation::WeightedMean { weights } => {
                Aggregation::WeightedMean { weights: weights[..chunk.len()].to_vec() }
            }
            other => other.clone(),
        };
        let pooled = pool(chunk, &method)?;
        let start = i * policy.window_span;
        out.push(Verdict { window_range: start..start + chunk.len(), ..decide(&pooled, policy) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackerConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_iterations: usize,
    /// Stop once the relative loss change falls below this.
    pub tolerance: f64,
}

impl Default for StackerConfig {
    fn default() -> Self {
        Self { learning_rate: 1.0, l2: 1e-4, max_iterations: 10_000, tolerance: 1e-6 }
    }
}

/// Multinomial logistic regression over probability vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerModel {
    /// `weights[c][j]`: input feature `j` to output class `c`.
    pub weights: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub bias: [f64; NUM_CLASSES],
    pub iterations: usize,
    pub final_loss: f64,
    /// False when the iteration cap was reached first.
    pub converged: bool,
}

impl StackerModel {
    pub fn predict_proba(&self, p: &ProbabilityVector) -> ProbabilityVector {
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            *zc += self.weights[c].iter().zip(&p.0).map(|(w, x)| w * x).sum::<f64>();
        }
        ProbabilityVector::from_logits(&z)
    }
}

pub fn apply_stacker(model: &StackerModel, p: &ProbabilityVector) -> BehaviorClass {
    model.predict_proba(p).argmax()
}

pub fn fit_stacker(training: &[(ProbabilityVector, BehaviorClass)]) -> Result<StackerModel, DecisionError> {
    fit_stacker_with(training, &StackerConfig::default())
}

/// Full-batch gradient descent on mean cross-entropy plus an L2 penalty on the
/// weights. Hitting the iteration cap returns the best model seen with
/// `converged = false`.
pub fn fit_stacker_with(
    training: &[(ProbabilityVector, BehaviorClass)],
    cfg: &StackerConfig,
) -> Result<StackerModel, DecisionError> {
    for class in BehaviorClass::ALL {
        if !training.iter().any(|(_, c)| *c == class) {
            return Err(DecisionError::ClassMissing(class));
        }
    }
    let n = training.len() as f64;
    let mut model = StackerModel {
        weights: [[0.0; NUM_CLASSES]; NUM_CLASSES],
        bias: [0.0; NUM_CLASSES],
        iterations: 0,
        final_loss: f64::INFINITY,
        converged: false,
    };
    let mut best = model.clone();
    let mut prev = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let mut gw = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        let mut gb = [0.0; NUM_CLASSES];
        let mut loss = 0.0;
        for (x, y) in training {
            let q = model.predict_proba(x);
            loss -= q.get(*y).max(1e-300).ln();
            for c in 0..NUM_CLASSES {
                let d = q.0[c] - if c == y.index() { 1.0 } else { 0.0 };
                gb[c] += d;
                gw[c].iter_mut().zip(&x.0).for_each(|(g, xj)| *g += d * xj);
            }
        }
        loss /= n;
        loss += 0.5 * cfg.l2 * model.weights.iter().flatten().map(|w| w * w).sum::<f64>();
        if loss < best.final_loss {
            best = StackerModel { final_loss: loss, iterations: it - 1, ..model.clone() };
        }
        if prev.is_finite() && (prev - loss).abs() <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            best.converged = true;
            return Ok(best);
        }
        prev = loss;
        for c in 0..NUM_CLASSES {
            model.bias[c] -= cfg.learning_rate * gb[c] / n;
            for j in 0..NUM_CLASSES {
                model.weights[c][j] -= cfg.learning_rate * (gw[c][j] / n + cfg.l2 * model.weights[c][j]);
            }
        }
    }
    log::warn!("stacker did not converge in {} iterations", cfg.max_iterations);
    Ok(best)
}
