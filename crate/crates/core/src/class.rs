use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of behavior classes the classifier head predicts.
pub const NUM_CLASSES: usize = 5;

/// The closed set of device behaviors. The ordinal (`index`) is the column
/// used by the classification head and by every probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviorClass {
    Normal,
    Bashlite,
    TheTick,
    Bdvl,
    RansomwarePoC,
}

impl BehaviorClass {
    pub const ALL: [BehaviorClass; NUM_CLASSES] = [
        BehaviorClass::Normal,
        BehaviorClass::Bashlite,
        BehaviorClass::TheTick,
        BehaviorClass::Bdvl,
        BehaviorClass::RansomwarePoC,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorClass::Normal => "Normal",
            BehaviorClass::Bashlite => "Bashlite",
            BehaviorClass::TheTick => "TheTick",
            BehaviorClass::Bdvl => "Bdvl",
            BehaviorClass::RansomwarePoC => "RansomwarePoC",
        }
    }
}

impl fmt::Display for BehaviorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown behavior class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for BehaviorClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

/// Class distribution for one window (or a pooled group of windows),
/// indexed by [`BehaviorClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(pub [f64; NUM_CLASSES]);

impl ProbabilityVector {
    pub fn uniform() -> Self {
        Self([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn one_hot(class: BehaviorClass) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[class.index()] = 1.0;
        Self(p)
    }

    /// Numerically stable softmax of raw scores.
    pub fn from_logits(logits: &[f64; NUM_CLASSES]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = logits.map(|l| (l - max).exp());
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        Self(p)
    }

    pub fn get(&self, class: BehaviorClass) -> f64 {
        self.0[class.index()]
    }

    /// Highest-probability class; ties go to the lowest index.
    pub fn argmax(&self) -> BehaviorClass {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        BehaviorClass::ALL[best]
    }

    /// Non-negative, finite and summing to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_and_argmax() {
        let p = ProbabilityVector::from_logits(&[0.0; NUM_CLASSES]);
        assert_eq!(p, ProbabilityVector::uniform());
        let p = ProbabilityVector::from_logits(&[1.0, 3.0, 3.0, -2.0, 1000.0]);
        assert!(p.is_valid(1e-12));
        assert_eq!(p.argmax(), BehaviorClass::RansomwarePoC);
        assert_eq!(ProbabilityVector([0.3, 0.3, 0.2, 0.1, 0.1]).argmax(), BehaviorClass::Normal);
    }

    #[test]
    fn ordinals_are_stable() {
        for (i, c) in BehaviorClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(BehaviorClass::from_index(i), Some(*c));
            assert_eq!(c.name().parse::<BehaviorClass>().unwrap(), *c);
        }
        assert_eq!(BehaviorClass::from_index(5), None);
        assert!("Trojan".parse::<BehaviorClass>().is_err());
    }
}
