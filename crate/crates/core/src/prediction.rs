use std::fmt;

use serde::{Deserialize, Serialize};

/// Probabilities at or above this value are labelled CORRECT.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Correct,
    Wrong,
}

impl Label {
    pub fn from_correct(correct: bool) -> Self {
        if correct {
            Label::Correct
        } else {
            Label::Wrong
        }
    }

    pub fn is_correct(self) -> bool {
        self == Label::Correct
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Correct => "CORRECT",
            Label::Wrong => "WRONG",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A probability of a correct response together with its binarized label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_correct: f64,
    pub label: Label,
}

impl Prediction {
    /// Builds a prediction from a probability, clamping into `[0, 1]`.
    ///
    /// Panics on NaN; every model in this crate guarantees finite outputs.
    pub fn from_probability(p: f64) -> Self {
        assert!(!p.is_nan(), "prediction probability is NaN");
        let p_correct = p.clamp(0.0, 1.0);
        let label = if p_correct >= DECISION_THRESHOLD {
            Label::Correct
        } else {
            Label::Wrong
        };
        Prediction { p_correct, label }
    }

    /// Probability attached to the emitted label, `max(p, 1 - p)`.
    pub fn label_probability(&self) -> f64 {
        self.p_correct.max(1.0 - self.p_correct)
    }
}

/// A fitted model that emits one prediction per step of a sequence, each
/// computed before the step's own label is consumed.
pub trait SequencePredictor {
    fn predict_sequence(&self, seq: &crate::dataset::StudentSequence) -> Vec<Prediction>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_breaks_to_correct() {
        assert_eq!(Prediction::from_probability(0.5).label, Label::Correct);
        assert_eq!(Prediction::from_probability(0.4999999).label, Label::Wrong);
    }

    #[test]
    fn label_probability_is_max() {
        let p = Prediction::from_probability(0.3);
        assert!((p.label_probability() - 0.7).abs() < 1e-15);
        assert_eq!(p.label, Label::Wrong);
    }
}
