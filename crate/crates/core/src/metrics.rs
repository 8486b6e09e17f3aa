//! Binary detection metrics. Adversarial is the positive class.

use serde::{Deserialize, Serialize};

use crate::Real;

/// Confusion counts for a binary detector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted_adversarial: bool, actually_adversarial: bool) {
        match (predicted_adversarial, actually_adversarial) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> DetectionMetrics {
        let div = |num: usize, den: usize| if den == 0 { 0.0 } else { num as Real / den as Real };
        let precision = div(self.tp, self.tp + self.fp);
        let recall = div(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMetrics {
            f1,
            recall,
            precision,
            accuracy: div(self.tp + self.tn, self.total()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub f1: Real,
    pub recall: Real,
    pub precision: Real,
    pub accuracy: Real,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let mut c = Confusion::default();
        for _ in 0..5 {
            c.record(true, true);
            c.record(false, false);
        }
        let m = c.metrics();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn all_benign_predictor_on_balanced_data() {
        let mut c = Confusion::default();
        for _ in 0..10 {
            c.record(false, true);
            c.record(false, false);
        }
        let m = c.metrics();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn hand_built_confusion_matches_formula() {
        let c = Confusion { tp: 8, fp: 2, tn: 0, fn_: 2 };
        let m = c.metrics();
        assert!((m.f1 - 0.8).abs() < 1e-12);
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 0.8).abs() < 1e-12);
    }
}
