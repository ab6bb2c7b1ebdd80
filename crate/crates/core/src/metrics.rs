//! Binary classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts with class 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[u8], labels: &[u8]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::invalid("f1 of an empty prediction set"));
        }
        if preds.len() != labels.len() {
            return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
        }
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::invalid(format!("non-binary value in ({p}, {y})"))),
            }
        }
        Ok(c)
    }

    /// F1 of one class given its true positives, false positives and false
    /// negatives; 0 when precision + recall is 0.
    fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        // 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN), which is 0/0 exactly when P+R = 0
        let denom = 2 * tp + fp + fn_;
        if tp == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        }
    }

    pub fn positive_f1(&self) -> f64 {
        Self::class_f1(self.tp, self.fp, self.fn_)
    }

    pub fn negative_f1(&self) -> f64 {
        Self::class_f1(self.tn, self.fn_, self.fp)
    }

    /// Summed as exact fractions with a single final division, so the result
    /// is the correctly rounded value of the true mean.
    pub fn macro_f1(&self) -> f64 {
        let ratio = |tp: usize, fp: usize, fn_: usize| -> (u128, u128) {
            if tp == 0 {
                (0, 1)
            } else {
                (2 * tp as u128, (2 * tp + fp + fn_) as u128)
            }
        };
        let (a, b) = ratio(self.tp, self.fp, self.fn_);
        let (c, d) = ratio(self.tn, self.fn_, self.fp);
        (a * d + c * b) as f64 / (2 * b * d) as f64
    }

    /// Share of predictions that are positive.
    pub fn positive_rate(&self) -> f64 {
        (self.tp + self.fp) as f64 / (self.tp + self.fp + self.fn_ + self.tn) as f64
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.fp + self.fn_ + self.tn) as f64
    }
}

/// Macro-averaged F1 over the two classes.
pub fn f1_score(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(Confusion::from_predictions(preds, labels)?.macro_f1())
}

/// F1 of the positive class only.
pub fn binary_f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(Confusion::from_predictions(preds, labels)?.positive_f1())
}
