//! Confusion matrix and per-class / macro F1.

use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn from_predictions(truth: &[Label], predicted: &[Label]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "confusion_matrix",
                &[truth.len()],
                &[predicted.len()],
            ));
        }
        let mut cm = ConfusionMatrix::default();
        for (t, p) in truth.iter().zip(predicted) {
            cm.record(*t, *p);
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    pub fn false_positives(&self, k: usize) -> u64 {
        (0..NUM_CLASSES).filter(|&t| t != k).map(|t| self.counts[t][k]).sum()
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        (0..NUM_CLASSES).filter(|&p| p != k).map(|p| self.counts[k][p]).sum()
    }
}

/// `2TP / (2TP + FP + FN)` per class, zero when the denominator is zero.
pub fn per_class_f1(cm: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (k, f1) in out.iter_mut().enumerate() {
        let tp = cm.true_positives(k);
        let denom = 2 * tp + cm.false_positives(k) + cm.false_negatives(k);
        if denom > 0 {
            *f1 = (2 * tp) as f64 / denom as f64;
        }
    }
    out
}

/// Unweighted mean of the per-class scores.
pub fn mean_f1(per_class: &[f64]) -> f64 {
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Macro F1 of a prediction list.
pub fn macro_f1(truth: &[Label], predicted: &[Label]) -> Result<f64> {
    Ok(mean_f1(&per_class_f1(&ConfusionMatrix::from_predictions(
        truth, predicted,
    )?)))
}
