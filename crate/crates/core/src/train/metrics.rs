//! Confusion matrix, mean IoU and pixel accuracy.

use crate::error::OpError;
use crate::tensor::Labels;

/// C×C counts indexed [true class][predicted class]. Pixels whose true label
/// equals `ignore_index` are not accumulated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    pub ignore_index: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    /// IoU per class; `None` for classes absent from both truth and
    /// prediction (excluded from the mean).
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_index: Option<u32>) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], ignore_index }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, count: u64) {
        self.counts[truth * self.classes + pred] += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one aligned truth/prediction pair.
    pub fn update(&mut self, truth: &Labels, pred: &Labels) -> Result<(), OpError> {
        if (truth.n, truth.h, truth.w) != (pred.n, pred.h, pred.w) {
            return Err(OpError::Data(format!(
                "confusion matrix: truth {}x{}x{} vs prediction {}x{}x{}",
                truth.n, truth.h, truth.w, pred.n, pred.h, pred.w
            )));
        }
        for (&t, &p) in truth.data().iter().zip(pred.data()) {
            if self.ignore_index == Some(t) {
                continue;
            }
            if t as usize >= self.classes || p as usize >= self.classes {
                return Err(OpError::Data(format!(
                    "confusion matrix: label pair ({t}, {p}) out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU, their mean, and global pixel accuracy. Classes with a
    /// zero denominator are excluded from the mean.
    pub fn miou(&self) -> Result<MiouResult, OpError> {
        let total = self.total();
        if total == 0 {
            return Err(OpError::Data("confusion matrix is empty; metric undefined".into()));
        }
        let mut per_class = Vec::with_capacity(self.classes);
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut trace = 0u64;
        for c in 0..self.classes {
            let diag = self.count(c, c);
            trace += diag;
            let row: u64 = (0..self.classes).map(|j| self.count(c, j)).sum();
            let col: u64 = (0..self.classes).map(|i| self.count(i, c)).sum();
            let denom = row + col - diag;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = diag as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                used += 1;
            }
        }
        Ok(MiouResult {
            per_class,
            mean_iou: sum / used as f64,
            pixel_accuracy: trace as f64 / total as f64,
        })
    }
}
