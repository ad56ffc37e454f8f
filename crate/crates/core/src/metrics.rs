//! Pixel confusion counts and intersection-over-union.

use crate::error::{Error, Result};

/// `counts[gt][pred]` pixel totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Domain(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= k) {
            return Err(Error::Domain(format!("class {bad} outside 0..{k}")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Domain("merging confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.count(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.num_classes)
            .filter(|&g| g != class)
            .map(|g| self.count(g, class))
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.num_classes)
            .filter(|&p| p != class)
            .map(|p| self.count(class, p))
            .sum()
    }

    /// `(TP, TP + FP + FN)`; the ratio is the IoU.
    pub fn iou_fraction(&self, class: usize) -> (u64, u64) {
        let tp = self.true_positives(class);
        (tp, tp + self.false_positives(class) + self.false_negatives(class))
    }

    /// `None` when the class is absent from both prediction and ground truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        assert!(class < self.num_classes, "class {class} out of range");
        match self.iou_fraction(class) {
            (_, 0) => None,
            (tp, d) => Some(tp as f64 / d as f64),
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean over classes with a defined IoU; `None` if there are none.
    pub fn miou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let hits: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| hits as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted() {
        let mut m = ConfusionMatrix::new(2);
        m.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(m.iou(0), Some(0.5));
        assert!((m.iou(1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.miou().unwrap() - 0.583_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut m = ConfusionMatrix::new(3);
        m.add(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(m.iou(2), None);
        assert_eq!(m.miou(), Some(1.0));
        assert!(m.add(&[3], &[0]).is_err());
        assert!(m.add(&[0], &[]).is_err());
    }
}
