//! Pixel-level segmentation metrics from a confusion matrix.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::raster::LabelMask;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: truth {truth:?}, prediction {pred:?}")]
    DimensionMismatch { truth: (usize, usize), pred: (usize, usize) },
    #[error("class count mismatch: matrix has {matrix}, mask has {mask}")]
    ClassMismatch { matrix: usize, mask: usize },
    #[error("prediction contains void pixels")]
    VoidPrediction,
    #[error("confusion matrix is empty")]
    Empty,
}

/// `counts[t][p]`: non-void pixels of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes, "counts must be classes x classes");
        Self { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accumulate(&mut self, truth: &LabelMask, pred: &LabelMask) -> Result<(), MetricsError> {
        if (truth.width(), truth.height()) != (pred.width(), pred.height()) {
            return Err(MetricsError::DimensionMismatch {
                truth: (truth.width(), truth.height()),
                pred: (pred.width(), pred.height()),
            });
        }
        for mask in [truth, pred] {
            if mask.classes() != self.classes {
                return Err(MetricsError::ClassMismatch { matrix: self.classes, mask: mask.classes() });
            }
        }
        if (0..pred.data().len()).any(|p| pred.is_void(p)) {
            return Err(MetricsError::VoidPrediction);
        }
        for (p, &guess) in pred.data().iter().enumerate() {
            if let Some(t) = truth.class_at(p) {
                self.counts[t * self.classes + guess as usize] += 1;
            }
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        (tp, col - tp, row - tp)
    }

    /// Fraction of correctly classified pixels.
    pub fn overall_accuracy(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::Empty),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    /// `2 TP / (2 TP + FP + FN)`, zero when the class never occurs.
    pub fn f1_per_class(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fnn) = self.tp_fp_fn(c);
                let den = 2 * tp + fp + fnn;
                if den == 0 {
                    0.0
                } else {
                    (2 * tp) as f64 / den as f64
                }
            })
            .collect()
    }

    /// Per-class `TP / (TP + FP + FN)` and its mean over classes that occur
    /// in the truth or the prediction.
    pub fn iou(&self) -> (Vec<f64>, f64) {
        let mut per_class = Vec::with_capacity(self.classes);
        let (mut sum, mut present) = (0.0, 0usize);
        for c in 0..self.classes {
            let (tp, fp, fnn) = self.tp_fp_fn(c);
            let union = tp + fp + fnn;
            if union == 0 {
                per_class.push(0.0);
            } else {
                let v = tp as f64 / union as f64;
                per_class.push(v);
                sum += v;
                present += 1;
            }
        }
        let mean = if present == 0 { 0.0 } else { sum / present as f64 };
        (per_class, mean)
    }

    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        let (per_class_iou, miou) = self.iou();
        Ok(MetricsReport {
            oa: self.overall_accuracy()?,
            per_class_f1: self.f1_per_class(),
            per_class_iou,
            miou,
            pixels_evaluated: self.total(),
        })
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "cannot merge matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// JSON document emitted by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub pixels_evaluated: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::VOID_BYTE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(data: &[u8], classes: usize) -> LabelMask {
        LabelMask::new(data.len(), 1, classes, data.to_vec(), Some(VOID_BYTE)).unwrap()
    }

    #[test]
    fn worked_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&mask(&[0, 0, 1, 1], 2), &mask(&[0, 1, 1, 1], 2)).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));
        assert_eq!(cm.overall_accuracy().unwrap(), 0.75);
    }

    #[test]
    fn perfect_and_void() {
        let truth = mask(&[0, 1, 2, 2, VOID_BYTE], 3);
        let pred = mask(&[0, 1, 2, 2, 0], 3);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &pred).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.trace(), 4);
        assert_eq!(cm.f1_per_class(), vec![1.0; 3]);
        assert_eq!(cm.iou(), (vec![1.0; 3], 1.0));

        let before = cm.clone();
        cm.accumulate(&mask(&[VOID_BYTE; 5], 3), &pred).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn counts_from_tp_fp_fn() {
        // class 0: TP 8, FP 2, FN 2
        let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 2, 5]);
        assert!((cm.f1_per_class()[0] - 0.8).abs() < 1e-15);
        assert!((cm.iou().0[0] - 8.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_zero_and_skipped() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 1, 3, 0, 0, 0, 0]);
        assert_eq!(cm.f1_per_class()[2], 0.0);
        let (iou, mean) = cm.iou();
        assert_eq!(iou[2], 0.0);
        assert!((mean - (iou[0] + iou[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn error_paths() {
        let mut cm = ConfusionMatrix::new(2);
        assert_eq!(cm.overall_accuracy(), Err(MetricsError::Empty));
        assert!(matches!(cm.accumulate(&mask(&[0, 1], 2), &mask(&[0], 2)), Err(MetricsError::DimensionMismatch { .. })));
        assert_eq!(cm.accumulate(&mask(&[0, 1], 2), &mask(&[0, VOID_BYTE], 2)), Err(MetricsError::VoidPrediction));
        assert!(matches!(cm.accumulate(&mask(&[0, 1], 3), &mask(&[0, 1], 3)), Err(MetricsError::ClassMismatch { .. })));
    }

    #[test]
    fn random_guessing_accuracy_is_one_over_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = 5;
        let n = 100_000;
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..c as u8)).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..c as u8)).collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&mask(&truth, c), &mask(&pred, c)).unwrap();
        assert!((cm.overall_accuracy().unwrap() - 1.0 / c as f64).abs() < 0.01);
    }

    fn arb_counts() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..7).prop_flat_map(|c| {
            proptest::collection::vec(0u64..1000, c * c).prop_map(move |v| ConfusionMatrix::from_counts(c, v))
        })
    }

    proptest! {
        #[test]
        fn iou_f1_ordering_and_identity(cm in arb_counts()) {
            let f1 = cm.f1_per_class();
            let (iou, _) = cm.iou();
            for (f, i) in f1.iter().zip(&iou) {
                prop_assert!(0.0 <= *i && i <= f && *f <= 1.0);
                prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            }
        }

        #[test]
        fn merging_is_order_independent(a in arb_counts(), seed in any::<u64>()) {
            let c = a.classes();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = ConfusionMatrix::from_counts(c, (0..c * c).map(|_| rng.random_range(0..100)).collect());
            let mut ab = a.clone();
            ab += &b;
            let mut ba = b.clone();
            ba += &a;
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn class_permutation_invariance(
            data in proptest::collection::vec((0u8..4, 0u8..4), 1..200),
            perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let truth: Vec<u8> = data.iter().map(|d| d.0).collect();
            let pred: Vec<u8> = data.iter().map(|d| d.1).collect();
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&mask(&truth, 4), &mask(&pred, 4)).unwrap();
            let pt: Vec<u8> = truth.iter().map(|&v| perm[v as usize]).collect();
            let pp: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
            let mut pcm = ConfusionMatrix::new(4);
            pcm.accumulate(&mask(&pt, 4), &mask(&pp, 4)).unwrap();
            prop_assert_eq!(cm.overall_accuracy().unwrap(), pcm.overall_accuracy().unwrap());
            let (f1, pf1) = (cm.f1_per_class(), pcm.f1_per_class());
            for k in 0..4 {
                prop_assert_eq!(f1[k], pf1[perm[k] as usize]);
            }
            prop_assert!((cm.iou().1 - pcm.iou().1).abs() < 1e-12);
        }
    }
}
