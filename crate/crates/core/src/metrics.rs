//! Pixel-level confusion counts and the IoU-family metrics derived from
//! them.

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// Confusion counts and derived ratios for one evaluation run.
///
/// Conventions for empty denominators: precision, recall, and f1 are 0
/// when undefined; IoU is 1 when both masks are empty (0/0 with an empty
/// union means perfect agreement), 0 otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl MetricsRecord {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let iou = if tp + fp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fn_) as f64
        };
        MetricsRecord {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            iou,
        }
    }

    /// Fixed-column CSV line: tp,fp,fn,tn,precision,recall,f1,iou.
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.tp, self.fp, self.fn_, self.tn, self.precision, self.recall, self.f1, self.iou
        )
    }
}

/// Thresholds `sigmoid(logit) > threshold` (equivalently `logit >
/// logit(threshold)`), compares against binary truth over the full
/// volume, and derives the metric ratios.
pub fn binarize_and_score(
    pred_logits: &Tensor5,
    truth: &Tensor5,
    threshold: f64,
) -> Result<MetricsRecord> {
    if pred_logits.shape() != truth.shape() {
        return Err(Error::shape_mismatch(pred_logits.shape(), truth.shape()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArg(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let tv = truth.to_f64_vec();
    if tv.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArg(
            "truth mask must be exactly 0 or 1".into(),
        ));
    }
    // sigma(z) > thr  <=>  z > ln(thr / (1 - thr)); the boundary cases
    // thr = 0 (everything positive) and thr = 1 (nothing positive) fall
    // out of the infinities.
    let z_cut = if threshold == 0.0 {
        f64::NEG_INFINITY
    } else if threshold == 1.0 {
        f64::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln()
    };
    let zv = pred_logits.to_f64_vec();
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&z, &y) in zv.iter().zip(&tv) {
        let pred = z > z_cut;
        let pos = y == 1.0;
        match (pred, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsRecord::from_counts(tp, fp, fn_, tn))
}

/// Mean IoU over per-region records.
pub fn miou(records: &[MetricsRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dtype, Shape5};

    fn logits_from_mask(mask: &[f64], shape: Shape5) -> Tensor5 {
        // +5 for predicted positive, -5 negative
        Tensor5::from_vec_f64(
            shape,
            mask.iter().map(|&m| if m == 1.0 { 5.0 } else { -5.0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_disjoint_masks() {
        let s = Shape5::new(1, 1, 1, 2, 3).unwrap();
        let truth_v = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let truth = Tensor5::from_vec_f64(s, truth_v.clone()).unwrap();

        let perfect = binarize_and_score(&logits_from_mask(&truth_v, s), &truth, 0.5).unwrap();
        assert_eq!(perfect.iou, 1.0);
        assert_eq!(perfect.f1, 1.0);

        let flipped: Vec<f64> = truth_v.iter().map(|&v| 1.0 - v).collect();
        let disjoint = binarize_and_score(&logits_from_mask(&flipped, s), &truth, 0.5).unwrap();
        assert_eq!(disjoint.iou, 0.0);
        assert_eq!(disjoint.tp, 0);
    }

    #[test]
    fn hand_confusion_matrix() {
        // pred 3 positives, truth 2 positives, overlap 1:
        // iou 1/4, precision 1/3, recall 1/2
        let s = Shape5::new(1, 1, 1, 1, 6).unwrap();
        let pred = logits_from_mask(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], s);
        let truth = Tensor5::from_vec_f64(s, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let m = binarize_and_score(&pred, &truth, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 2, 1, 2));
        assert!((m.iou - 0.25).abs() < 1e-12);
        assert!((m.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_conventions() {
        // both empty: iou 1, others 0
        let both = MetricsRecord::from_counts(0, 0, 0, 10);
        assert_eq!(both.iou, 1.0);
        assert_eq!(both.precision, 0.0);
        assert_eq!(both.recall, 0.0);
        assert_eq!(both.f1, 0.0);

        // empty prediction, non-empty truth
        let miss = MetricsRecord::from_counts(0, 0, 5, 5);
        assert_eq!(miss.iou, 0.0);
        assert_eq!(miss.recall, 0.0);
    }

    #[test]
    fn iou_bounded_by_f1_for_nonempty_unions() {
        // randomized counts with tp + fp + fn > 0
        let mut rng = 0x12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) % 50
        };
        for _ in 0..500 {
            let (tp, fp, fn_) = (next(), next(), next());
            if tp + fp + fn_ == 0 {
                continue;
            }
            let m = MetricsRecord::from_counts(tp, fp, fn_, next());
            assert!(m.iou <= m.f1 + 1e-12, "{m:?}");
            assert!(m.f1 <= 1.0);
        }
    }

    #[test]
    fn increasing_threshold_never_increases_recall() {
        let s = Shape5::new(1, 1, 2, 4, 4).unwrap();
        let logits = Tensor5::uniform(s, Dtype::F64, 1.0, 9);
        let truth = Tensor5::from_fn(s, Dtype::F64, |i| ((i * 13) % 5 < 2) as u64 as f64).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let thr = k as f64 / 10.0;
            let m = binarize_and_score(&logits, &truth, thr).unwrap();
            assert!(m.recall <= last + 1e-12, "thr {thr}");
            last = m.recall;
        }
    }

    #[test]
    fn miou_averages_records() {
        let a = MetricsRecord::from_counts(1, 0, 0, 0); // iou 1
        let b = MetricsRecord::from_counts(1, 1, 2, 0); // iou 0.25
        assert!((miou(&[a, b]) - 0.625).abs() < 1e-12);
        assert_eq!(miou(&[]), 0.0);
    }
}
