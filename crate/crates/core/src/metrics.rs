//! Confusion-matrix accounting and the mean intersection-over-union
//! metric: `IoU_c = TP_c / (TP_c + FP_c + FN_c)`.

use crate::error::{Error, Result};

/// Square count matrix; rows are ground truth, columns are predictions.
/// Points labeled with the ignore id are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
    ignore_index: u32,
}

/// Per-class IoU (None where the class never occurs) and their mean.
#[derive(Debug, Clone)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u32) -> Self {
        ConfusionMatrix {
            counts: vec![0; num_classes * num_classes],
            num_classes,
            ignore_index,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: u32, prediction: u32) -> u64 {
        self.counts[truth as usize * self.num_classes + prediction as usize]
    }

    /// Total scored points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, predictions: &[u32], labels: &[u32]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for (&p, &y) in predictions.iter().zip(labels) {
            if y == self.ignore_index {
                continue;
            }
            if (y as usize) >= self.num_classes || (p as usize) >= self.num_classes {
                return Err(Error::arg(format!(
                    "class id outside [0, {}): truth {y}, prediction {p}",
                    self.num_classes
                )));
            }
            self.counts[y as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise merge of matrices accumulated in parallel.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes || other.ignore_index != self.ignore_index {
            return Err(Error::arg("merging confusion matrices of different layouts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU and the mean over classes with a non-zero
    /// denominator; the ignore class is excluded throughout.
    pub fn miou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(Error::empty("mIoU of an empty confusion matrix"));
        }
        let n = self.num_classes;
        let mut per_class = vec![None; n];
        let mut sum = 0.0;
        let mut included = 0usize;
        for c in 0..n {
            if c as u32 == self.ignore_index {
                continue;
            }
            let tp = self.counts[c * n + c];
            let fp: u64 = (0..n)
                .filter(|&t| t != c && t as u32 != self.ignore_index)
                .map(|t| self.counts[t * n + c])
                .sum();
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.counts[c * n + p]).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                continue;
            }
            let iou = tp as f64 / denom as f64;
            per_class[c] = Some(iou);
            sum += iou;
            included += 1;
        }
        if included == 0 {
            return Err(Error::empty("no class with a non-zero IoU denominator"));
        }
        Ok(IouReport {
            per_class,
            mean: sum / included as f64,
        })
    }

    /// CSV report: one row per class plus the mean.
    pub fn to_csv(&self, class_names: Option<&[String]>) -> Result<String> {
        let report = self.miou()?;
        let mut out = String::from("class,name,iou\n");
        for (c, iou) in report.per_class.iter().enumerate() {
            let name = class_names
                .and_then(|n| n.get(c))
                .map(String::as_str)
                .unwrap_or("");
            match iou {
                Some(v) => out.push_str(&format!("{c},{name},{v:.6}\n")),
                None => out.push_str(&format!("{c},{name},\n")),
            }
        }
        out.push_str(&format!("mean,,{:.6}\n", report.mean));
        Ok(out)
    }

    /// Human-readable table report.
    pub fn to_table(&self, class_names: Option<&[String]>) -> Result<String> {
        let report = self.miou()?;
        let mut out = String::new();
        out.push_str(&format!("{:<6} {:<16} {:>8}\n", "class", "name", "iou"));
        for (c, iou) in report.per_class.iter().enumerate() {
            if c as u32 == self.ignore_index {
                continue;
            }
            let name = class_names
                .and_then(|n| n.get(c))
                .map(String::as_str)
                .unwrap_or("-");
            match iou {
                Some(v) => out.push_str(&format!("{c:<6} {name:<16} {v:>8.4}\n")),
                None => out.push_str(&format!("{c:<6} {name:<16} {:>8}\n", "n/a")),
            }
        }
        out.push_str(&format!("mIoU {:.4}\n", report.mean));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let mut cm = ConfusionMatrix::new(4, 0);
        cm.update(&[1, 2, 3, 1], &[1, 2, 3, 1]).unwrap();
        let report = cm.miou().unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.per_class[1], Some(1.0));
        assert_eq!(report.per_class[0], None);
    }

    #[test]
    fn half_iou_hand_case() {
        // Class 1: TP = 1, FP = 1, FN = 0 -> IoU 0.5.
        let mut cm = ConfusionMatrix::new(3, 0);
        cm.update(&[1, 1], &[1, 2]).unwrap();
        let report = cm.miou().unwrap();
        assert_eq!(report.per_class[1], Some(0.5));
        // Class 2: TP = 0, FN = 1 -> IoU 0.
        assert_eq!(report.per_class[2], Some(0.0));
        assert_eq!(report.mean, 0.25);
    }

    #[test]
    fn total_misclassification_scores_zero() {
        let mut cm = ConfusionMatrix::new(3, 0);
        cm.update(&[2, 2, 1, 1], &[1, 1, 2, 2]).unwrap();
        assert_eq!(cm.miou().unwrap().mean, 0.0);
    }

    #[test]
    fn ignore_labels_are_not_counted() {
        let mut cm = ConfusionMatrix::new(3, 0);
        cm.update(&[1, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::new(3, 0);
        assert!(cm.miou().is_err());
    }

    #[test]
    fn totals_match_scored_count_after_updates() {
        let mut cm = ConfusionMatrix::new(4, 0);
        cm.update(&[1, 2, 3], &[1, 0, 3]).unwrap();
        cm.update(&[2, 2], &[2, 1]).unwrap();
        assert_eq!(cm.total(), 4);
        let mut other = ConfusionMatrix::new(4, 0);
        other.update(&[3], &[3]).unwrap();
        cm.merge(&other).unwrap();
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn miou_invariant_under_joint_relabeling() {
        let preds = [1u32, 2, 3, 1, 2, 3, 1, 1];
        let labels = [1u32, 2, 3, 3, 2, 1, 1, 2];
        let mut cm = ConfusionMatrix::new(4, 0);
        cm.update(&preds, &labels).unwrap();
        let base = cm.miou().unwrap();

        // Swap classes 1 and 3 in both predictions and labels.
        let relabel = |v: u32| match v {
            1 => 3,
            3 => 1,
            other => other,
        };
        let preds2: Vec<u32> = preds.iter().map(|&v| relabel(v)).collect();
        let labels2: Vec<u32> = labels.iter().map(|&v| relabel(v)).collect();
        let mut cm2 = ConfusionMatrix::new(4, 0);
        cm2.update(&preds2, &labels2).unwrap();
        let swapped = cm2.miou().unwrap();

        assert!((base.mean - swapped.mean).abs() < 1e-12);
        assert_eq!(base.per_class[1], swapped.per_class[3]);
        assert_eq!(base.per_class[3], swapped.per_class[1]);
    }

    #[test]
    fn reports_render() {
        let mut cm = ConfusionMatrix::new(3, 0);
        cm.update(&[1, 2], &[1, 2]).unwrap();
        let csv = cm.to_csv(None).unwrap();
        assert!(csv.contains("mean,,1.000000"));
        let table = cm.to_table(None).unwrap();
        assert!(table.contains("mIoU 1.0000"));
    }
}
