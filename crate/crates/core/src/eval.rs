//! Confusion-matrix accumulation, per-class IoU, mIoU and hIoU.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::segpipe::{SegmentationMask, IGNORE};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(m: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((m, m)),
            total: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn accumulate(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let m = self.classes() as u32;
        if let Some(&bad) = pred.labels.iter().find(|&&p| p >= m) {
            return Err(Error::invalid(if bad == IGNORE {
                "prediction contains the ignore label".to_string()
            } else {
                format!("prediction label {bad} out of range for {m} classes")
            }));
        }
        if let Some(&bad) = gt.labels.iter().find(|&&g| g != IGNORE && g >= m) {
            return Err(Error::invalid(format!(
                "ground-truth label {bad} out of range for {m} classes"
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
            if g == IGNORE {
                continue;
            }
            self.counts[[g as usize, p as usize]] += 1;
            self.total += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape("confusion matrices of different sizes"));
        }
        self.counts += &other.counts;
        self.total += other.total;
        Ok(())
    }

    pub fn transpose(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: self.counts.t().to_owned(),
            total: self.total,
        }
    }

    /// `(intersection, union)` per class.
    pub fn intersections_unions(&self) -> Vec<(u64, u64)> {
        (0..self.classes())
            .map(|c| {
                let inter = self.counts[[c, c]];
                let row: u64 = self.counts.row(c).sum();
                let col: u64 = self.counts.column(c).sum();
                (inter, row + col - inter)
            })
            .collect()
    }

    /// Per-class IoU; `None` for classes absent from both prediction and truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        self.intersections_unions()
            .into_iter()
            .map(|(i, u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean IoU over classes with a nonzero union.
    pub fn miou(&self) -> Result<f64> {
        mean_present(self.iou().into_iter())
    }

    /// mIoU restricted to `classes`.
    pub fn subset_miou(&self, classes: &[usize]) -> Result<f64> {
        let iou = self.iou();
        if let Some(&bad) = classes.iter().find(|&&c| c >= iou.len()) {
            return Err(Error::invalid(format!("class {bad} out of range")));
        }
        mean_present(classes.iter().map(|&c| iou[c]))
    }

    /// Harmonic mean of the unseen-class and seen-class mIoU. Returns
    /// `(unseen, seen, harmonic)`.
    pub fn hiou(&self, unseen: &[usize]) -> Result<(f64, f64, f64)> {
        let seen: Vec<usize> = (0..self.classes()).filter(|c| !unseen.contains(c)).collect();
        let u = self.subset_miou(unseen)?;
        let s = self.subset_miou(&seen)?;
        let h = if u + s == 0.0 { 0.0 } else { 2.0 * u * s / (u + s) };
        Ok((u, s, h))
    }

    /// Fraction of non-ignored pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::invalid("no pixels accumulated"));
        }
        Ok(self.counts.diag().sum() as f64 / self.total as f64)
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        return Err(Error::invalid("every class has an empty union; mIoU is undefined"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
