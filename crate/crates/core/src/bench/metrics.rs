//! Confusion matrices and the segmentation metrics derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::LabelMap;

/// `n x n` pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix rows must be square".into()));
        }
        Ok(ConfusionMatrix {
            n,
            counts: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.get(i, i)
    }

    pub fn fp(&self, i: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, i)).sum::<u64>() - self.tp(i)
    }

    pub fn fn_(&self, i: usize) -> u64 {
        (0..self.n).map(|c| self.get(i, c)).sum::<u64>() - self.tp(i)
    }

    /// Adds every pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: i64) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        gt.validate(self.n, ignore)?;
        let w = gt.width();
        for (i, (&p, &t)) in pred.values().iter().zip(gt.values()).enumerate() {
            if t == ignore {
                continue;
            }
            if p < 0 || p as usize >= self.n {
                return Err(Error::LabelOutOfRange {
                    row: i / w,
                    col: i % w,
                    value: p,
                    classes: self.n,
                });
            }
            self.counts[t as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!(
                "cannot merge {0}x{0} and {1}x{1} confusion matrices",
                self.n, other.n
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate_confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    n: usize,
    ignore: i64,
    mut acc: ConfusionMatrix,
) -> Result<ConfusionMatrix> {
    if acc.n() != n {
        return Err(Error::Shape(format!("accumulator has {} classes, expected {n}", acc.n())));
    }
    acc.accumulate(pred, gt, ignore)?;
    Ok(acc)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class IoU; `None` where the class is absent from both ground truth
/// and prediction.
pub fn per_class_iou(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.n())
        .map(|i| ratio(cm.tp(i), cm.tp(i) + cm.fp(i) + cm.fn_(i)))
        .collect()
}

/// Per-class accuracy (recall); `None` where the class never occurs in the
/// ground truth.
pub fn per_class_acc(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.n()).map(|i| ratio(cm.tp(i), cm.tp(i) + cm.fn_(i))).collect()
}

/// Mean over defined classes, with the per-class values.
pub fn miou(cm: &ConfusionMatrix) -> (Option<f64>, Vec<Option<f64>>) {
    let per = per_class_iou(cm);
    (mean_defined(&per), per)
}

/// Frequency-weighted IoU; `None` when no pixel was evaluated.
pub fn fwiou(cm: &ConfusionMatrix) -> Option<f64> {
    let total: u64 = (0..cm.n()).map(|i| cm.tp(i) + cm.fn_(i)).sum();
    if total == 0 {
        return None;
    }
    let iou = per_class_iou(cm);
    Some(
        (0..cm.n())
            .map(|i| {
                let freq = (cm.tp(i) + cm.fn_(i)) as f64 / total as f64;
                freq * iou[i].unwrap_or(0.0)
            })
            .sum(),
    )
}

pub fn macc(cm: &ConfusionMatrix) -> Option<f64> {
    mean_defined(&per_class_acc(cm))
}

/// Metrics in `[0, 1]`; `None` (JSON `null`) marks an undefined value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub fwiou: Option<f64>,
    pub macc: Option<f64>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let (m, per) = miou(cm);
        MetricsReport {
            per_class_iou: per,
            per_class_acc: per_class_acc(cm),
            miou: m,
            fwiou: fwiou(cm),
            macc: macc(cm),
        }
    }
}
