//! Pixel classification metrics with road as the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        Metrics::from_confusion(self)
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Self {
        iter.fold(Confusion::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", gt.width, gt.height),
            found: format!("{}x{}", pred.width, pred.height),
        });
    }
    let mut c = Confusion::default();
    for (p, g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Ratios in [0, 1]. An empty denominator counts as a perfect score, so a
/// frame without road that predicts none scores 1 everywhere.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 1.0 } else { num as f64 / den as f64 }
}

impl Metrics {
    pub fn from_confusion(c: &Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            precision,
            recall,
            f1,
        }
    }

    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            iou: sum(|m| m.iou),
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f1: sum(|m| m.f1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

/// Metrics of one configuration over a set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: String,
    pub frames: Vec<FrameMetrics>,
    pub confusion: Confusion,
    /// Over the summed confusion counts.
    pub micro: Metrics,
    /// Mean of per-frame metrics.
    pub macro_avg: Metrics,
}

impl MetricsReport {
    pub fn new(config: impl Into<String>, frames: Vec<FrameMetrics>) -> Self {
        let confusion: Confusion = frames.iter().map(|f| f.confusion).sum();
        let per: Vec<Metrics> = frames.iter().map(|f| f.metrics).collect();
        Self {
            config: config.into(),
            micro: confusion.metrics(),
            macro_avg: Metrics::mean(&per),
            confusion,
            frames,
        }
    }

    pub fn from_masks<'a, I>(config: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
    {
        let frames = pairs
            .into_iter()
            .map(|(id, pred, gt)| {
                let c = confusion(pred, gt)?;
                Ok(FrameMetrics {
                    frame_id: id.to_string(),
                    confusion: c,
                    metrics: c.metrics(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(config, frames))
    }
}

/// Aligned text table, one row per report, values in percent.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.config.len()).max().unwrap_or(0).max(13);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>6} {:>6} {:>6} {:>6}   {:>6} {:>6} {:>6} {:>6}",
        "configuration", "IoU", "PRE", "REC", "F1", "mIoU", "mPRE", "mREC", "mF1"
    );
    for r in reports {
        let (a, b) = (r.micro, r.macro_avg);
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.1} {:>6.1} {:>6.1} {:>6.1}   {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
            r.config,
            a.iou * 100.0,
            a.precision * 100.0,
            a.recall * 100.0,
            a.f1 * 100.0,
            b.iou * 100.0,
            b.precision * 100.0,
            b.recall * 100.0,
            b.f1 * 100.0
        );
    }
    s
}
