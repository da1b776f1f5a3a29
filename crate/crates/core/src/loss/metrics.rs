use std::fmt::Write as _;

use crate::error::{Error, Result};

/// IoU of one class; `vacuous` when the class occurs in neither prediction
/// nor groundtruth (reported as 1 by convention).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassIou {
    pub iou: f64,
    pub vacuous: bool,
}

/// Confusion matrix over valid pixels (or points). Rows are groundtruth,
/// columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMetrics {
    num_classes: usize,
    confusion: Vec<u64>,
}

impl SegMetrics {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.confusion[truth * self.num_classes + pred]
    }

    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    /// Counts every position with `mask != 0`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], mask: &[u8]) -> Result<()> {
        if pred.len() != truth.len() || pred.len() != mask.len() {
            return Err(Error::shape(
                "accumulate_confusion",
                format!(
                    "prediction {} / groundtruth {} / mask {} lengths differ",
                    pred.len(),
                    truth.len(),
                    mask.len()
                ),
            ));
        }
        let k = self.num_classes;
        for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
            if m == 0 {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::InvalidArgument(format!(
                    "class id {} outside 0..{k}",
                    p.max(t)
                )));
            }
            self.confusion[t * k + p] += 1;
        }
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &SegMetrics) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge metrics over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class.
    pub fn iou_per_class(&self) -> Vec<ClassIou> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
                let union = tp + fn_ + fp;
                if union == 0 {
                    ClassIou {
                        iou: 1.0,
                        vacuous: true,
                    }
                } else {
                    ClassIou {
                        iou: tp as f64 / union as f64,
                        vacuous: false,
                    }
                }
            })
            .collect()
    }

    /// Mean IoU over non-background classes that are not vacuous; 1 when
    /// every foreground class is vacuous.
    pub fn mean_iou_foreground(&self) -> f64 {
        let ious: Vec<f64> = self
            .iou_per_class()
            .into_iter()
            .skip(1)
            .filter(|c| !c.vacuous)
            .map(|c| c.iou)
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Fraction of counted positions predicted correctly (0 when empty).
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        correct as f64 / total as f64
    }

    fn class_name<'a>(names: &'a [&'a str], c: usize) -> String {
        names.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
    }

    /// Plain-text table: per-class IoU (%) and the foreground average.
    /// Vacuous classes are marked with `*`.
    pub fn table(&self, names: &[&str], domain: &str) -> String {
        let ious = self.iou_per_class();
        let mut header = format!("{:<10}", "IoU (%)");
        let mut row = format!("{domain:<10}");
        for (c, iou) in ious.iter().enumerate() {
            let name = Self::class_name(names, c);
            let width = name.len().max(7);
            let _ = write!(header, " {name:>width$}");
            let cell = format!("{:.1}{}", 100.0 * iou.iou, if iou.vacuous { "*" } else { "" });
            let _ = write!(row, " {cell:>width$}");
        }
        let _ = write!(header, " {:>7}", "Average");
        let _ = write!(row, " {:>7.1}", 100.0 * self.mean_iou_foreground());
        let mut out = format!("{header}\n{row}\n");
        let _ = writeln!(
            out,
            "pixel accuracy {:.2}% over {} {domain}",
            100.0 * self.pixel_accuracy(),
            self.total()
        );
        if ious.iter().any(|c| c.vacuous) {
            out.push_str("* class absent from prediction and groundtruth\n");
        }
        out
    }

    /// Line-oriented `key = value` report.
    pub fn key_values(&self, names: &[&str], domain: &str) -> String {
        let mut out = String::from("# riunet-metrics v1\n");
        let _ = writeln!(out, "domain = {domain}");
        let _ = writeln!(out, "classes = {}", self.num_classes);
        let _ = writeln!(out, "count = {}", self.total());
        for (c, iou) in self.iou_per_class().iter().enumerate() {
            let name = Self::class_name(names, c);
            let _ = writeln!(out, "iou_pct.{name} = {}", 100.0 * iou.iou);
            let _ = writeln!(out, "vacuous.{name} = {}", iou.vacuous);
        }
        let _ = writeln!(out, "mean_iou_foreground_pct = {}", 100.0 * self.mean_iou_foreground());
        let _ = writeln!(out, "pixel_accuracy = {}", self.pixel_accuracy());
        let k = self.num_classes;
        for t in 0..k {
            let row: Vec<String> = (0..k).map(|p| self.count(t, p).to_string()).collect();
            let _ = writeln!(out, "confusion.{t} = {}", row.join(" "));
        }
        out
    }
}
