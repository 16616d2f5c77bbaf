//! Confusion-matrix accumulation and segmentation scores.

use std::fmt::Write;

use crate::error::{Error, Result};

/// Cityscapes evaluation classes in train-ID order.
pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// `K x K` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    ignore: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub global_acc: f64,
    pub class_avg: f64,
    pub miou: f64,
    /// `None` for classes with an empty union.
    pub iou: Vec<Option<f64>>,
    /// `None` for classes absent from the ground truth.
    pub accuracy: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self::with_ignore(k, 255)
    }

    pub fn with_ignore(k: usize, ignore: u8) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
            ignore,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, pred: &[u8], labels: &[u8]) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::shape(
                "confusion_update",
                format!("{} predictions vs {} labels", pred.len(), labels.len()),
            ));
        }
        if let Some(&p) = pred.iter().find(|&&p| p as usize >= self.k) {
            return Err(Error::LabelOutOfRange {
                label: p as u32,
                num_classes: self.k,
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l != self.ignore && l as usize >= self.k) {
            return Err(Error::LabelOutOfRange {
                label: l as u32,
                num_classes: self.k,
            });
        }
        for (&p, &l) in pred.iter().zip(labels) {
            if l != self.ignore {
                self.counts[l as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion_merge", format!("{} vs {} classes", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("metrics", "confusion matrix is empty"));
        }
        let k = self.k;
        let diag: Vec<u64> = (0..k).map(|i| self.get(i, i)).collect();
        let row: Vec<u64> = (0..k).map(|i| (0..k).map(|j| self.get(i, j)).sum()).collect();
        let col: Vec<u64> = (0..k).map(|j| (0..k).map(|i| self.get(i, j)).sum()).collect();
        let accuracy: Vec<Option<f64>> = (0..k)
            .map(|i| (row[i] > 0).then(|| diag[i] as f64 / row[i] as f64))
            .collect();
        let iou: Vec<Option<f64>> = (0..k)
            .map(|i| {
                let union = row[i] + col[i] - diag[i];
                (union > 0).then(|| diag[i] as f64 / union as f64)
            })
            .collect();
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Metrics {
            global_acc: diag.iter().sum::<u64>() as f64 / total as f64,
            class_avg: mean(&accuracy),
            miou: mean(&iou),
            iou,
            accuracy,
        })
    }
}

fn class_name(names: &[&str], i: usize) -> String {
    names.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

/// Plain-text table: one IoU row per class, then the three aggregates.
pub fn format_report(m: &Metrics, names: &[&str]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>8}", "class", "IoU");
    for (i, iou) in m.iou.iter().enumerate() {
        let v = iou.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "{:<16} {:>8}", class_name(names, i), v);
    }
    let _ = writeln!(s, "{:<16} {:>8.4}", "global_acc", m.global_acc);
    let _ = writeln!(s, "{:<16} {:>8.4}", "class_avg", m.class_avg);
    let _ = writeln!(s, "{:<16} {:>8.4}", "mIoU", m.miou);
    s
}

/// Machine-readable `key=value` lines.
pub fn format_sidecar(m: &Metrics, names: &[&str]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "global_acc={}", m.global_acc);
    let _ = writeln!(s, "class_avg={}", m.class_avg);
    let _ = writeln!(s, "miou={}", m.miou);
    for (i, iou) in m.iou.iter().enumerate() {
        let key = class_name(names, i).replace(' ', "_");
        let v = iou.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let _ = writeln!(s, "iou.{key}={v}");
    }
    s
}
