//! Confusion-matrix based IoU metrics.

use crate::error::{invalid, Error, Result};
use crate::model::{ModelState, IGNORE_INDEX};
use crate::synthetic::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// `confusion[truth][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Accumulates a `K x K` confusion matrix.
#[derive(Clone, Debug)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(invalid("prediction and label sizes differ"));
        }
        let k = self.counts.len();
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes: k,
                });
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// `IoU_k = TP / (TP + FP + FN)`; classes with an empty union are left
    /// out of the mean.
    pub fn report(self) -> IoUReport {
        let k = self.counts.len();
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|r| self.counts[r][c]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IoUReport {
            per_class,
            miou,
            confusion: self.counts,
        }
    }
}

/// Per-pixel argmax of `[N, K, H, W]` logits; ties go to the lower class.
pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

pub fn iou_from_predictions(truth: &[u8], pred: &[u8], classes: usize) -> Result<IoUReport> {
    let mut c = Confusion::new(classes);
    c.add(truth, pred)?;
    Ok(c.report())
}

/// mIoU of the model's plain forward pass over a dataset (no test-time
/// augmentation).
pub fn evaluate_miou(model: &ModelState<f32>, data: &Dataset) -> Result<IoUReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = model.config.num_classes;
    if let Some(k) = data.num_classes() {
        if k != classes {
            return Err(invalid(format!(
                "model predicts {classes} classes, dataset has {k}"
            )));
        }
    }
    let mut confusion = Confusion::new(classes);
    for chunk in data.items.chunks(16) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let batch = Tensor::stack(&images)?;
        let pred = argmax_classes(&model.forward(&batch)?);
        let plane = chunk[0].label.data.len();
        for (i, item) in chunk.iter().enumerate() {
            confusion.add(&item.label.data, &pred[i * plane..(i + 1) * plane])?;
        }
    }
    Ok(confusion.report())
}
