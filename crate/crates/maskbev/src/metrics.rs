//! Evaluation metrics: per-class IoU of binarized semantic maps and
//! center-distance average precision for detections.

use crate::tensor::{Scalar, Tensor};

/// Intersection/union/GT-cell counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: usize,
    pub union: usize,
    pub gt: usize,
}

impl IouCounts {
    pub fn merge(&mut self, other: &IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.gt += other.gt;
    }

    /// IoU with the empty-union convention: nothing predicted and nothing
    /// to predict counts as a perfect 1.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Per-class confusion counts of a `[K,H,W]` prediction against binary
/// rasters, binarizing the prediction at `threshold`.
pub fn iou_counts<T: Scalar>(pred: &Tensor<T>, gt: &[Vec<u8>], threshold: f64) -> Vec<IouCounts> {
    assert_eq!(pred.shape().len(), 3, "expected [K,H,W] prediction");
    let k = pred.shape()[0];
    let hw = pred.shape()[1] * pred.shape()[2];
    assert_eq!(gt.len(), k, "class count mismatch");
    let mut out = vec![IouCounts::default(); k];
    for (ki, counts) in out.iter_mut().enumerate() {
        assert_eq!(gt[ki].len(), hw, "raster size mismatch");
        for cell in 0..hw {
            let p = pred.data()[ki * hw + cell].to_f64().unwrap() > threshold;
            let g = gt[ki][cell] != 0;
            if p && g {
                counts.intersection += 1;
            }
            if p || g {
                counts.union += 1;
            }
            if g {
                counts.gt += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MiouResult {
    /// IoU per class (empty-union convention applied).
    pub per_class: Vec<f64>,
    /// Mean over classes with at least one GT cell; None if no class has GT.
    pub mean: Option<f64>,
}

/// Mean IoU from per-class counts, averaging only over classes with GT.
pub fn miou_from_counts(counts: &[IouCounts]) -> MiouResult {
    let per_class: Vec<f64> = counts.iter().map(IouCounts::iou).collect();
    let with_gt: Vec<f64> = counts
        .iter()
        .filter(|c| c.gt > 0)
        .map(IouCounts::iou)
        .collect();
    let mean = if with_gt.is_empty() {
        None
    } else {
        Some(with_gt.iter().sum::<f64>() / with_gt.len() as f64)
    };
    MiouResult { per_class, mean }
}

/// Single-instance mIoU of a prediction against rasters.
pub fn miou<T: Scalar>(pred: &Tensor<T>, gt: &[Vec<u8>], threshold: f64) -> MiouResult {
    miou_from_counts(&iou_counts(pred, gt, threshold))
}

/// One pooled detection for AP computation.
#[derive(Debug, Clone, Copy)]
pub struct ApPred {
    pub scene: usize,
    pub class_id: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
}

/// One pooled ground-truth object.
#[derive(Debug, Clone, Copy)]
pub struct ApGt {
    pub scene: usize,
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// `[threshold][class]`; None when the class has no ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub mean: Vec<Option<f64>>,
}

impl ApReport {
    /// Mean AP at a given distance threshold.
    pub fn mean_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .and_then(|i| self.mean[i])
    }
}

/// Center-distance average precision: predictions sorted by descending
/// score greedily claim the nearest unmatched ground truth of their class
/// within the threshold (in their own scene); 101-point interpolation.
pub fn detection_ap(preds: &[ApPred], gts: &[ApGt], thresholds: &[f64], k_det: usize) -> ApReport {
    let mut per_class = Vec::with_capacity(thresholds.len());
    let mut mean = Vec::with_capacity(thresholds.len());
    for &dist in thresholds {
        let mut class_aps = Vec::with_capacity(k_det);
        for class in 0..k_det {
            let gt_class: Vec<&ApGt> = gts.iter().filter(|g| g.class_id == class).collect();
            if gt_class.is_empty() {
                class_aps.push(None);
                continue;
            }
            let mut pred_class: Vec<(usize, &ApPred)> = preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.class_id == class)
                .collect();
            pred_class.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .expect("finite scores")
                    .then(a.0.cmp(&b.0))
            });
            let mut taken = vec![false; gt_class.len()];
            let mut tp = 0usize;
            let mut fp = 0usize;
            // precision at each recall level actually reached
            let mut points: Vec<(f64, f64)> = Vec::with_capacity(pred_class.len());
            for (_, p) in &pred_class {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gt_class.iter().enumerate() {
                    if taken[gi] || g.scene != p.scene {
                        continue;
                    }
                    let d = ((g.x - p.x).powi(2) + (g.y - p.y).powi(2)).sqrt();
                    if d <= dist && best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((gi, d));
                    }
                }
                match best {
                    Some((gi, _)) => {
                        taken[gi] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
                points.push((
                    tp as f64 / gt_class.len() as f64,
                    tp as f64 / (tp + fp) as f64,
                ));
            }
            class_aps.push(Some(interpolated_ap(&points)));
        }
        let with_gt: Vec<f64> = class_aps.iter().flatten().copied().collect();
        mean.push(if with_gt.is_empty() {
            None
        } else {
            Some(with_gt.iter().sum::<f64>() / with_gt.len() as f64)
        });
        per_class.push(class_aps);
    }
    ApReport {
        thresholds: thresholds.to_vec(),
        per_class,
        mean,
    }
}

/// 101-point interpolated area under the precision-recall points.
fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0f64, f64::max);
        total += p;
    }
    total / 101.0
}
