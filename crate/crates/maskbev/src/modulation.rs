//! Spatial modulation: turn one decoder layer's predictions into the next
//! layer's additive attention mask.
//!
//! The unmasked region is the union of the thresholded segmentation map and
//! dilated per-object masks for the top-k scored boxes. An empty union
//! falls back to full attention, which is what the first training steps see
//! while every head is still zero-initialized.

use serde::{Deserialize, Serialize};

use crate::scene::{footprint_cells, GridSpec};
use crate::tensor::{Scalar, Tensor};

/// How a predicted box is rasterized into an attention-mask blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMaskMode {
    /// Rotated-rectangle footprint.
    Box,
    /// Circle with the box length as diameter.
    Circle,
    /// Circle with `scale` times the box length as diameter.
    ScaledCircle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModulationConfig {
    pub enabled: bool,
    pub seg_threshold: f64,
    pub top_k: usize,
    pub detect_mask_mode: DetectMaskMode,
    pub scale: f64,
    pub neg_value: f64,
    /// Read "length of the box" as max(l, w) instead of l.
    pub use_max_extent: bool,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig {
            enabled: true,
            seg_threshold: 0.1,
            top_k: 200,
            detect_mask_mode: DetectMaskMode::ScaledCircle,
            scale: 1.3,
            neg_value: 1e9,
            use_max_extent: false,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.seg_threshold > 0.0 && self.seg_threshold < 1.0) {
            return Err(crate::Error::Config(format!(
                "seg_threshold must be in (0,1), got {}",
                self.seg_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(crate::Error::Config("top_k must be >= 1".into()));
        }
        if !(self.scale > 0.0) {
            return Err(crate::Error::Config(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// A box decoded from query predictions, in metric coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBox {
    pub class_id: usize,
    /// Max foreground probability of the query.
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Additive attention mask over the BEV grid: 0 where attention is allowed,
/// `-neg_value` where it is blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub h: usize,
    pub w: usize,
    pub unmasked: Vec<bool>,
    pub neg_value: f64,
}

impl AttentionMask {
    /// Full attention: every cell unmasked, additive values all zero.
    pub fn full(h: usize, w: usize, neg_value: f64) -> Self {
        AttentionMask {
            h,
            w,
            unmasked: vec![true; h * w],
            neg_value,
        }
    }

    pub fn unmasked_count(&self) -> usize {
        self.unmasked.iter().filter(|&&b| b).count()
    }

    pub fn blocked_count(&self) -> usize {
        self.unmasked.len() - self.unmasked_count()
    }

    /// The additive `H*W` vector fed to the attention logits.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let neg = crate::tensor::t::<T>(-self.neg_value);
        let data: Vec<T> = self
            .unmasked
            .iter()
            .map(|&open| if open { T::zero() } else { neg })
            .collect();
        Tensor::from_vec(data, &[self.h * self.w])
    }
}

/// Cells where any class of the composed segmentation map exceeds the
/// threshold (strictly).
pub fn seg_mask<T: Scalar>(semantic_map: &Tensor<T>, threshold: f64) -> Vec<bool> {
    assert_eq!(
        semantic_map.shape().len(),
        3,
        "seg_mask: expected [K,H,W], got {:?}",
        semantic_map.shape()
    );
    let k = semantic_map.shape()[0];
    let hw = semantic_map.shape()[1] * semantic_map.shape()[2];
    let data = semantic_map.data();
    let mut out = vec![false; hw];
    for cell in 0..hw {
        let mut best = f64::NEG_INFINITY;
        for ki in 0..k {
            best = best.max(data[ki * hw + cell].to_f64().unwrap());
        }
        out[cell] = best > threshold;
    }
    out
}

/// Indices of the `k` highest-scoring queries by max real-class softmax
/// probability, descending; ties resolve to the lower index.
pub fn select_topk<T: Scalar>(class_logits: &Tensor<T>, k: usize) -> Vec<usize> {
    assert!(k >= 1, "select_topk: k must be >= 1");
    let scores = foreground_scores(class_logits);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order
}

/// Per-query max softmax probability over the real (non no-object) classes.
pub fn foreground_scores<T: Scalar>(class_logits: &Tensor<T>) -> Vec<f64> {
    assert_eq!(class_logits.shape().len(), 2, "expected [N, K+1] logits");
    let probs = class_logits.detach().softmax(1);
    let (n, kp1) = (probs.shape()[0], probs.shape()[1]);
    assert!(kp1 >= 2, "need at least one real class plus no-object");
    (0..n)
        .map(|q| {
            let row = &probs.data()[q * kp1..(q + 1) * kp1];
            row[..kp1 - 1]
                .iter()
                .map(|v| v.to_f64().unwrap())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Rasterize one decoded box into a boolean grid mask.
///
/// The cell containing the box center is always included; parts outside the
/// grid are clipped.
pub fn rasterize_object_mask(
    bx: &DecodedBox,
    mode: DetectMaskMode,
    scale: f64,
    use_max_extent: bool,
    grid: &GridSpec,
) -> Vec<bool> {
    let mut mask = vec![false; grid.cells()];
    let length = if use_max_extent { bx.l.max(bx.w) } else { bx.l };
    match mode {
        DetectMaskMode::Box => {
            for (row, col) in footprint_cells(grid, bx.x, bx.y, bx.l, bx.w, bx.theta) {
                mask[row * grid.w + col] = true;
            }
        }
        DetectMaskMode::Circle | DetectMaskMode::ScaledCircle => {
            let diameter = if mode == DetectMaskMode::Circle {
                length
            } else {
                scale * length
            };
            let radius = diameter / 2.0;
            let (x0, y0, x1, y1) = grid.bounds();
            let eps = grid.m_per_cell * 1e-6;
            let lo = grid.cell_of((bx.x - radius).max(x0), (bx.y - radius).max(y0));
            let hi = grid.cell_of((bx.x + radius).min(x1 - eps), (bx.y + radius).min(y1 - eps));
            if let (Some((r0, c0)), Some((r1, c1))) = (lo, hi) {
                for row in r0..=r1 {
                    for col in c0..=c1 {
                        let (cx, cy) = grid.cell_center(row, col);
                        if ((cx - bx.x).powi(2) + (cy - bx.y).powi(2)).sqrt() <= radius {
                            mask[row * grid.w + col] = true;
                        }
                    }
                }
            }
        }
    }
    if let Some((row, col)) = grid.cell_of(bx.x, bx.y) {
        mask[row * grid.w + col] = true;
    }
    mask
}

/// Union the segmentation mask with the top-k object masks into an additive
/// attention mask; an empty union falls back to full attention.
pub fn build_attention_mask<T: Scalar>(
    semantic_map: &Tensor<T>,
    class_logits: &Tensor<T>,
    boxes: &[DecodedBox],
    cfg: &ModulationConfig,
    grid: &GridSpec,
) -> AttentionMask {
    let mut unmasked = seg_mask(semantic_map, cfg.seg_threshold);
    for &q in &select_topk(class_logits, cfg.top_k) {
        let obj = rasterize_object_mask(
            &boxes[q],
            cfg.detect_mask_mode,
            cfg.scale,
            cfg.use_max_extent,
            grid,
        );
        for (slot, hit) in unmasked.iter_mut().zip(obj) {
            *slot = *slot || hit;
        }
    }
    if unmasked.iter().all(|&b| !b) {
        return AttentionMask::full(grid.h, grid.w, cfg.neg_value);
    }
    AttentionMask {
        h: grid.h,
        w: grid.w,
        unmasked,
        neg_value: cfg.neg_value,
    }
}
