//! Joint detection + segmentation loss.
//!
//! Detection: focal classification over matched/no-object targets plus L1
//! on the 8 regression values of matched pairs. Segmentation: focal loss of
//! the composed semantic map against the ground-truth rasters. The two are
//! combined with the task weights and, under deep supervision, summed over
//! every decoder layer's predictions.

use serde::{Deserialize, Serialize};

use crate::decoder::TaskPrediction;
use crate::matching::{detection_cost, encode_box_targets, hungarian_match};
use crate::scene::Scene;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    /// Detection task weight (alpha).
    pub alpha: f64,
    /// Segmentation task weight (beta).
    pub beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls_weight: 2.0,
            box_weight: 0.25,
            alpha: 3.0,
            beta: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            deep_supervision: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.cls_weight,
            self.box_weight,
            self.alpha,
            self.beta,
            self.focal_gamma,
            self.focal_alpha,
        ];
        if all.iter().any(|w| *w < 0.0) {
            return Err(crate::Error::Config("loss weights must be non-negative".into()));
        }
        if self.focal_gamma < 1.0 {
            return Err(crate::Error::Config(
                "focal_gamma below 1 is not supported by the power rule".into(),
            ));
        }
        Ok(())
    }
}

/// Elementwise binary focal loss, averaged over all elements.
///
/// `p` is clamped into `[1e-6, 1-1e-6]` inside the logs; probabilities may
/// exceed 1 (the composed semantic map is an unnormalized sum), in which
/// case the positive term clamps to zero loss and the negative term keeps
/// pushing down through the `p^gamma` factor.
pub fn focal_loss<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, gamma: f64, alpha: f64) -> Tensor<T> {
    assert_eq!(p.shape(), y.shape(), "focal_loss: probability/target shape mismatch");
    let one_minus_p = p.neg().add_scalar(1.0);
    let one_minus_y = y.neg().add_scalar(1.0);
    let pos = y
        .mul(&one_minus_p.relu().pow_scalar(gamma))
        .mul(&p.clamped_log(1e-6))
        .mul_scalar(-alpha);
    let neg = one_minus_y
        .mul(&p.relu().pow_scalar(gamma))
        .mul(&one_minus_p.clamped_log(1e-6))
        .mul_scalar(-(1.0 - alpha));
    pos.add(&neg).mean()
}

/// Mean absolute error over the 8 regression slots of matched pairs.
pub fn l1_box_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    assert_eq!(pred.shape(), target.shape(), "l1_box_loss: shape mismatch");
    pred.sub(target).abs().mean()
}

/// Scalar component values of one total-loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub boxes: f64,
    pub seg: f64,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.item().to_f64().expect("finite loss")
}

/// Loss of a single layer's predictions against one scene.
fn layer_loss<T: Scalar>(
    pred: &TaskPrediction<T>,
    scene: &Scene,
    cfg: &LossConfig,
) -> (Tensor<T>, LossParts) {
    let n = pred.num_queries();
    let kp1 = pred.class_logits.shape()[1];
    let g = scene.objects.len();

    // Match queries to ground truth on the detached prediction.
    let pairs = if g > 0 {
        let cost = detection_cost(
            &pred.class_logits,
            &pred.box_params,
            &pred.anchors,
            &scene.objects,
            cfg.cls_weight,
            cfg.box_weight,
        );
        hungarian_match(&cost, n, g).pairs
    } else {
        Vec::new()
    };

    // Classification: one-hot over K+1 with no-object for unmatched rows.
    let mut onehot = vec![0.0f64; n * kp1];
    for q in 0..n {
        onehot[q * kp1 + (kp1 - 1)] = 1.0;
    }
    for &(q, gi) in &pairs {
        onehot[q * kp1 + (kp1 - 1)] = 0.0;
        onehot[q * kp1 + scene.objects[gi].c] = 1.0;
    }
    let y_cls = Tensor::<T>::from_f64_slice(&onehot, &[n, kp1]);
    let cls = focal_loss(
        &pred.class_logits.softmax(1),
        &y_cls,
        cfg.focal_gamma,
        cfg.focal_alpha,
    );

    // Box regression on matched pairs only.
    let boxes = if pairs.is_empty() {
        Tensor::<T>::scalar(T::zero())
    } else {
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut targets = Vec::with_capacity(pairs.len() * 8);
        for &(q, gi) in &pairs {
            targets.extend(encode_box_targets(
                &scene.objects[gi],
                &pred.anchors[q * 7..(q + 1) * 7],
            ));
        }
        let target = Tensor::<T>::from_f64_slice(&targets, &[pairs.len(), 8]);
        l1_box_loss(&pred.box_params.gather_rows(&rows), &target)
    };

    // Segmentation: focal loss of the composed map against the rasters.
    let gt = scene.semantic_tensor::<T>();
    assert_eq!(
        gt.shape(),
        pred.semantic_map.shape(),
        "semantic map/raster shape mismatch"
    );
    let seg = focal_loss(&pred.semantic_map, &gt, cfg.focal_gamma, cfg.focal_alpha);

    let detection = cls.mul_scalar(cfg.cls_weight).add(&boxes.mul_scalar(cfg.box_weight));
    let total = detection.mul_scalar(cfg.alpha).add(&seg.mul_scalar(cfg.beta));
    let parts = LossParts {
        total: to_f64(&total),
        cls: to_f64(&cls),
        boxes: to_f64(&boxes),
        seg: to_f64(&seg),
    };
    (total, parts)
}

/// Total loss over decoder layers: every layer under deep supervision,
/// otherwise the last layer only.
pub fn total_loss<T: Scalar>(
    preds: &[TaskPrediction<T>],
    scene: &Scene,
    cfg: &LossConfig,
) -> (Tensor<T>, LossParts) {
    assert!(!preds.is_empty(), "total_loss: no predictions");
    let range: &[TaskPrediction<T>] = if cfg.deep_supervision {
        preds
    } else {
        &preds[preds.len() - 1..]
    };
    let mut acc: Option<Tensor<T>> = None;
    let mut parts = LossParts::default();
    for pred in range {
        let (layer, lp) = layer_loss(pred, scene, cfg);
        parts.total += lp.total;
        parts.cls += lp.cls;
        parts.boxes += lp.boxes;
        parts.seg += lp.seg;
        acc = Some(match acc {
            None => layer,
            Some(a) => a.add(&layer),
        });
    }
    (acc.unwrap(), parts)
}
