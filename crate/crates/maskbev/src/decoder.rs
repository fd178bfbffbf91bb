//! The unified multi-task transformer decoder.
//!
//! Each layer runs masked cross attention from the queries into the BEV
//! feature map, self attention among queries, and a feed-forward block
//! (pre-norm, residual around each). Four parallel heads then read the
//! query features: class logits, an 8-value box regression, semantic
//! logits, and a mask embedding whose dot product with the aggregated
//! feature map yields per-query binary BEV masks. Per-class semantic maps
//! are the semantic-weighted sum of those masks.
//!
//! Anchors are refined between layers from the detached box predictions,
//! position embeddings are recomputed from the refined anchors, and the
//! next layer's attention mask is built from the detached predictions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::modulation::{build_attention_mask, AttentionMask, DecodedBox, ModulationConfig};
use crate::params::{init, Forward, ParamStore};
use crate::queries::{self, QueryState, ANCHOR_DIM};
use crate::scene::{wrap_angle, GridSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `C`.
    pub ffn_mult: usize,
    /// Use the aggregated map `F_a` (instead of `F`) as the cross-attention
    /// key/value source.
    pub kv_from_aggregated: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            heads: 8,
            ffn_mult: 4,
            kv_from_aggregated: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, c: usize) -> crate::Result<()> {
        if self.layers == 0 {
            return Err(crate::Error::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "channels ({c}) must divide into {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Everything one decoder layer predicts.
pub struct TaskPrediction<T: Scalar> {
    /// `[N, K_det+1]`, last column is no-object.
    pub class_logits: Tensor<T>,
    /// `[N, 8]`: dx, dy, z, log l, log w, log h, sin theta, cos theta.
    pub box_params: Tensor<T>,
    /// `[N, K_seg+1]`, last column is no-object.
    pub semantic_logits: Tensor<T>,
    /// `[N, C]`.
    pub mask_embed: Tensor<T>,
    /// `[N, H, W]` in (0,1).
    pub binary_masks: Tensor<T>,
    /// `[K_seg, H, W]`.
    pub semantic_map: Tensor<T>,
    /// Anchors this layer's box deltas are relative to, row-major `[N, 7]`.
    pub anchors: Vec<f64>,
}

impl<T: Scalar> TaskPrediction<T> {
    pub fn num_queries(&self) -> usize {
        self.class_logits.shape()[0]
    }

    /// Decode every query into a metric box with its foreground score.
    pub fn decode_boxes(&self, grid: &GridSpec) -> Vec<DecodedBox> {
        decode_boxes(&self.class_logits, &self.box_params, &self.anchors, grid)
    }

    /// Build the next layer's attention mask from this prediction.
    pub fn attention_mask(&self, cfg: &ModulationConfig, grid: &GridSpec) -> AttentionMask {
        build_attention_mask(
            &self.semantic_map,
            &self.class_logits,
            &self.decode_boxes(grid),
            cfg,
            grid,
        )
    }
}

/// Decode box parameters against their anchors.
pub fn decode_boxes<T: Scalar>(
    class_logits: &Tensor<T>,
    box_params: &Tensor<T>,
    anchors: &[f64],
    grid: &GridSpec,
) -> Vec<DecodedBox> {
    let n = box_params.shape()[0];
    assert_eq!(box_params.shape()[1], 8, "box params must have 8 values");
    assert_eq!(anchors.len(), n * ANCHOR_DIM);
    let probs = class_logits.detach().softmax(1);
    let kp1 = probs.shape()[1];
    let mut out = Vec::with_capacity(n);
    for q in 0..n {
        let row: Vec<f64> = box_params.data()[q * 8..(q + 1) * 8]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let anchor = &anchors[q * ANCHOR_DIM..(q + 1) * ANCHOR_DIM];
        let (x, y) = grid.clamp_metric(anchor[0] + row[0], anchor[1] + row[1]);
        let prow = &probs.data()[q * kp1..(q + 1) * kp1];
        let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (ci, v) in prow[..kp1 - 1].iter().enumerate() {
            let v = v.to_f64().unwrap();
            if v > best_p {
                best_p = v;
                best_c = ci;
            }
        }
        out.push(DecodedBox {
            class_id: best_c,
            score: best_p,
            x,
            y,
            z: row[2],
            l: decode_size(row[3]),
            w: decode_size(row[4]),
            h: decode_size(row[5]),
            theta: wrap_angle(row[6].atan2(row[7])),
        });
    }
    out
}

fn decode_size(log_size: f64) -> f64 {
    log_size.clamp(-3.0, 3.5).exp()
}

/// Anchor update between layers: move the center by the predicted delta
/// (clamped to the grid), replace the rest from the box prediction.
pub fn refine_anchors(anchors: &[f64], box_params: &Tensor<f64>, grid: &GridSpec) -> Vec<f64>
{
    refine_anchors_t(anchors, box_params, grid)
}

pub fn refine_anchors_t<T: Scalar>(
    anchors: &[f64],
    box_params: &Tensor<T>,
    grid: &GridSpec,
) -> Vec<f64> {
    let n = box_params.shape()[0];
    assert_eq!(anchors.len(), n * ANCHOR_DIM);
    let mut out = Vec::with_capacity(anchors.len());
    for q in 0..n {
        let row: Vec<f64> = box_params.data()[q * 8..(q + 1) * 8]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let anchor = &anchors[q * ANCHOR_DIM..(q + 1) * ANCHOR_DIM];
        let (x, y) = grid.clamp_metric(anchor[0] + row[0], anchor[1] + row[1]);
        out.extend_from_slice(&[
            x,
            y,
            row[2],
            decode_size(row[3]),
            decode_size(row[4]),
            decode_size(row[5]),
            wrap_angle(row[6].atan2(row[7])),
        ]);
    }
    out
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

fn register_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), init::ones(&[c]), &[c]);
    store.insert(format!("{prefix}.beta"), init::zeros(&[c]), &[c]);
}

fn register_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
) {
    register_norm(store, &format!("{prefix}.ln"), c);
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{name}"), init::linear(rng, &[c, c], c), &[c, c]);
    }
}

pub fn register_decoder_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    c: usize,
    k_det: usize,
    k_seg: usize,
    cfg: &DecoderConfig,
) {
    let hidden = cfg.ffn_mult * c;
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        register_attention(store, rng, &format!("{p}.cross"), c);
        register_attention(store, rng, &format!("{p}.self"), c);
        register_norm(store, &format!("{p}.ffn.ln"), c);
        store.insert(
            format!("{p}.ffn.w1"),
            init::linear(rng, &[c, hidden], c),
            &[c, hidden],
        );
        store.insert(format!("{p}.ffn.b1"), init::zeros(&[hidden]), &[hidden]);
        store.insert(
            format!("{p}.ffn.w2"),
            init::linear(rng, &[hidden, c], hidden),
            &[hidden, c],
        );
        store.insert(format!("{p}.ffn.b2"), init::zeros(&[c]), &[c]);
        register_norm(store, &format!("{p}.out_norm"), c);

        // Prediction heads start at zero so step-0 logits are zero and the
        // first attention mask falls back to full attention.
        store.insert(format!("{p}.cls.w"), init::zeros(&[c, k_det + 1]), &[c, k_det + 1]);
        store.insert(format!("{p}.cls.b"), init::zeros(&[k_det + 1]), &[k_det + 1]);
        store.insert(format!("{p}.box.w"), init::zeros(&[c, 8]), &[c, 8]);
        store.insert(format!("{p}.box.b"), init::zeros(&[8]), &[8]);
        store.insert(format!("{p}.sem.w"), init::zeros(&[c, k_seg + 1]), &[c, k_seg + 1]);
        store.insert(format!("{p}.sem.b"), init::zeros(&[k_seg + 1]), &[k_seg + 1]);
        store.insert(format!("{p}.emb.w1"), init::linear(rng, &[c, c], c), &[c, c]);
        store.insert(format!("{p}.emb.b1"), init::zeros(&[c]), &[c]);
        store.insert(format!("{p}.emb.w2"), init::zeros(&[c, c]), &[c, c]);
        store.insert(format!("{p}.emb.b2"), init::zeros(&[c]), &[c]);
    }
}

// ---------------------------------------------------------------------------
// Attention blocks
// ---------------------------------------------------------------------------

fn layernorm_at<T: Scalar>(fwd: &Forward<T>, prefix: &str, x: &Tensor<T>) -> Tensor<T> {
    x.layernorm(
        1,
        &fwd.param(&format!("{prefix}.gamma")),
        &fwd.param(&format!("{prefix}.beta")),
        1e-5,
    )
}

fn multi_head<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
    collect_probs: bool,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let c = q.shape()[1];
    assert!(c % heads == 0, "query width {c} not divisible by {heads} heads");
    let dh = c / heads;
    let sizes = vec![dh; heads];
    let qs = q.split(1, &sizes);
    let ks = k.split(1, &sizes);
    let vs = v.split(1, &sizes);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::new();
    for h in 0..heads {
        let mut logits = qs[h].matmul(&ks[h].transpose()).mul_scalar(scale);
        if let Some(m) = mask {
            logits = logits.add(m);
        }
        let attn = logits.softmax(1);
        if collect_probs {
            probs.push(attn.detach());
        }
        outs.push(attn.matmul(&vs[h]));
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    (Tensor::concat(&refs, 1), probs)
}

fn cross_attention_inner<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    q: &Tensor<T>,
    tokens: &Tensor<T>,
    mask: Option<&AttentionMask>,
    heads: usize,
    collect_probs: bool,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let hw = tokens.shape()[0];
    if let Some(m) = mask {
        assert_eq!(
            m.unmasked.len(),
            hw,
            "attention mask covers {} cells, feature map has {hw}",
            m.unmasked.len()
        );
    }
    let qn = layernorm_at(fwd, &format!("{prefix}.ln"), q);
    let qp = qn.matmul(&fwd.param(&format!("{prefix}.wq")));
    let k = tokens.matmul(&fwd.param(&format!("{prefix}.wk")));
    let v = tokens.matmul(&fwd.param(&format!("{prefix}.wv")));
    let additive = mask.map(|m| m.additive::<T>());
    let (cat, probs) = multi_head(&qp, &k, &v, heads, additive.as_ref(), collect_probs);
    let out = cat.matmul(&fwd.param(&format!("{prefix}.wo"))).add(q);
    (out, probs)
}

/// Masked cross attention from queries `[N,C]` into feature tokens
/// `[HW,C]`, with the additive mask broadcast over queries and a residual
/// back onto the input.
pub fn masked_cross_attention<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    q: &Tensor<T>,
    tokens: &Tensor<T>,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Tensor<T> {
    cross_attention_inner(fwd, prefix, q, tokens, mask, heads, false).0
}

/// Per-head attention probabilities of the masked cross attention, for
/// inspection in tests: `heads` tensors of shape `[N, HW]`.
pub fn cross_attention_probs<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    q: &Tensor<T>,
    tokens: &Tensor<T>,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Vec<Tensor<T>> {
    cross_attention_inner(fwd, prefix, q, tokens, mask, heads, true).1
}

/// Standard multi-head self attention over the queries with a residual.
pub fn query_self_attention<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    q: &Tensor<T>,
    heads: usize,
) -> Tensor<T> {
    let qn = layernorm_at(fwd, &format!("{prefix}.ln"), q);
    let qp = qn.matmul(&fwd.param(&format!("{prefix}.wq")));
    let k = qn.matmul(&fwd.param(&format!("{prefix}.wk")));
    let v = qn.matmul(&fwd.param(&format!("{prefix}.wv")));
    let (cat, _) = multi_head(&qp, &k, &v, heads, None, false);
    cat.matmul(&fwd.param(&format!("{prefix}.wo"))).add(q)
}

fn ffn_block<T: Scalar>(fwd: &Forward<T>, prefix: &str, q: &Tensor<T>) -> Tensor<T> {
    let qn = layernorm_at(fwd, &format!("{prefix}.ln"), q);
    qn.matmul(&fwd.param(&format!("{prefix}.w1")))
        .add(&fwd.param(&format!("{prefix}.b1")))
        .gelu()
        .matmul(&fwd.param(&format!("{prefix}.w2")))
        .add(&fwd.param(&format!("{prefix}.b2")))
        .add(q)
}

/// The four parallel prediction heads of one layer.
pub fn ffn_heads<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let linear = |head: &str| {
        x.matmul(&fwd.param(&format!("{prefix}.{head}.w")))
            .add(&fwd.param(&format!("{prefix}.{head}.b")))
    };
    let class_logits = linear("cls");
    let box_params = linear("box");
    let semantic_logits = linear("sem");
    let mask_embed = x
        .matmul(&fwd.param(&format!("{prefix}.emb.w1")))
        .add(&fwd.param(&format!("{prefix}.emb.b1")))
        .gelu()
        .matmul(&fwd.param(&format!("{prefix}.emb.w2")))
        .add(&fwd.param(&format!("{prefix}.emb.b2")));
    (class_logits, box_params, semantic_logits, mask_embed)
}

/// Per-query binary BEV masks: sigmoid of the mask embedding dotted with
/// the aggregated features at every cell.
pub fn mask_head<T: Scalar>(mask_embed: &Tensor<T>, f_a: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (f_a.shape()[0], f_a.shape()[1], f_a.shape()[2]);
    assert_eq!(
        mask_embed.shape()[1],
        c,
        "mask_head: embedding width {} vs feature channels {c}",
        mask_embed.shape()[1]
    );
    let n = mask_embed.shape()[0];
    mask_embed
        .matmul(&f_a.reshape(&[c, h * w]))
        .sigmoid()
        .reshape(&[n, h, w])
}

/// Semantic composition: per-class map as the softmax-weighted sum of the
/// per-query masks, dropping the no-object column.
pub fn compose_semantic<T: Scalar>(semantic_logits: &Tensor<T>, masks: &Tensor<T>) -> Tensor<T> {
    let (n, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    assert_eq!(semantic_logits.shape()[0], n, "one semantic row per query");
    let kp1 = semantic_logits.shape()[1];
    let k_seg = kp1 - 1;
    let probs = semantic_logits.softmax(1);
    let real = &probs.split(1, &[k_seg, 1])[0]; // [N, K_seg]
    real.transpose()
        .matmul(&masks.reshape(&[n, h * w]))
        .reshape(&[k_seg, h, w])
}

// ---------------------------------------------------------------------------
// Full decoder
// ---------------------------------------------------------------------------

/// Run `L` decoder layers and return every layer's prediction for deep
/// supervision. Layer 0 attends everywhere; each later layer consumes the
/// attention mask built from the previous layer's detached predictions.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Scalar>(
    fwd: &Forward<T>,
    f: &Tensor<T>,
    f_a: &Tensor<T>,
    query_state: &QueryState,
    grid: &GridSpec,
    cfg: &DecoderConfig,
    modulation: &ModulationConfig,
) -> Vec<TaskPrediction<T>> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let kv = if cfg.kv_from_aggregated { f_a } else { f };
    let tokens = kv.reshape(&[c, h * w]).transpose();
    let mut x = fwd.param("queries.content");
    assert_eq!(
        x.shape(),
        &[query_state.n, c],
        "content embeddings do not match the query set"
    );
    let mut anchors = query_state.anchors.clone();
    let mut mask: Option<AttentionMask> = None;

    let mut preds = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        let pos = queries::encode_anchors(fwd, &anchors, c);
        let q = x.add(&pos);
        let q = masked_cross_attention(fwd, &format!("{p}.cross"), &q, &tokens, mask.as_ref(), cfg.heads);
        let q = query_self_attention(fwd, &format!("{p}.self"), &q, cfg.heads);
        x = ffn_block(fwd, &format!("{p}.ffn"), &q);

        let normed = layernorm_at(fwd, &format!("{p}.out_norm"), &x);
        let (class_logits, box_params, semantic_logits, mask_embed) = ffn_heads(fwd, &p, &normed);
        let binary_masks = mask_head(&mask_embed, f_a);
        let semantic_map = compose_semantic(&semantic_logits, &binary_masks);
        let pred = TaskPrediction {
            class_logits,
            box_params,
            semantic_logits,
            mask_embed,
            binary_masks,
            semantic_map,
            anchors: anchors.clone(),
        };
        if l + 1 < cfg.layers {
            // Refinement and mask construction are detached: thresholds and
            // top-k are not differentiable, and earlier layers learn through
            // their own deep-supervision terms.
            anchors = refine_anchors_t(&anchors, &pred.box_params.detach(), grid);
            mask = modulation
                .enabled
                .then(|| pred.attention_mask(modulation, grid));
        }
        preds.push(pred);
    }
    preds
}
