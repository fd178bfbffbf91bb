//! Query construction: anchors, sinusoidal positional encoding and the
//! projection MLP that turns an encoded anchor into a position embedding.
//!
//! Each query owns a 7-scalar anchor (x, y, z, l, w, h, theta). The anchor
//! scalars are encoded independently with a DETR-style sinusoid, the seven
//! encodings are concatenated and a two-layer MLP maps them to the query
//! width `C`. Position embeddings are a pure function of the anchors and
//! the MLP parameters, so they are recomputed whenever anchors move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{init, Forward, ParamStore};
use crate::scene::GridSpec;
use crate::tensor::{Scalar, Tensor};

/// Default sinusoid temperature.
pub const PE_TEMPERATURE: f64 = 10000.0;

/// Anchor scalars per query.
pub const ANCHOR_DIM: usize = 7;

/// Class-agnostic anchor box size (l, w, h): the across-class median of the
/// generator's size ranges.
pub const ANCHOR_SIZE: (f64, f64, f64) = (2.25, 0.7, 1.7);

/// Sinusoid width per anchor scalar for a query width of `c`.
pub fn pe_dim(c: usize) -> usize {
    2 * (c / ANCHOR_DIM).max(1)
}

/// DETR-style sinusoidal encoding of one scalar:
/// `[sin(x/T^(2i/d)), cos(x/T^(2i/d))]` for `i = 0..d/2`.
pub fn sinusoidal_pe(x: f64, d_pe: usize, temperature: f64) -> Vec<f64> {
    assert!(
        d_pe >= 2 && d_pe % 2 == 0,
        "sinusoidal_pe: d_pe must be even and >= 2, got {d_pe}"
    );
    let mut out = Vec::with_capacity(d_pe);
    for i in 0..d_pe / 2 {
        let freq = temperature.powf(2.0 * i as f64 / d_pe as f64);
        out.push((x / freq).sin());
        out.push((x / freq).cos());
    }
    out
}

/// Concatenated per-scalar encodings of a full anchor.
pub fn encode_anchor_scalars(anchor: &[f64], d_pe: usize, temperature: f64) -> Vec<f64> {
    assert_eq!(anchor.len(), ANCHOR_DIM, "anchor must have 7 scalars");
    let mut out = Vec::with_capacity(ANCHOR_DIM * d_pe);
    for &v in anchor {
        out.extend(sinusoidal_pe(v, d_pe, temperature));
    }
    out
}

/// Anchor state of the query set; content embeddings and the PE MLP live in
/// the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    /// Row-major `[N, 7]`.
    pub anchors: Vec<f64>,
    pub n: usize,
}

impl QueryState {
    pub fn anchor(&self, q: usize) -> &[f64] {
        &self.anchors[q * ANCHOR_DIM..(q + 1) * ANCHOR_DIM]
    }
}

/// Spread `n` anchors over the grid: jittered lattice centers, median box
/// sizes, zero height and yaw.
pub fn init_queries(n: usize, grid: &GridSpec, seed: u64) -> QueryState {
    assert!(n >= 1, "init_queries: need at least one query");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0, x1, y1) = grid.bounds();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let step_x = (x1 - x0) / cols as f64;
    let step_y = (y1 - y0) / rows as f64;
    let mut anchors = Vec::with_capacity(n * ANCHOR_DIM);
    for q in 0..n {
        let (r, c) = (q / cols, q % cols);
        let cx = x0 + (c as f64 + 0.5) * step_x + rng.gen_range(-0.3..0.3) * step_x;
        let cy = y0 + (r as f64 + 0.5) * step_y + rng.gen_range(-0.3..0.3) * step_y;
        let (cx, cy) = grid.clamp_metric(cx, cy);
        anchors.extend_from_slice(&[cx, cy, 0.0, ANCHOR_SIZE.0, ANCHOR_SIZE.1, ANCHOR_SIZE.2, 0.0]);
    }
    QueryState { anchors, n }
}

/// Register the PE MLP and the learnable content embeddings.
pub fn register_query_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    n: usize,
    c: usize,
) {
    let d_in = ANCHOR_DIM * pe_dim(c);
    store.insert("queries.pe_mlp.w1", init::linear(rng, &[d_in, c], d_in), &[d_in, c]);
    store.insert("queries.pe_mlp.b1", init::zeros(&[c]), &[c]);
    store.insert("queries.pe_mlp.w2", init::linear(rng, &[c, c], c), &[c, c]);
    store.insert("queries.pe_mlp.b2", init::zeros(&[c]), &[c]);
    store.insert("queries.content", init::normal(rng, &[n, c], 0.02), &[n, c]);
}

/// Position embeddings `P_q` for a set of anchors: `[N, C]`, differentiable
/// with respect to the MLP parameters only.
pub fn encode_anchors<T: Scalar>(fwd: &Forward<T>, anchors: &[f64], c: usize) -> Tensor<T> {
    assert_eq!(anchors.len() % ANCHOR_DIM, 0, "anchors must be N x 7");
    let n = anchors.len() / ANCHOR_DIM;
    let d_pe = pe_dim(c);
    let d_in = ANCHOR_DIM * d_pe;
    let mut pe = Vec::with_capacity(n * d_in);
    for q in 0..n {
        pe.extend(encode_anchor_scalars(
            &anchors[q * ANCHOR_DIM..(q + 1) * ANCHOR_DIM],
            d_pe,
            PE_TEMPERATURE,
        ));
    }
    let pe = Tensor::<T>::from_f64_slice(&pe, &[n, d_in]);
    let w1 = fwd.param("queries.pe_mlp.w1");
    assert_eq!(
        w1.shape()[0],
        d_in,
        "encode_anchors: MLP expects input width {}, anchors encode to {}",
        w1.shape()[0],
        d_in
    );
    let h = pe.matmul(&w1).add(&fwd.param("queries.pe_mlp.b1")).gelu();
    h.matmul(&fwd.param("queries.pe_mlp.w2")).add(&fwd.param("queries.pe_mlp.b2"))
}
