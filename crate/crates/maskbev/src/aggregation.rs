//! Scene-level feature aggregation: multi-window window attention over
//! channel sub-features, a parallel ASPP branch with a bottleneck, and
//! split-attention fusion, applied as a residual a configurable number of
//! times.

use serde::{Deserialize, Serialize};

use crate::params::{init, Forward, ParamStore};
use crate::tensor::{Scalar, Tensor, WindowMap};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    /// Number of channel sub-features (M).
    pub sub_features: usize,
    pub heads: usize,
    /// One window size per sub-feature.
    pub window_sizes: Vec<usize>,
    /// Alternate unshifted/shifted windows across loops.
    pub shift: bool,
    pub aspp_dilations: Vec<usize>,
    pub bottleneck_ratio: usize,
    pub loops: usize,
    pub use_mwwa: bool,
    pub use_aspp: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            sub_features: 4,
            heads: 8,
            window_sizes: vec![3, 6, 9, 18],
            shift: true,
            aspp_dilations: vec![1, 2, 4, 8],
            bottleneck_ratio: 4,
            loops: 2,
            use_mwwa: true,
            use_aspp: true,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self, c: usize) -> crate::Result<()> {
        let err = |msg: String| Err(crate::Error::Config(msg));
        if self.sub_features == 0 || self.heads == 0 {
            return err("aggregation needs at least one sub-feature and one head".into());
        }
        if self.heads % self.sub_features != 0 {
            return err(format!(
                "heads ({}) must be divisible by sub-features ({})",
                self.heads, self.sub_features
            ));
        }
        if c % self.sub_features != 0 {
            return err(format!(
                "channels ({c}) must be divisible by sub-features ({})",
                self.sub_features
            ));
        }
        let d = c / self.sub_features;
        if d % (self.heads / self.sub_features) != 0 {
            return err(format!(
                "sub-feature width ({d}) must be divisible by heads per scale ({})",
                self.heads / self.sub_features
            ));
        }
        if self.window_sizes.len() != self.sub_features {
            return err(format!(
                "need one window size per sub-feature: {} sizes for {}",
                self.window_sizes.len(),
                self.sub_features
            ));
        }
        if self.window_sizes.iter().any(|&p| p == 0) {
            return err("window sizes must be positive".into());
        }
        if self.use_aspp && c % self.bottleneck_ratio != 0 {
            return err(format!(
                "channels ({c}) must be divisible by the bottleneck ratio ({})",
                self.bottleneck_ratio
            ));
        }
        Ok(())
    }

    fn heads_per_scale(&self) -> usize {
        self.heads / self.sub_features
    }
}

/// Build the window partition of an `h x w` grid with window size `p`.
///
/// The grid is zero-padded up to multiples of `p` (padded slots map to no
/// cell) and, when `shifted`, cyclically shifted by `p/2` before
/// partitioning. Every original cell lands in exactly one window slot.
pub fn build_window_map(h: usize, w: usize, p: usize, shifted: bool) -> WindowMap {
    assert!(p >= 1, "window size must be >= 1");
    let hp = h.div_ceil(p) * p;
    let wp = w.div_ceil(p) * p;
    let shift = if shifted { p / 2 } else { 0 };
    let (nwh, nww) = (hp / p, wp / p);
    let mut cells = Vec::with_capacity(nwh * nww * p * p);
    for wi in 0..nwh {
        for wj in 0..nww {
            for pi in 0..p {
                for pj in 0..p {
                    let ri = (wi * p + pi + shift) % hp;
                    let ci = (wj * p + pj + shift) % wp;
                    if ri < h && ci < w {
                        cells.push((ri * w + ci) as i64);
                    } else {
                        cells.push(-1);
                    }
                }
            }
        }
    }
    WindowMap::new(nwh * nww, p * p, h * w, cells)
}

/// Additive key mask for a window map: 0 for live slots, `-1e9` for padded
/// slots and externally-invalid cells.
pub fn window_keymask<T: Scalar>(map: &WindowMap, valid: Option<&[bool]>) -> Tensor<T> {
    let neg = T::NEG_MASK;
    let data: Vec<T> = map
        .cells
        .iter()
        .map(|&cell| {
            if cell < 0 {
                neg
            } else if let Some(v) = valid {
                if v[cell as usize] {
                    T::zero()
                } else {
                    neg
                }
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(data, &[map.num_windows, map.window_len])
}

pub fn register_window_attention_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) {
    for name in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.{name}"), init::linear(rng, &[d, d], d), &[d, d]);
    }
}

/// Scaled-dot-product attention inside each window of a `[D,H,W]` map.
/// Padded and invalid cells are blocked as keys; their output slots are
/// dropped when the windows are scattered back.
pub fn window_attention<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    x: &Tensor<T>,
    p: usize,
    shifted: bool,
    heads: usize,
    valid: Option<&[bool]>,
) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "window_attention: expected [D,H,W]");
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let map = build_window_map(h, w, p, shifted);
    let keymask = window_keymask::<T>(&map, valid);

    let gathered = x.window_gather(&map); // [nw, p2, D]
    let (nw, p2) = (map.num_windows, map.window_len);
    let flat = gathered.reshape(&[nw * p2, d]);
    let q = flat.matmul(&fwd.param(&format!("{prefix}.wq"))).reshape(&[nw, p2, d]);
    let k = flat.matmul(&fwd.param(&format!("{prefix}.wk"))).reshape(&[nw, p2, d]);
    let v = flat.matmul(&fwd.param(&format!("{prefix}.wv"))).reshape(&[nw, p2, d]);

    let head_sizes = vec![dh; heads];
    let qs = q.split(2, &head_sizes);
    let ks = k.split(2, &head_sizes);
    let vs = v.split(2, &head_sizes);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let logits = qs[hi]
            .batched_matmul_tb(&ks[hi])
            .mul_scalar(scale)
            .add_keymask(&keymask);
        let attn = logits.softmax(2);
        outs.push(attn.batched_matmul(&vs[hi]));
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    Tensor::concat(&refs, 2).window_scatter(&map, h, w)
}

pub fn register_mwwa_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    cfg: &AggregationConfig,
) {
    let d = c / cfg.sub_features;
    for i in 0..cfg.sub_features {
        register_window_attention_params(store, rng, &format!("{prefix}.sub{i}"), d);
    }
    // Zero-init output projection: the aggregation residual starts as a
    // passthrough.
    store.insert(format!("{prefix}.out_proj"), init::zeros(&[c, c]), &[c, c]);
}

/// Multi-window window attention: split channels into `M` sub-features,
/// run window attention per sub-feature at its own window size, concatenate
/// and project.
pub fn mwwa<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &AggregationConfig,
    shifted: bool,
) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(
        c % cfg.sub_features == 0 && cfg.heads % cfg.sub_features == 0,
        "mwwa: channels {c} do not split into {} sub-features x {} heads",
        cfg.sub_features,
        cfg.heads
    );
    let d = c / cfg.sub_features;
    let subs = x.split(0, &vec![d; cfg.sub_features]);
    let mut outs = Vec::with_capacity(cfg.sub_features);
    for (i, sub) in subs.iter().enumerate() {
        outs.push(window_attention(
            fwd,
            &format!("{prefix}.sub{i}"),
            sub,
            cfg.window_sizes[i],
            shifted,
            cfg.heads_per_scale(),
            None,
        ));
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    let cat = Tensor::concat(&refs, 0).reshape(&[c, h * w]);
    fwd.param(&format!("{prefix}.out_proj"))
        .matmul(&cat)
        .reshape(&[c, h, w])
}

pub fn register_aspp_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    cfg: &AggregationConfig,
) {
    let cr = c / cfg.bottleneck_ratio;
    store.insert(
        format!("{prefix}.reduce.w"),
        init::normal(rng, &[cr, c, 1, 1], (2.0 / c as f64).sqrt()),
        &[cr, c, 1, 1],
    );
    store.insert(format!("{prefix}.reduce.b"), init::zeros(&[cr]), &[cr]);
    for (i, _) in cfg.aspp_dilations.iter().enumerate() {
        store.insert(
            format!("{prefix}.branch{i}.w"),
            init::normal(rng, &[cr, cr, 3, 3], (2.0 / (9 * cr) as f64).sqrt()),
            &[cr, cr, 3, 3],
        );
        store.insert(format!("{prefix}.branch{i}.b"), init::zeros(&[cr]), &[cr]);
    }
    store.insert(
        format!("{prefix}.pool.w"),
        init::linear(rng, &[cr, cr], cr),
        &[cr, cr],
    );
    store.insert(format!("{prefix}.pool.b"), init::zeros(&[cr]), &[cr]);
    let cat = (cfg.aspp_dilations.len() + 1) * cr;
    store.insert(
        format!("{prefix}.fuse.w"),
        init::zeros(&[c, cat, 1, 1]),
        &[c, cat, 1, 1],
    );
    store.insert(format!("{prefix}.fuse.b"), init::zeros(&[c]), &[c]);
}

/// ASPP with a bottleneck: 1x1 reduce, parallel dilated 3x3 branches plus a
/// global-average-pool branch, concatenate, 1x1 back to `C` channels.
pub fn aspp<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &AggregationConfig,
) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(c % cfg.bottleneck_ratio == 0, "aspp: channels {c} not divisible");
    let reduced = x
        .conv2d(
            &fwd.param(&format!("{prefix}.reduce.w")),
            Some(&fwd.param(&format!("{prefix}.reduce.b"))),
            1,
            0,
        )
        .gelu();
    let cr = reduced.shape()[0];
    let mut branches = Vec::new();
    for (i, &dil) in cfg.aspp_dilations.iter().enumerate() {
        branches.push(
            reduced
                .conv2d(
                    &fwd.param(&format!("{prefix}.branch{i}.w")),
                    Some(&fwd.param(&format!("{prefix}.branch{i}.b"))),
                    dil,
                    dil,
                )
                .gelu(),
        );
    }
    // Pool branch: global average, a linear map, broadcast back.
    let pooled = reduced.reshape(&[cr, h * w]).mean_axis(1).reshape(&[1, cr]);
    let pooled = pooled
        .matmul(&fwd.param(&format!("{prefix}.pool.w")))
        .add(&fwd.param(&format!("{prefix}.pool.b")))
        .reshape(&[cr]);
    branches.push(pooled.broadcast_channel(h, w));
    let refs: Vec<&Tensor<T>> = branches.iter().collect();
    Tensor::concat(&refs, 0).conv2d(
        &fwd.param(&format!("{prefix}.fuse.w")),
        Some(&fwd.param(&format!("{prefix}.fuse.b"))),
        1,
        0,
    )
}

pub fn register_fuse_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
) {
    let hidden = (c / 4).max(1);
    store.insert(
        format!("{prefix}.w1"),
        init::linear(rng, &[c, hidden], c),
        &[c, hidden],
    );
    store.insert(format!("{prefix}.b1"), init::zeros(&[hidden]), &[hidden]);
    // Zero-init branch logits: fusion starts as an even (a+b)/2 blend.
    store.insert(format!("{prefix}.w2"), init::zeros(&[hidden, 2 * c]), &[hidden, 2 * c]);
    store.insert(format!("{prefix}.b2"), init::zeros(&[2 * c]), &[2 * c]);
}

/// Lightweight split attention: per-channel softmax gate between two
/// branches, weights summing to one per channel.
pub fn split_attention_fuse<T: Scalar>(
    fwd: &Forward<T>,
    prefix: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Tensor<T> {
    assert_eq!(
        a.shape(),
        b.shape(),
        "split_attention_fuse: branch shapes differ {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let s = a.add(b).reshape(&[c, h * w]).mean_axis(1).reshape(&[1, c]);
    let hidden = s
        .matmul(&fwd.param(&format!("{prefix}.w1")))
        .add(&fwd.param(&format!("{prefix}.b1")))
        .gelu();
    let logits = hidden
        .matmul(&fwd.param(&format!("{prefix}.w2")))
        .add(&fwd.param(&format!("{prefix}.b2")))
        .reshape(&[2, c]);
    let weights = logits.softmax(0);
    let parts = weights.split(0, &[1, 1]);
    let wa = parts[0].reshape(&[c]);
    let wb = parts[1].reshape(&[c]);
    a.mul_channel(&wa).add(&b.mul_channel(&wb))
}

pub fn register_aggregation_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    c: usize,
    cfg: &AggregationConfig,
) {
    for li in 0..cfg.loops {
        let prefix = format!("agg.loop{li}");
        if cfg.use_mwwa {
            register_mwwa_params(store, rng, &format!("{prefix}.mwwa"), c, cfg);
        }
        if cfg.use_aspp {
            register_aspp_params(store, rng, &format!("{prefix}.aspp"), c, cfg);
        }
        if cfg.use_mwwa && cfg.use_aspp {
            register_fuse_params(store, rng, &format!("{prefix}.fuse"), c);
        }
    }
}

/// The full aggregation stack: `loops` rounds of
/// `F <- F + fuse(mwwa(F), aspp(F))`, alternating window shift.
pub fn scene_aggregate<T: Scalar>(
    fwd: &Forward<T>,
    x: &Tensor<T>,
    cfg: &AggregationConfig,
) -> Tensor<T> {
    let mut f = x.clone();
    for li in 0..cfg.loops {
        let prefix = format!("agg.loop{li}");
        let shifted = cfg.shift && li % 2 == 1;
        let branch = match (cfg.use_mwwa, cfg.use_aspp) {
            (true, true) => {
                let a = mwwa(fwd, &format!("{prefix}.mwwa"), &f, cfg, shifted);
                let b = aspp(fwd, &format!("{prefix}.aspp"), &f, cfg);
                split_attention_fuse(fwd, &format!("{prefix}.fuse"), &a, &b)
            }
            (true, false) => mwwa(fwd, &format!("{prefix}.mwwa"), &f, cfg, shifted),
            (false, true) => aspp(fwd, &format!("{prefix}.aspp"), &f, cfg),
            (false, false) => continue,
        };
        f = f.add(&branch);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOpts};
    use indexmap::IndexMap;
    use rand::SeedableRng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn partition_is_a_bijection_on_valid_cells() {
        for h in 3..=20 {
            for w in 3..=20 {
                for p in 1..=6 {
                    for shifted in [false, true] {
                        let map = build_window_map(h, w, p, shifted);
                        let mut seen = vec![0u8; h * w];
                        for &cell in map.cells.iter() {
                            if cell >= 0 {
                                seen[cell as usize] += 1;
                            }
                        }
                        assert!(
                            seen.iter().all(|&c| c == 1),
                            "h={h} w={w} p={p} shifted={shifted}: some cell not visited exactly once"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn six_grid_p3_unshifted_covers_with_four_windows() {
        let map = build_window_map(6, 6, 3, false);
        assert_eq!(map.num_windows, 4);
        assert_eq!(map.window_len, 9);
        assert!(map.cells.iter().all(|&c| c >= 0), "no padding needed");
    }

    #[test]
    fn seven_grid_p3_pads_32_blocked_slots() {
        let map = build_window_map(7, 7, 3, false);
        assert_eq!(map.num_windows, 9);
        let padded = map.cells.iter().filter(|&&c| c < 0).count();
        assert_eq!(padded, 81 - 49);
        let keymask = window_keymask::<f64>(&map, None);
        let blocked = keymask.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(blocked, 32);
    }

    #[test]
    fn gather_scatter_inverts_for_any_shape_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(h, w, p, shifted) in &[(5usize, 7usize, 3usize, false), (8, 8, 4, true), (6, 9, 5, true)] {
            let x = rand_map(&mut rng, &[3, h, w]);
            let map = build_window_map(h, w, p, shifted);
            let back = x.window_gather(&map).window_scatter(&map, h, w);
            assert_eq!(back.data(), x.data(), "h={h} w={w} p={p} shifted={shifted}");
        }
    }

    fn wa_store(d: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_window_attention_params(&mut store, &mut rng, "wa", d);
        store
    }

    #[test]
    fn zeroed_query_key_identity_value_averages_window() {
        // Force uniform attention over valid cells, pass values through.
        let d = 2;
        let mut store = ParamStore::<f64>::new();
        store.insert("wa.wq", vec![0.0; d * d], &[d, d]);
        store.insert("wa.wk", vec![0.0; d * d], &[d, d]);
        let mut eye = vec![0.0; d * d];
        eye[0] = 1.0;
        eye[3] = 1.0;
        store.insert("wa.wv", eye, &[d, d]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, p) = (5usize, 4usize, 3usize);
        let x = rand_map(&mut rng, &[d, h, w]);
        let fwd = Forward::new(&store, false);
        let y = window_attention(&fwd, "wa", &x, p, false, 1, None);

        let map = build_window_map(h, w, p, false);
        for wi in 0..map.num_windows {
            let cells: Vec<usize> = (0..map.window_len)
                .filter_map(|s| {
                    let c = map.cells[wi * map.window_len + s];
                    (c >= 0).then_some(c as usize)
                })
                .collect();
            for ch in 0..d {
                let mean: f64 =
                    cells.iter().map(|&c| x.data()[ch * h * w + c]).sum::<f64>() / cells.len() as f64;
                for &c in &cells {
                    let got = y.data()[ch * h * w + c];
                    assert!(
                        (got - mean).abs() < 1e-9,
                        "cell {c} ch {ch}: {got} vs window mean {mean}"
                    );
                }
            }
        }
    }

    #[test]
    fn window_covering_grid_equals_global_attention() {
        let d = 4;
        let store = wa_store(d, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (5usize, 6usize);
        let x = rand_map(&mut rng, &[d, h, w]);
        let fwd = Forward::new(&store, false);
        let windowed = window_attention(&fwd, "wa", &x, h.max(w), false, 2, None);

        // Global attention reference on the flattened token grid.
        let tokens = x.reshape(&[d, h * w]).transpose(); // [HW, D]
        let q = tokens.matmul(&fwd.param("wa.wq"));
        let k = tokens.matmul(&fwd.param("wa.wk"));
        let v = tokens.matmul(&fwd.param("wa.wv"));
        let dh = d / 2;
        let mut heads = Vec::new();
        for hi in 0..2 {
            let qh = q.split(1, &[dh, dh])[hi].clone();
            let kh = k.split(1, &[dh, dh])[hi].clone();
            let vh = v.split(1, &[dh, dh])[hi].clone();
            let logits = qh.matmul(&kh.transpose()).mul_scalar(1.0 / (dh as f64).sqrt());
            heads.push(logits.softmax(1).matmul(&vh));
        }
        let reference = Tensor::concat(&[&heads[0], &heads[1]], 1)
            .transpose()
            .reshape(&[d, h, w]);
        for (a, b) in windowed.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-6, "windowed {a} vs global {b}");
        }
    }

    #[test]
    fn padded_cells_never_influence_valid_outputs() {
        // Path A: 5x5 input, window 3 pads internally to 6x6.
        // Path B: explicit zero-padded 6x6 input with a validity mask.
        let d = 3;
        let store = wa_store(d, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, p) = (5usize, 5usize, 3usize);
        let x = rand_map(&mut rng, &[d, h, w]);
        let fwd = Forward::new(&store, false);
        let path_a = window_attention(&fwd, "wa", &x, p, true, 1, None);

        let (hp, wp) = (6usize, 6usize);
        let mut padded = vec![0.0; d * hp * wp];
        let mut valid = vec![false; hp * wp];
        for ch in 0..d {
            for r in 0..h {
                for c in 0..w {
                    padded[ch * hp * wp + r * wp + c] = x.data()[ch * h * w + r * w + c];
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                valid[r * wp + c] = true;
            }
        }
        let xb = Tensor::from_vec(padded, &[d, hp, wp]);
        let path_b = window_attention(&fwd, "wa", &xb, p, true, 1, Some(&valid));
        for ch in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let a = path_a.data()[ch * h * w + r * w + c];
                    let b = path_b.data()[ch * hp * wp + r * wp + c];
                    assert_eq!(a, b, "padded path differs at ch {ch} cell ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn window_attention_grad_check() {
        let d = 4;
        let store = wa_store(d, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_map(&mut rng, &[d, 8, 8]);
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs: Vec<(&str, Tensor<f64>)> = vec![("x", x)];
        for n in &names {
            inputs.push((n.as_str(), store.tensor(n)));
        }
        let report = grad_check(
            |xs| {
                let map: IndexMap<String, Tensor<f64>> = names
                    .iter()
                    .cloned()
                    .zip(xs[1..].iter().cloned())
                    .collect();
                let fwd = Forward::from_tensors(map);
                window_attention(&fwd, "wa", &xs[0], 4, true, 2, None).sum()
            },
            &inputs,
            &GradCheckOpts {
                max_per_tensor: Some(24),
                ..Default::default()
            },
        );
        assert!(
            report.passed(),
            "window attention grad check: err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    fn full_cfg() -> AggregationConfig {
        AggregationConfig::default()
    }

    fn agg_store(c: usize, cfg: &AggregationConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_aggregation_params(&mut store, &mut rng, c, cfg);
        store
    }

    #[test]
    fn config_validation_catches_bad_splits() {
        let cfg = full_cfg();
        assert!(cfg.validate(64).is_ok());
        assert!(cfg.validate(60).is_err(), "60 channels do not split 4 ways");
        let bad = AggregationConfig {
            heads: 6,
            ..full_cfg()
        };
        assert!(bad.validate(64).is_err(), "6 heads over 4 sub-features");
    }

    #[test]
    fn mwwa_splits_channels_into_sub_features() {
        // Perturbing channels of one sub-feature leaves other sub-features'
        // pre-projection outputs untouched; with an identity projection the
        // untouched channels pass through.
        let c = 8;
        let cfg = AggregationConfig {
            sub_features: 2,
            heads: 2,
            window_sizes: vec![2, 4],
            loops: 1,
            ..full_cfg()
        };
        let mut store = agg_store(c, &cfg, 13);
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        store.set_data("agg.loop0.mwwa.out_proj", eye);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_map(&mut rng, &[c, 6, 6]);
        let fwd = Forward::new(&store, false);
        let base = mwwa(&fwd, "agg.loop0.mwwa", &x, &cfg, false);

        let mut bumped = x.to_vec();
        for v in bumped.iter_mut().take(4 * 36) {
            *v += 0.5; // perturb sub-feature 0 only
        }
        let x2 = Tensor::from_vec(bumped, &[c, 6, 6]);
        let after = mwwa(&fwd, "agg.loop0.mwwa", &x2, &cfg, false);
        assert_eq!(
            &base.data()[4 * 36..],
            &after.data()[4 * 36..],
            "sub-feature 1 output changed when sub-feature 0 moved"
        );
        assert_ne!(&base.data()[..4 * 36], &after.data()[..4 * 36]);
    }

    #[test]
    fn aspp_shape_and_constant_pool_path() {
        let c = 8;
        let cfg = AggregationConfig {
            bottleneck_ratio: 4,
            aspp_dilations: vec![1, 2],
            loops: 1,
            ..full_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        register_aspp_params(&mut store, &mut rng, "aspp", c, &cfg);
        let x = rand_map(&mut rng, &[c, 6, 6]);
        let fwd = Forward::new(&store, false);
        let y = aspp(&fwd, "aspp", &x, &cfg);
        assert_eq!(y.shape(), &[c, 6, 6]);

        // Identity-initialized pool path: constant input -> the pool branch
        // broadcasts the same constant back.
        let cr = c / 4;
        let mut reduce_w = vec![0.0; cr * c];
        for i in 0..cr {
            reduce_w[i * c + i] = 1.0; // pick off channel i
        }
        store.set_data("aspp.reduce.w", reduce_w);
        let mut pool_eye = vec![0.0; cr * cr];
        for i in 0..cr {
            pool_eye[i * cr + i] = 1.0;
        }
        store.set_data("aspp.pool.w", pool_eye);
        let constant = Tensor::full(&[c, 6, 6], 2.0);
        let fwd = Forward::new(&store, false);
        let reduced = constant
            .conv2d(&fwd.param("aspp.reduce.w"), Some(&fwd.param("aspp.reduce.b")), 1, 0)
            .gelu();
        let pooled = reduced.reshape(&[cr, 36]).mean_axis(1).reshape(&[1, cr]);
        let pool_out = pooled
            .matmul(&fwd.param("aspp.pool.w"))
            .add(&fwd.param("aspp.pool.b"));
        let expect = reduced.data()[0]; // gelu(2.0), constant across cells
        for v in pool_out.data() {
            assert!((v - expect).abs() < 1e-12, "pool path broke constant: {v} vs {expect}");
        }
    }

    #[test]
    fn aspp_branch_impulse_hits_expected_offsets() {
        let c = 4;
        let cfg = AggregationConfig {
            bottleneck_ratio: 4,
            aspp_dilations: vec![2],
            loops: 1,
            ..full_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        register_aspp_params(&mut store, &mut rng, "aspp", c, &cfg);
        // one-hot impulse at the center of a 9x9 grid, channel 0
        let mut data = vec![0.0; c * 81];
        data[4 * 9 + 4] = 1.0;
        let x = Tensor::from_vec(data, &[c, 9, 9]);
        let fwd = Forward::new(&store, false);
        let reduced = x
            .conv2d(&fwd.param("aspp.reduce.w"), Some(&fwd.param("aspp.reduce.b")), 1, 0)
            .gelu();
        let branch = reduced
            .conv2d(&fwd.param("aspp.branch0.w"), Some(&fwd.param("aspp.branch0.b")), 2, 2)
            .gelu();
        let d = 2i64;
        for r in 0..9i64 {
            for cidx in 0..9i64 {
                let hit = branch.data()[(r * 9 + cidx) as usize].abs() > 1e-12;
                let expected = (r - 4).abs() % d == 0
                    && (cidx - 4).abs() % d == 0
                    && (r - 4).abs() <= d
                    && (cidx - 4).abs() <= d;
                assert_eq!(
                    hit, expected,
                    "impulse response mismatch at ({r},{cidx}) for dilation {d}"
                );
            }
        }
    }

    #[test]
    fn split_attention_equal_logits_is_exact_average() {
        let c = 6;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        register_fuse_params(&mut store, &mut rng, "fuse", c);
        let a = rand_map(&mut rng, &[c, 3, 3]);
        let b = rand_map(&mut rng, &[c, 3, 3]);
        let fwd = Forward::new(&store, false);
        // w2 and b2 are zero-initialized: equal branch logits by default.
        let out = split_attention_fuse(&fwd, "fuse", &a, &b);
        for ((o, x), y) in out.data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!(*o, (x + y) / 2.0, "fusion must be the exact average");
        }
    }

    #[test]
    fn split_attention_weights_sum_to_one_and_fix_equal_branches() {
        let c = 6;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        register_fuse_params(&mut store, &mut rng, "fuse", c);
        // randomize the gate so weights are not trivially 0.5
        let w2: Vec<f64> = init::normal(&mut rng, &[(c / 4).max(1) * 2 * c], 0.5);
        store.set_data("fuse.w2", w2);
        let a = rand_map(&mut rng, &[c, 4, 4]);
        let fwd = Forward::new(&store, false);
        let out = split_attention_fuse(&fwd, "fuse", &a, &a);
        for (o, x) in out.data().iter().zip(a.data()) {
            assert!((o - x).abs() < 1e-9, "convex combination of equal branches drifted");
        }
    }

    #[test]
    fn aggregate_zero_loops_is_identity() {
        let cfg = AggregationConfig {
            loops: 0,
            ..full_cfg()
        };
        let store = agg_store(8, &cfg, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rand_map(&mut rng, &[8, 5, 5]);
        let fwd = Forward::new(&store, false);
        let y = scene_aggregate(&fwd, &x, &cfg);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn aggregate_zero_projections_is_exact_passthrough() {
        let cfg = AggregationConfig {
            sub_features: 2,
            heads: 2,
            window_sizes: vec![3, 5],
            aspp_dilations: vec![1, 2],
            loops: 2,
            ..full_cfg()
        };
        let store = agg_store(8, &cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_map(&mut rng, &[8, 6, 6]);
        let fwd = Forward::new(&store, false);
        // mwwa.out_proj and aspp.fuse.w are zero-initialized by default, so
        // both branches emit zero and the residual passes F through exactly.
        let y = scene_aggregate(&fwd, &x, &cfg);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn aggregate_grad_check_small() {
        let cfg = AggregationConfig {
            sub_features: 2,
            heads: 2,
            window_sizes: vec![3, 4],
            aspp_dilations: vec![1, 2],
            loops: 1,
            ..full_cfg()
        };
        let c = 8;
        let mut store = agg_store(c, &cfg, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        // move the zero-initialized projections off zero so gradients flow
        store.set_data("agg.loop0.mwwa.out_proj", init::normal(&mut rng, &[c * c], 0.2));
        store.set_data(
            "agg.loop0.aspp.fuse.w",
            init::normal(&mut rng, &[c * 3 * (c / 4)], 0.2),
        );
        store.set_data("agg.loop0.fuse.w2", init::normal(&mut rng, &[(c / 4) * 2 * c], 0.2));
        let x = rand_map(&mut rng, &[c, 8, 8]);
        let names: Vec<String> = store.names().cloned().collect();
        let mut inputs: Vec<(&str, Tensor<f64>)> = vec![("x", x)];
        for n in &names {
            inputs.push((n.as_str(), store.tensor(n)));
        }
        let report = grad_check(
            |xs| {
                let map: IndexMap<String, Tensor<f64>> = names
                    .iter()
                    .cloned()
                    .zip(xs[1..].iter().cloned())
                    .collect();
                let fwd = Forward::from_tensors(map);
                scene_aggregate(&fwd, &xs[0], &cfg).sum()
            },
            &inputs,
            &GradCheckOpts {
                tol: 1e-4,
                max_per_tensor: Some(10),
                ..Default::default()
            },
        );
        assert!(
            report.passed(),
            "scene_aggregate grad check: err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
