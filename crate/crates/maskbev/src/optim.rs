//! AdamW with decoupled weight decay, global gradient-norm clipping and a
//! linear-warmup/cosine-decay schedule.

use indexmap::IndexMap;

use crate::params::ParamStore;

pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    step: usize,
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
}

/// Name suffixes exempt from weight decay: biases, norm affines, and
/// non-learned state like the stored anchors.
fn no_decay(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    matches!(last, "b" | "b1" | "b2" | "bias" | "gamma" | "beta" | "anchors")
}

impl AdamW {
    pub fn new(weight_decay: f64, grad_clip: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
            grad_clip: grad_clip as f32,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over every parameter, in store order.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &IndexMap<String, Vec<f32>>,
        lr: f64,
    ) {
        self.step += 1;
        let lr = lr as f32;

        let mut norm_sq = 0.0f32;
        for g in grads.values() {
            for &x in g {
                norm_sq += x * x;
            }
        }
        let norm = norm_sq.sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = if no_decay(&name) { 0.0 } else { self.weight_decay };
            let mut data = store.get(&name).data.as_ref().clone();
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * data[i]);
            }
            store.set_data(&name, data);
        }
    }
}

/// Linear warmup to the peak rate, then cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, peak_lr: f64, warmup_frac: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let warmup = (total * warmup_frac).ceil().max(1.0);
    let s = step as f64;
    if s < warmup {
        peak_lr * (s + 1.0) / warmup
    } else {
        let progress = (s - warmup) / (total - warmup).max(1.0);
        peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("layer.w", vec![value; 4], &[2, 2]);
        s.insert("layer.b", vec![value; 2], &[2]);
        s
    }

    fn grads_of(store: &ParamStore<f32>, value: f32) -> IndexMap<String, Vec<f32>> {
        store
            .iter()
            .map(|(n, p)| (n.clone(), vec![value; p.data.len()]))
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let mut store = store_with(0.753);
        let before: Vec<Vec<f32>> = store.iter().map(|(_, p)| p.data.as_ref().clone()).collect();
        let grads = grads_of(&store, 1.3);
        let mut opt = AdamW::new(0.01, 10.0);
        opt.step(&mut store, &grads, 0.0);
        let after: Vec<Vec<f32>> = store.iter().map(|(_, p)| p.data.as_ref().clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn gradient_descent_direction() {
        let mut store = store_with(1.0);
        let grads = grads_of(&store, 1.0);
        let mut opt = AdamW::new(0.0, 0.0);
        opt.step(&mut store, &grads, 0.1);
        for (_, p) in store.iter() {
            for &v in p.data.iter() {
                assert!(v < 1.0, "positive gradient must decrease the parameter");
            }
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut store = store_with(0.0);
        let grads = grads_of(&store, 1e6);
        let mut opt = AdamW::new(0.0, 1.0);
        opt.step(&mut store, &grads, 0.001);
        for (_, p) in store.iter() {
            for &v in p.data.iter() {
                assert!(v.abs() < 0.01, "clipped step exploded: {v}");
            }
        }
    }

    #[test]
    fn biases_and_anchors_skip_weight_decay() {
        assert!(no_decay("decoder.layer0.ffn.b1"));
        assert!(no_decay("encoder.block0.beta"));
        assert!(no_decay("queries.anchors"));
        assert!(!no_decay("decoder.layer0.cross.wq"));
        assert!(!no_decay("queries.content"));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let peak = 2e-3;
        let lr0 = lr_schedule(0, 100, peak, 0.05);
        let lr_peak = lr_schedule(5, 100, peak, 0.05);
        let lr_mid = lr_schedule(52, 100, peak, 0.05);
        let lr_end = lr_schedule(99, 100, peak, 0.05);
        assert!(lr0 < lr_peak);
        assert!((lr_peak - peak).abs() < 1e-9);
        assert!(lr_mid < peak && lr_mid > lr_end);
        assert!(lr_end < 0.01 * peak);
    }
}
