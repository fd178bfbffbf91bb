//! Central-difference gradient checking, always in 64-bit.
//!
//! [`grad_check`] compares tape gradients against `(f(x+e)-f(x-e))/2e` per
//! input element and reports the worst relative error. [`op_suite`] runs
//! the check over every differentiable op in this module; the CLI
//! `gradcheck` subcommand and the acceptance tests both call it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, WindowMap};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input name, flat element index) of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

pub struct GradCheckOpts {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many elements per input tensor (seeded subsample).
    pub max_per_tensor: Option<usize>,
    pub subsample_seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-5,
            tol: 1e-5,
            max_per_tensor: None,
            subsample_seed: 0,
        }
    }
}

/// Relative error with a floor so near-zero pairs compare absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare analytic and central-difference gradients of a scalar-valued
/// function of the named inputs. `f` must be deterministic; it is invoked
/// once on tape leaves and then twice per checked element on plain tensors.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor<f64>)], opts: &GradCheckOpts) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "grad_check: f must return a scalar");
    // A loss that never touched the tape is constant in every input.
    let analytic: Vec<Vec<f64>> = if loss.requires_grad() {
        let grads = loss.backward();
        leaves.iter().map(|l| grads.get(l)).collect()
    } else {
        leaves.iter().map(|l| vec![0.0; l.numel()]).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.subsample_seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
    };

    for (idx, (name, base)) in inputs.iter().enumerate() {
        let numel = base.numel();
        let picks: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < numel => {
                let mut chosen: Vec<usize> = (0..m).map(|_| rng.gen_range(0..numel)).collect();
                chosen.sort_unstable();
                chosen.dedup();
                chosen
            }
            _ => (0..numel).collect(),
        };
        for &j in &picks {
            let eval = |delta: f64| -> f64 {
                let plain: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, (_, t))| {
                        if k == idx {
                            let mut data = t.to_vec();
                            data[j] += delta;
                            Tensor::from_vec(data, t.shape())
                        } else {
                            t.clone()
                        }
                    })
                    .collect();
                f(&plain).item()
            };
            let numeric = (eval(opts.eps) - eval(-opts.eps)) / (2.0 * opts.eps);
            let err = rel_err(analytic[idx][j], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), j));
            }
        }
    }
    report
}

/// One named op-level gradient check.
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
}

/// Random values bounded away from zero, for kinked ops like relu.
fn rand_tensor_offzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.2..2.0)
            })
            .collect(),
        shape,
    )
}

/// Project the op output through a fixed random map so every output element
/// influences the scalar loss.
fn proj_loss(y: &Tensor<f64>, r: &Tensor<f64>) -> Tensor<f64> {
    y.mul(r).sum()
}

/// Gradient-check every differentiable op against central differences.
pub fn op_suite(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOpts::default();
    let mut out = Vec::new();
    let mut run = |name: &'static str, report: GradCheckReport| {
        out.push(OpCheck { name, report });
    };

    {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        run(
            "add",
            grad_check(|xs| proj_loss(&xs[0].add(&xs[1]), &r), &[("a", a), ("b", b)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        run(
            "add_broadcast_suffix",
            grad_check(|xs| proj_loss(&xs[0].add(&xs[1]), &r), &[("a", a), ("b", b)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[1], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        run(
            "sub_broadcast_scalar",
            grad_check(|xs| proj_loss(&xs[0].sub(&xs[1]), &r), &[("a", a), ("b", b)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        run(
            "mul_broadcast_suffix",
            grad_check(|xs| proj_loss(&xs[0].mul(&xs[1]), &r), &[("a", a), ("b", b)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[6], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        run(
            "scalar_affine",
            grad_check(
                |xs| proj_loss(&xs[0].mul_scalar(1.7).add_scalar(-0.3), &r),
                &[("a", a)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[5], -1.5, 1.5);
        let r = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        run("exp", grad_check(|xs| proj_loss(&xs[0].exp(), &r), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[5], 0.3, 3.0);
        let r = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        run("log", grad_check(|xs| proj_loss(&xs[0].log(), &r), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[5], 0.3, 3.0);
        let r = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        run(
            "clamped_log",
            grad_check(|xs| proj_loss(&xs[0].clamped_log(1e-6), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor_offzero(&mut rng, &[8]);
        let r = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        run("relu", grad_check(|xs| proj_loss(&xs[0].relu(), &r), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[6], 0.2, 2.0);
        let r = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        run(
            "pow_scalar",
            grad_check(|xs| proj_loss(&xs[0].pow_scalar(2.0), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[7], -3.0, 3.0);
        let r = rand_tensor(&mut rng, &[7], -1.0, 1.0);
        run(
            "sigmoid",
            grad_check(|xs| proj_loss(&xs[0].sigmoid(), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[7], -3.0, 3.0);
        let r = rand_tensor(&mut rng, &[7], -1.0, 1.0);
        run("gelu", grad_check(|xs| proj_loss(&xs[0].gelu(), &r), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        run("sum", grad_check(|xs| xs[0].sum(), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        run("mean", grad_check(|xs| xs[0].mean(), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 2], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[2, 2], -1.0, 1.0);
        run(
            "sum_axis",
            grad_check(|xs| proj_loss(&xs[0].sum_axis(1), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 2], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        run(
            "mean_axis",
            grad_check(|xs| proj_loss(&xs[0].mean_axis(0), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        run(
            "reshape",
            grad_check(|xs| proj_loss(&xs[0].reshape(&[3, 4]), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        run(
            "transpose",
            grad_check(|xs| proj_loss(&xs[0].transpose(), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 2], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        run(
            "concat",
            grad_check(
                |xs| proj_loss(&Tensor::concat(&[&xs[0], &xs[1]], 1), &r),
                &[("a", a), ("b", b)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        run(
            "split",
            grad_check(
                |xs| {
                    let parts = xs[0].split(0, &[1, 3]);
                    proj_loss(&parts[1], &r)
                },
                &[("a", a)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        run(
            "matmul_chain",
            grad_check(
                |xs| proj_loss(&xs[0].matmul(&xs[1]).matmul(&xs[2]), &r),
                &[("a", a), ("b", b), ("c", c)],
                &GradCheckOpts {
                    tol: 1e-6,
                    ..Default::default()
                },
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 4, 2], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        run(
            "batched_matmul",
            grad_check(
                |xs| proj_loss(&xs[0].batched_matmul(&xs[1]), &r),
                &[("a", a), ("b", b)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
        run(
            "batched_matmul_tb",
            grad_check(
                |xs| proj_loss(&xs[0].batched_matmul_tb(&xs[1]), &r),
                &[("a", a), ("b", b)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[3, 2, 2], -2.0, 2.0);
        let map = WindowMap::new(2, 3, 4, vec![0, 3, -1, 1, 2, -1]);
        let r = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let map2 = map.clone();
        run(
            "window_gather",
            grad_check(
                move |xs| proj_loss(&xs[0].window_gather(&map2), &r),
                &[("a", a)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 3], -2.0, 2.0);
        let map = WindowMap::new(2, 3, 4, vec![0, 3, -1, 1, 2, -1]);
        let r = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
        run(
            "window_scatter",
            grad_check(
                move |xs| proj_loss(&xs[0].window_scatter(&map, 2, 2), &r),
                &[("a", a)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        run(
            "softmax",
            grad_check(|xs| proj_loss(&xs[0].softmax(1), &r), &[("a", a)], &opts),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[4, 6], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[6], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[6], -0.5, 0.5);
        let r = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        run(
            "layernorm",
            grad_check(
                |xs| proj_loss(&xs[0].layernorm(1, &xs[1], &xs[2], 1e-5), &r),
                &[("x", a), ("gamma", gamma), ("beta", beta)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[8], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        run(
            "layernorm_gelu",
            grad_check(
                |xs| {
                    let ones = Tensor::full(&[8], 1.0);
                    let zeros = Tensor::zeros(&[8]);
                    proj_loss(&xs[0].gelu().layernorm(0, &ones, &zeros, 1e-5), &r)
                },
                &[("x", a)],
                &opts,
            ),
        );
    }
    {
        let x = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let r = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        run(
            "conv2d",
            grad_check(
                |xs| proj_loss(&xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 1), &r),
                &[("x", x), ("w", w), ("b", b)],
                &opts,
            ),
        );
    }
    {
        let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
        let r = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
        run(
            "conv2d_dilated",
            grad_check(
                |xs| proj_loss(&xs[0].conv2d(&xs[1], None, 2, 2), &r),
                &[("x", x), ("w", w)],
                &opts,
            ),
        );
    }
    {
        let x = rand_tensor(&mut rng, &[3, 2, 2], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
        run(
            "mul_channel",
            grad_check(
                |xs| proj_loss(&xs[0].mul_channel(&xs[1]), &r),
                &[("x", x), ("w", w)],
                &opts,
            ),
        );
    }
    {
        let v = rand_tensor(&mut rng, &[4], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[4, 2, 3], -1.0, 1.0);
        run(
            "broadcast_channel",
            grad_check(
                |xs| proj_loss(&xs[0].broadcast_channel(2, 3), &r),
                &[("v", v)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[2, 4], -1.0, 0.0);
        let r = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        run(
            "add_keymask",
            grad_check(
                move |xs| proj_loss(&xs[0].add_keymask(&m), &r),
                &[("a", a)],
                &opts,
            ),
        );
    }
    {
        let a = rand_tensor_offzero(&mut rng, &[9]);
        let r = rand_tensor(&mut rng, &[9], -1.0, 1.0);
        run("abs", grad_check(|xs| proj_loss(&xs[0].abs(), &r), &[("a", a)], &opts));
    }
    {
        let a = rand_tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        run(
            "gather_rows",
            grad_check(
                |xs| proj_loss(&xs[0].gather_rows(&[4, 0, 0, 2]), &r),
                &[("a", a)],
                &opts,
            ),
        );
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_on_ten_seeds() {
        for seed in 0..10 {
            for check in op_suite(seed) {
                assert!(
                    check.report.passed(),
                    "op {} failed grad check at seed {}: max rel err {:.3e} (tol {:.1e}), worst {:?}",
                    check.name,
                    seed,
                    check.report.max_rel_err,
                    check.report.tol,
                    check.report.worst
                );
            }
        }
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0], &[3]);
        let report = grad_check(
            |_| Tensor::scalar(4.2),
            &[("x", x)],
            &GradCheckOpts::default(),
        );
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // exp forward with a deliberately mismatched backward stand-in:
        // pretend d/dx sum(exp(x)) is 1 by checking sum(x) against exp's
        // numeric slope. The harness must flag it.
        let x = Tensor::from_vec(vec![0.5f64, 1.0], &[2]);
        let tape = Tape::new();
        let leaf = tape.leaf(&x);
        let analytic = leaf.sum().backward().get(&leaf);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for j in 0..2 {
            let mut hi = x.to_vec();
            hi[j] += eps;
            let mut lo = x.to_vec();
            lo[j] -= eps;
            let numeric = (Tensor::from_vec(hi, &[2]).exp().sum().item()
                - Tensor::from_vec(lo, &[2]).exp().sum().item())
                / (2.0 * eps);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
        assert!(worst > 0.1, "mismatch should be flagged, got {worst}");
    }
}
