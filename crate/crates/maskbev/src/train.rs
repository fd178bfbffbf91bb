//! The training loop: shuffled mini-batches with per-item parallel
//! forward/backward, deterministic gradient reduction, AdamW updates,
//! per-epoch validation metrics, CSV logging and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{total_loss, LossParts};
use crate::model::{forward_scene, init_params};
use crate::optim::{lr_schedule, AdamW};
use crate::params::{Forward, ParamStore};
use crate::scene::{load_dataset, render_observation, Scene};
use crate::util;
use crate::util::par;

pub const METRICS_HEADER: &str = "epoch,step,l_total,l_cls,l_box,l_seg,miou,ap@1,ap@2";

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Global optimizer step count at the end of the epoch.
    pub step: usize,
    pub l_total: f64,
    pub l_cls: f64,
    pub l_box: f64,
    pub l_seg: f64,
    pub miou: f64,
    pub ap1: f64,
    pub ap2: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    /// Mean loss of the very first batch, before any update.
    pub initial_loss: f64,
    /// Mean batch loss over the final epoch.
    pub final_epoch_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub val_report: EvalReport,
}

/// Observation noise seed for a training item.
fn train_obs_seed(scene_seed: u64, epoch: usize) -> u64 {
    util::mix(scene_seed, 0x7E41_u64 ^ (epoch as u64).wrapping_mul(0xA24BAED4963EE407))
}

/// One item's backward results: loss components plus per-parameter grads.
type ItemResult = Result<(LossParts, IndexMap<String, Vec<f32>>)>;

fn run_item(store: &ParamStore<f32>, cfg: &RunConfig, scene: &Scene, epoch: usize) -> ItemResult {
    let obs = render_observation::<f32>(
        scene,
        &cfg.generator,
        cfg.train.noise_sigma,
        train_obs_seed(scene.seed, epoch),
    );
    let fwd = Forward::new(store, true);
    let preds = forward_scene(&fwd, &obs.raster, cfg)?;
    let (loss, parts) = total_loss(&preds, scene, &cfg.loss);
    let grads = loss.backward();
    Ok((parts, fwd.param_grads(&grads)))
}

/// Train from scratch on the configured dataset. Deterministic for a fixed
/// `(config, dataset)`: reruns produce byte-identical checkpoints.
pub fn train(cfg: &RunConfig, out_dir: &Path, verbose: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let train_scenes = load_dataset(Path::new(&cfg.dataset.train_dir))?;
    let val_scenes = load_dataset(Path::new(&cfg.dataset.val_dir))?;
    if train_scenes.is_empty() {
        return Err(Error::Dataset {
            path: cfg.dataset.train_dir.clone(),
            reason: "no training scenes".into(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut store = init_params::<f32>(cfg);
    let mut opt = AdamW::new(cfg.train.weight_decay, cfg.train.grad_clip);
    let batches_per_epoch = train_scenes.len().div_ceil(cfg.train.batch_size);
    let total_steps = cfg.train.epochs * batches_per_epoch;

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut epochs = Vec::new();
    let mut initial_loss = None;
    let mut final_epoch_loss = 0.0;
    let mut global_step = 0usize;

    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(util::mix(
            cfg.train.seed,
            0x53485546 ^ (epoch as u64).wrapping_mul(0x2545F4914F6CDD1D),
        ));
        order.shuffle(&mut rng);

        let mut epoch_parts = LossParts::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.train.batch_size) {
            let lr = lr_schedule(global_step, total_steps, cfg.train.lr, cfg.train.warmup_frac);
            let results = par::map_indexed(batch.len(), |bi| {
                run_item(&store, cfg, &train_scenes[batch[bi]], epoch)
            });

            let mut batch_parts = LossParts::default();
            let mut summed: Option<IndexMap<String, Vec<f32>>> = None;
            for r in results {
                let (parts, grads) = r?;
                batch_parts.total += parts.total;
                batch_parts.cls += parts.cls;
                batch_parts.boxes += parts.boxes;
                batch_parts.seg += parts.seg;
                summed = Some(match summed {
                    None => grads,
                    Some(mut acc) => {
                        for (name, g) in grads {
                            let slot = acc.get_mut(&name).expect("aligned grad maps");
                            for (a, b) in slot.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        acc
                    }
                });
            }
            let scale = 1.0 / batch.len() as f32;
            let mut grads = summed.expect("non-empty batch");
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            batch_parts.total *= inv;
            batch_parts.cls *= inv;
            batch_parts.boxes *= inv;
            batch_parts.seg *= inv;

            if !batch_parts.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    batch_seed: train_scenes[batch[0]].seed,
                });
            }
            if initial_loss.is_none() {
                initial_loss = Some(batch_parts.total);
            }
            opt.step(&mut store, &grads, lr);
            global_step += 1;
            batches += 1;
            epoch_parts.total += batch_parts.total;
            epoch_parts.cls += batch_parts.cls;
            epoch_parts.boxes += batch_parts.boxes;
            epoch_parts.seg += batch_parts.seg;
        }

        let inv = 1.0 / batches as f64;
        epoch_parts.total *= inv;
        epoch_parts.cls *= inv;
        epoch_parts.boxes *= inv;
        epoch_parts.seg *= inv;
        final_epoch_loss = epoch_parts.total;

        let report = evaluate(&store, cfg, &val_scenes)?;
        let stats = EpochStats {
            epoch,
            step: global_step,
            l_total: epoch_parts.total,
            l_cls: epoch_parts.cls,
            l_box: epoch_parts.boxes,
            l_seg: epoch_parts.seg,
            miou: report.miou_or_zero(),
            ap1: report.ap_at(1.0),
            ap2: report.ap_at(2.0),
        };
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            stats.epoch,
            stats.step,
            stats.l_total,
            stats.l_cls,
            stats.l_box,
            stats.l_seg,
            stats.miou,
            stats.ap1,
            stats.ap2
        ));
        if verbose {
            println!(
                "epoch {:>3} | loss {:.4} (cls {:.4} box {:.4} seg {:.4}) | val mIoU {:.4} AP@2m {:.4}",
                stats.epoch, stats.l_total, stats.l_cls, stats.l_box, stats.l_seg, stats.miou, stats.ap2
            );
        }
        epochs.push(stats);
        checkpoint::save(&store, &out_dir.join(format!("checkpoint_epoch{epoch:03}.ckpt")))?;

        if epoch == cfg.train.epochs - 1 {
            let metrics_csv = out_dir.join("metrics.csv");
            fs::write(&metrics_csv, &csv).map_err(|e| Error::io(metrics_csv.display().to_string(), e))?;
            let final_ckpt = out_dir.join("model.ckpt");
            checkpoint::save(&store, &final_ckpt)?;
            return Ok(TrainReport {
                initial_loss: initial_loss.unwrap(),
                final_epoch_loss,
                epochs,
                checkpoint: final_ckpt,
                metrics_csv,
                val_report: report,
            });
        }
    }
    unreachable!("epoch loop returns on its final iteration")
}

/// End-to-end gradient check of `total_loss` through the whole model at the
/// small grad-check configuration, in 64-bit.
pub fn end_to_end_grad_check(max_per_tensor: usize) -> crate::tensor::gradcheck::GradCheckReport {
    use crate::tensor::gradcheck::{grad_check, GradCheckOpts};
    use crate::tensor::Tensor;

    let cfg = crate::model::grad_check_config();
    let store = init_params::<f64>(&cfg);
    let scene = crate::scene::generate_scene(5, &cfg.generator).expect("valid generator");
    let obs = render_observation::<f64>(&scene, &cfg.generator, 0.05, 7);
    let names: Vec<String> = store.names().cloned().collect();
    let closure_names = names.clone();
    let inputs: Vec<(&str, Tensor<f64>)> = names
        .iter()
        .map(|n| (n.as_str(), store.tensor(n)))
        .collect();
    grad_check(
        move |xs| {
            let map: IndexMap<String, Tensor<f64>> =
                closure_names.iter().cloned().zip(xs.iter().cloned()).collect();
            let fwd = Forward::from_tensors(map);
            let preds = forward_scene(&fwd, &obs.raster, &cfg).expect("forward");
            total_loss(&preds, &scene, &cfg.loss).0
        },
        &inputs,
        &GradCheckOpts {
            tol: 1e-4,
            max_per_tensor: Some(max_per_tensor),
            ..Default::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::write_dataset;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = crate::model::grad_check_config();
        cfg.generator.h = 16;
        cfg.generator.w = 16;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.train.seed = 11;
        cfg.dataset.train_dir = dir.join("train").display().to_string();
        cfg.dataset.val_dir = dir.join("val").display().to_string();
        cfg
    }

    fn write_tiny_dataset(cfg: &RunConfig, dir: &Path) {
        write_dataset(Path::new(&cfg.dataset.train_dir), &cfg.generator, 100, 6).unwrap();
        write_dataset(Path::new(&cfg.dataset.val_dir), &cfg.generator, 900, 2).unwrap();
        let _ = dir;
    }

    #[test]
    fn smoke_two_epochs_finite_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        write_tiny_dataset(&cfg, dir.path());
        let report = train(&cfg, &dir.path().join("run"), false).unwrap();
        assert!(report.initial_loss.is_finite());
        assert!(report.final_epoch_loss.is_finite());
        assert_eq!(report.epochs.len(), 2);
        assert!(report.checkpoint.exists());
        let csv = fs::read_to_string(&report.metrics_csv).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 3, "header plus one row per epoch");
    }

    #[test]
    fn identical_runs_produce_byte_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        write_tiny_dataset(&cfg, dir.path());
        let r1 = train(&cfg, &dir.path().join("a"), false).unwrap();
        let r2 = train(&cfg, &dir.path().join("b"), false).unwrap();
        let b1 = fs::read(&r1.checkpoint).unwrap();
        let b2 = fs::read(&r2.checkpoint).unwrap();
        assert_eq!(b1, b2, "training must be bit-reproducible");
        assert_eq!(
            fs::read_to_string(&r1.metrics_csv).unwrap(),
            fs::read_to_string(&r2.metrics_csv).unwrap()
        );
    }

    #[test]
    fn missing_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.dataset.train_dir = dir.path().join("nope").display().to_string();
        assert!(train(&cfg, &dir.path().join("run"), false).is_err());
    }

    #[test]
    fn deep_supervision_off_blocks_gradients_to_earlier_heads() {
        let mut cfg = crate::model::grad_check_config();
        cfg.loss.deep_supervision = false;
        let store = init_params::<f32>(&cfg);
        let scene = crate::scene::generate_scene(2, &cfg.generator).unwrap();
        let obs = render_observation::<f32>(&scene, &cfg.generator, 0.05, 3);
        let fwd = Forward::new(&store, true);
        let preds = forward_scene(&fwd, &obs.raster, &cfg).unwrap();
        let (loss, _) = total_loss(&preds, &scene, &cfg.loss);
        let grads = fwd.param_grads(&loss.backward());
        // all layer-0 heads feed only the (detached) mask/anchor path
        for head in ["cls", "box", "sem", "emb.w2", "emb.b2"] {
            for suffix in ["w", "b"] {
                let name = if head.starts_with("emb") {
                    head.to_string()
                } else {
                    format!("{head}.{suffix}")
                };
                let key = format!("decoder.layer0.{name}");
                if let Some(g) = grads.get(&key) {
                    assert!(
                        g.iter().all(|&v| v == 0.0),
                        "{key} received gradient with deep supervision off"
                    );
                }
            }
        }
        // the last layer's heads do learn
        let g = &grads[&format!("decoder.layer{}.cls.w", cfg.decoder.layers - 1)];
        assert!(g.iter().any(|&v| v != 0.0), "final class head got no gradient");
    }
}
