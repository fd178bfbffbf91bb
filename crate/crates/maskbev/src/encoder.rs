//! Trainable encoder stub: observation raster in, BEV feature map `F` out.
//!
//! A stack of 3x3 conv + gelu + channel layernorm blocks at a narrow
//! internal width, followed by a 1x1 projection to the decoder width. This
//! stands in for the full sensor-fusion encoders upstream of the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init, Forward, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output feature channels `C`.
    pub channels: usize,
    /// Internal block width.
    pub width: usize,
    /// Number of conv blocks.
    pub depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 64,
            width: 32,
            depth: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        Ok(())
    }
}

pub fn register_encoder_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    in_channels: usize,
    cfg: &EncoderConfig,
) {
    let mut prev = in_channels;
    for b in 0..cfg.depth {
        let shape = [cfg.width, prev, 3, 3];
        store.insert(
            format!("encoder.block{b}.w"),
            init::normal(rng, &shape, (2.0 / (prev * 9) as f64).sqrt()),
            &shape,
        );
        store.insert(format!("encoder.block{b}.b"), init::zeros(&[cfg.width]), &[cfg.width]);
        store.insert(
            format!("encoder.block{b}.gamma"),
            init::ones(&[cfg.width]),
            &[cfg.width],
        );
        store.insert(
            format!("encoder.block{b}.beta"),
            init::zeros(&[cfg.width]),
            &[cfg.width],
        );
        prev = cfg.width;
    }
    let proj = [cfg.channels, cfg.width, 1, 1];
    store.insert(
        "encoder.proj.w",
        init::normal(rng, &proj, (2.0 / cfg.width as f64).sqrt()),
        &proj,
    );
    store.insert("encoder.proj.b", init::zeros(&[cfg.channels]), &[cfg.channels]);
}

/// Map an observation raster to the BEV feature `F` of shape `[C,H,W]`.
pub fn encoder_forward<T: Scalar>(
    fwd: &Forward<T>,
    obs: &Tensor<T>,
    in_channels: usize,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    if obs.shape().len() != 3 || obs.shape()[0] != in_channels {
        return Err(Error::Config(format!(
            "encoder expects [{in_channels},H,W] observations, got {:?}",
            obs.shape()
        )));
    }
    let mut x = obs.clone();
    for b in 0..cfg.depth {
        x = x
            .conv2d(
                &fwd.param(&format!("encoder.block{b}.w")),
                Some(&fwd.param(&format!("encoder.block{b}.b"))),
                1,
                1,
            )
            .gelu()
            .layernorm(
                0,
                &fwd.param(&format!("encoder.block{b}.gamma")),
                &fwd.param(&format!("encoder.block{b}.beta")),
                1e-5,
            );
    }
    Ok(x.conv2d(
        &fwd.param("encoder.proj.w"),
        Some(&fwd.param("encoder.proj.b")),
        1,
        0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOpts};
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};

    fn store_for(in_ch: usize, cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_encoder_params(&mut store, &mut rng, in_ch, cfg);
        store
    }

    #[test]
    fn output_shape_is_c_h_w() {
        let cfg = EncoderConfig {
            channels: 12,
            width: 8,
            depth: 2,
        };
        let store = store_for(5, &cfg, 0);
        let fwd = Forward::new(&store, false);
        let obs = Tensor::<f64>::zeros(&[5, 10, 7]);
        let f = encoder_forward(&fwd, &obs, 5, &cfg).unwrap();
        assert_eq!(f.shape(), &[12, 10, 7]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let cfg = EncoderConfig::default();
        let store = store_for(9, &cfg, 0);
        let fwd = Forward::new(&store, false);
        let obs = Tensor::<f64>::zeros(&[4, 8, 8]);
        assert!(encoder_forward(&fwd, &obs, 9, &cfg).is_err());
    }

    #[test]
    fn zero_input_zero_final_layer_gives_zero_output() {
        let cfg = EncoderConfig {
            channels: 6,
            width: 4,
            depth: 2,
        };
        let mut store = store_for(3, &cfg, 1);
        store.set_data("encoder.proj.w", vec![0.0; 6 * 4]);
        let fwd = Forward::new(&store, false);
        let obs = Tensor::<f64>::zeros(&[3, 8, 8]);
        let f = encoder_forward(&fwd, &obs, 3, &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_grad_check_8x8() {
        let cfg = EncoderConfig {
            channels: 4,
            width: 4,
            depth: 2,
        };
        let store = store_for(2, &cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs: Vec<f64> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obs = Tensor::from_vec(obs, &[2, 8, 8]);
        let names: Vec<String> = store.names().cloned().collect();
        let inputs: Vec<(&str, Tensor<f64>)> = names
            .iter()
            .map(|n| (n.as_str(), store.tensor(n)))
            .collect();
        let report = grad_check(
            |xs| {
                let map: IndexMap<String, Tensor<f64>> =
                    names.iter().cloned().zip(xs.iter().cloned()).collect();
                let fwd = Forward::from_tensors(map);
                encoder_forward(&fwd, &obs, 2, &cfg).unwrap().sum()
            },
            &inputs,
            &GradCheckOpts {
                max_per_tensor: Some(12),
                ..Default::default()
            },
        );
        assert!(
            report.passed(),
            "encoder grad check: err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
