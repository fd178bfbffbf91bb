//! Model assembly: parameter initialization and the full per-scene forward
//! pass (encoder, scene aggregation, multi-task decoder).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{register_aggregation_params, scene_aggregate};
use crate::config::RunConfig;
use crate::decoder::{decoder_forward, register_decoder_params, TaskPrediction};
use crate::encoder::{encoder_forward, register_encoder_params};
use crate::error::Result;
use crate::modulation::ModulationConfig;
use crate::params::{Forward, ParamStore};
use crate::queries::{self, QueryState, ANCHOR_DIM};
use crate::tensor::{t, Scalar, Tensor};

/// Initialize every parameter of the model from the run config. The stored
/// anchors are part of the store (and the checkpoint) but never receive
/// gradients.
pub fn init_params<T: Scalar>(cfg: &RunConfig) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParamStore::new();
    let grid = cfg.grid();
    let qs = queries::init_queries(cfg.queries, &grid, cfg.train.seed ^ 0xA5C3);
    store.insert(
        "queries.anchors",
        qs.anchors.iter().map(|&v| t::<T>(v)).collect(),
        &[cfg.queries, ANCHOR_DIM],
    );
    queries::register_query_params(&mut store, &mut rng, cfg.queries, cfg.encoder.channels);
    register_encoder_params(&mut store, &mut rng, cfg.generator.obs_channels(), &cfg.encoder);
    register_aggregation_params(&mut store, &mut rng, cfg.encoder.channels, &cfg.aggregation);
    register_decoder_params(
        &mut store,
        &mut rng,
        cfg.encoder.channels,
        cfg.generator.k_det,
        cfg.generator.k_seg,
        &cfg.decoder,
    );
    store
}

/// Query state recovered from the stored anchors.
pub fn query_state<T: Scalar>(fwd: &Forward<T>, cfg: &RunConfig) -> QueryState {
    QueryState {
        anchors: fwd.param_f64("queries.anchors"),
        n: cfg.queries,
    }
}

/// Full forward pass over one observation: per-layer task predictions.
pub fn forward_scene<T: Scalar>(
    fwd: &Forward<T>,
    obs: &Tensor<T>,
    cfg: &RunConfig,
) -> Result<Vec<TaskPrediction<T>>> {
    let f = encoder_forward(fwd, obs, cfg.generator.obs_channels(), &cfg.encoder)?;
    let f_a = scene_aggregate(fwd, &f, &cfg.aggregation);
    let modulation = ModulationConfig {
        top_k: cfg.effective_top_k(),
        ..cfg.modulation
    };
    Ok(decoder_forward(
        fwd,
        &f,
        &f_a,
        &query_state(fwd, cfg),
        &cfg.grid(),
        &cfg.decoder,
        &modulation,
    ))
}

/// A small configuration for whole-model gradient checks: 8x8 grid, C=16,
/// N=4, L=2, one aggregation loop.
pub fn grad_check_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.generator.h = 8;
    cfg.generator.w = 8;
    cfg.generator.density = 0.2;
    cfg.generator.max_objects = 8;
    cfg.encoder.channels = 16;
    cfg.encoder.width = 8;
    cfg.encoder.depth = 2;
    cfg.queries = 4;
    cfg.decoder.layers = 2;
    cfg.decoder.heads = 8;
    cfg.aggregation.loops = 1;
    cfg.aggregation.window_sizes = vec![2, 3, 4, 8];
    cfg.aggregation.aspp_dilations = vec![1, 2];
    cfg.train.seed = 17;
    cfg.validate().expect("grad-check config must validate");
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render_observation};

    #[test]
    fn forward_produces_layer_predictions_with_right_shapes() {
        let cfg = grad_check_config();
        let store = init_params::<f32>(&cfg);
        let scene = generate_scene(3, &cfg.generator).unwrap();
        let obs = render_observation::<f32>(&scene, &cfg.generator, 0.05, 1);
        let fwd = Forward::new(&store, false);
        let preds = forward_scene(&fwd, &obs.raster, &cfg).unwrap();
        assert_eq!(preds.len(), cfg.decoder.layers);
        let last = preds.last().unwrap();
        assert_eq!(last.class_logits.shape(), &[4, cfg.generator.k_det + 1]);
        assert_eq!(last.semantic_map.shape(), &[cfg.generator.k_seg, 8, 8]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = grad_check_config();
        let a = init_params::<f32>(&cfg);
        let b = init_params::<f32>(&cfg);
        assert_eq!(a.len(), b.len());
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.data, pb.data, "param {na} differs between inits");
        }
    }

    #[test]
    fn f32_and_f64_inits_agree() {
        let cfg = grad_check_config();
        let a = init_params::<f32>(&cfg);
        let b = init_params::<f64>(&cfg);
        for ((na, pa), (_, pb)) in a.iter().zip(b.iter()) {
            for (x, y) in pa.data.iter().zip(pb.data.iter()) {
                assert_eq!(*x, *y as f32, "param {na} differs across scalar types");
            }
        }
    }
}
