//! Backbone, superpoint pooling, and decoder assembled into one model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode_points, standardize_superpoints, superpoint_pool, BackboneParams};
use crate::config::ModelConfig;
use crate::decoder::{forward_decoder, AttentionMask, DecoderOutput, DecoderParams, LayerPrediction};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::scene::Scene;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub decoder: DecoderParams,
}

/// Detached outputs of one inference pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub predictions: Vec<LayerPrediction>,
    pub cross_attention: Vec<Tensor>,
}

impl Model {
    /// Builds the parameter layout for `config` with seeded uniform
    /// initialization.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::new(&mut store, config.hidden_dim, config.feature_dim, &mut rng);
        let decoder = DecoderParams::new(&mut store, config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            decoder,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        scene: &Scene,
        frozen_masks: Option<&[AttentionMask]>,
    ) -> Result<DecoderOutput> {
        let features = encode_points(tape, bound, &self.backbone, &scene.cloud)?;
        let pooled = superpoint_pool(tape, features, &scene.partition)?;
        let superpoints = standardize_superpoints(tape, pooled)?;
        forward_decoder(tape, bound, &self.decoder, &self.config, superpoints, frozen_masks)
    }

    pub fn infer(&self, scene: &Scene) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, scene, None)?;
        Ok(Inference {
            predictions: out.predictions(&tape),
            cross_attention: out.cross_attention,
        })
    }
}
