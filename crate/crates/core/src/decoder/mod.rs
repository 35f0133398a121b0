//! Query decoder: mask branch, masked superpoint cross-attention layers,
//! and the prediction head shared by every layer.
//!
//! Layer `ℓ` reads the queries `Z_{ℓ-1}` and an attention mask built from
//! the masks predicted from `Z_{ℓ-1}`. The head is applied to the initial
//! queries `Z_0` as well, so a decoder with `L` layers yields `L + 1`
//! predictions. No positional terms are used anywhere.

mod attention;

pub use attention::{build_attention_mask, multi_head_attention, AttentionMask, AttentionOutput, AttentionParams};

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, Mlp, Norm, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub cross: AttentionParams,
    pub cross_norm: Norm,
    pub self_attn: AttentionParams,
    pub self_norm: Norm,
    pub ffn: Mlp,
    pub ffn_norm: Norm,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub class_mlp: Mlp,
    pub score_mlp: Mlp,
    pub mask_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub query_embed: ParamId,
    pub input_proj: Linear,
    pub mask_branch: Mlp,
    pub layers: Vec<DecoderLayerParams>,
    pub head: HeadParams,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let query_embed = store.insert_uniform("decoder.query_embed", &[cfg.queries, d], d, rng);
        let input_proj = Linear::new(store, "decoder.input_proj", cfg.feature_dim, d, rng);
        let mask_branch = Mlp::new(store, "decoder.mask_branch", &[cfg.feature_dim, d, d], rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("decoder.layer{}", l + 1);
            layers.push(DecoderLayerParams {
                cross: AttentionParams::new(store, &format!("{name}.cross"), d, cfg.heads, rng)?,
                cross_norm: Norm::new(store, &format!("{name}.cross_norm"), d),
                self_attn: AttentionParams::new(store, &format!("{name}.self"), d, cfg.heads, rng)?,
                self_norm: Norm::new(store, &format!("{name}.self_norm"), d),
                ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, cfg.ffn_dim, d], rng),
                ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), d),
            });
        }
        let head = HeadParams {
            class_mlp: Mlp::new(store, "head.class", &[d, d, cfg.num_classes + 1], rng),
            score_mlp: Mlp::new(store, "head.score", &[d, d, 1], rng),
            mask_proj: Linear::new(store, "head.mask_proj", d, d, rng),
        };
        Ok(Self {
            query_embed,
            input_proj,
            mask_branch,
            layers,
            head,
        })
    }
}

/// Tape handles of one head's outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `[K × (N_class + 1)]`, rows sum to one; the last column is "no instance".
    pub class_probs: Var,
    /// `[K × 1]` IoU-aware scores in `[0, 1]`.
    pub scores: Var,
    /// `[K × M]` superpoint mask probabilities.
    pub masks: Var,
}

/// Detached values of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    pub class_probs: Tensor,
    pub scores: Vec<f64>,
    pub masks: Tensor,
}

impl LayerPrediction {
    pub fn num_queries(&self) -> usize {
        self.scores.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.cols() - 1
    }

    pub fn from_tape(tape: &Tape, head: &HeadVars) -> Self {
        Self {
            class_probs: tape.value(head.class_probs).clone(),
            scores: tape.value(head.scores).data().to_vec(),
            masks: tape.value(head.masks).clone(),
        }
    }
}

pub struct DecoderOutput {
    /// Predictions from `Z_0, Z_1, …, Z_L` in order.
    pub heads: Vec<HeadVars>,
    /// The mask consumed by each decoder layer, `A_0 … A_{L-1}`.
    pub attention_masks: Vec<AttentionMask>,
    /// Cross-attention weights of each layer, head-averaged `[K × M]`.
    pub cross_attention: Vec<Tensor>,
}

impl DecoderOutput {
    pub fn predictions(&self, tape: &Tape) -> Vec<LayerPrediction> {
        self.heads.iter().map(|h| LayerPrediction::from_tape(tape, h)).collect()
    }

    pub fn last(&self) -> &HeadVars {
        self.heads.last().expect("at least the initial head")
    }
}

/// Mask-aware superpoint features `S_mask` `[M × D]`.
pub fn mask_branch(tape: &mut Tape, bound: &Bound, params: &DecoderParams, superpoints: Var) -> Result<Var> {
    params.mask_branch.forward(tape, bound, superpoints)
}

pub fn prediction_head(
    tape: &mut Tape,
    bound: &Bound,
    head: &HeadParams,
    queries: Var,
    mask_features: Var,
) -> Result<HeadVars> {
    let logits = head.class_mlp.forward(tape, bound, queries)?;
    let class_probs = tape.softmax_rows(logits)?;
    let s = head.score_mlp.forward(tape, bound, queries)?;
    let scores = tape.sigmoid(s);
    let projected = head.mask_proj.forward(tape, bound, queries)?;
    let mask_logits = tape.matmul_t(projected, mask_features)?;
    let masks = tape.sigmoid(mask_logits);
    Ok(HeadVars {
        class_probs,
        scores,
        masks,
    })
}

/// Cross-attention sublayer `LN(Z + CrossAttn(Z, S', A))`.
fn cross_sublayer(
    tape: &mut Tape,
    bound: &Bound,
    layer: &DecoderLayerParams,
    queries: Var,
    memory: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Tensor)> {
    let attn = multi_head_attention(tape, bound, &layer.cross, queries, memory, mask)?;
    let res = tape.add(queries, attn.output)?;
    Ok((layer.cross_norm.forward(tape, bound, res)?, attn.weights))
}

fn self_sublayer(tape: &mut Tape, bound: &Bound, layer: &DecoderLayerParams, queries: Var) -> Result<Var> {
    let attn = multi_head_attention(tape, bound, &layer.self_attn, queries, queries, None)?;
    let res = tape.add(queries, attn.output)?;
    layer.self_norm.forward(tape, bound, res)
}

fn ffn_sublayer(tape: &mut Tape, bound: &Bound, layer: &DecoderLayerParams, queries: Var) -> Result<Var> {
    let h = layer.ffn.forward(tape, bound, queries)?;
    let res = tape.add(queries, h)?;
    layer.ffn_norm.forward(tape, bound, res)
}

/// One decoder layer. With `cross_first` the order is cross-attention,
/// self-attention, feed-forward; otherwise self-attention comes first.
/// Returns the new queries and the cross-attention weights.
pub fn decoder_layer(
    tape: &mut Tape,
    bound: &Bound,
    layer: &DecoderLayerParams,
    queries: Var,
    memory: Var,
    mask: Option<&AttentionMask>,
    cross_first: bool,
) -> Result<(Var, Tensor)> {
    let (z, weights) = if cross_first {
        let (z, w) = cross_sublayer(tape, bound, layer, queries, memory, mask)?;
        (self_sublayer(tape, bound, layer, z)?, w)
    } else {
        let z = self_sublayer(tape, bound, layer, queries)?;
        cross_sublayer(tape, bound, layer, z, memory, mask)?
    };
    Ok((ffn_sublayer(tape, bound, layer, z)?, weights))
}

/// Runs the decoder on superpoint features `S` `[M × C]`.
///
/// When `frozen_masks` is given, those attention masks are used in place of
/// thresholding the intermediate predictions. The masks are constants in
/// either case; freezing them makes the forward pass a smooth function of
/// the parameters, which the finite-difference oracle relies on.
pub fn forward_decoder(
    tape: &mut Tape,
    bound: &Bound,
    params: &DecoderParams,
    cfg: &ModelConfig,
    superpoints: Var,
    frozen_masks: Option<&[AttentionMask]>,
) -> Result<DecoderOutput> {
    if let Some(frozen) = frozen_masks {
        if frozen.len() != params.layers.len() {
            return Err(Error::Contract(format!(
                "{} frozen attention masks for {} layers",
                frozen.len(),
                params.layers.len()
            )));
        }
    }
    let memory = params.input_proj.forward(tape, bound, superpoints)?;
    let mask_features = mask_branch(tape, bound, params, superpoints)?;
    let num_superpoints = tape.value(superpoints).rows();

    let mut queries = bound.var(params.query_embed);
    let mut heads = vec![prediction_head(tape, bound, &params.head, queries, mask_features)?];
    let mut attention_masks = Vec::with_capacity(params.layers.len());
    let mut cross_attention = Vec::with_capacity(params.layers.len());

    for (l, layer) in params.layers.iter().enumerate() {
        let mask = match frozen_masks {
            Some(frozen) => frozen[l].clone(),
            None if cfg.attention_mask => {
                let prev = tape.value(heads[l].masks);
                build_attention_mask(prev, cfg.tau)
            }
            None => AttentionMask::open(cfg.queries, num_superpoints),
        };
        let (z, weights) = decoder_layer(
            tape,
            bound,
            layer,
            queries,
            memory,
            Some(&mask),
            cfg.cross_attention_first,
        )?;
        queries = z;
        attention_masks.push(mask);
        cross_attention.push(weights);
        heads.push(prediction_head(tape, bound, &params.head, queries, mask_features)?);
    }
    Ok(DecoderOutput {
        heads,
        attention_masks,
        cross_attention,
    })
}
