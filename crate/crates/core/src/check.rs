//! Finite-difference checks over every tape kernel, the composite layers,
//! and the full training loss on a toy scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig};
use crate::decoder::{decoder_layer, multi_head_attention, AttentionMask, AttentionParams, DecoderLayerParams};
use crate::error::Result;
use crate::matching::{total_loss, SceneTargets};
use crate::model::Model;
use crate::params::{Mlp, Norm, ParamStore};
use crate::scene::{generate_synthetic_scene, Scene, SyntheticSpec};
use crate::tensor::{GradCheckError, Stencil, Tape, Tensor, Var};

/// Two-point step used for kernels and composite layers.
pub const STEP: f64 = 1e-6;
/// Four-point step used for the full loss. Some of its gradients are near
/// 1e-8, where two-point round-off at small steps alone exceeds the
/// tolerance. Entries whose stencil crosses a relu kink are skipped.
pub const LOSS_STEP: f64 = 1e-3;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: Vec<Tensor>,
    f: Objective,
    step: f64,
    stencil: Stencil,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub entries: usize,
    /// Entries whose perturbation crossed a relu or clamp kink.
    pub skipped: usize,
    /// `(parameter index, entry)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[0.1, 1)` so relu and clamps stay away from
/// their kinks.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Scalarizes `out` as `sum(out ⊙ W)` with fixed random `W`, so that
/// structural identities such as rows summing to one do not hide errors.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn projected(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    params: Vec<Tensor>,
    out_shape: &[usize],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = uniform(rng, out_shape, -1.0, 1.0);
    Case {
        name,
        params,
        f: Box::new(move |t, p| {
            let out = f(t, p)?;
            project(t, out, &w)
        }),
        step: STEP,
        stencil: Stencil::TwoPoint,
    }
}

/// Small model used by the end-to-end check: two layers, eight queries.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden_dim: 8,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        layers: 2,
        queries: 8,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Two-instance scene on a 2 m floor; seed 1 yields 20 superpoints.
pub fn toy_scene(seed: u64) -> Result<Scene> {
    let spec = SyntheticSpec {
        num_instances: 2,
        points_per_instance: 20,
        num_classes: 3,
        noise_scale: 0.01,
        room_extent: 2.0,
        background_points: 21,
        cell: 0.5,
    };
    generate_synthetic_scene(seed, &spec)
}

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[4, 2], -1.0, 1.0);
    cases.push(projected(rng, "matmul", vec![a.clone(), b], &[3, 2], |t, p| {
        t.matmul(p[0], p[1])
    }));
    cases.push(projected(rng, "transpose", vec![a.clone()], &[4, 3], |t, p| {
        t.transpose(p[0])
    }));
    let c = uniform(rng, &[5, 4], -1.0, 1.0);
    cases.push(projected(rng, "matmul_t", vec![a.clone(), c], &[3, 5], |t, p| {
        t.matmul_t(p[0], p[1])
    }));
    let a2 = uniform(rng, &[3, 4], -1.0, 1.0);
    cases.push(projected(rng, "add", vec![a.clone(), a2.clone()], &[3, 4], |t, p| {
        t.add(p[0], p[1])
    }));
    cases.push(projected(rng, "sub", vec![a.clone(), a2.clone()], &[3, 4], |t, p| {
        t.sub(p[0], p[1])
    }));
    cases.push(projected(rng, "mul", vec![a.clone(), a2], &[3, 4], |t, p| {
        t.mul(p[0], p[1])
    }));
    let denom = uniform(rng, &[3, 4], 0.5, 1.5);
    cases.push(projected(rng, "div", vec![a.clone(), denom], &[3, 4], |t, p| {
        t.div(p[0], p[1])
    }));
    let bias = uniform(rng, &[4], -1.0, 1.0);
    cases.push(projected(rng, "add_row", vec![a.clone(), bias], &[3, 4], |t, p| {
        t.add_row(p[0], p[1])
    }));
    cases.push(projected(rng, "affine", vec![a.clone()], &[3, 4], |t, p| {
        Ok(t.affine(p[0], -1.5, 0.25))
    }));
    cases.push(projected(rng, "scale", vec![a.clone()], &[3, 4], |t, p| {
        Ok(t.scale(p[0], 0.7))
    }));
    cases.push(projected(rng, "sigmoid", vec![a.clone()], &[3, 4], |t, p| {
        Ok(t.sigmoid(p[0]))
    }));
    let kinked = off_kink(rng, &[3, 4]);
    cases.push(projected(rng, "relu", vec![kinked], &[3, 4], |t, p| Ok(t.relu(p[0]))));
    let positive = uniform(rng, &[3, 4], 0.2, 0.9);
    cases.push(projected(rng, "clamp_ln", vec![positive], &[3, 4], |t, p| {
        Ok(t.clamp_ln(p[0], 1e-7, f64::INFINITY))
    }));
    cases.push(projected(rng, "sum", vec![a.clone()], &[], |t, p| Ok(t.sum(p[0]))));
    cases.push(projected(rng, "mean", vec![a.clone()], &[], |t, p| Ok(t.mean(p[0]))));
    cases.push(projected(rng, "row_sum", vec![a.clone()], &[3], |t, p| {
        Ok(t.row_sum(p[0]))
    }));
    // Row 1 is fully masked and falls back to the unmasked softmax.
    let mask: Vec<f64> = (0..12)
        .map(|i| match i {
            1 | 2 | 4..=7 => f64::NEG_INFINITY,
            _ => 0.0,
        })
        .collect();
    cases.push(projected(
        rng,
        "masked_softmax_rows",
        vec![a.clone()],
        &[3, 4],
        move |t, p| t.masked_softmax_rows(p[0], &mask),
    ));
    cases.push(projected(rng, "softmax_rows", vec![a.clone()], &[3, 4], |t, p| {
        t.softmax_rows(p[0])
    }));
    let gain = uniform(rng, &[4], 0.5, 1.5);
    let shift = uniform(rng, &[4], -0.5, 0.5);
    cases.push(projected(
        rng,
        "layer_norm",
        vec![a.clone(), gain, shift],
        &[3, 4],
        |t, p| t.layer_norm(p[0], p[1], p[2]),
    ));
    cases.push(projected(rng, "slice_cols", vec![a.clone()], &[3, 2], |t, p| {
        t.slice_cols(p[0], 1, 2)
    }));
    let other = uniform(rng, &[3, 2], -1.0, 1.0);
    cases.push(projected(
        rng,
        "concat_cols",
        vec![a.clone(), other],
        &[3, 6],
        |t, p| t.concat_cols(&[p[1], p[0]]),
    ));
    let points = uniform(rng, &[5, 3], -1.0, 1.0);
    cases.push(projected(rng, "segment_mean", vec![points], &[2, 3], |t, p| {
        t.segment_mean(p[0], &[1, 0, 1, 1, 0], 2)
    }));
    cases.push(projected(rng, "gather_rows", vec![a.clone()], &[4, 4], |t, p| {
        t.gather_rows(p[0], &[2, 0, 2, 1])
    }));
    cases.push(projected(rng, "gather", vec![a], &[3], |t, p| {
        t.gather(p[0], &[11, 0, 5])
    }));
    cases
}

fn composite_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[6, 5, 4], rng);
    let cloud = uniform(rng, &[7, 6], -1.0, 1.0);
    let ids = vec![0, 1, 2, 0, 1, 2, 2];
    let params = store.values().to_vec();
    cases.push(projected(rng, "backbone_pool", params, &[3, 4], move |t, p| {
        let bound = ParamStore::bind_vars(p);
        let x = t.constant(cloud.clone());
        let f = mlp.forward(t, &bound, x)?;
        t.segment_mean(f, &ids, 3)
    }));

    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "attn", 4, 2, rng)?;
    let mut values = store.values().to_vec();
    values.push(uniform(rng, &[3, 4], -1.0, 1.0));
    values.push(uniform(rng, &[5, 4], -1.0, 1.0));
    let n = store.len();
    let mask = AttentionMask::from_open(3, 5, |q, k| (q + k) % 3 != 0);
    cases.push(projected(rng, "multi_head_attention", values, &[3, 4], move |t, p| {
        let bound = ParamStore::bind_vars(&p[..n]);
        Ok(multi_head_attention(t, &bound, &attn, p[n], p[n + 1], Some(&mask))?.output)
    }));

    let mut store = ParamStore::new();
    let layer = DecoderLayerParams {
        cross: AttentionParams::new(&mut store, "cross", 4, 2, rng)?,
        cross_norm: Norm::new(&mut store, "cross_norm", 4),
        self_attn: AttentionParams::new(&mut store, "self", 4, 2, rng)?,
        self_norm: Norm::new(&mut store, "self_norm", 4),
        ffn: Mlp::new(&mut store, "ffn", &[4, 6, 4], rng),
        ffn_norm: Norm::new(&mut store, "ffn_norm", 4),
    };
    let mut values = store.values().to_vec();
    values.push(uniform(rng, &[3, 4], -1.0, 1.0));
    values.push(uniform(rng, &[5, 4], -1.0, 1.0));
    let n = store.len();
    let mask = AttentionMask::from_open(3, 5, |q, k| (q * 2 + k) % 4 != 1);
    cases.push(projected(rng, "decoder_layer", values, &[3, 4], move |t, p| {
        let bound = ParamStore::bind_vars(&p[..n]);
        Ok(decoder_layer(t, &bound, &layer, p[n], p[n + 1], Some(&mask), true)?.0)
    }));
    Ok(cases)
}

/// Full multi-task loss of the toy model with attention masks and matchings
/// frozen at their unperturbed values.
fn full_loss_case(seed: u64) -> Result<Case> {
    let cfg = toy_model_config();
    let model = Model::new(&cfg, seed)?;
    let scene = toy_scene(seed)?;
    let loss_cfg = LossConfig::default();
    let targets = SceneTargets::from_scene(&scene)?;

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &scene, None)?;
    let breakdown = total_loss(
        &mut tape,
        &out.heads,
        &targets,
        &loss_cfg,
        cfg.iterative_prediction,
        None,
    )?;
    let masks = out.attention_masks;
    let plans = breakdown.targets;

    let params = model.store.values().to_vec();
    Ok(Case {
        name: "full_loss",
        params,
        f: Box::new(move |t, p| {
            let bound = ParamStore::bind_vars(p);
            let out = model.forward(t, &bound, &scene, Some(&masks))?;
            let loss = total_loss(
                t,
                &out.heads,
                &targets,
                &loss_cfg,
                cfg.iterative_prediction,
                Some(&plans),
            )?;
            Ok(loss.total)
        }),
        step: LOSS_STEP,
        stencil: Stencil::FourPoint,
    })
}

/// Runs every check. `corrupt` names a case whose analytic gradient is
/// deliberately scaled, as a negative control.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckOutcome>, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = kernel_cases(&mut rng);
    cases.extend(composite_cases(&mut rng)?);
    cases.push(full_loss_case(seed)?);
    cases
        .into_iter()
        .map(|case| {
            let scale = if corrupt == Some(case.name) { 1.5 } else { 1.0 };
            let report = crate::tensor::check_scaled(&case.f, &case.params, case.step, case.stencil, scale)?;
            Ok(CheckOutcome {
                name: case.name,
                max_rel_err: report.max_rel_err,
                entries: report.entries_checked,
                skipped: report.entries_skipped,
                worst: report.worst,
            })
        })
        .collect()
}

/// Names of all checks in execution order.
pub fn check_names() -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names: Vec<_> = kernel_cases(&mut rng).iter().map(|c| c.name).collect();
    names.extend(composite_cases(&mut rng).expect("static shapes").iter().map(|c| c.name));
    names.push("full_loss");
    names
}
