//! Per-point feature extractor and the superpoint pooling layer.
//!
//! The extractor is a 3-layer MLP `6 → H → H → C` applied to each point
//! independently. Any module that maps `[N × 6]` inputs to `[N × C]`
//! features can replace it; pooling only depends on that interface.
//!
//! Coordinates enter relative to the midpoint of the scene's bounding box.
//! Without this every point shares a large positive offset, features start
//! out nearly identical across superpoints, and early masks and attention
//! cannot tell regions apart.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, Mlp, ParamStore};
use crate::scene::{PointCloud, SuperpointPartition};
use crate::tensor::{Tape, Tensor, Var};

pub const INPUT_DIM: usize = 6;

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub mlp: Mlp,
    pub feature_dim: usize,
}

impl BackboneParams {
    pub fn new(store: &mut ParamStore, hidden: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            // Superpoint standardization removes any per-channel constant, so
            // an output bias would never receive gradient.
            mlp: Mlp::without_output_bias(store, "backbone", &[INPUT_DIM, hidden, hidden, feature_dim], rng),
            feature_dim,
        }
    }
}

/// Backbone input `[N × 6]`: box-centered coordinates and colors. The
/// midpoint uses only min and max, so it does not depend on point order.
pub fn backbone_input(cloud: &PointCloud) -> Tensor {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &cloud.coords {
        for d in 0..3 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let mid: [f64; 3] = std::array::from_fn(|d| 0.5 * (lo[d] + hi[d]));
    let mut t = cloud.to_tensor();
    for row in t.data_mut().chunks_mut(INPUT_DIM) {
        for d in 0..3 {
            row[d] -= mid[d];
        }
    }
    t
}

/// Point-wise features `[N × C]`.
pub fn encode_points(tape: &mut Tape, bound: &Bound, params: &BackboneParams, cloud: &PointCloud) -> Result<Var> {
    let input = tape.constant(backbone_input(cloud));
    params.mlp.forward(tape, bound, input)
}

/// Average-pools point features into superpoint features `[M × C]`.
pub fn superpoint_pool(tape: &mut Tape, features: Var, partition: &SuperpointPartition) -> Result<Var> {
    tape.segment_mean(features, partition.ids(), partition.count())
}

/// Standardizes each feature channel across the scene's superpoints (zero
/// mean, unit variance, no affine terms). Gradients flow through the
/// statistics.
pub fn standardize_superpoints(tape: &mut Tape, superpoints: Var) -> Result<Var> {
    let m = tape.value(superpoints).rows();
    let gain = tape.constant(Tensor::filled(&[m], 1.0));
    let bias = tape.constant(Tensor::zeros(&[m]));
    let channels = tape.transpose(superpoints)?;
    let normed = tape.layer_norm(channels, gain, bias)?;
    tape.transpose(normed)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::finite_diff_check;

    fn cloud(points: &[[f64; 6]]) -> PointCloud {
        PointCloud::new(
            points.iter().map(|p| [p[0], p[1], p[2]]).collect(),
            points.iter().map(|p| [p[3], p[4], p[5]]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_output_weights_give_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let params = BackboneParams::new(&mut store, 4, 3, &mut rng);
        let last = *params.mlp.layers.last().unwrap();
        assert!(last.bias.is_none());
        store.get_mut(last.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let c = cloud(&[[1.0, 2.0, 3.0, 0.1, 0.2, 0.3], [4.0, 5.0, 6.0, 0.9, 0.8, 0.7]]);
        let f = encode_points(&mut tape, &bound, &params, &c).unwrap();
        assert_eq!(tape.value(f).data(), &[0.0; 6]);
    }

    #[test]
    fn input_is_box_centered() {
        let c = cloud(&[
            [1.0, 0.0, 4.0, 0.1, 0.2, 0.3],
            [3.0, 2.0, 5.0, 0.4, 0.5, 0.6],
            [2.5, 1.0, 4.5, 0.0, 0.0, 0.0],
        ]);
        let t = backbone_input(&c);
        assert_eq!(t.row(0), &[-1.0, -1.0, -0.5, 0.1, 0.2, 0.3]);
        assert_eq!(t.row(1), &[1.0, 1.0, 0.5, 0.4, 0.5, 0.6]);
        assert_eq!(t.row(2), &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_set_single_hidden_unit() {
        // 6 → 1 → 1 → 1 with hand-set weights on two points whose box
        // midpoint is x = 2.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let params = BackboneParams::new(&mut store, 1, 1, &mut rng);
        let l = &params.mlp.layers;
        *store.get_mut(l[0].weight) = Tensor::new(vec![6, 1], vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        *store.get_mut(l[0].bias.unwrap()) = Tensor::vector(vec![0.5]);
        *store.get_mut(l[1].weight) = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        *store.get_mut(l[1].bias.unwrap()) = Tensor::vector(vec![-1.0]);
        *store.get_mut(l[2].weight) = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let c = cloud(&[[3.0, 9.0, 9.0, 0.25, 0.0, 0.0], [1.0, 9.0, 9.0, 0.0, 0.0, 0.0]]);
        let f = encode_points(&mut tape, &bound, &params, &c).unwrap();
        // A: h1 = relu(1 + 0.5 + 0.5) = 2, h2 = relu(6 - 1) = 5, out = 10.
        // B: h1 = relu(-1 + 0 + 0.5) = 0, h2 = relu(-1) = 0, out = 0.
        assert_eq!(tape.value(f).data(), &[10.0, 0.0]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0], vec![9.0, 9.0]]));
        let part = SuperpointPartition::new(vec![0, 0, 1]).unwrap();
        let s = superpoint_pool(&mut tape, x, &part).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 5.0, 9.0, 9.0]);
    }

    #[test]
    fn pooling_gradient_check() {
        let part = SuperpointPartition::new(vec![0, 1, 0, 1, 1]).unwrap();
        let x = Tensor::new(vec![5, 2], (0..10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let report = finite_diff_check(
            |t: &mut Tape, p: &[Var]| {
                let pooled = t.segment_mean(p[0], part.ids(), part.count())?;
                let y = t.matmul(pooled, p[1])?;
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            },
            &[x, w],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
