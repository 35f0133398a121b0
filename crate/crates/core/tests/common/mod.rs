#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spformer::config::ModelConfig;
use spformer::scene::{generate_synthetic_scene, PointCloud, Scene, SuperpointPartition, SyntheticSpec};
use spformer::tensor::Tensor;

/// Two-layer, five-query model with 3 classes.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden_dim: 8,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        layers: 2,
        queries: 5,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

pub fn small_spec(num_instances: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_instances,
        points_per_instance: 12,
        num_classes: 3,
        noise_scale: 0.01,
        room_extent: 2.0,
        background_points: 10,
        cell: 0.5,
    }
}

pub fn small_scene(seed: u64) -> Scene {
    generate_synthetic_scene(seed, &small_spec(3)).unwrap()
}

pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Same scene with superpoint `j` renamed to `perm[j]`.
pub fn relabel_superpoints(scene: &Scene, perm: &[usize]) -> Scene {
    let ids = scene.partition.ids().iter().map(|&j| perm[j]).collect();
    Scene::new(
        scene.cloud.clone(),
        SuperpointPartition::new(ids).unwrap(),
        scene.ground_truth.clone(),
    )
    .unwrap()
}

/// Scene whose superpoint `j` holds points `2j` and `2j + 1`.
pub fn paired_scene(num_superpoints: usize, seed: u64) -> Scene {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * num_superpoints;
    let coords = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..2.0)))
        .collect();
    let colors = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let cloud = PointCloud::new(coords, colors).unwrap();
    let partition = SuperpointPartition::new((0..n).map(|i| i / 2).collect()).unwrap();
    Scene::new(cloud, partition, None).unwrap()
}

/// Columns of `t` reordered so that new column `perm[j]` is old column `j`.
pub fn scatter_columns(t: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + perm[j]] = t.at(i, j);
        }
    }
    Tensor::new(vec![r, c], out).unwrap()
}

/// Rows of `t` reordered so that new row `perm[i]` is old row `i`.
pub fn scatter_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        out[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(t.row(i));
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Entries of `v` reordered so that new entry `perm[i]` is old entry `i`.
pub fn scatter_vec(v: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (i, &x) in v.iter().enumerate() {
        out[perm[i]] = x;
    }
    out
}

/// Minimum over all injective gt -> proposal maps, summed in gt order.
pub fn brute_force_min(costs: &[f64], proposals: usize, gts: usize) -> f64 {
    fn go(costs: &[f64], proposals: usize, gts: usize, g: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if g == gts {
            *best = best.min(acc);
            return;
        }
        for p in 0..proposals {
            if !used[p] {
                used[p] = true;
                go(costs, proposals, gts, g + 1, used, acc + costs[p * gts + g], best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(costs, proposals, gts, 0, &mut vec![false; proposals], 0.0, &mut best);
    best
}

/// Hungarian cost summed in gt order, matching the brute-force summation.
pub fn cost_in_gt_order(pairs: &[(usize, usize)], costs: &[f64], gts: usize) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_by_key(|&(_, g)| g);
    sorted.iter().fold(0.0, |acc, &(p, g)| acc + costs[p * gts + g])
}
