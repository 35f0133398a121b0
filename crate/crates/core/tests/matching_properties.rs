mod common;

use proptest::prelude::*;

use common::*;
use spformer::config::LossConfig;
use spformer::decoder::LayerPrediction;
use spformer::matching::{hungarian_assign, mask_matching_cost, matching_cost_matrix, total_loss, SceneTargets};
use spformer::model::Model;
use spformer::scene::{InstanceGroundTruth, PointCloud, Scene, SuperpointPartition};
use spformer::tensor::{Tape, Tensor};

fn cost_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=7)
        .prop_flat_map(|k| (Just(k), 0usize..=k))
        .prop_flat_map(|(k, g)| (Just(k), Just(g), prop::collection::vec(-10.0f64..10.0, k * g)))
}

/// Three superpoints; one instance of `class` covering superpoints 0 and 1.
fn three_superpoint_scene(class: usize) -> Scene {
    let cloud = PointCloud::new(vec![[0.0; 3]; 3], vec![[0.5; 3]; 3]).unwrap();
    let partition = SuperpointPartition::new(vec![0, 1, 2]).unwrap();
    let gt = InstanceGroundTruth::new(vec![0, 0, -1], vec![class]).unwrap();
    Scene::new(cloud, partition, Some(gt)).unwrap()
}

#[test]
fn certain_class_and_exact_mask_cost_minus_point_seven() {
    let targets = SceneTargets::from_scene(&three_superpoint_scene(1)).unwrap();
    let pred = LayerPrediction {
        class_probs: Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]),
        scores: vec![0.5],
        masks: Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]),
    };
    let c = matching_cost_matrix(&pred, &targets.masks, &targets.classes, &LossConfig::default()).unwrap();
    assert!((c.mask[0] + 0.2).abs() < 1e-15, "{}", c.mask[0]);
    assert!((c.at(0, 0) + 0.7).abs() < 1e-15, "{}", c.at(0, 0));
}

#[test]
fn zero_probability_and_zero_mask_cost_is_zero() {
    // The gt class has probability 0 and the mask term is weighted out.
    let targets = SceneTargets::from_scene(&three_superpoint_scene(0)).unwrap();
    let pred = LayerPrediction {
        class_probs: Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]),
        scores: vec![0.5],
        masks: Tensor::from_rows(&[vec![0.3, 0.6, 0.9]]),
    };
    let cfg = LossConfig {
        lambda_mask: 0.0,
        ..LossConfig::default()
    };
    let c = matching_cost_matrix(&pred, &targets.masks, &targets.classes, &cfg).unwrap();
    assert_eq!(c.at(0, 0), 0.0);
}

#[test]
fn class_weight_decides_between_confident_and_well_masked_proposal() {
    // Proposal 0 is sure of the class but has an empty mask, proposal 1
    // has the exact mask with zero class probability.
    let targets = SceneTargets::from_scene(&three_superpoint_scene(0)).unwrap();
    let pred = LayerPrediction {
        class_probs: Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]),
        scores: vec![0.5, 0.5],
        masks: Tensor::from_rows(&[vec![0.5, 0.5, 0.5], vec![1.0, 1.0, 0.0]]),
    };
    let choose = |lambda_cls: f64| {
        let cfg = LossConfig {
            lambda_cls,
            ..LossConfig::default()
        };
        let c = matching_cost_matrix(&pred, &targets.masks, &targets.classes, &cfg).unwrap();
        hungarian_assign(&c.total, 2, 1).unwrap().pairs
    };
    assert_eq!(choose(0.5), vec![(1, 0)]);
    assert_eq!(choose(2.0), vec![(0, 0)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hungarian_matches_exhaustive_search((k, g, costs) in cost_matrix()) {
        let a = hungarian_assign(&costs, k, g).unwrap();
        prop_assert_eq!(a.pairs.len(), g);
        prop_assert_eq!(a.unassigned.len(), k - g);
        let mut gts: Vec<usize> = a.pairs.iter().map(|&(_, gt)| gt).collect();
        let mut props: Vec<usize> = a.pairs.iter().map(|&(p, _)| p).collect();
        gts.sort_unstable();
        props.sort_unstable();
        props.dedup();
        prop_assert_eq!(gts, (0..g).collect::<Vec<_>>());
        prop_assert_eq!(props.len(), g);
        let best = if g == 0 { 0.0 } else { brute_force_min(&costs, k, g) };
        prop_assert_eq!(cost_in_gt_order(&a.pairs, &costs, g), best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gt_column_shift_keeps_assignment(
        (k, g, costs) in cost_matrix(),
        col in 0usize..7,
        shift in -5.0f64..5.0,
    ) {
        prop_assume!(g > 0);
        let col = col % g;
        let mut shifted = costs.clone();
        for p in 0..k {
            shifted[p * g + col] += shift;
        }
        let a = hungarian_assign(&costs, k, g).unwrap();
        let b = hungarian_assign(&shifted, k, g).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn proposal_row_shift_keeps_square_assignment(
        k in 1usize..=7,
        seed in prop::collection::vec(-10.0f64..10.0, 49),
        row in 0usize..7,
        shift in -5.0f64..5.0,
    ) {
        let costs = seed[..k * k].to_vec();
        let row = row % k;
        let mut shifted = costs.clone();
        for c in &mut shifted[row * k..(row + 1) * k] {
            *c += shift;
        }
        let a = hungarian_assign(&costs, k, k).unwrap();
        let b = hungarian_assign(&shifted, k, k).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn identical_binary_masks_cost_minus_one_over_two_k_plus_one(
        mask in prop::collection::vec(prop::bool::ANY, 1..40),
    ) {
        let m: Vec<f64> = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
        let k = m.iter().sum::<f64>();
        let c = mask_matching_cost(&m, &m).unwrap();
        prop_assert!((c + 1.0 / (2.0 * k + 1.0)).abs() <= 2.0 * f64::EPSILON, "{} vs k = {}", c, k);
    }

    #[test]
    fn total_loss_ignores_gt_labeling(
        model_seed in 0u64..1_000,
        scene_seed in 0u64..1_000,
        perm_seed in 0u64..1_000,
    ) {
        let cfg = small_model();
        let model = Model::new(&cfg, model_seed).unwrap();
        let scene = small_scene(scene_seed);
        let targets = SceneTargets::from_scene(&scene).unwrap();
        let perm = permutation(perm_seed, targets.num_instances());
        let relabeled = targets.reordered(&perm);
        let loss = |t: &SceneTargets| {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &scene, None).unwrap();
            let l = total_loss(&mut tape, &out.heads, t, &LossConfig::default(), true, None).unwrap();
            l.values(&tape).total
        };
        let (a, b) = (loss(&targets), loss(&relabeled));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}
