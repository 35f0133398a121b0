//! Seeded synthetic rooms: box and ellipsoid objects on a floor of clutter.
//!
//! The generator uses `ChaCha8Rng::seed_from_u64`, so a scene is a pure
//! function of `(seed, spec)` on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{grid_superpoints, InstanceGroundTruth, PointCloud, Scene, DEFAULT_CELL};
use crate::error::{Error, Result};

/// Objects sit in slots of this edge length (meters) so that every object
/// fits inside one slot with room to spare.
const SLOT: f64 = 1.0;
/// Objects float above the floor clutter so no voxel mixes the two.
const OBJECT_BASE: f64 = 0.6;
const FLOOR_THICKNESS: f64 = 0.05;
const BACKGROUND_COLOR: [f64; 3] = [0.45, 0.45, 0.45];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_instances: usize,
    pub points_per_instance: usize,
    pub num_classes: usize,
    pub noise_scale: f64,
    pub room_extent: f64,
    #[serde(default = "default_background")]
    pub background_points: usize,
    #[serde(default = "default_cell")]
    pub cell: f64,
}

fn default_background() -> usize {
    64
}

fn default_cell() -> f64 {
    DEFAULT_CELL
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_instances: 3,
            points_per_instance: 48,
            num_classes: 4,
            noise_scale: 0.01,
            room_extent: 4.0,
            background_points: default_background(),
            cell: DEFAULT_CELL,
        }
    }
}

/// Base color of each class, evenly spaced hues at full saturation.
pub(crate) fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let h = class as f64 / num_classes.max(1) as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // Keep away from the 0/1 bounds so color jitter has room.
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

fn sample_object(rng: &mut ChaCha8Rng, center: [f64; 3], half: [f64; 3], ellipsoid: bool) -> [f64; 3] {
    loop {
        let u: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if ellipsoid && u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        return [
            center[0] + u[0] * half[0],
            center[1] + u[1] * half[1],
            center[2] + u[2] * half[2],
        ];
    }
}

pub fn generate_synthetic_scene(seed: u64, spec: &SyntheticSpec) -> Result<Scene> {
    if spec.num_instances == 0 || spec.points_per_instance == 0 {
        return Err(Error::Contract(
            "synthetic scene needs at least one instance with at least one point".into(),
        ));
    }
    if spec.num_classes == 0 {
        return Err(Error::Contract("synthetic scene needs at least one class".into()));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(Error::Contract(format!("noise_scale {} is invalid", spec.noise_scale)));
    }
    let per_axis = (spec.room_extent / SLOT).floor() as usize;
    if per_axis * per_axis < spec.num_instances {
        return Err(Error::Contract(format!(
            "room extent {} m holds {} objects, asked for {}",
            spec.room_extent,
            per_axis * per_axis,
            spec.num_instances
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (spec.noise_scale > 0.0).then(|| Normal::new(0.0, spec.noise_scale).expect("valid std"));
    let jitter = |rng: &mut ChaCha8Rng| noise.as_ref().map_or(0.0, |n| n.sample(rng));

    let mut slots: Vec<usize> = (0..per_axis * per_axis).collect();
    slots.shuffle(&mut rng);

    let mut points: Vec<([f64; 3], [f64; 3], i64)> = Vec::new();
    let mut classes = Vec::with_capacity(spec.num_instances);
    for (k, &slot) in slots.iter().take(spec.num_instances).enumerate() {
        let class = rng.random_range(0..spec.num_classes);
        classes.push(class);
        let half = [
            rng.random_range(0.1..0.2),
            rng.random_range(0.1..0.2),
            rng.random_range(0.1..0.2),
        ];
        let center = [
            (slot % per_axis) as f64 * SLOT + 0.5 * SLOT + rng.random_range(-0.1..0.1),
            (slot / per_axis) as f64 * SLOT + 0.5 * SLOT + rng.random_range(-0.1..0.1),
            OBJECT_BASE + half[2],
        ];
        let base = class_color(class, spec.num_classes);
        let ellipsoid = class % 2 == 1;
        for _ in 0..spec.points_per_instance {
            let mut p = sample_object(&mut rng, center, half, ellipsoid);
            for v in &mut p {
                *v += jitter(&mut rng);
            }
            let c = base.map(|b| (b + jitter(&mut rng)).clamp(0.0, 1.0));
            points.push((p, c, k as i64));
        }
    }
    for _ in 0..spec.background_points {
        let p = [
            rng.random_range(0.0..spec.room_extent),
            rng.random_range(0.0..spec.room_extent),
            rng.random_range(0.0..FLOOR_THICKNESS),
        ];
        let c = BACKGROUND_COLOR.map(|b| (b + jitter(&mut rng)).clamp(0.0, 1.0));
        points.push((p, c, -1));
    }
    points.shuffle(&mut rng);

    let coords = points.iter().map(|p| p.0).collect();
    let colors = points.iter().map(|p| p.1).collect();
    let instance_ids = points.iter().map(|p| p.2).collect();
    let cloud = PointCloud::new(coords, colors)?;
    let partition = grid_superpoints(&cloud, spec.cell)?;
    let gt = InstanceGroundTruth::new(instance_ids, classes)?;
    Scene::new(cloud, partition, Some(gt))
}

/// A deterministic collection of synthetic scenes with a varying number of
/// instances per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSetSpec {
    pub num_scenes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub points_per_instance: usize,
    pub num_classes: usize,
    pub noise_scale: f64,
    pub room_extent: f64,
    pub background_points: usize,
    pub cell: f64,
}

impl Default for SceneSetSpec {
    fn default() -> Self {
        Self {
            num_scenes: 8,
            min_instances: 2,
            max_instances: 4,
            points_per_instance: 48,
            num_classes: 4,
            noise_scale: 0.01,
            room_extent: 4.0,
            background_points: 64,
            cell: DEFAULT_CELL,
        }
    }
}

pub fn generate_scene_set(seed: u64, spec: &SceneSetSpec) -> Result<Vec<Scene>> {
    if spec.min_instances == 0 || spec.min_instances > spec.max_instances {
        return Err(Error::Contract(format!(
            "instance range {}..={} is invalid",
            spec.min_instances, spec.max_instances
        )));
    }
    let mut counts = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.num_scenes)
        .map(|i| {
            let num_instances = counts.random_range(spec.min_instances..=spec.max_instances);
            let scene_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            let single = SyntheticSpec {
                num_instances,
                points_per_instance: spec.points_per_instance,
                num_classes: spec.num_classes,
                noise_scale: spec.noise_scale,
                room_extent: spec.room_extent,
                background_points: spec.background_points,
                cell: spec.cell,
            };
            generate_synthetic_scene(scene_seed, &single)
        })
        .collect()
}
