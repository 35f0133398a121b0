//! Point-cloud scenes with superpoint partitions and instance ground truth.

mod io;
mod superpoints;
mod synth;

pub use io::{load_scene, parse_scene, save_scene, scene_to_string};
pub use superpoints::{grid_superpoints, project_instance_to_superpoints};
pub use synth::{generate_scene_set, generate_synthetic_scene, SceneSetSpec, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default voxel edge (meters) used when a scene file carries no
/// precomputed superpoints.
pub const DEFAULT_CELL: f64 = 0.5;

/// `N` points with xyz coordinates (meters) and rgb colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let cloud = Self { coords, colors };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Validation("point cloud is empty".into()));
        }
        if self.coords.len() != self.colors.len() {
            return Err(Error::Validation(format!(
                "{} coordinates but {} colors",
                self.coords.len(),
                self.colors.len()
            )));
        }
        if let Some(i) = self.coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!("point {i} has non-finite coordinates")));
        }
        if let Some(i) = self
            .colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Validation(format!("point {i} has a color outside [0, 1]")));
        }
        Ok(())
    }

    /// `[N × 6]` tensor with rows `x, y, z, r, g, b`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .coords
            .iter()
            .zip(&self.colors)
            .flat_map(|(p, c)| p.iter().chain(c.iter()).copied())
            .collect();
        Tensor::new(vec![self.len(), 6], data).expect("six values per point")
    }
}

/// Superpoint id per point, compacted to `0..count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointPartition {
    ids: Vec<usize>,
    count: usize,
}

impl SuperpointPartition {
    /// Validates that ids cover `0..M` with every superpoint non-empty,
    /// where `M = max id + 1`.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let count = ids.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        for &id in &ids {
            seen[id] = true;
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("superpoint {j} of 0..{count} has no points")));
        }
        Ok(Self { ids, count })
    }

    /// As [`SuperpointPartition::new`], also checking that every id is
    /// below a declared superpoint count.
    pub fn with_count(ids: Vec<usize>, count: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&id| id >= count) {
            return Err(Error::Validation(format!(
                "superpoint id {bad} out of range 0..{count}"
            )));
        }
        let p = Self::new(ids)?;
        if p.count != count {
            return Err(Error::Validation(format!(
                "superpoints {}..{count} have no points",
                p.count
            )));
        }
        Ok(p)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of points in each superpoint.
    pub fn member_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.count];
        for &id in &self.ids {
            counts[id] += 1;
        }
        counts
    }
}

/// Per-point instance ids (`-1` for background) and per-instance classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceGroundTruth {
    pub instance_ids: Vec<i64>,
    pub classes: Vec<usize>,
}

impl InstanceGroundTruth {
    pub fn new(instance_ids: Vec<i64>, classes: Vec<usize>) -> Result<Self> {
        let gt = Self { instance_ids, classes };
        gt.validate()?;
        Ok(gt)
    }

    pub fn num_instances(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_gt = self.classes.len();
        let mut sizes = vec![0usize; n_gt];
        for (i, &id) in self.instance_ids.iter().enumerate() {
            if id < -1 || id >= n_gt as i64 {
                return Err(Error::Validation(format!(
                    "point {i} has instance id {id}, expected -1 or 0..{n_gt}"
                )));
            }
            if id >= 0 {
                sizes[id as usize] += 1;
            }
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Validation(format!("instance {k} has no points")));
        }
        Ok(())
    }

    /// Point indices of instance `k`.
    pub fn instance_points(&self, k: usize) -> Vec<usize> {
        self.instance_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == k as i64)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A point cloud, its superpoints, and optional instance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub partition: SuperpointPartition,
    pub ground_truth: Option<InstanceGroundTruth>,
}

impl Scene {
    pub fn new(
        cloud: PointCloud,
        partition: SuperpointPartition,
        ground_truth: Option<InstanceGroundTruth>,
    ) -> Result<Self> {
        cloud.validate()?;
        if partition.len() != cloud.len() {
            return Err(Error::Validation(format!(
                "{} points but {} superpoint ids",
                cloud.len(),
                partition.len()
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.instance_ids.len() != cloud.len() {
                return Err(Error::Validation(format!(
                    "{} points but {} instance ids",
                    cloud.len(),
                    gt.instance_ids.len()
                )));
            }
            gt.validate()?;
        }
        Ok(Self {
            cloud,
            partition,
            ground_truth,
        })
    }

    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }

    pub fn num_superpoints(&self) -> usize {
        self.partition.count()
    }

    pub fn ground_truth(&self) -> Result<&InstanceGroundTruth> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::Contract("scene has no instance ground truth".into()))
    }
}

/// Hard superpoint labels: `[N_gt × M]` with entry `(k, j) = 1` iff
/// superpoint `j` belongs to instance `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointInstanceMasks {
    masks: Tensor,
}

impl SuperpointInstanceMasks {
    pub(crate) fn from_tensor(masks: Tensor) -> Self {
        Self { masks }
    }

    pub fn num_instances(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn num_superpoints(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn mask(&self, k: usize) -> &[f64] {
        self.masks.row(k)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.masks
    }

    /// Masks with the instance axis reordered: row `i` of the result is
    /// row `order[i]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            masks: self.masks.select_rows(order),
        }
    }
}
