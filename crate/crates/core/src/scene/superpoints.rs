use std::collections::HashMap;

use super::{PointCloud, Scene, SuperpointInstanceMasks, SuperpointPartition};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Voxel-grid oversegmentation: points in the same `cell`-sized voxel
/// share a superpoint. Ids are assigned in order of first occurrence.
pub fn grid_superpoints(cloud: &PointCloud, cell: f64) -> Result<SuperpointPartition> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::Contract(format!("grid cell must be positive, got {cell}")));
    }
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let ids = cloud
        .coords
        .iter()
        .map(|p| {
            let key = p.map(|v| (v / cell).floor() as i64);
            let next = index.len();
            *index.entry(key).or_insert(next)
        })
        .collect();
    SuperpointPartition::new(ids)
}

/// Hard superpoint labels: superpoint `j` belongs to instance `k` iff
/// strictly more than half of its points carry instance id `k`.
pub fn project_instance_to_superpoints(scene: &Scene) -> Result<SuperpointInstanceMasks> {
    let gt = scene.ground_truth()?;
    let m = scene.num_superpoints();
    let n_gt = gt.num_instances();
    let sizes = scene.partition.member_counts();
    let mut votes = vec![0usize; n_gt * m];
    for (&sp, &inst) in scene.partition.ids().iter().zip(&gt.instance_ids) {
        if inst >= 0 {
            votes[inst as usize * m + sp] += 1;
        }
    }
    let data = votes
        .iter()
        .enumerate()
        .map(|(i, &v)| if 2 * v > sizes[i % m] { 1.0 } else { 0.0 })
        .collect();
    let masks = Tensor::new(vec![n_gt, m], data)?;
    Ok(SuperpointInstanceMasks::from_tensor(masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::InstanceGroundTruth;

    fn cloud(coords: Vec<[f64; 3]>) -> PointCloud {
        let colors = vec![[0.5; 3]; coords.len()];
        PointCloud::new(coords, colors).unwrap()
    }

    #[test]
    fn same_and_different_cells() {
        let c = cloud(vec![[0.1, 0.1, 0.1], [0.15, 0.1, 0.1], [0.9, 0.1, 0.1]]);
        let p = grid_superpoints(&c, 0.5).unwrap();
        assert_eq!(p.ids(), &[0, 0, 1]);
        assert_eq!(p.count(), 2);
    }

    #[test]
    fn unit_cube_corners_give_eight_cells() {
        let eps = 1e-9;
        let mut coords = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    coords.push([x - eps, y - eps, z - eps]);
                }
            }
        }
        let p = grid_superpoints(&cloud(coords), 0.5).unwrap();
        assert_eq!(p.count(), 8);
    }

    #[test]
    fn rejects_nonpositive_cell() {
        let c = cloud(vec![[0.0; 3]]);
        assert!(grid_superpoints(&c, 0.0).is_err());
    }

    fn single_superpoint_scene(ids: Vec<i64>, n_gt: usize) -> Scene {
        let n = ids.len();
        let c = cloud(vec![[0.0; 3]; n]);
        let part = SuperpointPartition::new(vec![0; n]).unwrap();
        // Every declared instance needs a point; pad with extra superpoints.
        let mut inst = ids;
        let mut coords = c.coords.clone();
        let mut sp = part.ids().to_vec();
        for k in 0..n_gt {
            if !inst.contains(&(k as i64)) {
                inst.push(k as i64);
                coords.push([10.0 + k as f64, 0.0, 0.0]);
                sp.push(sp.iter().max().unwrap() + 1);
            }
        }
        let colors = vec![[0.5; 3]; coords.len()];
        let gt = InstanceGroundTruth::new(inst, vec![0; n_gt]).unwrap();
        Scene::new(
            PointCloud::new(coords, colors).unwrap(),
            SuperpointPartition::new(sp).unwrap(),
            Some(gt),
        )
        .unwrap()
    }

    #[test]
    fn strict_majority_rule() {
        // [7,7,3] -> instance 7
        let s = single_superpoint_scene(vec![7, 7, 3], 8);
        let m = project_instance_to_superpoints(&s).unwrap();
        assert_eq!(m.mask(7)[0], 1.0);
        assert_eq!(m.mask(3)[0], 0.0);

        // [7,3] -> nobody
        let s = single_superpoint_scene(vec![7, 3], 8);
        let m = project_instance_to_superpoints(&s).unwrap();
        assert!((0..8).all(|k| m.mask(k)[0] == 0.0));

        // [-1,-1,5] -> nobody
        let s = single_superpoint_scene(vec![-1, -1, 5], 6);
        let m = project_instance_to_superpoints(&s).unwrap();
        assert!((0..6).all(|k| m.mask(k)[0] == 0.0));
    }

    #[test]
    fn missing_ground_truth_is_contract_error() {
        let c = cloud(vec![[0.0; 3]]);
        let s = Scene::new(c, SuperpointPartition::new(vec![0]).unwrap(), None).unwrap();
        assert!(matches!(project_instance_to_superpoints(&s), Err(Error::Contract(_))));
    }
}
