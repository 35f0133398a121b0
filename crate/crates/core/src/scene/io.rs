//! Scene file format: one JSON object with `points` (`[x,y,z,r,g,b]` rows)
//! and optional `superpoint_ids`, `instance_ids`, `instance_classes`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{grid_superpoints, InstanceGroundTruth, PointCloud, Scene, SuperpointPartition, DEFAULT_CELL};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    points: Vec<[f64; 6]>,
    #[serde(default)]
    superpoint_ids: Option<Vec<usize>>,
    #[serde(default)]
    instance_ids: Option<Vec<i64>>,
    #[serde(default)]
    instance_classes: Option<Vec<usize>>,
}

/// Parses a scene document. Scenes without `superpoint_ids` are
/// partitioned with the voxel grid at [`DEFAULT_CELL`].
pub fn parse_scene(text: &str, origin: &Path) -> Result<Scene> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let n = file.points.len();
    let coords = file.points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let colors = file.points.iter().map(|p| [p[3], p[4], p[5]]).collect();
    let cloud = PointCloud::new(coords, colors)?;

    let partition = match file.superpoint_ids {
        Some(ids) => {
            if ids.len() != n {
                return Err(Error::Validation(format!(
                    "superpoint_ids has {} entries for {n} points",
                    ids.len()
                )));
            }
            SuperpointPartition::new(ids)?
        }
        None => grid_superpoints(&cloud, DEFAULT_CELL)?,
    };

    let ground_truth = match (file.instance_ids, file.instance_classes) {
        (None, None) => None,
        (Some(ids), Some(classes)) => {
            if ids.len() != n {
                return Err(Error::Validation(format!(
                    "instance_ids has {} entries for {n} points",
                    ids.len()
                )));
            }
            Some(InstanceGroundTruth::new(ids, classes)?)
        }
        (Some(_), None) => return Err(Error::Validation("instance_ids given without instance_classes".into())),
        (None, Some(_)) => return Err(Error::Validation("instance_classes given without instance_ids".into())),
    };
    Scene::new(cloud, partition, ground_truth)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, path)
}

fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("finite float")
}

fn int_list<T: ToString>(items: &[T]) -> String {
    let parts: Vec<String> = items.iter().map(ToString::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// Serializes a scene with one point per line. Floats use shortest
/// round-trip formatting, so loading the output is bit-exact.
pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = String::from("{\n  \"points\": [\n");
    let n = scene.num_points();
    for (i, (p, c)) in scene.cloud.coords.iter().zip(&scene.cloud.colors).enumerate() {
        let vals: Vec<String> = p.iter().chain(c.iter()).map(|v| num(*v)).collect();
        let sep = if i + 1 < n { "," } else { "" };
        let _ = writeln!(out, "    [{}]{sep}", vals.join(", "));
    }
    out.push_str("  ],\n");
    let _ = write!(out, "  \"superpoint_ids\": {}", int_list(scene.partition.ids()));
    if let Some(gt) = &scene.ground_truth {
        let _ = write!(out, ",\n  \"instance_ids\": {}", int_list(&gt.instance_ids));
        let _ = write!(out, ",\n  \"instance_classes\": {}", int_list(&gt.classes));
    }
    out.push_str("\n}\n");
    out
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}
