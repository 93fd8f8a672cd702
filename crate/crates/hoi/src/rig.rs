//! JSON rig, pose and keypoint-detection files.

use std::path::Path;

use hoi_core::convert::{Keypoint, ViewDetections};
use hoi_core::geometry::{parse_obj, Camera, TriangleMesh};
use hoi_core::skeleton::{Joint, Pose, SkinWeights, SkinnedMesh, Skeleton};
use hoi_core::Vec3;
use hoi_core::nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{format_error, read_text, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub name: String,
    /// Parent index, -1 for the root.
    pub parent: i64,
    pub rest_position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub joints: Vec<JointRecord>,
    pub rest_pose: Vec<[f64; 3]>,
    /// Per vertex, `[bone, weight]` pairs.
    pub weights: Vec<Vec<(usize, f64)>>,
    /// Rest geometry, relative to the rig file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
}

impl RigFile {
    pub fn from_skinned(skinned: &SkinnedMesh, mesh: Option<String>) -> Self {
        let s = skinned.skeleton();
        Self {
            joints: s
                .joints()
                .iter()
                .map(|j| JointRecord {
                    name: j.name.clone(),
                    parent: j.parent.map_or(-1, |p| p as i64),
                    rest_position: j.rest_position.into(),
                })
                .collect(),
            rest_pose: s.rest_rotations().iter().map(|&w| w.into()).collect(),
            weights: skinned.weights().rows().to_vec(),
            mesh,
        }
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        let joints = self
            .joints
            .iter()
            .map(|j| {
                let parent = match j.parent {
                    -1 => None,
                    p if p >= 0 => Some(p as usize),
                    p => return Err(format_error(format!("joint {:?} has parent {p}", j.name))),
                };
                Ok(Joint {
                    name: j.name.clone(),
                    parent,
                    rest_position: Vec3::from(j.rest_position),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Skeleton::new(joints, self.rest_pose.iter().map(|&w| Vec3::from(w)).collect())?)
    }

    pub fn skinned(&self, mesh: TriangleMesh) -> Result<SkinnedMesh> {
        let skeleton = self.skeleton()?;
        let weights = SkinWeights::new(self.weights.clone(), skeleton.bone_count())?;
        Ok(SkinnedMesh::new(mesh, skeleton, weights)?)
    }
}

/// Loads a rig; `mesh` overrides the file's own mesh reference.
pub fn load_rig(path: &Path, mesh: Option<&Path>) -> Result<SkinnedMesh> {
    let rig: RigFile = serde_json::from_str(&read_text(path)?)?;
    let mesh_path = match (mesh, &rig.mesh) {
        (Some(m), _) => m.to_owned(),
        (None, Some(rel)) => path.parent().unwrap_or(Path::new(".")).join(rel),
        (None, None) => return Err(format_error("rig file names no mesh and none was given")),
    };
    let mesh = parse_obj(&read_text(&mesh_path)?)?;
    rig.skinned(mesh)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub root_translation: [f64; 3],
    pub rotations: Vec<[f64; 3]>,
}

impl From<&Pose> for PoseFile {
    fn from(p: &Pose) -> Self {
        Self {
            root_translation: p.root_translation.into(),
            rotations: p.rotations.iter().map(|&w| w.into()).collect(),
        }
    }
}

impl From<&PoseFile> for Pose {
    fn from(p: &PoseFile) -> Self {
        Pose::new(
            p.rotations.iter().map(|&w| Vec3::from(w)).collect(),
            Vec3::from(p.root_translation),
        )
    }
}

pub fn pose_to_json(pose: &Pose) -> String {
    serde_json::to_string_pretty(&PoseFile::from(pose)).expect("plain data")
}

pub fn pose_from_json(text: &str) -> Result<Pose> {
    let p: PoseFile = serde_json::from_str(text)?;
    Ok(Pose::from(&p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view: usize,
    pub keypoints: Vec<KeypointRecord>,
}

pub fn detections_to_json(views: &[ViewDetections]) -> String {
    let records: Vec<ViewRecord> = views
        .iter()
        .enumerate()
        .map(|(view, v)| ViewRecord {
            view,
            keypoints: v
                .keypoints
                .iter()
                .map(|k| KeypointRecord {
                    id: k.id,
                    x: k.pixel.x,
                    y: k.pixel.y,
                    conf: k.confidence,
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("plain data")
}

/// Pairs detection records with the cameras of the views they index.
pub fn detections_from_json(text: &str, cameras: &[Camera]) -> Result<Vec<ViewDetections>> {
    let records: Vec<ViewRecord> = serde_json::from_str(text)?;
    records
        .into_iter()
        .map(|r| {
            let camera = cameras
                .get(r.view)
                .ok_or_else(|| format_error(format!("detections name view {} of {}", r.view, cameras.len())))?
                .clone();
            let keypoints = r
                .keypoints
                .into_iter()
                .map(|k| {
                    if !(0.0..=1.0).contains(&k.conf) {
                        return Err(format_error(format!("confidence {} outside [0, 1]", k.conf)));
                    }
                    Ok(Keypoint {
                        id: k.id,
                        pixel: Vector2::new(k.x, k.y),
                        confidence: k.conf,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ViewDetections { camera, keypoints })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use hoi_core::demo::{demo_humanoid, seated_pose};

    #[test]
    fn rig_round_trip() {
        let h = demo_humanoid();
        let rig = RigFile::from_skinned(&h, Some("human.obj".into()));
        let text = serde_json::to_string(&rig).unwrap();
        let back: RigFile = serde_json::from_str(&text).unwrap();
        let s = back.skinned(h.mesh().clone()).unwrap();
        assert_eq!(s.skeleton(), h.skeleton());
        assert_eq!(s.weights(), h.weights());
    }

    #[test]
    fn pose_round_trip() {
        let p = seated_pose();
        assert_eq!(pose_from_json(&pose_to_json(&p)).unwrap(), p);
        assert!(pose_from_json("{\"rotations\": []}").is_err());
    }

    #[test]
    fn detections_validate_views_and_confidence() {
        let cam = Camera::orbit(0.0, 0.3, 3.0, 0.7, 8, 8).unwrap();
        let ok = r#"[{"view":0,"keypoints":[{"id":3,"x":1.5,"y":2.0,"conf":0.9}]}]"#;
        let v = detections_from_json(ok, &[cam.clone()]).unwrap();
        assert_eq!(v[0].keypoints[0].id, 3);
        assert_eq!(detections_from_json(&detections_to_json(&v), &[cam.clone()]).unwrap(), v);
        assert!(detections_from_json(r#"[{"view":1,"keypoints":[]}]"#, &[cam.clone()]).is_err());
        assert!(detections_from_json(r#"[{"view":0,"keypoints":[{"id":0,"x":0,"y":0,"conf":2}]}]"#, &[cam]).is_err());
    }
}
