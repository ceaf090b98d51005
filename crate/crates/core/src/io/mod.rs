//! Reading and writing sparse models, ground truth and run configuration.

mod colmap;
mod config;
mod gt;

pub use colmap::{
    parse_sparse_model, parse_sparse_model_str, render_sparse_model, write_sparse_model, ModelBundle,
    CAMERAS_FILE, IMAGES_FILE, POINTS_FILE, QUATERNION_NORM_TOLERANCE,
};
pub use config::{load_config, parse_config, FeatureMode, RunConfig};
pub use gt::{
    load_ground_truth, parse_gt_extrinsics, parse_gt_extrinsics_str, render_gt_extrinsics,
    write_ground_truth, GroundTruth, GroundTruthCamera,
};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{CameraId, Extrinsics, FrameModel, Observation, Rig, TrackedPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SparseIoError {
    #[error("{file}:{line}: {reason}")]
    MalformedLine { file: String, line: usize, reason: String },
    #[error("unsupported camera model {0}")]
    UnsupportedCameraModel(String),
    #[error("dangling reference to {kind} {id}")]
    DanglingReference { kind: &'static str, id: u64 },
    #[error("duplicate {kind} {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("{file}:{line}: quaternion norm {norm} is too far from 1")]
    NonUnitQuaternion { file: String, line: usize, norm: f64 },
    #[error("no entry for camera {0}")]
    MissingCamera(CameraId),
    #[error("camera {name:?} of frame {frame} does not appear in the first frame")]
    UnknownCameraName { frame: usize, name: String },
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl SparseIoError {
    pub(crate) fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        SparseIoError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, SparseIoError> {
    std::fs::read_to_string(path).map_err(|e| SparseIoError::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), SparseIoError> {
    std::fs::write(path, text).map_err(|e| SparseIoError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SparseIoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SparseIoError::io(path, e))?;
    write_text(path, &(text + "\n"))
}

/// Parses every subdirectory of `dir` as one frame, in name order. Frame ids
/// are the positions in that order.
pub fn load_frames(dir: &Path) -> Result<Vec<ModelBundle>, SparseIoError> {
    let mut subdirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| SparseIoError::io(dir, e))? {
        let entry = entry.map_err(|e| SparseIoError::io(dir, e))?;
        if entry.path().is_dir() {
            subdirs.push(entry.path());
        }
    }
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(SparseIoError::io(dir, "no frame directories"));
    }
    subdirs
        .par_iter()
        .enumerate()
        .map(|(i, d)| parse_sparse_model(d, i as u32))
        .collect()
}

fn remap_frame(model: &FrameModel, map: &BTreeMap<CameraId, CameraId>) -> FrameModel {
    let id = |c: &CameraId| map[c];
    FrameModel {
        frame_id: model.frame_id,
        per_camera_pose: model.per_camera_pose.iter().map(|(c, p)| (id(c), *p)).collect(),
        per_camera_intrinsics: model.per_camera_intrinsics.iter().map(|(c, k)| (id(c), *k)).collect(),
        points: model
            .points
            .iter()
            .map(|p| TrackedPoint {
                point_id: p.point_id,
                position: p.position,
                track: p
                    .track
                    .iter()
                    .map(|o| Observation {
                        camera_id: id(&o.camera_id),
                        ..*o
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Builds a rig from per-frame bundles. Cameras are matched across frames by
/// name; rig camera ids are those of the first frame. Global intrinsics start
/// at the per-camera mean of the frame intrinsics.
pub fn assemble_rig(bundles: &[ModelBundle], gt: &BTreeMap<CameraId, Extrinsics>) -> Result<Rig, SparseIoError> {
    let first = bundles
        .first()
        .ok_or_else(|| SparseIoError::io(Path::new("."), "no frames"))?;
    let by_name: BTreeMap<&str, CameraId> = first.cameras.iter().map(|c| (c.name.as_str(), c.camera_id)).collect();
    let mut cameras = first.cameras.clone();
    for cam in &mut cameras {
        cam.gt_extrinsics = Some(*gt.get(&cam.camera_id).ok_or(SparseIoError::MissingCamera(cam.camera_id))?);
    }
    let mut frames = Vec::with_capacity(bundles.len());
    for (i, b) in bundles.iter().enumerate() {
        let mut map = BTreeMap::new();
        for c in &b.cameras {
            let id = by_name.get(c.name.as_str()).ok_or_else(|| SparseIoError::UnknownCameraName {
                frame: i,
                name: c.name.clone(),
            })?;
            map.insert(c.camera_id, *id);
        }
        frames.push(remap_frame(&b.model, &map));
    }
    let mut rig = Rig {
        cameras,
        global_intrinsics: BTreeMap::new(),
        frames,
    };
    rig.global_intrinsics = rig.mean_frame_intrinsics();
    Ok(rig)
}
