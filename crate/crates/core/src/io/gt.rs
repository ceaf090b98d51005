//! Ground-truth extrinsics (`CAMERA_ID QW QX QY QZ TX TY TZ`, world to camera)
//! and the ground-truth JSON written by the synthetic generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Camera, CameraId, Extrinsics, Intrinsics};

use super::colmap::checked_quaternion;
use super::{read_text, write_json, SparseIoError};

const GT_FILE: &str = "gt_extrinsics";

/// Parses ground-truth extrinsics and checks that every id in `required` is present.
pub fn parse_gt_extrinsics_str(
    text: &str,
    required: &[CameraId],
) -> Result<BTreeMap<CameraId, Extrinsics>, SparseIoError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: &str| SparseIoError::MalformedLine {
            file: GT_FILE.into(),
            line: n,
            reason: reason.into(),
        };
        if tok.len() != 8 {
            return Err(bad("expected CAMERA_ID QW QX QY QZ TX TY TZ"));
        }
        let id: CameraId = tok[0].parse().map_err(|_| bad("invalid camera id"))?;
        let mut v = [0.0; 7];
        for (slot, t) in v.iter_mut().zip(&tok[1..]) {
            *slot = t
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad("invalid number"))?;
        }
        let q = checked_quaternion(GT_FILE, n, [v[0], v[1], v[2], v[3]])?;
        let pose = Extrinsics {
            rotation: q,
            translation: [v[4], v[5], v[6]],
        };
        if out.insert(id, pose).is_some() {
            return Err(SparseIoError::DuplicateId {
                kind: "camera",
                id: id as u64,
            });
        }
    }
    if let Some(&missing) = required.iter().find(|id| !out.contains_key(id)) {
        return Err(SparseIoError::MissingCamera(missing));
    }
    Ok(out)
}

pub fn parse_gt_extrinsics(path: &Path, required: &[CameraId]) -> Result<BTreeMap<CameraId, Extrinsics>, SparseIoError> {
    parse_gt_extrinsics_str(&read_text(path)?, required)
}

pub fn render_gt_extrinsics(gt: &BTreeMap<CameraId, Extrinsics>) -> String {
    let mut s = String::from("# CAMERA_ID QW QX QY QZ TX TY TZ (world to camera)\n");
    for (id, e) in gt {
        let q = e.rotation;
        let t = e.translation;
        let _ = writeln!(
            s,
            "{id} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            q.w, q.x, q.y, q.z, t[0], t[1], t[2]
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCamera {
    pub camera_id: CameraId,
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub intrinsics: Intrinsics,
    /// `[qw, qx, qy, qz, tx, ty, tz]`.
    pub extrinsics: [f64; 7],
}

/// Ground-truth camera table used for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cameras: Vec<GroundTruthCamera>,
}

impl GroundTruth {
    pub fn from_cameras(cameras: &[Camera]) -> Self {
        Self {
            cameras: cameras
                .iter()
                .map(|c| GroundTruthCamera {
                    camera_id: c.camera_id,
                    name: c.name.clone(),
                    width: c.width,
                    height: c.height,
                    intrinsics: c.intrinsics,
                    extrinsics: c.gt_extrinsics.unwrap_or_else(Extrinsics::identity).to_array(),
                })
                .collect(),
        }
    }

    pub fn intrinsics(&self) -> BTreeMap<CameraId, Intrinsics> {
        self.cameras.iter().map(|c| (c.camera_id, c.intrinsics)).collect()
    }

    pub fn dims(&self) -> BTreeMap<CameraId, (u32, u32)> {
        self.cameras.iter().map(|c| (c.camera_id, (c.width, c.height))).collect()
    }
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, SparseIoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| SparseIoError::io(path, e))
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<(), SparseIoError> {
    write_json(path, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_line() {
        let gt = parse_gt_extrinsics_str("# header\n3 1 0 0 0 0 0 0\n", &[3]).unwrap();
        assert_eq!(gt[&3], Extrinsics::identity());
    }

    #[test]
    fn near_unit_quaternion_is_renormalized() {
        let gt = parse_gt_extrinsics_str("1 1.0005 0 0 0 1 2 3\n", &[]).unwrap();
        assert!((gt[&1].rotation.norm() - 1.0).abs() < 1e-15);
        assert!(matches!(
            parse_gt_extrinsics_str("1 1.01 0 0 0 1 2 3\n", &[]),
            Err(SparseIoError::NonUnitQuaternion { line: 1, .. })
        ));
    }

    #[test]
    fn missing_camera_is_named() {
        assert_eq!(
            parse_gt_extrinsics_str("1 1 0 0 0 0 0 0\n", &[1, 2]),
            Err(SparseIoError::MissingCamera(2))
        );
    }

    #[test]
    fn render_round_trip() {
        let mut gt = BTreeMap::new();
        gt.insert(
            4,
            Extrinsics::new(crate::geometry::Quat::from_axis_angle(&[0.1, -0.2, 0.3]), [0.5, -1.0, 3.0]),
        );
        let again = parse_gt_extrinsics_str(&render_gt_extrinsics(&gt), &[4]).unwrap();
        for (a, b) in again[&4].to_array().iter().zip(gt[&4].to_array()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
