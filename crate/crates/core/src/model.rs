//! Domain types shared by the whole pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::Quat;
use crate::scalar::{Real, Vec2, Vec3};

pub type CameraId = u32;
pub type FrameId = u32;
pub type PointId = u64;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T = f64> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Parameter vector in the order fx, fy, cx, cy.
    pub fn to_array(&self) -> [T; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        let z = T::zero();
        self.fx > z
            && self.fy > z
            && self.cx >= z
            && self.cy >= z
            && self.cx < T::lit(width as f64)
            && self.cy < T::lit(height as f64)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics<T = f64> {
    pub rotation: Quat<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Extrinsics<T> {
    /// Builds a pose, normalizing and sign-canonicalizing the rotation.
    pub fn new(rotation: Quat<T>, translation: Vec3<T>) -> Self {
        Self {
            rotation: rotation.normalized().canonical(),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quat::identity(), [T::zero(); 3])
    }

    pub fn transform_point(&self, x: &Vec3<T>) -> Vec3<T> {
        let r = self.rotation.rotate(x);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        let inv = self.rotation.conjugate();
        let c = inv.rotate(&self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// The rotation as an axis-angle vector.
    pub fn axis_angle(&self) -> Vec3<T> {
        self.rotation.to_axis_angle()
    }

    /// Pose parameters `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_array(&self) -> [T; 7] {
        let q = &self.rotation;
        let t = &self.translation;
        [q.w, q.x, q.y, q.z, t[0], t[1], t[2]]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(Quat::new(v[0], v[1], v[2], v[3]), [v[4], v[5], v[6]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub camera_id: CameraId,
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub intrinsics: Intrinsics,
    pub gt_extrinsics: Option<Extrinsics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera_id: CameraId,
    /// Pixel coordinates; the center of the top-left pixel is (0.5, 0.5).
    pub keypoint: Vec2<f64>,
    /// Index of the keypoint within its image. Together with the frame and
    /// camera ids it addresses the observation's cost patch.
    pub keypoint_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedPoint {
    pub point_id: PointId,
    pub position: Vec3<f64>,
    pub track: Vec<Observation>,
}

/// One frame's sparse reconstruction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameModel {
    pub frame_id: FrameId,
    pub per_camera_pose: BTreeMap<CameraId, Extrinsics>,
    pub per_camera_intrinsics: BTreeMap<CameraId, Intrinsics>,
    pub points: Vec<TrackedPoint>,
}

impl FrameModel {
    pub fn observation_count(&self) -> usize {
        self.points.iter().map(|p| p.track.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rig {
    pub cameras: Vec<Camera>,
    pub global_intrinsics: BTreeMap<CameraId, Intrinsics>,
    pub frames: Vec<FrameModel>,
}

impl Rig {
    pub fn camera(&self, id: CameraId) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.camera_id == id)
    }

    pub fn dims(&self) -> BTreeMap<CameraId, (u32, u32)> {
        self.cameras
            .iter()
            .map(|c| (c.camera_id, (c.width, c.height)))
            .collect()
    }

    pub fn gt_extrinsics(&self) -> BTreeMap<CameraId, Extrinsics> {
        self.cameras
            .iter()
            .filter_map(|c| c.gt_extrinsics.map(|e| (c.camera_id, e)))
            .collect()
    }

    /// Per-camera arithmetic mean of the frame-specific intrinsics.
    pub fn mean_frame_intrinsics(&self) -> BTreeMap<CameraId, Intrinsics> {
        let mut sums: BTreeMap<CameraId, ([f64; 4], usize)> = BTreeMap::new();
        for frame in &self.frames {
            for (&id, k) in &frame.per_camera_intrinsics {
                let e = sums.entry(id).or_insert(([0.0; 4], 0));
                for (acc, v) in e.0.iter_mut().zip(k.to_array()) {
                    *acc += v;
                }
                e.1 += 1;
            }
        }
        sums.into_iter()
            .map(|(id, (s, n))| {
                let n = n as f64;
                (id, Intrinsics::new(s[0] / n, s[1] / n, s[2] / n, s[3] / n))
            })
            .collect()
    }
}

/// A broken invariant found by [`validate_rig`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewCameras(usize),
    NoFrames,
    DuplicateCamera(CameraId),
    EmptyImage(CameraId),
    InvalidIntrinsics { frame: Option<FrameId>, camera: CameraId },
    NonUnitRotation { frame: Option<FrameId>, camera: CameraId },
    UnknownCamera { frame: FrameId, camera: CameraId },
    MissingPose { frame: FrameId, camera: CameraId },
    MissingIntrinsics { frame: FrameId, camera: CameraId },
    ShortTrack { frame: FrameId, point: PointId, len: usize },
    RepeatedCamera { frame: FrameId, point: PointId, camera: CameraId },
    KeypointOutOfImage { frame: FrameId, point: PointId, camera: CameraId },
    NonFinitePoint { frame: FrameId, point: PointId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        let frame_str = |fr: &Option<FrameId>| match fr {
            Some(i) => format!("frame {i} "),
            None => String::new(),
        };
        match self {
            TooFewCameras(n) => write!(f, "rig has {n} cameras, at least 2 required"),
            NoFrames => write!(f, "rig has no frames"),
            DuplicateCamera(c) => write!(f, "camera id {c} is not unique"),
            EmptyImage(c) => write!(f, "camera {c} has zero image size"),
            InvalidIntrinsics { frame, camera } => {
                write!(f, "{}camera {camera} has invalid intrinsics", frame_str(frame))
            }
            NonUnitRotation { frame, camera } => {
                write!(f, "{}camera {camera} rotation is not a unit quaternion", frame_str(frame))
            }
            UnknownCamera { frame, camera } => {
                write!(f, "frame {frame} references unknown camera {camera}")
            }
            MissingPose { frame, camera } => {
                write!(f, "frame {frame} has no pose for camera {camera}")
            }
            MissingIntrinsics { frame, camera } => {
                write!(f, "frame {frame} has no intrinsics for camera {camera}")
            }
            ShortTrack { frame, point, len } => {
                write!(f, "frame {frame} point {point} has track length {len}")
            }
            RepeatedCamera { frame, point, camera } => {
                write!(f, "frame {frame} point {point} observed twice by camera {camera}")
            }
            KeypointOutOfImage { frame, point, camera } => {
                write!(f, "frame {frame} point {point} keypoint outside camera {camera}")
            }
            NonFinitePoint { frame, point } => {
                write!(f, "frame {frame} point {point} has non-finite coordinates")
            }
        }
    }
}

fn is_unit(q: &Quat<f64>) -> bool {
    (q.norm() - 1.0).abs() <= 1e-9
}

/// Checks every structural invariant of a rig. Returns an empty list when valid.
pub fn validate_rig(rig: &Rig) -> Vec<Violation> {
    let mut out = Vec::new();
    if rig.cameras.len() < 2 {
        out.push(Violation::TooFewCameras(rig.cameras.len()));
    }
    if rig.frames.is_empty() {
        out.push(Violation::NoFrames);
    }
    let mut dims = BTreeMap::new();
    for cam in &rig.cameras {
        if dims.insert(cam.camera_id, (cam.width, cam.height)).is_some() {
            out.push(Violation::DuplicateCamera(cam.camera_id));
        }
        if cam.width == 0 || cam.height == 0 {
            out.push(Violation::EmptyImage(cam.camera_id));
        }
        if !cam.intrinsics.is_valid_for(cam.width, cam.height) {
            out.push(Violation::InvalidIntrinsics {
                frame: None,
                camera: cam.camera_id,
            });
        }
        if let Some(e) = &cam.gt_extrinsics {
            if !is_unit(&e.rotation) {
                out.push(Violation::NonUnitRotation {
                    frame: None,
                    camera: cam.camera_id,
                });
            }
        }
    }
    for (&id, k) in &rig.global_intrinsics {
        match dims.get(&id) {
            Some(&(w, h)) if k.is_valid_for(w, h) => {}
            _ => out.push(Violation::InvalidIntrinsics {
                frame: None,
                camera: id,
            }),
        }
    }
    for frame in &rig.frames {
        validate_frame(frame, &dims, &mut out);
    }
    out
}

fn validate_frame(
    frame: &FrameModel,
    dims: &BTreeMap<CameraId, (u32, u32)>,
    out: &mut Vec<Violation>,
) {
    let fid = frame.frame_id;
    let referenced: BTreeSet<CameraId> = frame
        .per_camera_pose
        .keys()
        .chain(frame.per_camera_intrinsics.keys())
        .copied()
        .collect();
    for &camera in &referenced {
        if !dims.contains_key(&camera) {
            out.push(Violation::UnknownCamera { frame: fid, camera });
        }
    }
    for (&camera, e) in &frame.per_camera_pose {
        if !is_unit(&e.rotation) {
            out.push(Violation::NonUnitRotation {
                frame: Some(fid),
                camera,
            });
        }
    }
    for (&camera, k) in &frame.per_camera_intrinsics {
        if let Some(&(w, h)) = dims.get(&camera) {
            if !k.is_valid_for(w, h) {
                out.push(Violation::InvalidIntrinsics {
                    frame: Some(fid),
                    camera,
                });
            }
        }
    }
    let mut track_cams = BTreeSet::new();
    for p in &frame.points {
        if !p.position.iter().all(|v| v.is_finite()) {
            out.push(Violation::NonFinitePoint {
                frame: fid,
                point: p.point_id,
            });
        }
        if p.track.len() < 2 {
            out.push(Violation::ShortTrack {
                frame: fid,
                point: p.point_id,
                len: p.track.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for obs in &p.track {
            let camera = obs.camera_id;
            track_cams.insert(camera);
            if !seen.insert(camera) {
                out.push(Violation::RepeatedCamera {
                    frame: fid,
                    point: p.point_id,
                    camera,
                });
            }
            match dims.get(&camera) {
                Some(&(w, h)) => {
                    let [u, v] = obs.keypoint;
                    let inside = u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64;
                    if !inside {
                        out.push(Violation::KeypointOutOfImage {
                            frame: fid,
                            point: p.point_id,
                            camera,
                        });
                    }
                }
                None => {
                    if !referenced.contains(&camera) {
                        out.push(Violation::UnknownCamera { frame: fid, camera });
                    }
                }
            }
        }
    }
    for camera in track_cams {
        if !frame.per_camera_pose.contains_key(&camera) {
            out.push(Violation::MissingPose { frame: fid, camera });
        }
        if !frame.per_camera_intrinsics.contains_key(&camera) {
            out.push(Violation::MissingIntrinsics { frame: fid, camera });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_rig() -> Rig {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
        let cameras = (0..2)
            .map(|i| Camera {
                camera_id: i,
                name: format!("cam{i}"),
                width: 640,
                height: 480,
                intrinsics: k,
                gt_extrinsics: Some(Extrinsics::new(
                    Quat::identity(),
                    [i as f64 * 0.1, 0.0, 3.0],
                )),
            })
            .collect::<Vec<_>>();
        let mut frame = FrameModel {
            frame_id: 0,
            ..Default::default()
        };
        for c in &cameras {
            frame.per_camera_pose.insert(c.camera_id, c.gt_extrinsics.unwrap());
            frame.per_camera_intrinsics.insert(c.camera_id, k);
        }
        frame.points.push(TrackedPoint {
            point_id: 7,
            position: [0.0, 0.0, 0.0],
            track: vec![
                Observation {
                    camera_id: 0,
                    keypoint: [320.0, 240.0],
                    keypoint_index: 0,
                },
                Observation {
                    camera_id: 1,
                    keypoint: [336.7, 240.0],
                    keypoint_index: 0,
                },
            ],
        });
        Rig {
            cameras,
            global_intrinsics: BTreeMap::new(),
            frames: vec![frame],
        }
    }

    #[test]
    fn valid_rig_has_no_violations() {
        assert_eq!(validate_rig(&tiny_rig()), vec![]);
    }

    #[test]
    fn short_track_is_reported_by_point_id() {
        let mut rig = tiny_rig();
        rig.frames[0].points[0].track.pop();
        let v = validate_rig(&rig);
        assert_eq!(
            v,
            vec![Violation::ShortTrack {
                frame: 0,
                point: 7,
                len: 1
            }]
        );
        assert!(v[0].to_string().contains("point 7"));
    }

    #[test]
    fn single_camera_rig_is_rejected() {
        let mut rig = tiny_rig();
        rig.cameras.pop();
        let v = validate_rig(&rig);
        assert!(v.contains(&Violation::TooFewCameras(1)));
        assert!(v.contains(&Violation::UnknownCamera { frame: 0, camera: 1 }));
    }

    #[test]
    fn repeated_camera_and_out_of_image_keypoint() {
        let mut rig = tiny_rig();
        let track = &mut rig.frames[0].points[0].track;
        track[1].camera_id = 0;
        track[1].keypoint = [700.0, 10.0];
        let v = validate_rig(&rig);
        assert!(v.contains(&Violation::RepeatedCamera {
            frame: 0,
            point: 7,
            camera: 0
        }));
        assert!(v.contains(&Violation::KeypointOutOfImage {
            frame: 0,
            point: 7,
            camera: 0
        }));
    }

    #[test]
    fn mean_frame_intrinsics_averages_frames() {
        let mut rig = tiny_rig();
        let mut f2 = rig.frames[0].clone();
        f2.frame_id = 1;
        f2.per_camera_intrinsics.get_mut(&0).unwrap().fx = 510.0;
        rig.frames.push(f2);
        let mean = rig.mean_frame_intrinsics();
        assert_eq!(mean[&0].fx, 505.0);
        assert_eq!(mean[&1].fx, 500.0);
    }
}
