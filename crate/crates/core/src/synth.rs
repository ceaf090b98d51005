//! Deterministic synthetic camera domes with ground truth.
//!
//! Cameras sit on a sphere of radius 3 around the origin and look at it.
//! Each frame observes its own points drawn from the unit ball. The initial
//! rig carries per-frame perturbed intrinsics and extrinsics, and noisy
//! keypoints. Cost patches are quadratic bowls centred on the noise-free
//! projections.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::features::{node_position, patch_origin, CostPatch, CostStore, PatchKey, COST_CHANNELS, PATCH_SIZE};
use crate::geometry::{project, Quat};
use crate::model::{Camera, CameraId, Extrinsics, FrameModel, Intrinsics, Observation, Rig, TrackedPoint};
use crate::scalar::{cross3, norm3, scale3, Vec3};

pub const DOME_RADIUS: f64 = 3.0;
pub const IMAGE_WIDTH: u32 = 1024;
pub const IMAGE_HEIGHT: u32 = 768;
/// Keypoints closer than this to the image border are not observed, so every
/// observation has a full cost patch around it.
pub const BORDER_MARGIN: f64 = 12.0;
pub const MIN_TRACKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid parameter {0}")]
    InvalidParameter(String),
    #[error("frame {frame} has only {tracks} valid tracks")]
    DegenerateConfiguration { frame: u32, tracks: usize },
}

/// Perturbations applied to the initial rig and observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Noise {
    /// Standard deviation of the Gaussian keypoint noise, px.
    pub keypoint_sigma: f64,
    /// Constant keypoint displacement per camera, px, in a random direction.
    pub keypoint_bias: f64,
    /// Relative focal perturbation, applied with a random sign per component.
    pub focal_rel: f64,
    /// Principal point perturbation, px, random sign per component.
    pub pp_abs: f64,
    /// Rotation perturbation, degrees, about a random axis.
    pub rotation_deg: f64,
    /// Translation perturbation length, world units, random direction.
    pub translation: f64,
    /// Standard deviation of the initial point positions, world units.
    pub point_jitter: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Self {
            keypoint_sigma: 0.0,
            keypoint_bias: 0.0,
            focal_rel: 0.01,
            pp_abs: 3.0,
            rotation_deg: 0.5,
            translation: 0.01,
            point_jitter: 0.0,
        }
    }
}

impl Noise {
    pub fn noise_free() -> Self {
        Self {
            focal_rel: 0.0,
            pp_abs: 0.0,
            rotation_deg: 0.0,
            translation: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Ground-truth intrinsics, extrinsics and points; exact keypoints.
    pub ground_truth: Rig,
    /// Perturbed rig to refine; observations carry the keypoint noise.
    pub initial: Rig,
    /// Bowl-shaped cost patches keyed by the initial rig's observations.
    pub costs: CostStore<f64>,
    /// Tracks observed by each camera, summed over frames.
    pub tracks_per_camera: BTreeMap<CameraId, usize>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    loop {
        let v: Vec3<f64> = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm3(&v);
        if n > 1e-9 {
            return scale3(&v, 1.0 / n);
        }
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// World-to-camera pose of a camera at `center` looking at the origin.
pub fn look_at_origin(center: &Vec3<f64>) -> Extrinsics {
    let z = scale3(center, -1.0 / norm3(center));
    let up = if z[2].abs() > 0.95 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
    // image y points down, so the camera x axis is forward x up
    let x = cross3(&z, &up);
    let x = scale3(&x, 1.0 / norm3(&x));
    let y = cross3(&z, &x);
    let r = [x, y, z];
    let q = rotation_to_quat(&r);
    let rc = q.rotate(center);
    Extrinsics::new(q, [-rc[0], -rc[1], -rc[2]])
}

fn rotation_to_quat(m: &[[f64; 3]; 3]) -> Quat<f64> {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quat::new(0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s)
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        Quat::new((m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s)
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        Quat::new((m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s)
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        Quat::new((m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s)
    };
    q.normalized().canonical()
}

/// Camera centres on a Fibonacci lattice over the upper part of the sphere.
fn dome_centers(n: usize) -> Vec<Vec3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let (z_top, z_bottom) = (0.95, -0.3);
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = z_top + (z_bottom - z_top) * t;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [DOME_RADIUS * r * phi.cos(), DOME_RADIUS * r * phi.sin(), DOME_RADIUS * z]
        })
        .collect()
}

fn inside(p: &[f64; 2]) -> bool {
    p[0] >= BORDER_MARGIN
        && p[1] >= BORDER_MARGIN
        && p[0] <= IMAGE_WIDTH as f64 - BORDER_MARGIN
        && p[1] <= IMAGE_HEIGHT as f64 - BORDER_MARGIN
}

/// Cost patch `k * |p - center|^2` sampled at the nodes of the patch around
/// `keypoint`, with its analytic derivatives.
pub fn bowl_patch(key: PatchKey, keypoint: [f64; 2], center: [f64; 2], curvature: f64) -> CostPatch<f64> {
    let origin = patch_origin(keypoint, IMAGE_WIDTH, IMAGE_HEIGHT);
    let mut data = vec![0.0; PATCH_SIZE * PATCH_SIZE * COST_CHANNELS];
    for v in 0..PATCH_SIZE {
        for u in 0..PATCH_SIZE {
            let p: [f64; 2] = node_position(origin, u, v);
            let du = p[0] - center[0];
            let dv = p[1] - center[1];
            let i = (v * PATCH_SIZE + u) * COST_CHANNELS;
            data[i] = curvature * (du * du + dv * dv);
            data[i + 1] = 2.0 * curvature * du;
            data[i + 2] = 2.0 * curvature * dv;
        }
    }
    CostPatch::new(key, origin, data).expect("patch size is fixed")
}

fn sample_ball(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    loop {
        let p: Vec3<f64> = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if norm3(&p) <= 1.0 {
            return p;
        }
    }
}

/// Generates a dome with `n_cameras` cameras and `n_frames` frames of
/// `n_points` points each. The same seed gives identical output.
pub fn generate_dome(
    seed: u64,
    n_cameras: usize,
    n_frames: usize,
    n_points: usize,
    noise: &Noise,
) -> Result<SynthDataset, SynthError> {
    if n_cameras < 2 {
        return Err(SynthError::InvalidParameter("n_cameras must be at least 2".into()));
    }
    if n_frames < 1 {
        return Err(SynthError::InvalidParameter("n_frames must be at least 1".into()));
    }
    if n_points < MIN_TRACKS {
        return Err(SynthError::InvalidParameter(format!("n_points must be at least {MIN_TRACKS}")));
    }
    let noise_values = [
        noise.keypoint_sigma,
        noise.keypoint_bias,
        noise.focal_rel,
        noise.pp_abs,
        noise.rotation_deg,
        noise.translation,
        noise.point_jitter,
    ];
    if noise_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || noise.focal_rel >= 0.5 {
        return Err(SynthError::InvalidParameter("noise values must be finite and nonnegative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cameras: Vec<Camera> = dome_centers(n_cameras)
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let f = rng.random_range(950.0..1050.0);
            let k = Intrinsics::new(
                f,
                f * rng.random_range(0.995..1.005),
                IMAGE_WIDTH as f64 / 2.0 + rng.random_range(-10.0..10.0),
                IMAGE_HEIGHT as f64 / 2.0 + rng.random_range(-10.0..10.0),
            );
            Camera {
                camera_id: j as CameraId + 1,
                name: format!("cam{:03}", j + 1),
                width: IMAGE_WIDTH,
                height: IMAGE_HEIGHT,
                intrinsics: k,
                gt_extrinsics: Some(look_at_origin(c)),
            }
        })
        .collect();
    let bias: BTreeMap<CameraId, [f64; 2]> = cameras
        .iter()
        .map(|c| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (c.camera_id, [noise.keypoint_bias * a.cos(), noise.keypoint_bias * a.sin()])
        })
        .collect();

    let mut gt_frames = Vec::with_capacity(n_frames);
    let mut init_frames = Vec::with_capacity(n_frames);
    let mut costs = CostStore::new();
    let mut tracks_per_camera: BTreeMap<CameraId, usize> = cameras.iter().map(|c| (c.camera_id, 0)).collect();

    for f in 0..n_frames as u32 {
        let mut gt_points = Vec::new();
        let mut init_points = Vec::new();
        let mut next_index: BTreeMap<CameraId, u32> = BTreeMap::new();
        for i in 0..n_points {
            let x = sample_ball(&mut rng);
            let mut gt_track = Vec::new();
            let mut init_track = Vec::new();
            let mut bowls = Vec::new();
            for cam in &cameras {
                let pose = cam.gt_extrinsics.expect("set above");
                let Ok(px) = project(&pose, &cam.intrinsics, &x) else { continue };
                if !inside(&px) {
                    continue;
                }
                let b = bias[&cam.camera_id];
                let (nu, nv) = if noise.keypoint_sigma > 0.0 {
                    let nu: f64 = rng.sample(StandardNormal);
                    let nv: f64 = rng.sample(StandardNormal);
                    (nu * noise.keypoint_sigma, nv * noise.keypoint_sigma)
                } else {
                    (0.0, 0.0)
                };
                let noisy = [px[0] + b[0] + nu, px[1] + b[1] + nv];
                let curvature = rng.random_range(0.5..2.0);
                gt_track.push((cam.camera_id, px));
                init_track.push((cam.camera_id, noisy));
                bowls.push((px, curvature));
            }
            if gt_track.len() < 2 {
                continue;
            }
            let mut gt_obs = Vec::with_capacity(gt_track.len());
            let mut init_obs = Vec::with_capacity(gt_track.len());
            for ((&(camera_id, exact), &(_, noisy)), &(center, curvature)) in
                gt_track.iter().zip(&init_track).zip(&bowls)
            {
                let idx = next_index.entry(camera_id).or_insert(0);
                gt_obs.push(Observation {
                    camera_id,
                    keypoint: exact,
                    keypoint_index: *idx,
                });
                init_obs.push(Observation {
                    camera_id,
                    keypoint: noisy,
                    keypoint_index: *idx,
                });
                let key = PatchKey::new(f, camera_id, *idx);
                costs.insert(key, Arc::new(bowl_patch(key, noisy, center, curvature)));
                *tracks_per_camera.get_mut(&camera_id).expect("known camera") += 1;
                *idx += 1;
            }
            let jitter = if noise.point_jitter > 0.0 {
                let n = Normal::new(0.0, noise.point_jitter).expect("valid sigma");
                [n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)]
            } else {
                [0.0; 3]
            };
            gt_points.push(TrackedPoint {
                point_id: i as u64 + 1,
                position: x,
                track: gt_obs,
            });
            init_points.push(TrackedPoint {
                point_id: i as u64 + 1,
                position: [x[0] + jitter[0], x[1] + jitter[1], x[2] + jitter[2]],
                track: init_obs,
            });
        }
        if gt_points.len() < MIN_TRACKS {
            return Err(SynthError::DegenerateConfiguration {
                frame: f,
                tracks: gt_points.len(),
            });
        }

        let mut init_pose = BTreeMap::new();
        let mut init_k = BTreeMap::new();
        for cam in &cameras {
            let gt_pose = cam.gt_extrinsics.expect("set above");
            let axis = random_unit(&mut rng);
            let dq = Quat::from_axis_angle(&scale3(&axis, noise.rotation_deg.to_radians()));
            let dt = scale3(&random_unit(&mut rng), noise.translation);
            init_pose.insert(
                cam.camera_id,
                Extrinsics::new(
                    gt_pose.rotation.mul(&dq),
                    [
                        gt_pose.translation[0] + dt[0],
                        gt_pose.translation[1] + dt[1],
                        gt_pose.translation[2] + dt[2],
                    ],
                ),
            );
            let k = cam.intrinsics;
            let (sfx, sfy, scx, scy) = (sign(&mut rng), sign(&mut rng), sign(&mut rng), sign(&mut rng));
            init_k.insert(
                cam.camera_id,
                Intrinsics::new(
                    k.fx * (1.0 + sfx * noise.focal_rel),
                    k.fy * (1.0 + sfy * noise.focal_rel),
                    k.cx + scx * noise.pp_abs,
                    k.cy + scy * noise.pp_abs,
                ),
            );
        }
        gt_frames.push(FrameModel {
            frame_id: f,
            per_camera_pose: cameras.iter().map(|c| (c.camera_id, c.gt_extrinsics.unwrap())).collect(),
            per_camera_intrinsics: cameras.iter().map(|c| (c.camera_id, c.intrinsics)).collect(),
            points: gt_points,
        });
        init_frames.push(FrameModel {
            frame_id: f,
            per_camera_pose: init_pose,
            per_camera_intrinsics: init_k,
            points: init_points,
        });
    }

    let mut ground_truth = Rig {
        cameras: cameras.clone(),
        global_intrinsics: BTreeMap::new(),
        frames: gt_frames,
    };
    ground_truth.global_intrinsics = ground_truth.mean_frame_intrinsics();
    let mut initial = Rig {
        cameras,
        global_intrinsics: BTreeMap::new(),
        frames: init_frames,
    };
    initial.global_intrinsics = initial.mean_frame_intrinsics();
    let first = initial.frames[0].per_camera_intrinsics.clone();
    for cam in &mut initial.cameras {
        cam.intrinsics = first[&cam.camera_id];
    }
    Ok(SynthDataset {
        ground_truth,
        initial,
        costs,
        tracks_per_camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::cost_lookup;
    use crate::model::validate_rig;

    #[test]
    fn look_at_centers_the_origin() {
        for c in dome_centers(12) {
            let pose = look_at_origin(&c);
            let k = Intrinsics::new(1000.0, 1000.0, 512.0, 384.0);
            let p = project(&pose, &k, &[0.0, 0.0, 0.0]).unwrap();
            assert!((p[0] - 512.0).abs() < 1e-9 && (p[1] - 384.0).abs() < 1e-9);
            let centre = pose.center();
            for i in 0..3 {
                assert!((centre[i] - c[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_is_valid_and_covered() {
        let d = generate_dome(7, 12, 4, 500, &Noise { keypoint_sigma: 0.3, ..Noise::default() }).unwrap();
        assert!(validate_rig(&d.ground_truth).is_empty(), "{:?}", validate_rig(&d.ground_truth));
        assert!(validate_rig(&d.initial).is_empty());
        assert!(d.tracks_per_camera.values().all(|&n| n >= 50));
    }

    #[test]
    fn deterministic() {
        let a = generate_dome(3, 4, 2, 40, &Noise::default()).unwrap();
        let b = generate_dome(3, 4, 2, 40, &Noise::default()).unwrap();
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.costs, b.costs);
    }

    #[test]
    fn noise_free_observations_reproject() {
        let d = generate_dome(1, 5, 2, 30, &Noise::noise_free()).unwrap();
        for frame in &d.initial.frames {
            for p in &frame.points {
                for o in &p.track {
                    let cam = d.ground_truth.camera(o.camera_id).unwrap();
                    let px = project(&cam.gt_extrinsics.unwrap(), &cam.intrinsics, &p.position).unwrap();
                    assert!((px[0] - o.keypoint[0]).abs() < 1e-9 && (px[1] - o.keypoint[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn bowl_minimum_is_at_the_planted_projection() {
        let center = [300.3, 200.8];
        let patch = bowl_patch(PatchKey::new(0, 1, 0), [300.0, 201.0], center, 1.3);
        let (c, g) = cost_lookup(&patch, center).unwrap();
        assert!(c.abs() < 1e-9 && g[0].abs() < 1e-9 && g[1].abs() < 1e-9);
        assert!(cost_lookup(&patch, [301.3, 200.8]).unwrap().0 > c);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(generate_dome(0, 1, 1, 100, &Noise::default()), Err(SynthError::InvalidParameter(_))));
        assert!(matches!(generate_dome(0, 3, 1, 4, &Noise::default()), Err(SynthError::InvalidParameter(_))));
    }
}
