//! Assembly of the full calibration objective into solver residual blocks.
//!
//! For frames `i` and cameras `j` the objective is
//!
//! ```text
//! L = L3 + 1/N_F * sum_i (L0_i + L1_i + L2_i)
//! ```
//!
//! with the reprojection term `L0`, the extrinsics prior `L1`, the
//! featuremetric term `L2` and the intrinsics variance `L3`. The `1/N_F`
//! factor is folded into the weights of `L0`, `L1` and `L2`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::features::{CostStore, PatchKey};
use crate::geometry::RotationResidual;
use crate::model::{CameraId, Extrinsics, FrameModel, Intrinsics, Rig};
use crate::robust::RobustLoss;
use crate::solver::{BlockId, BlockKind, Problem, ResidualBlock, ResidualKind, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("no ground-truth extrinsics for camera {0}")]
    MissingCamera(CameraId),
    #[error("frame {frame} has no {what} for camera {camera}")]
    IncompleteFrame {
        frame: u32,
        camera: CameraId,
        what: &'static str,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Term coefficients and the shared robust loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    /// `lambda0` .. `lambda5`.
    pub lambda: [f64; 6],
    pub n_frames: usize,
    pub n_cameras: usize,
    pub loss: RobustLoss<f64>,
    pub rotation_residual: RotationResidual,
}

impl Weights {
    pub fn new(lambda: [f64; 6], n_frames: usize, n_cameras: usize) -> Self {
        Self {
            lambda,
            n_frames,
            n_cameras,
            loss: RobustLoss::cauchy(0.25),
            rotation_residual: RotationResidual::Geodesic,
        }
    }
}

/// Parameter blocks of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameBlocks {
    pub poses: BTreeMap<CameraId, BlockId>,
    pub intrinsics: BTreeMap<CameraId, BlockId>,
    /// One block per point, in the frame's point order.
    pub points: Vec<BlockId>,
}

/// Where each rig quantity lives in the problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemLayout {
    pub global: BTreeMap<CameraId, BlockId>,
    pub frames: Vec<FrameBlocks>,
}

/// Adds one parameter block per pose, frame intrinsics, point and global intrinsics.
pub fn add_parameter_blocks(problem: &mut Problem, rig: &Rig) -> ProblemLayout {
    let mut layout = ProblemLayout::default();
    for frame in &rig.frames {
        let mut fb = FrameBlocks::default();
        for (&id, pose) in &frame.per_camera_pose {
            fb.poses.insert(id, problem.add_block(BlockKind::Pose, &pose.to_array()));
        }
        for (&id, k) in &frame.per_camera_intrinsics {
            fb.intrinsics.insert(id, problem.add_block(BlockKind::Intrinsics, &k.to_array()));
        }
        for p in &frame.points {
            fb.points.push(problem.add_block(BlockKind::Point3, &p.position));
        }
        layout.frames.push(fb);
    }
    for (&id, k) in &rig.global_intrinsics {
        layout.global.insert(id, problem.add_block(BlockKind::GlobalIntrinsics, &k.to_array()));
    }
    layout
}

fn camera_blocks(frame: &FrameModel, blocks: &FrameBlocks, camera: CameraId) -> Result<(BlockId, BlockId), ObjectiveError> {
    let missing = |what| ObjectiveError::IncompleteFrame {
        frame: frame.frame_id,
        camera,
        what,
    };
    Ok((
        *blocks.poses.get(&camera).ok_or_else(|| missing("pose"))?,
        *blocks.intrinsics.get(&camera).ok_or_else(|| missing("intrinsics"))?,
    ))
}

/// One reprojection residual per observation, weighted `lambda0 / (N_obs * N_F)`.
pub fn build_reprojection_term(
    frame: &FrameModel,
    blocks: &FrameBlocks,
    w: &Weights,
) -> Result<Vec<ResidualBlock>, ObjectiveError> {
    let n_obs = frame.observation_count();
    if w.lambda[0] == 0.0 || n_obs == 0 {
        return Ok(Vec::new());
    }
    let weight = w.lambda[0] / n_obs as f64 / w.n_frames as f64;
    let mut out = Vec::with_capacity(n_obs);
    for (p, &pid) in frame.points.iter().zip(&blocks.points) {
        for o in &p.track {
            let (pose, k) = camera_blocks(frame, blocks, o.camera_id)?;
            out.push(ResidualBlock::new(
                ResidualKind::Reprojection { observed: o.keypoint },
                vec![pose, k, pid],
                weight,
                w.loss,
            ));
        }
    }
    Ok(out)
}

/// Rotation and translation priors towards the ground-truth extrinsics,
/// weighted `lambda1 / (N_C * N_F)` and `lambda2 / (N_C * N_F)`.
pub fn build_extrinsics_reg(
    frame: &FrameModel,
    blocks: &FrameBlocks,
    gt: &BTreeMap<CameraId, Extrinsics>,
    w: &Weights,
) -> Result<Vec<ResidualBlock>, ObjectiveError> {
    let mut out = Vec::new();
    let scale = 1.0 / (w.n_cameras as f64 * w.n_frames as f64);
    for &camera in frame.per_camera_pose.keys() {
        let (pose, _) = camera_blocks(frame, blocks, camera)?;
        let reference = gt.get(&camera).ok_or(ObjectiveError::MissingCamera(camera))?;
        if w.lambda[1] > 0.0 {
            out.push(ResidualBlock::new(
                ResidualKind::RotationPrior {
                    reference: reference.rotation,
                    mode: w.rotation_residual,
                },
                vec![pose],
                w.lambda[1] * scale,
                w.loss,
            ));
        }
        if w.lambda[2] > 0.0 {
            out.push(ResidualBlock::new(
                ResidualKind::TranslationPrior {
                    reference: reference.translation,
                },
                vec![pose],
                w.lambda[2] * scale,
                w.loss,
            ));
        }
    }
    Ok(out)
}

/// One featuremetric residual per observation that has a cost patch,
/// weighted `lambda3 / (N_obs * N_F)`. Also returns the number of
/// observations without a patch.
pub fn build_featuremetric_term(
    frame: &FrameModel,
    blocks: &FrameBlocks,
    store: &CostStore<f64>,
    w: &Weights,
) -> Result<(Vec<ResidualBlock>, usize), ObjectiveError> {
    let n_obs = frame.observation_count();
    if w.lambda[3] == 0.0 || n_obs == 0 {
        return Ok((Vec::new(), 0));
    }
    let weight = w.lambda[3] / n_obs as f64 / w.n_frames as f64;
    let mut out = Vec::new();
    let mut missing = 0;
    for (p, &pid) in frame.points.iter().zip(&blocks.points) {
        for o in &p.track {
            let key = PatchKey::new(frame.frame_id, o.camera_id, o.keypoint_index);
            let Some(patch) = store.get(&key) else {
                missing += 1;
                continue;
            };
            let (pose, k) = camera_blocks(frame, blocks, o.camera_id)?;
            out.push(ResidualBlock::new(
                ResidualKind::Featuremetric { patch: patch.clone() },
                vec![pose, k, pid],
                weight,
                w.loss,
            ));
        }
    }
    Ok((out, missing))
}

/// Couples every frame intrinsics block to the global block of its camera,
/// weighted `lambda4 / (N_C * N_F)` (focal) and `lambda5 / (N_C * N_F)`
/// (principal point).
pub fn build_intrinsics_variance(layout: &ProblemLayout, w: &Weights) -> Vec<ResidualBlock> {
    let scale = 1.0 / (w.n_cameras as f64 * w.n_frames as f64);
    let mut out = Vec::new();
    for fb in &layout.frames {
        for (camera, &k) in &fb.intrinsics {
            let Some(&g) = layout.global.get(camera) else { continue };
            if w.lambda[4] > 0.0 {
                out.push(ResidualBlock::new(ResidualKind::FocalCoupling, vec![k, g], w.lambda[4] * scale, w.loss));
            }
            if w.lambda[5] > 0.0 {
                out.push(ResidualBlock::new(
                    ResidualKind::PrincipalPointCoupling,
                    vec![k, g],
                    w.lambda[5] * scale,
                    w.loss,
                ));
            }
        }
    }
    out
}

/// Observation bookkeeping of an assembled problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TermCounts {
    pub reprojection: usize,
    pub extrinsics: usize,
    pub featuremetric: usize,
    pub missing_patches: usize,
    pub intrinsics_variance: usize,
}

#[derive(Debug, Clone)]
pub struct Assembly {
    pub problem: Problem,
    pub layout: ProblemLayout,
    pub counts: TermCounts,
}

/// Builds the complete problem from the current rig state.
pub fn assemble(
    rig: &Rig,
    gt: &BTreeMap<CameraId, Extrinsics>,
    store: Option<&CostStore<f64>>,
    w: &Weights,
) -> Result<Assembly, ObjectiveError> {
    let mut problem = Problem::new();
    let layout = add_parameter_blocks(&mut problem, rig);
    let mut counts = TermCounts::default();
    let mut residuals = Vec::new();
    for (frame, fb) in rig.frames.iter().zip(&layout.frames) {
        let r = build_reprojection_term(frame, fb, w)?;
        counts.reprojection += r.len();
        residuals.extend(r);
        let r = build_extrinsics_reg(frame, fb, gt, w)?;
        counts.extrinsics += r.len();
        residuals.extend(r);
        if let Some(store) = store {
            let (r, missing) = build_featuremetric_term(frame, fb, store, w)?;
            counts.featuremetric += r.len();
            counts.missing_patches += missing;
            residuals.extend(r);
        }
    }
    let r = build_intrinsics_variance(&layout, w);
    counts.intrinsics_variance = r.len();
    residuals.extend(r);
    for r in residuals {
        problem.add_residual(r)?;
    }
    Ok(Assembly {
        problem,
        layout,
        counts,
    })
}

/// Copies the problem's current parameter values back into a rig.
pub fn write_back(problem: &Problem, layout: &ProblemLayout, rig: &Rig) -> Rig {
    let mut out = rig.clone();
    for (frame, fb) in out.frames.iter_mut().zip(&layout.frames) {
        for (id, &b) in &fb.poses {
            frame.per_camera_pose.insert(*id, Extrinsics::from_slice(&problem.block(b).values));
        }
        for (id, &b) in &fb.intrinsics {
            frame.per_camera_intrinsics.insert(*id, Intrinsics::from_slice(&problem.block(b).values));
        }
        for (p, &b) in frame.points.iter_mut().zip(&fb.points) {
            let v = &problem.block(b).values;
            p.position = [v[0], v[1], v[2]];
        }
    }
    for (id, &b) in &layout.global {
        out.global_intrinsics.insert(*id, Intrinsics::from_slice(&problem.block(b).values));
    }
    out
}

/// Objective value split by residual kind name.
pub fn cost_by_kind(problem: &Problem) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    for (r, c) in problem.residuals().iter().zip(problem.residual_costs()) {
        *out.entry(r.kind.name()).or_insert(0.0) += c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Quat};
    use crate::model::{Camera, Observation, TrackedPoint};

    fn exact_rig(n_points: usize, n_frames: usize) -> Rig {
        let k = Intrinsics::new(1000.0, 1000.0, 500.0, 400.0);
        let poses = [
            Extrinsics::new(Quat::identity(), [0.0, 0.0, 3.0]),
            Extrinsics::new(Quat::from_axis_angle(&[0.0, 0.4, 0.0]), [-0.5, 0.0, 3.0]),
            Extrinsics::new(Quat::from_axis_angle(&[0.3, 0.0, 0.0]), [0.0, 0.3, 3.0]),
            Extrinsics::new(Quat::from_axis_angle(&[0.0, -0.4, 0.1]), [0.6, 0.0, 3.1]),
        ];
        let cameras = (0..4)
            .map(|j| Camera {
                camera_id: j,
                name: format!("cam{j}"),
                width: 1000,
                height: 800,
                intrinsics: k,
                gt_extrinsics: Some(poses[j as usize]),
            })
            .collect();
        let frames = (0..n_frames as u32)
            .map(|f| {
                let points = (0..n_points)
                    .map(|i| {
                        let x = [0.1 * i as f64 - 0.1, 0.05 * f as f64 + 0.02 * i as f64, 0.1];
                        TrackedPoint {
                            point_id: i as u64,
                            position: x,
                            track: (0..4)
                                .map(|j| Observation {
                                    camera_id: j,
                                    keypoint: project(&poses[j as usize], &k, &x).unwrap(),
                                    keypoint_index: i as u32,
                                })
                                .collect(),
                        }
                    })
                    .collect();
                FrameModel {
                    frame_id: f,
                    per_camera_pose: (0..4).map(|j| (j, poses[j as usize])).collect(),
                    per_camera_intrinsics: (0..4).map(|j| (j, k)).collect(),
                    points,
                }
            })
            .collect();
        let mut rig = Rig {
            cameras,
            global_intrinsics: BTreeMap::new(),
            frames,
        };
        rig.global_intrinsics = rig.mean_frame_intrinsics();
        rig
    }

    fn defaults(rig: &Rig) -> Weights {
        Weights::new([1.0, 0.01, 0.01, 0.01, 0.02, 0.02], rig.frames.len(), rig.cameras.len())
    }

    #[test]
    fn exact_frame_has_zero_cost() {
        let rig = exact_rig(3, 1);
        let a = assemble(&rig, &rig.gt_extrinsics(), None, &defaults(&rig)).unwrap();
        assert_eq!(a.problem.total_cost().unwrap(), 0.0);
    }

    #[test]
    fn reprojection_weight_is_normalized_by_observations() {
        let rig = exact_rig(3, 1);
        let mut problem = Problem::new();
        let layout = add_parameter_blocks(&mut problem, &rig);
        let r = build_reprojection_term(&rig.frames[0], &layout.frames[0], &defaults(&rig)).unwrap();
        assert_eq!(r.len(), 12);
        assert!(r.iter().all(|b| b.weight == 1.0 / 12.0));
    }

    #[test]
    fn translation_prior_value() {
        let mut rig = exact_rig(2, 1);
        rig.cameras.truncate(2);
        let frame = &mut rig.frames[0];
        frame.per_camera_pose.retain(|&id, _| id < 2);
        frame.per_camera_intrinsics.retain(|&id, _| id < 2);
        frame.points.iter_mut().for_each(|p| p.track.truncate(2));
        let gt = rig.gt_extrinsics();
        let frame = &mut rig.frames[0];
        frame.per_camera_pose.get_mut(&0).unwrap().translation[0] += 0.3;
        let w = Weights::new([0.0, 0.0, 0.01, 0.0, 0.0, 0.0], 1, 2);
        let mut problem = Problem::new();
        let layout = add_parameter_blocks(&mut problem, &rig);
        for r in build_extrinsics_reg(&rig.frames[0], &layout.frames[0], &gt, &w).unwrap() {
            problem.add_residual(r).unwrap();
        }
        let expected = 0.005 * 0.0625 * (1.0f64 + (0.3f64 / 0.25).powi(2)).ln();
        assert!((problem.total_cost().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_priors_emit_nothing() {
        let rig = exact_rig(2, 1);
        let mut problem = Problem::new();
        let layout = add_parameter_blocks(&mut problem, &rig);
        let w = Weights::new([1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1, 4);
        assert!(build_extrinsics_reg(&rig.frames[0], &layout.frames[0], &rig.gt_extrinsics(), &w)
            .unwrap()
            .is_empty());
        assert!(build_intrinsics_variance(&layout, &w).is_empty());
    }

    #[test]
    fn missing_ground_truth() {
        let rig = exact_rig(2, 1);
        let mut gt = rig.gt_extrinsics();
        gt.remove(&2);
        assert!(matches!(
            assemble(&rig, &gt, None, &defaults(&rig)),
            Err(ObjectiveError::MissingCamera(2))
        ));
    }

    #[test]
    fn variance_term_keeps_the_mean_of_two_frames() {
        let mut rig = exact_rig(2, 2);
        rig.frames[0].per_camera_intrinsics.get_mut(&0).unwrap().fx = 1000.0;
        rig.frames[1].per_camera_intrinsics.get_mut(&0).unwrap().fx = 1002.0;
        rig.global_intrinsics = rig.mean_frame_intrinsics();
        let w = Weights::new([0.0, 0.0, 0.0, 0.0, 0.02, 0.02], 2, 4);
        let mut problem = Problem::new();
        let layout = add_parameter_blocks(&mut problem, &rig);
        for fb in &layout.frames {
            for &b in fb.intrinsics.values() {
                problem.set_constant(b, true);
            }
        }
        for r in build_intrinsics_variance(&layout, &w) {
            problem.add_residual(r).unwrap();
        }
        problem.solve(&Default::default()).unwrap();
        let fx = problem.block(layout.global[&0]).values[0];
        assert!((fx - 1001.0).abs() < 1e-6, "{fx}");

        // The mean is stationary by symmetry. With deviations of 1 px against
        // a Cauchy scale of 0.25 it is a local maximum of the scan, not a minimum.
        let loss = RobustLoss::cauchy(0.25);
        let f = |g: f64| loss.evaluate_squared((g - 1000.0).powi(2)).0 + loss.evaluate_squared((g - 1002.0).powi(2)).0;
        let scan: Vec<f64> = (0..=2000).map(|i| 1000.0 + i as f64 * 1e-3).collect();
        let best = scan.iter().cloned().fold(f64::INFINITY, |a, g| a.min(f(g)));
        assert!(f(1001.0) > best);
        assert!((f(1001.0 - 1e-3) - f(1001.0 + 1e-3)).abs() < 1e-12);
    }
}
