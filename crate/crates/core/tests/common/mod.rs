//! Independent oracles shared by the integration and acceptance tests. Nothing
//! here calls into the code under test for the quantity being checked.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use domecal::features::{CostStore, PatchKey};
use domecal::geometry::{Quat, RotationResidual};
use domecal::model::{CameraId, Extrinsics, Intrinsics, Rig};
use domecal::solver::{BlockKind, ResidualKind};
use domecal::synth::bowl_patch;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const CAUCHY_SCALE: f64 = 0.25;

/// `c^2 ln(1 + s / c^2)` on a squared norm.
pub fn cauchy(s: f64) -> f64 {
    let c2 = CAUCHY_SCALE * CAUCHY_SCALE;
    c2 * (s / c2).ln_1p()
}

pub fn quat_matrix(q: &Quat<f64>) -> [[f64; 3]; 3] {
    let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Angle of `A^T B` from the trace and the skew part of the matrix.
pub fn rotation_angle_between(a: &Quat<f64>, b: &Quat<f64>) -> f64 {
    let ra = quat_matrix(a);
    let rb = quat_matrix(b);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| ra[k][i] * rb[k][j]).sum();
        }
    }
    let trace = m[0][0] + m[1][1] + m[2][2];
    let skew = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    let s = (skew[0] * skew[0] + skew[1] * skew[1] + skew[2] * skew[2]).sqrt() / 2.0;
    s.atan2((trace - 1.0) / 2.0)
}

pub fn project(pose: &Extrinsics, k: &Intrinsics, x: &[f64; 3]) -> Option<[f64; 2]> {
    let r = quat_matrix(&pose.rotation);
    let xc: Vec<f64> = (0..3)
        .map(|i| r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2] + pose.translation[i])
        .collect();
    if xc[2] <= 1e-6 {
        return None;
    }
    Some([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// A quadratic bowl cost map: `curvature * |p - center|^2`.
#[derive(Debug, Clone, Copy)]
pub struct Bowl {
    pub center: [f64; 2],
    pub curvature: f64,
}

/// Cost patches for every observation of `rig`, with bowls centered at the
/// projections under `truth`.
pub fn bowl_store(rig: &Rig, truth: &Rig, rng: &mut ChaCha8Rng) -> (CostStore<f64>, BTreeMap<PatchKey, Bowl>) {
    let mut store = CostStore::new();
    let mut bowls = BTreeMap::new();
    for (frame, gt_frame) in rig.frames.iter().zip(&truth.frames) {
        for (p, gp) in frame.points.iter().zip(&gt_frame.points) {
            for (o, go) in p.track.iter().zip(&gp.track) {
                let key = PatchKey::new(frame.frame_id, o.camera_id, o.keypoint_index);
                let bowl = Bowl {
                    center: go.keypoint,
                    curvature: rng.random_range(0.5..2.0),
                };
                store.insert(key, Arc::new(bowl_patch(key, o.keypoint, bowl.center, bowl.curvature)));
                bowls.insert(key, bowl);
            }
        }
    }
    (store, bowls)
}

/// The full objective by direct summation:
/// `L3 + (1/N_F) * sum_i (L0 + L1 + L2)` with every term under the Cauchy loss.
pub fn objective_oracle(
    rig: &Rig,
    gt: &BTreeMap<CameraId, Extrinsics>,
    bowls: Option<&BTreeMap<PatchKey, Bowl>>,
    lambda: [f64; 6],
) -> f64 {
    let nf = rig.frames.len() as f64;
    let nc = rig.cameras.len() as f64;
    let mut per_frame_sum = 0.0;
    for frame in &rig.frames {
        let n_obs: usize = frame.points.iter().map(|p| p.track.len()).sum();
        let mut l0 = 0.0;
        let mut l2 = 0.0;
        for p in &frame.points {
            for o in &p.track {
                let pose = &frame.per_camera_pose[&o.camera_id];
                let k = &frame.per_camera_intrinsics[&o.camera_id];
                let Some(px) = project(pose, k, &p.position) else { continue };
                l0 += cauchy(sq(&[px[0] - o.keypoint[0], px[1] - o.keypoint[1]]));
                if let Some(bowls) = bowls {
                    let key = PatchKey::new(frame.frame_id, o.camera_id, o.keypoint_index);
                    let b = bowls[&key];
                    // The patch spans 16 px around the keypoint; stay well inside it.
                    assert!((px[0] - o.keypoint[0]).abs() < 5.0 && (px[1] - o.keypoint[1]).abs() < 5.0);
                    let cost = b.curvature * sq(&[px[0] - b.center[0], px[1] - b.center[1]]);
                    l2 += cauchy(cost * cost);
                }
            }
        }
        let mut rot = 0.0;
        let mut trans = 0.0;
        for (id, pose) in &frame.per_camera_pose {
            let g = &gt[id];
            let angle = rotation_angle_between(&g.rotation, &pose.rotation);
            rot += cauchy(angle * angle);
            trans += cauchy(sq(&[
                pose.translation[0] - g.translation[0],
                pose.translation[1] - g.translation[1],
                pose.translation[2] - g.translation[2],
            ]));
        }
        let l1 = lambda[1] / nc * rot + lambda[2] / nc * trans;
        per_frame_sum += lambda[0] / n_obs as f64 * l0 + l1 + lambda[3] / n_obs as f64 * l2;
    }
    let mut l3 = 0.0;
    for frame in &rig.frames {
        for (id, k) in &frame.per_camera_intrinsics {
            let g = &rig.global_intrinsics[id];
            l3 += lambda[4] / (nc * nf) * cauchy(sq(&[k.fx - g.fx, k.fy - g.fy]));
            l3 += lambda[5] / (nc * nf) * cauchy(sq(&[k.cx - g.cx, k.cy - g.cy]));
        }
    }
    l3 + per_frame_sum / nf
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = sq(&v).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Quat<f64> {
    let axis = random_unit(rng);
    let a = rng.random_range(0.0..max_angle);
    Quat::from_axis_angle(&[axis[0] * a, axis[1] * a, axis[2] * a])
}

/// Random pose, intrinsics and a world point in front of the camera that
/// projects near the image center.
pub fn random_projection_state(rng: &mut ChaCha8Rng) -> (Extrinsics, Intrinsics, [f64; 3]) {
    let pose = Extrinsics::new(
        random_rotation(rng, 3.0),
        [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ],
    );
    let f = rng.random_range(500.0..1500.0);
    let k = Intrinsics::new(
        f,
        f * rng.random_range(0.9..1.1),
        rng.random_range(400.0..600.0),
        rng.random_range(300.0..450.0),
    );
    let depth = rng.random_range(1.0..6.0);
    let xc = [
        rng.random_range(-0.15..0.15) * depth,
        rng.random_range(-0.15..0.15) * depth,
        depth,
    ];
    // x = R^T (xc - t)
    let r = quat_matrix(&pose.rotation);
    let d = [
        xc[0] - pose.translation[0],
        xc[1] - pose.translation[1],
        xc[2] - pose.translation[2],
    ];
    let x = [
        r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
        r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
        r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
    ];
    (pose, k, x)
}

/// Applies a tangent perturbation `h * e_k` to a block the way the solver
/// does: right-multiplied rotation for poses, additive otherwise.
fn perturb(kind: BlockKind, values: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut v = values.to_vec();
    if kind == BlockKind::Pose && k < 3 {
        let mut axis = [0.0; 3];
        axis[k] = h;
        let q = Quat::new(v[0], v[1], v[2], v[3]).mul(&Quat::from_axis_angle(&axis));
        v[0] = q.w;
        v[1] = q.x;
        v[2] = q.y;
        v[3] = q.z;
    } else if kind == BlockKind::Pose {
        v[4 + k - 3] += h;
    } else {
        v[k] += h;
    }
    v
}

/// Largest relative difference between the analytic Jacobian of `kind` and
/// central differences, over all blocks.
pub fn jacobian_error(kind: &ResidualKind, params: &[Vec<f64>]) -> f64 {
    let refs: Vec<&[f64]> = params.iter().map(|p| p.as_slice()).collect();
    let ev = kind.evaluate(&refs).expect("residual active at the test state");
    let dim = kind.dim();
    let mut worst: f64 = 0.0;
    for (b, &bk) in kind.expected_blocks().iter().enumerate() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for col in 0..bk.tangent_dim() {
            let scale = if bk == BlockKind::Intrinsics || bk == BlockKind::GlobalIntrinsics {
                params[b][col].abs().max(1.0)
            } else {
                1.0
            };
            let h = 1e-6 * scale;
            let eval_at = |sign: f64| {
                let mut moved = params.to_vec();
                moved[b] = perturb(bk, &params[b], col, sign * h);
                let r: Vec<&[f64]> = moved.iter().map(|p| p.as_slice()).collect();
                kind.evaluate(&r).expect("active under a small perturbation").residual
            };
            let plus = eval_at(1.0);
            let minus = eval_at(-1.0);
            for row in 0..dim {
                let fd = (plus[row] - minus[row]) / (2.0 * h);
                diff += (fd - ev.jacobians[b][row][col]).powi(2);
                norm += fd * fd;
            }
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

pub fn rotation_modes() -> [RotationResidual; 2] {
    [RotationResidual::Geodesic, RotationResidual::Chart]
}

/// Minimizer of `sum rho(|x_i - mu|^2)` over a coarse grid on the bounding
/// box, refined by a fine grid around the coarse winner.
pub fn grid_minimizer(points: &[[f64; 2]]) -> [f64; 2] {
    let objective = |m: [f64; 2]| -> f64 { points.iter().map(|p| cauchy(sq(&[p[0] - m[0], p[1] - m[1]]))).sum() };
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let search = |lo: [f64; 2], hi: [f64; 2], step: f64| {
        let mut best = (f64::INFINITY, lo);
        let nx = ((hi[0] - lo[0]) / step).ceil() as usize + 1;
        let ny = ((hi[1] - lo[1]) / step).ceil() as usize + 1;
        for i in 0..nx {
            for j in 0..ny {
                let m = [lo[0] + i as f64 * step, lo[1] + j as f64 * step];
                let v = objective(m);
                if v < best.0 {
                    best = (v, m);
                }
            }
        }
        best.1
    };
    let coarse = search(lo, hi, 0.02);
    search([coarse[0] - 0.05, coarse[1] - 0.05], [coarse[0] + 0.05, coarse[1] + 0.05], 0.001)
}
