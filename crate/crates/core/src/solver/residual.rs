use std::sync::Arc;

use crate::features::{cost_lookup, CostPatch};
use crate::geometry::{project_with_jacobians, rotation_residual, Quat, RotationResidual};
use crate::model::{Extrinsics, Intrinsics};
use crate::robust::RobustLoss;

use super::BlockKind;

/// Largest residual dimension.
pub const MAX_RESIDUAL_DIM: usize = 3;
/// Largest tangent dimension of a parameter block.
pub const MAX_TANGENT_DIM: usize = 6;
pub const MAX_BLOCKS_PER_RESIDUAL: usize = 3;

#[derive(Debug, Clone)]
pub enum ResidualKind {
    /// `project(pose, intrinsics, point) - observed`. Params: pose, intrinsics, point.
    Reprojection { observed: [f64; 2] },
    /// Interpolated cost at the projection. Params: pose, intrinsics, point.
    Featuremetric { patch: Arc<CostPatch<f64>> },
    /// Rotation distance to a reference. Params: pose.
    RotationPrior {
        reference: Quat<f64>,
        mode: RotationResidual,
    },
    /// `t - t_ref`. Params: pose.
    TranslationPrior { reference: [f64; 3] },
    /// `(fx, fy) - (fx_bar, fy_bar)`. Params: intrinsics, global intrinsics.
    FocalCoupling,
    /// `(cx, cy) - (cx_bar, cy_bar)`. Params: intrinsics, global intrinsics.
    PrincipalPointCoupling,
}

impl ResidualKind {
    pub fn dim(&self) -> usize {
        match self {
            ResidualKind::Reprojection { .. } => 2,
            ResidualKind::Featuremetric { .. } => 1,
            ResidualKind::RotationPrior { .. } | ResidualKind::TranslationPrior { .. } => 3,
            ResidualKind::FocalCoupling | ResidualKind::PrincipalPointCoupling => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ResidualKind::Reprojection { .. } => "reprojection",
            ResidualKind::Featuremetric { .. } => "featuremetric",
            ResidualKind::RotationPrior { .. } => "rot_reg",
            ResidualKind::TranslationPrior { .. } => "trans_reg",
            ResidualKind::FocalCoupling => "intrinsics_var_focal",
            ResidualKind::PrincipalPointCoupling => "intrinsics_var_pp",
        }
    }

    /// Parameter block kinds this residual expects, in order.
    pub fn expected_blocks(&self) -> &'static [BlockKind] {
        use BlockKind::*;
        match self {
            ResidualKind::Reprojection { .. } | ResidualKind::Featuremetric { .. } => {
                &[Pose, Intrinsics, Point3]
            }
            ResidualKind::RotationPrior { .. } | ResidualKind::TranslationPrior { .. } => &[Pose],
            ResidualKind::FocalCoupling | ResidualKind::PrincipalPointCoupling => {
                &[Intrinsics, GlobalIntrinsics]
            }
        }
    }

    /// Evaluates the residual and its Jacobians with respect to the tangent
    /// space of each parameter block. Returns `None` when the residual is
    /// inactive at this state (point behind the camera, projection outside
    /// its cost patch).
    pub fn evaluate(&self, params: &[&[f64]]) -> Option<Evaluation> {
        let mut ev = Evaluation::zeros(self.dim());
        match self {
            ResidualKind::Reprojection { observed } => {
                let pose = Extrinsics::from_slice(params[0]);
                let k = Intrinsics::from_slice(params[1]);
                let x = [params[2][0], params[2][1], params[2][2]];
                let (px, j) = project_with_jacobians(&pose, &k, &x).ok()?;
                for row in 0..2 {
                    ev.residual[row] = px[row] - observed[row];
                    ev.jacobians[0][row][..3].copy_from_slice(&j.d_rotation[row]);
                    ev.jacobians[0][row][3..6].copy_from_slice(&j.d_translation[row]);
                    ev.jacobians[1][row][..4].copy_from_slice(&j.d_intrinsics[row]);
                    ev.jacobians[2][row][..3].copy_from_slice(&j.d_point[row]);
                }
            }
            ResidualKind::Featuremetric { patch } => {
                let pose = Extrinsics::from_slice(params[0]);
                let k = Intrinsics::from_slice(params[1]);
                let x = [params[2][0], params[2][1], params[2][2]];
                let (px, j) = project_with_jacobians(&pose, &k, &x).ok()?;
                let (cost, grad) = cost_lookup(patch, px).ok()?;
                ev.residual[0] = cost;
                for col in 0..3 {
                    ev.jacobians[0][0][col] =
                        grad[0] * j.d_rotation[0][col] + grad[1] * j.d_rotation[1][col];
                    ev.jacobians[0][0][3 + col] =
                        grad[0] * j.d_translation[0][col] + grad[1] * j.d_translation[1][col];
                    ev.jacobians[2][0][col] =
                        grad[0] * j.d_point[0][col] + grad[1] * j.d_point[1][col];
                }
                for col in 0..4 {
                    ev.jacobians[1][0][col] =
                        grad[0] * j.d_intrinsics[0][col] + grad[1] * j.d_intrinsics[1][col];
                }
            }
            ResidualKind::RotationPrior { reference, mode } => {
                let q = Quat::new(params[0][0], params[0][1], params[0][2], params[0][3]);
                let (r, jac) = rotation_residual(*mode, &q, reference);
                for row in 0..3 {
                    ev.residual[row] = r[row];
                    ev.jacobians[0][row][..3].copy_from_slice(&jac[row]);
                }
            }
            ResidualKind::TranslationPrior { reference } => {
                for row in 0..3 {
                    ev.residual[row] = params[0][4 + row] - reference[row];
                    ev.jacobians[0][row][3 + row] = 1.0;
                }
            }
            ResidualKind::FocalCoupling | ResidualKind::PrincipalPointCoupling => {
                let first = match self {
                    ResidualKind::FocalCoupling => 0,
                    _ => 2,
                };
                for row in 0..2 {
                    ev.residual[row] = params[0][first + row] - params[1][first + row];
                    ev.jacobians[0][row][first + row] = 1.0;
                    ev.jacobians[1][row][first + row] = -1.0;
                }
            }
        }
        Some(ev)
    }
}

/// Residual value and tangent-space Jacobians, padded to fixed sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub dim: usize,
    pub residual: [f64; MAX_RESIDUAL_DIM],
    /// `jacobians[block][row][col]`.
    pub jacobians: [[[f64; MAX_TANGENT_DIM]; MAX_RESIDUAL_DIM]; MAX_BLOCKS_PER_RESIDUAL],
}

impl Evaluation {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            residual: [0.0; MAX_RESIDUAL_DIM],
            jacobians: [[[0.0; MAX_TANGENT_DIM]; MAX_RESIDUAL_DIM]; MAX_BLOCKS_PER_RESIDUAL],
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.residual[..self.dim].iter().map(|r| r * r).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.residual.iter().all(|v| v.is_finite())
            && self
                .jacobians
                .iter()
                .flatten()
                .flatten()
                .all(|v| v.is_finite())
    }
}

/// One weighted, robustified summand of the objective:
/// `weight * rho(||residual||)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub kind: ResidualKind,
    pub params: Vec<usize>,
    pub weight: f64,
    pub loss: RobustLoss<f64>,
}

impl ResidualBlock {
    pub fn new(kind: ResidualKind, params: Vec<usize>, weight: f64, loss: RobustLoss<f64>) -> Self {
        Self {
            kind,
            params,
            weight,
            loss,
        }
    }
}
