//! Pinhole projection, its analytic Jacobians and rotation utilities.
//!
//! Rotations are unit quaternions `(w, x, y, z)` mapping world to camera
//! coordinates. Pose perturbations are applied on the right,
//! `R <- R * exp([delta]x)`, and translations additively.

use thiserror::Error;

use crate::model::{Extrinsics, Intrinsics};
use crate::scalar::{
    add3, cross3, dot3, identity3, mat3_mul, norm3, scale3, skew, Mat3, Real, Vec2, Vec3,
};

/// Minimum camera-frame depth accepted by [`project`].
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
}

/// Quaternion `w + xi + yj + zk`. Used as a rotation when unit-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn vector(&self) -> Vec3<T> {
        [self.x, self.y, self.z]
    }

    /// Sign-canonical representative: nonnegative scalar part, and for a zero
    /// scalar part the first nonzero vector component is positive.
    pub fn canonical(&self) -> Self {
        let z = T::zero();
        let flip = if self.w != z {
            self.w < z
        } else if self.x != z {
            self.x < z
        } else if self.y != z {
            self.y < z
        } else {
            self.z < z
        };
        let q = if flip { self.neg() } else { *self };
        // Collapse -0.0 so that bitwise equality is sign independent.
        Self::new(q.w + z, q.x + z, q.y + z, q.z + z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotates `v` by this unit quaternion.
    pub fn rotate(&self, v: &Vec3<T>) -> Vec3<T> {
        let u = self.vector();
        let two = T::lit(2.0);
        let uv = cross3(&u, v);
        let uuv = cross3(&u, &uv);
        add3(v, &add3(&scale3(&uv, two * self.w), &scale3(&uuv, two)))
    }

    pub fn to_matrix(&self) -> Mat3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = T::lit(2.0);
        [
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ]
    }

    /// Exponential map from an axis-angle vector.
    pub fn from_axis_angle(r: &Vec3<T>) -> Self {
        let theta2 = dot3(r, r);
        let theta = theta2.sqrt();
        let half = T::lit(0.5);
        if theta < T::lit(1e-8) {
            // second order series of cos(t/2), sin(t/2)/t
            let w = T::one() - theta2 / T::lit(8.0);
            let s = half - theta2 / T::lit(48.0);
            Self::new(w, r[0] * s, r[1] * s, r[2] * s).normalized()
        } else {
            let s = (theta * half).sin() / theta;
            Self::new((theta * half).cos(), r[0] * s, r[1] * s, r[2] * s)
        }
    }

    /// Logarithm map to the axis-angle vector of the rotation, angle in [0, pi].
    pub fn to_axis_angle(&self) -> Vec3<T> {
        let q = self.canonical();
        let v = q.vector();
        let n = norm3(&v);
        if n < T::lit(1e-10) {
            // atan2(n, w) / n -> 1 / w for small n
            return scale3(&v, T::lit(2.0) / q.w);
        }
        let angle = T::lit(2.0) * n.atan2(q.w);
        scale3(&v, angle / n)
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> T {
        let q = self.canonical();
        T::lit(2.0) * norm3(&q.vector()).atan2(q.w)
    }
}

/// Angle of the relative rotation between `a` and `b`, in [0, pi].
pub fn geodesic_distance<T: Real>(a: &Quat<T>, b: &Quat<T>) -> T {
    a.conjugate().mul(b).angle()
}

/// Inverse of the right Jacobian of SO(3) evaluated at axis-angle `phi`.
///
/// `log(exp(phi) * exp(delta)) ~= phi + right_jacobian_inv(phi) * delta`.
pub fn right_jacobian_inv<T: Real>(phi: &Vec3<T>) -> Mat3<T> {
    let theta2 = dot3(phi, phi);
    let theta = theta2.sqrt();
    let coeff = if theta < T::lit(1e-5) {
        T::lit(1.0 / 12.0) + theta2 / T::lit(720.0)
    } else {
        T::one() / theta2
            - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin())
    };
    let k = skew(phi);
    let k2 = mat3_mul(&k, &k);
    let mut out = identity3();
    let half = T::lit(0.5);
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += half * k[i][j] + coeff * k2[i][j];
        }
    }
    out
}

/// How the rotation prior measures the distance to the reference rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationResidual {
    /// `log(R_ref^T R)`, chart free.
    #[default]
    Geodesic,
    /// `log(R) - log(R_ref)`, the literal difference of axis-angle vectors.
    Chart,
}

/// Rotation residual and its Jacobian with respect to a right perturbation of `q`.
pub fn rotation_residual<T: Real>(
    mode: RotationResidual,
    q: &Quat<T>,
    reference: &Quat<T>,
) -> (Vec3<T>, Mat3<T>) {
    match mode {
        RotationResidual::Geodesic => {
            let rel = reference.conjugate().mul(q).canonical();
            let r = rel.to_axis_angle();
            (r, right_jacobian_inv(&r))
        }
        RotationResidual::Chart => {
            let phi = q.to_axis_angle();
            let phi_ref = reference.to_axis_angle();
            (
                [phi[0] - phi_ref[0], phi[1] - phi_ref[1], phi[2] - phi_ref[2]],
                right_jacobian_inv(&phi),
            )
        }
    }
}

/// Derivatives of the projected pixel. Rows are pixel u, v.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionJacobians<T> {
    /// With respect to a right-multiplied axis-angle perturbation.
    pub d_rotation: [[T; 3]; 2],
    pub d_translation: [[T; 3]; 2],
    /// Columns ordered fx, fy, cx, cy.
    pub d_intrinsics: [[T; 4]; 2],
    pub d_point: [[T; 3]; 2],
}

fn camera_point<T: Real>(pose: &Extrinsics<T>, x: &Vec3<T>) -> Result<Vec3<T>, GeometryError> {
    let xc = pose.transform_point(x);
    if !(xc[2] >= T::lit(DEPTH_EPSILON)) {
        return Err(GeometryError::BehindCamera {
            depth: xc[2].to_f64_lossy(),
        });
    }
    Ok(xc)
}

/// Projects world point `x` into the image.
pub fn project<T: Real>(
    pose: &Extrinsics<T>,
    k: &Intrinsics<T>,
    x: &Vec3<T>,
) -> Result<Vec2<T>, GeometryError> {
    let xc = camera_point(pose, x)?;
    Ok([
        k.fx * xc[0] / xc[2] + k.cx,
        k.fy * xc[1] / xc[2] + k.cy,
    ])
}

pub fn project_with_jacobians<T: Real>(
    pose: &Extrinsics<T>,
    k: &Intrinsics<T>,
    x: &Vec3<T>,
) -> Result<(Vec2<T>, ProjectionJacobians<T>), GeometryError> {
    let xc = camera_point(pose, x)?;
    let inv_z = T::one() / xc[2];
    let xn = xc[0] * inv_z;
    let yn = xc[1] * inv_z;
    let pixel = [k.fx * xn + k.cx, k.fy * yn + k.cy];

    let z = T::zero();
    // d pixel / d camera point
    let d_xc = [
        [k.fx * inv_z, z, -k.fx * xn * inv_z],
        [z, k.fy * inv_z, -k.fy * yn * inv_z],
    ];
    let rot = pose.rotation.to_matrix();
    // d xc / d delta = -R [x]x
    let r_skew = mat3_mul(&rot, &skew(x));
    let mut d_rotation = [[z; 3]; 2];
    let mut d_point = [[z; 3]; 2];
    for row in 0..2 {
        for col in 0..3 {
            let mut dr = z;
            let mut dp = z;
            for m in 0..3 {
                dr -= d_xc[row][m] * r_skew[m][col];
                dp += d_xc[row][m] * rot[m][col];
            }
            d_rotation[row][col] = dr;
            d_point[row][col] = dp;
        }
    }
    let o = T::one();
    Ok((
        pixel,
        ProjectionJacobians {
            d_rotation,
            d_translation: d_xc,
            d_intrinsics: [[xn, z, o, z], [z, yn, z, o]],
            d_point,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_identity() -> Extrinsics<f64> {
        Extrinsics::new(Quat::identity(), [0.0; 3])
    }

    #[test]
    fn principal_point_on_optical_axis() {
        let k = Intrinsics::new(1000.0, 1000.0, 500.0, 400.0);
        let p = project(&pose_identity(), &k, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, [500.0, 400.0]);
    }

    #[test]
    fn hand_arithmetic_projection() {
        let k = Intrinsics::new(800.0, 600.0, 0.0, 0.0);
        let p = project(&pose_identity(), &k, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(p, [200.0, 300.0]);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let k = Intrinsics::new(800.0, 600.0, 0.0, 0.0);
        let err = project(&pose_identity(), &k, &[0.0, 0.0, -1.0]).unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera { .. }));
        assert!(project(&pose_identity(), &k, &[0.0, 0.0, 1e-7]).is_err());
    }

    #[test]
    fn intrinsics_jacobian_on_axis() {
        let k = Intrinsics::new(900.0, 700.0, 320.0, 240.0);
        let (_, j) = project_with_jacobians(&pose_identity(), &k, &[0.0, 0.0, 2.0]).unwrap();
        assert_eq!(j.d_intrinsics, [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
    }

    #[test]
    fn coaxial_geodesic() {
        let axis = [0.3f64, -0.5, 0.8];
        let n = norm3(&axis);
        let unit = scale3(&axis, 1.0 / n);
        let a = Quat::from_axis_angle(&scale3(&unit, 10f64.to_radians()));
        let b = Quat::from_axis_angle(&scale3(&unit, 40f64.to_radians()));
        let d = geodesic_distance(&a, &b);
        assert!((d - 30f64.to_radians()).abs() < 1e-9);
        assert!(geodesic_distance(&a, &a) < 1e-15);
    }

    #[test]
    fn canonical_is_idempotent_on_edge_cases() {
        let qs = [
            Quat::new(-0.5, 0.5, -0.5, 0.5),
            Quat::new(0.0, -1.0, 0.0, 0.0),
            Quat::new(-0.0, 0.0, -0.0, -1.0),
        ];
        for q in qs {
            let c = q.canonical();
            assert_eq!(c.canonical(), c);
            assert!(c.w >= 0.0);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let k = Intrinsics::<f32>::new(800.0, 600.0, 0.0, 0.0);
        let pose = Extrinsics::new(Quat::<f32>::identity(), [0.0; 3]);
        let p = project(&pose, &k, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(p, [200.0f32, 300.0]);
    }
}
