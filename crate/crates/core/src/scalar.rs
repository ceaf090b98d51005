use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar used by the geometric and statistical kernels: f32 or f64.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Vec2<T> = [T; 2];
pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn dot3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: &Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn add3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: &Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn mat3_mul_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = *m;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = m[j][i];
        }
    }
    out
}

/// Skew-symmetric matrix `[v]x` such that `[v]x * w = v x w`.
#[inline]
pub fn skew<T: Real>(v: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
}

#[inline]
pub fn identity3<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}
