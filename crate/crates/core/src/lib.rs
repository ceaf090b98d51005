//! Multi-frame intrinsics refinement for fixed camera arrays.
//!
//! The numeric core (`geometry`, `model`, `robust`, `features`) is generic over
//! the scalar type. The solver and everything built on it run in `f64`.

pub mod cli;
pub mod features;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod robust;
pub mod scalar;
pub mod solver;
pub mod synth;

pub use geometry::Quat;
pub use model::{Camera, CameraId, Extrinsics, FrameId, FrameModel, Intrinsics, PointId, Rig};
pub use pipeline::{refine, refine_single_frame, RunTrace};
pub use scalar::Real;

pub type Intrinsics64 = Intrinsics<f64>;
pub type Intrinsics32 = Intrinsics<f32>;
pub type Extrinsics64 = Extrinsics<f64>;
pub type Extrinsics32 = Extrinsics<f32>;
pub type Quat64 = Quat<f64>;
pub type Quat32 = Quat<f32>;
