//! Dense feature patches, cost maps and their interpolated lookups.
//!
//! A patch is a 16x16 window of samples anchored at an integer pixel
//! `origin`. Node `(a, b)` sits at pixel coordinates
//! `(origin_u + a + 0.5, origin_v + b + 0.5)`, so a pixel position `p` maps to
//! local grid coordinates `p - origin - 0.5`.
//!
//! Cost patches keep three channels per node: the feature distance to the
//! track's reference feature and its u and v derivatives. After
//! preprocessing, every observation costs 16x16x3 values whatever the
//! feature dimension.

pub mod bicubic;
pub mod io;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{CameraId, FrameId, FrameModel};
use crate::robust::{reference_feature, RobustError, RobustLoss};
use crate::scalar::{Real, Vec2};

pub use io::{
    decode_patch_file, encode_patch_file, load_cost_patches, load_feature_patches,
    load_patch_dir, write_cost_store, write_feature_store, LoadedPatches, PatchFile,
    PatchFileKind, RawPatch,
};

/// Side length of a patch in samples.
pub const PATCH_SIZE: usize = 16;
/// Half window used to center patches on keypoints.
pub const PATCH_HALF: i32 = 8;
pub const COST_CHANNELS: usize = 3;
/// Feature dimension of the reference feature network.
pub const DEFAULT_FEATURE_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("position ({u}, {v}) is outside the safe interior of patch {key:?}")]
    OutOfPatch { key: PatchKey, u: f64, v: f64 },
    #[error("dimension mismatch: patch has {expected} channels, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed header in {source_name}: {reason}")]
    MalformedHeader { source_name: String, reason: String },
    #[error("truncated file {source_name} at byte offset {offset}")]
    TruncatedFile { source_name: String, offset: usize },
    #[error("duplicate patch key {0:?}")]
    DuplicateKey(PatchKey),
    #[error("i/o failure on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Robust(#[from] RobustError),
}

/// Addresses the patch of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchKey {
    pub frame_id: FrameId,
    pub camera_id: CameraId,
    pub keypoint_index: u32,
}

impl PatchKey {
    pub fn new(frame_id: FrameId, camera_id: CameraId, keypoint_index: u32) -> Self {
        Self {
            frame_id,
            camera_id,
            keypoint_index,
        }
    }
}

/// Patch origin for a keypoint: `round(keypoint) - 8`, clamped so the
/// window stays inside the image.
pub fn patch_origin(keypoint: Vec2<f64>, width: u32, height: u32) -> [i32; 2] {
    let place = |x: f64, extent: u32| {
        let max = (extent as i64 - PATCH_SIZE as i64).max(0);
        (x.round() as i64 - PATCH_HALF as i64).clamp(0, max) as i32
    };
    [place(keypoint[0], width), place(keypoint[1], height)]
}

#[inline]
fn local_coords<T: Real>(origin: [i32; 2], p: Vec2<T>) -> (T, T) {
    let half = T::lit(0.5);
    (
        p[0] - T::lit(origin[0] as f64) - half,
        p[1] - T::lit(origin[1] as f64) - half,
    )
}

/// 16x16xD dense feature samples around one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePatch<T> {
    pub key: PatchKey,
    pub origin: [i32; 2],
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeaturePatch<T> {
    pub fn new(key: PatchKey, origin: [i32; 2], dim: usize, data: Vec<T>) -> Result<Self, FeatureError> {
        let expected = PATCH_SIZE * PATCH_SIZE * dim;
        if data.len() != expected {
            return Err(FeatureError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            key,
            origin,
            dim,
            data,
        })
    }

    /// Samples of the node at column `u`, row `v`.
    pub fn node(&self, u: usize, v: usize) -> &[T] {
        let base = (v * PATCH_SIZE + u) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// Pixel position of node `(u, v)`.
    pub fn node_position(&self, u: usize, v: usize) -> Vec2<T> {
        node_position(self.origin, u, v)
    }

    pub fn contains(&self, p: Vec2<f64>) -> bool {
        let inside = |x: f64, o: i32| x >= o as f64 && x < (o + PATCH_SIZE as i32) as f64;
        inside(p[0], self.origin[0]) && inside(p[1], self.origin[1])
    }
}

pub fn node_position<T: Real>(origin: [i32; 2], u: usize, v: usize) -> Vec2<T> {
    let half = T::lit(0.5);
    [
        T::lit(origin[0] as f64 + u as f64) + half,
        T::lit(origin[1] as f64 + v as f64) + half,
    ]
}

/// Bicubic interpolation of all feature channels at pixel position `p`.
pub fn interpolate_feature<T: Real>(patch: &FeaturePatch<T>, p: Vec2<T>) -> Result<Vec<T>, FeatureError> {
    let (su, sv) = local_coords(patch.origin, p);
    let mut out = vec![T::zero(); patch.dim];
    bicubic::sample_grid(&patch.data, PATCH_SIZE, patch.dim, su, sv, &mut out).ok_or_else(|| {
        FeatureError::OutOfPatch {
            key: patch.key,
            u: p[0].to_f64_lossy(),
            v: p[1].to_f64_lossy(),
        }
    })?;
    Ok(out)
}

/// Preprocessed 16x16x3 cost map of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPatch<T> {
    pub key: PatchKey,
    pub origin: [i32; 2],
    pub data: Vec<T>,
}

impl<T: Real> CostPatch<T> {
    pub fn new(key: PatchKey, origin: [i32; 2], data: Vec<T>) -> Result<Self, FeatureError> {
        let expected = PATCH_SIZE * PATCH_SIZE * COST_CHANNELS;
        if data.len() != expected {
            return Err(FeatureError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self { key, origin, data })
    }

    /// `[cost, d cost / du, d cost / dv]` at node `(u, v)`.
    pub fn node(&self, u: usize, v: usize) -> [T; 3] {
        let base = (v * PATCH_SIZE + u) * COST_CHANNELS;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn node_position(&self, u: usize, v: usize) -> Vec2<T> {
        node_position(self.origin, u, v)
    }

    pub fn cast<U: Real>(&self) -> CostPatch<U> {
        CostPatch {
            key: self.key,
            origin: self.origin,
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    /// True when `p` can be looked up.
    pub fn in_safe_interior(&self, p: Vec2<T>) -> bool {
        let (su, sv) = local_coords(self.origin, p);
        bicubic::support(su, PATCH_SIZE).is_some() && bicubic::support(sv, PATCH_SIZE).is_some()
    }
}

/// Builds the cost map `||F(u, v) - reference||` and its derivatives. The
/// derivatives are central differences of the norm channel at interior
/// nodes and one-sided differences on the border.
pub fn build_cost_patch<T: Real>(patch: &FeaturePatch<T>, reference: &[T]) -> Result<CostPatch<T>, FeatureError> {
    if reference.len() != patch.dim {
        return Err(FeatureError::DimensionMismatch {
            expected: patch.dim,
            found: reference.len(),
        });
    }
    let n = PATCH_SIZE;
    let mut norm = vec![T::zero(); n * n];
    for v in 0..n {
        for u in 0..n {
            let d2 = patch
                .node(u, v)
                .iter()
                .zip(reference)
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            norm[v * n + u] = d2.sqrt();
        }
    }
    let half = T::lit(0.5);
    let diff = |get: &dyn Fn(usize) -> T, i: usize| -> T {
        if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            (get(i + 1) - get(i - 1)) * half
        }
    };
    let mut data = vec![T::zero(); n * n * COST_CHANNELS];
    for v in 0..n {
        for u in 0..n {
            let du = diff(&|k| norm[v * n + k], u);
            let dv = diff(&|k| norm[k * n + u], v);
            let base = (v * n + u) * COST_CHANNELS;
            data[base] = norm[v * n + u];
            data[base + 1] = du;
            data[base + 2] = dv;
        }
    }
    CostPatch::new(patch.key, patch.origin, data)
}

/// Interpolated cost at pixel `p` and its gradient with respect to `p`.
pub fn cost_lookup<T: Real>(cp: &CostPatch<T>, p: Vec2<T>) -> Result<(T, Vec2<T>), FeatureError> {
    let (su, sv) = local_coords(cp.origin, p);
    let mut out = [T::zero(); COST_CHANNELS];
    bicubic::sample_grid(&cp.data, PATCH_SIZE, COST_CHANNELS, su, sv, &mut out).ok_or_else(|| {
        FeatureError::OutOfPatch {
            key: cp.key,
            u: p[0].to_f64_lossy(),
            v: p[1].to_f64_lossy(),
        }
    })?;
    Ok((out[0], [out[1], out[2]]))
}

pub type FeatureStore<T> = BTreeMap<PatchKey, FeaturePatch<T>>;
pub type CostStore<T> = BTreeMap<PatchKey, Arc<CostPatch<T>>>;

/// Counters from [`build_cost_store`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PreprocessStats {
    pub cost_patches: usize,
    pub missing_feature_patches: usize,
    pub keypoints_out_of_patch: usize,
}

/// Computes the reference feature of every track and turns each observation's
/// feature patch into a cost patch. Observations without a usable feature
/// patch get no cost patch.
pub fn build_cost_store<T: Real>(
    frames: &[FrameModel],
    features: &FeatureStore<T>,
    loss: &RobustLoss<T>,
) -> Result<(CostStore<T>, PreprocessStats), FeatureError> {
    type PointOutput<T> = (Vec<CostPatch<T>>, PreprocessStats);
    let per_point: Vec<Result<PointOutput<T>, FeatureError>> = frames
        .iter()
        .flat_map(|f| f.points.iter().map(move |p| (f.frame_id, p)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(frame_id, point)| {
            let mut stats = PreprocessStats::default();
            let mut members = Vec::new();
            let mut samples = Vec::new();
            for obs in &point.track {
                let key = PatchKey::new(frame_id, obs.camera_id, obs.keypoint_index);
                let Some(patch) = features.get(&key) else {
                    stats.missing_feature_patches += 1;
                    continue;
                };
                let kp = [T::lit(obs.keypoint[0]), T::lit(obs.keypoint[1])];
                match interpolate_feature(patch, kp) {
                    Ok(f) => {
                        members.push(patch);
                        samples.push(f);
                    }
                    Err(FeatureError::OutOfPatch { .. }) => stats.keypoints_out_of_patch += 1,
                    Err(e) => return Err(e),
                }
            }
            if samples.is_empty() {
                return Ok((Vec::new(), stats));
            }
            let (_, reference) = reference_feature(&samples, loss)?;
            let costs = members
                .iter()
                .map(|patch| build_cost_patch(patch, &reference))
                .collect::<Result<Vec<_>, _>>()?;
            stats.cost_patches = costs.len();
            Ok((costs, stats))
        })
        .collect();

    let mut store = CostStore::new();
    let mut total = PreprocessStats::default();
    for item in per_point {
        let (costs, stats) = item?;
        total.cost_patches += stats.cost_patches;
        total.missing_feature_patches += stats.missing_feature_patches;
        total.keypoints_out_of_patch += stats.keypoints_out_of_patch;
        for c in costs {
            let key = c.key;
            if store.insert(key, Arc::new(c)).is_some() {
                return Err(FeatureError::DuplicateKey(key));
            }
        }
    }
    Ok((store, total))
}
