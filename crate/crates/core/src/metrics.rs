//! Intrinsics error metrics and the report that mirrors the usual
//! single-frame / multi-frame comparison table.
//!
//! Relative errors are plain ratios; rendering multiplies them by 1000 (per mille).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::model::{CameraId, Intrinsics};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("camera sets differ (e.g. camera {0})")]
    KeyMismatch(CameraId),
    #[error("no frames to aggregate")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct IntrinsicsErrors {
    pub focal_abs: f64,
    pub focal_rel: f64,
    pub pp_abs: f64,
    pub pp_rel: f64,
}

impl IntrinsicsErrors {
    fn to_array(self) -> [f64; 4] {
        [self.focal_abs, self.focal_rel, self.pp_abs, self.pp_rel]
    }

    fn from_array(v: [f64; 4]) -> Self {
        Self {
            focal_abs: v[0],
            focal_rel: v[1],
            pp_abs: v[2],
            pp_rel: v[3],
        }
    }
}

/// Errors of one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CameraErrors {
    pub camera_id: CameraId,
    pub estimate: Intrinsics,
    pub errors: IntrinsicsErrors,
}

fn check_keys<V, W>(est: &BTreeMap<CameraId, V>, gt: &BTreeMap<CameraId, W>) -> Result<(), MetricsError> {
    if let Some(id) = est.keys().find(|k| !gt.contains_key(k)) {
        return Err(MetricsError::KeyMismatch(*id));
    }
    if let Some(id) = gt.keys().find(|k| !est.contains_key(k)) {
        return Err(MetricsError::KeyMismatch(*id));
    }
    Ok(())
}

/// Per-camera errors, in camera id order.
pub fn camera_errors(
    est: &BTreeMap<CameraId, Intrinsics>,
    gt: &BTreeMap<CameraId, Intrinsics>,
    dims: &BTreeMap<CameraId, (u32, u32)>,
) -> Result<Vec<CameraErrors>, MetricsError> {
    check_keys(est, gt)?;
    check_keys(est, dims)?;
    Ok(est
        .iter()
        .map(|(id, e)| {
            let g = &gt[id];
            let (w, h) = dims[id];
            let dfx = (e.fx - g.fx).abs();
            let dfy = (e.fy - g.fy).abs();
            let dcx = (e.cx - g.cx).abs();
            let dcy = (e.cy - g.cy).abs();
            CameraErrors {
                camera_id: *id,
                estimate: *e,
                errors: IntrinsicsErrors {
                    focal_abs: dfx + dfy,
                    focal_rel: dfx / g.fx + dfy / g.fy,
                    pp_abs: dcx + dcy,
                    pp_rel: dcx / w as f64 + dcy / h as f64,
                },
            }
        })
        .collect())
}

/// Mean over cameras of the per-camera errors.
pub fn frame_errors(
    est: &BTreeMap<CameraId, Intrinsics>,
    gt: &BTreeMap<CameraId, Intrinsics>,
    dims: &BTreeMap<CameraId, (u32, u32)>,
) -> Result<IntrinsicsErrors, MetricsError> {
    let per_camera = camera_errors(est, gt, dims)?;
    if per_camera.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sum = [0.0; 4];
    for c in &per_camera {
        for (s, v) in sum.iter_mut().zip(c.errors.to_array()) {
            *s += v;
        }
    }
    let n = per_camera.len() as f64;
    Ok(IntrinsicsErrors::from_array(sum.map(|s| s / n)))
}

/// Errors of the single global intrinsics set. Same sums as [`frame_errors`].
pub fn multiframe_errors(
    global: &BTreeMap<CameraId, Intrinsics>,
    gt: &BTreeMap<CameraId, Intrinsics>,
    dims: &BTreeMap<CameraId, (u32, u32)>,
) -> Result<IntrinsicsErrors, MetricsError> {
    frame_errors(global, gt, dims)
}

/// Mean, maximum and minimum of each metric. Maximum and minimum are absent
/// for results that do not depend on the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: IntrinsicsErrors,
    pub max: Option<IntrinsicsErrors>,
    pub min: Option<IntrinsicsErrors>,
}

pub fn aggregate(per_frame: &[IntrinsicsErrors]) -> Result<Aggregate, MetricsError> {
    if per_frame.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sum = [0.0; 4];
    let mut max = [f64::NEG_INFINITY; 4];
    let mut min = [f64::INFINITY; 4];
    for e in per_frame {
        for (i, v) in e.to_array().into_iter().enumerate() {
            sum[i] += v;
            max[i] = max[i].max(v);
            min[i] = min[i].min(v);
        }
    }
    let n = per_frame.len() as f64;
    Ok(Aggregate {
        mean: IntrinsicsErrors::from_array(sum.map(|s| s / n)),
        max: Some(IntrinsicsErrors::from_array(max)),
        min: Some(IntrinsicsErrors::from_array(min)),
    })
}

impl Aggregate {
    /// A multi-frame result: the mean only.
    pub fn multiframe(errors: IntrinsicsErrors) -> Self {
        Self {
            mean: errors,
            max: None,
            min: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame_id: u32,
    pub errors: IntrinsicsErrors,
}

/// Evaluation report. `per_camera` refers to the global intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub per_camera: Vec<CameraErrors>,
    pub per_frame: Vec<FrameReport>,
    /// Frame-specific intrinsics aggregated over frames.
    pub aggregate: Aggregate,
    /// The global intrinsics.
    pub multiframe: Aggregate,
}

/// Builds the report from the refined frame-specific and global intrinsics.
pub fn build_report(
    per_frame_intrinsics: &[(u32, BTreeMap<CameraId, Intrinsics>)],
    global: &BTreeMap<CameraId, Intrinsics>,
    gt: &BTreeMap<CameraId, Intrinsics>,
    dims: &BTreeMap<CameraId, (u32, u32)>,
) -> Result<Report, MetricsError> {
    let per_frame = per_frame_intrinsics
        .iter()
        .map(|(id, est)| {
            Ok(FrameReport {
                frame_id: *id,
                errors: frame_errors(est, gt, dims)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let errors: Vec<_> = per_frame.iter().map(|f| f.errors).collect();
    Ok(Report {
        per_camera: camera_errors(global, gt, dims)?,
        aggregate: aggregate(&errors)?,
        multiframe: Aggregate::multiframe(multiframe_errors(global, gt, dims)?),
        per_frame,
    })
}

fn cell(v: Option<f64>, scale: f64) -> String {
    match v {
        Some(v) => format!("{:.3}", v * scale),
        None => "/".to_string(),
    }
}

/// Renders rows as an aligned text table with focal and principal point
/// errors, absolute (px) and relative (per mille), each as mean/max/min.
pub fn render_table(rows: &[(&str, Aggregate)]) -> String {
    let header = [
        "method", "f_abs mean", "f_abs max", "f_abs min", "f_rel mean", "f_rel max", "f_rel min", "pp_abs mean",
        "pp_abs max", "pp_abs min", "pp_rel mean", "pp_rel max", "pp_rel min",
    ];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, agg) in rows {
        let mut row = vec![name.to_string()];
        for (i, scale) in [(0, 1.0), (1, 1000.0), (2, 1.0), (3, 1000.0)] {
            row.push(cell(Some(agg.mean.to_array()[i]), scale));
            row.push(cell(agg.max.map(|m| m.to_array()[i]), scale));
            row.push(cell(agg.min.map(|m| m.to_array()[i]), scale));
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

impl Report {
    pub fn render_table(&self) -> String {
        render_table(&[("single frame", self.aggregate), ("multiple frames", self.multiframe)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(k: Intrinsics) -> BTreeMap<CameraId, Intrinsics> {
        [(0, k)].into_iter().collect()
    }

    #[test]
    fn exact_is_zero() {
        let k = Intrinsics::new(1000.0, 1000.0, 500.0, 400.0);
        let dims = [(0, (1000, 800))].into_iter().collect();
        assert_eq!(frame_errors(&one(k), &one(k), &dims).unwrap(), IntrinsicsErrors::default());
    }

    #[test]
    fn focal_offsets() {
        let gt = Intrinsics::new(1000.0, 1000.0, 500.0, 400.0);
        let est = Intrinsics::new(1002.0, 996.0, 500.0, 400.0);
        let dims = [(0, (1000, 800))].into_iter().collect();
        let e = frame_errors(&one(est), &one(gt), &dims).unwrap();
        assert_eq!(e.focal_abs, 6.0);
        assert!((e.focal_rel - 0.006).abs() < 1e-15);
        assert_eq!((e.pp_abs, e.pp_rel), (0.0, 0.0));
    }

    #[test]
    fn mean_over_cameras() {
        let gt = Intrinsics::new(1000.0, 1000.0, 1024.0, 768.0);
        let g: BTreeMap<_, _> = [(0, gt), (1, gt)].into_iter().collect();
        let est: BTreeMap<_, _> = [(0, Intrinsics { fx: 1006.0, ..gt }), (1, gt)].into_iter().collect();
        let dims = [(0, (2048, 1536)), (1, (2048, 1536))].into_iter().collect();
        assert_eq!(frame_errors(&est, &g, &dims).unwrap().focal_abs, 3.0);

        let est: BTreeMap<_, _> = [(0, Intrinsics { cx: 1027.2, ..gt }), (1, gt)].into_iter().collect();
        let e = multiframe_errors(&est, &g, &dims).unwrap();
        assert!((e.pp_abs - 1.6).abs() < 1e-12);
        assert!((e.pp_rel - (1027.2f64 - 1024.0) / 2048.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn key_mismatch() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let other: BTreeMap<_, _> = [(1, k)].into_iter().collect();
        let dims = [(0, (10, 10))].into_iter().collect();
        assert_eq!(frame_errors(&one(k), &other, &dims), Err(MetricsError::KeyMismatch(0)));
    }

    #[test]
    fn aggregates() {
        let e = |f| IntrinsicsErrors {
            focal_abs: f,
            ..Default::default()
        };
        let a = aggregate(&[e(2.0), e(4.0), e(9.0)]).unwrap();
        assert_eq!(a.mean.focal_abs, 5.0);
        assert_eq!(a.max.unwrap().focal_abs, 9.0);
        assert_eq!(a.min.unwrap().focal_abs, 2.0);
        let s = aggregate(&[e(3.0)]).unwrap();
        assert_eq!((s.mean, s.max.unwrap(), s.min.unwrap()), (e(3.0), e(3.0), e(3.0)));
        assert_eq!(aggregate(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn table_marks_multiframe_extrema() {
        let m = Aggregate::multiframe(IntrinsicsErrors {
            focal_abs: 5.405,
            focal_rel: 0.000712,
            pp_abs: 1.994,
            pp_rel: 0.001335,
        });
        let t = render_table(&[("Ours (Multiple frames)", m)]);
        let row = t.lines().nth(1).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(&cells[3..], &["5.405", "/", "/", "0.712", "/", "/", "1.994", "/", "/", "1.335", "/", "/"]);
    }
}
