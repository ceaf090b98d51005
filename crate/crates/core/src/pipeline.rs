//! The outer refinement loop: repeated inner solves while the extrinsics and
//! intrinsics-coupling coefficients grow geometrically, followed by a final
//! solve with the extrinsics pinned to ground truth.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::features::CostStore;
use crate::geometry::geodesic_distance;
use crate::io::{FeatureMode, RunConfig};
use crate::model::{Camera, CameraId, Extrinsics, FrameModel, Intrinsics, Rig};
use crate::objective::{assemble, cost_by_kind, write_back, ObjectiveError, Weights};
use crate::robust::RobustLoss;
use crate::scalar::{norm3, sub3};
use crate::solver::{SolveOptions, SolveReport, SolverError, Termination};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("schedule already terminated")]
    AlreadyTerminated,
    #[error("outer iteration {outer_iteration}: {source}")]
    Solver {
        outer_iteration: usize,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Objective(ObjectiveError),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
}

fn with_context(outer_iteration: usize, e: ObjectiveError) -> PipelineError {
    match e {
        ObjectiveError::Solver(source) => PipelineError::Solver {
            outer_iteration,
            source,
        },
        other => PipelineError::Objective(other),
    }
}

/// Coefficient schedule. `lambda1`, `lambda2`, `lambda4` and `lambda5` grow by
/// `growth_factor` on every advance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub lambda: [f64; 6],
    pub growth_factor: f64,
    pub theta: f64,
    pub outer_iteration: usize,
}

impl Schedule {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            lambda: [
                config.lambda0,
                config.lambda1,
                config.lambda2,
                config.lambda3,
                config.lambda4,
                config.lambda5,
            ],
            growth_factor: config.growth_factor,
            theta: config.theta,
            outer_iteration: 0,
        }
    }

    pub fn terminated(&self) -> bool {
        self.lambda[1] > self.theta
    }

    pub fn advance(&self) -> Result<Self, PipelineError> {
        if self.terminated() {
            return Err(PipelineError::AlreadyTerminated);
        }
        let mut next = *self;
        for i in [1, 2, 4, 5] {
            next.lambda[i] *= self.growth_factor;
        }
        next.outer_iteration += 1;
        Ok(next)
    }
}

/// Largest rotation (radians) and translation deviation from ground truth
/// over all frames and cameras.
pub fn max_extrinsics_deviation(rig: &Rig, gt: &BTreeMap<CameraId, Extrinsics>) -> (f64, f64) {
    let mut rot: f64 = 0.0;
    let mut trans: f64 = 0.0;
    for frame in &rig.frames {
        for (id, pose) in &frame.per_camera_pose {
            if let Some(g) = gt.get(id) {
                rot = rot.max(geodesic_distance(&pose.rotation, &g.rotation));
                trans = trans.max(norm3(&sub3(&pose.translation, &g.translation)));
            }
        }
    }
    (rot, trans)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub lambda1: f64,
    /// Extrinsics held at ground truth in this solve.
    pub pinned: bool,
    pub inner_iterations: usize,
    pub termination: Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Final objective split by term.
    pub term_costs: BTreeMap<&'static str, f64>,
    pub max_rotation_deviation: f64,
    pub max_translation_deviation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunTrace {
    pub entries: Vec<TraceEntry>,
    /// Number of unpinned solves before the schedule terminated.
    pub outer_iterations: usize,
    pub lambda1_at_termination: f64,
    /// Extrinsics deviation when the schedule terminated, before pinning.
    pub deviation_before_pinning: (f64, f64),
}

impl RunTrace {
    /// One JSON object per line.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn check_rig(rig: &Rig) -> Result<BTreeMap<CameraId, Extrinsics>, PipelineError> {
    let violations = crate::model::validate_rig(rig);
    if let Some(v) = violations.first() {
        return Err(PipelineError::InvalidRig(v.to_string()));
    }
    let gt = rig.gt_extrinsics();
    if let Some(c) = rig.cameras.iter().find(|c| c.gt_extrinsics.is_none()) {
        return Err(PipelineError::Objective(ObjectiveError::MissingCamera(c.camera_id)));
    }
    Ok(gt)
}

fn solve_once(
    rig: &Rig,
    gt: &BTreeMap<CameraId, Extrinsics>,
    store: Option<&CostStore<f64>>,
    weights: &Weights,
    options: &SolveOptions,
    pinned: bool,
    iteration: usize,
) -> Result<(Rig, SolveReport, BTreeMap<&'static str, f64>), PipelineError> {
    let mut a = assemble(rig, gt, store, weights).map_err(|e| with_context(iteration, e))?;
    if pinned {
        for fb in &a.layout.frames {
            for &b in fb.poses.values() {
                a.problem.set_constant(b, true);
            }
        }
    }
    let report = a.problem.solve(options).map_err(|source| PipelineError::Solver {
        outer_iteration: iteration,
        source,
    })?;
    let terms = cost_by_kind(&a.problem);
    Ok((write_back(&a.problem, &a.layout, rig), report, terms))
}

/// Runs the full schedule on `rig`. Ground-truth extrinsics are taken from
/// the rig cameras. `store` is used when the config enables cost maps.
pub fn refine(rig: &Rig, config: &RunConfig, store: Option<&CostStore<f64>>) -> Result<(Rig, RunTrace), PipelineError> {
    let gt = check_rig(rig)?;
    let store = match config.feature_mode {
        FeatureMode::CostMaps => store,
        FeatureMode::None => None,
    };
    let options = SolveOptions {
        max_iterations: config.inner_max_iterations,
        tolerance: config.inner_tolerance,
        ..SolveOptions::default()
    };
    let mut schedule = Schedule::from_config(config);
    let mut current = rig.clone();
    let mut trace = RunTrace::default();
    let weights_for = |s: &Schedule| Weights {
        loss: RobustLoss::cauchy(config.cauchy_scale),
        rotation_residual: config.rotation_residual,
        ..Weights::new(s.lambda, rig.frames.len(), rig.cameras.len())
    };
    let record = |trace: &mut RunTrace,
                  rig: &Rig,
                  s: &Schedule,
                  r: &SolveReport,
                  terms: BTreeMap<&'static str, f64>,
                  pinned: bool| {
        let (rot, tr) = max_extrinsics_deviation(rig, &gt);
        log::debug!(
            "outer {} lambda1 {:.4e}: cost {:.6e} -> {:.6e} in {} steps, deviation {:.3e} rad {:.3e}",
            s.outer_iteration,
            s.lambda[1],
            r.initial_cost,
            r.final_cost,
            r.iterations,
            rot,
            tr
        );
        trace.entries.push(TraceEntry {
            iteration: s.outer_iteration,
            lambda1: s.lambda[1],
            pinned,
            inner_iterations: r.iterations,
            termination: r.termination,
            initial_cost: r.initial_cost,
            final_cost: r.final_cost,
            term_costs: terms,
            max_rotation_deviation: rot,
            max_translation_deviation: tr,
        });
    };

    while !schedule.terminated() {
        let (next, report, terms) = solve_once(
            &current,
            &gt,
            store,
            &weights_for(&schedule),
            &options,
            false,
            schedule.outer_iteration,
        )?;
        current = next;
        record(&mut trace, &current, &schedule, &report, terms, false);
        schedule = schedule.advance()?;
    }
    trace.outer_iterations = schedule.outer_iteration;
    trace.lambda1_at_termination = schedule.lambda[1];
    trace.deviation_before_pinning = max_extrinsics_deviation(&current, &gt);
    log::info!(
        "schedule terminated after {} outer iterations (lambda1 {:.4e})",
        trace.outer_iterations,
        schedule.lambda[1]
    );

    for frame in &mut current.frames {
        for (id, pose) in frame.per_camera_pose.iter_mut() {
            *pose = gt[id];
        }
    }
    let (refined, report, terms) = solve_once(
        &current,
        &gt,
        store,
        &weights_for(&schedule),
        &options,
        true,
        schedule.outer_iteration,
    )?;
    record(&mut trace, &refined, &schedule, &report, terms, true);
    Ok((refined, trace))
}

/// The single-frame special case: refines one frame on its own and returns
/// the refined frame and its global intrinsics.
pub fn refine_single_frame(
    frame: &FrameModel,
    cameras: &[Camera],
    config: &RunConfig,
    store: Option<&CostStore<f64>>,
) -> Result<(FrameModel, BTreeMap<CameraId, Intrinsics>, RunTrace), PipelineError> {
    let mut rig = Rig {
        cameras: cameras.to_vec(),
        global_intrinsics: BTreeMap::new(),
        frames: vec![frame.clone()],
    };
    rig.global_intrinsics = rig.mean_frame_intrinsics();
    let (out, trace) = refine(&rig, config, store)?;
    let Rig {
        mut frames,
        global_intrinsics,
        ..
    } = out;
    Ok((frames.remove(0), global_intrinsics, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_advance() {
        let s = Schedule::from_config(&RunConfig::default()).advance().unwrap();
        assert_eq!(s.lambda[1], 0.02);
        assert_eq!(s.lambda[0], 1.0);
        assert_eq!(s.lambda[3], 0.01);
        assert_eq!(s.lambda[4], 0.04);
        assert_eq!(s.outer_iteration, 1);
    }

    fn advances_until_done(mut s: Schedule) -> Schedule {
        while !s.terminated() {
            s = s.advance().unwrap();
        }
        s
    }

    #[test]
    fn default_schedule_length() {
        let s = advances_until_done(Schedule::from_config(&RunConfig::default()));
        assert_eq!(s.outer_iteration, 27);
        assert_eq!(s.lambda[1], 0.01 * 2f64.powi(27));
        assert_eq!(s.advance(), Err(PipelineError::AlreadyTerminated));
    }

    #[test]
    fn growth_ten() {
        let config = RunConfig {
            growth_factor: 10.0,
            ..RunConfig::default()
        };
        assert_eq!(advances_until_done(Schedule::from_config(&config)).outer_iteration, 9);
    }
}
