//! Robust Levenberg-Marquardt over heterogeneous residual blocks.
//!
//! The objective is `sum_b weight_b * rho_b(||r_b||)`. Each step solves the
//! reweighted Gauss-Newton normal equations, with every residual and its
//! Jacobian scaled by `sqrt(weight * rho'(||r||^2))`. Point blocks are
//! eliminated through the Schur complement and the reduced camera system is
//! factored with a Cholesky decomposition that skips the zero prefix of each
//! row, so blocks added last (shared by everything) should be the few global ones.

mod residual;

pub use residual::{
    Evaluation, ResidualBlock, ResidualKind, MAX_BLOCKS_PER_RESIDUAL, MAX_RESIDUAL_DIM,
    MAX_TANGENT_DIM,
};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::Quat;

pub type BlockId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Point3,
    /// `[qw, qx, qy, qz, tx, ty, tz]`, updated on the rotation manifold.
    Pose,
    Intrinsics,
    GlobalIntrinsics,
}

impl BlockKind {
    pub fn ambient_dim(self) -> usize {
        match self {
            BlockKind::Point3 => 3,
            BlockKind::Pose => 7,
            BlockKind::Intrinsics | BlockKind::GlobalIntrinsics => 4,
        }
    }

    pub fn tangent_dim(self) -> usize {
        match self {
            BlockKind::Point3 => 3,
            BlockKind::Pose => 6,
            BlockKind::Intrinsics | BlockKind::GlobalIntrinsics => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub kind: BlockKind,
    pub values: Vec<f64>,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("non-finite {what} in residual block {residual} ({kind})")]
    NumericalFailure {
        residual: usize,
        kind: &'static str,
        what: &'static str,
    },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: Termination,
    /// Residual blocks that were inactive (behind the camera, outside their
    /// cost patch) at the final state.
    pub inactive_residuals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve stops.
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            tolerance: 1e-9,
            initial_damping: 1e-4,
        }
    }
}

const MAX_DAMPING: f64 = 1e16;
const DIAGONAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, kind: BlockKind, values: &[f64]) -> BlockId {
        assert_eq!(values.len(), kind.ambient_dim(), "wrong parameter count for {kind:?}");
        let mut values = values.to_vec();
        if kind == BlockKind::Pose {
            retract_pose(&mut values, &[0.0; 6]);
        }
        self.blocks.push(ParameterBlock {
            kind,
            values,
            constant: false,
        });
        self.blocks.len() - 1
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.blocks[id].constant = constant;
    }

    pub fn block(&self, id: BlockId) -> &ParameterBlock {
        &self.blocks[id]
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn residuals(&self) -> &[ResidualBlock] {
        &self.residuals
    }

    pub fn set_values(&mut self, id: BlockId, values: &[f64]) {
        self.blocks[id].values.copy_from_slice(values);
    }

    /// Adds a residual block after checking its parameter references.
    pub fn add_residual(&mut self, block: ResidualBlock) -> Result<usize, SolverError> {
        let expected = block.kind.expected_blocks();
        if block.params.len() != expected.len() {
            return Err(SolverError::InvalidProblem(format!(
                "{} expects {} parameter blocks, got {}",
                block.kind.name(),
                expected.len(),
                block.params.len()
            )));
        }
        for (&id, &kind) in block.params.iter().zip(expected) {
            match self.blocks.get(id) {
                Some(b) if b.kind == kind => {}
                _ => {
                    return Err(SolverError::InvalidProblem(format!(
                        "{} parameter {id} is not a {kind:?} block",
                        block.kind.name()
                    )))
                }
            }
        }
        if !(block.weight.is_finite() && block.weight >= 0.0) {
            return Err(SolverError::InvalidProblem(format!(
                "weight {} is not finite and nonnegative",
                block.weight
            )));
        }
        self.residuals.push(block);
        Ok(self.residuals.len() - 1)
    }

    fn param_slices<'a>(values: &'a [Vec<f64>], block: &ResidualBlock) -> [&'a [f64]; MAX_BLOCKS_PER_RESIDUAL] {
        let mut out: [&[f64]; MAX_BLOCKS_PER_RESIDUAL] = [&[]; MAX_BLOCKS_PER_RESIDUAL];
        for (slot, &id) in block.params.iter().enumerate() {
            out[slot] = &values[id];
        }
        out
    }

    fn evaluate_all(&self, values: &[Vec<f64>]) -> Vec<Option<Evaluation>> {
        self.residuals
            .par_iter()
            .map(|r| {
                if r.weight == 0.0 {
                    return None;
                }
                let params = Self::param_slices(values, r);
                r.kind.evaluate(&params[..r.params.len()])
            })
            .collect()
    }

    fn cost_of(&self, evals: &[Option<Evaluation>]) -> Result<f64, SolverError> {
        let mut total = 0.0;
        for (i, (r, ev)) in self.residuals.iter().zip(evals).enumerate() {
            let Some(ev) = ev else { continue };
            if !ev.is_finite() {
                return Err(SolverError::NumericalFailure {
                    residual: i,
                    kind: r.kind.name(),
                    what: "residual or jacobian",
                });
            }
            let c = r.weight * r.loss.evaluate_squared(ev.squared_norm()).0;
            if !c.is_finite() {
                return Err(SolverError::NumericalFailure {
                    residual: i,
                    kind: r.kind.name(),
                    what: "cost",
                });
            }
            total += c;
        }
        Ok(total)
    }

    fn current_values(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.values.clone()).collect()
    }

    /// Objective at the current parameter values.
    pub fn total_cost(&self) -> Result<f64, SolverError> {
        let values = self.current_values();
        self.cost_of(&self.evaluate_all(&values))
    }

    /// Per-residual costs at the current values (inactive residuals cost 0).
    pub fn residual_costs(&self) -> Vec<f64> {
        let values = self.current_values();
        self.evaluate_all(&values)
            .iter()
            .zip(&self.residuals)
            .map(|(ev, r)| match ev {
                Some(ev) => r.weight * r.loss.evaluate_squared(ev.squared_norm()).0,
                None => 0.0,
            })
            .collect()
    }

    fn layout(&self) -> Layout {
        let mut vars = Vec::with_capacity(self.blocks.len());
        let mut reduced_dim = 0;
        let mut n_points = 0;
        for b in &self.blocks {
            vars.push(if b.constant {
                Var::Constant
            } else if b.kind == BlockKind::Point3 {
                n_points += 1;
                Var::Point(n_points - 1)
            } else {
                let offset = reduced_dim;
                reduced_dim += b.kind.tangent_dim();
                Var::Reduced {
                    offset,
                    dim: b.kind.tangent_dim(),
                }
            });
        }
        Layout {
            vars,
            reduced_dim,
            n_points,
        }
    }

    fn build_normal_equations(&self, layout: &Layout, evals: &[Option<Evaluation>]) -> NormalEquations {
        let n = layout.reduced_dim;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        let mut points = vec![PointSystem::default(); layout.n_points];

        for (r, ev) in self.residuals.iter().zip(evals) {
            let Some(ev) = ev else { continue };
            let dim = ev.dim;
            let scale = (r.weight * r.loss.evaluate_squared(ev.squared_norm()).1).sqrt();
            if scale == 0.0 {
                continue;
            }
            let mut res = [0.0; MAX_RESIDUAL_DIM];
            for (o, v) in res.iter_mut().zip(&ev.residual).take(dim) {
                *o = v * scale;
            }
            let jac = |slot: usize, row: usize, col: usize| ev.jacobians[slot][row][col] * scale;

            let mut reduced: [(usize, usize, usize); MAX_BLOCKS_PER_RESIDUAL] = [(0, 0, 0); 3];
            let mut n_reduced = 0;
            let mut point = None;
            for (slot, &id) in r.params.iter().enumerate() {
                match layout.vars[id] {
                    Var::Constant => {}
                    Var::Point(p) => point = Some((slot, p)),
                    Var::Reduced { offset, dim } => {
                        reduced[n_reduced] = (slot, offset, dim);
                        n_reduced += 1;
                    }
                }
            }
            let reduced = &reduced[..n_reduced];

            for &(sa, oa, da) in reduced {
                for i in 0..da {
                    let mut acc = 0.0;
                    for row in 0..dim {
                        acc += jac(sa, row, i) * res[row];
                    }
                    g[oa + i] += acc;
                }
                for &(sb, ob, db) in reduced {
                    for i in 0..da {
                        for j in 0..db {
                            let mut acc = 0.0;
                            for row in 0..dim {
                                acc += jac(sa, row, i) * jac(sb, row, j);
                            }
                            a[(oa + i, ob + j)] += acc;
                        }
                    }
                }
            }

            if let Some((sp, p)) = point {
                let ps = &mut points[p];
                for i in 0..3 {
                    let mut acc = 0.0;
                    for row in 0..dim {
                        acc += jac(sp, row, i) * res[row];
                    }
                    ps.g[i] += acc;
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for row in 0..dim {
                            acc += jac(sp, row, i) * jac(sp, row, j);
                        }
                        ps.c[i][j] += acc;
                    }
                }
                for &(sa, oa, da) in reduced {
                    let e = ps.coupling(oa, da);
                    for i in 0..3 {
                        for j in 0..da {
                            let mut acc = 0.0;
                            for row in 0..dim {
                                acc += jac(sp, row, i) * jac(sa, row, j);
                            }
                            e[i][j] += acc;
                        }
                    }
                }
            }
        }
        NormalEquations { a, g, points }
    }

    /// Solves `(H + mu D) delta = -g`, returning the reduced and point steps.
    fn damped_step(&self, layout: &Layout, ne: &NormalEquations, mu: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let n = layout.reduced_dim;
        // Lower triangle of the reduced system, row-major. `ne.a` is symmetric so
        // its column-major storage reads the same.
        let mut s = ne.a.as_slice().to_vec();
        for i in 0..n {
            s[i * n + i] += mu * ne.a[(i, i)].max(DIAGONAL_FLOOR);
        }
        let mut rhs: Vec<f64> = ne.g.iter().map(|v| -v).collect();

        let mut c_inv = Vec::with_capacity(ne.points.len());
        let mut w: Vec<[[f64; MAX_TANGENT_DIM]; 3]> = Vec::new();
        for ps in &ne.points {
            let mut c = Matrix3::from_fn(|i, j| ps.c[i][j]);
            for i in 0..3 {
                c[(i, i)] += mu * ps.c[i][i].max(DIAGONAL_FLOOR);
            }
            let ci = c.cholesky()?.inverse();
            // W_b = C^-1 E_b, stored as 3 x dim
            w.clear();
            w.extend(ps.e.iter().map(|(_, db, e)| {
                let mut out = [[0.0; MAX_TANGENT_DIM]; 3];
                for (i, row) in out.iter_mut().enumerate() {
                    for j in 0..*db {
                        row[j] = ci[(i, 0)] * e[0][j] + ci[(i, 1)] * e[1][j] + ci[(i, 2)] * e[2][j];
                    }
                }
                out
            }));
            let cg = ci * Vector3::new(ps.g[0], ps.g[1], ps.g[2]);
            for (oa, da, ea) in &ps.e {
                for i in 0..*da {
                    rhs[oa + i] += ea[0][i] * cg[0] + ea[1][i] * cg[1] + ea[2][i] * cg[2];
                }
                for ((ob, db, _), wb) in ps.e.iter().zip(&w) {
                    if ob > oa {
                        continue;
                    }
                    for i in 0..*da {
                        let row = (oa + i) * n + ob;
                        let cols = if ob == oa { i + 1 } else { *db };
                        let (e0, e1, e2) = (ea[0][i], ea[1][i], ea[2][i]);
                        for (j, out) in s[row..row + cols].iter_mut().enumerate() {
                            *out -= e0 * wb[0][j] + e1 * wb[1][j] + e2 * wb[2][j];
                        }
                    }
                }
            }
            c_inv.push(ci);
        }

        let first = profile_cholesky(&mut s, n)?;
        profile_solve(&s, n, &first, &mut rhs);
        let delta_r = DVector::from_vec(rhs);
        let delta_p = ne
            .points
            .iter()
            .zip(&c_inv)
            .map(|(ps, ci)| {
                let mut b = Vector3::new(-ps.g[0], -ps.g[1], -ps.g[2]);
                for (oa, da, e) in &ps.e {
                    for i in 0..3 {
                        let mut acc = 0.0;
                        for j in 0..*da {
                            acc += e[i][j] * delta_r[oa + j];
                        }
                        b[i] -= acc;
                    }
                }
                ci * b
            })
            .collect();
        if delta_r.iter().all(|v| v.is_finite()) {
            Some((delta_r, delta_p))
        } else {
            None
        }
    }

    fn apply_step(&self, layout: &Layout, values: &[Vec<f64>], delta_r: &DVector<f64>, delta_p: &[Vector3<f64>]) -> Vec<Vec<f64>> {
        let mut out = values.to_vec();
        for (id, (block, var)) in self.blocks.iter().zip(&layout.vars).enumerate() {
            let v = &mut out[id];
            match *var {
                Var::Constant => {}
                Var::Point(p) => {
                    for i in 0..3 {
                        v[i] += delta_p[p][i];
                    }
                }
                Var::Reduced { offset, dim } => {
                    let d = &delta_r.as_slice()[offset..offset + dim];
                    if block.kind == BlockKind::Pose {
                        retract_pose(v, d);
                    } else {
                        for i in 0..dim {
                            v[i] += d[i];
                        }
                    }
                }
            }
        }
        out
    }

    /// Minimizes the objective in place.
    pub fn solve(&mut self, opts: &SolveOptions) -> Result<SolveReport, SolverError> {
        if self.blocks.iter().all(|b| b.constant) {
            return Err(SolverError::InvalidProblem("every parameter block is constant".into()));
        }
        let layout = self.layout();
        let mut values = self.current_values();
        let mut evals = self.evaluate_all(&values);
        let initial_cost = self.cost_of(&evals)?;
        let mut cost = initial_cost;
        let mut mu = opts.initial_damping;
        let mut iterations = 0;
        let mut accepted_steps = 0;
        let mut termination = Termination::MaxIterations;

        let mut ne = self.build_normal_equations(&layout, &evals);
        let stationary = |ne: &NormalEquations| {
            ne.g.iter().all(|v| *v == 0.0) && ne.points.iter().all(|p| p.g.iter().all(|v| *v == 0.0))
        };
        if cost == 0.0 || stationary(&ne) {
            termination = Termination::Converged;
        } else {
            while iterations < opts.max_iterations {
                iterations += 1;
                let Some((delta_r, delta_p)) = self.damped_step(&layout, &ne, mu) else {
                    mu *= 2.0;
                    if mu > MAX_DAMPING {
                        termination = Termination::Stalled;
                        break;
                    }
                    continue;
                };
                let candidate = self.apply_step(&layout, &values, &delta_r, &delta_p);
                let cand_evals = self.evaluate_all(&candidate);
                let new_cost = self.cost_of(&cand_evals).unwrap_or(f64::INFINITY);
                if new_cost < cost {
                    debug_assert!(new_cost <= cost);
                    let relative = (cost - new_cost) / cost;
                    values = candidate;
                    evals = cand_evals;
                    cost = new_cost;
                    accepted_steps += 1;
                    mu = (mu * 0.5).max(1e-15);
                    if relative < opts.tolerance || cost == 0.0 {
                        termination = Termination::Converged;
                        break;
                    }
                    ne = self.build_normal_equations(&layout, &evals);
                } else {
                    if (new_cost - cost).abs() <= opts.tolerance * cost {
                        termination = Termination::Converged;
                        break;
                    }
                    mu *= 2.0;
                    if mu > MAX_DAMPING {
                        termination = Termination::Stalled;
                        break;
                    }
                }
            }
        }

        for (block, v) in self.blocks.iter_mut().zip(values) {
            if !block.constant {
                block.values = v;
            }
        }
        let inactive_residuals = self
            .residuals
            .iter()
            .zip(&evals)
            .filter(|(r, e)| r.weight > 0.0 && e.is_none())
            .count();
        Ok(SolveReport {
            initial_cost,
            final_cost: cost,
            iterations,
            accepted_steps,
            termination,
            inactive_residuals,
        })
    }
}

/// `q <- canonical(q * exp(delta_rot))`, `t <- t + delta_t`.
fn retract_pose(v: &mut [f64], delta: &[f64]) {
    let q = Quat::new(v[0], v[1], v[2], v[3]);
    let dq = Quat::from_axis_angle(&[delta[0], delta[1], delta[2]]);
    let q = q.mul(&dq).normalized().canonical();
    v[0] = q.w;
    v[1] = q.x;
    v[2] = q.y;
    v[3] = q.z;
    for i in 0..3 {
        v[4 + i] += delta[3 + i];
    }
}

#[derive(Debug, Clone, Copy)]
enum Var {
    Constant,
    Point(usize),
    Reduced { offset: usize, dim: usize },
}

struct Layout {
    vars: Vec<Var>,
    reduced_dim: usize,
    n_points: usize,
}

/// First structurally nonzero column of each row of a row-major lower triangle.
fn row_profile(a: &[f64], n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| a[i * n..i * n + i].iter().position(|v| *v != 0.0).unwrap_or(i))
        .collect()
}

/// In-place Cholesky of the lower triangle of a row-major `n x n` matrix,
/// skipping the zero prefix of every row. Fill-in never leaves that envelope,
/// so block-arrow systems (independent groups followed by shared blocks) cost
/// little more than their diagonal blocks. Returns `None` when the matrix is
/// not numerically positive definite.
fn profile_cholesky(a: &mut [f64], n: usize) -> Option<Vec<usize>> {
    let first = row_profile(a, n);
    for i in 0..n {
        let fi = first[i];
        for j in fi..=i {
            let k0 = fi.max(first[j]);
            let (head, tail) = a.split_at_mut(i * n);
            let row_i = &tail[..n];
            let row_j: &[f64] = if j == i { row_i } else { &head[j * n..j * n + n] };
            let dot: f64 = row_i[k0..j].iter().zip(&row_j[k0..j]).map(|(x, y)| x * y).sum();
            let v = tail[j] - dot;
            if j == i {
                if !(v > 0.0 && v.is_finite()) {
                    return None;
                }
                tail[i] = v.sqrt();
            } else {
                tail[j] = v / head[j * n + j];
            }
        }
    }
    Some(first)
}

/// Solves `L L^T x = b` in place after `profile_cholesky`.
fn profile_solve(l: &[f64], n: usize, first: &[usize], b: &mut [f64]) {
    for i in 0..n {
        let fi = first[i];
        let dot: f64 = l[i * n + fi..i * n + i].iter().zip(&b[fi..i]).map(|(x, y)| x * y).sum();
        b[i] = (b[i] - dot) / l[i * n + i];
    }
    for i in (0..n).rev() {
        b[i] /= l[i * n + i];
        let bi = b[i];
        for k in first[i]..i {
            b[k] -= l[i * n + k] * bi;
        }
    }
}

#[derive(Debug, Clone, Default)]
struct PointSystem {
    c: [[f64; 3]; 3],
    g: [f64; 3],
    /// `(offset, dim, J_point^T J_block)` per coupled reduced block.
    e: Vec<(usize, usize, [[f64; MAX_TANGENT_DIM]; 3])>,
}

impl PointSystem {
    fn coupling(&mut self, offset: usize, dim: usize) -> &mut [[f64; MAX_TANGENT_DIM]; 3] {
        let idx = match self.e.iter().position(|x| x.0 == offset) {
            Some(i) => i,
            None => {
                self.e.push((offset, dim, [[0.0; MAX_TANGENT_DIM]; 3]));
                self.e.len() - 1
            }
        };
        &mut self.e[idx].2
    }
}

struct NormalEquations {
    a: DMatrix<f64>,
    g: DVector<f64>,
    points: Vec<PointSystem>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::model::{Extrinsics, Intrinsics};
    use crate::robust::RobustLoss;

    fn two_cameras() -> (Vec<Extrinsics>, Intrinsics) {
        let k = Intrinsics::new(800.0, 820.0, 320.0, 240.0);
        let poses = vec![
            Extrinsics::new(Quat::identity(), [0.0, 0.0, 4.0]),
            Extrinsics::new(Quat::from_axis_angle(&[0.0, 0.3, 0.0]), [-1.0, 0.1, 4.2]),
        ];
        (poses, k)
    }

    #[test]
    fn profile_cholesky_matches_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Two independent 4x4 groups followed by 3 shared rows.
        let n = 11;
        let mut b = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let same_group = i / 4 == j / 4 || i >= 8 || j >= 8;
                if same_group {
                    b[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
        let a = DMatrix::from_fn(n, n, |i, j| {
            let linked = i / 4 == j / 4 || i >= 8 || j >= 8;
            if linked {
                a[(i, j)]
            } else {
                0.0
            }
        }) + DMatrix::identity(n, n) * 5.0;
        let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let expected = a.clone().cholesky().unwrap().solve(&DVector::from_vec(rhs.clone()));
        let mut s = a.as_slice().to_vec();
        let first = profile_cholesky(&mut s, n).unwrap();
        assert_eq!(&first[4..8], &[4, 4, 4, 4]);
        let mut x = rhs;
        profile_solve(&s, n, &first, &mut x);
        for i in 0..n {
            assert!((x[i] - expected[i]).abs() < 1e-12);
        }
        let mut not_pd = vec![1.0, 2.0, 2.0, 1.0];
        assert!(profile_cholesky(&mut not_pd, 2).is_none());
    }

    #[test]
    fn recovers_a_perturbed_point() {
        let (poses, k) = two_cameras();
        let truth = [0.2, -0.1, 0.3];
        let mut problem = Problem::new();
        let kid = problem.add_block(BlockKind::Intrinsics, &k.to_array());
        problem.set_constant(kid, true);
        let pid = problem.add_block(BlockKind::Point3, &[0.3, -0.1, 0.3]);
        for pose in &poses {
            let id = problem.add_block(BlockKind::Pose, &pose.to_array());
            problem.set_constant(id, true);
            let observed = project(pose, &k, &truth).unwrap();
            problem
                .add_residual(ResidualBlock::new(
                    ResidualKind::Reprojection { observed },
                    vec![id, kid, pid],
                    1.0,
                    RobustLoss::cauchy(0.25),
                ))
                .unwrap();
        }
        let report = problem.solve(&SolveOptions::default()).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        let got = &problem.block(pid).values;
        for i in 0..3 {
            assert!((got[i] - truth[i]).abs() < 1e-8, "{got:?}");
        }
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let mut problem = Problem::new();
        let a = problem.add_block(BlockKind::Intrinsics, &[1.0, 2.0, 3.0, 4.0]);
        let b = problem.add_block(BlockKind::GlobalIntrinsics, &[1.0, 2.0, 3.0, 4.0]);
        problem
            .add_residual(ResidualBlock::new(ResidualKind::FocalCoupling, vec![a, b], 1.0, RobustLoss::cauchy(0.25)))
            .unwrap();
        let report = problem.solve(&SolveOptions::default()).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        assert!(report.iterations <= 1);
        assert_eq!(report.final_cost, report.initial_cost);
    }

    #[test]
    fn rejects_mismatched_blocks() {
        let mut problem = Problem::new();
        let a = problem.add_block(BlockKind::Intrinsics, &[1.0, 2.0, 3.0, 4.0]);
        let err = problem
            .add_residual(ResidualBlock::new(
                ResidualKind::TranslationPrior { reference: [0.0; 3] },
                vec![a],
                1.0,
                RobustLoss::trivial(),
            ))
            .unwrap_err();
        assert!(matches!(err, SolverError::InvalidProblem(_)));
        assert!(problem
            .add_residual(ResidualBlock::new(ResidualKind::FocalCoupling, vec![a, 9], 1.0, RobustLoss::trivial()))
            .is_err());
    }

    #[test]
    fn all_constant_is_invalid() {
        let mut problem = Problem::new();
        let a = problem.add_block(BlockKind::Point3, &[0.0; 3]);
        problem.set_constant(a, true);
        assert!(matches!(problem.solve(&SolveOptions::default()), Err(SolverError::InvalidProblem(_))));
    }

    #[test]
    fn non_finite_state_is_a_numerical_failure() {
        let mut problem = Problem::new();
        let a = problem.add_block(BlockKind::Intrinsics, &[f64::NAN, 2.0, 3.0, 4.0]);
        let b = problem.add_block(BlockKind::GlobalIntrinsics, &[1.0, 2.0, 3.0, 4.0]);
        problem
            .add_residual(ResidualBlock::new(ResidualKind::FocalCoupling, vec![a, b], 1.0, RobustLoss::trivial()))
            .unwrap();
        assert!(matches!(
            problem.solve(&SolveOptions::default()),
            Err(SolverError::NumericalFailure { residual: 0, .. })
        ));
    }
}
