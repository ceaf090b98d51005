//! Robust loss and robust averaging of feature vectors.
//!
//! The Cauchy loss is `rho(r) = c^2 * ln(1 + (r / c)^2)`. It is applied to
//! residual norms, so `rho(0) = 0` and `rho(r) ~ r^2` for `r << c`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RobustError {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found} at index {index}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        index: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cauchy,
    TrivialSquared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustLoss<T = f64> {
    pub kind: LossKind,
    pub scale: T,
}

impl<T: Real> RobustLoss<T> {
    pub fn cauchy(scale: T) -> Self {
        Self {
            kind: LossKind::Cauchy,
            scale,
        }
    }

    pub fn trivial() -> Self {
        Self {
            kind: LossKind::TrivialSquared,
            scale: T::one(),
        }
    }

    /// `rho` as a function of the squared norm `s = r^2`: returns `(rho, d rho / d s)`.
    #[inline]
    pub fn evaluate_squared(&self, s: T) -> (T, T) {
        match self.kind {
            LossKind::TrivialSquared => (s, T::one()),
            LossKind::Cauchy => {
                let c2 = self.scale * self.scale;
                let q = T::one() + s / c2;
                (c2 * q.ln(), T::one() / q)
            }
        }
    }

    /// IRLS weight for a residual of squared norm `s`.
    #[inline]
    pub fn weight_squared(&self, s: T) -> T {
        self.evaluate_squared(s).1
    }
}

/// `rho(r)` and its derivative with respect to `r^2`.
pub fn rho<T: Real>(loss: &RobustLoss<T>, r: T) -> (T, T) {
    loss.evaluate_squared(r * r)
}

fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// `sum_i rho(||mu - f_i||)`.
pub fn robust_objective<T: Real, V: AsRef<[T]>>(loss: &RobustLoss<T>, vectors: &[V], mu: &[T]) -> T {
    vectors
        .iter()
        .fold(T::zero(), |acc, f| acc + loss.evaluate_squared(dist2(f.as_ref(), mu)).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions<T> {
    pub max_iters: usize,
    pub tol: T,
}

impl<T: Real> Default for IrlsOptions<T> {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: T::lit(1e-8),
        }
    }
}

/// Result of an IRLS run.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustMean<T> {
    pub mean: Vec<T>,
    pub iterations: usize,
    /// Objective at the initial arithmetic mean followed by one entry per iteration.
    pub objective_history: Vec<T>,
}

fn check_dims<T, V: AsRef<[T]>>(vectors: &[V]) -> Result<usize, RobustError> {
    let first = vectors.first().ok_or(RobustError::EmptyInput)?;
    let d = first.as_ref().len();
    for (index, v) in vectors.iter().enumerate() {
        if v.as_ref().len() != d {
            return Err(RobustError::DimensionMismatch {
                expected: d,
                found: v.as_ref().len(),
                index,
            });
        }
    }
    Ok(d)
}

/// Robust mean by iteratively reweighted least squares, started from the arithmetic mean.
pub fn robust_mean_traced<T: Real, V: AsRef<[T]>>(
    vectors: &[V],
    loss: &RobustLoss<T>,
    opts: IrlsOptions<T>,
) -> Result<RobustMean<T>, RobustError> {
    let d = check_dims(vectors)?;
    let n = T::lit(vectors.len() as f64);
    let mut mu = vec![T::zero(); d];
    for v in vectors {
        for (m, &x) in mu.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m = *m / n);

    let mut history = vec![robust_objective(loss, vectors, &mu)];
    let mut iterations = 0;
    let mut next = vec![T::zero(); d];
    while iterations < opts.max_iters {
        iterations += 1;
        next.iter_mut().for_each(|m| *m = T::zero());
        let mut wsum = T::zero();
        for v in vectors {
            let v = v.as_ref();
            let w = loss.weight_squared(dist2(v, &mu));
            wsum += w;
            for (m, &x) in next.iter_mut().zip(v) {
                *m += w * x;
            }
        }
        next.iter_mut().for_each(|m| *m = *m / wsum);
        let step = dist2(&next, &mu).sqrt();
        std::mem::swap(&mut mu, &mut next);
        history.push(robust_objective(loss, vectors, &mu));
        if step < opts.tol {
            break;
        }
    }
    Ok(RobustMean {
        mean: mu,
        iterations,
        objective_history: history,
    })
}

pub fn robust_mean<T: Real, V: AsRef<[T]>>(
    vectors: &[V],
    loss: &RobustLoss<T>,
    opts: IrlsOptions<T>,
) -> Result<Vec<T>, RobustError> {
    robust_mean_traced(vectors, loss, opts).map(|r| r.mean)
}

/// Member of `track_features` closest to their robust mean. Ties go to the lowest index.
pub fn reference_feature<T: Real, V: AsRef<[T]>>(
    track_features: &[V],
    loss: &RobustLoss<T>,
) -> Result<(usize, Vec<T>), RobustError> {
    let mean = robust_mean(track_features, loss, IrlsOptions::default())?;
    let mut best = 0;
    let mut best_d = T::infinity();
    for (i, f) in track_features.iter().enumerate() {
        let d = dist2(f.as_ref(), &mean);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok((best, track_features[best].as_ref().to_vec()))
}
