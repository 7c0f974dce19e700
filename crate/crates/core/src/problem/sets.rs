//! Closed convex input sets with Euclidean projection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ProblemError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSet {
    /// Per-coordinate bounds; infinite bounds are allowed.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    NonnegOrthant { dim: usize },
    Ball { center: Vec<f64>, radius: f64 },
    FullSpace { dim: usize },
}

impl InputSet {
    pub fn validate(&self) -> Result<(), ProblemError> {
        match self {
            InputSet::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(ProblemError::DimensionMismatch(format!(
                        "box bounds have lengths {} and {}",
                        lower.len(),
                        upper.len()
                    )));
                }
                if lower.iter().zip(upper).any(|(l, u)| l.is_nan() || u.is_nan() || l > u) {
                    return Err(ProblemError::InvalidParameter("box needs lower <= upper".into()));
                }
            }
            InputSet::Ball { center, radius } => {
                if center.is_empty() || !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(ProblemError::InvalidParameter(format!(
                        "ball needs a non-empty center and a finite radius >= 0, got {radius}"
                    )));
                }
            }
            InputSet::NonnegOrthant { dim } | InputSet::FullSpace { dim } => {
                if *dim == 0 {
                    return Err(ProblemError::DimensionMismatch("input set dimension must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSet::Box { lower, .. } => lower.len(),
            InputSet::Ball { center, .. } => center.len(),
            InputSet::NonnegOrthant { dim } | InputSet::FullSpace { dim } => *dim,
        }
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            InputSet::Box { lower, upper } => DVector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i])),
            InputSet::NonnegOrthant { .. } => project_orthant(v),
            InputSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let d = v - &c;
                let n = d.norm();
                if n <= *radius {
                    v.clone()
                } else {
                    c + d * (radius / n)
                }
            }
            InputSet::FullSpace { .. } => v.clone(),
        }
    }

    /// An element of the generalized Jacobian of the projection at `v`.
    pub fn projection_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = v.len();
        match self {
            InputSet::Box { lower, upper } => {
                DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| f64::from(v[i] > lower[i] && v[i] < upper[i])))
            }
            InputSet::NonnegOrthant { .. } => orthant_jacobian(v),
            InputSet::Ball { center, radius } => {
                let d = v - DVector::from_column_slice(center);
                let nd = d.norm();
                if nd <= *radius {
                    DMatrix::identity(n, n)
                } else {
                    (DMatrix::identity(n, n) - &d * d.transpose() / (nd * nd)) * (radius / nd)
                }
            }
            InputSet::FullSpace { .. } => DMatrix::identity(n, n),
        }
    }

    pub fn distance(&self, v: &DVector<f64>) -> f64 {
        (v - self.project(v)).norm()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.distance(v) <= tol
    }

    pub fn is_full_space(&self) -> bool {
        matches!(self, InputSet::FullSpace { .. })
    }
}

/// Projection onto the dual cone `ℝ^r_{≥0}`.
pub fn project_orthant(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

pub fn orthant_jacobian(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&v.map(|x| f64::from(x > 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn projections() {
        let b = InputSet::Box { lower: vec![0.0], upper: vec![1.0] };
        assert_eq!(b.project(&v(&[1.7])), v(&[1.0]));
        let o = InputSet::NonnegOrthant { dim: 2 };
        assert_eq!(o.project(&v(&[-0.3, 2.0])), v(&[0.0, 2.0]));
        let ball = InputSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        let p = ball.project(&v(&[3.0, 4.0]));
        assert_relative_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn ball_jacobian_matches_finite_difference() {
        let ball = InputSet::Ball { center: vec![0.5, -1.0], radius: 2.0 };
        let at = v(&[3.0, 2.5]);
        let j = ball.projection_jacobian(&at);
        let h = 1e-6;
        for k in 0..2 {
            let mut p = at.clone();
            let mut m = at.clone();
            p[k] += h;
            m[k] -= h;
            let col = (ball.project(&p) - ball.project(&m)) / (2.0 * h);
            for i in 0..2 {
                assert_relative_eq!(j[(i, k)], col[i], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn infinite_bounds_and_validation() {
        let b = InputSet::Box { lower: vec![f64::NEG_INFINITY], upper: vec![0.5] };
        assert_eq!(b.project(&v(&[-1e9])), v(&[-1e9]));
        assert_eq!(b.project(&v(&[2.0])), v(&[0.5]));
        assert!(InputSet::Box { lower: vec![1.0], upper: vec![0.0] }.validate().is_err());
        assert!(InputSet::Ball { center: vec![0.0], radius: -1.0 }.validate().is_err());
    }
}
