//! LTI plant `ẋ = Ax + Bu + Ew`, `y = Cx + Dw`, its Lyapunov certificate and
//! the equilibrium input/disturbance-to-output map.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;

/// Eigenvalues with real part above this margin are treated as unstable.
pub const HURWITZ_MARGIN: f64 = -1e-9;
/// Largest admissible 2-norm condition number of `A`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("A is not Hurwitz: spectral abscissa {abscissa:e} >= {HURWITZ_MARGIN:e}")]
    NotHurwitz { abscissa: f64 },
    #[error("columns of C are not linearly independent (rank {rank} < n = {n})")]
    RankDeficientC { rank: usize, n: usize },
    #[error("A is numerically singular (condition number {condition:e})")]
    SingularA { condition: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
}

/// Anything the closed-loop simulator can drive: a state derivative and a
/// measured output. The time-scale gain is applied by the caller.
pub trait PlantDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    fn output(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
}

impl LtiPlant {
    /// Builds a plant after checking that all matrices agree on `(n, m, p, q)`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        let mut problems = Vec::new();
        if n == 0 || !a.is_square() {
            problems.push(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols()));
        }
        if b.nrows() != n {
            problems.push(format!("B has {} rows, expected {n}", b.nrows()));
        }
        if c.ncols() != n {
            problems.push(format!("C has {} columns, expected {n}", c.ncols()));
        }
        if e.nrows() != n {
            problems.push(format!("E has {} rows, expected {n}", e.nrows()));
        }
        if d.nrows() != c.nrows() {
            problems.push(format!("D has {} rows, expected p = {}", d.nrows(), c.nrows()));
        }
        if d.ncols() != e.ncols() {
            problems.push(format!("D has {} columns but E has {}", d.ncols(), e.ncols()));
        }
        if b.ncols() == 0 || c.nrows() == 0 {
            problems.push("input and output dimensions must be positive".into());
        }
        if !problems.is_empty() {
            return Err(PlantError::DimensionMismatch(problems.join("; ")));
        }
        Ok(Self { a, b, c, d, e })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    pub fn q(&self) -> usize {
        self.e.ncols()
    }

    /// Solves `AᵀP + PA = −Q` for the supplied (or identity) `Q`.
    pub fn check_stability(&self, q_x: Option<&DMatrix<f64>>) -> Result<StabilityCertificate, PlantError> {
        let n = self.n();
        let q_x = q_x.cloned().unwrap_or_else(|| DMatrix::identity(n, n));
        if q_x.nrows() != n || q_x.ncols() != n {
            return Err(PlantError::DimensionMismatch(format!(
                "Q_x is {}x{}, expected {n}x{n}",
                q_x.nrows(),
                q_x.ncols()
            )));
        }
        if !linalg::is_symmetric(&q_x, 1e-12) || linalg::symmetric_eigen_bounds(&q_x).0 <= 0.0 {
            return Err(PlantError::NotPositiveDefinite("Q_x"));
        }
        let abscissa = linalg::spectral_abscissa(&self.a);
        if abscissa >= HURWITZ_MARGIN {
            return Err(PlantError::NotHurwitz { abscissa });
        }
        let rank = linalg::rank(&self.c, 1e-12);
        if rank < n {
            return Err(PlantError::RankDeficientC { rank, n });
        }
        let p_x = linalg::solve_lyapunov(&self.a, &q_x).ok_or(PlantError::NotHurwitz { abscissa })?;
        StabilityCertificate::from_matrices(&self.a, p_x, q_x)
    }

    /// Equilibrium maps `G = −CA⁻¹B`, `H = D − CA⁻¹E` plus the state maps.
    pub fn steady_state_map(&self) -> Result<SteadyStateMap, PlantError> {
        let condition = linalg::condition_number(&self.a);
        if !(condition <= MAX_CONDITION) {
            return Err(PlantError::SingularA { condition });
        }
        let a_inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or(PlantError::SingularA { condition })?;
        let a_inv_b = &a_inv * &self.b;
        let a_inv_e = &a_inv * &self.e;
        let g = -(&self.c * &a_inv_b);
        let h = &self.d - &self.c * &a_inv_e;
        Ok(SteadyStateMap { g, h, a_inv, a_inv_b, a_inv_e })
    }

    /// `(Ax + Bu + Ew) / ε`.
    pub fn vector_field(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>, epsilon: f64) -> DVector<f64> {
        debug_assert!(epsilon > 0.0);
        (&self.a * x + &self.b * u + &self.e * w) / epsilon
    }

    pub fn output(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * w
    }
}

impl PlantDynamics for LtiPlant {
    fn state_dim(&self) -> usize {
        self.n()
    }
    fn input_dim(&self) -> usize {
        self.m()
    }
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.e * w
    }
    fn output(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        LtiPlant::output(self, x, w)
    }
}

/// Lyapunov pair `(P_x, Q_x)` with cached eigenvalue bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub p_x: DMatrix<f64>,
    pub q_x: DMatrix<f64>,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    /// Frobenius norm of `AᵀP + PA + Q` at construction.
    pub residual: f64,
}

impl StabilityCertificate {
    pub fn from_matrices(a: &DMatrix<f64>, p_x: DMatrix<f64>, q_x: DMatrix<f64>) -> Result<Self, PlantError> {
        let (p_min, p_max) = linalg::symmetric_eigen_bounds(&p_x);
        let (q_min, _) = linalg::symmetric_eigen_bounds(&q_x);
        if p_min <= 0.0 {
            return Err(PlantError::NotPositiveDefinite("P_x"));
        }
        let residual = linalg::lyapunov_residual(a, &p_x, &q_x);
        Ok(Self { p_x, q_x, p_min, p_max, q_min, residual })
    }
}

/// Equilibrium relations of the plant. `x_eq = −A⁻¹(Bu + Ew)`,
/// `y_eq = G u + H w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateMap {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    pub a_inv_b: DMatrix<f64>,
    pub a_inv_e: DMatrix<f64>,
}

impl SteadyStateMap {
    /// A map with no plant behind it (`y = Gu + Hw`), used for purely
    /// algebraic problems. The state maps are empty.
    pub fn algebraic(g: DMatrix<f64>, h: DMatrix<f64>) -> Self {
        let (m, q) = (g.ncols(), h.ncols());
        Self {
            g,
            h,
            a_inv: DMatrix::zeros(0, 0),
            a_inv_b: DMatrix::zeros(0, m),
            a_inv_e: DMatrix::zeros(0, q),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.g.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.g.nrows()
    }
    pub fn disturbance_dim(&self) -> usize {
        self.h.ncols()
    }
    pub fn state_dim(&self) -> usize {
        self.a_inv.nrows()
    }

    pub fn output(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.g * u + &self.h * w
    }

    pub fn equilibrium_state(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        -(&self.a_inv_b * u + &self.a_inv_e * w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn scalar() -> LtiPlant {
        LtiPlant::new(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap()
    }

    #[test]
    fn scalar_certificate() {
        let cert = scalar().check_stability(Some(&m(1, 1, &[2.0]))).unwrap();
        assert_relative_eq!(cert.p_x[(0, 0)], 1.0, epsilon = 1e-14);
        assert!(cert.residual < 1e-10);
    }

    #[test]
    fn diagonal_certificate() {
        let eye = DMatrix::identity(2, 2);
        let p = LtiPlant::new(m(2, 2, &[-2.0, 0.0, 0.0, -3.0]), eye.clone(), eye.clone(), DMatrix::zeros(2, 2), eye)
            .unwrap();
        let cert = p.check_stability(None).unwrap();
        assert_relative_eq!(cert.p_x[(0, 0)], 0.25, epsilon = 1e-14);
        assert_relative_eq!(cert.p_x[(1, 1)], 1.0 / 6.0, epsilon = 1e-14);
        assert_relative_eq!(cert.p_min, 1.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(cert.p_max, 0.25, epsilon = 1e-12);

        let map = p.steady_state_map().unwrap();
        assert_relative_eq!(map.g, m(2, 2, &[0.5, 0.0, 0.0, 1.0 / 3.0]), epsilon = 1e-14);
        assert_relative_eq!(map.h, m(2, 2, &[0.5, 0.0, 0.0, 1.0 / 3.0]), epsilon = 1e-14);
    }

    #[test]
    fn unstable_rejected() {
        let p = LtiPlant::new(m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        assert!(matches!(p.check_stability(None), Err(PlantError::NotHurwitz { .. })));
    }

    #[test]
    fn marginal_rejected() {
        let p = LtiPlant::new(m(1, 1, &[-1e-10]), m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        assert!(matches!(p.check_stability(None), Err(PlantError::NotHurwitz { .. })));
    }

    #[test]
    fn rank_deficient_c() {
        let p = LtiPlant::new(
            m(2, 2, &[-1.0, 0.0, 0.0, -2.0]),
            m(2, 1, &[1.0, 1.0]),
            m(1, 2, &[1.0, 1.0]),
            m(1, 1, &[0.0]),
            m(2, 1, &[0.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(p.check_stability(None), Err(PlantError::RankDeficientC { rank: 1, n: 2 })));
    }

    #[test]
    fn dimension_mismatch() {
        let r = LtiPlant::new(m(1, 1, &[-1.0]), m(2, 1, &[1.0, 1.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0]), m(1, 1, &[1.0]));
        assert!(matches!(r, Err(PlantError::DimensionMismatch(_))));
    }

    #[test]
    fn scalar_map_and_field() {
        let p = scalar();
        let map = p.steady_state_map().unwrap();
        assert_relative_eq!(map.g[(0, 0)], 1.0);
        assert_relative_eq!(map.h[(0, 0)], 1.0);

        let x = DVector::from_element(1, 2.0);
        let u = DVector::from_element(1, 1.0);
        let w = DVector::zeros(1);
        assert_relative_eq!(p.vector_field(&x, &u, &w, 1.0)[0], -1.0);
        assert_relative_eq!(p.vector_field(&x, &u, &w, 0.5)[0], -2.0);

        let w = DVector::from_element(1, 0.3);
        let x_eq = map.equilibrium_state(&u, &w);
        assert_relative_eq!(p.vector_field(&x_eq, &u, &w, 0.1)[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_input_channel() {
        let p = LtiPlant::new(
            m(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            m(2, 1, &[0.1, 0.2]),
            m(2, 1, &[1.0, -1.0]),
        )
        .unwrap();
        let map = p.steady_state_map().unwrap();
        assert_eq!(map.g.amax(), 0.0);
        let a_inv = p.a().clone().try_inverse().unwrap();
        let h = p.d() - p.c() * a_inv * p.e();
        assert_relative_eq!(map.h, h, epsilon = 1e-14);
    }

    #[test]
    fn singular_a() {
        let p = LtiPlant::new(
            m(2, 2, &[0.0, 0.0, 0.0, -1.0]),
            m(2, 1, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        assert!(matches!(p.steady_state_map(), Err(PlantError::SingularA { .. })));
    }
}
