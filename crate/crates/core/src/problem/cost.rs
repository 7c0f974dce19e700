//! Input and output costs `φ_t(u)`, `ψ_t(y)` with their regularity constants.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ProblemError;
use crate::linalg;
use crate::signal::VectorSignal;

/// Strong convexity of `φ` and gradient Lipschitz constants of `φ`, `ψ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConstants {
    pub mu_u: f64,
    pub ell_u: f64,
    pub ell_y: f64,
}

impl CostConstants {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if !(self.mu_u > 0.0) {
            return Err(ProblemError::NotStronglyConvex { mu_u: self.mu_u });
        }
        if !(self.ell_u >= self.mu_u) || !(self.ell_y >= 0.0) || !self.ell_u.is_finite() || !self.ell_y.is_finite() {
            return Err(ProblemError::InvalidParameter(format!(
                "cost constants must satisfy 0 < mu_u <= ell_u and ell_y >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

pub trait CostModel: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn phi(&self, u: &DVector<f64>, t: f64) -> f64;
    fn grad_phi(&self, u: &DVector<f64>, t: f64) -> DVector<f64>;
    fn psi(&self, y: &DVector<f64>, t: f64) -> f64;
    fn grad_psi(&self, y: &DVector<f64>, t: f64) -> DVector<f64>;
    fn constants(&self) -> CostConstants;

    /// True when neither cost depends on `t`.
    fn is_static(&self) -> bool {
        false
    }

    fn hess_phi(&self, u: &DVector<f64>, t: f64) -> DMatrix<f64> {
        fd_jacobian(|v| self.grad_phi(v, t), u)
    }

    fn hess_psi(&self, y: &DVector<f64>, t: f64) -> DMatrix<f64> {
        fd_jacobian(|v| self.grad_psi(v, t), y)
    }
}

/// Symmetrized central-difference Jacobian of a gradient map.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(grad: F, at: &DVector<f64>) -> DMatrix<f64> {
    let n = at.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * at[j].abs().max(1.0);
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[j] += h;
        minus[j] -= h;
        let col = (grad(&plus) - grad(&minus)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    linalg::symmetrize(&jac)
}

/// `φ_t(u) = ½(u−r_u(t))ᵀQ_u(u−r_u(t))` and
/// `ψ_t(y) = ½(y−r_y(t))ᵀQ_y(y−r_y(t)) + c(t)ᵀy`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    q_u: DMatrix<f64>,
    r_u: VectorSignal,
    q_y: DMatrix<f64>,
    r_y: VectorSignal,
    c: VectorSignal,
    constants: CostConstants,
}

impl QuadraticCost {
    pub fn new(
        q_u: DMatrix<f64>,
        r_u: VectorSignal,
        q_y: DMatrix<f64>,
        r_y: VectorSignal,
        c: VectorSignal,
    ) -> Result<Self, ProblemError> {
        let m = q_u.nrows();
        let p = q_y.nrows();
        let mut problems = Vec::new();
        if m == 0 || !q_u.is_square() {
            problems.push(format!("Q_u must be square and non-empty, got {}x{}", q_u.nrows(), q_u.ncols()));
        }
        if !q_y.is_square() {
            problems.push(format!("Q_y must be square, got {}x{}", q_y.nrows(), q_y.ncols()));
        }
        if r_u.dim() != m {
            problems.push(format!("r_u has dimension {}, expected {m}", r_u.dim()));
        }
        if r_y.dim() != p {
            problems.push(format!("r_y has dimension {}, expected {p}", r_y.dim()));
        }
        if c.dim() != p {
            problems.push(format!("c has dimension {}, expected {p}", c.dim()));
        }
        if !problems.is_empty() {
            return Err(ProblemError::DimensionMismatch(problems.join("; ")));
        }
        if !linalg::is_symmetric(&q_u, 1e-12) || !linalg::is_symmetric(&q_y, 1e-12) {
            return Err(ProblemError::InvalidParameter("Q_u and Q_y must be symmetric".into()));
        }
        let (mu_u, ell_u) = linalg::symmetric_eigen_bounds(&q_u);
        let (y_min, ell_y) = linalg::symmetric_eigen_bounds(&q_y);
        if y_min < -1e-12 {
            return Err(ProblemError::InvalidParameter(format!(
                "Q_y must be positive semidefinite (smallest eigenvalue {y_min:e})"
            )));
        }
        let constants = CostConstants { mu_u, ell_u, ell_y: ell_y.max(0.0) };
        constants.validate()?;
        Ok(Self { q_u, r_u, q_y, r_y, c, constants })
    }

    /// Input cost only: `ψ ≡ 0` on `p` outputs.
    pub fn input_only(q_u: DMatrix<f64>, r_u: VectorSignal, p: usize) -> Result<Self, ProblemError> {
        Self::new(q_u, r_u, DMatrix::zeros(p, p), VectorSignal::zeros(p), VectorSignal::zeros(p))
    }

    pub fn q_u(&self) -> &DMatrix<f64> {
        &self.q_u
    }

    pub fn q_y(&self) -> &DMatrix<f64> {
        &self.q_y
    }

    pub fn r_u(&self) -> &VectorSignal {
        &self.r_u
    }

    pub fn r_y(&self) -> &VectorSignal {
        &self.r_y
    }

    pub fn c(&self) -> &VectorSignal {
        &self.c
    }
}

impl CostModel for QuadraticCost {
    fn input_dim(&self) -> usize {
        self.q_u.nrows()
    }

    fn output_dim(&self) -> usize {
        self.q_y.nrows()
    }

    fn phi(&self, u: &DVector<f64>, t: f64) -> f64 {
        let d = u - self.r_u.value(t);
        0.5 * d.dot(&(&self.q_u * &d))
    }

    fn grad_phi(&self, u: &DVector<f64>, t: f64) -> DVector<f64> {
        &self.q_u * (u - self.r_u.value(t))
    }

    fn psi(&self, y: &DVector<f64>, t: f64) -> f64 {
        let d = y - self.r_y.value(t);
        0.5 * d.dot(&(&self.q_y * &d)) + self.c.value(t).dot(y)
    }

    fn grad_psi(&self, y: &DVector<f64>, t: f64) -> DVector<f64> {
        &self.q_y * (y - self.r_y.value(t)) + self.c.value(t)
    }

    fn constants(&self) -> CostConstants {
        self.constants
    }

    fn is_static(&self) -> bool {
        self.r_u.is_constant() && self.r_y.is_constant() && self.c.is_constant()
    }

    fn hess_phi(&self, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        self.q_u.clone()
    }

    fn hess_psi(&self, _y: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        self.q_y.clone()
    }
}

type ScalarFn = Arc<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;

/// Cost given by user callbacks with declared constants. The callbacks must
/// be pure functions of `(point, t)`.
#[derive(Clone)]
pub struct CallbackCost {
    m: usize,
    p: usize,
    phi: ScalarFn,
    grad_phi: GradFn,
    psi: ScalarFn,
    grad_psi: GradFn,
    constants: CostConstants,
    is_static: bool,
}

impl fmt::Debug for CallbackCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallbackCost")
            .field("m", &self.m)
            .field("p", &self.p)
            .field("constants", &self.constants)
            .field("is_static", &self.is_static)
            .finish_non_exhaustive()
    }
}

impl CallbackCost {
    /// Input cost from callbacks, `ψ ≡ 0` until [`CallbackCost::with_psi`].
    pub fn new<F, G>(m: usize, p: usize, constants: CostConstants, phi: F, grad_phi: G) -> Result<Self, ProblemError>
    where
        F: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        constants.validate()?;
        if m == 0 {
            return Err(ProblemError::DimensionMismatch("input dimension must be positive".into()));
        }
        Ok(Self {
            m,
            p,
            phi: Arc::new(phi),
            grad_phi: Arc::new(grad_phi),
            psi: Arc::new(|_, _| 0.0),
            grad_psi: Arc::new(move |y, _| DVector::zeros(y.len())),
            constants,
            is_static: false,
        })
    }

    pub fn with_psi<F, G>(mut self, psi: F, grad_psi: G) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.psi = Arc::new(psi);
        self.grad_psi = Arc::new(grad_psi);
        self
    }

    /// Declares that the callbacks ignore `t`.
    pub fn static_in_time(mut self) -> Self {
        self.is_static = true;
        self
    }
}

impl CostModel for CallbackCost {
    fn input_dim(&self) -> usize {
        self.m
    }

    fn output_dim(&self) -> usize {
        self.p
    }

    fn phi(&self, u: &DVector<f64>, t: f64) -> f64 {
        (self.phi)(u, t)
    }

    fn grad_phi(&self, u: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.grad_phi)(u, t)
    }

    fn psi(&self, y: &DVector<f64>, t: f64) -> f64 {
        (self.psi)(y, t)
    }

    fn grad_psi(&self, y: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.grad_psi)(y, t)
    }

    fn constants(&self) -> CostConstants {
        self.constants
    }

    fn is_static(&self) -> bool {
        self.is_static
    }
}

/// Sampled regularity constants of a cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCheck {
    pub mu_u_hat: f64,
    pub ell_u_hat: f64,
    pub ell_y_hat: f64,
    pub psi_monotone_min: f64,
}

/// Samples random pairs in `[-radius, radius]` and times in `t_range` and
/// checks the declared constants: monotonicity of `∇φ` with `μ_u`,
/// Lipschitzness of `∇φ`, `∇ψ` with `ℓ_u`, `ℓ_y`, and convexity of `ψ`.
pub fn spot_check_cost(
    cost: &dyn CostModel,
    samples: usize,
    radius: f64,
    t_range: (f64, f64),
    seed: u64,
) -> Result<CostCheck, ProblemError> {
    const SLACK: f64 = 1e-9;
    let k = cost.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |n: usize, rng: &mut ChaCha8Rng| DVector::from_fn(n, |_, _| rng.random_range(-radius..=radius));
    let mut check = CostCheck {
        mu_u_hat: f64::INFINITY,
        ell_u_hat: 0.0,
        ell_y_hat: 0.0,
        psi_monotone_min: f64::INFINITY,
    };
    for _ in 0..samples {
        let t = if t_range.1 > t_range.0 { rng.random_range(t_range.0..=t_range.1) } else { t_range.0 };
        let (u, v) = (draw(cost.input_dim(), &mut rng), draw(cost.input_dim(), &mut rng));
        let du = &u - &v;
        let dg = cost.grad_phi(&u, t) - cost.grad_phi(&v, t);
        let n2 = du.norm_squared();
        if n2 > 1e-12 {
            check.mu_u_hat = check.mu_u_hat.min(du.dot(&dg) / n2);
            check.ell_u_hat = check.ell_u_hat.max(dg.norm() / n2.sqrt());
            if du.dot(&dg) < k.mu_u * n2 - SLACK || dg.norm() > k.ell_u * n2.sqrt() + SLACK {
                return Err(ProblemError::ConstantViolated(format!(
                    "grad phi at t={t}: sampled pair contradicts mu_u={} / ell_u={}",
                    k.mu_u, k.ell_u
                )));
            }
        }
        if cost.output_dim() > 0 {
            let (y, z) = (draw(cost.output_dim(), &mut rng), draw(cost.output_dim(), &mut rng));
            let dy = &y - &z;
            let dh = cost.grad_psi(&y, t) - cost.grad_psi(&z, t);
            let n2 = dy.norm_squared();
            if n2 > 1e-12 {
                check.ell_y_hat = check.ell_y_hat.max(dh.norm() / n2.sqrt());
                check.psi_monotone_min = check.psi_monotone_min.min(dy.dot(&dh) / n2);
                if dh.norm() > k.ell_y * n2.sqrt() + SLACK || dy.dot(&dh) < -SLACK {
                    return Err(ProblemError::ConstantViolated(format!(
                        "grad psi at t={t}: sampled pair contradicts convexity or ell_y={}",
                        k.ell_y
                    )));
                }
            }
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::ScalarSignal;
    use approx::assert_relative_eq;

    fn scalar_cost() -> QuadraticCost {
        QuadraticCost::input_only(DMatrix::from_element(1, 1, 2.0), VectorSignal::constant(&[1.0]), 1).unwrap()
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let c = scalar_cost();
        let u = DVector::from_element(1, 0.0);
        assert_relative_eq!(c.phi(&u, 0.0), 1.0);
        assert_relative_eq!(c.grad_phi(&u, 0.0)[0], -2.0);
        assert_eq!(c.constants(), CostConstants { mu_u: 2.0, ell_u: 2.0, ell_y: 0.0 });
        assert!(c.is_static());
    }

    #[test]
    fn linear_output_term() {
        let c = QuadraticCost::new(
            DMatrix::identity(1, 1),
            VectorSignal::zeros(1),
            DMatrix::from_element(1, 1, 2.0),
            VectorSignal::zeros(1),
            VectorSignal::constant(&[-1.0]),
        )
        .unwrap();
        let y = DVector::from_element(1, 3.0);
        assert_relative_eq!(c.psi(&y, 0.0), 9.0 - 3.0);
        assert_relative_eq!(c.grad_psi(&y, 0.0)[0], 5.0);
    }

    #[test]
    fn rejects_non_convex() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            QuadraticCost::input_only(q, VectorSignal::zeros(2), 1),
            Err(ProblemError::NotStronglyConvex { .. })
        ));
        assert!(QuadraticCost::input_only(DMatrix::zeros(1, 1), VectorSignal::zeros(1), 1).is_err());
    }

    #[test]
    fn finite_difference_hessian() {
        let cb = CallbackCost::new(
            1,
            0,
            CostConstants { mu_u: 2.0, ell_u: 2.0, ell_y: 0.0 },
            |u, _| (u[0] - 1.0).powi(2),
            |u, _| DVector::from_element(1, 2.0 * (u[0] - 1.0)),
        )
        .unwrap();
        let h = cb.hess_phi(&DVector::from_element(1, 0.3), 0.0);
        assert_relative_eq!(h[(0, 0)], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn spot_check_catches_misdeclared_constants() {
        let lying = CallbackCost::new(
            1,
            0,
            CostConstants { mu_u: 3.0, ell_u: 3.0, ell_y: 0.0 },
            |u, _| u[0] * u[0],
            |u, _| DVector::from_element(1, 2.0 * u[0]),
        )
        .unwrap();
        assert!(matches!(
            spot_check_cost(&lying, 100, 5.0, (0.0, 1.0), 1),
            Err(ProblemError::ConstantViolated(_))
        ));
        let tv = QuadraticCost::input_only(
            DMatrix::from_element(1, 1, 2.0),
            VectorSignal::Components(vec![ScalarSignal::Sinusoid {
                amplitude: 1.0,
                frequency: 0.1,
                phase: 0.0,
                offset: 0.0,
            }]),
            1,
        )
        .unwrap();
        let chk = spot_check_cost(&tv, 200, 5.0, (0.0, 10.0), 2).unwrap();
        assert_relative_eq!(chk.mu_u_hat, 2.0, epsilon = 1e-9);
    }
}
