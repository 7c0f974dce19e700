//! Sufficient gain and time-scale conditions for both controller tracks,
//! and the resulting tracking envelopes.

use std::f64::consts::SQRT_2;
use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::plant::{LtiPlant, StabilityCertificate};
use crate::problem::{ConstraintKind, TimeVaryingProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("no plant stability certificate available")]
    MissingCertificate,
    #[error("certificate requires a problem with {0} constraints")]
    WrongKind(&'static str),
    #[error("eta = {eta} is not below eta_max = {eta_max}: the reduced rate is not positive")]
    NonpositiveRate { eta: f64, eta_max: f64 },
    #[error("eta_u / eta_lambda = {ratio} must exceed {required}")]
    GainRatioViolated { ratio: f64, required: f64 },
    #[error("P_z is not positive definite (smallest eigenvalue {min_eig:e})")]
    PzNotPd { min_eig: f64 },
    #[error("certificate conditions do not hold: {0}")]
    FailedCertificate(String),
    #[error("invalid gain: {0}")]
    InvalidGain(String),
}

/// Norms of plant and map quantities shared by both tracks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantNorms {
    pub g: f64,
    pub c: f64,
    pub p_a_inv_b: f64,
    pub p_a_inv_e: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    #[serde(skip)]
    pub p_x: DMatrix<f64>,
}

impl PlantNorms {
    fn new(plant: &LtiPlant, stab: &StabilityCertificate, problem: &TimeVaryingProblem) -> Self {
        let map = problem.map();
        Self {
            g: linalg::spectral_norm(&map.g),
            c: linalg::spectral_norm(plant.c()),
            p_a_inv_b: linalg::spectral_norm(&(&stab.p_x * &map.a_inv_b)),
            p_a_inv_e: linalg::spectral_norm(&(&stab.p_x * &map.a_inv_e)),
            p_min: stab.p_min,
            p_max: stab.p_max,
            q_min: stab.q_min,
            p_x: stab.p_x.clone(),
        }
    }
}

/// Inequality-track certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub eta: f64,
    pub epsilon: f64,
    pub ell: f64,
    pub mu: f64,
    pub eta_max: f64,
    pub rho_z: f64,
    pub k0: f64,
    pub psi: f64,
    pub epsilon_max: f64,
    pub rho_xi: f64,
    /// `ρ_ξ` with the `2ε` factor that appears in the proof.
    pub rho_xi_proof: f64,
    pub kappa: f64,
    pub gamma_z: f64,
    pub gamma_w: f64,
    pub b: f64,
    pub g: f64,
    pub d: f64,
    pub theta: f64,
    pub norms: PlantNorms,
    pub eta_ok: bool,
    pub epsilon_ok: bool,
    pub pass: bool,
}

/// Equality-track certificate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualityCertificate {
    pub eta_u: f64,
    pub eta_lambda: f64,
    pub epsilon: f64,
    pub ell: f64,
    pub mu_u: f64,
    pub k_lower: f64,
    pub k_upper: f64,
    pub required_ratio: f64,
    pub p_z: Vec<Vec<f64>>,
    pub p_z_min: f64,
    pub p_z_max: f64,
    pub p_z_norm: f64,
    pub rho_z: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub epsilon_max: f64,
    pub rho_xi: f64,
    pub kappa: f64,
    pub gamma_z: f64,
    pub gamma_w: f64,
    pub theta: f64,
    pub norms: PlantNorms,
    pub epsilon_ok: bool,
    pub pass: bool,
}

impl EqualityCertificate {
    pub fn p_z_matrix(&self) -> DMatrix<f64> {
        linalg::matrix_from_rows(&self.p_z).expect("P_z is rectangular")
    }
}

fn check_gain(name: &str, v: f64) -> Result<(), CertificateError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CertificateError::InvalidGain(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Gain and time-scale conditions for the projected primal-dual controller.
pub fn certify_inequality(
    plant: &LtiPlant,
    stability: Option<&StabilityCertificate>,
    problem: &TimeVaryingProblem,
    eta: f64,
    epsilon: f64,
) -> Result<CertificateReport, CertificateError> {
    let stab = stability.ok_or(CertificateError::MissingCertificate)?;
    if problem.kind() != ConstraintKind::Inequality {
        return Err(CertificateError::WrongKind("inequality"));
    }
    check_gain("eta", eta)?;
    check_gain("epsilon", epsilon)?;
    let norms = PlantNorms::new(plant, stab, problem);
    let c = problem.cost().constants();
    let k_bar = problem.constraint().k_bar();
    let ell = problem.lipschitz();
    let mu = problem.monotonicity();
    let eta_max = 4.0 * mu / (ell * ell);
    if eta >= eta_max {
        return Err(CertificateError::NonpositiveRate { eta, eta_max });
    }
    let rho_z = eta * (mu - eta * ell * ell / 4.0);
    let g = norms.g;
    let k0 = (2.0 + eta * (c.ell_u + c.ell_y * g * g)).max(g * k_bar);
    let psi = rho_z * c.ell_y * norms.c * g + SQRT_2 * norms.c * (c.ell_y * g + k_bar) * k0;
    let denom = 4.0 * eta * norms.p_a_inv_b * psi;
    let epsilon_max = if denom > 0.0 { rho_z * norms.q_min / denom } else { f64::INFINITY };
    let plant_rate = norms.q_min / norms.p_max;
    let rho_xi = 0.5 * (2.0 * rho_z).min(plant_rate / (4.0 * epsilon));
    let rho_xi_proof = 0.5 * (2.0 * rho_z).min(plant_rate / (8.0 * epsilon));
    let kappa = 0.5_f64.max(norms.p_max) / 0.5_f64.min(norms.p_min);
    let b = eta * norms.c * (c.ell_y * g + k_bar);
    let g_c = 2.0 * SQRT_2 * norms.p_a_inv_b * k0;
    let d = 2.0 * eta * c.ell_y * norms.p_a_inv_b * norms.c * g;
    let theta = if b + g_c > 0.0 { b / (b + g_c) } else { 0.5 };
    let epsilon_ok = epsilon < epsilon_max;
    Ok(CertificateReport {
        eta,
        epsilon,
        ell,
        mu,
        eta_max,
        rho_z,
        k0,
        psi,
        epsilon_max,
        rho_xi,
        rho_xi_proof,
        kappa,
        gamma_z: 2.0 / rho_z,
        gamma_w: 4.0 * epsilon * norms.p_a_inv_e / norms.q_min,
        b,
        g: g_c,
        d,
        theta,
        norms,
        eta_ok: true,
        epsilon_ok,
        pass: epsilon_ok,
    })
}

/// Gain-ratio, positive-definiteness and time-scale conditions for the
/// unprojected equality-constrained controller. Time-varying `K_t` is
/// evaluated at `t = 0`.
pub fn certify_equality(
    plant: &LtiPlant,
    stability: Option<&StabilityCertificate>,
    problem: &TimeVaryingProblem,
    eta_u: f64,
    eta_lambda: f64,
    epsilon: f64,
) -> Result<EqualityCertificate, CertificateError> {
    let stab = stability.ok_or(CertificateError::MissingCertificate)?;
    if problem.kind() != ConstraintKind::Equality {
        return Err(CertificateError::WrongKind("equality"));
    }
    check_gain("eta_u", eta_u)?;
    check_gain("eta_lambda", eta_lambda)?;
    check_gain("epsilon", epsilon)?;
    let norms = PlantNorms::new(plant, stab, problem);
    let c = problem.cost().constants();
    let (k_lower, k_upper) = problem.constraint().eigen_bounds().expect("equality problems carry eigenvalue bounds");
    let ell = c.ell_u + norms.g * norms.g * c.ell_y;
    let required_ratio = 4.0 * k_upper / (ell * c.mu_u);
    let ratio = eta_u / eta_lambda;
    if ratio <= required_ratio {
        return Err(CertificateError::GainRatioViolated { ratio, required: required_ratio });
    }
    let (m, r) = (problem.m(), problem.r());
    let gm = &problem.map().g;
    let k = problem.constraint().k(0.0);
    let kg = &k * gm;
    let mut p_z = DMatrix::zeros(m + r, m + r);
    p_z.view_mut((0, 0), (m, m)).fill_with_identity();
    p_z.view_mut((0, 0), (m, m)).scale_mut(ell);
    p_z.view_mut((0, m), (m, r)).copy_from(&kg.transpose());
    p_z.view_mut((m, 0), (r, m)).copy_from(&kg);
    p_z.view_mut((m, m), (r, r)).fill_with_identity();
    p_z.view_mut((m, m), (r, r)).scale_mut(ell * ratio);
    let (p_z_min, p_z_max) = linalg::symmetric_eigen_bounds(&p_z);
    if p_z_min <= 0.0 {
        return Err(CertificateError::PzNotPd { min_eig: p_z_min });
    }
    let rho_z = 0.5 * (eta_lambda * k_lower / ell).min(eta_u * c.mu_u / 2.0);
    let cm = plant.c();
    let a_inv_b = &problem.map().a_inv_b;
    let px_ainv_b = &stab.p_x * a_inv_b;
    let sigma1 = 2.0 * eta_u * c.ell_y * norms.c * norms.g * (ell + linalg::spectral_norm(&kg))
        + 2.0 * eta_lambda * linalg::spectral_norm(&(kg.transpose() * &k * cm))
        + 2.0 * ell * eta_u * linalg::spectral_norm(&(&k * cm));
    let sigma2 = 2.0 * eta_u * ell * norms.p_a_inv_b + 2.0 * eta_u * linalg::spectral_norm(&(&px_ainv_b * kg.transpose()));
    let sigma3 = 2.0 * eta_u * c.ell_y * norms.c * linalg::spectral_norm(&(&px_ainv_b * gm.transpose()));
    let denom = 16.0 * sigma1 * sigma2 + 4.0 * rho_z * p_z_min * sigma3;
    let epsilon_max = if denom > 0.0 { rho_z * norms.p_min * p_z_min / denom } else { f64::INFINITY };
    let rho_xi = 0.25 * (rho_z * p_z_min / p_z_max).min(norms.q_min / (epsilon * norms.p_max));
    let kappa = norms.p_max.max(p_z_max) / norms.p_min.min(p_z_min);
    let epsilon_ok = epsilon < epsilon_max;
    Ok(EqualityCertificate {
        eta_u,
        eta_lambda,
        epsilon,
        ell,
        mu_u: c.mu_u,
        k_lower,
        k_upper,
        required_ratio,
        p_z: linalg::matrix_to_rows(&p_z),
        p_z_min,
        p_z_max,
        p_z_norm: p_z_max,
        rho_z,
        sigma1,
        sigma2,
        sigma3,
        epsilon_max,
        rho_xi,
        kappa,
        gamma_z: 4.0 * p_z_max * kappa.sqrt() / (rho_z * p_z_min),
        gamma_w: 4.0 * norms.p_a_inv_e * kappa.sqrt() / norms.q_min,
        theta: if sigma1 + sigma2 > 0.0 { sigma1 / (sigma1 + sigma2) } else { 0.5 },
        norms,
        epsilon_ok,
        pass: epsilon_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "track", rename_all = "snake_case")]
pub enum Certificate {
    Inequality(CertificateReport),
    Equality(EqualityCertificate),
}

impl Certificate {
    pub fn pass(&self) -> bool {
        match self {
            Certificate::Inequality(r) => r.pass,
            Certificate::Equality(r) => r.pass,
        }
    }

    pub fn kappa(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.kappa,
            Certificate::Equality(r) => r.kappa,
        }
    }

    pub fn rho_xi(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.rho_xi,
            Certificate::Equality(r) => r.rho_xi,
        }
    }

    pub fn rho_z(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.rho_z,
            Certificate::Equality(r) => r.rho_z,
        }
    }

    pub fn gamma_z(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.gamma_z,
            Certificate::Equality(r) => r.gamma_z,
        }
    }

    pub fn gamma_w(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.gamma_w,
            Certificate::Equality(r) => r.gamma_w,
        }
    }

    pub fn epsilon_max(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.epsilon_max,
            Certificate::Equality(r) => r.epsilon_max,
        }
    }

    pub fn norms(&self) -> &PlantNorms {
        match self {
            Certificate::Inequality(r) => &r.norms,
            Certificate::Equality(r) => &r.norms,
        }
    }

    /// Weight of the plant term in `U = (1−θ)V + θW`.
    pub fn theta(&self) -> f64 {
        match self {
            Certificate::Inequality(r) => r.theta,
            Certificate::Equality(r) => r.theta,
        }
    }

    /// Asymptotic term `γ_z·sup‖ż★‖ + γ_w·sup‖ẇ‖`.
    pub fn residual_radius(&self, sup_zstar_rate: f64, sup_w_rate: f64) -> f64 {
        let term = |gamma: f64, rate: f64| if rate == 0.0 { 0.0 } else { gamma * rate };
        term(self.gamma_z(), sup_zstar_rate) + term(self.gamma_w(), sup_w_rate)
    }

    /// `√κ‖ξ̃(t0)‖e^{−ρ_ξ(t−t0)/2} + γ_z·sup‖ż★‖ + γ_w·sup‖ẇ‖`.
    pub fn envelope(
        &self,
        initial_error: f64,
        t0: f64,
        t: f64,
        sup_zstar_rate: f64,
        sup_w_rate: f64,
    ) -> Result<f64, CertificateError> {
        if !self.pass() {
            return Err(CertificateError::FailedCertificate(format!(
                "epsilon is not below epsilon_max = {:e}",
                self.epsilon_max()
            )));
        }
        Ok(self.kappa().sqrt() * initial_error * (-0.5 * self.rho_xi() * (t - t0)).exp()
            + self.residual_radius(sup_zstar_rate, sup_w_rate))
    }

    /// Machine-readable record.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("certificate serializes")
    }
}

/// Free-function form of [`Certificate::envelope`].
pub fn envelope(
    report: &Certificate,
    initial_error: f64,
    t0: f64,
    t: f64,
    sup_zstar_rate: f64,
    sup_w_rate: f64,
) -> Result<f64, CertificateError> {
    report.envelope(initial_error, t0, t, sup_zstar_rate, sup_w_rate)
}

fn flag(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Certificate::Inequality(r) => {
                writeln!(f, "projected primal-dual certificate")?;
                writeln!(f, "  ell       = {:.6e}   mu    = {:.6e}", r.ell, r.mu)?;
                writeln!(f, "  eta       = {:.6e}   < eta_max = {:.6e}   [{}]", r.eta, r.eta_max, flag(r.eta_ok))?;
                writeln!(f, "  rho_z     = {:.6e}   k0    = {:.6e}   Psi = {:.6e}", r.rho_z, r.k0, r.psi)?;
                writeln!(
                    f,
                    "  epsilon   = {:.6e}   < epsilon_max = {:.6e}   [{}]",
                    r.epsilon,
                    r.epsilon_max,
                    flag(r.epsilon_ok)
                )?;
                writeln!(f, "  rho_xi    = {:.6e}   (proof variant {:.6e})", r.rho_xi, r.rho_xi_proof)?;
                writeln!(f, "  kappa     = {:.6e}", r.kappa)?;
                writeln!(f, "  gamma_z   = {:.6e}   gamma_w = {:.6e}", r.gamma_z, r.gamma_w)?;
                writeln!(f, "  b, g, d   = {:.6e}, {:.6e}, {:.6e}   theta = {:.6e}", r.b, r.g, r.d, r.theta)?;
                write!(f, "  overall   [{}]", flag(r.pass))
            }
            Certificate::Equality(r) => {
                writeln!(f, "primal-dual (equality) certificate")?;
                writeln!(f, "  ell       = {:.6e}   mu_u  = {:.6e}", r.ell, r.mu_u)?;
                writeln!(
                    f,
                    "  eta_u/eta_lambda = {:.6e}   > required {:.6e}   [ok]",
                    r.eta_u / r.eta_lambda,
                    r.required_ratio
                )?;
                writeln!(f, "  eig(P_z)  = [{:.6e}, {:.6e}]", r.p_z_min, r.p_z_max)?;
                writeln!(f, "  rho_z     = {:.6e}", r.rho_z)?;
                writeln!(f, "  sigma     = {:.6e}, {:.6e}, {:.6e}", r.sigma1, r.sigma2, r.sigma3)?;
                writeln!(
                    f,
                    "  epsilon   = {:.6e}   < epsilon_max = {:.6e}   [{}]",
                    r.epsilon,
                    r.epsilon_max,
                    flag(r.epsilon_ok)
                )?;
                writeln!(f, "  rho_xi    = {:.6e}   kappa = {:.6e}", r.rho_xi, r.kappa)?;
                writeln!(f, "  gamma_z   = {:.6e}   gamma_w = {:.6e}", r.gamma_z, r.gamma_w)?;
                write!(f, "  overall   [{}]", flag(r.pass))
            }
        }
    }
}
