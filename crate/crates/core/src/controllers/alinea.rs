use nalgebra::DVector;

use super::ControlError;

/// One downstream measurement of an ALINEA ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct AlineaTerm {
    pub link: usize,
    pub gain: f64,
    pub setpoint: f64,
}

/// A metered ramp driven by `u̇_i = Σ_j K_j(x̂_j − x_j)` over its downstream links.
#[derive(Debug, Clone, PartialEq)]
pub struct AlineaRamp {
    pub downstream: Vec<AlineaTerm>,
}

/// Integral ramp metering. The simulator clamps the integrated inputs to
/// `[0, upper]` after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlineaController {
    pub ramps: Vec<AlineaRamp>,
    /// Largest metering rate per ramp (the arriving demand).
    pub upper: Vec<f64>,
}

impl AlineaController {
    pub fn new(ramps: Vec<AlineaRamp>) -> Self {
        let upper = vec![f64::INFINITY; ramps.len()];
        Self { ramps, upper }
    }

    pub fn with_upper_bounds(mut self, upper: Vec<f64>) -> Self {
        assert_eq!(upper.len(), self.ramps.len(), "one bound per ramp");
        self.upper = upper;
        self
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().zip(&self.upper).map(|(v, hi)| v.clamp(0.0, *hi)))
    }

    pub fn input_dim(&self) -> usize {
        self.ramps.len()
    }

    /// `u̇` for measured densities `x`.
    pub fn vector_field(&self, x: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        let mut du = DVector::zeros(self.ramps.len());
        for (i, ramp) in self.ramps.iter().enumerate() {
            for term in &ramp.downstream {
                let xj = x.get(term.link).ok_or(ControlError::UnknownLink(term.link))?;
                du[i] += term.gain * (term.setpoint - xj);
            }
        }
        Ok(du)
    }
}
