//! Deterministic time signals: references, disturbances and time-varying
//! constraint data.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default central-difference half-step for rate estimates.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// A scalar signal. In config files a bare number is a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScalarRepr", into = "ScalarRepr")]
pub enum ScalarSignal {
    Constant(f64),
    /// `offset + amplitude·sin(2π·frequency·t + phase)`.
    Sinusoid { amplitude: f64, frequency: f64, phase: f64, offset: f64 },
    /// Linear interpolation between knots, held constant outside them.
    PiecewiseLinear { times: Vec<f64>, values: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScalarRepr {
    Number(f64),
    Tagged(TaggedSignal),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TaggedSignal {
    Constant {
        value: f64,
    },
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    PiecewiseLinear {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl TryFrom<ScalarRepr> for ScalarSignal {
    type Error = String;

    fn try_from(repr: ScalarRepr) -> Result<Self, Self::Error> {
        let s = match repr {
            ScalarRepr::Number(v) => ScalarSignal::Constant(v),
            ScalarRepr::Tagged(TaggedSignal::Constant { value }) => ScalarSignal::Constant(value),
            ScalarRepr::Tagged(TaggedSignal::Sinusoid { amplitude, frequency, phase, offset }) => {
                ScalarSignal::Sinusoid { amplitude, frequency, phase, offset }
            }
            ScalarRepr::Tagged(TaggedSignal::PiecewiseLinear { times, values }) => {
                ScalarSignal::piecewise_linear(times, values)?
            }
        };
        Ok(s)
    }
}

impl From<ScalarSignal> for ScalarRepr {
    fn from(s: ScalarSignal) -> Self {
        match s {
            ScalarSignal::Constant(v) => ScalarRepr::Number(v),
            ScalarSignal::Sinusoid { amplitude, frequency, phase, offset } => {
                ScalarRepr::Tagged(TaggedSignal::Sinusoid { amplitude, frequency, phase, offset })
            }
            ScalarSignal::PiecewiseLinear { times, values } => {
                ScalarRepr::Tagged(TaggedSignal::PiecewiseLinear { times, values })
            }
        }
    }
}

impl ScalarSignal {
    pub fn piecewise_linear(times: Vec<f64>, values: Vec<f64>) -> Result<Self, String> {
        if times.is_empty() || times.len() != values.len() {
            return Err(format!(
                "piecewise-linear signal needs matching non-empty knots ({} times, {} values)",
                times.len(),
                values.len()
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err("piecewise-linear knot times must be strictly increasing".into());
        }
        if times.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err("piecewise-linear knots must be finite".into());
        }
        Ok(ScalarSignal::PiecewiseLinear { times, values })
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            ScalarSignal::Constant(v) => *v,
            ScalarSignal::Sinusoid { amplitude, frequency, phase, offset } => {
                offset + amplitude * (std::f64::consts::TAU * frequency * t + phase).sin()
            }
            ScalarSignal::PiecewiseLinear { times, values } => {
                let k = times.partition_point(|&tk| tk <= t);
                if k == 0 {
                    values[0]
                } else if k == times.len() {
                    values[k - 1]
                } else {
                    let s = (t - times[k - 1]) / (times[k] - times[k - 1]);
                    values[k - 1] + s * (values[k] - values[k - 1])
                }
            }
        }
    }

    /// Right derivative.
    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            ScalarSignal::Constant(_) => 0.0,
            ScalarSignal::Sinusoid { amplitude, frequency, phase, .. } => {
                let omega = std::f64::consts::TAU * frequency;
                amplitude * omega * (omega * t + phase).cos()
            }
            ScalarSignal::PiecewiseLinear { times, values } => {
                let k = times.partition_point(|&tk| tk <= t);
                if k == 0 || k == times.len() {
                    0.0
                } else {
                    (values[k] - values[k - 1]) / (times[k] - times[k - 1])
                }
            }
        }
    }

    /// Essential supremum of `|ṡ|` over all time.
    pub fn sup_rate(&self) -> f64 {
        match self {
            ScalarSignal::Constant(_) => 0.0,
            ScalarSignal::Sinusoid { amplitude, frequency, .. } => {
                (amplitude * std::f64::consts::TAU * frequency).abs()
            }
            ScalarSignal::PiecewiseLinear { times, values } => times
                .windows(2)
                .zip(values.windows(2))
                .map(|(t, v)| ((v[1] - v[0]) / (t[1] - t[0])).abs())
                .fold(0.0, f64::max),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            ScalarSignal::Constant(_) => true,
            ScalarSignal::Sinusoid { amplitude, frequency, .. } => *amplitude == 0.0 || *frequency == 0.0,
            ScalarSignal::PiecewiseLinear { values, .. } => values.windows(2).all(|v| v[0] == v[1]),
        }
    }

    /// Largest `|s(t)|` over all time.
    pub fn sup_abs(&self) -> f64 {
        match self {
            ScalarSignal::Constant(v) => v.abs(),
            ScalarSignal::Sinusoid { amplitude, offset, .. } => offset.abs() + amplitude.abs(),
            ScalarSignal::PiecewiseLinear { values, .. } => values.iter().fold(0.0, |a, v| a.max(v.abs())),
        }
    }
}

type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// A vector-valued signal: per-component scalar signals or an arbitrary pure
/// function of time.
#[derive(Clone)]
pub enum VectorSignal {
    Components(Vec<ScalarSignal>),
    Callback {
        dim: usize,
        f: VectorFn,
        /// Known bound on `‖ṡ‖`, if any.
        rate_bound: Option<f64>,
    },
}

impl fmt::Debug for VectorSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorSignal::Components(c) => f.debug_tuple("Components").field(c).finish(),
            VectorSignal::Callback { dim, rate_bound, .. } => f
                .debug_struct("Callback")
                .field("dim", dim)
                .field("rate_bound", rate_bound)
                .finish_non_exhaustive(),
        }
    }
}

impl VectorSignal {
    pub fn constant(v: &[f64]) -> Self {
        VectorSignal::Components(v.iter().map(|&x| ScalarSignal::Constant(x)).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        VectorSignal::Components(vec![ScalarSignal::Constant(0.0); dim])
    }

    pub fn from_fn<F>(dim: usize, f: F, rate_bound: Option<f64>) -> Self
    where
        F: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        VectorSignal::Callback { dim, f: Arc::new(f), rate_bound }
    }

    /// Per-component piecewise-linear noise with knots every `knot_spacing`
    /// on `[0, t_end]` and values drawn uniformly from `[-amplitude, amplitude]`.
    pub fn random_piecewise_linear(dim: usize, amplitude: f64, knot_spacing: f64, t_end: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let knots = ((t_end / knot_spacing).ceil() as usize).max(1) + 1;
        let times: Vec<f64> = (0..knots).map(|k| k as f64 * knot_spacing).collect();
        let comps = (0..dim)
            .map(|_| {
                let values = (0..knots).map(|_| rng.random_range(-amplitude..=amplitude)).collect();
                ScalarSignal::PiecewiseLinear { times: times.clone(), values }
            })
            .collect();
        VectorSignal::Components(comps)
    }

    pub fn dim(&self) -> usize {
        match self {
            VectorSignal::Components(c) => c.len(),
            VectorSignal::Callback { dim, .. } => *dim,
        }
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        match self {
            VectorSignal::Components(c) => DVector::from_iterator(c.len(), c.iter().map(|s| s.value(t))),
            VectorSignal::Callback { f, .. } => f(t),
        }
    }

    /// Analytic bound on `ess sup ‖ṡ‖` when one is known.
    pub fn sup_rate(&self) -> Option<f64> {
        match self {
            VectorSignal::Components(c) => Some(c.iter().map(|s| s.sup_rate().powi(2)).sum::<f64>().sqrt()),
            VectorSignal::Callback { rate_bound, .. } => *rate_bound,
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            VectorSignal::Components(c) => c.iter().all(ScalarSignal::is_constant),
            VectorSignal::Callback { rate_bound, .. } => *rate_bound == Some(0.0),
        }
    }

    /// Largest central-difference slope `‖s(t+h) − s(t−h)‖/2h` over a grid on
    /// `[t0, t1]` with spacing `grid`.
    pub fn estimate_sup_rate(&self, t0: f64, t1: f64, grid: f64, h: f64) -> f64 {
        let n = ((t1 - t0) / grid).ceil().max(0.0) as usize;
        (0..=n)
            .map(|k| {
                let t = (t0 + k as f64 * grid).min(t1);
                (self.value(t + h) - self.value(t - h)).norm() / (2.0 * h)
            })
            .fold(0.0, f64::max)
    }

    /// Componentwise `sup |s_i(t)|`, when analytic.
    pub fn sup_abs(&self) -> Option<f64> {
        match self {
            VectorSignal::Components(c) => Some(c.iter().map(|s| s.sup_abs().powi(2)).sum::<f64>().sqrt()),
            VectorSignal::Callback { .. } => None,
        }
    }
}

/// The exogenous input `w_t` together with its rate bound.
#[derive(Debug, Clone)]
pub struct DisturbanceSignal {
    pub signal: VectorSignal,
    /// Overrides the analytic bound on `ess sup ‖ẇ‖`.
    pub declared_rate: Option<f64>,
}

impl DisturbanceSignal {
    pub fn new(signal: VectorSignal) -> Self {
        Self { signal, declared_rate: None }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(VectorSignal::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.signal.dim()
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        self.signal.value(t)
    }

    pub fn is_constant(&self) -> bool {
        self.declared_rate == Some(0.0) || self.signal.is_constant()
    }

    /// `ess sup ‖ẇ‖` over `[t0, t1]`: declared, analytic, or estimated by
    /// central differences on a grid with step `DEFAULT_FD_STEP`.
    pub fn sup_rate(&self, t0: f64, t1: f64) -> f64 {
        self.declared_rate.or_else(|| self.signal.sup_rate()).unwrap_or_else(|| {
            self.signal.estimate_sup_rate(t0, t1, DEFAULT_FD_STEP, DEFAULT_FD_STEP)
        })
    }
}

/// Time-indexed matrix, e.g. the constraint matrix `K_t`.
#[derive(Clone)]
pub enum MatrixSignal {
    Constant(DMatrix<f64>),
    Callback { rows: usize, cols: usize, f: MatrixFn },
}

impl fmt::Debug for MatrixSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixSignal::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            MatrixSignal::Callback { rows, cols, .. } => {
                f.debug_struct("Callback").field("rows", rows).field("cols", cols).finish_non_exhaustive()
            }
        }
    }
}

impl MatrixSignal {
    pub fn from_fn<F>(rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        MatrixSignal::Callback { rows, cols, f: Arc::new(f) }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixSignal::Constant(m) => (m.nrows(), m.ncols()),
            MatrixSignal::Callback { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn value(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixSignal::Constant(m) => m.clone(),
            MatrixSignal::Callback { f, .. } => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<&DMatrix<f64>> {
        match self {
            MatrixSignal::Constant(m) => Some(m),
            MatrixSignal::Callback { .. } => None,
        }
    }
}
