//! Agent models and leader trajectories.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Eigenvalues of an oscillator generator must have |Re| below this.
pub const IMAGINARY_AXIS_TOL: f64 = 1e-9;
/// Eigenvalues closer than this are treated as one repeated eigenvalue.
const EIG_CLUSTER_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("oscillator matrices must both be {dim}x{dim}")]
    OscillatorShape { dim: usize },
    #[error("oscillator generator violates the pure-imaginary semi-simple spectrum condition")]
    OscillatorSpectrum,
    #[error("unknown drift '{0}' (known: zero, square_velocity)")]
    UnknownDrift(String),
}

/// Named drift nonlinearities available to nonlinear followers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    Zero,
    /// Component-wise square of the velocity.
    SquareVelocity,
}

impl Drift {
    pub fn from_name(name: &str) -> Result<Self, DynamicsError> {
        match name {
            "zero" => Ok(Self::Zero),
            "square_velocity" => Ok(Self::SquareVelocity),
            other => Err(DynamicsError::UnknownDrift(other.to_string())),
        }
    }

    pub fn eval(&self, _p: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Zero => DVector::zeros(v.len()),
            Self::SquareVelocity => v.map(|x| x * x),
        }
    }

    /// Known class-K∞ bounds (δ^p, δ^v) with |F̄(p, v)| ≤ δ^p(|p|) + δ^v(|v|).
    pub fn bounds(&self) -> (GrowthBound, GrowthBound) {
        match self {
            Self::Zero => (GrowthBound::Zero, GrowthBound::Zero),
            Self::SquareVelocity => (GrowthBound::Zero, GrowthBound::Power { coef: 1.0, exp: 2.0 }),
        }
    }

    /// Spot-checks the growth bound on the given sample points.
    pub fn bound_holds_on(&self, samples: &[(DVector<f64>, DVector<f64>)]) -> bool {
        let (dp, dv) = self.bounds();
        samples
            .iter()
            .all(|(p, v)| self.eval(p, v).norm() <= dp.eval(p.norm()) + dv.eval(v.norm()) + 1e-12)
    }
}

/// Scalar comparison functions used as drift bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GrowthBound {
    Zero,
    Power { coef: f64, exp: f64 },
}

impl GrowthBound {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Power { coef, exp } => coef * s.powf(exp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentModel {
    /// ṗ = v, v̇ = Γ.
    DoubleIntegrator,
    /// ṗ = v, v̇ = F̄(p, v) + Γ.
    Nonlinear { drift: Drift },
    /// ṗ = v, v̇ = S1 p + S2 v + Γ.
    Oscillator { s1: DMatrix<f64>, s2: DMatrix<f64> },
}

impl AgentModel {
    pub fn oscillator(s1: DMatrix<f64>, s2: DMatrix<f64>) -> Result<Self, DynamicsError> {
        let dim = s1.nrows();
        if !s1.is_square() || s2.shape() != s1.shape() {
            return Err(DynamicsError::OscillatorShape { dim });
        }
        if !check_oscillator_spectrum(&s1, &s2) {
            return Err(DynamicsError::OscillatorSpectrum);
        }
        Ok(Self::Oscillator { s1, s2 })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::DoubleIntegrator => "double_integrator",
            Self::Nonlinear { .. } => "nonlinear",
            Self::Oscillator { .. } => "oscillator",
        }
    }
}

/// State derivative `(ṗ, v̇)` of one agent under input `gamma`.
pub fn follower_rhs(
    model: &AgentModel,
    p: &DVector<f64>,
    v: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), DynamicsError> {
    let dim = p.len();
    for got in [v.len(), gamma.len()] {
        if got != dim {
            return Err(DynamicsError::Dimension { expected: dim, got });
        }
    }
    let dv = match model {
        AgentModel::DoubleIntegrator => gamma.clone(),
        AgentModel::Nonlinear { drift } => drift.eval(p, v) + gamma,
        AgentModel::Oscillator { s1, s2 } => {
            if s1.nrows() != dim {
                return Err(DynamicsError::Dimension {
                    expected: s1.nrows(),
                    got: dim,
                });
            }
            s1 * p + s2 * v + gamma
        }
    };
    Ok((v.clone(), dv))
}

/// Block generator `[[0, I], [S1, S2]]` of the free oscillator.
pub fn oscillator_generator(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s1.nrows();
    let mut s = DMatrix::zeros(2 * n, 2 * n);
    s.view_mut((0, n), (n, n)).fill_with_identity();
    s.view_mut((n, 0), (n, n)).copy_from(s1);
    s.view_mut((n, n), (n, n)).copy_from(s2);
    s
}

/// All eigenvalues of the generator lie on the imaginary axis and are
/// semi-simple (geometric multiplicity equals algebraic multiplicity).
pub fn check_oscillator_spectrum(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> bool {
    if !s1.is_square() || s1.shape() != s2.shape() {
        return false;
    }
    let s = oscillator_generator(s1, s2);
    let Some(eigs) = linalg::eigenvalues(&s) else {
        return false;
    };
    if eigs.iter().any(|z| z.re.abs() >= IMAGINARY_AXIS_TOL) {
        return false;
    }
    let dim = s.nrows();
    let scale = s.abs().max().max(1.0);
    let mut visited = vec![false; eigs.len()];
    for a in 0..eigs.len() {
        if visited[a] {
            continue;
        }
        let lambda = eigs[a];
        let mut algebraic = 0;
        for b in a..eigs.len() {
            if !visited[b] && (eigs[b] - lambda).norm() < EIG_CLUSTER_TOL {
                visited[b] = true;
                algebraic += 1;
            }
        }
        // clean the eigenvalue onto the axis before the rank test
        let lambda = Complex::new(0.0, lambda.im);
        let shifted = DMatrix::from_fn(dim, dim, |i, j| {
            let diag = if i == j { lambda } else { Complex::new(0.0, 0.0) };
            Complex::new(s[(i, j)], 0.0) - diag
        });
        let geometric = dim - linalg::complex_rank(shifted, 1e-7 * scale);
        if geometric != algebraic {
            return false;
        }
    }
    true
}

/// `e^{S dt}`.
pub fn oscillator_flow(s: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    linalg::expm(&(s * dt))
}

/// Memoised [`oscillator_flow`] keyed by the elapsed time rounded to the
/// nanosecond; the flow is evaluated at that rounded time.
#[derive(Debug)]
pub struct FlowCache {
    generator: DMatrix<f64>,
    cache: Mutex<HashMap<i64, Arc<DMatrix<f64>>>>,
}

impl FlowCache {
    pub fn new(generator: DMatrix<f64>) -> Self {
        Self {
            generator,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn flow(&self, elapsed: f64) -> Arc<DMatrix<f64>> {
        let key = (elapsed * 1e9).round() as i64;
        let mut cache = self.cache.lock().expect("flow cache poisoned");
        cache
            .entry(key)
            .or_insert_with(|| Arc::new(oscillator_flow(&self.generator, key as f64 * 1e-9)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Motion prescribed for a leader through its input Γ_i(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeaderTrajectory {
    /// v_i(t) = v_d + 1 (−1)^i i A (cos t − r sin t) e^{−r t}; `index` is the
    /// 1-based agent index `i`, `decay` is `r`.
    Example1 {
        #[serde(rename = "v_d_m_per_s")]
        v_d: Vec<f64>,
        index: u32,
        #[serde(default = "default_amplitude", rename = "amplitude_m_per_s")]
        amplitude: f64,
        #[serde(default = "default_decay", rename = "decay_per_s")]
        decay: f64,
    },
    ConstantVelocity {
        #[serde(rename = "v_d_m_per_s")]
        v_d: Vec<f64>,
    },
    Stationary,
    /// Unforced motion of an oscillator leader from its initial state.
    OscillatorFree {
        #[serde(rename = "initial_velocity_m_per_s")]
        initial_velocity: Vec<f64>,
    },
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_decay() -> f64 {
    0.2
}

impl LeaderTrajectory {
    /// Initial velocity implied by the trajectory.
    pub fn initial_velocity(&self, dim: usize) -> DVector<f64> {
        match self {
            Self::Example1 {
                v_d,
                index,
                amplitude,
                decay,
            } => DVector::from_column_slice(v_d) + DVector::from_element(dim, example1_profile(*index, *amplitude, *decay, 0.0).0),
            Self::ConstantVelocity { v_d } => DVector::from_column_slice(v_d),
            Self::Stationary => DVector::zeros(dim),
            Self::OscillatorFree { initial_velocity } => DVector::from_column_slice(initial_velocity),
        }
    }

    /// Leader input Γ_i(t).
    pub fn input(&self, t: f64, dim: usize) -> DVector<f64> {
        match self {
            Self::Example1 {
                index, amplitude, decay, ..
            } => DVector::from_element(dim, example1_profile(*index, *amplitude, *decay, t).1),
            _ => DVector::zeros(dim),
        }
    }

    /// Asymptotic velocity, when the trajectory has one.
    pub fn final_velocity(&self, dim: usize) -> Option<DVector<f64>> {
        match self {
            Self::Example1 { v_d, .. } | Self::ConstantVelocity { v_d } => Some(DVector::from_column_slice(v_d)),
            Self::Stationary => Some(DVector::zeros(dim)),
            Self::OscillatorFree { .. } => None,
        }
    }

    pub fn dimension_hint(&self) -> Option<usize> {
        match self {
            Self::Example1 { v_d, .. } | Self::ConstantVelocity { v_d } => Some(v_d.len()),
            Self::OscillatorFree { initial_velocity } => Some(initial_velocity.len()),
            Self::Stationary => None,
        }
    }
}

/// Per-component velocity offset and its derivative for the Example-1 leader
/// family: `s (cos t − r sin t) e^{−rt}` and
/// `s (−(1 − r²) sin t − 2 r cos t) e^{−rt}` with `s = (−1)^i i A`.
fn example1_profile(index: u32, amplitude: f64, decay: f64, t: f64) -> (f64, f64) {
    let sign = if index.is_multiple_of(2) { 1.0 } else { -1.0 };
    let s = sign * index as f64 * amplitude;
    let e = (-decay * t).exp();
    let (sin, cos) = t.sin_cos();
    let vel = s * (cos - decay * sin) * e;
    let acc = s * (-(1.0 - decay * decay) * sin - 2.0 * decay * cos) * e;
    (vel, acc)
}

/// Acceleration of leader `i` (1-based) on the two-dimensional Example-1
/// trajectory.
pub fn leader_accel_example1(i: u32, t: f64) -> DVector<f64> {
    DVector::from_element(2, example1_profile(i, 1.0, 0.2, t).1)
}

/// Closed-form Example-1 leader velocity with limit `v_d`.
pub fn leader_velocity_example1(i: u32, t: f64, v_d: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v_d).add_scalar(example1_profile(i, 1.0, 0.2, t).0)
}

/// Closed-form Example-1 leader position: the velocity offset integrates to
/// `s sin t e^{−rt}`.
pub fn leader_position_example1(i: u32, t: f64, p0: &[f64], v_d: &[f64]) -> DVector<f64> {
    let sign = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
    let offset = sign * i as f64 * t.sin() * (-0.2 * t).exp();
    DVector::from_column_slice(p0) + DVector::from_column_slice(v_d) * t + DVector::from_element(p0.len(), offset)
}
