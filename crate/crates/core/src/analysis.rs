//! The generic filter cascade driven over the communication network, with
//! numerical checks of its input-to-state estimates.
//!
//! Leaders integrate `η̇ = Ψ(t)`. Each follower runs
//! `η̇ = −k_η (η − δ) + Φ₁`, `ζ̇ = (H ⊗ I) ζ + (B ⊗ I) ε + Φ₂` with output
//! `δ = α ζ₁ + (1 − α) ε`, where `ε` is the weighted average of the latest
//! received neighbor states, held without extrapolation.

use std::thread;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::CommConfig;
use crate::sim::{CommFabric, SimError};
use crate::topology::{self, DirectedTopology, TopologyError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("follower {0}: filter order must be at least 1")]
    InvalidFilterOrder(usize),
    #[error("alpha must be 0 or 1, got {0}")]
    BadAlpha(f64),
    #[error("follower {agent}: gain {name} = {value} must be positive")]
    NonPositiveGain { agent: usize, name: &'static str, value: f64 },
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    Count { what: &'static str, expected: usize, got: usize },
    #[error("topology violates the leader-reachability condition for followers {0:?}")]
    Unreachable(Vec<usize>),
    #[error("step dt = {dt} must divide the sampling period and be at most T/10")]
    BadStep { dt: f64 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Named time signals used as perturbation terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    Sinusoid {
        amplitude: Vec<f64>,
        frequency_rad_per_s: f64,
        #[serde(default)]
        phase_rad: f64,
    },
    DecayingExponential {
        amplitude: Vec<f64>,
        rate_per_s: f64,
    },
}

impl Perturbation {
    pub fn eval(&self, t: f64, dim: usize) -> DVector<f64> {
        match self {
            Self::Zero => DVector::zeros(dim),
            Self::Constant { value } => DVector::from_column_slice(value),
            Self::Sinusoid {
                amplitude,
                frequency_rad_per_s,
                phase_rad,
            } => DVector::from_column_slice(amplitude) * (frequency_rad_per_s * t + phase_rad).sin(),
            Self::DecayingExponential { amplitude, rate_per_s } => DVector::from_column_slice(amplitude) * (-rate_per_s * t).exp(),
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            Self::Zero => None,
            Self::Constant { value } => Some(value.len()),
            Self::Sinusoid { amplitude, .. } | Self::DecayingExponential { amplitude, .. } => Some(amplitude.len()),
        }
    }

    /// Whether the signal tends to zero.
    pub fn vanishes(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { value } => value.iter().all(|v| *v == 0.0),
            Self::Sinusoid { amplitude, .. } => amplitude.iter().all(|v| *v == 0.0),
            Self::DecayingExponential { rate_per_s, amplitude } => *rate_per_s > 0.0 || amplitude.iter().all(|v| *v == 0.0),
        }
    }
}

/// Filter parameters of one follower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerFilter {
    pub k_eta: f64,
    /// `h_1..h_σ`; the length is the filter order σ.
    pub h: Vec<f64>,
    #[serde(default = "zero_perturbation")]
    pub phi1: Perturbation,
    /// Added to every block of `ζ̇`.
    #[serde(default = "zero_perturbation")]
    pub phi2: Perturbation,
}

fn zero_perturbation() -> Perturbation {
    Perturbation::Zero
}

impl FollowerFilter {
    pub fn order(&self) -> usize {
        self.h.len()
    }
}

#[derive(Debug, Clone)]
pub struct CascadeSystem {
    pub topology: DirectedTopology,
    pub dim: usize,
    pub alpha: f64,
    pub followers: Vec<FollowerFilter>,
    /// `Ψ_i` per leader.
    pub leaders: Vec<Perturbation>,
    /// Initial `η_i` for every agent; `ζ_i(0)` repeats `η_i(0)` per block.
    pub eta0: Vec<Vec<f64>>,
    pub comm: CommConfig,
    pub delay_quantum: f64,
}

pub type FilterMatrices = (DMatrix<f64>, DVector<f64>, DMatrix<f64>);

/// `(H, B, C)` with `H` upper bidiagonal (`−h_ℓ` on the diagonal, `h_ℓ`
/// above it), `B = (0, …, 0, h_σ)ᵀ` and `C = (1, 0, …, 0)`.
pub fn filter_matrices(h: &[f64]) -> Result<FilterMatrices, AnalysisError> {
    let s = h.len();
    if s == 0 {
        return Err(AnalysisError::InvalidFilterOrder(0));
    }
    let mut hm = DMatrix::zeros(s, s);
    for (l, &hl) in h.iter().enumerate() {
        hm[(l, l)] = -hl;
        if l + 1 < s {
            hm[(l, l + 1)] = hl;
        }
    }
    let mut b = DVector::zeros(s);
    b[s - 1] = h[s - 1];
    let mut c = DMatrix::zeros(1, s);
    c[(0, 0)] = 1.0;
    Ok((hm, b, c))
}

impl CascadeSystem {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.alpha != 0.0 && self.alpha != 1.0 {
            return Err(AnalysisError::BadAlpha(self.alpha));
        }
        let (n, m) = (self.topology.n(), self.topology.m());
        let reach = topology::validate_assumption1(&self.topology);
        if !reach.satisfied {
            return Err(AnalysisError::Unreachable(reach.unreachable));
        }
        let count = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(AnalysisError::Count { what, expected, got })
            }
        };
        count("follower filters", m, self.followers.len())?;
        count("leader perturbations", n - m, self.leaders.len())?;
        count("initial states", n, self.eta0.len())?;
        let dim_ok = |what: String, p: &Perturbation| match p.len() {
            Some(got) if got != self.dim => Err(AnalysisError::Dimension {
                what,
                expected: self.dim,
                got,
            }),
            _ => Ok(()),
        };
        for (i, f) in self.followers.iter().enumerate() {
            if f.h.is_empty() {
                return Err(AnalysisError::InvalidFilterOrder(i));
            }
            let gains = std::iter::once(("k_eta", f.k_eta)).chain(f.h.iter().map(|&h| ("h", h)));
            for (name, value) in gains {
                if !(value.is_finite() && value > 0.0) {
                    return Err(AnalysisError::NonPositiveGain { agent: i, name, value });
                }
            }
            dim_ok(format!("phi1 of follower {i}"), &f.phi1)?;
            dim_ok(format!("phi2 of follower {i}"), &f.phi2)?;
        }
        for (k, p) in self.leaders.iter().enumerate() {
            dim_ok(format!("psi of leader {}", m + k), p)?;
        }
        for (i, e) in self.eta0.iter().enumerate() {
            if e.len() != self.dim {
                return Err(AnalysisError::Dimension {
                    what: format!("initial state of agent {i}"),
                    expected: self.dim,
                    got: e.len(),
                });
            }
        }
        Ok(())
    }

    /// Copy with `k_η` and every `h` multiplied by `factor`.
    pub fn with_gain_multiplier(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for f in &mut out.followers {
            f.k_eta *= factor;
            f.h.iter_mut().for_each(|h| *h *= factor);
        }
        out
    }
}

/// Record of a cascade run. Per-follower arrays are `[sample][follower]`;
/// block arrays are `[sample][block]` with blocks laid out by
/// `block_offsets`.
#[derive(Debug, Clone)]
pub struct CascadeTrace {
    pub dim: usize,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub alpha: f64,
    pub k_eta: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub block_offsets: Vec<usize>,
    pub times: Vec<f64>,
    /// `η`, flattened `[sample][agent][component]`.
    pub eta: Vec<f64>,
    /// `|η_F + (L1⁻¹L2 ⊗ I) η_L|`.
    pub error: Vec<f64>,
    pub eta_tilde: Vec<f64>,
    pub zeta_tilde: Vec<f64>,
    /// `|u|` after the arrivals of the sample's tick.
    pub u: Vec<f64>,
    /// `|u|` just before those arrivals.
    pub u_before: Vec<f64>,
    pub y: Vec<f64>,
    pub upsilon: Vec<f64>,
}

impl CascadeTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn blocks(&self) -> usize {
        self.block_offsets[self.m]
    }

    /// Largest error norm over the samples with `t ≥ from`.
    pub fn sup_error_after(&self, from: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.error)
            .filter(|(t, _)| **t >= from - 1e-12)
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }

    /// Scales the recorded follower errors from `from` on by `factor`.
    pub fn corrupt(&mut self, from: f64, factor: f64) {
        let blocks = self.blocks();
        for (s, &t) in self.times.iter().enumerate() {
            if t >= from {
                self.error[s] *= factor;
                for i in 0..self.m {
                    self.eta_tilde[s * self.m + i] *= factor;
                }
                for b in 0..blocks {
                    self.zeta_tilde[s * blocks + b] *= factor;
                }
            }
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct Layout {
    dim: usize,
    m: usize,
    /// Offsets of follower `[η, ζ]` blocks, then of leader `η`.
    offsets: Vec<usize>,
    orders: Vec<usize>,
}

fn rhs(sys: &CascadeSystem, lay: &Layout, eps: &[DVector<f64>], t: f64, x: &[f64]) -> Vec<f64> {
    let dim = lay.dim;
    let mut d = vec![0.0; x.len()];
    for (i, f) in sys.followers.iter().enumerate() {
        let o = lay.offsets[i];
        let s = lay.orders[i];
        let eta = &x[o..o + dim];
        let zeta = &x[o + dim..o + dim + s * dim];
        let phi1 = f.phi1.eval(t, dim);
        for c in 0..dim {
            let delta = if sys.alpha == 1.0 { zeta[c] } else { eps[i][c] };
            d[o + c] = -f.k_eta * (eta[c] - delta) + phi1[c];
        }
        if sys.alpha == 1.0 {
            let phi2 = f.phi2.eval(t, dim);
            for l in 0..s {
                for c in 0..dim {
                    let next = if l + 1 < s { zeta[(l + 1) * dim + c] } else { eps[i][c] };
                    d[o + dim + l * dim + c] = f.h[l] * (next - zeta[l * dim + c]) + phi2[c];
                }
            }
        }
    }
    for (k, psi) in sys.leaders.iter().enumerate() {
        let o = lay.offsets[lay.m + k];
        d[o..o + dim].copy_from_slice(psi.eval(t, dim).as_slice());
    }
    d
}

/// Integrates the cascade with RK4 under the scheduled communication and
/// records the error signals of the estimates.
pub fn simulate_cascade(sys: &CascadeSystem, t_end: f64, dt: f64, seed: u64) -> Result<CascadeTrace, AnalysisError> {
    sys.validate()?;
    let period = sys.comm.period;
    let ratio = period / dt;
    if !(dt > 0.0 && (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) && ratio.round() >= 10.0) {
        return Err(AnalysisError::BadStep { dt });
    }
    let dim = sys.dim;
    let (n, m) = (sys.topology.n(), sys.topology.m());
    let part = topology::partition(&sys.topology)?;
    let w = topology::containment_weights(&part)?;

    let orders: Vec<usize> = sys.followers.iter().map(FollowerFilter::order).collect();
    let mut offsets = Vec::with_capacity(n);
    let mut x = Vec::new();
    for i in 0..n {
        offsets.push(x.len());
        x.extend_from_slice(&sys.eta0[i]);
        if i < m {
            for _ in 0..orders[i] {
                x.extend_from_slice(&sys.eta0[i]);
            }
        }
    }
    let lay = Layout { dim, m, offsets, orders };
    let mut block_offsets = vec![0];
    for i in 0..m {
        block_offsets.push(block_offsets[i] + lay.orders[i]);
    }

    let mut cfg = sys.comm;
    cfg.seed = seed;
    let mut fabric = CommFabric::new(&sys.topology, &cfg, sys.delay_quantum, dt, t_end)?;
    let steps = (t_end / dt + 1e-9).floor() as usize;

    let mut tr = CascadeTrace {
        dim,
        n,
        m,
        dt,
        alpha: sys.alpha,
        k_eta: sys.followers.iter().map(|f| f.k_eta).collect(),
        h: sys.followers.iter().map(|f| f.h.clone()).collect(),
        block_offsets,
        times: Vec::with_capacity(steps + 1),
        eta: Vec::with_capacity((steps + 1) * n * dim),
        error: Vec::with_capacity(steps + 1),
        eta_tilde: Vec::new(),
        zeta_tilde: Vec::new(),
        u: Vec::new(),
        u_before: Vec::new(),
        y: Vec::new(),
        upsilon: Vec::new(),
    };

    let eps_of = |fabric: &CommFabric| -> Vec<DVector<f64>> {
        (0..m)
            .map(|i| {
                fabric
                    .neighborhood(i, dim)
                    .weighted_average(|msg| DVector::from_column_slice(&msg.payload[..dim]))
                    .unwrap_or_else(|| DVector::from_column_slice(&sys.eta0[i]))
            })
            .collect()
    };
    let leader_eta = |x: &[f64]| -> Vec<f64> { (m..n).flat_map(|j| x[lay.offsets[j]..lay.offsets[j] + dim].to_vec()).collect() };

    for step in 0..=steps {
        let t = step as f64 * dt;
        fabric.capture(step, |j| x[lay.offsets[j]..lay.offsets[j] + dim].to_vec());
        let eta_c = w.apply(&leader_eta(&x), dim);
        let before = eps_of(&fabric);
        fabric.deliver(step)?;
        let eps = eps_of(&fabric);

        let psi_l: Vec<f64> = sys.leaders.iter().flat_map(|p| p.eval(t, dim).as_slice().to_vec()).collect();
        let deta_c = w.apply(&psi_l, dim);
        let mut stacked = Vec::with_capacity(m * dim);
        for (i, f) in sys.followers.iter().enumerate() {
            let o = lay.offsets[i];
            let c = &eta_c[i * dim..(i + 1) * dim];
            let dc = &deta_c[i * dim..(i + 1) * dim];
            let et: Vec<f64> = (0..dim).map(|k| x[o + k] - c[k]).collect();
            tr.eta_tilde.push(norm(&et));
            stacked.extend(et);
            for l in 0..lay.orders[i] {
                let zt: Vec<f64> = (0..dim).map(|k| x[o + dim + l * dim + k] - c[k]).collect();
                tr.zeta_tilde.push(norm(&zt));
            }
            let u: Vec<f64> = (0..dim).map(|k| eps[i][k] - c[k]).collect();
            let ub: Vec<f64> = (0..dim).map(|k| before[i][k] - c[k]).collect();
            tr.u.push(norm(&u));
            tr.u_before.push(norm(&ub));
            let phi1 = f.phi1.eval(t, dim);
            let y: Vec<f64> = (0..dim).map(|k| phi1[k] - dc[k]).collect();
            tr.y.push(norm(&y));
            let phi2 = f.phi2.eval(t, dim);
            let ups: Vec<f64> = (0..dim).map(|k| phi2[k] - dc[k]).collect();
            let ups_norm = norm(&ups);
            for _ in 0..lay.orders[i] {
                tr.upsilon.push(ups_norm);
            }
        }
        tr.error.push(norm(&stacked));
        tr.times.push(t);
        for j in 0..n {
            tr.eta.extend_from_slice(&x[lay.offsets[j]..lay.offsets[j] + dim]);
        }
        if step == steps {
            break;
        }
        let k1 = rhs(sys, &lay, &eps, t, &x);
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
        let k2 = rhs(sys, &lay, &eps, t + 0.5 * dt, &x2);
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
        let k3 = rhs(sys, &lay, &eps, t + 0.5 * dt, &x3);
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
        let k4 = rhs(sys, &lay, &eps, t + dt, &x4);
        for (idx, xi) in x.iter_mut().enumerate() {
            *xi += dt / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite() || v.abs() > crate::sim::DIVERGENCE_LIMIT) {
            let agent = lay.offsets.iter().rposition(|&o| o <= bad).unwrap_or(0);
            return Err(SimError::Divergence { t: t + dt, agent }.into());
        }
    }
    Ok(tr)
}

/// Sup-norm of the error over the final 20% of the horizon for each gain
/// multiplier, all runs sharing the same communication schedule.
pub fn gain_sweep_attenuation(sys: &CascadeSystem, multipliers: &[f64], t_end: f64, dt: f64, seed: u64) -> Result<Vec<f64>, AnalysisError> {
    let systems: Vec<CascadeSystem> = multipliers.iter().map(|&k| sys.with_gain_multiplier(k)).collect();
    steady_state_bounds(&systems, t_end, dt, seed)
}

/// Same measure as [`gain_sweep_attenuation`] across blackout bounds `T*`.
pub fn t_star_sweep(sys: &CascadeSystem, t_stars: &[f64], t_end: f64, dt: f64, seed: u64) -> Result<Vec<f64>, AnalysisError> {
    let systems: Vec<CascadeSystem> = t_stars
        .iter()
        .map(|&ts| {
            let mut s = sys.clone();
            s.comm.t_star = ts;
            s
        })
        .collect();
    steady_state_bounds(&systems, t_end, dt, seed)
}

fn steady_state_bounds(systems: &[CascadeSystem], t_end: f64, dt: f64, seed: u64) -> Result<Vec<f64>, AnalysisError> {
    let results: Vec<Result<f64, AnalysisError>> = thread::scope(|scope| {
        let handles: Vec<_> = systems
            .iter()
            .map(|s| scope.spawn(move || simulate_cascade(s, t_end, dt, seed).map(|tr| tr.sup_error_after(0.8 * t_end))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    /// Bound on `|η̃_i|`.
    Eta,
    /// Bound on `|ζ̃_{i,ℓ}|`, `ℓ` 1-based.
    Zeta(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t0: f64,
    pub t: f64,
    pub follower: usize,
    pub estimate: Estimate,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssReport {
    pub pairs: usize,
    pub checks: usize,
    pub violations: Vec<Violation>,
}

/// `(t0, t)` sample-index pairs: 20 start times (zero, then log-spaced up to
/// half the horizon) times 20 log-spaced lags reaching the horizon.
pub fn log_grid_pairs(samples: usize) -> Vec<(usize, usize)> {
    let last = samples.saturating_sub(1);
    if last < 20 {
        return (0..last).flat_map(|a| ((a + 1)..=last).map(move |b| (a, b))).collect();
    }
    let logspace = |lo: f64, hi: f64, k: usize| -> Vec<usize> {
        (0..k)
            .map(|j| (lo.ln() + (hi.ln() - lo.ln()) * j as f64 / (k - 1) as f64).exp().round() as usize)
            .collect()
    };
    let lo = 10.min(last / 4).max(1);
    let mut starts = vec![0];
    starts.extend(logspace(lo as f64, (last / 2) as f64, 19));
    let mut pairs = Vec::with_capacity(400);
    for s0 in starts {
        for lag in logspace(lo as f64, (last - s0) as f64, 20) {
            pairs.push((s0, (s0 + lag).min(last)));
        }
    }
    pairs
}

/// Evaluates both sides of the η̃ and ζ̃ estimates on [`log_grid_pairs`];
/// a violation is `lhs > rhs + 1e-6 (1 + rhs)`. The ζ̃ estimates apply
/// only when the filter is in the loop (α = 1).
pub fn iss_estimate_check(trace: &CascadeTrace) -> IssReport {
    let pairs = log_grid_pairs(trace.len());
    let m = trace.m;
    let blocks = trace.blocks();
    let mut violations = Vec::new();
    let mut checks = 0;
    let mut record = |t0: f64, t: f64, follower, estimate, lhs: f64, rhs: f64, checks: &mut usize| {
        *checks += 1;
        if lhs > rhs + 1e-6 * (1.0 + rhs) {
            violations.push(Violation {
                t0,
                t,
                follower,
                estimate,
                lhs,
                rhs,
            });
        }
    };
    for &(s0, s1) in &pairs {
        let (t0, t) = (trace.times[s0], trace.times[s1]);
        let sup =
            |data: &[f64], width: usize, col: usize, from: usize| -> f64 { (from..=s1).map(|s| data[s * width + col]).fold(0.0, f64::max) };
        for i in 0..m {
            let sup_u = sup(&trace.u, m, i, s0).max(if s1 > s0 { sup(&trace.u_before, m, i, s0 + 1) } else { 0.0 });
            let sup_y = sup(&trace.y, m, i, s0);
            let k = trace.k_eta[i];
            let decay = |rate: f64| (-rate * (t - t0)).exp();
            let z1 = trace.block_offsets[i];
            let mut rhs = decay(k) * trace.eta_tilde[s0 * m + i] + sup_y / k;
            if trace.alpha == 1.0 {
                rhs += sup(&trace.zeta_tilde, blocks, z1, s0);
            } else {
                rhs += sup_u;
            }
            record(t0, t, i, Estimate::Eta, trace.eta_tilde[s1 * m + i], rhs, &mut checks);
            if trace.alpha != 1.0 {
                continue;
            }
            let order = trace.h[i].len();
            for l in 0..order {
                let b = z1 + l;
                let h = trace.h[i][l];
                let drive = if l + 1 < order {
                    sup(&trace.zeta_tilde, blocks, b + 1, s0)
                } else {
                    sup_u
                };
                let rhs = decay(h) * trace.zeta_tilde[s0 * blocks + b] + drive + sup(&trace.upsilon, blocks, b, s0) / h;
                record(t0, t, i, Estimate::Zeta(l + 1), trace.zeta_tilde[s1 * blocks + b], rhs, &mut checks);
            }
        }
    }
    IssReport {
        pairs: pairs.len(),
        checks,
        violations,
    }
}

/// Graph-level certificate: containment weights, M-matrix verdicts and the
/// small-gain condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub assumption1: bool,
    pub unreachable_followers: Vec<usize>,
    pub l1_nonsingular_m_matrix: bool,
    pub i_minus_gain_nonsingular_m_matrix: bool,
    pub spectral_radius: f64,
    pub small_gain_pass: bool,
    pub weights_min_entry: f64,
    pub weights_max_row_sum_deviation: f64,
    pub weights_valid: bool,
    pub containment_weights: Vec<Vec<f64>>,
}

impl Certificate {
    pub fn pass(&self) -> bool {
        self.assumption1
            && self.l1_nonsingular_m_matrix
            && self.i_minus_gain_nonsingular_m_matrix
            && self.small_gain_pass
            && self.weights_valid
    }
}

pub fn certificate(topo: &DirectedTopology) -> Result<Certificate, AnalysisError> {
    let reach = topology::validate_assumption1(topo);
    let part = topology::partition(topo)?;
    let sg = topology::small_gain_certificate(&part);
    let g = topology::gain_matrix(&part);
    let i_minus_g = DMatrix::identity(g.nrows(), g.ncols()) - g;
    let l1_ok = topology::is_nonsingular_m_matrix(&part.l1);
    let (weights, min_entry, dev, valid) = match topology::containment_weights(&part) {
        Ok(w) => (
            w.matrix().row_iter().map(|r| r.iter().copied().collect()).collect(),
            w.min_entry(),
            w.max_row_sum_deviation(),
            w.is_valid(),
        ),
        Err(_) => (Vec::new(), f64::NAN, f64::NAN, false),
    };
    Ok(Certificate {
        assumption1: reach.satisfied,
        unreachable_followers: reach.unreachable,
        l1_nonsingular_m_matrix: l1_ok,
        i_minus_gain_nonsingular_m_matrix: topology::is_nonsingular_m_matrix(&i_minus_g),
        spectral_radius: sg.spectral_radius,
        small_gain_pass: sg.pass,
        weights_min_entry: min_entry,
        weights_max_row_sum_deviation: dev,
        weights_valid: valid,
        containment_weights: weights,
    })
}
