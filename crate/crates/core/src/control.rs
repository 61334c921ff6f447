//! Follower control laws and their auxiliary systems, written as derivative
//! evaluators over (own state, mailbox snapshot, time).
//!
//! Neighbor payloads are `[p_j, v̂_j]` captured at the send instant; leaders
//! send their true velocity in the `v̂_j` slot.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::Message;
use crate::dynamics::{AgentModel, FlowCache, GrowthBound};
use crate::linalg;

type Vector = DVector<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("gain check failed: {}", .0.join("; "))]
    Gains(Vec<String>),
    #[error("controller variant {variant} cannot drive a {model} agent")]
    ModelMismatch { variant: &'static str, model: &'static str },
    #[error("controller state has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("known velocity has dimension {got}, expected {expected}")]
    KnownVelocityDimension { expected: usize, got: usize },
}

fn default_eps() -> f64 {
    1e-4
}

fn one() -> f64 {
    1.0
}

/// Per-follower gains. Unused entries are ignored by a given variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    pub k_p: f64,
    pub k_d: f64,
    #[serde(default = "one")]
    pub l_p: f64,
    #[serde(default = "one")]
    pub l_d: f64,
    #[serde(default = "one")]
    pub k_psi: f64,
    #[serde(default = "one")]
    pub k_phi: f64,
    #[serde(default = "one")]
    pub k_r: f64,
    #[serde(default = "one")]
    pub k_eta: f64,
    /// Reference-velocity gain; the larger real root of
    /// `x² + k_d x + k_p` when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_eps")]
    pub boundary_layer_eps: f64,
}

impl GainSet {
    pub fn new(k_p: f64, k_d: f64) -> Self {
        Self {
            k_p,
            k_d,
            l_p: 1.0,
            l_d: 1.0,
            k_psi: 1.0,
            k_phi: 1.0,
            k_r: 1.0,
            k_eta: 1.0,
            lambda: None,
            boundary_layer_eps: default_eps(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .or_else(|| real_root_rates(self.k_p, self.k_d).map(|(_, hi)| hi))
            .unwrap_or(f64::NAN)
    }

    /// Scales every feedback gain by `factor`; the boundary layer is kept.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            k_p: self.k_p * factor,
            k_d: self.k_d * factor,
            l_p: self.l_p * factor,
            l_d: self.l_d * factor,
            k_psi: self.k_psi * factor,
            k_phi: self.k_phi * factor,
            k_r: self.k_r * factor,
            k_eta: self.k_eta * factor,
            lambda: self.lambda.map(|l| l * factor),
            boundary_layer_eps: self.boundary_layer_eps,
        }
    }
}

/// Decay rates `λ` with `x² + k_d x + k_p = (x + λ)(x + k_p/λ)`, returned as
/// (smaller, larger); `None` when the roots are complex.
pub fn real_root_rates(k_p: f64, k_d: f64) -> Option<(f64, f64)> {
    let disc = k_d * k_d - 4.0 * k_p;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(((k_d - s) / 2.0, (k_d + s) / 2.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    /// ψ is the weighted average of neighbor position estimates.
    #[default]
    Static,
    /// ψ is low-pass filtered toward that average.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    FullState {
        #[serde(default)]
        psi: PsiMode,
        /// Replaces the observer with this constant velocity.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        known_vd: Option<Vec<f64>>,
    },
    OutputFeedback {
        #[serde(default)]
        psi: PsiMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        known_vd: Option<Vec<f64>>,
    },
    NonlinearRef,
    OscillatorFull,
    OscillatorOutput,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FullState { .. } => "full_state",
            Self::OutputFeedback { .. } => "output_feedback",
            Self::NonlinearRef => "nonlinear_ref",
            Self::OscillatorFull => "oscillator_full",
            Self::OscillatorOutput => "oscillator_output",
        }
    }

    fn needs_real_roots(&self) -> bool {
        !matches!(self, Self::NonlinearRef)
    }

    /// Fixed layout of the controller state, one N-vector per slot.
    pub fn slots(&self) -> Vec<Slot> {
        let mut slots = Vec::new();
        match self {
            Self::FullState { psi, known_vd } | Self::OutputFeedback { psi, known_vd } => {
                if known_vd.is_none() {
                    slots.push(Slot::Vhat);
                }
                if *psi == PsiMode::Dynamic {
                    slots.push(Slot::Psi);
                }
                if matches!(self, Self::OutputFeedback { .. }) {
                    slots.push(Slot::Phi);
                }
            }
            Self::NonlinearRef => slots.extend([Slot::Vhat, Slot::Sigma1, Slot::Eta1, Slot::Eta2]),
            Self::OscillatorFull => slots.extend([Slot::Vhat, Slot::Sigma]),
            Self::OscillatorOutput => slots.extend([Slot::Vhat, Slot::Sigma, Slot::Phi]),
        }
        slots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Vhat,
    Psi,
    Phi,
    Sigma,
    Sigma1,
    Eta1,
    Eta2,
}

/// Outcome of [`check_gains`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub pass: bool,
    pub diagnostics: Vec<String>,
}

/// Positivity of the gains a variant uses, the real-roots condition
/// `k_d² ≥ 4 k_p` for the linear-model variants, and stability of
/// `−k_φ I + S2` for the oscillator output-feedback law.
pub fn check_gains(variant: &Variant, gains: &GainSet, s2: Option<&DMatrix<f64>>) -> GainReport {
    let mut diagnostics = Vec::new();
    let mut used: Vec<(&str, f64)> = vec![("k_p", gains.k_p), ("k_d", gains.k_d)];
    match variant {
        Variant::FullState { psi, known_vd } | Variant::OutputFeedback { psi, known_vd } => {
            if known_vd.is_none() {
                used.push(("L_p", gains.l_p));
            }
            if *psi == PsiMode::Dynamic {
                used.push(("k_psi", gains.k_psi));
            }
        }
        Variant::NonlinearRef => {
            used.extend([
                ("L_p", gains.l_p),
                ("L_d", gains.l_d),
                ("k_r", gains.k_r),
                ("lambda", gains.lambda()),
                ("boundary_layer_eps", gains.boundary_layer_eps),
            ]);
        }
        Variant::OscillatorFull => {}
        Variant::OscillatorOutput => used.push(("k_phi", gains.k_phi)),
    }
    for (name, value) in used {
        if !(value.is_finite() && value > 0.0) {
            diagnostics.push(format!("gain {name} = {value} must be positive"));
        }
    }
    if variant.needs_real_roots() && real_root_rates(gains.k_p, gains.k_d).is_none() {
        diagnostics.push(format!(
            "real-roots condition violated: k_d^2 = {} < 4 k_p = {}",
            gains.k_d * gains.k_d,
            4.0 * gains.k_p
        ));
    }
    if matches!(variant, Variant::OscillatorOutput) {
        match s2 {
            Some(s2) => {
                let m = -DMatrix::identity(s2.nrows(), s2.ncols()) * gains.k_phi + s2;
                let stable = linalg::eigenvalues(&m).is_some_and(|ev| ev.iter().all(|z| z.re < 0.0));
                if !stable {
                    diagnostics.push(format!("-k_phi I + S2 is not stable for k_phi = {}", gains.k_phi));
                }
            }
            None => diagnostics.push("oscillator output feedback needs S2".to_string()),
        }
    }
    GainReport {
        pass: diagnostics.is_empty(),
        diagnostics,
    }
}

/// In-neighbors of one follower with the latest message on each in-edge.
#[derive(Debug, Clone)]
pub struct Neighborhood<'a> {
    dim: usize,
    entries: Vec<(f64, Option<&'a Message>)>,
}

impl<'a> Neighborhood<'a> {
    pub fn new(dim: usize, entries: Vec<(f64, Option<&'a Message>)>) -> Self {
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(f64, Option<&'a Message>)] {
        &self.entries
    }

    /// Weighted average over delivered in-edges, renormalized by their
    /// total weight; `None` before anything has arrived.
    pub fn weighted_average<F>(&self, f: F) -> Option<Vector>
    where
        F: Fn(&Message) -> Vector,
    {
        let mut sum: Option<Vector> = None;
        let mut total = 0.0;
        for &(w, msg) in &self.entries {
            let Some(msg) = msg else { continue };
            if w <= 0.0 {
                continue;
            }
            let x = f(msg) * w;
            total += w;
            sum = Some(match sum {
                Some(s) => s + x,
                None => x,
            });
        }
        sum.map(|s| s / total)
    }

    pub fn avg_vartheta(&self, t: f64) -> Option<Vector> {
        self.weighted_average(|m| vartheta(m, t, self.dim))
    }

    pub fn avg_vhat(&self) -> Option<Vector> {
        self.weighted_average(|m| payload_vhat(m, self.dim))
    }

    /// Weighted average of `e^{S(t − t_k)} [p_j; v̂_j]`.
    pub fn avg_flow(&self, t: f64, flow: &FlowCache) -> Option<Vector> {
        self.weighted_average(|m| &*flow.flow(t - m.send_time) * DVector::from_column_slice(&m.payload[..2 * self.dim]))
    }
}

fn payload_p(msg: &Message, dim: usize) -> Vector {
    DVector::from_column_slice(&msg.payload[..dim])
}

fn payload_vhat(msg: &Message, dim: usize) -> Vector {
    DVector::from_column_slice(&msg.payload[dim..2 * dim])
}

/// Position estimate `ϑ_ij(t) = p_j(kT) + v̂_j(kT)(t − kT)`.
pub fn vartheta(msg: &Message, t: f64, dim: usize) -> Vector {
    payload_p(msg, dim) + payload_vhat(msg, dim) * (t - msg.send_time)
}

/// Distributed observer `v̂̇ = −L_p (v̂ − avg v̂_j)`.
pub fn observer_vhat_deriv(vhat: &Vector, nb: &Neighborhood, l_p: f64) -> Vector {
    match nb.avg_vhat() {
        Some(avg) => (vhat - avg) * -l_p,
        None => DVector::zeros(vhat.len()),
    }
}

/// Static ψ: the weighted average of position estimates, or `p0` before
/// any delivery.
pub fn psi_static(nb: &Neighborhood, t: f64, p0: &Vector) -> Vector {
    nb.avg_vartheta(t).unwrap_or_else(|| p0.clone())
}

/// Dynamic ψ: `ψ̇ = −k_ψ (ψ − avg ϑ) + v̂`.
pub fn psi_dynamic_deriv(psi: &Vector, vhat: &Vector, nb: &Neighborhood, t: f64, k_psi: f64, p0: &Vector) -> Vector {
    (psi - psi_static(nb, t, p0)) * -k_psi + vhat
}

/// `Γ = −k_d (v − v̂) − k_p (p − ψ)`.
pub fn gamma_full_state(p: &Vector, v: &Vector, vhat: &Vector, psi: &Vector, gains: &GainSet) -> Vector {
    (v - vhat) * -gains.k_d - (p - psi) * gains.k_p
}

/// Full-state law with the observer replaced by the known velocity `v_d`.
pub fn gamma_known_vd(p: &Vector, v: &Vector, v_d: &Vector, psi: &Vector, gains: &GainSet) -> Vector {
    gamma_full_state(p, v, v_d, psi, gains)
}

/// Velocity-free law: `Γ = −k_d (φ + p − v̂) − k_p (p − ψ)` and
/// `φ̇ = −(φ + p) + Γ`. Returns `(Γ, φ̇)`.
pub fn gamma_output_feedback(p: &Vector, phi: &Vector, vhat: &Vector, psi: &Vector, gains: &GainSet) -> (Vector, Vector) {
    let x = phi + p;
    let gamma = (&x - vhat) * -gains.k_d - (p - psi) * gains.k_p;
    let dphi = -x + &gamma;
    (gamma, dphi)
}

/// Internal states of the nonlinear reference-velocity design.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearState {
    pub vhat: Vector,
    pub sigma1: Vector,
    pub eta1: Vector,
    pub eta2: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearReference {
    pub v_r: Vector,
    pub dv_r: Vector,
    pub deta1: Vector,
    pub deta2: Vector,
    pub dvhat: Vector,
    pub dsigma1: Vector,
}

/// Reference velocity `v_r = −λ (p − η₁) + v̂` with its filters and
/// two-stage observer. `v` enters only through `v̇_r`.
pub fn nonlinear_reference(
    p: &Vector,
    v: &Vector,
    st: &NonlinearState,
    nb: &Neighborhood,
    t: f64,
    p0: &Vector,
    gains: &GainSet,
) -> NonlinearReference {
    let lambda = gains.lambda();
    let target = psi_static(nb, t, p0);
    let avg_vhat = nb.avg_vhat().unwrap_or_else(|| st.sigma1.clone());
    let v_r = (p - &st.eta1) * -lambda + &st.vhat;
    let deta1 = (&st.eta1 - &st.eta2) * -gains.k_p + &st.vhat;
    let deta2 = (&st.eta2 - target) * -gains.k_d + &st.vhat;
    let dvhat = (&st.vhat - &st.sigma1) * -gains.l_p;
    let dsigma1 = (&st.sigma1 - avg_vhat) * -gains.l_d;
    let dv_r = (v - &deta1) * -lambda + &dvhat;
    NonlinearReference {
        v_r,
        dv_r,
        deta1,
        deta2,
        dvhat,
        dsigma1,
    }
}

/// Tracking law driving `v` onto the reference velocity.
pub trait TrackingLaw: std::fmt::Debug + Send + Sync {
    fn gamma(&self, p: &Vector, v: &Vector, v_r: &Vector, dv_r: &Vector, gains: &GainSet) -> Vector;
}

/// Variable-structure tracking with a boundary layer of width ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariableStructure {
    pub delta_p: GrowthBound,
    pub delta_v: GrowthBound,
}

impl TrackingLaw for VariableStructure {
    fn gamma(&self, p: &Vector, v: &Vector, v_r: &Vector, dv_r: &Vector, gains: &GainSet) -> Vector {
        gamma_nonlinear_vs(v, v_r, dv_r, p, gains, self.delta_p, self.delta_v)
    }
}

/// `Γ = −k_r e + v̇_r − Γ̄` with `e = v − v_r` and
/// `Γ̄ = sat(e) (δ^p(|p|) + δ^v(|v|))`, where `sat(e) = e/|e|` outside the
/// boundary layer and `e/ε` inside it.
pub fn gamma_nonlinear_vs(
    v: &Vector,
    v_r: &Vector,
    dv_r: &Vector,
    p: &Vector,
    gains: &GainSet,
    delta_p: GrowthBound,
    delta_v: GrowthBound,
) -> Vector {
    let e = v - v_r;
    let bound = delta_p.eval(p.norm()) + delta_v.eval(v.norm());
    let norm = e.norm();
    let eps = gains.boundary_layer_eps;
    let sat = if norm > eps { &e / norm } else { &e / eps };
    &e * -gains.k_r + dv_r - sat * bound
}

/// Prediction `(ψ₁, ψ₂)` of neighbor position and velocity estimate through
/// the free oscillator flow; `(p0, v̂)` before any delivery.
pub fn oscillator_psi(nb: &Neighborhood, t: f64, flow: &FlowCache, p0: &Vector, vhat: &Vector) -> (Vector, Vector) {
    let dim = p0.len();
    match nb.avg_flow(t, flow) {
        Some(x) => (x.rows(0, dim).into_owned(), x.rows(dim, dim).into_owned()),
        None => (p0.clone(), vhat.clone()),
    }
}

/// Oscillator law with velocity feedback. Returns `(Γ, σ̇, v̂̇)`.
#[allow(clippy::too_many_arguments)]
pub fn gamma_oscillator_full(
    p: &Vector,
    v: &Vector,
    vhat: &Vector,
    sigma: &Vector,
    psi1: &Vector,
    psi2: &Vector,
    gains: &GainSet,
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
) -> (Vector, Vector, Vector) {
    let ev = v - vhat;
    let kd = DMatrix::identity(p.len(), p.len()) * gains.k_d;
    let gamma = -(&kd + s2) * &ev - (p - psi1) * gains.k_p + sigma * 2.0;
    let dsigma = s1 * &ev + s2 * sigma - sigma * gains.k_d - (vhat - psi2) * gains.k_p;
    let dvhat = s1 * p + s2 * vhat + sigma;
    (gamma, dsigma, dvhat)
}

/// Oscillator law with `v` replaced by `k_φ (φ + p)`. Returns
/// `(Γ, σ̇, v̂̇, φ̇)`.
#[allow(clippy::too_many_arguments)]
pub fn gamma_oscillator_output(
    p: &Vector,
    phi: &Vector,
    vhat: &Vector,
    sigma: &Vector,
    psi1: &Vector,
    psi2: &Vector,
    gains: &GainSet,
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
) -> (Vector, Vector, Vector, Vector) {
    let n = p.len();
    let id = DMatrix::<f64>::identity(n, n);
    let x = phi + p;
    let ev = &x * gains.k_phi - vhat;
    let gamma = -(&id * gains.k_d + s2) * &ev - (p - psi1) * gains.k_p + sigma * 2.0;
    let dsigma = -(&id * gains.k_d - s2) * sigma + s1 * &ev - (vhat - psi2) * gains.k_p;
    let dvhat = s1 * p + s2 * vhat + sigma;
    let dphi = -(&id * gains.k_phi - s2) * &x + (&gamma + s1 * p) / gains.k_phi;
    (gamma, dsigma, dvhat, dphi)
}

/// Everything a controller reads at one evaluation.
#[derive(Debug, Clone)]
pub struct ControlInput<'a> {
    pub t: f64,
    pub p: &'a Vector,
    pub v: &'a Vector,
    /// Initial position, used before any neighbor data has arrived.
    pub p0: &'a Vector,
    pub state: &'a [f64],
    pub neighbors: &'a Neighborhood<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub gamma: Vector,
    pub dstate: Vector,
    /// `(V, V̇)` with `V = |e|²/2` for the reference-velocity design.
    pub lyapunov: Option<(f64, f64)>,
}

/// A configured follower controller.
#[derive(Debug, Clone)]
pub struct Controller {
    variant: Variant,
    gains: GainSet,
    model: AgentModel,
    dim: usize,
    slots: Vec<Slot>,
    known_vd: Option<Vector>,
    flow: Option<Arc<FlowCache>>,
    tracking: Option<Arc<dyn TrackingLaw>>,
}

impl Controller {
    pub fn new(variant: Variant, gains: GainSet, model: AgentModel, dim: usize) -> Result<Self, ControlError> {
        let mismatch = || ControlError::ModelMismatch {
            variant: variant.name(),
            model: model.kind_name(),
        };
        let mut flow = None;
        let mut tracking: Option<Arc<dyn TrackingLaw>> = None;
        let mut s2 = None;
        match (&variant, &model) {
            (Variant::FullState { .. } | Variant::OutputFeedback { .. }, AgentModel::DoubleIntegrator) => {}
            (Variant::NonlinearRef, AgentModel::DoubleIntegrator) => {
                tracking = Some(Arc::new(VariableStructure {
                    delta_p: GrowthBound::Zero,
                    delta_v: GrowthBound::Zero,
                }));
            }
            (Variant::NonlinearRef, AgentModel::Nonlinear { drift }) => {
                let (delta_p, delta_v) = drift.bounds();
                tracking = Some(Arc::new(VariableStructure { delta_p, delta_v }));
            }
            (Variant::OscillatorFull | Variant::OscillatorOutput, AgentModel::Oscillator { s1, s2: s2m }) => {
                flow = Some(Arc::new(FlowCache::new(crate::dynamics::oscillator_generator(s1, s2m))));
                s2 = Some(s2m.clone());
            }
            _ => return Err(mismatch()),
        }
        let report = check_gains(&variant, &gains, s2.as_ref());
        if !report.pass {
            return Err(ControlError::Gains(report.diagnostics));
        }
        let known_vd = match &variant {
            Variant::FullState { known_vd: Some(vd), .. } | Variant::OutputFeedback { known_vd: Some(vd), .. } => {
                if vd.len() != dim {
                    return Err(ControlError::KnownVelocityDimension {
                        expected: dim,
                        got: vd.len(),
                    });
                }
                Some(DVector::from_column_slice(vd))
            }
            _ => None,
        };
        let slots = variant.slots();
        Ok(Self {
            variant,
            gains,
            model,
            dim,
            slots,
            known_vd,
            flow,
            tracking,
        })
    }

    /// Replaces the default variable-structure tracking law.
    pub fn with_tracking_law(mut self, law: Arc<dyn TrackingLaw>) -> Self {
        if self.tracking.is_some() {
            self.tracking = Some(law);
        }
        self
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn gains(&self) -> &GainSet {
        &self.gains
    }

    pub fn model(&self) -> &AgentModel {
        &self.model
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn state_len(&self) -> usize {
        self.slots.len() * self.dim
    }

    pub fn slot<'s>(&self, state: &'s [f64], slot: Slot) -> Option<&'s [f64]> {
        let k = self.slots.iter().position(|&s| s == slot)?;
        state.get(k * self.dim..(k + 1) * self.dim)
    }

    fn slot_vec(&self, state: &[f64], slot: Slot) -> Vector {
        DVector::from_column_slice(self.slot(state, slot).expect("slot present in layout"))
    }

    /// Default initial state: η₁ = η₂ = ψ = p(0), every other slot zero.
    pub fn initial_state(&self, p0: &Vector) -> Vector {
        let mut x = DVector::zeros(self.state_len());
        for (k, slot) in self.slots.iter().enumerate() {
            if matches!(slot, Slot::Psi | Slot::Eta1 | Slot::Eta2) {
                x.rows_mut(k * self.dim, self.dim).copy_from(p0);
            }
        }
        x
    }

    /// Velocity estimate broadcast to neighbors.
    pub fn vhat(&self, state: &[f64]) -> Vector {
        match &self.known_vd {
            Some(vd) => vd.clone(),
            None => self.slot_vec(state, Slot::Vhat),
        }
    }

    pub fn eval(&self, inp: &ControlInput) -> Result<ControlOutput, ControlError> {
        if inp.state.len() != self.state_len() {
            return Err(ControlError::StateLength {
                expected: self.state_len(),
                got: inp.state.len(),
            });
        }
        let (p, v, nb, t) = (inp.p, inp.v, inp.neighbors, inp.t);
        let mut parts: Vec<(Slot, Vector)> = Vec::with_capacity(self.slots.len());
        let mut lyapunov = None;
        let gamma = match &self.variant {
            Variant::FullState { psi, .. } | Variant::OutputFeedback { psi, .. } => {
                let vhat = self.vhat(inp.state);
                if self.known_vd.is_none() {
                    parts.push((Slot::Vhat, observer_vhat_deriv(&vhat, nb, self.gains.l_p)));
                }
                let psi_now = match psi {
                    PsiMode::Static => psi_static(nb, t, inp.p0),
                    PsiMode::Dynamic => {
                        let cur = self.slot_vec(inp.state, Slot::Psi);
                        parts.push((Slot::Psi, psi_dynamic_deriv(&cur, &vhat, nb, t, self.gains.k_psi, inp.p0)));
                        cur
                    }
                };
                if matches!(self.variant, Variant::FullState { .. }) {
                    gamma_full_state(p, v, &vhat, &psi_now, &self.gains)
                } else {
                    let phi = self.slot_vec(inp.state, Slot::Phi);
                    let (gamma, dphi) = gamma_output_feedback(p, &phi, &vhat, &psi_now, &self.gains);
                    parts.push((Slot::Phi, dphi));
                    gamma
                }
            }
            Variant::NonlinearRef => {
                let st = NonlinearState {
                    vhat: self.slot_vec(inp.state, Slot::Vhat),
                    sigma1: self.slot_vec(inp.state, Slot::Sigma1),
                    eta1: self.slot_vec(inp.state, Slot::Eta1),
                    eta2: self.slot_vec(inp.state, Slot::Eta2),
                };
                let r = nonlinear_reference(p, v, &st, nb, t, inp.p0, &self.gains);
                let law = self.tracking.as_ref().expect("tracking law set for reference design");
                let gamma = law.gamma(p, v, &r.v_r, &r.dv_r, &self.gains);
                let drift = match &self.model {
                    AgentModel::Nonlinear { drift } => drift.eval(p, v),
                    _ => DVector::zeros(self.dim),
                };
                let e = v - &r.v_r;
                let de = drift + &gamma - &r.dv_r;
                lyapunov = Some((0.5 * e.norm_squared(), e.dot(&de)));
                parts.extend([
                    (Slot::Vhat, r.dvhat),
                    (Slot::Sigma1, r.dsigma1),
                    (Slot::Eta1, r.deta1),
                    (Slot::Eta2, r.deta2),
                ]);
                gamma
            }
            Variant::OscillatorFull | Variant::OscillatorOutput => {
                let AgentModel::Oscillator { s1, s2 } = &self.model else {
                    unreachable!("checked at construction")
                };
                let flow = self.flow.as_ref().expect("flow cache set for oscillator variants");
                let vhat = self.slot_vec(inp.state, Slot::Vhat);
                let sigma = self.slot_vec(inp.state, Slot::Sigma);
                let (psi1, psi2) = oscillator_psi(nb, t, flow, inp.p0, &vhat);
                if matches!(self.variant, Variant::OscillatorFull) {
                    let (gamma, dsigma, dvhat) = gamma_oscillator_full(p, v, &vhat, &sigma, &psi1, &psi2, &self.gains, s1, s2);
                    parts.extend([(Slot::Vhat, dvhat), (Slot::Sigma, dsigma)]);
                    gamma
                } else {
                    let phi = self.slot_vec(inp.state, Slot::Phi);
                    let (gamma, dsigma, dvhat, dphi) = gamma_oscillator_output(p, &phi, &vhat, &sigma, &psi1, &psi2, &self.gains, s1, s2);
                    parts.extend([(Slot::Vhat, dvhat), (Slot::Sigma, dsigma), (Slot::Phi, dphi)]);
                    gamma
                }
            }
        };
        let mut dstate = DVector::zeros(self.state_len());
        for (slot, d) in parts {
            let k = self.slots.iter().position(|&s| s == slot).expect("slot in layout");
            dstate.rows_mut(k * self.dim, self.dim).copy_from(&d);
        }
        Ok(ControlOutput { gamma, dstate, lyapunov })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Drift;
    use proptest::prelude::*;

    fn v2(a: f64, b: f64) -> Vector {
        DVector::from_vec(vec![a, b])
    }

    fn msg(send_time: f64, p: Vector, vhat: Vector) -> Message {
        let mut payload: Vec<f64> = p.iter().copied().collect();
        payload.extend(vhat.iter());
        Message {
            seq: 0,
            send_time,
            payload,
        }
    }

    #[test]
    fn vartheta_examples() {
        let m = msg(0.3, v2(1.0, 0.0), v2(2.0, 0.0));
        assert_eq!(vartheta(&m, 0.3, 2), v2(1.0, 0.0));
        assert_eq!(vartheta(&m, 0.8, 2), v2(2.0, 0.0));
        let still = msg(0.3, v2(1.0, -1.0), v2(0.0, 0.0));
        assert_eq!(vartheta(&still, 7.0, 2), v2(1.0, -1.0));
    }

    #[test]
    fn observer_examples() {
        let c = v2(0.4, -1.0);
        let a = msg(0.0, v2(0.0, 0.0), c.clone());
        let nb = Neighborhood::new(2, vec![(1.0, Some(&a)), (2.0, Some(&a))]);
        assert!(observer_vhat_deriv(&c, &nb, 3.0).amax() < 1e-15);

        let one = msg(0.0, v2(0.0, 0.0), v2(1.0, 0.0));
        let nb = Neighborhood::new(2, vec![(2.5, Some(&one))]);
        assert_eq!(observer_vhat_deriv(&v2(0.0, 0.0), &nb, 4.0), v2(4.0, 0.0));

        let x = msg(0.0, v2(0.0, 0.0), v2(1.0, 0.0));
        let y = msg(0.0, v2(0.0, 0.0), v2(0.0, 1.0));
        let nb = Neighborhood::new(2, vec![(1.0, Some(&x)), (3.0, Some(&y))]);
        let d = observer_vhat_deriv(&v2(0.0, 0.0), &nb, 2.0);
        assert!((d - v2(0.5, 1.5)).amax() < 1e-15);
    }

    #[test]
    fn warm_up_renormalizes_over_delivered_edges() {
        let x = msg(0.0, v2(2.0, 0.0), v2(0.0, 0.0));
        let nb = Neighborhood::new(2, vec![(1.0, Some(&x)), (5.0, None)]);
        assert_eq!(psi_static(&nb, 1.0, &v2(9.0, 9.0)), v2(2.0, 0.0));
        let empty = Neighborhood::new(2, vec![(1.0, None), (5.0, None)]);
        assert_eq!(psi_static(&empty, 1.0, &v2(9.0, 9.0)), v2(9.0, 9.0));
        assert_eq!(observer_vhat_deriv(&v2(1.0, 1.0), &empty, 4.0), v2(0.0, 0.0));
    }

    #[test]
    fn full_state_examples() {
        let g = GainSet::new(4.0, 4.0);
        let p = v2(0.3, 0.7);
        let v = v2(-1.0, 2.0);
        assert_eq!(gamma_full_state(&p, &v, &v, &p, &g), v2(0.0, 0.0));
        let gamma = gamma_full_state(&v2(0.0, 1.0), &v2(1.0, 0.0), &v2(0.0, 0.0), &v2(0.0, 0.0), &g);
        assert_eq!(gamma, v2(-4.0, -4.0));

        let a = msg(0.0, v2(1.0, 2.0), v2(0.0, 0.0));
        let nb = Neighborhood::new(2, vec![(1.0, Some(&a))]);
        let psi = psi_static(&nb, 0.5, &p);
        assert_eq!(psi_dynamic_deriv(&psi, &v2(0.0, 0.0), &nb, 0.5, 1.0, &p), v2(0.0, 0.0));
    }

    #[test]
    fn output_feedback_examples() {
        let g = GainSet::new(4.0, 4.0);
        let p = v2(0.5, -0.2);
        let v = v2(1.0, 0.3);
        let vhat = v2(0.9, 0.1);
        let psi = v2(0.0, 0.4);
        let phi = &v - &p;
        let (gamma, _) = gamma_output_feedback(&p, &phi, &vhat, &psi, &g);
        assert!((gamma - gamma_full_state(&p, &v, &vhat, &psi, &g)).amax() < 1e-15);

        let phi = &vhat - &p;
        let (gamma, dphi) = gamma_output_feedback(&p, &phi, &vhat, &p, &g);
        assert!(gamma.amax() < 1e-15);
        assert!((dphi + (&phi + &p)).amax() < 1e-15);
    }

    #[test]
    fn known_vd_examples() {
        let g = GainSet::new(4.0, 4.0);
        let vd = v2(1.0, 0.1);
        let p = v2(3.0, 3.0);
        assert_eq!(gamma_known_vd(&p, &vd, &vd, &p, &g), v2(0.0, 0.0));
        // converged observer gives the same input
        let v = v2(0.2, -0.4);
        let psi = v2(1.0, 1.0);
        let a = gamma_known_vd(&p, &v, &vd, &psi, &g);
        let b = gamma_full_state(&p, &v, &vd, &psi, &g);
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn nonlinear_reference_examples() {
        let mut g = GainSet::new(2.0, 2.0);
        g.lambda = Some(2.0);
        let p = v2(1.0, 0.0);
        let a = msg(0.0, v2(0.5, 0.5), v2(0.0, 0.0));
        let nb = Neighborhood::new(2, vec![(1.0, Some(&a))]);

        let st = NonlinearState {
            vhat: v2(0.3, 0.2),
            sigma1: v2(0.0, 0.0),
            eta1: p.clone(),
            eta2: p.clone(),
        };
        let r = nonlinear_reference(&p, &v2(0.0, 0.0), &st, &nb, 1.0, &p, &g);
        assert_eq!(r.v_r, st.vhat);

        let st = NonlinearState {
            vhat: v2(0.0, 0.0),
            sigma1: v2(0.0, 0.0),
            eta1: v2(0.5, 0.5),
            eta2: v2(0.5, 0.5),
        };
        let r = nonlinear_reference(&p, &v2(0.0, 0.0), &st, &nb, 1.0, &p, &g);
        assert_eq!(r.deta1, v2(0.0, 0.0));
        assert_eq!(r.deta2, v2(0.0, 0.0));

        let st = NonlinearState {
            vhat: v2(0.0, 1.0),
            sigma1: v2(0.0, 0.0),
            eta1: v2(0.0, 0.0),
            eta2: v2(0.0, 0.0),
        };
        let r = nonlinear_reference(&p, &v2(0.0, 0.0), &st, &nb, 1.0, &p, &g);
        assert_eq!(r.v_r, v2(-2.0, 1.0));
    }

    #[test]
    fn nonlinear_reference_derivative_matches_chain_rule() {
        // v̇_r from the evaluator equals the finite difference of v_r along
        // the exact flow of (p, η₁, v̂) when p moves at velocity v
        let mut g = GainSet::new(2.0, 2.0);
        g.lambda = Some(2.0);
        let a = msg(0.0, v2(0.5, -0.5), v2(0.2, 0.1));
        let nb = Neighborhood::new(2, vec![(1.0, Some(&a))]);
        let p = v2(1.0, 0.3);
        let v = v2(-0.4, 0.8);
        let st = NonlinearState {
            vhat: v2(0.3, 0.2),
            sigma1: v2(-0.1, 0.4),
            eta1: v2(0.2, 0.0),
            eta2: v2(0.6, 0.1),
        };
        let r = nonlinear_reference(&p, &v, &st, &nb, 1.0, &p, &g);
        let h = 1e-6;
        let st_h = NonlinearState {
            vhat: &st.vhat + &r.dvhat * h,
            sigma1: &st.sigma1 + &r.dsigma1 * h,
            eta1: &st.eta1 + &r.deta1 * h,
            eta2: &st.eta2 + &r.deta2 * h,
        };
        let r_h = nonlinear_reference(&(&p + &v * h), &v, &st_h, &nb, 1.0 + h, &p, &g);
        let fd = (r_h.v_r - &r.v_r) / h;
        assert!((fd - r.dv_r).amax() < 1e-5);
    }

    #[test]
    fn variable_structure_examples() {
        let g = GainSet::new(2.0, 2.0);
        let sq = GrowthBound::Power { coef: 1.0, exp: 2.0 };
        let v = v2(1.0, 2.0);
        let dv_r = v2(0.3, -0.1);
        let gamma = gamma_nonlinear_vs(&v, &v, &dv_r, &v2(0.0, 0.0), &g, GrowthBound::Zero, sq);
        assert_eq!(gamma, dv_r);

        let v_r = v2(-9.0, 2.0);
        let gamma = gamma_nonlinear_vs(&v, &v_r, &dv_r, &v2(0.0, 0.0), &g, GrowthBound::Zero, sq);
        let e = &v - &v_r;
        let gbar = -(gamma - e * -g.k_r - &dv_r);
        assert!((gbar.norm() - v.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn variable_structure_lyapunov_decay_pointwise() {
        // with the square drift, V̇ ≤ −2 k_r V outside the layer and the
        // excess inside is at most ε δ/4
        let mut g = GainSet::new(2.0, 2.0);
        g.lambda = Some(2.0);
        g.boundary_layer_eps = 1e-3;
        let drift = Drift::SquareVelocity;
        let (dp, dv) = drift.bounds();
        let dv_r = v2(0.2, 0.1);
        for k in 0..200 {
            let s = k as f64 * 0.037;
            let v = v2(s.sin() * 2.0, (1.3 * s).cos());
            let v_r = &v - v2((3.0 * s).cos(), s.sin()) * 10f64.powf(-(k % 6) as f64);
            let gamma = gamma_nonlinear_vs(&v, &v_r, &dv_r, &v2(0.0, 0.0), &g, dp, dv);
            let e = &v - &v_r;
            let vdot = e.dot(&(drift.eval(&v, &v) + &gamma - &dv_r));
            let vv = 0.5 * e.norm_squared();
            let slack = g.boundary_layer_eps * v.norm_squared() / 4.0 + 1e-12;
            assert!(vdot <= -2.0 * g.k_r * vv + slack, "k = {k}");
        }
    }

    fn harmonic() -> (DMatrix<f64>, DMatrix<f64>) {
        (-DMatrix::identity(2, 2), DMatrix::zeros(2, 2))
    }

    #[test]
    fn oscillator_examples() {
        let g = GainSet::new(4.0, 4.0);
        let (s1, s2) = harmonic();
        let p = v2(1.0, -1.0);
        let v = v2(0.5, 0.25);
        let (gamma, dsigma, _) = gamma_oscillator_full(&p, &v, &v, &v2(0.0, 0.0), &p, &v, &g, &s1, &s2);
        assert_eq!(gamma, v2(0.0, 0.0));
        assert_eq!(dsigma, v2(0.0, 0.0));

        // zero elapsed time: prediction is the raw payload
        let flow = FlowCache::new(crate::dynamics::oscillator_generator(&s1, &s2));
        let m = msg(2.0, v2(1.0, 2.0), v2(3.0, 4.0));
        let nb = Neighborhood::new(2, vec![(1.0, Some(&m))]);
        let (psi1, psi2) = oscillator_psi(&nb, 2.0, &flow, &p, &v);
        assert!((psi1 - v2(1.0, 2.0)).amax() < 1e-15);
        assert!((psi2 - v2(3.0, 4.0)).amax() < 1e-15);

        // with S1 = S2 = 0 the law differs from the double-integrator one
        let z = DMatrix::zeros(2, 2);
        let vhat = v2(0.1, 0.2);
        let psi1 = v2(0.0, 0.3);
        let sigma = v2(0.2, -0.3);
        let (gamma, _, _) = gamma_oscillator_full(&p, &v, &vhat, &sigma, &psi1, &v2(0.0, 0.0), &g, &z, &z);
        let di = gamma_full_state(&p, &v, &vhat, &psi1, &g);
        assert!((gamma - di).amax() > 1e-3);
    }

    #[test]
    fn oscillator_output_matches_full_when_filter_converged() {
        let mut g = GainSet::new(4.0, 4.0);
        g.k_phi = 2.0;
        let s1 = DMatrix::from_diagonal(&v2(-1.0, -4.0));
        let s2 = DMatrix::zeros(2, 2);
        let p = v2(0.3, -0.6);
        let v = v2(1.0, 0.2);
        let phi = &v / g.k_phi - &p;
        let vhat = v2(0.4, 0.4);
        let sigma = v2(-0.1, 0.2);
        let psi1 = v2(0.0, 1.0);
        let psi2 = v2(1.0, 0.0);
        let full = gamma_oscillator_full(&p, &v, &vhat, &sigma, &psi1, &psi2, &g, &s1, &s2);
        let out = gamma_oscillator_output(&p, &phi, &vhat, &sigma, &psi1, &psi2, &g, &s1, &s2);
        assert!((full.0 - out.0).amax() < 1e-12);
        assert!((full.1 - out.1).amax() < 1e-12);
        assert!((full.2 - out.2).amax() < 1e-12);
    }

    #[test]
    fn oscillator_output_filter_error_dynamics() {
        // φ̃ = φ + p − v/k_φ obeys φ̃̇ = −(k_φ I − S2) φ̃ for any state
        let mut g = GainSet::new(4.0, 5.0);
        g.k_phi = 1.5;
        let s1 = DMatrix::from_diagonal(&v2(-1.0, -4.0));
        let s2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, -0.5, 0.0]);
        let p = v2(0.3, -0.6);
        let v = v2(1.0, 0.2);
        let phi = v2(-0.7, 0.9);
        let vhat = v2(0.4, 0.4);
        let sigma = v2(-0.1, 0.2);
        let (gamma, _, _, dphi) = gamma_oscillator_output(&p, &phi, &vhat, &sigma, &v2(0.0, 1.0), &v2(1.0, 0.0), &g, &s1, &s2);
        let dv = &s1 * &p + &s2 * &v + &gamma;
        let dtilde = dphi + &v - dv / g.k_phi;
        let tilde = &phi + &p - &v / g.k_phi;
        let expected = -(DMatrix::identity(2, 2) * g.k_phi - &s2) * tilde;
        assert!((dtilde - expected).amax() < 1e-12);
    }

    #[test]
    fn check_gains_examples() {
        let fs = Variant::FullState {
            psi: PsiMode::Static,
            known_vd: None,
        };
        assert!(check_gains(&fs, &GainSet::new(4.0, 4.0), None).pass);
        let r = check_gains(&fs, &GainSet::new(4.0, 1.0), None);
        assert!(!r.pass);
        assert!(r.diagnostics[0].contains("real-roots condition"));
        assert!(check_gains(&fs, &GainSet::new(1.0, 2.5), None).pass);
        let (lo, hi) = real_root_rates(1.0, 2.5).unwrap();
        assert!((lo - 0.5).abs() < 1e-15 && (hi - 2.0).abs() < 1e-15);
        assert_eq!(real_root_rates(4.0, 4.0), Some((2.0, 2.0)));

        let zero_s2 = DMatrix::zeros(2, 2);
        assert!(check_gains(&Variant::OscillatorOutput, &GainSet::new(4.0, 4.0), Some(&zero_s2)).pass);
        let mut bad = GainSet::new(4.0, 4.0);
        bad.k_phi = 1.0;
        let s2 = DMatrix::identity(2, 2) * 2.0;
        assert!(!check_gains(&Variant::OscillatorOutput, &bad, Some(&s2)).pass);
        bad.k_p = -1.0;
        assert!(!check_gains(&fs, &bad, None).pass);
    }

    #[test]
    fn controller_state_layout_round_trips() {
        let variants = [
            Variant::FullState {
                psi: PsiMode::Dynamic,
                known_vd: None,
            },
            Variant::OutputFeedback {
                psi: PsiMode::Dynamic,
                known_vd: Some(vec![1.0, 0.1]),
            },
            Variant::NonlinearRef,
        ];
        for variant in variants {
            let json = serde_json::to_string(&variant).unwrap();
            let back: Variant = serde_json::from_str(&json).unwrap();
            assert_eq!(back, variant);
        }
        let mut g = GainSet::new(2.0, 2.0);
        g.lambda = Some(2.0);
        let c = Controller::new(
            Variant::NonlinearRef,
            g,
            AgentModel::Nonlinear {
                drift: Drift::SquareVelocity,
            },
            2,
        )
        .unwrap();
        assert_eq!(c.slots(), &[Slot::Vhat, Slot::Sigma1, Slot::Eta1, Slot::Eta2]);
        let x0 = c.initial_state(&v2(1.0, 2.0));
        assert_eq!(x0.as_slice(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(c.slot(x0.as_slice(), Slot::Eta2), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn controller_rejects_model_mismatch_and_bad_gains() {
        let err = Controller::new(Variant::OscillatorFull, GainSet::new(4.0, 4.0), AgentModel::DoubleIntegrator, 2).unwrap_err();
        assert!(matches!(err, ControlError::ModelMismatch { .. }));
        let fs = Variant::FullState {
            psi: PsiMode::Static,
            known_vd: None,
        };
        let err = Controller::new(fs, GainSet::new(4.0, 1.0), AgentModel::DoubleIntegrator, 2).unwrap_err();
        assert!(matches!(err, ControlError::Gains(_)));
    }

    fn linear_controllers() -> Vec<Controller> {
        let (s1, s2) = harmonic();
        let osc = AgentModel::oscillator(s1, s2).unwrap();
        let mut out = Vec::new();
        for psi in [PsiMode::Static, PsiMode::Dynamic] {
            out.push(
                Controller::new(
                    Variant::FullState { psi, known_vd: None },
                    GainSet::new(4.0, 4.0),
                    AgentModel::DoubleIntegrator,
                    2,
                )
                .unwrap(),
            );
            out.push(
                Controller::new(
                    Variant::OutputFeedback { psi, known_vd: None },
                    GainSet::new(4.0, 4.0),
                    AgentModel::DoubleIntegrator,
                    2,
                )
                .unwrap(),
            );
        }
        out.push(Controller::new(Variant::OscillatorFull, GainSet::new(4.0, 4.0), osc.clone(), 2).unwrap());
        out.push(Controller::new(Variant::OscillatorOutput, GainSet::new(4.0, 4.0), osc, 2).unwrap());
        out
    }

    proptest! {
        #[test]
        fn real_roots_pass_iff_discriminant_nonnegative(k_p in 0.01f64..20.0, k_d in 0.01f64..20.0) {
            let fs = Variant::FullState { psi: PsiMode::Static, known_vd: None };
            let pass = check_gains(&fs, &GainSet::new(k_p, k_d), None).pass;
            prop_assert_eq!(pass, k_d * k_d - 4.0 * k_p >= 0.0);
            if let Some((lo, hi)) = real_root_rates(k_p, k_d) {
                prop_assert!((lo + hi - k_d).abs() < 1e-9 * k_d.max(1.0));
                prop_assert!((hi + k_p / hi - k_d).abs() < 1e-9 * k_d.max(1.0));
            }
        }

        #[test]
        fn linear_variants_superpose_in_payload(
            xs in prop::collection::vec(-3.0f64..3.0, 8),
            ys in prop::collection::vec(-3.0f64..3.0, 8),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            state_seed in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let p = v2(0.4, -0.2);
            let v = v2(0.1, 0.3);
            let p0 = v2(0.0, 0.0);
            let t = 1.25;
            let mk = |vals: &[f64]| -> [Message; 2] {
                [
                    Message { seq: 3, send_time: 1.0, payload: vals[..4].to_vec() },
                    Message { seq: 2, send_time: 0.9, payload: vals[4..].to_vec() },
                ]
            };
            let zero = vec![0.0; 8];
            let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            for c in linear_controllers() {
                let state = &state_seed[..c.state_len()];
                let eval = |vals: &[f64]| {
                    let msgs = mk(vals);
                    let nb = Neighborhood::new(2, vec![(1.0, Some(&msgs[0])), (2.0, Some(&msgs[1]))]);
                    let out = c.eval(&ControlInput { t, p: &p, v: &v, p0: &p0, state, neighbors: &nb }).unwrap();
                    let mut all: Vec<f64> = out.gamma.iter().copied().collect();
                    all.extend(out.dstate.iter());
                    DVector::from_vec(all)
                };
                let f0 = eval(&zero);
                let lhs = eval(&combo) - &f0;
                let rhs = (eval(&xs) - &f0) * a + (eval(&ys) - &f0) * b;
                prop_assert!((lhs - rhs).amax() < 1e-9, "{}", c.variant().name());
            }
        }
    }
}
