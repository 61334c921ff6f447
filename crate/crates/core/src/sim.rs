//! Fixed-step closed-loop simulation and containment metrics.
//!
//! Each step runs in a fixed order: payloads are captured for sends due at
//! the step start, scheduled arrivals are applied, the sample is recorded,
//! and one classical RK4 step integrates with the mailbox snapshot frozen.

use std::fmt::Write as _;
use std::thread;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::comm::{self, CommConfig, CommError, Delivery, Edge, LinkSchedule, Mailboxes, Message};
use crate::control::{ControlError, ControlInput, Controller, GainSet, Neighborhood, Variant};
use crate::dynamics::{follower_rhs, AgentModel, DynamicsError, LeaderTrajectory};
use crate::topology::{self, DirectedTopology, TopologyError};

/// States with a component above this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e9;
const GRID_TOL: f64 = 1e-9;
const FW_TOL: f64 = 1e-8;
const FW_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step dt = {dt} must divide the sampling period T = {period}")]
    DtNotDivisor { dt: f64, period: f64 },
    #[error("step dt = {dt} exceeds T/10 = {limit}")]
    DtTooCoarse { dt: f64, limit: f64 },
    #[error("delay quantum {quantum} is not a multiple of dt = {dt}")]
    QuantumNotMultiple { quantum: f64, dt: f64 },
    #[error("horizon t_end = {0} must be positive and finite")]
    BadHorizon(f64),
    #[error("scenario lists {got} agents, topology has {expected}")]
    AgentCount { expected: usize, got: usize },
    #[error("agent {agent}: {what} has dimension {got}, expected {expected}")]
    Dimension {
        agent: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("follower {0} has no controller")]
    MissingController(usize),
    #[error("leader {0} has no trajectory")]
    MissingTrajectory(usize),
    #[error("agent {agent}: {source}")]
    Controller {
        agent: usize,
        #[source]
        source: ControlError,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("topology violates the leader-reachability condition for followers {0:?}")]
    Unreachable(Vec<usize>),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("state of agent {agent} diverged at t = {t}")]
    Divergence { t: f64, agent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Follower,
    Leader,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Follower => "follower",
            Self::Leader => "leader",
        }
    }
}

/// Per-agent part of a scenario.
#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub model: AgentModel,
    pub p0: Vec<f64>,
    /// Follower initial velocity, zero when absent; leaders take theirs
    /// from the trajectory.
    pub v0: Option<Vec<f64>>,
    pub trajectory: Option<LeaderTrajectory>,
    pub controller: Option<(Variant, GainSet)>,
    /// Overrides the controller's default initial internal state.
    pub controller_init: Option<Vec<f64>>,
}

/// Everything that determines a run apart from the seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: DirectedTopology,
    pub agents: Vec<AgentSetup>,
    pub comm: CommConfig,
    /// Delays are rounded to multiples of this.
    pub delay_quantum: f64,
    pub dt: f64,
    pub t_end: f64,
    pub dim: usize,
}

fn is_multiple(x: f64, unit: f64) -> bool {
    let r = x / unit;
    (r - r.round()).abs() < GRID_TOL * r.abs().max(1.0)
}

impl Scenario {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt + GRID_TOL).floor() as usize
    }

    pub fn steps_per_period(&self) -> usize {
        (self.comm.period / self.dt).round() as usize
    }

    /// Step-size, grid and agent-count invariants.
    pub fn validate(&self) -> Result<(), SimError> {
        self.comm.validate()?;
        let (dt, period) = (self.dt, self.comm.period);
        if !(dt.is_finite() && dt > 0.0) || !is_multiple(period, dt) {
            return Err(SimError::DtNotDivisor { dt, period });
        }
        if dt > period / 10.0 * (1.0 + GRID_TOL) {
            return Err(SimError::DtTooCoarse { dt, limit: period / 10.0 });
        }
        if self.delay_quantum > 0.0 && !is_multiple(self.delay_quantum, dt) {
            return Err(SimError::QuantumNotMultiple {
                quantum: self.delay_quantum,
                dt,
            });
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(SimError::BadHorizon(self.t_end));
        }
        let n = self.topology.n();
        if self.agents.len() != n {
            return Err(SimError::AgentCount {
                expected: n,
                got: self.agents.len(),
            });
        }
        let reach = topology::validate_assumption1(&self.topology);
        if !reach.satisfied {
            return Err(SimError::Unreachable(reach.unreachable));
        }
        for (i, a) in self.agents.iter().enumerate() {
            let check = |what, got: usize| {
                if got == self.dim {
                    Ok(())
                } else {
                    Err(SimError::Dimension {
                        agent: i,
                        what,
                        expected: self.dim,
                        got,
                    })
                }
            };
            check("initial position", a.p0.len())?;
            if let Some(v0) = &a.v0 {
                check("initial velocity", v0.len())?;
            }
            if let AgentModel::Oscillator { s1, .. } = &a.model {
                check("oscillator matrix", s1.nrows())?;
            }
            if self.topology.is_leader(i) {
                let traj = a.trajectory.as_ref().ok_or(SimError::MissingTrajectory(i))?;
                if let Some(d) = traj.dimension_hint() {
                    check("leader trajectory", d)?;
                }
            } else if a.controller.is_none() {
                return Err(SimError::MissingController(i));
            }
        }
        Ok(())
    }
}

/// Per-edge schedules, captured payloads and mailboxes for one run.
#[derive(Debug, Clone)]
pub struct CommFabric {
    schedules: Vec<LinkSchedule>,
    weights: Vec<f64>,
    mailboxes: Mailboxes,
    /// `(tick, arrival_time, edge index, seq)` sorted by delivery order.
    arrivals: Vec<(usize, f64, usize, u64)>,
    cursor: usize,
    /// Captured payloads indexed by sender then sequence number.
    payloads: Vec<Vec<Vec<f64>>>,
    senders: Vec<bool>,
    /// Incoming edge indices per receiver.
    inbound: Vec<Vec<usize>>,
    steps_per_period: usize,
    audit: Vec<Delivery>,
}

impl CommFabric {
    pub fn new(topo: &DirectedTopology, cfg: &CommConfig, quantum: f64, dt: f64, t_end: f64) -> Result<Self, SimError> {
        let n = topo.n();
        let mut edges = Vec::new();
        let mut weights = Vec::new();
        let mut schedules = Vec::new();
        let mut senders = vec![false; n];
        let mut inbound = vec![Vec::new(); n];
        for (from, to, w) in topo.edges() {
            let edge = Edge::new(from, to);
            inbound[to].push(edges.len());
            senders[from] = true;
            schedules.push(comm::generate_schedule(edge, cfg, t_end, quantum)?);
            edges.push(edge);
            weights.push(w);
        }
        let mut arrivals = Vec::new();
        for (idx, sched) in schedules.iter().enumerate() {
            for e in &sched.events {
                if let Some(at) = e.arrival() {
                    let tick = (at / dt - GRID_TOL).ceil().max(0.0) as usize;
                    arrivals.push((tick, at, idx, e.seq));
                }
            }
        }
        arrivals.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.3.cmp(&b.3)).then(a.2.cmp(&b.2)));
        Ok(Self {
            schedules,
            weights,
            mailboxes: Mailboxes::new(edges),
            arrivals,
            cursor: 0,
            payloads: vec![Vec::new(); n],
            senders,
            inbound,
            steps_per_period: (cfg.period / dt).round() as usize,
            audit: Vec::new(),
        })
    }

    pub fn schedules(&self) -> &[LinkSchedule] {
        &self.schedules
    }

    pub fn audit(&self) -> &[Delivery] {
        &self.audit
    }

    pub fn latest_seqs(&self) -> Vec<Option<u64>> {
        self.mailboxes.latest_seqs()
    }

    /// Stores the payload of every sender when `step` is a send tick.
    pub fn capture<F>(&mut self, step: usize, mut payload: F)
    where
        F: FnMut(usize) -> Vec<f64>,
    {
        if !step.is_multiple_of(self.steps_per_period) {
            return;
        }
        for (agent, store) in self.payloads.iter_mut().enumerate() {
            if self.senders[agent] {
                store.push(payload(agent));
            }
        }
    }

    /// Applies all arrivals due at `step`.
    pub fn deliver(&mut self, step: usize) -> Result<(), SimError> {
        while let Some(&(tick, at, idx, seq)) = self.arrivals.get(self.cursor) {
            if tick > step {
                break;
            }
            self.cursor += 1;
            let edge = self.mailboxes.edges()[idx];
            let payload = self.payloads[edge.from]
                .get(seq as usize)
                .cloned()
                .ok_or(CommError::MissingPayload { agent: edge.from, seq })?;
            let send_time = self.schedules[idx].events[seq as usize].send_time;
            let accepted = self.mailboxes.get_mut(idx).offer(Message { seq, send_time, payload });
            self.audit.push(Delivery {
                edge,
                seq,
                send_time,
                arrival_time: at,
                accepted,
            });
        }
        Ok(())
    }

    /// Latest message on every in-edge of `agent`.
    pub fn neighborhood(&self, agent: usize, dim: usize) -> Neighborhood<'_> {
        let entries = self.inbound[agent]
            .iter()
            .map(|&idx| (self.weights[idx], self.mailboxes.get(idx).latest()))
            .collect();
        Neighborhood::new(dim, entries)
    }
}

/// Time-indexed record of a run. Per-sample arrays are flattened as
/// `[sample][agent][component]`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub dim: usize,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub seed: u64,
    pub weights: DMatrix<f64>,
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    /// Broadcast velocity estimates (true velocity for leaders).
    pub vhats: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Controller internals, `[sample][ctrl_offsets[i]..ctrl_offsets[i+1]]`.
    pub controller_states: Vec<f64>,
    pub ctrl_offsets: Vec<usize>,
    /// Norms of the stacked errors `x_F − (W ⊗ I) x_L`.
    pub pos_error: Vec<f64>,
    pub vel_error: Vec<f64>,
    pub vhat_error: Vec<f64>,
    /// Per-follower position error norm, `[sample][follower]`.
    pub follower_error: Vec<f64>,
    /// Per-follower distance to the leaders' convex hull.
    pub hull_dist: Vec<f64>,
    /// `(V, V̇)` per follower where the controller reports one.
    pub lyapunov: Vec<Option<(f64, f64)>>,
    pub audit: Vec<Delivery>,
    pub schedules: Vec<LinkSchedule>,
    /// Latest accepted sequence number per edge at each sample.
    pub latest_seqs: Vec<Vec<Option<u64>>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn at<'a>(&self, data: &'a [f64], sample: usize, agent: usize) -> &'a [f64] {
        let base = (sample * self.n + agent) * self.dim;
        &data[base..base + self.dim]
    }

    pub fn p(&self, sample: usize, agent: usize) -> &[f64] {
        self.at(&self.positions, sample, agent)
    }

    pub fn v(&self, sample: usize, agent: usize) -> &[f64] {
        self.at(&self.velocities, sample, agent)
    }

    pub fn vhat(&self, sample: usize, agent: usize) -> &[f64] {
        self.at(&self.vhats, sample, agent)
    }

    pub fn gamma(&self, sample: usize, agent: usize) -> &[f64] {
        self.at(&self.gammas, sample, agent)
    }

    pub fn controller_state(&self, sample: usize, agent: usize) -> &[f64] {
        let width = self.ctrl_offsets[self.n];
        let base = sample * width;
        &self.controller_states[base + self.ctrl_offsets[agent]..base + self.ctrl_offsets[agent + 1]]
    }

    pub fn follower_error(&self, sample: usize, follower: usize) -> f64 {
        self.follower_error[sample * self.m + follower]
    }

    pub fn hull_distance(&self, sample: usize, follower: usize) -> f64 {
        self.hull_dist[sample * self.m + follower]
    }

    /// Index of the grid sample at time `t`, if `t` is on the grid.
    pub fn sample_at(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || (k * self.dt - t).abs() > 1e-9 * t.abs().max(1.0) {
            return None;
        }
        let k = k as usize;
        (k < self.len()).then_some(k)
    }

    pub fn last(&self) -> usize {
        self.len() - 1
    }

    pub fn leader_positions(&self, sample: usize) -> Vec<Vec<f64>> {
        (self.m..self.n).map(|j| self.p(sample, j).to_vec()).collect()
    }

    /// CSV with one row per sample and agent; agent ids are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,agent_id,role");
        for k in 1..=self.dim {
            let _ = write!(out, ",p_{k}");
        }
        for k in 1..=self.dim {
            let _ = write!(out, ",v_{k}");
        }
        out.push_str(",err_norm,hull_dist\n");
        for s in 0..self.len() {
            for i in 0..self.n {
                let leader = i >= self.m;
                let role = if leader { Role::Leader } else { Role::Follower };
                let _ = write!(out, "{},{},{}", self.times[s], i + 1, role.as_str());
                for x in self.p(s, i).iter().chain(self.v(s, i)) {
                    let _ = write!(out, ",{x}");
                }
                let (err, hull) = if leader {
                    (0.0, 0.0)
                } else {
                    (self.follower_error(s, i), self.hull_distance(s, i))
                };
                let _ = writeln!(out, ",{err},{hull}");
            }
        }
        out
    }

    /// Accepted deliveries as CSV with 1-based agent ids.
    pub fn audit_csv(&self) -> String {
        let mut out = String::from("edge,seq,send_time,arrival_time,accepted\n");
        for d in &self.audit {
            let _ = writeln!(
                out,
                "{}->{},{},{},{},{}",
                d.edge.from + 1,
                d.edge.to + 1,
                d.seq,
                d.send_time,
                d.arrival_time,
                d.accepted
            );
        }
        out
    }
}

/// Stacked error `x_F − (W ⊗ I) x_L` for a flattened `[agent][component]`
/// vector.
fn stacked_error(weights: &DMatrix<f64>, x: &[f64], m: usize, dim: usize) -> Vec<f64> {
    let leaders = weights.ncols();
    let mut out = x[..m * dim].to_vec();
    for i in 0..m {
        for k in 0..leaders {
            let w = weights[(i, k)];
            for d in 0..dim {
                out[i * dim + d] -= w * x[(m + k) * dim + d];
            }
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Stacked position containment error `p_F + (L1⁻¹L2 ⊗ I) p_L` at grid
/// time `t`, with its norm.
pub fn containment_error(trace: &Trace, t: f64) -> Option<(DVector<f64>, f64)> {
    let s = trace.sample_at(t)?;
    let base = s * trace.n * trace.dim;
    let e = stacked_error(
        &trace.weights,
        &trace.positions[base..base + trace.n * trace.dim],
        trace.m,
        trace.dim,
    );
    let nrm = norm(&e);
    Some((DVector::from_vec(e), nrm))
}

struct Agent {
    role: Role,
    model: AgentModel,
    p0: DVector<f64>,
    trajectory: Option<LeaderTrajectory>,
    controller: Option<Controller>,
    /// Offset of this agent's `[p, v, ctrl]` block in the global state.
    offset: usize,
    ctrl_len: usize,
}

struct Evaluation {
    deriv: Vec<f64>,
    gammas: Vec<f64>,
    lyapunov: Vec<Option<(f64, f64)>>,
}

fn evaluate(agents: &[Agent], fabric: &CommFabric, dim: usize, t: f64, x: &[f64]) -> Result<Evaluation, SimError> {
    let mut deriv = vec![0.0; x.len()];
    let mut gammas = vec![0.0; agents.len() * dim];
    let mut lyapunov = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        let o = a.offset;
        let p = DVector::from_column_slice(&x[o..o + dim]);
        let v = DVector::from_column_slice(&x[o + dim..o + 2 * dim]);
        let gamma = match a.role {
            Role::Leader => a.trajectory.as_ref().expect("validated").input(t, dim),
            Role::Follower => {
                let ctrl = a.controller.as_ref().expect("validated");
                let nb = fabric.neighborhood(i, dim);
                let state = &x[o + 2 * dim..o + 2 * dim + a.ctrl_len];
                let out = ctrl
                    .eval(&ControlInput {
                        t,
                        p: &p,
                        v: &v,
                        p0: &a.p0,
                        state,
                        neighbors: &nb,
                    })
                    .map_err(|source| SimError::Controller { agent: i, source })?;
                deriv[o + 2 * dim..o + 2 * dim + a.ctrl_len].copy_from_slice(out.dstate.as_slice());
                lyapunov.push(out.lyapunov);
                out.gamma
            }
        };
        let (dp, dv) = follower_rhs(&a.model, &p, &v, &gamma)?;
        deriv[o..o + dim].copy_from_slice(dp.as_slice());
        deriv[o + dim..o + 2 * dim].copy_from_slice(dv.as_slice());
        gammas[i * dim..(i + 1) * dim].copy_from_slice(gamma.as_slice());
    }
    Ok(Evaluation { deriv, gammas, lyapunov })
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Runs the closed loop. `seed` replaces the communication seed.
pub fn run(scenario: &Scenario, seed: u64) -> Result<Trace, SimError> {
    scenario.validate()?;
    let dim = scenario.dim;
    let topo = &scenario.topology;
    let (n, m) = (topo.n(), topo.m());
    let part = topology::partition(topo)?;
    let weights = topology::containment_weights(&part)?;
    let wmat = weights.matrix().clone();

    let mut agents = Vec::with_capacity(n);
    let mut x0 = Vec::new();
    let mut ctrl_offsets = vec![0];
    for (i, a) in scenario.agents.iter().enumerate() {
        let p0 = DVector::from_column_slice(&a.p0);
        let offset = x0.len();
        x0.extend_from_slice(&a.p0);
        let (role, controller, v0) = if topo.is_leader(i) {
            let traj = a.trajectory.as_ref().expect("validated");
            (Role::Leader, None, traj.initial_velocity(dim))
        } else {
            let (variant, gains) = a.controller.clone().expect("validated");
            let ctrl = Controller::new(variant, gains, a.model.clone(), dim).map_err(|source| SimError::Controller { agent: i, source })?;
            let v0 = a.v0.as_ref().map_or_else(|| DVector::zeros(dim), |v| DVector::from_column_slice(v));
            (Role::Follower, Some(ctrl), v0)
        };
        x0.extend(v0.iter());
        let ctrl_len = controller.as_ref().map_or(0, Controller::state_len);
        if let Some(ctrl) = &controller {
            let init = match &a.controller_init {
                Some(init) if init.len() == ctrl_len => DVector::from_column_slice(init),
                Some(init) => {
                    return Err(SimError::Controller {
                        agent: i,
                        source: ControlError::StateLength {
                            expected: ctrl_len,
                            got: init.len(),
                        },
                    })
                }
                None => ctrl.initial_state(&p0),
            };
            x0.extend(init.iter());
        }
        ctrl_offsets.push(ctrl_offsets[i] + ctrl_len);
        agents.push(Agent {
            role,
            model: a.model.clone(),
            p0,
            trajectory: a.trajectory.clone(),
            controller,
            offset,
            ctrl_len,
        });
    }

    let mut comm_cfg = scenario.comm;
    comm_cfg.seed = seed;
    let mut fabric = CommFabric::new(topo, &comm_cfg, scenario.delay_quantum, scenario.dt, scenario.t_end)?;

    let steps = scenario.steps();
    let samples = steps + 1;
    let mut trace = Trace {
        dim,
        n,
        m,
        dt: scenario.dt,
        seed,
        weights: wmat.clone(),
        times: Vec::with_capacity(samples),
        positions: Vec::with_capacity(samples * n * dim),
        velocities: Vec::with_capacity(samples * n * dim),
        vhats: Vec::with_capacity(samples * n * dim),
        gammas: Vec::with_capacity(samples * n * dim),
        controller_states: Vec::with_capacity(samples * ctrl_offsets[n]),
        ctrl_offsets,
        pos_error: Vec::with_capacity(samples),
        vel_error: Vec::with_capacity(samples),
        vhat_error: Vec::with_capacity(samples),
        follower_error: Vec::with_capacity(samples * m),
        hull_dist: Vec::with_capacity(samples * m),
        lyapunov: Vec::with_capacity(samples * m),
        audit: Vec::new(),
        schedules: Vec::new(),
        latest_seqs: Vec::with_capacity(samples),
    };

    let broadcast_vhat = |agents: &[Agent], x: &[f64], i: usize| -> Vec<f64> {
        let a = &agents[i];
        let o = a.offset;
        match &a.controller {
            Some(c) => c.vhat(&x[o + 2 * dim..o + 2 * dim + a.ctrl_len]).as_slice().to_vec(),
            None => x[o + dim..o + 2 * dim].to_vec(),
        }
    };

    let dt = scenario.dt;
    let mut x = x0;
    for step in 0..=steps {
        let t = step as f64 * dt;
        fabric.capture(step, |i| {
            let o = agents[i].offset;
            let mut payload = x[o..o + dim].to_vec();
            payload.extend(broadcast_vhat(&agents, &x, i));
            payload
        });
        fabric.deliver(step)?;

        let eval = evaluate(&agents, &fabric, dim, t, &x)?;
        let mut ps = Vec::with_capacity(n * dim);
        let mut vs = Vec::with_capacity(n * dim);
        let mut vh = Vec::with_capacity(n * dim);
        for (i, a) in agents.iter().enumerate() {
            let o = a.offset;
            ps.extend_from_slice(&x[o..o + dim]);
            vs.extend_from_slice(&x[o + dim..o + 2 * dim]);
            vh.extend(broadcast_vhat(&agents, &x, i));
            trace.controller_states.extend_from_slice(&x[o + 2 * dim..o + 2 * dim + a.ctrl_len]);
        }
        let pe = stacked_error(&wmat, &ps, m, dim);
        trace.pos_error.push(norm(&pe));
        trace.vel_error.push(norm(&stacked_error(&wmat, &vs, m, dim)));
        trace.vhat_error.push(norm(&stacked_error(&wmat, &vh, m, dim)));
        let leaders: Vec<Vec<f64>> = (m..n).map(|j| ps[j * dim..(j + 1) * dim].to_vec()).collect();
        for i in 0..m {
            trace.follower_error.push(norm(&pe[i * dim..(i + 1) * dim]));
            trace.hull_dist.push(hull_distance(&ps[i * dim..(i + 1) * dim], &leaders));
        }
        trace.lyapunov.extend(eval.lyapunov.iter().copied());
        trace.times.push(t);
        trace.positions.extend(ps);
        trace.velocities.extend(vs);
        trace.vhats.extend(vh);
        trace.gammas.extend_from_slice(&eval.gammas);
        trace.latest_seqs.push(fabric.latest_seqs());

        if step == steps {
            break;
        }
        let k1 = eval.deriv;
        let k2 = evaluate(&agents, &fabric, dim, t + dt / 2.0, &axpy(&x, dt / 2.0, &k1))?.deriv;
        let k3 = evaluate(&agents, &fabric, dim, t + dt / 2.0, &axpy(&x, dt / 2.0, &k2))?.deriv;
        let k4 = evaluate(&agents, &fabric, dim, t + dt, &axpy(&x, dt, &k3))?.deriv;
        for (idx, xi) in x.iter_mut().enumerate() {
            *xi += dt / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            let agent = agents.iter().rposition(|a| a.offset <= bad).unwrap_or(0);
            return Err(SimError::Divergence { t: t + dt, agent });
        }
    }
    trace.audit = fabric.audit().to_vec();
    trace.schedules = fabric.schedules().to_vec();
    Ok(trace)
}

/// Runs independent `(scenario, seed)` jobs on all available cores,
/// returning results in input order.
pub fn run_many(jobs: &[(Scenario, u64)]) -> Vec<Result<Trace, SimError>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let mut results: Vec<Option<Result<Trace, SimError>>> = (0..jobs.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let chunk = jobs.len().div_ceil(workers).max(1);
        for (job_chunk, out_chunk) in jobs.chunks(chunk).zip(results.chunks_mut(chunk)) {
            scope.spawn(move || {
                for ((scenario, seed), slot) in job_chunk.iter().zip(out_chunk.iter_mut()) {
                    *slot = Some(run(scenario, *seed));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}

fn cross(o: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull of planar points, counter-clockwise without collinear points.
pub fn convex_hull_2d(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p.clone());
        }
        hull.pop();
    }
    hull
}

fn segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let len2: f64 = d.iter().map(|v| v * v).sum();
    let s = if len2 > 0.0 {
        (p.iter().zip(a).zip(&d).map(|((pi, ai), di)| (pi - ai) * di).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.iter()
        .zip(a)
        .zip(&d)
        .map(|((pi, ai), di)| (pi - ai - s * di).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn hull_distance_2d(p: &[f64], leaders: &[Vec<f64>]) -> f64 {
    let hull = convex_hull_2d(leaders);
    match hull.len() {
        1 => segment_distance(p, &hull[0], &hull[0]),
        2 => segment_distance(p, &hull[0], &hull[1]),
        k => {
            let inside = (0..k).all(|i| cross(&hull[i], &hull[(i + 1) % k], p) >= 0.0);
            if inside {
                return 0.0;
            }
            (0..k)
                .map(|i| segment_distance(p, &hull[i], &hull[(i + 1) % k]))
                .fold(f64::INFINITY, f64::min)
        }
    }
}

/// Fully corrective conditional gradient (Wolfe's minimum-norm point) on
/// the leader points shifted by `-p`.
fn hull_distance_fw(p: &[f64], leaders: &[Vec<f64>]) -> f64 {
    let q: Vec<Vec<f64>> = leaders.iter().map(|x| x.iter().zip(p).map(|(a, b)| a - b).collect()).collect();
    let start = (0..q.len())
        .min_by(|&a, &b| dot(&q[a], &q[a]).total_cmp(&dot(&q[b], &q[b])))
        .expect("at least one leader");
    let mut active = vec![start];
    let mut lambda = vec![1.0];
    let mut x = q[start].clone();
    let combine = |active: &[usize], w: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; p.len()];
        for (&j, &wj) in active.iter().zip(w) {
            for (yc, qc) in y.iter_mut().zip(&q[j]) {
                *yc += wj * qc;
            }
        }
        y
    };
    for _ in 0..FW_MAX_ITER {
        let xx = dot(&x, &x);
        let (j, xq) = (0..q.len())
            .map(|j| (j, dot(&x, &q[j])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        if xx - xq <= FW_TOL || active.contains(&j) {
            break;
        }
        active.push(j);
        lambda.push(0.0);
        loop {
            let Some(mu) = affine_minimizer(&q, &active) else {
                return dot(&x, &x).sqrt();
            };
            if mu.iter().all(|&v| v > 1e-14) {
                lambda = mu;
                x = combine(&active, &lambda);
                break;
            }
            let theta = lambda
                .iter()
                .zip(&mu)
                .filter(|(_, &m)| m <= 1e-14)
                .map(|(&l, &m)| l / (l - m))
                .fold(1.0, f64::min);
            for (l, m) in lambda.iter_mut().zip(&mu) {
                *l = theta * m + (1.0 - theta) * *l;
            }
            let keep: Vec<bool> = lambda.iter().map(|&l| l > 1e-14).collect();
            let mut k = 0;
            active.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            lambda.retain(|&l| l > 1e-14);
            let total: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= total);
            x = combine(&active, &lambda);
        }
    }
    dot(&x, &x).sqrt()
}

/// Weights `μ` with `Σ μ = 1` minimising `|Σ μ_i q_i|` over the active set.
fn affine_minimizer(q: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let k = active.len();
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    for a in 0..k {
        for b in 0..k {
            kkt[(a, b)] = dot(&q[active[a]], &q[active[b]]);
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    let mu: Vec<f64> = sol.iter().take(k).copied().collect();
    mu.iter().all(|v| v.is_finite()).then_some(mu)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distance from `p` to the convex hull of `leaders`: exact for planar
/// points, conditional-gradient otherwise.
pub fn hull_distance(p: &[f64], leaders: &[Vec<f64>]) -> f64 {
    assert!(!leaders.is_empty(), "hull of an empty point set");
    if p.len() == 2 {
        hull_distance_2d(p, leaders)
    } else {
        hull_distance_fw(p, leaders)
    }
}

/// Same as [`hull_distance`] but always via the iterative solver.
pub fn hull_distance_iterative(p: &[f64], leaders: &[Vec<f64>]) -> f64 {
    hull_distance_fw(p, leaders)
}
