//! Scenario files and the `validate`, `run`, `sweep` and `report` commands.
//!
//! A scenario is a JSON document. Unknown keys are rejected and physical
//! quantities carry their unit in the key name.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{self, CascadeSystem, CascadeTrace, Certificate, FollowerFilter, IssReport, Perturbation};
use crate::comm::{self, CommConfig};
use crate::control::{self, GainSet, PsiMode, Variant};
use crate::dynamics::{AgentModel, Drift, LeaderTrajectory};
use crate::sim::{self, AgentSetup, Scenario, SimError, Trace};
use crate::topology::{self, DirectedTopology};
use crate::Error;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}:{column}: {message}\n{context}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
        context: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("sweep axis {axis}: {reason}")]
    Axis { axis: String, reason: String },
    #[error("validation failed:\n{0}")]
    ValidationFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub topology: TopologySection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<AgentConfig>,
    /// One entry per follower, or a single entry shared by all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub controllers: Vec<ControllerConfig>,
    pub comm: CommSection,
    pub sim: SimSection,
    #[serde(default)]
    pub outputs: OutputsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<CascadeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    /// Number of followers; agents `0..m` follow, the rest lead.
    pub m: usize,
    /// `weights[i][j]` is the weight of the link from `j` to `i`.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub model: ModelConfig,
    pub initial: InitialConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<LeaderTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    DoubleIntegrator,
    /// `drift` names a registered function: `zero` or `square_velocity`.
    Nonlinear {
        drift: String,
    },
    /// `v̇ = S1 p + S2 v + Γ`, matrices given row by row.
    Oscillator {
        s1_per_s2: Vec<Vec<f64>>,
        s2_per_s: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub position_m: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_m_per_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    FullState,
    OutputFeedback,
    NonlinearRef,
    OscillatorFull,
    OscillatorOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub variant: VariantName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<PsiMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_vd_m_per_s: Option<Vec<f64>>,
    pub gains: GainSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

impl ControllerConfig {
    pub fn to_variant(&self) -> Result<Variant, ConfigError> {
        let linear = matches!(self.variant, VariantName::FullState | VariantName::OutputFeedback);
        if !linear && (self.psi.is_some() || self.known_vd_m_per_s.is_some()) {
            return Err(ConfigError::Invalid(format!(
                "psi and known_vd_m_per_s apply only to full_state and output_feedback, not {:?}",
                self.variant
            )));
        }
        let psi = self.psi.unwrap_or_default();
        let known_vd = self.known_vd_m_per_s.clone();
        Ok(match self.variant {
            VariantName::FullState => Variant::FullState { psi, known_vd },
            VariantName::OutputFeedback => Variant::OutputFeedback { psi, known_vd },
            VariantName::NonlinearRef => Variant::NonlinearRef,
            VariantName::OscillatorFull => Variant::OscillatorFull,
            VariantName::OscillatorOutput => Variant::OscillatorOutput,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommSection {
    #[serde(rename = "T_seconds")]
    pub period_seconds: f64,
    #[serde(rename = "T_star_seconds")]
    pub t_star_seconds: f64,
    pub drop_prob: f64,
    pub delay_max_seconds: f64,
    /// Defaults to a tenth of the period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_quantum_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt_seconds: f64,
    pub t_end_seconds: f64,
    pub seed: u64,
    pub dimension: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_times_seconds: Vec<f64>,
}

/// Filter-cascade scenario; replaces `agents` and `controllers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    pub alpha: f64,
    pub followers: Vec<FollowerFilter>,
    /// `Ψ` per leader.
    pub leaders: Vec<Perturbation>,
    pub initial_eta: Vec<Vec<f64>>,
}

/// Parses a scenario, reporting syntax and schema errors with the offending
/// line.
pub fn parse_config(text: &str, source_name: &str) -> Result<ConfigFile, ConfigError> {
    serde_json::from_str(text).map_err(|e| {
        let line = e.line();
        let context = text
            .lines()
            .nth(line.saturating_sub(1))
            .map(|l| format!("  {line:>4} | {l}"))
            .unwrap_or_default();
        ConfigError::Parse {
            source_name: source_name.to_string(),
            line,
            column: e.column(),
            message: e.to_string(),
            context,
        }
    })
}

pub fn load_config(path: &Path) -> Result<ConfigFile, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_config(&text, &path.display().to_string())?)
}

impl ConfigFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn comm_config(&self) -> CommConfig {
        CommConfig {
            period: self.comm.period_seconds,
            t_star: self.comm.t_star_seconds,
            drop_prob: self.comm.drop_prob,
            delay_max: self.comm.delay_max_seconds,
            seed: self.sim.seed,
        }
    }

    pub fn delay_quantum(&self) -> f64 {
        self.comm.delay_quantum_seconds.unwrap_or(self.comm.period_seconds / 10.0)
    }

    pub fn topology(&self) -> Result<DirectedTopology, Error> {
        Ok(DirectedTopology::from_rows(self.topology.m, &self.topology.weights)?)
    }

    fn controller_for(&self, follower: usize) -> Result<&ControllerConfig, ConfigError> {
        match self.controllers.len() {
            1 => Ok(&self.controllers[0]),
            k if follower < k => Ok(&self.controllers[follower]),
            k => Err(ConfigError::Invalid(format!(
                "{k} controllers given for {} followers; give one per follower or a single shared entry",
                self.topology.m
            ))),
        }
    }
}

fn model_from(cfg: &ModelConfig) -> Result<AgentModel, Error> {
    Ok(match cfg {
        ModelConfig::DoubleIntegrator => AgentModel::DoubleIntegrator,
        ModelConfig::Nonlinear { drift } => AgentModel::Nonlinear {
            drift: Drift::from_name(drift)?,
        },
        ModelConfig::Oscillator { s1_per_s2, s2_per_s } => AgentModel::oscillator(matrix(s1_per_s2)?, matrix(s2_per_s)?)?,
    })
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(ConfigError::Invalid("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

/// Closed-loop scenario described by the file.
pub fn build_scenario(cfg: &ConfigFile) -> Result<Scenario, Error> {
    if cfg.cascade.is_some() {
        return Err(ConfigError::Invalid("file describes a filter cascade, not a closed loop".into()).into());
    }
    let topology = cfg.topology()?;
    let mut agents = Vec::with_capacity(cfg.agents.len());
    for (i, a) in cfg.agents.iter().enumerate() {
        let controller = if topology.is_leader(i) {
            None
        } else {
            let c = cfg.controller_for(i)?;
            Some((c, c.to_variant()?))
        };
        agents.push(AgentSetup {
            model: model_from(&a.model)?,
            p0: a.initial.position_m.clone(),
            v0: a.initial.velocity_m_per_s.clone(),
            trajectory: a.trajectory.clone(),
            controller_init: controller.as_ref().and_then(|(c, _)| c.initial_state.clone()),
            controller: controller.map(|(c, v)| (v, c.gains)),
        });
    }
    Ok(Scenario {
        topology,
        agents,
        comm: cfg.comm_config(),
        delay_quantum: cfg.delay_quantum(),
        dt: cfg.sim.dt_seconds,
        t_end: cfg.sim.t_end_seconds,
        dim: cfg.sim.dimension,
    })
}

pub fn build_cascade(cfg: &ConfigFile) -> Result<CascadeSystem, Error> {
    let c = cfg
        .cascade
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("file has no cascade section".into()))?;
    if !cfg.agents.is_empty() || !cfg.controllers.is_empty() {
        return Err(ConfigError::Invalid("a cascade scenario takes no agents or controllers".into()).into());
    }
    Ok(CascadeSystem {
        topology: cfg.topology()?,
        dim: cfg.sim.dimension,
        alpha: c.alpha,
        followers: c.followers.clone(),
        leaders: c.leaders.clone(),
        eta0: c.initial_eta.clone(),
        comm: cfg.comm_config(),
        delay_quantum: cfg.delay_quantum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let _ = writeln!(out, "validation: {}", if self.pass { "PASS" } else { "FAIL" });
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Topology, comm, model, gain and small-gain checks.
pub fn cmd_validate(cfg: &ConfigFile) -> ValidationReport {
    let mut checks = Vec::new();

    match cfg.topology() {
        Err(e) => push(&mut checks, "topology".into(), Err(e.to_string())),
        Ok(topo) => {
            let reach = topology::validate_assumption1(&topo);
            let ids: Vec<usize> = reach.unreachable.iter().map(|i| i + 1).collect();
            push(
                &mut checks,
                "topology.assumption1".into(),
                if reach.satisfied {
                    Ok("every follower is reachable from some leader".into())
                } else {
                    Err(format!("followers {ids:?} have no directed path from any leader"))
                },
            );
            match analysis::certificate(&topo) {
                Err(e) => push(&mut checks, "topology.certificate".into(), Err(e.to_string())),
                Ok(cert) => {
                    let verdict = |ok: bool, msg: String| if ok { Ok(msg) } else { Err(msg) };
                    push(
                        &mut checks,
                        "topology.l1_m_matrix".into(),
                        verdict(
                            cert.l1_nonsingular_m_matrix,
                            format!("L1 nonsingular M-matrix: {}", cert.l1_nonsingular_m_matrix),
                        ),
                    );
                    push(
                        &mut checks,
                        "topology.small_gain".into(),
                        verdict(
                            cert.small_gain_pass,
                            format!("spectral radius of D1^-1 A1 = {:.6}", cert.spectral_radius),
                        ),
                    );
                    push(
                        &mut checks,
                        "topology.containment_weights".into(),
                        verdict(
                            cert.weights_valid,
                            format!(
                                "min entry {:.3e}, max row-sum deviation {:.3e}",
                                cert.weights_min_entry, cert.weights_max_row_sum_deviation
                            ),
                        ),
                    );
                }
            }
        }
    }

    push(
        &mut checks,
        "comm".into(),
        cfg.comm_config()
            .validate()
            .map(|()| format!("T = {} s, T* = {} s", cfg.comm.period_seconds, cfg.comm.t_star_seconds))
            .map_err(|e| e.to_string()),
    );

    if cfg.cascade.is_some() {
        push(
            &mut checks,
            "cascade".into(),
            build_cascade(cfg)
                .and_then(|sys| sys.validate().map_err(Error::from))
                .map(|()| "filter cascade is well formed".into())
                .map_err(|e| e.to_string()),
        );
        push(&mut checks, "sim.grid".into(), grid_check(cfg));
    } else {
        let topo = cfg.topology().ok();
        for (i, a) in cfg.agents.iter().enumerate() {
            let model = model_from(&a.model);
            push(
                &mut checks,
                format!("agent[{}].model", i + 1),
                model.as_ref().map(|m| m.kind_name().to_string()).map_err(|e| e.to_string()),
            );
            let leader = topo.as_ref().is_some_and(|t| t.is_leader(i));
            if leader {
                continue;
            }
            let result = cfg.controller_for(i).and_then(|c| Ok((c, c.to_variant()?)));
            let name = format!("agent[{}].gains", i + 1);
            match result {
                Err(e) => push(&mut checks, name, Err(e.to_string())),
                Ok((c, variant)) => {
                    let s2 = match &model {
                        Ok(AgentModel::Oscillator { s2, .. }) => Some(s2.clone()),
                        _ => None,
                    };
                    let report = control::check_gains(&variant, &c.gains, s2.as_ref());
                    let detail = if report.diagnostics.is_empty() {
                        format!("{} gains accepted", variant.name())
                    } else {
                        report.diagnostics.join("; ")
                    };
                    push(&mut checks, name, if report.pass { Ok(detail) } else { Err(detail) });
                }
            }
        }
        if checks.iter().all(|c| c.pass) {
            push(
                &mut checks,
                "scenario".into(),
                build_scenario(cfg)
                    .and_then(|s| s.validate().map_err(Error::from))
                    .map(|()| {
                        format!(
                            "{} agents, {} steps",
                            cfg.agents.len(),
                            (cfg.sim.t_end_seconds / cfg.sim.dt_seconds).round()
                        )
                    })
                    .map_err(|e| e.to_string()),
            );
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    ValidationReport { pass, checks }
}

fn push(checks: &mut Vec<Check>, name: String, result: Result<String, String>) {
    let (pass, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    checks.push(Check { name, pass, detail });
}

fn grid_check(cfg: &ConfigFile) -> Result<String, String> {
    let (dt, period, q) = (cfg.sim.dt_seconds, cfg.comm.period_seconds, cfg.delay_quantum());
    let multiple = |x: f64, unit: f64| {
        let r = x / unit;
        (r - r.round()).abs() < 1e-9 * r.abs().max(1.0)
    };
    if !(dt > 0.0 && multiple(period, dt) && period / dt >= 10.0 - 1e-9) {
        return Err(format!("dt = {dt} s must divide T = {period} s at least ten times"));
    }
    if !multiple(q, dt) {
        return Err(format!("delay quantum {q} s is not a multiple of dt = {dt} s"));
    }
    if cfg.sim.t_end_seconds.is_nan() || cfg.sim.t_end_seconds <= 0.0 {
        return Err("t_end_seconds must be positive".into());
    }
    Ok(format!("dt = {dt} s, horizon {} s", cfg.sim.t_end_seconds))
}

/// Command-line overrides shared by the commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// Output files go here, keeping the configured file names.
    pub out_dir: Option<PathBuf>,
}

impl RunOptions {
    fn seed(&self, cfg: &ConfigFile) -> u64 {
        self.seed.unwrap_or(cfg.sim.seed)
    }

    fn resolve(&self, configured: Option<&str>, default: &str) -> Option<PathBuf> {
        match (&self.out_dir, configured) {
            (Some(dir), Some(p)) => Some(dir.join(Path::new(p).file_name().unwrap_or(p.as_ref()))),
            (Some(dir), None) => Some(dir.join(default)),
            (None, Some(p)) => Some(PathBuf::from(p)),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub kind: &'static str,
    pub seed: u64,
    pub samples: usize,
    pub final_error_norm: f64,
    /// Largest error norm over the last 20% of the horizon.
    pub steady_state_error_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_velocity_error_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_final_hull_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iss: Option<IssSummary>,
    pub runtime_seconds: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssSummary {
    pub pairs: usize,
    pub checks: usize,
    pub violations: usize,
}

impl From<&IssReport> for IssSummary {
    fn from(r: &IssReport) -> Self {
        Self {
            pairs: r.pairs,
            checks: r.checks,
            violations: r.violations.len(),
        }
    }
}

fn require_valid(cfg: &ConfigFile) -> Result<(), Error> {
    let report = cmd_validate(cfg);
    if report.pass {
        Ok(())
    } else {
        Err(ConfigError::ValidationFailed(report.to_text()).into())
    }
}

/// Writes through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Error> {
    let io = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn sup_after(times: &[f64], values: &[f64], from: f64) -> f64 {
    times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= from - 1e-12)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max)
}

/// Executes the scenario and writes the configured outputs.
pub fn cmd_run(cfg: &ConfigFile, opts: &RunOptions) -> Result<RunSummary, Error> {
    require_valid(cfg)?;
    let seed = opts.seed(cfg);
    let started = Instant::now();
    let csv_path = opts.resolve(cfg.outputs.csv_path.as_deref(), "trace.csv");
    let mut files = Vec::new();
    let mut summary = if cfg.cascade.is_some() {
        let sys = build_cascade(cfg)?;
        let trace = analysis::simulate_cascade(&sys, cfg.sim.t_end_seconds, cfg.sim.dt_seconds, seed)?;
        let iss = analysis::iss_estimate_check(&trace);
        if let Some(path) = &csv_path {
            write_atomic(path, cascade_csv(&trace).as_bytes())?;
            files.push(path.display().to_string());
        }
        cascade_summary(&trace, seed, Some(&iss))
    } else {
        let scenario = build_scenario(cfg)?;
        let trace = sim::run(&scenario, seed)?;
        if let Some(path) = &csv_path {
            write_atomic(path, trace.to_csv().as_bytes())?;
            files.push(path.display().to_string());
            let audit = sibling(path, "_audit.csv");
            write_atomic(&audit, trace.audit_csv().as_bytes())?;
            files.push(audit.display().to_string());
            let schedule = sibling(path, "_schedule.csv");
            write_atomic(&schedule, comm::schedules_to_csv(&trace.schedules).as_bytes())?;
            files.push(schedule.display().to_string());
        }
        if let Some(path) = opts
            .resolve(cfg.outputs.svg_path.as_deref(), "")
            .filter(|_| cfg.outputs.svg_path.is_some())
        {
            write_atomic(&path, render_svg(&trace, &cfg.outputs.snapshot_times_seconds).as_bytes())?;
            files.push(path.display().to_string());
        }
        closed_loop_summary(&trace, seed)
    };
    if let Some(path) = &csv_path {
        let sidecar = sibling(path, ".json");
        let mut effective = cfg.clone();
        effective.sim.seed = seed;
        let doc = serde_json::json!({ "seed": seed, "scenario": effective });
        write_atomic(&sidecar, serde_json::to_string_pretty(&doc).expect("json").as_bytes())?;
        files.push(sidecar.display().to_string());
    }
    summary.runtime_seconds = started.elapsed().as_secs_f64();
    if let Some(path) = opts
        .resolve(cfg.outputs.report_path.as_deref(), "")
        .filter(|_| cfg.outputs.report_path.is_some())
    {
        files.push(path.display().to_string());
        summary.files = files;
        write_atomic(&path, serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
    } else {
        summary.files = files;
    }
    Ok(summary)
}

fn closed_loop_summary(trace: &Trace, seed: u64) -> RunSummary {
    let last = trace.last();
    let t_end = trace.times[last];
    RunSummary {
        kind: "closed_loop",
        seed,
        samples: trace.len(),
        final_error_norm: trace.pos_error[last],
        steady_state_error_norm: sup_after(&trace.times, &trace.pos_error, 0.8 * t_end),
        final_velocity_error_norm: Some(trace.vel_error[last]),
        max_final_hull_distance: Some((0..trace.m).map(|i| trace.hull_distance(last, i)).fold(0.0, f64::max)),
        iss: None,
        runtime_seconds: 0.0,
        files: Vec::new(),
    }
}

fn cascade_summary(trace: &CascadeTrace, seed: u64, iss: Option<&IssReport>) -> RunSummary {
    let last = trace.len() - 1;
    RunSummary {
        kind: "cascade",
        seed,
        samples: trace.len(),
        final_error_norm: trace.error[last],
        steady_state_error_norm: trace.sup_error_after(0.8 * trace.times[last]),
        final_velocity_error_norm: None,
        max_final_hull_distance: None,
        iss: iss.map(IssSummary::from),
        runtime_seconds: 0.0,
        files: Vec::new(),
    }
}

/// Cascade trace as CSV: `t,agent_id,role,eta_1..eta_N,err_norm`.
pub fn cascade_csv(trace: &CascadeTrace) -> String {
    let mut out = String::from("t,agent_id,role");
    for k in 1..=trace.dim {
        let _ = write!(out, ",eta_{k}");
    }
    out.push_str(",err_norm\n");
    for (s, t) in trace.times.iter().enumerate() {
        for i in 0..trace.n {
            let role = if i < trace.m { "follower" } else { "leader" };
            let _ = write!(out, "{t},{},{role}", i + 1);
            let base = (s * trace.n + i) * trace.dim;
            for x in &trace.eta[base..base + trace.dim] {
                let _ = write!(out, ",{x}");
            }
            let err = if i < trace.m { trace.eta_tilde[s * trace.m + i] } else { 0.0 };
            let _ = writeln!(out, ",{err}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_error_norm: f64,
    pub steady_state_error_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},final_error_norm,steady_state_error_norm\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.value, r.final_error_norm, r.steady_state_error_norm);
        }
        out
    }
}

/// Config with one numeric parameter changed. `gains.<name>` multiplies
/// that gain of every follower by `value` and `gains.*` multiplies all
/// feedback gains; any other axis is a dotted path (array indices
/// allowed) to a number that is replaced by `value`.
pub fn apply_axis(cfg: &ConfigFile, axis: &str, value: f64) -> Result<ConfigFile, ConfigError> {
    let axis_err = |reason: String| ConfigError::Axis {
        axis: axis.to_string(),
        reason,
    };
    if !value.is_finite() {
        return Err(axis_err(format!("value {value} is not finite")));
    }
    if let Some(name) = axis.strip_prefix("gains.") {
        let mut out = cfg.clone();
        if let Some(c) = &mut out.cascade {
            for f in &mut c.followers {
                match name {
                    "*" => *f = scale_filter(f, value),
                    "k_eta" => f.k_eta *= value,
                    "h" => f.h.iter_mut().for_each(|h| *h *= value),
                    _ => return Err(axis_err("cascade gains are k_eta, h or *".into())),
                }
            }
            return Ok(out);
        }
        if out.controllers.is_empty() {
            return Err(axis_err("scenario has no controllers".into()));
        }
        for c in &mut out.controllers {
            if name == "*" {
                c.gains = c.gains.scaled(value);
                continue;
            }
            let mut v = serde_json::to_value(c.gains).expect("gains serialize");
            match v.get_mut(name) {
                Some(Value::Number(n)) => {
                    let scaled = n.as_f64().unwrap_or(f64::NAN) * value;
                    v[name] = number(scaled).ok_or_else(|| axis_err("result is not finite".into()))?;
                }
                _ => return Err(axis_err(format!("gains.{name} is not a numeric gain"))),
            }
            c.gains = serde_json::from_value(v).map_err(|e| axis_err(e.to_string()))?;
        }
        return Ok(out);
    }
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    let mut node = &mut root;
    for seg in axis.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        }
        .ok_or_else(|| axis_err(format!("no such config path (at {seg:?})")))?;
    }
    if !node.is_number() {
        return Err(axis_err("does not name a numeric value".into()));
    }
    *node = number(value).expect("finite");
    serde_json::from_value(root).map_err(|e| axis_err(e.to_string()))
}

fn number(x: f64) -> Option<Value> {
    serde_json::Number::from_f64(x).map(Value::Number)
}

fn scale_filter(f: &FollowerFilter, factor: f64) -> FollowerFilter {
    let mut out = f.clone();
    out.k_eta *= factor;
    out.h.iter_mut().for_each(|h| *h *= factor);
    out
}

/// Runs the scenario once per axis value, in parallel, sharing the seed.
pub fn cmd_sweep(cfg: &ConfigFile, axis: &str, values: &[f64], opts: &RunOptions) -> Result<SweepSummary, Error> {
    let configs = values.iter().map(|&v| apply_axis(cfg, axis, v)).collect::<Result<Vec<_>, _>>()?;
    for c in &configs {
        require_valid(c)?;
    }
    let seed = opts.seed(cfg);
    let results: Vec<Result<RunSummary, Error>> = thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                scope.spawn(move || -> Result<RunSummary, Error> {
                    if c.cascade.is_some() {
                        let sys = build_cascade(c)?;
                        let tr = analysis::simulate_cascade(&sys, c.sim.t_end_seconds, c.sim.dt_seconds, seed)?;
                        Ok(cascade_summary(&tr, seed, None))
                    } else {
                        let tr = sim::run(&build_scenario(c)?, seed)?;
                        Ok(closed_loop_summary(&tr, seed))
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(values.len());
    for (value, r) in values.iter().zip(results) {
        let s = r?;
        rows.push(SweepRow {
            value: *value,
            final_error_norm: s.final_error_norm,
            steady_state_error_norm: s.steady_state_error_norm,
        });
    }
    let summary = SweepSummary {
        axis: axis.to_string(),
        rows,
    };
    if let Some(dir) = &opts.out_dir {
        let name: String = axis
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
            .collect();
        write_atomic(&dir.join(format!("sweep_{name}.csv")), summary.to_csv().as_bytes())?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub certificate: Certificate,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate_check: Option<IssSummary>,
}

/// Graph certificate, plus the estimate-check summary for cascades.
pub fn cmd_report(cfg: &ConfigFile, opts: &RunOptions) -> Result<CertificateReport, Error> {
    let certificate = analysis::certificate(&cfg.topology()?)?;
    let estimate_check = match cfg.cascade {
        Some(_) => {
            require_valid(cfg)?;
            let sys = build_cascade(cfg)?;
            let tr = analysis::simulate_cascade(&sys, cfg.sim.t_end_seconds, cfg.sim.dt_seconds, opts.seed(cfg))?;
            Some(IssSummary::from(&analysis::iss_estimate_check(&tr)))
        }
        None => None,
    };
    let pass = certificate.pass() && estimate_check.as_ref().is_none_or(|e| e.violations == 0);
    let report = CertificateReport {
        certificate,
        pass,
        estimate_check,
    };
    if let Some(path) = opts.resolve(cfg.outputs.report_path.as_deref(), "report.json") {
        write_atomic(&path, serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
    }
    Ok(report)
}

/// Process exit status: 1 for validation failures, 2 for divergence, 3 for
/// I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::Sim(SimError::Divergence { .. }) | Error::Analysis(analysis::AnalysisError::Sim(SimError::Divergence { .. })) => 2,
        _ => 1,
    }
}

/// Trajectories with leader hulls at the snapshot times, beside a
/// semilog plot of the containment error.
pub fn render_svg(trace: &Trace, snapshots: &[f64]) -> String {
    const W: f64 = 460.0;
    const H: f64 = 420.0;
    const PAD: f64 = 40.0;
    let xy = |s: usize, i: usize| -> (f64, f64) {
        let p = trace.p(s, i);
        if trace.dim >= 2 {
            (p[0], p[1])
        } else {
            (trace.times[s], p[0])
        }
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in 0..trace.len() {
        for i in 0..trace.n {
            let (x, y) = xy(s, i);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let sx = |x: f64| PAD + (x - x0) / span * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / span * (H - 2.0 * PAD);
    let stride = (trace.len() / 800).max(1);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" font-family="sans-serif" font-size="11">"#,
        2.0 * W
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{PAD}" y="20">Trajectories and leader hulls</text>"#);
    for i in 0..trace.n {
        let color = if i < trace.m { "#1f77b4" } else { "#d62728" };
        let pts: Vec<String> = (0..trace.len())
            .step_by(stride)
            .map(|s| {
                let (x, y) = xy(s, i);
                format!("{:.2},{:.2}", sx(x), sy(y))
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            pts.join(" ")
        );
    }
    if trace.dim >= 2 {
        for &t in snapshots {
            let Some(s) = trace.sample_at(t) else { continue };
            let hull = sim::convex_hull_2d(&trace.leader_positions(s).iter().map(|p| p[..2].to_vec()).collect::<Vec<_>>());
            let pts: Vec<String> = hull.iter().map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1]))).collect();
            let _ = writeln!(
                out,
                r#"<polygon fill="none" stroke="black" stroke-dasharray="4 2" points="{}"><title>t = {t} s</title></polygon>"#,
                pts.join(" ")
            );
            for i in 0..trace.m {
                let (x, y) = xy(s, i);
                let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4"/>"##, sx(x), sy(y));
            }
        }
    }

    let floor = 1e-8_f64;
    let logs: Vec<f64> = trace.pos_error.iter().map(|e| e.max(floor).log10()).collect();
    let (l0, l1) = (floor.log10(), logs.iter().copied().fold(floor.log10() + 1.0, f64::max).ceil());
    let t_end = trace.times[trace.last()].max(1e-9);
    let ex = |t: f64| W + PAD + t / t_end * (W - 2.0 * PAD);
    let ey = |l: f64| H - PAD - (l - l0) / (l1 - l0) * (H - 2.0 * PAD);
    let _ = writeln!(out, r#"<text x="{}" y="20">Containment error norm (log scale)</text>"#, W + PAD);
    let _ = writeln!(
        out,
        r#"<rect x="{}" y="{PAD}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        W + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let mut decade = l0;
    while decade <= l1 {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">1e{decade}</text>"#,
            W + PAD - 4.0,
            ey(decade) + 4.0
        );
        decade += 2.0;
    }
    let pts: Vec<String> = (0..trace.len())
        .step_by(stride)
        .map(|s| format!("{:.2},{:.2}", ex(trace.times[s]), ey(logs[s])))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" stroke-width="1" points="{}"/>"#,
        pts.join(" ")
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">t = {t_end} s</text>"#,
        2.0 * W - PAD,
        H - PAD + 16.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
  "topology": {"m": 1, "weights": [[0, 1], [0, 0]]},
  "agents": [
    {"model": {"kind": "double_integrator"}, "initial": {"position_m": [0.0]}},
    {"model": {"kind": "double_integrator"}, "initial": {"position_m": [1.0]},
     "trajectory": {"kind": "constant_velocity", "v_d_m_per_s": [0.5]}}
  ],
  "controllers": [{"variant": "full_state", "gains": {"k_p": 4, "k_d": 4, "l_p": 4}}],
  "comm": {"T_seconds": 0.1, "T_star_seconds": 0.5, "drop_prob": 0.1, "delay_max_seconds": 0.2},
  "sim": {"dt_seconds": 0.01, "t_end_seconds": 5.0, "seed": 3, "dimension": 1}
}"#
    }

    #[test]
    fn parses_and_round_trips() {
        let cfg = parse_config(minimal(), "mem").unwrap();
        let back = parse_config(&cfg.to_json(), "mem").unwrap();
        assert_eq!(cfg, back);
        assert!(cmd_validate(&cfg).pass, "{}", cmd_validate(&cfg).to_text());
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let text = minimal().replace("\"seed\": 3", "\"seed\": 3, \"T\": 0.1");
        match parse_config(&text, "mem") {
            Err(ConfigError::Parse {
                line, context, message, ..
            }) => {
                assert_eq!(line, 10);
                assert!(context.contains("dt_seconds"));
                assert!(message.contains("unknown field"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn axis_paths() {
        let cfg = parse_config(minimal(), "mem").unwrap();
        let c = apply_axis(&cfg, "comm.T_star_seconds", 1.0).unwrap();
        assert_eq!(c.comm.t_star_seconds, 1.0);
        let c = apply_axis(&cfg, "agents.1.initial.position_m.0", 7.0).unwrap();
        assert_eq!(c.agents[1].initial.position_m, vec![7.0]);
        let c = apply_axis(&cfg, "gains.k_p", 2.0).unwrap();
        assert_eq!(c.controllers[0].gains.k_p, 8.0);
        let c = apply_axis(&cfg, "gains.*", 2.0).unwrap();
        assert_eq!(c.controllers[0].gains.k_d, 8.0);
        assert!(matches!(apply_axis(&cfg, "outputs", 1.0), Err(ConfigError::Axis { .. })));
        assert!(matches!(
            apply_axis(&cfg, "agents.0.model.kind", 1.0),
            Err(ConfigError::Axis { .. })
        ));
        assert!(matches!(apply_axis(&cfg, "gains.nope", 1.0), Err(ConfigError::Axis { .. })));
    }

    #[test]
    fn exit_codes() {
        let div: Error = SimError::Divergence { t: 1.0, agent: 0 }.into();
        assert_eq!(exit_code(&div), 2);
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(exit_code(&io), 3);
        assert_eq!(exit_code(&ConfigError::Invalid("x".into()).into()), 1);
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
