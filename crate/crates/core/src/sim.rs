//! Closed-loop simulation: leader, agents, compensators and controllers
//! integrated together with fixed-step RK4.
//!
//! The flat state vector is `[x0 | agent 1 | agent 2 | ...]` where each
//! agent block is `[x (r) | η ((r+1)ν) | θ̂ (m) | k (Nussbaum mode only)]`.
//! Every stage of a step evaluates all agents against the same snapshot.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DVector;
use thiserror::Error;

use crate::compensator::{Compensator, CompensatorError, CompensatorState, NeighborOutputs};
use crate::controller::{
    lyapunov_value, AgentModel, BackstepController, ControllerError, ControllerState, Direction,
};
use crate::gain::{self, GainDesign, GainError, LeaderModel, MuChoice};
use crate::graph::{AugmentedSpec, DiGraph, GraphError};

/// Any state component above this magnitude counts as finite escape.
pub const ESCAPE_BOUND: f64 = 1e9;
/// Tracking tolerance used by [`Metrics::time_to_tolerance`].
pub const TRACKING_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("leader fails the neutral-stability check: {0}")]
    Leader(GainError),
    #[error("graph has no spanning tree rooted at the leader; unreachable agents: {0:?}")]
    NoSpanningTree(Vec<usize>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Compensator(#[from] CompensatorError),
    #[error("agent {agent}: {source}")]
    Controller {
        agent: usize,
        #[source]
        source: ControllerError,
    },
}

/// One agent with its initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSetup {
    pub model: AgentModel,
    pub x0: Vec<f64>,
    pub theta_hat0: DVector<f64>,
    pub eta0: CompensatorState,
    /// Initial Nussbaum gain; ignored with known direction.
    pub k0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integration {
    pub h: f64,
    pub t_end: f64,
    pub stride: usize,
}

impl Default for Integration {
    fn default() -> Self {
        Integration {
            h: 1e-3,
            t_end: 30.0,
            stride: 10,
        }
    }
}

impl Integration {
    pub fn steps(&self) -> usize {
        (self.t_end / self.h).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub leader: LeaderModel,
    pub graph: DiGraph,
    pub agents: Vec<AgentSetup>,
    pub mu: MuChoice,
    pub integration: Integration,
}

impl Scenario {
    /// Dimension checks plus neutral stability of the leader and a spanning
    /// tree rooted at the leader.
    pub fn validate(&self) -> Result<(), SimError> {
        self.leader
            .check_neutrally_stable()
            .map_err(SimError::Leader)?;
        if self.graph.agents() != self.agents.len() {
            return Err(SimError::Scenario(format!(
                "graph has {} agents, scenario lists {}",
                self.graph.agents(),
                self.agents.len()
            )));
        }
        if self.agents.is_empty() {
            return Err(SimError::Scenario("no agents".into()));
        }
        let unreachable = self.graph.unreachable_agents();
        if !unreachable.is_empty() {
            return Err(SimError::NoSpanningTree(unreachable));
        }
        let nu = self.leader.dim();
        for (a, s) in self.agents.iter().enumerate() {
            let id = a + 1;
            let r = s.model.order();
            if s.x0.len() != r {
                return Err(SimError::Scenario(format!(
                    "agent {id}: x0 has {} entries, order is {r}",
                    s.x0.len()
                )));
            }
            if s.theta_hat0.len() != s.model.param_dim() {
                return Err(SimError::Scenario(format!(
                    "agent {id}: theta_hat0 has {} entries, theta has {}",
                    s.theta_hat0.len(),
                    s.model.param_dim()
                )));
            }
            if s.eta0.order() != r || s.eta0.dim() != nu {
                return Err(SimError::Scenario(format!(
                    "agent {id}: eta0 must have {} links of size {nu}",
                    r + 1
                )));
            }
        }
        let it = &self.integration;
        if !(it.h > 0.0 && it.h.is_finite() && it.t_end > 0.0 && it.t_end.is_finite()) || it.stride == 0 {
            return Err(SimError::Scenario(format!(
                "integration settings h={}, T={}, stride={} are invalid",
                it.h, it.t_end, it.stride
            )));
        }
        Ok(())
    }

    pub fn orders(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.model.order()).collect()
    }

    /// Gain design for this scenario.
    pub fn design(&self) -> Result<GainDesign, SimError> {
        let spec = AugmentedSpec::new(self.orders())?;
        let h_aug = self.graph.build_augmented_h(&spec)?;
        Ok(gain::design(&self.leader, &h_aug, self.mu)?)
    }
}

/// `A x0`.
pub fn leader_deriv(x0: &[f64], leader: &LeaderModel) -> DVector<f64> {
    &leader.a * DVector::from_column_slice(x0)
}

/// `ẋ_l = x_{l+1} + ψ_lᵀθ`, `ẋ_r = b u + ψ_rᵀθ`.
pub fn agent_deriv(x: &[f64], u: f64, model: &AgentModel) -> Result<DVector<f64>, ControllerError> {
    let r = model.order();
    let psi = model.regressor_values(x)?;
    let theta = model.theta();
    Ok(DVector::from_fn(r, |l, _| {
        let drift = psi[l].dot(theta);
        if l + 1 < r {
            x[l + 1] + drift
        } else {
            model.direction().input_gain() * u + drift
        }
    }))
}

/// One classical RK4 step of `ẏ = f(t, y)`.
pub fn rk4_step<E>(
    mut f: impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    t: f64,
    y: &[f64],
    h: f64,
) -> Result<Vec<f64>, E> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k1)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4)?;
    Ok((0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
struct AgentSlots {
    x: Range<usize>,
    eta: Range<usize>,
    theta: Range<usize>,
    k: Option<usize>,
}

/// A validated scenario with its gain design and per-agent compensators
/// and controllers, ready to integrate.
#[derive(Debug)]
pub struct ClosedLoop {
    scenario: Scenario,
    design: GainDesign,
    compensators: Vec<Compensator>,
    controllers: Vec<BackstepController>,
    slots: Vec<AgentSlots>,
    /// `(j, a_ij)` per agent, leader included.
    neighbors: Vec<Vec<(usize, f64)>>,
    len: usize,
}

impl ClosedLoop {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let design = scenario.design()?;
        let nu = scenario.leader.dim();
        let mut compensators = Vec::new();
        let mut controllers = Vec::new();
        let mut slots = Vec::new();
        let mut offset = nu;
        for (a, s) in scenario.agents.iter().enumerate() {
            let r = s.model.order();
            let m = s.model.param_dim();
            compensators.push(Compensator::new(&scenario.leader, design.k.clone(), r)?);
            controllers.push(
                BackstepController::new(s.model.clone(), &scenario.leader, design.k.clone())
                    .map_err(|source| SimError::Controller { agent: a + 1, source })?,
            );
            let x = offset..offset + r;
            let eta = x.end..x.end + (r + 1) * nu;
            let theta = eta.end..eta.end + m;
            let k = matches!(s.model.direction(), Direction::Nussbaum { .. }).then_some(theta.end);
            offset = theta.end + usize::from(k.is_some());
            slots.push(AgentSlots { x, eta, theta, k });
        }
        let neighbors = (1..=scenario.agents.len())
            .map(|i| scenario.graph.in_neighbors(i))
            .collect();
        Ok(ClosedLoop {
            scenario: scenario.clone(),
            design,
            compensators,
            controllers,
            slots,
            neighbors,
            len: offset,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn design(&self) -> &GainDesign {
        &self.design
    }

    pub fn controllers(&self) -> &[BackstepController] {
        &self.controllers
    }

    pub fn state_len(&self) -> usize {
        self.len
    }

    pub fn initial_state(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.len];
        let nu = self.scenario.leader.dim();
        z[..nu].copy_from_slice(self.scenario.leader.x0.as_slice());
        for (s, slot) in self.scenario.agents.iter().zip(&self.slots) {
            z[slot.x.clone()].copy_from_slice(&s.x0);
            z[slot.eta.clone()].copy_from_slice(&s.eta0.to_flat());
            z[slot.theta.clone()].copy_from_slice(s.theta_hat0.as_slice());
            if let Some(k) = slot.k {
                z[k] = s.k0;
            }
        }
        z
    }

    /// Ranges of agent `a` (zero-based) within the flat state:
    /// `(x, η, θ̂, k)`.
    pub fn agent_ranges(&self, a: usize) -> (Range<usize>, Range<usize>, Range<usize>, Option<usize>) {
        let s = &self.slots[a];
        (s.x.clone(), s.eta.clone(), s.theta.clone(), s.k)
    }

    fn controller_state(&self, a: usize, z: &[f64]) -> ControllerState {
        let s = &self.slots[a];
        ControllerState {
            theta_hat: DVector::from_column_slice(&z[s.theta.clone()]),
            nussbaum_k: s.k.map(|k| z[k]),
        }
    }

    /// Control of agent `a` (zero-based) at snapshot `z`. Reads only that
    /// agent's own slots.
    pub fn agent_control(&self, a: usize, z: &[f64]) -> Result<f64, SimError> {
        let s = &self.slots[a];
        self.controllers[a]
            .backstep_flat(&z[s.x.clone()], &z[s.eta.clone()], &self.controller_state(a, z))
            .map(|t| t.u)
            .map_err(|source| SimError::Controller { agent: a + 1, source })
    }

    fn neighbor_outputs(&self, a: usize, y0: f64, z: &[f64]) -> NeighborOutputs {
        let entries = self.neighbors[a]
            .iter()
            .map(|&(j, w)| {
                let y = if j == 0 { y0 } else { z[self.slots[j - 1].x.start] };
                (j, w, y)
            })
            .collect();
        NeighborOutputs::new(entries).expect("graph weights are positive")
    }

    fn leader_output(&self, z: &[f64]) -> f64 {
        let nu = self.scenario.leader.dim();
        self.scenario.leader.c.iter().zip(&z[..nu]).map(|(c, x)| c * x).sum()
    }

    /// Right-hand side of the stacked closed loop.
    pub fn deriv(&self, z: &[f64], out: &mut [f64]) -> Result<(), SimError> {
        let leader = &self.scenario.leader;
        let nu = leader.dim();
        let ax0 = leader_deriv(&z[..nu], leader);
        out[..nu].copy_from_slice(ax0.as_slice());
        let y0 = self.leader_output(z);

        for (a, slot) in self.slots.iter().enumerate() {
            let x = &z[slot.x.clone()];
            let nbrs = self.neighbor_outputs(a, y0, z);
            self.compensators[a].deriv_flat(&z[slot.eta.clone()], x[0], &nbrs, &mut out[slot.eta.clone()]);

            let ctrl = self.controller_state(a, z);
            let trace = self.controllers[a]
                .backstep_flat(x, &z[slot.eta.clone()], &ctrl)
                .map_err(|source| SimError::Controller { agent: a + 1, source })?;
            let model = &self.scenario.agents[a].model;
            let xdot = agent_deriv(x, trace.u, model)
                .map_err(|source| SimError::Controller { agent: a + 1, source })?;
            out[slot.x.clone()].copy_from_slice(xdot.as_slice());
            out[slot.theta.clone()].copy_from_slice(trace.theta_hat_dot.as_slice());
            if let (Some(k), Some(k_dot)) = (slot.k, trace.k_dot) {
                out[k] = k_dot;
            }
        }
        Ok(())
    }

    /// One RK4 step of size `h`.
    pub fn step(&self, z: &[f64], h: f64) -> Result<Vec<f64>, SimError> {
        rk4_step(|_, y, dy| self.deriv(y, dy), 0.0, z, h)
    }

    /// Diagnostics of every agent at snapshot `z`.
    pub fn observe(&self, t: f64, z: &[f64]) -> Result<Sample, SimError> {
        let leader = &self.scenario.leader;
        let nu = leader.dim();
        let x0 = &z[..nu];
        let y0 = self.leader_output(z);
        let mut agents = Vec::with_capacity(self.slots.len());
        for (a, slot) in self.slots.iter().enumerate() {
            let x = &z[slot.x.clone()];
            let eta = &z[slot.eta.clone()];
            let ctrl = self.controller_state(a, z);
            let trace = self.controllers[a]
                .backstep_flat(x, eta, &ctrl)
                .map_err(|source| SimError::Controller { agent: a + 1, source })?;
            let model = &self.scenario.agents[a].model;
            let (v, vdot) = lyapunov_value(&trace, &ctrl, model);
            let yhat: f64 = leader.c.iter().zip(&eta[..nu]).map(|(c, e)| c * e).sum();
            let eta_err = eta
                .chunks(nu)
                .flat_map(|link| link.iter().zip(x0).map(|(e, x)| (e - x) * (e - x)))
                .sum::<f64>()
                .sqrt();
            agents.push(AgentSample {
                y: x[0],
                e: x[0] - y0,
                u: trace.u,
                ehat: trace.errors[0],
                yhat,
                v,
                vdot,
                eta_err,
                theta_hat: ctrl.theta_hat.iter().copied().collect(),
                k: ctrl.nussbaum_k,
                x_sup: x.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
            });
        }
        Ok(Sample { t, y0, agents })
    }

    /// `(V, V̇_pred)` of every agent at snapshot `z`.
    fn lyapunov_terms(&self, z: &[f64]) -> Result<Vec<(f64, f64)>, SimError> {
        self.slots
            .iter()
            .enumerate()
            .map(|(a, slot)| {
                let ctrl = self.controller_state(a, z);
                let trace = self.controllers[a]
                    .backstep_flat(&z[slot.x.clone()], &z[slot.eta.clone()], &ctrl)
                    .map_err(|source| SimError::Controller { agent: a + 1, source })?;
                Ok(lyapunov_value(&trace, &ctrl, &self.scenario.agents[a].model))
            })
            .collect()
    }

    /// Integrates from the scenario's initial state over its horizon.
    ///
    /// Besides the strided samples, every integration step compares the
    /// change of each agent's `V` with the trapezoidal average of its
    /// predicted derivative; the largest discrepancy per known-direction
    /// agent is kept in [`TrajectoryLog::lyapunov_residual`].
    pub fn run(&self) -> TrajectoryLog {
        let it = self.scenario.integration;
        let agents = self.slots.len();
        let mut log = TrajectoryLog {
            params: self.scenario.agents.iter().map(|a| a.model.param_dim()).collect(),
            nussbaum: self.slots.iter().map(|s| s.k.is_some()).collect(),
            samples: Vec::new(),
            lyapunov_residual: self
                .slots
                .iter()
                .map(|s| s.k.is_none().then_some(0.0))
                .collect(),
            escape: None,
        };
        let mut z = self.initial_state();
        let steps = it.steps();
        let mut terms = match self.lyapunov_terms(&z) {
            Ok(t) => t,
            Err(_) => {
                log.escape = Some(0.0);
                return log;
            }
        };
        for n in 0..=steps {
            let t = n as f64 * it.h;
            if n % it.stride == 0 {
                match self.observe(t, &z) {
                    Ok(s) if s.is_finite() => log.samples.push(s),
                    _ => {
                        log.escape = Some(t);
                        break;
                    }
                }
            }
            if n == steps {
                break;
            }
            let next = match self.step(&z, it.h) {
                Ok(next) if next.iter().all(|v| v.is_finite() && v.abs() <= ESCAPE_BOUND) => next,
                _ => {
                    log.escape = Some(t + it.h);
                    break;
                }
            };
            let next_terms = match self.lyapunov_terms(&next) {
                Ok(nt) => nt,
                Err(_) => {
                    log.escape = Some(t + it.h);
                    break;
                }
            };
            for a in 0..agents {
                if let Some(max) = log.lyapunov_residual[a].as_mut() {
                    let ((v0, d0), (v1, d1)) = (terms[a], next_terms[a]);
                    let residual = ((v1 - v0) / it.h - 0.5 * (d0 + d1)).abs();
                    *max = max.max(residual);
                }
            }
            z = next;
            terms = next_terms;
        }
        log
    }
}

/// Validates, designs and integrates a scenario.
pub fn run(scenario: &Scenario) -> Result<TrajectoryLog, SimError> {
    Ok(ClosedLoop::new(scenario)?.run())
}

/// Moves every agent onto the synchronized manifold: `x_1 = y0(0)`,
/// `η_l = x0(0)`, `θ̂ = θ` and `x_{l+1} = α_l`, so all backstepping errors
/// start at zero.
pub fn place_on_manifold(scenario: &mut Scenario) -> Result<(), SimError> {
    let design = scenario.design()?;
    let leader = scenario.leader.clone();
    let y0 = leader.c.dot(&leader.x0.transpose());
    for (a, s) in scenario.agents.iter_mut().enumerate() {
        let r = s.model.order();
        s.eta0 = CompensatorState::new(vec![leader.x0.clone(); r + 1])?;
        s.theta_hat0 = s.model.theta().clone();
        s.x0 = vec![0.0; r];
        s.x0[0] = y0;
        let controller = BackstepController::new(s.model.clone(), &leader, design.k.clone())
            .map_err(|source| SimError::Controller { agent: a + 1, source })?;
        let ctrl = ControllerState {
            theta_hat: s.theta_hat0.clone(),
            nussbaum_k: None,
        };
        // α_l depends on x_1..x_l only, so the states can be filled in order.
        for l in 1..r {
            let trace = controller
                .backstep(&s.x0, &s.eta0, &ctrl)
                .map_err(|source| SimError::Controller { agent: a + 1, source })?;
            s.x0[l] = trace.alphas[l - 1];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSample {
    pub y: f64,
    /// `y − y0`.
    pub e: f64,
    pub u: f64,
    /// `y − ŷ`.
    pub ehat: f64,
    /// `ŷ = C η_1`.
    pub yhat: f64,
    pub v: f64,
    /// Predicted `V̇ = −Σ c ê²`.
    pub vdot: f64,
    /// `‖η − x0‖` over the whole chain.
    pub eta_err: f64,
    pub theta_hat: Vec<f64>,
    pub k: Option<f64>,
    /// `max_l |x_l|`.
    pub x_sup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub y0: f64,
    pub agents: Vec<AgentSample>,
}

impl Sample {
    fn is_finite(&self) -> bool {
        self.y0.is_finite()
            && self.agents.iter().all(|a| {
                [a.y, a.e, a.u, a.ehat, a.v, a.vdot, a.eta_err]
                    .iter()
                    .chain(&a.theta_hat)
                    .chain(a.k.as_ref())
                    .all(|v| v.is_finite())
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    /// Parameter count per agent.
    pub params: Vec<usize>,
    /// Whether each agent runs the Nussbaum controller.
    pub nussbaum: Vec<bool>,
    pub samples: Vec<Sample>,
    /// Per agent, `max_n |(V_{n+1} − V_n)/h − ½(V̇_n + V̇_{n+1})|` over all
    /// integration steps; `None` for Nussbaum agents, whose `V` obeys no
    /// such identity.
    pub lyapunov_residual: Vec<Option<f64>>,
    /// Time at which the run was cut short by finite escape.
    pub escape: Option<f64>,
}

impl TrajectoryLog {
    pub fn agents(&self) -> usize {
        self.params.len()
    }

    /// CSV with header `t,y0`, then per agent `y<i>,e<i>,u<i>,ehat<i>,V<i>,
    /// etaerr<i>,thetahat<i>_<j>...`, then `Vdot<i>` per agent and `k<i>` for
    /// Nussbaum agents. An escaped run ends with a `# escape t=...` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,y0");
        for (i, &m) in self.params.iter().enumerate() {
            let id = i + 1;
            write!(out, ",y{id},e{id},u{id},ehat{id},V{id},etaerr{id}").unwrap();
            for j in 1..=m {
                write!(out, ",thetahat{id}_{j}").unwrap();
            }
        }
        for id in 1..=self.agents() {
            write!(out, ",Vdot{id}").unwrap();
        }
        for (i, _) in self.nussbaum.iter().enumerate().filter(|(_, n)| **n) {
            write!(out, ",k{}", i + 1).unwrap();
        }
        out.push('\n');
        for s in &self.samples {
            write!(out, "{},{}", s.t, s.y0).unwrap();
            for a in &s.agents {
                write!(out, ",{},{},{},{},{},{}", a.y, a.e, a.u, a.ehat, a.v, a.eta_err).unwrap();
                for th in &a.theta_hat {
                    write!(out, ",{th}").unwrap();
                }
            }
            for a in &s.agents {
                write!(out, ",{}", a.vdot).unwrap();
            }
            for a in &s.agents {
                if let Some(k) = a.k {
                    write!(out, ",{k}").unwrap();
                }
            }
            out.push('\n');
        }
        if let Some(t) = self.escape {
            writeln!(out, "# escape t={t}").unwrap();
        }
        out
    }

    /// Tracking errors only: `t,e1,...,eN`.
    pub fn errors_csv(&self) -> String {
        let mut out = String::from("t");
        for id in 1..=self.agents() {
            write!(out, ",e{id}").unwrap();
        }
        out.push('\n');
        for s in &self.samples {
            write!(out, "{}", s.t).unwrap();
            for a in &s.agents {
                write!(out, ",{}", a.e).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn metrics(&self) -> Metrics {
        Metrics::from_log(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMetrics {
    pub sup_x: f64,
    pub sup_theta_hat: f64,
    pub sup_u: f64,
    pub final_abs_e: f64,
    pub peak_abs_e: f64,
    /// Earliest log time after which `|e| < 0.05` holds for the rest of the
    /// run; `None` if the final sample is outside the band or the run escaped.
    pub time_to_tolerance: Option<f64>,
    pub bounded: bool,
    /// Max Lyapunov-identity residual; `None` for Nussbaum agents.
    pub lyapunov_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub agents: Vec<AgentMetrics>,
    pub escape: Option<f64>,
}

impl Metrics {
    pub fn from_log(log: &TrajectoryLog) -> Self {
        let agents = (0..log.agents())
            .map(|a| {
                let series = || log.samples.iter().map(move |s| &s.agents[a]);
                let sup = |f: &dyn Fn(&AgentSample) -> f64| series().map(f).fold(0.0, f64::max);
                let mut time_to_tolerance = None;
                if log.escape.is_none() {
                    for s in log.samples.iter().rev() {
                        if s.agents[a].e.abs() < TRACKING_TOL {
                            time_to_tolerance = Some(s.t);
                        } else {
                            break;
                        }
                    }
                }
                AgentMetrics {
                    sup_x: sup(&|s| s.x_sup),
                    sup_theta_hat: sup(&|s| s.theta_hat.iter().fold(0.0, |m: f64, v| m.max(v.abs()))),
                    sup_u: sup(&|s| s.u.abs()),
                    final_abs_e: series().last().map_or(f64::NAN, |s| s.e.abs()),
                    peak_abs_e: sup(&|s| s.e.abs()),
                    time_to_tolerance,
                    bounded: log.escape.is_none(),
                    lyapunov_residual: log.lyapunov_residual[a],
                }
            })
            .collect();
        Metrics {
            agents,
            escape: log.escape,
        }
    }

    pub fn all_bounded(&self) -> bool {
        self.agents.iter().all(|a| a.bounded)
    }

    pub fn max_lyapunov_residual(&self) -> f64 {
        self.agents
            .iter()
            .filter_map(|a| a.lyapunov_residual)
            .fold(0.0, f64::max)
    }
}

/// Compensators and leader alone, driven by injected output errors.
///
/// Each agent's output is replaced by `y_i = C η_{i,1} + injection(t, i)`
/// (agent index one-based), so `injection ≡ 0` isolates the observer-error
/// dynamics `η̄̇ = Â η̄`.
#[derive(Debug)]
pub struct CompensatorProbe {
    leader: LeaderModel,
    compensators: Vec<Compensator>,
    neighbors: Vec<Vec<(usize, f64)>>,
    offsets: Vec<usize>,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLog {
    pub times: Vec<f64>,
    /// `‖η̄(t)‖` stacked over all agents and links.
    pub norms: Vec<f64>,
}

impl CompensatorProbe {
    pub fn new(leader: &LeaderModel, graph: &DiGraph, orders: &[usize], k: &DVector<f64>) -> Result<Self, SimError> {
        if graph.agents() != orders.len() {
            return Err(SimError::Scenario(format!(
                "graph has {} agents, {} orders given",
                graph.agents(),
                orders.len()
            )));
        }
        let nu = leader.dim();
        let mut offsets = Vec::new();
        let mut off = nu;
        let mut compensators = Vec::new();
        for &r in orders {
            offsets.push(off);
            off += (r + 1) * nu;
            compensators.push(Compensator::new(leader, k.clone(), r)?);
        }
        Ok(CompensatorProbe {
            leader: leader.clone(),
            compensators,
            neighbors: (1..=orders.len()).map(|i| graph.in_neighbors(i)).collect(),
            offsets,
            len: off,
        })
    }

    fn output(&self, eta: &[f64]) -> f64 {
        self.leader.c.iter().zip(eta).map(|(c, e)| c * e).sum()
    }

    fn deriv(&self, t: f64, z: &[f64], out: &mut [f64], injection: &dyn Fn(f64, usize) -> f64) {
        let nu = self.leader.dim();
        out[..nu].copy_from_slice(leader_deriv(&z[..nu], &self.leader).as_slice());
        let y0 = self.output(&z[..nu]);
        let y: Vec<f64> = self
            .offsets
            .iter()
            .enumerate()
            .map(|(a, &off)| self.output(&z[off..off + nu]) + injection(t, a + 1))
            .collect();
        for (a, comp) in self.compensators.iter().enumerate() {
            let entries = self.neighbors[a]
                .iter()
                .map(|&(j, w)| (j, w, if j == 0 { y0 } else { y[j - 1] }))
                .collect();
            let nbrs = NeighborOutputs::new(entries).expect("graph weights are positive");
            let range = self.offsets[a]..self.offsets[a] + comp.flat_len();
            comp.deriv_flat(&z[range.clone()], y[a], &nbrs, &mut out[range]);
        }
    }

    fn error_norm(&self, z: &[f64]) -> f64 {
        let nu = self.leader.dim();
        let x0 = &z[..nu];
        z[nu..]
            .chunks(nu)
            .flat_map(|link| link.iter().zip(x0).map(|(e, x)| (e - x) * (e - x)))
            .sum::<f64>()
            .sqrt()
    }

    /// Integrates from `x0` and the given chains, sampling `‖η̄‖` every
    /// `stride` steps.
    pub fn run(
        &self,
        eta0: &[CompensatorState],
        injection: &dyn Fn(f64, usize) -> f64,
        integration: Integration,
    ) -> ProbeLog {
        let nu = self.leader.dim();
        let mut z = vec![0.0; self.len];
        z[..nu].copy_from_slice(self.leader.x0.as_slice());
        for (off, chain) in self.offsets.iter().zip(eta0) {
            let flat = chain.to_flat();
            z[*off..off + flat.len()].copy_from_slice(&flat);
        }
        let mut log = ProbeLog {
            times: Vec::new(),
            norms: Vec::new(),
        };
        let steps = integration.steps();
        for n in 0..=steps {
            let t = n as f64 * integration.h;
            if n % integration.stride == 0 {
                log.times.push(t);
                log.norms.push(self.error_norm(&z));
            }
            if n == steps {
                break;
            }
            z = rk4_step::<()>(
                |s, y, dy| {
                    self.deriv(s, y, dy, injection);
                    Ok(())
                },
                t,
                &z,
                integration.h,
            )
            .expect("probe derivative is infallible");
        }
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::graph::Edge;
    use nalgebra::{DMatrix, RowDVector};

    fn oscillator(x0: [f64; 2]) -> LeaderModel {
        LeaderModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            RowDVector::from_row_slice(&[1.0, 0.0]),
            DVector::from_row_slice(&x0),
        )
        .unwrap()
    }

    fn agent(rows: &[&str], theta: f64) -> AgentModel {
        let regs = rows
            .iter()
            .enumerate()
            .map(|(l, s)| vec![parse(s, l + 1).unwrap()])
            .collect();
        AgentModel::new(regs, DVector::from_element(1, theta), vec![1.0; rows.len()], Direction::Known).unwrap()
    }

    fn small_scenario() -> Scenario {
        let setup = |rows: &[&str], theta: f64, x0: Vec<f64>| {
            let model = agent(rows, theta);
            let r = model.order();
            AgentSetup {
                model,
                x0,
                theta_hat0: DVector::zeros(1),
                eta0: CompensatorState::zeros(r, 2),
                k0: 0.0,
            }
        };
        Scenario {
            leader: oscillator([1.0, -1.0]),
            graph: DiGraph::from_edges(2, &[Edge::new(0, 1, 1.0), Edge::new(1, 2, 1.0)]).unwrap(),
            agents: vec![
                setup(&["x1^2", "sin(x2)"], 2.5, vec![0.1, -0.2]),
                setup(&["cos(x1)"], -1.0, vec![-0.5]),
            ],
            mu: MuChoice::Fixed(12.8),
            integration: Integration {
                h: 1e-3,
                t_end: 2.0,
                stride: 10,
            },
        }
    }

    #[test]
    fn leader_derivative_examples() {
        let l = oscillator([0.0, 0.0]);
        assert_eq!(leader_deriv(&[1.0, -1.0], &l).as_slice(), &[-1.0, -1.0]);
        assert_eq!(leader_deriv(&[0.0, 0.0], &l).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn agent_derivative_examples() {
        let m = agent(&["x1^2", "sin(x2)"], 2.5);
        let d = agent_deriv(&[0.1, -0.2], 0.0, &m).unwrap();
        assert!((d[0] - (-0.175)).abs() < 1e-15);
        assert!((d[1] - 2.5 * (-0.2f64).sin()).abs() < 1e-15);
        assert!((d[1] - (-0.496_673_32)).abs() < 1e-8);

        let m = agent(&["cos(x1)"], -1.0);
        assert_eq!(agent_deriv(&[0.0], 1.0, &m).unwrap()[0], 0.0);
        let zero = agent(&["x1^2", "sin(x2)"], 3.0);
        assert_eq!(agent_deriv(&[0.0, 0.0], 0.0, &zero).unwrap().as_slice(), &[0.0, 0.0]);

        let nb = AgentModel::new(
            vec![vec![parse("x1", 1).unwrap()]],
            DVector::from_element(1, 0.0),
            vec![1.0],
            Direction::Nussbaum { b: -2.0 },
        )
        .unwrap();
        assert_eq!(agent_deriv(&[0.3], 1.5, &nb).unwrap()[0], -3.0);
    }

    #[test]
    fn rk4_examples() {
        let y = rk4_step::<()>(|_, y, dy| {
            dy[0] = -y[0];
            Ok(())
        }, 0.0, &[1.0], 0.1)
        .unwrap();
        let h: f64 = 0.1;
        let poly = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((y[0] - poly).abs() < 1e-15);
        // The RK4 polynomial sits within local truncation error of e^{-0.1}.
        assert!((y[0] - 0.904_837_418).abs() < 1e-7);

        let same = rk4_step::<()>(|_, _, dy| {
            dy.fill(0.0);
            Ok(())
        }, 0.0, &[1.5, -2.0], 0.3)
        .unwrap();
        assert_eq!(same, vec![1.5, -2.0]);
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        let mut s = small_scenario();
        s.graph = DiGraph::from_edges(2, &[Edge::new(0, 1, 1.0)]).unwrap();
        assert_eq!(s.validate(), Err(SimError::NoSpanningTree(vec![2])));

        let mut s = small_scenario();
        s.leader.a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(s.validate(), Err(SimError::Leader(GainError::NotSemiSimple { .. }))));

        let mut s = small_scenario();
        s.agents[0].x0.pop();
        assert!(matches!(s.validate(), Err(SimError::Scenario(_))));

        let mut s = small_scenario();
        s.mu = MuChoice::Fixed(0.5);
        assert!(matches!(ClosedLoop::new(&s), Err(SimError::Gain(GainError::MuBelowBound { .. }))));
    }

    #[test]
    fn log_grid_and_csv_layout() {
        let log = run(&small_scenario()).unwrap();
        assert_eq!(log.samples.len(), 201);
        assert!(log.escape.is_none());
        for (n, s) in log.samples.iter().enumerate() {
            assert_eq!(s.t, (10 * n) as f64 * 1e-3);
        }
        let csv = log.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "t,y0,y1,e1,u1,ehat1,V1,etaerr1,thetahat1_1,y2,e2,u2,ehat2,V2,etaerr2,thetahat2_1,Vdot1,Vdot2"
        );
        assert_eq!(csv.lines().count(), 202);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 18));
        assert_eq!(log.errors_csv().lines().next().unwrap(), "t,e1,e2");
    }

    #[test]
    fn manifold_start_stays_on_manifold() {
        let mut s = small_scenario();
        place_on_manifold(&mut s).unwrap();
        // Second-order agent: x2 = C A x0 − ψ_1 θ = −1 − 2.5 · 1².
        assert!((s.agents[0].x0[1] - (-1.0 - 2.5)).abs() < 1e-12);
        let log = run(&s).unwrap();
        let metrics = log.metrics();
        for a in &metrics.agents {
            assert_eq!(a.time_to_tolerance, Some(0.0));
            assert!(a.peak_abs_e < 1e-9, "{}", a.peak_abs_e);
        }
    }

    #[test]
    fn escape_is_reported() {
        // ψ = x1^3 with a huge wrong estimate drives the plant off quickly.
        let mut s = small_scenario();
        s.agents[1].model = AgentModel::new(
            vec![vec![parse("x1^3", 1).unwrap()]],
            DVector::from_element(1, 50.0),
            vec![1.0],
            Direction::Known,
        )
        .unwrap();
        s.agents[1].x0 = vec![40.0];
        let log = run(&s).unwrap();
        assert!(log.escape.is_some());
        assert!(log.to_csv().trim_end().lines().last().unwrap().starts_with("# escape t="));
        let metrics = log.metrics();
        assert!(!metrics.all_bounded());
        assert!(metrics.agents.iter().all(|a| a.time_to_tolerance.is_none()));
    }

    #[test]
    fn decomposition_identity_holds_at_every_sample() {
        let log = run(&small_scenario()).unwrap();
        for s in &log.samples {
            for a in &s.agents {
                // e = (y − ŷ) + C(η_1 − x0), with C(η_1 − x0) = ŷ − y0.
                let rhs = a.ehat + (a.yhat - s.y0);
                assert!((a.e - rhs).abs() <= 1e-12 * (1.0 + a.e.abs()));
            }
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let s = small_scenario();
        assert_eq!(run(&s).unwrap().to_csv(), run(&s).unwrap().to_csv());
    }

    #[test]
    fn control_reads_only_own_slots() {
        let s = small_scenario();
        let cl = ClosedLoop::new(&s).unwrap();
        let z = cl.initial_state();
        let u1 = cl.agent_control(0, &z).unwrap();
        let mut perturbed = z.clone();
        let (x, eta, th, _) = cl.agent_ranges(1);
        for i in x.chain(eta).chain(th) {
            perturbed[i] += 0.37;
        }
        assert_eq!(cl.agent_control(0, &perturbed).unwrap().to_bits(), u1.to_bits());
    }
}
