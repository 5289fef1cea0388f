//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! [leader]
//! a = [[0.0, 1.0], [-1.0, 0.0]]   # row-major
//! c = [1.0, 0.0]
//! x0 = [1.0, -1.0]
//!
//! [graph]
//! # node 0 is the leader, agents are 1..N in the order of [[agents]]
//! edges = [{ from = 0, to = 1, weight = 1.0 }, { from = 1, to = 2 }]
//!
//! [design]
//! mu = 12.8          # or "auto"
//!
//! [integration]
//! h = 1e-3
//! T = 40.0
//! stride = 10
//!
//! [[agents]]
//! order = 2
//! regressors = [["x1^2"], ["sin(x2)"]]   # one row per state, one column per parameter
//! theta = [2.5]
//! theta_hat0 = [1.2]                     # default: zeros
//! x0 = [0.1, -0.2]
//! eta0 = [[0.1, 0.2], [1.0, -1.5], [-1.0, -0.2]]   # default: zeros
//! gains = [1.0, 1.0]
//! mode = "known"                         # or "nussbaum" with b = ... and k0 = ...
//! ```
//!
//! Edge weight defaults to 1. `[design]` and `[integration]` may be omitted
//! (`mu = "auto"`, `h = 1e-3`, `T = 30`, `stride = 10`).

use std::fmt;

use dcomp_core::expr::{parse, Expr, ExprError};
use dcomp_core::{
    AgentModel, AgentSetup, AugmentedSpec, CompensatorState, ControllerError, DiGraph, Direction, Edge, GraphError,
    Integration, LeaderModel, MuChoice, Scenario, SimError,
};
use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{field}: {msg}")]
    Field { field: String, msg: String },
    #[error("{field}: {source}")]
    Expr {
        field: String,
        #[source]
        source: ExprError,
    },
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Invalid(#[from] SimError),
}

fn field_err(field: impl Into<String>, msg: impl Into<String>) -> LoadError {
    LoadError::Field {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub leader: LeaderSection,
    pub graph: GraphSection,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub integration: IntegrationSection,
    pub agents: Vec<AgentSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSection {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub edges: Vec<EdgeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub from: usize,
    pub to: usize,
    #[serde(default = "unit")]
    pub weight: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    #[serde(default)]
    pub mu: MuEntry,
}

/// `mu = 12.8` or `mu = "auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MuEntry {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for MuEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MuEntry::Auto => s.serialize_str("auto"),
            MuEntry::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for MuEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl de::Visitor<'_> for Visitor {
            type Value = MuEntry;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"auto\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<MuEntry, E> {
                Ok(MuEntry::Fixed(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<MuEntry, E> {
                Ok(MuEntry::Fixed(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<MuEntry, E> {
                if v == "auto" {
                    Ok(MuEntry::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(Visitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    pub h: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub stride: usize,
}

impl Default for IntegrationSection {
    fn default() -> Self {
        let d = Integration::default();
        IntegrationSection {
            h: d.h,
            t_end: d.t_end,
            stride: d.stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Known,
    Nussbaum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub order: usize,
    pub regressors: Vec<Vec<String>>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_hat0: Option<Vec<f64>>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<Vec<Vec<f64>>>,
    pub gains: Vec<f64>,
    pub mode: Mode,
    /// Input gain, Nussbaum mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Initial Nussbaum gain, Nussbaum mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, LoadError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario files serialize")
    }

    pub fn leader(&self) -> Result<LeaderModel, LoadError> {
        let l = &self.leader;
        let nu = l.a.len();
        if let Some(row) = l.a.iter().position(|r| r.len() != nu) {
            return Err(field_err(
                format!("leader.a[{row}]"),
                format!("has {} entries, A must be {nu}x{nu}", l.a[row].len()),
            ));
        }
        let a = DMatrix::from_row_iterator(nu, nu, l.a.iter().flatten().copied());
        LeaderModel::new(a, RowDVector::from_row_slice(&l.c), DVector::from_row_slice(&l.x0))
            .map_err(|e| field_err("leader", e.to_string()))
    }

    pub fn graph(&self) -> Result<DiGraph, LoadError> {
        let edges: Vec<Edge> = self
            .graph
            .edges
            .iter()
            .map(|e| Edge::new(e.from, e.to, e.weight))
            .collect();
        Ok(DiGraph::from_edges(self.agents.len(), &edges)?)
    }

    /// Declared agent orders.
    pub fn orders(&self) -> Result<AugmentedSpec, LoadError> {
        AugmentedSpec::new(self.agents.iter().map(|a| a.order).collect()).map_err(LoadError::Graph)
    }

    /// Builds the scenario and checks every design assumption.
    pub fn to_scenario(&self) -> Result<Scenario, LoadError> {
        let leader = self.leader()?;
        let graph = self.graph()?;
        let agents = self
            .agents
            .iter()
            .enumerate()
            .map(|(a, s)| s.to_setup(a, leader.dim()))
            .collect::<Result<Vec<_>, _>>()?;
        let mu = match self.design.mu {
            MuEntry::Auto => MuChoice::Auto,
            MuEntry::Fixed(v) => MuChoice::Fixed(v),
        };
        let it = &self.integration;
        let scenario = Scenario {
            leader,
            graph,
            agents,
            mu,
            integration: Integration {
                h: it.h,
                t_end: it.t_end,
                stride: it.stride,
            },
        };
        scenario.validate()?;
        scenario.design()?;
        Ok(scenario)
    }

    /// Inverse of [`ScenarioFile::to_scenario`].
    pub fn from_scenario(s: &Scenario) -> Self {
        let a = &s.leader.a;
        ScenarioFile {
            leader: LeaderSection {
                a: a.row_iter().map(|r| r.iter().copied().collect()).collect(),
                c: s.leader.c.iter().copied().collect(),
                x0: s.leader.x0.iter().copied().collect(),
            },
            graph: GraphSection {
                edges: s
                    .graph
                    .edges()
                    .into_iter()
                    .map(|e| EdgeEntry {
                        from: e.from,
                        to: e.to,
                        weight: e.weight,
                    })
                    .collect(),
            },
            design: DesignSection {
                mu: match s.mu {
                    MuChoice::Auto => MuEntry::Auto,
                    MuChoice::Fixed(v) => MuEntry::Fixed(v),
                },
            },
            integration: IntegrationSection {
                h: s.integration.h,
                t_end: s.integration.t_end,
                stride: s.integration.stride,
            },
            agents: s.agents.iter().map(AgentSection::from_setup).collect(),
        }
    }
}

impl AgentSection {
    fn to_setup(&self, index: usize, nu: usize) -> Result<AgentSetup, LoadError> {
        let id = index + 1;
        let f = |name: &str| format!("agents[{id}].{name}");
        let r = self.order;
        if r == 0 {
            return Err(field_err(f("order"), "must be at least 1"));
        }
        if self.regressors.len() != r {
            return Err(field_err(
                f("regressors"),
                format!("has {} rows, order is {r}", self.regressors.len()),
            ));
        }
        let m = self.theta.len();
        let mut rows = Vec::with_capacity(r);
        for (l, row) in self.regressors.iter().enumerate() {
            if row.len() != m {
                return Err(field_err(
                    f(&format!("regressors[{}]", l + 1)),
                    format!("has {} entries, theta has {m}", row.len()),
                ));
            }
            let parsed = row
                .iter()
                .enumerate()
                .map(|(j, text)| {
                    parse(text, l + 1).map_err(|source| LoadError::Expr {
                        field: f(&format!("regressors[{}][{}]", l + 1, j + 1)),
                        source,
                    })
                })
                .collect::<Result<Vec<Expr>, _>>()?;
            rows.push(parsed);
        }
        let direction = match self.mode {
            Mode::Known => {
                if self.b.is_some() || self.k0.is_some() {
                    return Err(field_err(f("mode"), "b and k0 apply to nussbaum mode only"));
                }
                Direction::Known
            }
            Mode::Nussbaum => Direction::Nussbaum {
                b: self.b.ok_or_else(|| field_err(f("b"), "required in nussbaum mode"))?,
            },
        };
        let model = AgentModel::new(rows, DVector::from_row_slice(&self.theta), self.gains.clone(), direction)
            .map_err(|e| match e {
                ControllerError::Expr(source) => LoadError::Expr {
                    field: f("regressors"),
                    source,
                },
                other => field_err(format!("agents[{id}]"), other.to_string()),
            })?;
        let theta_hat0 = match &self.theta_hat0 {
            Some(v) if v.len() != m => {
                return Err(field_err(f("theta_hat0"), format!("has {} entries, theta has {m}", v.len())))
            }
            Some(v) => DVector::from_row_slice(v),
            None => DVector::zeros(m),
        };
        if self.x0.len() != r {
            return Err(field_err(f("x0"), format!("has {} entries, order is {r}", self.x0.len())));
        }
        let eta0 = match &self.eta0 {
            Some(links) => {
                if links.len() != r + 1 {
                    return Err(field_err(f("eta0"), format!("has {} links, needs order + 1 = {}", links.len(), r + 1)));
                }
                if let Some(l) = links.iter().position(|v| v.len() != nu) {
                    return Err(field_err(
                        f(&format!("eta0[{}]", l + 1)),
                        format!("has {} entries, leader dimension is {nu}", links[l].len()),
                    ));
                }
                CompensatorState::new(links.iter().map(|v| DVector::from_row_slice(v)).collect())
                    .map_err(|e| field_err(f("eta0"), e.to_string()))?
            }
            None => CompensatorState::zeros(r, nu),
        };
        Ok(AgentSetup {
            model,
            x0: self.x0.clone(),
            theta_hat0,
            eta0,
            k0: self.k0.unwrap_or(0.0),
        })
    }

    fn from_setup(s: &AgentSetup) -> Self {
        let model = &s.model;
        let (mode, b, k0) = match model.direction() {
            Direction::Known => (Mode::Known, None, None),
            Direction::Nussbaum { b } => (Mode::Nussbaum, Some(b), Some(s.k0)),
        };
        AgentSection {
            order: model.order(),
            regressors: model
                .regressors()
                .iter()
                .map(|row| row.iter().map(|e| e.to_string()).collect())
                .collect(),
            theta: model.theta().iter().copied().collect(),
            theta_hat0: Some(s.theta_hat0.iter().copied().collect()),
            x0: s.x0.clone(),
            eta0: Some(s.eta0.eta.iter().map(|v| v.iter().copied().collect()).collect()),
            gains: model.gains().to_vec(),
            mode,
            b,
            k0,
        }
    }
}

/// Parses and validates scenario text.
pub fn load_str(text: &str) -> Result<Scenario, LoadError> {
    ScenarioFile::parse(text)?.to_scenario()
}

/// Serializes a scenario; [`load_str`] of the result gives back an equal
/// scenario.
pub fn save_string(scenario: &Scenario) -> String {
    ScenarioFile::from_scenario(scenario).to_toml()
}
