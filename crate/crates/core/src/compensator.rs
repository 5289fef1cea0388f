//! Per-agent distributed dynamic compensator.
//!
//! Agent `i` runs a chain of `r_i + 1` copies of the leader dynamics:
//!
//! ```text
//! η̇_l     = A η_l − K C (η_l − η_{l+1}),                       l = 1..r_i
//! η̇_{r+1} = A η_{r+1} − K C Σ_j a_ij (η_{r+1} − η_1) − K e_v
//! e_v     = Σ_j a_ij (y_i − y_j)
//! ```
//!
//! The only network input is [`NeighborOutputs`], a list of scalar outputs,
//! so a compensator cannot observe any neighbor's internal state.

use nalgebra::{DVector, RowDVector};
use thiserror::Error;

use crate::gain::LeaderModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompensatorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("neighbor {id}: weight {weight} must be positive and finite")]
    BadWeight { id: usize, weight: f64 },
}

/// Chain `(η_1, ..., η_{r+1})` of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatorState {
    pub eta: Vec<DVector<f64>>,
}

impl CompensatorState {
    pub fn new(eta: Vec<DVector<f64>>) -> Result<Self, CompensatorError> {
        let Some(first) = eta.first() else {
            return Err(CompensatorError::Dimension("empty compensator chain".into()));
        };
        let nu = first.len();
        if eta.len() < 2 {
            return Err(CompensatorError::Dimension(format!(
                "chain needs at least 2 links (order >= 1), got {}",
                eta.len()
            )));
        }
        if let Some(l) = eta.iter().position(|v| v.len() != nu) {
            return Err(CompensatorError::Dimension(format!(
                "link {} has {} entries, link 1 has {nu}",
                l + 1,
                eta[l].len()
            )));
        }
        Ok(CompensatorState { eta })
    }

    pub fn zeros(order: usize, nu: usize) -> Self {
        CompensatorState {
            eta: vec![DVector::zeros(nu); order + 1],
        }
    }

    /// Order `r` of the agent the chain belongs to.
    pub fn order(&self) -> usize {
        self.eta.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.eta[0].len()
    }

    /// Links concatenated, `(r+1) ν` entries.
    pub fn to_flat(&self) -> Vec<f64> {
        self.eta.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], nu: usize) -> Result<Self, CompensatorError> {
        if nu == 0 || !flat.len().is_multiple_of(nu) {
            return Err(CompensatorError::Dimension(format!(
                "{} entries do not split into links of size {nu}",
                flat.len()
            )));
        }
        Self::new(flat.chunks(nu).map(DVector::from_column_slice).collect())
    }
}

/// Outputs `(j, a_ij, y_j)` received by one agent. Node 0 is the leader.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborOutputs {
    entries: Vec<(usize, f64, f64)>,
}

impl NeighborOutputs {
    pub fn new(entries: Vec<(usize, f64, f64)>) -> Result<Self, CompensatorError> {
        for &(id, weight, _) in &entries {
            if !(weight.is_finite() && weight > 0.0) {
                return Err(CompensatorError::BadWeight { id, weight });
            }
        }
        Ok(NeighborOutputs { entries })
    }

    pub fn entries(&self) -> &[(usize, f64, f64)] {
        &self.entries
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// `Σ_j a_ij (y_i − y_j)`.
    pub fn disagreement(&self, y_i: f64) -> f64 {
        self.entries.iter().map(|&(_, a, y)| a * (y_i - y)).sum()
    }
}

/// Compensator of one agent: leader model plus the designed gain `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Compensator {
    a: nalgebra::DMatrix<f64>,
    c: RowDVector<f64>,
    k: DVector<f64>,
    order: usize,
}

impl Compensator {
    pub fn new(leader: &LeaderModel, k: DVector<f64>, order: usize) -> Result<Self, CompensatorError> {
        if k.len() != leader.dim() {
            return Err(CompensatorError::Dimension(format!(
                "K has {} entries, leader dimension is {}",
                k.len(),
                leader.dim()
            )));
        }
        if order == 0 {
            return Err(CompensatorError::Dimension("order must be at least 1".into()));
        }
        Ok(Compensator {
            a: leader.a.clone(),
            c: leader.c.clone(),
            k,
            order,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Length of the flattened chain.
    pub fn flat_len(&self) -> usize {
        (self.order + 1) * self.dim()
    }

    pub fn output(&self, state: &CompensatorState) -> f64 {
        compensator_output(state, &self.c)
    }

    pub fn deriv(
        &self,
        state: &CompensatorState,
        y_i: f64,
        nbrs: &NeighborOutputs,
    ) -> Result<Vec<DVector<f64>>, CompensatorError> {
        if state.order() != self.order || state.dim() != self.dim() {
            return Err(CompensatorError::Dimension(format!(
                "state has {} links of size {}, compensator expects {} of size {}",
                state.eta.len(),
                state.dim(),
                self.order + 1,
                self.dim()
            )));
        }
        let flat = state.to_flat();
        let mut out = vec![0.0; flat.len()];
        self.deriv_flat(&flat, y_i, nbrs, &mut out);
        Ok(out.chunks(self.dim()).map(DVector::from_column_slice).collect())
    }

    /// Flat-slice form of [`Compensator::deriv`]; `eta` and `out` hold
    /// `flat_len()` entries.
    pub fn deriv_flat(&self, eta: &[f64], y_i: f64, nbrs: &NeighborOutputs, out: &mut [f64]) {
        let nu = self.dim();
        let r = self.order;
        let link = |l: usize| &eta[l * nu..(l + 1) * nu];
        let c_dot = |v: &[f64]| -> f64 { self.c.iter().zip(v).map(|(c, x)| c * x).sum() };

        for l in 0..=r {
            let (coupling, forcing) = if l < r {
                (c_dot(link(l)) - c_dot(link(l + 1)), 0.0)
            } else {
                (
                    nbrs.total_weight() * (c_dot(link(r)) - c_dot(link(0))),
                    nbrs.disagreement(y_i),
                )
            };
            let eta_l = link(l);
            for p in 0..nu {
                let a_eta: f64 = (0..nu).map(|q| self.a[(p, q)] * eta_l[q]).sum();
                out[l * nu + p] = a_eta - self.k[p] * (coupling + forcing);
            }
        }
    }
}

/// Free-function form: `η̇` for one agent given its own output and the
/// outputs it receives.
pub fn compensator_deriv(
    state: &CompensatorState,
    y_i: f64,
    nbrs: &NeighborOutputs,
    leader: &LeaderModel,
    k: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, CompensatorError> {
    Compensator::new(leader, k.clone(), state.order())?.deriv(state, y_i, nbrs)
}

/// `ŷ = C η_1`.
pub fn compensator_output(state: &CompensatorState, c: &RowDVector<f64>) -> f64 {
    c.dot(&state.eta[0].transpose())
}

/// `η_l − x0` for every link.
pub fn observer_error(state: &CompensatorState, x0: &DVector<f64>) -> Vec<DVector<f64>> {
    state.eta.iter().map(|e| e - x0).collect()
}
