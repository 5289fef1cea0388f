//! Adaptive backstepping controller with tuning functions.
//!
//! For an agent in parametric strict-feedback form
//!
//! ```text
//! ẋ_l = x_{l+1} + ψ_l(x)ᵀ θ,   l < r
//! ẋ_r = b u + ψ_r(x)ᵀ θ
//! ```
//!
//! the controller tracks its own compensator output `ŷ = C η_1` using only
//! its own state, its own compensator chain and its estimate `θ̂`. Step `k`
//! (one-based) defines
//!
//! ```text
//! ê_1 = x_1 − C η_1,   ê_k = x_k − α_{k−1}
//! w_k = ψ_k − Σ_{l<k} ∂α_{k−1}/∂x_l ψ_l,     τ_k = τ_{k−1} + w_k ê_k
//! α_k = −ê_{k−1} − c_k ê_k − w_kᵀθ̂ + Σ_{l<k} ∂α_{k−1}/∂x_l x_{l+1}
//!       + Σ_l ∂α_{k−1}/∂η_l η̇_l + ∂α_{k−1}/∂θ̂ τ_k
//!       + Σ_{l=2}^{k−1} ê_l ∂α_{l−1}/∂θ̂ w_k
//! ```
//!
//! with `α_1 = −c_1 ê_1 − ψ_1ᵀθ̂ + CAη_1 − CKC(η_1 − η_2)`, `u = α_r` and
//! `θ̂̇ = τ_r`. Step `k` needs first partials of `α_{k−1}`, whose own
//! definition contains first partials of `α_{k−2}`, and so on, so `α_1` is
//! needed to order `r − 1`. The recursion is evaluated on [`Jet`]s of that
//! degree; each differentiation lowers the degree by one.
//!
//! With unknown control direction the final control is modulated by a
//! Nussbaum gain: `u = −N(k) α_r`, `k̇ = −ê_r α_r`, `N(k) = k² cos k`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use crate::compensator::CompensatorState;
use crate::expr::{Expr, ExprError};
use crate::gain::LeaderModel;
use crate::jet::{Jet, JetSpace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("invalid agent model: {0}")]
    Model(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("non-finite value in backstepping step {step}")]
    NonFinite { step: usize },
}

/// Sign information on the input gain `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Direction {
    /// `b = 1`.
    Known,
    /// `b ≠ 0` of unknown sign; the value is only used by the plant.
    Nussbaum { b: f64 },
}

impl Direction {
    pub fn input_gain(&self) -> f64 {
        match self {
            Direction::Known => 1.0,
            Direction::Nussbaum { b } => *b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    order: usize,
    /// `regressors[l][j]`: entry `j` of `ψ_{l+1}`.
    regressors: Vec<Vec<Expr>>,
    /// Ground truth, used by the plant and by diagnostics only.
    theta: DVector<f64>,
    gains: Vec<f64>,
    direction: Direction,
}

impl AgentModel {
    pub fn new(
        regressors: Vec<Vec<Expr>>,
        theta: DVector<f64>,
        gains: Vec<f64>,
        direction: Direction,
    ) -> Result<Self, ControllerError> {
        let order = regressors.len();
        if order == 0 {
            return Err(ControllerError::Model("order must be at least 1".into()));
        }
        let m = theta.len();
        if m == 0 {
            return Err(ControllerError::Model("parameter vector is empty".into()));
        }
        for (l, row) in regressors.iter().enumerate() {
            if row.len() != m {
                return Err(ControllerError::Model(format!(
                    "regressor row {} has {} entries, theta has {m}",
                    l + 1,
                    row.len()
                )));
            }
            if let Some(e) = row.iter().find(|e| e.max_var() > l + 1) {
                return Err(ControllerError::Model(format!(
                    "regressor row {} references x{} (only x1..x{} allowed)",
                    l + 1,
                    e.max_var(),
                    l + 1
                )));
            }
        }
        if gains.len() != order {
            return Err(ControllerError::Model(format!(
                "{} gains for order {order}",
                gains.len()
            )));
        }
        if let Some(c) = gains.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(ControllerError::Model(format!(
                "gain {c} is not strictly positive"
            )));
        }
        if let Direction::Nussbaum { b } = direction {
            if !(b.is_finite() && b != 0.0) {
                return Err(ControllerError::Model(format!(
                    "input gain b = {b} must be nonzero"
                )));
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ControllerError::Model("theta has non-finite entries".into()));
        }
        Ok(AgentModel {
            order,
            regressors,
            theta,
            gains,
            direction,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn param_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn regressors(&self) -> &[Vec<Expr>] {
        &self.regressors
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// `ψ_l(x)` for every row, as plain values.
    pub fn regressor_values(&self, x: &[f64]) -> Result<Vec<DVector<f64>>, ControllerError> {
        self.regressors
            .iter()
            .map(|row| {
                row.iter()
                    .map(|e| e.eval(x))
                    .collect::<Result<Vec<_>, _>>()
                    .map(DVector::from_vec)
            })
            .collect::<Result<_, ExprError>>()
            .map_err(Into::into)
    }
}

/// Adaptive states of one agent's controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub theta_hat: DVector<f64>,
    /// Present only with [`Direction::Nussbaum`].
    pub nussbaum_k: Option<f64>,
}

/// Intermediate quantities of one controller evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackstepTrace {
    /// `ê_1 .. ê_r`.
    pub errors: Vec<f64>,
    /// `α_1 .. α_r`; the last entry is the unmodulated control.
    pub alphas: Vec<f64>,
    /// `τ_1 .. τ_r`.
    pub taus: Vec<DVector<f64>>,
    pub u: f64,
    pub theta_hat_dot: DVector<f64>,
    pub k_dot: Option<f64>,
}

/// Index map of the variables a controller depends on:
/// `x_1..x_r`, then `η` link-major, then `θ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub order: usize,
    pub nu: usize,
    pub params: usize,
}

impl VarLayout {
    pub fn x(&self, l: usize) -> usize {
        l
    }

    pub fn eta(&self, link: usize, p: usize) -> usize {
        self.order + link * self.nu + p
    }

    pub fn theta(&self, j: usize) -> usize {
        self.order + (self.order + 1) * self.nu + j
    }

    pub fn len(&self) -> usize {
        self.theta(self.params)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, x: &[f64], eta: &[f64], theta_hat: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.len());
        z.extend_from_slice(x);
        z.extend_from_slice(eta);
        z.extend_from_slice(theta_hat);
        z
    }
}

/// `N(k) = k² cos k`.
pub fn nussbaum(k: f64) -> f64 {
    k * k * k.cos()
}

/// `(u, k̇) = (−N(k) α_r, −ê_r α_r)`.
pub fn nussbaum_control(trace: &BackstepTrace, ctrl: &ControllerState) -> (f64, f64) {
    let alpha = *trace.alphas.last().expect("trace has at least one step");
    let e = *trace.errors.last().expect("trace has at least one step");
    let k = ctrl.nussbaum_k.unwrap_or(0.0);
    (-nussbaum(k) * alpha, -e * alpha)
}

/// `V = ½ Σ ê² + ½ |θ̂ − θ|²` and the value `−Σ c ê²` its derivative takes
/// along closed-loop trajectories with known direction.
pub fn lyapunov_value(trace: &BackstepTrace, ctrl: &ControllerState, model: &AgentModel) -> (f64, f64) {
    let tracking: f64 = trace.errors.iter().map(|e| e * e).sum::<f64>() * 0.5;
    let estimation = (&ctrl.theta_hat - &model.theta).norm_squared() * 0.5;
    let vdot = -trace
        .errors
        .iter()
        .zip(&model.gains)
        .map(|(e, c)| c * e * e)
        .sum::<f64>();
    (tracking + estimation, vdot)
}

/// First backstepping step on plain floats: `(ê_1, τ_1, α_1)`.
pub fn step1(
    x1: f64,
    eta: &CompensatorState,
    theta_hat: &DVector<f64>,
    model: &AgentModel,
    leader: &LeaderModel,
    k: &DVector<f64>,
) -> Result<(f64, DVector<f64>, f64), ControllerError> {
    if eta.eta.len() < 2 || theta_hat.len() != model.param_dim() || k.len() != leader.dim() {
        return Err(ControllerError::Dimension(
            "step1 needs at least two links, matching θ̂ and K".into(),
        ));
    }
    let c = &leader.c;
    let e1 = x1 - c.dot(&eta.eta[0].transpose());
    let psi1 = DVector::from_vec(
        model.regressors[0]
            .iter()
            .map(|e| e.eval(&[x1]))
            .collect::<Result<Vec<_>, _>>()?,
    );
    let ck = c.dot(&k.transpose());
    let ca_eta = (c * &leader.a * &eta.eta[0])[0];
    let coupling = c.dot(&(&eta.eta[0] - &eta.eta[1]).transpose());
    let alpha = -model.gains[0] * e1 - psi1.dot(theta_hat) + ca_eta - ck * coupling;
    Ok((e1, psi1 * e1, alpha))
}

/// Backstepping controller for one agent, bound to the leader model and
/// compensator gain.
#[derive(Debug)]
pub struct BackstepController {
    model: AgentModel,
    a: DMatrix<f64>,
    c: RowDVector<f64>,
    k: DVector<f64>,
    /// `C A`.
    ca: RowDVector<f64>,
    /// `C K`.
    ck: f64,
    layout: VarLayout,
    space: Arc<JetSpace>,
    /// One degree higher, for gradients of the final control.
    gradient_space: OnceLock<Arc<JetSpace>>,
}

/// Jets of one recursion evaluation.
struct Recursion {
    errors: Vec<Jet>,
    alphas: Vec<Jet>,
    taus: Vec<Vec<Jet>>,
}

impl BackstepController {
    pub fn new(model: AgentModel, leader: &LeaderModel, k: DVector<f64>) -> Result<Self, ControllerError> {
        if k.len() != leader.dim() {
            return Err(ControllerError::Dimension(format!(
                "K has {} entries, leader dimension is {}",
                k.len(),
                leader.dim()
            )));
        }
        let layout = VarLayout {
            order: model.order,
            nu: leader.dim(),
            params: model.param_dim(),
        };
        let space = JetSpace::new(layout.len(), model.order - 1);
        Ok(BackstepController {
            ca: &leader.c * &leader.a,
            ck: leader.c.dot(&k.transpose()),
            a: leader.a.clone(),
            c: leader.c.clone(),
            k,
            model,
            layout,
            space,
            gradient_space: OnceLock::new(),
        })
    }

    pub fn model(&self) -> &AgentModel {
        &self.model
    }

    pub fn layout(&self) -> VarLayout {
        self.layout
    }

    /// Runs the full recursion. Inputs are the agent's own state, its own
    /// compensator chain and its own controller state.
    pub fn backstep(
        &self,
        x: &[f64],
        comp: &CompensatorState,
        ctrl: &ControllerState,
    ) -> Result<BackstepTrace, ControllerError> {
        self.backstep_flat(x, &comp.to_flat(), ctrl)
    }

    /// [`BackstepController::backstep`] with the chain given flattened.
    pub fn backstep_flat(
        &self,
        x: &[f64],
        eta: &[f64],
        ctrl: &ControllerState,
    ) -> Result<BackstepTrace, ControllerError> {
        let z = self.pack(x, eta, ctrl.theta_hat.as_slice())?;
        let rec = self.recursion(&self.space, &z)?;
        let values = |v: &[Jet]| v.iter().map(Jet::value).collect::<Vec<_>>();
        let errors = values(&rec.errors);
        let alphas = values(&rec.alphas);
        let taus: Vec<DVector<f64>> = rec
            .taus
            .iter()
            .map(|t| DVector::from_vec(values(t)))
            .collect();
        let theta_hat_dot = taus.last().expect("order >= 1").clone();
        let mut trace = BackstepTrace {
            u: *alphas.last().expect("order >= 1"),
            errors,
            alphas,
            taus,
            theta_hat_dot,
            k_dot: None,
        };
        if let Direction::Nussbaum { .. } = self.model.direction {
            let (u, k_dot) = nussbaum_control(&trace, ctrl);
            trace.u = u;
            trace.k_dot = Some(k_dot);
        }
        if !trace.u.is_finite() || trace.theta_hat_dot.iter().any(|v| !v.is_finite()) {
            return Err(ControllerError::NonFinite { step: self.model.order });
        }
        Ok(trace)
    }

    /// Gradients of `α_1 .. α_r` with respect to every variable of
    /// [`VarLayout`], computed exactly from the recursion.
    pub fn alpha_gradients(
        &self,
        x: &[f64],
        eta: &[f64],
        theta_hat: &[f64],
    ) -> Result<Vec<Vec<f64>>, ControllerError> {
        let z = self.pack(x, eta, theta_hat)?;
        let space = self
            .gradient_space
            .get_or_init(|| JetSpace::new(self.layout.len(), self.model.order));
        let rec = self.recursion(space, &z)?;
        Ok(rec
            .alphas
            .iter()
            .map(|a| (0..self.layout.len()).map(|v| a.gradient_entry(v)).collect())
            .collect())
    }

    fn pack(&self, x: &[f64], eta: &[f64], theta_hat: &[f64]) -> Result<Vec<f64>, ControllerError> {
        let l = self.layout;
        if x.len() != l.order || eta.len() != (l.order + 1) * l.nu || theta_hat.len() != l.params {
            return Err(ControllerError::Dimension(format!(
                "expected {} states, {} compensator entries and {} estimates; got {}, {}, {}",
                l.order,
                (l.order + 1) * l.nu,
                l.params,
                x.len(),
                eta.len(),
                theta_hat.len()
            )));
        }
        Ok(l.pack(x, eta, theta_hat))
    }

    fn recursion(&self, space: &Arc<JetSpace>, z: &[f64]) -> Result<Recursion, ControllerError> {
        let lay = self.layout;
        let (r, nu, m) = (lay.order, lay.nu, lay.params);
        let top = space.max_degree();
        let var = |i: usize| Jet::variable(space, i, z[i]);

        let x: Vec<Jet> = (0..r).map(|l| var(lay.x(l))).collect();
        let eta: Vec<Vec<Jet>> = (0..=r)
            .map(|l| (0..nu).map(|p| var(lay.eta(l, p))).collect())
            .collect();
        let th: Vec<Jet> = (0..m).map(|j| var(lay.theta(j))).collect();

        let psi: Vec<Vec<Jet>> = self
            .model
            .regressors
            .iter()
            .map(|row| row.iter().map(|e| e.eval_on(&x)).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()?;

        let combine = |coeffs: &[f64], v: &[Jet]| {
            let mut out = Jet::zero(space, top);
            for (c, j) in coeffs.iter().zip(v) {
                if *c != 0.0 {
                    out.axpy(*c, j);
                }
            }
            out
        };
        let c_eta: Vec<Jet> = eta.iter().map(|l| combine(self.c.as_slice(), l)).collect();
        // Chain-row compensator derivatives: η̇_l = A η_l − K C (η_l − η_{l+1}).
        let eta_dot: Vec<Vec<Jet>> = (0..r)
            .map(|l| {
                let coupling = &c_eta[l] - &c_eta[l + 1];
                (0..nu)
                    .map(|p| {
                        let row: Vec<f64> = self.a.row(p).iter().copied().collect();
                        let mut d = combine(&row, &eta[l]);
                        d.axpy(-self.k[p], &coupling);
                        d
                    })
                    .collect()
            })
            .collect();
        let dot = |a: &[Jet], b: &[Jet]| {
            let mut out = Jet::zero(space, top);
            for (p, q) in a.iter().zip(b) {
                out.add_product(p, q);
            }
            out
        };
        let finite = |j: &Jet, step: usize| {
            if j.value().is_finite() {
                Ok(())
            } else {
                Err(ControllerError::NonFinite { step })
            }
        };

        let gains = &self.model.gains;
        let e0 = &x[0] - &c_eta[0];
        let mut tau: Vec<Jet> = psi[0].iter().map(|p| p * &e0).collect();
        let mut alpha0 = combine(self.ca.as_slice(), &eta[0]) - dot(&psi[0], &th);
        alpha0.axpy(-gains[0], &e0);
        alpha0.axpy(-self.ck, &(&c_eta[0] - &c_eta[1]));
        finite(&alpha0, 1)?;

        let mut errors = vec![e0];
        let mut alphas = vec![alpha0];
        let mut taus = vec![tau.clone()];
        let mut dalpha_dtheta: Vec<Vec<Jet>> = Vec::new();

        for k in 1..r {
            let prev = &alphas[k - 1];
            let d_x: Vec<Jet> = (0..k).map(|l| prev.partial(lay.x(l))).collect();
            let d_th: Vec<Jet> = (0..m).map(|j| prev.partial(lay.theta(j))).collect();
            let e_k = &x[k] - prev;

            let w: Vec<Jet> = (0..m)
                .map(|j| {
                    let mut wj = psi[k][j].clone();
                    for l in 0..k {
                        wj = wj - &psi[l][j] * &d_x[l];
                    }
                    wj
                })
                .collect();
            for j in 0..m {
                tau[j] = &tau[j] + &(&w[j] * &e_k);
            }

            let mut alpha = Jet::zero(space, top);
            alpha.axpy(-gains[k], &e_k);
            alpha.axpy(-1.0, &errors[k - 1]);
            alpha = alpha - dot(&w, &th);
            for l in 0..k {
                alpha.add_product(&d_x[l], &x[l + 1]);
            }
            // α_{k−1} depends on links 1..k+1 (one-based); all are chain rows.
            for l in 0..=k {
                for p in 0..nu {
                    let d = prev.partial(lay.eta(l, p));
                    alpha.add_product(&d, &eta_dot[l][p]);
                }
            }
            alpha = alpha + dot(&d_th, &tau);
            for l in 1..k {
                let cross = dot(&dalpha_dtheta[l - 1], &w);
                alpha.add_product(&errors[l], &cross);
            }
            finite(&alpha, k + 1)?;

            dalpha_dtheta.push(d_th);
            errors.push(e_k);
            alphas.push(alpha);
            taus.push(tau.clone());
        }
        Ok(Recursion {
            errors,
            alphas,
            taus,
        })
    }
}
