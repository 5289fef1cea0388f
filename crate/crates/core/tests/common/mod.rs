//! Shared oracles for the integration tests.

#![allow(dead_code)]

use dcomp_core::controller::VarLayout;
use dcomp_core::expr::{parse, Expr};
use dcomp_core::gain::{LeaderModel, MuChoice};
use dcomp_core::{AgentModel, AgentSetup, CompensatorState, DiGraph, Direction, Edge, Integration, Scenario};
use nalgebra::{DMatrix, DVector, RowDVector};

fn c(v: f64) -> Expr {
    Expr::Const(v)
}

fn sum(terms: impl IntoIterator<Item = Expr>) -> Expr {
    terms.into_iter().fold(c(0.0), |acc, t| acc + t)
}

/// Virtual controls `α_1..α_r` built as expression trees over the
/// controller's variable layout and differentiated symbolically. Shares no
/// code with the jet-based recursion apart from the expression type.
pub fn symbolic_alphas(model: &AgentModel, leader: &LeaderModel, k: &DVector<f64>) -> Vec<Expr> {
    let r = model.order();
    let nu = leader.dim();
    let m = model.param_dim();
    let lay = VarLayout { order: r, nu, params: m };
    let x = |l: usize| Expr::Var(lay.x(l));
    let eta = |l: usize, p: usize| Expr::Var(lay.eta(l, p));
    let th = |j: usize| Expr::Var(lay.theta(j));
    let c_eta = |l: usize| sum((0..nu).map(|p| c(leader.c[p]) * eta(l, p)));
    let ck: f64 = (0..nu).map(|p| leader.c[p] * k[p]).sum();
    let ca = &leader.c * &leader.a;
    let eta_dot = |l: usize, p: usize| {
        sum((0..nu).map(|q| c(leader.a[(p, q)]) * eta(l, q))) - c(k[p]) * (c_eta(l) - c_eta(l + 1))
    };
    let psi = |l: usize, j: usize| model.regressors()[l][j].clone();
    let gains = model.gains();

    let e1 = x(0) - c_eta(0);
    let mut tau: Vec<Expr> = (0..m).map(|j| psi(0, j) * e1.clone()).collect();
    let a1 = c(-gains[0]) * e1.clone() - sum((0..m).map(|j| psi(0, j) * th(j)))
        + sum((0..nu).map(|q| c(ca[q]) * eta(0, q)))
        - c(ck) * (c_eta(0) - c_eta(1));
    let mut errors = vec![e1];
    let mut alphas = vec![a1];
    for kk in 1..r {
        let prev = alphas[kk - 1].clone();
        let e = x(kk) - prev.clone();
        let w: Vec<Expr> = (0..m)
            .map(|j| psi(kk, j) - sum((0..kk).map(|l| prev.diff(lay.x(l)) * psi(l, j))))
            .collect();
        for j in 0..m {
            tau[j] = tau[j].clone() + w[j].clone() * e.clone();
        }
        let mut a = c(-gains[kk]) * e.clone() - errors[kk - 1].clone() - sum((0..m).map(|j| w[j].clone() * th(j)));
        a = a + sum((0..kk).map(|l| prev.diff(lay.x(l)) * x(l + 1)));
        a = a + sum((0..=kk).flat_map(|l| (0..nu).map(move |p| (l, p))).map(|(l, p)| prev.diff(lay.eta(l, p)) * eta_dot(l, p)));
        a = a + sum((0..m).map(|j| prev.diff(lay.theta(j)) * tau[j].clone()));
        for l in 1..kk {
            let cross = sum((0..m).map(|j| alphas[l - 1].diff(lay.theta(j)) * w[j].clone()));
            a = a + errors[l].clone() * cross;
        }
        errors.push(e);
        alphas.push(a);
    }
    alphas
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut p = z.to_vec();
            let mut q = z.to_vec();
            p[i] += h;
            q[i] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        })
        .collect()
}

fn oscillator(x0: [f64; 2]) -> LeaderModel {
    LeaderModel::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        RowDVector::from_row_slice(&[1.0, 0.0]),
        DVector::from_row_slice(&x0),
    )
    .unwrap()
}

fn regressors(rows: &[&str]) -> Vec<Vec<Expr>> {
    rows.iter()
        .enumerate()
        .map(|(l, text)| vec![parse(text, l + 1).unwrap()])
        .collect()
}

fn chain(links: &[[f64; 2]]) -> CompensatorState {
    CompensatorState::new(links.iter().map(|v| DVector::from_row_slice(v)).collect()).unwrap()
}

/// Five-agent experiment: oscillator leader, leader-rooted chain graph,
/// agents 1-3 of order 2 with `(x1^2, sin(x2))`, agents 4-5 of order 1 with
/// `cos(x1)`, unit gains, `μ = 12.8`.
pub fn paper_scenario(integration: Integration) -> Scenario {
    let theta = [2.5, 1.2, -2.0, -1.0, 0.5];
    let theta_hat0 = [1.2, -1.0, 0.5, 0.2, -0.75];
    let x0: [&[f64]; 5] = [&[0.1, -0.2], &[0.5, 1.2], &[-2.0, 1.0], &[-0.5], &[0.25]];
    let eta0: [&[[f64; 2]]; 5] = [
        &[[0.1, 0.2], [1.0, -1.5], [-1.0, -0.2]],
        &[[1.0, -0.5], [-0.25, 0.3], [0.5, 0.2]],
        &[[0.5, -0.4], [0.6, -1.0], [3.0, -0.2]],
        &[[2.0, -1.4], [2.0, 1.0]],
        &[[1.0, 2.0], [0.5, -0.75]],
    ];
    let agents = (0..5)
        .map(|i| {
            let rows: &[&str] = if i < 3 { &["x1^2", "sin(x2)"] } else { &["cos(x1)"] };
            let model = AgentModel::new(
                regressors(rows),
                DVector::from_element(1, theta[i]),
                vec![1.0; rows.len()],
                Direction::Known,
            )
            .unwrap();
            AgentSetup {
                model,
                x0: x0[i].to_vec(),
                theta_hat0: DVector::from_element(1, theta_hat0[i]),
                eta0: chain(eta0[i]),
                k0: 0.0,
            }
        })
        .collect();
    let edges: Vec<Edge> = (0..5).map(|i| Edge::new(i, i + 1, 1.0)).collect();
    Scenario {
        leader: oscillator([1.0, -1.0]),
        graph: DiGraph::from_edges(5, &edges).unwrap(),
        agents,
        mu: MuChoice::Fixed(12.8),
        integration,
    }
}

/// Two agents with control gains `b = +1` and `b = -2`, both in Nussbaum
/// mode.
pub fn nussbaum_scenario(integration: Integration) -> Scenario {
    let agent = |rows: &[&str], theta: f64, b: f64, x0: Vec<f64>| {
        let r = rows.len();
        AgentSetup {
            model: AgentModel::new(regressors(rows), DVector::from_element(1, theta), vec![1.0; r], Direction::Nussbaum { b })
                .unwrap(),
            x0,
            theta_hat0: DVector::zeros(1),
            eta0: CompensatorState::zeros(r, 2),
            k0: 0.0,
        }
    };
    Scenario {
        leader: oscillator([1.0, 0.0]),
        graph: DiGraph::from_edges(2, &[Edge::new(0, 1, 1.0), Edge::new(1, 2, 1.0)]).unwrap(),
        agents: vec![
            agent(&["cos(x1)"], 0.8, 1.0, vec![0.5]),
            agent(&["sin(x1)", "x2 * cos(x1)"], -0.5, -2.0, vec![-0.5, 0.0]),
        ],
        mu: MuChoice::Auto,
        integration,
    }
}
