//! Random leaders, graphs and scenarios for property tests, the acceptance
//! suite and benchmarks. All generators are driven by a caller-supplied RNG,
//! so a fixed seed gives a fixed corpus.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::compensator::CompensatorState;
use crate::controller::{AgentModel, Direction};
use crate::expr::parse;
use crate::gain::{LeaderModel, MuChoice};
use crate::graph::{DiGraph, Edge};
use crate::sim::{place_on_manifold, AgentSetup, Integration, Scenario};

fn rotation(omega: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, omega, -omega, 0.0])
}

/// Random invertible similarity `I + 0.3 R`, `R` uniform in `[-1, 1]`.
fn similarity<R: Rng>(rng: &mut R, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    loop {
        let t = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| 0.3 * rng.gen_range(-1.0..1.0));
        if let Some(inv) = t.clone().try_inverse() {
            if inv.norm() * t.norm() < 20.0 {
                return (t, inv);
            }
        }
    }
}

/// Neutrally stable, detectable leader of dimension 1, 2 or 4.
///
/// `ν = 1` is a constant signal, `ν = 2` a sinusoid, `ν = 4` a sum of two
/// sinusoids with distinct frequencies; the latter two are put in random
/// coordinates.
pub fn leader<R: Rng>(rng: &mut R, nu: usize) -> LeaderModel {
    assert!(matches!(nu, 1 | 2 | 4), "leader dimension must be 1, 2 or 4");
    loop {
        let a = match nu {
            1 => DMatrix::zeros(1, 1),
            2 => rotation(rng.gen_range(0.5..2.0)),
            _ => {
                let w1 = rng.gen_range(0.5..1.2);
                let w2 = w1 + rng.gen_range(0.3..1.0);
                let mut a = DMatrix::zeros(4, 4);
                a.view_mut((0, 0), (2, 2)).copy_from(&rotation(w1));
                a.view_mut((2, 2), (2, 2)).copy_from(&rotation(w2));
                a
            }
        };
        let (a, c) = if nu == 1 {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (a, RowDVector::from_element(1, sign * rng.gen_range(0.5..1.5)))
        } else {
            let (t, t_inv) = similarity(rng, nu);
            let c = RowDVector::from_fn(nu, |_, _| rng.gen_range(-1.0..1.0));
            (&t * a * t_inv, c)
        };
        let x0 = DVector::from_fn(nu, |_, _| rng.gen_range(-1.0..1.0));
        let l = LeaderModel::new(a, c, x0).expect("dimensions are consistent");
        if l.check_detectable().is_ok() && l.check_neutrally_stable().is_ok() {
            return l;
        }
    }
}

/// Digraph on `agents` agents containing a spanning tree rooted at the
/// leader, plus each remaining ordered agent pair with probability
/// `extra_edge_prob`. Weights are uniform in `(0, 2]`.
pub fn graph<R: Rng>(rng: &mut R, agents: usize, extra_edge_prob: f64) -> DiGraph {
    weighted_graph(rng, agents, extra_edge_prob, 0.0)
}

/// [`graph`] with weights uniform in `(min_weight, 2]`.
pub fn weighted_graph<R: Rng>(rng: &mut R, agents: usize, extra_edge_prob: f64, min_weight: f64) -> DiGraph {
    assert!((0.0..2.0).contains(&min_weight), "min_weight must lie in [0, 2)");
    let weight = |rng: &mut R| 2.0 - rng.gen_range(0.0..2.0 - min_weight);
    let mut order: Vec<usize> = (1..=agents).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    let mut present = vec![vec![false; agents + 1]; agents + 1];
    for (pos, &i) in order.iter().enumerate() {
        // Leader or any agent already attached to the tree.
        let k = rng.gen_range(0..=pos);
        let parent = if k == 0 { 0 } else { order[k - 1] };
        edges.push(Edge::new(parent, i, weight(rng)));
        present[i][parent] = true;
    }
    for i in 1..=agents {
        for j in 0..=agents {
            if j != i && !present[i][j] && rng.gen_bool(extra_edge_prob) {
                edges.push(Edge::new(j, i, weight(rng)));
                present[i][j] = true;
            }
        }
    }
    DiGraph::from_edges(agents, &edges).expect("generated edges are valid")
}

pub fn orders<R: Rng>(rng: &mut R, agents: usize, max_order: usize) -> Vec<usize> {
    (0..agents).map(|_| rng.gen_range(1..=max_order)).collect()
}

/// Compensator chains with entries uniform in `[-scale, scale]`.
pub fn chains<R: Rng>(rng: &mut R, orders: &[usize], nu: usize, scale: f64) -> Vec<CompensatorState> {
    orders
        .iter()
        .map(|&r| {
            CompensatorState::new(
                (0..=r)
                    .map(|_| DVector::from_fn(nu, |_, _| rng.gen_range(-scale..=scale)))
                    .collect(),
            )
            .expect("chain has r + 1 links")
        })
        .collect()
}

/// Regressor text for row `l` (one-based), referencing only `x1..xl`.
/// With `quadratic = false` every term grows at most linearly in `x`.
pub fn regressor_text<R: Rng>(rng: &mut R, l: usize, quadratic: bool) -> String {
    let a = rng.gen_range(1..=l);
    let b = rng.gen_range(1..=l);
    let kinds = if quadratic { 6 } else { 4 };
    match rng.gen_range(0..kinds) {
        0 => format!("sin(x{a})"),
        1 => format!("cos(x{a})"),
        2 => format!("x{a}"),
        3 => format!("sin(x{a}) * cos(x{b})"),
        4 => format!("x{a}^2"),
        _ => format!("sin(x{a}) * x{b}"),
    }
}

/// Known-direction agent of order `r` with `m` random regressor columns.
pub fn agent_model<R: Rng>(rng: &mut R, order: usize, params: usize, quadratic: bool) -> AgentModel {
    let regressors = (1..=order)
        .map(|l| {
            (0..params)
                .map(|_| parse(&regressor_text(rng, l, quadratic), l).expect("generated text parses"))
                .collect()
        })
        .collect();
    let theta = DVector::from_fn(params, |_, _| rng.gen_range(-2.0..2.0));
    let gains = (0..order).map(|_| rng.gen_range(1.0..2.0)).collect();
    AgentModel::new(regressors, theta, gains, Direction::Known).expect("generated model is valid")
}

/// Shape of a random scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub nu: usize,
    pub agents: usize,
    pub max_order: usize,
    pub max_params: usize,
    pub extra_edge_prob: f64,
    /// Edge weights are uniform in `(min_weight, 2]`.
    pub min_weight: f64,
    /// Initial states are the synchronized manifold plus offsets uniform in
    /// `[-spread, spread]` on every `x` and `θ̂` entry, and in
    /// `[-eta_spread, eta_spread]` on every `η` entry.
    pub spread: f64,
    pub eta_spread: f64,
    /// Allow regressors that grow quadratically in `x`.
    pub quadratic: bool,
    pub integration: Integration,
}

/// Random known-direction scenario with `μ` chosen automatically.
pub fn scenario<R: Rng>(rng: &mut R, spec: &ScenarioSpec) -> Scenario {
    let leader = leader(rng, spec.nu);
    let graph = weighted_graph(rng, spec.agents, spec.extra_edge_prob, spec.min_weight);
    let orders = orders(rng, spec.agents, spec.max_order);
    let agents = orders
        .iter()
        .map(|&r| {
            let m = rng.gen_range(1..=spec.max_params);
            AgentSetup {
                model: agent_model(rng, r, m, spec.quadratic),
                x0: vec![0.0; r],
                theta_hat0: DVector::zeros(m),
                eta0: CompensatorState::zeros(r, spec.nu),
                k0: 0.0,
            }
        })
        .collect();
    let mut scenario = Scenario {
        leader,
        graph,
        agents,
        mu: MuChoice::Auto,
        integration: spec.integration,
    };
    place_on_manifold(&mut scenario).expect("generated scenario satisfies the design assumptions");
    let mut jitter = |v: &mut f64, s: f64| *v += rng.gen_range(-s..=s);
    for a in &mut scenario.agents {
        a.x0.iter_mut().for_each(|v| jitter(v, spec.spread));
        a.theta_hat0.iter_mut().for_each(|v| jitter(v, spec.spread));
        for link in &mut a.eta0.eta {
            link.iter_mut().for_each(|v| jitter(v, spec.eta_spread));
        }
    }
    scenario
}
