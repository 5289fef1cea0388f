//! Leader-follower communication digraph and the matrices built from it.
//!
//! Node 0 is the leader, nodes `1..=N` are the agents. An edge `j -> i` with
//! weight `a_ij > 0` means agent `i` measures the output of node `j`.
//!
//! The augmented matrix `Ĥ = L̂ + Δ̂` replaces every agent `i` by a chain
//! of `r_i + 1` nodes. The stacked compensator error vector is ordered
//! agent-major, chain-minor: `(η_{1,1}, ..., η_{1,r_1+1}, η_{2,1}, ...)`.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("edge {from} -> {to}: node index out of range (graph has {nodes} nodes)")]
    NodeOutOfRange { from: usize, to: usize, nodes: usize },
    #[error("edge {0} -> {0}: self loops are not allowed")]
    SelfLoop(usize),
    #[error("edge {from} -> 0: the leader does not receive information")]
    IntoLeader { from: usize },
    #[error("edge {from} -> {to}: weight {weight} must be positive and finite")]
    BadWeight { from: usize, to: usize, weight: f64 },
    #[error("edge {from} -> {to} declared twice")]
    DuplicateEdge { from: usize, to: usize },
    #[error("graph has {graph} agents but {orders} orders were given")]
    DimensionMismatch { graph: usize, orders: usize },
    #[error("agent {agent} has order 0; orders must be at least 1")]
    ZeroOrder { agent: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(from: usize, to: usize, weight: f64) -> Self {
        Edge { from, to, weight }
    }
}

/// Weighted digraph over the leader (node 0) and `N` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct DiGraph {
    /// `(N+1) x (N+1)` adjacency, `adjacency[(i, j)] = a_ij`.
    adjacency: DMatrix<f64>,
}

impl DiGraph {
    pub fn from_edges(agents: usize, edges: &[Edge]) -> Result<Self, GraphError> {
        let nodes = agents + 1;
        let mut adjacency = DMatrix::zeros(nodes, nodes);
        for e in edges {
            if e.from >= nodes || e.to >= nodes {
                return Err(GraphError::NodeOutOfRange {
                    from: e.from,
                    to: e.to,
                    nodes,
                });
            }
            if e.from == e.to {
                return Err(GraphError::SelfLoop(e.from));
            }
            if e.to == 0 {
                return Err(GraphError::IntoLeader { from: e.from });
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(GraphError::BadWeight {
                    from: e.from,
                    to: e.to,
                    weight: e.weight,
                });
            }
            if adjacency[(e.to, e.from)] != 0.0 {
                return Err(GraphError::DuplicateEdge {
                    from: e.from,
                    to: e.to,
                });
            }
            adjacency[(e.to, e.from)] = e.weight;
        }
        Ok(DiGraph { adjacency })
    }

    pub fn agents(&self) -> usize {
        self.adjacency.nrows() - 1
    }

    /// `a_ij`: weight with which agent `i` listens to node `j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn edges(&self) -> Vec<Edge> {
        let n = self.adjacency.nrows();
        let mut out = Vec::new();
        for i in 1..n {
            for j in 0..n {
                let w = self.adjacency[(i, j)];
                if w > 0.0 {
                    out.push(Edge::new(j, i, w));
                }
            }
        }
        out
    }

    /// In-neighbors `(j, a_ij)` of agent `i`, leader included when `a_i0 > 0`.
    pub fn in_neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        (0..self.adjacency.ncols())
            .filter_map(|j| {
                let w = self.adjacency[(i, j)];
                (w > 0.0).then_some((j, w))
            })
            .collect()
    }

    /// True iff every agent is reachable from the leader.
    pub fn has_spanning_tree(&self) -> bool {
        self.unreachable_agents().is_empty()
    }

    /// Agents not reachable from the leader (one-based agent ids).
    pub fn unreachable_agents(&self) -> Vec<usize> {
        let n = self.adjacency.nrows();
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(j) = queue.pop_front() {
            for i in 1..n {
                if !seen[i] && self.adjacency[(i, j)] > 0.0 {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        (1..n).filter(|&i| !seen[i]).collect()
    }

    /// `H = L + Δ` over the agents, `N x N`.
    pub fn build_h(&self) -> DMatrix<f64> {
        let n = self.agents();
        DMatrix::from_fn(n, n, |r, c| {
            let i = r + 1;
            if r == c {
                let internal: f64 = (1..=n).map(|j| self.adjacency[(i, j)]).sum();
                internal + self.adjacency[(i, 0)]
            } else {
                -self.adjacency[(i, c + 1)]
            }
        })
    }

    /// `Ĥ = L̂ + Δ̂` for the given agent orders, `D x D` with `D = Σ(r_i + 1)`.
    pub fn build_augmented_h(&self, spec: &AugmentedSpec) -> Result<DMatrix<f64>, GraphError> {
        let n = self.agents();
        if spec.orders.len() != n {
            return Err(GraphError::DimensionMismatch {
                graph: n,
                orders: spec.orders.len(),
            });
        }
        let offsets = spec.offsets();
        let dim = spec.dim();
        let mut h = DMatrix::zeros(dim, dim);
        for (a, (&r, &off)) in spec.orders.iter().zip(&offsets).enumerate() {
            let i = a + 1;
            for l in 0..r {
                h[(off + l, off + l)] = 1.0;
                h[(off + l, off + l + 1)] = -1.0;
            }
            let last = off + r;
            let internal: f64 = (1..=n).map(|j| self.adjacency[(i, j)]).sum();
            h[(last, last)] = internal + self.adjacency[(i, 0)];
            for (b, &off_j) in offsets.iter().enumerate() {
                let j = b + 1;
                if j != i {
                    h[(last, off_j)] = -self.adjacency[(i, j)];
                }
            }
        }
        Ok(h)
    }
}

/// Per-agent orders defining the augmented graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSpec {
    orders: Vec<usize>,
}

impl AugmentedSpec {
    pub fn new(orders: Vec<usize>) -> Result<Self, GraphError> {
        if let Some(a) = orders.iter().position(|&r| r == 0) {
            return Err(GraphError::ZeroOrder { agent: a + 1 });
        }
        Ok(AugmentedSpec { orders })
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    /// `D = Σ (r_i + 1)`.
    pub fn dim(&self) -> usize {
        self.orders.iter().map(|r| r + 1).sum()
    }

    /// Starting row of each agent's block.
    pub fn offsets(&self) -> Vec<usize> {
        self.orders
            .iter()
            .scan(0, |acc, r| {
                let off = *acc;
                *acc += r + 1;
                Some(off)
            })
            .collect()
    }
}
