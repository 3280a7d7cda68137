//! Non-reversible Markov chain machinery on the movement graph.
//!
//! The chain is parameterized per edge: a [`TransitionVector`] holds
//! P(u->v) for every directed edge, the stationary solver recovers pi by
//! power iteration, and the edge distribution P((u,v)) = pi(u) P(u->v)
//! links the two. Vorticity measures the antisymmetric probability flux of
//! non-reversible chains.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::environment::{EdgeId, MovementGraph, NodeId};

pub const DIST_FORMAT_VERSION: &str = "dist/1";
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("power iteration did not converge in {iters} iterations (residual {residual:.3e})")]
    NotConverged { iters: usize, residual: f64 },
    #[error("transition vector is not row-stochastic at node {node} (row sum {sum})")]
    NotRowStochastic { node: u32, sum: f64 },
    #[error("node {0} has no outgoing probability mass")]
    ZeroMassNode(u32),
    #[error("distribution file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-edge conditional transition probabilities P(u->v); each node's
/// outgoing block sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionVector(pub Vec<f64>);

/// Per-node stationary probabilities pi(u), summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist(pub Vec<f64>);

/// Per-edge long-run traversal probabilities P((u,v)), summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDistribution(pub Vec<f64>);

impl TransitionVector {
    /// Uniform over each node's outgoing edges, self-loop included.
    pub fn uniform(graph: &MovementGraph) -> Self {
        let mut p = vec![0.0; graph.num_edges()];
        for out in &graph.out_edges {
            let share = 1.0 / out.len() as f64;
            for e in out {
                p[e.index()] = share;
            }
        }
        TransitionVector(p)
    }

    pub fn check_row_stochastic(&self, graph: &MovementGraph) -> Result<(), MarkovError> {
        for (u, out) in graph.out_edges.iter().enumerate() {
            let sum: f64 = out.iter().map(|e| self.0[e.index()]).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MarkovError::NotRowStochastic { node: u as u32, sum });
            }
        }
        Ok(())
    }
}

impl StationaryDist {
    pub fn value(&self, u: NodeId) -> f64 {
        self.0[u.index()]
    }
}

impl EdgeDistribution {
    pub fn uniform(num_edges: usize) -> Self {
        EdgeDistribution(vec![1.0 / num_edges as f64; num_edges])
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Max-norm global balance residual: max_v |sum_u pi(u)P(u->v) - pi(v)|.
pub fn global_balance_residual(
    p: &TransitionVector,
    pi: &StationaryDist,
    graph: &MovementGraph,
) -> f64 {
    let mut inflow = vec![0.0; graph.num_nodes()];
    for (i, e) in graph.edges.iter().enumerate() {
        inflow[e.dst.index()] += pi.0[e.src.index()] * p.0[i];
    }
    inflow
        .iter()
        .zip(&pi.0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// The stationary distribution of a row-stochastic chain on a strongly
/// connected graph, by power iteration from the uniform vector.
pub fn stationary_distribution(
    p: &TransitionVector,
    graph: &MovementGraph,
    tol: f64,
    max_iters: usize,
) -> Result<StationaryDist, MarkovError> {
    let n = graph.num_nodes();
    let uniform = StationaryDist(vec![1.0 / n as f64; n]);
    stationary_from(p, graph, tol, max_iters, &uniform, 0.0).map(|(pi, _)| pi)
}

/// Power iteration with an explicit starting vector and optional teleport
/// mass; returns the distribution and the number of sweeps used. The warm
/// start is what keeps repeated solves cheap inside the optimizer.
pub fn stationary_from(
    p: &TransitionVector,
    graph: &MovementGraph,
    tol: f64,
    max_iters: usize,
    start: &StationaryDist,
    damping: f64,
) -> Result<(StationaryDist, usize), MarkovError> {
    let n = graph.num_nodes();
    let mut cur = start.0.clone();
    let mut next = vec![0.0; n];
    let teleport = damping / n as f64;
    let mut residual = f64::INFINITY;
    // pack the sweep inputs into flat arrays: the hot loop then streams
    // 16 bytes per edge instead of the padded Edge struct, which keeps the
    // per-sweep cost linear in |E| once the graph outgrows the cache
    let endpoints: Vec<(u32, u32)> = graph.edges.iter().map(|e| (e.src.0, e.dst.0)).collect();
    let damped: Vec<f64> = p.0.iter().map(|&x| (1.0 - damping) * x).collect();
    for iter in 1..=max_iters {
        next.iter_mut().for_each(|x| *x = teleport);
        for (&(src, dst), &w) in endpoints.iter().zip(&damped) {
            next[dst as usize] += cur[src as usize] * w;
        }
        // renormalize to absorb fp drift
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        residual = cur
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut cur, &mut next);
        // successive-iterate movement is a cheap proxy; the contract is on
        // the global balance residual, so confirm that before returning
        if residual <= tol {
            if damping > 0.0 {
                // a teleporting chain balances against the damped kernel,
                // not the plain one, so the proxy is the stopping rule
                return Ok((StationaryDist(cur), iter));
            }
            let pi = StationaryDist(cur);
            let gb = global_balance_residual(p, &pi, graph);
            if gb <= tol {
                return Ok((pi, iter));
            }
            cur = pi.0;
        }
    }
    Err(MarkovError::NotConverged { iters: max_iters, residual })
}

/// Eq-style product measure over the edges: P((u,v)) = pi(u) P(u->v).
pub fn edge_distribution(p: &TransitionVector, pi: &StationaryDist, graph: &MovementGraph) -> EdgeDistribution {
    let mut out = vec![0.0; graph.num_edges()];
    for (i, e) in graph.edges.iter().enumerate() {
        out[i] = pi.0[e.src.index()] * p.0[i];
    }
    EdgeDistribution(out)
}

/// Inverse of [`edge_distribution`]: pi(u) = sum_v P((u,v)) and
/// P(u->v) = P((u,v)) / pi(u). The result satisfies the normalization
/// identities but is not guaranteed globally balanced; callers check that
/// separately.
pub fn decompose_edge_distribution(
    dist: &EdgeDistribution,
    graph: &MovementGraph,
) -> Result<(StationaryDist, TransitionVector), MarkovError> {
    let mut pi = vec![0.0; graph.num_nodes()];
    for (i, e) in graph.edges.iter().enumerate() {
        pi[e.src.index()] += dist.0[i];
    }
    for (u, &mass) in pi.iter().enumerate() {
        if mass <= 0.0 {
            return Err(MarkovError::ZeroMassNode(u as u32));
        }
    }
    let mut p = vec![0.0; graph.num_edges()];
    for (i, e) in graph.edges.iter().enumerate() {
        p[i] = dist.0[i] / pi[e.src.index()];
    }
    Ok((StationaryDist(pi), TransitionVector(p)))
}

/// Antisymmetric probability flux of the chain. Values are stored per edge;
/// the accessor resolves any ordered pair, treating missing reverse edges as
/// probability zero.
#[derive(Debug, Clone)]
pub struct VorticityMatrix {
    per_edge: Vec<f64>,
}

impl VorticityMatrix {
    /// Gamma(u,v) for any ordered pair with at least one direction in E_d.
    pub fn get(&self, graph: &MovementGraph, u: NodeId, v: NodeId) -> f64 {
        if let Some(e) = graph.find_edge(u, v) {
            self.per_edge[e.index()]
        } else if let Some(e) = graph.find_edge(v, u) {
            -self.per_edge[e.index()]
        } else {
            0.0
        }
    }

    pub fn per_edge(&self) -> &[f64] {
        &self.per_edge
    }
}

/// Gamma(u,v) = pi(u)P(u->v) - pi(v)P(v->u).
pub fn vorticity(p: &TransitionVector, pi: &StationaryDist, graph: &MovementGraph) -> VorticityMatrix {
    let mut per_edge = vec![0.0; graph.num_edges()];
    for (i, e) in graph.edges.iter().enumerate() {
        let forward = pi.0[e.src.index()] * p.0[i];
        let backward = graph
            .find_edge(e.dst, e.src)
            .map(|r| pi.0[e.dst.index()] * p.0[r.index()])
            .unwrap_or(0.0);
        per_edge[i] = forward - backward;
    }
    VorticityMatrix { per_edge }
}

/// One violated ordered pair of the vorticity box constraint
/// -pi(v)Q(v,u) <= Gamma(u,v) <= pi(u)Q(u,v).
#[derive(Debug, Clone)]
pub struct VorticityViolation {
    pub u: NodeId,
    pub v: NodeId,
    pub gamma: f64,
    pub lower: f64,
    pub upper: f64,
    /// How far outside the box, always positive.
    pub margin: f64,
}

/// Checks the box constraint for every edge under proposal kernel Q (given
/// per edge, row-stochastic). An empty report means the constraint holds.
pub fn check_vorticity_constraint(
    gamma: &VorticityMatrix,
    pi: &StationaryDist,
    q: &TransitionVector,
    graph: &MovementGraph,
) -> Vec<VorticityViolation> {
    let mut violations = Vec::new();
    for (i, e) in graph.edges.iter().enumerate() {
        let g = gamma.per_edge[i];
        let upper = pi.0[e.src.index()] * q.0[i];
        let lower = -graph
            .find_edge(e.dst, e.src)
            .map(|r| pi.0[e.dst.index()] * q.0[r.index()])
            .unwrap_or(0.0);
        let tol = 1e-12;
        if g > upper + tol || g < lower - tol {
            let margin = if g > upper { g - upper } else { lower - g };
            violations.push(VorticityViolation { u: e.src, v: e.dst, gamma: g, lower, upper, margin });
        }
    }
    violations
}

#[derive(Serialize, Deserialize)]
struct DistFileEdge {
    src: u32,
    dst: u32,
    p_transition: f64,
    p_edge: f64,
}

#[derive(Serialize, Deserialize, Default, Clone, Debug)]
pub struct DistMeta {
    pub loss: f64,
    pub iterations: usize,
    pub seed: u64,
    pub env_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DistFile {
    version: String,
    edges: Vec<DistFileEdge>,
    pi: Vec<f64>,
    meta: DistMeta,
}

pub fn save_distribution(
    path: &Path,
    graph: &MovementGraph,
    p: &TransitionVector,
    pi: &StationaryDist,
    meta: &DistMeta,
) -> Result<(), MarkovError> {
    let dist = edge_distribution(p, pi, graph);
    let edges = graph
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| DistFileEdge {
            src: e.src.0,
            dst: e.dst.0,
            p_transition: p.0[i],
            p_edge: dist.0[i],
        })
        .collect();
    let file = DistFile {
        version: DIST_FORMAT_VERSION.to_string(),
        edges,
        pi: pi.0.clone(),
        meta: meta.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file).expect("dist serializes"))?;
    Ok(())
}

pub fn load_distribution(
    path: &Path,
    graph: &MovementGraph,
) -> Result<(TransitionVector, StationaryDist, DistMeta), MarkovError> {
    let text = std::fs::read_to_string(path)?;
    let file: DistFile = serde_json::from_str(&text).map_err(|e| MarkovError::Format(e.to_string()))?;
    if file.version != DIST_FORMAT_VERSION {
        return Err(MarkovError::Format(format!("unsupported version {:?}", file.version)));
    }
    if file.edges.len() != graph.num_edges() || file.pi.len() != graph.num_nodes() {
        return Err(MarkovError::Format(format!(
            "distribution shape ({} edges, {} nodes) does not match graph ({}, {})",
            file.edges.len(),
            file.pi.len(),
            graph.num_edges(),
            graph.num_nodes()
        )));
    }
    let mut p = vec![0.0; graph.num_edges()];
    for (i, fe) in file.edges.iter().enumerate() {
        let e = graph.edge(EdgeId(i as u32));
        if e.src.0 != fe.src || e.dst.0 != fe.dst {
            return Err(MarkovError::Format(format!(
                "edge {i} is ({},{}) in file but ({},{}) in graph",
                fe.src, fe.dst, e.src.0, e.dst.0
            )));
        }
        p[i] = fe.p_transition;
    }
    Ok((TransitionVector(p), StationaryDist(file.pi), file.meta))
}
