//! Metropolis-Hastings stepping for agents bound to continuous paths, and
//! categorical edge sampling for the unconstrained regimes.
//!
//! The acceptance ratio generalizes classical MH to non-reversible targets
//! through the vorticity term; because runtime proposal kernels may violate
//! the box constraint the vorticity requires, it is clipped into the valid
//! box per proposal, trading mixing speed for a valid kernel.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::environment::{EdgeId, MovementGraph, NodeId};
use crate::markov::{EdgeDistribution, StationaryDist, TransitionVector, VorticityMatrix};

/// Mutable per-agent sampling state over a shared target chain.
pub struct MHState<'a> {
    pub current: NodeId,
    pub pi: &'a StationaryDist,
    pub transitions: &'a TransitionVector,
    pub gamma: &'a VorticityMatrix,
    pub graph: &'a MovementGraph,
    pub rng: ChaCha8Rng,
}

/// Proposal probabilities over the outgoing edges of one node; strictly
/// positive and summing to one.
pub type Proposal = Vec<(EdgeId, f64)>;

/// Non-reversible Hastings ratio for a proposed move u -> v, with the
/// vorticity clipped into the box [-pi(v)Q(v,u), pi(u)Q(u,v)]. Total:
/// returns 1 when the denominator vanishes.
pub fn hastings_ratio(
    u: NodeId,
    v: NodeId,
    state: &MHState,
    q_uv: f64,
    q_vu: f64,
) -> f64 {
    let denom = state.pi.value(u) * q_uv;
    if denom == 0.0 {
        return 1.0;
    }
    let reverse = state.pi.value(v) * q_vu;
    let gamma = state.gamma.get(state.graph, u, v).clamp(-reverse, denom);
    (gamma + reverse) / denom
}

/// Looks up Q(v,u) within a proposal that was built for node v, returning 0
/// when (v,u) is not an edge.
fn reverse_q(graph: &MovementGraph, proposal_at_v: &Proposal, v: NodeId, u: NodeId) -> f64 {
    match graph.find_edge(v, u) {
        Some(e) => proposal_at_v
            .iter()
            .find(|(pe, _)| *pe == e)
            .map(|(_, p)| *p)
            .unwrap_or(0.0),
        None => 0.0,
    }
}

/// One MH step: propose an outgoing edge from the given kernel, accept with
/// probability min(1, R), and on rejection traverse the self-loop. Returns
/// the edge actually traversed; the state's current node is advanced.
pub fn mh_step<F>(state: &mut MHState, mut kernel: F) -> EdgeId
where
    F: FnMut(NodeId) -> Proposal,
{
    let u = state.current;
    let proposal = kernel(u);
    let edge = sample_categorical(&proposal, &mut state.rng);
    let v = state.graph.edge(edge).dst;
    if v == u {
        return edge; // self-proposal needs no accept test
    }
    let q_uv = proposal
        .iter()
        .find(|(e, _)| *e == edge)
        .map(|(_, p)| *p)
        .expect("sampled edge is in the proposal");
    let reverse_proposal = kernel(v);
    let q_vu = reverse_q(state.graph, &reverse_proposal, v, u);
    let ratio = hastings_ratio(u, v, state, q_uv, q_vu);
    if ratio >= 1.0 || state.rng.random::<f64>() < ratio {
        state.current = v;
        edge
    } else {
        state.graph.self_loop(u)
    }
}

fn sample_categorical(proposal: &Proposal, rng: &mut ChaCha8Rng) -> EdgeId {
    let total: f64 = proposal.iter().map(|(_, p)| p).sum();
    let mut draw = rng.random::<f64>() * total;
    for &(e, p) in proposal {
        draw -= p;
        if draw <= 0.0 {
            return e;
        }
    }
    proposal.last().expect("non-empty proposal").0
}

/// Precomputed cumulative table for repeated categorical draws over all
/// edges.
pub struct EdgeSampler {
    cumulative: Vec<f64>,
}

impl EdgeSampler {
    pub fn new(dist: &EdgeDistribution) -> Self {
        let mut cumulative = Vec::with_capacity(dist.0.len());
        let mut acc = 0.0;
        for &p in &dist.0 {
            acc += p;
            cumulative.push(acc);
        }
        EdgeSampler { cumulative }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> EdgeId {
        let total = *self.cumulative.last().expect("non-empty distribution");
        let draw = rng.random::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c < draw);
        EdgeId(idx.min(self.cumulative.len() - 1) as u32)
    }
}

/// Categorical draw over all edges regardless of the current position
/// (teleporting allowed). For repeated draws prefer [`EdgeSampler`].
pub fn sample_edge_unconstrained(dist: &EdgeDistribution, rng: &mut ChaCha8Rng) -> EdgeId {
    EdgeSampler::new(dist).sample(rng)
}
