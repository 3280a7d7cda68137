//! Agent strategies: pluggable policies mapping the current node, the
//! visibility counts gathered so far, and a random stream to the next edge.
//!
//! Random and Frontier need no learned distribution; Sample and Optimal
//! consume the optimized chain, the former through position-constrained MH
//! proposals and the latter by unconstrained edge draws. Comm variants share
//! one count vector across the team and scale the frontier term by the
//! agent count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{EdgeId, MovementGraph, NodeId};
use crate::sampler::{mh_step, MHState, Proposal};
use crate::visibility::VisibilityMap;

/// Count floor from the frontier weighting; an unseen node contributes
/// weight 1/FLOOR.
pub const COUNT_FLOOR: f64 = 1e-6;

/// Per-node visibility counts, monotonically nondecreasing during a run.
#[derive(Debug, Clone)]
pub struct CountVector(pub Vec<u64>);

impl CountVector {
    pub fn zeros(num_nodes: usize) -> Self {
        CountVector(vec![0; num_nodes])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    OptRandom,
    Frontier,
    Sample,
    CommFrontier,
    CommSample,
    Optimal,
}

impl StrategyKind {
    /// Strategies that draw from a learned distribution file.
    pub fn needs_distribution(self) -> bool {
        matches!(
            self,
            StrategyKind::Sample | StrategyKind::CommSample | StrategyKind::Optimal
        )
    }

    /// Strategies sharing a single count vector across the team.
    pub fn shares_counts(self) -> bool {
        matches!(self, StrategyKind::CommFrontier | StrategyKind::CommSample)
    }

    /// Teleporting strategies may return an edge anywhere in the graph.
    pub fn teleports(self) -> bool {
        matches!(self, StrategyKind::OptRandom | StrategyKind::Optimal)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Frontier preference of the Sample family.
    pub lambda: f64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig { kind, lambda: 10.0 }
    }
}

/// Uniform choice among the outgoing edges, self-loop included.
pub fn random_step(u: NodeId, graph: &MovementGraph, rng: &mut ChaCha8Rng) -> EdgeId {
    let out = &graph.out_edges[u.index()];
    out[(rng.random::<u64>() % out.len() as u64) as usize]
}

/// Frontier weight of one edge: the mean inverse count over the edge's
/// visibility support, floored so unexplored nodes dominate. Edges that see
/// nothing receive the floor itself, keeping every kernel strictly positive.
pub fn frontier_weight(e: EdgeId, vis: &VisibilityMap, counts: &CountVector) -> f64 {
    let support = vis.edge(e);
    if support.is_empty() {
        return COUNT_FLOOR;
    }
    let sum: f64 = support
        .iter()
        .map(|&(w, _)| 1.0 / (counts.0[w.index()] as f64).max(COUNT_FLOOR))
        .sum();
    sum / support.len() as f64
}

/// Count-inverse exploration step. `scale` is 1 for the solo variant and the
/// agent count for the communicating variant; the multiplier cancels in the
/// normalization and is kept for symmetry with the sampling strategy.
pub fn frontier_step(
    u: NodeId,
    graph: &MovementGraph,
    vis: &VisibilityMap,
    counts: &CountVector,
    rng: &mut ChaCha8Rng,
    scale: usize,
) -> EdgeId {
    let out = &graph.out_edges[u.index()];
    let weights: Vec<f64> = out
        .iter()
        .map(|&e| scale as f64 * frontier_weight(e, vis, counts))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (&e, &w) in out.iter().zip(&weights) {
        draw -= w;
        if draw <= 0.0 {
            return e;
        }
    }
    *out.last().expect("node has a self-loop")
}

/// The Sample strategy's proposal kernel over the outgoing edges of `u`:
/// Q(u,v) = 1 + scale * lambda * frontier weight, normalized.
pub fn sample_proposal(
    u: NodeId,
    graph: &MovementGraph,
    vis: &VisibilityMap,
    counts: &CountVector,
    lambda: f64,
    scale: usize,
) -> Proposal {
    let out = &graph.out_edges[u.index()];
    let weights: Vec<f64> = out
        .iter()
        .map(|&e| 1.0 + scale as f64 * lambda * frontier_weight(e, vis, counts))
        .collect();
    let total: f64 = weights.iter().sum();
    out.iter()
        .zip(&weights)
        .map(|(&e, &w)| (e, w / total))
        .collect()
}

/// Position-constrained sampling of the learned chain: propose from the
/// frontier-biased kernel, accept through the non-reversible Hastings
/// ratio. Returns the traversed edge (the self-loop on rejection).
pub fn sample_step(
    state: &mut MHState,
    vis: &VisibilityMap,
    counts: &CountVector,
    lambda: f64,
    scale: usize,
) -> EdgeId {
    let graph = state.graph;
    mh_step(state, |u| sample_proposal(u, graph, vis, counts, lambda, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{build_movement_graph, Cell, CellKind, GridSpec, MovementGraph};
    use crate::markov::{stationary_distribution, vorticity, TransitionVector};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn corridor(n: usize) -> MovementGraph {
        let grid = GridSpec {
            width: n,
            height: 1,
            cells: vec![Cell { kind: CellKind::Open, elev: 0 }; n],
            markers: vec![],
        };
        build_movement_graph(&grid).unwrap()
    }

    fn empty_vis(graph: &MovementGraph) -> VisibilityMap {
        VisibilityMap { num_nodes: graph.num_nodes(), per_edge: vec![vec![]; graph.num_edges()] }
    }

    #[test]
    fn random_step_on_isolated_node_is_the_self_loop() {
        let graph = corridor(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_step(NodeId(0), &graph, &mut rng), graph.self_loop(NodeId(0)));
    }

    #[test]
    fn random_step_is_uniform_over_out_edges() {
        let graph = corridor(3);
        // middle node has self-loop + 2 neighbors
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = &graph.out_edges[1];
        let draws = 100_000usize;
        let mut counts = vec![0usize; graph.num_edges()];
        for _ in 0..draws {
            counts[random_step(NodeId(1), &graph, &mut rng).index()] += 1;
        }
        let p = 1.0 / out.len() as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &e in out {
            let dev = (counts[e.index()] as f64 - draws as f64 * p).abs();
            assert!(dev <= 3.0 * sigma);
        }
    }

    #[test]
    fn frontier_probabilities_follow_inverse_counts() {
        let graph = corridor(3);
        let u = NodeId(1);
        // give the two neighbor edges single-node supports with counts 1 and 3
        let mut vis = empty_vis(&graph);
        let left = graph.find_edge(u, NodeId(0)).unwrap();
        let right = graph.find_edge(u, NodeId(2)).unwrap();
        vis.per_edge[left.index()] = vec![(NodeId(0), 1.0)];
        vis.per_edge[right.index()] = vec![(NodeId(2), 1.0)];
        let mut counts = CountVector::zeros(3);
        counts.0[0] = 1;
        counts.0[2] = 3;
        let w_left = frontier_weight(left, &vis, &counts);
        let w_right = frontier_weight(right, &vis, &counts);
        assert_abs_diff_eq!(w_left, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w_right, 1.0 / 3.0, epsilon = 1e-12);
        // normalized over just these two: 0.75 / 0.25
        assert_abs_diff_eq!(w_left / (w_left + w_right), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn equal_counts_give_uniform_frontier() {
        let graph = corridor(3);
        let u = NodeId(1);
        let mut vis = empty_vis(&graph);
        for &e in &graph.out_edges[u.index()] {
            vis.per_edge[e.index()] = vec![(NodeId(0), 0.5), (NodeId(2), 0.5)];
        }
        let mut counts = CountVector::zeros(3);
        counts.0.iter_mut().for_each(|c| *c = 5);
        let weights: Vec<f64> = graph.out_edges[u.index()]
            .iter()
            .map(|&e| frontier_weight(e, &vis, &counts))
            .collect();
        for w in &weights {
            assert_abs_diff_eq!(*w, weights[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn fresh_counts_floor_makes_frontier_uniform() {
        let graph = corridor(3);
        let u = NodeId(1);
        let mut vis = empty_vis(&graph);
        for &e in &graph.out_edges[u.index()] {
            let dst = graph.edge(e).dst;
            vis.per_edge[e.index()] = vec![(dst, 1.0)];
        }
        let counts = CountVector::zeros(3);
        let weights: Vec<f64> = graph.out_edges[u.index()]
            .iter()
            .map(|&e| frontier_weight(e, &vis, &counts))
            .collect();
        for w in &weights {
            assert_abs_diff_eq!(*w, 1.0 / COUNT_FLOOR, epsilon = 1e-3);
        }
    }

    #[test]
    fn frontier_is_scale_invariant_in_counts() {
        let graph = corridor(3);
        let u = NodeId(1);
        let mut vis = empty_vis(&graph);
        let left = graph.find_edge(u, NodeId(0)).unwrap();
        let right = graph.find_edge(u, NodeId(2)).unwrap();
        vis.per_edge[left.index()] = vec![(NodeId(0), 1.0)];
        vis.per_edge[right.index()] = vec![(NodeId(2), 1.0)];
        let mut c1 = CountVector::zeros(3);
        c1.0 = vec![2, 1, 6];
        let mut c2 = CountVector::zeros(3);
        c2.0 = vec![10, 5, 30];
        let ratio1 = frontier_weight(left, &vis, &c1) / frontier_weight(right, &vis, &c1);
        let ratio2 = frontier_weight(left, &vis, &c2) / frontier_weight(right, &vis, &c2);
        assert_abs_diff_eq!(ratio1, ratio2, epsilon = 1e-12);
    }

    #[test]
    fn lambda_zero_proposal_is_uniform() {
        let graph = corridor(3);
        let vis = empty_vis(&graph);
        let counts = CountVector::zeros(3);
        let proposal = sample_proposal(NodeId(1), &graph, &vis, &counts, 0.0, 1);
        let expected = 1.0 / graph.out_edges[1].len() as f64;
        for (_, p) in proposal {
            assert_abs_diff_eq!(p, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn huge_counts_recover_lambda_zero_behavior() {
        let graph = corridor(3);
        let u = NodeId(1);
        let mut vis = empty_vis(&graph);
        for &e in &graph.out_edges[u.index()] {
            let dst = graph.edge(e).dst;
            vis.per_edge[e.index()] = vec![(dst, 1.0)];
        }
        let mut counts = CountVector::zeros(3);
        counts.0.iter_mut().for_each(|c| *c = u64::MAX / 2);
        let proposal = sample_proposal(u, &graph, &vis, &counts, 10.0, 1);
        let expected = 1.0 / graph.out_edges[u.index()].len() as f64;
        for (_, p) in proposal {
            assert_abs_diff_eq!(p, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn large_lambda_argmax_matches_frontier_argmax() {
        let graph = corridor(3);
        let u = NodeId(1);
        let mut vis = empty_vis(&graph);
        let left = graph.find_edge(u, NodeId(0)).unwrap();
        let right = graph.find_edge(u, NodeId(2)).unwrap();
        vis.per_edge[left.index()] = vec![(NodeId(0), 1.0)];
        vis.per_edge[right.index()] = vec![(NodeId(2), 1.0)];
        let mut counts = CountVector::zeros(3);
        counts.0 = vec![7, 1, 2];
        let proposal = sample_proposal(u, &graph, &vis, &counts, 1e9, 1);
        let argmax_q = proposal
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        let argmax_frontier = graph.out_edges[u.index()]
            .iter()
            .copied()
            .max_by(|&a, &b| {
                frontier_weight(a, &vis, &counts)
                    .partial_cmp(&frontier_weight(b, &vis, &counts))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(argmax_q, argmax_frontier);
    }

    #[test]
    fn sample_step_traverses_only_graph_edges_from_current_node() {
        let graph = corridor(4);
        let p = TransitionVector::uniform(&graph);
        let pi = stationary_distribution(&p, &graph, 1e-12, 100_000).unwrap();
        let gamma = vorticity(&p, &pi, &graph);
        let vis = empty_vis(&graph);
        let counts = CountVector::zeros(4);
        let mut state = MHState {
            current: NodeId(0),
            pi: &pi,
            transitions: &p,
            gamma: &gamma,
            graph: &graph,
            rng: ChaCha8Rng::seed_from_u64(5),
        };
        for _ in 0..1000 {
            let before = state.current;
            let e = sample_step(&mut state, &vis, &counts, 10.0, 1);
            assert_eq!(graph.edge(e).src, before);
            assert_eq!(graph.edge(e).dst, state.current);
        }
    }
}
