//! Gradient-free optimization of transition probabilities.
//!
//! The loop perturbs the per-edge transition vector on a random sphere,
//! re-solves the stationary distribution, and descends an entropy-surrogate
//! loss over expected node visibility. Path augmentation folds a multi-hop
//! walk into a single learnable macro edge without changing the optimum,
//! and the time-split variant learns two balanced flows whose mixture
//! reproduces the original chain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::environment::{EdgeId, MovementGraph, NodeId};
use crate::markov::{
    edge_distribution, stationary_from, EdgeDistribution, MarkovError, StationaryDist,
    TransitionVector,
};
use crate::visibility::{path_visibility, VisibilityError, VisibilityMap};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("visibility map covers {vis} nodes but the loss expects {expected}")]
    DimensionMismatch { vis: usize, expected: usize },
    #[error("patrol set is empty")]
    EmptyPatrolSet,
    #[error("loss became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Visibility(#[from] VisibilityError),
}

/// Which objective to descend. The patrolling and reachability variants use
/// the same entropy form, restricted to a node subset or evaluated on a
/// reachability map in place of visibility.
#[derive(Debug, Clone)]
pub enum LossSpec<'a> {
    Coverage { vis: &'a VisibilityMap },
    Patrolling { vis: &'a VisibilityMap, patrol_set: &'a [NodeId] },
    Reachability { reach: &'a VisibilityMap },
}

impl<'a> LossSpec<'a> {
    fn map(&self) -> &'a VisibilityMap {
        match self {
            LossSpec::Coverage { vis } => vis,
            LossSpec::Patrolling { vis, .. } => vis,
            LossSpec::Reachability { reach } => reach,
        }
    }

    fn validate(&self, graph: &MovementGraph) -> Result<(), OptimizeError> {
        let map = self.map();
        if map.num_nodes != graph.num_nodes() {
            return Err(OptimizeError::DimensionMismatch {
                vis: map.num_nodes,
                expected: graph.num_nodes(),
            });
        }
        if let LossSpec::Patrolling { patrol_set, .. } = self {
            if patrol_set.is_empty() {
                return Err(OptimizeError::EmptyPatrolSet);
            }
        }
        Ok(())
    }
}

/// Expected visibility per node under an edge distribution:
/// A(w) = sum_e P(e) V(e)(w).
pub fn expected_visibility(dist: &EdgeDistribution, vis: &VisibilityMap) -> Vec<f64> {
    let mut a = vec![0.0; vis.num_nodes];
    for (e, entries) in vis.per_edge.iter().enumerate() {
        let p = dist.0[e];
        if p == 0.0 {
            continue;
        }
        for &(w, v) in entries {
            a[w.index()] += p * v;
        }
    }
    a
}

fn entropy_term(a: f64) -> f64 {
    if a <= 0.0 {
        0.0 // 0 ln 0 := 0
    } else {
        -a * a.ln()
    }
}

/// Coverage loss: sum_w -A(w) ln A(w).
pub fn coverage_loss(dist: &EdgeDistribution, vis: &VisibilityMap) -> f64 {
    expected_visibility(dist, vis).iter().map(|&a| entropy_term(a)).sum()
}

/// Patrolling loss: the same sum restricted to the patrol set.
pub fn patrolling_loss(
    dist: &EdgeDistribution,
    vis: &VisibilityMap,
    patrol_set: &[NodeId],
) -> Result<f64, OptimizeError> {
    if patrol_set.is_empty() {
        return Err(OptimizeError::EmptyPatrolSet);
    }
    let a = expected_visibility(dist, vis);
    Ok(patrol_set.iter().map(|w| entropy_term(a[w.index()])).sum())
}

/// Reachability loss: coverage formula with a reachability map in place of
/// the visibility map.
pub fn reachability_loss(dist: &EdgeDistribution, reach: &VisibilityMap) -> f64 {
    coverage_loss(dist, reach)
}

pub fn evaluate_loss(spec: &LossSpec, dist: &EdgeDistribution) -> Result<f64, OptimizeError> {
    match spec {
        LossSpec::Coverage { vis } => Ok(coverage_loss(dist, vis)),
        LossSpec::Patrolling { vis, patrol_set } => patrolling_loss(dist, vis, patrol_set),
        LossSpec::Reachability { reach } => Ok(reachability_loss(dist, reach)),
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    /// Step size mu.
    pub step_size: f64,
    /// Number of perturbation steps N.
    pub num_steps: usize,
    /// Radius tau of the perturbation sphere; 1.0 reproduces a unit sphere.
    pub perturbation_radius: f64,
    /// Probability floor applied before renormalization; keeps every edge
    /// reachable.
    pub floor: f64,
    pub seed: u64,
    pub stationary_tol: f64,
    pub stationary_max_iters: usize,
    /// Optional teleport mass for the stationary solver, 0 by default.
    pub damping: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 0.1,
            num_steps: 5000,
            perturbation_radius: 0.05,
            floor: 1e-9,
            seed: 0,
            stationary_tol: 1e-10,
            stationary_max_iters: 100_000,
            damping: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoilResult {
    pub transitions: TransitionVector,
    pub stationary: StationaryDist,
    /// Loss of every recorded iterate, index 0 being the initial vector.
    pub loss_trace: Vec<f64>,
    pub best_iter: usize,
    /// Total power-iteration sweeps spent across all stationary solves.
    pub power_sweeps: usize,
}

/// Uniform draw from the sphere of the given radius.
pub fn sphere_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

/// Clamps every entry to at least `floor` and renormalizes each node's
/// outgoing block to sum to one.
pub fn project_rows(values: &mut [f64], graph: &MovementGraph, floor: f64) {
    for out in &graph.out_edges {
        let mut sum = 0.0;
        for e in out {
            let v = &mut values[e.index()];
            if !v.is_finite() || *v < floor {
                *v = floor;
            }
            sum += *v;
        }
        for e in out {
            values[e.index()] /= sum;
        }
    }
}

/// The learning loop: perturb on a sphere, re-solve the stationary
/// distribution, take a zeroth-order descent step, and return the best
/// iterate seen.
pub fn boil_optimize(
    graph: &MovementGraph,
    loss: &LossSpec,
    config: &OptimizerConfig,
    p0: Option<TransitionVector>,
) -> Result<BoilResult, OptimizeError> {
    loss.validate(graph)?;
    let m = graph.num_edges();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut p = p0.unwrap_or_else(|| TransitionVector::uniform(graph));
    p.check_row_stochastic(graph).map_err(OptimizeError::Markov)?;
    project_rows(&mut p.0, graph, config.floor);

    let n = graph.num_nodes();
    let uniform = StationaryDist(vec![1.0 / n as f64; n]);
    let mut sweeps = 0usize;
    let (mut x, s) = stationary_from(
        &p,
        graph,
        config.stationary_tol,
        config.stationary_max_iters,
        &uniform,
        config.damping,
    )?;
    sweeps += s;
    let mut current_loss = evaluate_loss(loss, &edge_distribution(&p, &x, graph))?;
    if !current_loss.is_finite() {
        return Err(OptimizeError::NonFinite(0));
    }

    let mut trace = vec![current_loss];
    let mut best = (p.clone(), x.clone());
    let mut best_loss = current_loss;
    let mut best_iter = 0usize;

    let mut q_buf = vec![0.0; m];
    for k in 0..config.num_steps {
        let r = sphere_sample(&mut rng, m, config.perturbation_radius);
        q_buf.copy_from_slice(&p.0);
        for (qv, rv) in q_buf.iter_mut().zip(&r) {
            *qv += rv;
        }
        project_rows(&mut q_buf, graph, config.floor);
        let q = TransitionVector(q_buf.clone());
        let (y, s) = stationary_from(
            &q,
            graph,
            config.stationary_tol,
            config.stationary_max_iters,
            &x,
            config.damping,
        )?;
        sweeps += s;
        let perturbed_loss = evaluate_loss(loss, &edge_distribution(&q, &y, graph))?;
        if !perturbed_loss.is_finite() {
            return Err(OptimizeError::NonFinite(k + 1));
        }

        let scale = m as f64 * (perturbed_loss - current_loss);
        for (pv, rv) in p.0.iter_mut().zip(&r) {
            *pv -= config.step_size * scale * rv;
        }
        project_rows(&mut p.0, graph, config.floor);
        let (x_next, s) = stationary_from(
            &p,
            graph,
            config.stationary_tol,
            config.stationary_max_iters,
            &x,
            config.damping,
        )?;
        sweeps += s;
        x = x_next;
        current_loss = evaluate_loss(loss, &edge_distribution(&p, &x, graph))?;
        if !current_loss.is_finite() {
            return Err(OptimizeError::NonFinite(k + 1));
        }
        trace.push(current_loss);
        if current_loss < best_loss {
            best_loss = current_loss;
            best = (p.clone(), x.clone());
            best_iter = k + 1;
        }
    }

    Ok(BoilResult {
        transitions: best.0,
        stationary: best.1,
        loss_trace: trace,
        best_iter,
        power_sweeps: sweeps,
    })
}

/// A multi-hop walk folded into one macro edge.
#[derive(Debug, Clone)]
pub struct PathEdge {
    pub edge: EdgeId,
    pub nodes: Vec<NodeId>,
    pub total_time: f64,
    /// Per-base-edge time spent while traversing the path once; sums to
    /// `total_time`.
    pub time_shares: Vec<(EdgeId, f64)>,
}

/// Base movement graph plus macro edges added by path augmentation.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    pub graph: MovementGraph,
    pub base_edges: usize,
    pub path_edges: Vec<PathEdge>,
}

impl AugmentedGraph {
    pub fn new(graph: MovementGraph) -> Self {
        let base_edges = graph.num_edges();
        AugmentedGraph { graph, base_edges, path_edges: Vec::new() }
    }
}

/// Adds one macro edge for the given node walk. The macro edge's visibility
/// vector is the time-weighted average of its constituent edges, so the
/// optimal loss over the augmented edge set equals the one over the base
/// set.
pub fn augment_with_path(
    augmented: &mut AugmentedGraph,
    vis: &mut VisibilityMap,
    path_nodes: &[NodeId],
) -> Result<(), OptimizeError> {
    assert!(path_nodes.len() >= 2, "a path needs at least two nodes");
    let mut edges = Vec::with_capacity(path_nodes.len() - 1);
    for (i, pair) in path_nodes.windows(2).enumerate() {
        let e = augmented
            .graph
            .find_edge(pair[0], pair[1])
            .ok_or(OptimizeError::Visibility(VisibilityError::NonContiguousPath(i)))?;
        edges.push(e);
    }
    let times: Vec<f64> = edges
        .iter()
        .map(|e| augmented.graph.edge(*e).traversal_time)
        .collect();
    let path_vis = path_visibility(vis, &augmented.graph, &edges, &times)?;
    let total_time: f64 = times.iter().sum();

    let mut shares: std::collections::BTreeMap<EdgeId, f64> = std::collections::BTreeMap::new();
    for (e, t) in edges.iter().zip(&times) {
        *shares.entry(*e).or_insert(0.0) += t;
    }

    let src = path_nodes[0];
    let dst = *path_nodes.last().unwrap();
    let id = augmented.graph.add_macro_edge(src, dst, total_time);
    vis.per_edge.push(path_vis);
    augmented.path_edges.push(PathEdge {
        edge: id,
        nodes: path_nodes.to_vec(),
        total_time,
        time_shares: shares.into_iter().collect(),
    });
    Ok(())
}

/// Folds macro-edge probability back onto base edges in proportion to time
/// spent: P(e) = P_aug(e) + (T_e / T_path) P_aug(path). Preserves expected
/// visibility, hence the loss.
pub fn back_project(augmented: &AugmentedGraph, dist: &EdgeDistribution) -> EdgeDistribution {
    let mut base = dist.0[..augmented.base_edges].to_vec();
    for pe in &augmented.path_edges {
        let mass = dist.0[pe.edge.index()];
        if mass == 0.0 {
            continue;
        }
        for &(e, t) in &pe.time_shares {
            base[e.index()] += mass * t / pe.total_time;
        }
    }
    EdgeDistribution(base)
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    /// Time fraction p assigned to the first flow.
    pub fraction: f64,
    /// Per-edge separation penalty Lambda.
    pub penalty: Vec<f64>,
}

impl SplitConfig {
    pub fn constant(graph: &MovementGraph, fraction: f64, penalty: f64) -> Self {
        SplitConfig { fraction, penalty: vec![penalty; graph.num_edges()] }
    }
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub first: EdgeDistribution,
    pub second: EdgeDistribution,
    pub first_pi: StationaryDist,
    pub second_pi: StationaryDist,
    pub loss_trace: Vec<f64>,
}

/// Jointly optimizes two transition vectors under the penalized loss
/// L - (1/2) sum_e Lambda_e (P_hat(e) - P_bar(e))^2, the base loss being
/// evaluated on the time mixture p * P_hat + (1-p) * P_bar. Each component
/// is individually balanced by construction.
pub fn split_optimize(
    graph: &MovementGraph,
    loss: &LossSpec,
    config: &OptimizerConfig,
    split: &SplitConfig,
) -> Result<SplitResult, OptimizeError> {
    loss.validate(graph)?;
    assert!(split.fraction > 0.0 && split.fraction < 1.0, "fraction must lie in (0,1)");
    let m = graph.num_edges();
    let frac = split.fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n = graph.num_nodes();
    let uniform = StationaryDist(vec![1.0 / n as f64; n]);

    let eval = |hat: &TransitionVector,
                bar: &TransitionVector,
                hat_start: &StationaryDist,
                bar_start: &StationaryDist|
     -> Result<(f64, StationaryDist, StationaryDist), OptimizeError> {
        let (hat_pi, _) = stationary_from(
            hat,
            graph,
            config.stationary_tol,
            config.stationary_max_iters,
            hat_start,
            config.damping,
        )?;
        let (bar_pi, _) = stationary_from(
            bar,
            graph,
            config.stationary_tol,
            config.stationary_max_iters,
            bar_start,
            config.damping,
        )?;
        let hat_dist = edge_distribution(hat, &hat_pi, graph);
        let bar_dist = edge_distribution(bar, &bar_pi, graph);
        let combined = EdgeDistribution(
            hat_dist
                .0
                .iter()
                .zip(&bar_dist.0)
                .map(|(a, b)| frac * a + (1.0 - frac) * b)
                .collect(),
        );
        let base = evaluate_loss(loss, &combined)?;
        let separation: f64 = hat_dist
            .0
            .iter()
            .zip(&bar_dist.0)
            .zip(&split.penalty)
            .map(|((a, b), lam)| lam * (a - b).powi(2))
            .sum();
        Ok((base - 0.5 * separation, hat_pi, bar_pi))
    };

    let mut hat = TransitionVector::uniform(graph);
    let mut bar = TransitionVector::uniform(graph);
    let (mut current_loss, mut hat_pi, mut bar_pi) = eval(&hat, &bar, &uniform, &uniform)?;
    let mut trace = vec![current_loss];
    let mut best = (hat.clone(), bar.clone(), hat_pi.clone(), bar_pi.clone());
    let mut best_loss = current_loss;

    for k in 0..config.num_steps {
        let r = sphere_sample(&mut rng, 2 * m, config.perturbation_radius);
        let mut hat_q = hat.clone();
        let mut bar_q = bar.clone();
        for i in 0..m {
            hat_q.0[i] += r[i];
            bar_q.0[i] += r[m + i];
        }
        project_rows(&mut hat_q.0, graph, config.floor);
        project_rows(&mut bar_q.0, graph, config.floor);
        let (perturbed_loss, _, _) = eval(&hat_q, &bar_q, &hat_pi, &bar_pi)?;
        if !perturbed_loss.is_finite() {
            return Err(OptimizeError::NonFinite(k + 1));
        }
        let scale = 2.0 * m as f64 * (perturbed_loss - current_loss);
        for i in 0..m {
            hat.0[i] -= config.step_size * scale * r[i];
            bar.0[i] -= config.step_size * scale * r[m + i];
        }
        project_rows(&mut hat.0, graph, config.floor);
        project_rows(&mut bar.0, graph, config.floor);
        let (next_loss, hp, bp) = eval(&hat, &bar, &hat_pi, &bar_pi)?;
        if !next_loss.is_finite() {
            return Err(OptimizeError::NonFinite(k + 1));
        }
        hat_pi = hp;
        bar_pi = bp;
        current_loss = next_loss;
        trace.push(current_loss);
        if current_loss < best_loss {
            best_loss = current_loss;
            best = (hat.clone(), bar.clone(), hat_pi.clone(), bar_pi.clone());
        }
    }

    let (hat, bar, hat_pi, bar_pi) = best;
    Ok(SplitResult {
        first: edge_distribution(&hat, &hat_pi, graph),
        second: edge_distribution(&bar, &bar_pi, graph),
        first_pi: hat_pi,
        second_pi: bar_pi,
        loss_trace: trace,
    })
}
