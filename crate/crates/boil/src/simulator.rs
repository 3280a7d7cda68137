//! Multi-agent simulation against the movement graph, recording traces rich
//! enough to evaluate convergence, visibility histograms, and the sandwich
//! bounds.
//!
//! Time is discrete: every agent traverses exactly one edge per step (the
//! self-loop when it stays). Fractional visibility values are realized as
//! per-step Bernoulli draws by default; an expectation-counting mode
//! accumulates the probabilities themselves for variance-free bound checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    frontier_step, random_step, sample_step, CountVector, StrategyConfig, StrategyKind,
};
use crate::environment::{EdgeId, GridSpec, MovementGraph, NodeId};
use crate::markov::{
    vorticity, EdgeDistribution, StationaryDist, TransitionVector, VorticityMatrix,
};
use crate::sampler::{EdgeSampler, MHState};
use crate::visibility::VisibilityMap;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    ConfigError(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPlacement {
    UniformRandom,
    Fixed(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityCounting {
    /// Realize each fractional value as a Bernoulli draw per step.
    Stochastic,
    /// Accumulate the probabilities themselves.
    Expected,
}

pub const SIM_FORMAT_VERSION: &str = "sim/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_agents: usize,
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub strategy: StrategyConfig,
    pub placement: InitialPlacement,
    pub counting: VisibilityCounting,
}

/// Everything recorded during one run.
#[derive(Debug, Clone)]
pub struct Trace {
    pub n_agents: usize,
    pub steps: usize,
    /// Edge traversals summed over agents; totals n_agents * steps.
    pub edge_counts: Vec<u64>,
    /// Step-major log of every traversal: entry step * n_agents + agent.
    pub step_log: Vec<EdgeId>,
    /// Per node: steps in which it was visible to at least one agent.
    pub node_visibility_counts: Vec<f64>,
    /// Per agent, per node visibility counts.
    pub per_agent_visibility_counts: Vec<Vec<f64>>,
    /// Per node: accumulated sum over steps of pairwise products of the
    /// agents' visibility indicators.
    pub cross_term_counts: Vec<f64>,
    /// Union visibility counts at the environment's marker nodes.
    pub marker_counts: Vec<(NodeId, f64)>,
}

/// Normalized edge traversal frequencies of a trace.
pub fn empirical_edge_distribution(trace: &Trace) -> EdgeDistribution {
    let total = (trace.n_agents * trace.steps) as f64;
    EdgeDistribution(trace.edge_counts.iter().map(|&c| c as f64 / total).collect())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seedable, splittable stream layout: run seeds come from the master seed,
/// each agent gets its own stream of the run generator so the team size
/// never perturbs another agent's randomness.
fn agent_rng(run_seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(agent as u64 + 1);
    rng
}

struct AgentState<'a> {
    node: NodeId,
    rng: ChaCha8Rng,
    mh: Option<MHState<'a>>,
}

/// Runs `config.runs` independent simulations (in parallel) and returns one
/// trace per run. Deterministic for a fixed (environment, config).
pub fn run_simulation(
    grid: &GridSpec,
    graph: &MovementGraph,
    vis: &VisibilityMap,
    config: &SimulationConfig,
    dist: Option<&(TransitionVector, StationaryDist)>,
) -> Result<Vec<Trace>, SimError> {
    if config.n_agents == 0 || config.steps == 0 || config.runs == 0 {
        return Err(SimError::ConfigError("agents, steps, and runs must be positive".into()));
    }
    if let InitialPlacement::Fixed(nodes) = &config.placement {
        if nodes.len() != config.n_agents {
            return Err(SimError::ConfigError(format!(
                "fixed placement lists {} nodes for {} agents",
                nodes.len(),
                config.n_agents
            )));
        }
        for &n in nodes {
            if n as usize >= graph.num_nodes() {
                return Err(SimError::ConfigError(format!("placement node {n} out of range")));
            }
        }
    }
    if config.strategy.kind.needs_distribution() && dist.is_none() {
        return Err(SimError::ConfigError(format!(
            "strategy {:?} requires a learned distribution",
            config.strategy.kind
        )));
    }

    let gamma = dist.map(|(p, pi)| vorticity(p, pi, graph));
    let edge_dist = dist.map(|(p, pi)| crate::markov::edge_distribution(p, pi, graph));

    (0..config.runs)
        .into_par_iter()
        .map(|run| {
            run_one(
                grid,
                graph,
                vis,
                config,
                dist,
                gamma.as_ref(),
                edge_dist.as_ref(),
                splitmix64(config.seed.wrapping_add(run as u64)),
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    grid: &GridSpec,
    graph: &MovementGraph,
    vis: &VisibilityMap,
    config: &SimulationConfig,
    dist: Option<&(TransitionVector, StationaryDist)>,
    gamma: Option<&VorticityMatrix>,
    edge_dist: Option<&EdgeDistribution>,
    run_seed: u64,
) -> Result<Trace, SimError> {
    let n = config.n_agents;
    let num_nodes = graph.num_nodes();
    let kind = config.strategy.kind;
    let stochastic = config.counting == VisibilityCounting::Stochastic;

    let mut placement_rng = agent_rng(run_seed, usize::MAX - 1);
    let start_nodes: Vec<NodeId> = match &config.placement {
        InitialPlacement::UniformRandom => (0..n)
            .map(|_| NodeId((placement_rng.random::<u64>() % num_nodes as u64) as u32))
            .collect(),
        InitialPlacement::Fixed(nodes) => nodes.iter().map(|&i| NodeId(i)).collect(),
    };

    let mut agents: Vec<AgentState> = (0..n)
        .map(|i| {
            let rng = agent_rng(run_seed, i);
            let mh = if matches!(kind, StrategyKind::Sample | StrategyKind::CommSample) {
                let (p, pi) = dist.expect("checked above");
                Some(MHState {
                    current: start_nodes[i],
                    pi,
                    transitions: p,
                    gamma: gamma.expect("gamma built with dist"),
                    graph,
                    rng: agent_rng(run_seed, i),
                })
            } else {
                None
            };
            AgentState { node: start_nodes[i], rng, mh }
        })
        .collect();

    let uniform_edges = EdgeDistribution::uniform(graph.num_edges());
    let teleport_sampler = match kind {
        StrategyKind::OptRandom => Some(EdgeSampler::new(&uniform_edges)),
        StrategyKind::Optimal => Some(EdgeSampler::new(edge_dist.expect("checked above"))),
        _ => None,
    };

    let shared = kind.shares_counts();
    let mut shared_counts = CountVector::zeros(num_nodes);
    let mut own_counts: Vec<CountVector> =
        (0..n).map(|_| CountVector::zeros(num_nodes)).collect();
    let scale = if shared { n } else { 1 };

    let mut trace = Trace {
        n_agents: n,
        steps: config.steps,
        edge_counts: vec![0; graph.num_edges()],
        step_log: Vec::with_capacity(n * config.steps),
        node_visibility_counts: vec![0.0; num_nodes],
        per_agent_visibility_counts: vec![vec![0.0; num_nodes]; n],
        cross_term_counts: vec![0.0; num_nodes],
        marker_counts: Vec::new(),
    };

    // per-step scratch, reset via the touched list
    let mut sum = vec![0.0f64; num_nodes];
    let mut sumsq = vec![0.0f64; num_nodes];
    let mut miss_prod = vec![1.0f64; num_nodes];
    let mut touched: Vec<usize> = Vec::new();
    let mut step_edges = vec![EdgeId(0); n];
    // count updates are published at step boundaries
    let mut pending_counts: Vec<NodeId> = Vec::new();

    for _step in 0..config.steps {
        // all agents choose against the counts as of the end of the
        // previous step
        for (i, agent) in agents.iter_mut().enumerate() {
            let counts = if shared { &shared_counts } else { &own_counts[i] };
            let edge = match kind {
                StrategyKind::Random => random_step(agent.node, graph, &mut agent.rng),
                StrategyKind::Frontier | StrategyKind::CommFrontier => {
                    frontier_step(agent.node, graph, vis, counts, &mut agent.rng, scale)
                }
                StrategyKind::Sample | StrategyKind::CommSample => {
                    let mh = agent.mh.as_mut().expect("sample agents carry MH state");
                    let e = sample_step(mh, vis, counts, config.strategy.lambda, scale);
                    agent.node = mh.current;
                    e
                }
                StrategyKind::OptRandom | StrategyKind::Optimal => {
                    let e = teleport_sampler
                        .as_ref()
                        .expect("teleport strategies carry a sampler")
                        .sample(&mut agent.rng);
                    agent.node = graph.edge(e).dst;
                    e
                }
            };
            if !kind.teleports() && !matches!(kind, StrategyKind::Sample | StrategyKind::CommSample)
            {
                agent.node = graph.edge(edge).dst;
            }
            step_edges[i] = edge;
        }

        for (i, &edge) in step_edges.iter().enumerate() {
            trace.edge_counts[edge.index()] += 1;
            trace.step_log.push(edge);
            let agent = &mut agents[i];
            for &(w, v) in vis.edge(edge) {
                let x = if stochastic {
                    if agent.rng.random::<f64>() < v {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                };
                if x > 0.0 {
                    let wi = w.index();
                    if sum[wi] == 0.0 && miss_prod[wi] == 1.0 {
                        touched.push(wi);
                    }
                    sum[wi] += x;
                    sumsq[wi] += x * x;
                    miss_prod[wi] *= 1.0 - x;
                    trace.per_agent_visibility_counts[i][wi] += x;
                }
                // counts track support membership, realized or not
                pending_counts.push(w);
            }
            if shared {
                for &w in &pending_counts {
                    shared_counts.0[w.index()] += 1;
                }
            } else {
                for &w in &pending_counts {
                    own_counts[i].0[w.index()] += 1;
                }
            }
            pending_counts.clear();
        }

        for &wi in &touched {
            let union = if stochastic {
                if sum[wi] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - miss_prod[wi]
            };
            trace.node_visibility_counts[wi] += union;
            trace.cross_term_counts[wi] += 0.5 * (sum[wi] * sum[wi] - sumsq[wi]);
            sum[wi] = 0.0;
            sumsq[wi] = 0.0;
            miss_prod[wi] = 1.0;
        }
        touched.clear();
    }

    trace.marker_counts = grid
        .markers
        .iter()
        .map(|&m| (m, trace.node_visibility_counts[m.index()]))
        .collect();
    Ok(trace)
}
