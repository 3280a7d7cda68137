//! The `boil` binary: environment generation and validation, optimization,
//! simulation, and metric extraction.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical
//! failure. Every command is deterministic given its flags; a run manifest
//! is written before any other output.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::agents::{StrategyConfig, StrategyKind};
use crate::environment::{
    build_movement_graph, check_strong_connectivity, environment_hash, generate_reference_env,
    load_environment, save_environment, EnvError, EnvKind, GridSpec, MovementGraph, NodeId,
};
use crate::markov::{
    decompose_edge_distribution, edge_distribution, load_distribution, save_distribution,
    DistMeta, EdgeDistribution, MarkovError, StationaryDist, TransitionVector,
};
use crate::metrics::{
    convergence_series, theorem1_bound_report, visibility_histogram, MetricsError,
};
use crate::optimizer::{
    augment_with_path, back_project, boil_optimize, split_optimize, AugmentedGraph, LossSpec,
    OptimizeError, OptimizerConfig, SplitConfig,
};
use crate::simulator::{
    run_simulation, InitialPlacement, SimError, SimulationConfig, Trace, VisibilityCounting,
};
use crate::visibility::{
    build_visibility_map, content_hash, load_visibility_cache, save_visibility_cache,
    VisibilityError, VisibilityMap, VisibilityParams,
};

pub const MANIFEST_VERSION: &str = "manifest/1";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Validation(m) => write!(f, "validation failure: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<VisibilityError> for CliError {
    fn from(e: VisibilityError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MarkovError> for CliError {
    fn from(e: MarkovError) -> Self {
        match e {
            MarkovError::NotConverged { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::NonFinite(_) => CliError::Numerical(e.to_string()),
            OptimizeError::Markov(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "boil", version, about = "Movement-strategy extraction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate environments
    Env {
        #[command(subcommand)]
        cmd: EnvCmd,
    },
    /// Learn a transition distribution with the zeroth-order loop
    Optimize(OptimizeArgs),
    /// Run multi-agent simulations and record traces
    Simulate(SimulateArgs),
    /// Extract metric CSVs from recorded traces
    Metrics(MetricsArgs),
}

#[derive(Subcommand)]
enum EnvCmd {
    Generate {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Validate {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Small,
    Large,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Coverage,
    Patrolling,
    Reachability,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long, value_enum, default_value = "coverage")]
    loss: LossArg,
    /// Comma-separated node ids for the patrolling loss
    #[arg(long)]
    patrol_nodes: Option<String>,
    /// Step size
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    /// Perturbation sphere radius
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long)]
    seed: u64,
    /// Time fraction of the first flow; enables the split optimizer
    #[arg(long)]
    split_p: Option<f64>,
    /// Constant separation penalty for split runs
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// JSON file with an array of node-id walks to fold into macro edges
    #[arg(long)]
    augment_paths: Option<PathBuf>,
    /// Decay horizon of the reachability map
    #[arg(long, default_value_t = 8.0)]
    reach_horizon: f64,
    /// Teleport mass of the stationary solver; stabilizes long runs on
    /// chains that concentrate toward near-absorbing states
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_cache: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    OptRandom,
    Frontier,
    Sample,
    CommFrontier,
    CommSample,
    Optimal,
}

impl StrategyArg {
    fn kind(self) -> StrategyKind {
        match self {
            StrategyArg::Random => StrategyKind::Random,
            StrategyArg::OptRandom => StrategyKind::OptRandom,
            StrategyArg::Frontier => StrategyKind::Frontier,
            StrategyArg::Sample => StrategyKind::Sample,
            StrategyArg::CommFrontier => StrategyKind::CommFrontier,
            StrategyArg::CommSample => StrategyKind::CommSample,
            StrategyArg::Optimal => StrategyKind::Optimal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CountingArg {
    Stochastic,
    Expected,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long)]
    agents: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    runs: usize,
    #[arg(long)]
    seed: u64,
    /// Distribution file; required for sample/comm-sample/optimal
    #[arg(long)]
    dist: Option<PathBuf>,
    /// Frontier preference of the sample strategies
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "stochastic")]
    counting: CountingArg,
    /// Parallelism across runs (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_cache: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Tv,
    Hist,
    Markers,
    Bounds,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory produced by `simulate`
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    dist: Option<PathBuf>,
    #[arg(long, value_enum)]
    report: ReportArg,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Geometric checkpoint stride of the tv series
    #[arg(long, default_value_t = 1.1)]
    stride: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_cache: bool,
}

/// Written before any other output of a command; outputs live beside it.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    version: String,
    command: String,
    code_version: String,
    env_path: Option<String>,
    env_hash: Option<String>,
    vis_params: Option<VisibilityParams>,
    optimizer: Option<OptimizerConfig>,
    sim: Option<SimulationConfig>,
    seed: Option<u64>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            version: MANIFEST_VERSION.to_string(),
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            env_path: None,
            env_hash: None,
            vis_params: None,
            optimizer: None,
            sim: None,
            seed: None,
            outputs: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Env { cmd } => match cmd {
            EnvCmd::Generate { kind, seed, out } => cmd_env_generate(kind, seed, &out),
            EnvCmd::Validate { path } => cmd_env_validate(&path),
        },
        Command::Optimize(args) => cmd_optimize(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Metrics(args) => cmd_metrics(args),
    }
}

fn load_validated_env(path: &Path) -> Result<(GridSpec, MovementGraph), CliError> {
    let grid = load_environment(path)?;
    let graph = build_movement_graph(&grid)?;
    let report = check_strong_connectivity(&graph);
    if !report.is_strong {
        return Err(CliError::Validation(format!(
            "movement graph is not strongly connected ({} components)",
            report.components.len()
        )));
    }
    Ok((grid, graph))
}

fn cache_dir_for(env_path: &Path) -> PathBuf {
    match std::env::var_os("BOIL_CACHE_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => env_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
    }
}

/// Computes or restores the visibility map; the cache file sits beside the
/// environment (or in BOIL_CACHE_DIR) keyed by a content hash.
fn obtain_visibility(
    grid: &GridSpec,
    graph: &MovementGraph,
    params: &VisibilityParams,
    env_path: &Path,
    no_cache: bool,
) -> Result<VisibilityMap, CliError> {
    let hash = content_hash(grid, params);
    let cache_path = cache_dir_for(env_path).join(format!("vis_{}.json", &hash[..16]));
    if !no_cache {
        if let Ok(map) = load_visibility_cache(&cache_path, grid, params) {
            return Ok(map);
        }
    }
    let map = build_visibility_map(grid, graph, params);
    if !no_cache {
        if let Some(dir) = cache_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_visibility_cache(&cache_path, grid, params, &map)?;
    }
    Ok(map)
}

fn cmd_env_generate(kind: KindArg, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind = match kind {
        KindArg::Small => EnvKind::Small,
        KindArg::Large => EnvKind::Large,
    };
    let grid = generate_reference_env(kind, seed);
    let mut manifest = RunManifest::new("env generate");
    manifest.env_hash = Some(environment_hash(&grid));
    manifest.seed = Some(seed);
    manifest.outputs = vec![out.display().to_string()];
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    manifest.write(&sibling_manifest(out))?;
    save_environment(&grid, out)?;
    println!("wrote {} ({}x{})", out.display(), grid.width, grid.height);
    Ok(())
}

fn cmd_env_validate(path: &Path) -> Result<(), CliError> {
    let (grid, graph) = load_validated_env(path)?;
    println!(
        "ok: {}x{}, {} nodes, {} edges, {} markers",
        grid.width,
        grid.height,
        graph.num_nodes(),
        graph.num_edges(),
        grid.markers.len()
    );
    Ok(())
}

fn sibling_manifest(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

fn parse_patrol_nodes(spec: &str, graph: &MovementGraph) -> Result<Vec<NodeId>, CliError> {
    let mut nodes = Vec::new();
    for part in spec.split(',') {
        let id: u32 = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad patrol node {part:?}")))?;
        if id as usize >= graph.num_nodes() {
            return Err(CliError::Validation(format!("patrol node {id} out of range")));
        }
        nodes.push(NodeId(id));
    }
    Ok(nodes)
}

/// Reachability map: R(e)(w) = exp(-(d+1)/horizon) with d the hop distance
/// from the edge's destination; support truncated where R < 1e-6.
fn build_reachability_map(graph: &MovementGraph, horizon: f64) -> VisibilityMap {
    let n = graph.num_nodes();
    // BFS from every node over forward edges
    let mut dist_from = vec![vec![u32::MAX; n]; n];
    for s in 0..n {
        let d = &mut dist_from[s];
        d[s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &graph.out_edges[u] {
                let v = graph.edge(e).dst.index();
                if d[v] == u32::MAX {
                    d[v] = d[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    let per_edge = graph
        .edges
        .iter()
        .map(|e| {
            let d = &dist_from[e.dst.index()];
            (0..n)
                .filter_map(|w| {
                    let r = (-((d[w] as f64) + 1.0) / horizon).exp();
                    (r >= 1e-6).then_some((NodeId(w as u32), r))
                })
                .collect()
        })
        .collect();
    VisibilityMap { num_nodes: n, per_edge }
}

fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("iteration,loss,accepted_best\n");
    let mut best = f64::INFINITY;
    for (i, &loss) in trace.iter().enumerate() {
        let accepted = loss < best;
        if accepted {
            best = loss;
        }
        text.push_str(&format!("{i},{loss},{accepted}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_optimize(args: OptimizeArgs) -> Result<(), CliError> {
    let (grid, graph) = load_validated_env(&args.env)?;
    let vis_params = VisibilityParams::default();
    let vis = obtain_visibility(&grid, &graph, &vis_params, &args.env, args.no_cache)?;
    let env_hash = environment_hash(&grid);

    // the chain slows down as probability concentrates, so the solver gets a
    // looser tolerance and a deeper sweep budget than the library default
    let config = OptimizerConfig {
        step_size: args.mu,
        num_steps: args.steps,
        perturbation_radius: args.tau,
        seed: args.seed,
        stationary_tol: 1e-8,
        stationary_max_iters: 500_000,
        damping: args.damping,
        ..OptimizerConfig::default()
    };
    if args.mu <= 0.0 || args.tau <= 0.0 {
        return Err(CliError::Usage("--mu and --tau must be positive".into()));
    }
    if !(0.0..1.0).contains(&args.damping) {
        return Err(CliError::Usage("--damping must lie in [0,1)".into()));
    }

    let patrol = match (&args.loss, &args.patrol_nodes) {
        (LossArg::Patrolling, Some(spec)) => Some(parse_patrol_nodes(spec, &graph)?),
        (LossArg::Patrolling, None) => {
            return Err(CliError::Usage("--loss patrolling requires --patrol-nodes".into()))
        }
        (_, Some(_)) => {
            return Err(CliError::Usage("--patrol-nodes only applies to --loss patrolling".into()))
        }
        _ => None,
    };
    let reach = matches!(args.loss, LossArg::Reachability)
        .then(|| build_reachability_map(&graph, args.reach_horizon));

    let mut manifest = RunManifest::new("optimize");
    manifest.env_path = Some(args.env.display().to_string());
    manifest.env_hash = Some(env_hash.clone());
    manifest.vis_params = Some(vis_params);
    manifest.optimizer = Some(config.clone());
    manifest.seed = Some(args.seed);
    let trace_path = PathBuf::from(format!("{}.trace.csv", args.out.display()));
    manifest.outputs =
        vec![args.out.display().to_string(), trace_path.display().to_string()];
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    manifest.write(&sibling_manifest(&args.out))?;

    // Path augmentation optimizes over the macro-edge set, then folds the
    // result back onto base edges (which preserves the loss).
    if let Some(paths_file) = &args.augment_paths {
        let text = std::fs::read_to_string(paths_file)?;
        let walks: Vec<Vec<u32>> = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("bad paths file: {e}")))?;
        let mut aug = AugmentedGraph::new(graph.clone());
        let mut aug_vis = vis.clone();
        for walk in &walks {
            let nodes: Vec<NodeId> = walk.iter().map(|&i| NodeId(i)).collect();
            if nodes.len() < 2 {
                return Err(CliError::Validation("each walk needs at least two nodes".into()));
            }
            augment_with_path(&mut aug, &mut aug_vis, &nodes)?;
        }
        let loss_spec = loss_spec(&args.loss, &aug_vis, patrol.as_deref(), reach.as_ref());
        let result = boil_optimize(&aug.graph, &loss_spec, &config, None)?;
        let aug_dist = edge_distribution(&result.transitions, &result.stationary, &aug.graph);
        let base_dist = back_project(&aug, &aug_dist);
        let (pi, p) = decompose_edge_distribution(&base_dist, &graph)?;
        let meta = DistMeta {
            loss: result.loss_trace[result.best_iter],
            iterations: config.num_steps,
            seed: args.seed,
            env_hash,
        };
        save_distribution(&args.out, &graph, &p, &pi, &meta)?;
        write_loss_trace(&trace_path, &result.loss_trace)?;
        println!("wrote {} (loss {:.6})", args.out.display(), meta.loss);
        return Ok(());
    }

    if let Some(frac) = args.split_p {
        if !(0.0 < frac && frac < 1.0) {
            return Err(CliError::Usage("--split-p must lie in (0,1)".into()));
        }
        let loss_spec = loss_spec(&args.loss, &vis, patrol.as_deref(), reach.as_ref());
        let split = SplitConfig::constant(&graph, frac, args.lambda);
        let result = split_optimize(&graph, &loss_spec, &config, &split)?;
        let combined = EdgeDistribution(
            result
                .first
                .0
                .iter()
                .zip(&result.second.0)
                .map(|(a, b)| frac * a + (1.0 - frac) * b)
                .collect(),
        );
        let (pi, p) = decompose_edge_distribution(&combined, &graph)?;
        let best = result.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        let meta =
            DistMeta { loss: best, iterations: config.num_steps, seed: args.seed, env_hash };
        save_distribution(&args.out, &graph, &p, &pi, &meta)?;
        write_loss_trace(&trace_path, &result.loss_trace)?;
        // components go to a sidecar for inspection
        let sidecar = serde_json::json!({
            "version": "split/1",
            "fraction": frac,
            "first": result.first.0,
            "second": result.second.0,
            "first_pi": result.first_pi.0,
            "second_pi": result.second_pi.0,
        });
        std::fs::write(
            format!("{}.split.json", args.out.display()),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        println!("wrote {} (penalized loss {best:.6})", args.out.display());
        return Ok(());
    }

    let loss_spec = loss_spec(&args.loss, &vis, patrol.as_deref(), reach.as_ref());
    let result = boil_optimize(&graph, &loss_spec, &config, None)?;
    let meta = DistMeta {
        loss: result.loss_trace[result.best_iter],
        iterations: config.num_steps,
        seed: args.seed,
        env_hash,
    };
    save_distribution(&args.out, &graph, &result.transitions, &result.stationary, &meta)?;
    write_loss_trace(&trace_path, &result.loss_trace)?;
    println!("wrote {} (loss {:.6})", args.out.display(), meta.loss);
    Ok(())
}

fn loss_spec<'a>(
    arg: &LossArg,
    vis: &'a VisibilityMap,
    patrol: Option<&'a [NodeId]>,
    reach: Option<&'a VisibilityMap>,
) -> LossSpec<'a> {
    match arg {
        LossArg::Coverage => LossSpec::Coverage { vis },
        LossArg::Patrolling => LossSpec::Patrolling {
            vis,
            patrol_set: patrol.expect("checked by caller"),
        },
        LossArg::Reachability => LossSpec::Reachability { reach: reach.expect("checked") },
    }
}

fn load_dist_for_env(
    path: &Path,
    grid: &GridSpec,
    graph: &MovementGraph,
) -> Result<(TransitionVector, StationaryDist), CliError> {
    let (p, pi, meta) = load_distribution(path, graph)?;
    if !meta.env_hash.is_empty() && meta.env_hash != environment_hash(grid) {
        return Err(CliError::Validation(format!(
            "distribution {} was learned on a different environment",
            path.display()
        )));
    }
    Ok((p, pi))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let kind = args.strategy.kind();
    if kind.needs_distribution() && args.dist.is_none() {
        return Err(CliError::Usage(format!(
            "strategy {:?} requires --dist",
            kind
        )));
    }
    let (grid, graph) = load_validated_env(&args.env)?;
    let vis_params = VisibilityParams::default();
    let vis = obtain_visibility(&grid, &graph, &vis_params, &args.env, args.no_cache)?;
    let dist = args
        .dist
        .as_deref()
        .map(|p| load_dist_for_env(p, &grid, &graph))
        .transpose()?;

    let config = SimulationConfig {
        n_agents: args.agents,
        steps: args.steps,
        runs: args.runs,
        seed: args.seed,
        strategy: StrategyConfig { kind, lambda: args.lambda },
        placement: InitialPlacement::UniformRandom,
        counting: match args.counting {
            CountingArg::Stochastic => VisibilityCounting::Stochastic,
            CountingArg::Expected => VisibilityCounting::Expected,
        },
    };
    if config.n_agents == 0 || config.steps == 0 || config.runs == 0 {
        return Err(CliError::Usage("--agents, --steps, and --runs must be positive".into()));
    }

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new("simulate");
    manifest.env_path = Some(args.env.display().to_string());
    manifest.env_hash = Some(environment_hash(&grid));
    manifest.vis_params = Some(vis_params);
    manifest.sim = Some(config.clone());
    manifest.seed = Some(args.seed);
    manifest.outputs = (0..args.runs)
        .flat_map(|r| {
            ["trace", "summary", "markers"]
                .iter()
                .map(move |k| format!("{k}_run{r}.csv"))
        })
        .collect();
    manifest.write(&args.out.join("manifest.json"))?;

    let traces = match args.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| CliError::Validation(e.to_string()))?;
            pool.install(|| run_simulation(&grid, &graph, &vis, &config, dist.as_ref()))?
        }
        None => run_simulation(&grid, &graph, &vis, &config, dist.as_ref())?,
    };

    for (r, trace) in traces.iter().enumerate() {
        write_trace_files(&args.out, r, trace, &grid, &graph)?;
    }
    println!(
        "wrote {} runs of {} steps x {} agents to {}",
        args.runs,
        args.steps,
        args.agents,
        args.out.display()
    );
    Ok(())
}

fn write_trace_files(
    dir: &Path,
    run: usize,
    trace: &Trace,
    grid: &GridSpec,
    graph: &MovementGraph,
) -> Result<(), CliError> {
    let mut step_csv = String::from("# manifest: manifest.json\nstep,agent,edge_src,edge_dst\n");
    for (i, &e) in trace.step_log.iter().enumerate() {
        let step = i / trace.n_agents;
        let agent = i % trace.n_agents;
        let edge = graph.edge(e);
        step_csv.push_str(&format!("{step},{agent},{},{}\n", edge.src.0, edge.dst.0));
    }
    std::fs::write(dir.join(format!("trace_run{run}.csv")), step_csv)?;

    let mut summary =
        String::from("# manifest: manifest.json\nnode,x,y,visibility_count,cross_term\n");
    for (w, &c) in trace.node_visibility_counts.iter().enumerate() {
        let (x, y) = graph.node_xy(grid, NodeId(w as u32));
        summary.push_str(&format!("{w},{x},{y},{c},{}\n", trace.cross_term_counts[w]));
    }
    std::fs::write(dir.join(format!("summary_run{run}.csv")), summary)?;

    let mut markers = String::from("# manifest: manifest.json\nmarker,count\n");
    for &(m, c) in &trace.marker_counts {
        markers.push_str(&format!("{},{c}\n", m.0));
    }
    std::fs::write(dir.join(format!("markers_run{run}.csv")), markers)?;
    Ok(())
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            seen_header = true; // skip the column header
            continue;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(row: &[String], idx: usize, path: &Path) -> Result<T, CliError> {
    row.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Validation(format!("malformed row in {}", path.display())))
}

/// Rebuilds traces from the CSV files `simulate` wrote. Per-agent counts are
/// not persisted and stay empty.
fn load_traces(
    dir: &Path,
    config: &SimulationConfig,
    graph: &MovementGraph,
) -> Result<Vec<Trace>, CliError> {
    let mut traces = Vec::with_capacity(config.runs);
    for r in 0..config.runs {
        let step_path = dir.join(format!("trace_run{r}.csv"));
        let rows = read_csv_rows(&step_path)?;
        if rows.len() != config.n_agents * config.steps {
            return Err(CliError::Validation(format!(
                "{} has {} rows, expected {}",
                step_path.display(),
                rows.len(),
                config.n_agents * config.steps
            )));
        }
        let mut step_log = Vec::with_capacity(rows.len());
        let mut edge_counts = vec![0u64; graph.num_edges()];
        for row in &rows {
            let src: u32 = parse_field(row, 2, &step_path)?;
            let dst: u32 = parse_field(row, 3, &step_path)?;
            let e = graph.find_edge(NodeId(src), NodeId(dst)).ok_or_else(|| {
                CliError::Validation(format!("edge ({src},{dst}) not in graph"))
            })?;
            step_log.push(e);
            edge_counts[e.index()] += 1;
        }

        let summary_path = dir.join(format!("summary_run{r}.csv"));
        let rows = read_csv_rows(&summary_path)?;
        let mut node_visibility_counts = vec![0.0; graph.num_nodes()];
        let mut cross_term_counts = vec![0.0; graph.num_nodes()];
        for row in &rows {
            let w: usize = parse_field(row, 0, &summary_path)?;
            if w >= graph.num_nodes() {
                return Err(CliError::Validation(format!("node {w} out of range")));
            }
            node_visibility_counts[w] = parse_field(row, 3, &summary_path)?;
            cross_term_counts[w] = parse_field(row, 4, &summary_path)?;
        }

        let markers_path = dir.join(format!("markers_run{r}.csv"));
        let rows = read_csv_rows(&markers_path)?;
        let mut marker_counts = Vec::new();
        for row in &rows {
            let m: u32 = parse_field(row, 0, &markers_path)?;
            let c: f64 = parse_field(row, 1, &markers_path)?;
            marker_counts.push((NodeId(m), c));
        }

        traces.push(Trace {
            n_agents: config.n_agents,
            steps: config.steps,
            edge_counts,
            step_log,
            node_visibility_counts,
            per_agent_visibility_counts: Vec::new(),
            cross_term_counts,
            marker_counts,
        });
    }
    Ok(traces)
}

fn strategy_label(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::Random => "random",
        StrategyKind::OptRandom => "opt-random",
        StrategyKind::Frontier => "frontier",
        StrategyKind::Sample => "sample",
        StrategyKind::CommFrontier => "comm-frontier",
        StrategyKind::CommSample => "comm-sample",
        StrategyKind::Optimal => "optimal",
    }
}

fn cmd_metrics(args: MetricsArgs) -> Result<(), CliError> {
    let manifest_path = args.traces.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CliError::Validation(format!(
            "unsupported manifest version {:?}",
            manifest.version
        )));
    }
    let sim = manifest
        .sim
        .ok_or_else(|| CliError::Validation("manifest has no simulation config".into()))?;
    let env_path = PathBuf::from(
        manifest
            .env_path
            .ok_or_else(|| CliError::Validation("manifest has no environment path".into()))?,
    );
    let (grid, graph) = load_validated_env(&env_path)?;
    let strategy = strategy_label(sim.strategy.kind);
    let traces = load_traces(&args.traces, &sim, &graph)?;

    std::fs::create_dir_all(&args.out)?;
    let mut out_manifest = RunManifest::new("metrics");
    out_manifest.env_path = Some(env_path.display().to_string());
    out_manifest.env_hash = Some(environment_hash(&grid));
    out_manifest.sim = Some(sim.clone());
    let report_file = match args.report {
        ReportArg::Tv => "tv_series.csv",
        ReportArg::Hist => "hist.csv",
        ReportArg::Markers => "markers.csv",
        ReportArg::Bounds => "bounds.csv",
    };
    out_manifest.outputs = vec![report_file.to_string()];
    out_manifest.write(&args.out.join("manifest.json"))?;

    match args.report {
        ReportArg::Tv => {
            let target = match &args.dist {
                Some(path) => {
                    let (p, pi) = load_dist_for_env(path, &grid, &graph)?;
                    edge_distribution(&p, &pi, &graph)
                }
                None => {
                    let p = TransitionVector::uniform(&graph);
                    let pi = crate::markov::stationary_distribution(&p, &graph, 1e-10, 100_000)?;
                    edge_distribution(&p, &pi, &graph)
                }
            };
            let mut csv = String::from("step,tv,strategy,run\n");
            for (r, trace) in traces.iter().enumerate() {
                let series = convergence_series(trace, &target, args.stride)?;
                for (step, tv) in series.checkpoints {
                    csv.push_str(&format!("{step},{tv},{strategy},{r}\n"));
                }
            }
            std::fs::write(args.out.join(report_file), csv)?;
        }
        ReportArg::Hist => {
            let hist = visibility_histogram(&traces, args.bins)?;
            let mut csv = String::from("strategy,bin_lo,bin_hi,mean,min,max\n");
            for b in hist.bins {
                csv.push_str(&format!(
                    "{strategy},{},{},{},{},{}\n",
                    b.lo, b.hi, b.mean, b.min, b.max
                ));
            }
            std::fs::write(args.out.join(report_file), csv)?;
        }
        ReportArg::Markers => {
            let mut per_marker: HashMap<u32, Vec<f64>> = HashMap::new();
            for trace in &traces {
                for &(m, c) in &trace.marker_counts {
                    per_marker.entry(m.0).or_default().push(c);
                }
            }
            let mut keys: Vec<u32> = per_marker.keys().copied().collect();
            keys.sort_unstable();
            let mut csv = String::from("strategy,marker,mean,var\n");
            for m in keys {
                let counts = &per_marker[&m];
                let n = counts.len() as f64;
                let mean = counts.iter().sum::<f64>() / n;
                let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
                csv.push_str(&format!("{strategy},{m},{mean},{var}\n"));
            }
            std::fs::write(args.out.join(report_file), csv)?;
        }
        ReportArg::Bounds => {
            let vis_params = manifest.vis_params.unwrap_or_default();
            let vis = obtain_visibility(&grid, &graph, &vis_params, &env_path, args.no_cache)?;
            let mut csv = String::from(
                "run,node,lower,observed,upper,cross_term,band,excluded,violation\n",
            );
            for (r, trace) in traces.iter().enumerate() {
                for b in theorem1_bound_report(trace, &vis) {
                    csv.push_str(&format!(
                        "{r},{},{},{},{},{},{},{},{}\n",
                        b.node, b.lower, b.observed, b.upper, b.cross_term, b.band, b.excluded,
                        b.violation
                    ));
                }
            }
            std::fs::write(args.out.join(report_file), csv)?;
        }
    }
    println!("wrote {}", args.out.join(report_file).display());
    Ok(())
}
