//! Grid environments and the directed movement graph derived from them.
//!
//! A [`GridSpec`] is a rectangular field of walls and open cells with three
//! elevation levels plus a set of marker nodes. [`build_movement_graph`]
//! turns it into a strongly connected directed graph with mandatory
//! self-loops: agents can climb at most one elevation level per step but may
//! step down to any lower-or-equal adjacent cell.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_FORMAT_VERSION: &str = "env/1";

/// Dense handle for an open cell / graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// Dense handle for a directed edge of the movement graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl EdgeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Wall,
    Open,
}

/// One grid cell. Elevation is meaningful only for open cells and is always
/// one of {0, 1, 2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: CellKind,
    pub elev: u8,
}

impl Cell {
    pub fn wall() -> Self {
        Cell { kind: CellKind::Wall, elev: 0 }
    }

    pub fn open(elev: u8) -> Self {
        Cell { kind: CellKind::Open, elev }
    }

    pub fn is_open(&self) -> bool {
        self.kind == CellKind::Open
    }
}

/// A rectangular environment: row-major cells, top-left origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    /// Tracked points of interest, as node ids of the derived movement graph.
    pub markers: Vec<NodeId>,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("grid has no cells")]
    EmptyGrid,
    #[error("grid contains no open cells")]
    AllWalls,
    #[error("parse error at {path}: {message}")]
    ParseError { path: String, message: String },
    #[error("validation failed: {0}")]
    ValidationError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GridSpec {
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &Cell {
        &self.cells[y * self.width + x]
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Checks the structural invariants: cell count, elevation range, and
    /// markers referring to open cells.
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width == 0 || self.height == 0 || self.cells.is_empty() {
            return Err(EnvError::EmptyGrid);
        }
        if self.cells.len() != self.width * self.height {
            return Err(EnvError::ValidationError(format!(
                "cells length {} != width*height {}",
                self.cells.len(),
                self.width * self.height
            )));
        }
        for (i, c) in self.cells.iter().enumerate() {
            if c.is_open() && c.elev > 2 {
                return Err(EnvError::ValidationError(format!(
                    "cell {i} has elevation {} outside {{0,1,2}}",
                    c.elev
                )));
            }
        }
        let open: Vec<usize> = (0..self.cells.len()).filter(|&i| self.cells[i].is_open()).collect();
        if open.is_empty() {
            return Err(EnvError::AllWalls);
        }
        for m in &self.markers {
            if m.index() >= open.len() {
                return Err(EnvError::ValidationError(format!(
                    "marker {m} is not a valid node id (|V| = {})",
                    open.len()
                )));
            }
        }
        Ok(())
    }
}

/// Directed movement graph over the open cells of a grid. Every node carries
/// a self-loop; traversal times are fixed per edge.
#[derive(Debug, Clone)]
pub struct MovementGraph {
    /// node id -> row-major cell index in the originating grid
    pub node_cells: Vec<usize>,
    /// cell index -> node id (walls map to None)
    pub cell_nodes: Vec<Option<NodeId>>,
    pub edges: Vec<Edge>,
    /// node id -> outgoing edge ids (self-loop included)
    pub out_edges: Vec<Vec<EdgeId>>,
    /// (dst, src) -> edge id, for reverse-edge lookups
    reverse: HashMap<(NodeId, NodeId), EdgeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub traversal_time: f64,
}

impl MovementGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_cells.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e.index()]
    }

    /// Edge id of (src, dst) if present.
    pub fn find_edge(&self, src: NodeId, dst: NodeId) -> Option<EdgeId> {
        self.reverse.get(&(src, dst)).copied()
    }

    /// Self-loop edge of a node. Guaranteed to exist by construction.
    pub fn self_loop(&self, u: NodeId) -> EdgeId {
        self.find_edge(u, u).expect("every node has a self-loop")
    }

    /// Grid coordinates (x, y) of a node's cell.
    pub fn node_xy(&self, grid: &GridSpec, u: NodeId) -> (usize, usize) {
        let c = self.node_cells[u.index()];
        (c % grid.width, c / grid.width)
    }

    /// Builds a graph from an explicit edge list, for topologies that no
    /// grid produces (test oracles, random chains). Nodes map to cells of a
    /// notional 1 x n strip. Every node must carry a self-loop.
    pub fn from_edge_list(num_nodes: usize, edge_pairs: &[(u32, u32)]) -> Result<Self, EnvError> {
        let mut edges = Vec::with_capacity(edge_pairs.len());
        let mut out_edges = vec![Vec::new(); num_nodes];
        let mut reverse = HashMap::new();
        for &(src, dst) in edge_pairs {
            if src as usize >= num_nodes || dst as usize >= num_nodes {
                return Err(EnvError::ValidationError(format!(
                    "edge ({src},{dst}) references a node outside 0..{num_nodes}"
                )));
            }
            let id = EdgeId(edges.len() as u32);
            let (src, dst) = (NodeId(src), NodeId(dst));
            if reverse.insert((src, dst), id).is_some() {
                return Err(EnvError::ValidationError(format!(
                    "duplicate edge ({src}, {dst})"
                )));
            }
            edges.push(Edge { src, dst, traversal_time: 1.0 });
            out_edges[src.index()].push(id);
        }
        for u in 0..num_nodes {
            let u = NodeId(u as u32);
            if !reverse.contains_key(&(u, u)) {
                return Err(EnvError::ValidationError(format!("node {u} has no self-loop")));
            }
        }
        Ok(MovementGraph {
            node_cells: (0..num_nodes).collect(),
            cell_nodes: (0..num_nodes).map(|i| Some(NodeId(i as u32))).collect(),
            edges,
            out_edges,
            reverse,
        })
    }

    /// Appends a macro edge (a multi-hop path treated as one edge). The edge
    /// is kept out of the (src, dst) reverse index so it never shadows a base
    /// edge between the same endpoints.
    pub fn add_macro_edge(&mut self, src: NodeId, dst: NodeId, traversal_time: f64) -> EdgeId {
        let id = EdgeId(self.edges.len() as u32);
        self.edges.push(Edge { src, dst, traversal_time });
        self.out_edges[src.index()].push(id);
        id
    }
}

/// Builds the 4-connected movement graph with the asymmetric elevation rule:
/// an edge u->v exists iff elev(v) <= elev(u) (descents and level moves) or
/// elev(v) == elev(u) + 1 (climb one level per step). All traversal times are
/// 1.0, self-loops included.
pub fn build_movement_graph(grid: &GridSpec) -> Result<MovementGraph, EnvError> {
    if grid.cells.is_empty() {
        return Err(EnvError::EmptyGrid);
    }
    let mut node_cells = Vec::new();
    let mut cell_nodes = vec![None; grid.cells.len()];
    for (i, c) in grid.cells.iter().enumerate() {
        if c.is_open() {
            cell_nodes[i] = Some(NodeId(node_cells.len() as u32));
            node_cells.push(i);
        }
    }
    if node_cells.is_empty() {
        return Err(EnvError::AllWalls);
    }

    let mut edges = Vec::new();
    let mut out_edges = vec![Vec::new(); node_cells.len()];
    let mut reverse = HashMap::new();
    let push = |edges: &mut Vec<Edge>,
                    out_edges: &mut Vec<Vec<EdgeId>>,
                    reverse: &mut HashMap<(NodeId, NodeId), EdgeId>,
                    src: NodeId,
                    dst: NodeId| {
        let id = EdgeId(edges.len() as u32);
        edges.push(Edge { src, dst, traversal_time: 1.0 });
        out_edges[src.index()].push(id);
        reverse.insert((src, dst), id);
    };

    for (u_idx, &cell) in node_cells.iter().enumerate() {
        let u = NodeId(u_idx as u32);
        push(&mut edges, &mut out_edges, &mut reverse, u, u);
        let x = (cell % grid.width) as i64;
        let y = (cell / grid.width) as i64;
        let eu = grid.cells[cell].elev;
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if !grid.in_bounds(nx, ny) {
                continue;
            }
            let ncell = ny as usize * grid.width + nx as usize;
            let Some(v) = cell_nodes[ncell] else { continue };
            let ev = grid.cells[ncell].elev;
            if ev <= eu || ev == eu + 1 {
                push(&mut edges, &mut out_edges, &mut reverse, u, v);
            }
        }
    }

    Ok(MovementGraph { node_cells, cell_nodes, edges, out_edges, reverse })
}

/// Result of a strong-connectivity check.
#[derive(Debug, Clone)]
pub struct ConnectivityReport {
    pub is_strong: bool,
    pub components: Vec<Vec<NodeId>>,
}

/// Tarjan's strongly connected components, iterative to stay off the call
/// stack on large grids.
pub fn check_strong_connectivity(graph: &MovementGraph) -> ConnectivityReport {
    let n = graph.num_nodes();
    let mut index = vec![usize::MAX; n];
    let mut lowlink = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut components: Vec<Vec<NodeId>> = Vec::new();
    let mut next_index = 0usize;

    // (node, next out-edge position)
    let mut call_stack: Vec<(usize, usize)> = Vec::new();
    for start in 0..n {
        if index[start] != usize::MAX {
            continue;
        }
        call_stack.push((start, 0));
        index[start] = next_index;
        lowlink[start] = next_index;
        next_index += 1;
        stack.push(start);
        on_stack[start] = true;

        while let Some(&mut (v, ref mut pos)) = call_stack.last_mut() {
            if *pos < graph.out_edges[v].len() {
                let e = graph.out_edges[v][*pos];
                *pos += 1;
                let w = graph.edge(e).dst.index();
                if index[w] == usize::MAX {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call_stack.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
            } else {
                call_stack.pop();
                if let Some(&(parent, _)) = call_stack.last() {
                    lowlink[parent] = lowlink[parent].min(lowlink[v]);
                }
                if lowlink[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        comp.push(NodeId(w as u32));
                        if w == v {
                            break;
                        }
                    }
                    comp.sort();
                    components.push(comp);
                }
            }
        }
    }

    components.sort_by_key(|c| c[0]);
    ConnectivityReport { is_strong: components.len() == 1, components }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Small,
    Large,
}

/// Procedurally generated stand-in for the reference environments:
/// Small is 36x36 with wall blocks and three elevation levels, Large is
/// 70x70 with no walls and a smooth multi-hill topography that never
/// restricts movement. Deterministic per seed.
pub fn generate_reference_env(kind: EnvKind, seed: u64) -> GridSpec {
    match kind {
        EnvKind::Small => generate_env(36, 36, true, seed),
        EnvKind::Large => generate_env(70, 70, false, seed),
    }
}

/// Generator behind [`generate_reference_env`], exposed for experiments at
/// other grid sizes.
pub fn generate_env(width: usize, height: usize, walls: bool, seed: u64) -> GridSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut cells = vec![Cell::open(0); width * height];

    if walls {
        place_wall_blocks(width, height, &mut cells, &mut rng);
    }

    // Multi-hill elevation field, quantized to three levels.
    let n_hills = 3 + (rng.random::<u32>() % 3) as usize;
    let hills: Vec<(f64, f64, f64)> = (0..n_hills)
        .map(|_| {
            let cx = rng.random::<f64>() * width as f64;
            let cy = rng.random::<f64>() * height as f64;
            let r = (width.min(height) as f64) * (0.2 + 0.25 * rng.random::<f64>());
            (cx, cy, r)
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !cells[i].is_open() {
                continue;
            }
            let mut h: f64 = 0.0;
            for &(cx, cy, r) in &hills {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                h = h.max((1.0 - d / r).max(0.0));
            }
            cells[i].elev = if h > 0.66 {
                2
            } else if h > 0.33 {
                1
            } else {
                0
            };
        }
    }

    // Smooth so adjacent open cells never differ by more than one level.
    // Every neighbor edge then exists in both directions, which makes
    // strong connectivity follow from plain open-cell connectivity.
    smooth_elevation(width, height, &mut cells);

    let mut grid = GridSpec { width, height, cells, markers: Vec::new() };
    grid.markers = pick_markers(&grid);
    debug_assert!(grid.validate().is_ok());
    grid
}

fn place_wall_blocks(width: usize, height: usize, cells: &mut [Cell], rng: &mut ChaCha8Rng) {
    let attempts = 10;
    for _ in 0..attempts {
        let w = 2 + (rng.random::<u32>() as usize) % (width / 4);
        let h = 2 + (rng.random::<u32>() as usize) % 3;
        let x0 = 1 + (rng.random::<u32>() as usize) % (width - w - 1);
        let y0 = 1 + (rng.random::<u32>() as usize) % (height - h - 1);
        let block: Vec<usize> = (y0..y0 + h)
            .flat_map(|y| (x0..x0 + w).map(move |x| y * width + x))
            .collect();
        let saved: Vec<Cell> = block.iter().map(|&i| cells[i]).collect();
        for &i in &block {
            cells[i] = Cell::wall();
        }
        if !open_cells_connected(width, height, cells) {
            for (&i, &c) in block.iter().zip(&saved) {
                cells[i] = c;
            }
        }
    }
}

fn open_cells_connected(width: usize, height: usize, cells: &[Cell]) -> bool {
    let Some(start) = cells.iter().position(|c| c.is_open()) else { return false };
    let mut seen = vec![false; cells.len()];
    let mut queue = vec![start];
    seen[start] = true;
    let mut count = 1usize;
    while let Some(i) = queue.pop() {
        let (x, y) = ((i % width) as i64, (i / width) as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                continue;
            }
            let j = ny as usize * width + nx as usize;
            if !seen[j] && cells[j].is_open() {
                seen[j] = true;
                count += 1;
                queue.push(j);
            }
        }
    }
    count == cells.iter().filter(|c| c.is_open()).count()
}

fn smooth_elevation(width: usize, height: usize, cells: &mut [Cell]) {
    loop {
        let mut changed = false;
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if !cells[i].is_open() {
                    continue;
                }
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if cells[j].is_open() && cells[i].elev > cells[j].elev + 1 {
                        cells[i].elev = cells[j].elev + 1;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Four markers, one per quadrant, snapped to the nearest open cell.
fn pick_markers(grid: &GridSpec) -> Vec<NodeId> {
    let graph = build_movement_graph(grid).expect("generated grid has open cells");
    let targets = [
        (grid.width / 4, grid.height / 4),
        (3 * grid.width / 4, grid.height / 4),
        (grid.width / 4, 3 * grid.height / 4),
        (3 * grid.width / 4, 3 * grid.height / 4),
    ];
    let mut markers = Vec::new();
    for (tx, ty) in targets {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for u in 0..graph.num_nodes() {
            let node = NodeId(u as u32);
            if markers.contains(&node) {
                continue;
            }
            let (x, y) = graph.node_xy(grid, node);
            let d = ((x as f64 - tx as f64).powi(2) + (y as f64 - ty as f64).powi(2)).sqrt();
            if d < best_d {
                best_d = d;
                best = Some(node);
            }
        }
        markers.push(best.expect("non-empty graph"));
    }
    markers
}

#[derive(Serialize, Deserialize)]
struct EnvFile {
    version: String,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    markers: Vec<u32>,
}

/// Sha256 over the serialized grid; identifies the environment in
/// distribution files and manifests.
pub fn environment_hash(grid: &GridSpec) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(grid).expect("grid serializes"));
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_environment(grid: &GridSpec, path: &Path) -> Result<(), EnvError> {
    let file = EnvFile {
        version: ENV_FORMAT_VERSION.to_string(),
        width: grid.width,
        height: grid.height,
        cells: grid.cells.clone(),
        markers: grid.markers.iter().map(|m| m.0).collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("env serializes");
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_environment(path: &Path) -> Result<GridSpec, EnvError> {
    let text = std::fs::read_to_string(path)?;
    let file: EnvFile = serde_json::from_str(&text).map_err(|e| EnvError::ParseError {
        path: path.display().to_string(),
        message: format!("{e} (line {}, column {})", e.line(), e.column()),
    })?;
    if file.version != ENV_FORMAT_VERSION {
        return Err(EnvError::ValidationError(format!(
            "unsupported environment format version {:?}",
            file.version
        )));
    }
    let grid = GridSpec {
        width: file.width,
        height: file.height,
        cells: file.cells,
        markers: file.markers.into_iter().map(NodeId).collect(),
    };
    grid.validate()?;
    Ok(grid)
}
