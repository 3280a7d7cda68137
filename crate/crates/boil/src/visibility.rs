//! Elevation-aware line of sight and the per-edge visibility function.
//!
//! For every directed edge the map stores a sparse vector over environment
//! nodes: the fraction of sample positions along the edge from which each
//! node is visible. Vision is range-limited, blocked by walls, blocked by
//! intermediate terrain strictly higher than both endpoints, and (while
//! moving) restricted to the forward half-plane of the movement direction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

use crate::environment::{EdgeId, GridSpec, MovementGraph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fov {
    /// 180 degrees facing the movement direction.
    ForwardHalfPlane,
    Omni,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityParams {
    /// Maximum sight distance in cell units.
    pub radius: f64,
    pub fov: Fov,
    /// Sample positions per edge when discretizing the traversal-time average.
    pub samples_per_edge: usize,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        VisibilityParams { radius: 3.5, fov: Fov::ForwardHalfPlane, samples_per_edge: 4 }
    }
}

#[derive(Debug, Error)]
pub enum VisibilityError {
    #[error("observer position ({0}, {1}) is out of bounds or on a wall")]
    OutOfBounds(f64, f64),
    #[error("path is not contiguous at position {0}")]
    NonContiguousPath(usize),
    #[error("path and traversal-time lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("visibility cache hash mismatch: expected {expected}, file has {found}")]
    CacheMismatch { expected: String, found: String },
    #[error("cache parse error: {0}")]
    CacheParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse per-edge visibility vectors; absent entries are zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisibilityMap {
    pub num_nodes: usize,
    /// edge id -> sorted (node, value in (0,1]) pairs
    pub per_edge: Vec<Vec<(NodeId, f64)>>,
}

impl VisibilityMap {
    pub fn edge(&self, e: EdgeId) -> &[(NodeId, f64)] {
        &self.per_edge[e.index()]
    }

    pub fn value(&self, e: EdgeId, w: NodeId) -> f64 {
        self.per_edge[e.index()]
            .iter()
            .find(|(n, _)| *n == w)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }
}

/// True iff `target` is visible from the continuous observer position:
/// within range, inside the field of view, and not occluded by walls or by
/// intermediate terrain strictly above both the observer and the target.
pub fn line_of_sight(
    grid: &GridSpec,
    observer: (f64, f64),
    observer_elev: u8,
    target: NodeId,
    graph: &MovementGraph,
    params: &VisibilityParams,
    heading: Option<(f64, f64)>,
) -> Result<bool, VisibilityError> {
    let (ox, oy) = observer;
    if !grid.in_bounds(ox.floor() as i64, oy.floor() as i64)
        || !grid.cell(ox.floor() as usize, oy.floor() as usize).is_open()
    {
        return Err(VisibilityError::OutOfBounds(ox, oy));
    }
    let (tx, ty) = graph.node_xy(grid, target);
    let (tcx, tcy) = (tx as f64 + 0.5, ty as f64 + 0.5);
    let (dx, dy) = (tcx - ox, tcy - oy);
    let dist = (dx * dx + dy * dy).sqrt();
    if dist > params.radius {
        return Ok(false);
    }
    if params.fov == Fov::ForwardHalfPlane {
        if let Some((hx, hy)) = heading {
            if dx * hx + dy * hy < 0.0 {
                return Ok(false);
            }
        }
    }
    let target_elev = grid.cell(tx, ty).elev;
    let limit = observer_elev.max(target_elev);
    let target_cell = ty * grid.width + tx;
    let observer_cell = oy.floor() as usize * grid.width + ox.floor() as usize;
    for cell in supercover(grid, (ox, oy), (tcx, tcy)) {
        if cell == target_cell || cell == observer_cell {
            continue;
        }
        let c = &grid.cells[cell];
        if !c.is_open() || c.elev > limit {
            return Ok(false);
        }
    }
    Ok(true)
}

/// All cell indices the segment touches, corner cases included (supercover).
fn supercover(grid: &GridSpec, from: (f64, f64), to: (f64, f64)) -> Vec<usize> {
    let mut cells = Vec::new();
    let (x0, y0) = from;
    let (x1, y1) = to;
    let dx = x1 - x0;
    let dy = y1 - y0;
    let steps = ((dx.abs().max(dy.abs())) * 16.0).ceil().max(1.0) as usize;
    let mut last = usize::MAX;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + dx * t;
        let y = y0 + dy * t;
        // At cell-boundary crossings, include every cell the point touches.
        let eps = 1e-9;
        for (px, py) in [(x - eps, y - eps), (x + eps, y - eps), (x - eps, y + eps), (x + eps, y + eps)] {
            let (cx, cy) = (px.floor() as i64, py.floor() as i64);
            if !grid.in_bounds(cx, cy) {
                continue;
            }
            let idx = cy as usize * grid.width + cx as usize;
            if idx != last && !cells.contains(&idx) {
                cells.push(idx);
                last = idx;
            }
        }
    }
    cells
}

/// Time-discretized visibility of one edge: the average of line-of-sight
/// indicators over equally spaced sample positions along the straight
/// segment from src to dst. Self-loops observe omnidirectionally from the
/// node center.
pub fn edge_visibility(
    grid: &GridSpec,
    graph: &MovementGraph,
    edge: EdgeId,
    params: &VisibilityParams,
) -> Vec<(NodeId, f64)> {
    let e = graph.edge(edge);
    let (sx, sy) = graph.node_xy(grid, e.src);
    let (dxc, dyc) = graph.node_xy(grid, e.dst);
    let src_c = (sx as f64 + 0.5, sy as f64 + 0.5);
    let dst_c = (dxc as f64 + 0.5, dyc as f64 + 0.5);
    let self_loop = e.src == e.dst;

    let heading = if self_loop {
        None
    } else {
        let hx = dst_c.0 - src_c.0;
        let hy = dst_c.1 - src_c.1;
        let norm = (hx * hx + hy * hy).sqrt();
        Some((hx / norm, hy / norm))
    };
    let eff_params = if self_loop {
        VisibilityParams { fov: Fov::Omni, ..*params }
    } else {
        *params
    };
    let samples = if self_loop { 1 } else { params.samples_per_edge.max(1) };

    // Candidate targets: nodes whose center can be within radius of the segment.
    let reach = params.radius + 2.0;
    let min_x = (src_c.0.min(dst_c.0) - reach).floor().max(0.0) as usize;
    let max_x = (src_c.0.max(dst_c.0) + reach).ceil().min(grid.width as f64) as usize;
    let min_y = (src_c.1.min(dst_c.1) - reach).floor().max(0.0) as usize;
    let max_y = (src_c.1.max(dst_c.1) + reach).ceil().min(grid.height as f64) as usize;

    let mut out = Vec::new();
    for y in min_y..max_y {
        for x in min_x..max_x {
            let Some(target) = graph.cell_nodes[y * grid.width + x] else { continue };
            let mut hits = 0usize;
            for s in 0..samples {
                let t = (s as f64 + 0.5) / samples as f64;
                let pos = if self_loop {
                    src_c
                } else {
                    (src_c.0 + (dst_c.0 - src_c.0) * t, src_c.1 + (dst_c.1 - src_c.1) * t)
                };
                let elev = grid
                    .cell(pos.0.floor() as usize, pos.1.floor() as usize)
                    .elev;
                if line_of_sight(grid, pos, elev, target, graph, &eff_params, heading)
                    .unwrap_or(false)
                {
                    hits += 1;
                }
            }
            if hits > 0 {
                out.push((target, hits as f64 / samples as f64));
            }
        }
    }
    out
}

/// Builds the full visibility map, one sparse vector per edge.
pub fn build_visibility_map(
    grid: &GridSpec,
    graph: &MovementGraph,
    params: &VisibilityParams,
) -> VisibilityMap {
    let per_edge: Vec<Vec<(NodeId, f64)>> = (0..graph.num_edges())
        .into_par_iter()
        .map(|e| edge_visibility(grid, graph, EdgeId(e as u32), params))
        .collect();
    VisibilityMap { num_nodes: graph.num_nodes(), per_edge }
}

/// Visibility of a multi-edge path: the traversal-time weighted average of
/// the constituent edges' vectors.
pub fn path_visibility(
    vis: &VisibilityMap,
    graph: &MovementGraph,
    path: &[EdgeId],
    times: &[f64],
) -> Result<Vec<(NodeId, f64)>, VisibilityError> {
    if path.len() != times.len() {
        return Err(VisibilityError::LengthMismatch(path.len(), times.len()));
    }
    for i in 1..path.len() {
        if graph.edge(path[i - 1]).dst != graph.edge(path[i]).src {
            return Err(VisibilityError::NonContiguousPath(i));
        }
    }
    let total: f64 = times.iter().sum();
    let mut acc: std::collections::BTreeMap<NodeId, f64> = std::collections::BTreeMap::new();
    for (e, &t) in path.iter().zip(times) {
        for &(w, v) in vis.edge(*e) {
            *acc.entry(w).or_insert(0.0) += t * v;
        }
    }
    Ok(acc.into_iter().map(|(w, v)| (w, v / total)).collect())
}

/// Cache key: sha256 over the serialized grid and parameters.
pub fn content_hash(grid: &GridSpec, params: &VisibilityParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(grid).expect("grid serializes"));
    hasher.update(serde_json::to_vec(params).expect("params serialize"));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct VisCacheFile {
    version: String,
    hash: String,
    map: VisibilityMap,
}

pub const VIS_CACHE_VERSION: &str = "vis/1";

pub fn save_visibility_cache(
    path: &Path,
    grid: &GridSpec,
    params: &VisibilityParams,
    map: &VisibilityMap,
) -> Result<(), VisibilityError> {
    let file = VisCacheFile {
        version: VIS_CACHE_VERSION.to_string(),
        hash: content_hash(grid, params),
        map: map.clone(),
    };
    std::fs::write(path, serde_json::to_vec(&file).expect("cache serializes"))?;
    Ok(())
}

/// Loads a cached map; the cache key is a content hash of (grid, params), so
/// a stale file for a different environment is rejected.
pub fn load_visibility_cache(
    path: &Path,
    grid: &GridSpec,
    params: &VisibilityParams,
) -> Result<VisibilityMap, VisibilityError> {
    let bytes = std::fs::read(path)?;
    let file: VisCacheFile =
        serde_json::from_slice(&bytes).map_err(|e| VisibilityError::CacheParse(e.to_string()))?;
    let expected = content_hash(grid, params);
    if file.version != VIS_CACHE_VERSION || file.hash != expected {
        return Err(VisibilityError::CacheMismatch { expected, found: file.hash });
    }
    Ok(file.map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{build_movement_graph, Cell, GridSpec};

    fn flat(width: usize, height: usize) -> (GridSpec, MovementGraph) {
        let grid = GridSpec {
            width,
            height,
            cells: vec![Cell::open(0); width * height],
            markers: vec![],
        };
        let graph = build_movement_graph(&grid).unwrap();
        (grid, graph)
    }

    fn node_at(grid: &GridSpec, graph: &MovementGraph, x: usize, y: usize) -> NodeId {
        graph.cell_nodes[y * grid.width + x].unwrap()
    }

    #[test]
    fn own_cell_is_visible() {
        let (grid, graph) = flat(3, 3);
        let params = VisibilityParams::default();
        let n = node_at(&grid, &graph, 1, 1);
        assert!(line_of_sight(&grid, (1.5, 1.5), 0, n, &graph, &params, None).unwrap());
    }

    #[test]
    fn out_of_range_is_invisible() {
        let (grid, graph) = flat(10, 1);
        let params = VisibilityParams::default();
        let far = node_at(&grid, &graph, 5, 0); // distance 5.0 from (0.5, 0.5)
        assert!(!line_of_sight(&grid, (0.5, 0.5), 0, far, &graph, &params, None).unwrap());
        let near = node_at(&grid, &graph, 3, 0); // distance 3.0
        assert!(line_of_sight(&grid, (0.5, 0.5), 0, near, &graph, &params, None).unwrap());
    }

    #[test]
    fn wall_blocks_sight() {
        let mut grid = GridSpec {
            width: 3,
            height: 1,
            cells: vec![Cell::open(0); 3],
            markers: vec![],
        };
        grid.cells[1] = Cell::wall();
        let graph = build_movement_graph(&grid).unwrap();
        let params = VisibilityParams::default();
        let target = node_at(&grid, &graph, 2, 0);
        assert!(!line_of_sight(&grid, (0.5, 0.5), 0, target, &graph, &params, None).unwrap());
    }

    #[test]
    fn high_ground_occludes_low_observers_only() {
        // observer elev 0, ridge elev 2 in between, target elev 0, distance 2
        let mut grid = GridSpec {
            width: 3,
            height: 1,
            cells: vec![Cell::open(0); 3],
            markers: vec![],
        };
        grid.cells[1] = Cell::open(2);
        let graph = build_movement_graph(&grid).unwrap();
        let params = VisibilityParams::default();
        let target = node_at(&grid, &graph, 2, 0);
        assert!(!line_of_sight(&grid, (0.5, 0.5), 0, target, &graph, &params, None).unwrap());
        // raising the observer above the ridge restores sight
        assert!(line_of_sight(&grid, (0.5, 0.5), 2, target, &graph, &params, None).unwrap());
    }

    #[test]
    fn forward_half_plane_hides_what_is_behind() {
        let (grid, graph) = flat(5, 1);
        let params = VisibilityParams::default();
        let behind = node_at(&grid, &graph, 0, 0);
        let ahead = node_at(&grid, &graph, 4, 0);
        let heading = Some((1.0, 0.0));
        assert!(!line_of_sight(&grid, (2.5, 0.5), 0, behind, &graph, &params, heading).unwrap());
        assert!(line_of_sight(&grid, (2.5, 0.5), 0, ahead, &graph, &params, heading).unwrap());
    }

    #[test]
    fn observer_on_wall_is_an_error() {
        let grid = GridSpec {
            width: 2,
            height: 1,
            cells: vec![Cell::open(0), Cell::wall()],
            markers: vec![],
        };
        grid.validate().unwrap();
        let graph = build_movement_graph(&grid).unwrap();
        let params = VisibilityParams::default();
        let n = node_at(&grid, &graph, 0, 0);
        assert!(matches!(
            line_of_sight(&grid, (1.5, 0.5), 0, n, &graph, &params, None),
            Err(VisibilityError::OutOfBounds(..))
        ));
    }

    #[test]
    fn edge_visibility_fully_visible_node_is_one() {
        let (grid, graph) = flat(3, 1);
        let params = VisibilityParams::default();
        let e = graph.find_edge(node_at(&grid, &graph, 0, 0), node_at(&grid, &graph, 1, 0)).unwrap();
        let vec = edge_visibility(&grid, &graph, e, &params);
        let target = node_at(&grid, &graph, 2, 0);
        let v = vec.iter().find(|(n, _)| *n == target).map(|(_, v)| *v).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn edge_visibility_partial_occlusion_is_fractional() {
        // Moving up along x=0 with omnidirectional vision; the wall at (1,1)
        // shadows the target at (3,0) from the later sample positions only.
        let mut grid = GridSpec {
            width: 4,
            height: 3,
            cells: vec![Cell::open(0); 12],
            markers: vec![],
        };
        grid.cells[1 * 4 + 1] = Cell::wall();
        let graph = build_movement_graph(&grid).unwrap();
        let params = VisibilityParams { fov: Fov::Omni, ..VisibilityParams::default() };
        let src = node_at(&grid, &graph, 0, 0);
        let dst = node_at(&grid, &graph, 0, 1);
        let e = graph.find_edge(src, dst).unwrap();
        let target = node_at(&grid, &graph, 3, 0);
        let vec = edge_visibility(&grid, &graph, e, &params);
        let v = vec.iter().find(|(n, _)| *n == target).map(|(_, v)| *v).unwrap_or(0.0);
        // Oracle: per-sample ray casts along the segment.
        let mut expected = 0.0;
        for s in 0..4 {
            let t = (s as f64 + 0.5) / 4.0;
            let pos = (0.5, 0.5 + t);
            let elev = grid.cell(0, pos.1.floor() as usize).elev;
            if line_of_sight(&grid, pos, elev, target, &graph, &params, Some((0.0, 1.0))).unwrap()
            {
                expected += 0.25;
            }
        }
        assert!(expected > 0.0 && expected < 1.0, "occlusion splits samples: {expected}");
        assert_eq!(v, expected);
    }

    #[test]
    fn values_stay_in_unit_interval_and_absent_means_zero() {
        let grid = crate::environment::generate_reference_env(crate::environment::EnvKind::Small, 2);
        let graph = build_movement_graph(&grid).unwrap();
        let vis = build_visibility_map(&grid, &graph, &VisibilityParams::default());
        for entries in &vis.per_edge {
            for &(_, v) in entries {
                assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn open_field_observer_sees_at_most_39_cells() {
        let (grid, graph) = flat(36, 36);
        let e = graph.self_loop(node_at(&grid, &graph, 18, 18));
        let vec = edge_visibility(&grid, &graph, e, &VisibilityParams::default());
        assert!(vec.len() <= 39, "saw {} cells", vec.len());
        assert!(vec.len() >= 30, "open-field disk should be nearly full: {}", vec.len());
    }

    #[test]
    fn path_visibility_matches_lemma_arithmetic() {
        let (grid, graph) = flat(5, 1);
        let n: Vec<NodeId> = (0..5).map(|x| node_at(&grid, &graph, x, 0)).collect();
        let e01 = graph.find_edge(n[0], n[1]).unwrap();
        let e12 = graph.find_edge(n[1], n[2]).unwrap();
        let e23 = graph.find_edge(n[2], n[3]).unwrap();
        // hand-built map with controlled values at a single node
        let mut vis = VisibilityMap { num_nodes: 5, per_edge: vec![vec![]; graph.num_edges()] };
        vis.per_edge[e01.index()] = vec![(n[4], 1.0)];
        vis.per_edge[e12.index()] = vec![(n[4], 0.5)];
        vis.per_edge[e23.index()] = vec![];

        let single = path_visibility(&vis, &graph, &[e01], &[1.0]).unwrap();
        assert_eq!(single, vec![(n[4], 1.0)]);

        let two = path_visibility(&vis, &graph, &[e01, e12], &[1.0, 1.0]).unwrap();
        assert_eq!(two, vec![(n[4], 0.75)]);

        let three = path_visibility(&vis, &graph, &[e01, e12, e23], &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(three, vec![(n[4], (1.0 + 2.0 * 0.5 + 0.0) / 4.0)]);
    }

    #[test]
    fn path_visibility_rejects_gaps() {
        let (grid, graph) = flat(5, 1);
        let n: Vec<NodeId> = (0..5).map(|x| node_at(&grid, &graph, x, 0)).collect();
        let e01 = graph.find_edge(n[0], n[1]).unwrap();
        let e23 = graph.find_edge(n[2], n[3]).unwrap();
        let vis = VisibilityMap { num_nodes: 5, per_edge: vec![vec![]; graph.num_edges()] };
        assert!(matches!(
            path_visibility(&vis, &graph, &[e01, e23], &[1.0, 1.0]),
            Err(VisibilityError::NonContiguousPath(1))
        ));
    }

    #[test]
    fn raising_observer_never_hides_a_visible_target() {
        let grid = crate::environment::generate_reference_env(crate::environment::EnvKind::Small, 4);
        let graph = build_movement_graph(&grid).unwrap();
        let params = VisibilityParams { fov: Fov::Omni, ..Default::default() };
        for u in (0..graph.num_nodes()).step_by(37) {
            let u = NodeId(u as u32);
            let (x, y) = graph.node_xy(&grid, u);
            let pos = (x as f64 + 0.5, y as f64 + 0.5);
            for w in (0..graph.num_nodes()).step_by(53) {
                let w = NodeId(w as u32);
                for elev in 0u8..2 {
                    let lo = line_of_sight(&grid, pos, elev, w, &graph, &params, None).unwrap();
                    let hi = line_of_sight(&grid, pos, elev + 1, w, &graph, &params, None).unwrap();
                    assert!(!lo || hi, "raising observer hid node {w:?} from {u:?}");
                }
            }
        }
    }

    #[test]
    fn cache_round_trip_and_mismatch() {
        let (grid, graph) = flat(4, 4);
        let params = VisibilityParams::default();
        let vis = build_visibility_map(&grid, &graph, &params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vis.json");
        save_visibility_cache(&path, &grid, &params, &vis).unwrap();
        let loaded = load_visibility_cache(&path, &grid, &params).unwrap();
        assert_eq!(loaded.per_edge.len(), vis.per_edge.len());

        let other = VisibilityParams { radius: 5.0, ..params };
        assert!(matches!(
            load_visibility_cache(&path, &grid, &other),
            Err(VisibilityError::CacheMismatch { .. })
        ));
    }
}
