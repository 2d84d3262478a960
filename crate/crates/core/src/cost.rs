//! Path-level time and energy, directional cost grids and planning.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use rayon::prelude::*;

use crate::env::{Environment, GeoTransform};
use crate::patch::{extract_patch, Patch};
use crate::path::{segment_path, Path, Point, Segment};
use crate::synth::TrajectoryLog;
use crate::textfmt::{parse_f64, parse_key_values, parse_u64};
use crate::{Error, Predictor, Result};

/// Per-segment prediction and the time and energy it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentCost {
    pub w_hat: f64,
    pub v_hat: f64,
    pub time_s: f64,
    pub energy_j: f64,
}

impl SegmentCost {
    /// Cost of covering `length` meters at the predicted power and speed.
    pub fn new(w_hat: f64, v_hat: f64, length: f64) -> Result<Self> {
        if !(w_hat > 0.0 && v_hat > 0.0) || !w_hat.is_finite() || !v_hat.is_finite() {
            return Err(Error::NonPositivePrediction { w_hat, v_hat });
        }
        let time_s = length / v_hat;
        Ok(SegmentCost { w_hat, v_hat, time_s, energy_j: w_hat * time_s })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathCost {
    pub traversal_time: f64,
    pub energy: f64,
    pub per_segment: Vec<SegmentCost>,
    pub covered_length: f64,
}

impl PathCost {
    /// Totals are the left-to-right sums of the per-segment values.
    pub fn from_segments(per_segment: Vec<SegmentCost>, covered_length: f64) -> Self {
        let traversal_time = per_segment.iter().map(|s| s.time_s).sum();
        let energy = per_segment.iter().map(|s| s.energy_j).sum();
        PathCost { traversal_time, energy, per_segment, covered_length }
    }

    pub fn zero() -> Self {
        PathCost::from_segments(Vec::new(), 0.0)
    }

    /// The cost of `self` followed by `next`.
    pub fn concat(&self, next: &PathCost) -> PathCost {
        let mut segs = self.per_segment.clone();
        segs.extend_from_slice(&next.per_segment);
        PathCost::from_segments(segs, self.covered_length + next.covered_length)
    }

    /// CSV `segment_index,w_hat,v_hat,time_s,energy_j` with a final
    /// `total,,,T,E` line. Values use the shortest exact representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment_index,w_hat,v_hat,time_s,energy_j\n");
        for (i, s) in self.per_segment.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{}", s.w_hat, s.v_hat, s.time_s, s.energy_j);
        }
        let _ = writeln!(out, "total,,,{},{}", self.traversal_time, self.energy);
        out
    }
}

fn segment_patches(env: &Environment, segments: &[Segment]) -> Result<Vec<Patch>> {
    segments
        .par_iter()
        .enumerate()
        .map(|(index, seg)| extract_patch(env, seg).map_err(|e| Error::Segment { index, source: Box::new(e) }))
        .collect()
}

/// Time and energy over already segmented unit-length pieces of a path.
pub fn path_cost_segments<P: Predictor + ?Sized>(env: &Environment, model: &P, segments: &[Segment]) -> Result<PathCost> {
    if segments.is_empty() {
        return Err(Error::EmptyPath);
    }
    let patches = segment_patches(env, segments)?;
    let preds = model.predict(&patches)?;
    let per_segment = preds
        .iter()
        .zip(segments)
        .enumerate()
        .map(|(index, (&(w, v), seg))| {
            SegmentCost::new(w, v, seg.arc_length).map_err(|e| Error::Segment { index, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    let covered = segments.iter().map(|s| s.arc_length).sum();
    Ok(PathCost::from_segments(per_segment, covered))
}

/// `T = sum d / v_hat`, `E = sum w_hat * d / v_hat` over the unit segments
/// of `path`; a trailing piece shorter than `d` is not costed.
pub fn path_cost<P: Predictor + ?Sized>(env: &Environment, model: &P, path: &Path, d: f64) -> Result<PathCost> {
    let segments = segment_path(path, d)?;
    path_cost_segments(env, model, &segments)
}

/// Energy over `(t_s, t_g]` from logged voltage and current: the mean
/// electrical power of the `K` records in the window times its duration.
pub fn energy_from_log(log: &TrajectoryLog, t_s: f64, t_g: f64) -> Result<f64> {
    if !(t_g > t_s) {
        return Err(Error::EmptyWindow);
    }
    let (sum, k) = log
        .records
        .iter()
        .filter(|r| r.t > t_s && r.t <= t_g)
        .fold((0.0, 0usize), |(s, k), r| (s + r.voltage * r.current, k + 1));
    if k == 0 {
        return Err(Error::EmptyWindow);
    }
    Ok((t_g - t_s) / k as f64 * sum)
}

/// Neighbour directions, counter-clockwise from East, as (row, col) steps.
pub const DIRECTIONS: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

pub fn direction_heading_deg(dir: usize) -> f64 {
    45.0 * dir as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Time,
    Energy,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "time" => Ok(Objective::Time),
            "energy" => Ok(Objective::Energy),
            _ => Err(Error::InvalidArg(format!("unknown objective `{s}` (time|energy)"))),
        }
    }
}

/// Lattice of nodes `stride` meters apart with a cost per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGrid {
    /// Node (0, 0) position and node spacing.
    pub geo: GeoTransform,
    pub rows: usize,
    pub cols: usize,
    /// Row-major traversable-node mask.
    pub nodes: Vec<bool>,
    /// `edges[(row * cols + col) * 8 + dir]`.
    pub edges: Vec<Option<SegmentCost>>,
}

impl CostGrid {
    pub fn stride(&self) -> f64 {
        self.geo.resolution
    }

    pub fn node(&self, row: usize, col: usize) -> bool {
        self.nodes[row * self.cols + col]
    }

    pub fn edge(&self, row: usize, col: usize, dir: usize) -> Option<&SegmentCost> {
        self.edges[(row * self.cols + col) * 8 + dir].as_ref()
    }

    pub fn neighbor(&self, row: usize, col: usize, dir: usize) -> Option<(usize, usize)> {
        let (dr, dc) = DIRECTIONS[dir];
        let r = row as isize + dr;
        let c = col as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols).then_some((r as usize, c as usize))
    }

    pub fn node_position(&self, row: usize, col: usize) -> Point {
        self.geo.grid_to_world(row as f64, col as f64)
    }

    /// Nearest traversable node to a world position; ties go to the
    /// smaller (row, col).
    pub fn snap(&self, p: Point) -> Option<(usize, usize)> {
        let mut best: Option<(f64, usize, usize)> = None;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.node(r, c) {
                    continue;
                }
                let q = self.node_position(r, c);
                let d2 = (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2);
                if best.is_none_or(|b| d2 < b.0) {
                    best = Some((d2, r, c));
                }
            }
        }
        best.map(|b| (b.1, b.2))
    }

    /// CSV edge list `row,col,dir,time_s,energy_j`, present edges only.
    pub fn edges_csv(&self) -> String {
        let mut out = String::from("row,col,dir,time_s,energy_j\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                for dir in 0..8 {
                    if let Some(e) = self.edge(r, c, dir) {
                        let _ = writeln!(out, "{r},{c},{dir},{},{}", e.time_s, e.energy_j);
                    }
                }
            }
        }
        out
    }

    /// Sidecar `key = value` text with the lattice geometry and node mask.
    pub fn meta_text(&self) -> String {
        let mut out = format!(
            "origin_x = {}\norigin_y = {}\nstride = {}\nrows = {}\ncols = {}\n",
            self.geo.origin_x, self.geo.origin_y, self.geo.resolution, self.rows, self.cols
        );
        for r in 0..self.rows {
            let mask: String = (0..self.cols).map(|c| if self.node(r, c) { '1' } else { '0' }).collect();
            let _ = writeln!(out, "mask.{r} = {mask}");
        }
        out
    }

    /// Rebuilds a grid from [`CostGrid::edges_csv`] and
    /// [`CostGrid::meta_text`]. Predicted power and speed are not part of
    /// the export; they are recovered from time, energy and edge length.
    pub fn from_text(edges_csv: &str, meta: &str) -> Result<Self> {
        let kv = parse_key_values(meta)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("grid meta: missing `{k}`")));
        let geo = GeoTransform::new(
            parse_f64("origin_x", get("origin_x")?)?,
            parse_f64("origin_y", get("origin_y")?)?,
            parse_f64("stride", get("stride")?)?,
        )?;
        let rows = parse_u64("rows", get("rows")?)? as usize;
        let cols = parse_u64("cols", get("cols")?)? as usize;
        let mut nodes = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = get(&format!("mask.{r}"))?;
            if line.len() != cols {
                return Err(Error::Format(format!("grid meta: mask row {r} has {} entries", line.len())));
            }
            for ch in line.chars() {
                nodes.push(match ch {
                    '1' => true,
                    '0' => false,
                    _ => return Err(Error::Format(format!("grid meta: bad mask character `{ch}`"))),
                });
            }
        }
        let mut edges = vec![None; rows * cols * 8];
        let mut lines = edges_csv.lines();
        if lines.next().map(str::trim) != Some("row,col,dir,time_s,energy_j") {
            return Err(Error::Format("grid edges: bad header".into()));
        }
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("grid edges line {}: expected 5 fields", i + 2)));
            }
            let (r, c, dir) =
                (parse_u64("row", f[0])? as usize, parse_u64("col", f[1])? as usize, parse_u64("dir", f[2])? as usize);
            if r >= rows || c >= cols || dir >= 8 {
                return Err(Error::Format(format!("grid edges line {}: index out of range", i + 2)));
            }
            let (time_s, energy_j) = (parse_f64("time_s", f[3])?, parse_f64("energy_j", f[4])?);
            if !(time_s > 0.0 && energy_j > 0.0) {
                return Err(Error::Format(format!("grid edges line {}: costs must be positive", i + 2)));
            }
            let length = edge_length(geo.resolution, dir);
            edges[(r * cols + c) * 8 + dir] = Some(SegmentCost { w_hat: energy_j / time_s, v_hat: length / time_s, time_s, energy_j });
        }
        Ok(CostGrid { geo, rows, cols, nodes, edges })
    }

    pub fn save(&self, edges_path: impl AsRef<FsPath>, meta_path: impl AsRef<FsPath>) -> Result<()> {
        std::fs::write(edges_path, self.edges_csv())?;
        std::fs::write(meta_path, self.meta_text())?;
        Ok(())
    }

    pub fn load(edges_path: impl AsRef<FsPath>, meta_path: impl AsRef<FsPath>) -> Result<Self> {
        CostGrid::from_text(&std::fs::read_to_string(edges_path)?, &std::fs::read_to_string(meta_path)?)
    }
}

fn edge_length(stride: f64, dir: usize) -> f64 {
    if dir % 2 == 1 {
        stride * std::f64::consts::SQRT_2
    } else {
        stride
    }
}

/// Builds the stride-`d` lattice over the environment. Each directed edge
/// gets one `d` x `d` patch centered on the edge midpoint and aligned with
/// the edge; diagonal edges are `d * sqrt(2)` long, so their time and
/// energy are the patch's scaled by `sqrt(2)`. Edges whose patch cannot be
/// extracted, or whose prediction is not positive, are absent.
pub fn build_cost_grid<P: Predictor + Sync + ?Sized>(env: &Environment, model: &P, d: f64) -> Result<CostGrid> {
    if !(d > 0.0) {
        return Err(Error::InvalidArg(format!("stride must be positive, got {d}")));
    }
    let g = env.geo();
    let span_x = (env.width() - 1) as f64 * g.resolution;
    let span_y = (env.rows() - 1) as f64 * g.resolution;
    let cols = (span_x / d + 1e-9).floor() as usize + 1;
    let rows = (span_y / d + 1e-9).floor() as usize + 1;
    let geo = GeoTransform::new(g.origin_x, g.origin_y, d)?;
    let mut grid = CostGrid { geo, rows, cols, nodes: vec![false; rows * cols], edges: vec![None; rows * cols * 8] };
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = grid.node_position(r, c);
            grid.nodes[r * cols + c] = env.class_at(x, y).map(|l| env.is_traversable(l)).unwrap_or(false);
        }
    }
    let mut jobs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !grid.node(r, c) {
                continue;
            }
            for dir in 0..8 {
                if let Some((nr, nc)) = grid.neighbor(r, c, dir) {
                    if grid.node(nr, nc) {
                        jobs.push((r, c, dir));
                    }
                }
            }
        }
    }
    let extracted: Vec<Option<Patch>> = jobs
        .par_iter()
        .map(|&(r, c, dir)| {
            let a = grid.node_position(r, c);
            let b = grid.node_position(grid.neighbor(r, c, dir).unwrap().0, grid.neighbor(r, c, dir).unwrap().1);
            let mid = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            Segment::centered(mid, direction_heading_deg(dir), d).ok().and_then(|s| extract_patch(env, &s).ok())
        })
        .collect();
    let present: Vec<usize> = (0..jobs.len()).filter(|&i| extracted[i].is_some()).collect();
    let patches: Vec<Patch> = extracted.into_iter().flatten().collect();
    let preds = model.predict(&patches)?;
    for (k, &i) in present.iter().enumerate() {
        let (r, c, dir) = jobs[i];
        let (w, v) = preds[k];
        if let Ok(cost) = SegmentCost::new(w, v, d) {
            let scale = edge_length(d, dir) / d;
            grid.edges[(r * cols + c) * 8 + dir] = Some(SegmentCost {
                time_s: cost.time_s * scale,
                energy_j: cost.energy_j * scale,
                ..cost
            });
        }
    }
    Ok(grid)
}

/// A planned route: visited nodes, their world positions and the summed
/// edge costs.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<(usize, usize)>,
    pub points: Vec<Point>,
    pub cost: PathCost,
}

impl Route {
    pub fn path(&self) -> Result<Path> {
        Path::new(self.points.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    row: usize,
    col: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    /// Reversed so the max-heap pops the smallest (cost, row, col).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.row.cmp(&self.row))
            .then_with(|| other.col.cmp(&self.col))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn edge_weight(e: &SegmentCost, objective: Objective) -> f64 {
    match objective {
        Objective::Time => e.time_s,
        Objective::Energy => e.energy_j,
    }
}

/// Uniform-cost search between two nodes over present directed edges.
/// `start == goal` yields a one-node route with zero cost.
pub fn plan_nodes(grid: &CostGrid, start: (usize, usize), goal: (usize, usize), objective: Objective) -> Result<Route> {
    for &(r, c) in &[start, goal] {
        if r >= grid.rows || c >= grid.cols {
            return Err(Error::InvalidArg(format!("node ({r}, {c}) outside the grid")));
        }
        if !grid.node(r, c) {
            return Err(Error::Unreachable);
        }
    }
    let n = grid.rows * grid.cols;
    let idx = |r: usize, c: usize| r * grid.cols + c;
    let mut best = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[idx(start.0, start.1)] = 0.0;
    heap.push(Entry { cost: 0.0, row: start.0, col: start.1 });
    while let Some(Entry { cost, row, col }) = heap.pop() {
        let i = idx(row, col);
        if done[i] {
            continue;
        }
        done[i] = true;
        if (row, col) == goal {
            break;
        }
        for dir in 0..8 {
            let (Some(e), Some((nr, nc))) = (grid.edge(row, col, dir), grid.neighbor(row, col, dir)) else {
                continue;
            };
            let j = idx(nr, nc);
            let cand = cost + edge_weight(e, objective);
            if !done[j] && cand < best[j] {
                best[j] = cand;
                prev[j] = Some((row, col));
                heap.push(Entry { cost: cand, row: nr, col: nc });
            }
        }
    }
    if !done[idx(goal.0, goal.1)] {
        return Err(Error::Unreachable);
    }
    let mut nodes = vec![goal];
    while let Some(p) = prev[idx(nodes.last().unwrap().0, nodes.last().unwrap().1)] {
        nodes.push(p);
    }
    nodes.reverse();
    let mut segs = Vec::with_capacity(nodes.len().saturating_sub(1));
    let mut covered = 0.0;
    for w in nodes.windows(2) {
        let dir = (0..8).find(|&d| grid.neighbor(w[0].0, w[0].1, d) == Some(w[1])).expect("adjacent nodes");
        segs.push(*grid.edge(w[0].0, w[0].1, dir).expect("edge on route"));
        covered += edge_length(grid.stride(), dir);
    }
    let points = nodes.iter().map(|&(r, c)| grid.node_position(r, c)).collect();
    Ok(Route { nodes, points, cost: PathCost::from_segments(segs, covered) })
}

/// Plans between world positions, each snapped to the nearest traversable node.
pub fn plan(grid: &CostGrid, start: Point, goal: Point, objective: Objective) -> Result<Route> {
    let s = grid.snap(start).ok_or(Error::Unreachable)?;
    let g = grid.snap(goal).ok_or(Error::Unreachable)?;
    plan_nodes(grid, s, g, objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Raster, RasterKind};
    use crate::synth::{LogRecord, OracleConfig, OraclePredictor};

    struct Fixed(Vec<(f64, f64)>);

    impl Predictor for Fixed {
        fn predict(&self, patches: &[Patch]) -> Result<Vec<(f64, f64)>> {
            Ok(self.0.iter().cycle().take(patches.len()).copied().collect())
        }
    }

    fn flat_env(width: usize, rows: usize, label: u8) -> Environment {
        let r = 0.05;
        let geo = GeoTransform::new(0.0, (rows - 1) as f64 * r, r).unwrap();
        Environment::new(
            Raster::filled(width, rows, geo, RasterKind::Ortho, 0.5).unwrap(),
            Raster::filled(width, rows, geo, RasterKind::Height, 0.0).unwrap(),
            Raster::filled(width, rows, geo, RasterKind::Class, label as f32).unwrap(),
            7,
            [1, 2, 3, 4].into(),
        )
        .unwrap()
    }

    #[test]
    fn two_segment_arithmetic() {
        let env = flat_env(100, 60, 4);
        let path = Path::new(vec![(1.0, 1.5), (3.0, 1.5)]).unwrap();
        let c = path_cost(&env, &Fixed(vec![(100.0, 0.5), (120.0, 1.0)]), &path, 1.0).unwrap();
        assert_eq!(c.traversal_time, 3.0);
        assert_eq!(c.energy, 320.0);
        assert_eq!(c.covered_length, 2.0);
        assert_eq!(c.per_segment.len(), 2);
        let one = path_cost(&env, &Fixed(vec![(80.0, 0.8)]), &Path::new(vec![(1.0, 1.5), (2.2, 1.5)]).unwrap(), 1.0)
            .unwrap();
        assert_eq!(one.traversal_time, 1.0 / 0.8);
        assert_eq!(one.energy, 80.0 * (1.0 / 0.8));
    }

    #[test]
    fn path_cost_errors() {
        let env = flat_env(100, 60, 4);
        let short = Path::new(vec![(1.0, 1.5), (1.5, 1.5)]).unwrap();
        assert!(matches!(path_cost(&env, &Fixed(vec![(1.0, 1.0)]), &short, 1.0), Err(Error::EmptyPath)));
        let off_map = Path::new(vec![(1.0, 1.5), (4.0, 1.5), (4.0, 5.0)]).unwrap();
        match path_cost(&env, &Fixed(vec![(1.0, 1.0)]), &off_map, 1.0) {
            Err(Error::Segment { index, .. }) => assert!(index >= 3),
            other => panic!("{other:?}"),
        }
        let path = Path::new(vec![(1.0, 1.5), (3.0, 1.5)]).unwrap();
        assert!(matches!(
            path_cost(&env, &Fixed(vec![(10.0, 0.0)]), &path, 1.0),
            Err(Error::Segment { index: 0, .. })
        ));
    }

    #[test]
    fn split_at_segment_boundary_is_additive() {
        let env = flat_env(200, 60, 2);
        let path = Path::new(vec![(1.0, 1.5), (6.3, 1.5), (6.3, 2.0)]).unwrap();
        let segs = segment_path(&path, 1.0).unwrap();
        let oracle = OraclePredictor { cfg: OracleConfig::default(), num_classes: 7, resolution: 0.05 };
        let full = path_cost_segments(&env, &oracle, &segs).unwrap();
        for k in 1..segs.len() {
            let a = path_cost_segments(&env, &oracle, &segs[..k]).unwrap();
            let b = path_cost_segments(&env, &oracle, &segs[k..]).unwrap();
            assert_eq!(a.concat(&b), full);
        }
    }

    fn log(power: f64, k: usize, dt: f64) -> TrajectoryLog {
        TrajectoryLog {
            records: (0..=k)
                .map(|i| LogRecord { t: i as f64 * dt, x: 0.0, y: 0.0, voltage: 24.0, current: power / 24.0, speed: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn energy_from_log_identity() {
        let l = log(120.0, 40, 0.05);
        let e = energy_from_log(&l, 0.0, 2.0).unwrap();
        assert!((e - 240.0).abs() <= 1e-9 * 240.0);
        let one = log(120.0, 1, 2.0);
        assert!((energy_from_log(&one, 0.0, 2.0).unwrap() - 240.0).abs() <= 1e-9 * 240.0);
        let doubled = log(240.0, 40, 0.05);
        assert!((energy_from_log(&doubled, 0.0, 2.0).unwrap() - 2.0 * e).abs() <= 1e-9 * e);
        assert!(matches!(energy_from_log(&l, 5.0, 6.0), Err(Error::EmptyWindow)));
        assert!(matches!(energy_from_log(&l, 1.0, 1.0), Err(Error::EmptyWindow)));
    }

    #[test]
    fn flat_grid_is_uniform_per_direction() {
        let env = flat_env(121, 101, 3);
        let oracle = OraclePredictor { cfg: OracleConfig::default(), num_classes: 7, resolution: 0.05 };
        let grid = build_cost_grid(&env, &oracle, 1.0).unwrap();
        assert_eq!((grid.rows, grid.cols), (6, 7));
        for dir in 0..8 {
            let costs: Vec<&SegmentCost> =
                (0..grid.rows).flat_map(|r| (0..grid.cols).map(move |c| (r, c))).filter_map(|(r, c)| grid.edge(r, c, dir)).collect();
            assert!(!costs.is_empty(), "dir {dir}");
            for c in &costs {
                assert!((c.time_s - costs[0].time_s).abs() <= 1e-6);
                assert!((c.energy_j - costs[0].energy_j).abs() <= 1e-6);
            }
        }
        let straight = grid.edge(2, 2, 0).unwrap();
        let diag = grid.edge(2, 2, 1).unwrap();
        assert!((diag.time_s - straight.time_s * std::f64::consts::SQRT_2).abs() < 1e-12);
        // Edges at the rim need a patch that leaves the raster.
        assert!(grid.edge(0, 0, 2).is_none());
    }

    #[test]
    fn flat_straight_plan() {
        let env = flat_env(121, 101, 4);
        let oracle = OraclePredictor { cfg: OracleConfig::default(), num_classes: 7, resolution: 0.05 };
        let grid = build_cost_grid(&env, &oracle, 1.0).unwrap();
        let route = plan_nodes(&grid, (2, 1), (2, 5), Objective::Time).unwrap();
        assert_eq!(route.nodes, vec![(2, 1), (2, 2), (2, 3), (2, 4), (2, 5)]);
        assert!((route.cost.traversal_time - 4.0).abs() < 1e-12);
        let same = plan_nodes(&grid, (2, 2), (2, 2), Objective::Energy).unwrap();
        assert_eq!(same.nodes, vec![(2, 2)]);
        assert_eq!(same.cost.energy, 0.0);
        assert!(same.path().is_err());
        let by_world = plan(&grid, grid.node_position(2, 1), (5.02, 3.01), Objective::Time).unwrap();
        assert_eq!(by_world.nodes.last(), Some(&(2, 5)));
    }

    #[test]
    fn sloped_edge_costs_more_uphill() {
        let (w, rows, r) = (121usize, 101usize, 0.05);
        let geo = GeoTransform::new(0.0, (rows - 1) as f64 * r, r).unwrap();
        let tan = 10f64.to_radians().tan();
        let h: Vec<f32> = (0..rows).flat_map(|_| (0..w).map(move |c| (c as f64 * r * tan) as f32)).collect();
        let env = Environment::new(
            Raster::filled(w, rows, geo, RasterKind::Ortho, 0.5).unwrap(),
            Raster::new(w, rows, geo, RasterKind::Height, h).unwrap(),
            Raster::filled(w, rows, geo, RasterKind::Class, 1.0).unwrap(),
            7,
            [1, 2, 3, 4].into(),
        )
        .unwrap();
        let oracle = OraclePredictor { cfg: OracleConfig::default(), num_classes: 7, resolution: 0.05 };
        let grid = build_cost_grid(&env, &oracle, 1.0).unwrap();
        let up = grid.edge(2, 2, 0).unwrap();
        let down = grid.edge(2, 3, 4).unwrap();
        assert!(up.energy_j > down.energy_j);
        assert!(up.time_s > down.time_s);
    }

    fn island_grid() -> CostGrid {
        let rows = 4;
        let cols = 4;
        let geo = GeoTransform::new(0.0, 3.0, 1.0).unwrap();
        let mut nodes = vec![true; 16];
        nodes[3 * cols + 3] = true;
        let mut grid = CostGrid { geo, rows, cols, nodes: nodes.clone(), edges: vec![None; 16 * 8] };
        for r in 0..rows {
            for c in 0..cols {
                for dir in 0..8 {
                    if let Some((nr, nc)) = grid.neighbor(r, c, dir) {
                        // (3, 3) is cut off: no edges in or out
                        if (r, c) != (3, 3) && (nr, nc) != (3, 3) {
                            grid.edges[(r * cols + c) * 8 + dir] = Some(SegmentCost::new(50.0, 0.5, 1.0).unwrap());
                        }
                    }
                }
            }
        }
        grid
    }

    #[test]
    fn unreachable_goal() {
        let grid = island_grid();
        assert!(matches!(plan_nodes(&grid, (0, 0), (3, 3), Objective::Time), Err(Error::Unreachable)));
        let mut blocked = grid.clone();
        blocked.nodes[0] = false;
        assert!(matches!(plan_nodes(&blocked, (0, 0), (1, 1), Objective::Time), Err(Error::Unreachable)));
    }

    #[test]
    fn grid_text_round_trip() {
        let env = flat_env(81, 61, 1);
        let oracle = OraclePredictor { cfg: OracleConfig::default(), num_classes: 7, resolution: 0.05 };
        let grid = build_cost_grid(&env, &oracle, 1.0).unwrap();
        let back = CostGrid::from_text(&grid.edges_csv(), &grid.meta_text()).unwrap();
        assert_eq!(back.nodes, grid.nodes);
        for (a, b) in back.edges.iter().zip(&grid.edges) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    assert_eq!((a.time_s, a.energy_j), (b.time_s, b.energy_j));
                }
                (None, None) => {}
                _ => panic!("edge presence differs"),
            }
        }
        assert!(CostGrid::from_text("bad", &grid.meta_text()).is_err());
        assert!(CostGrid::from_text(&grid.edges_csv(), "rows = 1").is_err());
    }

    #[test]
    fn path_cost_csv_has_summary() {
        let c = PathCost::from_segments(
            vec![SegmentCost::new(100.0, 0.5, 1.0).unwrap(), SegmentCost::new(120.0, 1.0, 1.0).unwrap()],
            2.0,
        );
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "segment_index,w_hat,v_hat,time_s,energy_j");
        assert_eq!(lines[1], "0,100,0.5,2,200");
        assert_eq!(lines[3], "total,,,3,320");
    }
}
