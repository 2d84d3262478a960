//! Heading-aligned environment patches and labeled datasets.
//!
//! A patch is the square window of side `WINDOW_SEGMENTS * d` centered on
//! one path segment, resampled into a canonical frame where the robot
//! drives due East: the segment runs along the horizontal midline through
//! the middle half of the window. With `d = 1 m` and `r = 0.05 m` that is
//! 40 x 40 cells. Output cell `(i, j)` has its center at east offset
//! `(j + 0.5 - s/2) * r` and north offset `(s/2 - i - 0.5) * r` from the
//! square's center; that offset is rotated by the segment heading into the
//! world frame before sampling.

use std::io::Write;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::env::Environment;
use crate::path::{segment_path, Path, Segment};
use crate::rng::stream;
use crate::synth::TrajectoryLog;
use crate::{Error, Result};

/// Height difference mapped to 1.0 in the height plane, meters.
pub const HEIGHT_SPAN_M: f64 = 1.0;

/// Window side in segment lengths.
pub const WINDOW_SEGMENTS: f64 = 2.0;

/// Minimum log records per segment.
pub const MIN_RECORDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Plane {
    Ortho,
    Class,
    Height,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Ortho, Plane::Class, Plane::Height];

    pub fn index(self) -> usize {
        match self {
            Plane::Ortho => 0,
            Plane::Class => 1,
            Plane::Height => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Plane::Ortho => 'O',
            Plane::Class => 'C',
            Plane::Height => 'H',
        }
    }

    pub fn from_letter(c: char) -> Option<Plane> {
        match c.to_ascii_uppercase() {
            'O' => Some(Plane::Ortho),
            'C' => Some(Plane::Class),
            'H' => Some(Plane::Height),
            _ => None,
        }
    }
}

/// `s x s x 3` normalized planes, stored plane-major (ortho, class, height),
/// each plane row-major with row 0 on the left of the driving direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub data: Vec<f32>,
    /// Source segment; absent for patches read back from a dataset file.
    pub segment: Option<Segment>,
}

impl Patch {
    pub fn plane(&self, plane: Plane) -> &[f32] {
        let n = self.side * self.side;
        &self.data[plane.index() * n..(plane.index() + 1) * n]
    }

    pub fn plane_mut(&mut self, plane: Plane) -> &mut [f32] {
        let n = self.side * self.side;
        &mut self.data[plane.index() * n..(plane.index() + 1) * n]
    }

    pub fn heading_deg(&self) -> Option<f64> {
        self.segment.map(|s| s.heading_deg)
    }
}

/// Side length in cells of the patch for a segment of `d` meters at
/// resolution `r`: `round(WINDOW_SEGMENTS * d / r)`.
pub fn patch_side(d: f64, resolution: f64) -> Result<usize> {
    let cells = WINDOW_SEGMENTS * d / resolution;
    let side = cells.round();
    if side < 1.0 || (cells - side).abs() > 1e-6 {
        return Err(Error::ResolutionMismatch { side: d, resolution });
    }
    Ok(side as usize)
}

/// Decodes a normalized class-plane value back to its label.
pub fn decode_class(value: f32, num_classes: u8) -> u8 {
    if num_classes <= 1 {
        1
    } else {
        (value as f64 * (num_classes - 1) as f64).round() as u8 + 1
    }
}

pub fn extract_patch(env: &Environment, seg: &Segment) -> Result<Patch> {
    let r = env.geo().resolution;
    let s = patch_side(seg.arc_length, r)?;
    let n = s * s;
    let (cx, cy) = seg.center();
    let theta = seg.heading_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let half = s as f64 / 2.0;
    let c = env.num_classes();
    let mut data = vec![0.0f32; 3 * n];
    let mut heights = vec![0.0f64; n];
    for i in 0..s {
        let north = (half - i as f64 - 0.5) * r;
        for j in 0..s {
            let east = (j as f64 + 0.5 - half) * r;
            let x = cx + east * cos - north * sin;
            let y = cy + east * sin + north * cos;
            let (row, col) = env.geo().world_to_grid(x, y);
            let label = env.class_map().sample_nearest(row, col)? as u8;
            if label == 0 || !env.is_traversable(label) {
                return Err(Error::NonTraversable(label));
            }
            let k = i * s + j;
            data[k] = env.ortho().sample_bilinear(row, col)? as f32;
            data[n + k] = if c > 1 { (label - 1) as f32 / (c - 1) as f32 } else { 0.0 };
            heights[k] = env.height().sample_bilinear(row, col)?;
        }
    }
    let min = heights.iter().cloned().fold(f64::INFINITY, f64::min);
    for (dst, h) in data[2 * n..].iter_mut().zip(&heights) {
        *dst = ((h - min) / HEIGHT_SPAN_M).clamp(0.0, 1.0) as f32;
    }
    Ok(Patch { side: s, data, segment: Some(*seg) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Val => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            2 => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" | "validation" => Ok(Split::Val),
            other => Err(Error::InvalidArg(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: Patch,
    pub w_star: f64,
    pub v_star: f64,
    pub class_label: u8,
    pub slope_deg: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub samples: Vec<Sample>,
    pub max_w: f64,
    pub max_v: f64,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// A copy holding only the samples for which `keep` is true. Normalizers
    /// are carried over unchanged.
    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            side: self.side,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            max_w: self.max_w,
            max_v: self.max_v,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TCPD");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&(self.side as u32).to_le_bytes());
        buf.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            if s.patch.side != self.side {
                return Err(Error::ShapeMismatch {
                    expected: format!("side {}", self.side),
                    got: format!("side {}", s.patch.side),
                });
            }
            for v in &s.patch.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(s.w_star as f32).to_le_bytes());
            buf.extend_from_slice(&(s.v_star as f32).to_le_bytes());
            buf.push(s.class_label);
            buf.extend_from_slice(&(s.slope_deg as f32).to_le_bytes());
            buf.push(s.split.code());
        }
        buf.extend_from_slice(&(self.max_w as f32).to_le_bytes());
        buf.extend_from_slice(&(self.max_v as f32).to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 4 + 8;
        if bytes.len() < HEADER + 8 {
            return Err(Error::Format("dataset truncated".into()));
        }
        if &bytes[..4] != b"TCPD" {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != 1 {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let side = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let record = 3 * side * side * 4 + 4 + 4 + 1 + 4 + 1;
        let body = bytes.len() - HEADER - 8;
        if side == 0 || body % record != 0 || (body / record) as u64 != count {
            return Err(Error::Format(format!(
                "dataset header says {count} records, body holds {:.2}",
                body as f64 / record as f64
            )));
        }
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mut samples = Vec::with_capacity(count as usize);
        let mut o = HEADER;
        for _ in 0..count {
            let data: Vec<f32> = (0..3 * side * side).map(|k| f32_at(o + 4 * k)).collect();
            o += 3 * side * side * 4;
            let w_star = f32_at(o) as f64;
            let v_star = f32_at(o + 4) as f64;
            let class_label = bytes[o + 8];
            let slope_deg = f32_at(o + 9) as f64;
            let split = Split::from_code(bytes[o + 13])?;
            o += 14;
            samples.push(Sample {
                patch: Patch { side, data, segment: None },
                w_star,
                v_star,
                class_label,
                slope_deg,
                split,
            });
        }
        let max_w = f32_at(o) as f64;
        let max_v = f32_at(o + 4) as f64;
        if !(max_w > 0.0 && max_v > 0.0) {
            return Err(Error::Format("dataset normalizers must be > 0".into()));
        }
        Ok(Dataset { side, samples, max_w, max_v })
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<FsPath>) -> Result<()> {
    let mut buf = Vec::new();
    ds.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<FsPath>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= self.min_x && p.0 <= self.max_x && p.1 >= self.min_y && p.1 <= self.max_y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub d: f64,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub val_region: Option<Rect>,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams { d: 1.0, train_fraction: 0.8, test_fraction: 0.2, val_region: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub segments: usize,
    pub too_few_records: usize,
    pub extraction_failed: usize,
}

/// Ground-truth labels of one segment from the records that fall in it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentLabels {
    pub w_star: f64,
    pub v_star: f64,
    pub records: usize,
    pub duration: f64,
}

/// Per-record arc length along the log trace.
fn record_arcs(log: &TrajectoryLog) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(log.records.len());
    for (i, r) in log.records.iter().enumerate() {
        if i > 0 {
            let p = &log.records[i - 1];
            acc += (r.x - p.x).hypot(r.y - p.y);
        }
        out.push(acc);
    }
    out
}

fn time_at_arc(log: &TrajectoryLog, arcs: &[f64], s: f64) -> f64 {
    let hi = arcs.partition_point(|&a| a <= s).clamp(1, arcs.len() - 1);
    let lo = hi - 1;
    let span = arcs[hi] - arcs[lo];
    let (t0, t1) = (log.records[lo].t, log.records[hi].t);
    if span <= 0.0 {
        return t1;
    }
    t0 + (t1 - t0) * ((s - arcs[lo]) / span).clamp(0.0, 1.0)
}

/// Labels for the arc span `[arc_start, arc_start + d]` of a log: mean
/// `V*I` over the records in `(arc_start, arc_start + d]` and `d` over the
/// time between the span ends (interpolated along the trace).
pub fn segment_labels(log: &TrajectoryLog, arcs: &[f64], arc_start: f64, d: f64) -> Option<SegmentLabels> {
    let arc_end = arc_start + d;
    let lo = arcs.partition_point(|&a| a <= arc_start);
    let hi = arcs.partition_point(|&a| a <= arc_end);
    let k = hi.saturating_sub(lo);
    if k < MIN_RECORDS {
        return None;
    }
    let w = log.records[lo..hi].iter().map(|r| r.voltage * r.current).sum::<f64>() / k as f64;
    let duration = time_at_arc(log, arcs, arc_end) - time_at_arc(log, arcs, arc_start);
    if !(duration > 0.0) || !(w > 0.0) {
        return None;
    }
    Some(SegmentLabels { w_star: w, v_star: d / duration, records: k, duration })
}

fn modal_class(patch: &Patch, num_classes: u8) -> u8 {
    let mut counts = [0usize; 256];
    for &v in patch.plane(Plane::Class) {
        counts[decode_class(v, num_classes) as usize] += 1;
    }
    // ties go to the lower label
    let mut best = 0;
    for k in 1..256 {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    best as u8
}

fn mean_slope_deg(env: &Environment, seg: &Segment) -> f64 {
    match (env.height_at(seg.start.0, seg.start.1), env.height_at(seg.end.0, seg.end.1)) {
        (Ok(a), Ok(b)) if seg.chord > 0.0 => ((b - a) / seg.chord).atan().to_degrees(),
        _ => 0.0,
    }
}

/// Turns trajectory logs into labeled patches.
///
/// Samples are ordered by (log, segment). Segments whose center lies in the
/// validation rectangle are tagged `Val`; the rest are shuffled with `seed`
/// and the first `round(n * train_fraction)` become `Train`. Label values
/// are rounded to `f32` so that a saved and reloaded dataset is identical.
pub fn build_dataset(env: &Environment, logs: &[TrajectoryLog], params: &DatasetParams) -> Result<(Dataset, BuildStats)> {
    if logs.is_empty() {
        return Err(Error::InvalidArg("no trajectory logs".into()));
    }
    let fr = (params.train_fraction, params.test_fraction);
    if fr.0 < 0.0 || fr.1 < 0.0 || (fr.0 + fr.1 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg(format!("split fractions {fr:?} must be >= 0 and sum to 1")));
    }
    let side = patch_side(params.d, env.geo().resolution)?;

    let mut jobs = Vec::new();
    let mut arcs_per_log = Vec::with_capacity(logs.len());
    for (li, log) in logs.iter().enumerate() {
        if log.records.len() < 2 {
            arcs_per_log.push(Vec::new());
            continue;
        }
        let trace = match Path::from_trace(log.records.iter().map(|r| (r.x, r.y))) {
            Ok(p) => p,
            Err(_) => {
                arcs_per_log.push(Vec::new());
                continue;
            }
        };
        arcs_per_log.push(record_arcs(log));
        for seg in segment_path(&trace, params.d)? {
            jobs.push((li, seg));
        }
    }

    enum Outcome {
        Short,
        Failed,
        Ok(Sample),
    }
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|(li, seg)| {
            let log = &logs[*li];
            let Some(labels) = segment_labels(log, &arcs_per_log[*li], seg.arc_offset, params.d) else {
                return Outcome::Short;
            };
            match extract_patch(env, seg) {
                Err(_) => Outcome::Failed,
                Ok(patch) => {
                    let class_label = modal_class(&patch, env.num_classes());
                    let in_val = params.val_region.is_some_and(|r| r.contains(seg.center()));
                    Outcome::Ok(Sample {
                        patch,
                        w_star: labels.w_star as f32 as f64,
                        v_star: labels.v_star as f32 as f64,
                        class_label,
                        slope_deg: mean_slope_deg(env, seg) as f32 as f64,
                        split: if in_val { Split::Val } else { Split::Train },
                    })
                }
            }
        })
        .collect();

    let mut stats = BuildStats { segments: jobs.len(), ..BuildStats::default() };
    let mut samples = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Short => stats.too_few_records += 1,
            Outcome::Failed => stats.extraction_failed += 1,
            Outcome::Ok(s) => samples.push(s),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut pool: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split != Split::Val).collect();
    pool.shuffle(&mut stream(params.seed, &[0x7370_6c69_74]));
    let n_train = (pool.len() as f64 * params.train_fraction).round() as usize;
    for (rank, &i) in pool.iter().enumerate() {
        samples[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }

    let has_train = samples.iter().any(|s| s.split == Split::Train);
    let basis = |s: &&Sample| !has_train || s.split == Split::Train;
    let max_w = samples.iter().filter(basis).map(|s| s.w_star).fold(0.0, f64::max);
    let max_v = samples.iter().filter(basis).map(|s| s.v_star).fold(0.0, f64::max);
    Ok((Dataset { side, samples, max_w, max_v }, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GeoTransform, Raster, RasterKind};
    use crate::synth::{simulate_run, LogRecord, OracleConfig};

    fn env_from(width: usize, rows: usize, ortho: Vec<f32>, height: Vec<f32>, class: Vec<f32>) -> Environment {
        let geo = GeoTransform::new(0.0, (rows - 1) as f64 * 0.05, 0.05).unwrap();
        Environment::new(
            Raster::new(width, rows, geo, RasterKind::Ortho, ortho).unwrap(),
            Raster::new(width, rows, geo, RasterKind::Height, height).unwrap(),
            Raster::new(width, rows, geo, RasterKind::Class, class).unwrap(),
            7,
            [1, 2, 3, 4].into(),
        )
        .unwrap()
    }

    fn uniform_env(width: usize, rows: usize, height: f32, class: u8) -> Environment {
        let n = width * rows;
        env_from(width, rows, vec![0.3; n], vec![height; n], vec![class as f32; n])
    }

    #[test]
    fn side_is_window_over_resolution() {
        assert_eq!(patch_side(1.0, 0.05).unwrap(), 40);
        assert_eq!(patch_side(1.0, 0.025).unwrap(), 80);
        assert_eq!(patch_side(0.5, 0.05).unwrap(), 20);
        assert!(matches!(patch_side(1.0, 0.03), Err(Error::ResolutionMismatch { .. })));
    }

    #[test]
    fn flat_and_uniform_planes() {
        let env = uniform_env(100, 100, 600.0, 4);
        let seg = Segment::centered((2.5, 2.5), 33.0, 1.0).unwrap();
        let p = extract_patch(&env, &seg).unwrap();
        assert_eq!(p.side, 40);
        assert!(p.plane(Plane::Height).iter().all(|&v| v == 0.0));
        assert!(p.plane(Plane::Class).iter().all(|&v| v == 0.5));
        assert!(p.plane(Plane::Ortho).iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn extraction_errors() {
        let env = uniform_env(60, 60, 0.0, 1);
        let near_edge = Segment::centered((0.8, 1.5), 0.0, 1.0).unwrap();
        assert!(matches!(extract_patch(&env, &near_edge), Err(Error::OutOfBounds { .. })));
        let blocked = uniform_env(60, 60, 0.0, 6);
        let seg = Segment::centered((1.5, 1.5), 0.0, 1.0).unwrap();
        assert!(matches!(extract_patch(&blocked, &seg), Err(Error::NonTraversable(6))));
        let odd = Segment::centered((1.5, 1.5), 0.0, 1.01).unwrap();
        assert!(matches!(extract_patch(&env, &odd), Err(Error::ResolutionMismatch { .. })));
        let mut class = vec![1.0; 3600];
        class[30 * 60 + 30] = 0.0;
        let holed = env_from(60, 60, vec![0.5; 3600], vec![0.0; 3600], class);
        assert!(matches!(extract_patch(&holed, &seg), Err(Error::NonTraversable(0))));
    }

    #[test]
    fn height_plane_clips_at_one_meter() {
        // 60 degree ramp: 1.73 m rise per meter
        let (w, h) = (80, 80);
        let heights: Vec<f32> = (0..h).flat_map(|_| (0..w).map(|c| (c as f64 * 0.05 * 3f64.sqrt()) as f32)).collect();
        let env = env_from(w, h, vec![0.5; w * h], heights, vec![2.0; w * h]);
        let p = extract_patch(&env, &Segment::centered((2.0, 2.0), 0.0, 1.0).unwrap()).unwrap();
        let hp = p.plane(Plane::Height);
        assert_eq!(hp.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(hp[39], 1.0);
        assert!(hp.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn patterned_env(w: usize, h: usize) -> Environment {
        let mut ortho = Vec::new();
        let mut height = Vec::new();
        let mut class = Vec::new();
        for r in 0..h {
            for c in 0..w {
                ortho.push((((r * 7 + c * 13) % 17) as f32) / 16.0);
                height.push((r as f32 * 0.013 + (c as f32 * 0.37).sin() * 0.2) as f32);
                class.push((1 + (r / 9 + c / 7) % 4) as f32);
            }
        }
        env_from(w, h, ortho, height, class)
    }

    #[test]
    fn east_heading_equals_axis_aligned_crop() {
        let env = patterned_env(90, 70);
        // center on a cell corner: (col 45.5, row 30.5)
        let (cx, cy) = env.geo().grid_to_world(30.5, 45.5);
        let seg = Segment::centered((cx, cy), 0.0, 1.0).unwrap();
        let p = extract_patch(&env, &seg).unwrap();
        let (r0, c0) = (11, 26);
        let mut min_h = f32::INFINITY;
        for i in 0..40 {
            for j in 0..40 {
                min_h = min_h.min(env.height().get(r0 + i, c0 + j));
            }
        }
        for i in 0..40 {
            for j in 0..40 {
                let k = i * 40 + j;
                assert_eq!(p.plane(Plane::Ortho)[k], env.ortho().get(r0 + i, c0 + j));
                let label = env.class_map().get(r0 + i, c0 + j);
                assert_eq!(p.plane(Plane::Class)[k], (label - 1.0) / 6.0);
                let h = (env.height().get(r0 + i, c0 + j) as f64 - min_h as f64) as f32;
                assert_eq!(p.plane(Plane::Height)[k], h);
            }
        }
    }

    #[test]
    fn joint_quarter_turn_reproduces_patch() {
        let env = patterned_env(90, 70);
        let (w, h) = (env.width(), env.rows());
        let r = 0.05;
        let g = env.geo();
        // world rotation (x, y) -> (-y, x); new[row'][col'] = old[col'][w-1-row']
        let geo2 = GeoTransform::new(-g.origin_y, g.origin_x + (w - 1) as f64 * r, r).unwrap();
        let rot = |src: &Raster, kind| {
            let mut data = Vec::with_capacity(w * h);
            for row2 in 0..w {
                for col2 in 0..h {
                    data.push(src.get(col2, w - 1 - row2));
                }
            }
            Raster::new(h, w, geo2, kind, data).unwrap()
        };
        let env2 = Environment::new(
            rot(env.ortho(), RasterKind::Ortho),
            rot(env.height(), RasterKind::Height),
            rot(env.class_map(), RasterKind::Class),
            7,
            [1, 2, 3, 4].into(),
        )
        .unwrap();
        for (center, heading) in [((2.3, 1.7), 0.0), ((2.0, 2.0), 30.0), ((2.71, 1.55), 117.0)] {
            let seg = Segment::centered(center, heading, 1.0).unwrap();
            let seg2 = Segment::centered((-center.1, center.0), heading + 90.0, 1.0).unwrap();
            let a = extract_patch(&env, &seg).unwrap();
            let b = extract_patch(&env2, &seg2).unwrap();
            for plane in [Plane::Ortho, Plane::Height] {
                for (x, y) in a.plane(plane).iter().zip(b.plane(plane)) {
                    assert!((x - y).abs() <= 1e-6, "{plane:?}: {x} vs {y}");
                }
            }
            // Class must agree wherever the sample is not on a class boundary,
            // i.e. all four surrounding cells carry the same label.
            let mut compared = 0;
            for i in 0..40 {
                for j in 0..40 {
                    let (x, y) = sample_point(&seg, i, j, 40, r);
                    let (row, col) = env.geo().world_to_grid(x, y);
                    let (r0, c0) = (row.floor() as usize, col.floor() as usize);
                    let l = env.class_map().get(r0, c0);
                    let interior = [(r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]
                        .iter()
                        .all(|&(rr, cc)| env.class_map().get(rr, cc) == l);
                    if interior {
                        compared += 1;
                        assert_eq!(a.plane(Plane::Class)[i * 40 + j], b.plane(Plane::Class)[i * 40 + j]);
                    }
                }
            }
            assert!(compared > 800, "{compared}");
        }
    }

    fn sample_point(seg: &Segment, i: usize, j: usize, s: usize, r: f64) -> (f64, f64) {
        let half = s as f64 / 2.0;
        let north = (half - i as f64 - 0.5) * r;
        let east = (j as f64 + 0.5 - half) * r;
        let (sin, cos) = seg.heading_deg.to_radians().sin_cos();
        let (cx, cy) = seg.center();
        (cx + east * cos - north * sin, cy + east * sin + north * cos)
    }

    fn straight_log(w: f64, speed: f64, length: f64, rate: f64) -> TrajectoryLog {
        let n = (length / speed * rate).round() as usize;
        let records = (0..=n)
            .map(|k| {
                let t = k as f64 / rate;
                LogRecord { t, x: 1.0 + speed * t, y: 1.5, voltage: 24.0, current: w / 24.0, speed }
            })
            .collect();
        TrajectoryLog { records }
    }

    #[test]
    fn labels_from_constant_power_log() {
        let env = uniform_env(200, 60, 0.0, 4);
        let log = straight_log(54.525, 1.0, 7.0, 20.0);
        let (ds, stats) = build_dataset(&env, &[log], &DatasetParams::default()).unwrap();
        assert_eq!(stats.segments, 7);
        assert!(!ds.samples.is_empty());
        for s in &ds.samples {
            assert!((s.w_star - 54.525).abs() < 1e-5);
            assert!((s.v_star - 1.0).abs() < 1e-6);
            assert_eq!(s.class_label, 4);
        }
    }

    #[test]
    fn energy_identity_per_segment() {
        let log = straight_log(80.0, 0.8, 5.0, 20.0);
        let arcs = record_arcs(&log);
        for k in 0..4 {
            let l = segment_labels(&log, &arcs, k as f64, 1.0).unwrap();
            let energy = l.w_star * (1.0 / l.v_star);
            assert!(((energy - 80.0 * l.duration) / (80.0 * l.duration)).abs() < 1e-6);
            assert!((l.v_star - 0.8).abs() < 1e-9);
        }
        assert!(segment_labels(&log, &arcs, 0.0, 0.05).is_none());
    }

    #[test]
    fn split_counts_are_exact() {
        let env = uniform_env(1100, 60, 0.0, 3);
        // 1000 one-meter segments over 1000 m, zig-zagging inside a 54 m strip
        let mut records = Vec::new();
        let mut k = 0usize;
        for lap in 0..20 {
            for step in 0..1000 {
                let x = if lap % 2 == 0 { 1.0 + step as f64 * 0.05 } else { 51.0 - step as f64 * 0.05 };
                records.push(LogRecord { t: k as f64 * 0.05, x, y: 1.5, voltage: 24.0, current: 2.5, speed: 1.0 });
                k += 1;
            }
        }
        records.push(LogRecord { t: k as f64 * 0.05, x: 1.0, y: 1.5, voltage: 24.0, current: 2.5, speed: 1.0 });
        let log = TrajectoryLog { records };
        let (ds, _) = build_dataset(&env, &[log], &DatasetParams { seed: 3, ..DatasetParams::default() }).unwrap();
        assert_eq!(ds.samples.len(), 1000);
        assert_eq!(ds.count(Split::Train), 800);
        assert_eq!(ds.count(Split::Test), 200);
        assert_eq!(ds.count(Split::Val), 0);
    }

    #[test]
    fn val_region_and_normalizers() {
        let env = crate::synth::generate_environment(14.0, 8.0, 0.05, 7, 0.4, 20.0, 5).unwrap();
        let cfg = OracleConfig { seed: 1, ..OracleConfig::default() };
        let tour = Path::new(vec![(1.5, 2.0), (12.5, 2.0), (12.5, 6.0), (1.5, 6.0)]).unwrap();
        let log = simulate_run(&env, &cfg, &tour).unwrap();
        let params = DatasetParams {
            val_region: Some(Rect { min_x: 9.0, min_y: 0.0, max_x: 14.0, max_y: 8.0 }),
            seed: 2,
            ..DatasetParams::default()
        };
        let (ds, stats) = build_dataset(&env, &[log.clone()], &params).unwrap();
        assert!(ds.count(Split::Val) > 0 && ds.count(Split::Train) > 0);
        for s in &ds.samples {
            let c = s.patch.segment.unwrap().center();
            assert_eq!(s.split == Split::Val, c.0 >= 9.0);
            assert!(s.w_star > 0.0 && s.v_star > 0.0);
        }
        let train_max_w = ds.samples.iter().filter(|s| s.split == Split::Train).map(|s| s.w_star).fold(0.0, f64::max);
        assert_eq!(ds.max_w, train_max_w);
        assert_eq!(stats.segments, ds.samples.len() + stats.extraction_failed + stats.too_few_records);
        // worker count does not change the result
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let again = single.install(|| build_dataset(&env, &[log], &params).unwrap());
        assert_eq!(again.0, ds);
    }

    #[test]
    fn empty_inputs() {
        let env = uniform_env(100, 60, 0.0, 6);
        let log = straight_log(50.0, 1.0, 3.0, 20.0);
        assert!(matches!(build_dataset(&env, &[log.clone()], &DatasetParams::default()), Err(Error::EmptyDataset)));
        assert!(build_dataset(&env, &[], &DatasetParams::default()).is_err());
        let bad = DatasetParams { train_fraction: 0.7, ..DatasetParams::default() };
        assert!(matches!(build_dataset(&env, &[log], &bad), Err(Error::InvalidArg(_))));
    }

    fn tiny_dataset() -> Dataset {
        let mk = |v: f32, split| Sample {
            patch: Patch { side: 2, data: vec![v; 12], segment: None },
            w_star: 50.25,
            v_star: 0.75,
            class_label: 2,
            slope_deg: -3.5,
            split,
        };
        Dataset { side: 2, samples: vec![mk(0.1, Split::Train), mk(0.9, Split::Val)], max_w: 50.25, max_v: 0.75 }
    }

    #[test]
    fn dataset_file_round_trip_and_errors() {
        let ds = tiny_dataset();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);

        let mut wrong_count = bytes.clone();
        wrong_count[10] = 3;
        assert!(matches!(Dataset::from_bytes(&wrong_count), Err(Error::Format(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(Dataset::from_bytes(&wrong_version), Err(Error::Format(_))));
        let mut wrong_magic = bytes.clone();
        wrong_magic[1] = b'X';
        assert!(matches!(Dataset::from_bytes(&wrong_magic), Err(Error::Format(_))));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }
}
