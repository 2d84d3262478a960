//! Paths and their split into unit-length segments.

use std::path::Path as FsPath;

use crate::textfmt::fmt_sig;
use crate::{Error, Result};

pub type Point = (f64, f64);

/// Tolerance, in meters, when deciding whether the last segment is complete.
const ARC_EPS: f64 = 1e-9;

/// An ordered polyline in world meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    points: Vec<Point>,
}

impl Path {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegeneratePath);
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::DegeneratePath);
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::InvalidArg("path coordinates must be finite".into()));
        }
        Ok(Path { points })
    }

    /// Builds a path after dropping consecutive duplicate points.
    pub fn from_trace(points: impl IntoIterator<Item = Point>) -> Result<Self> {
        let mut out: Vec<Point> = Vec::new();
        for p in points {
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
        Path::new(out)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Cumulative arc length at every vertex; starts at 0.
    pub fn cumulative_arc(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.points.len());
        out.push(0.0);
        for w in self.points.windows(2) {
            acc += dist(w[0], w[1]);
            out.push(acc);
        }
        out
    }

    pub fn length(&self) -> f64 {
        *self.cumulative_arc().last().unwrap()
    }

    /// Point at arc length `s`, clamped to the path ends.
    pub fn point_at(&self, cumulative: &[f64], s: f64) -> Point {
        let n = self.points.len();
        if s <= 0.0 {
            return self.points[0];
        }
        if s >= cumulative[n - 1] {
            return self.points[n - 1];
        }
        // first vertex with arc > s
        let hi = cumulative.partition_point(|&a| a <= s);
        let lo = hi - 1;
        let span = cumulative[hi] - cumulative[lo];
        let t = (s - cumulative[lo]) / span;
        let (a, b) = (self.points[lo], self.points[hi]);
        (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    (b.0 - a.0).hypot(b.1 - a.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: Point,
    pub end: Point,
    /// Chord heading, degrees in `[0, 360)`, 0 = East, counter-clockwise.
    pub heading_deg: f64,
    /// Straight-line distance start to end.
    pub chord: f64,
    /// Arc length covered along the source path; also the patch side.
    pub arc_length: f64,
    /// Arc position of `start` along the source path.
    pub arc_offset: f64,
}

impl Segment {
    /// A straight segment of the given length centered at `center`.
    pub fn centered(center: Point, heading_deg: f64, length: f64) -> Result<Self> {
        let t = heading_deg.to_radians();
        let (dx, dy) = (0.5 * length * t.cos(), 0.5 * length * t.sin());
        let start = (center.0 - dx, center.1 - dy);
        let end = (center.0 + dx, center.1 + dy);
        Segment::straight(start, end, 0.0)
    }

    /// A straight segment whose arc length is its chord.
    pub fn straight(start: Point, end: Point, arc_offset: f64) -> Result<Self> {
        let heading_deg = heading_of(start, end)?;
        let chord = dist(start, end);
        Ok(Segment { start, end, heading_deg, chord, arc_length: chord, arc_offset })
    }

    pub fn center(&self) -> Point {
        (0.5 * (self.start.0 + self.end.0), 0.5 * (self.start.1 + self.end.1))
    }
}

/// Heading from `start` to `end` in degrees, `[0, 360)`, 0 = East, CCW.
pub fn heading_of(start: Point, end: Point) -> Result<f64> {
    let (dx, dy) = (end.0 - start.0, end.1 - start.1);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::DegenerateSegment);
    }
    let mut deg = dy.atan2(dx).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    if deg >= 360.0 {
        deg -= 360.0;
    }
    Ok(deg)
}

/// Splits `path` into consecutive pieces of arc length `d`; a trailing
/// remainder shorter than `d` is dropped.
pub fn segment_path(path: &Path, d: f64) -> Result<Vec<Segment>> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidArg(format!("segment length must be > 0, got {d}")));
    }
    let cumulative = path.cumulative_arc();
    let total = *cumulative.last().unwrap();
    let count = ((total + ARC_EPS) / d).floor() as usize;
    let mut out = Vec::with_capacity(count);
    let mut start = path.points()[0];
    for k in 0..count {
        let arc_end = (k + 1) as f64 * d;
        let end = path.point_at(&cumulative, arc_end);
        let chord = dist(start, end);
        let heading_deg = heading_of(start, end)?;
        out.push(Segment {
            start,
            end,
            heading_deg,
            chord,
            arc_length: d,
            arc_offset: k as f64 * d,
        });
        start = end;
    }
    Ok(out)
}

pub fn write_path_csv(path: &Path, file: impl AsRef<FsPath>) -> Result<()> {
    let mut s = String::from("x,y\n");
    for &(x, y) in path.points() {
        s.push_str(&format!("{},{}\n", fmt_sig(x, 10), fmt_sig(y, 10)));
    }
    std::fs::write(file, s)?;
    Ok(())
}

pub fn read_path_csv(file: impl AsRef<FsPath>) -> Result<Path> {
    let text = std::fs::read_to_string(file)?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('x')) {
            continue;
        }
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("path line {}: expected `x,y`", i + 1)))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("path line {}: bad number `{v}`", i + 1)))
        };
        pts.push((parse(x)?, parse(y)?));
    }
    Path::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn straight_path_examples() {
        let p = Path::new(vec![(0.0, 0.0), (5.0, 0.0)]).unwrap();
        let segs = segment_path(&p, 1.0).unwrap();
        assert_eq!(segs.len(), 5);
        for s in &segs {
            assert_eq!(s.heading_deg, 0.0);
            assert!((s.chord - 1.0).abs() < 1e-12);
        }
        let p = Path::new(vec![(0.0, 0.0), (5.4, 0.0)]).unwrap();
        assert_eq!(segment_path(&p, 1.0).unwrap().len(), 5);
    }

    #[test]
    fn l_shaped_path() {
        let p = Path::new(vec![(0.0, 0.0), (3.0, 0.0), (3.0, 3.0)]).unwrap();
        let segs = segment_path(&p, 1.0).unwrap();
        assert_eq!(segs.len(), 6);
        assert!((segs[3].heading_deg - 90.0).abs() < 1e-9);
        assert!(segs[..3].iter().all(|s| s.heading_deg == 0.0));
    }

    #[test]
    fn corner_segment_has_short_chord() {
        let p = Path::new(vec![(0.0, 0.0), (2.5, 0.0), (2.5, 3.0)]).unwrap();
        let segs = segment_path(&p, 1.0).unwrap();
        let corner = segs[2];
        assert!((corner.chord - 0.5f64.hypot(0.5)).abs() < 1e-12);
        assert!((corner.heading_deg - 45.0).abs() < 1e-9);
        assert!(segs.iter().all(|s| s.chord <= 1.0 + 1e-12));
    }

    #[test]
    fn heading_examples() {
        assert_eq!(heading_of((0.0, 0.0), (1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(heading_of((0.0, 0.0), (0.0, 1.0)).unwrap(), 90.0);
        assert_eq!(heading_of((0.0, 0.0), (-1.0, 0.0)).unwrap(), 180.0);
        assert!((heading_of((0.0, 0.0), (0.0, -1.0)).unwrap() - 270.0).abs() < 1e-12);
        assert!(matches!(heading_of((1.0, 1.0), (1.0, 1.0)), Err(Error::DegenerateSegment)));
    }

    #[test]
    fn errors() {
        assert!(matches!(Path::new(vec![(0.0, 0.0)]), Err(Error::DegeneratePath)));
        assert!(matches!(Path::new(vec![(0.0, 0.0), (0.0, 0.0)]), Err(Error::DegeneratePath)));
        let p = Path::new(vec![(0.0, 0.0), (1.0, 0.0)]).unwrap();
        assert!(matches!(segment_path(&p, 0.0), Err(Error::InvalidArg(_))));
        assert!(matches!(segment_path(&p, -1.0), Err(Error::InvalidArg(_))));
        let p = Path::from_trace([(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)]).unwrap();
        assert_eq!(p.points().len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.csv");
        let p = Path::new(vec![(0.0, 0.0), (3.25, -1.5), (10.125, 4.0)]).unwrap();
        write_path_csv(&p, &f).unwrap();
        assert_eq!(read_path_csv(&f).unwrap(), p);
    }

    fn polyline() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..8).prop_filter(
            "distinct consecutive points",
            |pts| pts.windows(2).all(|w| dist(w[0], w[1]) > 1e-3),
        )
    }

    proptest! {
        #[test]
        fn arc_sum_is_floor_multiple(pts in polyline(), d in 0.2f64..3.0) {
            let p = Path::new(pts).unwrap();
            let segs = segment_path(&p, d).unwrap();
            let covered: f64 = segs.iter().map(|s| s.arc_length).sum();
            let expected = ((p.length() + ARC_EPS) / d).floor() * d;
            prop_assert!((covered - expected).abs() < 1e-9);
            for s in &segs {
                prop_assert!(s.chord <= d + 1e-9);
                prop_assert!((s.chord - dist(s.start, s.end)).abs() < 1e-9);
                prop_assert!((0.0..360.0).contains(&s.heading_deg));
            }
        }

        #[test]
        fn endpoints_lie_on_polyline(pts in polyline(), d in 0.2f64..3.0) {
            let p = Path::new(pts).unwrap();
            for s in segment_path(&p, d).unwrap() {
                for q in [s.start, s.end] {
                    let best = p.points().windows(2)
                        .map(|w| point_segment_distance(q, w[0], w[1]))
                        .fold(f64::INFINITY, f64::min);
                    prop_assert!(best <= 1e-9);
                }
            }
        }

        #[test]
        fn densifying_changes_nothing(pts in polyline(), d in 0.2f64..3.0, frac in 0.1f64..0.9) {
            let p = Path::new(pts.clone()).unwrap();
            let mut dense = vec![pts[0]];
            for w in pts.windows(2) {
                dense.push((w[0].0 + (w[1].0 - w[0].0) * frac, w[0].1 + (w[1].1 - w[0].1) * frac));
                dense.push(w[1]);
            }
            let a = segment_path(&p, d).unwrap();
            let b = segment_path(&Path::new(dense).unwrap(), d).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(dist(x.start, y.start) < 1e-9 && dist(x.end, y.end) < 1e-9);
            }
        }
    }

    fn point_segment_distance(q: Point, a: Point, b: Point) -> f64 {
        let (vx, vy) = (b.0 - a.0, b.1 - a.1);
        let t = (((q.0 - a.0) * vx + (q.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
        dist(q, (a.0 + vx * t, a.1 + vy * t))
    }
}
