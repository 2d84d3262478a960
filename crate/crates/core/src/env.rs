//! Geo-referenced rasters and the three-layer environment.
//!
//! Rasters use image orientation: row 0 is the northernmost row and row
//! indices grow towards the south, columns grow towards the east. The
//! geo-transform pins the *center* of cell (0, 0) to `(origin_x, origin_y)`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path as FsPath;

use crate::{Error, Result};

/// Fractional indices closer than this to an integer are snapped to it, so
/// that cell-aligned sampling is exact despite rounding in the transforms.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidArg(format!("resolution must be > 0, got {resolution}")));
        }
        Ok(GeoTransform { origin_x, origin_y, resolution })
    }

    /// World meters to fractional `(row, col)`.
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let col = (x - self.origin_x) / self.resolution;
        let row = (self.origin_y - y) / self.resolution;
        (row, col)
    }

    /// Fractional `(row, col)` to world meters.
    pub fn grid_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (self.origin_x + col * self.resolution, self.origin_y - row * self.resolution)
    }
}

/// Free-function form of [`GeoTransform::world_to_grid`].
pub fn world_to_grid(geo: &GeoTransform, x: f64, y: f64) -> (f64, f64) {
    geo.world_to_grid(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RasterKind {
    Ortho,
    Height,
    Class,
}

impl RasterKind {
    fn code(self) -> u8 {
        match self {
            RasterKind::Ortho => 0,
            RasterKind::Height => 1,
            RasterKind::Class => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(RasterKind::Ortho),
            1 => Ok(RasterKind::Height),
            2 => Ok(RasterKind::Class),
            other => Err(Error::Format(format!("unknown raster kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    geo: GeoTransform,
    kind: RasterKind,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        geo: GeoTransform,
        kind: RasterKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArg("raster dimensions must be non-zero".into()));
        }
        if data.len() != width * height {
            return Err(Error::InvalidArg(format!(
                "raster data has {} samples, expected {}",
                data.len(),
                width * height
            )));
        }
        match kind {
            RasterKind::Ortho => {
                if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::InvalidArg(format!("ortho value {v} outside [0,1]")));
                }
            }
            RasterKind::Class => {
                if let Some(v) = data.iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v > 255.0) {
                    return Err(Error::InvalidArg(format!("class value {v} is not a label")));
                }
            }
            RasterKind::Height => {
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArg("height values must be finite".into()));
                }
            }
        }
        Ok(Raster { width, height, geo, kind, data })
    }

    pub fn filled(width: usize, height: usize, geo: GeoTransform, kind: RasterKind, value: f32) -> Result<Self> {
        Raster::new(width, height, geo, kind, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn kind(&self) -> RasterKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    fn check_bounds(&self, row: f64, col: f64) -> Result<(f64, f64)> {
        let row = snap(row);
        let col = snap(col);
        let in_range = row >= 0.0
            && col >= 0.0
            && row <= (self.height - 1) as f64
            && col <= (self.width - 1) as f64;
        if in_range {
            Ok((row, col))
        } else {
            Err(Error::OutOfBounds { row, col })
        }
    }

    /// Bilinear interpolation between the four surrounding cell centers.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> Result<f64> {
        if self.kind == RasterKind::Class {
            return Err(Error::InvalidArg("class rasters must be sampled with nearest".into()));
        }
        let (row, col) = self.check_bounds(row, col)?;
        let r0 = (row.floor() as usize).min(self.height - 1);
        let c0 = (col.floor() as usize).min(self.width - 1);
        let fr = row - r0 as f64;
        let fc = col - c0 as f64;
        let v00 = self.get(r0, c0) as f64;
        if fr == 0.0 && fc == 0.0 {
            return Ok(v00);
        }
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let v01 = self.get(r0, c1) as f64;
        let v10 = self.get(r1, c0) as f64;
        let v11 = self.get(r1, c1) as f64;
        let top = v00 + (v01 - v00) * fc;
        let bottom = v10 + (v11 - v10) * fc;
        Ok(top + (bottom - top) * fr)
    }

    /// Value of the nearest cell; exact halves round down.
    pub fn sample_nearest(&self, row: f64, col: f64) -> Result<f32> {
        let (row, col) = self.check_bounds(row, col)?;
        Ok(self.get(round_half_down(row), round_half_down(col)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"TCRS")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&[self.kind.code(), 0])?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&self.geo.origin_x.to_le_bytes())?;
        w.write_all(&self.geo.origin_y.to_le_bytes())?;
        w.write_all(&self.geo.resolution.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Raster::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 1 + 1 + 4 + 4 + 8 * 3;
        if bytes.len() < HEADER {
            return Err(Error::Format("raster header truncated".into()));
        }
        if &bytes[0..4] != b"TCRS" {
            return Err(Error::Format("bad raster magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != 1 {
            return Err(Error::Format(format!("unsupported raster version {version}")));
        }
        let kind = RasterKind::from_code(bytes[6])?;
        if bytes[7] != 0 {
            return Err(Error::Format("reserved byte must be zero".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let width = u32_at(8);
        let height = u32_at(12);
        let geo = GeoTransform::new(f64_at(16), f64_at(24), f64_at(32))
            .map_err(|e| Error::Format(e.to_string()))?;
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("raster dimensions overflow".into()))?;
        if bytes.len() - HEADER != expected {
            return Err(Error::Format(format!(
                "raster body has {} bytes, expected {expected}",
                bytes.len() - HEADER
            )));
        }
        let data = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Raster::new(width, height, geo, kind, data).map_err(|e| Error::Format(e.to_string()))
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

fn round_half_down(v: f64) -> usize {
    let f = v.floor();
    if v - f > 0.5 {
        f as usize + 1
    } else {
        f as usize
    }
}

pub fn load_raster(path: impl AsRef<FsPath>) -> Result<Raster> {
    let bytes = std::fs::read(path)?;
    Raster::from_bytes(&bytes)
}

pub fn save_raster(raster: &Raster, path: impl AsRef<FsPath>) -> Result<()> {
    let mut buf = Vec::new();
    raster.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// The ortho, height and class layers over one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    ortho: Raster,
    height: Raster,
    class_map: Raster,
    num_classes: u8,
    traversable: BTreeSet<u8>,
}

impl Environment {
    pub fn new(
        ortho: Raster,
        height: Raster,
        class_map: Raster,
        num_classes: u8,
        traversable: BTreeSet<u8>,
    ) -> Result<Self> {
        let kinds = [ortho.kind, height.kind, class_map.kind];
        if kinds != [RasterKind::Ortho, RasterKind::Height, RasterKind::Class] {
            return Err(Error::InvalidArg(format!("layer kinds out of order: {kinds:?}")));
        }
        for other in [&height, &class_map] {
            if other.width != ortho.width || other.height != ortho.height || other.geo != ortho.geo {
                return Err(Error::InvalidArg("layers do not share one grid".into()));
            }
        }
        if num_classes < 1 {
            return Err(Error::InvalidArg("need at least one terrain class".into()));
        }
        if traversable.iter().any(|&k| k == 0 || k > num_classes) {
            return Err(Error::InvalidArg(format!(
                "traversable labels {traversable:?} outside 1..={num_classes}"
            )));
        }
        if let Some(v) = class_map.data.iter().find(|&&v| v > num_classes as f32) {
            return Err(Error::InvalidArg(format!("class label {v} exceeds {num_classes}")));
        }
        Ok(Environment { ortho, height, class_map, num_classes, traversable })
    }

    pub fn ortho(&self) -> &Raster {
        &self.ortho
    }

    pub fn height(&self) -> &Raster {
        &self.height
    }

    pub fn class_map(&self) -> &Raster {
        &self.class_map
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn traversable(&self) -> &BTreeSet<u8> {
        &self.traversable
    }

    pub fn is_traversable(&self, label: u8) -> bool {
        self.traversable.contains(&label)
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.ortho.geo
    }

    pub fn width(&self) -> usize {
        self.ortho.width
    }

    pub fn rows(&self) -> usize {
        self.ortho.height
    }

    /// Class label at a world position (nearest cell).
    pub fn class_at(&self, x: f64, y: f64) -> Result<u8> {
        let (row, col) = self.geo().world_to_grid(x, y);
        Ok(self.class_map.sample_nearest(row, col)? as u8)
    }

    /// Terrain height at a world position (bilinear).
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        let (row, col) = self.geo().world_to_grid(x, y);
        self.height.sample_bilinear(row, col)
    }

    /// World-space bounding box `(min_x, min_y, max_x, max_y)` of cell centers.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let (x0, y0) = self.geo().grid_to_world((self.rows() - 1) as f64, 0.0);
        let (x1, y1) = self.geo().grid_to_world(0.0, (self.width() - 1) as f64);
        (x0, y0, x1, y1)
    }
}

pub const ORTHO_FILE: &str = "ortho.tcrs";
pub const HEIGHT_FILE: &str = "height.tcrs";
pub const CLASS_FILE: &str = "class.tcrs";
pub const ENV_META_FILE: &str = "env.cfg";

/// Writes the three layers plus `env.cfg` (class count and traversable
/// labels) into `dir`. Returns the written file names.
pub fn save_environment(env: &Environment, dir: impl AsRef<FsPath>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    save_raster(env.ortho(), dir.join(ORTHO_FILE))?;
    save_raster(env.height(), dir.join(HEIGHT_FILE))?;
    save_raster(env.class_map(), dir.join(CLASS_FILE))?;
    let labels: Vec<String> = env.traversable().iter().map(|l| l.to_string()).collect();
    std::fs::write(
        dir.join(ENV_META_FILE),
        format!("num_classes = {}\ntraversable = {}\n", env.num_classes(), labels.join(",")),
    )?;
    Ok([ORTHO_FILE, HEIGHT_FILE, CLASS_FILE, ENV_META_FILE].map(String::from).to_vec())
}

pub fn load_environment(dir: impl AsRef<FsPath>) -> Result<Environment> {
    let dir = dir.as_ref();
    let kv = crate::textfmt::parse_key_values(&std::fs::read_to_string(dir.join(ENV_META_FILE))?)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("{ENV_META_FILE}: missing `{k}`")));
    let num_classes = crate::textfmt::parse_u64("num_classes", get("num_classes")?)?;
    let num_classes = u8::try_from(num_classes).map_err(|_| Error::Format(format!("num_classes {num_classes} too large")))?;
    let traversable = get("traversable")?
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<u8>().map_err(|_| Error::Format(format!("bad traversable label `{t}`"))))
        .collect::<Result<BTreeSet<u8>>>()?;
    Environment::new(
        load_raster(dir.join(ORTHO_FILE))?,
        load_raster(dir.join(HEIGHT_FILE))?,
        load_raster(dir.join(CLASS_FILE))?,
        num_classes,
        traversable,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo0() -> GeoTransform {
        GeoTransform::new(0.0, 0.0, 0.05).unwrap()
    }

    fn raster(w: usize, h: usize, kind: RasterKind, data: Vec<f32>) -> Raster {
        Raster::new(w, h, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), kind, data).unwrap()
    }

    #[test]
    fn world_to_grid_examples() {
        assert_eq!(world_to_grid(&geo0(), 0.0, 0.0), (0.0, 0.0));
        let (r, c) = world_to_grid(&geo0(), 1.0, 0.0);
        assert_eq!(r, 0.0);
        assert!((c - 20.0).abs() < 1e-12);
        let g = GeoTransform::new(10.0, 10.0, 0.05).unwrap();
        let (r, c) = world_to_grid(&g, 10.0, 9.5);
        assert!((r - 10.0).abs() < 1e-12);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn rejects_non_positive_resolution() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let r = raster(3, 3, RasterKind::Height, vec![5.0; 9]);
        assert_eq!(r.sample_bilinear(1.3, 0.7).unwrap(), 5.0);
        let r = raster(2, 2, RasterKind::Height, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(r.sample_bilinear(0.0, 0.5).unwrap(), 0.5);
        let r = raster(2, 2, RasterKind::Height, vec![0.0, 0.0, 2.0, 2.0]);
        assert_eq!(r.sample_bilinear(0.25, 0.0).unwrap(), 0.5);
        assert!(matches!(r.sample_bilinear(1.5, 0.0), Err(Error::OutOfBounds { .. })));
        assert!(matches!(r.sample_bilinear(0.0, -0.1), Err(Error::OutOfBounds { .. })));
        // edges are inclusive
        assert_eq!(r.sample_bilinear(1.0, 1.0).unwrap(), 2.0);
    }

    #[test]
    fn nearest_examples() {
        let r = raster(2, 2, RasterKind::Class, vec![4.0; 4]);
        assert_eq!(r.sample_nearest(0.7, 0.2).unwrap(), 4.0);
        let r = raster(2, 2, RasterKind::Class, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.sample_nearest(0.4, 0.4).unwrap(), 1.0);
        assert_eq!(r.sample_nearest(0.6, 0.6).unwrap(), 4.0);
        assert_eq!(r.sample_nearest(0.5, 0.5).unwrap(), 1.0);
        assert!(r.sample_nearest(2.0, 0.0).is_err());
        assert!(r.sample_bilinear(0.0, 0.0).is_err());
    }

    #[test]
    fn raster_validation() {
        let g = geo0();
        assert!(Raster::new(2, 2, g, RasterKind::Ortho, vec![0.0; 3]).is_err());
        assert!(Raster::new(1, 1, g, RasterKind::Ortho, vec![1.5]).is_err());
        assert!(Raster::new(1, 1, g, RasterKind::Class, vec![1.5]).is_err());
    }

    #[test]
    fn environment_requires_shared_grid() {
        let g = geo0();
        let o = Raster::filled(2, 2, g, RasterKind::Ortho, 0.5).unwrap();
        let h = Raster::filled(2, 2, g, RasterKind::Height, 1.0).unwrap();
        let c = Raster::filled(2, 2, g, RasterKind::Class, 1.0).unwrap();
        let c_small = Raster::filled(1, 2, g, RasterKind::Class, 1.0).unwrap();
        let trav: BTreeSet<u8> = [1, 2].into();
        assert!(Environment::new(o.clone(), h.clone(), c.clone(), 7, trav.clone()).is_ok());
        assert!(Environment::new(o.clone(), h.clone(), c_small, 7, trav.clone()).is_err());
        assert!(Environment::new(o.clone(), h.clone(), c.clone(), 7, [0u8].into()).is_err());
        assert!(Environment::new(o, c, h, 7, trav).is_err());
    }

    #[test]
    fn truncated_and_bad_magic_are_format_errors() {
        let r = raster(3, 2, RasterKind::Height, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut bytes = Vec::new();
        r.write_to(&mut bytes).unwrap();
        assert!(matches!(Raster::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(Raster::from_bytes(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Raster::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad_version = bytes;
        bad_version[4] = 2;
        assert!(matches!(Raster::from_bytes(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.tcrs");
        let r = raster(3, 2, RasterKind::Height, vec![1.0, -2.5, 3.0, 4.0, 5.0, 600.25]);
        save_raster(&r, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_raster(&path).unwrap();
        assert_eq!(loaded, r);
        save_raster(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert!(matches!(load_raster(dir.path().join("missing")), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn grid_world_round_trip(ox in -1e4f64..1e4, oy in -1e4f64..1e4, res in 0.01f64..5.0,
                                 x in -1e3f64..1e3, y in -1e3f64..1e3) {
            let g = GeoTransform::new(ox, oy, res).unwrap();
            let (r, c) = g.world_to_grid(x, y);
            let (x2, y2) = g.grid_to_world(r, c);
            prop_assert!((x2 - x).abs() <= 1e-12 * (1.0 + x.abs().max(ox.abs())) * 10.0);
            prop_assert!((y2 - y).abs() <= 1e-12 * (1.0 + y.abs().max(oy.abs())) * 10.0);
        }

        #[test]
        fn bilinear_exact_at_cell_centers(vals in prop::collection::vec(-100f32..100.0, 12),
                                          row in 0usize..3, col in 0usize..4) {
            let r = raster(4, 3, RasterKind::Height, vals.clone());
            prop_assert_eq!(r.sample_bilinear(row as f64, col as f64).unwrap(), vals[row * 4 + col] as f64);
        }

        #[test]
        fn nearest_returns_a_present_value(vals in prop::collection::vec(0u8..8, 12),
                                           row in 0.0f64..2.0, col in 0.0f64..3.0) {
            let data: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
            let r = raster(4, 3, RasterKind::Class, data.clone());
            let v = r.sample_nearest(row, col).unwrap();
            prop_assert!(data.contains(&v));
        }

        #[test]
        fn file_format_is_bit_exact(vals in prop::collection::vec(-1e6f32..1e6, 6)) {
            let r = raster(2, 3, RasterKind::Height, vals);
            let mut a = Vec::new();
            r.write_to(&mut a).unwrap();
            let back = Raster::from_bytes(&a).unwrap();
            let mut b = Vec::new();
            back.write_to(&mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn environment_dir_round_trip() {
        let geo = GeoTransform::new(1.0, 2.0, 0.5).unwrap();
        let env = Environment::new(
            Raster::filled(4, 3, geo, RasterKind::Ortho, 0.25).unwrap(),
            Raster::new(4, 3, geo, RasterKind::Height, (0..12).map(|i| i as f32 * 0.1).collect()).unwrap(),
            Raster::new(4, 3, geo, RasterKind::Class, (0..12).map(|i| (i % 5) as f32).collect()).unwrap(),
            7,
            [1, 3].into(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_environment(&env, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        assert_eq!(load_environment(dir.path()).unwrap(), env);
        std::fs::remove_file(dir.path().join(HEIGHT_FILE)).unwrap();
        assert!(load_environment(dir.path()).unwrap_err().is_io());
    }
}
