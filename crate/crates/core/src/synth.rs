//! Synthetic environments and the robot dynamics oracle.
//!
//! The oracle replaces field recordings: it assigns each terrain class a
//! rolling resistance and a speed factor, slows the robot down on slopes and
//! charges rolling-resistance plus grade power on top of a constant idle
//! draw. Power never drops below idle (no regeneration).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path as FsPath;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::env::{Environment, GeoTransform, Raster, RasterKind};
use crate::patch::Patch;
use crate::path::{Path, Point};
use crate::rng::stream;
use crate::textfmt::{fmt_sig, parse_f64, parse_key_values, parse_u64};
use crate::{Error, Predictor, Result};

/// Physical surface parameters of one terrain class.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainParams {
    pub class_label: u8,
    pub name: String,
    pub rolling_resistance: f64,
    pub speed_factor: f64,
    pub ortho_mean: f64,
    pub ortho_noise: f64,
}

impl TerrainParams {
    pub fn new(label: u8, name: &str, mu: f64, kappa: f64, ortho_mean: f64, ortho_noise: f64) -> Self {
        TerrainParams {
            class_label: label,
            name: name.to_string(),
            rolling_resistance: mu,
            speed_factor: kappa,
            ortho_mean,
            ortho_noise,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class_label == 0 {
            return Err(Error::InvalidArg("terrain label 0 is reserved for no-data".into()));
        }
        if !(self.rolling_resistance > 0.0) {
            return Err(Error::InvalidArg(format!("{}: rolling resistance must be > 0", self.name)));
        }
        if !(self.speed_factor > 0.0 && self.speed_factor <= 1.0) {
            return Err(Error::InvalidArg(format!("{}: speed factor must be in (0,1]", self.name)));
        }
        if !(0.0..=1.0).contains(&self.ortho_mean) || self.ortho_noise < 0.0 {
            return Err(Error::InvalidArg(format!("{}: bad ortho appearance", self.name)));
        }
        Ok(())
    }
}

/// Grass, mud, unpaved and paved, labels 1 to 4.
pub fn default_terrains() -> Vec<TerrainParams> {
    vec![
        TerrainParams::new(1, "grass", 0.15, 0.9, 0.38, 0.06),
        TerrainParams::new(2, "mud", 0.25, 0.7, 0.22, 0.05),
        TerrainParams::new(3, "unpaved", 0.08, 1.0, 0.62, 0.06),
        TerrainParams::new(4, "paved", 0.05, 1.0, 0.50, 0.03),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub mass: f64,
    pub gravity: f64,
    pub idle_power: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub uphill_gain: f64,
    pub downhill_gain: f64,
    pub sample_rate: f64,
    pub battery_voltage: f64,
    pub current_noise: f64,
    pub terrain: Vec<TerrainParams>,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mass: 50.0,
            gravity: 9.81,
            idle_power: 30.0,
            v_max: 1.0,
            v_min: 0.1,
            uphill_gain: 0.8,
            downhill_gain: 0.3,
            sample_rate: 20.0,
            battery_voltage: 24.0,
            current_noise: 0.1,
            terrain: default_terrains(),
            seed: 0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "mass",
    "gravity",
    "idle_power",
    "v_max",
    "v_min",
    "uphill_gain",
    "downhill_gain",
    "sample_rate",
    "battery_voltage",
    "current_noise",
    "seed",
];

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidArg("mass must be > 0".into()));
        }
        if !(self.v_min > 0.0 && self.v_max > self.v_min) {
            return Err(Error::InvalidArg("need v_max > v_min > 0".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::InvalidArg("sample_rate must be > 0".into()));
        }
        if !(self.battery_voltage > 0.0) {
            return Err(Error::InvalidArg("battery_voltage must be > 0".into()));
        }
        if self.idle_power < 0.0 || self.current_noise < 0.0 || self.gravity < 0.0 {
            return Err(Error::InvalidArg("idle_power, gravity and current_noise must be >= 0".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.terrain {
            t.validate()?;
            if !seen.insert(t.class_label) {
                return Err(Error::InvalidArg(format!("terrain label {} defined twice", t.class_label)));
            }
        }
        Ok(())
    }

    pub fn terrain_for(&self, label: u8) -> Result<&TerrainParams> {
        self.terrain
            .iter()
            .find(|t| t.class_label == label)
            .ok_or(Error::NonTraversable(label))
    }

    pub fn traversable_labels(&self) -> BTreeSet<u8> {
        self.terrain.iter().map(|t| t.class_label).collect()
    }

    /// Parses the `key = value` config format. Terrain entries use
    /// `terrain.<label>.<field>` with fields `name`, `mu`, `kappa`,
    /// `ortho_mean` and `ortho_noise`; if any terrain key is present the
    /// default terrain list is replaced entirely.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = OracleConfig::default();
        let mut terrain: BTreeMap<u8, BTreeMap<String, String>> = BTreeMap::new();
        for (key, value) in &kv {
            if let Some(rest) = key.strip_prefix("terrain.") {
                let (label, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Format(format!("bad terrain key `{key}`")))?;
                let label: u8 = label
                    .parse()
                    .map_err(|_| Error::Format(format!("bad terrain label in `{key}`")))?;
                terrain.entry(label).or_default().insert(field.to_string(), value.clone());
                continue;
            }
            match key.as_str() {
                "mass" => cfg.mass = parse_f64(key, value)?,
                "gravity" => cfg.gravity = parse_f64(key, value)?,
                "idle_power" => cfg.idle_power = parse_f64(key, value)?,
                "v_max" => cfg.v_max = parse_f64(key, value)?,
                "v_min" => cfg.v_min = parse_f64(key, value)?,
                "uphill_gain" => cfg.uphill_gain = parse_f64(key, value)?,
                "downhill_gain" => cfg.downhill_gain = parse_f64(key, value)?,
                "sample_rate" => cfg.sample_rate = parse_f64(key, value)?,
                "battery_voltage" => cfg.battery_voltage = parse_f64(key, value)?,
                "current_noise" => cfg.current_noise = parse_f64(key, value)?,
                "seed" => cfg.seed = parse_u64(key, value)?,
                other => return Err(Error::Format(format!("unknown config key `{other}`"))),
            }
        }
        if !terrain.is_empty() {
            cfg.terrain = terrain
                .into_iter()
                .map(|(label, fields)| {
                    let get = |f: &str| {
                        fields
                            .get(f)
                            .ok_or_else(|| Error::Format(format!("terrain.{label}.{f} missing")))
                    };
                    Ok(TerrainParams {
                        class_label: label,
                        name: fields.get("name").cloned().unwrap_or_else(|| format!("class{label}")),
                        rolling_resistance: parse_f64("mu", get("mu")?)?,
                        speed_factor: parse_f64("kappa", get("kappa")?)?,
                        ortho_mean: parse_f64("ortho_mean", get("ortho_mean")?)?,
                        ortho_noise: parse_f64("ortho_noise", get("ortho_noise")?)?,
                    })
                })
                .collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let vals = [
            self.mass,
            self.gravity,
            self.idle_power,
            self.v_max,
            self.v_min,
            self.uphill_gain,
            self.downhill_gain,
            self.sample_rate,
            self.battery_voltage,
            self.current_noise,
        ];
        let mut s = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(vals) {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("seed = {}\n", self.seed));
        for t in &self.terrain {
            let l = t.class_label;
            s.push_str(&format!("terrain.{l}.name = {}\n", t.name));
            s.push_str(&format!("terrain.{l}.mu = {}\n", t.rolling_resistance));
            s.push_str(&format!("terrain.{l}.kappa = {}\n", t.speed_factor));
            s.push_str(&format!("terrain.{l}.ortho_mean = {}\n", t.ortho_mean));
            s.push_str(&format!("terrain.{l}.ortho_noise = {}\n", t.ortho_noise));
        }
        s
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        OracleConfig::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Steady-state speed on a slope `slope` (radians, positive uphill).
pub fn oracle_velocity(cfg: &OracleConfig, slope: f64, class_label: u8) -> Result<f64> {
    let t = cfg.terrain_for(class_label)?;
    let tan = slope.tan();
    let penalty = cfg.uphill_gain * tan.max(0.0) + cfg.downhill_gain * (-tan).max(0.0);
    Ok((cfg.v_max * t.speed_factor * (1.0 - penalty)).clamp(cfg.v_min, cfg.v_max))
}

/// Electrical power drawn at speed `v` on a slope.
pub fn oracle_power(cfg: &OracleConfig, slope: f64, class_label: u8, v: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::InvalidArg(format!("speed must be >= 0, got {v}")));
    }
    let t = cfg.terrain_for(class_label)?;
    let mech = cfg.mass * cfg.gravity * v * (t.rolling_resistance * slope.cos() + slope.sin());
    Ok(cfg.idle_power.max(cfg.idle_power + mech))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvGenParams {
    pub width_m: f64,
    pub height_m: f64,
    pub resolution: f64,
    pub num_classes: u8,
    pub roughness: f64,
    pub max_slope_deg: f64,
    /// Permit `max_slope_deg` above 22.5.
    pub allow_steep: bool,
    pub seed: u64,
    pub terrain: Vec<TerrainParams>,
    /// Voronoi sites carrying traversable labels.
    pub region_sites: usize,
    /// Voronoi sites carrying non-traversable labels.
    pub obstacle_sites: usize,
    /// Width of the no-data frame, meters.
    pub border_m: f64,
    /// Height of the lowest point, meters.
    pub base_height: f64,
}

impl Default for EnvGenParams {
    fn default() -> Self {
        EnvGenParams {
            width_m: 30.0,
            height_m: 30.0,
            resolution: 0.05,
            num_classes: 7,
            roughness: 0.5,
            max_slope_deg: 22.5,
            allow_steep: false,
            seed: 0,
            terrain: default_terrains(),
            region_sites: 12,
            obstacle_sites: 0,
            border_m: 0.5,
            base_height: 0.0,
        }
    }
}

/// Convenience form with default terrain appearance and region layout.
pub fn generate_environment(
    width_m: f64,
    height_m: f64,
    resolution: f64,
    num_classes: u8,
    roughness: f64,
    max_slope_deg: f64,
    seed: u64,
) -> Result<Environment> {
    generate_environment_with(&EnvGenParams {
        width_m,
        height_m,
        resolution,
        num_classes,
        roughness,
        max_slope_deg,
        seed,
        ..EnvGenParams::default()
    })
}

pub fn generate_environment_with(p: &EnvGenParams) -> Result<Environment> {
    if !(p.width_m > 0.0 && p.height_m > 0.0 && p.resolution > 0.0) {
        return Err(Error::InvalidArg("dimensions and resolution must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&p.roughness) {
        return Err(Error::InvalidArg("roughness must be in [0,1]".into()));
    }
    if !(p.max_slope_deg >= 0.0 && p.max_slope_deg < 90.0) {
        return Err(Error::InvalidArg("max_slope must be in [0,90)".into()));
    }
    if p.max_slope_deg > 22.5 && !p.allow_steep {
        return Err(Error::InvalidArg("max_slope above 22.5 degrees needs allow_steep".into()));
    }
    if p.terrain.is_empty() {
        return Err(Error::InvalidArg("need at least one traversable terrain".into()));
    }
    for t in &p.terrain {
        t.validate()?;
        if t.class_label > p.num_classes {
            return Err(Error::InvalidArg(format!("terrain label {} > num_classes", t.class_label)));
        }
    }
    let width = (p.width_m / p.resolution).round() as usize;
    let rows = (p.height_m / p.resolution).round() as usize;
    if width < 2 || rows < 2 {
        return Err(Error::InvalidArg("environment smaller than 2x2 cells".into()));
    }
    let geo = GeoTransform::new(0.0, (rows - 1) as f64 * p.resolution, p.resolution)?;

    let heights = fractal_heights(width, rows, p.resolution, p.roughness, p.seed);
    let heights = scale_to_slope(heights, width, rows, p.resolution, p.max_slope_deg, p.base_height);
    let labels = voronoi_classes(width, rows, p)?;
    let ortho = ortho_from_classes(&labels, p);

    let traversable = p.terrain.iter().map(|t| t.class_label).collect();
    Environment::new(
        Raster::new(width, rows, geo, RasterKind::Ortho, ortho)?,
        Raster::new(width, rows, geo, RasterKind::Height, heights)?,
        Raster::new(width, rows, geo, RasterKind::Class, labels)?,
        p.num_classes,
        traversable,
    )
}

/// Half-width of the box filter applied three times to the fractal, meters.
const SMOOTHING_M: f64 = 0.4;

/// Diamond-square midpoint displacement on the smallest `2^k` torus
/// covering the raster, cropped to size. Neighbours wrap around, so the
/// edges carry no averaging artifacts. Displacement amplitude starts at
/// `roughness` and is multiplied by it again at every finer level.
fn fractal_heights(width: usize, rows: usize, resolution: f64, roughness: f64, seed: u64) -> Vec<f64> {
    let mut n = 2usize;
    while n < width.max(rows) {
        n *= 2;
    }
    let mut g = vec![0.0f64; n * n];
    let mut rng = stream(seed, &[0x6865_6967_6874]);
    let mut amp = roughness;
    let jitter = |rng: &mut rand_xoshiro::SplitMix64, amp: f64| amp * (2.0 * rng.random::<f64>() - 1.0);
    let at = |g: &[f64], r: usize, c: usize| g[(r % n) * n + c % n];
    let mut step = n;
    while step > 1 {
        let half = step / 2;
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (at(&g, r - half, c - half)
                    + at(&g, r - half, c + half)
                    + at(&g, r + half, c - half)
                    + at(&g, r + half, c + half))
                    / 4.0;
                g[r * n + c] = avg + jitter(&mut rng, amp);
            }
        }
        for r in (0..n).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..n).step_by(step) {
                let avg = (at(&g, r + n - half, c) + at(&g, r + half, c) + at(&g, r, c + n - half) + at(&g, r, c + half))
                    / 4.0;
                g[r * n + c] = avg + jitter(&mut rng, amp);
            }
        }
        amp *= roughness;
        step = half;
    }
    // Midpoint displacement leaves single-cell creases and pits at the
    // coarse-level points; they would dominate the slope rescaling.
    let radius = (SMOOTHING_M / resolution).round() as usize;
    for _ in 0..3 {
        g = box_blur_torus(&g, n, radius);
    }
    let mut out = Vec::with_capacity(width * rows);
    for r in 0..rows {
        out.extend_from_slice(&g[r * n..r * n + width]);
    }
    out
}

/// Separable moving average of width `2 * radius + 1` on an `n x n` torus.
fn box_blur_torus(g: &[f64], n: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return g.to_vec();
    }
    let k = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        let row = &g[r * n..(r + 1) * n];
        let mut acc: f64 = (0..=2 * radius).map(|i| row[(i + n - radius) % n]).sum();
        for c in 0..n {
            tmp[r * n + c] = acc / k;
            acc += row[(c + radius + 1) % n] - row[(c + n - radius) % n];
        }
    }
    let mut out = vec![0.0; n * n];
    for c in 0..n {
        let mut acc: f64 = (0..=2 * radius).map(|i| tmp[((i + n - radius) % n) * n + c]).sum();
        for r in 0..n {
            out[r * n + c] = acc / k;
            acc += tmp[((r + radius + 1) % n) * n + c] - tmp[((r + n - radius) % n) * n + c];
        }
    }
    out
}

/// Largest gradient magnitude of the bilinear interpolant, in m/m. Within a
/// cell the x-derivative lies between the two horizontal edge differences
/// (same for y), so this bounds every directional derivative.
pub fn max_bilinear_gradient(h: &[f64], width: usize, rows: usize, resolution: f64) -> f64 {
    let mut best = 0.0f64;
    for r in 0..rows.saturating_sub(1) {
        for c in 0..width.saturating_sub(1) {
            let h00 = h[r * width + c];
            let h01 = h[r * width + c + 1];
            let h10 = h[(r + 1) * width + c];
            let h11 = h[(r + 1) * width + c + 1];
            let gx = (h01 - h00).abs().max((h11 - h10).abs());
            let gy = (h10 - h00).abs().max((h11 - h01).abs());
            best = best.max(gx.hypot(gy));
        }
    }
    best / resolution
}

fn scale_to_slope(h: Vec<f64>, width: usize, rows: usize, resolution: f64, max_slope_deg: f64, base: f64) -> Vec<f32> {
    // Headroom for the f32 rounding of stored heights.
    let target = max_slope_deg.to_radians().tan() * (1.0 - 1e-4);
    let grad = max_bilinear_gradient(&h, width, rows, resolution);
    let scale = if grad > 0.0 { target / grad } else { 0.0 };
    let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    h.iter().map(|v| (base + (v - min) * scale) as f32).collect()
}

fn voronoi_classes(width: usize, rows: usize, p: &EnvGenParams) -> Result<Vec<f32>> {
    let trav: Vec<u8> = p.terrain.iter().map(|t| t.class_label).collect();
    let trav_set: BTreeSet<u8> = trav.iter().copied().collect();
    let blocked: Vec<u8> = (1..=p.num_classes).filter(|k| !trav_set.contains(k)).collect();
    if p.obstacle_sites > 0 && blocked.is_empty() {
        return Err(Error::InvalidArg("obstacle sites need a non-traversable label".into()));
    }
    let mut rng = stream(p.seed, &[0x766f_726f_6e6f_69]);
    let n_regions = p.region_sites.max(trav.len());
    let mut sites: Vec<(f64, f64, u8)> = Vec::new();
    for i in 0..n_regions {
        let r = rng.random::<f64>() * rows as f64;
        let c = rng.random::<f64>() * width as f64;
        sites.push((r, c, trav[i % trav.len()]));
    }
    for i in 0..p.obstacle_sites {
        let r = rng.random::<f64>() * rows as f64;
        let c = rng.random::<f64>() * width as f64;
        sites.push((r, c, blocked[i % blocked.len()]));
    }
    let border = (p.border_m / p.resolution).round() as usize;
    let mut out = vec![0.0f32; width * rows];
    for r in 0..rows {
        for c in 0..width {
            if r < border || c < border || r + border >= rows || c + border >= width {
                continue;
            }
            let (rf, cf) = (r as f64, c as f64);
            let mut best = (f64::INFINITY, 0u8);
            for &(sr, sc, label) in &sites {
                let d2 = (sr - rf).powi(2) + (sc - cf).powi(2);
                if d2 < best.0 {
                    best = (d2, label);
                }
            }
            out[r * width + c] = best.1 as f32;
        }
    }
    Ok(out)
}

fn ortho_from_classes(labels: &[f32], p: &EnvGenParams) -> Vec<f32> {
    let mut rng = stream(p.seed, &[0x6f72_7468_6f]);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    labels
        .iter()
        .map(|&l| {
            let label = l as u8;
            if label == 0 {
                return 1.0;
            }
            let (mean, noise) = p
                .terrain
                .iter()
                .find(|t| t.class_label == label)
                .map(|t| (t.ortho_mean, t.ortho_noise))
                .unwrap_or((0.12, 0.04));
            let z: f64 = std_normal.sample(&mut rng);
            (mean + noise * z).clamp(0.0, 1.0) as f32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub voltage: f64,
    pub current: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
}

impl TrajectoryLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,y,voltage,current,speed\n");
        for r in &self.records {
            let cols = [r.t, r.x, r.y, r.voltage, r.current, r.speed].map(|v| fmt_sig(v, 6));
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,x,y,voltage,current,speed" => {}
            _ => return Err(Error::Format("trajectory header missing".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("trajectory line {}: bad number", i + 2)))?;
            if vals.len() != 6 {
                return Err(Error::Format(format!("trajectory line {}: expected 6 columns", i + 2)));
            }
            records.push(LogRecord {
                t: vals[0],
                x: vals[1],
                y: vals[2],
                voltage: vals[3],
                current: vals[4],
                speed: vals[5],
            });
        }
        if records.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::Format("trajectory timestamps must increase".into()));
        }
        Ok(TrajectoryLog { records })
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        TrajectoryLog::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Slope along `heading` (unit vector) at `p`: central difference of the
/// height map over one cell on either side. Radians.
pub fn slope_along(env: &Environment, p: Point, heading: (f64, f64)) -> Result<f64> {
    let r = env.geo().resolution;
    let ahead = env.height_at(p.0 + r * heading.0, p.1 + r * heading.1)?;
    let behind = env.height_at(p.0 - r * heading.0, p.1 - r * heading.1)?;
    Ok(((ahead - behind) / (2.0 * r)).atan())
}

/// Drives the polyline at oracle speed, logging at `cfg.sample_rate`.
pub fn simulate_run(env: &Environment, cfg: &OracleConfig, waypoints: &Path) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.current_noise.max(0.0))
        .map_err(|e| Error::InvalidArg(format!("current noise: {e}")))?;
    let mut rng = stream(cfg.seed, &[0x7369_6d]);
    let pts = waypoints.points();
    let cumulative = waypoints.cumulative_arc();
    let total = *cumulative.last().unwrap();
    let dt = 1.0 / cfg.sample_rate;
    let mut records = Vec::new();
    let mut s = 0.0f64;
    let mut k = 0u64;
    loop {
        let p = waypoints.point_at(&cumulative, s);
        let leg = cumulative.partition_point(|&a| a <= s).clamp(1, pts.len() - 1) - 1;
        let (a, b) = (pts[leg], pts[leg + 1]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let heading = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let label = env.class_at(p.0, p.1)?;
        if !env.is_traversable(label) {
            return Err(Error::NonTraversable(label));
        }
        let slope = slope_along(env, p, heading)?;
        let v = oracle_velocity(cfg, slope, label)?;
        let w = oracle_power(cfg, slope, label, v)?;
        let jitter = if cfg.current_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        records.push(LogRecord {
            t: k as f64 * dt,
            x: p.0,
            y: p.1,
            voltage: cfg.battery_voltage,
            current: w / cfg.battery_voltage + jitter,
            speed: v,
        });
        if s >= total {
            break;
        }
        s = (s + v * dt).min(total);
        k += 1;
    }
    Ok(TrajectoryLog { records })
}

/// True if every point within `clearance` of the straight leg `a`→`b` is
/// on traversable, in-bounds terrain (checked on a half-cell lattice).
pub fn leg_is_clear(env: &Environment, a: Point, b: Point, clearance: f64) -> bool {
    let r = env.geo().resolution;
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    if len == 0.0 {
        return false;
    }
    let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
    let (nx, ny) = (-uy, ux);
    let along = ((len + 2.0 * clearance) / (0.5 * r)).ceil() as usize;
    let across = ((2.0 * clearance) / (0.5 * r)).ceil() as usize;
    for i in 0..=along {
        let t = -clearance + (len + 2.0 * clearance) * i as f64 / along as f64;
        for j in 0..=across {
            let o = if across == 0 { 0.0 } else { -clearance + 2.0 * clearance * j as f64 / across as f64 };
            let (x, y) = (a.0 + ux * t + nx * o, a.1 + uy * t + ny * o);
            match env.class_at(x, y) {
                Ok(label) if env.is_traversable(label) => {}
                _ => return false,
            }
        }
    }
    true
}

/// Random waypoint tours over the environment interior. Each leg keeps
/// `clearance` meters of traversable terrain on both sides. If the tours
/// miss a traversable class that is present in the map, one extra tour
/// through the missing classes is appended.
pub fn coverage_tours(
    env: &Environment,
    count: usize,
    waypoints_per_tour: usize,
    clearance: f64,
    seed: u64,
) -> Result<Vec<Path>> {
    let (x0, y0, x1, y1) = env.extent();
    let margin = clearance + env.geo().resolution;
    if x1 - x0 <= 2.0 * margin || y1 - y0 <= 2.0 * margin {
        return Err(Error::InvalidArg("environment too small for tours".into()));
    }
    let pick = |rng: &mut rand_xoshiro::SplitMix64| {
        (
            x0 + margin + rng.random::<f64>() * (x1 - x0 - 2.0 * margin),
            y0 + margin + rng.random::<f64>() * (y1 - y0 - 2.0 * margin),
        )
    };
    let mut tours = Vec::new();
    for tour_id in 0..count {
        let mut rng = stream(seed, &[0x746f_7572, tour_id as u64]);
        let mut pts: Vec<Point> = Vec::new();
        let mut attempts = 0;
        while pts.len() < waypoints_per_tour.max(2) {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidArg("could not place tour waypoints".into()));
            }
            let cand = pick(&mut rng);
            let ok = match pts.last() {
                None => leg_is_clear(env, cand, (cand.0 + 1e-3, cand.1), clearance),
                Some(&prev) => {
                    (cand.0 - prev.0).hypot(cand.1 - prev.1) > 1.0 && leg_is_clear(env, prev, cand, clearance)
                }
            };
            if ok {
                pts.push(cand);
            }
        }
        tours.push(Path::new(pts)?);
    }
    let covered = classes_along(env, &tours);
    let present = classes_present(env);
    let missing: Vec<u8> = present.difference(&covered).copied().collect();
    if !missing.is_empty() {
        if let Some(extra) = tour_through(env, &missing, clearance, tours.last().map(|t| t.points()[0]))? {
            tours.push(extra);
        }
    }
    Ok(tours)
}

fn classes_along(env: &Environment, tours: &[Path]) -> BTreeSet<u8> {
    let step = env.geo().resolution;
    let mut out = BTreeSet::new();
    for t in tours {
        let cum = t.cumulative_arc();
        let total = *cum.last().unwrap();
        let n = (total / step).ceil() as usize;
        for i in 0..=n {
            let p = t.point_at(&cum, i as f64 * step);
            if let Ok(l) = env.class_at(p.0, p.1) {
                out.insert(l);
            }
        }
    }
    out
}

fn classes_present(env: &Environment) -> BTreeSet<u8> {
    env.class_map()
        .data()
        .iter()
        .map(|&v| v as u8)
        .filter(|l| env.is_traversable(*l))
        .collect()
}

fn tour_through(env: &Environment, labels: &[u8], clearance: f64, start: Option<Point>) -> Result<Option<Path>> {
    let mut pts: Vec<Point> = start.into_iter().collect();
    let cm = env.class_map();
    for &label in labels {
        // the cell of this class deepest inside clear terrain, scanned in raster order
        let mut found = None;
        'scan: for r in (0..cm.height()).step_by(4) {
            for c in (0..cm.width()).step_by(4) {
                if cm.get(r, c) as u8 != label {
                    continue;
                }
                let p = env.geo().grid_to_world(r as f64, c as f64);
                let ok = match pts.last() {
                    Some(&prev) => prev != p && leg_is_clear(env, prev, p, clearance),
                    None => leg_is_clear(env, p, (p.0 + 1e-3, p.1), clearance),
                };
                if ok {
                    found = Some(p);
                    break 'scan;
                }
            }
        }
        if let Some(p) = found {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        return Ok(None);
    }
    Path::new(pts).map(Some)
}

/// The oracle applied to a patch: walks the patch centerline, evaluates the
/// local slope and class at every column and combines them the way a
/// constant-rate log would (time-weighted mean power, harmonic mean speed).
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub cfg: OracleConfig,
    pub num_classes: u8,
    /// Patch cell size, meters.
    pub resolution: f64,
}

impl OraclePredictor {
    pub fn predict_one(&self, patch: &Patch) -> Result<(f64, f64)> {
        let s = patch.side;
        let cell = self.resolution;
        let height = patch.plane(crate::patch::Plane::Height);
        let class = patch.plane(crate::patch::Plane::Class);
        let rows: Vec<usize> = if s % 2 == 0 { vec![s / 2 - 1, s / 2] } else { vec![s / 2] };
        let center_h = |c: usize| rows.iter().map(|&r| height[r * s + c] as f64).sum::<f64>() / rows.len() as f64;
        // the segment covers the middle columns of the window
        let seg_cells = ((s as f64 / crate::patch::WINDOW_SEGMENTS).round() as usize).clamp(1, s);
        let first = (s - seg_cells) / 2;
        let mut inv_v_sum = 0.0;
        let mut energy_sum = 0.0;
        for c in first..first + seg_cells {
            let (lo, hi) = (c.saturating_sub(1), (c + 1).min(s - 1));
            let tan = (center_h(hi) - center_h(lo)) / ((hi - lo) as f64 * cell);
            let slope = tan.atan();
            let label = crate::patch::decode_class(class[rows[0] * s + c], self.num_classes);
            let v = oracle_velocity(&self.cfg, slope, label)?;
            let w = oracle_power(&self.cfg, slope, label, v)?;
            inv_v_sum += 1.0 / v;
            energy_sum += w / v;
        }
        Ok((energy_sum / inv_v_sum, seg_cells as f64 / inv_v_sum))
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, patches: &[Patch]) -> Result<Vec<(f64, f64)>> {
        patches.iter().map(|p| self.predict_one(p)).collect()
    }
}
