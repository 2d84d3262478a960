//! Metrics, per-terrain breakdowns, input-plane ablation and baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use rand::Rng;
use rayon::prelude::*;

use crate::nn::{train, Model, ModelSpec, TrainConfig};
use crate::patch::{Dataset, Patch, Plane, Split};
use crate::rng::stream;
use crate::{Error, Predictor, Result};

const ABLATION_STREAM: u64 = 0x6162_6c61_7465;

/// Absolute percentage error as a fraction.
pub fn ape(pred: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((pred - truth).abs() / truth.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    W,
    V,
    T,
    E,
}

impl Variable {
    pub const ALL: [Variable; 4] = [Variable::W, Variable::V, Variable::T, Variable::E];

    pub fn name(self) -> &'static str {
        match self {
            Variable::W => "w",
            Variable::V => "v",
            Variable::T => "T",
            Variable::E => "E",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Variable::W => "W",
            Variable::V => "m/s",
            Variable::T => "s",
            Variable::E => "J",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Variable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" | "W" => Ok(Variable::W),
            "v" | "V" => Ok(Variable::V),
            "t" | "T" => Ok(Variable::T),
            "e" | "E" => Ok(Variable::E),
            _ => Err(Error::InvalidArg(format!("unknown variable `{s}` (w|v|T|E)"))),
        }
    }
}

/// Truth and prediction of w, v, T, E for one sample. A NaN prediction
/// marks a variable the predictor does not produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub class_label: u8,
    pub truth: [f64; 4],
    pub pred: [f64; 4],
}

impl SampleRecord {
    /// Per-segment T = d/v and E = w d / v for truth and prediction.
    pub fn new(index: usize, class_label: u8, truth: (f64, f64), pred: (f64, f64), d: f64) -> Self {
        let derive = |(w, v): (f64, f64)| [w, v, d / v, w * d / v];
        SampleRecord { index, class_label, truth: derive(truth), pred: derive(pred) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarMetrics {
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// Samples with a prediction for this variable.
    pub count: usize,
    pub sq_err_sum: f64,
    /// Samples excluded from MAPE for a zero truth.
    pub zero_truth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub name: String,
    pub count: usize,
    pub vars: [VarMetrics; 4],
}

impl GroupMetrics {
    fn from_records<'a>(name: String, records: impl Iterator<Item = &'a SampleRecord> + Clone) -> Self {
        let vars = Variable::ALL.map(|var| {
            let k = var.index();
            let (mut sq, mut ape_sum, mut n, mut n_ape, mut zero) = (0.0, 0.0, 0usize, 0usize, 0usize);
            for r in records.clone().filter(|r| !r.pred[k].is_nan()) {
                let e = r.pred[k] - r.truth[k];
                sq += e * e;
                n += 1;
                match ape(r.pred[k], r.truth[k]) {
                    Ok(a) => {
                        ape_sum += a;
                        n_ape += 1;
                    }
                    Err(_) => zero += 1,
                }
            }
            VarMetrics {
                rmse: if n > 0 { (sq / n as f64).sqrt() } else { f64::NAN },
                mape: if n_ape > 0 { 100.0 * ape_sum / n_ape as f64 } else { f64::NAN },
                count: n,
                sq_err_sum: sq,
                zero_truth: zero,
            }
        });
        GroupMetrics { name, count: records.count(), vars }
    }

    pub fn var(&self, v: Variable) -> &VarMetrics {
        &self.vars[v.index()]
    }
}

/// One line of the report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub group: String,
    pub variable: String,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// One group per class label present, ascending, then "All".
    pub groups: Vec<GroupMetrics>,
    pub records: Vec<SampleRecord>,
    /// Display names for class labels; labels without one print as numbers.
    pub class_names: BTreeMap<u8, String>,
    /// Samples whose predicted power or speed is not positive.
    pub nonpositive: usize,
}

impl MetricReport {
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        let mut labels: Vec<u8> = records.iter().map(|r| r.class_label).collect();
        labels.sort_unstable();
        labels.dedup();
        let mut groups: Vec<GroupMetrics> = labels
            .iter()
            .map(|&k| GroupMetrics::from_records(k.to_string(), records.iter().filter(move |r| r.class_label == k)))
            .collect();
        if !records.is_empty() {
            groups.push(GroupMetrics::from_records("All".into(), records.iter()));
        }
        let nonpositive = records.iter().filter(|r| r.pred[0] <= 0.0 || r.pred[1] <= 0.0).count();
        MetricReport { groups, records, class_names: BTreeMap::new(), nonpositive }
    }

    pub fn with_class_names(mut self, names: BTreeMap<u8, String>) -> Self {
        self.class_names = names;
        self
    }

    pub fn all(&self) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.name == "All")
    }

    pub fn class(&self, label: u8) -> Option<&GroupMetrics> {
        let key = label.to_string();
        self.groups.iter().find(|g| g.name == key)
    }

    /// Shorthand for the overall MAPE of one variable, percent.
    pub fn mape(&self, v: Variable) -> f64 {
        self.all().map(|g| g.var(v).mape).unwrap_or(f64::NAN)
    }

    fn display_name(&self, group: &str) -> String {
        group.parse::<u8>().ok().and_then(|k| self.class_names.get(&k).cloned()).unwrap_or_else(|| group.to_string())
    }

    /// Rows for variables with at least one prediction.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut out = Vec::new();
        for g in &self.groups {
            for v in Variable::ALL {
                let m = g.var(v);
                if m.count > 0 {
                    out.push(ReportRow {
                        group: self.display_name(&g.name),
                        variable: v.name().into(),
                        rmse: m.rmse,
                        mape: m.mape,
                        count: m.count,
                    });
                }
            }
        }
        out
    }

    /// `group,variable,rmse,mape,count`, MAPE in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,variable,rmse,mape,count\n");
        for r in self.rows() {
            let _ = writeln!(out, "{},{},{},{},{}", r.group, r.variable, r.rmse, r.mape, r.count);
        }
        out
    }

    /// `patch_no,terrain,truth,pred,ape` for one variable, samples ordered
    /// by terrain then dataset order, APE in percent.
    pub fn series_csv(&self, v: Variable) -> String {
        let mut out = String::from("patch_no,terrain,truth,pred,ape\n");
        for (no, r) in self.series(v).iter().enumerate() {
            let k = v.index();
            let a = ape(r.pred[k], r.truth[k]).map(|a| 100.0 * a).unwrap_or(f64::NAN);
            let _ = writeln!(out, "{no},{},{},{},{a}", self.display_name(&r.class_label.to_string()), r.truth[k], r.pred[k]);
        }
        out
    }

    fn series(&self, v: Variable) -> Vec<&SampleRecord> {
        let mut s: Vec<&SampleRecord> = self.records.iter().filter(|r| !r.pred[v.index()].is_nan()).collect();
        s.sort_by_key(|r| (r.class_label, r.index));
        s
    }

    /// Prediction against truth per patch (upper panel) and APE per patch
    /// (lower panel), with terrain groups separated by vertical rules.
    pub fn to_svg(&self, v: Variable) -> String {
        let series = self.series(v);
        let k = v.index();
        let (w, h, left, right, top) = (900.0, 560.0, 70.0, 20.0, 30.0);
        let panel = 220.0;
        let gap = 50.0;
        let plot_w = w - left - right;
        let n = series.len().max(1);
        let x_of = |i: usize| left + plot_w * (i as f64 + 0.5) / n as f64;
        let finite = |x: f64| x.is_finite().then_some(x);
        let vals: Vec<f64> = series.iter().flat_map(|r| [r.truth[k], r.pred[k]]).filter_map(finite).collect();
        let (lo, hi) = bounds(&vals);
        let apes: Vec<f64> =
            series.iter().map(|r| ape(r.pred[k], r.truth[k]).map(|a| 100.0 * a).unwrap_or(f64::NAN)).collect();
        let ape_hi = apes.iter().cloned().filter(|a| a.is_finite()).fold(0.0, f64::max).max(1e-9);
        let y_val = |x: f64| top + panel * (1.0 - (x - lo) / (hi - lo));
        let ape_top = top + panel + gap;
        let y_ape = |a: f64| ape_top + panel * (1.0 - a / ape_hi);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for (y0, label) in [(top, format!("{} [{}]", v.name(), v.unit())), (ape_top, "APE [%]".to_string())] {
            let _ = writeln!(
                s,
                r##"<rect x="{left}" y="{y0}" width="{plot_w}" height="{panel}" fill="none" stroke="#444"/>"##
            );
            let _ = writeln!(s, r#"<text x="8" y="{}">{label}</text>"#, y0 + panel / 2.0);
        }
        let _ = writeln!(s, r#"<text x="{left}" y="{}">{}</text>"#, top - 10.0, fmt_axis(hi));
        let _ = writeln!(s, r#"<text x="{left}" y="{}">{}</text>"#, top + panel + 14.0, fmt_axis(lo));
        let _ = writeln!(s, r#"<text x="{left}" y="{}">{}</text>"#, ape_top - 10.0, fmt_axis(ape_hi));
        let _ = writeln!(s, r#"<text x="{}" y="{}">patch no.</text>"#, left + plot_w / 2.0, h - 8.0);

        // terrain group rules and names
        let mut start = 0;
        while start < series.len() {
            let label = series[start].class_label;
            let end = series[start..].iter().position(|r| r.class_label != label).map_or(series.len(), |p| start + p);
            let x0 = left + plot_w * start as f64 / n as f64;
            if start > 0 {
                let _ = writeln!(
                    s,
                    r##"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
                    ape_top + panel
                );
            }
            let name = xml_escape(&self.display_name(&label.to_string()));
            let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, x0 + 4.0, top + 14.0);
            start = end;
        }

        for (color, which) in [("#1f77b4", 0usize), ("#d62728", 1)] {
            let pts: Vec<String> = series
                .iter()
                .enumerate()
                .filter_map(|(i, r)| {
                    let y = if which == 0 { r.truth[k] } else { r.pred[k] };
                    finite(y).map(|y| format!("{:.2},{:.2}", x_of(i), y_val(y)))
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = apes
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| finite(a).map(|a| format!("{:.2},{:.2}", x_of(i), y_ape(a))))
            .collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#2ca02c" stroke-width="1" points="{}"/>"##, pts.join(" "));
        let lx = left + plot_w - 150.0;
        let _ = writeln!(s, r##"<text x="{lx}" y="{}" fill="#1f77b4">truth</text>"##, top + 14.0);
        let _ = writeln!(s, r##"<text x="{}" y="{}" fill="#d62728">prediction</text>"##, lx + 50.0, top + 14.0);
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn fmt_axis(x: f64) -> String {
    format!("{x:.3}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Parses a report CSV back into rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("group,variable,rmse,mape,count") {
        return Err(Error::Format("report: bad header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("report line {}: expected 5 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("report line {}: bad number `{s}`", i + 2)));
            Ok(ReportRow {
                group: f[0].into(),
                variable: f[1].into(),
                rmse: num(f[2])?,
                mape: num(f[3])?,
                count: f[4].parse().map_err(|_| Error::Format(format!("report line {}: bad count", i + 2)))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(Error::InvalidArg(format!("unknown report format `{s}` (csv|svg)"))),
        }
    }
}

/// Writes the metrics table (CSV) or the energy series plot (SVG).
pub fn emit_report(report: &MetricReport, path: impl AsRef<FsPath>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Svg => report.to_svg(Variable::E),
    };
    std::fs::write(path, text)?;
    Ok(())
}

fn split_indices(ds: &Dataset, split: Split) -> Result<Vec<usize>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok(idx)
}

fn check_d(d: f64) -> Result<()> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidArg(format!("segment length must be > 0, got {d}")));
    }
    Ok(())
}

fn records_from(ds: &Dataset, idx: &[usize], preds: &[(f64, f64)], d: f64) -> Vec<SampleRecord> {
    idx.iter()
        .zip(preds)
        .map(|(&i, &p)| {
            let s = &ds.samples[i];
            SampleRecord::new(i, s.class_label, (s.w_star, s.v_star), p, d)
        })
        .collect()
}

/// Predicts every sample of `split` and scores w, v and the per-segment
/// time and energy they imply. Predictions are scored as they come; a
/// non-positive speed yields a non-positive time and is counted in
/// [`MetricReport::nonpositive`].
pub fn evaluate<P: Predictor + ?Sized>(model: &P, ds: &Dataset, split: Split, d: f64) -> Result<MetricReport> {
    check_d(d)?;
    let idx = split_indices(ds, split)?;
    let patches: Vec<Patch> = idx.iter().map(|&i| ds.samples[i].patch.clone()).collect();
    let preds = model.predict(&patches)?;
    Ok(MetricReport::from_records(records_from(ds, &idx, &preds, d)))
}

/// Which input planes survive an ablation; the rest become noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationSpec {
    pub kept: Vec<Plane>,
    pub noise_seed: u64,
}

impl AblationSpec {
    /// Rejects an empty `kept` set; use [`AblationSpec::forced`] for that.
    pub fn new(kept: &[Plane], noise_seed: u64) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::InvalidArg("ablation keeps no input plane; force it explicitly".into()));
        }
        Ok(AblationSpec::forced(kept, noise_seed))
    }

    pub fn forced(kept: &[Plane], noise_seed: u64) -> Self {
        let mut kept = kept.to_vec();
        kept.sort_by_key(|p| p.index());
        kept.dedup();
        AblationSpec { kept, noise_seed }
    }

    /// Parses letters such as `OH`; an empty string needs `force`.
    pub fn from_letters(letters: &str, noise_seed: u64, force: bool) -> Result<Self> {
        let kept = letters
            .chars()
            .filter(|c| !matches!(c, ',' | ' ' | '{' | '}'))
            .map(|c| Plane::from_letter(c).ok_or_else(|| Error::InvalidArg(format!("unknown plane `{c}` (O|C|H)"))))
            .collect::<Result<Vec<_>>>()?;
        if force {
            Ok(AblationSpec::forced(&kept, noise_seed))
        } else {
            AblationSpec::new(&kept, noise_seed)
        }
    }

    pub fn letters(&self) -> String {
        self.kept.iter().map(|p| p.letter()).collect()
    }
}

/// Copy of `patch` with every plane outside `spec.kept` replaced by
/// uniform [0, 1) noise seeded by (noise seed, sample index, plane).
pub fn ablate_patch(patch: &Patch, sample_index: usize, spec: &AblationSpec) -> Patch {
    let mut out = patch.clone();
    for plane in Plane::ALL {
        if spec.kept.contains(&plane) {
            continue;
        }
        let mut rng = stream(spec.noise_seed, &[ABLATION_STREAM, sample_index as u64, plane.index() as u64]);
        for v in out.plane_mut(plane) {
            *v = rng.random::<f32>();
        }
    }
    out
}

/// [`evaluate`] on inputs whose non-kept planes are replaced by noise.
pub fn ablate_and_evaluate<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    split: Split,
    spec: &AblationSpec,
    d: f64,
) -> Result<MetricReport> {
    check_d(d)?;
    let idx = split_indices(ds, split)?;
    let patches: Vec<Patch> = idx.par_iter().map(|&i| ablate_patch(&ds.samples[i].patch, i, spec)).collect();
    let preds = model.predict(&patches)?;
    Ok(MetricReport::from_records(records_from(ds, &idx, &preds, d)))
}

/// A model of the same family that only sees the height plane, trained on
/// the samples of `class` (all samples when `None`).
pub fn baseline_height_only(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, class: Option<u8>) -> Result<Model> {
    let spec = spec.clone().with_planes(&[Plane::Height]);
    let subset = match class {
        Some(k) => ds.filtered(|s| s.class_label == k),
        None => ds.clone(),
    };
    if subset.count(Split::Train) == 0 {
        return Err(Error::EmptyDataset);
    }
    train(&subset, &spec, cfg)
}

/// One height-only model per class label with training samples.
pub fn baseline_height_only_per_class(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<BTreeMap<u8, Model>> {
    let mut labels: Vec<u8> = ds.samples.iter().filter(|s| s.split == Split::Train).map(|s| s.class_label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    labels.into_iter().map(|k| Ok((k, baseline_height_only(ds, spec, cfg, Some(k))?))).collect()
}

/// Scores each sample with its own class's model.
pub fn evaluate_per_class(models: &BTreeMap<u8, Model>, ds: &Dataset, split: Split, d: f64) -> Result<MetricReport> {
    check_d(d)?;
    let idx = split_indices(ds, split)?;
    let mut records = Vec::with_capacity(idx.len());
    for (&k, model) in models {
        let sub: Vec<usize> = idx.iter().copied().filter(|&i| ds.samples[i].class_label == k).collect();
        if sub.is_empty() {
            continue;
        }
        let patches: Vec<Patch> = sub.iter().map(|&i| ds.samples[i].patch.clone()).collect();
        let preds = model.predict(&patches)?;
        records.extend(records_from(ds, &sub, &preds, d));
    }
    if records.is_empty() {
        return Err(Error::EmptySplit);
    }
    records.sort_by_key(|r| r.index);
    Ok(MetricReport::from_records(records))
}

/// Constant expected speed `v_e`: every segment takes `d / v_e`. Only T is
/// predicted.
pub fn baseline_expected_time(ds: &Dataset, split: Split, v_e: f64, d: f64) -> Result<MetricReport> {
    check_d(d)?;
    if !(v_e > 0.0 && v_e.is_finite()) {
        return Err(Error::InvalidArg(format!("expected speed must be > 0, got {v_e}")));
    }
    let idx = split_indices(ds, split)?;
    let records = idx
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let mut r = SampleRecord::new(i, s.class_label, (s.w_star, s.v_star), (f64::NAN, v_e), d);
            r.pred = [f64::NAN, f64::NAN, d / v_e, f64::NAN];
            r
        })
        .collect();
    Ok(MetricReport::from_records(records))
}
