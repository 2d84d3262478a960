//! `terracost`: command-line driver for environment synthesis, dataset
//! building, training, evaluation, path costing and planning.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O or file format, 4 domain error.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use terracost::cost::{self, CostGrid, Objective};
use terracost::env::{load_environment, save_environment, Environment};
use terracost::eval::{self, AblationSpec, MetricReport, ReportFormat, Variable};
use terracost::nn::{self, load_model, save_model, Model, ModelSpec, Optimizer, TrainConfig};
use terracost::patch::{build_dataset, load_dataset, save_dataset, Dataset, DatasetParams, Plane, Rect, Split};
use terracost::path::{read_path_csv, write_path_csv, Path as Polyline};
use terracost::rng::derive_seed;
use terracost::synth::{self, EnvGenParams, OracleConfig, OraclePredictor, TrajectoryLog};
use terracost::{Error, Predictor};

use manifest::Manifest;

const ORACLE_FILE: &str = "oracle.cfg";

#[derive(Parser, Debug)]
#[command(name = "terracost", version, about = "Learned traversal time and energy for ground robots")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs, 0 picks automatically.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Global seed; falls back to TERRACOST_SEED, then 0.
    #[arg(long, global = true, env = "TERRACOST_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic environment (ortho, height, class rasters).
    GenEnv(GenEnvArgs),
    /// Drive coverage tours with the oracle and log trajectories.
    Record(RecordArgs),
    /// Cut logged trajectories into labeled patches.
    BuildDataset(BuildDatasetArgs),
    /// Train the regression network.
    Train(TrainArgs),
    /// Score a model on one dataset split.
    Eval(EvalArgs),
    /// Score a model with some input planes replaced by noise.
    Ablate(AblateArgs),
    /// Height-only and constant-time baselines.
    Baselines(BaselinesArgs),
    /// Time and energy along a path.
    PathCost(PathCostArgs),
    /// Directional cost grid over an environment.
    BuildGrid(BuildGridArgs),
    /// Minimum time or energy route on a cost grid.
    Plan(PlanArgs),
    /// Merge metric reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenEnvArgs {
    /// Extent in meters, `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_size)]
    size: (f64, f64),
    #[arg(long, default_value_t = 0.05)]
    resolution: f64,
    #[arg(long, default_value_t = 7)]
    classes: u8,
    #[arg(long, default_value_t = 0.5)]
    roughness: f64,
    /// Steepest slope in degrees.
    #[arg(long, default_value_t = 22.5)]
    max_slope: f64,
    /// Allow --max-slope above 22.5.
    #[arg(long)]
    allow_steep: bool,
    /// Voronoi sites with traversable classes.
    #[arg(long, default_value_t = 12)]
    regions: usize,
    /// Voronoi sites with non-traversable classes.
    #[arg(long, default_value_t = 0)]
    obstacles: usize,
    /// Oracle configuration supplying the terrain table; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RecordArgs {
    /// Environment directory.
    #[arg(long)]
    env: PathBuf,
    /// Oracle configuration; defaults to `oracle.cfg` in the environment directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    tours: usize,
    #[arg(long, default_value_t = 20)]
    waypoints: usize,
    /// Traversable margin on both sides of every tour leg, meters.
    #[arg(long, default_value_t = 0.75)]
    clearance: f64,
    /// Drive this path (CSV `x,y`) instead of generated tours.
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    #[arg(long)]
    env: PathBuf,
    /// Directory with trajectory CSVs.
    #[arg(long)]
    logs: PathBuf,
    /// Segment length, meters.
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Validation rectangle `min_x,min_y,max_x,max_y`.
    #[arg(long, value_parser = parse_rect)]
    val_region: Option<Rect>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Clone)]
struct TrainOpts {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::default(),
                OptimizerArg::Sgd => Optimizer::Sgd,
            },
            seed,
            normalizers: None,
        }
    }

    fn record(&self, m: &mut Manifest) {
        m.param("epochs", self.epochs)
            .param("lr", self.lr)
            .param("batch_size", self.batch_size)
            .param("optimizer", format!("{:?}", self.optimizer).to_lowercase());
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    /// Input planes by letter (O ortho, C class, H height).
    #[arg(long, default_value = "OCH")]
    planes: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    /// Oracle configuration used for terrain names in reports.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    /// Planes kept intact, e.g. `OC`; the others become uniform noise.
    #[arg(long, default_value = "")]
    keep: String,
    /// Allow keeping no plane at all.
    #[arg(long)]
    force: bool,
    /// Noise seed; defaults to the global seed.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    All,
    HeightOnly,
    Retrained,
    ExpectedTime,
}

#[derive(Args, Debug)]
struct BaselinesArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    #[arg(long, value_enum, default_value_t = BaselineKind::All)]
    which: BaselineKind,
    /// Class the single-class height-only model is trained on.
    #[arg(long, default_value_t = 1)]
    class: u8,
    /// Expected speed of the constant-time baseline, m/s.
    #[arg(long, default_value_t = 1.0)]
    v_e: f64,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictorArgs {
    /// Trained model file.
    #[arg(long, conflicts_with = "oracle")]
    model: Option<PathBuf>,
    /// Use the oracle from this configuration instead of a model.
    #[arg(long)]
    oracle: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PathCostArgs {
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Path CSV `x,y`.
    #[arg(long)]
    path: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildGridArgs {
    #[arg(long)]
    env: PathBuf,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Node spacing, meters.
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Time,
    Energy,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Directory with `grid.csv` and `grid.meta`.
    #[arg(long)]
    grid: PathBuf,
    /// Start position `x,y`.
    #[arg(long, value_parser = parse_point)]
    start: (f64, f64),
    /// Goal position `x,y`.
    #[arg(long, value_parser = parse_point)]
    goal: (f64, f64),
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Energy)]
    objective: ObjectiveArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `LABEL=REPORT.csv`, repeatable.
    #[arg(long = "input", required = true, value_parser = parse_labeled)]
    inputs: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(f64, f64), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let w: f64 = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    let h: f64 = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    if !(w > 0.0 && h > 0.0) {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}`")))
        .collect::<Result<_, _>>()?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(format!("expected {n} comma-separated finite numbers, got `{s}`"));
    }
    Ok(v)
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let v = parse_floats(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    let v = parse_floats(s, 4)?;
    if v[0] > v[2] || v[1] > v[3] {
        return Err("rectangle needs min <= max".into());
    }
    Ok(Rect { min_x: v[0], min_y: v[1], max_x: v[2], max_y: v[3] })
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected LABEL=FILE, got `{s}`"))?;
    if label.is_empty() || label.contains(',') {
        return Err(format!("bad label `{label}`"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format(_) => 3,
            Error::InvalidArg(_) => 2,
            _ => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 3, message: e.to_string() }
    }
}

/// Prefixes a failure with the file it concerns.
fn at<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|e| {
        let f = Failure::from(e);
        Failure { code: f.code, message: format!("{}: {}", path.display(), f.message) }
    })
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    seed: u64,
    seed_given: Option<u64>,
    threads: usize,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.seed_given.or(Some(self.seed)), self.threads)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx { seed: cli.seed.unwrap_or(0), seed_given: cli.seed, threads: cli.threads };
    let result = match &cli.command {
        Command::GenEnv(a) => gen_env(&ctx, a),
        Command::Record(a) => record(&ctx, a),
        Command::BuildDataset(a) => cmd_build_dataset(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::Baselines(a) => cmd_baselines(&ctx, a),
        Command::PathCost(a) => cmd_path_cost(&ctx, a),
        Command::BuildGrid(a) => cmd_build_grid(&ctx, a),
        Command::Plan(a) => cmd_plan(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure { code: 3, message: format!("{}: {e}", dir.display()) })
}

fn env_files(dir: &Path) -> Vec<PathBuf> {
    use terracost::env::{CLASS_FILE, ENV_META_FILE, HEIGHT_FILE, ORTHO_FILE};
    [ORTHO_FILE, HEIGHT_FILE, CLASS_FILE, ENV_META_FILE].iter().map(|f| dir.join(f)).collect()
}

fn open_env(dir: &Path, m: &mut Manifest) -> Result<Environment, Failure> {
    let env = at(dir, load_environment(dir))?;
    m.inputs(&env_files(dir))?;
    Ok(env)
}

fn oracle_config(path: Option<&Path>, m: &mut Manifest) -> Result<OracleConfig, Failure> {
    match path {
        Some(p) => {
            let cfg = at(p, OracleConfig::load(p))?;
            m.input(p)?;
            Ok(cfg)
        }
        None => Ok(OracleConfig::default()),
    }
}

fn class_names(cfg: &OracleConfig) -> BTreeMap<u8, String> {
    cfg.terrain.iter().map(|t| (t.class_label, t.name.clone())).collect()
}

fn gen_env(ctx: &Ctx, a: &GenEnvArgs) -> CmdResult {
    let mut m = ctx.manifest("gen-env");
    let cfg = OracleConfig { seed: ctx.seed, ..oracle_config(a.config.as_deref(), &mut m)? };
    let params = EnvGenParams {
        width_m: a.size.0,
        height_m: a.size.1,
        resolution: a.resolution,
        num_classes: a.classes,
        roughness: a.roughness,
        max_slope_deg: a.max_slope,
        allow_steep: a.allow_steep,
        seed: ctx.seed,
        terrain: cfg.terrain.clone(),
        region_sites: a.regions,
        obstacle_sites: a.obstacles,
        ..EnvGenParams::default()
    };
    let env = synth::generate_environment_with(&params)?;
    out_dir(&a.out)?;
    let mut files = save_environment(&env, &a.out)?;
    std::fs::write(a.out.join(ORACLE_FILE), cfg.to_text())?;
    files.push(ORACLE_FILE.into());
    m.param("size", format!("{}x{}", a.size.0, a.size.1))
        .param("resolution", a.resolution)
        .param("classes", a.classes)
        .param("roughness", a.roughness)
        .param("max_slope", a.max_slope)
        .param("regions", a.regions)
        .param("obstacles", a.obstacles);
    for f in files {
        m.output(&a.out.join(f))?;
    }
    m.write(&a.out)?;
    eprintln!("environment {} x {} cells written to {}", env.width(), env.rows(), a.out.display());
    Ok(())
}

fn record(ctx: &Ctx, a: &RecordArgs) -> CmdResult {
    let mut m = ctx.manifest("record");
    let env = open_env(&a.env, &mut m)?;
    let cfg_path = a.config.clone().or_else(|| {
        let p = a.env.join(ORACLE_FILE);
        p.exists().then_some(p)
    });
    let cfg = OracleConfig { seed: ctx.seed, ..oracle_config(cfg_path.as_deref(), &mut m)? };
    let tours = match &a.path {
        Some(p) => {
            m.input(p)?;
            vec![at(p, read_path_csv(p))?]
        }
        None => synth::coverage_tours(&env, a.tours, a.waypoints, a.clearance, ctx.seed)?,
    };
    let logs = tours
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let c = OracleConfig { seed: derive_seed(ctx.seed, &[i as u64]), ..cfg.clone() };
            synth::simulate_run(&env, &c, t)
        })
        .collect::<Result<Vec<TrajectoryLog>, Error>>()?;
    out_dir(&a.out)?;
    m.param("tours", tours.len()).param("waypoints", a.waypoints).param("clearance", a.clearance);
    for (i, (log, tour)) in logs.iter().zip(&tours).enumerate() {
        let file = a.out.join(format!("tour_{i:03}.csv"));
        log.save(&file)?;
        m.output(&file)?;
        let path_file = a.out.join(format!("tour_{i:03}.path"));
        write_path_csv(tour, &path_file)?;
        m.output(&path_file)?;
    }
    m.write(&a.out)?;
    let records: usize = logs.iter().map(|l| l.records.len()).sum();
    eprintln!("{} tours, {records} records", logs.len());
    Ok(())
}

fn log_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure { code: 3, message: format!("{}: {e}", dir.display()) })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure { code: 3, message: format!("no trajectory CSVs in {}", dir.display()) });
    }
    Ok(files)
}

fn cmd_build_dataset(ctx: &Ctx, a: &BuildDatasetArgs) -> CmdResult {
    let mut m = ctx.manifest("build-dataset");
    let env = open_env(&a.env, &mut m)?;
    let files = log_files(&a.logs)?;
    let logs = files.iter().map(|f| at(f, TrajectoryLog::load(f))).collect::<Result<Vec<_>, _>>()?;
    m.inputs(&files)?;
    let params = DatasetParams {
        d: a.d,
        train_fraction: a.train_fraction,
        test_fraction: a.test_fraction,
        val_region: a.val_region,
        seed: ctx.seed,
    };
    let (ds, stats) = build_dataset(&env, &logs, &params)?;
    out_dir(&a.out)?;
    let file = a.out.join("dataset.tcpd");
    save_dataset(&ds, &file)?;
    m.param("d", a.d).param("train_fraction", a.train_fraction).param("test_fraction", a.test_fraction);
    if let Some(r) = a.val_region {
        m.param("val_region", format!("{},{},{},{}", r.min_x, r.min_y, r.max_x, r.max_y));
    }
    m.param("samples", ds.samples.len())
        .param("train", ds.count(Split::Train))
        .param("test", ds.count(Split::Test))
        .param("val", ds.count(Split::Val));
    m.output(&file)?;
    m.write(&a.out)?;
    eprintln!(
        "{} samples (train {}, test {}, val {}); {} segments, {} with too few records, {} off-map",
        ds.samples.len(),
        ds.count(Split::Train),
        ds.count(Split::Test),
        ds.count(Split::Val),
        stats.segments,
        stats.too_few_records,
        stats.extraction_failed
    );
    Ok(())
}

fn parse_planes(s: &str) -> Result<Vec<Plane>, Failure> {
    let planes: Vec<Plane> = s
        .chars()
        .map(|c| Plane::from_letter(c).ok_or_else(|| usage(format!("unknown plane `{c}` (O|C|H)"))))
        .collect::<Result<_, _>>()?;
    if planes.is_empty() {
        return Err(usage("at least one input plane is needed"));
    }
    Ok(planes)
}

fn train_verbose(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Model, Failure> {
    Ok(nn::train_with_progress(ds, spec, cfg, |r| match r.test_loss {
        Some(t) => eprintln!("epoch {:>3}  train {:.6}  test {t:.6}", r.epoch + 1, r.train_loss),
        None => eprintln!("epoch {:>3}  train {:.6}", r.epoch + 1, r.train_loss),
    })?)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let mut m = ctx.manifest("train");
    let ds = at(&a.dataset, load_dataset(&a.dataset))?;
    m.input(&a.dataset)?;
    let spec = ModelSpec::desk(ds.side).with_planes(&parse_planes(&a.planes)?);
    let cfg = a.opts.config(ctx.seed);
    let model = train_verbose(&ds, &spec, &cfg)?;
    out_dir(&a.out)?;
    let file = a.out.join("model.tcnn");
    save_model(&model, &file)?;
    let losses = a.out.join("losses.csv");
    let mut text = String::from("epoch,train_loss,test_loss\n");
    for (i, (tr, te)) in model.meta.train_losses.iter().zip(&model.meta.test_losses).enumerate() {
        text.push_str(&format!("{},{tr},{te}\n", i + 1));
    }
    std::fs::write(&losses, text)?;
    a.opts.record(&mut m);
    m.param("planes", &a.planes).param("parameters", model.net.param_count());
    m.output(&file)?;
    m.output(&losses)?;
    m.write(&a.out)?;
    Ok(())
}

/// Writes `<stem>.csv`, per-variable series and an energy SVG.
fn write_report(report: &MetricReport, dir: &Path, stem: &str, m: &mut Manifest) -> CmdResult {
    let csv = dir.join(format!("{stem}.csv"));
    eval::emit_report(report, &csv, ReportFormat::Csv)?;
    m.output(&csv)?;
    for v in Variable::ALL {
        if report.all().is_some_and(|g| g.var(v).count > 0) {
            let f = dir.join(format!("{stem}_series_{}.csv", v.name()));
            std::fs::write(&f, report.series_csv(v))?;
            m.output(&f)?;
            let svg = dir.join(format!("{stem}_{}.svg", v.name()));
            std::fs::write(&svg, report.to_svg(v))?;
            m.output(&svg)?;
        }
    }
    Ok(())
}

fn print_summary(label: &str, r: &MetricReport) {
    let mut parts = Vec::new();
    for v in Variable::ALL {
        let x = r.mape(v);
        if x.is_finite() {
            parts.push(format!("{} MAPE {x:.2}%", v.name()));
        }
    }
    eprintln!("{label}: {}", parts.join(", "));
    if r.nonpositive > 0 {
        eprintln!("warning: {} samples with non-positive predicted power or speed", r.nonpositive);
    }
}

fn names_from(path: Option<&Path>, m: &mut Manifest) -> Result<BTreeMap<u8, String>, Failure> {
    Ok(class_names(&oracle_config(path, m)?))
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    let mut m = ctx.manifest("eval");
    let model = at(&a.model, load_model(&a.model))?;
    m.input(&a.model)?;
    let ds = at(&a.dataset, load_dataset(&a.dataset))?;
    m.input(&a.dataset)?;
    let names = names_from(a.config.as_deref(), &mut m)?;
    let report = eval::evaluate(&model, &ds, a.split, a.d)?.with_class_names(names);
    out_dir(&a.out)?;
    m.param("split", a.split.name()).param("d", a.d);
    write_report(&report, &a.out, "report", &mut m)?;
    m.write(&a.out)?;
    print_summary(a.split.name(), &report);
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> CmdResult {
    let mut m = ctx.manifest("ablate");
    let spec = AblationSpec::from_letters(&a.keep, a.noise_seed.unwrap_or(ctx.seed), a.force)?;
    let model = at(&a.model, load_model(&a.model))?;
    m.input(&a.model)?;
    let ds = at(&a.dataset, load_dataset(&a.dataset))?;
    m.input(&a.dataset)?;
    let names = names_from(a.config.as_deref(), &mut m)?;
    let report = eval::ablate_and_evaluate(&model, &ds, a.split, &spec, a.d)?.with_class_names(names);
    out_dir(&a.out)?;
    let letters = if spec.kept.is_empty() { "none".to_string() } else { spec.letters() };
    m.param("split", a.split.name()).param("keep", &letters).param("noise_seed", spec.noise_seed).param("d", a.d);
    write_report(&report, &a.out, &format!("ablation_{letters}"), &mut m)?;
    m.write(&a.out)?;
    print_summary(&format!("kept {{{letters}}}"), &report);
    Ok(())
}

fn cmd_baselines(ctx: &Ctx, a: &BaselinesArgs) -> CmdResult {
    let mut m = ctx.manifest("baselines");
    let ds = at(&a.dataset, load_dataset(&a.dataset))?;
    m.input(&a.dataset)?;
    let names = names_from(a.config.as_deref(), &mut m)?;
    out_dir(&a.out)?;
    let spec = ModelSpec::desk(ds.side);
    let cfg = a.opts.config(ctx.seed);
    a.opts.record(&mut m);
    m.param("split", a.split.name()).param("which", format!("{:?}", a.which)).param("d", a.d);
    let want = |k: BaselineKind| a.which == BaselineKind::All || a.which == k;
    if want(BaselineKind::HeightOnly) {
        let model = match eval::baseline_height_only(&ds, &spec, &cfg, Some(a.class)) {
            Err(Error::EmptyDataset) => {
                return Err(Failure { code: 4, message: format!("class {} has no training samples", a.class) })
            }
            r => r?,
        };
        let file = a.out.join(format!("height_only_class{}.tcnn", a.class));
        save_model(&model, &file)?;
        m.output(&file)?;
        let report = eval::evaluate(&model, &ds, a.split, a.d)?.with_class_names(names.clone());
        write_report(&report, &a.out, "height_only", &mut m)?;
        m.param("class", a.class);
        print_summary(&format!("height-only (class {})", a.class), &report);
    }
    if want(BaselineKind::Retrained) {
        let models = eval::baseline_height_only_per_class(&ds, &spec, &cfg)?;
        for (k, model) in &models {
            let file = a.out.join(format!("retrained_class{k}.tcnn"));
            save_model(model, &file)?;
            m.output(&file)?;
        }
        let report = eval::evaluate_per_class(&models, &ds, a.split, a.d)?.with_class_names(names.clone());
        write_report(&report, &a.out, "retrained", &mut m)?;
        print_summary("height-only per class", &report);
    }
    if want(BaselineKind::ExpectedTime) {
        let report = eval::baseline_expected_time(&ds, a.split, a.v_e, a.d)?.with_class_names(names);
        write_report(&report, &a.out, "expected_time", &mut m)?;
        m.param("v_e", a.v_e);
        print_summary("expected time", &report);
    }
    m.write(&a.out)?;
    Ok(())
}

fn predictor(p: &PredictorArgs, env: &Environment, m: &mut Manifest) -> Result<Box<dyn Predictor + Sync>, Failure> {
    match (&p.model, &p.oracle) {
        (Some(path), None) => {
            let model = at(path, load_model(path))?;
            m.input(path)?;
            Ok(Box::new(model))
        }
        (None, Some(path)) => {
            let cfg = oracle_config(Some(path), m)?;
            Ok(Box::new(OraclePredictor { cfg, num_classes: env.num_classes(), resolution: env.geo().resolution }))
        }
        _ => Err(usage("give exactly one of --model or --oracle")),
    }
}

fn cmd_path_cost(ctx: &Ctx, a: &PathCostArgs) -> CmdResult {
    let mut m = ctx.manifest("path-cost");
    let env = open_env(&a.env, &mut m)?;
    let pred = predictor(&a.predictor, &env, &mut m)?;
    let path: Polyline = at(&a.path, read_path_csv(&a.path))?;
    m.input(&a.path)?;
    let cost = cost::path_cost(&env, pred.as_ref(), &path, a.d)?;
    out_dir(&a.out)?;
    let file = a.out.join("path_cost.csv");
    std::fs::write(&file, cost.to_csv())?;
    m.param("d", a.d);
    m.output(&file)?;
    m.write(&a.out)?;
    eprintln!(
        "{} segments, {:.3} m costed of {:.3} m: T = {:.3} s, E = {:.3} J",
        cost.per_segment.len(),
        cost.covered_length,
        path.length(),
        cost.traversal_time,
        cost.energy
    );
    Ok(())
}

fn cmd_build_grid(ctx: &Ctx, a: &BuildGridArgs) -> CmdResult {
    let mut m = ctx.manifest("build-grid");
    let env = open_env(&a.env, &mut m)?;
    let pred = predictor(&a.predictor, &env, &mut m)?;
    let grid = cost::build_cost_grid(&env, pred.as_ref(), a.d)?;
    out_dir(&a.out)?;
    let (edges, meta) = (a.out.join("grid.csv"), a.out.join("grid.meta"));
    grid.save(&edges, &meta)?;
    m.param("d", a.d);
    m.output(&edges)?;
    m.output(&meta)?;
    m.write(&a.out)?;
    let present = grid.edges.iter().filter(|e| e.is_some()).count();
    eprintln!("{} x {} nodes, {present} edges", grid.rows, grid.cols);
    Ok(())
}

fn cmd_plan(ctx: &Ctx, a: &PlanArgs) -> CmdResult {
    let mut m = ctx.manifest("plan");
    let (edges, meta) = (a.grid.join("grid.csv"), a.grid.join("grid.meta"));
    let grid = at(&a.grid, CostGrid::load(&edges, &meta))?;
    m.input(&edges)?;
    m.input(&meta)?;
    let objective = match a.objective {
        ObjectiveArg::Time => Objective::Time,
        ObjectiveArg::Energy => Objective::Energy,
    };
    let route = cost::plan(&grid, a.start, a.goal, objective)?;
    out_dir(&a.out)?;
    let route_file = a.out.join("route.csv");
    let mut text = String::from("x,y\n");
    for &(x, y) in &route.points {
        text.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(&route_file, text)?;
    let cost_file = a.out.join("route_cost.csv");
    std::fs::write(&cost_file, route.cost.to_csv())?;
    m.param("start", format!("{},{}", a.start.0, a.start.1))
        .param("goal", format!("{},{}", a.goal.0, a.goal.1))
        .param("objective", format!("{:?}", a.objective).to_lowercase());
    m.output(&route_file)?;
    m.output(&cost_file)?;
    m.write(&a.out)?;
    eprintln!(
        "{} nodes, {:.3} m: T = {:.3} s, E = {:.3} J",
        route.nodes.len(),
        route.cost.covered_length,
        route.cost.traversal_time,
        route.cost.energy
    );
    Ok(())
}

fn cmd_report(ctx: &Ctx, a: &ReportArgs) -> CmdResult {
    let mut m = ctx.manifest("report");
    let mut text = String::from("run,group,variable,rmse,mape,count\n");
    for (label, path) in &a.inputs {
        let raw = std::fs::read_to_string(path).map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })?;
        let rows = at(path, eval::parse_report_csv(&raw))?;
        m.input(path)?;
        for r in rows {
            text.push_str(&format!("{label},{},{},{},{},{}\n", r.group, r.variable, r.rmse, r.mape, r.count));
        }
    }
    out_dir(&a.out)?;
    let file = a.out.join("summary.csv");
    std::fs::write(&file, text)?;
    m.output(&file)?;
    m.write(&a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_size("30x20").unwrap(), (30.0, 20.0));
        assert!(parse_size("30").is_err());
        assert!(parse_size("0x5").is_err());
        assert_eq!(parse_point("1.5, -2").unwrap(), (1.5, -2.0));
        assert!(parse_rect("0,0,10").is_err());
        assert!(parse_rect("5,0,1,1").is_err());
        assert_eq!(parse_labeled("full=a/b.csv").unwrap(), ("full".into(), PathBuf::from("a/b.csv")));
        assert!(parse_labeled("nolabel").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::from(Error::Format("x".into())).code, 3);
        assert_eq!(Failure::from(Error::InvalidArg("x".into())).code, 2);
        assert_eq!(Failure::from(Error::Unreachable).code, 4);
        assert_eq!(Failure::from(Error::NonTraversable(5)).code, 4);
    }
}
