//! Command-line front end. Every subcommand prints a TOML summary on stdout
//! and, with `--out-dir`, writes its artifacts plus `summary.toml` and a
//! `manifest.json` that `replay` can re-execute.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frap::{self, FitOptions, FrapProtocol, ModelTemplate, RecoveryCurve};
use crate::geometry::{self, FilamentSegment, Grid, LengthDist, Rect, Vec2};
use crate::model::ModelSpec;
use crate::pde::{self, AdvectionMode, DtPolicy, Reaction, SolverConfig, StateFields};
use crate::renewal::{self, CycleOptions};
use crate::spatial::{self, RhoProfile, SpatialOptions};
use crate::spectral;

pub const MANIFEST_SCHEMA: &str = "intracell.manifest/1";
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("INTRACELL_GIT_HASH"));

#[derive(Debug, Parser)]
#[command(name = "intracell", version = VERSION, about = "Effective transport of state-switching cargo")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunOpts {
    /// Directory for artifacts, summary.toml and manifest.json.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "INTRACELL_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Stationary distribution and effective velocity/diffusivity.
    Effective(EffectiveArgs),
    /// Principal eigenvalue of the Fourier-transformed operator on a ν grid.
    Dispersion(DispersionArgs),
    /// Renewal-reward Monte Carlo estimate of the effective transport.
    Simulate(SimulateArgs),
    /// Generate a filament network and rasterize it.
    Network(NetworkArgs),
    /// Solve the 2-D transport PDE from a point release.
    Pde(PdeArgs),
    /// Effective transport under a 1-D availability profile.
    SpatialEffective(SpatialArgs),
    /// Synthesize a FRAP recovery curve.
    FrapSynth(FrapSynthArgs),
    /// Grid sweep of the FRAP objective with flat-valley diagnostics.
    FrapSweep(FrapSweepArgs),
    /// Sweep then multistart fit of FRAP data.
    FrapFit(FrapFitArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EffectiveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DispersionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub nu_max: f64,
    #[arg(long, default_value_t = 41)]
    pub points: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub cycles: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace exponential sojourns by gamma laws of this shape.
    #[arg(long)]
    pub gamma_shape: Option<f64>,
    /// Regeneration state (default: most occupied).
    #[arg(long)]
    pub base_state: Option<usize>,
    /// Bootstrap replicates for the standard errors (0 = delta method).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: u64,
    #[arg(long, default_value_t = renewal::DEFAULT_STEP_CAP)]
    pub step_cap: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Parallel,
    Radial,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NetworkArgs {
    #[arg(long, value_enum)]
    pub kind: NetworkKind,
    #[arg(long, default_value_t = 20.0)]
    pub width: f64,
    #[arg(long, default_value_t = 20.0)]
    pub height: f64,
    #[arg(long, default_value_t = 40)]
    pub nx: usize,
    #[arg(long, default_value_t = 40)]
    pub ny: usize,
    #[arg(long, default_value_t = 50)]
    pub filaments: usize,
    /// Probability that a parallel filament points its plus end down.
    #[arg(long, default_value_t = 0.5)]
    pub p_plus_down: f64,
    /// Von Mises concentration of radial filament angles about the outward
    /// ray (default: straight rays).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Radial origin as `x,y` (default: domain center).
    #[arg(long)]
    pub origin: Option<String>,
    /// `span`, `fixed:L`, `uniform:A:B` or `exp:MEAN` (default: span for
    /// parallel, fixed at half the smaller side for radial).
    #[arg(long)]
    pub length: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PdeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub nx: usize,
    #[arg(long, default_value_t = 200)]
    pub ny: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dx: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dy: f64,
    #[arg(long, default_value_t = 5.0)]
    pub t_end: f64,
    /// `auto` or a fixed step.
    #[arg(long, default_value = "auto")]
    pub dt: String,
    #[arg(long, default_value_t = pde::DEFAULT_SAFETY)]
    pub safety: f64,
    /// Release cell as `i,j` (default: grid center).
    #[arg(long)]
    pub release: Option<String>,
    /// Filament segments CSV; switches to network-steered advection.
    #[arg(long)]
    pub segments: Option<PathBuf>,
    /// Binding states for the network rate field (default: moving states).
    #[arg(long, value_delimiter = ',')]
    pub binding: Option<Vec<usize>>,
    /// Times at which to dump the summed field.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Vec<f64>,
    #[arg(long)]
    pub strang: bool,
    #[arg(long, default_value_t = 1)]
    pub moment_stride: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SpatialArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Availability table with header `x,rho` on `[0, 1]`.
    #[arg(long)]
    pub rho: PathBuf,
    #[arg(long, default_value_t = spatial::DEFAULT_POINTS)]
    pub points: usize,
    #[arg(long, value_delimiter = ',')]
    pub binding: Option<Vec<usize>>,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FrapSynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub protocol: PathBuf,
    /// Relative Gaussian noise level.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FrapSweepArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    /// Recovery curve CSV (`time_s,intensity[,weight]`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "two-state")]
    pub template: String,
    /// Log-spaced axes, e.g. `d=0.1:10:5,c=0.1:2:5,...`.
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = frap::FLAT_REL_TOL)]
    pub flat_rel_tol: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FrapFitArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "two-state")]
    pub template: String,
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = frap::FLAT_REL_TOL)]
    pub flat_rel_tol: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: String,
    pub command: Command,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Files written to the output directory, relative to it.
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
}

/// Collects artifact files under the output directory, if any.
struct Sink {
    dir: Option<PathBuf>,
    names: Vec<String>,
}

impl Sink {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self { dir, names: Vec::new() })
    }

    fn emit(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(d) = &self.dir {
            write(&d.join(name))?;
            self.names.push(name.to_string());
        }
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        self.emit(name, |p| fs::write(p, body).map_err(|e| Error::io(p, e)))
    }
}

fn csv_err(path: &Path, e: impl ToString) -> Error {
    Error::parse(path, e.to_string())
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn absolute(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
    Ok(())
}

impl Command {
    fn run_opts(&self) -> RunOpts {
        match self {
            Command::Effective(a) => a.run.clone(),
            Command::Dispersion(a) => a.run.clone(),
            Command::Simulate(a) => a.run.clone(),
            Command::Network(a) => a.run.clone(),
            Command::Pde(a) => a.run.clone(),
            Command::SpatialEffective(a) => a.run.clone(),
            Command::FrapSynth(a) => a.run.clone(),
            Command::FrapSweep(a) => a.run.clone(),
            Command::FrapFit(a) => a.run.clone(),
            Command::Replay(a) => a.run.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Effective(_) => "effective",
            Command::Dispersion(_) => "dispersion",
            Command::Simulate(_) => "simulate",
            Command::Network(_) => "network",
            Command::Pde(_) => "pde",
            Command::SpatialEffective(_) => "spatial-effective",
            Command::FrapSynth(_) => "frap-synth",
            Command::FrapSweep(_) => "frap-sweep",
            Command::FrapFit(_) => "frap-fit",
            Command::Replay(_) => "replay",
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Simulate(a) => Some(a.seed),
            Command::Network(a) => Some(a.seed),
            Command::FrapSynth(a) => Some(a.seed),
            _ => None,
        }
    }

    /// Makes every input path absolute so the manifest replays from anywhere.
    fn resolve_paths(&mut self) -> Result<()> {
        match self {
            Command::Effective(a) => absolute(&mut a.model),
            Command::Dispersion(a) => absolute(&mut a.model),
            Command::Simulate(a) => absolute(&mut a.model),
            Command::Network(_) | Command::Replay(_) => Ok(()),
            Command::Pde(a) => {
                absolute(&mut a.model)?;
                a.segments.as_mut().map_or(Ok(()), absolute)
            }
            Command::SpatialEffective(a) => {
                absolute(&mut a.model)?;
                absolute(&mut a.rho)
            }
            Command::FrapSynth(a) => {
                absolute(&mut a.model)?;
                absolute(&mut a.protocol)
            }
            Command::FrapSweep(a) => {
                absolute(&mut a.protocol)?;
                absolute(&mut a.data)
            }
            Command::FrapFit(a) => {
                absolute(&mut a.protocol)?;
                absolute(&mut a.data)
            }
        }
    }
}

/// Parses the command line, runs it and returns the stdout summary.
pub fn run(cli: Cli) -> Result<String> {
    let (mut command, opts) = match cli.command {
        Command::Replay(r) => {
            let text = fs::read_to_string(&r.manifest).map_err(|e| Error::io(&r.manifest, e))?;
            let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&r.manifest, e))?;
            (m.command, r.run)
        }
        other => {
            let opts = other.run_opts();
            (other, opts)
        }
    };
    command.resolve_paths()?;
    if let Some(n) = opts.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        // A pool may already exist when `run` is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let started = Instant::now();
    let mut sink = Sink::new(opts.out_dir.clone())?;
    let summary = execute(&command, &mut sink)?;
    sink.text("summary.toml", &summary)?;
    if let Some(dir) = &sink.dir {
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA.into(),
            version: VERSION.into(),
            seed: command.seed(),
            command,
            threads: rayon::current_num_threads(),
            artifacts: sink.names.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&path, e))?;
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{body}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

fn to_toml<T: Serialize>(summary: &T) -> Result<String> {
    toml::to_string(summary).map_err(|e| Error::InvalidArgument(format!("summary serialization: {e}")))
}

fn execute(command: &Command, sink: &mut Sink) -> Result<String> {
    match command {
        Command::Effective(a) => effective(a),
        Command::Dispersion(a) => dispersion(a, sink),
        Command::Simulate(a) => simulate(a, sink),
        Command::Network(a) => network(a, sink),
        Command::Pde(a) => pde_run(a, sink),
        Command::SpatialEffective(a) => spatial_effective(a, sink),
        Command::FrapSynth(a) => frap_synth(a, sink),
        Command::FrapSweep(a) => frap_sweep(a, sink),
        Command::FrapFit(a) => frap_fit(a, sink),
        Command::Replay(_) => Err(Error::InvalidArgument("a manifest cannot record a replay".into())),
    }
}

#[derive(Serialize)]
struct EffectiveSummary {
    schema: &'static str,
    states: Vec<String>,
    stationary: Vec<f64>,
    v_eff: f64,
    sigma_eff: f64,
    projection_velocity: f64,
}

fn effective(a: &EffectiveArgs) -> Result<String> {
    let model = ModelSpec::from_file(&a.model)?;
    let eff = spectral::effective_transport(&model)?;
    to_toml(&EffectiveSummary {
        schema: "intracell.effective/1",
        states: model.labels().to_vec(),
        stationary: model.stationary_distribution()?.pi,
        v_eff: eff.v_eff,
        sigma_eff: eff.sigma_eff,
        projection_velocity: spectral::projection_velocity(&model)?,
    })
}

#[derive(Serialize)]
struct DispersionRow {
    nu: f64,
    lambda: f64,
    separation: f64,
    branch_crossing: bool,
}

#[derive(Serialize)]
struct DispersionSummary {
    schema: &'static str,
    v_eff: f64,
    sigma_eff: f64,
    branch_crossings: usize,
    points: Vec<DispersionRow>,
}

fn dispersion(a: &DispersionArgs, sink: &mut Sink) -> Result<String> {
    if a.points < 2 || !(a.nu_max > 0.0) {
        return Err(Error::InvalidArgument("need --points >= 2 and --nu-max > 0".into()));
    }
    let model = ModelSpec::from_file(&a.model)?;
    let eff = spectral::effective_transport(&model)?;
    let rows = (0..a.points)
        .map(|k| {
            let nu = -a.nu_max + 2.0 * a.nu_max * k as f64 / (a.points - 1) as f64;
            spectral::dispersion_eigenvalue(&model, nu).map(|p| DispersionRow {
                nu: p.nu,
                lambda: p.lambda,
                separation: p.separation,
                branch_crossing: p.branch_crossing,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sink.emit("dispersion.csv", |p| write_rows(p, &rows))?;
    to_toml(&DispersionSummary {
        schema: "intracell.dispersion/1",
        v_eff: eff.v_eff,
        sigma_eff: eff.sigma_eff,
        branch_crossings: rows.iter().filter(|r| r.branch_crossing).count(),
        points: rows,
    })
}

#[derive(Serialize)]
struct SimulateSummary {
    schema: &'static str,
    cycles: u64,
    seed: u64,
    base_state: usize,
    v_eff: f64,
    sigma_eff: f64,
    v_eff_se: f64,
    sigma_eff_se: f64,
    se_method: &'static str,
    mean_cycle_time: f64,
    mean_cycle_steps: f64,
    degenerate_time_variance: bool,
    spectral_v_eff: f64,
    spectral_sigma_eff: f64,
    z_v: f64,
    z_sigma: f64,
}

fn simulate(a: &SimulateArgs, sink: &mut Sink) -> Result<String> {
    let model = ModelSpec::from_file(&a.model)?;
    let mut sojourn = renewal::sojourn_from_model(&model, a.base_state)?;
    if let Some(shape) = a.gamma_shape {
        sojourn = sojourn.with_gamma_shape(shape)?;
    }
    let samples = renewal::simulate_cycles(&sojourn, &model, a.cycles, a.seed, CycleOptions { step_cap: a.step_cap })?;
    let est = renewal::estimate_effective(&samples)?;
    let (v_se, s_se, se_method) = if a.bootstrap > 0 {
        let (v, s) = renewal::bootstrap_se(&samples, a.bootstrap, a.seed)?;
        (v, s, "bootstrap")
    } else {
        (est.v_eff_se, est.sigma_eff_se, "delta")
    };
    sink.emit("cycles.csv", |p| write_rows(p, &samples))?;
    // Gamma sojourns change the diffusivity, so the spectral values only
    // serve as a reference for the exponential case.
    let reference = spectral::effective_transport(&model)?;
    let z = |x: f64, y: f64, se: f64| if se > 0.0 { (x - y) / se } else { 0.0 };
    to_toml(&SimulateSummary {
        schema: "intracell.simulate/1",
        cycles: a.cycles,
        seed: a.seed,
        base_state: sojourn.base_state(),
        v_eff: est.v_eff,
        sigma_eff: est.sigma_eff,
        v_eff_se: v_se,
        sigma_eff_se: s_se,
        se_method,
        mean_cycle_time: est.moments.mean_dt,
        mean_cycle_steps: est.moments.mean_steps,
        degenerate_time_variance: est.degenerate_time_variance,
        spectral_v_eff: reference.v_eff,
        spectral_sigma_eff: reference.sigma_eff,
        z_v: z(est.v_eff, reference.v_eff, v_se),
        z_sigma: z(est.sigma_eff, reference.sigma_eff, s_se),
    })
}

fn parse_length(s: &str) -> Result<LengthDist> {
    let bad = || Error::InvalidArgument(format!("bad length distribution '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |k: usize| parts.get(k).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(bad);
    let dist = match (parts[0], parts.len()) {
        ("span", 1) => LengthDist::SpanDomain,
        ("fixed", 2) => LengthDist::Fixed { length: num(1)? },
        ("uniform", 3) => LengthDist::Uniform { min: num(1)?, max: num(2)? },
        ("exp", 2) => LengthDist::Exponential { mean: num(1)? },
        _ => return Err(bad()),
    };
    let ok = match dist {
        LengthDist::Fixed { length } => length > 0.0,
        LengthDist::Uniform { min, max } => min > 0.0 && max >= min,
        LengthDist::Exponential { mean } => mean > 0.0,
        LengthDist::SpanDomain => true,
    };
    if ok { Ok(dist) } else { Err(bad()) }
}

fn parse_pair<T: std::str::FromStr>(s: &str, what: &str) -> Result<(T, T)> {
    let bad = || Error::InvalidArgument(format!("bad {what} '{s}', expected two comma-separated values"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

#[derive(Serialize)]
struct CellRow {
    i: usize,
    j: usize,
    density: f64,
    rho: f64,
    dir_x: f64,
    dir_y: f64,
    coherence: f64,
    mixed_polarity: bool,
}

#[derive(Serialize)]
struct NetworkSummary {
    schema: &'static str,
    kind: NetworkKind,
    filaments: usize,
    seed: u64,
    total_length: f64,
    rasterized_length: f64,
    occupied_cells: usize,
    mixed_polarity_cells: usize,
    mean_coherence: f64,
}

fn network(a: &NetworkArgs, sink: &mut Sink) -> Result<String> {
    if a.nx == 0 || a.ny == 0 || !(a.width > 0.0 && a.height > 0.0) {
        return Err(Error::InvalidArgument("domain needs positive size and cell counts".into()));
    }
    let domain = Rect::new(0.0, 0.0, a.width, a.height);
    let segments: Vec<FilamentSegment> = match a.kind {
        NetworkKind::Parallel => {
            let len = parse_length(a.length.as_deref().unwrap_or("span"))?;
            geometry::parallel_network(domain, a.filaments, a.p_plus_down, len, a.seed)?
        }
        NetworkKind::Radial => {
            let origin = match &a.origin {
                Some(s) => {
                    let (x, y) = parse_pair::<f64>(s, "origin")?;
                    Vec2::new(x, y)
                }
                None => Vec2::new(0.5 * a.width, 0.5 * a.height),
            };
            let len = match &a.length {
                Some(s) => parse_length(s)?,
                None => LengthDist::Fixed { length: 0.5 * a.width.min(a.height) },
            };
            geometry::radial_network(domain, origin, a.filaments, a.kappa.unwrap_or(f64::INFINITY), len, a.seed)?
        }
    };
    let grid = Grid::covering(domain, a.nx, a.ny);
    let field = geometry::rasterize(&segments, grid)?;
    sink.emit("segments.csv", |p| geometry::write_segments_csv(p, &segments))?;
    sink.emit("density.txt", |p| geometry::write_field_dump(p, &grid, &field.density))?;
    sink.emit("rho.txt", |p| geometry::write_field_dump(p, &grid, &field.rho))?;
    let rows: Vec<CellRow> = (0..grid.ny)
        .flat_map(|j| (0..grid.nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let c = grid.index(i, j);
            CellRow {
                i,
                j,
                density: field.density[c],
                rho: field.rho[c],
                dir_x: field.direction[c].x,
                dir_y: field.direction[c].y,
                coherence: field.coherence[c],
                mixed_polarity: field.mixed_polarity[c],
            }
        })
        .collect();
    sink.emit("cells.csv", |p| write_rows(p, &rows))?;
    let occupied: Vec<usize> = (0..grid.n_cells()).filter(|&c| field.density[c] > 0.0).collect();
    let mean_coherence = if occupied.is_empty() {
        0.0
    } else {
        occupied.iter().map(|&c| field.coherence[c]).sum::<f64>() / occupied.len() as f64
    };
    to_toml(&NetworkSummary {
        schema: "intracell.network/1",
        kind: a.kind,
        filaments: segments.len(),
        seed: a.seed,
        total_length: segments.iter().map(FilamentSegment::length).sum(),
        rasterized_length: field.total_length(),
        occupied_cells: occupied.len(),
        mixed_polarity_cells: field.mixed_polarity.iter().filter(|&&m| m).count(),
        mean_coherence,
    })
}

#[derive(Serialize)]
struct PdeSummary {
    schema: &'static str,
    mode: &'static str,
    dt: f64,
    steps: usize,
    t_end: f64,
    initial_mass: f64,
    final_mass: f64,
    mass_drift_rate: f64,
    final_mean_y: f64,
    final_var_y: f64,
    /// Least-squares slopes over the second half of the run.
    mean_y_slope: f64,
    var_y_slope: f64,
    spectral_v_eff: f64,
    spectral_sigma_eff: f64,
    snapshots: Vec<String>,
}

fn pde_run(a: &PdeArgs, sink: &mut Sink) -> Result<String> {
    let model = ModelSpec::from_file(&a.model)?;
    if a.nx == 0 || a.ny == 0 {
        return Err(Error::InvalidArgument("grid needs positive cell counts".into()));
    }
    let grid = Grid::new(a.nx, a.ny, a.dx, a.dy);
    let dt = match a.dt.trim() {
        "auto" => DtPolicy::Auto,
        s => DtPolicy::Fixed(s.parse().map_err(|_| Error::InvalidArgument(format!("bad --dt '{s}'")))?),
    };
    let (advection, reaction, mode) = match &a.segments {
        None => (AdvectionMode::Axis, Reaction::Uniform, "axis"),
        Some(path) => {
            let segs = geometry::read_segments_csv(path)?;
            let field = geometry::rasterize(&segs, grid)?;
            let opts = SpatialOptions { binding_states: a.binding.clone(), ..SpatialOptions::default() };
            let rates = geometry::spatial_rates(&model, &field, &opts.binding(&model)?)?;
            (AdvectionMode::Network(field), Reaction::Field(rates), "network")
        }
    };
    let (i, j) = match &a.release {
        Some(s) => parse_pair::<usize>(s, "release cell")?,
        None => (a.nx / 2, a.ny / 2),
    };
    if i >= a.nx || j >= a.ny {
        return Err(Error::InvalidArgument(format!("release cell ({i}, {j}) outside the grid")));
    }
    let pi = model.stationary_distribution()?.pi;
    let mut initial = StateFields::zeros(grid, model.n_states());
    for (s, p) in pi.iter().enumerate() {
        initial.values[s][grid.index(i, j)] = p / grid.cell_area();
    }
    let config = SolverConfig {
        dt,
        t_end: a.t_end,
        snapshot_times: a.snapshots.clone(),
        advection,
        safety: a.safety,
        strang: a.strang,
        moment_stride: a.moment_stride,
        ..SolverConfig::default()
    };
    let initial_mass = initial.mass();
    let out = pde::run(initial, &model, &reaction, &config)?;
    sink.emit("moments.csv", |p| write_rows(p, &out.series))?;
    let mut snaps = Vec::new();
    for (k, s) in out.snapshots.iter().enumerate() {
        let name = format!("snapshot_{k:03}.txt");
        sink.emit(&name, |p| geometry::write_field_dump(p, &grid, &s.total()))?;
        snaps.push(name);
    }
    sink.emit("final.txt", |p| geometry::write_field_dump(p, &grid, &out.final_fields.total()))?;
    let fin = pde::moments(&out.final_fields)?;
    let (ms, vs) = out.moment_slopes(0.5 * a.t_end);
    let eff = spectral::effective_transport(&model)?;
    to_toml(&PdeSummary {
        schema: "intracell.pde/1",
        mode,
        dt: out.dt,
        steps: out.steps,
        t_end: out.final_fields.t,
        initial_mass,
        final_mass: fin.mass,
        mass_drift_rate: out.mass_drift_rate(),
        final_mean_y: fin.mean_y,
        final_var_y: fin.var_y,
        mean_y_slope: ms,
        var_y_slope: vs,
        spectral_v_eff: eff.v_eff,
        spectral_sigma_eff: eff.sigma_eff,
        snapshots: snaps,
    })
}

#[derive(Serialize)]
struct SpatialSummary {
    schema: &'static str,
    points: usize,
    binding_states: Vec<usize>,
    rho_mean: f64,
    v_eff: f64,
    sigma_eff: f64,
    homogeneous_v_eff: f64,
    homogeneous_sigma_eff: f64,
    sigma_enhancement: f64,
    adjoint_defect: f64,
}

fn spatial_effective(a: &SpatialArgs, sink: &mut Sink) -> Result<String> {
    let model = ModelSpec::from_file(&a.model)?;
    let rho = RhoProfile::from_csv(&a.rho)?;
    let opts = SpatialOptions { points: a.points, binding_states: a.binding.clone() };
    let sol = spatial::spatial_solution(&model, &rho, &opts)?;
    let homog = spectral::effective_transport(&spatial::mean_rate_model(&model, &rho, &opts)?)?;
    let prof = &sol.profile;
    sink.emit("profile.csv", |p| {
        let mut w = csv::Writer::from_path(p).map_err(|e| csv_err(p, e))?;
        let mut header = vec!["x".to_string()];
        header.extend(model.labels().iter().map(|l| format!("u0_{l}")));
        if prof.w0.is_some() {
            header.extend(model.labels().iter().map(|l| format!("w0_{l}")));
        }
        w.write_record(&header).map_err(|e| csv_err(p, e))?;
        for (k, x) in prof.x.iter().enumerate() {
            let mut row = vec![format!("{x:e}")];
            row.extend(prof.u0[k].iter().map(|v| format!("{v:e}")));
            if let Some(w0) = &prof.w0 {
                row.extend(w0[k].iter().map(|v| format!("{v:e}")));
            }
            w.write_record(&row).map_err(|e| csv_err(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    to_toml(&SpatialSummary {
        schema: "intracell.spatial-effective/1",
        points: a.points,
        binding_states: opts.binding(&model)?,
        rho_mean: rho.mean(),
        v_eff: sol.transport.v_eff,
        sigma_eff: sol.transport.sigma_eff,
        homogeneous_v_eff: homog.v_eff,
        homogeneous_sigma_eff: homog.sigma_eff,
        sigma_enhancement: sol.transport.sigma_eff - homog.sigma_eff,
        adjoint_defect: spatial::adjoint_defect(&model, &rho, &opts)?,
    })
}

#[derive(Serialize)]
struct SynthSummary {
    schema: &'static str,
    noise: f64,
    seed: u64,
    times: Vec<f64>,
    intensity: Vec<f64>,
}

fn frap_synth(a: &FrapSynthArgs, sink: &mut Sink) -> Result<String> {
    let model = ModelSpec::from_file(&a.model)?;
    let protocol = FrapProtocol::from_file(&a.protocol)?;
    if !(a.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {} must be non-negative", a.noise)));
    }
    let clean = frap::synthesize(&model, &protocol)?;
    let curve = if a.noise > 0.0 { clean.with_noise(a.noise, a.seed) } else { clean };
    sink.emit("recovery.csv", |p| curve.write_csv(p))?;
    to_toml(&SynthSummary {
        schema: "intracell.frap-synth/1",
        noise: a.noise,
        seed: a.seed,
        times: curve.times,
        intensity: curve.intensity,
    })
}

#[derive(Serialize)]
struct ProfileSummary {
    name: String,
    values: Vec<f64>,
    minima: Vec<f64>,
    flat: bool,
}

#[derive(Serialize)]
struct SweepSummary {
    schema: &'static str,
    template: String,
    names: Vec<String>,
    evaluated: usize,
    failed: usize,
    best_params: Vec<f64>,
    best_objective: f64,
    flat_parameters: Vec<String>,
    profiles: Vec<ProfileSummary>,
}

fn profiles(table: &frap::SweepTable, rel_tol: f64) -> Vec<ProfileSummary> {
    frap::flat_valleys(table, rel_tol, frap::FLAT_ABS_TOL)
        .into_iter()
        .map(|p| ProfileSummary { name: p.name, values: p.values, minima: p.minima, flat: p.flat })
        .collect()
}

fn frap_sweep(a: &FrapSweepArgs, sink: &mut Sink) -> Result<String> {
    let template: ModelTemplate = a.template.parse()?;
    let protocol = FrapProtocol::from_file(&a.protocol)?;
    let data = RecoveryCurve::from_csv(&a.data)?;
    let axes = frap::parse_grid(&a.grid, template)?;
    let table = frap::sweep(&data, &protocol, template, &axes)?;
    sink.emit("sweep.csv", |p| table.write_csv(p))?;
    let best = table.best().filter(|r| r.objective.is_finite()).ok_or_else(|| {
        let reasons = table.rows.iter().filter_map(|r| r.error.clone()).take(5).collect();
        Error::AllStartsFailed(reasons)
    })?;
    let profiles = profiles(&table, a.flat_rel_tol);
    to_toml(&SweepSummary {
        schema: "intracell.frap-sweep/1",
        template: a.template.clone(),
        names: table.names.clone(),
        evaluated: table.rows.len(),
        failed: table.rows.iter().filter(|r| !r.objective.is_finite()).count(),
        best_params: best.params.clone(),
        best_objective: best.objective,
        flat_parameters: profiles.iter().filter(|p| p.flat).map(|p| p.name.clone()).collect(),
        profiles,
    })
}

#[derive(Serialize)]
struct OptimumRow {
    rank: usize,
    objective: f64,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    params: String,
    start: String,
}

#[derive(Serialize)]
struct RunSummary {
    state: String,
    exit_rate: f64,
    run_time: f64,
    run_length: f64,
}

#[derive(Serialize)]
struct FitSummary {
    schema: &'static str,
    template: String,
    names: Vec<String>,
    params: Vec<f64>,
    objective: f64,
    bounds: [f64; 2],
    distinct_optima: usize,
    v_eff: f64,
    sigma_eff: f64,
    flat_parameters: Vec<String>,
    runs: Vec<RunSummary>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn frap_fit(a: &FrapFitArgs, sink: &mut Sink) -> Result<String> {
    let template: ModelTemplate = a.template.parse()?;
    let protocol = FrapProtocol::from_file(&a.protocol)?;
    let data = RecoveryCurve::from_csv(&a.data)?;
    let axes = frap::parse_grid(&a.grid, template)?;
    let opts = FitOptions { starts: a.starts, max_iter: a.max_iter, ..FitOptions::default() };
    let result = frap::sweep_and_fit(&data, &protocol, template, &axes, &opts)?;
    let flat: Vec<String> = result
        .sweep
        .as_ref()
        .map(|t| profiles(t, a.flat_rel_tol).into_iter().filter(|p| p.flat).map(|p| p.name).collect())
        .unwrap_or_default();
    if let Some(table) = &result.sweep {
        sink.emit("sweep.csv", |p| table.write_csv(p))?;
    }
    let rows: Vec<OptimumRow> = result
        .optima
        .iter()
        .enumerate()
        .map(|(k, o)| OptimumRow {
            rank: k,
            objective: o.objective,
            iterations: o.iterations,
            evaluations: o.evaluations,
            converged: o.converged,
            params: join(&o.params),
            start: join(&o.start),
        })
        .collect();
    sink.emit("optima.csv", |p| write_rows(p, &rows))?;
    let best_model = template.build(&result.params)?;
    let fitted = frap::synthesize(&best_model, &protocol.with_times(data.times.clone()))?;
    sink.emit("fitted.csv", |p| fitted.write_csv(p))?;
    to_toml(&FitSummary {
        schema: "intracell.frap-fit/1",
        template: a.template.clone(),
        names: result.names.clone(),
        params: result.params.clone(),
        objective: result.objective,
        bounds: [result.bounds.0, result.bounds.1],
        distinct_optima: result.optima.len(),
        v_eff: result.derived.v_eff,
        sigma_eff: result.derived.sigma_eff,
        flat_parameters: flat,
        runs: result
            .derived
            .runs
            .iter()
            .map(|r| RunSummary {
                state: r.label.clone(),
                exit_rate: r.exit_rate,
                run_time: r.run_time,
                run_length: r.run_length,
            })
            .collect(),
    })
}
