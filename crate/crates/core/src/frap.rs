//! Photobleaching recovery: synthetic curves from PDE runs and parameter
//! estimation by sweep plus multistart simplex descent.
//!
//! The recovery signal is the total concentration integrated over the
//! bleach spot, divided by the same integral before bleaching.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::model::ModelSpec;
use crate::optim::{multistart, NelderMeadOptions};
use crate::pde::{AdvectionMode, DtPolicy, Reaction, Solver, SolverConfig, StateFields};
use crate::rng::stream;
use crate::spectral::effective_transport;

pub const DEFAULT_SUPERSAMPLE: usize = 8;
pub const DEFAULT_MAX_STEPS: usize = 200_000;
pub const PARAM_LOWER: f64 = 1e-4;
pub const PARAM_UPPER: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Remaining fraction of fluorescence right after bleaching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bleach {
    /// A fraction `depth` is removed uniformly inside the spot.
    Uniform { depth: f64 },
    /// Remaining intensity sampled against distance from the spot center,
    /// interpolated linearly and held at the last sample out to the spot edge.
    Radial { radius: Vec<f64>, intensity: Vec<f64> },
}

impl Bleach {
    fn remaining(&self, r: f64) -> f64 {
        match self {
            Bleach::Uniform { depth } => 1.0 - depth,
            Bleach::Radial { radius, intensity } => {
                let k = radius.partition_point(|&s| s <= r);
                if k == 0 {
                    intensity[0]
                } else if k == radius.len() {
                    intensity[k - 1]
                } else {
                    let s = (r - radius[k - 1]) / (radius[k] - radius[k - 1]);
                    intensity[k - 1] + s * (intensity[k] - intensity[k - 1])
                }
            }
        }
    }

    /// Reads a postbleach profile CSV with header `radius,intensity`.
    pub fn radial_from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let (mut radius, mut intensity) = (Vec::new(), Vec::new());
        for (k, rec) in rdr.deserialize::<(f64, f64)>().enumerate() {
            let (r, i) = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", k + 2)))?;
            radius.push(r);
            intensity.push(i);
        }
        Ok(Bleach::Radial { radius, intensity })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrapSolverOptions {
    pub safety: f64,
    /// Runs needing more steps than this fail instead of grinding.
    pub max_steps: usize,
    /// Sub-samples per cell edge for spot coverage.
    pub supersample: usize,
}

impl Default for FrapSolverOptions {
    fn default() -> Self {
        Self { safety: crate::pde::DEFAULT_SAFETY, max_steps: DEFAULT_MAX_STEPS, supersample: DEFAULT_SUPERSAMPLE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrapProtocol {
    pub grid: Grid,
    pub spot: Spot,
    pub bleach: Bleach,
    pub times: Vec<f64>,
    pub solver: FrapSolverOptions,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolFile {
    domain: DomainSection,
    spot: Spot,
    bleach: BleachSection,
    observation: ObservationSection,
    #[serde(default)]
    solver: FrapSolverOptions,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSection {
    width: f64,
    height: f64,
    nx: usize,
    ny: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BleachSection {
    depth: Option<f64>,
    profile: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationSection {
    times: Option<Vec<f64>>,
    t_end: Option<f64>,
    count: Option<usize>,
}

/// Per-cell spot coverage and postbleach factor.
struct SpotMask {
    cells: Vec<(usize, f64)>,
    factor: Vec<f64>,
    prebleach: f64,
}

impl FrapProtocol {
    /// Parses a protocol file; a relative profile path resolves against the
    /// protocol's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Io { .. } | Error::Parse { .. } => e,
            other => Error::parse(path, other.to_string()),
        })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let f: ProtocolFile = toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let d = &f.domain;
        if d.nx == 0 || d.ny == 0 {
            return Err(Error::InvalidArgument("domain needs at least one cell".into()));
        }
        let grid = Grid::new(d.nx, d.ny, d.width / d.nx as f64, d.height / d.ny as f64);
        let bleach = match (&f.bleach.depth, &f.bleach.profile) {
            (Some(depth), None) => Bleach::Uniform { depth: *depth },
            (None, Some(p)) => Bleach::radial_from_csv(&base_dir.join(p))?,
            _ => return Err(Error::InvalidArgument("bleach needs exactly one of `depth` or `profile`".into())),
        };
        let times = match (&f.observation.times, f.observation.t_end, f.observation.count) {
            (Some(t), None, None) => t.clone(),
            (None, Some(t_end), Some(n)) if n > 0 => (1..=n).map(|k| t_end * k as f64 / n as f64).collect(),
            _ => return Err(Error::InvalidArgument("observation needs `times` or both `t_end` and `count`".into())),
        };
        let p = FrapProtocol { grid, spot: f.spot, bleach, times, solver: f.solver };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.check()?;
        let b = self.grid.bounds();
        let s = self.spot;
        if !(s.radius > 0.0) || s.x - s.radius < b.x0 || s.x + s.radius > b.x1 || s.y - s.radius < b.y0 || s.y + s.radius > b.y1 {
            return Err(Error::InvalidArgument(format!("bleach spot {s:?} not inside the domain")));
        }
        match &self.bleach {
            Bleach::Uniform { depth } => {
                if !(0.0..1.0).contains(depth) {
                    return Err(Error::InvalidArgument(format!("bleach depth {depth} outside [0, 1)")));
                }
            }
            Bleach::Radial { radius, intensity } => {
                if radius.is_empty() || radius.len() != intensity.len() {
                    return Err(Error::InvalidArgument("postbleach profile needs matching, nonempty columns".into()));
                }
                if radius.windows(2).any(|w| !(w[1] > w[0])) || intensity.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidArgument(
                        "postbleach profile needs increasing radii and nonnegative intensities".into(),
                    ));
                }
            }
        }
        if self.times.is_empty() || self.times[0] < 0.0 || self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("observation times must be nonnegative and strictly increasing".into()));
        }
        if self.solver.supersample == 0 {
            return Err(Error::InvalidArgument("supersample must be positive".into()));
        }
        Ok(())
    }

    pub fn with_times(&self, times: Vec<f64>) -> Self {
        Self { times, ..self.clone() }
    }

    fn mask(&self) -> SpotMask {
        let g = self.grid;
        let s = self.spot;
        let ss = self.solver.supersample;
        let mut factor = vec![1.0; g.n_cells()];
        let mut cells = Vec::new();
        let (x0, y0) = (g.x0, g.y0);
        let i_lo = (((s.x - s.radius - x0) / g.dx).floor().max(0.0) as usize).min(g.nx - 1);
        let i_hi = (((s.x + s.radius - x0) / g.dx).floor().max(0.0) as usize).min(g.nx - 1);
        let j_lo = (((s.y - s.radius - y0) / g.dy).floor().max(0.0) as usize).min(g.ny - 1);
        let j_hi = (((s.y + s.radius - y0) / g.dy).floor().max(0.0) as usize).min(g.ny - 1);
        let n_sub = (ss * ss) as f64;
        let mut prebleach = 0.0;
        for j in j_lo..=j_hi {
            for i in i_lo..=i_hi {
                let (mut inside, mut remain) = (0usize, 0.0);
                for a in 0..ss {
                    for b in 0..ss {
                        let px = x0 + (i as f64 + (a as f64 + 0.5) / ss as f64) * g.dx;
                        let py = y0 + (j as f64 + (b as f64 + 0.5) / ss as f64) * g.dy;
                        let r = ((px - s.x).powi(2) + (py - s.y).powi(2)).sqrt();
                        if r <= s.radius {
                            inside += 1;
                            remain += self.bleach.remaining(r);
                        } else {
                            remain += 1.0;
                        }
                    }
                }
                if inside > 0 {
                    let cell = g.index(i, j);
                    let frac = inside as f64 / n_sub;
                    cells.push((cell, frac));
                    factor[cell] = remain / n_sub;
                    prebleach += frac * g.cell_area();
                }
            }
        }
        SpotMask { cells, factor, prebleach }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub times: Vec<f64>,
    pub intensity: Vec<f64>,
    pub weight: Option<Vec<f64>>,
}

impl RecoveryCurve {
    pub fn new(times: Vec<f64>, intensity: Vec<f64>, weight: Option<Vec<f64>>) -> Result<Self> {
        let c = Self { times, intensity, weight };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.intensity.len() || self.weight.as_ref().is_some_and(|w| w.len() != self.times.len()) {
            return Err(Error::InvalidArgument("recovery curve columns differ in length".into()));
        }
        if self.intensity.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("intensities must be finite and nonnegative".into()));
        }
        if self.weight.as_ref().is_some_and(|w| w.iter().any(|v| !(v.is_finite() && *v >= 0.0))) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weight.as_ref().map_or(1.0, |w| w[k])
    }

    /// Reads CSV with header `time_s,intensity` and an optional `weight`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let headers = rdr.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().map(str::trim).collect();
        let has_weight = match names.as_slice() {
            ["time_s", "intensity"] => false,
            ["time_s", "intensity", "weight"] => true,
            _ => return Err(Error::parse(path, format!("expected header time_s,intensity[,weight], got {names:?}"))),
        };
        let (mut t, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("row {}: {e}", k + 2)))
            };
            t.push(num(0)?);
            y.push(num(1)?);
            if has_weight {
                w.push(num(2)?);
            }
        }
        Self::new(t, y, has_weight.then_some(w)).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(if self.weight.is_some() { "time_s,intensity,weight\n" } else { "time_s,intensity\n" });
        for k in 0..self.times.len() {
            match &self.weight {
                Some(w) => out.push_str(&format!("{},{},{}\n", self.times[k], self.intensity[k], w[k])),
                None => out.push_str(&format!("{},{}\n", self.times[k], self.intensity[k])),
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Multiplies each intensity by `1 + rel·ξ`, `ξ` standard normal, and
    /// clips at zero.
    pub fn with_noise(&self, rel: f64, seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        let intensity = self
            .intensity
            .iter()
            .map(|&v| {
                let xi: f64 = StandardNormal.sample(&mut rng);
                (v * (1.0 + rel * xi)).max(0.0)
            })
            .collect();
        Self { intensity, ..self.clone() }
    }
}

/// Recovery curve at the protocol's observation times.
pub fn synthesize(model: &ModelSpec, protocol: &FrapProtocol) -> Result<RecoveryCurve> {
    synthesize_with_plateau(model, protocol, 1.0)
}

fn synthesize_with_plateau(model: &ModelSpec, protocol: &FrapProtocol, plateau: f64) -> Result<RecoveryCurve> {
    protocol.validate()?;
    let g = protocol.grid;
    let pi = model.stationary_distribution()?.pi;
    let mask = protocol.mask();
    let mut fields = StateFields::zeros(g, model.n_states());
    for (s, p) in pi.iter().enumerate() {
        for (v, f) in fields.values[s].iter_mut().zip(&mask.factor) {
            *v = plateau * p * f;
        }
    }
    let t_last = *protocol.times.last().expect("validated");
    let cfg = SolverConfig {
        dt: DtPolicy::Auto,
        t_end: t_last.max(f64::MIN_POSITIVE),
        safety: protocol.solver.safety,
        advection: AdvectionMode::Axis,
        ..Default::default()
    };
    let mut solver = Solver::new(model, &Reaction::Uniform, g, &cfg)?;
    let needed = (t_last / solver.dt()).ceil();
    if needed > protocol.solver.max_steps as f64 {
        return Err(Error::Domain(format!(
            "run needs {needed} steps, budget is {}",
            protocol.solver.max_steps
        )));
    }
    let norm = plateau * mask.prebleach;
    let mut intensity = Vec::with_capacity(protocol.times.len());
    for &t in &protocol.times {
        solver.advance_to(&mut fields, t)?;
        let total: f64 = mask
            .cells
            .iter()
            .map(|&(cell, frac)| frac * fields.values.iter().map(|s| s[cell]).sum::<f64>())
            .sum();
        intensity.push(total * g.cell_area() / norm);
    }
    Ok(RecoveryCurve { times: protocol.times.clone(), intensity, weight: None })
}

/// Parameterized model family used for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTemplate {
    /// `(d, c, beta1, beta2)`: moving at speed `c`, diffusing with `d`.
    TwoState,
    /// `(d, k_on, k_off)`: free diffusion plus an immobile bound state.
    ReactionDiffusion,
}

impl ModelTemplate {
    pub fn names(&self) -> &'static [&'static str] {
        match self {
            ModelTemplate::TwoState => &["d", "c", "beta1", "beta2"],
            ModelTemplate::ReactionDiffusion => &["d", "k_on", "k_off"],
        }
    }

    pub fn build(&self, p: &[f64]) -> Result<ModelSpec> {
        if p.len() != self.names().len() {
            return Err(Error::InvalidArgument(format!("{} parameters for {} names", p.len(), self.names().len())));
        }
        if p.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("parameters must be positive, got {p:?}")));
        }
        let m = match self {
            ModelTemplate::TwoState => ModelSpec::two_state(p[1], p[0], p[2], p[3]),
            ModelTemplate::ReactionDiffusion => {
                let mut a = nalgebra::DMatrix::zeros(2, 2);
                a[(0, 0)] = -p[1];
                a[(1, 0)] = p[1];
                a[(0, 1)] = p[2];
                a[(1, 1)] = -p[2];
                ModelSpec::new(vec![0.0, 0.0], vec![p[0], 0.0], a)?.with_labels(vec!["free".into(), "bound".into()])?
            }
        };
        m.ensure_valid()?;
        Ok(m)
    }
}

impl std::str::FromStr for ModelTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-state" => Ok(ModelTemplate::TwoState),
            "reaction-diffusion" => Ok(ModelTemplate::ReactionDiffusion),
            _ => Err(Error::InvalidArgument(format!("unknown template `{s}` (two-state, reaction-diffusion)"))),
        }
    }
}

/// Weighted sum of squared residuals.
pub fn objective(model_curve: &RecoveryCurve, data: &RecoveryCurve) -> Result<f64> {
    if model_curve.times.len() != data.times.len() {
        return Err(Error::InvalidArgument("curves sampled at different times".into()));
    }
    Ok((0..data.times.len()).map(|k| data.weight(k) * (model_curve.intensity[k] - data.intensity[k]).powi(2)).sum())
}

fn evaluate(template: ModelTemplate, params: &[f64], protocol: &FrapProtocol, data: &RecoveryCurve) -> Result<f64> {
    let model = template.build(params)?;
    objective(&synthesize(&model, protocol)?, data)
}

/// Log-spaced values for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAxis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl ParamAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        (0..self.n)
            .map(|k| {
                if k == self.n - 1 {
                    self.hi
                } else if k == 0 {
                    self.lo
                } else {
                    (a + (b - a) * k as f64 / (self.n - 1) as f64).exp()
                }
            })
            .collect()
    }
}

/// Parses `name=lo:hi:n,...`, reordered to the template's parameter order.
pub fn parse_grid(spec: &str, template: ModelTemplate) -> Result<Vec<ParamAxis>> {
    let mut axes = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || Error::InvalidArgument(format!("grid entry `{part}` is not name=lo:hi:n"));
        let (name, range) = part.split_once('=').ok_or_else(bad)?;
        let f: Vec<&str> = range.split(':').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = f[0].parse().map_err(|_| bad())?;
        let hi: f64 = f[1].parse().map_err(|_| bad())?;
        let n: usize = f[2].parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && n >= 1) {
            return Err(Error::InvalidArgument(format!("grid entry `{part}` needs 0 < lo <= hi and n >= 1")));
        }
        axes.push(ParamAxis { name: name.trim().to_string(), lo, hi, n });
    }
    let names = template.names();
    let mut ordered = Vec::with_capacity(names.len());
    for name in names {
        let k = axes
            .iter()
            .position(|a| a.name == *name)
            .ok_or_else(|| Error::InvalidArgument(format!("grid is missing parameter `{name}`")))?;
        ordered.push(axes.remove(k));
    }
    if let Some(extra) = axes.first() {
        return Err(Error::InvalidArgument(format!("grid names unknown parameter `{}`", extra.name)));
    }
    Ok(ordered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Position in the grid, last axis fastest.
    pub index: usize,
    pub params: Vec<f64>,
    pub objective: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub names: Vec<String>,
    pub axes: Vec<ParamAxis>,
    /// Ranked by objective, ties by index.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.first().filter(|r| r.objective.is_finite())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("rank,index,{},objective,error\n", self.names.join(","));
        for (rank, r) in self.rows.iter().enumerate() {
            let params: Vec<String> = r.params.iter().map(|p| format!("{p:e}")).collect();
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!("{rank},{},{},{:e},{err}\n", r.index, params.join(","), r.objective));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn multi_index(mut index: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for k in (0..sizes.len()).rev() {
        out[k] = index % sizes[k];
        index /= sizes[k];
    }
    out
}

/// Evaluates the objective at every grid point. Failed runs get `+∞`.
pub fn sweep(data: &RecoveryCurve, protocol: &FrapProtocol, template: ModelTemplate, axes: &[ParamAxis]) -> Result<SweepTable> {
    data.validate()?;
    if axes.len() != template.names().len() {
        return Err(Error::InvalidArgument("one grid axis per template parameter required".into()));
    }
    let protocol = protocol.with_times(data.times.clone());
    protocol.validate()?;
    let values: Vec<Vec<f64>> = axes.iter().map(ParamAxis::values).collect();
    let sizes: Vec<usize> = axes.iter().map(|a| a.n).collect();
    let total: usize = sizes.iter().product();
    let mut rows: Vec<SweepRow> = (0..total)
        .into_par_iter()
        .map(|index| {
            let params: Vec<f64> = multi_index(index, &sizes).iter().enumerate().map(|(k, &i)| values[k][i]).collect();
            match evaluate(template, &params, &protocol, data) {
                Ok(objective) => SweepRow { index, params, objective, error: None },
                Err(e) => SweepRow { index, params, objective: f64::INFINITY, error: Some(e.to_string()) },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.objective.total_cmp(&b.objective).then(a.index.cmp(&b.index)));
    Ok(SweepTable { names: template.names().iter().map(|s| s.to_string()).collect(), axes: axes.to_vec(), rows })
}

/// Profile of the sweep objective along one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamProfile {
    pub name: String,
    pub values: Vec<f64>,
    /// Minimum objective over all other parameters, per value.
    pub minima: Vec<f64>,
    pub flat: bool,
}

pub const FLAT_REL_TOL: f64 = 0.5;
pub const FLAT_ABS_TOL: f64 = 1e-10;

/// Flags parameters whose profile varies by no more than
/// `rel_tol · min + abs_tol` across the grid.
pub fn flat_valleys(table: &SweepTable, rel_tol: f64, abs_tol: f64) -> Vec<ParamProfile> {
    let sizes: Vec<usize> = table.axes.iter().map(|a| a.n).collect();
    table
        .axes
        .iter()
        .enumerate()
        .map(|(k, axis)| {
            let mut minima = vec![f64::INFINITY; axis.n];
            for r in &table.rows {
                let i = multi_index(r.index, &sizes)[k];
                minima[i] = minima[i].min(r.objective);
            }
            let lo = minima.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = minima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let flat = axis.n > 1 && hi.is_finite() && hi - lo <= rel_tol * lo + abs_tol;
            ParamProfile { name: axis.name.clone(), values: axis.values(), minima, flat }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRun {
    pub label: String,
    pub exit_rate: f64,
    pub run_time: f64,
    pub run_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedQuantities {
    pub runs: Vec<StateRun>,
    pub v_eff: f64,
    pub sigma_eff: f64,
}

/// Mean sojourn time and distance per state, plus effective transport.
pub fn derived_quantities(model: &ModelSpec) -> Result<DerivedQuantities> {
    let eff = effective_transport(model)?;
    let runs = (0..model.n_states())
        .map(|i| {
            let q = model.exit_rate(i);
            StateRun {
                label: model.labels()[i].clone(),
                exit_rate: q,
                run_time: 1.0 / q,
                run_length: model.speeds()[i].abs() / q,
            }
        })
        .collect();
    Ok(DerivedQuantities { runs, v_eff: eff.v_eff, sigma_eff: eff.sigma_eff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Starts taken from the top of the sweep.
    pub starts: usize,
    pub max_iter: usize,
    /// Simplex diameter tolerance in log-parameter space.
    pub x_tol: f64,
    pub initial_step: f64,
    pub lower: f64,
    pub upper: f64,
    /// Optima closer than this (log space, ∞-norm) are merged.
    pub merge_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            max_iter: 500,
            x_tol: 1e-4,
            initial_step: 0.5,
            lower: PARAM_LOWER,
            upper: PARAM_UPPER,
            merge_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptimum {
    pub start: Vec<f64>,
    pub params: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each simplex iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub objective: f64,
    pub bounds: (f64, f64),
    /// Distinct local optima, best first.
    pub optima: Vec<FitOptimum>,
    pub derived: DerivedQuantities,
    pub sweep: Option<SweepTable>,
}

/// Multistart simplex descent in log-parameter space.
pub fn fit(
    data: &RecoveryCurve,
    protocol: &FrapProtocol,
    template: ModelTemplate,
    starts: &[Vec<f64>],
    opts: &FitOptions,
) -> Result<FitResult> {
    data.validate()?;
    let protocol = protocol.with_times(data.times.clone());
    protocol.validate()?;
    let dim = template.names().len();
    if starts.is_empty() {
        return Err(Error::InvalidArgument("no starting points".into()));
    }
    for s in starts {
        if s.len() != dim || s.iter().any(|v| !(*v >= opts.lower && *v <= opts.upper)) {
            return Err(Error::InvalidArgument(format!("start {s:?} outside [{}, {}]", opts.lower, opts.upper)));
        }
    }
    let nm = NelderMeadOptions {
        max_iter: opts.max_iter,
        x_tol: opts.x_tol,
        initial_step: opts.initial_step,
        lower: vec![opts.lower.ln(); dim],
        upper: vec![opts.upper.ln(); dim],
    };
    let f = |x: &[f64]| {
        let p: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        evaluate(template, &p, &protocol, data).unwrap_or(f64::INFINITY)
    };
    let log_starts: Vec<Vec<f64>> = starts.iter().map(|s| s.iter().map(|v| v.ln()).collect()).collect();
    let optima = multistart(f, &log_starts, &nm, opts.merge_tol);
    if optima.iter().all(|o| !o.result.f.is_finite()) {
        let reasons = starts
            .iter()
            .map(|s| match evaluate(template, s, &protocol, data) {
                Ok(v) => format!("start {s:?}: no finite objective reached (start value {v:e})"),
                Err(e) => format!("start {s:?}: {e}"),
            })
            .collect();
        return Err(Error::AllStartsFailed(reasons));
    }
    let optima: Vec<FitOptimum> = optima
        .into_iter()
        .filter(|o| o.result.f.is_finite())
        .map(|o| FitOptimum {
            start: starts[o.start_index].clone(),
            params: o.result.x.iter().map(|v| v.exp()).collect(),
            objective: o.result.f,
            iterations: o.result.iterations,
            evaluations: o.result.evaluations,
            converged: o.result.converged,
            history: o.result.history,
        })
        .collect();
    let best = &optima[0];
    Ok(FitResult {
        names: template.names().iter().map(|s| s.to_string()).collect(),
        params: best.params.clone(),
        objective: best.objective,
        bounds: (opts.lower, opts.upper),
        derived: derived_quantities(&template.build(&best.params)?)?,
        optima,
        sweep: None,
    })
}

/// Sweep, then fit from the `opts.starts` best finite sweep points.
pub fn sweep_and_fit(
    data: &RecoveryCurve,
    protocol: &FrapProtocol,
    template: ModelTemplate,
    axes: &[ParamAxis],
    opts: &FitOptions,
) -> Result<FitResult> {
    let table = sweep(data, protocol, template, axes)?;
    let starts: Vec<Vec<f64>> = table
        .rows
        .iter()
        .filter(|r| r.objective.is_finite())
        .take(opts.starts.max(1))
        .map(|r| r.params.iter().map(|v| v.clamp(opts.lower, opts.upper)).collect())
        .collect();
    if starts.is_empty() {
        let reasons = table.rows.iter().take(opts.starts.max(1)).filter_map(|r| r.error.clone()).collect();
        return Err(Error::AllStartsFailed(reasons));
    }
    let mut result = fit(data, protocol, template, &starts, opts)?;
    result.sweep = Some(table);
    Ok(result)
}
