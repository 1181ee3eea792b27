//! Finite-volume solver for the n-state advection–reaction–diffusion system
//!
//! ```text
//! ∂t u = D ∇²u + C ∂y u + A(x) u
//! ```
//!
//! on a rectangle with no-flux walls. One step is the operator split
//! advection → diffusion → reaction:
//!
//! 1. first-order upwind advection through cell faces (along `-y` for a
//!    positive speed in axis mode, along the local filament direction in
//!    network mode),
//! 2. explicit 5-point diffusion,
//! 3. the exact per-cell propagator `exp(A dt)`.
//!
//! Each stage is conservative and positivity preserving under the step
//! limits returned by [`stability_limits`].

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rates_at, Grid, NetworkField, RateField};
use crate::linalg::stochastic_exp;
use crate::model::ModelSpec;

pub const DEFAULT_SAFETY: f64 = 0.9;
pub const DEFAULT_RHO_LEVELS: usize = 256;
/// Values down to this (relative to the field maximum) are clipped to zero.
pub const NEGATIVE_TOL: f64 = 1e-12;

/// Grids at least this large are swept in parallel.
const PAR_MIN_CELLS: usize = 16_384;

#[derive(Debug, Clone, PartialEq)]
pub struct StateFields {
    pub grid: Grid,
    pub t: f64,
    /// `values[state][cell]`, concentrations per unit area.
    pub values: Vec<Vec<f64>>,
}

impl StateFields {
    pub fn zeros(grid: Grid, n_states: usize) -> Self {
        Self { grid, t: 0.0, values: vec![vec![0.0; grid.n_cells()]; n_states] }
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    /// Puts `mass` into a single cell of one state.
    pub fn point_mass(grid: Grid, n_states: usize, state: usize, i: usize, j: usize, mass: f64) -> Self {
        let mut f = Self::zeros(grid, n_states);
        f.values[state][grid.index(i, j)] = mass / grid.cell_area();
        f
    }

    /// Sum over states, per cell.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_cells()];
        for s in &self.values {
            for (o, v) in out.iter_mut().zip(s) {
                *o += v;
            }
        }
        out
    }

    pub fn mass(&self) -> f64 {
        let area = self.grid.cell_area();
        self.values.iter().map(|s| s.iter().sum::<f64>()).sum::<f64>() * area
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtPolicy {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdvectionMode {
    /// Positive speeds move mass toward decreasing `y`.
    Axis,
    /// Velocity of state `j` in a cell is `c_j` times the cell's net filament
    /// direction.
    Network(NetworkField),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reaction {
    /// The model's own rate matrix everywhere.
    Uniform,
    Field(RateField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub dt: DtPolicy,
    pub t_end: f64,
    pub snapshot_times: Vec<f64>,
    pub advection: AdvectionMode,
    pub safety: f64,
    /// Quantization levels for cached per-cell propagators.
    pub rho_levels: usize,
    pub strang: bool,
    /// Moments are recorded every this many steps (and at the end).
    pub moment_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: DtPolicy::Auto,
            t_end: 1.0,
            snapshot_times: Vec::new(),
            advection: AdvectionMode::Axis,
            safety: DEFAULT_SAFETY,
            rho_levels: DEFAULT_RHO_LEVELS,
            strang: false,
            moment_stride: 1,
        }
    }
}

/// Largest stable steps `(advection, diffusion)`; infinite when a process
/// is absent.
pub fn stability_limits(model: &ModelSpec, grid: &Grid, advection: &AdvectionMode) -> (f64, f64) {
    let c_max = model.speeds().iter().fold(0.0_f64, |a, c| a.max(c.abs()));
    let d_max = model.diffusivities().iter().fold(0.0_f64, |a, &d| a.max(d));
    let adv_rate = match advection {
        AdvectionMode::Axis => c_max / grid.dy,
        AdvectionMode::Network(field) => {
            let faces = FaceDirections::network(field);
            c_max * faces.max_outflow_rate(grid)
        }
    };
    let dt_adv = if adv_rate > 0.0 { 1.0 / adv_rate } else { f64::INFINITY };
    let dt_diff = if d_max > 0.0 {
        1.0 / (2.0 * d_max * (1.0 / (grid.dx * grid.dx) + 1.0 / (grid.dy * grid.dy)))
    } else {
        f64::INFINITY
    };
    (dt_adv, dt_diff)
}

/// Unit-speed face velocities: `x_faces[j*(nx-1) + i]` sits between cells
/// `i` and `i+1` of row `j`; `y_faces[j*nx + i]` between rows `j` and `j+1`.
#[derive(Debug, Clone)]
struct FaceDirections {
    x_faces: Vec<f64>,
    y_faces: Vec<f64>,
    axis: bool,
}

impl FaceDirections {
    fn axis(grid: &Grid) -> Self {
        Self { x_faces: Vec::new(), y_faces: vec![-1.0; grid.nx * grid.ny.saturating_sub(1)], axis: true }
    }

    fn network(field: &NetworkField) -> Self {
        let g = field.grid;
        let mut x_faces = Vec::with_capacity(g.nx.saturating_sub(1) * g.ny);
        for j in 0..g.ny {
            for i in 0..g.nx.saturating_sub(1) {
                let a = field.net_direction(g.index(i, j));
                let b = field.net_direction(g.index(i + 1, j));
                x_faces.push(0.5 * (a.x + b.x));
            }
        }
        let mut y_faces = Vec::with_capacity(g.nx * g.ny.saturating_sub(1));
        for j in 0..g.ny.saturating_sub(1) {
            for i in 0..g.nx {
                let a = field.net_direction(g.index(i, j));
                let b = field.net_direction(g.index(i, j + 1));
                y_faces.push(0.5 * (a.y + b.y));
            }
        }
        Self { x_faces, y_faces, axis: false }
    }

    /// Max over cells of the total outflow rate per unit speed.
    fn max_outflow_rate(&self, g: &Grid) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let mut r = 0.0;
                if !self.axis {
                    if i + 1 < g.nx {
                        r += self.x_faces[j * (g.nx - 1) + i].max(0.0) / g.dx;
                    }
                    if i > 0 {
                        r += (-self.x_faces[j * (g.nx - 1) + i - 1]).max(0.0) / g.dx;
                    }
                }
                if j + 1 < g.ny {
                    r += self.y_faces[j * g.nx + i].max(0.0) / g.dy;
                }
                if j > 0 {
                    r += (-self.y_faces[(j - 1) * g.nx + i]).max(0.0) / g.dy;
                }
                worst = worst.max(r);
            }
        }
        worst
    }
}

/// Prepared solver: step size, face velocities and cached propagators.
#[derive(Debug, Clone)]
pub struct Solver {
    grid: Grid,
    speeds: Vec<f64>,
    diffusivities: Vec<f64>,
    n: usize,
    dt: f64,
    strang: bool,
    faces: FaceDirections,
    reaction: ReactionOp,
}

#[derive(Debug, Clone)]
struct ReactionOp {
    /// Rate matrix per level; `None` for levels no cell uses.
    level_rates: Vec<Option<DMatrix<f64>>>,
    /// Level per cell; empty means every cell uses level 0.
    cell_level: Vec<u32>,
    /// Row-major propagators per level, cached by step size.
    cache: HashMap<u64, Vec<Vec<f64>>>,
}

impl ReactionOp {
    fn new(model: &ModelSpec, reaction: &Reaction, grid: &Grid, levels: usize) -> Result<Self> {
        match reaction {
            Reaction::Uniform => Ok(Self { level_rates: vec![Some(model.rates().clone())], cell_level: Vec::new(), cache: HashMap::new() }),
            Reaction::Field(rf) => {
                if rf.rho.len() != grid.n_cells() {
                    return Err(Error::InvalidArgument(format!(
                        "rate field has {} cells, grid has {}",
                        rf.rho.len(),
                        grid.n_cells()
                    )));
                }
                if levels < 2 {
                    return Err(Error::InvalidArgument("need at least 2 availability levels".into()));
                }
                let top = (levels - 1) as f64;
                let cell_level: Vec<u32> = rf.rho.iter().map(|r| (r.clamp(0.0, 1.0) * top).round() as u32).collect();
                let mut level_rates = vec![None; levels];
                for &l in &cell_level {
                    let slot = &mut level_rates[l as usize];
                    if slot.is_none() {
                        *slot = Some(rates_at(model, &rf.binding_states, l as f64 / top));
                    }
                }
                Ok(Self { level_rates, cell_level, cache: HashMap::new() })
            }
        }
    }

    fn propagators(&mut self, dt: f64) -> (&[u32], &Vec<Vec<f64>>) {
        let rates = &self.level_rates;
        let props = self.cache.entry(dt.to_bits()).or_insert_with(|| {
            rates
                .iter()
                .map(|a| match a {
                    Some(a) => {
                        let p = stochastic_exp(a, dt);
                        let n = p.nrows();
                        (0..n * n).map(|k| p[(k / n, k % n)]).collect()
                    }
                    None => Vec::new(),
                })
                .collect()
        });
        (&self.cell_level, props)
    }
}

impl Solver {
    pub fn new(model: &ModelSpec, reaction: &Reaction, grid: Grid, config: &SolverConfig) -> Result<Self> {
        grid.check()?;
        model.ensure_valid()?;
        if let AdvectionMode::Network(field) = &config.advection {
            if field.grid.nx != grid.nx || field.grid.ny != grid.ny {
                return Err(Error::InvalidArgument("network field grid does not match the solver grid".into()));
            }
        }
        let (dt_adv, dt_diff) = stability_limits(model, &grid, &config.advection);
        let admissible = dt_adv.min(dt_diff);
        let dt = match config.dt {
            DtPolicy::Auto => {
                let dt = config.safety * admissible;
                if dt.is_finite() { dt } else { config.t_end.max(f64::MIN_POSITIVE) }
            }
            DtPolicy::Fixed(dt) => {
                if !(dt > 0.0) {
                    return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
                }
                if dt > admissible * (1.0 + 1e-12) {
                    return Err(Error::Cfl { dt, admissible });
                }
                dt
            }
        };
        let faces = match &config.advection {
            AdvectionMode::Axis => FaceDirections::axis(&grid),
            AdvectionMode::Network(f) => FaceDirections::network(f),
        };
        Ok(Self {
            grid,
            speeds: model.speeds().to_vec(),
            diffusivities: model.diffusivities().to_vec(),
            n: model.n_states(),
            dt,
            strang: config.strang,
            faces,
            reaction: ReactionOp::new(model, reaction, &grid, config.rho_levels)?,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn check_fields(&self, f: &StateFields) -> Result<()> {
        if f.grid != self.grid || f.values.len() != self.n || f.values.iter().any(|v| v.len() != self.grid.n_cells()) {
            return Err(Error::InvalidArgument("fields do not match the solver grid or state count".into()));
        }
        Ok(())
    }

    /// One full step of the solver's `dt`.
    pub fn step(&mut self, f: &mut StateFields) -> Result<()> {
        self.check_fields(f)?;
        let dt = self.dt;
        self.step_dt(f, dt)?;
        f.t += dt;
        Ok(())
    }

    fn step_dt(&mut self, f: &mut StateFields, dt: f64) -> Result<()> {
        let mut scratch = vec![0.0; self.grid.n_cells()];
        if self.strang {
            self.react(f, 0.5 * dt);
        }
        for s in 0..self.n {
            let c = self.speeds[s];
            if c != 0.0 {
                self.advect(&f.values[s], &mut scratch, c, dt);
                std::mem::swap(&mut f.values[s], &mut scratch);
            }
            let d = self.diffusivities[s];
            if d > 0.0 {
                self.diffuse(&f.values[s], &mut scratch, d, dt);
                std::mem::swap(&mut f.values[s], &mut scratch);
            }
        }
        if self.strang {
            self.react(f, 0.5 * dt);
        } else {
            self.react(f, dt);
        }
        self.enforce_nonnegative(f)
    }

    /// Steps until `f.t == t_target`, shortening the last step to land on it.
    pub fn advance_to(&mut self, f: &mut StateFields, t_target: f64) -> Result<usize> {
        self.check_fields(f)?;
        let mut steps = 0;
        let eps = 1e-12 * t_target.abs().max(1.0);
        while f.t < t_target - eps {
            let remaining = t_target - f.t;
            let (dt, last) = if remaining <= self.dt * (1.0 + 1e-9) { (remaining, true) } else { (self.dt, false) };
            self.step_dt(f, dt)?;
            f.t = if last { t_target } else { f.t + dt };
            steps += 1;
        }
        Ok(steps)
    }

    fn advect(&self, u: &[f64], out: &mut [f64], c: f64, dt: f64) {
        let g = self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let (ry, rx) = (dt / g.dy, dt / g.dx);
        let faces = &self.faces;
        let yflux = |i: usize, j: usize| -> f64 {
            // Face between rows j and j+1.
            let w = c * faces.y_faces[j * nx + i];
            if w > 0.0 { w * u[j * nx + i] } else { w * u[(j + 1) * nx + i] }
        };
        let xflux = |i: usize, j: usize| -> f64 {
            let w = c * faces.x_faces[j * (nx - 1) + i];
            if w > 0.0 { w * u[j * nx + i] } else { w * u[j * nx + i + 1] }
        };
        let row = |j: usize, out_row: &mut [f64]| {
            for i in 0..nx {
                let top = if j + 1 < ny { yflux(i, j) } else { 0.0 };
                let bottom = if j > 0 { yflux(i, j - 1) } else { 0.0 };
                let mut v = u[j * nx + i] - ry * (top - bottom);
                if !faces.axis {
                    let right = if i + 1 < nx { xflux(i, j) } else { 0.0 };
                    let left = if i > 0 { xflux(i - 1, j) } else { 0.0 };
                    v -= rx * (right - left);
                }
                out_row[i] = v;
            }
        };
        if g.n_cells() >= PAR_MIN_CELLS {
            out.par_chunks_mut(nx).enumerate().for_each(|(j, r)| row(j, r));
        } else {
            out.chunks_mut(nx).enumerate().for_each(|(j, r)| row(j, r));
        }
    }

    fn diffuse(&self, u: &[f64], out: &mut [f64], d: f64, dt: f64) {
        let g = self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let (kx, ky) = (d * dt / (g.dx * g.dx), d * dt / (g.dy * g.dy));
        let row = |j: usize, out_row: &mut [f64]| {
            for i in 0..nx {
                let c = u[j * nx + i];
                let mut lx = 0.0;
                if i > 0 {
                    lx += u[j * nx + i - 1] - c;
                }
                if i + 1 < nx {
                    lx += u[j * nx + i + 1] - c;
                }
                let mut ly = 0.0;
                if j > 0 {
                    ly += u[(j - 1) * nx + i] - c;
                }
                if j + 1 < ny {
                    ly += u[(j + 1) * nx + i] - c;
                }
                out_row[i] = c + kx * lx + ky * ly;
            }
        };
        if g.n_cells() >= PAR_MIN_CELLS {
            out.par_chunks_mut(nx).enumerate().for_each(|(j, r)| row(j, r));
        } else {
            out.chunks_mut(nx).enumerate().for_each(|(j, r)| row(j, r));
        }
    }

    fn react(&mut self, f: &mut StateFields, dt: f64) {
        let n = self.n;
        if n < 2 {
            return;
        }
        let cells = self.grid.n_cells();
        let (cell_level, props) = self.reaction.propagators(dt);
        let mut local = vec![0.0; n];
        for cell in 0..cells {
            let p = if cell_level.is_empty() { &props[0] } else { &props[cell_level[cell] as usize] };
            for (k, l) in local.iter_mut().enumerate() {
                *l = f.values[k][cell];
            }
            for i in 0..n {
                let row = &p[i * n..(i + 1) * n];
                f.values[i][cell] = row.iter().zip(&local).map(|(a, b)| a * b).sum();
            }
        }
    }

    fn enforce_nonnegative(&self, f: &mut StateFields) -> Result<()> {
        let max = f.values.iter().flat_map(|s| s.iter()).fold(0.0_f64, |a, &v| a.max(v.abs()));
        let tol = NEGATIVE_TOL * max.max(f64::MIN_POSITIVE);
        let mut clipped = 0usize;
        for (state, s) in f.values.iter_mut().enumerate() {
            for (cell, v) in s.iter_mut().enumerate() {
                if *v < 0.0 {
                    if *v < -tol {
                        return Err(Error::NegativeMass { state, cell, value: *v });
                    }
                    *v = 0.0;
                    clipped += 1;
                }
            }
        }
        if clipped > 0 {
            log::debug!("clipped {clipped} round-off negatives at t = {}", f.t);
        }
        Ok(())
    }
}

/// Advances `fields` by one solver step.
pub fn step(fields: &StateFields, model: &ModelSpec, reaction: &Reaction, config: &SolverConfig) -> Result<StateFields> {
    let mut solver = Solver::new(model, reaction, fields.grid, config)?;
    let mut out = fields.clone();
    solver.step(&mut out)?;
    Ok(out)
}

/// Mass and `y`-moments of the summed population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub mean_y: f64,
    pub var_y: f64,
}

pub fn moments(fields: &StateFields) -> Result<Moments> {
    let g = fields.grid;
    let mut rows = vec![0.0; g.ny];
    for s in &fields.values {
        for (j, r) in rows.iter_mut().enumerate() {
            *r += s[j * g.nx..(j + 1) * g.nx].iter().sum::<f64>();
        }
    }
    let area = g.cell_area();
    let mass: f64 = rows.iter().sum::<f64>() * area;
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mean_y = rows.iter().enumerate().map(|(j, r)| g.y_center(j) * r).sum::<f64>() * area / mass;
    let var_y = rows
        .iter()
        .enumerate()
        .map(|(j, r)| (g.y_center(j) - mean_y).powi(2) * r)
        .sum::<f64>()
        * area
        / mass;
    Ok(Moments { mass, mean_y, var_y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRecord {
    pub t: f64,
    pub mass: f64,
    pub mean_y: f64,
    pub var_y: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub snapshots: Vec<StateFields>,
    pub series: Vec<MomentRecord>,
    pub dt: f64,
    pub steps: usize,
    pub final_fields: StateFields,
}

impl RunOutput {
    /// Least-squares slopes of `mean_y` and `var_y` over records with
    /// `t >= t_from`.
    pub fn moment_slopes(&self, t_from: f64) -> (f64, f64) {
        let pts: Vec<&MomentRecord> = self.series.iter().filter(|r| r.t >= t_from).collect();
        let slope = |f: &dyn Fn(&MomentRecord) -> f64| {
            let n = pts.len() as f64;
            let mt = pts.iter().map(|r| r.t).sum::<f64>() / n;
            let my = pts.iter().map(|r| f(r)).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|r| (r.t - mt) * (f(r) - my)).sum();
            let sxx: f64 = pts.iter().map(|r| (r.t - mt).powi(2)).sum();
            sxy / sxx
        };
        (slope(&|r| r.mean_y), slope(&|r| r.var_y))
    }

    /// Largest relative mass drift per unit time over the series.
    pub fn mass_drift_rate(&self) -> f64 {
        let m0 = self.series[0].mass;
        self.series
            .iter()
            .filter(|r| r.t > self.series[0].t)
            .map(|r| ((r.mass - m0) / m0).abs() / (r.t - self.series[0].t))
            .fold(0.0, f64::max)
    }
}

/// Runs to `config.t_end`, collecting snapshots and the moment series.
pub fn run(initial: StateFields, model: &ModelSpec, reaction: &Reaction, config: &SolverConfig) -> Result<RunOutput> {
    let mut solver = Solver::new(model, reaction, initial.grid, config)?;
    solver.check_fields(&initial)?;
    if !(config.t_end > initial.t) {
        return Err(Error::InvalidArgument(format!("end time {} is not after start {}", config.t_end, initial.t)));
    }
    let mut snaps: Vec<f64> = config.snapshot_times.clone();
    snaps.sort_by(|a, b| a.total_cmp(b));
    if snaps.iter().any(|&t| t < initial.t || t > config.t_end) {
        return Err(Error::InvalidArgument("snapshot times must lie within the run".into()));
    }
    let stride = config.moment_stride.max(1);
    let mut fields = initial;
    let record = |f: &StateFields| -> Result<MomentRecord> {
        let m = moments(f)?;
        Ok(MomentRecord { t: f.t, mass: m.mass, mean_y: m.mean_y, var_y: m.var_y })
    };
    let mut series = vec![record(&fields)?];
    let mut snapshots = Vec::with_capacity(snaps.len());
    let mut next_snap = 0;
    while next_snap < snaps.len() && snaps[next_snap] <= fields.t {
        snapshots.push(fields.clone());
        next_snap += 1;
    }
    let mut steps = 0usize;
    while fields.t < config.t_end {
        let target = if next_snap < snaps.len() { snaps[next_snap].min(config.t_end) } else { config.t_end };
        let remaining = target - fields.t;
        if remaining <= solver.dt * (1.0 + 1e-9) {
            solver.step_dt(&mut fields, remaining)?;
            fields.t = target;
        } else {
            let dt = solver.dt;
            solver.step_dt(&mut fields, dt)?;
            fields.t += dt;
        }
        steps += 1;
        let at_end = fields.t >= config.t_end;
        if steps.is_multiple_of(stride) || at_end {
            series.push(record(&fields)?);
        }
        while next_snap < snaps.len() && snaps[next_snap] <= fields.t {
            snapshots.push(fields.clone());
            next_snap += 1;
        }
        if at_end {
            break;
        }
    }
    Ok(RunOutput { snapshots, series, dt: solver.dt, steps, final_fields: fields })
}
