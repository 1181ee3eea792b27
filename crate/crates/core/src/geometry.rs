//! Filament networks and their rasterization onto the solver grid.
//!
//! A filament is an oriented segment from its minus end to its plus end.
//! Rasterization clips every segment exactly against the cell boundaries and
//! accumulates, per cell, the filament length and the length-weighted
//! orientation. The normalized length field `ρ` modulates binding rates; the
//! orientation field steers advection in network mode.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Clips the ray `p + t·dir`, `t ∈ [0, 1]`, to the rectangle
    /// (Liang–Barsky). Returns the surviving parameter interval.
    fn clip(&self, p: Vec2, dir: Vec2) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        for (q, d, lo, hi) in [(p.x, dir.x, self.x0, self.x1), (p.y, dir.y, self.y0, self.y1)] {
            if d == 0.0 {
                if q < lo || q > hi {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo - q) / d, (hi - q) / d);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 >= t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Uniform cell-centered grid. Cell `(i, j)` covers
/// `[x0 + i dx, x0 + (i+1) dx] × [y0 + j dy, y0 + (j+1) dy]`; storage is
/// row-major with `j` (the transport axis) as the row index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub y0: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Self {
        Self { nx, ny, dx, dy, x0: 0.0, y0: 0.0 }
    }

    pub fn covering(rect: Rect, nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            dx: rect.width() / nx as f64,
            dy: rect.height() / ny as f64,
            x0: rect.x0,
            y0: rect.y0,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn x_center(&self, i: usize) -> f64 {
        self.x0 + (i as f64 + 0.5) * self.dx
    }

    pub fn y_center(&self, j: usize) -> f64 {
        self.y0 + (j as f64 + 0.5) * self.dy
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(self.x0, self.y0, self.x0 + self.nx as f64 * self.dx, self.y0 + self.ny as f64 * self.dy)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || !(self.dx > 0.0) || !(self.dy > 0.0) {
            return Err(Error::InvalidArgument(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilamentSegment {
    pub minus_end: Vec2,
    pub plus_end: Vec2,
    pub orientation: Vec2,
}

impl FilamentSegment {
    pub fn new(minus_end: Vec2, plus_end: Vec2) -> Result<Self> {
        let d = plus_end - minus_end;
        let len = d.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::InvalidArgument("filament segment has zero length".into()));
        }
        Ok(Self { minus_end, plus_end, orientation: d * (1.0 / len) })
    }

    pub fn length(&self) -> f64 {
        (self.plus_end - self.minus_end).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { length: f64 },
    Uniform { min: f64, max: f64 },
    Exponential { mean: f64 },
    /// Parallel filaments spanning the whole domain height.
    SpanDomain,
}

impl LengthDist {
    fn sample(&self, rng: &mut impl Rng, span: f64) -> f64 {
        match *self {
            LengthDist::Fixed { length } => length,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
            LengthDist::Exponential { mean } => Exp::new(1.0 / mean).expect("positive mean").sample(rng),
            LengthDist::SpanDomain => span,
        }
    }
}

/// Vertical filaments at uniform-random `x`, plus end down with probability
/// `p_plus_down`.
pub fn parallel_network(
    domain: Rect,
    n_filaments: usize,
    p_plus_down: f64,
    length: LengthDist,
    seed: u64,
) -> Result<Vec<FilamentSegment>> {
    if !(0.0..=1.0).contains(&p_plus_down) {
        return Err(Error::InvalidArgument(format!("orientation bias {p_plus_down} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(n_filaments);
    for k in 0..n_filaments {
        let mut rng = stream(seed, k as u64);
        let x = rng.random_range(domain.x0..domain.x1);
        let len = length.sample(&mut rng, domain.height()).min(domain.height());
        let yc = if len >= domain.height() {
            0.5 * (domain.y0 + domain.y1)
        } else {
            rng.random_range(domain.y0 + 0.5 * len..=domain.y1 - 0.5 * len)
        };
        let (top, bottom) = (Vec2::new(x, yc + 0.5 * len), Vec2::new(x, yc - 0.5 * len));
        let down = rng.random::<f64>() < p_plus_down;
        let seg = if down { FilamentSegment::new(top, bottom)? } else { FilamentSegment::new(bottom, top)? };
        out.push(seg);
    }
    Ok(out)
}

/// Samples a von Mises angle with mean 0 and concentration `kappa`
/// (Best & Fisher rejection sampler). `kappa = ∞` returns 0.
pub fn von_mises(kappa: f64, rng: &mut impl Rng) -> f64 {
    use std::f64::consts::PI;
    if kappa.is_infinite() {
        return 0.0;
    }
    if kappa < 1e-8 {
        return rng.random_range(-PI..PI);
    }
    if kappa > 1e6 {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        return z / kappa.sqrt();
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { theta } else { -theta };
        }
    }
}

/// Filaments whose minus ends are uniform in the domain and whose direction
/// is radial from `origin` perturbed by a von Mises deviate of concentration
/// `kappa`. Plus ends point away from the origin; segments are clipped to
/// the domain.
pub fn radial_network(
    domain: Rect,
    origin: Vec2,
    n_filaments: usize,
    kappa: f64,
    length: LengthDist,
    seed: u64,
) -> Result<Vec<FilamentSegment>> {
    if !domain.contains(origin) {
        return Err(Error::InvalidArgument("network origin lies outside the domain".into()));
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidArgument(format!("angular concentration {kappa} must be >= 0")));
    }
    let span = domain.width().hypot(domain.height());
    let mut out = Vec::with_capacity(n_filaments);
    let mut k = 0u64;
    while out.len() < n_filaments {
        let mut rng = stream(seed, k);
        k += 1;
        let start = Vec2::new(rng.random_range(domain.x0..domain.x1), rng.random_range(domain.y0..domain.y1));
        let radial = start - origin;
        let base = if radial.norm() > 0.0 { radial.y.atan2(radial.x) } else { rng.random_range(-std::f64::consts::PI..std::f64::consts::PI) };
        let theta = base + von_mises(kappa, &mut rng);
        let len = length.sample(&mut rng, span);
        let dir = Vec2::new(theta.cos(), theta.sin()) * len;
        if let Some((_, t1)) = domain.clip(start, dir) {
            if t1 * len > 1e-12 * span {
                out.push(FilamentSegment::new(start, start + dir * t1)?);
            }
        }
    }
    Ok(out)
}

/// Per-cell filament availability and orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkField {
    pub grid: Grid,
    /// Filament length per unit area.
    pub density: Vec<f64>,
    /// `density` scaled so its maximum is 1 (all zero for an empty network).
    pub rho: Vec<f64>,
    /// Unit mean orientation, or zero where `rho = 0` or orientations cancel.
    pub direction: Vec<Vec2>,
    /// Norm of the length-weighted mean orientation, in `[0, 1]`.
    pub coherence: Vec<f64>,
    /// Cells whose filaments do not all share one orientation.
    pub mixed_polarity: Vec<bool>,
}

impl NetworkField {
    pub fn uniform(grid: Grid, direction: Vec2) -> Self {
        let n = grid.n_cells();
        let unit = direction * (1.0 / direction.norm());
        Self {
            grid,
            density: vec![1.0; n],
            rho: vec![1.0; n],
            direction: vec![unit; n],
            coherence: vec![1.0; n],
            mixed_polarity: vec![false; n],
        }
    }

    /// Advection direction scaled by coherence (net polarity).
    pub fn net_direction(&self, cell: usize) -> Vec2 {
        self.direction[cell] * self.coherence[cell]
    }

    /// Total filament length (density integrated over the grid).
    pub fn total_length(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_area()
    }
}

/// Clips each segment exactly against the grid lines and accumulates length
/// and orientation per cell. Pieces outside the grid are dropped.
pub fn rasterize(segments: &[FilamentSegment], grid: Grid) -> Result<NetworkField> {
    grid.check()?;
    let n = grid.n_cells();
    let mut length = vec![0.0; n];
    let mut oriented = vec![Vec2::ZERO; n];
    let mut first_dir: Vec<Option<Vec2>> = vec![None; n];
    let mut mixed = vec![false; n];
    let mut ts = Vec::new();
    for seg in segments {
        let p = seg.minus_end;
        let d = seg.plus_end - seg.minus_end;
        let len = seg.length();
        ts.clear();
        ts.push(0.0);
        ts.push(1.0);
        push_crossings(&mut ts, p.x, d.x, grid.x0, grid.dx, grid.nx);
        push_crossings(&mut ts, p.y, d.y, grid.y0, grid.dy, grid.ny);
        ts.sort_by(|a, b| a.total_cmp(b));
        for w in ts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let mid = p + d * (0.5 * (a + b));
            let fi = ((mid.x - grid.x0) / grid.dx).floor();
            let fj = ((mid.y - grid.y0) / grid.dy).floor();
            if fi < 0.0 || fj < 0.0 || fi >= grid.nx as f64 || fj >= grid.ny as f64 {
                continue;
            }
            let cell = grid.index(fi as usize, fj as usize);
            let piece = (b - a) * len;
            length[cell] += piece;
            oriented[cell] = oriented[cell] + seg.orientation * piece;
            match first_dir[cell] {
                None => first_dir[cell] = Some(seg.orientation),
                Some(o) if (o.dot(seg.orientation) - 1.0).abs() > 1e-9 => mixed[cell] = true,
                Some(_) => {}
            }
        }
    }
    let area = grid.cell_area();
    let density: Vec<f64> = length.iter().map(|l| l / area).collect();
    let max = density.iter().copied().fold(0.0, f64::max);
    let rho = density.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
    let mut direction = vec![Vec2::ZERO; n];
    let mut coherence = vec![0.0; n];
    for c in 0..n {
        if length[c] > 0.0 {
            let net = oriented[c].norm();
            if net > 1e-12 * length[c] {
                direction[c] = oriented[c] * (1.0 / net);
                coherence[c] = (net / length[c]).min(1.0);
            }
        }
    }
    Ok(NetworkField { grid, density, rho, direction, coherence, mixed_polarity: mixed })
}

fn push_crossings(ts: &mut Vec<f64>, p: f64, d: f64, origin: f64, h: f64, n: usize) {
    if d == 0.0 {
        return;
    }
    let (lo, hi) = if d > 0.0 { (p, p + d) } else { (p + d, p) };
    let k0 = (((lo - origin) / h).ceil().max(0.0)) as usize;
    let k1 = (((hi - origin) / h).floor().min(n as f64)).max(-1.0);
    if k1 < 0.0 {
        return;
    }
    for k in k0..=(k1 as usize) {
        let t = (origin + k as f64 * h - p) / d;
        if t > 0.0 && t < 1.0 {
            ts.push(t);
        }
    }
}

/// Rate matrix with every rate *into* a binding state scaled by `rho`.
/// Diagonals are re-closed so columns still sum to zero.
pub fn rates_at(model: &ModelSpec, binding_states: &[usize], rho: f64) -> DMatrix<f64> {
    let n = model.n_states();
    let mut a = model.rates().clone();
    for &i in binding_states {
        for j in 0..n {
            if j != i {
                a[(i, j)] *= rho;
            }
        }
    }
    for j in 0..n {
        let off: f64 = (0..n).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
        a[(j, j)] = -off;
    }
    a
}

/// Spatially varying reaction: one availability value per cell applied to a
/// base model's binding transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct RateField {
    pub model: ModelSpec,
    pub binding_states: Vec<usize>,
    pub rho: Vec<f64>,
}

impl RateField {
    pub fn matrix(&self, cell: usize) -> DMatrix<f64> {
        rates_at(&self.model, &self.binding_states, self.rho[cell])
    }
}

/// Builds the per-cell rate field `A(x)` for `model` on the network's grid.
pub fn spatial_rates(model: &ModelSpec, field: &NetworkField, binding_states: &[usize]) -> Result<RateField> {
    if let Some(&b) = binding_states.iter().find(|&&b| b >= model.n_states()) {
        return Err(Error::InvalidArgument(format!("binding state {b} out of range")));
    }
    let rf = RateField { model: model.clone(), binding_states: binding_states.to_vec(), rho: field.rho.clone() };
    debug_assert!((0..field.rho.len()).all(|c| {
        let a = rf.matrix(c);
        (0..a.ncols()).all(|j| a.column(j).sum().abs() <= 1e-12 * a.column(j).amax().max(1.0))
    }));
    Ok(rf)
}

/// Writes segments as CSV with header `x1,y1,x2,y2,ox,oy` (minus end first).
pub fn write_segments_csv(path: &Path, segments: &[FilamentSegment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(["x1", "y1", "x2", "y2", "ox", "oy"]).map_err(|e| Error::parse(path, e))?;
    for s in segments {
        let rec = [s.minus_end.x, s.minus_end.y, s.plus_end.x, s.plus_end.y, s.orientation.x, s.orientation.y];
        w.write_record(rec.iter().map(|v| format!("{v:e}"))).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_segments_csv(path: &Path) -> Result<Vec<FilamentSegment>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let v: Vec<f64> = rec
            .iter()
            .take(4)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, e))?;
        if v.len() < 4 {
            return Err(Error::parse(path, "segment row needs x1,y1,x2,y2"));
        }
        out.push(FilamentSegment::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])).map_err(|e| Error::parse(path, e))?);
    }
    Ok(out)
}

/// Plain-text field dump: a header line `nx ny dx dy`, then `ny` rows of
/// `nx` values each (row `j` is the `j`-th cell row along `y`).
pub fn write_field_dump(path: &Path, grid: &Grid, values: &[f64]) -> Result<()> {
    let mut buf = String::with_capacity(values.len() * 24 + 64);
    buf.push_str(&format!("{} {} {:e} {:e}\n", grid.nx, grid.ny, grid.dx, grid.dy));
    for row in values.chunks(grid.nx) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        buf.push_str(&line.join(" "));
        buf.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_field_dump(path: &Path) -> Result<(Grid, Vec<f64>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty field dump"))?
        .map_err(|e| Error::io(path, e))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 {
        return Err(Error::parse(path, "header must be `nx ny dx dy`"));
    }
    let p = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(path, e));
    let nx = h[0].parse::<usize>().map_err(|e| Error::parse(path, e))?;
    let ny = h[1].parse::<usize>().map_err(|e| Error::parse(path, e))?;
    let grid = Grid::new(nx, ny, p(h[2])?, p(h[3])?);
    let mut values = Vec::with_capacity(nx * ny);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        for tok in line.split_whitespace() {
            values.push(p(tok)?);
        }
    }
    if values.len() != nx * ny {
        return Err(Error::parse(path, format!("expected {} values, found {}", nx * ny, values.len())));
    }
    Ok((grid, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom() -> Rect {
        Rect::new(0.0, 0.0, 10.0, 20.0)
    }

    #[test]
    fn fully_biased_parallel_network_points_down() {
        let segs = parallel_network(dom(), 200, 1.0, LengthDist::Fixed { length: 5.0 }, 1).unwrap();
        assert!(segs.iter().all(|s| s.orientation == Vec2::new(0.0, -1.0)));
        assert!(segs.iter().all(|s| dom().contains(s.minus_end) && dom().contains(s.plus_end)));
    }

    #[test]
    fn half_biased_fraction() {
        let n = 10_000;
        let segs = parallel_network(dom(), n, 0.5, LengthDist::SpanDomain, 2).unwrap();
        let down = segs.iter().filter(|s| s.orientation.y < 0.0).count() as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((down - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn empty_network_rasterizes_to_zero() {
        let segs = parallel_network(dom(), 0, 0.5, LengthDist::SpanDomain, 2).unwrap();
        assert!(segs.is_empty());
        let f = rasterize(&segs, Grid::covering(dom(), 10, 20)).unwrap();
        assert!(f.rho.iter().all(|&r| r == 0.0));
        assert!(f.direction.iter().all(|&d| d == Vec2::ZERO));
    }

    #[test]
    fn zero_noise_radial_network_is_radial() {
        let origin = Vec2::new(5.0, 10.0);
        let segs = radial_network(dom(), origin, 500, f64::INFINITY, LengthDist::Fixed { length: 2.0 }, 3).unwrap();
        for s in &segs {
            let r = s.minus_end - origin;
            let r = r * (1.0 / r.norm());
            assert!((r.dot(s.orientation) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_origin_points_into_domain() {
        let origin = Vec2::new(0.0, 0.0);
        let segs = radial_network(dom(), origin, 500, f64::INFINITY, LengthDist::Exponential { mean: 3.0 }, 4).unwrap();
        assert!(segs.iter().all(|s| s.orientation.x >= 0.0 && s.orientation.y >= 0.0));
        let noisy = radial_network(dom(), origin, 500, 2.0, LengthDist::Exponential { mean: 3.0 }, 4).unwrap();
        let eps = 1e-9;
        assert!(noisy.iter().all(|s| {
            let grown = Rect::new(-eps, -eps, 10.0 + eps, 20.0 + eps);
            grown.contains(s.minus_end) && grown.contains(s.plus_end)
        }));
    }

    #[test]
    fn angular_deviation_decreases_with_concentration() {
        let origin = Vec2::new(5.0, 10.0);
        let mut prev = f64::INFINITY;
        for kappa in [0.5, 2.0, 8.0, 32.0] {
            let segs = radial_network(dom(), origin, 10_000, kappa, LengthDist::Fixed { length: 1e-3 }, 5).unwrap();
            let mean_dev = segs
                .iter()
                .map(|s| {
                    let r = s.minus_end - origin;
                    (r.dot(s.orientation) / r.norm()).clamp(-1.0, 1.0).acos()
                })
                .sum::<f64>()
                / segs.len() as f64;
            assert!(mean_dev < prev, "kappa {kappa}: {mean_dev} !< {prev}");
            prev = mean_dev;
        }
    }

    #[test]
    fn von_mises_mean_resultant_length() {
        // E[cos θ] = I₁(κ)/I₀(κ); for κ = 2 that is 0.697775...
        let mut rng = stream(8, 0);
        let n = 200_000;
        let m = (0..n).map(|_| von_mises(2.0, &mut rng).cos()).sum::<f64>() / n as f64;
        assert!((m - 0.697_774_657_964_008).abs() < 5e-3);
    }

    #[test]
    fn single_column_segment() {
        let grid = Grid::covering(dom(), 10, 20);
        let seg = FilamentSegment::new(Vec2::new(3.5, 20.0), Vec2::new(3.5, 0.0)).unwrap();
        let f = rasterize(&[seg], grid).unwrap();
        for j in 0..20 {
            for i in 0..10 {
                let c = grid.index(i, j);
                let expect = if i == 3 { 1.0 } else { 0.0 };
                assert!((f.rho[c] - expect).abs() < 1e-12);
                if i == 3 {
                    assert_eq!(f.direction[c], Vec2::new(0.0, -1.0));
                }
            }
        }
    }

    #[test]
    fn antiparallel_segments_cancel() {
        let grid = Grid::covering(dom(), 10, 20);
        let a = FilamentSegment::new(Vec2::new(3.5, 20.0), Vec2::new(3.5, 0.0)).unwrap();
        let b = FilamentSegment::new(Vec2::new(3.5, 0.0), Vec2::new(3.5, 20.0)).unwrap();
        let f = rasterize(&[a, b], grid).unwrap();
        let c = grid.index(3, 7);
        assert!(f.rho[c] > 0.0);
        assert_eq!(f.direction[c], Vec2::ZERO);
        assert!(f.mixed_polarity[c]);
    }

    #[test]
    fn rasterized_length_is_conserved() {
        let grid = Grid::covering(dom(), 17, 23);
        let segs = radial_network(dom(), Vec2::new(2.0, 3.0), 300, 1.0, LengthDist::Uniform { min: 0.5, max: 8.0 }, 6).unwrap();
        let f = rasterize(&segs, grid).unwrap();
        let total: f64 = segs.iter().map(FilamentSegment::length).sum();
        assert!((f.total_length() - total).abs() < 1e-9 * total.max(1.0));
        assert!(f.rho.iter().all(|&r| (0.0..=1.0).contains(&r)));
        for c in 0..grid.n_cells() {
            if f.coherence[c] > 0.0 {
                assert!((f.direction[c].norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refinement_preserves_regional_density() {
        let segs = parallel_network(dom(), 2000, 0.7, LengthDist::Uniform { min: 2.0, max: 10.0 }, 7).unwrap();
        let coarse = rasterize(&segs, Grid::covering(dom(), 10, 20)).unwrap();
        let fine = rasterize(&segs, Grid::covering(dom(), 20, 40)).unwrap();
        // Integrated density over each coarse cell.
        for j in 0..20 {
            for i in 0..10 {
                let c = coarse.density[coarse.grid.index(i, j)] * coarse.grid.cell_area();
                let mut f = 0.0;
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    f += fine.density[fine.grid.index(2 * i + di, 2 * j + dj)] * fine.grid.cell_area();
                }
                assert!((c - f).abs() <= 0.02 * c.max(1e-12) + 1e-9);
            }
        }
    }

    #[test]
    fn spatial_rates_examples() {
        let m = ModelSpec::two_state(1.0, 1.0, 0.4, 0.9);
        assert_eq!(rates_at(&m, &[0], 1.0), *m.rates());
        let a = rates_at(&m, &[0], 0.0);
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 0)], 0.4);
        for x in [0.0, 0.25, 0.5, 1.0] {
            let a = rates_at(&m, &[0], x);
            assert!((a[(0, 1)] - 0.9 * x).abs() < 1e-15);
            assert!(a.column(1).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn dump_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new(3, 2, 0.5, 0.25);
        let vals = vec![0.0, 1.0, 2.5, -3.0, 1e-300, 7.0];
        let p = dir.path().join("f.txt");
        write_field_dump(&p, &grid, &vals).unwrap();
        let (g, v) = read_field_dump(&p).unwrap();
        assert_eq!(g, grid);
        assert_eq!(v, vals);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("3 2 5e-1 2.5e-1\n"));

        let segs = parallel_network(dom(), 5, 0.5, LengthDist::SpanDomain, 1).unwrap();
        let p = dir.path().join("s.csv");
        write_segments_csv(&p, &segs).unwrap();
        assert_eq!(read_segments_csv(&p).unwrap(), segs);
    }
}
