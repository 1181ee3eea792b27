//! Effective transport for parallel tracks whose availability varies across
//! the track direction.
//!
//! With `x ∈ [0, 1]` across the tracks and rates `A(x)`, the long-time
//! profile is `u₀(x)` (kernel of `D∂²ₓ + A(x)`), the corrector `w₀(x)` solves
//!
//! ```text
//! (D∂²ₓ + A(x)) w₀ + C u₀ − v u₀ = 0,   ∫⟨1, w₀⟩ dx = 0,
//! ```
//!
//! and `σ = ∫⟨1, D u₀⟩ + ∫⟨1, C w₀⟩` for `∫⟨1, u₀⟩ = 1`.
//!
//! The discretization uses `m` vertices with mirrored no-flux ends. Each row
//! is scaled by its trapezoid weight, which makes the all-ones vector an
//! exact left null vector of the assembled matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::rates_at;
use crate::linalg::checked_lu;
use crate::model::ModelSpec;
use crate::spectral::{EffectiveTransport, Method};

pub const DEFAULT_POINTS: usize = 401;
/// Max allowed `|⟨1, C u₀ − v u₀⟩|`, relative to the largest speed.
pub const SOLVABILITY_TOL: f64 = 1e-10;

/// Filament availability across the tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoProfile {
    Constant { value: f64 },
    /// Piecewise-linear through `(x, rho)`; a repeated `x` marks a jump.
    /// Values outside the sampled range are held constant.
    Table { x: Vec<f64>, rho: Vec<f64> },
    /// `mean + amplitude · cos(2π · periods · x)`.
    Sinusoid { mean: f64, amplitude: f64, periods: f64 },
}

impl RhoProfile {
    pub fn table(x: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let p = RhoProfile::Table { x, rho };
        p.validate()?;
        Ok(p)
    }

    /// Reads a two-column CSV with header `x,rho`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let (mut xs, mut rs) = (Vec::new(), Vec::new());
        for (line, rec) in rdr.deserialize::<(f64, f64)>().enumerate() {
            let (x, r) = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", line + 2)))?;
            xs.push(x);
            rs.push(r);
        }
        Self::table(xs, rs).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path, samples: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let rows: Vec<(f64, f64)> = match self {
            RhoProfile::Table { x, rho } => x.iter().copied().zip(rho.iter().copied()).collect(),
            _ => (0..samples).map(|k| k as f64 / (samples - 1) as f64).map(|x| (x, self.eval(x))).collect(),
        };
        w.write_record(["x", "rho"]).map_err(|e| Error::parse(path, e.to_string()))?;
        for (x, r) in rows {
            w.serialize((x, r)).map_err(|e| Error::parse(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            RhoProfile::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return bad(format!("constant availability must be positive, got {value}"));
                }
            }
            RhoProfile::Sinusoid { mean, amplitude, periods } => {
                if ![mean, amplitude, periods].iter().all(|v| v.is_finite()) || mean - amplitude.abs() < 0.0 || *mean <= 0.0 {
                    return bad(format!("sinusoid mean {mean}, amplitude {amplitude} goes negative"));
                }
            }
            RhoProfile::Table { x, rho } => {
                if x.len() != rho.len() || x.is_empty() {
                    return bad("availability table needs matching, nonempty columns".into());
                }
                if x.iter().chain(rho).any(|v| !v.is_finite()) || rho.iter().any(|&r| r < 0.0) {
                    return bad("availability must be finite and nonnegative".into());
                }
                if x.windows(2).any(|w| w[1] < w[0]) {
                    return bad("availability x values must be nondecreasing".into());
                }
                if x.windows(3).any(|w| w[0] == w[2]) {
                    return bad("at most two rows may share an x value".into());
                }
                if rho.iter().all(|&r| r == 0.0) {
                    return bad("availability is identically zero".into());
                }
            }
        }
        Ok(())
    }

    /// One-sided limits `(ρ(x⁻), ρ(x⁺))`.
    fn limits(&self, x: f64) -> (f64, f64) {
        match self {
            RhoProfile::Constant { value } => (*value, *value),
            RhoProfile::Sinusoid { mean, amplitude, periods } => {
                let v = mean + amplitude * (2.0 * std::f64::consts::PI * periods * x).cos();
                (v, v)
            }
            RhoProfile::Table { x: xs, rho } => {
                let interp = |k: usize| -> f64 {
                    if k == 0 {
                        rho[0]
                    } else if k == xs.len() {
                        rho[k - 1]
                    } else {
                        let s = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
                        rho[k - 1] + s * (rho[k] - rho[k - 1])
                    }
                };
                let left = interp(xs.partition_point(|&t| t < x));
                let right = interp(xs.partition_point(|&t| t <= x));
                (left, right)
            }
        }
    }

    /// Value at `x`; the mean of the one-sided limits at a jump.
    pub fn eval(&self, x: f64) -> f64 {
        let (l, r) = self.limits(x);
        0.5 * (l + r)
    }

    /// Exact `∫₀¹ ρ dx`.
    pub fn mean(&self) -> f64 {
        match self {
            RhoProfile::Constant { value } => *value,
            RhoProfile::Sinusoid { mean, amplitude, periods } => {
                if *periods == 0.0 {
                    mean + amplitude
                } else {
                    let k = 2.0 * std::f64::consts::PI * periods;
                    mean + amplitude * k.sin() / k
                }
            }
            RhoProfile::Table { x, .. } => {
                let mut b: Vec<f64> = x.iter().copied().filter(|&t| t > 0.0 && t < 1.0).collect();
                b.insert(0, 0.0);
                b.push(1.0);
                b.dedup();
                b.windows(2).map(|w| 0.5 * (self.limits(w[0]).1 + self.limits(w[1]).0) * (w[1] - w[0])).sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialOptions {
    /// Grid points on `[0, 1]`, ends included.
    pub points: usize,
    /// States whose inbound rates scale with availability. `None` selects
    /// every state with nonzero speed.
    pub binding_states: Option<Vec<usize>>,
}

impl Default for SpatialOptions {
    fn default() -> Self {
        Self { points: DEFAULT_POINTS, binding_states: None }
    }
}

impl SpatialOptions {
    pub fn with_points(points: usize) -> Self {
        Self { points, ..Self::default() }
    }

    pub(crate) fn binding(&self, model: &ModelSpec) -> Result<Vec<usize>> {
        let b = match &self.binding_states {
            Some(b) => b.clone(),
            None => (0..model.n_states()).filter(|&i| model.speeds()[i] != 0.0).collect(),
        };
        if let Some(&bad) = b.iter().find(|&&i| i >= model.n_states()) {
            return Err(Error::InvalidArgument(format!("binding state {bad} out of range")));
        }
        Ok(b)
    }
}

/// Solution profiles on the vertex grid; `u0[k][i]` is state `i` at `x[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialProfile {
    pub x: Vec<f64>,
    /// Trapezoid quadrature weights.
    pub weights: Vec<f64>,
    pub u0: Vec<Vec<f64>>,
    pub w0: Option<Vec<Vec<f64>>>,
    /// Max-norm residual of the corrector equation, when solved.
    pub w0_residual: Option<f64>,
}

impl SpatialProfile {
    /// `∫⟨1, f⟩ dx` by the trapezoid rule.
    pub fn integrate(&self, f: &[Vec<f64>]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v.iter().sum::<f64>()).sum()
    }
}

/// Assembled, factored spatial operator.
struct SpatialOperator {
    n: usize,
    m: usize,
    x: Vec<f64>,
    weights: Vec<f64>,
    matrix: DMatrix<f64>,
    bordered: LU<f64, Dyn, Dyn>,
}

impl SpatialOperator {
    fn new(model: &ModelSpec, rho: &RhoProfile, opts: &SpatialOptions) -> Result<Self> {
        model.ensure_valid()?;
        rho.validate()?;
        let m = opts.points;
        if m < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 grid points, got {m}")));
        }
        let binding = opts.binding(model)?;
        let n = model.n_states();
        let h = 1.0 / (m - 1) as f64;
        let x: Vec<f64> = (0..m).map(|k| k as f64 * h).collect();
        let mut weights = vec![h; m];
        weights[0] = 0.5 * h;
        weights[m - 1] = 0.5 * h;

        let size = n * m;
        let mut a = DMatrix::<f64>::zeros(size, size);
        let inv_h2 = 1.0 / (h * h);
        for k in 0..m {
            let rates = rates_at(model, &binding, rho.eval(x[k]));
            let wk = weights[k];
            for i in 0..n {
                let row = k * n + i;
                for j in 0..n {
                    a[(row, k * n + j)] += wk * rates[(i, j)];
                }
                let d = model.diffusivities()[i] * inv_h2 * wk;
                if d == 0.0 {
                    continue;
                }
                let (left, right) = match k {
                    0 => (1, 1),
                    _ if k == m - 1 => (m - 2, m - 2),
                    _ => (k - 1, k + 1),
                };
                a[(row, left * n + i)] += d;
                a[(row, right * n + i)] += d;
                a[(row, row)] -= 2.0 * d;
            }
        }

        let adjoint = column_sum_defect(&a);
        if adjoint > 1e-12 {
            return Err(Error::Domain(format!("discrete operator is not conservative (defect {adjoint:e})")));
        }

        let mut big = DMatrix::<f64>::zeros(size + 1, size + 1);
        big.view_mut((0, 0), (size, size)).copy_from(&a);
        for k in 0..m {
            for i in 0..n {
                big[(k * n + i, size)] = 1.0;
                big[(size, k * n + i)] = weights[k];
            }
        }
        let bordered = checked_lu(big).map_err(|_| Error::KernelDimension)?;
        Ok(Self { n, m, x, weights, matrix: a, bordered })
    }

    fn solve(&self, rhs: &DVector<f64>, extra: f64) -> Result<DVector<f64>> {
        let size = self.n * self.m;
        let mut b = DVector::zeros(size + 1);
        b.rows_mut(0, size).copy_from(rhs);
        b[size] = extra;
        let sol = self.bordered.solve(&b).ok_or_else(|| Error::Singular("bordered solve failed".into()))?;
        Ok(sol.rows(0, size).into_owned())
    }

    fn unflatten(&self, v: &DVector<f64>) -> Vec<Vec<f64>> {
        (0..self.m).map(|k| v.rows(k * self.n, self.n).iter().copied().collect()).collect()
    }

    fn kernel(&self) -> Result<SpatialProfile> {
        let size = self.n * self.m;
        let raw = self.solve(&DVector::zeros(size), 1.0)?;
        let scale = raw.amax();
        if raw.iter().any(|&v| v < -1e-9 * scale) {
            return Err(Error::Domain("kernel vector has negative entries".into()));
        }
        let mut u0 = self.unflatten(&raw.map(|v| v.max(0.0)));
        let total: f64 = self.weights.iter().zip(&u0).map(|(w, v)| w * v.iter().sum::<f64>()).sum();
        for v in u0.iter_mut().flatten() {
            *v /= total;
        }
        Ok(SpatialProfile { x: self.x.clone(), weights: self.weights.clone(), u0, w0: None, w0_residual: None })
    }

    fn corrector(&self, model: &ModelSpec, profile: &mut SpatialProfile, v_eff: f64) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let c = model.speeds();
        let mut forcing = DVector::zeros(n * m);
        let mut solvability = 0.0;
        for k in 0..m {
            for i in 0..n {
                let r = (c[i] - v_eff) * profile.u0[k][i];
                forcing[k * n + i] = r;
                solvability += self.weights[k] * r;
            }
        }
        let c_scale = c.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        if solvability.abs() > SOLVABILITY_TOL * c_scale {
            return Err(Error::Solvability { residual: solvability });
        }
        let rhs = DVector::from_iterator(n * m, (0..n * m).map(|p| -self.weights[p / n] * forcing[p]));
        let w = self.solve(&rhs, 0.0)?;
        let lw = &self.matrix * &w;
        let residual = (0..n * m).map(|p| ((lw[p] - rhs[p]) / self.weights[p / n]).abs()).fold(0.0, f64::max);
        profile.w0 = Some(self.unflatten(&w));
        profile.w0_residual = Some(residual);
        Ok(())
    }
}

/// Largest column sum of `a` relative to its largest entry.
fn column_sum_defect(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    a.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max) / scale
}

/// Largest relative column sum of the assembled operator, i.e. how far the
/// all-ones vector is from annihilating its transpose.
pub fn adjoint_defect(model: &ModelSpec, rho: &RhoProfile, opts: &SpatialOptions) -> Result<f64> {
    Ok(column_sum_defect(&SpatialOperator::new(model, rho, opts)?.matrix))
}

/// Normalized, nonnegative kernel `u₀(x)`.
pub fn solve_u0(model: &ModelSpec, rho: &RhoProfile, opts: &SpatialOptions) -> Result<SpatialProfile> {
    SpatialOperator::new(model, rho, opts)?.kernel()
}

fn velocity(model: &ModelSpec, p: &SpatialProfile) -> f64 {
    let c = model.speeds();
    let cu: Vec<Vec<f64>> = p.u0.iter().map(|u| u.iter().zip(c).map(|(u, c)| u * c).collect()).collect();
    p.integrate(&cu) / p.integrate(&p.u0)
}

/// Fills in the corrector `w₀(x)` for a kernel from [`solve_u0`].
pub fn solve_w0(model: &ModelSpec, rho: &RhoProfile, u0: &SpatialProfile, opts: &SpatialOptions) -> Result<SpatialProfile> {
    let op = SpatialOperator::new(model, rho, opts)?;
    if u0.u0.len() != op.m || u0.u0.iter().any(|v| v.len() != op.n) {
        return Err(Error::InvalidArgument("kernel profile does not match the grid".into()));
    }
    let mut p = u0.clone();
    op.corrector(model, &mut p, velocity(model, u0))?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSolution {
    pub profile: SpatialProfile,
    pub transport: EffectiveTransport,
}

pub fn spatial_effective_transport(model: &ModelSpec, rho: &RhoProfile, opts: &SpatialOptions) -> Result<EffectiveTransport> {
    Ok(spatial_solution(model, rho, opts)?.transport)
}

/// Effective transport together with the profiles it came from.
pub fn spatial_solution(model: &ModelSpec, rho: &RhoProfile, opts: &SpatialOptions) -> Result<SpatialSolution> {
    let op = SpatialOperator::new(model, rho, opts)?;
    let mut profile = op.kernel()?;
    let v_eff = velocity(model, &profile);
    op.corrector(model, &mut profile, v_eff)?;
    let (c, d) = (model.speeds(), model.diffusivities());
    let w0 = profile.w0.as_ref().expect("corrector solved");
    let du: Vec<Vec<f64>> = profile.u0.iter().map(|u| u.iter().zip(d).map(|(u, d)| u * d).collect()).collect();
    let cw: Vec<Vec<f64>> = w0.iter().map(|w| w.iter().zip(c).map(|(w, c)| w * c).collect()).collect();
    let diffusive = profile.integrate(&du);
    let sigma = diffusive + profile.integrate(&cw);
    let sigma_eff = if sigma < 0.0 && sigma > -1e-10 * (1.0 + diffusive) { 0.0 } else { sigma };
    Ok(SpatialSolution {
        profile,
        transport: EffectiveTransport { v_eff, sigma_eff, method: Method::Spectral, uncertainty: None },
    })
}

/// The homogeneous comparator: availability replaced by its mean.
pub fn mean_rate_model(model: &ModelSpec, rho: &RhoProfile, opts: &SpatialOptions) -> Result<ModelSpec> {
    let a = rates_at(model, &opts.binding(model)?, rho.mean());
    ModelSpec::new(model.speeds().to_vec(), model.diffusivities().to_vec(), a)
        .and_then(|m| m.with_labels(model.labels().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{corrector, effective_transport};
    use proptest::prelude::*;

    fn two() -> ModelSpec {
        ModelSpec::two_state(1.0, 0.3, 0.8, 0.5)
    }

    fn step_profile() -> RhoProfile {
        RhoProfile::table(vec![0.0, 0.5, 0.5, 1.0], vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn table_evaluation_and_mean() {
        let p = step_profile();
        assert_eq!(p.eval(0.25), 0.0);
        assert_eq!(p.eval(0.75), 1.0);
        assert_eq!(p.eval(0.5), 0.5);
        assert!((p.mean() - 0.5).abs() < 1e-15);
        let ramp = RhoProfile::table(vec![0.2, 0.8], vec![0.0, 1.2]).unwrap();
        assert_eq!(ramp.eval(0.0), 0.0);
        assert!((ramp.eval(0.5) - 0.6).abs() < 1e-15);
        assert!((ramp.mean() - (0.6 * 0.6 + 1.2 * 0.2)).abs() < 1e-14);
        let s = RhoProfile::Sinusoid { mean: 1.0, amplitude: 0.5, periods: 1.0 };
        assert!((s.mean() - 1.0).abs() < 1e-15);
        assert!(RhoProfile::table(vec![0.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(RhoProfile::table(vec![0.5, 0.4], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn constant_availability_reduces_to_homogeneous() {
        for value in [1.0, 0.4] {
            let rho = RhoProfile::Constant { value };
            let m = two();
            let opts = SpatialOptions::with_points(41);
            let sol = spatial_solution(&m, &rho, &opts).unwrap();
            let hom_model = mean_rate_model(&m, &rho, &opts).unwrap();
            let hom = effective_transport(&hom_model).unwrap();
            assert!((sol.transport.v_eff - hom.v_eff).abs() < 1e-8);
            assert!((sol.transport.sigma_eff - hom.sigma_eff).abs() < 1e-8);
            let pi = hom_model.stationary_distribution().unwrap().pi;
            let z = corrector(&hom_model, &DVector::from_vec(pi.clone()), hom.v_eff).unwrap();
            let w0 = sol.profile.w0.as_ref().unwrap();
            for (u, w) in sol.profile.u0.iter().zip(w0) {
                for i in 0..2 {
                    assert!((u[i] - pi[i]).abs() < 1e-10);
                    // Opposite sign convention to the homogeneous corrector.
                    assert!((w[i] + z[i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn no_advection_means_no_corrector() {
        let m = ModelSpec::two_state(0.0, 0.3, 0.8, 0.5);
        let opts = SpatialOptions { points: 51, binding_states: Some(vec![0]) };
        let sol = spatial_solution(&m, &step_profile(), &opts).unwrap();
        assert!(sol.profile.w0.unwrap().iter().flatten().all(|v| v.abs() < 1e-12));
        assert_eq!(sol.transport.v_eff, 0.0);
    }

    #[test]
    fn constraints_and_residual_hold() {
        let m = two();
        let rho = RhoProfile::Sinusoid { mean: 1.0, amplitude: 0.8, periods: 1.5 };
        let sol = spatial_solution(&m, &rho, &SpatialOptions::with_points(101)).unwrap();
        let p = &sol.profile;
        assert!((p.integrate(&p.u0) - 1.0).abs() < 1e-12);
        assert!(p.integrate(p.w0.as_ref().unwrap()).abs() < 1e-10);
        assert!(p.w0_residual.unwrap() < 1e-8);
        assert!(p.u0.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn moving_state_vanishes_where_unavailable() {
        let m = two();
        let rho = step_profile();
        let coarse = solve_u0(&m, &rho, &SpatialOptions::with_points(81)).unwrap();
        for k in 0..40 {
            assert!(coarse.u0[k][0].abs() < 1e-10, "{}", coarse.u0[k][0]);
        }
        let fine = solve_u0(&m, &rho, &SpatialOptions::with_points(321)).unwrap();
        // Away from the jump the diffusing state converges.
        for k in [0, 20, 60, 80] {
            let d = (coarse.u0[k][1] - fine.u0[4 * k][1]).abs();
            assert!(d < 1e-2 * fine.u0[4 * k][1], "k = {k}: {d}");
        }
    }

    #[test]
    fn refinement_is_second_order() {
        let m = two();
        let rho = RhoProfile::Sinusoid { mean: 1.0, amplitude: 0.7, periods: 1.0 };
        let s: Vec<f64> = [51, 101, 201]
            .iter()
            .map(|&p| spatial_effective_transport(&m, &rho, &SpatialOptions::with_points(p)).unwrap().sigma_eff)
            .collect();
        let ratio = (s[0] - s[1]) / (s[1] - s[2]);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn small_amplitude_correction_is_quadratic() {
        let m = two();
        let opts = SpatialOptions::with_points(101);
        let sigma = |a: f64| {
            spatial_effective_transport(&m, &RhoProfile::Sinusoid { mean: 1.0, amplitude: a, periods: 1.0 }, &opts)
                .unwrap()
                .sigma_eff
        };
        let s0 = sigma(0.0);
        let (s1, s2) = (sigma(0.02), sigma(0.04));
        let ratio = (s2 - s0) / (s1 - s0);
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn nonuniform_availability_enhances_dispersion() {
        let m = two();
        let opts = SpatialOptions::with_points(201);
        for rho in [step_profile(), RhoProfile::Sinusoid { mean: 1.0, amplitude: 0.9, periods: 1.0 }] {
            let s = spatial_effective_transport(&m, &rho, &opts).unwrap().sigma_eff;
            let h = effective_transport(&mean_rate_model(&m, &rho, &opts).unwrap()).unwrap().sigma_eff;
            assert!(s >= h, "{rho:?}: {s} < {h}");
        }
    }

    #[test]
    fn ones_annihilate_the_operator() {
        let rho = RhoProfile::Sinusoid { mean: 1.0, amplitude: 0.5, periods: 2.0 };
        assert!(adjoint_defect(&two(), &rho, &SpatialOptions::with_points(61)).unwrap() < 1e-12);
    }

    #[test]
    fn decoupled_points_have_a_large_kernel() {
        let m = ModelSpec::two_state(1.0, 0.0, 0.8, 0.5);
        let r = solve_u0(&m, &RhoProfile::Constant { value: 1.0 }, &SpatialOptions::with_points(11));
        assert!(matches!(r, Err(Error::KernelDimension)));
    }

    #[test]
    fn inconsistent_velocity_is_rejected() {
        let m = two();
        let rho = step_profile();
        let opts = SpatialOptions::with_points(21);
        let op = SpatialOperator::new(&m, &rho, &opts).unwrap();
        let mut p = op.kernel().unwrap();
        let v = velocity(&m, &p);
        assert!(matches!(op.corrector(&m, &mut p, v + 1e-3), Err(Error::Solvability { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn corrector_constraint_and_positive_dispersion(
            c in 0.1f64..3.0, d in 0.01f64..2.0, b1 in 0.1f64..5.0, b2 in 0.1f64..5.0,
            amp in 0.0f64..0.99, periods in 0.5f64..3.0,
        ) {
            let m = ModelSpec::two_state(c, d, b1, b2);
            let rho = RhoProfile::Sinusoid { mean: 1.0, amplitude: amp, periods };
            let sol = spatial_solution(&m, &rho, &SpatialOptions::with_points(41)).unwrap();
            let p = &sol.profile;
            prop_assert!(p.integrate(p.w0.as_ref().unwrap()).abs() < 1e-10);
            prop_assert!(sol.transport.sigma_eff >= 0.0);
        }
    }
}
