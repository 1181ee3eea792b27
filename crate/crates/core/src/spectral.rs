//! Effective velocity and diffusivity from the null-space projection of the
//! rate matrix, and the principal branch of the dispersion relation.
//!
//! Sign convention: the transport term is `+C ∂_y u`, so a positive speed
//! carries mass toward decreasing `y` and the population peak sits at
//! `y = -v_eff t`. The long-time variance of the total population grows as
//! `2 σ_eff t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::bordered_solve;
use crate::model::ModelSpec;

/// Separation between the two leading real parts below which the principal
/// branch is considered to be crossing another branch.
pub const BRANCH_SEPARATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spectral,
    Renewal,
    PdeMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub v_eff_se: f64,
    pub sigma_eff_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTransport {
    pub v_eff: f64,
    pub sigma_eff: f64,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<Uncertainty>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionPoint {
    pub nu: f64,
    pub lambda: f64,
    /// Eigenvector of the principal branch, normalized to unit sum.
    pub eigenvector: DVector<f64>,
    /// Gap between `lambda` and the next largest real part.
    pub separation: f64,
    pub branch_crossing: bool,
}

/// `u₀` normalized to unit sum, i.e. the stationary distribution.
fn kernel_vector(model: &ModelSpec) -> Result<DVector<f64>> {
    Ok(model.stationary_distribution()?.as_vector())
}

/// `v_eff = c · π`.
pub fn effective_velocity(model: &ModelSpec) -> Result<f64> {
    let pi = kernel_vector(model)?;
    Ok(model.speeds().iter().zip(pi.iter()).map(|(c, p)| c * p).sum())
}

/// `⟨ψ₀, C u₀⟩ / ⟨ψ₀, u₀⟩` with `ψ₀ = 1` and `u₀` taken from the raw bordered
/// null-space solve, without reusing the stationary-distribution path.
pub fn projection_velocity(model: &ModelSpec) -> Result<f64> {
    let n = model.n_states();
    if !model.is_irreducible() {
        return Err(Error::Reducible);
    }
    // Border with e₀ rather than the ones vector so the normalization differs
    // from the stationary-distribution route.
    let mut e0 = DVector::zeros(n);
    e0[0] = 1.0;
    let (u0, _) = bordered_solve(model.rates(), &e0, &e0, &DVector::zeros(n), 1.0)?;
    let num: f64 = model.speeds().iter().zip(u0.iter()).map(|(c, u)| c * u).sum();
    Ok(num / u0.sum())
}

/// Solves `A z = (C - v_eff I) u₀` on the range of `A` (`⟨1, z⟩ = 0`).
pub(crate) fn corrector(model: &ModelSpec, u0: &DVector<f64>, v_eff: f64) -> Result<DVector<f64>> {
    let n = model.n_states();
    let r = DVector::from_iterator(
        n,
        model.speeds().iter().zip(u0.iter()).map(|(c, u)| (c - v_eff) * u),
    );
    let ones = DVector::from_element(n, 1.0);
    let (z, mu) = bordered_solve(model.rates(), &ones, &ones, &r, 0.0)?;
    debug_assert!(mu.abs() < 1e-8 * (1.0 + r.amax()));
    Ok(z)
}

/// `σ_eff = ⟨1, D u₀ - C z⟩ / ⟨1, u₀⟩` with `z` the range-restricted solve of
/// `A z = C̃ u₀`.
pub fn effective_diffusivity(model: &ModelSpec) -> Result<f64> {
    Ok(effective_transport(model)?.sigma_eff)
}

pub fn effective_transport(model: &ModelSpec) -> Result<EffectiveTransport> {
    let u0 = kernel_vector(model)?;
    let v_eff: f64 = model.speeds().iter().zip(u0.iter()).map(|(c, p)| c * p).sum();
    let z = corrector(model, &u0, v_eff)?;
    let diffusive: f64 = model.diffusivities().iter().zip(u0.iter()).map(|(d, u)| d * u).sum();
    let advective: f64 = model.speeds().iter().zip(z.iter()).map(|(c, z)| c * z).sum();
    let sigma = diffusive - advective;
    // The advective part is a nonnegative quadratic form; clip round-off.
    let sigma_eff = if sigma < 0.0 && sigma > -1e-12 * (1.0 + diffusive) { 0.0 } else { sigma };
    Ok(EffectiveTransport {
        v_eff,
        sigma_eff,
        method: Method::Spectral,
        uncertainty: None,
    })
}

/// Principal eigenvalue of `A + νC + ν²D` (the branch through `λ(0) = 0`).
pub fn dispersion_eigenvalue(model: &ModelSpec, nu: f64) -> Result<DispersionPoint> {
    let n = model.n_states();
    let mut m: DMatrix<f64> = model.rates().clone();
    for j in 0..n {
        m[(j, j)] += nu * model.speeds()[j] + nu * nu * model.diffusivities()[j];
    }
    let eig = m.clone().complex_eigenvalues();
    let mut re: Vec<f64> = eig.iter().map(|z| z.re).collect();
    re.sort_by(|a, b| b.total_cmp(a));
    let lambda = re[0];
    let separation = if n > 1 { re[0] - re[1] } else { f64::INFINITY };
    let branch_crossing = separation < BRANCH_SEPARATION_TOL;
    if branch_crossing {
        log::warn!("dispersion branch crossing at nu = {nu}: separation {separation:e}");
    }
    let eigenvector = principal_vector(&m, lambda)?;
    Ok(DispersionPoint {
        nu,
        lambda,
        eigenvector,
        separation,
        branch_crossing,
    })
}

/// Null vector of `m - λI` from the SVD, scaled to unit sum.
fn principal_vector(m: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = m.nrows();
    let shifted = m - DMatrix::identity(n, n) * lambda;
    let svd = shifted.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Singular("SVD did not converge".into()))?;
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0;
    let mut v: DVector<f64> = v_t.row(k).transpose();
    let s = v.sum();
    if s.abs() > f64::EPSILON {
        v /= s;
    }
    Ok(v)
}

/// Long-time Gaussian density of the total population at position `y`:
/// mean `-v_eff t`, variance `2 σ_eff t`.
pub fn gaussian_profile(eff: &EffectiveTransport, t: f64, y: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    if !(eff.sigma_eff > 0.0) {
        return Err(Error::Domain(format!(
            "effective diffusivity must be positive, got {}",
            eff.sigma_eff
        )));
    }
    let var = 2.0 * eff.sigma_eff * t;
    let dy = y + eff.v_eff * t;
    Ok((-dy * dy / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt())
}

/// Closed-form 2-state values `(v_eff, σ_eff)` for the moving/diffusing model.
pub fn two_state_closed_form(c: f64, d: f64, beta1: f64, beta2: f64) -> (f64, f64) {
    let s = beta1 + beta2;
    (c * beta2 / s, d * beta1 / s + c * c * beta1 * beta2 / (s * s * s))
}
