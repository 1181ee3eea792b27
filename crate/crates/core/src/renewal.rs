//! Semi-Markov simulation of a state-switching particle and renewal-reward
//! estimates of its effective transport.
//!
//! A path is split into regeneration cycles at successive entries into a
//! base state. Each cycle carries a duration `ΔT` and a displacement `ΔX`,
//! both sums over the sojourns visited before the chain returns to the base
//! state. Long-run drift and spread follow from the first two cycle moments:
//!
//! ```text
//! v_eff = E[ΔX] / E[ΔT]
//! σ_eff = (Var ΔX + v_eff² Var ΔT - 2 v_eff Cov(ΔX, ΔT)) / (2 E[ΔT])
//! ```

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{stream, StreamRng};
use crate::spectral::{EffectiveTransport, Method, Uncertainty};

pub const DEFAULT_STEP_CAP: u64 = 10_000_000;

/// Holding-time law for one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sojourn {
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
    Deterministic { duration: f64 },
    /// Never leaves; only meaningful for single-state models.
    Forever,
}

impl Sojourn {
    pub fn mean(&self) -> f64 {
        match *self {
            Sojourn::Exponential { rate } => 1.0 / rate,
            Sojourn::Gamma { shape, rate } => shape / rate,
            Sojourn::Deterministic { duration } => duration,
            Sojourn::Forever => f64::INFINITY,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Sojourn::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            Sojourn::Gamma { shape, rate } => shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite(),
            Sojourn::Deterministic { duration } => duration > 0.0 && duration.is_finite(),
            Sojourn::Forever => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid sojourn parameters {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Sojourn::Exponential { rate } => Exp::new(rate).expect("checked").sample(rng),
            Sojourn::Gamma { shape, rate } => Gamma::new(shape, 1.0 / rate).expect("checked").sample(rng),
            Sojourn::Deterministic { duration } => duration,
            Sojourn::Forever => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SojournModel {
    sojourns: Vec<Sojourn>,
    jump_probs: DMatrix<f64>,
    base_state: usize,
    /// Per source state: cumulative probabilities over destinations.
    cumulative: Vec<Vec<(usize, f64)>>,
}

impl SojournModel {
    pub fn new(sojourns: Vec<Sojourn>, jump_probs: DMatrix<f64>, base_state: usize) -> Result<Self> {
        let n = sojourns.len();
        if jump_probs.nrows() != n || jump_probs.ncols() != n {
            return Err(Error::InvalidArgument("jump matrix shape does not match states".into()));
        }
        if base_state >= n {
            return Err(Error::InvalidArgument(format!("base state {base_state} out of range")));
        }
        for s in &sojourns {
            s.check()?;
        }
        if n > 1 && sojourns.iter().any(|s| matches!(s, Sojourn::Forever)) {
            return Err(Error::InvalidArgument("absorbing state in a multi-state model".into()));
        }
        let mut cumulative = Vec::with_capacity(n);
        for j in 0..n {
            let col = jump_probs.column(j);
            if col.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (n > 1 && (col.sum() - 1.0).abs() > 1e-12) {
                return Err(Error::InvalidArgument(format!("jump probabilities from state {j} are not a distribution")));
            }
            let mut acc = 0.0;
            let mut cum = Vec::new();
            for i in 0..n {
                if i != j && col[i] > 0.0 {
                    acc += col[i];
                    cum.push((i, acc));
                }
            }
            cumulative.push(cum);
        }
        if n > 1 && !jump_chain_irreducible(&jump_probs) {
            return Err(Error::Reducible);
        }
        Ok(Self {
            sojourns,
            jump_probs,
            base_state,
            cumulative,
        })
    }

    pub fn sojourns(&self) -> &[Sojourn] {
        &self.sojourns
    }

    pub fn jump_probs(&self) -> &DMatrix<f64> {
        &self.jump_probs
    }

    pub fn base_state(&self) -> usize {
        self.base_state
    }

    pub fn with_base_state(self, base_state: usize) -> Result<Self> {
        Self::new(self.sojourns, self.jump_probs, base_state)
    }

    /// Replaces every exponential sojourn by a gamma law of the same mean.
    pub fn with_gamma_shape(self, shape: f64) -> Result<Self> {
        let sojourns = self
            .sojourns
            .iter()
            .map(|s| match *s {
                Sojourn::Exponential { rate } => Sojourn::Gamma { shape, rate: shape * rate },
                other => other,
            })
            .collect();
        Self::new(sojourns, self.jump_probs, self.base_state)
    }

    fn next_state(&self, from: usize, rng: &mut impl Rng) -> usize {
        let cum = &self.cumulative[from];
        let total = cum.last().map_or(1.0, |c| c.1);
        let r: f64 = rng.random::<f64>() * total;
        cum.iter().find(|c| r < c.1).or(cum.last()).map_or(from, |c| c.0)
    }
}

fn jump_chain_irreducible(p: &DMatrix<f64>) -> bool {
    let n = p.nrows();
    let reach = |fwd: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let w = if fwd { p[(v, u)] } else { p[(u, v)] };
                if !seen[v] && w > 0.0 {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    };
    reach(true).into_iter().zip(reach(false)).all(|(a, b)| a && b)
}

/// Exponential sojourns at the model's exit rates with jumps from its
/// embedded chain. `base_state = None` picks the most occupied state.
pub fn sojourn_from_model(model: &ModelSpec, base_state: Option<usize>) -> Result<SojournModel> {
    model.ensure_valid()?;
    if model.n_states() == 1 {
        return SojournModel::new(vec![Sojourn::Forever], DMatrix::zeros(1, 1), 0);
    }
    let chain = model.embedded_chain()?;
    let base = match base_state {
        Some(b) => b,
        None => model.stationary_distribution()?.argmax(),
    };
    let sojourns = chain
        .exit_rates
        .iter()
        .map(|&rate| Sojourn::Exponential { rate })
        .collect();
    SojournModel::new(sojourns, chain.jump_probs, base)
}

/// Displacement accumulated during a sojourn of length `tau` in `state`:
/// `c τ + √(2 d τ) Z`.
pub fn step_displacement(state: usize, tau: f64, model: &ModelSpec, rng: &mut impl Rng) -> f64 {
    let c = model.speeds()[state];
    let d = model.diffusivities()[state];
    let mut xi = c * tau;
    if d > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        xi += (2.0 * d * tau).sqrt() * z;
    }
    xi
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSample {
    pub delta_t: f64,
    pub delta_x: f64,
    pub n_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleOptions {
    pub step_cap: u64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self { step_cap: DEFAULT_STEP_CAP }
    }
}

fn check_model_matches(sojourn: &SojournModel, model: &ModelSpec) -> Result<()> {
    if sojourn.sojourns.len() != model.n_states() {
        return Err(Error::InvalidArgument("sojourn model and transport model differ in state count".into()));
    }
    Ok(())
}

fn one_cycle(
    sojourn: &SojournModel,
    model: &ModelSpec,
    index: u64,
    rng: &mut StreamRng,
    cap: u64,
) -> Result<CycleSample> {
    let base = sojourn.base_state;
    let mut state = base;
    let mut sample = CycleSample { delta_t: 0.0, delta_x: 0.0, n_steps: 0 };
    loop {
        let tau = sojourn.sojourns[state].sample(rng);
        sample.delta_t += tau;
        sample.delta_x += step_displacement(state, tau, model, rng);
        sample.n_steps += 1;
        let next = sojourn.next_state(state, rng);
        if next == base {
            return Ok(sample);
        }
        if sample.n_steps >= cap {
            return Err(Error::RunawayCycle { cycle: index, cap });
        }
        state = next;
    }
}

/// Simulates `n_cycles` independent regeneration cycles. Cycle `k` draws from
/// stream `k` of `seed`, so the output is identical for any thread count.
pub fn simulate_cycles(
    sojourn: &SojournModel,
    model: &ModelSpec,
    n_cycles: u64,
    seed: u64,
    opts: CycleOptions,
) -> Result<Vec<CycleSample>> {
    check_model_matches(sojourn, model)?;
    if n_cycles == 0 {
        return Err(Error::InvalidArgument("need at least one cycle".into()));
    }
    if sojourn.sojourns.iter().any(|s| matches!(s, Sojourn::Forever)) {
        return Err(Error::InvalidArgument("a single-state model has no regeneration cycles".into()));
    }
    (0..n_cycles)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, k);
            one_cycle(sojourn, model, k, &mut rng, opts.step_cap)
        })
        .collect()
}

/// First and second moments of the cycle rewards (unbiased variances).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleMoments {
    pub mean_dt: f64,
    pub mean_dx: f64,
    pub var_dt: f64,
    pub var_dx: f64,
    pub cov_dx_dt: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenewalEstimate {
    pub v_eff: f64,
    pub sigma_eff: f64,
    pub v_eff_se: f64,
    pub sigma_eff_se: f64,
    pub n_cycles: u64,
    pub moments: CycleMoments,
    pub degenerate_time_variance: bool,
}

impl RenewalEstimate {
    pub fn effective(&self) -> EffectiveTransport {
        EffectiveTransport {
            v_eff: self.v_eff,
            sigma_eff: self.sigma_eff,
            method: Method::Renewal,
            uncertainty: Some(Uncertainty { v_eff_se: self.v_eff_se, sigma_eff_se: self.sigma_eff_se }),
        }
    }
}

fn point_estimate(samples: &[CycleSample], idx: impl Iterator<Item = usize> + Clone) -> (f64, f64, CycleMoments) {
    let n = idx.clone().count() as f64;
    let (mut st, mut sx, mut ss) = (0.0, 0.0, 0.0);
    for i in idx.clone() {
        st += samples[i].delta_t;
        sx += samples[i].delta_x;
        ss += samples[i].n_steps as f64;
    }
    let (mt, mx) = (st / n, sx / n);
    let (mut vt, mut vx, mut cxt) = (0.0, 0.0, 0.0);
    for i in idx {
        let dt = samples[i].delta_t - mt;
        let dx = samples[i].delta_x - mx;
        vt += dt * dt;
        vx += dx * dx;
        cxt += dx * dt;
    }
    let moments = CycleMoments {
        mean_dt: mt,
        mean_dx: mx,
        var_dt: vt / (n - 1.0),
        var_dx: vx / (n - 1.0),
        cov_dx_dt: cxt / (n - 1.0),
        mean_steps: ss / n,
    };
    let v = mx / mt;
    let spread = moments.var_dx + v * v * moments.var_dt - 2.0 * v * moments.cov_dx_dt;
    (v, spread / (2.0 * mt), moments)
}

/// Plug-in estimates with delta-method standard errors.
pub fn estimate_effective(samples: &[CycleSample]) -> Result<RenewalEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 cycles, got {n}")));
    }
    let (v, sigma, m) = point_estimate(samples, 0..n);
    let degenerate = m.var_dt == 0.0;
    if degenerate {
        log::warn!("cycle durations have zero variance (deterministic sojourns)");
    }

    // Influence functions of v and σ; their sample variance gives the
    // delta-method variance of the estimators.
    let mt = m.mean_dt;
    let spread = 2.0 * mt * sigma;
    let nf = n as f64;
    let cov_r_t = samples
        .iter()
        .map(|s| (s.delta_x - v * s.delta_t) * (s.delta_t - mt))
        .sum::<f64>()
        / (nf - 1.0);
    let (mut ssv, mut sss) = (0.0, 0.0);
    for s in samples {
        let r = s.delta_x - v * s.delta_t;
        let if_v = r / mt;
        let if_spread = (r * r - spread) - 2.0 * cov_r_t * if_v;
        let if_sigma = if_spread / (2.0 * mt) - spread / (2.0 * mt * mt) * (s.delta_t - mt);
        ssv += if_v * if_v;
        sss += if_sigma * if_sigma;
    }
    let v_se = (ssv / (nf - 1.0) / nf).sqrt();
    let sigma_se = (sss / (nf - 1.0) / nf).sqrt();

    Ok(RenewalEstimate {
        v_eff: v,
        sigma_eff: sigma,
        v_eff_se: v_se,
        sigma_eff_se: sigma_se,
        n_cycles: n as u64,
        moments: m,
        degenerate_time_variance: degenerate,
    })
}

/// Bootstrap standard errors of `(v_eff, σ_eff)`; replicate `b` resamples
/// with stream `b` of `seed`.
pub fn bootstrap_se(samples: &[CycleSample], replicates: u64, seed: u64) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 || replicates < 2 {
        return Err(Error::InvalidArgument("bootstrap needs >= 2 cycles and >= 2 replicates".into()));
    }
    let reps: Vec<(f64, f64)> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, b);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let (v, s, _) = point_estimate(samples, idx.into_iter());
            (v, s)
        })
        .collect();
    let sd = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let m = reps.iter().map(f).sum::<f64>() / replicates as f64;
        (reps.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (replicates - 1) as f64).sqrt()
    };
    Ok((sd(&|r| r.0), sd(&|r| r.1)))
}

/// Piecewise trajectory: `(times[k], positions[k])` are the jump epochs and
/// `states[k]` is the state occupied from `times[k]` on. The last entry sits
/// at `t_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub states: Vec<usize>,
}

impl Trajectory {
    pub fn final_position(&self) -> f64 {
        *self.positions.last().expect("non-empty trajectory")
    }

    /// Time spent in each state.
    pub fn occupancy(&self, n_states: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n_states];
        for k in 1..self.times.len() {
            occ[self.states[k - 1]] += self.times[k] - self.times[k - 1];
        }
        occ
    }
}

/// Simulates one path on `[0, t_max]` starting in `start` (default: the base
/// state) at `x = 0`. The final sojourn is truncated at `t_max`.
pub fn simulate_path(
    sojourn: &SojournModel,
    model: &ModelSpec,
    t_max: f64,
    seed: u64,
    start: Option<usize>,
    opts: CycleOptions,
) -> Result<Trajectory> {
    check_model_matches(sojourn, model)?;
    if !(t_max > 0.0) {
        return Err(Error::Domain(format!("t_max must be positive, got {t_max}")));
    }
    let mut rng = stream(seed, 0);
    let mut state = start.unwrap_or(sojourn.base_state);
    if state >= model.n_states() {
        return Err(Error::InvalidArgument(format!("start state {state} out of range")));
    }
    let (mut t, mut x) = (0.0, 0.0);
    let mut traj = Trajectory { times: vec![0.0], positions: vec![0.0], states: vec![state] };
    let mut jumps = 0u64;
    loop {
        let tau = sojourn.sojourns[state].sample(&mut rng);
        if t + tau >= t_max {
            let rest = t_max - t;
            x += step_displacement(state, rest, model, &mut rng);
            traj.times.push(t_max);
            traj.positions.push(x);
            traj.states.push(state);
            return Ok(traj);
        }
        t += tau;
        x += step_displacement(state, tau, model, &mut rng);
        state = sojourn.next_state(state, &mut rng);
        traj.times.push(t);
        traj.positions.push(x);
        traj.states.push(state);
        jumps += 1;
        if jumps >= opts.step_cap {
            return Err(Error::RunawayCycle { cycle: 0, cap: opts.step_cap });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::effective_transport;

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn sojourn_from_two_state() {
        let m = ModelSpec::two_state(1.0, 1.0, 2.0, 5.0);
        let s = sojourn_from_model(&m, Some(1)).unwrap();
        assert_eq!(s.sojourns()[0], Sojourn::Exponential { rate: 2.0 });
        assert_eq!(s.sojourns()[1], Sojourn::Exponential { rate: 5.0 });
        for j in 0..2 {
            assert!((s.sojourns()[j].mean() + 1.0 / m.rates()[(j, j)]).abs() < 1e-15);
        }
        let eq = sojourn_from_model(&ModelSpec::two_state(1.0, 1.0, 3.0, 3.0), None).unwrap();
        assert_eq!(eq.sojourns()[0].mean(), eq.sojourns()[1].mean());
    }

    #[test]
    fn default_base_is_most_occupied() {
        let m = ModelSpec::two_state(1.0, 1.0, 1.0, 3.0);
        assert_eq!(sojourn_from_model(&m, None).unwrap().base_state(), 0);
        let m = ModelSpec::two_state(1.0, 1.0, 3.0, 1.0);
        assert_eq!(sojourn_from_model(&m, None).unwrap().base_state(), 1);
    }

    #[test]
    fn displacement_laws() {
        let mut rng = stream(1, 0);
        let m = ModelSpec::two_state(2.0, 0.0, 1.0, 1.0);
        assert_eq!(step_displacement(0, 3.0, &m, &mut rng), 6.0);
        assert_eq!(step_displacement(1, 3.0, &m, &mut rng), 0.0);

        let d = 0.8;
        let tau = 1.7;
        let m = ModelSpec::two_state(0.0, d, 1.0, 1.0);
        let sq: Vec<f64> = (0..100_000).map(|_| step_displacement(1, tau, &m, &mut rng).powi(2)).collect();
        let (mean, se) = mean_se(&sq);
        assert!((mean - 2.0 * d * tau).abs() < 3.0 * se, "{mean} vs {}", 2.0 * d * tau);
    }

    #[test]
    fn two_state_cycles_alternate() {
        let m = ModelSpec::two_state(2.0, 1.0, 1.5, 0.5);
        let s = sojourn_from_model(&m, Some(1)).unwrap();
        let cycles = simulate_cycles(&s, &m, 200_000, 9, CycleOptions::default()).unwrap();
        assert!(cycles.iter().all(|c| c.n_steps == 2));

        let dts: Vec<f64> = cycles.iter().map(|c| c.delta_t).collect();
        let (mt, set) = mean_se(&dts);
        assert!((mt - (1.0 / 1.5 + 1.0 / 0.5)).abs() < 3.0 * set);

        // Only the moving sojourn contributes mean displacement: E ΔX = c/β₁.
        let dxs: Vec<f64> = cycles.iter().map(|c| c.delta_x).collect();
        let (mx, sex) = mean_se(&dxs);
        assert!((mx - 2.0 / 1.5).abs() < 3.0 * sex);
    }

    #[test]
    fn cycles_are_reproducible() {
        let m = ModelSpec::two_state(1.0, 1.0, 1.0, 1.0);
        let s = sojourn_from_model(&m, None).unwrap();
        let a = simulate_cycles(&s, &m, 1000, 42, CycleOptions::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_cycles(&s, &m, 1000, 42, CycleOptions::default()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn runaway_cycle_is_reported() {
        // Escape from the {1,2} pair back to state 0 is very rare.
        let mut rates = DMatrix::zeros(3, 3);
        rates[(1, 0)] = 1.0;
        rates[(2, 1)] = 1.0;
        rates[(1, 2)] = 1.0;
        rates[(0, 1)] = 1e-9;
        let m = ModelSpec::from_transition_rates(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], rates).unwrap();
        let s = sojourn_from_model(&m, Some(0)).unwrap();
        let err = simulate_cycles(&s, &m, 4, 1, CycleOptions { step_cap: 1000 }).unwrap_err();
        assert!(matches!(err, Error::RunawayCycle { cap: 1000, .. }));
    }

    #[test]
    fn estimator_matches_spectral_two_state() {
        let m = ModelSpec::two_state(2.0, 1.0, 1.0, 1.0);
        let s = sojourn_from_model(&m, Some(1)).unwrap();
        let cycles = simulate_cycles(&s, &m, 1_000_000, 2024, CycleOptions::default()).unwrap();
        let est = estimate_effective(&cycles).unwrap();
        assert!((est.v_eff - 1.0).abs() < 3.0 * est.v_eff_se, "{est:?}");
        assert!((est.sigma_eff - 1.0).abs() < 3.0 * est.sigma_eff_se, "{est:?}");
    }

    #[test]
    fn zero_displacements_give_zero_transport() {
        let samples: Vec<CycleSample> = (1..10)
            .map(|k| CycleSample { delta_t: k as f64, delta_x: 0.0, n_steps: 2 })
            .collect();
        let est = estimate_effective(&samples).unwrap();
        assert_eq!(est.v_eff, 0.0);
        assert_eq!(est.sigma_eff, 0.0);
        assert!(estimate_effective(&samples[..1]).is_err());
    }

    #[test]
    fn exact_cycle_moments_reproduce_closed_form() {
        // Exponential moments of a diffusing-then-moving cycle, worked by hand:
        // Var ΔX = 2d/β₂ + c²/β₁², Var ΔT = 1/β₁² + 1/β₂², Cov = c/β₁².
        for &(c, d, b1, b2) in &[(2.0, 1.0, 1.0, 1.0), (0.7, 0.3, 2.5, 0.4), (5.0, 0.01, 0.1, 3.0)] {
            let mean_dt: f64 = 1.0 / b1 + 1.0 / b2;
            let mean_dx = c / b1;
            let var_dx = 2.0 * d / b2 + c * c / (b1 * b1);
            let var_dt = 1.0 / (b1 * b1) + 1.0 / (b2 * b2);
            let cov = c / (b1 * b1);
            let v = mean_dx / mean_dt;
            let sigma = (var_dx + v * v * var_dt - 2.0 * v * cov) / (2.0 * mean_dt);
            let eff = effective_transport(&ModelSpec::two_state(c, d, b1, b2)).unwrap();
            assert!((v - eff.v_eff).abs() < 1e-13 * eff.v_eff.abs().max(1.0));
            assert!((sigma - eff.sigma_eff).abs() < 1e-12 * eff.sigma_eff);
        }
    }

    #[test]
    fn delta_method_errors_shrink_with_sample_size() {
        let m = ModelSpec::two_state(1.0, 0.5, 1.0, 2.0);
        let s = sojourn_from_model(&m, None).unwrap();
        let small = estimate_effective(&simulate_cycles(&s, &m, 50_000, 1, CycleOptions::default()).unwrap()).unwrap();
        let big = estimate_effective(&simulate_cycles(&s, &m, 200_000, 2, CycleOptions::default()).unwrap()).unwrap();
        let rv = small.v_eff_se / big.v_eff_se;
        let rs = small.sigma_eff_se / big.sigma_eff_se;
        // Quadrupling n halves the standard error; allow a factor 2 either way.
        assert!((1.0..4.0).contains(&rv), "{rv}");
        assert!((1.0..4.0).contains(&rs), "{rs}");
    }

    #[test]
    fn bootstrap_agrees_with_delta_method() {
        let m = ModelSpec::two_state(1.0, 0.5, 1.0, 2.0);
        let s = sojourn_from_model(&m, None).unwrap();
        let cycles = simulate_cycles(&s, &m, 20_000, 5, CycleOptions::default()).unwrap();
        let est = estimate_effective(&cycles).unwrap();
        let (bv, bs) = bootstrap_se(&cycles, 200, 77).unwrap();
        assert!((bv / est.v_eff_se - 1.0).abs() < 0.25);
        assert!((bs / est.sigma_eff_se - 1.0).abs() < 0.25);
    }

    #[test]
    fn deterministic_sojourns_flag_degenerate_variance() {
        let m = ModelSpec::two_state(1.0, 0.0, 1.0, 1.0);
        let s = SojournModel::new(
            vec![Sojourn::Deterministic { duration: 1.0 }, Sojourn::Deterministic { duration: 2.0 }],
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            1,
        )
        .unwrap();
        let cycles = simulate_cycles(&s, &m, 10, 3, CycleOptions::default()).unwrap();
        let est = estimate_effective(&cycles).unwrap();
        assert!(est.degenerate_time_variance);
        assert!((est.v_eff - 1.0 / 3.0).abs() < 1e-15);
        assert!(est.sigma_eff.abs() < 1e-15);
    }

    #[test]
    fn gamma_shape_one_matches_exponential() {
        let m = ModelSpec::two_state(1.5, 0.5, 1.0, 2.0);
        let exp = sojourn_from_model(&m, None).unwrap();
        let gam = exp.clone().with_gamma_shape(1.0).unwrap();
        let a = estimate_effective(&simulate_cycles(&exp, &m, 200_000, 10, CycleOptions::default()).unwrap()).unwrap();
        let b = estimate_effective(&simulate_cycles(&gam, &m, 200_000, 11, CycleOptions::default()).unwrap()).unwrap();
        let zv = (a.v_eff - b.v_eff) / (a.v_eff_se.hypot(b.v_eff_se));
        let zs = (a.sigma_eff - b.sigma_eff) / (a.sigma_eff_se.hypot(b.sigma_eff_se));
        assert!(zv.abs() < 3.0 && zs.abs() < 3.0, "{zv} {zs}");
    }

    #[test]
    fn base_state_does_not_change_long_run_values() {
        let m = ModelSpec::two_state(1.5, 0.5, 1.0, 2.0);
        let eff = effective_transport(&m).unwrap();
        for base in 0..2 {
            let s = sojourn_from_model(&m, Some(base)).unwrap();
            let est = estimate_effective(&simulate_cycles(&s, &m, 300_000, 100 + base as u64, CycleOptions::default()).unwrap()).unwrap();
            assert!((est.v_eff - eff.v_eff).abs() < 3.0 * est.v_eff_se);
            assert!((est.sigma_eff - eff.sigma_eff).abs() < 3.0 * est.sigma_eff_se);
        }
    }

    #[test]
    fn single_state_paths() {
        let adv = ModelSpec::new(vec![1.25], vec![0.0], DMatrix::zeros(1, 1)).unwrap();
        let s = sojourn_from_model(&adv, None).unwrap();
        let p = simulate_path(&s, &adv, 8.0, 1, None, CycleOptions::default()).unwrap();
        assert_eq!(p.final_position(), 10.0);

        let d = 0.6;
        let t = 2.0;
        let dif = ModelSpec::new(vec![0.0], vec![d], DMatrix::zeros(1, 1)).unwrap();
        let s = sojourn_from_model(&dif, None).unwrap();
        let sq: Vec<f64> = (0..10_000)
            .map(|k| simulate_path(&s, &dif, t, k, None, CycleOptions::default()).unwrap().final_position().powi(2))
            .collect();
        let (msd, se) = mean_se(&sq);
        assert!((msd - 2.0 * d * t).abs() < 3.0 * se);
    }

    #[test]
    fn occupancy_converges_to_stationary() {
        let mut rates = DMatrix::from_element(3, 3, 0.0);
        rates[(1, 0)] = 1.0;
        rates[(2, 1)] = 2.0;
        rates[(0, 2)] = 0.5;
        rates[(0, 1)] = 0.3;
        let m = ModelSpec::from_transition_rates(vec![1.0, -1.0, 0.0], vec![0.0, 0.0, 1.0], rates).unwrap();
        let pi = m.stationary_distribution().unwrap();
        let s = sojourn_from_model(&m, None).unwrap();
        // Batch means over independent long paths.
        let fracs: Vec<Vec<f64>> = (0..50)
            .map(|k| {
                let p = simulate_path(&s, &m, 20_000.0, 500 + k, None, CycleOptions::default()).unwrap();
                let occ = p.occupancy(3);
                let tot: f64 = occ.iter().sum();
                occ.iter().map(|o| o / tot).collect()
            })
            .collect();
        for j in 0..3 {
            let xs: Vec<f64> = fracs.iter().map(|f| f[j]).collect();
            let (mean, se) = mean_se(&xs);
            assert!((mean - pi.pi[j]).abs() < 3.0 * se + 1e-12, "state {j}: {mean} vs {}", pi.pi[j]);
        }
    }

    #[test]
    fn ensemble_spread_approaches_sigma_eff() {
        let m = ModelSpec::two_state(1.0, 0.5, 2.0, 2.0);
        let eff = effective_transport(&m).unwrap();
        let s = sojourn_from_model(&m, None).unwrap();
        let t = 50.0;
        let n = 20_000u64;
        let xs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|k| simulate_path(&s, &m, t, 9000 + k, None, CycleOptions::default()).unwrap().final_position())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let est = var / (2.0 * t);
        // Var of the sample variance for a near-Gaussian: 2σ⁴/(n-1); plus an
        // O(1/t) start-up bias from beginning in one state.
        let se = est * (2.0 / (n - 1) as f64).sqrt();
        assert!((est - eff.sigma_eff).abs() < 3.0 * se + 0.02 * eff.sigma_eff, "{est} vs {}", eff.sigma_eff);
    }
}
