//! Bounded Nelder–Mead simplex search and a deterministic multistart driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop once every vertex is within this ∞-norm distance of the best.
    pub x_tol: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl NelderMeadOptions {
    pub fn bounded(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { max_iter: 500, x_tol: 1e-4, initial_step: 0.5, lower, upper }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration.
    pub history: Vec<f64>,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimizes `f` from `x0`, projecting trial points onto the box.
/// Non-finite objective values are treated as `+∞`.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    assert_eq!(opts.lower.len(), n, "lower bound dimension");
    assert_eq!(opts.upper.len(), n, "upper bound dimension");
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| {
        evals += 1;
        let v = f(x);
        if v.is_finite() { v } else { f64::INFINITY }
    };

    let mut start = x0.to_vec();
    clamp(&mut start, &opts.lower, &opts.upper);
    let mut simplex = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        // Step inward if the vertex would land on or beyond the upper bound.
        v[i] += if v[i] + opts.initial_step <= opts.upper[i] { opts.initial_step } else { -opts.initial_step };
        clamp(&mut v, &opts.lower, &opts.upper);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let order = |values: &[f64]| {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        idx
    };

    while iterations < opts.max_iter {
        let idx = order(&values);
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter < opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let toward = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (c - w)).collect();
            clamp(&mut p, &opts.lower, &opts.upper);
            p
        };

        let xr = toward(1.0);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = toward(2.0);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = toward(0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = toward(-0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let p: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    values[i] = eval(&p);
                    simplex[i] = p;
                }
            }
        }
        history.push(values.iter().copied().fold(f64::INFINITY, f64::min));
    }

    let best = order(&values)[0];
    NelderMeadResult { x: simplex[best].clone(), f: values[best], iterations, evaluations: evals, converged, history }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOptimum {
    /// Index of the start that first reached this optimum.
    pub start_index: usize,
    pub start: Vec<f64>,
    pub result: NelderMeadResult,
}

/// Runs Nelder–Mead from every start in parallel and merges optima closer
/// than `merge_tol` (∞-norm). Output is ranked by objective, ties by start.
pub fn multistart<F>(f: F, starts: &[Vec<f64>], opts: &NelderMeadOptions, merge_tol: f64) -> Vec<LocalOptimum>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let runs: Vec<LocalOptimum> = starts
        .par_iter()
        .enumerate()
        .map(|(k, s)| LocalOptimum { start_index: k, start: s.clone(), result: nelder_mead(&f, s, opts) })
        .collect();
    let mut ranked = runs;
    ranked.sort_by(|a, b| a.result.f.total_cmp(&b.result.f).then(a.start_index.cmp(&b.start_index)));
    let mut distinct: Vec<LocalOptimum> = Vec::new();
    for r in ranked {
        let dup = distinct.iter().any(|d| {
            d.result.x.iter().zip(&r.result.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < merge_tol
        });
        if !dup {
            distinct.push(r);
        }
    }
    distinct
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let mut opts = NelderMeadOptions::bounded(vec![-5.0; 2], vec![5.0; 2]);
        opts.x_tol = 1e-8;
        opts.max_iter = 2000;
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn history_is_monotone() {
        let opts = NelderMeadOptions::bounded(vec![-5.0; 3], vec![5.0; 3]);
        let r = nelder_mead(|x| x.iter().map(|v| (v - 0.3).powi(2)).sum::<f64>() + x[0].sin(), &[2.0, -1.0, 4.0], &opts);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_bounds() {
        let opts = NelderMeadOptions::bounded(vec![1.0, -2.0], vec![3.0, 2.0]);
        let r = nelder_mead(|x| x[0] + x[1] * x[1], &[2.0, 1.0], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-4);
        assert!(r.x[1].abs() < 1e-3);
    }

    #[test]
    fn start_at_minimum_converges_immediately() {
        let opts = NelderMeadOptions::bounded(vec![-1.0; 2], vec![1.0; 2]);
        let r = nelder_mead(|x| x[0] * x[0] + x[1] * x[1], &[0.0, 0.0], &opts);
        assert!(r.f < 1e-10);
        assert!(r.converged);
    }

    #[test]
    fn infinite_values_are_avoided() {
        let opts = NelderMeadOptions::bounded(vec![-3.0], vec![3.0]);
        let r = nelder_mead(|x| if x[0] > 1.0 { f64::NAN } else { (x[0] - 0.5).powi(2) }, &[0.9], &opts);
        assert!((r.x[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn multistart_reports_both_wells() {
        // Two wells of different depth at ±1.
        let f = |x: &[f64]| (x[0] * x[0] - 1.0).powi(2) + 0.1 * (x[0] - 1.0).powi(2) / 4.0 + x[1] * x[1];
        let opts = NelderMeadOptions::bounded(vec![-3.0; 2], vec![3.0; 2]);
        let starts = vec![vec![-1.5, 0.3], vec![1.6, -0.2], vec![1.2, 0.1]];
        let optima = multistart(f, &starts, &opts, 1e-2);
        assert_eq!(optima.len(), 2);
        assert!(optima[0].result.x[0] > 0.0 && optima[1].result.x[0] < 0.0);
        assert!(optima[0].result.f <= optima[1].result.f);
    }
}
