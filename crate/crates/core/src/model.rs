//! The n-state transport model: per-state speeds and diffusivities plus a
//! conservative transition-rate matrix.
//!
//! Orientation: `rates[(i, j)]` for `i != j` is the rate of switching *from*
//! state `j` *to* state `i`, so a column of concentrations `u` evolves as
//! `du/dt = A u`. Every column therefore sums to zero. States are indexed
//! from zero; the 2-state constructor puts the moving population in state 0
//! and the diffusing population in state 1.
//!
//! # Model file
//!
//! Models are read from TOML:
//!
//! ```toml
//! [[states]]
//! label = "moving"
//! speed = 1.0
//! diffusivity = 0.0
//!
//! [[states]]
//! label = "diffusing"
//! speed = 0.0
//! diffusivity = 0.5
//!
//! [[rates]]
//! from = "moving"     # a label or a zero-based index
//! to = "diffusing"
//! rate = 1.0
//! ```
//!
//! `speed` and `diffusivity` default to zero. Duplicate `(from, to)` pairs and
//! self-transitions are rejected.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::bordered_solve;

/// Column sums smaller than this (relative to the column scale) count as zero.
const CONSERVATION_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    speeds: Vec<f64>,
    diffusivities: Vec<f64>,
    rates: DMatrix<f64>,
    labels: Vec<String>,
}

/// A single broken model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite,
    NonConservativeColumn { column: usize, sum: f64 },
    NegativeOffDiagonal { to: usize, from: usize, value: f64 },
    PositiveDiagonal { state: usize, value: f64 },
    NegativeDiffusivity { state: usize, value: f64 },
    NoTransport,
    NotIrreducible { unreachable: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite => write!(f, "non-finite parameter"),
            Violation::NonConservativeColumn { column, sum } => {
                write!(f, "column {column} not conservative (sum {sum:e})")
            }
            Violation::NegativeOffDiagonal { to, from, value } => {
                write!(f, "negative rate {value} from state {from} to state {to}")
            }
            Violation::PositiveDiagonal { state, value } => {
                write!(f, "positive diagonal {value} at state {state}")
            }
            Violation::NegativeDiffusivity { state, value } => {
                write!(f, "negative diffusivity {value} at state {state}")
            }
            Violation::NoTransport => write!(f, "all speeds and diffusivities are zero"),
            Violation::NotIrreducible { unreachable } => {
                write!(f, "not irreducible (states {unreachable:?} not mutually reachable)")
            }
        }
    }
}

impl ModelSpec {
    /// Builds a model from a full rate matrix. Only shapes are checked here;
    /// call [`ModelSpec::validate`] or [`ModelSpec::ensure_valid`] for the
    /// model invariants.
    pub fn new(speeds: Vec<f64>, diffusivities: Vec<f64>, rates: DMatrix<f64>) -> Result<Self> {
        let n = speeds.len();
        if n == 0 {
            return Err(Error::InvalidArgument("model needs at least one state".into()));
        }
        if diffusivities.len() != n || rates.nrows() != n || rates.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: {} speeds, {} diffusivities, {}x{} rates",
                n,
                diffusivities.len(),
                rates.nrows(),
                rates.ncols()
            )));
        }
        let labels = (0..n).map(|i| format!("s{i}")).collect();
        Ok(Self {
            speeds,
            diffusivities,
            rates,
            labels,
        })
    }

    /// Builds a model from off-diagonal rates only; the diagonal is set so
    /// each column sums to zero.
    pub fn from_transition_rates(
        speeds: Vec<f64>,
        diffusivities: Vec<f64>,
        mut rates: DMatrix<f64>,
    ) -> Result<Self> {
        close_columns(&mut rates);
        Self::new(speeds, diffusivities, rates)
    }

    /// The moving/diffusing model: state 0 advects at `c` and switches to
    /// state 1 at rate `beta1`; state 1 diffuses with `d` and switches back
    /// at rate `beta2`.
    pub fn two_state(c: f64, d: f64, beta1: f64, beta2: f64) -> Self {
        let rates = DMatrix::from_row_slice(2, 2, &[-beta1, beta2, beta1, -beta2]);
        Self::new(vec![c, 0.0], vec![0.0, d], rates)
            .expect("static shape")
            .with_labels(vec!["moving".into(), "diffusing".into()])
            .expect("static shape")
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_states() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} states",
                labels.len(),
                self.n_states()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.speeds.len()
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn diffusivities(&self) -> &[f64] {
        &self.diffusivities
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.rates[(state, state)]
    }

    /// Sets the `from -> to` rate and re-closes the affected column.
    pub fn set_rate(&mut self, from: usize, to: usize, rate: f64) {
        assert_ne!(from, to, "self-transition");
        self.rates[(to, from)] = rate;
        let off: f64 = (0..self.n_states())
            .filter(|&i| i != from)
            .map(|i| self.rates[(i, from)])
            .sum();
        self.rates[(from, from)] = -off;
    }

    /// Returns the same model with every rate multiplied by `k`.
    pub fn scaled_rates(&self, k: f64) -> Self {
        Self {
            rates: &self.rates * k,
            ..self.clone()
        }
    }

    /// Checks every model invariant; an empty list means the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let n = self.n_states();
        let mut out = Vec::new();
        let all_finite = self.speeds.iter().all(|v| v.is_finite())
            && self.diffusivities.iter().all(|v| v.is_finite())
            && self.rates.iter().all(|v| v.is_finite());
        if !all_finite {
            out.push(Violation::NonFinite);
            return out;
        }
        for j in 0..n {
            let col = self.rates.column(j);
            let sum: f64 = col.sum();
            let scale = col.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
            if sum.abs() > CONSERVATION_RTOL * scale {
                out.push(Violation::NonConservativeColumn { column: j, sum });
            }
            for i in 0..n {
                let v = self.rates[(i, j)];
                if i != j && v < 0.0 {
                    out.push(Violation::NegativeOffDiagonal { to: i, from: j, value: v });
                }
            }
            let diag = self.rates[(j, j)];
            if diag > 0.0 {
                out.push(Violation::PositiveDiagonal { state: j, value: diag });
            }
        }
        for (state, &value) in self.diffusivities.iter().enumerate() {
            if value < 0.0 {
                out.push(Violation::NegativeDiffusivity { state, value });
            }
        }
        if self.speeds.iter().all(|&c| c == 0.0) && self.diffusivities.iter().all(|&d| d == 0.0) {
            out.push(Violation::NoTransport);
        }
        let unreachable = self.not_strongly_connected();
        if !unreachable.is_empty() {
            out.push(Violation::NotIrreducible { unreachable });
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(v))
        }
    }

    pub fn is_irreducible(&self) -> bool {
        self.not_strongly_connected().is_empty()
    }

    /// States that are not both reachable from and able to reach state 0.
    fn not_strongly_connected(&self) -> Vec<usize> {
        let n = self.n_states();
        let forward = reach(n, 0, |from, to| self.rates[(to, from)] > 0.0);
        let backward = reach(n, 0, |from, to| self.rates[(from, to)] > 0.0);
        (0..n).filter(|&i| !(forward[i] && backward[i])).collect()
    }

    /// Unique probability vector with `A π = 0`.
    pub fn stationary_distribution(&self) -> Result<StationaryDistribution> {
        if !self.is_irreducible() {
            return Err(Error::Reducible);
        }
        let n = self.n_states();
        let ones = DVector::from_element(n, 1.0);
        let (mut pi, _) = bordered_solve(&self.rates, &ones, &ones, &DVector::zeros(n), 1.0)
            .map_err(|_| Error::Reducible)?;
        // Round-off can leave entries a few ulps below zero.
        for v in pi.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let total = pi.sum();
        pi /= total;
        Ok(StationaryDistribution { pi: pi.iter().copied().collect() })
    }

    /// Splits the generator into exit rates and jump probabilities.
    pub fn embedded_chain(&self) -> Result<EmbeddedChain> {
        let n = self.n_states();
        let exit_rates: Vec<f64> = (0..n).map(|j| self.exit_rate(j)).collect();
        if let Some(state) = exit_rates.iter().position(|&q| q <= 0.0) {
            return Err(Error::ZeroExitRate { state });
        }
        let mut jump_probs = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    jump_probs[(i, j)] = self.rates[(i, j)] / exit_rates[j];
                }
            }
        }
        Ok(EmbeddedChain { exit_rates, jump_probs })
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let file: ModelFile = toml::from_str(text).map_err(|e| e.to_string())?;
        file.into_model()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_toml_string(&self) -> String {
        let n = self.n_states();
        let states = (0..n)
            .map(|i| StateEntry {
                label: Some(self.labels[i].clone()),
                speed: self.speeds[i],
                diffusivity: self.diffusivities[i],
            })
            .collect();
        let mut rates = Vec::new();
        for j in 0..n {
            for i in 0..n {
                if i != j && self.rates[(i, j)] != 0.0 {
                    rates.push(RateEntry {
                        from: StateRef::Label(self.labels[j].clone()),
                        to: StateRef::Label(self.labels[i].clone()),
                        rate: self.rates[(i, j)],
                    });
                }
            }
        }
        toml::to_string(&ModelFile { states, rates }).expect("model serializes")
    }
}

fn close_columns(rates: &mut DMatrix<f64>) {
    let n = rates.nrows();
    for j in 0..n {
        let off: f64 = (0..n).filter(|&i| i != j).map(|i| rates[(i, j)]).sum();
        rates[(j, j)] = -off;
    }
}

fn reach(n: usize, start: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        for (v, s) in seen.iter_mut().enumerate() {
            if v != u && !*s && edge(u, v) {
                *s = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// Long-run fraction of time spent in each state.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub pi: Vec<f64>,
}

impl StationaryDistribution {
    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.pi)
    }

    /// Index of the most occupied state.
    pub fn argmax(&self) -> usize {
        self.pi
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// Exit rates and jump probabilities of the continuous-time chain.
/// `jump_probs[(i, j)]` is the probability that a sojourn in `j` ends with a
/// jump to `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedChain {
    pub exit_rates: Vec<f64>,
    pub jump_probs: DMatrix<f64>,
}

impl EmbeddedChain {
    /// Rebuilds the generator `A[i][j] = q_j P[i][j]`, `A[j][j] = -q_j`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.exit_rates.len();
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                a[(i, j)] = if i == j {
                    -self.exit_rates[j]
                } else {
                    self.exit_rates[j] * self.jump_probs[(i, j)]
                };
            }
        }
        a
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    states: Vec<StateEntry>,
    #[serde(default)]
    rates: Vec<RateEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default)]
    speed: f64,
    #[serde(default)]
    diffusivity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateEntry {
    from: StateRef,
    to: StateRef,
    rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum StateRef {
    Index(usize),
    Label(String),
}

impl ModelFile {
    fn into_model(self) -> std::result::Result<ModelSpec, String> {
        let n = self.states.len();
        if n == 0 {
            return Err("no states defined".into());
        }
        let labels: Vec<String> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| s.label.clone().unwrap_or_else(|| format!("s{i}")))
            .collect();
        let mut uniq = HashSet::new();
        for l in &labels {
            if !uniq.insert(l.as_str()) {
                return Err(format!("duplicate state label {l:?}"));
            }
        }
        let resolve = |r: &StateRef| -> std::result::Result<usize, String> {
            match r {
                StateRef::Index(i) if *i < n => Ok(*i),
                StateRef::Index(i) => Err(format!("state index {i} out of range")),
                StateRef::Label(l) => labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| format!("unknown state label {l:?}")),
            }
        };
        let mut rates = DMatrix::zeros(n, n);
        let mut seen = HashSet::new();
        for entry in &self.rates {
            let from = resolve(&entry.from)?;
            let to = resolve(&entry.to)?;
            if from == to {
                return Err(format!("self-transition on state {from}"));
            }
            if !seen.insert((from, to)) {
                return Err(format!("duplicate rate from {from} to {to}"));
            }
            rates[(to, from)] = entry.rate;
        }
        close_columns(&mut rates);
        let speeds = self.states.iter().map(|s| s.speed).collect();
        let diffusivities = self.states.iter().map(|s| s.diffusivity).collect();
        ModelSpec::new(speeds, diffusivities, rates)
            .and_then(|m| m.with_labels(labels))
            .map_err(|e| e.to_string())
    }
}
