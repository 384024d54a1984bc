//! Cost structure, Hamiltonian and closed-form feedback control.
//!
//! The running cost is separated as `f(x, η, a) = f1(x, a) + f2(x, η)` with
//!
//! ```text
//! f1(x, a) = b1[x] + Σ_{y≠x} c[y] · a_y²
//! ```
//!
//! and the admissible off-diagonal rates restricted to the box `[a_lo, a_hi]`.
//! The minimizer of `a ↦ f1(x, a) + Σ_{y≠x} a_y p_y` over the box is the
//! coordinatewise projection of `-p_y / (2 c_y)`, which never depends on `η`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default lower bound on every off-diagonal transition rate.
pub const DEFAULT_A_LO: f64 = 0.1;
/// Default upper bound on every off-diagonal transition rate.
pub const DEFAULT_A_HI: f64 = 10.0;

const SIMPLEX_TOL: f64 = 1e-12;

/// A user-supplied measure-dependent cost `(x, η) ↦ value`.
///
/// Models built from this hook are never checked by [`ModelSpec::validate`];
/// their monotonicity conditions are reported as unvalidated.
pub trait MeasureFunction: Send + Sync + fmt::Debug {
    fn value(&self, x: usize, eta: &[f64]) -> f64;

    /// Ambient gradient in `η`. Defaults to central differences.
    fn gradient(&self, x: usize, eta: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut probe = eta.to_vec();
        (0..eta.len())
            .map(|z| {
                probe[z] = eta[z] + h;
                let up = self.value(x, &probe);
                probe[z] = eta[z] - h;
                let down = self.value(x, &probe);
                probe[z] = eta[z];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// Measure-dependent cost family. Every closed-form family acts on the own
/// coordinate only: `f(x, η) = b(η_x)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum MeasureCost {
    /// `b(r) = 0`.
    Zero {},
    /// `b(r) = slope · r + intercept`.
    Linear {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// `b(r) = coef · r^exponent`, `exponent ≥ 1`.
    Power { coef: f64, exponent: f64 },
    /// Arbitrary user function (in-process only, unvalidated).
    #[serde(skip)]
    Custom(Arc<dyn MeasureFunction>),
}

impl MeasureCost {
    pub fn zero() -> Self {
        MeasureCost::Zero {}
    }

    pub fn linear(slope: f64) -> Self {
        MeasureCost::Linear {
            slope,
            intercept: 0.0,
        }
    }

    pub fn custom(f: impl MeasureFunction + 'static) -> Self {
        MeasureCost::Custom(Arc::new(f))
    }

    pub fn is_custom(&self) -> bool {
        matches!(self, MeasureCost::Custom(_))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            MeasureCost::Zero {} => true,
            MeasureCost::Linear { slope, intercept } => *slope == 0.0 && *intercept == 0.0,
            MeasureCost::Power { coef, .. } => *coef == 0.0,
            MeasureCost::Custom(_) => false,
        }
    }

    #[inline]
    pub fn value(&self, x: usize, eta: &[f64]) -> f64 {
        match self {
            MeasureCost::Zero {} => 0.0,
            MeasureCost::Linear { slope, intercept } => slope * eta[x] + intercept,
            MeasureCost::Power { coef, exponent } => coef * eta[x].max(0.0).powf(*exponent),
            MeasureCost::Custom(f) => f.value(x, eta),
        }
    }

    /// Ambient gradient `∇_η f(x, η)`.
    pub fn gradient(&self, x: usize, eta: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; eta.len()];
        match self {
            MeasureCost::Zero {} => {}
            MeasureCost::Linear { slope, .. } => grad[x] = *slope,
            MeasureCost::Power { coef, exponent } => {
                grad[x] = coef * exponent * eta[x].max(0.0).powf(exponent - 1.0)
            }
            MeasureCost::Custom(f) => return f.gradient(x, eta),
        }
        grad
    }

    /// `∇_η f(x, η) · m` without allocating for the closed-form families.
    #[inline]
    pub fn directional(&self, x: usize, eta: &[f64], m: &[f64]) -> f64 {
        match self {
            MeasureCost::Zero {} => 0.0,
            MeasureCost::Linear { slope, .. } => slope * m[x],
            MeasureCost::Power { coef, exponent } => {
                coef * exponent * eta[x].max(0.0).powf(exponent - 1.0) * m[x]
            }
            MeasureCost::Custom(f) => dot(&f.gradient(x, eta), m),
        }
    }
}

impl Default for MeasureCost {
    fn default() -> Self {
        MeasureCost::zero()
    }
}

/// The data of a finite-state mean-field game with separated costs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub b1: Vec<f64>,
    pub c: Vec<f64>,
    #[serde(default)]
    pub f2: MeasureCost,
    #[serde(default)]
    pub g: MeasureCost,
    #[serde(default = "default_a_lo")]
    pub a_lo: f64,
    #[serde(default = "default_a_hi")]
    pub a_hi: f64,
}

fn default_a_lo() -> f64 {
    DEFAULT_A_LO
}

fn default_a_hi() -> f64 {
    DEFAULT_A_HI
}

impl ModelSpec {
    pub fn new(
        d: usize,
        horizon: f64,
        b1: Vec<f64>,
        c: Vec<f64>,
        f2: MeasureCost,
        g: MeasureCost,
    ) -> Result<Self> {
        let model = ModelSpec {
            d,
            horizon,
            b1,
            c,
            f2,
            g,
            a_lo: DEFAULT_A_LO,
            a_hi: DEFAULT_A_HI,
        };
        model.check_shape()?;
        Ok(model)
    }

    pub fn with_rate_bounds(mut self, a_lo: f64, a_hi: f64) -> Result<Self> {
        self.a_lo = a_lo;
        self.a_hi = a_hi;
        self.check_shape()?;
        Ok(self)
    }

    /// `b1 ≡ 0`, `f2 ≡ 0`, `g ≡ 0` with a uniform control weight: the value is
    /// `(T - t) · (d - 1) · c · a_lo²` for every player count.
    pub fn decoupled(d: usize, horizon: f64, c: f64) -> Result<Self> {
        ModelSpec::new(
            d,
            horizon,
            vec![0.0; d],
            vec![c; d],
            MeasureCost::zero(),
            MeasureCost::zero(),
        )
    }

    /// Two states, unit horizon, `c = (1/2, 1/2)`, `f2(x, η) = η_x`,
    /// `g(x, η) = η_x`. Congestion-averse players on both costs.
    pub fn two_state_congestion() -> Self {
        ModelSpec::new(
            2,
            1.0,
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            MeasureCost::linear(1.0),
            MeasureCost::linear(1.0),
        )
        .expect("static model is well formed")
    }

    /// Structural checks: dimensions, finiteness, ordered rate bounds.
    /// Positivity conditions are reported by [`ModelSpec::validate`] instead.
    pub fn check_shape(&self) -> Result<()> {
        if self.d < 2 {
            return Err(invalid(format!("state count d={} must be >= 2", self.d)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("horizon T={} must be positive", self.horizon)));
        }
        if self.b1.len() != self.d || self.c.len() != self.d {
            return Err(invalid(format!(
                "b1 has {} entries and c has {}, expected d={}",
                self.b1.len(),
                self.c.len(),
                self.d
            )));
        }
        if self.b1.iter().chain(&self.c).any(|v| !v.is_finite()) {
            return Err(invalid("b1 and c must be finite"));
        }
        if !(self.a_lo.is_finite() && self.a_hi.is_finite() && self.a_lo < self.a_hi) {
            return Err(invalid(format!(
                "rate bounds must satisfy a_lo < a_hi, got [{}, {}]",
                self.a_lo, self.a_hi
            )));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let model: ModelSpec = serde_json::from_str(text)?;
        model.check_shape()?;
        Ok(model)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        if self.f2.is_custom() || self.g.is_custom() {
            return Err(invalid("custom cost functions cannot be serialized"));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.d {
            return Err(invalid(format!("state {x} out of range for d={}", self.d)));
        }
        Ok(())
    }

    fn check_len(&self, what: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.d {
            return Err(invalid(format!(
                "{what} has length {}, expected d={}",
                v.len(),
                self.d
            )));
        }
        Ok(())
    }

    /// `f1(x, a)`; ignores the `x`-th entry of `a`.
    #[inline]
    pub fn control_cost(&self, x: usize, a: &[f64]) -> f64 {
        let mut total = self.b1[x];
        for y in 0..self.d {
            if y != x {
                total += self.c[y] * a[y] * a[y];
            }
        }
        total
    }

    #[inline]
    pub fn f2(&self, x: usize, eta: &[f64]) -> f64 {
        self.f2.value(x, eta)
    }

    #[inline]
    pub fn terminal(&self, x: usize, eta: &[f64]) -> f64 {
        self.g.value(x, eta)
    }

    /// `f(x, η, a) = f1(x, a) + f2(x, η)`.
    pub fn running_cost(&self, x: usize, eta: &[f64], a: &RateVector) -> Result<f64> {
        self.check_state(x)?;
        self.check_len("eta", eta)?;
        self.check_len("rate vector", &a.rates)?;
        if a.base_state != x {
            return Err(invalid(format!(
                "rate vector is based at state {}, not {x}",
                a.base_state
            )));
        }
        Ok(self.control_cost(x, &a.rates) + self.f2(x, eta))
    }

    /// `h(x, η, a, p) = f(x, η, a) + Σ_{y≠x} a_y p_y`.
    pub fn hamiltonian_h(&self, x: usize, eta: &[f64], a: &RateVector, p: &[f64]) -> Result<f64> {
        self.check_len("p", p)?;
        let base = self.running_cost(x, eta, a)?;
        let pairing: f64 = (0..self.d)
            .filter(|&y| y != x)
            .map(|y| a.rates[y] * p[y])
            .sum();
        Ok(base + pairing)
    }

    /// Optimal off-diagonal rate toward `y` given the adjoint entry `p_y`.
    #[inline]
    pub fn optimal_rate(&self, y: usize, p_y: f64) -> f64 {
        (-p_y / (2.0 * self.c[y])).clamp(self.a_lo, self.a_hi)
    }

    /// Derivative of [`ModelSpec::optimal_rate`] in `p_y`: `-1/(2 c_y)` when the
    /// unconstrained minimizer lies strictly inside the box, zero otherwise.
    #[inline]
    pub fn optimal_rate_slope(&self, y: usize, p_y: f64) -> f64 {
        let raw = -p_y / (2.0 * self.c[y]);
        if raw > self.a_lo && raw < self.a_hi {
            -1.0 / (2.0 * self.c[y])
        } else {
            0.0
        }
    }

    /// Writes the optimal rates for a player at `x` into `out` (diagonal
    /// entry set to minus the off-diagonal sum).
    #[inline]
    pub fn optimal_rates_into(&self, x: usize, p: &[f64], out: &mut [f64]) {
        let mut total = 0.0;
        for y in 0..self.d {
            if y != x {
                let a = self.optimal_rate(y, p[y]);
                out[y] = a;
                total += a;
            }
        }
        out[x] = -total;
    }

    /// `H1(x, p) = min_a f1(x, a) + Σ_{y≠x} a_y p_y` over the box.
    #[inline]
    pub fn hamiltonian_1(&self, x: usize, p: &[f64]) -> f64 {
        let mut total = self.b1[x];
        for y in 0..self.d {
            if y != x {
                let a = self.optimal_rate(y, p[y]);
                total += self.c[y] * a * a + a * p[y];
            }
        }
        total
    }

    /// `H(x, η, p) = H1(x, p) + f2(x, η)`.
    #[inline]
    pub fn hamiltonian(&self, x: usize, eta: &[f64], p: &[f64]) -> f64 {
        self.hamiltonian_1(x, p) + self.f2(x, eta)
    }

    /// Box-constrained minimizer of `h(x, η, ·, p)` and the minimal value.
    pub fn minimize_hamiltonian(&self, x: usize, eta: &[f64], p: &[f64]) -> Result<(RateVector, f64)> {
        self.check_state(x)?;
        self.check_len("eta", eta)?;
        self.check_len("p", p)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(invalid("adjoint vector p must be finite"));
        }
        let mut rates = vec![0.0; self.d];
        self.optimal_rates_into(x, p, &mut rates);
        let a = RateVector {
            base_state: x,
            rates,
        };
        let value = self.hamiltonian(x, eta, p);
        Ok((a, value))
    }

    /// Upper bound on `|f|` over states, measures and admissible rates.
    pub fn running_cost_bound(&self) -> f64 {
        let control: f64 = self.c.iter().map(|c| c.abs()).sum::<f64>() * self.a_hi * self.a_hi;
        let b1 = self.b1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        b1 + control + measure_cost_bound(&self.f2, self.d)
    }

    /// Upper bound on `|g|`.
    pub fn terminal_bound(&self) -> f64 {
        measure_cost_bound(&self.g, self.d)
    }

    /// Numerical spot checks of the standing assumptions. Never fails; the
    /// report lists every condition with its worst sample.
    pub fn validate(&self) -> ValidationReport {
        validate_model(self)
    }
}

fn measure_cost_bound(cost: &MeasureCost, d: usize) -> f64 {
    match cost {
        MeasureCost::Zero {} => 0.0,
        MeasureCost::Linear { slope, intercept } => slope.abs() + intercept.abs(),
        MeasureCost::Power { coef, .. } => coef.abs(),
        MeasureCost::Custom(f) => {
            // vertices and barycentre only; custom costs are unvalidated anyway
            let mut bound = 0.0f64;
            let bary = vec![1.0 / d as f64; d];
            for x in 0..d {
                bound = bound.max(f.value(x, &bary).abs());
                for v in 0..d {
                    let mut e = vec![0.0; d];
                    e[v] = 1.0;
                    bound = bound.max(f.value(x, &e).abs());
                }
            }
            bound
        }
    }
}

/// A probability vector on `[d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0 || *w > 1.0) {
            return Err(invalid(format!("weights {weights:?} must lie in [0, 1]")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!(
                "weights sum to {sum}, expected 1 within {SIMPLEX_TOL:e}"
            )));
        }
        Ok(SimplexPoint(weights))
    }

    pub fn uniform(d: usize) -> Self {
        SimplexPoint(vec![1.0 / d as f64; d])
    }

    pub fn vertex(d: usize, x: usize) -> Self {
        let mut w = vec![0.0; d];
        w[x] = 1.0;
        SimplexPoint(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for SimplexPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Transition rates of a player at `base_state`; the diagonal entry holds
/// minus the sum of the off-diagonal ones.
#[derive(Clone, Debug, PartialEq)]
pub struct RateVector {
    pub base_state: usize,
    pub rates: Vec<f64>,
}

impl RateVector {
    /// Builds a rate vector from the full vector, overwriting the diagonal.
    pub fn new(base_state: usize, mut rates: Vec<f64>) -> Result<Self> {
        if base_state >= rates.len() {
            return Err(invalid("base state outside the rate vector"));
        }
        if rates.iter().enumerate().any(|(y, r)| y != base_state && !(r.is_finite() && *r >= 0.0)) {
            return Err(invalid(format!("off-diagonal rates {rates:?} must be nonnegative")));
        }
        let off: f64 = rates
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != base_state)
            .map(|(_, r)| r)
            .sum();
        rates[base_state] = -off;
        Ok(RateVector { base_state, rates })
    }

    /// Checks the box constraint on every off-diagonal entry.
    pub fn within_bounds(&self, a_lo: f64, a_hi: f64) -> bool {
        self.rates
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != self.base_state)
            .all(|(_, r)| *r >= a_lo && *r <= a_hi)
    }

    pub fn total_rate(&self) -> f64 {
        -self.rates[self.base_state]
    }
}

/// `Δ_x φ = (φ(l) - φ(x))_l`.
pub fn increments(values: &[f64], x: usize) -> Vec<f64> {
    let base = values[x];
    values.iter().map(|v| v - base).collect()
}

#[inline]
pub(crate) fn increments_into(values: &[f64], x: usize, out: &mut [f64]) {
    let base = values[x];
    for (o, v) in out.iter_mut().zip(values) {
        *o = v - base;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of one validation condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The condition involves a user-supplied function and was not checked.
    Unvalidated,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Worst value of the checked quantity (sign convention per condition).
    pub worst_value: f64,
    /// Sample achieving `worst_value`, flattened.
    pub worst_sample: Vec<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// First failing condition as an error; unvalidated conditions pass.
    pub fn into_result(self) -> Result<()> {
        match self.checks.iter().find(|c| c.status == CheckStatus::Fail) {
            Some(c) => Err(Error::InvalidInput(format!(
                "model check {} failed: {}",
                c.name, c.detail
            ))),
            None => Ok(()),
        }
    }
}

const VALIDATION_SAMPLES: usize = 512;

fn random_simplex(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// See [`ModelSpec::validate`].
pub fn validate_model(model: &ModelSpec) -> ValidationReport {
    let d = model.d;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checks = Vec::new();

    checks.push(ConditionCheck {
        name: "rate_bounds",
        status: if model.a_lo > 0.0 && model.a_hi > model.a_lo {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        worst_value: model.a_lo,
        worst_sample: vec![model.a_lo, model.a_hi],
        detail: "minimal transition rate must be positive".into(),
    });

    // strong convexity of f1 in a with c_V = min c
    let c_min = model.c.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut worst = f64::INFINITY;
    let mut worst_sample = Vec::new();
    for _ in 0..VALIDATION_SAMPLES {
        let x = rng.random_range(0..d);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(model.a_lo..model.a_hi)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(model.a_lo..model.a_hi)).collect();
        let mut gap = model.control_cost(x, &a) - model.control_cost(x, &b);
        let mut dist2 = 0.0;
        for y in (0..d).filter(|&y| y != x) {
            gap -= 2.0 * model.c[y] * b[y] * (a[y] - b[y]);
            dist2 += (a[y] - b[y]).powi(2);
        }
        if dist2 > 0.0 {
            let ratio = gap / dist2;
            if ratio < worst {
                worst = ratio;
                worst_sample = a.iter().chain(&b).cloned().collect();
            }
        }
    }
    checks.push(ConditionCheck {
        name: "control_convexity",
        status: if c_min > 0.0 && worst > 0.0 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        worst_value: c_min.min(worst),
        worst_sample,
        detail: format!("f1 strongly convex in a: min c = {c_min}, worst sampled modulus {worst:.6}"),
    });

    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..VALIDATION_SAMPLES)
        .map(|_| (random_simplex(&mut rng, d), random_simplex(&mut rng, d)))
        .collect();
    let monotone_ratio = |cost: &MeasureCost| -> (f64, Vec<f64>) {
        let mut worst = f64::INFINITY;
        let mut sample = Vec::new();
        for (eta, other) in &pairs {
            let mut inner = 0.0;
            let mut dist2 = 0.0;
            for x in 0..d {
                inner += (eta[x] - other[x]) * (cost.value(x, eta) - cost.value(x, other));
                dist2 += (eta[x] - other[x]).powi(2);
            }
            if dist2 > 1e-14 {
                let ratio = inner / dist2;
                if ratio < worst {
                    worst = ratio;
                    sample = eta.iter().chain(other).cloned().collect();
                }
            }
        }
        (worst, sample)
    };

    if model.g.is_custom() {
        checks.push(unvalidated("terminal_monotonicity"));
    } else {
        let (worst, sample) = monotone_ratio(&model.g);
        checks.push(ConditionCheck {
            name: "terminal_monotonicity",
            status: if worst >= -1e-12 {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            worst_value: worst,
            worst_sample: sample,
            detail: "Σ_x (η_x - η'_x)(g(x,η) - g(x,η')) >= 0".into(),
        });
    }

    if model.f2.is_custom() {
        checks.push(unvalidated("running_monotonicity"));
    } else {
        let (worst, sample) = monotone_ratio(&model.f2);
        checks.push(ConditionCheck {
            name: "running_monotonicity",
            status: if worst > 1e-9 {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            worst_value: worst,
            worst_sample: sample,
            detail: format!("Σ_x (η_x - η'_x)(f2(x,η) - f2(x,η')) >= c_V |η - η'|², estimated c_V = {worst:.6}"),
        });
    }

    // concavity of H1: H1(p) - H1(p') - a*(p')·(p - p') <= -c_M |p - p'|²
    let span = 2.0 * model.a_hi * c_min.max(1e-12) + 1.0;
    let mut worst = f64::NEG_INFINITY;
    let mut worst_sample = Vec::new();
    let mut rates = vec![0.0; d];
    for _ in 0..VALIDATION_SAMPLES {
        let x = rng.random_range(0..d);
        let mut p: Vec<f64> = (0..d).map(|_| rng.random_range(-span..span)).collect();
        let mut q: Vec<f64> = (0..d).map(|_| rng.random_range(-span..span)).collect();
        p[x] = 0.0;
        q[x] = 0.0;
        model.optimal_rates_into(x, &q, &mut rates);
        let lin: f64 = (0..d).map(|y| rates[y] * (p[y] - q[y])).sum();
        let gap = model.hamiltonian_1(x, &p) - model.hamiltonian_1(x, &q) - lin;
        let dist2: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
        if dist2 > 0.0 && gap / dist2 > worst {
            worst = gap / dist2;
            worst_sample = p.iter().chain(&q).cloned().collect();
        }
    }
    checks.push(ConditionCheck {
        name: "hamiltonian_concavity",
        status: if worst <= 1e-12 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        worst_value: worst,
        worst_sample,
        detail: "H1 concave in p; strict modulus vanishes on clamp-saturated samples".into(),
    });

    ValidationReport { checks }
}

fn unvalidated(name: &'static str) -> ConditionCheck {
    ConditionCheck {
        name,
        status: CheckStatus::Unvalidated,
        worst_value: f64::NAN,
        worst_sample: Vec::new(),
        detail: "custom cost function: unvalidated".into(),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_state(b2: MeasureCost, b3: MeasureCost) -> ModelSpec {
        ModelSpec::new(2, 1.0, vec![0.0, 0.0], vec![0.5, 0.5], b2, b3).unwrap()
    }

    #[test]
    fn running_cost_quadratic_term() {
        let m = two_state(MeasureCost::zero(), MeasureCost::zero());
        let a = RateVector::new(0, vec![0.0, 1.0]).unwrap();
        assert_eq!(a.rates, vec![-1.0, 1.0]);
        assert_relative_eq!(m.running_cost(0, &[0.3, 0.7], &a).unwrap(), 0.5);
    }

    #[test]
    fn running_cost_at_lower_bound() {
        let m = ModelSpec::new(
            3,
            1.0,
            vec![0.0; 3],
            vec![0.2, 0.5, 1.5],
            MeasureCost::zero(),
            MeasureCost::zero(),
        )
        .unwrap();
        let lo = m.a_lo;
        for x in 0..3 {
            let mut r = vec![lo; 3];
            r[x] = 0.0;
            let a = RateVector::new(x, r).unwrap();
            let expected: f64 = (0..3).filter(|&y| y != x).map(|y| m.c[y] * lo * lo).sum();
            assert_relative_eq!(m.running_cost(x, &[1.0 / 3.0; 3], &a).unwrap(), expected);
        }
    }

    #[test]
    fn running_cost_ignores_own_entry() {
        let m = ModelSpec::two_state_congestion();
        let a = RateVector::new(1, vec![0.7, 0.0]).unwrap();
        let mut b = a.clone();
        b.rates[1] = 123.0;
        let eta = [0.4, 0.6];
        assert_eq!(m.running_cost(1, &eta, &a).unwrap(), m.running_cost(1, &eta, &b).unwrap());
    }

    #[test]
    fn running_cost_rejects_mismatch() {
        let m = ModelSpec::two_state_congestion();
        let a = RateVector::new(0, vec![0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(m.running_cost(0, &[0.5, 0.5], &a), Err(Error::InvalidInput(_))));
        let a = RateVector::new(1, vec![1.0, 0.0]).unwrap();
        assert!(m.running_cost(0, &[0.5, 0.5], &a).is_err());
    }

    #[test]
    fn hamiltonian_h_examples() {
        let m = two_state(MeasureCost::zero(), MeasureCost::zero());
        let a = RateVector::new(0, vec![0.0, 1.0]).unwrap();
        let eta = [0.5, 0.5];
        assert_relative_eq!(m.hamiltonian_h(0, &eta, &a, &[0.0, 0.0]).unwrap(), 0.5);
        assert_relative_eq!(m.hamiltonian_h(0, &eta, &a, &[0.0, -1.0]).unwrap(), -0.5);
        let shifted = m.hamiltonian_h(0, &eta, &a, &[2.0, 1.0]).unwrap();
        assert_relative_eq!(shifted, -0.5 + 2.0 * a.total_rate());
    }

    #[test]
    fn minimizer_matches_grid_search() {
        let m = ModelSpec::two_state_congestion();
        let eta = [0.3, 0.7];
        let p = [0.0, -1.0];
        let (a, h) = m.minimize_hamiltonian(0, &eta, &p).unwrap();
        // brute force over a_2 in [0.1, 10] with step 1e-4
        let mut best = (f64::INFINITY, 0.0);
        let steps = ((m.a_hi - m.a_lo) / 1e-4).round() as usize;
        for k in 0..=steps {
            let a2 = m.a_lo + k as f64 * 1e-4;
            let r = RateVector::new(0, vec![0.0, a2]).unwrap();
            let v = m.hamiltonian_h(0, &eta, &r, &p).unwrap();
            if v < best.0 {
                best = (v, a2);
            }
        }
        assert_relative_eq!(a.rates[1], best.1, epsilon = 1e-9);
        assert_relative_eq!(a.rates[1], 1.0);
        assert_relative_eq!(h, best.0, epsilon = 1e-9);
        assert_relative_eq!(h, -0.5 + m.b1[0] + m.f2(0, &eta), epsilon = 1e-12);
    }

    #[test]
    fn minimizer_clamps() {
        let m = ModelSpec::two_state_congestion();
        let eta = [0.5, 0.5];
        let (a, _) = m.minimize_hamiltonian(0, &eta, &[0.0, -100.0]).unwrap();
        assert_eq!(a.rates[1], 10.0);
        let (a, _) = m.minimize_hamiltonian(0, &eta, &[0.0, 5.0]).unwrap();
        assert_eq!(a.rates[1], 0.1);
        assert_eq!(a.rates[0], -0.1);
        assert!(m.minimize_hamiltonian(0, &eta, &[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn validation_default_family_passes() {
        let report = ModelSpec::two_state_congestion().validate();
        assert!(report.all_pass(), "{report:#?}");
        let c_v = report.get("running_monotonicity").unwrap().worst_value;
        assert_relative_eq!(c_v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn validation_flags_decreasing_terminal_cost() {
        let m = two_state(MeasureCost::linear(1.0), MeasureCost::linear(-1.0));
        let report = m.validate();
        let check = report.get("terminal_monotonicity").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        assert_relative_eq!(check.worst_value, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn validation_flags_zero_control_weight() {
        let mut m = ModelSpec::two_state_congestion();
        m.c = vec![0.0, 0.5];
        let report = m.validate();
        assert_eq!(report.get("control_convexity").unwrap().status, CheckStatus::Fail);
        assert!(report.into_result().is_err());
    }

    #[derive(Debug)]
    struct Quadratic;

    impl MeasureFunction for Quadratic {
        fn value(&self, x: usize, eta: &[f64]) -> f64 {
            eta[x] * eta[x]
        }
    }

    #[test]
    fn custom_costs_are_unvalidated() {
        let m = two_state(MeasureCost::custom(Quadratic), MeasureCost::zero());
        let report = m.validate();
        assert_eq!(
            report.get("running_monotonicity").unwrap().status,
            CheckStatus::Unvalidated
        );
        assert!(!report.all_pass());
        let g = m.f2.gradient(1, &[0.25, 0.75]);
        assert_relative_eq!(g[1], 1.5, epsilon = 1e-6);
        assert!(m.to_json().is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{
            "d": 2, "T": 1.0, "b1": [0.0, 0.0], "c": [0.5, 0.5],
            "f2": {"family": "linear", "params": {"slope": 1.0}},
            "g": {"family": "power", "params": {"coef": 1.0, "exponent": 2.0}},
            "a_lo": 0.1, "a_hi": 10.0
        }"#;
        let m = ModelSpec::from_json_str(text).unwrap();
        assert_eq!(m.f2(0, &[0.25, 0.75]), 0.25);
        assert_eq!(m.terminal(1, &[0.5, 0.5]), 0.25);
        let back = ModelSpec::from_json_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.c, m.c);
        let zero = r#"{"d": 3, "T": 2.0, "b1": [0,0,0], "c": [1,1,1], "f2": {"family": "zero", "params": {}}}"#;
        let m = ModelSpec::from_json_str(zero).unwrap();
        assert!(m.g.is_zero() && m.f2.is_zero());
        assert_eq!(m.a_lo, DEFAULT_A_LO);
        assert!(ModelSpec::from_json_str(r#"{"d": 1, "T": 1, "b1": [0], "c": [1]}"#).is_err());
    }

    #[test]
    fn simplex_point_validation() {
        assert!(SimplexPoint::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![-0.1, 1.1]).is_err());
        assert_eq!(SimplexPoint::vertex(3, 2).weights(), &[0.0, 0.0, 1.0]);
    }

    fn three_state() -> ModelSpec {
        ModelSpec::new(
            3,
            1.0,
            vec![0.2, -0.1, 0.0],
            vec![0.3, 0.5, 0.9],
            MeasureCost::linear(2.0),
            MeasureCost::linear(1.0),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn argmin_beats_feasible_rates(
            x in 0usize..3,
            p in proptest::collection::vec(-20.0f64..20.0, 3),
            alts in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 100),
        ) {
            let m = three_state();
            let eta = [0.2, 0.3, 0.5];
            let (a_star, h_star) = m.minimize_hamiltonian(x, &eta, &p).unwrap();
            prop_assert!(a_star.within_bounds(m.a_lo, m.a_hi));
            for u in alts {
                let rates: Vec<f64> = u.iter().map(|s| m.a_lo + s * (m.a_hi - m.a_lo)).collect();
                let a = RateVector::new(x, rates).unwrap();
                prop_assert!(h_star <= m.hamiltonian_h(x, &eta, &a, &p).unwrap() + 1e-9);
            }
        }

        #[test]
        fn hamiltonian_lipschitz_and_concave_in_p(
            x in 0usize..3,
            p in proptest::collection::vec(-20.0f64..20.0, 3),
            q in proptest::collection::vec(-20.0f64..20.0, 3),
            s in 0.0f64..1.0,
        ) {
            let m = three_state();
            let eta = [0.2, 0.3, 0.5];
            let hp = m.hamiltonian(x, &eta, &p);
            let hq = m.hamiltonian(x, &eta, &q);
            let sup = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!((hp - hq).abs() <= (m.d - 1) as f64 * m.a_hi * sup + 1e-9);
            let mid: Vec<f64> = p.iter().zip(&q).map(|(a, b)| s * a + (1.0 - s) * b).collect();
            prop_assert!(m.hamiltonian(x, &eta, &mid) >= s * hp + (1.0 - s) * hq - 1e-9);
        }

        #[test]
        fn optimal_rate_lipschitz(
            y in 0usize..3,
            p in -20.0f64..20.0,
            dp in -1e-3f64..1e-3,
        ) {
            let m = three_state();
            let c_min = m.c.iter().cloned().fold(f64::INFINITY, f64::min);
            let diff = (m.optimal_rate(y, p + dp) - m.optimal_rate(y, p)).abs();
            prop_assert!(diff <= dp.abs() / (2.0 * c_min) + 1e-12);
        }

        #[test]
        fn hamiltonian_separates_in_eta(
            x in 0usize..3,
            p in proptest::collection::vec(-5.0f64..5.0, 3),
            w in proptest::collection::vec(0.01f64..1.0, 3),
            v in proptest::collection::vec(0.01f64..1.0, 3),
        ) {
            let m = three_state();
            let norm = |u: Vec<f64>| { let s: f64 = u.iter().sum(); u.into_iter().map(|a| a / s).collect::<Vec<_>>() };
            let (eta, other) = (norm(w), norm(v));
            let lhs = m.hamiltonian(x, &eta, &p) - m.hamiltonian(x, &other, &p);
            let rhs = m.f2(x, &eta) - m.f2(x, &other);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
