//! Forward-backward characteristics of the master equation.
//!
//! For a start point `(t0, μ0)` the pair `(u, μ)` solves
//!
//! ```text
//! ∂_t μᵀ = μᵀ α(Δ_x u)                      μ(t0) = μ0
//! -∂_t u(t, x) = H1(x, Δ_x u) + f2(x, μ(t))  u(T, x) = g(x, μ(T))
//! ```
//!
//! and the master solution is `U(t0, x, μ0) = u(t0, x)`. Its measure gradient
//! comes from the linearization of the same system around `(u, μ)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::hjb_n::step_count;
use crate::model::{increments_into, ModelSpec, SimplexPoint};
use crate::simplex::SimplexGrid;

const CLIP_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbOptions {
    /// Requested ODE step; the horizon `[t0, T]` is split into `ceil(span/dt)`
    /// equal steps.
    pub dt: f64,
    /// Stop when the sup-norm Picard gap falls below this value.
    pub tol: f64,
    /// Weight of the new iterate, in `(0, 1]`.
    pub damping: f64,
    pub max_iterations: usize,
}

impl FbOptions {
    pub fn for_model(model: &ModelSpec) -> Self {
        FbOptions {
            dt: model.horizon / 2000.0,
            tol: 1e-9,
            damping: 0.5,
            max_iterations: 2000,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid(format!("Picard tolerance {} must be positive", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid(format!("damping {} must lie in (0, 1]", self.damping)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("time step {} must be positive", self.dt)));
        }
        Ok(())
    }
}

/// Converged characteristics from `(t0, μ0)`. Arrays are node-major with `d`
/// entries per node; the `d*` arrays hold time derivatives at the nodes.
///
/// The time grid is uniform with step close to the requested `dt`, plus extra
/// nodes at the instants where a feedback rate hits a bound of the control
/// box. Between two nodes every coefficient is smooth, which keeps the
/// integrators at full order.
#[derive(Clone, Debug)]
pub struct FbSolution {
    pub t0: f64,
    pub horizon: f64,
    pub d: usize,
    pub times: Vec<f64>,
    pub mu: Vec<f64>,
    pub dmu: Vec<f64>,
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    model: ModelSpec,
}

impl FbSolution {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mu_at(&self, k: usize) -> &[f64] {
        &self.mu[k * self.d..(k + 1) * self.d]
    }

    pub fn u_at(&self, k: usize) -> &[f64] {
        &self.u[k * self.d..(k + 1) * self.d]
    }

    /// `U(t0, ·, μ0)`.
    pub fn initial_values(&self) -> &[f64] {
        self.u_at(0)
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if t < self.t0 - 1e-12 || t > self.horizon + 1e-12 {
            return Err(invalid(format!(
                "time {t} outside [{}, {}]",
                self.t0, self.horizon
            )));
        }
        Ok(locate_in(&self.times, t))
    }

    /// `μ(t)` by cubic Hermite interpolation between nodes.
    pub fn mu_interp(&self, t: f64) -> Result<Vec<f64>> {
        let (k, s) = self.locate(t)?;
        let mut out = vec![0.0; self.d];
        interp_step(&self.times, &self.mu, &self.dmu, self.d, k, s, &mut out);
        Ok(out)
    }

    /// `u(t, ·)` by cubic Hermite interpolation between nodes.
    pub fn u_interp(&self, t: f64) -> Result<Vec<f64>> {
        let (k, s) = self.locate(t)?;
        let mut out = vec![0.0; self.d];
        interp_step(&self.times, &self.u, &self.du, self.d, k, s, &mut out);
        Ok(out)
    }

    /// Optimal rate matrix `α(Δ_x u(t_k, ·))`, row-major.
    pub fn alpha_at(&self, k: usize) -> Vec<f64> {
        let mut a = vec![0.0; self.d * self.d];
        rate_matrix(&self.model, self.u_at(k), &mut a, &mut vec![0.0; self.d]);
        a
    }

    pub fn mu_path(&self) -> Vec<SimplexPoint> {
        (0..=self.steps())
            .map(|k| SimplexPoint::new(self.mu_at(k).to_vec()).expect("flow stays in the simplex"))
            .collect()
    }

    /// Columns `t, mu_1..mu_d, u_1..u_d`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.d).map(|x| format!("mu_{x}")));
        header.extend((1..=self.d).map(|x| format!("u_{x}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..=self.steps() {
            let mut row = vec![format!("{:.12e}", self.time(k))];
            row.extend(self.mu_at(k).iter().map(|v| format!("{v:.15e}")));
            row.extend(self.u_at(k).iter().map(|v| format!("{v:.15e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Step index and relative position of `t` on a sorted node list.
fn locate_in(times: &[f64], t: f64) -> (usize, f64) {
    let steps = times.len() - 1;
    if steps == 0 {
        return (0, 0.0);
    }
    let k = times.partition_point(|&s| s <= t).saturating_sub(1).min(steps - 1);
    let h = times[k + 1] - times[k];
    (k, ((t - times[k]) / h).clamp(0.0, 1.0))
}

fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    )
}

#[inline]
fn hermite(y0: f64, y1: f64, f0: f64, f1: f64, h: f64, s: f64) -> f64 {
    let (h00, h10, h01, h11) = hermite_basis(s);
    h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
}

/// Midpoint of the cubic Hermite interpolant on one step.
#[inline]
fn hermite_mid(y0: f64, y1: f64, f0: f64, f1: f64, h: f64) -> f64 {
    0.5 * (y0 + y1) + h * (f0 - f1) / 8.0
}

fn interp_step(times: &[f64], values: &[f64], derivs: &[f64], d: usize, k: usize, s: f64, out: &mut [f64]) {
    if times.len() == 1 {
        out.copy_from_slice(&values[..d]);
        return;
    }
    let h = times[k + 1] - times[k];
    for x in 0..d {
        out[x] = hermite(
            values[k * d + x],
            values[(k + 1) * d + x],
            derivs[k * d + x],
            derivs[(k + 1) * d + x],
            h,
            s,
        );
    }
}

#[inline]
fn rate_matrix(model: &ModelSpec, u: &[f64], out: &mut [f64], p: &mut [f64]) {
    let d = model.d;
    for x in 0..d {
        increments_into(u, x, p);
        model.optimal_rates_into(x, p, &mut out[x * d..(x + 1) * d]);
    }
}

#[inline]
fn left_mul(v: &[f64], a: &[f64], out: &mut [f64]) {
    let d = v.len();
    for z in 0..d {
        out[z] = (0..d).map(|y| v[y] * a[y * d + z]).sum();
    }
}

/// Relative positions in `(0, 1)` where some feedback rate crosses a bound of
/// the control box on one step of a value path given by its Hermite data.
fn step_breaks(model: &ModelSpec, u0: &[f64], u1: &[f64], f0: &[f64], f1: &[f64], h: f64) -> Vec<f64> {
    const PROBES: usize = 4;
    let d = model.d;
    let mut out = Vec::new();
    for x in 0..d {
        for y in 0..d {
            if y == x {
                continue;
            }
            for bound in [model.a_lo, model.a_hi] {
                let theta = -2.0 * model.c[y] * bound;
                let g = |s: f64| {
                    hermite(u0[y], u1[y], f0[y], f1[y], h, s) - hermite(u0[x], u1[x], f0[x], f1[x], h, s) - theta
                };
                let mut lo_s = 0.0;
                let mut lo_g = g(0.0);
                for i in 1..=PROBES {
                    let hi_s = i as f64 / PROBES as f64;
                    let hi_g = g(hi_s);
                    if lo_g * hi_g < 0.0 {
                        let (mut a, mut b, mut ga) = (lo_s, hi_s, lo_g);
                        for _ in 0..60 {
                            let mid = 0.5 * (a + b);
                            let gm = g(mid);
                            if gm * ga <= 0.0 {
                                b = mid;
                            } else {
                                a = mid;
                                ga = gm;
                            }
                        }
                        let root = 0.5 * (a + b);
                        if root > 1e-9 && root < 1.0 - 1e-9 {
                            out.push(root);
                        }
                    }
                    lo_s = hi_s;
                    lo_g = hi_g;
                }
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out
}

struct Scratch {
    a0: Vec<f64>,
    am: Vec<f64>,
    a1: Vec<f64>,
    p: Vec<f64>,
    mid: Vec<f64>,
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Scratch {
            a0: vec![0.0; d * d],
            am: vec![0.0; d * d],
            a1: vec![0.0; d * d],
            p: vec![0.0; d],
            mid: vec![0.0; d],
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            stage: vec![0.0; d],
        }
    }
}

fn clip_measure(mu: &mut [f64], t: f64) -> Result<()> {
    let mut total = 0.0;
    for v in mu.iter_mut() {
        if *v < -CLIP_TOL || !v.is_finite() {
            return Err(Error::NegativeMeasure { t, value: *v });
        }
        *v = v.max(0.0);
        total += *v;
    }
    mu.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// RK4 for the measure flow given node values and derivatives of `u`.
#[allow(clippy::too_many_arguments)]
fn forward_pass(
    model: &ModelSpec,
    times: &[f64],
    mu0: &[f64],
    u: &[f64],
    du: &[f64],
    mu: &mut [f64],
    dmu: &mut [f64],
    s: &mut Scratch,
) -> Result<()> {
    let d = model.d;
    let steps = times.len() - 1;
    mu[..d].copy_from_slice(mu0);
    rate_matrix(model, &u[..d], &mut s.a0, &mut s.p);
    for k in 0..steps {
        let h = times[k + 1] - times[k];
        let (u0, u1) = (&u[k * d..(k + 1) * d], &u[(k + 1) * d..(k + 2) * d]);
        for x in 0..d {
            s.mid[x] = hermite_mid(u0[x], u1[x], du[k * d + x], du[(k + 1) * d + x], h);
        }
        rate_matrix(model, &s.mid, &mut s.am, &mut s.p);
        rate_matrix(model, u1, &mut s.a1, &mut s.p);
        let (head, tail) = mu.split_at_mut((k + 1) * d);
        let m0 = &head[k * d..];
        left_mul(m0, &s.a0, &mut s.k[0]);
        dmu[k * d..(k + 1) * d].copy_from_slice(&s.k[0]);
        for x in 0..d {
            s.stage[x] = m0[x] + 0.5 * h * s.k[0][x];
        }
        left_mul(&s.stage, &s.am, &mut s.k[1]);
        for x in 0..d {
            s.stage[x] = m0[x] + 0.5 * h * s.k[1][x];
        }
        left_mul(&s.stage, &s.am, &mut s.k[2]);
        for x in 0..d {
            s.stage[x] = m0[x] + h * s.k[2][x];
        }
        left_mul(&s.stage, &s.a1, &mut s.k[3]);
        let next = &mut tail[..d];
        for x in 0..d {
            next[x] = m0[x] + h / 6.0 * (s.k[0][x] + 2.0 * s.k[1][x] + 2.0 * s.k[2][x] + s.k[3][x]);
        }
        clip_measure(next, times[k + 1])?;
        std::mem::swap(&mut s.a0, &mut s.a1);
    }
    let last = &mu[steps * d..(steps + 1) * d];
    let mut out = vec![0.0; d];
    left_mul(last, &s.a0, &mut out);
    dmu[steps * d..].copy_from_slice(&out);
    Ok(())
}

#[inline]
fn value_rhs(model: &ModelSpec, u: &[f64], mu: &[f64], p: &mut [f64], out: &mut [f64]) {
    // τ-derivative (τ = T - t) of u: H1(x, Δ_x u) + f2(x, μ)
    for x in 0..model.d {
        increments_into(u, x, p);
        out[x] = model.hamiltonian_1(x, p) + model.f2(x, mu);
    }
}

/// RK4 backward for `u` given node values and derivatives of `μ`.
fn backward_pass(
    model: &ModelSpec,
    times: &[f64],
    mu: &[f64],
    dmu: &[f64],
    u: &mut [f64],
    du: &mut [f64],
    s: &mut Scratch,
) {
    let d = model.d;
    let steps = times.len() - 1;
    let mu_t = &mu[steps * d..];
    for x in 0..d {
        u[steps * d + x] = model.terminal(x, mu_t);
    }
    let mut mid = vec![0.0; d];
    for k in (0..steps).rev() {
        let h = times[k + 1] - times[k];
        let (m0, m1) = (&mu[k * d..(k + 1) * d], &mu[(k + 1) * d..(k + 2) * d]);
        for x in 0..d {
            mid[x] = hermite_mid(m0[x], m1[x], dmu[k * d + x], dmu[(k + 1) * d + x], h);
        }
        let (head, tail) = u.split_at_mut((k + 1) * d);
        let cur = &tail[..d];
        value_rhs(model, cur, m1, &mut s.p, &mut s.k[0]);
        for x in 0..d {
            du[(k + 1) * d + x] = -s.k[0][x];
            s.stage[x] = cur[x] + 0.5 * h * s.k[0][x];
        }
        value_rhs(model, &s.stage, &mid, &mut s.p, &mut s.k[1]);
        for x in 0..d {
            s.stage[x] = cur[x] + 0.5 * h * s.k[1][x];
        }
        value_rhs(model, &s.stage, &mid, &mut s.p, &mut s.k[2]);
        for x in 0..d {
            s.stage[x] = cur[x] + h * s.k[2][x];
        }
        value_rhs(model, &s.stage, m0, &mut s.p, &mut s.k[3]);
        let next = &mut head[k * d..];
        for x in 0..d {
            next[x] = cur[x] + h / 6.0 * (s.k[0][x] + 2.0 * s.k[1][x] + 2.0 * s.k[2][x] + s.k[3][x]);
        }
    }
    let mut out = vec![0.0; d];
    value_rhs(model, &u[..d], &mu[..d], &mut s.p, &mut out);
    for x in 0..d {
        du[x] = -out[x];
    }
}

struct PicardState {
    mu: Vec<f64>,
    dmu: Vec<f64>,
    u: Vec<f64>,
    du: Vec<f64>,
    iterations: usize,
    gap: f64,
}

/// Damped Picard iteration on a fixed node list, warm-started from `u, du`.
fn picard(
    model: &ModelSpec,
    times: &[f64],
    mu0: &[f64],
    mut u: Vec<f64>,
    mut du: Vec<f64>,
    opts: &FbOptions,
    budget: usize,
) -> Result<PicardState> {
    let len = u.len();
    let mut s = Scratch::new(model.d);
    let mut mu = vec![0.0; len];
    let mut dmu = vec![0.0; len];
    let mut u_new = vec![0.0; len];
    let mut du_new = vec![0.0; len];
    let mut gap = f64::INFINITY;
    for iteration in 1..=budget {
        forward_pass(model, times, mu0, &u, &du, &mut mu, &mut dmu, &mut s)?;
        backward_pass(model, times, &mu, &dmu, &mut u_new, &mut du_new, &mut s);
        gap = u.iter().zip(&u_new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !gap.is_finite() {
            break;
        }
        if gap < opts.tol {
            return Ok(PicardState {
                mu,
                dmu,
                u: u_new,
                du: du_new,
                iterations: iteration,
                gap,
            });
        }
        let w = opts.damping;
        for i in 0..len {
            u[i] = (1.0 - w) * u[i] + w * u_new[i];
            du[i] = (1.0 - w) * du[i] + w * du_new[i];
        }
    }
    Err(Error::NonConvergence {
        iterations: budget,
        gap,
    })
}

const REFINEMENT_ROUNDS: usize = 3;

/// Damped Picard iteration on the forward-backward system from `(t0, μ0)`.
pub fn solve_fb(model: &ModelSpec, t0: f64, mu0: &[f64], opts: &FbOptions) -> Result<FbSolution> {
    model.check_shape()?;
    opts.check()?;
    let d = model.d;
    SimplexPoint::new(mu0.to_vec())?;
    if !(0.0..=model.horizon).contains(&t0) {
        return Err(invalid(format!("start time {t0} outside [0, {}]", model.horizon)));
    }
    let steps = step_count(model.horizon - t0, opts.dt)?;
    let span = model.horizon - t0;
    let mut times: Vec<f64> = (0..=steps)
        .map(|k| {
            if k == steps {
                model.horizon
            } else {
                t0 + span * k as f64 / steps as f64
            }
        })
        .collect();
    let len = (steps + 1) * d;

    // initial guess: values along the frozen measure μ0
    let frozen: Vec<f64> = (0..=steps).flat_map(|_| mu0.iter().cloned()).collect();
    let mut u = vec![0.0; len];
    let mut du = vec![0.0; len];
    backward_pass(model, &times, &frozen, &vec![0.0; len], &mut u, &mut du, &mut Scratch::new(d));

    let mut state = picard(model, &times, mu0, u, du, opts, opts.max_iterations)?;
    let mut iterations = state.iterations;
    for _ in 0..REFINEMENT_ROUNDS {
        let mut kinks = Vec::new();
        for k in 0..times.len() - 1 {
            let h = times[k + 1] - times[k];
            let r = k * d..(k + 1) * d;
            let r1 = (k + 1) * d..(k + 2) * d;
            for s in step_breaks(model, &state.u[r.clone()], &state.u[r1.clone()], &state.du[r], &state.du[r1], h) {
                let t = times[k] + s * h;
                if (t - times[k]).min(times[k + 1] - t) > 1e-12 * model.horizon {
                    kinks.push((k, s, t));
                }
            }
        }
        if kinks.is_empty() {
            break;
        }
        let mut new_times = Vec::with_capacity(times.len() + kinks.len());
        let mut u = Vec::with_capacity((times.len() + kinks.len()) * d);
        let mut du = Vec::with_capacity(u.capacity());
        let mut buf = vec![0.0; d];
        let mut pending = kinks.iter().peekable();
        for k in 0..times.len() {
            new_times.push(times[k]);
            u.extend_from_slice(&state.u[k * d..(k + 1) * d]);
            du.extend_from_slice(&state.du[k * d..(k + 1) * d]);
            while let Some(&&(kk, s, t)) = pending.peek() {
                if kk != k {
                    break;
                }
                new_times.push(t);
                interp_step(&times, &state.u, &state.du, d, k, s, &mut buf);
                u.extend_from_slice(&buf);
                // derivative of the Hermite interpolant
                let h = times[k + 1] - times[k];
                for x in 0..d {
                    let (y0, y1) = (state.u[k * d + x], state.u[(k + 1) * d + x]);
                    let (f0, f1) = (state.du[k * d + x], state.du[(k + 1) * d + x]);
                    let ds = 1e-6;
                    let up = hermite(y0, y1, f0, f1, h, s + ds);
                    let down = hermite(y0, y1, f0, f1, h, s - ds);
                    buf[x] = (up - down) / (2.0 * ds * h);
                }
                du.extend_from_slice(&buf);
                pending.next();
            }
        }
        times = new_times;
        let remaining = opts.max_iterations.saturating_sub(iterations).max(1);
        state = picard(model, &times, mu0, u, du, opts, remaining)?;
        iterations += state.iterations;
    }
    Ok(FbSolution {
        t0,
        horizon: model.horizon,
        d,
        times,
        mu: state.mu,
        dmu: state.dmu,
        u: state.u,
        du: state.du,
        iterations,
        residual: state.gap,
        model: model.clone(),
    })
}

/// `U(t0, x, η)`.
pub fn master_u(model: &ModelSpec, t0: f64, x: usize, eta: &[f64], opts: &FbOptions) -> Result<f64> {
    if x >= model.d {
        return Err(invalid(format!("state {x} out of range")));
    }
    Ok(master_values(model, t0, eta, opts)?[x])
}

/// `U(t0, ·, η)` for every state from one forward-backward solve.
pub fn master_values(model: &ModelSpec, t0: f64, eta: &[f64], opts: &FbOptions) -> Result<Vec<f64>> {
    Ok(solve_fb(model, t0, eta, opts)?.initial_values().to_vec())
}

/// The MFG flow from `(0, μ0)`: node times and measures.
pub fn mfg_flow(model: &ModelSpec, mu0: &[f64], opts: &FbOptions) -> Result<(Vec<f64>, Vec<SimplexPoint>)> {
    let fb = solve_fb(model, 0.0, mu0, opts)?;
    Ok((fb.times.clone(), fb.mu_path()))
}

/// How the measure perturbation reacts to the value perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Linearization {
    /// `∂_t m = mᵀα + μᵀ δα[v]`, where `δα` is the derivative of the feedback
    /// rates in the direction of `v`. This is the exact linearization.
    #[default]
    Full,
    /// `∂_t m = mᵀα` only: the feedback is frozen at the unperturbed controls.
    /// Exact when every control is clamped along the solution.
    FrozenControls,
}

/// Linearized paths on a knot list that refines the forward-backward nodes
/// at every switch of the control slopes.
#[derive(Clone, Debug)]
pub struct LinearizedSolution {
    pub d: usize,
    pub times: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
}

impl LinearizedSolution {
    pub fn knots(&self) -> usize {
        self.times.len()
    }

    pub fn m_at(&self, j: usize) -> &[f64] {
        &self.m[j * self.d..(j + 1) * self.d]
    }

    pub fn v_at(&self, j: usize) -> &[f64] {
        &self.v[j * self.d..(j + 1) * self.d]
    }
}

/// Coefficients of the linearized system at one instant: rates, the slopes
/// `∂a*_z/∂p_z` per row, and the measure.
#[derive(Clone)]
struct LinearCoefficients {
    alpha: Vec<f64>,
    slope: Vec<f64>,
    mu: Vec<f64>,
}

fn linear_coefficients(model: &ModelSpec, u: &[f64], mu: &[f64]) -> LinearCoefficients {
    let d = model.d;
    let mut alpha = vec![0.0; d * d];
    let mut slope = vec![0.0; d * d];
    let mut p = vec![0.0; d];
    for x in 0..d {
        increments_into(u, x, &mut p);
        model.optimal_rates_into(x, &p, &mut alpha[x * d..(x + 1) * d]);
        for z in 0..d {
            if z != x {
                slope[x * d + z] = model.optimal_rate_slope(z, p[z]);
            }
        }
    }
    LinearCoefficients {
        alpha,
        slope,
        mu: mu.to_vec(),
    }
}

impl LinearCoefficients {
    fn m_rhs(&self, m: &[f64], v: &[f64], mode: Linearization, out: &mut [f64]) {
        let d = m.len();
        left_mul(m, &self.alpha, out);
        if mode == Linearization::Full {
            for y in 0..d {
                for z in 0..d {
                    if z == y {
                        continue;
                    }
                    let delta = self.mu[y] * self.slope[y * d + z] * (v[z] - v[y]);
                    out[z] += delta;
                    out[y] -= delta;
                }
            }
        }
    }

    // τ-derivative of v
    fn v_rhs(&self, model: &ModelSpec, v: &[f64], m: &[f64], out: &mut [f64]) {
        let d = v.len();
        for x in 0..d {
            let coupling: f64 = (0..d).map(|y| self.alpha[x * d + y] * v[y]).sum();
            out[x] = coupling + model.f2.directional(x, &self.mu, m);
        }
    }
}

/// One smooth piece of the linearized coefficients; the slopes are taken
/// from the interior so they are constant on the piece.
struct Segment {
    h: f64,
    start: LinearCoefficients,
    mid: LinearCoefficients,
    end: LinearCoefficients,
}

fn linear_segments(fb: &FbSolution) -> (Vec<f64>, Vec<Segment>) {
    let model = &fb.model;
    let d = fb.d;
    let mut knots = vec![fb.times[0]];
    let mut segments = Vec::new();
    let mut ub = vec![0.0; d];
    let mut mb = vec![0.0; d];
    let at = |k: usize, s: f64, ub: &mut Vec<f64>, mb: &mut Vec<f64>| {
        interp_step(&fb.times, &fb.u, &fb.du, d, k, s, ub);
        interp_step(&fb.times, &fb.mu, &fb.dmu, d, k, s, mb);
        linear_coefficients(model, ub, mb)
    };
    for k in 0..fb.steps() {
        let h = fb.times[k + 1] - fb.times[k];
        let r = k * d..(k + 1) * d;
        let r1 = (k + 1) * d..(k + 2) * d;
        let mut bounds = vec![0.0];
        bounds.extend(step_breaks(model, &fb.u[r.clone()], &fb.u[r1.clone()], &fb.du[r], &fb.du[r1], h));
        bounds.push(1.0);
        for w in bounds.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = at(k, 0.5 * (a + b), &mut ub, &mut mb);
            let mut start = at(k, a, &mut ub, &mut mb);
            let mut end = at(k, b, &mut ub, &mut mb);
            start.slope.clone_from(&mid.slope);
            end.slope.clone_from(&mid.slope);
            segments.push(Segment {
                h: (b - a) * h,
                start,
                mid,
                end,
            });
            knots.push(if b == 1.0 { fb.times[k + 1] } else { fb.times[k] + b * h });
        }
    }
    (knots, segments)
}

/// Solves the linearized forward-backward system around `fb` with
/// `m(t0) = m0`.
pub fn solve_linearized(
    fb: &FbSolution,
    m0: &[f64],
    mode: Linearization,
    opts: &FbOptions,
) -> Result<LinearizedSolution> {
    let model = &fb.model;
    let d = fb.d;
    if m0.len() != d {
        return Err(invalid(format!("m0 has length {}, expected {d}", m0.len())));
    }
    if m0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("m0 must be finite"));
    }
    opts.check()?;
    let (times, segments) = linear_segments(fb);
    let n = segments.len();
    let len = (n + 1) * d;

    // one-sided derivatives at each knot: left from the previous segment,
    // right from the next
    let mut m = vec![0.0; len];
    let mut dm_l = vec![0.0; len];
    let mut dm_r = vec![0.0; len];
    let mut v = vec![0.0; len];
    let mut dv_l = vec![0.0; len];
    let mut dv_r = vec![0.0; len];
    let mut v_new = vec![0.0; len];
    let mut dv_l_new = vec![0.0; len];
    let mut dv_r_new = vec![0.0; len];
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut stage = vec![0.0; d];
    let mut mid = vec![0.0; d];
    let mut cur = vec![0.0; d];

    let (damping, max_iterations) = match mode {
        Linearization::Full => (opts.damping, opts.max_iterations),
        Linearization::FrozenControls => (1.0, 1),
    };
    let mut gap = f64::INFINITY;
    for iteration in 1..=max_iterations {
        m[..d].copy_from_slice(m0);
        for (j, seg) in segments.iter().enumerate() {
            let h = seg.h;
            let (a, b) = (j * d, (j + 1) * d);
            for x in 0..d {
                mid[x] = hermite_mid(v[a + x], v[b + x], dv_r[a + x], dv_l[b + x], h);
            }
            cur.copy_from_slice(&m[a..b]);
            seg.start.m_rhs(&cur, &v[a..b], mode, &mut k[0]);
            dm_r[a..b].copy_from_slice(&k[0]);
            rk4_stages(&cur, h, &mut k, &mut stage, |st, out, i| {
                if i < 3 {
                    seg.mid.m_rhs(st, &mid, mode, out)
                } else {
                    seg.end.m_rhs(st, &v[b..b + d], mode, out)
                }
            });
            for x in 0..d {
                m[b + x] = cur[x] + h / 6.0 * (k[0][x] + 2.0 * k[1][x] + 2.0 * k[2][x] + k[3][x]);
            }
            seg.end.m_rhs(&m[b..b + d], &v[b..b + d], mode, &mut k[0]);
            dm_l[b..b + d].copy_from_slice(&k[0]);
        }

        let mu_t = fb.mu_at(fb.steps());
        for x in 0..d {
            v_new[n * d + x] = model.g.directional(x, mu_t, &m[n * d..]);
        }
        for (j, seg) in segments.iter().enumerate().rev() {
            let h = seg.h;
            let (a, b) = (j * d, (j + 1) * d);
            for x in 0..d {
                mid[x] = hermite_mid(m[a + x], m[b + x], dm_r[a + x], dm_l[b + x], h);
            }
            cur.copy_from_slice(&v_new[b..b + d]);
            seg.end.v_rhs(model, &cur, &m[b..b + d], &mut k[0]);
            for x in 0..d {
                dv_l_new[b + x] = -k[0][x];
            }
            rk4_stages(&cur, h, &mut k, &mut stage, |st, out, i| {
                if i < 3 {
                    seg.mid.v_rhs(model, st, &mid, out)
                } else {
                    seg.start.v_rhs(model, st, &m[a..b], out)
                }
            });
            for x in 0..d {
                v_new[a + x] = cur[x] + h / 6.0 * (k[0][x] + 2.0 * k[1][x] + 2.0 * k[2][x] + k[3][x]);
            }
            seg.start.v_rhs(model, &v_new[a..b], &m[a..b], &mut k[0]);
            for x in 0..d {
                dv_r_new[a + x] = -k[0][x];
            }
        }

        gap = v.iter().zip(&v_new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !gap.is_finite() {
            break;
        }
        if gap < opts.tol || mode == Linearization::FrozenControls {
            return Ok(LinearizedSolution {
                d,
                times,
                m,
                v: v_new,
                iterations: iteration,
            });
        }
        for i in 0..len {
            v[i] = (1.0 - damping) * v[i] + damping * v_new[i];
            dv_l[i] = (1.0 - damping) * dv_l[i] + damping * dv_l_new[i];
            dv_r[i] = (1.0 - damping) * dv_r[i] + damping * dv_r_new[i];
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
        gap,
    })
}

/// Fills stages 2..4 of an RK4 step; `k[0]` must already hold stage 1.
fn rk4_stages(
    cur: &[f64],
    h: f64,
    k: &mut [Vec<f64>; 4],
    stage: &mut [f64],
    mut f: impl FnMut(&[f64], &mut [f64], usize),
) {
    let d = cur.len();
    for (i, w) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
        for x in 0..d {
            stage[x] = cur[x] + w * h * k[i - 1][x];
        }
        let (_, rest) = k.split_at_mut(i);
        f(stage, &mut rest[0], i);
    }
}

/// `K[x][y] = v_{e_y}(t0, x)`: the ambient gradient of `U(t0, x, ·)` at `μ0`.
pub fn gradient_matrix(fb: &FbSolution, mode: Linearization, opts: &FbOptions) -> Result<Vec<Vec<f64>>> {
    let d = fb.d;
    let mut k = vec![vec![0.0; d]; d];
    for y in 0..d {
        let mut e = vec![0.0; d];
        e[y] = 1.0;
        let lin = solve_linearized(fb, &e, mode, opts)?;
        for (x, row) in k.iter_mut().enumerate() {
            row[y] = lin.v_at(0)[x];
        }
    }
    Ok(k)
}

/// `∇_η U(t0, x, η)` in ambient coordinates.
pub fn grad_eta_u(model: &ModelSpec, t0: f64, x: usize, eta: &[f64], opts: &FbOptions) -> Result<Vec<f64>> {
    if x >= model.d {
        return Err(invalid(format!("state {x} out of range")));
    }
    let fb = solve_fb(model, t0, eta, opts)?;
    Ok(gradient_matrix(&fb, Linearization::Full, opts)?.swap_remove(x))
}

/// Signed residual of the master equation at `(t, x, η)`:
///
/// ```text
/// -∂_t U - Σ_z ∂_{η_z}U · (ηᵀα*)_z - H(x, η, Δ_x U)
/// ```
///
/// with `∂_t U` by a central difference of step `fd_step`.
pub fn master_residual(
    model: &ModelSpec,
    t: f64,
    x: usize,
    eta: &[f64],
    fd_step: f64,
    opts: &FbOptions,
) -> Result<f64> {
    Ok(master_residuals(model, t, eta, fd_step, opts)?[x])
}

/// [`master_residual`] for every state at once.
pub fn master_residuals(model: &ModelSpec, t: f64, eta: &[f64], fd_step: f64, opts: &FbOptions) -> Result<Vec<f64>> {
    if !(fd_step > 0.0) || t - fd_step < 0.0 || t + fd_step > model.horizon {
        return Err(invalid(format!(
            "need fd_step > 0 with [t - fd_step, t + fd_step] inside [0, T]; got t={t}, fd_step={fd_step}"
        )));
    }
    let d = model.d;
    let fb = solve_fb(model, t, eta, opts)?;
    let up = master_values(model, t + fd_step, eta, opts)?;
    let down = master_values(model, t - fd_step, eta, opts)?;
    let k = gradient_matrix(&fb, Linearization::Full, opts)?;
    let u = fb.initial_values();
    let alpha = fb.alpha_at(0);
    let mut drift = vec![0.0; d];
    left_mul(eta, &alpha, &mut drift);
    let mut p = vec![0.0; d];
    Ok((0..d)
        .map(|x| {
            let dt_u = (up[x] - down[x]) / (2.0 * fd_step);
            let transport: f64 = (0..d).map(|z| k[x][z] * drift[z]).sum();
            increments_into(u, x, &mut p);
            -dt_u - transport - model.hamiltonian(x, eta, &p)
        })
        .collect())
}

/// Source of `U(t, ·, η)` for feedback policies.
pub trait MasterValues: Send + Sync {
    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>>;
}

/// Solves the forward-backward system on every query.
#[derive(Clone, Debug)]
pub struct DirectMaster {
    pub model: ModelSpec,
    pub opts: FbOptions,
}

impl DirectMaster {
    pub fn new(model: &ModelSpec) -> Self {
        DirectMaster {
            model: model.clone(),
            opts: FbOptions::for_model(model),
        }
    }
}

impl MasterValues for DirectMaster {
    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
        master_values(&self.model, t, eta, &self.opts)
    }
}

/// `U` tabulated on a simplex grid at uniform time nodes, with four-point
/// Lagrange interpolation in `t`. Queries off the grid fall back to a direct
/// solve.
#[derive(Clone, Debug)]
pub struct MasterTable {
    model: ModelSpec,
    opts: FbOptions,
    grid: SimplexGrid,
    nodes: usize,
    // values[(j * len + rank) * d + x]
    values: Vec<f64>,
}

impl MasterTable {
    /// Tabulates `U(t_j, ·, η)` for `η ∈ P^m([d])` and `t_j = j·T/(nodes-1)`.
    pub fn build(model: &ModelSpec, m: usize, nodes: usize, opts: &FbOptions) -> Result<Self> {
        if nodes < 2 {
            return Err(invalid("a master table needs at least two time nodes"));
        }
        let grid = SimplexGrid::enumerate(model.d, m)?;
        let d = model.d;
        let len = grid.len();
        let cells: Vec<(usize, usize)> = (0..nodes).flat_map(|j| (0..len).map(move |r| (j, r))).collect();
        let solved: Vec<Result<Vec<f64>>> = cells
            .par_iter()
            .map(|&(j, r)| {
                let t = model.horizon * j as f64 / (nodes - 1) as f64;
                master_values(model, t, grid.point(r), opts)
            })
            .collect();
        let mut values = Vec::with_capacity(nodes * len * d);
        for s in solved {
            values.extend(s?);
        }
        Ok(MasterTable {
            model: model.clone(),
            opts: *opts,
            grid,
            nodes,
            values,
        })
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    pub fn node_time(&self, j: usize) -> f64 {
        self.model.horizon * j as f64 / (self.nodes - 1) as f64
    }

    fn interpolate(&self, t: f64, rank: usize) -> Vec<f64> {
        let d = self.model.d;
        let len = self.grid.len();
        let step = self.model.horizon / (self.nodes - 1) as f64;
        let pos = (t / step).clamp(0.0, (self.nodes - 1) as f64);
        let stencil = 4.min(self.nodes);
        let base = (pos.floor() as isize - 1).clamp(0, (self.nodes - stencil) as isize) as usize;
        let mut out = vec![0.0; d];
        for i in 0..stencil {
            let mut w = 1.0;
            for j in 0..stencil {
                if j != i {
                    w *= (pos - (base + j) as f64) / (i as f64 - j as f64);
                }
            }
            let at = &self.values[((base + i) * len + rank) * d..((base + i) * len + rank + 1) * d];
            for x in 0..d {
                out[x] += w * at[x];
            }
        }
        out
    }
}

impl MasterValues for MasterTable {
    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
        if !(0.0..=self.model.horizon).contains(&t) {
            return Err(invalid(format!("time {t} outside [0, {}]", self.model.horizon)));
        }
        match self.grid.rank(eta) {
            Ok(rank) => Ok(self.interpolate(t, rank)),
            Err(_) => master_values(&self.model, t, eta, &self.opts),
        }
    }
}
