//! The symmetric n-player Nash system, integrated backward in time.
//!
//! The unknown is `V^n(t, x, η)` for a tagged player at `x` facing the
//! empirical measure `η ∈ P^{n-1}([d])` of the other `n - 1` players:
//!
//! ```text
//! -∂_t V(x, η) = H(x, η, Δ_x V(·, η))
//!              + Σ_y Σ_{z≠y} η_y · D^{n,y,z} V(x, η) · a*_z(y, η⁺, Δ_y V(·, η⁺))
//! η⁺ = η + e_{yx}/(n-1)     (the other players as seen by a player at y)
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{increments_into, ModelSpec, RateVector};
use crate::simplex::SimplexGrid;

/// Default cap on stored values (time slices × states × grid points).
pub const DEFAULT_VALUE_CAP: u128 = 20_000_000;

const NO_SHIFT: usize = usize::MAX;
const BINARY_MAGIC: &[u8; 8] = b"MFGVGRD1";

/// Precomputed tables for one `(model, n)` pair. The right-hand side does not
/// depend on `t` explicitly.
#[derive(Clone, Debug)]
pub struct HjbSystem {
    model: ModelSpec,
    n: usize,
    grid: SimplexGrid,
    shifts: Vec<usize>,
    f2: Vec<f64>,
}

impl HjbSystem {
    pub fn new(model: &ModelSpec, n: usize) -> Result<Self> {
        model.check_shape()?;
        if n < 2 {
            return Err(invalid(format!("player count n={n} must be >= 2")));
        }
        let grid = SimplexGrid::enumerate(model.d, n - 1)?;
        let shifts = grid.shift_table();
        let len = grid.len();
        let mut f2 = vec![0.0; model.d * len];
        for x in 0..model.d {
            for r in 0..len {
                f2[x * len + r] = model.f2(x, grid.point(r));
            }
        }
        Ok(HjbSystem {
            model: model.clone(),
            n,
            grid,
            shifts,
            f2,
        })
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of unknowns per time slice, `d · |P^{n-1}|`.
    pub fn slice_len(&self) -> usize {
        self.model.d * self.grid.len()
    }

    /// Terminal slice `g(x, η)`.
    pub fn terminal_slice(&self) -> Vec<f64> {
        let len = self.grid.len();
        let mut out = vec![0.0; self.slice_len()];
        for x in 0..self.model.d {
            for r in 0..len {
                out[x * len + r] = self.model.terminal(x, self.grid.point(r));
            }
        }
        out
    }

    #[inline]
    fn shift(&self, r: usize, y: usize, z: usize) -> usize {
        let d = self.model.d;
        self.shifts[(r * d + y) * d + z]
    }

    /// Writes `-∂_t V` into `out` for the slice `v` (layout `[x][rank]`).
    pub fn rhs(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.d;
        let len = self.grid.len();
        if v.len() != d * len || out.len() != d * len {
            return Err(invalid(format!(
                "slice has {} entries, expected {}",
                v.len(),
                d * len
            )));
        }
        // rates[(r * d + y) * d + z] = a*_z(y, Δ_y V(·, η_r))
        let mut rates = vec![0.0; len * d * d];
        rates
            .par_chunks_mut(d * d)
            .with_min_len(256)
            .enumerate()
            .for_each(|(r, block)| {
                let mut values = vec![0.0; d];
                let mut p = vec![0.0; d];
                for (x, val) in values.iter_mut().enumerate() {
                    *val = v[x * len + r];
                }
                for y in 0..d {
                    increments_into(&values, y, &mut p);
                    self.model.optimal_rates_into(y, &p, &mut block[y * d..(y + 1) * d]);
                }
            });

        let scale = (self.n - 1) as f64;
        let failure = std::sync::Mutex::new(None);
        out.par_chunks_mut(len).enumerate().for_each(|(x, row)| {
            let mut values = vec![0.0; d];
            let mut p = vec![0.0; d];
            let vx = &v[x * len..(x + 1) * len];
            for (r, slot) in row.iter_mut().enumerate() {
                for (z, val) in values.iter_mut().enumerate() {
                    *val = v[z * len + r];
                }
                increments_into(&values, x, &mut p);
                let mut acc = self.model.hamiltonian_1(x, &p) + self.f2[x * len + r];
                let counts = self.grid.counts(r);
                let eta = self.grid.point(r);
                for y in 0..d {
                    if counts[y] == 0 {
                        continue;
                    }
                    let viewed = self.shift(r, y, x);
                    if viewed == NO_SHIFT {
                        *failure.lock().unwrap() = Some(Error::InfeasibleShift { from: y, to: x });
                        return;
                    }
                    let a = &rates[(viewed * d + y) * d..(viewed * d + y + 1) * d];
                    let mut drift = 0.0;
                    for z in 0..d {
                        if z == y {
                            continue;
                        }
                        let s = self.shift(r, y, z);
                        drift += scale * (vx[s] - vx[r]) * a[z];
                    }
                    acc += eta[y] * drift;
                }
                *slot = acc;
            }
        });
        match failure.into_inner().unwrap() {
            Some(e) => Err(Error::Internal(format!("unreachable shift in drift term: {e}"))),
            None => Ok(()),
        }
    }
}

/// Convenience wrapper: `-∂_t V` for one slice. The model's right-hand side
/// is autonomous, so `t` only enters error messages.
pub fn hjb_rhs(model: &ModelSpec, n: usize, t: f64, v_slice: &[f64]) -> Result<Vec<f64>> {
    let system = HjbSystem::new(model, n)?;
    let mut out = vec![0.0; v_slice.len()];
    system.rhs(v_slice, &mut out)?;
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        let len = system.grid.len();
        return Err(Error::Divergence {
            t,
            x: i / len,
            rank: i % len,
        });
    }
    Ok(out)
}

/// `V^n` sampled on a uniform time grid, layout `[k][x][rank]`.
#[derive(Clone, Debug)]
pub struct ValueGrid {
    n: usize,
    d: usize,
    horizon: f64,
    steps: usize,
    grid: SimplexGrid,
    values: Vec<f64>,
}

impl ValueGrid {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn slice_len(&self) -> usize {
        self.d * self.grid.len()
    }

    /// Slice at time index `k`, layout `[x][rank]`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let s = self.slice_len();
        &self.values[k * s..(k + 1) * s]
    }

    pub fn value(&self, k: usize, x: usize, rank: usize) -> f64 {
        self.values[k * self.slice_len() + x * self.grid.len() + rank]
    }

    /// `V^n(t, ·, η_rank)`, linear in `t` between slices.
    pub fn values_at(&self, t: f64, rank: usize) -> Result<Vec<f64>> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(invalid(format!("time {t} outside [0, {}]", self.horizon)));
        }
        if rank >= self.grid.len() {
            return Err(invalid(format!("rank {rank} out of range")));
        }
        let pos = t / self.dt();
        let k = (pos.floor() as usize).min(self.steps.saturating_sub(1));
        let w = (pos - k as f64).clamp(0.0, 1.0);
        Ok((0..self.d)
            .map(|x| {
                let lo = self.value(k, x, rank);
                if self.steps == 0 || w == 0.0 {
                    lo
                } else {
                    (1.0 - w) * lo + w * self.value(k + 1, x, rank)
                }
            })
            .collect())
    }

    pub fn value_at(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64> {
        let rank = self.grid.rank(eta)?;
        Ok(self.values_at(t, rank)?[x])
    }

    /// Writes `t,x,rank,value` rows, time-major.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# n={} d={} T={} steps={}", self.n, self.d, self.horizon, self.steps)?;
        writeln!(w, "t,x,rank,value")?;
        let len = self.grid.len();
        for k in 0..=self.steps {
            let t = self.time(k);
            for x in 0..self.d {
                for r in 0..len {
                    writeln!(w, "{t:.12e},{x},{r},{:.17e}", self.value(k, x, r))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| invalid("empty value-grid file"))??;
        let mut meta = std::collections::HashMap::new();
        for field in header.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = field.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let get = |key: &str| -> Result<String> {
            meta.get(key)
                .cloned()
                .ok_or_else(|| invalid(format!("value-grid header lacks {key}")))
        };
        let parse_err = |what: &str| invalid(format!("cannot parse {what} in value-grid file"));
        let n: usize = get("n")?.parse().map_err(|_| parse_err("n"))?;
        let d: usize = get("d")?.parse().map_err(|_| parse_err("d"))?;
        let horizon: f64 = get("T")?.parse().map_err(|_| parse_err("T"))?;
        let steps: usize = get("steps")?.parse().map_err(|_| parse_err("steps"))?;
        let grid = SimplexGrid::enumerate(d, n - 1)?;
        let mut values = Vec::with_capacity((steps + 1) * d * grid.len());
        for line in lines.skip(1) {
            let line = line?;
            let value = line
                .rsplit(',')
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| parse_err("value"))?;
            values.push(value);
        }
        if values.len() != (steps + 1) * d * grid.len() {
            return Err(invalid("value-grid file has the wrong number of rows"));
        }
        Ok(ValueGrid {
            n,
            d,
            horizon,
            steps,
            grid,
            values,
        })
    }

    /// Little-endian binary: magic, `n, d, steps` as u64, `T` as f64, values.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(BINARY_MAGIC)?;
        for v in [self.n as u64, self.d as u64, self.steps as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.horizon.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(invalid("not a value-grid binary file"));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let n = next_u64(&mut r)? as usize;
        let d = next_u64(&mut r)? as usize;
        let steps = next_u64(&mut r)? as usize;
        let horizon = f64::from_bits(next_u64(&mut r)?);
        let grid = SimplexGrid::enumerate(d, n - 1)?;
        let count = (steps + 1) * d * grid.len();
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ValueGrid {
            n,
            d,
            horizon,
            steps,
            grid,
            values,
        })
    }
}

/// Number of RK4 steps used for a requested step size.
pub(crate) fn step_count(span: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("time step dt={dt} must be positive")));
    }
    if span <= 0.0 {
        return Ok(0);
    }
    Ok(((span / dt) - 1e-9).ceil().max(1.0) as usize)
}

pub fn solve_hjb_n(model: &ModelSpec, n: usize, dt: f64) -> Result<ValueGrid> {
    solve_hjb_n_with_cap(model, n, dt, DEFAULT_VALUE_CAP)
}

/// RK4 backward from `V(T) = g` with `ceil(T/dt)` uniform steps.
pub fn solve_hjb_n_with_cap(model: &ModelSpec, n: usize, dt: f64, cap: u128) -> Result<ValueGrid> {
    model.check_shape()?;
    let steps = step_count(model.horizon, dt)?;
    if n < 2 {
        return Err(invalid(format!("player count n={n} must be >= 2")));
    }
    let points = crate::simplex::grid_cardinality(model.d, n - 1).unwrap_or(u128::MAX);
    let required = points
        .saturating_mul(model.d as u128)
        .saturating_mul(steps as u128 + 1);
    if required > cap {
        return Err(Error::Capacity {
            what: "value grid",
            required,
            cap,
        });
    }
    let system = HjbSystem::new(model, n)?;
    let s = system.slice_len();
    let len = system.grid.len();
    let h = model.horizon / steps as f64;
    let mut values = vec![0.0; (steps + 1) * s];
    values[steps * s..].copy_from_slice(&system.terminal_slice());

    let mut k1 = vec![0.0; s];
    let mut k2 = vec![0.0; s];
    let mut k3 = vec![0.0; s];
    let mut k4 = vec![0.0; s];
    let mut stage = vec![0.0; s];
    for k in (0..steps).rev() {
        let (lower, upper) = values.split_at_mut((k + 1) * s);
        let cur = &upper[..s];
        system.rhs(cur, &mut k1)?;
        axpy_into(&mut stage, cur, 0.5 * h, &k1);
        system.rhs(&stage, &mut k2)?;
        axpy_into(&mut stage, cur, 0.5 * h, &k2);
        system.rhs(&stage, &mut k3)?;
        axpy_into(&mut stage, cur, h, &k3);
        system.rhs(&stage, &mut k4)?;
        let next = &mut lower[k * s..];
        for i in 0..s {
            next[i] = cur[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !next[i].is_finite() {
                return Err(Error::Divergence {
                    t: k as f64 * h,
                    x: i / len,
                    rank: i % len,
                });
            }
        }
    }

    let bound = model.terminal_bound() + model.horizon * model.running_cost_bound();
    let worst = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > bound * (1.0 + 1e-9) + 1e-12 {
        return Err(Error::Internal(format!(
            "value grid exceeds the comparison bound: {worst} > {bound}"
        )));
    }
    Ok(ValueGrid {
        n,
        d: model.d,
        horizon: model.horizon,
        steps,
        grid: system.grid,
        values,
    })
}

#[inline]
fn axpy_into(out: &mut [f64], base: &[f64], a: f64, dir: &[f64]) {
    for ((o, b), v) in out.iter_mut().zip(base).zip(dir) {
        *o = b + a * v;
    }
}

/// Equilibrium rates of a player at `x` when the others are distributed as
/// `eta_other ∈ P^{n-1}([d])`.
pub fn equilibrium_policy(
    vgrid: &ValueGrid,
    model: &ModelSpec,
    t: f64,
    x: usize,
    eta_other: &[f64],
) -> Result<RateVector> {
    if x >= vgrid.d {
        return Err(invalid(format!("state {x} out of range")));
    }
    let rank = vgrid.grid.rank(eta_other)?;
    let values = vgrid.values_at(t, rank)?;
    let mut p = vec![0.0; vgrid.d];
    increments_into(&values, x, &mut p);
    let mut rates = vec![0.0; vgrid.d];
    model.optimal_rates_into(x, &p, &mut rates);
    Ok(RateVector {
        base_state: x,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MeasureCost;
    use approx::assert_relative_eq;

    fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn decoupled_rhs_at_zero() {
        let m = ModelSpec::decoupled(3, 1.0, 0.7).unwrap();
        let sys = HjbSystem::new(&m, 4).unwrap();
        let v = vec![0.0; sys.slice_len()];
        let out = hjb_rhs(&m, 4, 0.0, &v).unwrap();
        for o in out {
            assert_relative_eq!(o, 2.0 * 0.7 * 0.01, epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_slice_has_no_drift() {
        let m = ModelSpec::two_state_congestion();
        let sys = HjbSystem::new(&m, 6).unwrap();
        let v = vec![3.0; sys.slice_len()];
        let mut out = vec![0.0; v.len()];
        sys.rhs(&v, &mut out).unwrap();
        let len = sys.grid().len();
        for x in 0..2 {
            for r in 0..len {
                let eta = sys.grid().point(r);
                let expected = m.hamiltonian(x, eta, &[0.0, 0.0]);
                assert_relative_eq!(out[x * len + r], expected, epsilon = 1e-14);
            }
        }
    }

    // Direct transcription of the drift sum for n = 2, d = 2: the single other
    // player is at state `w`, and it moves to `1 - w`.
    fn brute_force_two_players(m: &ModelSpec, v: &dyn Fn(usize, usize) -> f64) -> Vec<f64> {
        // grid of resolution 1: rank 0 = (0,1) (other at state 1), rank 1 = (1,0)
        let other_state = |r: usize| if r == 0 { 1 } else { 0 };
        let mut out = vec![0.0; 4];
        for x in 0..2 {
            for r in 0..2 {
                let w = other_state(r);
                let vx = |s: usize| v(x, s);
                let p: Vec<f64> = (0..2).map(|z| v(z, r) - v(x, r)).collect();
                let h = m.hamiltonian(x, m_eta(r), &p);
                // the other player sees the tagged player at x: its measure is e_x
                let seen_rank = if x == 0 { 1 } else { 0 };
                let q: Vec<f64> = (0..2).map(|z| v(z, seen_rank) - v(w, seen_rank)).collect();
                let target = 1 - w;
                let rate = m.optimal_rate(target, q[target]);
                let moved_rank = 1 - r;
                out[x * 2 + r] = h + (vx(moved_rank) - vx(r)) * rate;
            }
        }
        out
    }

    fn m_eta(r: usize) -> &'static [f64] {
        if r == 0 {
            &[0.0, 1.0]
        } else {
            &[1.0, 0.0]
        }
    }

    #[test]
    fn two_player_rhs_matches_hand_evaluation() {
        let m = ModelSpec::new(
            2,
            1.0,
            vec![0.3, -0.2],
            vec![0.4, 0.9],
            MeasureCost::linear(1.5),
            MeasureCost::zero(),
        )
        .unwrap();
        let table = [[0.2, -0.5], [1.1, 0.4]];
        let v_fn = |x: usize, r: usize| table[x][r];
        let slice: Vec<f64> = (0..2).flat_map(|x| (0..2).map(move |r| table[x][r])).collect();
        let got = hjb_rhs(&m, 2, 0.5, &slice).unwrap();
        let expected = brute_force_two_players(&m, &v_fn);
        for (g, e) in got.iter().zip(&expected) {
            assert_relative_eq!(g, e, epsilon = 1e-14);
        }
    }

    #[test]
    fn decoupled_closed_form() {
        for (d, c) in [(2usize, 0.5), (3, 1.3)] {
            let m = ModelSpec::decoupled(d, 2.0, c).unwrap();
            for n in [2usize, 5, 9] {
                let vg = solve_hjb_n(&m, n, 2.0 / 200.0).unwrap();
                for k in 0..=vg.steps() {
                    let expected = (2.0 - vg.time(k)) * (d - 1) as f64 * c * 0.01;
                    for v in vg.slice(k) {
                        assert!((v - expected).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn terminal_slice_is_exact() {
        let m = ModelSpec::two_state_congestion();
        let vg = solve_hjb_n(&m, 7, 0.01).unwrap();
        let len = vg.grid().len();
        for x in 0..2 {
            for r in 0..len {
                assert_eq!(vg.value(vg.steps(), x, r), m.terminal(x, vg.grid().point(r)));
            }
        }
    }

    #[test]
    fn permutation_symmetry() {
        let m = ModelSpec::new(
            3,
            1.0,
            vec![0.1; 3],
            vec![0.4; 3],
            MeasureCost::linear(1.0),
            MeasureCost::Power {
                coef: 1.0,
                exponent: 2.0,
            },
        )
        .unwrap();
        let vg = solve_hjb_n(&m, 6, 0.01).unwrap();
        let g = vg.grid();
        let sigma = [1usize, 2, 0];
        for r in 0..g.len() {
            let eta = g.point(r);
            let mut permuted = vec![0.0; 3];
            for x in 0..3 {
                permuted[sigma[x]] = eta[x];
            }
            let pr = g.rank(&permuted).unwrap();
            for x in 0..3 {
                assert!((vg.value(0, x, r) - vg.value(0, sigma[x], pr)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rk4_refinement_shrinks_changes() {
        let m = ModelSpec::two_state_congestion();
        let n = 8;
        let coarse = solve_hjb_n(&m, n, 0.02).unwrap();
        let mid = solve_hjb_n(&m, n, 0.01).unwrap();
        let fine = solve_hjb_n(&m, n, 0.005).unwrap();
        let a = sup_diff(coarse.slice(0), mid.slice(0));
        let b = sup_diff(mid.slice(0), fine.slice(0));
        assert!(a >= 8.0 * b, "changes {a:e} then {b:e}");
    }

    #[test]
    fn policies() {
        let m = ModelSpec::decoupled(3, 1.0, 0.5).unwrap();
        let vg = solve_hjb_n(&m, 4, 0.01).unwrap();
        let a = equilibrium_policy(&vg, &m, 0.37, 1, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_eq!(a.rates, vec![0.1, -0.2, 0.1]);
        assert!(equilibrium_policy(&vg, &m, 0.37, 1, &[0.5, 0.25, 0.25]).is_err());

        let m = ModelSpec::two_state_congestion();
        let vg = solve_hjb_n(&m, 5, 0.01).unwrap();
        let at_t = equilibrium_policy(&vg, &m, 1.0, 0, &[0.25, 0.75]).unwrap();
        // terminal slice: p_1 = g(1, η) - g(0, η) = 0.5, clamped at a_lo
        assert_eq!(at_t.rates[1], 0.1);
        let a = equilibrium_policy(&vg, &m, 0.3, 0, &[0.5, 0.5]).unwrap();
        let b = equilibrium_policy(&vg, &m, 0.3, 1, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(a.rates[1], b.rates[0], epsilon = 1e-12);
    }

    #[test]
    fn capacity_refused() {
        let m = ModelSpec::two_state_congestion();
        assert!(matches!(
            solve_hjb_n_with_cap(&m, 100, 1e-3, 1000),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn export_round_trip() {
        let m = ModelSpec::two_state_congestion();
        let vg = solve_hjb_n(&m, 4, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("v.csv");
        vg.write_csv(&csv).unwrap();
        let back = ValueGrid::read_csv(&csv).unwrap();
        assert_eq!(back.values(), vg.values());
        let bin = dir.path().join("v.bin");
        vg.write_binary(&bin).unwrap();
        let back = ValueGrid::read_binary(&bin).unwrap();
        assert_eq!(back.values(), vg.values());
        assert_eq!(back.steps(), vg.steps());
    }
}
