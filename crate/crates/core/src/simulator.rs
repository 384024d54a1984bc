//! Exact simulation of the n-player jump game by thinning, and the coupling
//! of a Nash-driven system `X` with a master-driven system `Y`.
//!
//! Candidate events arrive at a constant dominating rate. Each candidate
//! names a player and a destination and is accepted with probability
//! `rate / a_hi`, so the accepted events have exactly the feedback
//! intensities, even when those vary continuously in time.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hjb_n::ValueGrid;
use crate::master::MasterValues;
use crate::model::{increments_into, ModelSpec, SimplexPoint};

/// Feedback rule shared by all players of one system.
#[derive(Clone)]
pub enum PolicySpec {
    /// Equilibrium rates read off the exact n-player values.
    ExactNash(Arc<ValueGrid>),
    /// `a*(x, η, Δ_x U(t, ·, η))` with `η` the measure of the other players.
    Master(Arc<dyn MasterValues>),
    /// Fixed rate matrix, row-major `d × d`; the diagonal is ignored.
    Constant(Vec<f64>),
}

impl fmt::Debug for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::ExactNash(v) => write!(f, "ExactNash(n={})", v.n()),
            PolicySpec::Master(_) => write!(f, "Master"),
            PolicySpec::Constant(q) => write!(f, "Constant({q:?})"),
        }
    }
}

impl PolicySpec {
    /// Constant policy from a full rate matrix; off-diagonal entries must lie
    /// in the model's control box.
    pub fn constant(model: &ModelSpec, matrix: &[Vec<f64>]) -> Result<Self> {
        let d = model.d;
        if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
            return Err(invalid(format!("rate matrix must be {d}x{d}")));
        }
        let mut flat = vec![0.0; d * d];
        for x in 0..d {
            for y in 0..d {
                if x == y {
                    continue;
                }
                let q = matrix[x][y];
                if !(q >= model.a_lo && q <= model.a_hi) {
                    return Err(invalid(format!(
                        "rate {q} from {x} to {y} outside [{}, {}]",
                        model.a_lo, model.a_hi
                    )));
                }
                flat[x * d + y] = q;
            }
        }
        Ok(PolicySpec::Constant(flat))
    }

    /// Every off-diagonal rate equal to `q`.
    pub fn uniform(model: &ModelSpec, q: f64) -> Result<Self> {
        let d = model.d;
        PolicySpec::constant(model, &vec![vec![q; d]; d])
    }

    /// Rates of a player at `x` when the whole system (the player included)
    /// has occupation counts `counts`.
    pub fn rates(&self, model: &ModelSpec, t: f64, x: usize, counts: &[u32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; model.d];
        let mut scratch = Scratch::new(model.d);
        self.rates_into(model, t, x, counts, &mut scratch, &mut out)?;
        Ok(out)
    }

    fn check(&self, model: &ModelSpec, n: usize) -> Result<()> {
        match self {
            PolicySpec::ExactNash(v) => {
                if v.n() != n || v.d() != model.d {
                    return Err(invalid(format!(
                        "value grid is for n={}, d={}, simulation has n={n}, d={}",
                        v.n(),
                        v.d(),
                        model.d
                    )));
                }
            }
            PolicySpec::Master(_) => {
                if n < 2 {
                    return Err(invalid("the master policy needs n >= 2"));
                }
            }
            PolicySpec::Constant(q) => {
                if q.len() != model.d * model.d {
                    return Err(invalid("constant policy has the wrong dimension"));
                }
            }
        }
        Ok(())
    }

    fn rates_into(
        &self,
        model: &ModelSpec,
        t: f64,
        x: usize,
        counts: &[u32],
        s: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        let d = model.d;
        match self {
            PolicySpec::Constant(q) => {
                out.copy_from_slice(&q[x * d..(x + 1) * d]);
                out[x] = -(0..d).filter(|&y| y != x).map(|y| out[y]).sum::<f64>();
                return Ok(());
            }
            PolicySpec::ExactNash(v) => {
                s.other.copy_from_slice(counts);
                s.other[x] -= 1;
                let rank = v.grid().rank_counts(&s.other);
                let values = v.values_at(t, rank)?;
                increments_into(&values, x, &mut s.p);
            }
            PolicySpec::Master(u) => {
                let n: u32 = counts.iter().sum();
                let m = (n - 1) as f64;
                for (e, &k) in s.eta.iter_mut().zip(counts) {
                    *e = k as f64 / m;
                }
                s.eta[x] -= 1.0 / m;
                s.eta[x] = s.eta[x].max(0.0);
                let values = u.values(t, &s.eta)?;
                increments_into(&values, x, &mut s.p);
            }
        }
        model.optimal_rates_into(x, &s.p, out);
        Ok(())
    }
}

struct Scratch {
    other: Vec<u32>,
    eta: Vec<f64>,
    p: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Scratch {
            other: vec![0; d],
            eta: vec![0.0; d],
            p: vec![0.0; d],
        }
    }
}

/// Random-stream selector: `key` picks the experiment, `stream` the
/// replication. Each pair yields an independent ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Seed {
    pub key: u64,
    pub stream: u64,
}

impl Seed {
    pub fn new(key: u64, stream: u64) -> Self {
        Seed { key, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key);
        rng.set_stream(self.stream);
        rng
    }
}

impl From<u64> for Seed {
    fn from(key: u64) -> Self {
        Seed { key, stream: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordLevel {
    /// Event log plus measure paths.
    Events,
    /// Measure paths only.
    #[default]
    Measures,
    /// Final measures and online statistics only.
    Summary,
}

impl FromStr for RecordLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "events" => Ok(RecordLevel::Events),
            "measures" => Ok(RecordLevel::Measures),
            "summary" => Ok(RecordLevel::Summary),
            other => Err(invalid(format!(
                "unknown record level '{other}' (expected events, measures or summary)"
            ))),
        }
    }
}

impl fmt::Display for RecordLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordLevel::Events => "events",
            RecordLevel::Measures => "measures",
            RecordLevel::Summary => "summary",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Independent draws from `μ0`.
    Iid,
    /// Largest-remainder rounding of `n·μ0`; players are filled state by state.
    Deterministic,
}

/// How to start a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Initial {
    States(Vec<usize>),
    Sampled { mu0: Vec<f64>, mode: InitMode },
}

impl Initial {
    pub fn iid(mu0: &[f64]) -> Self {
        Initial::Sampled {
            mu0: mu0.to_vec(),
            mode: InitMode::Iid,
        }
    }

    pub fn deterministic(mu0: &[f64]) -> Self {
        Initial::Sampled {
            mu0: mu0.to_vec(),
            mode: InitMode::Deterministic,
        }
    }

    fn draw(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let states = match self {
            Initial::States(s) => s.clone(),
            Initial::Sampled { mu0, mode } => {
                SimplexPoint::new(mu0.clone())?;
                draw_states(n, mu0, *mode, rng)
            }
        };
        if states.len() != n || states.iter().any(|&x| x >= d) {
            return Err(invalid(format!("initial condition must give {n} states in 0..{d}")));
        }
        Ok(states)
    }
}

/// Largest-remainder allocation of `n` players to the weights `mu0`; ties go
/// to the lower state.
pub fn largest_remainder(n: usize, mu0: &[f64]) -> Vec<u32> {
    let exact: Vec<f64> = mu0.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<u32> = exact.iter().map(|e| (e + 1e-9).floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..mu0.len()).collect();
    let frac = |x: usize| exact[x] - counts[x] as f64;
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    for &x in order.iter().take((n as u32).saturating_sub(assigned) as usize) {
        counts[x] += 1;
    }
    counts
}

fn draw_states(n: usize, mu0: &[f64], mode: InitMode, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match mode {
        InitMode::Deterministic => largest_remainder(n, mu0)
            .iter()
            .enumerate()
            .flat_map(|(x, &k)| std::iter::repeat_n(x, k as usize))
            .collect(),
        InitMode::Iid => (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (x, w) in mu0.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return x;
                    }
                }
                mu0.len() - 1
            })
            .collect(),
    }
}

/// Initial states of `n` players drawn from `mu0`.
pub fn initial_states(n: usize, mu0: &[f64], mode: InitMode, seed: impl Into<Seed>) -> Result<Vec<usize>> {
    SimplexPoint::new(mu0.to_vec())?;
    Ok(draw_states(n, mu0, mode, &mut seed.into().rng()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    X,
    Y,
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::X => "X",
            System::Y => "Y",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub player: usize,
    pub from: usize,
    pub to: usize,
    pub system: System,
}

/// Piecewise-constant occupation path with cumulative arrival and departure
/// counters. Entry `k` holds the state on `[times[k], times[k+1])`; the last
/// entry sits at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurePath {
    d: usize,
    times: Vec<f64>,
    counts: Vec<u32>,
    arrivals: Vec<u32>,
    departures: Vec<u32>,
}

impl MeasurePath {
    fn start(counts: &[u32]) -> Self {
        let d = counts.len();
        MeasurePath {
            d,
            times: vec![0.0],
            counts: counts.to_vec(),
            arrivals: vec![0; d],
            departures: vec![0; d],
        }
    }

    fn push(&mut self, t: f64, counts: &[u32], arrivals: &[u32], departures: &[u32]) {
        self.times.push(t);
        self.counts.extend_from_slice(counts);
        self.arrivals.extend_from_slice(arrivals);
        self.departures.extend_from_slice(departures);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn counts(&self, k: usize) -> &[u32] {
        &self.counts[k * self.d..(k + 1) * self.d]
    }

    /// Cumulative arrivals `A_x` up to entry `k`.
    pub fn arrivals(&self, k: usize) -> &[u32] {
        &self.arrivals[k * self.d..(k + 1) * self.d]
    }

    /// Cumulative departures `S_x` up to entry `k`.
    pub fn departures(&self, k: usize) -> &[u32] {
        &self.departures[k * self.d..(k + 1) * self.d]
    }

    pub fn measure(&self, k: usize) -> Vec<f64> {
        let c = self.counts(k);
        let n: u32 = c.iter().sum();
        c.iter().map(|&v| v as f64 / n as f64).collect()
    }

    pub fn final_measure(&self) -> Vec<f64> {
        self.measure(self.len() - 1)
    }

    /// Index of the entry in force at time `t`.
    pub fn entry_at(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    /// `sup_t ‖μⁿ(t) − μ(t)‖` against a deterministic path given on
    /// `flow_times`, linearly interpolated. Both one-sided limits at every
    /// jump and every flow node are inspected.
    pub fn sup_distance(&self, flow_times: &[f64], flow: &[SimplexPoint]) -> f64 {
        let at = |t: f64| -> Vec<f64> {
            let j = flow_times.partition_point(|&s| s <= t).clamp(1, flow_times.len() - 1);
            let (t0, t1) = (flow_times[j - 1], flow_times[j]);
            let w = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
            flow[j - 1].iter().zip(flow[j].iter()).map(|(a, b)| a + w * (b - a)).collect()
        };
        let dist = |k: usize, t: f64| -> f64 {
            let m = self.measure(k);
            m.iter().zip(at(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let mut sup: f64 = 0.0;
        for k in 0..self.len() {
            sup = sup.max(dist(k, self.times[k]));
            if k > 0 {
                sup = sup.max(dist(k - 1, self.times[k]));
            }
        }
        for &t in flow_times {
            sup = sup.max(dist(self.entry_at(t), t));
        }
        sup
    }
}

/// One simulated run. For an uncoupled run `nu_path` is `None` and
/// `decouple_times` is empty.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub level: RecordLevel,
    pub events: Vec<Event>,
    pub mu_path: MeasurePath,
    pub nu_path: Option<MeasurePath>,
    /// First time each player's `X` and `Y` coordinates differ, capped at `T`.
    pub decouple_times: Vec<f64>,
    /// `sup_t ‖μⁿ − νⁿ‖`, tracked online.
    pub sup_gap: f64,
    pub candidates: u64,
    pub accepted: u64,
    pub final_x: Vec<usize>,
    pub final_y: Vec<usize>,
}

impl TrajectoryRecord {
    /// Number of jumps of one system.
    pub fn jump_count(&self, system: System) -> u64 {
        let path = match system {
            System::X => Some(&self.mu_path),
            System::Y => self.nu_path.as_ref(),
        };
        path.map_or(0, |p| p.arrivals(p.len() - 1).iter().map(|&a| a as u64).sum())
    }

    pub fn write_events_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,player,from,to,system")?;
        for e in &self.events {
            writeln!(w, "{},{},{},{},{}", e.t, e.player, e.from, e.to, e.system)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per path entry: system, time, occupation fractions, then the
    /// cumulative arrival and departure counters.
    pub fn write_measures_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.d;
        let mut header = String::from("system,t");
        for prefix in ["mu", "A", "S"] {
            for x in 1..=d {
                header.push_str(&format!(",{prefix}_{x}"));
            }
        }
        writeln!(w, "{header}")?;
        let paths = [(System::X, Some(&self.mu_path)), (System::Y, self.nu_path.as_ref())];
        for (sys, p) in paths {
            let Some(p) = p else { continue };
            for k in 0..p.len() {
                let mut row = format!("{sys},{}", p.times[k]);
                for v in p.measure(k) {
                    row.push_str(&format!(",{v}"));
                }
                for v in p.arrivals(k).iter().chain(p.departures(k)) {
                    row.push_str(&format!(",{v}"));
                }
                writeln!(w, "{row}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Tracker {
    states: Vec<usize>,
    counts: Vec<u32>,
    arrivals: Vec<u32>,
    departures: Vec<u32>,
    path: MeasurePath,
}

impl Tracker {
    fn new(states: Vec<usize>, d: usize) -> Self {
        let mut counts = vec![0u32; d];
        for &x in &states {
            counts[x] += 1;
        }
        let path = MeasurePath::start(&counts);
        Tracker {
            states,
            counts,
            arrivals: vec![0; d],
            departures: vec![0; d],
            path,
        }
    }

    fn jump(&mut self, i: usize, to: usize) -> usize {
        let from = self.states[i];
        self.states[i] = to;
        self.counts[from] -= 1;
        self.counts[to] += 1;
        self.departures[from] += 1;
        self.arrivals[to] += 1;
        from
    }

    fn snapshot(&mut self, t: f64) {
        self.path.push(t, &self.counts, &self.arrivals, &self.departures);
    }

    fn finish(mut self, t_end: f64, level: RecordLevel) -> MeasurePath {
        if level == RecordLevel::Summary {
            let d = self.counts.len();
            self.path.times.truncate(1);
            self.path.counts.truncate(d);
            self.path.arrivals.truncate(d);
            self.path.departures.truncate(d);
        }
        self.snapshot(t_end);
        self.path
    }
}

fn gap(a: &[u32], b: &[u32], n: usize) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let diff = (p as f64 - q as f64) / n as f64;
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

fn checked_rate(rate: f64, a_hi: f64, t: f64) -> Result<f64> {
    if !(rate >= 0.0 && rate <= a_hi * (1.0 + 1e-12)) {
        return Err(Error::Internal(format!(
            "policy rate {rate} at t={t} escapes the thinning bound {a_hi}"
        )));
    }
    Ok(rate)
}

/// Simulates `n` players under one feedback policy on `[0, T]`.
pub fn simulate(
    model: &ModelSpec,
    n: usize,
    policy: &PolicySpec,
    init: &Initial,
    seed: impl Into<Seed>,
    level: RecordLevel,
) -> Result<TrajectoryRecord> {
    if n == 0 {
        return Err(invalid("need at least one player"));
    }
    policy.check(model, n)?;
    let d = model.d;
    let mut rng = seed.into().rng();
    let states = init.draw(n, d, &mut rng)?;
    let mut sys = Tracker::new(states, d);
    let keep_path = level != RecordLevel::Summary;
    let mut events = Vec::new();
    let bound = n as f64 * (d - 1) as f64 * model.a_hi;
    let clock = Exp::new(bound).map_err(|e| invalid(e.to_string()))?;
    let mut scratch = Scratch::new(d);
    let mut rates = vec![0.0; d];
    let (mut candidates, mut accepted) = (0u64, 0u64);
    let mut t = 0.0;
    loop {
        t += clock.sample(&mut rng);
        if t >= model.horizon {
            break;
        }
        candidates += 1;
        let i = rng.random_range(0..n);
        let offset = rng.random_range(1..d);
        let u: f64 = rng.random();
        let x = sys.states[i];
        let z = (x + offset) % d;
        let outcome = policy
            .rates_into(model, t, x, &sys.counts, &mut scratch, &mut rates)
            .and_then(|_| checked_rate(rates[z], model.a_hi, t));
        let rate = match outcome {
            Ok(r) => r,
            Err(source) => {
                let partial = TrajectoryRecord {
                    n,
                    d,
                    horizon: model.horizon,
                    level,
                    events,
                    final_x: sys.states.clone(),
                    mu_path: sys.finish(t, level),
                    nu_path: None,
                    decouple_times: Vec::new(),
                    sup_gap: 0.0,
                    candidates,
                    accepted,
                    final_y: Vec::new(),
                };
                return Err(Error::AbortedRun {
                    t,
                    events: accepted as usize,
                    partial: Box::new(partial),
                    source: Box::new(source),
                });
            }
        };
        if u * model.a_hi < rate {
            accepted += 1;
            let from = sys.jump(i, z);
            if level == RecordLevel::Events {
                events.push(Event {
                    t,
                    player: i,
                    from,
                    to: z,
                    system: System::X,
                });
            }
            if keep_path {
                sys.snapshot(t);
            }
        }
    }
    Ok(TrajectoryRecord {
        n,
        d,
        horizon: model.horizon,
        level,
        events,
        final_x: sys.states.clone(),
        mu_path: sys.finish(model.horizon, level),
        nu_path: None,
        decouple_times: Vec::new(),
        sup_gap: 0.0,
        candidates,
        accepted,
        final_y: Vec::new(),
    })
}

/// Runs the `X` system under `policy_x` and the `Y` system under `policy_y`
/// from the same initial states, maximally coupled: while a player's two
/// coordinates agree, a joint move to `z` happens at rate
/// `min(a^X_z, a^Y_z)` and a single-system move at the excess rate of the
/// larger side. Once they differ the coordinates jump independently.
pub fn simulate_coupled(
    model: &ModelSpec,
    n: usize,
    policy_x: &PolicySpec,
    policy_y: &PolicySpec,
    init: &Initial,
    seed: impl Into<Seed>,
    level: RecordLevel,
) -> Result<TrajectoryRecord> {
    if n == 0 {
        return Err(invalid("need at least one player"));
    }
    policy_x.check(model, n)?;
    policy_y.check(model, n)?;
    let d = model.d;
    let horizon = model.horizon;
    let mut rng = seed.into().rng();
    let states = init.draw(n, d, &mut rng)?;
    let mut sx = Tracker::new(states.clone(), d);
    let mut sy = Tracker::new(states, d);
    let keep_path = level != RecordLevel::Summary;
    let mut events = Vec::new();
    let mut tau = vec![horizon; n];
    let mut sup_gap: f64 = 0.0;
    let bound = n as f64 * 2.0 * (d - 1) as f64 * model.a_hi;
    let clock = Exp::new(bound).map_err(|e| invalid(e.to_string()))?;
    let mut scratch = Scratch::new(d);
    let (mut rx, mut ry) = (vec![0.0; d], vec![0.0; d]);
    let (mut candidates, mut accepted) = (0u64, 0u64);
    let mut t = 0.0;

    macro_rules! rate_or_abort {
        ($policy:expr, $x:expr, $counts:expr, $out:expr, $z:expr) => {
            match $policy
                .rates_into(model, t, $x, $counts, &mut scratch, $out)
                .and_then(|_| checked_rate($out[$z], model.a_hi, t))
            {
                Ok(r) => r,
                Err(source) => {
                    let partial = TrajectoryRecord {
                        n,
                        d,
                        horizon,
                        level,
                        events,
                        final_x: sx.states.clone(),
                        final_y: sy.states.clone(),
                        mu_path: sx.finish(t, level),
                        nu_path: Some(sy.finish(t, level)),
                        decouple_times: tau,
                        sup_gap,
                        candidates,
                        accepted,
                    };
                    return Err(Error::AbortedRun {
                        t,
                        events: accepted as usize,
                        partial: Box::new(partial),
                        source: Box::new(source),
                    });
                }
            }
        };
    }

    loop {
        t += clock.sample(&mut rng);
        if t >= horizon {
            break;
        }
        candidates += 1;
        let i = rng.random_range(0..n);
        let channel = rng.random_range(0..2 * (d - 1));
        let (lane, offset) = (channel / (d - 1), channel % (d - 1) + 1);
        let w = rng.random::<f64>() * model.a_hi;
        let (xi, yi) = (sx.states[i], sy.states[i]);
        let mut moved_x = None;
        let mut moved_y = None;
        if xi == yi {
            if lane == 1 {
                continue;
            }
            let z = (xi + offset) % d;
            let ax = rate_or_abort!(policy_x, xi, &sx.counts, &mut rx, z);
            let ay = rate_or_abort!(policy_y, yi, &sy.counts, &mut ry, z);
            if w < ax.min(ay) {
                moved_x = Some(z);
                moved_y = Some(z);
            } else if w < ax.max(ay) {
                if ax > ay {
                    moved_x = Some(z);
                } else {
                    moved_y = Some(z);
                }
                tau[i] = t;
            }
        } else if lane == 0 {
            let z = (xi + offset) % d;
            let ax = rate_or_abort!(policy_x, xi, &sx.counts, &mut rx, z);
            if w < ax {
                moved_x = Some(z);
            }
        } else {
            let z = (yi + offset) % d;
            let ay = rate_or_abort!(policy_y, yi, &sy.counts, &mut ry, z);
            if w < ay {
                moved_y = Some(z);
            }
        }
        if moved_x.is_none() && moved_y.is_none() {
            continue;
        }
        accepted += 1;
        if let Some(z) = moved_x {
            let from = sx.jump(i, z);
            if level == RecordLevel::Events {
                events.push(Event {
                    t,
                    player: i,
                    from,
                    to: z,
                    system: System::X,
                });
            }
            if keep_path {
                sx.snapshot(t);
            }
        }
        if let Some(z) = moved_y {
            let from = sy.jump(i, z);
            if level == RecordLevel::Events {
                events.push(Event {
                    t,
                    player: i,
                    from,
                    to: z,
                    system: System::Y,
                });
            }
            if keep_path {
                sy.snapshot(t);
            }
        }
        sup_gap = sup_gap.max(gap(&sx.counts, &sy.counts, n));
    }
    Ok(TrajectoryRecord {
        n,
        d,
        horizon,
        level,
        events,
        final_x: sx.states.clone(),
        final_y: sy.states.clone(),
        mu_path: sx.finish(horizon, level),
        nu_path: Some(sy.finish(horizon, level)),
        decouple_times: tau,
        sup_gap,
        candidates,
        accepted,
    })
}

/// `(sup_t ‖μⁿ − νⁿ‖, fraction of players with τ < T)` of a coupled run.
pub fn coupling_gap(record: &TrajectoryRecord) -> Result<(f64, f64)> {
    if record.nu_path.is_none() {
        return Err(invalid("coupling_gap needs a coupled record"));
    }
    let decoupled = record.decouple_times.iter().filter(|&&t| t < record.horizon).count();
    Ok((record.sup_gap, decoupled as f64 / record.n as f64))
}

/// Measure of the other players seen from a player at `x`:
/// `max(n/(n−1)·η − e_x/(n−1), 0)`. When nobody occupies `x` there is no
/// player to remove and `η` is returned unchanged.
pub fn sharp_measure(eta: &[f64], n: usize, x: usize) -> Result<SimplexPoint> {
    if n < 2 || x >= eta.len() {
        return Err(invalid(format!("sharp measure needs n >= 2 and a valid state, got n={n}, x={x}")));
    }
    for &w in eta {
        let k = w * n as f64;
        if (k - k.round()).abs() > 1e-9 {
            return Err(invalid(format!("measure {eta:?} is not on the {n}-point grid")));
        }
    }
    if (eta[x] * n as f64).round() == 0.0 {
        return SimplexPoint::new(eta.to_vec());
    }
    let m = (n - 1) as f64;
    let out: Vec<f64> = eta
        .iter()
        .enumerate()
        .map(|(y, &w)| {
            let v = n as f64 / m * w - if y == x { 1.0 / m } else { 0.0 };
            v.max(0.0)
        })
        .collect();
    let s: f64 = out.iter().sum();
    SimplexPoint::new(out.iter().map(|v| v / s).collect())
}

/// Centered counting processes of a run, sampled at its path entries:
/// `M_x = n^{-1/2}(A_x − ∫ arrival intensity)` and
/// `N_x = n^{-1/2}(S_x − ∫ departure intensity)`.
#[derive(Clone, Debug)]
pub struct MartingalePaths {
    pub d: usize,
    pub times: Vec<f64>,
    /// `[k * d + x]`
    pub arrival: Vec<f64>,
    pub departure: Vec<f64>,
}

impl MartingalePaths {
    pub fn arrival_at(&self, k: usize) -> &[f64] {
        &self.arrival[k * self.d..(k + 1) * self.d]
    }

    pub fn departure_at(&self, k: usize) -> &[f64] {
        &self.departure[k * self.d..(k + 1) * self.d]
    }

    pub fn terminal_arrival(&self) -> &[f64] {
        self.arrival_at(self.times.len() - 1)
    }

    pub fn terminal_departure(&self) -> &[f64] {
        self.departure_at(self.times.len() - 1)
    }
}

/// Rebuilds the martingales of the `X` system of `record` under the policy
/// that generated it. Compensators between events are integrated with
/// Simpson's rule on sub-steps no longer than `dt_quad`; for a constant
/// policy this is exact.
pub fn martingale_paths(
    model: &ModelSpec,
    record: &TrajectoryRecord,
    policy: &PolicySpec,
    dt_quad: f64,
) -> Result<MartingalePaths> {
    if record.level == RecordLevel::Summary {
        return Err(invalid("martingale paths need a record with measure paths"));
    }
    if !(dt_quad > 0.0) {
        return Err(invalid("quadrature step must be positive"));
    }
    policy.check(model, record.n)?;
    let d = record.d;
    let path = &record.mu_path;
    let scale = 1.0 / (record.n as f64).sqrt();
    let mut scratch = Scratch::new(d);
    let mut rates = vec![0.0; d];
    let mut inflow = vec![0.0; d];
    let mut outflow = vec![0.0; d];
    let mut comp_in = vec![0.0; d];
    let mut comp_out = vec![0.0; d];
    let mut out = MartingalePaths {
        d,
        times: path.times.clone(),
        arrival: Vec::with_capacity(path.len() * d),
        departure: Vec::with_capacity(path.len() * d),
    };
    let mut intensity = |s: f64, counts: &[u32], fin: &mut [f64], fout: &mut [f64]| -> Result<()> {
        fin.iter_mut().for_each(|v| *v = 0.0);
        fout.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..d {
            if counts[y] == 0 {
                continue;
            }
            policy.rates_into(model, s, y, counts, &mut scratch, &mut rates)?;
            let k = counts[y] as f64;
            for z in (0..d).filter(|&z| z != y) {
                fin[z] += k * rates[z];
                fout[y] += k * rates[z];
            }
        }
        Ok(())
    };
    for k in 0..path.len() {
        if k > 0 {
            let (a, b) = (path.times[k - 1], path.times[k]);
            let counts = path.counts(k - 1);
            if b > a {
                let subs = ((b - a) / dt_quad).ceil().max(1.0) as usize;
                let h = (b - a) / subs as f64;
                for j in 0..subs {
                    let s0 = a + j as f64 * h;
                    // Rounding must not push the last node past the event time.
                    let s1 = if j + 1 == subs { b } else { s0 + h };
                    for (node, weight) in [(s0, 1.0), (s0 + 0.5 * h, 4.0), (s1, 1.0)] {
                        intensity(node, counts, &mut inflow, &mut outflow)?;
                        for x in 0..d {
                            comp_in[x] += weight * h / 6.0 * inflow[x];
                            comp_out[x] += weight * h / 6.0 * outflow[x];
                        }
                    }
                }
            }
        }
        let (arr, dep) = (path.arrivals(k), path.departures(k));
        for x in 0..d {
            out.arrival.push(scale * (arr[x] as f64 - comp_in[x]));
            out.departure.push(scale * (dep[x] as f64 - comp_out[x]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb_n::solve_hjb_n;
    use crate::master::{FbOptions, MasterTable};
    use crate::stats;

    fn two_state(horizon: f64) -> ModelSpec {
        ModelSpec::decoupled(2, horizon, 0.5).unwrap()
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(largest_remainder(10, &[0.55, 0.45]), vec![6, 4]);
        assert_eq!(largest_remainder(7, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), vec![3, 2, 2]);
        let s = initial_states(10, &[0.55, 0.45], InitMode::Deterministic, 0).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == 0).count(), 6);
    }

    #[test]
    fn iid_initial_states_are_reproducible() {
        let a = initial_states(50, &[0.3, 0.7], InitMode::Iid, 9).unwrap();
        let b = initial_states(50, &[0.3, 0.7], InitMode::Iid, 9).unwrap();
        let c = initial_states(50, &[0.3, 0.7], InitMode::Iid, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_jump_count() {
        let m = two_state(1.0);
        let p = PolicySpec::uniform(&m, 1.0).unwrap();
        let counts: Vec<f64> = (0..10_000)
            .map(|s| {
                let r = simulate(&m, 1, &p, &Initial::States(vec![0]), Seed::new(3, s), RecordLevel::Summary).unwrap();
                r.jump_count(System::X) as f64
            })
            .collect();
        let mean = stats::mean(&counts);
        assert!((mean - 1.0).abs() < 0.04, "mean jump count {mean}");
    }

    #[test]
    fn tight_bound_accepts_every_candidate() {
        let m = two_state(1.0);
        let p = PolicySpec::uniform(&m, m.a_hi).unwrap();
        let r = simulate(&m, 5, &p, &Initial::deterministic(&[0.4, 0.6]), 1, RecordLevel::Events).unwrap();
        assert!(r.candidates > 0);
        assert_eq!(r.candidates, r.accepted);
    }

    #[test]
    fn measure_moves_by_one_player() {
        let m = ModelSpec::decoupled(3, 2.0, 0.5).unwrap();
        let p = PolicySpec::uniform(&m, 0.7).unwrap();
        let n = 6;
        let r = simulate(&m, n, &p, &Initial::iid(&[0.2, 0.3, 0.5]), 4, RecordLevel::Events).unwrap();
        let path = &r.mu_path;
        assert_eq!(path.len(), r.events.len() + 2);
        for (k, e) in r.events.iter().enumerate() {
            let (before, after) = (path.counts(k), path.counts(k + 1));
            for x in 0..3 {
                let expect = before[x] as i64 - (x == e.from) as i64 + (x == e.to) as i64;
                assert_eq!(after[x] as i64, expect);
            }
            assert_eq!(after.iter().sum::<u32>() as usize, n);
        }
        let last = path.len() - 1;
        let total = r.events.len() as u32;
        assert_eq!(path.arrivals(last).iter().sum::<u32>(), total);
        assert_eq!(path.departures(last).iter().sum::<u32>(), total);
        assert_eq!(path.times()[last], m.horizon);
    }

    #[test]
    fn runs_are_deterministic() {
        let m = ModelSpec::two_state_congestion();
        let v = Arc::new(solve_hjb_n(&m, 6, 1e-2).unwrap());
        let p = PolicySpec::ExactNash(v);
        let a = simulate(&m, 6, &p, &Initial::iid(&[0.5, 0.5]), Seed::new(1, 2), RecordLevel::Events).unwrap();
        let b = simulate(&m, 6, &p, &Initial::iid(&[0.5, 0.5]), Seed::new(1, 2), RecordLevel::Events).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.mu_path, b.mu_path);
    }

    #[test]
    fn wrong_grid_rejected() {
        let m = ModelSpec::two_state_congestion();
        let v = Arc::new(solve_hjb_n(&m, 4, 1e-2).unwrap());
        let err = simulate(&m, 5, &PolicySpec::ExactNash(v), &Initial::iid(&[0.5, 0.5]), 0, RecordLevel::Summary);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        assert!(PolicySpec::uniform(&m, 50.0).is_err());
    }

    #[test]
    fn decoupled_model_stays_coupled() {
        let m = ModelSpec::decoupled(2, 1.0, 0.5).unwrap();
        let n = 8;
        let v = Arc::new(solve_hjb_n(&m, n, 1e-2).unwrap());
        let table = MasterTable::build(&m, n - 1, 5, &FbOptions::for_model(&m)).unwrap();
        let r = simulate_coupled(
            &m,
            n,
            &PolicySpec::ExactNash(v),
            &PolicySpec::Master(Arc::new(table)),
            &Initial::iid(&[0.3, 0.7]),
            5,
            RecordLevel::Measures,
        )
        .unwrap();
        assert_eq!(r.final_x, r.final_y);
        assert!(r.decouple_times.iter().all(|&t| t == m.horizon));
        assert_eq!(Some(&r.mu_path), r.nu_path.as_ref());
        assert_eq!(coupling_gap(&r).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn single_decoupled_player_gap() {
        // X never moves while Y moves at the top rate: every first move of
        // a player decouples it, and the gap in a two-state game is at most
        // (number decoupled) * sqrt(2) / n.
        let m = ModelSpec::decoupled(2, 0.02, 0.5).unwrap();
        let slow = PolicySpec::uniform(&m, m.a_lo).unwrap();
        let fast = PolicySpec::uniform(&m, m.a_hi).unwrap();
        let n = 10;
        for s in 0..200 {
            let r = simulate_coupled(&m, n, &slow, &fast, &Initial::deterministic(&[0.5, 0.5]), s, RecordLevel::Events)
                .unwrap();
            let (sup, frac) = coupling_gap(&r).unwrap();
            let decoupled = (frac * n as f64).round();
            if decoupled == 1.0 {
                assert!(sup <= 2.0 / n as f64 + 1e-12);
                assert!(sup > 0.0);
            }
            assert!(sup <= decoupled * 2f64.sqrt() / n as f64 + 1e-12);
        }
    }

    #[test]
    fn coupled_outcome_masses_are_a_coupling() {
        // With different constant policies the X marginal must still jump at
        // its own rate: mean jump count of one player with rate q over T is q*T.
        let m = two_state(1.0);
        let px = PolicySpec::uniform(&m, 2.0).unwrap();
        let py = PolicySpec::uniform(&m, 0.5).unwrap();
        let (mut jx, mut jy) = (Vec::new(), Vec::new());
        for s in 0..4000 {
            let r = simulate_coupled(&m, 1, &px, &py, &Initial::States(vec![0]), s, RecordLevel::Summary).unwrap();
            jx.push(r.jump_count(System::X) as f64);
            jy.push(r.jump_count(System::Y) as f64);
        }
        assert!((stats::mean(&jx) - 2.0).abs() < 4.0 * stats::std_error(&jx));
        assert!((stats::mean(&jy) - 0.5).abs() < 4.0 * stats::std_error(&jy));
    }

    #[test]
    fn sharp_measure_examples() {
        let s = sharp_measure(&[0.5, 0.5], 2, 0).unwrap();
        assert_eq!(s.weights(), &[0.0, 1.0]);
        let s = sharp_measure(&[0.0, 1.0], 4, 0).unwrap();
        assert_eq!(s.weights(), &[0.0, 1.0]);
        for n in [3usize, 5, 9] {
            for k in 1..n {
                let eta = [k as f64 / n as f64, (n - k) as f64 / n as f64];
                let s = sharp_measure(&eta, n, 0).unwrap();
                let dist: f64 = eta.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(dist <= 2.0 / (n - 1) as f64);
                assert!((s[0] - (k - 1) as f64 / (n - 1) as f64).abs() < 1e-12);
            }
        }
        assert!(sharp_measure(&[0.5, 0.5], 3, 0).is_err());
    }

    #[test]
    fn martingale_of_silent_path_is_negated_compensator() {
        let m = two_state(1.0);
        let p = PolicySpec::uniform(&m, 0.3).unwrap();
        let mut silent = None;
        for s in 0..50 {
            let r = simulate(&m, 1, &p, &Initial::States(vec![0]), s, RecordLevel::Measures).unwrap();
            if r.accepted == 0 {
                silent = Some(r);
                break;
            }
        }
        let r = silent.expect("some seed yields no jump");
        let mp = martingale_paths(&m, &r, &p, 0.01).unwrap();
        let arr = mp.terminal_arrival();
        let dep = mp.terminal_departure();
        assert!((arr[1] + 0.3).abs() < 1e-12);
        assert_eq!(arr[0], 0.0);
        assert!((dep[0] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn record_exports() {
        let m = ModelSpec::decoupled(2, 1.0, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = PolicySpec::uniform(&m, 1.0).unwrap();
        let r = simulate_coupled(&m, 4, &p, &p, &Initial::iid(&[0.5, 0.5]), 2, RecordLevel::Events).unwrap();
        r.write_events_csv(dir.path().join("e.csv")).unwrap();
        r.write_measures_csv(dir.path().join("m.csv")).unwrap();
        let ev = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert_eq!(ev.lines().count(), r.events.len() + 1);
        let ms = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert!(ms.starts_with("system,t,mu_1,mu_2,A_1,A_2,S_1,S_2"));
        assert_eq!("summary".parse::<RecordLevel>().unwrap(), RecordLevel::Summary);
        assert!("all".parse::<RecordLevel>().is_err());
    }
}
