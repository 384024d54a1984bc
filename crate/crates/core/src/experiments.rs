//! Batch experiments behind the `mfg` command line: configuration, runners,
//! tables and reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Error, Result};
use crate::fluctuations::{
    empirical_fluctuation, sde_terminal_sample, summarize, write_sample_csv, FluctuationSummary, NoiseModel,
    SdeCoefficients,
};
use crate::hjb_n::{solve_hjb_n, ValueGrid};
use crate::master::{
    gradient_matrix, master_residuals, master_values, mfg_flow, solve_fb, DirectMaster, FbOptions, Linearization,
    MasterTable,
};
use crate::model::{ModelSpec, SimplexPoint};
use crate::simulator::{
    coupling_gap, simulate, simulate_coupled, Initial, PolicySpec, RecordLevel, Seed, System,
};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SolveHjb,
    SolveMfg,
    Simulate,
    Converge,
    Coupling,
    Fluctuations,
    Residual,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::SolveHjb,
        Experiment::SolveMfg,
        Experiment::Simulate,
        Experiment::Converge,
        Experiment::Coupling,
        Experiment::Fluctuations,
        Experiment::Residual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::SolveHjb => "solve-hjb",
            Experiment::SolveMfg => "solve-mfg",
            Experiment::Simulate => "simulate",
            Experiment::Converge => "converge",
            Experiment::Coupling => "coupling",
            Experiment::Fluctuations => "fluctuations",
            Experiment::Residual => "residual",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                invalid(format!("unknown experiment '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Which feedback rule drives a plain simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[default]
    Nash,
    Master,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseChoice {
    #[default]
    IntensityScaled,
    PairwiseJump,
}

impl From<NoiseChoice> for NoiseModel {
    fn from(c: NoiseChoice) -> Self {
        match c {
            NoiseChoice::IntensityScaled => NoiseModel::IntensityScaled,
            NoiseChoice::PairwiseJump => NoiseModel::PairwiseJump,
        }
    }
}

fn default_n() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_reps() -> usize {
    100
}
fn default_fd() -> f64 {
    1e-4
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_samples() -> usize {
    200
}
fn default_nodes() -> usize {
    21
}
fn default_fluct_tol() -> f64 {
    0.15
}

/// Experiment configuration, read from JSON. Relative model paths resolve
/// against the directory of the configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub experiment: Experiment,
    #[serde(default = "default_n")]
    pub n: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Step of the n-player ODE and of the fluctuation SDE (default `T/1000`).
    #[serde(default)]
    pub dt: Option<f64>,
    /// Step of the forward-backward solver (default `T/2000`).
    #[serde(default)]
    pub fb_dt: Option<f64>,
    /// Picard tolerance (default `1e-9`).
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default = "default_fd")]
    pub fd_step: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub record_level: RecordLevel,
    #[serde(default)]
    pub jobs: Option<usize>,
    /// Initial distribution (default uniform).
    #[serde(default)]
    pub mu0: Option<Vec<f64>>,
    #[serde(default)]
    pub t0: f64,
    /// Sampled points for the residual experiment.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Time nodes of the tabulated master solution used by simulated players.
    #[serde(default = "default_nodes")]
    pub table_nodes: usize,
    /// Relative tolerance on fluctuation standard deviations.
    #[serde(default = "default_fluct_tol")]
    pub fluct_tolerance: f64,
    #[serde(default)]
    pub noise: NoiseChoice,
    #[serde(default)]
    pub policy: PolicyKind,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<PathBuf>, experiment: Experiment) -> Self {
        ExperimentConfig {
            model: model.into(),
            experiment,
            n: default_n(),
            reps: default_reps(),
            seed: 0,
            dt: None,
            fb_dt: None,
            tol: None,
            fd_step: default_fd(),
            out: default_out(),
            record_level: RecordLevel::default(),
            jobs: None,
            mu0: None,
            t0: 0.0,
            samples: default_samples(),
            table_nodes: default_nodes(),
            fluct_tolerance: default_fluct_tol(),
            noise: NoiseChoice::default(),
            policy: PolicyKind::default(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("bad config {}: {e}", path.display())))?;
        if cfg.model.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.model = dir.join(&cfg.model);
            }
        }
        Ok(cfg)
    }

    /// Loads the model and checks the configuration against it.
    pub fn resolve(&self) -> Result<ModelSpec> {
        if !self.model.is_file() {
            return Err(invalid(format!("model file {} does not exist", self.model.display())));
        }
        let model = ModelSpec::from_json_file(&self.model)
            .map_err(|e| invalid(format!("bad model file {}: {e}", self.model.display())))?;
        if self.n.is_empty() || self.n.iter().any(|&n| n < 2) {
            return Err(invalid("every player count must be at least 2"));
        }
        if self.reps == 0 || self.samples == 0 {
            return Err(invalid("reps and samples must be positive"));
        }
        if let Some(mu0) = &self.mu0 {
            if mu0.len() != model.d {
                return Err(invalid(format!("mu0 has {} entries, model has d={}", mu0.len(), model.d)));
            }
            SimplexPoint::new(mu0.clone())?;
        }
        for (name, v) in [("dt", self.dt), ("fb_dt", self.fb_dt), ("tol", self.tol)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(invalid(format!("{name} must be positive")));
                }
            }
        }
        if !(self.fd_step > 0.0) || !(self.t0 >= 0.0 && self.t0 <= model.horizon) {
            return Err(invalid("fd_step must be positive and t0 must lie in [0, T]"));
        }
        if self.table_nodes < 2 {
            return Err(invalid("table_nodes must be at least 2"));
        }
        Ok(model)
    }

    pub fn fb_options(&self, model: &ModelSpec) -> FbOptions {
        let mut o = FbOptions::for_model(model);
        if let Some(dt) = self.fb_dt {
            o.dt = dt;
        }
        if let Some(tol) = self.tol {
            o.tol = tol;
        }
        o
    }

    pub fn hjb_dt(&self, model: &ModelSpec) -> f64 {
        self.dt.unwrap_or(model.horizon / 1000.0)
    }

    pub fn initial(&self, model: &ModelSpec) -> Vec<f64> {
        self.mu0.clone().unwrap_or_else(|| vec![1.0 / model.d as f64; model.d])
    }
}

/// A CSV-ready table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self, provenance: &str) -> String {
        let mut s = String::new();
        for line in provenance.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        s.push_str(&self.header.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// Fixed-width rendering for the terminal.
    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = r.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
            s.push_str(&cells.join("  "));
            s.push('\n');
        }
        s
    }
}

fn num(v: f64) -> String {
    format!("{v:.6e}")
}

/// Outcome of one experiment.
#[derive(Clone, Debug)]
pub struct Report {
    pub experiment: Experiment,
    pub table: Table,
    pub summary: serde_json::Value,
    /// Side files written next to the table.
    pub files: Vec<PathBuf>,
}

impl Report {
    /// Writes `<experiment>.csv` and `<experiment>_summary.json`, both
    /// carrying the resolved configuration.
    pub fn write(&self, cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&cfg.out)?;
        let prov = provenance(cfg, model)?;
        let csv = cfg.out.join(format!("{}.csv", self.experiment));
        std::fs::write(&csv, self.table.to_csv(&serde_json::to_string(&prov)?))?;
        let js = cfg.out.join(format!("{}_summary.json", self.experiment));
        let doc = json!({ "provenance": prov, "summary": self.summary });
        std::fs::write(&js, serde_json::to_string_pretty(&doc)? + "\n")?;
        let mut files = vec![csv, js];
        files.extend(self.files.iter().cloned());
        Ok(files)
    }
}

fn provenance(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<serde_json::Value> {
    let fb = cfg.fb_options(model);
    Ok(json!({
        "tool": concat!("mfg ", env!("CARGO_PKG_VERSION")),
        "config": cfg,
        "model_spec": serde_json::from_str::<serde_json::Value>(&model.to_json()?)?,
        "resolved": {
            "hjb_dt": cfg.hjb_dt(model),
            "fb_dt": fb.dt,
            "tol": fb.tol,
            "damping": fb.damping,
            "mu0": cfg.initial(model),
        }
    }))
}

/// Runs the configured experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    let model = cfg.resolve()?;
    match cfg.experiment {
        Experiment::SolveHjb => run_solve_hjb(cfg, &model),
        Experiment::SolveMfg => run_solve_mfg(cfg, &model),
        Experiment::Simulate => run_simulate(cfg, &model),
        Experiment::Converge => run_converge(cfg, &model),
        Experiment::Coupling => run_coupling(cfg, &model),
        Experiment::Fluctuations => run_fluctuations(cfg, &model),
        Experiment::Residual => run_residual(cfg, &model),
    }
}

pub fn run_solve_hjb(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    std::fs::create_dir_all(&cfg.out)?;
    let mut table = Table::new(&["n", "grid_points", "steps", "v0_min", "v0_max", "terminal_error"]);
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for &n in &cfg.n {
        let v = solve_hjb_n(model, n, cfg.hjb_dt(model))?;
        let v0 = v.slice(0);
        let lo = v0.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let term = terminal_error(&v, model);
        let path = cfg.out.join(format!("value_grid_n{n}.csv"));
        v.write_csv(&path)?;
        files.push(path);
        table.push(vec![
            n.to_string(),
            v.grid().len().to_string(),
            v.steps().to_string(),
            num(lo),
            num(hi),
            num(term),
        ]);
        rows.push(json!({"n": n, "grid_points": v.grid().len(), "v0_min": lo, "v0_max": hi, "terminal_error": term}));
    }
    Ok(Report {
        experiment: Experiment::SolveHjb,
        table,
        summary: json!({ "rows": rows }),
        files,
    })
}

fn terminal_error(v: &ValueGrid, model: &ModelSpec) -> f64 {
    let last = v.steps();
    let mut err: f64 = 0.0;
    for r in 0..v.grid().len() {
        for x in 0..v.d() {
            err = err.max((v.value(last, x, r) - model.terminal(x, v.grid().point(r))).abs());
        }
    }
    err
}

pub fn run_solve_mfg(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    std::fs::create_dir_all(&cfg.out)?;
    let opts = cfg.fb_options(model);
    let mu0 = cfg.initial(model);
    let fb = solve_fb(model, cfg.t0, &mu0, &opts)?;
    let k = gradient_matrix(&fb, Linearization::Full, &opts)?;
    let path = cfg.out.join("fb_solution.csv");
    fb.write_csv(&path)?;
    let mut header = vec!["x".to_string(), "U".to_string()];
    header.extend((1..=model.d).map(|z| format!("K_{z}")));
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for x in 0..model.d {
        let mut row = vec![(x + 1).to_string(), num(fb.initial_values()[x])];
        row.extend(k[x].iter().map(|v| num(*v)));
        table.push(row);
    }
    let mu_t = fb.mu_at(fb.steps()).to_vec();
    Ok(Report {
        experiment: Experiment::SolveMfg,
        table,
        summary: json!({
            "t0": cfg.t0,
            "mu0": mu0,
            "U": fb.initial_values(),
            "grad_eta_U": k,
            "mu_T": mu_t,
            "picard_iterations": fb.iterations,
            "picard_gap": fb.residual,
            "nodes": fb.times().len(),
        }),
        files: vec![path],
    })
}

/// Per-replication outcome of a plain simulation.
#[derive(Clone, Debug, Serialize)]
pub struct SimulationRow {
    pub rep: usize,
    pub jumps: u64,
    /// `sup_t ‖μⁿ(t) − μ(t)‖` against the mean-field flow.
    pub sup_to_flow: f64,
    pub final_measure: Vec<f64>,
}

/// Runs `reps` simulations (stream `r` of `key` for replication `r`) and
/// measures each against the flow `(flow_times, flow)`. With `save`, the
/// records are exported at their record level into that directory.
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    model: &ModelSpec,
    n: usize,
    policy: &PolicySpec,
    init: &Initial,
    reps: usize,
    key: u64,
    level: RecordLevel,
    flow_times: &[f64],
    flow: &[SimplexPoint],
    save: Option<&Path>,
) -> Result<Vec<SimulationRow>> {
    let keep = if level == RecordLevel::Summary { RecordLevel::Measures } else { level };
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let rec = simulate(model, n, policy, init, Seed::new(key, r as u64), keep)?;
            if let Some(dir) = save {
                if level == RecordLevel::Events {
                    rec.write_events_csv(dir.join(format!("events_n{n}_rep{r}.csv")))?;
                }
                if level != RecordLevel::Summary {
                    rec.write_measures_csv(dir.join(format!("measures_n{n}_rep{r}.csv")))?;
                }
            }
            Ok(SimulationRow {
                rep: r,
                jumps: rec.jump_count(System::X),
                sup_to_flow: rec.mu_path.sup_distance(flow_times, flow),
                final_measure: rec.mu_path.final_measure(),
            })
        })
        .collect()
}

pub fn run_simulate(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    std::fs::create_dir_all(&cfg.out)?;
    let opts = cfg.fb_options(model);
    let mu0 = cfg.initial(model);
    let (times, flow) = mfg_flow(model, &mu0, &opts)?;
    let mut header = vec!["n".to_string(), "rep".to_string(), "jumps".to_string(), "sup_to_flow".to_string()];
    header.extend((1..=model.d).map(|x| format!("mu_T_{x}")));
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    let mut per_n = Vec::new();
    for (i, &n) in cfg.n.iter().enumerate() {
        let policy = build_policy(cfg, model, n, &opts)?;
        let rows = simulate_batch(
            model,
            n,
            &policy,
            &Initial::iid(&mu0),
            cfg.reps,
            cfg.seed.wrapping_add(i as u64),
            cfg.record_level,
            &times,
            &flow,
            Some(&cfg.out),
        )?;
        let sups: Vec<f64> = rows.iter().map(|r| r.sup_to_flow).collect();
        per_n.push(json!({
            "n": n,
            "mean_jumps": stats::mean(&rows.iter().map(|r| r.jumps as f64).collect::<Vec<_>>()),
            "median_sup_to_flow": stats::median(&sups),
        }));
        for r in rows {
            let mut row = vec![n.to_string(), r.rep.to_string(), r.jumps.to_string(), num(r.sup_to_flow)];
            row.extend(r.final_measure.iter().map(|v| num(*v)));
            table.push(row);
        }
    }
    Ok(Report {
        experiment: Experiment::Simulate,
        table,
        summary: json!({ "policy": cfg.policy, "per_n": per_n }),
        files: Vec::new(),
    })
}

fn build_policy(cfg: &ExperimentConfig, model: &ModelSpec, n: usize, opts: &FbOptions) -> Result<PolicySpec> {
    Ok(match cfg.policy {
        PolicyKind::Nash => PolicySpec::ExactNash(Arc::new(solve_hjb_n(model, n, cfg.hjb_dt(model))?)),
        PolicyKind::Master => PolicySpec::Master(Arc::new(MasterTable::build(model, n - 1, cfg.table_nodes, opts)?)),
    })
}

/// One row of the n-player versus master comparison at time `t0`.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergeRow {
    pub n: usize,
    pub grid_points: usize,
    /// `max_{x,η} |Vⁿ(t0, x, η) − U(t0, x, η)|` over `P^{n−1}([d])`.
    pub sup_gap: f64,
    /// `(1/n) Σ_i |Vⁿ − U|(t0, x_i, m^{n,i})`, averaged over iid samples.
    pub avg_gap: f64,
    pub error: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn converge_one(
    model: &ModelSpec,
    n: usize,
    hjb_dt: f64,
    opts: &FbOptions,
    t0: f64,
    mu0: &[f64],
    reps: usize,
    key: u64,
) -> Result<ConvergeRow> {
    let v = solve_hjb_n(model, n, hjb_dt)?;
    let grid = v.grid().clone();
    let d = model.d;
    let u: Vec<Result<Vec<f64>>> = (0..grid.len())
        .into_par_iter()
        .map(|r| master_values(model, t0, grid.point(r), opts))
        .collect();
    let mut gaps = vec![0.0; grid.len() * d];
    for (r, ur) in u.into_iter().enumerate() {
        let ur = ur?;
        let vr = v.values_at(t0, r)?;
        for x in 0..d {
            gaps[r * d + x] = (vr[x] - ur[x]).abs();
        }
    }
    let sup_gap = gaps.iter().copied().fold(0.0, f64::max);
    let mut total = 0.0;
    for rep in 0..reps {
        let mut rng = Seed::new(key, rep as u64).rng();
        let mut counts = vec![0u32; d];
        let states: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (x, w) in mu0.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return x;
                    }
                }
                d - 1
            })
            .collect();
        for &x in &states {
            counts[x] += 1;
        }
        let mut sum = 0.0;
        for &x in &states {
            counts[x] -= 1;
            sum += gaps[grid.rank_counts(&counts) * d + x];
            counts[x] += 1;
        }
        total += sum / n as f64;
    }
    Ok(ConvergeRow {
        n,
        grid_points: grid.len(),
        sup_gap,
        avg_gap: total / reps as f64,
        error: None,
    })
}

/// Compares Vⁿ with U for every `n`; failures are reported per row.
#[allow(clippy::too_many_arguments)]
pub fn converge_rows(
    model: &ModelSpec,
    ns: &[usize],
    hjb_dt: f64,
    opts: &FbOptions,
    t0: f64,
    mu0: &[f64],
    reps: usize,
    key: u64,
) -> Vec<ConvergeRow> {
    ns.iter()
        .map(|&n| {
            converge_one(model, n, hjb_dt, opts, t0, mu0, reps, key).unwrap_or_else(|e| ConvergeRow {
                n,
                grid_points: 0,
                sup_gap: f64::NAN,
                avg_gap: f64::NAN,
                error: Some(e.to_string()),
            })
        })
        .collect()
}

fn slope_of(ns: &[f64], ys: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = ns.iter().zip(ys).filter(|(_, y)| **y > 0.0 && y.is_finite()).map(|(a, b)| (*a, *b)).collect();
    if pairs.len() < 2 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    stats::loglog_slope(&x, &y).ok()
}

pub fn run_converge(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    let opts = cfg.fb_options(model);
    let mu0 = cfg.initial(model);
    let rows = converge_rows(model, &cfg.n, cfg.hjb_dt(model), &opts, cfg.t0, &mu0, cfg.reps, cfg.seed);
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let sup: Vec<f64> = rows.iter().map(|r| r.sup_gap).collect();
    let avg: Vec<f64> = rows.iter().map(|r| r.avg_gap).collect();
    let (s_sup, s_avg) = (slope_of(&ns, &sup), slope_of(&ns, &avg));
    let mut table = Table::new(&["n", "grid_points", "sup_gap", "avg_gap", "status"]);
    for r in &rows {
        table.push(vec![
            r.n.to_string(),
            r.grid_points.to_string(),
            num(r.sup_gap),
            num(r.avg_gap),
            r.error.clone().unwrap_or_else(|| "ok".into()).replace(',', ";"),
        ]);
    }
    let fmt_slope = |s: Option<f64>| s.map_or("n/a".to_string(), num);
    table.push(vec!["slope".into(), String::new(), fmt_slope(s_sup), fmt_slope(s_avg), String::new()]);
    Ok(Report {
        experiment: Experiment::Converge,
        table,
        summary: json!({ "rows": rows, "slope_sup_gap": s_sup, "slope_avg_gap": s_avg }),
        files: Vec::new(),
    })
}

/// Coupled-run statistics for one `n`.
#[derive(Clone, Debug, Serialize)]
pub struct CouplingRow {
    pub n: usize,
    pub reps: usize,
    pub mean_gap: f64,
    pub median_gap: f64,
    pub mean_decoupled: f64,
}

/// `reps` coupled runs: `X` follows the exact n-player equilibrium, `Y` the
/// master policy tabulated on `P^{n−1}` with `table_nodes` time nodes.
#[allow(clippy::too_many_arguments)]
pub fn coupling_row(
    model: &ModelSpec,
    n: usize,
    reps: usize,
    key: u64,
    hjb_dt: f64,
    opts: &FbOptions,
    table_nodes: usize,
    init: &Initial,
) -> Result<CouplingRow> {
    let px = PolicySpec::ExactNash(Arc::new(solve_hjb_n(model, n, hjb_dt)?));
    let py = PolicySpec::Master(Arc::new(MasterTable::build(model, n - 1, table_nodes, opts)?));
    let outcomes: Vec<Result<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rec = simulate_coupled(model, n, &px, &py, init, Seed::new(key, r as u64), RecordLevel::Summary)?;
            coupling_gap(&rec)
        })
        .collect();
    let mut gaps = Vec::with_capacity(reps);
    let mut fracs = Vec::with_capacity(reps);
    for o in outcomes {
        let (g, f) = o?;
        gaps.push(g);
        fracs.push(f);
    }
    Ok(CouplingRow {
        n,
        reps,
        mean_gap: stats::mean(&gaps),
        median_gap: stats::median(&gaps),
        mean_decoupled: stats::mean(&fracs),
    })
}

pub fn run_coupling(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    let opts = cfg.fb_options(model);
    let init = Initial::iid(&cfg.initial(model));
    let mut rows = Vec::new();
    for (i, &n) in cfg.n.iter().enumerate() {
        rows.push(coupling_row(
            model,
            n,
            cfg.reps,
            cfg.seed.wrapping_add(i as u64),
            cfg.hjb_dt(model),
            &opts,
            cfg.table_nodes,
            &init,
        )?);
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let mean: Vec<f64> = rows.iter().map(|r| r.mean_gap).collect();
    let median: Vec<f64> = rows.iter().map(|r| r.median_gap).collect();
    let (s_mean, s_median) = (slope_of(&ns, &mean), slope_of(&ns, &median));
    let mut table = Table::new(&["n", "reps", "mean_sup_gap", "median_sup_gap", "mean_decoupled_fraction"]);
    for r in &rows {
        table.push(vec![
            r.n.to_string(),
            r.reps.to_string(),
            num(r.mean_gap),
            num(r.median_gap),
            num(r.mean_decoupled),
        ]);
    }
    let fmt_slope = |s: Option<f64>| s.map_or("n/a".to_string(), num);
    table.push(vec!["slope".into(), String::new(), fmt_slope(s_mean), fmt_slope(s_median), String::new()]);
    Ok(Report {
        experiment: Experiment::Coupling,
        table,
        summary: json!({ "rows": rows, "slope_mean_gap": s_mean, "slope_median_gap": s_median }),
        files: Vec::new(),
    })
}

/// Empirical versus SDE fluctuations at time `T`.
#[derive(Clone, Debug, Serialize)]
pub struct FluctuationComparison {
    pub n: usize,
    pub reps: usize,
    pub noise: NoiseModel,
    pub empirical: FluctuationSummary,
    pub sde: FluctuationSummary,
    /// `|std_sde − std_emp| / std_emp` per component.
    pub std_rel_error: Vec<f64>,
    /// Sample means in units of their standard errors.
    pub empirical_mean_z: Vec<f64>,
    pub sde_mean_z: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip)]
    pub empirical_sample: Vec<Vec<f64>>,
    #[serde(skip)]
    pub sde_sample: Vec<Vec<f64>>,
}

/// Runs `reps` master-policy games from the deterministic allocation of
/// `mu0` and `reps` Euler paths of the SDE with `ψ0 = 0`.
#[allow(clippy::too_many_arguments)]
pub fn compare_fluctuations(
    model: &ModelSpec,
    n: usize,
    mu0: &[f64],
    reps: usize,
    key: u64,
    sde_dt: f64,
    opts: &FbOptions,
    table_nodes: usize,
    fd_step: f64,
    noise: NoiseModel,
    tolerance: f64,
) -> Result<FluctuationComparison> {
    let (times, flow) = mfg_flow(model, mu0, opts)?;
    let mu_t = flow.last().expect("flow has nodes").to_vec();
    let table = Arc::new(MasterTable::build(model, n - 1, table_nodes, opts)?);
    let empirical_sample = empirical_fluctuation(model, &PolicySpec::Master(table), n, mu0, &mu_t, reps, key)?;
    let direct = DirectMaster {
        model: model.clone(),
        opts: *opts,
    };
    let coeffs = SdeCoefficients::along_flow(model, &direct, &times, &flow, sde_dt, fd_step)?;
    let sde_sample = sde_terminal_sample(&coeffs, &vec![0.0; model.d], noise, reps, key.wrapping_add(1))?;
    let empirical = summarize(&empirical_sample)?;
    let sde = summarize(&sde_sample)?;
    let std_rel_error: Vec<f64> = empirical
        .std_dev
        .iter()
        .zip(&sde.std_dev)
        .map(|(e, s)| (s - e).abs() / e)
        .collect();
    let z = |s: &FluctuationSummary| -> Vec<f64> { s.mean.iter().zip(&s.std_error).map(|(m, se)| m / se).collect() };
    let (empirical_mean_z, sde_mean_z) = (z(&empirical), z(&sde));
    let pass = std_rel_error.iter().all(|e| *e < tolerance)
        && empirical_mean_z.iter().chain(&sde_mean_z).all(|z| z.abs() < 4.0);
    Ok(FluctuationComparison {
        n,
        reps,
        noise,
        empirical,
        sde,
        std_rel_error,
        empirical_mean_z,
        sde_mean_z,
        tolerance,
        pass,
        empirical_sample,
        sde_sample,
    })
}

pub fn run_fluctuations(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    std::fs::create_dir_all(&cfg.out)?;
    let n = *cfg.n.iter().max().expect("n list checked nonempty");
    let opts = cfg.fb_options(model);
    let mu0 = cfg.initial(model);
    let cmp = compare_fluctuations(
        model,
        n,
        &mu0,
        cfg.reps,
        cfg.seed,
        cfg.dt.unwrap_or(1e-3 * model.horizon),
        &opts,
        cfg.table_nodes,
        1e-3,
        cfg.noise.into(),
        cfg.fluct_tolerance,
    )?;
    let emp_path = cfg.out.join("fluctuations_empirical.csv");
    let sde_path = cfg.out.join("fluctuations_sde.csv");
    write_sample_csv(&emp_path, &cmp.empirical_sample)?;
    write_sample_csv(&sde_path, &cmp.sde_sample)?;
    let mut table = Table::new(&["x", "mean_emp", "std_emp", "mean_sde", "std_sde", "std_rel_error", "within_tol"]);
    for x in 0..model.d {
        table.push(vec![
            (x + 1).to_string(),
            num(cmp.empirical.mean[x]),
            num(cmp.empirical.std_dev[x]),
            num(cmp.sde.mean[x]),
            num(cmp.sde.std_dev[x]),
            num(cmp.std_rel_error[x]),
            (cmp.std_rel_error[x] < cmp.tolerance).to_string(),
        ]);
    }
    Ok(Report {
        experiment: Experiment::Fluctuations,
        table,
        summary: serde_json::to_value(&cmp)?,
        files: vec![emp_path, sde_path],
    })
}

/// One sampled master-equation residual.
#[derive(Clone, Debug, Serialize)]
pub struct ResidualSample {
    pub t: f64,
    pub x: usize,
    pub eta: Vec<f64>,
    pub residual: f64,
}

/// Residuals at `samples` random `(t, x, η)`: `t` uniform on
/// `[fd_step, T − fd_step]`, `η` uniform on the simplex, `x` uniform.
pub fn residual_samples(
    model: &ModelSpec,
    samples: usize,
    key: u64,
    fd_step: f64,
    opts: &FbOptions,
) -> Result<Vec<ResidualSample>> {
    let mut rng = Seed::new(key, 0).rng();
    let d = model.d;
    let points: Vec<(f64, usize, Vec<f64>)> = (0..samples)
        .map(|_| {
            let t = fd_step + rng.random::<f64>() * (model.horizon - 2.0 * fd_step);
            let x = rng.random_range(0..d);
            let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = e.iter().sum();
            (t, x, e.iter().map(|v| v / s).collect())
        })
        .collect();
    points
        .into_par_iter()
        .map(|(t, x, eta)| {
            let r = master_residuals(model, t, &eta, fd_step, opts)?;
            Ok(ResidualSample {
                t,
                x,
                residual: r[x],
                eta,
            })
        })
        .collect()
}

pub fn run_residual(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Report> {
    let opts = cfg.fb_options(model);
    let samples = residual_samples(model, cfg.samples, cfg.seed, cfg.fd_step, &opts)?;
    let abs: Vec<f64> = samples.iter().map(|s| s.residual.abs()).collect();
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend((1..=model.d).map(|z| format!("eta_{z}")));
    header.push("residual".into());
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for s in &samples {
        let mut row = vec![num(s.t), (s.x + 1).to_string()];
        row.extend(s.eta.iter().map(|v| num(*v)));
        row.push(num(s.residual));
        table.push(row);
    }
    let max = abs.iter().copied().fold(0.0, f64::max);
    Ok(Report {
        experiment: Experiment::Residual,
        table,
        summary: json!({ "samples": samples.len(), "max_abs_residual": max, "median_abs_residual": stats::median(&abs) }),
        files: Vec::new(),
    })
}
