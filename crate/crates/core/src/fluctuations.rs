//! The limiting fluctuation SDE of `√n(μⁿ − μ)` and its Monte-Carlo
//! counterpart from the n-player game.
//!
//! ```text
//! dψᵀ = λ∘dB¹ − σ∘dB² + [ψᵀα*(t, μ) + μᵀ(ψᵀ ⊗ ∇_η α*(t, μ))] dt
//! ```

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::master::MasterValues;
use crate::model::{increments_into, ModelSpec, SimplexPoint};
use crate::simulator::{simulate, Initial, PolicySpec, RecordLevel, Seed};
use crate::stats;

/// Feedback rate matrix `α*_{xy}(t, η) = a*_y(x, η, Δ_x U(t, ·, η))`,
/// row-major with the diagonal set to minus the row sum.
pub fn alpha_star(model: &ModelSpec, master: &dyn MasterValues, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
    let d = model.d;
    let u = master.values(t, eta)?;
    let mut out = vec![0.0; d * d];
    let mut p = vec![0.0; d];
    for x in 0..d {
        increments_into(&u, x, &mut p);
        model.optimal_rates_into(x, &p, &mut out[x * d..(x + 1) * d]);
    }
    Ok(out)
}

/// Arrival and departure intensities per capita:
/// `λ_x = Σ_{y≠x} μ_y α*_{yx}`, `σ_x = μ_x Σ_{y≠x} α*_{xy}`.
pub fn lambda_sigma_from_alpha(alpha: &[f64], mu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = mu.len();
    let mut lambda = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for x in 0..d {
        for y in (0..d).filter(|&y| y != x) {
            lambda[x] += mu[y] * alpha[y * d + x];
            sigma[x] += mu[x] * alpha[x * d + y];
        }
    }
    (lambda, sigma)
}

pub fn lambda_sigma(
    model: &ModelSpec,
    master: &dyn MasterValues,
    t: f64,
    mu: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    SimplexPoint::new(mu.to_vec())?;
    let alpha = alpha_star(model, master, t, mu)?;
    Ok(lambda_sigma_from_alpha(&alpha, mu))
}

/// `∇_η α*_{xy}(t, μ)` by central differences along `e_z − e_d`; the last
/// coordinate absorbs the simplex constraint and carries a zero entry.
/// Layout `[(x * d + y) * d + z]`.
pub fn grad_eta_alpha(
    model: &ModelSpec,
    master: &dyn MasterValues,
    t: f64,
    mu: &[f64],
    fd_step: f64,
) -> Result<Vec<f64>> {
    let d = model.d;
    SimplexPoint::new(mu.to_vec())?;
    if !(fd_step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if mu.iter().any(|&w| w <= fd_step) {
        return Err(invalid(format!(
            "measure {mu:?} is too close to the boundary for step {fd_step}"
        )));
    }
    let mut grad = vec![0.0; d * d * d];
    let mut plus = mu.to_vec();
    let mut minus = mu.to_vec();
    for z in 0..d - 1 {
        plus.copy_from_slice(mu);
        minus.copy_from_slice(mu);
        plus[z] += fd_step;
        plus[d - 1] -= fd_step;
        minus[z] -= fd_step;
        minus[d - 1] += fd_step;
        let ap = alpha_star(model, master, t, &plus)?;
        let am = alpha_star(model, master, t, &minus)?;
        for xy in 0..d * d {
            grad[xy * d + z] = (ap[xy] - am[xy]) / (2.0 * fd_step);
        }
    }
    Ok(grad)
}

/// Diffusion term of the SDE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub enum NoiseModel {
    /// `λ_x dB¹_x − σ_x dB²_x` with independent d-dimensional `B¹`, `B²`.
    #[default]
    IntensityScaled,
    /// Centered jump noise of the finite game: one Brownian motion per
    /// ordered pair `(y, z)`, entering as `√(μ_y α*_{yz}) (e_z − e_y) dW_{yz}`.
    PairwiseJump,
    /// Drift only.
    Off,
}

/// SDE coefficients sampled on a uniform grid.
#[derive(Clone, Debug)]
pub struct SdeCoefficients {
    pub d: usize,
    pub times: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    /// Row-major `α*` per time.
    pub alpha: Vec<Vec<f64>>,
    /// `∇_η α*` per time, layout as in [`grad_eta_alpha`].
    pub grad: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

fn interpolate_path(times: &[f64], path: &[SimplexPoint], t: f64) -> Vec<f64> {
    let j = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
    let (t0, t1) = (times[j - 1], times[j]);
    let w = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
    path[j - 1].iter().zip(path[j].iter()).map(|(a, b)| a + w * (b - a)).collect()
}

impl SdeCoefficients {
    /// Evaluates `α*`, `∇_η α*`, `λ`, `σ` along the flow `(flow_times, flow)`
    /// at `ceil(T/dt)` uniform steps; the flow is linearly interpolated.
    pub fn along_flow(
        model: &ModelSpec,
        master: &dyn MasterValues,
        flow_times: &[f64],
        flow: &[SimplexPoint],
        dt: f64,
        fd_step: f64,
    ) -> Result<Self> {
        if flow_times.len() != flow.len() || flow.len() < 2 {
            return Err(invalid("flow needs at least two nodes with matching times"));
        }
        let (t_start, t_end) = (flow_times[0], *flow_times.last().unwrap());
        let steps = crate::hjb_n::step_count(t_end - t_start, dt)?;
        let h = (t_end - t_start) / steps as f64;
        let times: Vec<f64> = (0..=steps).map(|k| t_start + k as f64 * h).collect();
        let rows: Vec<Result<_>> = times
            .par_iter()
            .map(|&t| {
                let mu = interpolate_path(flow_times, flow, t);
                let alpha = alpha_star(model, master, t, &mu)?;
                let grad = grad_eta_alpha(model, master, t, &mu, fd_step)?;
                Ok((mu, alpha, grad))
            })
            .collect();
        let mut c = SdeCoefficients {
            d: model.d,
            times,
            mu: Vec::new(),
            alpha: Vec::new(),
            grad: Vec::new(),
            lambda: Vec::new(),
            sigma: Vec::new(),
        };
        for r in rows {
            let (mu, alpha, grad) = r?;
            let (l, s) = lambda_sigma_from_alpha(&alpha, &mu);
            c.mu.push(mu);
            c.alpha.push(alpha);
            c.grad.push(grad);
            c.lambda.push(l);
            c.sigma.push(s);
        }
        Ok(c)
    }

    /// Frozen coefficients: zero drift, constant `λ` and `σ`.
    pub fn constant_noise(lambda: &[f64], sigma: &[f64], horizon: f64, steps: usize) -> Self {
        let d = lambda.len();
        let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        let k = times.len();
        SdeCoefficients {
            d,
            mu: vec![vec![1.0 / d as f64; d]; k],
            alpha: vec![vec![0.0; d * d]; k],
            grad: vec![vec![0.0; d * d * d]; k],
            lambda: vec![lambda.to_vec(); k],
            sigma: vec![sigma.to_vec(); k],
            times,
        }
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    fn drift(&self, k: usize, psi: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (alpha, grad, mu) = (&self.alpha[k], &self.grad[k], &self.mu[k]);
        for y in 0..d {
            let mut acc = 0.0;
            for x in 0..d {
                acc += psi[x] * alpha[x * d + y];
                let g = &grad[(x * d + y) * d..(x * d + y + 1) * d];
                acc += mu[x] * psi.iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
            }
            out[y] = acc;
        }
    }
}

/// One Euler–Maruyama path. For [`NoiseModel::IntensityScaled`] `db1`, `db2` hold
/// the `d` increments per step of `B¹`, `B²`; for the pairwise model `db1`
/// holds `d²` increments per step (index `y * d + z`) and `db2` is empty.
#[derive(Clone, Debug)]
pub struct FluctuationPath {
    pub d: usize,
    pub times: Vec<f64>,
    /// `[k * d + x]`
    pub psi: Vec<f64>,
    pub db1: Vec<f64>,
    pub db2: Vec<f64>,
}

impl FluctuationPath {
    pub fn psi_at(&self, k: usize) -> &[f64] {
        &self.psi[k * self.d..(k + 1) * self.d]
    }

    pub fn terminal(&self) -> &[f64] {
        self.psi_at(self.times.len() - 1)
    }
}

fn normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn integrate_sde(
    coeffs: &SdeCoefficients,
    psi0: &[f64],
    noise: NoiseModel,
    seed: impl Into<Seed>,
) -> Result<FluctuationPath> {
    let d = coeffs.d;
    if psi0.len() != d {
        return Err(invalid(format!("ψ0 has length {}, expected {d}", psi0.len())));
    }
    let mut rng = seed.into().rng();
    let steps = coeffs.steps();
    let mut path = FluctuationPath {
        d,
        times: coeffs.times.clone(),
        psi: Vec::with_capacity((steps + 1) * d),
        db1: Vec::new(),
        db2: Vec::new(),
    };
    path.psi.extend_from_slice(psi0);
    let mut psi = psi0.to_vec();
    let mut drift = vec![0.0; d];
    for k in 0..steps {
        let h = coeffs.times[k + 1] - coeffs.times[k];
        let sq = h.sqrt();
        coeffs.drift(k, &psi, &mut drift);
        for x in 0..d {
            psi[x] += drift[x] * h;
        }
        match noise {
            NoiseModel::IntensityScaled => {
                for x in 0..d {
                    let b1: f64 = sq * normal(&mut rng);
                    let b2: f64 = sq * normal(&mut rng);
                    psi[x] += coeffs.lambda[k][x] * b1 - coeffs.sigma[k][x] * b2;
                    path.db1.push(b1);
                    path.db2.push(b2);
                }
            }
            NoiseModel::PairwiseJump => {
                let (mu, alpha) = (&coeffs.mu[k], &coeffs.alpha[k]);
                for y in 0..d {
                    for z in 0..d {
                        if y == z {
                            path.db1.push(0.0);
                            continue;
                        }
                        let w: f64 = sq * normal(&mut rng);
                        let amp = (mu[y] * alpha[y * d + z]).max(0.0).sqrt();
                        psi[z] += amp * w;
                        psi[y] -= amp * w;
                        path.db1.push(w);
                    }
                }
            }
            NoiseModel::Off => {}
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Internal(format!(
                "fluctuation path left the reals at t={}",
                coeffs.times[k + 1]
            )));
        }
        path.psi.extend_from_slice(&psi);
    }
    Ok(path)
}

/// Terminal values `ψ(T)` of `reps` independent paths; path `r` uses stream
/// `r` of `key`.
pub fn sde_terminal_sample(
    coeffs: &SdeCoefficients,
    psi0: &[f64],
    noise: NoiseModel,
    reps: usize,
    key: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..reps)
        .into_par_iter()
        .map(|r| integrate_sde(coeffs, psi0, noise, Seed::new(key, r as u64)).map(|p| p.terminal().to_vec()))
        .collect()
}

/// `√n(μⁿ(T) − μ(T))` over `reps` runs of the n-player game from the
/// deterministic allocation of `mu0`.
pub fn empirical_fluctuation(
    model: &ModelSpec,
    policy: &PolicySpec,
    n: usize,
    mu0: &[f64],
    mu_terminal: &[f64],
    reps: usize,
    key: u64,
) -> Result<Vec<Vec<f64>>> {
    let init = Initial::deterministic(mu0);
    let scale = (n as f64).sqrt();
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let rec = simulate(model, n, policy, &init, Seed::new(key, r as u64), RecordLevel::Summary)?;
            let counts = rec.mu_path.counts(rec.mu_path.len() - 1);
            // Integer differences keep each sample's components summing to zero.
            let target: Vec<f64> = mu_terminal.iter().map(|m| m * n as f64).collect();
            let shift = (target.iter().sum::<f64>() - n as f64) / target.len() as f64;
            Ok(counts
                .iter()
                .zip(&target)
                .map(|(&k, t)| (k as f64 - (t - shift)) / scale)
                .collect())
        })
        .collect()
}

/// Moments of a sample of fluctuation vectors.
#[derive(Clone, Debug, Serialize)]
pub struct FluctuationSummary {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
    pub std_error: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// 50th, 90th and 99th percentiles of the Euclidean norm.
    pub norm_percentiles: [f64; 3],
}

pub fn summarize(sample: &[Vec<f64>]) -> Result<FluctuationSummary> {
    if sample.len() < 2 {
        return Err(invalid("a summary needs at least two samples"));
    }
    let d = sample[0].len();
    let column = |x: usize| -> Vec<f64> { sample.iter().map(|s| s[x]).collect() };
    let norms: Vec<f64> = sample.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(FluctuationSummary {
        samples: sample.len(),
        mean: (0..d).map(|x| stats::mean(&column(x))).collect(),
        std_dev: (0..d).map(|x| stats::std_dev(&column(x))).collect(),
        std_error: (0..d).map(|x| stats::std_error(&column(x))).collect(),
        covariance: stats::covariance(sample),
        norm_percentiles: [
            stats::percentile(&norms, 50.0),
            stats::percentile(&norms, 90.0),
            stats::percentile(&norms, 99.0),
        ],
    })
}

/// One row per replication: `rep,psi_1,...,psi_d`.
pub fn write_sample_csv(path: impl AsRef<Path>, sample: &[Vec<f64>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = sample.first().map_or(0, |s| s.len());
    let header: Vec<String> = (1..=d).map(|x| format!("psi_{x}")).collect();
    writeln!(w, "rep,{}", header.join(","))?;
    for (r, s) in sample.iter().enumerate() {
        let row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{r},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
