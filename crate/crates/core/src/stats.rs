//! Small statistics toolbox used by the simulator checks and experiments.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// Linear-interpolation percentile, `q ∈ [0, 100]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 50.0)
}

/// Unbiased covariance matrix of row samples.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let d = first.len();
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - means[i]) * (r[j] - means[j]);
            }
        }
    }
    for row in &mut cov {
        for c in row.iter_mut() {
            *c /= n - 1.0;
        }
    }
    cov
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("a log-log fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("log-log fit needs positive finite data"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // Jacobi-transformed series converges fast for small x.
        let w = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
        let s: f64 = (0..20)
            .map(|k| (-(2.0 * k as f64 + 1.0).powi(2) * w).exp())
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

impl TestOutcome {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value > significance
    }
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF, with
/// Stephens' finite-sample correction.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<TestOutcome> {
    if sample.is_empty() {
        return Err(invalid("empty sample"));
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut dmax: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        dmax = dmax.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    Ok(TestOutcome {
        statistic: dmax,
        p_value: kolmogorov_sf((sq + 0.12 + 0.11 / sq) * dmax),
    })
}

/// Chi-square test that two samples of nonnegative integers share a law.
/// Values are binned by count; sparse tail bins are pooled until every bin
/// has an expected frequency of at least five in both samples.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<TestOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("both samples must be nonempty"));
    }
    let top = *a.iter().chain(b).max().unwrap() as usize;
    let mut ha = vec![0.0; top + 1];
    let mut hb = vec![0.0; top + 1];
    for &v in a {
        ha[v as usize] += 1.0;
    }
    for &v in b {
        hb[v as usize] += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let share = |oa: f64, ob: f64| {
        let tot = oa + ob;
        (tot * na / (na + nb)).min(tot * nb / (na + nb))
    };
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut oa, mut ob) = (0.0, 0.0);
    for k in 0..=top {
        oa += ha[k];
        ob += hb[k];
        if share(oa, ob) >= 5.0 {
            bins.push((oa, ob));
            oa = 0.0;
            ob = 0.0;
        }
    }
    if oa + ob > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += oa;
                last.1 += ob;
            }
            None => bins.push((oa, ob)),
        }
    }
    if bins.len() < 2 {
        return Ok(TestOutcome {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let mut stat = 0.0;
    for &(oa, ob) in &bins {
        let tot = oa + ob;
        let ea = tot * na / (na + nb);
        let eb = tot * nb / (na + nb);
        stat += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    let dist = ChiSquared::new((bins.len() - 1) as f64).map_err(|e| invalid(e.to_string()))?;
    Ok(TestOutcome {
        statistic: stat,
        p_value: 1.0 - dist.cdf(stat),
    })
}
