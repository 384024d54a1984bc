//! Discrete simplices `P^m([d]) = {η ∈ P([d]) : m·η integral}`.
//!
//! Points are stored by their integer count vectors `k = m·η`, enumerated in
//! ascending lexicographic order of `k`. For `d = 2, m = 3` this gives
//! `(0,3), (1,2), (2,1), (3,0)`, so rank 0 is the vertex `e_2`.

use crate::error::{invalid, Error, Result};
use crate::model::SimplexPoint;

/// Default cap on the number of grid points.
pub const DEFAULT_POINT_CAP: u128 = 10_000_000;

/// `C(n, k)` without overflow for the sizes used here; `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Number of points of `P^m([d])`, `C(m + d - 1, d - 1)`.
pub fn grid_cardinality(d: usize, m: usize) -> Option<u128> {
    binomial((m + d - 1) as u64, (d - 1) as u64)
}

#[derive(Clone, Debug)]
pub struct SimplexGrid {
    d: usize,
    m: usize,
    counts: Vec<u32>,
    weights: Vec<f64>,
    // choose[r * (d + 1) + p] = C(r + p, p)
    choose: Vec<usize>,
}

impl SimplexGrid {
    pub fn enumerate(d: usize, m: usize) -> Result<Self> {
        Self::enumerate_with_cap(d, m, DEFAULT_POINT_CAP)
    }

    pub fn enumerate_with_cap(d: usize, m: usize, cap: u128) -> Result<Self> {
        if d < 2 {
            return Err(invalid(format!("simplex grid needs d >= 2, got {d}")));
        }
        if m < 1 {
            return Err(invalid("simplex grid needs resolution m >= 1"));
        }
        let size = grid_cardinality(d, m).unwrap_or(u128::MAX);
        if size > cap {
            return Err(Error::Capacity {
                what: "simplex grid",
                required: size,
                cap,
            });
        }
        let size = size as usize;
        let mut counts = Vec::with_capacity(size * d);
        let mut current = vec![0u32; d];
        fill(&mut current, 0, m as u32, &mut counts);
        debug_assert_eq!(counts.len(), size * d);
        let weights = counts.iter().map(|&k| k as f64 / m as f64).collect();

        let mut choose = vec![0usize; (m + 1) * (d + 1)];
        for r in 0..=m {
            for p in 0..=d {
                choose[r * (d + 1) + p] = binomial((r + p) as u64, p as u64).unwrap() as usize;
            }
        }
        Ok(SimplexGrid {
            d,
            m,
            counts,
            weights,
            choose,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Resolution: every coordinate is a multiple of `1/m`.
    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.counts.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self, rank: usize) -> &[u32] {
        &self.counts[rank * self.d..(rank + 1) * self.d]
    }

    pub fn point(&self, rank: usize) -> &[f64] {
        &self.weights[rank * self.d..(rank + 1) * self.d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks_exact(self.d)
    }

    #[inline]
    fn choose(&self, r: usize, p: usize) -> usize {
        self.choose[r * (self.d + 1) + p]
    }

    /// Rank of an integer count vector summing to `m`.
    pub fn rank_counts(&self, k: &[u32]) -> usize {
        let mut rank = 0;
        let mut remaining = self.m;
        for (i, &ki) in k.iter().enumerate().take(self.d - 1) {
            let p = self.d - i - 1;
            let ki = ki as usize;
            rank += self.choose(remaining, p) - self.choose(remaining - ki, p);
            remaining -= ki;
        }
        rank
    }

    /// Rank of a grid point; errors if `m·η` is not integral within 1e-9.
    pub fn rank(&self, eta: &[f64]) -> Result<usize> {
        let k = self.to_counts(eta)?;
        Ok(self.rank_counts(&k))
    }

    pub fn to_counts(&self, eta: &[f64]) -> Result<Vec<u32>> {
        if eta.len() != self.d {
            return Err(invalid(format!(
                "measure has {} entries, grid has d={}",
                eta.len(),
                self.d
            )));
        }
        let mut k = Vec::with_capacity(self.d);
        let mut total = 0u64;
        for &w in eta {
            let scaled = w * self.m as f64;
            let rounded = scaled.round();
            if (scaled - rounded).abs() > 1e-9 || rounded < 0.0 {
                return Err(invalid(format!(
                    "measure {eta:?} is not on the grid of resolution {}",
                    self.m
                )));
            }
            total += rounded as u64;
            k.push(rounded as u32);
        }
        if total != self.m as u64 {
            return Err(invalid(format!("measure {eta:?} does not sum to one")));
        }
        Ok(k)
    }

    pub fn unrank(&self, index: usize) -> Result<SimplexPoint> {
        if index >= self.len() {
            return Err(invalid(format!(
                "rank {index} out of range for a grid of {} points",
                self.len()
            )));
        }
        SimplexPoint::new(self.point(index).to_vec())
    }

    /// Rank of `η + e_{yz}/m`, or `None` when no mass sits at `y`.
    pub fn shift_rank(&self, rank: usize, y: usize, z: usize) -> Option<usize> {
        let k = self.counts(rank);
        if k[y] == 0 {
            return None;
        }
        if y == z {
            return Some(rank);
        }
        let mut shifted = k.to_vec();
        shifted[y] -= 1;
        shifted[z] += 1;
        Some(self.rank_counts(&shifted))
    }

    /// Table `t[(rank * d + y) * d + z]` of [`SimplexGrid::shift_rank`],
    /// `usize::MAX` for infeasible shifts.
    pub fn shift_table(&self) -> Vec<usize> {
        let d = self.d;
        let mut table = vec![usize::MAX; self.len() * d * d];
        for r in 0..self.len() {
            for y in 0..d {
                for z in 0..d {
                    if let Some(s) = self.shift_rank(r, y, z) {
                        table[(r * d + y) * d + z] = s;
                    }
                }
            }
        }
        table
    }
}

fn fill(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<u32>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.extend_from_slice(current);
        return;
    }
    for k in 0..=remaining {
        current[pos] = k;
        fill(current, pos + 1, remaining - k, out);
    }
}

/// `η + (e_z - e_y)/m`; requires `η_y >= 1/m`.
pub fn shift(eta: &[f64], y: usize, z: usize, m: usize) -> Result<SimplexPoint> {
    if y >= eta.len() || z >= eta.len() {
        return Err(invalid("shift states out of range"));
    }
    let step = 1.0 / m as f64;
    if eta[y] < step - 1e-12 {
        return Err(Error::InfeasibleShift { from: y, to: z });
    }
    let mut out = eta.to_vec();
    if y != z {
        out[y] = (out[y] - step).max(0.0);
        out[z] += step;
    }
    SimplexPoint::new(out)
}

/// `D^{n,y,z}φ(η) = (n-1)(φ(η + e_{yz}/(n-1)) - φ(η))` for a grid function
/// `values` on `P^{n-1}([d])` (indexed by rank).
pub fn d_operator(
    grid: &SimplexGrid,
    values: &[f64],
    n: usize,
    y: usize,
    z: usize,
    rank: usize,
) -> Result<f64> {
    if n < 2 || grid.resolution() != n - 1 {
        return Err(invalid(format!(
            "operator with n={n} needs the grid of resolution n-1, got {}",
            grid.resolution()
        )));
    }
    if values.len() != grid.len() {
        return Err(invalid("grid function length does not match the grid"));
    }
    let shifted = grid
        .shift_rank(rank, y, z)
        .ok_or(Error::InfeasibleShift { from: y, to: z })?;
    Ok((n - 1) as f64 * (values[shifted] - values[rank]))
}
