//! Time discretization and Brownian path ensembles with a deterministic
//! seeding contract: path `i` draws from a child stream derived from
//! `(seed, i)`, so regeneration is bit-exact and independent of the parallel
//! schedule.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Uniform grid on [t0, T] with K steps (K+1 points).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Validation(
                "time grid needs at least one step".into(),
            ));
        }
        if t_end <= t0 {
            return Err(Error::Validation(format!(
                "need t0 < T, got t0={t0}, T={t_end}"
            )));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt() * k as f64
    }
}

/// Default ensemble budget: paths * (steps + 1) samples.
pub const DEFAULT_SAMPLE_BUDGET: usize = 1 << 26;

/// SplitMix64 step, used to derive child seeds from (seed, path index).
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(index))
}

/// M Brownian paths sampled on a uniform grid, stored path-major:
/// `w[i * (K+1) + k]` is path `i` at grid point `k`, with `w[i * (K+1)] = 0`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    w: Vec<f64>,
}

impl PathEnsemble {
    pub fn generate(grid: TimeGrid, paths: usize, seed: u64) -> Result<Self> {
        Self::generate_with_budget(grid, paths, seed, DEFAULT_SAMPLE_BUDGET)
    }

    pub fn generate_with_budget(
        grid: TimeGrid,
        paths: usize,
        seed: u64,
        budget: usize,
    ) -> Result<Self> {
        if paths == 0 {
            return Err(Error::Validation("need at least one path".into()));
        }
        let points = grid.steps() + 1;
        let requested = paths.checked_mul(points).ok_or(Error::Capacity {
            requested: usize::MAX,
            budget,
        })?;
        if requested > budget {
            return Err(Error::Capacity { requested, budget });
        }
        let mut w = vec![0.0; requested];
        let sqrt_dt = grid.dt().sqrt();
        w.par_chunks_mut(points).enumerate().for_each(|(i, path)| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64));
            let mut acc = 0.0;
            path[0] = 0.0;
            for k in 1..points {
                let z: f64 = rng.sample(StandardNormal);
                acc += sqrt_dt * z;
                path[k] = acc;
            }
        });
        Ok(PathEnsemble {
            grid,
            paths,
            seed,
            w,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Brownian value of path `i` at grid point `k`.
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.w[i * (self.grid.steps() + 1) + k]
    }

    /// Increment W(t_{k+1}) - W(t_k) for path `i`.
    pub fn increment(&self, i: usize, k: usize) -> f64 {
        let base = i * (self.grid.steps() + 1);
        self.w[base + k + 1] - self.w[base + k]
    }

    /// Column of Brownian values at grid point `k`, one entry per path.
    pub fn step_values(&self, k: usize) -> Vec<f64> {
        let points = self.grid.steps() + 1;
        (0..self.paths).map(|i| self.w[i * points + k]).collect()
    }

    /// Column of increments over step `k`, one entry per path.
    pub fn step_increments(&self, k: usize) -> Vec<f64> {
        let points = self.grid.steps() + 1;
        (0..self.paths)
            .map(|i| self.w[i * points + k + 1] - self.w[i * points + k])
            .collect()
    }

    /// CSV dump with header `path,k,t,W`, rows ordered by path then step.
    pub fn dump_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "path,k,t,W")?;
        for i in 0..self.paths {
            for k in 0..=self.grid.steps() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    i,
                    k,
                    self.grid.time(k),
                    self.value(i, k)
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_start_at_zero() {
        let grid = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let e = PathEnsemble::generate(grid, 3, 42).unwrap();
        for i in 0..3 {
            assert_eq!(e.value(i, 0), 0.0);
        }
    }

    #[test]
    fn terminal_variance_matches_horizon() {
        // Var W(1) = 1; Monte Carlo error ~ 1/sqrt(M).
        let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let m = 100_000;
        let e = PathEnsemble::generate(grid, m, 7).unwrap();
        let vals = e.step_values(32);
        let mean: f64 = vals.iter().sum::<f64>() / m as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        assert!((var - 1.0).abs() < 0.02, "sample variance {var}");
    }

    #[test]
    fn same_seed_reproduces_bit_exactly() {
        let grid = TimeGrid::new(0.0, 2.0, 17).unwrap();
        let a = PathEnsemble::generate(grid, 64, 7).unwrap();
        let b = PathEnsemble::generate(grid, 64, 7).unwrap();
        assert_eq!(a.w, b.w);
        let c = PathEnsemble::generate(grid, 64, 8).unwrap();
        assert_ne!(a.w, c.w);
    }

    #[test]
    fn generation_is_schedule_independent() {
        // Same ensemble from a single-threaded pool and the default pool.
        let grid = TimeGrid::new(0.0, 1.0, 9).unwrap();
        let parallel = PathEnsemble::generate(grid, 500, 3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| PathEnsemble::generate(grid, 500, 3).unwrap());
        assert_eq!(parallel.w, serial.w);
    }

    #[test]
    fn martingale_increments_average_out() {
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let m = 40_000;
        let e = PathEnsemble::generate(grid, m, 11).unwrap();
        let dt = grid.dt();
        for k in [0, 3, 7] {
            let mean: f64 = e.step_increments(k).iter().sum::<f64>() / m as f64;
            assert!(
                mean.abs() < 4.0 * (dt / m as f64).sqrt(),
                "step {k}: mean {mean}"
            );
        }
    }

    #[test]
    fn budget_overflow_is_capacity_error() {
        let grid = TimeGrid::new(0.0, 1.0, 99).unwrap();
        let err = PathEnsemble::generate_with_budget(grid, 1000, 1, 10_000).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }
}
