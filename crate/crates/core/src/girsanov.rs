//! Doleans-Dade exponential weights along reference paths.
//!
//! Weighting the reference particles `X^` by
//! `E_T = exp(sum_k theta_k . dW_k - 1/2 |theta_k|^2 dt_k)` with
//! `theta = sigma^T (sigma sigma^T)^{-1} b` turns their empirical law into an
//! approximation of the law of the drifted diffusion.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_sde::PathEnsemble;
use crate::io::fmt_float;
use crate::measure_flow::{EmpiricalMeasure, TimeGrid};

const CHUNK: usize = 8192;
/// ESS fraction below which the weights are flagged as degenerate.
pub const DEGENERACY_FRACTION: f64 = 0.01;

/// Per-particle weights at every grid point, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEnsemble {
    grid: TimeGrid,
    n_particles: usize,
    weights: Vec<Vec<f64>>,
}

impl WeightEnsemble {
    /// Unit weights.
    pub fn uniform(grid: TimeGrid, n_particles: usize) -> Self {
        let len = grid.len();
        Self {
            grid,
            n_particles,
            weights: vec![vec![1.0; n_particles]; len],
        }
    }

    /// Explicit weights, `weights[k][p]`. Zero weights are allowed here.
    pub fn from_raw(grid: TimeGrid, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: weights.len() });
        }
        let n_particles = weights[0].len();
        if n_particles == 0 {
            return Err(Error::EmptySamples);
        }
        for row in &weights {
            if row.len() != n_particles {
                return Err(Error::LengthMismatch { expected: n_particles, got: row.len() });
            }
            if let Some((index, &weight)) = row.iter().enumerate().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
                return Err(Error::NegativeWeight { index, weight });
            }
        }
        Ok(Self { grid, n_particles, weights })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn weights_at(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn log_weights_at(&self, k: usize) -> Vec<f64> {
        self.weights[k].iter().map(|w| w.ln()).collect()
    }
}

/// Weights `E_k` with `E_0 = 1`, from the integrand `theta(k, x)` evaluated at
/// the left grid point.
pub fn doleans_exponential<F>(paths: &PathEnsemble, integrand: F) -> Result<WeightEnsemble>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    doleans_exponential_from(paths, integrand, 0)
}

/// As [`doleans_exponential`] but started at grid index `start`: weights are
/// one up to `start` and accumulate afterwards.
pub fn doleans_exponential_from<F>(paths: &PathEnsemble, integrand: F, start: usize) -> Result<WeightEnsemble>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let grid = paths.grid();
    if start >= grid.len() {
        return Err(Error::IndexOutOfRange { index: start, len: grid.len() });
    }
    let table = integrand_table(paths, integrand, start)?;
    doleans_from_table(paths, &table, start)
}

/// Evaluates `integrand(k, X_k)` for every particle at steps `start..K`.
/// Entry `k - start` is a flat `n_particles x d` block.
pub fn integrand_table<F>(paths: &PathEnsemble, integrand: F, start: usize) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = paths.n_particles();
    let (m, d) = (paths.state_dim(), paths.noise_dim());
    (start..paths.grid().n_steps())
        .map(|k| {
            let xs = paths.states_at(k);
            let mut row = vec![0.0; n * d];
            let status: Vec<Result<()>> = row
                .par_chunks_mut(CHUNK * d)
                .enumerate()
                .map(|(chunk, out)| {
                    for (i, o) in out.chunks_mut(d).enumerate() {
                        let p = chunk * CHUNK + i;
                        let theta = integrand(k, &xs[p * m..(p + 1) * m])?;
                        if theta.len() != d {
                            return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
                        }
                        o.copy_from_slice(&theta);
                    }
                    Ok(())
                })
                .collect();
            status.into_iter().collect::<Result<Vec<()>>>()?;
            Ok(row)
        })
        .collect()
}

/// Weights from a precomputed integrand table (see [`integrand_table`]).
pub fn doleans_from_table(paths: &PathEnsemble, table: &[Vec<f64>], start: usize) -> Result<WeightEnsemble> {
    let grid = paths.grid();
    if start >= grid.len() {
        return Err(Error::IndexOutOfRange { index: start, len: grid.len() });
    }
    if table.len() != grid.n_steps() - start {
        return Err(Error::LengthMismatch { expected: grid.n_steps() - start, got: table.len() });
    }
    let n = paths.n_particles();
    let d = paths.noise_dim();
    let mut weights = Vec::with_capacity(grid.len());
    for _ in 0..=start {
        weights.push(vec![1.0; n]);
    }
    let mut next = vec![0.0; n];
    // Kahan compensation terms carried across steps.
    let mut comp = vec![0.0; n];
    for k in start..grid.n_steps() {
        let dt = grid.dt(k);
        let dws = paths.increments_at(k);
        let thetas = &table[k - start];
        if thetas.len() != n * d {
            return Err(Error::LengthMismatch { expected: n * d, got: thetas.len() });
        }
        let status: Vec<Result<()>> = next
            .par_chunks_mut(CHUNK)
            .zip(comp.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(chunk, (lw, cc))| {
                for (i, (l, c)) in lw.iter_mut().zip(cc.iter_mut()).enumerate() {
                    let p = chunk * CHUNK + i;
                    let theta = &thetas[p * d..(p + 1) * d];
                    let dw = &dws[p * d..(p + 1) * d];
                    let mut inc = 0.0;
                    let mut sq = 0.0;
                    for (th, w) in theta.iter().zip(dw) {
                        inc += th * w;
                        sq += th * th;
                    }
                    inc -= 0.5 * sq * dt;
                    if !inc.is_finite() {
                        return Err(Error::NonFiniteWeight { particle: p, step: k + 1 });
                    }
                    let y = inc - *c;
                    let t = *l + y;
                    *c = (t - *l) - y;
                    *l = t;
                }
                Ok(())
            })
            .collect();
        status.into_iter().collect::<Result<Vec<()>>>()?;
        let w: Vec<f64> = next.par_iter().map(|l| l.exp()).collect();
        if let Some(p) = w.iter().position(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NonFiniteWeight { particle: p, step: k + 1 });
        }
        weights.push(w);
    }
    Ok(WeightEnsemble { grid: grid.clone(), n_particles: n, weights })
}

/// Weighted empirical law of the reference particles at grid index `k`.
pub fn weighted_law(paths: &PathEnsemble, weights: &WeightEnsemble, k: usize) -> Result<EmpiricalMeasure> {
    if paths.grid() != weights.grid() {
        return Err(Error::GridMismatch);
    }
    if paths.n_particles() != weights.n_particles() {
        return Err(Error::LengthMismatch { expected: paths.n_particles(), got: weights.n_particles() });
    }
    if k >= paths.grid().len() {
        return Err(Error::IndexOutOfRange { index: k, len: paths.grid().len() });
    }
    EmpiricalMeasure::from_flat(
        paths.state_dim(),
        paths.states_at(k).to_vec(),
        Some(weights.weights_at(k).to_vec()),
    )
}

/// Per-grid-point weight statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// `max log w - min log w`.
    pub log_spread: Vec<f64>,
    /// `(sum w)^2 / sum w^2`.
    pub ess: Vec<f64>,
    pub ess_fraction: Vec<f64>,
    /// Delta-method standard error of `ess_fraction`.
    pub ess_fraction_se: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl MartingaleReport {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// Columns `time,weight_mean,weight_se,ess`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,weight_mean,weight_se,ess")?;
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{}",
                fmt_float(self.times[k]),
                fmt_float(self.mean[k]),
                fmt_float(self.std_error[k]),
                fmt_float(self.ess[k])
            )?;
        }
        Ok(())
    }
}

pub fn martingale_diagnostic(weights: &WeightEnsemble) -> MartingaleReport {
    let n = weights.n_particles as f64;
    let mut r = MartingaleReport {
        times: weights.grid.points().to_vec(),
        mean: Vec::new(),
        std_error: Vec::new(),
        second_moment: Vec::new(),
        log_spread: Vec::new(),
        ess: Vec::new(),
        ess_fraction: Vec::new(),
        ess_fraction_se: Vec::new(),
        degenerate: Vec::new(),
    };
    for w in &weights.weights {
        let a = w.iter().sum::<f64>() / n;
        let b = w.iter().map(|v| v * v).sum::<f64>() / n;
        let var_w = w.iter().map(|v| (v - a).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let var_w2 = w.iter().map(|v| (v * v - b).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let cov = w.iter().map(|v| (v - a) * (v * v - b)).sum::<f64>() / (n - 1.0).max(1.0);
        let frac = if b > 0.0 { a * a / b } else { 0.0 };
        // Gradient of a^2 / b.
        let (ga, gb) = if b > 0.0 { (2.0 * a / b, -a * a / (b * b)) } else { (0.0, 0.0) };
        let var_frac = (ga * ga * var_w + gb * gb * var_w2 + 2.0 * ga * gb * cov) / n;
        let finite = w.iter().map(|v| v.ln()).filter(|l| l.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(l), hi.max(l)));
        r.mean.push(a);
        r.std_error.push((var_w / n).sqrt());
        r.second_moment.push(b);
        r.log_spread.push(if hi >= lo { hi - lo } else { 0.0 });
        r.ess.push(frac * n);
        r.ess_fraction.push(frac);
        r.ess_fraction_se.push(var_frac.max(0.0).sqrt());
        r.degenerate.push(frac < DEGENERACY_FRACTION);
    }
    r
}
