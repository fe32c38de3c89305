//! Empirical measures, Wasserstein-1 distances and measure flows.
//!
//! A law on `R^m` is held as a finite weighted sample cloud. On the real line
//! the 1-Wasserstein distance is computed exactly as the area between the two
//! cumulative distribution functions, which equals the integrated quantile
//! difference. In higher dimension the sliced surrogate averages the exact
//! 1-D distance over seeded random directions.
//!
//! The product distance over `H` populations is the sum of the per-population
//! distances, and the distance between two flows on a common grid is the
//! maximum of the product distance over grid points.

use std::io::Write;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_float;
use crate::rng::{derive_seed, standard_normal, uniform_rng};

/// Projections used by [`wasserstein1`] when the dimension exceeds one.
pub const DEFAULT_PROJECTIONS: usize = 64;
const DEFAULT_SLICE_SEED: u64 = 0x5eed_511c_e5;

/// Strictly increasing time points starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid("first point must be 0".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `steps` equal steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("horizon {horizon} must be positive")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        let mut points: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        points[steps] = horizon;
        Self::new(points)
    }

    /// Uniform grid whose step is `dt` rounded to divide the horizon.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt {dt} must be positive")));
        }
        let steps = (horizon / dt).round().max(1.0) as usize;
        Self::uniform(horizon, steps)
    }

    /// Grid with every step halved.
    pub fn refined(&self) -> Self {
        let mut points = Vec::with_capacity(2 * self.points.len() - 1);
        for w in self.points.windows(2) {
            points.push(w[0]);
            points.push(0.5 * (w[0] + w[1]));
        }
        points.push(self.horizon());
        Self { points }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.points[k]
    }

    /// Length of step `k`, i.e. `t_{k+1} - t_k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().expect("grid has at least two points")
    }
}

/// Weighted sample cloud in `R^m`.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    samples: Vec<f64>,
    weights: Vec<f64>,
    mean: Vec<f64>,
    /// All weights equal.
    uniform: bool,
    sorted: OnceLock<SortedAtoms>,
}

impl PartialEq for EmpiricalMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.samples == other.samples && self.weights == other.weights
    }
}

/// Builds a normalized empirical measure from points and optional weights.
pub fn empirical_from_samples(
    samples: &[Vec<f64>],
    weights: Option<&[f64]>,
) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::new(samples, weights)
}

impl EmpiricalMeasure {
    pub fn new(samples: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySamples)?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("zero-dimensional samples".into()));
        }
        let mut flat = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            if s.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.len() });
            }
            flat.extend_from_slice(s);
        }
        Self::from_flat(dim, flat, weights.map(|w| w.to_vec()))
    }

    /// Samples stored row-major: sample `i` is `samples[i*dim..(i+1)*dim]`.
    pub fn from_flat(dim: usize, samples: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("zero-dimensional samples".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        if !samples.len().is_multiple_of(dim) {
            return Err(Error::LengthMismatch {
                expected: (samples.len() / dim + 1) * dim,
                got: samples.len(),
            });
        }
        let n = samples.len() / dim;
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index: i / dim });
        }
        let weights = match weights {
            None => vec![1.0 / n as f64; n],
            Some(w) => {
                if w.len() != n {
                    return Err(Error::LengthMismatch { expected: n, got: w.len() });
                }
                if let Some((index, &weight)) = w
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| !(v >= 0.0) || !v.is_finite())
                {
                    return Err(Error::NegativeWeight { index, weight });
                }
                let total: f64 = w.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::ZeroMass);
                }
                w.into_iter().map(|v| v / total).collect()
            }
        };
        let mut mean = vec![0.0; dim];
        for (x, w) in samples.chunks_exact(dim).zip(&weights) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += w * v;
            }
        }
        let uniform = weights.iter().all(|&w| w == weights[0]);
        Ok(Self { dim, samples, weights, mean, uniform, sorted: OnceLock::new() })
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::from_flat(point.len(), point.to_vec(), None)
    }

    /// Uniform one-dimensional measure on `values`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Self::from_flat(1, values.to_vec(), None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean, computed once at construction.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Weighted standard deviation per coordinate.
    pub fn std(&self) -> Vec<f64> {
        let mut var = vec![0.0; self.dim];
        for (x, w) in self.samples.chunks_exact(self.dim).zip(&self.weights) {
            for c in 0..self.dim {
                var[c] += w * (x[c] - self.mean[c]).powi(2);
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    /// Left-continuous weighted quantile of coordinate `coord`.
    pub fn quantile(&self, coord: usize, q: f64) -> f64 {
        let atoms = if self.dim == 1 {
            None
        } else {
            Some(self.sort_coordinate(coord))
        };
        let atoms = atoms.as_ref().unwrap_or_else(|| self.sorted_atoms());
        let mut acc = 0.0;
        for (i, &x) in atoms.values.iter().enumerate() {
            acc += atoms.weight(i);
            if acc >= q - 1e-15 {
                return x;
            }
        }
        atoms.values.last().copied().unwrap_or(f64::NAN)
    }

    /// One-dimensional image under `x -> <x, direction>`.
    pub fn project(&self, direction: &[f64]) -> Result<Self> {
        if direction.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: direction.len() });
        }
        let values: Vec<f64> = self
            .samples
            .chunks_exact(self.dim)
            .map(|x| x.iter().zip(direction).map(|(a, b)| a * b).sum())
            .collect();
        Self::from_flat(1, values, Some(self.weights.clone()))
    }

    /// Copy translated by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: shift.len() });
        }
        let samples = self
            .samples
            .chunks_exact(self.dim)
            .flat_map(|x| x.iter().zip(shift).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        Self::from_flat(self.dim, samples, Some(self.weights.clone()))
    }

    /// Atoms sorted by value (one-dimensional measures only).
    fn sorted_atoms(&self) -> &SortedAtoms {
        debug_assert_eq!(self.dim, 1);
        self.sorted.get_or_init(|| self.sort_coordinate(0))
    }

    fn sort_coordinate(&self, coord: usize) -> SortedAtoms {
        let values = self.samples.iter().skip(coord).step_by(self.dim).copied();
        if self.uniform {
            let mut values: Vec<f64> = values.collect();
            values.sort_unstable_by(f64::total_cmp);
            return SortedAtoms { values, weights: AtomWeights::Equal(self.weights[0]) };
        }
        let mut atoms: Vec<(f64, f64)> = values.zip(self.weights.iter().copied()).collect();
        atoms.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (values, weights) = atoms.into_iter().unzip();
        SortedAtoms { values, weights: AtomWeights::Each(weights) }
    }
}

/// Atoms of a one-dimensional measure in increasing order. Equal weights are
/// kept as a single value.
#[derive(Debug, Clone)]
struct SortedAtoms {
    values: Vec<f64>,
    weights: AtomWeights,
}

#[derive(Debug, Clone)]
enum AtomWeights {
    Equal(f64),
    Each(Vec<f64>),
}

impl SortedAtoms {
    fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            AtomWeights::Equal(w) => *w,
            AtomWeights::Each(w) => w[i],
        }
    }

    fn len(&self) -> usize {
        self.values.len()
    }
}

/// `int_0^1 |Q_a(u) - Q_b(u)| du` for sorted atom lists, merging the
/// cumulative-weight breakpoints of the two quantile functions.
fn quantile_area(a: &SortedAtoms, b: &SortedAtoms) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut ca, mut cb) = (a.weight(0), b.weight(0));
    let mut u = 0.0;
    let mut total = 0.0;
    loop {
        let next = ca.min(cb);
        total += (a.values[i] - b.values[j]).abs() * (next - u);
        u = next;
        if ca <= next {
            i += 1;
            if i == a.len() {
                break;
            }
            ca += a.weight(i);
        }
        if cb <= next {
            j += 1;
            if j == b.len() {
                break;
            }
            cb += b.weight(j);
        }
    }
    total
}

/// Exact 1-Wasserstein distance between one-dimensional measures.
pub fn wasserstein1_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    for m in [mu, nu] {
        if m.dim != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: m.dim });
        }
    }
    let (a, b) = (mu.sorted_atoms(), nu.sorted_atoms());
    if mu.uniform && nu.uniform && a.len() == b.len() {
        // Equal-mass atoms: the optimal plan matches order statistics.
        let total: f64 = a.values.iter().zip(&b.values).map(|(p, q)| (p - q).abs()).sum();
        return Ok(total / a.len() as f64);
    }
    Ok(quantile_area(a, b))
}

fn projection_direction(seed: u64, j: usize, dim: usize) -> Vec<f64> {
    let mut rng = uniform_rng(derive_seed(seed, &[j as u64]));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Sliced 1-Wasserstein distance averaged over `n_projections` random unit
/// directions drawn from `seed`.
pub fn wasserstein1_sliced(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, got: nu.dim });
    }
    if n_projections == 0 {
        return Err(Error::InvalidArgument("n_projections must be at least 1".into()));
    }
    let per_projection: Vec<f64> = (0..n_projections)
        .into_par_iter()
        .map(|j| {
            let dir = projection_direction(seed, j, mu.dim);
            let a = mu.project(&dir)?;
            let b = nu.project(&dir)?;
            wasserstein1_1d(&a, &b)
        })
        .collect::<Result<_>>()?;
    Ok(per_projection.iter().sum::<f64>() / n_projections as f64)
}

/// Exact distance in one dimension, sliced surrogate otherwise.
pub fn wasserstein1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, got: nu.dim });
    }
    if mu.dim == 1 {
        wasserstein1_1d(mu, nu)
    } else {
        wasserstein1_sliced(mu, nu, DEFAULT_PROJECTIONS, DEFAULT_SLICE_SEED)
    }
}

/// Sum of per-population distances.
pub fn product_distance(m1: &[EmpiricalMeasure], m2: &[EmpiricalMeasure]) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::PopulationCountMismatch { left: m1.len(), right: m2.len() });
    }
    m1.iter().zip(m2).map(|(a, b)| wasserstein1(a, b)).sum()
}

/// Time-indexed vector of per-population measures.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    grid: TimeGrid,
    populations: usize,
    /// `measures[k][i]`: population `i` at grid point `k`.
    measures: Vec<Vec<EmpiricalMeasure>>,
}

impl MeasureFlow {
    pub fn new(grid: TimeGrid, measures: Vec<Vec<EmpiricalMeasure>>) -> Result<Self> {
        if measures.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: measures.len() });
        }
        let populations = measures[0].len();
        if populations == 0 {
            return Err(Error::InvalidArgument("flow needs at least one population".into()));
        }
        let dim = measures[0][0].dim();
        for row in &measures {
            if row.len() != populations {
                return Err(Error::PopulationCountMismatch { left: populations, right: row.len() });
            }
            if let Some(m) = row.iter().find(|m| m.dim() != dim) {
                return Err(Error::DimensionMismatch { expected: dim, got: m.dim() });
            }
        }
        Ok(Self { grid, populations, measures })
    }

    /// The same per-population measures at every grid point.
    pub fn constant(grid: TimeGrid, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        let rows = vec![measures; grid.len()];
        Self::new(grid, rows)
    }

    /// Flow of Dirac masses; `path(t)` returns one point per population.
    pub fn dirac_path(grid: TimeGrid, path: impl Fn(f64) -> Vec<Vec<f64>>) -> Result<Self> {
        let rows = grid
            .points()
            .iter()
            .map(|&t| path(t).iter().map(|p| EmpiricalMeasure::dirac(p)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Self::new(grid, rows)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn populations(&self) -> usize {
        self.populations
    }

    pub fn dim(&self) -> usize {
        self.measures[0][0].dim()
    }

    /// Per-population measures at grid point `k`.
    pub fn at(&self, k: usize) -> &[EmpiricalMeasure] {
        &self.measures[k]
    }

    pub fn measure(&self, k: usize, population: usize) -> &EmpiricalMeasure {
        &self.measures[k][population]
    }

    pub fn rows(&self) -> &[Vec<EmpiricalMeasure>] {
        &self.measures
    }

    pub fn into_rows(self) -> Vec<Vec<EmpiricalMeasure>> {
        self.measures
    }

    /// Mean path of one coordinate of one population.
    pub fn mean_path(&self, population: usize, coord: usize) -> Vec<f64> {
        self.measures.iter().map(|row| row[population].mean()[coord]).collect()
    }

    pub fn summary(&self) -> FlowSummary {
        FlowSummary {
            times: self.grid.points().to_vec(),
            means: self
                .measures
                .iter()
                .map(|row| row.iter().map(|m| m.mean().to_vec()).collect())
                .collect(),
        }
    }

    /// Writes per-(time, population) summary statistics as CSV, time-major.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        const QUANTILES: [(f64, &str); 5] =
            [(0.05, "q05"), (0.25, "q25"), (0.5, "q50"), (0.75, "q75"), (0.95, "q95")];
        let dim = self.dim();
        let mut header = vec!["time".to_string(), "population".to_string()];
        for prefix in ["mean", "std"] {
            header.extend((0..dim).map(|c| format!("{prefix}_{c}")));
        }
        for (_, name) in QUANTILES {
            header.extend((0..dim).map(|c| format!("{name}_{c}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for (k, row) in self.measures.iter().enumerate() {
            for (i, m) in row.iter().enumerate() {
                let mut fields = vec![fmt_float(self.grid.time(k)), i.to_string()];
                fields.extend(m.mean().iter().map(|&v| fmt_float(v)));
                fields.extend(m.std().into_iter().map(fmt_float));
                for (q, _) in QUANTILES {
                    fields.extend((0..dim).map(|c| fmt_float(m.quantile(c, q))));
                }
                writeln!(out, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }
}

/// Lightweight record of a flow: per grid point, per population mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub times: Vec<f64>,
    pub means: Vec<Vec<Vec<f64>>>,
}

fn check_compatible(mu: &MeasureFlow, nu: &MeasureFlow) -> Result<()> {
    if mu.grid != nu.grid {
        return Err(Error::GridMismatch);
    }
    if mu.populations != nu.populations {
        return Err(Error::PopulationCountMismatch { left: mu.populations, right: nu.populations });
    }
    Ok(())
}

/// Product distance at every grid point.
pub fn flow_distance_profile(mu: &MeasureFlow, nu: &MeasureFlow) -> Result<Vec<f64>> {
    check_compatible(mu, nu)?;
    (0..mu.grid.len())
        .into_par_iter()
        .map(|k| product_distance(mu.at(k), nu.at(k)))
        .collect()
}

/// Supremum over the grid of the product distance.
pub fn flow_distance(mu: &MeasureFlow, nu: &MeasureFlow) -> Result<f64> {
    Ok(flow_distance_profile(mu, nu)?.into_iter().fold(0.0, f64::max))
}

/// Largest ratio `K(mu_t, mu_s) / sqrt(t - s)` over grid pairs `s < t`.
pub fn holder_modulus(mu: &MeasureFlow) -> Result<f64> {
    let n = mu.grid.len();
    if n < 2 {
        return Err(Error::GridMismatch);
    }
    let per_row: Vec<f64> = (0..n - 1)
        .into_par_iter()
        .map(|s| {
            let mut best = 0.0f64;
            for t in s + 1..n {
                let gap = (mu.grid.time(t) - mu.grid.time(s)).sqrt();
                best = best.max(product_distance(mu.at(t), mu.at(s))? / gap);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(per_row.into_iter().fold(0.0, f64::max))
}
