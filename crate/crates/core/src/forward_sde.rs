//! Euler-Maruyama particle simulation of the forward diffusions.
//!
//! Storage is time-major: `states_at(k)` is a flat `n_particles x m` block and
//! `increments_at(k)` a flat `n_particles x d` block. Particle `p` draws its
//! Brownian increments from its own counter-based stream, normal draw
//! `k * d + j` for coordinate `j` of step `k`.

use std::io::Write;

use rayon::prelude::*;

use crate::coefficients::{CoefficientBundle, ZView};
use crate::error::{Error, Result};
use crate::io::fmt_float;
use crate::measure_flow::{EmpiricalMeasure, MeasureFlow, TimeGrid};
use crate::rng::{derive_seed, NormalStream, SeedRecord};

const BROWNIAN_TAG: u64 = 0xb120;

/// Simulated particle paths together with the Brownian increments that drove
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_particles: usize,
    state_dim: usize,
    noise_dim: usize,
    states: Vec<Vec<f64>>,
    increments: Vec<Vec<f64>>,
    seed: SeedRecord,
}

impl PathEnsemble {
    /// Assembles an ensemble from explicit arrays, e.g. analytic paths.
    pub fn from_parts(
        grid: TimeGrid,
        state_dim: usize,
        noise_dim: usize,
        states: Vec<Vec<f64>>,
        increments: Vec<Vec<f64>>,
        seed: SeedRecord,
    ) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: states.len() });
        }
        if increments.len() != grid.n_steps() {
            return Err(Error::LengthMismatch { expected: grid.n_steps(), got: increments.len() });
        }
        if state_dim == 0 || noise_dim == 0 || states[0].is_empty() {
            return Err(Error::EmptySamples);
        }
        let n_particles = states[0].len() / state_dim;
        for (k, row) in states.iter().enumerate() {
            if row.len() != n_particles * state_dim {
                return Err(Error::LengthMismatch { expected: n_particles * state_dim, got: row.len() });
            }
            check_finite(row, state_dim, k)?;
        }
        for row in &increments {
            if row.len() != n_particles * noise_dim {
                return Err(Error::LengthMismatch { expected: n_particles * noise_dim, got: row.len() });
            }
        }
        Ok(Self { grid, n_particles, state_dim, noise_dim, states, increments, seed })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn seed(&self) -> SeedRecord {
        self.seed
    }

    pub fn states_at(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn state(&self, k: usize, p: usize) -> &[f64] {
        &self.states[k][p * self.state_dim..(p + 1) * self.state_dim]
    }

    pub fn increments_at(&self, k: usize) -> &[f64] {
        &self.increments[k]
    }

    pub fn increment(&self, k: usize, p: usize) -> &[f64] {
        &self.increments[k][p * self.noise_dim..(p + 1) * self.noise_dim]
    }

    /// Replaces the stored increments, keeping the states. Used when the
    /// driving noise changes under a change of measure.
    pub fn with_increments(mut self, increments: Vec<Vec<f64>>) -> Result<Self> {
        if increments.len() != self.grid.n_steps()
            || increments.iter().any(|r| r.len() != self.n_particles * self.noise_dim)
        {
            return Err(Error::LengthMismatch {
                expected: self.grid.n_steps(),
                got: increments.len(),
            });
        }
        self.increments = increments;
        Ok(self)
    }

    /// Uniform empirical law of the particles at grid point `k`.
    pub fn empirical_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_flat(self.state_dim, self.states[k].clone(), None)
            .expect("simulated states are finite and nonempty")
    }

    /// Uniform empirical law flow of a single population.
    pub fn law_flow(&self) -> MeasureFlow {
        let rows = (0..self.grid.len()).map(|k| vec![self.empirical_at(k)]).collect();
        MeasureFlow::new(self.grid.clone(), rows).expect("rows match the grid")
    }

    /// Debug dump with columns `particle,time,coordinate,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "particle,time,coordinate,value")?;
        for p in 0..self.n_particles {
            for k in 0..self.grid.len() {
                for (c, v) in self.state(k, p).iter().enumerate() {
                    writeln!(out, "{p},{},{c},{}", fmt_float(self.grid.time(k)), fmt_float(*v))?;
                }
            }
        }
        Ok(())
    }
}

fn check_finite(row: &[f64], dim: usize, step: usize) -> Result<()> {
    match row.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteState { particle: i / dim, step }),
        None => Ok(()),
    }
}

/// Shared Euler loop. `extra_drift(k, x, drift)` adds to the drift at step `k`.
/// With `keep_all == false` only the initial and terminal rows are retained.
fn simulate<F>(
    bundle: &CoefficientBundle,
    x0: &[f64],
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
    keep_all: bool,
    extra_drift: F,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, SeedRecord)>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let dims = bundle.dims();
    let (m, d) = (dims.state, dims.noise);
    if n_particles == 0 {
        return Err(Error::InvalidArgument("n_particles must be at least 1".into()));
    }
    if x0.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: x0.len() });
    }
    let derived = derive_seed(seed, &[BROWNIAN_TAG]);
    let mut streams: Vec<NormalStream> =
        (0..n_particles).map(|p| NormalStream::new(derived, p as u64)).collect();
    let mut states = Vec::with_capacity(grid.len());
    let mut increments = Vec::with_capacity(grid.n_steps());
    let start: Vec<f64> = x0.iter().copied().cycle().take(n_particles * m).collect();
    check_finite(&start, m, 0)?;
    states.push(start);
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let dt = grid.dt(k);
        let sqrt_dt = dt.sqrt();
        let current = states.last().expect("initial row present");
        let mut next = vec![0.0; n_particles * m];
        let mut dw = vec![0.0; n_particles * d];
        next.par_chunks_mut(m)
            .zip(dw.par_chunks_mut(d))
            .zip(streams.par_iter_mut())
            .enumerate()
            .for_each(|(p, ((xn, w), stream))| {
                let x = &current[p * m..(p + 1) * m];
                for wj in w.iter_mut() {
                    *wj = sqrt_dt * stream.next_normal();
                }
                let mut drift = bundle.h(t, x);
                extra_drift(k, x, &mut drift);
                let sigma = bundle.sigma(t, x);
                for r in 0..m {
                    let mut v = x[r] + drift[r] * dt;
                    for (j, wj) in w.iter().enumerate() {
                        v += sigma[(r, j)] * wj;
                    }
                    xn[r] = v;
                }
            });
        check_finite(&next, m, k + 1)?;
        if !keep_all && states.len() == 2 {
            states.pop();
        }
        states.push(next);
        if keep_all {
            increments.push(dw);
        }
    }
    Ok((states, increments, SeedRecord { master: seed, derived }))
}

fn assemble(
    bundle: &CoefficientBundle,
    grid: &TimeGrid,
    n_particles: usize,
    (states, increments, seed): (Vec<Vec<f64>>, Vec<Vec<f64>>, SeedRecord),
) -> PathEnsemble {
    let dims = bundle.dims();
    PathEnsemble {
        grid: grid.clone(),
        n_particles,
        state_dim: dims.state,
        noise_dim: dims.noise,
        states,
        increments,
        seed,
    }
}

/// Reference diffusion `dX = h dt + sigma dW` (no mean-field drift).
pub fn simulate_reference(
    bundle: &CoefficientBundle,
    x0: &[f64],
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let raw = simulate(bundle, x0, grid, n_particles, seed, true, |_, _, _| {})?;
    Ok(assemble(bundle, grid, n_particles, raw))
}

/// Terminal states of [`simulate_reference`] without storing the path,
/// bit-identical to its last row. Flat `n_particles x m`.
pub fn simulate_reference_terminal(
    bundle: &CoefficientBundle,
    x0: &[f64],
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (mut states, _, _) = simulate(bundle, x0, grid, n_particles, seed, false, |_, _, _| {})?;
    Ok(states.pop().expect("terminal row present"))
}

/// Closed-loop diffusion with drift `h + b(t, x, y(x), z(x), flow_t)`.
///
/// `y_fn(k, x)` and `z_fn(k, x)` receive the grid index; `z_fn` returns a
/// column-major `n x d` block.
#[allow(clippy::too_many_arguments)]
pub fn simulate_feedback<Y, Z>(
    bundle: &CoefficientBundle,
    x0: &[f64],
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
    y_fn: Y,
    z_fn: Z,
    flow: &MeasureFlow,
) -> Result<PathEnsemble>
where
    Y: Fn(usize, &[f64]) -> Vec<f64> + Sync,
    Z: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    if flow.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let dims = bundle.dims();
    let raw = simulate(bundle, x0, grid, n_particles, seed, true, |k, x, drift| {
        let t = grid.time(k);
        let y = y_fn(k, x);
        let z = z_fn(k, x);
        let zv = ZView::from_slice(&z, dims.backward, dims.noise);
        let b = bundle.b(t, x, &y, zv, flow.at(k));
        for (dr, bv) in drift.iter_mut().zip(&b) {
            *dr += bv;
        }
    })?;
    Ok(assemble(bundle, grid, n_particles, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, Dims};

    fn brownian() -> CoefficientBundle {
        CoefficientBundle::builder("bm", Dims::scalar()).build().unwrap()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn std_err(v: &[f64]) -> f64 {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
            / (v.len() as f64).sqrt()
    }

    #[test]
    fn degenerate_diffusion_stays_put() {
        let frozen = CoefficientBundle::builder("frozen", Dims::scalar())
            .sigma(Diffusion::scalar(0.0))
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let paths = simulate_reference(&frozen, &[2.5], &grid, 7, 1).unwrap();
        for k in 0..grid.len() {
            assert!(paths.states_at(k).iter().all(|&x| x == 2.5));
        }
    }

    #[test]
    fn brownian_terminal_mean_and_increment_variance() {
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let n = 100_000;
        let paths = simulate_reference(&brownian(), &[0.3], &grid, n, 4).unwrap();
        let xt = paths.states_at(grid.n_steps());
        assert!((mean(xt) - 0.3).abs() <= 3.0 / (n as f64).sqrt());
        assert_eq!(paths.state(0, 17), &[0.3]);
        for k in [0, 10, 19] {
            let dw = paths.increments_at(k);
            let var = dw.iter().map(|w| w * w).sum::<f64>() / n as f64;
            let dt = grid.dt(k);
            assert!((var - dt).abs() < 5.0 * dt * (2.0 / n as f64).sqrt(), "step {k}: {var}");
        }
    }

    #[test]
    fn ornstein_uhlenbeck_mean() {
        let ou = CoefficientBundle::builder("ou", Dims::scalar())
            .h(|_, x| vec![-x[0]])
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 1000).unwrap();
        let xt = simulate_reference_terminal(&ou, &[1.0], &grid, 100_000, 8).unwrap();
        let exact = (-1.0f64).exp();
        assert!((mean(&xt) - exact).abs() <= 3.0 * std_err(&xt));
    }

    #[test]
    fn euler_bias_shrinks_with_step() {
        let ou = CoefficientBundle::builder("ou", Dims::scalar())
            .h(|_, x| vec![-x[0]])
            .build()
            .unwrap();
        let exact = (-1.0f64).exp();
        let avg_err = |steps: usize| {
            let grid = TimeGrid::uniform(1.0, steps).unwrap();
            (0..10)
                .map(|s| {
                    let xt = simulate_reference_terminal(&ou, &[1.0], &grid, 20_000, 100 + s).unwrap();
                    (mean(&xt) - exact).abs()
                })
                .sum::<f64>()
                / 10.0
        };
        assert!(avg_err(20) < avg_err(10));
    }

    #[test]
    fn terminal_only_matches_full_run() {
        let grid = TimeGrid::uniform(1.0, 13).unwrap();
        let full = simulate_reference(&brownian(), &[0.0], &grid, 50, 3).unwrap();
        let term = simulate_reference_terminal(&brownian(), &[0.0], &grid, 50, 3).unwrap();
        assert_eq!(full.states_at(13), term.as_slice());
    }

    #[test]
    fn replayed_increments_reproduce_states() {
        let bundle = CoefficientBundle::builder("ou2", Dims { state: 2, noise: 2, backward: 1 })
            .h(|t, x| vec![-x[0] + t, 0.5 * x[1].sin()])
            .sigma(Diffusion::variable(|_, x| {
                nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0 + 0.1 * x[0].cos()])
            }))
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(0.5, 16).unwrap();
        let paths = simulate_reference(&bundle, &[0.1, -0.2], &grid, 64, 9).unwrap();
        for k in 0..grid.n_steps() {
            let (t, dt) = (grid.time(k), grid.dt(k));
            for p in 0..64 {
                let x = paths.state(k, p);
                let h = bundle.h(t, x);
                let s = bundle.sigma(t, x);
                let w = paths.increment(k, p);
                for r in 0..2 {
                    let mut v = x[r] + h[r] * dt;
                    for j in 0..2 {
                        v += s[(r, j)] * w[j];
                    }
                    assert_eq!(v, paths.state(k + 1, p)[r]);
                }
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let grid = TimeGrid::uniform(1.0, 25).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_reference(&brownian(), &[0.0], &grid, 3000, 12).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn feedback_without_drift_matches_reference() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let flow = MeasureFlow::dirac_path(grid.clone(), |_| vec![vec![0.0]]).unwrap();
        let a = simulate_reference(&brownian(), &[0.0], &grid, 500, 2).unwrap();
        let b = simulate_feedback(&brownian(), &[0.0], &grid, 500, 2, |_, _| vec![0.0], |_, _| vec![0.0], &flow)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feedback_constant_and_closed_loop_drifts() {
        let n = 100_000;
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let flow = MeasureFlow::dirac_path(grid.clone(), |_| vec![vec![0.0]]).unwrap();
        let shifted = CoefficientBundle::builder("c", Dims::scalar())
            .b(|_, _, _, _, _| vec![0.7])
            .build()
            .unwrap();
        let paths =
            simulate_feedback(&shifted, &[0.5], &grid, n, 5, |_, _| vec![0.0], |_, _| vec![0.0], &flow).unwrap();
        let xt = paths.states_at(50);
        assert!((mean(xt) - 1.2).abs() <= 3.0 * std_err(xt));

        let horizon = std::f64::consts::FRAC_PI_4;
        let grid = TimeGrid::uniform(horizon, 100).unwrap();
        let flow = MeasureFlow::dirac_path(grid.clone(), |_| vec![vec![0.0]]).unwrap();
        let follow_y = CoefficientBundle::builder("y", Dims::scalar())
            .b(|_, _, y, _, _| vec![y[0]])
            .build()
            .unwrap();
        let c = 0.4;
        let g2 = grid.clone();
        let paths = simulate_feedback(
            &follow_y,
            &[0.0],
            &grid,
            n,
            6,
            move |k, _| vec![c * g2.time(k).cos()],
            |_, _| vec![0.0],
            &flow,
        )
        .unwrap();
        let xt = paths.states_at(100);
        assert!((mean(xt) - c * horizon.sin()).abs() <= 3.0 * std_err(xt));
    }

    #[test]
    fn errors_are_reported() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let blowup = CoefficientBundle::builder("blowup", Dims::scalar())
            .h(|_, x| vec![1e300 * (1.0 + x[0].abs())])
            .build()
            .unwrap();
        assert!(matches!(
            simulate_reference(&blowup, &[1.0], &grid, 4, 1),
            Err(Error::NonFiniteState { particle: 0, .. })
        ));
        let other = MeasureFlow::dirac_path(TimeGrid::uniform(1.0, 5).unwrap(), |_| vec![vec![0.0]]).unwrap();
        assert!(matches!(
            simulate_feedback(&brownian(), &[0.0], &grid, 4, 1, |_, _| vec![0.0], |_, _| vec![0.0], &other),
            Err(Error::GridMismatch)
        ));
        assert!(simulate_reference(&brownian(), &[0.0], &grid, 0, 1).is_err());
        assert!(simulate_reference(&brownian(), &[0.0, 1.0], &grid, 4, 1).is_err());
    }
}
