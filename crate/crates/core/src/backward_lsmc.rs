//! Least-squares Monte Carlo for the backward equation.
//!
//! At each step, working backwards from the terminal condition:
//!
//! 1. a proxy `E[Y_{k+1} | X_k]` is fitted,
//! 2. `Z_k` is fitted from `(Y_{k+1} - proxy) dW_k^T / dt_k`,
//! 3. `Y_k` is fitted from `Y_{k+1} + driver(proxy, Z_k) dt_k`, then refitted
//!    once with the driver evaluated at the newly fitted `Y_k`.
//!
//! Regressions use a polynomial basis in standardized coordinates with a small
//! ridge on the non-constant columns. Targets are centered before solving so a
//! constant target is reproduced exactly.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::ZView;
use crate::error::{Error, Result};
use crate::forward_sde::PathEnsemble;
use crate::io::fmt_float;
use crate::measure_flow::{EmpiricalMeasure, MeasureFlow, TimeGrid};

pub const DEFAULT_DEGREE: usize = 3;
const RIDGE: f64 = 1e-8;
const CHUNK: usize = 8192;

/// Polynomial regression basis of total degree at most `degree` in `dim`
/// variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    dim: usize,
    degree: usize,
    standardize: bool,
    /// Flat `n_functions x dim` multi-indices, constant first, graded by
    /// total degree.
    exponents: Vec<usize>,
}

impl RegressionBasis {
    pub fn polynomial(dim: usize, degree: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("basis dimension must be positive".into()));
        }
        let mut rows = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0usize; dim];
            push_compositions(total, 0, &mut current, &mut rows);
        }
        Ok(Self { dim, degree, standardize: true, exponents: rows.concat() })
    }

    pub fn with_standardization(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn standardized(&self) -> bool {
        self.standardize
    }

    /// `C(dim + degree, degree)`.
    pub fn n_functions(&self) -> usize {
        self.exponents.len() / self.dim
    }

    #[inline]
    fn features(&self, xi: &[f64], powers: &mut [f64], out: &mut [f64]) {
        let stride = self.degree + 1;
        for (c, &v) in xi.iter().enumerate() {
            let row = &mut powers[c * stride..(c + 1) * stride];
            row[0] = 1.0;
            for e in 1..stride {
                row[e] = row[e - 1] * v;
            }
        }
        if self.dim == 1 {
            out.copy_from_slice(powers);
            return;
        }
        for (o, alpha) in out.iter_mut().zip(self.exponents.chunks(self.dim)) {
            let mut v = 1.0;
            for (c, &e) in alpha.iter().enumerate() {
                v *= powers[c * stride + e];
            }
            *o = v;
        }
    }
}

fn push_compositions(rest: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == current.len() {
        current[pos] = rest;
        out.push(current.clone());
        return;
    }
    for e in (0..=rest).rev() {
        current[pos] = e;
        push_compositions(rest - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Regression fitted at one grid point: `q` outputs, each a polynomial in the
/// standardized state plus a per-output offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    /// `coeffs[r][a]`: output `r`, basis function `a`. Empty when only the
    /// offset is used.
    pub coeffs: Vec<Vec<f64>>,
}

impl StepFit {
    pub fn intercept_only(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn outputs(&self) -> usize {
        self.offset.len()
    }

    pub fn eval(&self, basis: &RegressionBasis, x: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::new(basis);
        let mut out = vec![0.0; self.outputs()];
        self.eval_into(basis, x, &mut scratch, &mut out);
        out
    }

    #[inline]
    fn eval_into(&self, basis: &RegressionBasis, x: &[f64], s: &mut Scratch, out: &mut [f64]) {
        if self.coeffs.is_empty() {
            out.copy_from_slice(&self.offset);
            return;
        }
        for (c, v) in x.iter().enumerate() {
            s.xi[c] = (v - self.center[c]) / self.scale[c];
        }
        basis.features(&s.xi, &mut s.powers, &mut s.phi);
        for ((o, off), beta) in out.iter_mut().zip(&self.offset).zip(&self.coeffs) {
            *o = off + beta.iter().zip(&s.phi).map(|(b, f)| b * f).sum::<f64>();
        }
    }
}

struct Scratch {
    xi: Vec<f64>,
    powers: Vec<f64>,
    phi: Vec<f64>,
}

impl Scratch {
    fn new(basis: &RegressionBasis) -> Self {
        Self {
            xi: vec![0.0; basis.dim],
            powers: vec![0.0; basis.dim * (basis.degree + 1)],
            phi: vec![0.0; basis.n_functions()],
        }
    }
}

fn exact_constant(values: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let mut it = values.clone();
    let first = it.next()?;
    it.all(|v| v == first).then_some(first)
}

/// Fits `targets` (flat `n x q`) against states (flat `n x m`) at step `step`.
/// `degenerate_ok` allows an offset-only fit when every particle sits at the
/// same state.
pub(crate) fn fit_step(
    basis: &RegressionBasis,
    states: &[f64],
    targets: &[f64],
    q: usize,
    step: usize,
    degenerate_ok: bool,
) -> Result<StepFit> {
    let m = basis.dim;
    let n = states.len() / m;
    let offset: Vec<f64> = (0..q)
        .map(|r| {
            let col = targets.iter().skip(r).step_by(q).copied();
            exact_constant(col.clone()).unwrap_or_else(|| col.sum::<f64>() / n as f64)
        })
        .collect();

    let mut center = vec![0.0; m];
    let mut scale = vec![1.0; m];
    let mut spread = vec![false; m];
    for c in 0..m {
        let col = states.iter().skip(c).step_by(m).copied();
        spread[c] = exact_constant(col.clone()).is_none();
        if basis.standardize {
            let mean = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            center[c] = mean;
            if var > 0.0 {
                scale[c] = var.sqrt();
            }
        }
    }
    let intercept_only = || StepFit {
        center: center.clone(),
        scale: scale.clone(),
        offset: offset.clone(),
        coeffs: Vec::new(),
    };
    if basis.degree == 0 {
        return Ok(intercept_only());
    }
    if !spread.iter().any(|&s| s) {
        if degenerate_ok {
            return Ok(intercept_only());
        }
        return Err(Error::RankDeficientRegression {
            step,
            reason: "all particles share the same state".into(),
        });
    }
    let p = basis.n_functions();
    if n < p {
        return Err(Error::RankDeficientRegression {
            step,
            reason: format!("{n} particles for {p} basis functions"),
        });
    }

    // Chunked normal equations, summed in a fixed order.
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>)> = states
        .par_chunks(CHUNK * m)
        .zip(targets.par_chunks(CHUNK * q))
        .map(|(xs, ts)| {
            let rows = xs.len() / m;
            let mut design = DMatrix::<f64>::zeros(rows, p);
            let mut centered = DMatrix::<f64>::zeros(rows, q);
            let mut s = Scratch::new(basis);
            for (i, (x, t)) in xs.chunks(m).zip(ts.chunks(q)).enumerate() {
                for c in 0..m {
                    s.xi[c] = (x[c] - center[c]) / scale[c];
                }
                basis.features(&s.xi, &mut s.powers, &mut s.phi);
                for a in 0..p {
                    design[(i, a)] = s.phi[a];
                }
                for r in 0..q {
                    centered[(i, r)] = t[r] - offset[r];
                }
            }
            (design.tr_mul(&design), design.tr_mul(&centered))
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, q);
    for (g, r) in &partials {
        gram += g;
        rhs += r;
    }
    let inv_n = 1.0 / n as f64;
    gram *= inv_n;
    for a in 1..p {
        gram[(a, a)] += RIDGE;
    }
    rhs *= inv_n;
    let chol = gram.cholesky().ok_or_else(|| Error::RankDeficientRegression {
        step,
        reason: "normal equations are singular".into(),
    })?;
    let beta = chol.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficientRegression {
            step,
            reason: "non-finite regression coefficients".into(),
        });
    }
    let coeffs = (0..q).map(|r| (0..p).map(|a| beta[(a, r)]).collect()).collect();
    Ok(StepFit { center, scale, offset, coeffs })
}

pub(crate) fn fitted_values(fit: &StepFit, basis: &RegressionBasis, states: &[f64]) -> Vec<f64> {
    let q = fit.outputs();
    let m = basis.dim;
    let mut out = vec![0.0; states.len() / m * q];
    out.par_chunks_mut(CHUNK * q)
        .zip(states.par_chunks(CHUNK * m))
        .for_each(|(o, xs)| {
            let mut scratch = Scratch::new(basis);
            for (oo, x) in o.chunks_mut(q).zip(xs.chunks(m)) {
                fit.eval_into(basis, x, &mut scratch, oo);
            }
        });
    out
}

/// Fitted `(Y, Z)` along a path ensemble with the per-step regressions that
/// define the Markovian representations `u` and `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    grid: TimeGrid,
    basis: RegressionBasis,
    outputs: usize,
    noise_dim: usize,
    y_values: Vec<Vec<f64>>,
    z_values: Vec<Vec<f64>>,
    u_fits: Vec<StepFit>,
    d_fits: Vec<StepFit>,
}

impl BackwardSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    /// Backward dimension `n`.
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Flat `n_particles x n` block of fitted `Y` at grid point `k`.
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y_values[k]
    }

    pub fn y(&self, k: usize, p: usize) -> &[f64] {
        &self.y_values[k][p * self.outputs..(p + 1) * self.outputs]
    }

    /// Flat `n_particles x (n d)` block of fitted `Z` at step `k < K`, each
    /// particle's block column-major.
    pub fn z_at(&self, k: usize) -> &[f64] {
        &self.z_values[k]
    }

    pub fn z(&self, k: usize, p: usize) -> &[f64] {
        let w = self.outputs * self.noise_dim;
        &self.z_values[k][p * w..(p + 1) * w]
    }

    pub fn u_fit(&self, k: usize) -> &StepFit {
        &self.u_fits[k]
    }

    pub fn d_fit(&self, k: usize) -> &StepFit {
        &self.d_fits[k]
    }

    /// Surrogate `u(t_k, x)`. At the terminal index this is the regression of
    /// the terminal values, not the terminal function itself.
    pub fn evaluate_u(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let fit = self
            .u_fits
            .get(k)
            .ok_or(Error::IndexOutOfRange { index: k, len: self.u_fits.len() })?;
        check_dim(&self.basis, x)?;
        Ok(fit.eval(&self.basis, x))
    }

    /// Surrogate `d(t_k, x)` as a column-major `n x d` block, for `k < K`.
    pub fn evaluate_d(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let fit = self
            .d_fits
            .get(k)
            .ok_or(Error::IndexOutOfRange { index: k, len: self.d_fits.len() })?;
        check_dim(&self.basis, x)?;
        Ok(fit.eval(&self.basis, x))
    }

    /// Cross-particle mean of fitted `Y` at grid point `k`.
    pub fn y_mean(&self, k: usize) -> Vec<f64> {
        column_stats(&self.y_values[k], self.outputs).0
    }

    /// Columns `time,y_mean_r,y_std_r,z_mean_c`; the `Z` columns are empty at
    /// the terminal time.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let w = self.outputs * self.noise_dim;
        let mut header = vec!["time".to_string()];
        header.extend((0..self.outputs).map(|r| format!("y_mean_{r}")));
        header.extend((0..self.outputs).map(|r| format!("y_std_{r}")));
        header.extend((0..w).map(|c| format!("z_mean_{c}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.grid.len() {
            let (mean, std) = column_stats(&self.y_values[k], self.outputs);
            let mut fields = vec![fmt_float(self.grid.time(k))];
            fields.extend(mean.into_iter().map(fmt_float));
            fields.extend(std.into_iter().map(fmt_float));
            match self.z_values.get(k) {
                Some(z) => fields.extend(column_stats(z, w).0.into_iter().map(fmt_float)),
                None => fields.extend(std::iter::repeat_n(String::new(), w)),
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn check_dim(basis: &RegressionBasis, x: &[f64]) -> Result<()> {
    if x.len() != basis.dim {
        return Err(Error::DimensionMismatch { expected: basis.dim, got: x.len() });
    }
    Ok(())
}

fn column_stats(flat: &[f64], q: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (flat.len() / q) as f64;
    let mean: Vec<f64> = (0..q).map(|r| flat.iter().skip(r).step_by(q).sum::<f64>() / n).collect();
    let std = (0..q)
        .map(|r| {
            (flat.iter().skip(r).step_by(q).map(|v| (v - mean[r]).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    (mean, std)
}

fn check_finite_values(values: &[f64], q: usize, step: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteState { particle: i / q, step }),
        None => Ok(()),
    }
}

/// Solves `dY = -driver dt + Z dW`, `Y_T = terminal(X_T, flow_T)` along
/// `paths` by backward regression.
pub fn solve_bsde<D, G>(
    paths: &PathEnsemble,
    driver: D,
    terminal: G,
    flow: &MeasureFlow,
    basis: &RegressionBasis,
) -> Result<BackwardSolution>
where
    D: Fn(f64, &[f64], &[f64], ZView<'_>, &[EmpiricalMeasure]) -> Result<Vec<f64>> + Sync,
    G: Fn(&[f64], &[EmpiricalMeasure]) -> Vec<f64> + Sync,
{
    let grid = paths.grid();
    if flow.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let m = paths.state_dim();
    if basis.dim != m {
        return Err(Error::DimensionMismatch { expected: m, got: basis.dim });
    }
    let d = paths.noise_dim();
    let big_k = grid.n_steps();
    let n_particles = paths.n_particles();

    let terminal_rows: Vec<Vec<f64>> = paths
        .states_at(big_k)
        .par_chunks(m)
        .map(|x| terminal(x, flow.at(big_k)))
        .collect();
    let n = terminal_rows[0].len();
    if n == 0 || terminal_rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("terminal values must have a fixed positive length".into()));
    }
    let y_terminal: Vec<f64> = terminal_rows.into_iter().flatten().collect();
    check_finite_values(&y_terminal, n, big_k)?;

    let mut y_values = vec![Vec::new(); grid.len()];
    let mut z_values = vec![Vec::new(); big_k];
    let mut u_fits = vec![None; grid.len()];
    let mut d_fits = vec![None; big_k];
    u_fits[big_k] = Some(fit_step(basis, paths.states_at(big_k), &y_terminal, n, big_k, true)?);
    y_values[big_k] = y_terminal;

    let w = n * d;
    for k in (0..big_k).rev() {
        let t = grid.time(k);
        let dt = grid.dt(k);
        let xs = paths.states_at(k);
        let dws = paths.increments_at(k);
        let y_next = &y_values[k + 1];
        let measures = flow.at(k);

        let proxy_fit = fit_step(basis, xs, y_next, n, k, true)?;
        let proxy = fitted_values(&proxy_fit, basis, xs);

        let mut z_targets = vec![0.0; n_particles * w];
        z_targets.par_chunks_mut(CHUNK * w).enumerate().for_each(|(chunk, zc)| {
            for (i, zt) in zc.chunks_mut(w).enumerate() {
                let p = chunk * CHUNK + i;
                let dw = &dws[p * d..(p + 1) * d];
                for j in 0..d {
                    for r in 0..n {
                        zt[r + j * n] = (y_next[p * n + r] - proxy[p * n + r]) * dw[j] / dt;
                    }
                }
            }
        });
        let z_fit = fit_step(basis, xs, &z_targets, w, k, true)?;
        let z = fitted_values(&z_fit, basis, xs);

        let step_targets = |y_arg: &[f64]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; n_particles * n];
            let status: Vec<Result<()>> = out
                .par_chunks_mut(CHUNK * n)
                .enumerate()
                .map(|(chunk, o)| {
                    for (i, oo) in o.chunks_mut(n).enumerate() {
                        let p = chunk * CHUNK + i;
                        let x = &xs[p * m..(p + 1) * m];
                        let zv = ZView::from_slice(&z[p * w..(p + 1) * w], n, d);
                        let f = driver(t, x, &y_arg[p * n..(p + 1) * n], zv, measures)?;
                        if f.len() != n {
                            return Err(Error::LengthMismatch { expected: n, got: f.len() });
                        }
                        for r in 0..n {
                            oo[r] = y_next[p * n + r] + f[r] * dt;
                        }
                    }
                    Ok(())
                })
                .collect();
            status.into_iter().collect::<Result<Vec<()>>>()?;
            check_finite_values(&out, n, k)?;
            Ok(out)
        };

        let first = fit_step(basis, xs, &step_targets(&proxy)?, n, k, k == 0)?;
        let y_first = fitted_values(&first, basis, xs);
        let u_fit = fit_step(basis, xs, &step_targets(&y_first)?, n, k, k == 0)?;
        let y = fitted_values(&u_fit, basis, xs);
        check_finite_values(&y, n, k)?;
        check_finite_values(&z, w, k)?;
        y_values[k] = y;
        z_values[k] = z;
        u_fits[k] = Some(u_fit);
        d_fits[k] = Some(z_fit);
    }
    Ok(BackwardSolution {
        grid: grid.clone(),
        basis: basis.clone(),
        outputs: n,
        noise_dim: d,
        y_values,
        z_values,
        u_fits: u_fits.into_iter().map(|f| f.expect("every step fitted")).collect(),
        d_fits: d_fits.into_iter().map(|f| f.expect("every step fitted")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientBundle, Diffusion, Dims};
    use crate::forward_sde::simulate_reference;

    fn brownian_paths(n: usize, steps: usize, seed: u64) -> (PathEnsemble, MeasureFlow) {
        let bm = CoefficientBundle::builder("bm", Dims::scalar()).build().unwrap();
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let paths = simulate_reference(&bm, &[0.0], &grid, n, seed).unwrap();
        let flow = MeasureFlow::dirac_path(grid, |_| vec![vec![0.0]]).unwrap();
        (paths, flow)
    }

    fn zero_driver(_: f64, _: &[f64], _: &[f64], _: ZView<'_>, _: &[EmpiricalMeasure]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn binomial(n: usize, k: usize) -> usize {
        (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
    }

    #[test]
    fn basis_size_is_binomial() {
        for dim in 1..4 {
            for degree in 0..5 {
                let b = RegressionBasis::polynomial(dim, degree).unwrap();
                assert_eq!(b.n_functions(), binomial(dim + degree, degree));
                assert!(b.exponents[..dim].iter().all(|&e| e == 0));
            }
        }
    }

    #[test]
    fn constant_terminal_gives_constant_solution() {
        let (paths, flow) = brownian_paths(2000, 20, 1);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        let sol = solve_bsde(&paths, zero_driver, |_, _| vec![1.0], &flow, &basis).unwrap();
        for k in 0..=20 {
            assert!(sol.y_at(k).iter().all(|&y| y == 1.0));
            assert_eq!(sol.evaluate_u(k, &[5.0]).unwrap(), vec![1.0]);
        }
        for k in 0..20 {
            assert!(sol.z_at(k).iter().all(|&z| z == 0.0));
            assert_eq!(sol.evaluate_d(k, &[-3.0]).unwrap(), vec![0.0]);
        }
        assert!(matches!(sol.evaluate_d(20, &[0.0]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(sol.evaluate_u(21, &[0.0]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn fitted_values_replay_exactly_and_terminal_is_exact() {
        let (paths, flow) = brownian_paths(3000, 10, 2);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        let sol = solve_bsde(
            &paths,
            |_, _, y, _, _| Ok(vec![-0.5 * y[0]]),
            |x, _| vec![x[0].sin()],
            &flow,
            &basis,
        )
        .unwrap();
        for p in (0..3000).step_by(97) {
            for k in 0..10 {
                assert_eq!(sol.evaluate_u(k, paths.state(k, p)).unwrap(), sol.y(k, p));
                assert_eq!(sol.evaluate_d(k, paths.state(k, p)).unwrap(), sol.z(k, p));
            }
            assert_eq!(sol.y(10, p)[0], paths.state(10, p)[0].sin());
        }
    }

    #[test]
    fn degree_zero_is_state_independent() {
        let (paths, flow) = brownian_paths(4000, 10, 3);
        let basis = RegressionBasis::polynomial(1, 0).unwrap();
        let sol = solve_bsde(&paths, zero_driver, |x, _| vec![x[0] * x[0]], &flow, &basis).unwrap();
        for k in 0..10 {
            let a = sol.evaluate_u(k, &[-2.0]).unwrap();
            assert_eq!(a, sol.evaluate_u(k, &[7.0]).unwrap());
            assert!((a[0] - sol.y_mean(k)[0]).abs() < 1e-12);
            assert_eq!(sol.evaluate_d(k, &[-1.0]).unwrap(), sol.evaluate_d(k, &[1.0]).unwrap());
        }
    }

    #[test]
    fn exponential_upper_bound_and_zero_lower_bound() {
        let (paths, flow) = brownian_paths(100_000, 100, 4);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        let c = 1.0;
        let upper = solve_bsde(&paths, |_, _, y, _, _| Ok(vec![c + c * y[0]]), |_, _| vec![0.0], &flow, &basis)
            .unwrap();
        let y0 = upper.y_mean(0)[0];
        assert!((y0 - (c.exp() - 1.0)).abs() <= 0.05, "{y0}");
        let lower = solve_bsde(&paths, |_, _, y, _, _| Ok(vec![-c * y[0].abs()]), |_, _| vec![0.0], &flow, &basis)
            .unwrap();
        assert!(lower.y_mean(0)[0].abs() <= 0.01);
    }

    #[test]
    fn linear_driver_matches_exponential() {
        let (paths, flow) = brownian_paths(1000, 100, 5);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        for alpha in [-1.0f64, 0.0, 1.0] {
            let sol = solve_bsde(&paths, move |_, _, y, _, _| Ok(vec![alpha * y[0]]), |_, _| vec![1.0], &flow, &basis)
                .unwrap();
            assert!((sol.y_mean(0)[0] - alpha.exp()).abs() <= 0.05);
        }
    }

    #[test]
    fn martingale_representation_of_brownian_motion() {
        let (paths, flow) = brownian_paths(100_000, 50, 6);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        let sol = solve_bsde(&paths, zero_driver, |x, _| vec![x[0]], &flow, &basis).unwrap();
        for k in [0, 10, 25, 49] {
            let z = sol.evaluate_d(k, &[0.0]).unwrap()[0];
            assert!((z - 1.0).abs() <= 0.05, "step {k}: {z}");
        }
    }

    #[test]
    fn comparison_of_ordered_drivers() {
        let (paths, flow) = brownian_paths(20_000, 50, 7);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        let terminal = |x: &[f64], _: &[EmpiricalMeasure]| vec![x[0].cos()];
        let a = solve_bsde(&paths, |_, _, y, z, _| Ok(vec![0.2 + (y[0] + z[(0, 0)]).tanh()]), terminal, &flow, &basis)
            .unwrap();
        let b = solve_bsde(&paths, |_, _, y, z, _| Ok(vec![(y[0] + z[(0, 0)]).tanh() - 0.2]), terminal, &flow, &basis)
            .unwrap();
        let se = {
            let y = b.y_at(1);
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt() / (y.len() as f64).sqrt()
        };
        assert!(a.y_mean(0)[0] >= b.y_mean(0)[0] - 3.0 * se);
    }

    #[test]
    fn multidimensional_outputs_and_noise() {
        let bundle = CoefficientBundle::builder("2d", Dims { state: 2, noise: 2, backward: 2 }).build().unwrap();
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let paths = simulate_reference(&bundle, &[0.0, 0.0], &grid, 50_000, 8).unwrap();
        let flow = MeasureFlow::dirac_path(grid, |_| vec![vec![0.0, 0.0]]).unwrap();
        let basis = RegressionBasis::polynomial(2, 2).unwrap();
        let sol = solve_bsde(
            &paths,
            |_, _, _, _, _| Ok(vec![0.0, 0.0]),
            |x, _| vec![x[0], x[0] + 2.0 * x[1]],
            &flow,
            &basis,
        )
        .unwrap();
        // Column-major 2x2: Z = [[1, 0], [1, 2]].
        let z = sol.evaluate_d(5, &[0.1, -0.1]).unwrap();
        for (got, want) in z.iter().zip([1.0, 1.0, 0.0, 2.0]) {
            assert!((got - want).abs() < 0.05, "{z:?}");
        }
    }

    #[test]
    fn errors_are_reported() {
        let (paths, flow) = brownian_paths(100, 10, 9);
        let basis = RegressionBasis::polynomial(1, 3).unwrap();
        let other = MeasureFlow::dirac_path(TimeGrid::uniform(1.0, 5).unwrap(), |_| vec![vec![0.0]]).unwrap();
        assert!(matches!(
            solve_bsde(&paths, zero_driver, |_, _| vec![1.0], &other, &basis),
            Err(Error::GridMismatch)
        ));
        let wrong = RegressionBasis::polynomial(2, 1).unwrap();
        assert!(solve_bsde(&paths, zero_driver, |_, _| vec![1.0], &flow, &wrong).is_err());

        let (few, flow3) = brownian_paths(3, 10, 9);
        assert!(matches!(
            solve_bsde(&few, zero_driver, |x, _| vec![x[0]], &flow3, &basis),
            Err(Error::RankDeficientRegression { .. })
        ));

        let frozen = CoefficientBundle::builder("frozen", Dims::scalar())
            .h(|_, _| vec![1.0])
            .sigma(Diffusion::scalar(0.0))
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let still = simulate_reference(&frozen, &[0.0], &grid, 100, 1).unwrap();
        assert!(matches!(
            solve_bsde(&still, zero_driver, |x, _| vec![x[0]], &flow, &basis),
            Err(Error::RankDeficientRegression { .. })
        ));
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let (paths, flow) = brownian_paths(500, 4, 10);
        let basis = RegressionBasis::polynomial(1, 2).unwrap();
        let sol = solve_bsde(&paths, zero_driver, |x, _| vec![x[0]], &flow, &basis).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("time,y_mean_0,y_std_0,z_mean_0\n"));
    }
}
