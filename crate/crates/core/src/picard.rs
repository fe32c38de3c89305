//! The law-flow map `psi` and its damped fixed-point iteration.
//!
//! `psi(mu)` solves the system with the measure argument frozen at `mu` and
//! returns the law flow of the resulting state. In both modes the backward
//! equation is solved along the reference diffusion with the shifted driver
//! `f + z b~`. The girsanov mode then reweights the reference particles; the
//! direct mode re-simulates the forward equation in closed loop with the
//! fitted `(u, d)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward_lsmc::{solve_bsde, BackwardSolution, RegressionBasis, DEFAULT_DEGREE};
use crate::coefficients::{PopulationSystem, ZView};
use crate::error::{Error, Result};
use crate::forward_sde::{simulate_feedback, simulate_reference, PathEnsemble};
use crate::girsanov::{doleans_from_table, integrand_table, weighted_law, WeightEnsemble};
use crate::measure_flow::{
    flow_distance, flow_distance_profile, holder_modulus, product_distance, EmpiricalMeasure, FlowSummary,
    MeasureFlow,
};
use crate::rng::{derive_seed, uniform01, uniform_rng};

const MIX_TAG: u64 = 0x313c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMode {
    Girsanov,
    Direct,
}

impl std::str::FromStr for PsiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "girsanov" => Ok(Self::Girsanov),
            "direct" => Ok(Self::Direct),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiConfig {
    pub mode: PsiMode,
    pub n_particles: usize,
    pub seed: u64,
    /// Fraction of each new iterate drawn from `psi(mu)`, in `(0, 1]`.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub basis_degree: usize,
}

impl Default for PsiConfig {
    fn default() -> Self {
        Self {
            mode: PsiMode::Girsanov,
            n_particles: 100_000,
            seed: 0,
            damping: 1.0,
            tol: 0.02,
            max_iter: 20,
            basis_degree: DEFAULT_DEGREE,
        }
    }
}

impl PsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidArgument("n_particles must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping {} must lie in (0, 1]", self.damping)));
        }
        // A zero tolerance is accepted; it simply never converges.
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidArgument(format!("tol {} must be finite and nonnegative", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn basis(&self, dim: usize) -> Result<RegressionBasis> {
        RegressionBasis::polynomial(dim, self.basis_degree)
    }
}

/// Forward-backward triple of one population along the particles whose law
/// `psi` returns.
///
/// `paths` carries the increments of the Brownian motion that drives the
/// system: in girsanov mode these are `dW - b~ dt`, a Brownian motion under the
/// reweighted measure.
#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub paths: PathEnsemble,
    /// `y[k]`: flat `n_particles x n`.
    pub y: Vec<Vec<f64>>,
    /// `z[k]`, `k < K`: flat `n_particles x (n d)`, column-major blocks.
    pub z: Vec<Vec<f64>>,
    pub weights: WeightEnsemble,
    /// Regression surrogates of the backward pass, when available.
    pub backward: Option<BackwardSolution>,
}

impl FbsdeSolution {
    pub fn from_parts(
        paths: PathEnsemble,
        y: Vec<Vec<f64>>,
        z: Vec<Vec<f64>>,
        weights: WeightEnsemble,
    ) -> Result<Self> {
        let grid = paths.grid();
        if weights.grid() != grid {
            return Err(Error::GridMismatch);
        }
        if y.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: y.len() });
        }
        if z.len() != grid.n_steps() {
            return Err(Error::LengthMismatch { expected: grid.n_steps(), got: z.len() });
        }
        Ok(Self { paths, y, z, weights, backward: None })
    }

    pub fn outputs(&self) -> usize {
        self.y[0].len() / self.paths.n_particles()
    }

    /// Weighted empirical law of the state at grid index `k`.
    pub fn law_at(&self, k: usize) -> Result<EmpiricalMeasure> {
        weighted_law(&self.paths, &self.weights, k)
    }
}

fn population_seed(seed: u64, population: usize) -> u64 {
    derive_seed(seed, &[population as u64])
}

fn evaluate_rows<F>(paths: &PathEnsemble, k: usize, width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let m = paths.state_dim();
    let rows: Vec<Result<Vec<f64>>> = paths.states_at(k).par_chunks(m).map(&f).collect();
    let mut out = Vec::with_capacity(paths.n_particles() * width);
    for r in rows {
        let r = r?;
        if r.len() != width {
            return Err(Error::LengthMismatch { expected: width, got: r.len() });
        }
        out.extend(r);
    }
    Ok(out)
}

/// Solves one population under the frozen flow `mu`.
pub fn solve_population(
    system: &PopulationSystem,
    population: usize,
    mu: &MeasureFlow,
    config: &PsiConfig,
) -> Result<FbsdeSolution> {
    let bundle = system.bundle(population);
    let dims = bundle.dims();
    let (n, d) = (dims.backward, dims.noise);
    let grid = mu.grid();
    let x0 = &system.initial_points()[population];
    let seed = population_seed(config.seed, population);
    let basis = config.basis(dims.state)?;

    let reference = simulate_reference(bundle, x0, grid, config.n_particles, seed)?;
    let backward = solve_bsde(
        &reference,
        |t, x, y, z, m| bundle.shifted_driver(t, x, y, z, m),
        |x, m| bundle.g(x, m),
        mu,
        &basis,
    )?;

    match config.mode {
        PsiMode::Girsanov => {
            let theta = integrand_table(
                &reference,
                |k, x| {
                    let y = backward.evaluate_u(k, x)?;
                    let z = backward.evaluate_d(k, x)?;
                    bundle.reduced_drift(grid.time(k), x, &y, ZView::from_slice(&z, n, d), mu.at(k))
                },
                0,
            )?;
            let weights = doleans_from_table(&reference, &theta, 0)?;
            let shifted: Vec<Vec<f64>> = theta
                .iter()
                .enumerate()
                .map(|(k, th)| {
                    let dt = grid.dt(k);
                    reference.increments_at(k).iter().zip(th).map(|(w, b)| w - b * dt).collect()
                })
                .collect();
            let y = (0..grid.len()).map(|k| backward.y_at(k).to_vec()).collect();
            let z = (0..grid.n_steps()).map(|k| backward.z_at(k).to_vec()).collect();
            let paths = reference.with_increments(shifted)?;
            Ok(FbsdeSolution { paths, y, z, weights, backward: Some(backward) })
        }
        PsiMode::Direct => {
            drop(reference);
            let forward = simulate_feedback(
                bundle,
                x0,
                grid,
                config.n_particles,
                seed,
                |k, x| backward.evaluate_u(k, x).expect("index and dimension checked"),
                |k, x| backward.evaluate_d(k, x).expect("index and dimension checked"),
                mu,
            )?;
            let y = (0..grid.len())
                .map(|k| evaluate_rows(&forward, k, n, |x| backward.evaluate_u(k, x)))
                .collect::<Result<Vec<_>>>()?;
            let z = (0..grid.n_steps())
                .map(|k| evaluate_rows(&forward, k, n * d, |x| backward.evaluate_d(k, x)))
                .collect::<Result<Vec<_>>>()?;
            let weights = WeightEnsemble::uniform(grid.clone(), config.n_particles);
            Ok(FbsdeSolution { paths: forward, y, z, weights, backward: Some(backward) })
        }
    }
}

fn check_flow(system: &PopulationSystem, mu: &MeasureFlow) -> Result<()> {
    if mu.populations() != system.populations() {
        return Err(Error::PopulationCountMismatch { left: system.populations(), right: mu.populations() });
    }
    if mu.dim() != system.dims().state {
        return Err(Error::DimensionMismatch { expected: system.dims().state, got: mu.dim() });
    }
    Ok(())
}

/// `psi(mu)` together with the per-population solutions that produced it.
pub fn psi_map_with_solutions(
    system: &PopulationSystem,
    mu: &MeasureFlow,
    config: &PsiConfig,
) -> Result<(MeasureFlow, Vec<FbsdeSolution>)> {
    config.validate()?;
    check_flow(system, mu)?;
    let solutions = (0..system.populations())
        .into_par_iter()
        .map(|i| solve_population(system, i, mu, config))
        .collect::<Result<Vec<_>>>()?;
    let rows = (0..mu.grid().len())
        .map(|k| solutions.iter().map(|s| s.law_at(k)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok((MeasureFlow::new(mu.grid().clone(), rows)?, solutions))
}

pub fn psi_map(system: &PopulationSystem, mu: &MeasureFlow, config: &PsiConfig) -> Result<MeasureFlow> {
    Ok(psi_map_with_solutions(system, mu, config)?.0)
}

/// Indices of `count` systematic-resampling draws from normalized `weights`.
fn systematic_indices(weights: &[f64], count: usize, offset: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut cumulative = 0.0;
    let mut i = 0;
    for j in 0..count {
        let target = (offset + j as f64) / count as f64;
        while i + 1 < weights.len() && cumulative + weights[i] <= target {
            cumulative += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

fn resample(measure: &EmpiricalMeasure, count: usize, offset: f64, out: &mut Vec<f64>) {
    for i in systematic_indices(measure.weights(), count, offset) {
        out.extend_from_slice(measure.sample(i));
    }
}

/// Sample-level mixture: `round(damping * n)` uniform draws from `psi` and the
/// rest from `mu`, per grid point and population. With `damping == 1` the
/// `psi` flow is returned unchanged.
pub fn mix_flows(mu: &MeasureFlow, psi: &MeasureFlow, damping: f64, n: usize, seed: u64) -> Result<MeasureFlow> {
    if mu.grid() != psi.grid() {
        return Err(Error::GridMismatch);
    }
    if mu.populations() != psi.populations() {
        return Err(Error::PopulationCountMismatch { left: mu.populations(), right: psi.populations() });
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::InvalidArgument(format!("damping {damping} must lie in (0, 1]")));
    }
    if damping == 1.0 {
        return Ok(psi.clone());
    }
    let from_psi = ((damping * n as f64).round() as usize).min(n);
    let rows = (0..mu.grid().len())
        .into_par_iter()
        .map(|k| {
            (0..mu.populations())
                .map(|i| {
                    let mut rng = uniform_rng(derive_seed(seed, &[MIX_TAG, k as u64, i as u64]));
                    let a = psi.measure(k, i);
                    let b = mu.measure(k, i);
                    let mut samples = Vec::with_capacity(n * a.dim());
                    resample(a, from_psi, uniform01(&mut rng), &mut samples);
                    resample(b, n - from_psi, uniform01(&mut rng), &mut samples);
                    EmpiricalMeasure::from_flat(a.dim(), samples, None)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    MeasureFlow::new(mu.grid().clone(), rows)
}

/// Monte Carlo norms of the discretized system along a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationResidual {
    /// Max over steps of the weighted RMS of
    /// `X_{k+1} - X_k - (h + b) dt - sigma dW`.
    pub forward: f64,
    /// Max over steps of the weighted RMS of `Y_{k+1} - Y_k + f dt - Z dW`.
    pub backward: f64,
    /// Max over particles of `|Y_T - g(X_T, mu_T)|`.
    pub terminal_gap: f64,
    /// Distance between the flow and the weighted law of the state, per grid
    /// point.
    pub marginal_gap_profile: Vec<f64>,
    pub marginal_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub populations: Vec<PopulationResidual>,
}

impl ResidualReport {
    pub fn max_forward(&self) -> f64 {
        self.populations.iter().map(|p| p.forward).fold(0.0, f64::max)
    }

    pub fn max_backward(&self) -> f64 {
        self.populations.iter().map(|p| p.backward).fold(0.0, f64::max)
    }

    pub fn max_terminal_gap(&self) -> f64 {
        self.populations.iter().map(|p| p.terminal_gap).fold(0.0, f64::max)
    }

    pub fn max_marginal_gap(&self) -> f64 {
        self.populations.iter().map(|p| p.marginal_gap).fold(0.0, f64::max)
    }
}

fn weighted_rms(values: &[f64], width: usize, weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let acc: f64 = values
        .chunks(width)
        .zip(weights)
        .map(|(r, w)| w * r.iter().map(|v| v * v).sum::<f64>())
        .sum();
    (acc / total).sqrt()
}

pub fn residual_check(
    system: &PopulationSystem,
    flow: &MeasureFlow,
    solutions: &[FbsdeSolution],
) -> Result<ResidualReport> {
    check_flow(system, flow)?;
    if solutions.len() != system.populations() {
        return Err(Error::PopulationCountMismatch { left: system.populations(), right: solutions.len() });
    }
    let grid = flow.grid();
    let mut populations = Vec::with_capacity(solutions.len());
    for (i, sol) in solutions.iter().enumerate() {
        if sol.paths.grid() != grid {
            return Err(Error::GridMismatch);
        }
        let bundle = system.bundle(i);
        let dims = bundle.dims();
        let (m, n, d) = (dims.state, dims.backward, dims.noise);
        let np = sol.paths.n_particles();
        let mut forward = 0.0f64;
        let mut backward = 0.0f64;
        for k in 0..grid.n_steps() {
            let (t, dt) = (grid.time(k), grid.dt(k));
            let measures = flow.at(k);
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..np)
                .into_par_iter()
                .map(|p| {
                    let x = sol.paths.state(k, p);
                    let x1 = sol.paths.state(k + 1, p);
                    let dw = sol.paths.increment(k, p);
                    let y = &sol.y[k][p * n..(p + 1) * n];
                    let y1 = &sol.y[k + 1][p * n..(p + 1) * n];
                    let zs = &sol.z[k][p * n * d..(p + 1) * n * d];
                    let z = ZView::from_slice(zs, n, d);
                    let h = bundle.h(t, x);
                    let b = bundle.b(t, x, y, z, measures);
                    let sigma = bundle.sigma(t, x);
                    let fr: Vec<f64> = (0..m)
                        .map(|r| {
                            let noise: f64 = (0..d).map(|j| sigma[(r, j)] * dw[j]).sum();
                            x1[r] - x[r] - (h[r] + b[r]) * dt - noise
                        })
                        .collect();
                    let f = bundle.f(t, x, y, z, measures);
                    let br: Vec<f64> = (0..n)
                        .map(|r| {
                            let noise: f64 = (0..d).map(|j| z[(r, j)] * dw[j]).sum();
                            y1[r] - y[r] + f[r] * dt - noise
                        })
                        .collect();
                    (fr, br)
                })
                .collect();
            let (fr, br): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.into_iter().unzip();
            let w = sol.weights.weights_at(k);
            forward = forward.max(weighted_rms(&fr.concat(), m, w));
            backward = backward.max(weighted_rms(&br.concat(), n, w));
        }
        let big_k = grid.n_steps();
        let terminal_gap = (0..np)
            .into_par_iter()
            .map(|p| {
                let g = bundle.g(sol.paths.state(big_k, p), flow.at(big_k));
                g.iter()
                    .zip(&sol.y[big_k][p * n..(p + 1) * n])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .fold(0.0, f64::max);
        let profile = (0..grid.len())
            .map(|k| crate::measure_flow::wasserstein1(flow.measure(k, i), &sol.law_at(k)?))
            .collect::<Result<Vec<f64>>>()?;
        let marginal_gap = profile.iter().copied().fold(0.0, f64::max);
        populations.push(PopulationResidual {
            forward,
            backward,
            terminal_gap,
            marginal_gap_profile: profile,
            marginal_gap,
        });
    }
    Ok(ResidualReport { populations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointStatus {
    Converged,
    MaxIterExceeded,
}

/// History and diagnostics of one fixed-point run. The flows and solutions are
/// kept in memory only.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub status: FixedPointStatus,
    pub converged: bool,
    pub iterations: usize,
    pub rho_history: Vec<f64>,
    pub iterates: Vec<FlowSummary>,
    pub residual: ResidualReport,
    pub holder_modulus: f64,
    /// Seed of the final `psi` evaluation.
    pub final_seed: u64,
    #[serde(skip)]
    pub input_flow: MeasureFlow,
    /// `psi` of the last input flow.
    #[serde(skip)]
    pub final_flow: MeasureFlow,
    #[serde(skip)]
    pub solutions: Vec<FbsdeSolution>,
}

/// Seed of `psi` at iteration `it`.
pub fn iteration_seed(seed: u64, it: usize) -> u64 {
    derive_seed(seed, &[it as u64])
}

/// Damped Picard iteration `mu_{k+1} = mix(mu_k, psi(mu_k))`, stopping when
/// `rho(mu_k, psi(mu_k)) <= tol`. Each `psi` call uses a fresh derived seed.
pub fn iterate(system: &PopulationSystem, mu0: &MeasureFlow, config: &PsiConfig) -> Result<FixedPointReport> {
    config.validate()?;
    check_flow(system, mu0)?;
    let mut mu = mu0.clone();
    let mut rho_history = Vec::new();
    let mut iterates = Vec::new();
    for it in 0..config.max_iter {
        let seed = iteration_seed(config.seed, it);
        let step_config = PsiConfig { seed, ..config.clone() };
        let (psi, solutions) = psi_map_with_solutions(system, &mu, &step_config)?;
        let rho = flow_distance(&mu, &psi)?;
        rho_history.push(rho);
        iterates.push(psi.summary());
        let done = rho <= config.tol;
        if done || it + 1 == config.max_iter {
            let residual = residual_check(system, &mu, &solutions)?;
            let holder = holder_modulus(&psi)?;
            let status = if done { FixedPointStatus::Converged } else { FixedPointStatus::MaxIterExceeded };
            return Ok(FixedPointReport {
                status,
                converged: done,
                iterations: it + 1,
                rho_history,
                iterates,
                residual,
                holder_modulus: holder,
                final_seed: seed,
                input_flow: mu,
                final_flow: psi,
                solutions,
            });
        }
        mu = mix_flows(&mu, &psi, config.damping, config.n_particles, derive_seed(seed, &[MIX_TAG]))?;
    }
    unreachable!("max_iter >= 1 is validated")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterVerdict {
    UniqueCandidate,
    MultipleFixedPoints,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiStartReport {
    pub reports: Vec<FixedPointReport>,
    /// Pairwise flow distance between final flows.
    pub distances: Vec<Vec<f64>>,
    /// Clusters of converged runs, as run indices.
    pub clusters: Vec<Vec<usize>>,
    pub threshold: f64,
    pub verdict: ClusterVerdict,
}

/// Single-linkage clusters of `members` with distance `<= threshold`.
pub fn cluster_indices(distances: &[Vec<f64>], members: &[usize], threshold: f64) -> Vec<Vec<usize>> {
    let mut label: Vec<Option<usize>> = vec![None; distances.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &start in members {
        if label[start].is_some() {
            continue;
        }
        let id = clusters.len();
        let mut stack = vec![start];
        let mut cluster = Vec::new();
        label[start] = Some(id);
        while let Some(a) = stack.pop() {
            cluster.push(a);
            for &b in members {
                if label[b].is_none() && distances[a][b] <= threshold {
                    label[b] = Some(id);
                    stack.push(b);
                }
            }
        }
        cluster.sort_unstable();
        clusters.push(cluster);
    }
    clusters
}

/// Runs [`iterate`] from every initial flow with the same configuration and
/// clusters the converged limits at `3 * tol`. The reports keep their flows but
/// not their particle-level `solutions`.
pub fn multi_start(system: &PopulationSystem, inits: &[MeasureFlow], config: &PsiConfig) -> Result<MultiStartReport> {
    if inits.len() < 2 {
        return Err(Error::InvalidArgument("multi-start needs at least two initial flows".into()));
    }
    // Particle-level solutions are dropped; clustering only needs the flows.
    let reports = inits
        .par_iter()
        .map(|mu0| {
            iterate(system, mu0, config).map(|mut report| {
                report.solutions = Vec::new();
                report
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = reports.len();
    let mut distances = vec![vec![0.0; r]; r];
    for a in 0..r {
        for b in a + 1..r {
            let dist = flow_distance(&reports[a].final_flow, &reports[b].final_flow)?;
            distances[a][b] = dist;
            distances[b][a] = dist;
        }
    }
    let threshold = 3.0 * config.tol;
    let converged: Vec<usize> = (0..r).filter(|&i| reports[i].converged).collect();
    let clusters = cluster_indices(&distances, &converged, threshold);
    let verdict = match (converged.len(), clusters.len()) {
        (_, c) if c >= 2 => ClusterVerdict::MultipleFixedPoints,
        (k, 1) if k == r => ClusterVerdict::UniqueCandidate,
        _ => ClusterVerdict::Inconclusive,
    };
    Ok(MultiStartReport { reports, distances, clusters, threshold, verdict })
}

/// Distance profile between two flows, re-exported for reports.
pub fn rho_profile(a: &MeasureFlow, b: &MeasureFlow) -> Result<Vec<f64>> {
    flow_distance_profile(a, b)
}

/// Product distance at one grid point, re-exported for reports.
pub fn k_distance(a: &[EmpiricalMeasure], b: &[EmpiricalMeasure]) -> Result<f64> {
    product_distance(a, b)
}
