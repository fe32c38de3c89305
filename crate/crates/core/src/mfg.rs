//! Multi-population mean-field games: Hamiltonians, pointwise control
//! optimization, the Pontryagin adjoint system, cost estimation and Nash
//! verification by unilateral deviations.
//!
//! The Hamiltonian of a player is `H(t, x, y, m, a) = (h + b)(t, x, m, a) . y +
//! f(t, x, m, a)`. The adjoint is `dY = -dH/dx dt + Z dW`, `Y_T = dg/dx`, and the
//! equilibrium feedback minimizes `H` over the control box.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward_lsmc::{fit_step, RegressionBasis, StepFit};
use crate::coefficients::{CoefficientBundle, DeclaredConstants, Diffusion, Dims, PopulationSystem, StateFn};
use crate::error::{Error, Result};
use crate::forward_sde::simulate_feedback;
use crate::io::fmt_float;
use crate::measure_flow::{EmpiricalMeasure, MeasureFlow, TimeGrid};
use crate::picard::{iterate, FbsdeSolution, FixedPointReport, PsiConfig};
use crate::rng::{derive_seed, standard_normal, uniform01, uniform_rng};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
const NEWTON_TOL: f64 = 1e-8;
const NEWTON_CAP: usize = 100;
const POLISH_CAP: usize = 100;
const COST_TAG: u64 = 0xc057;
const DEVIATION_TAG: u64 = 0xde71;

/// `b(t, x, m, a)`.
pub type ControlledDriftFn = Arc<dyn Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> Vec<f64> + Send + Sync>;
/// `f(t, x, m, a)`.
pub type RunningCostFn = Arc<dyn Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> f64 + Send + Sync>;
/// `g(x, m)`.
pub type TerminalCostFn = Arc<dyn Fn(&[f64], &[EmpiricalMeasure]) -> f64 + Send + Sync>;
/// Jacobian of `h` in `x`, `m x m`.
pub type StateJacobianFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;
/// Jacobian of `b` in `x` (`m x m`) or in `a` (`m x k`).
pub type DriftJacobianFn = Arc<dyn Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> DMatrix<f64> + Send + Sync>;
/// Gradient of `f` in `x` or `a`.
pub type CostGradientFn = Arc<dyn Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> Vec<f64> + Send + Sync>;
/// Gradient of `g` in `x`.
pub type TerminalGradientFn = Arc<dyn Fn(&[f64], &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync>;
/// Closed-form `argmin_a H(t, x, y, m, a)`.
pub type MinimizerFn = Arc<dyn Fn(f64, &[f64], &[f64], &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync>;

/// Compact box `[lower, upper]` of admissible controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidArgument("control bounds must be non-empty and of equal length".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidArgument(format!("invalid control bounds [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim() && a.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| lo <= v && v <= hi)
    }

    pub fn project(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.lower).zip(&self.upper).map(|((v, lo), hi)| v.clamp(*lo, *hi)).collect()
    }

    fn check(&self, a: &[f64]) -> Result<()> {
        if self.contains(a) {
            Ok(())
        } else {
            Err(Error::ControlOutOfSet(a.to_vec()))
        }
    }
}

/// Optional analytic derivatives. Missing entries fall back to central
/// differences when the player allows it.
#[derive(Clone, Default)]
pub struct GradientHooks {
    pub h_x: Option<StateJacobianFn>,
    pub b_x: Option<DriftJacobianFn>,
    pub b_a: Option<DriftJacobianFn>,
    pub f_x: Option<CostGradientFn>,
    pub f_a: Option<CostGradientFn>,
    pub g_x: Option<TerminalGradientFn>,
}

/// Data of one representative player.
#[derive(Clone)]
pub struct PlayerSpec {
    name: String,
    state_dim: usize,
    noise_dim: usize,
    initial_point: Vec<f64>,
    controls: ControlSet,
    h: StateFn,
    b: ControlledDriftFn,
    sigma: Diffusion,
    f: RunningCostFn,
    g: TerminalCostFn,
    hooks: GradientHooks,
    minimizer: Option<MinimizerFn>,
    fd_step: Option<f64>,
    constants: DeclaredConstants,
}

impl fmt::Debug for PlayerSpec {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("PlayerSpec")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("initial_point", &self.initial_point)
            .field("controls", &self.controls)
            .field("fd_step", &self.fd_step)
            .finish_non_exhaustive()
    }
}

pub struct PlayerBuilder {
    spec: PlayerSpec,
    sigma_set: bool,
}

impl PlayerBuilder {
    pub fn initial_point(mut self, x0: Vec<f64>) -> Self {
        self.spec.initial_point = x0;
        self
    }

    pub fn h(mut self, h: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.spec.h = Arc::new(h);
        self
    }

    pub fn b(mut self, b: impl Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.spec.b = Arc::new(b);
        self
    }

    pub fn sigma(mut self, sigma: Diffusion) -> Self {
        self.spec.sigma = sigma;
        self.sigma_set = true;
        self
    }

    pub fn f(mut self, f: impl Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.f = Arc::new(f);
        self
    }

    pub fn g(mut self, g: impl Fn(&[f64], &[EmpiricalMeasure]) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.g = Arc::new(g);
        self
    }

    pub fn h_x(mut self, hook: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.spec.hooks.h_x = Some(Arc::new(hook));
        self
    }

    pub fn b_x(
        mut self,
        hook: impl Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.hooks.b_x = Some(Arc::new(hook));
        self
    }

    pub fn b_a(
        mut self,
        hook: impl Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.hooks.b_a = Some(Arc::new(hook));
        self
    }

    pub fn f_x(
        mut self,
        hook: impl Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.hooks.f_x = Some(Arc::new(hook));
        self
    }

    pub fn f_a(
        mut self,
        hook: impl Fn(f64, &[f64], &[EmpiricalMeasure], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.hooks.f_a = Some(Arc::new(hook));
        self
    }

    pub fn g_x(mut self, hook: impl Fn(&[f64], &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.spec.hooks.g_x = Some(Arc::new(hook));
        self
    }

    pub fn minimizer(
        mut self,
        hook: impl Fn(f64, &[f64], &[f64], &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.spec.minimizer = Some(Arc::new(hook));
        self
    }

    /// Finite-difference step for missing derivatives; `None` disables the
    /// fallback.
    pub fn fd_step(mut self, step: Option<f64>) -> Self {
        self.spec.fd_step = step;
        self
    }

    pub fn constants(mut self, constants: DeclaredConstants) -> Self {
        self.spec.constants = constants;
        self
    }

    pub fn build(self) -> Result<PlayerSpec> {
        let s = self.spec;
        if s.state_dim == 0 || s.noise_dim == 0 {
            return Err(Error::InvalidArgument("zero state or noise dimension".into()));
        }
        if s.initial_point.len() != s.state_dim {
            return Err(Error::DimensionMismatch { expected: s.state_dim, got: s.initial_point.len() });
        }
        if !self.sigma_set && s.state_dim != s.noise_dim {
            return Err(Error::InvalidArgument("sigma is required when state and noise dimensions differ".into()));
        }
        if let Some(step) = s.fd_step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::InvalidArgument(format!("finite-difference step {step} must be positive")));
            }
        }
        Ok(s)
    }
}

impl PlayerSpec {
    /// Builder with zero `h, b, f, g`, identity `sigma` and the default
    /// finite-difference step.
    pub fn builder(name: impl Into<String>, state_dim: usize, noise_dim: usize, controls: ControlSet) -> PlayerBuilder {
        let m = state_dim;
        PlayerBuilder {
            spec: PlayerSpec {
                name: name.into(),
                state_dim,
                noise_dim,
                initial_point: vec![0.0; m],
                controls,
                h: Arc::new(move |_, _| vec![0.0; m]),
                b: Arc::new(move |_, _, _, _| vec![0.0; m]),
                sigma: Diffusion::constant(DMatrix::identity(m, noise_dim)),
                f: Arc::new(|_, _, _, _| 0.0),
                g: Arc::new(|_, _| 0.0),
                hooks: GradientHooks::default(),
                minimizer: None,
                fd_step: Some(DEFAULT_FD_STEP),
                constants: DeclaredConstants::default(),
            },
            sigma_set: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn initial_point(&self) -> &[f64] {
        &self.initial_point
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.sigma
    }

    pub fn drift(&self, t: f64, x: &[f64], m: &[EmpiricalMeasure], a: &[f64]) -> Vec<f64> {
        (self.b)(t, x, m, a)
    }

    pub fn running_cost(&self, t: f64, x: &[f64], m: &[EmpiricalMeasure], a: &[f64]) -> f64 {
        (self.f)(t, x, m, a)
    }

    pub fn terminal_cost(&self, x: &[f64], m: &[EmpiricalMeasure]) -> f64 {
        (self.g)(x, m)
    }

    fn step(&self, which: &'static str, population: usize) -> Result<f64> {
        self.fd_step.ok_or(Error::MissingGradient { population, which })
    }

    fn hamiltonian_unchecked(&self, t: f64, x: &[f64], y: &[f64], m: &[EmpiricalMeasure], a: &[f64]) -> f64 {
        let h = (self.h)(t, x);
        let b = (self.b)(t, x, m, a);
        h.iter().zip(&b).zip(y).map(|((h, b), y)| (h + b) * y).sum::<f64>() + (self.f)(t, x, m, a)
    }

    /// Checks that every derivative needed by the adjoint system and the
    /// minimizer is available.
    fn check_gradients(&self, population: usize) -> Result<()> {
        let hooks = &self.hooks;
        let needed = [
            ("h_x", hooks.h_x.is_some()),
            ("b_x", hooks.b_x.is_some()),
            ("f_x", hooks.f_x.is_some()),
            ("g_x", hooks.g_x.is_some()),
            ("b_a", hooks.b_a.is_some() || self.minimizer.is_some()),
            ("f_a", hooks.f_a.is_some() || self.minimizer.is_some()),
        ];
        for (which, present) in needed {
            if !present {
                self.step(which, population)?;
            }
        }
        Ok(())
    }

    /// `dH/da` at `a`.
    fn control_gradient(
        &self,
        population: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        m: &[EmpiricalMeasure],
        a: &[f64],
    ) -> Result<Vec<f64>> {
        let k = a.len();
        let mut grad = match &self.hooks.b_a {
            Some(hook) => {
                let jac = hook(t, x, m, a);
                (0..k).map(|c| (0..self.state_dim).map(|r| jac[(r, c)] * y[r]).sum()).collect()
            }
            None => {
                let step = self.step("b_a", population)?;
                central_difference(a, step, |ap| dot(&(self.b)(t, x, m, ap), y))
            }
        };
        let fa = match &self.hooks.f_a {
            Some(hook) => hook(t, x, m, a),
            None => {
                let step = self.step("f_a", population)?;
                central_difference(a, step, |ap| (self.f)(t, x, m, ap))
            }
        };
        for (g, f) in grad.iter_mut().zip(fa) {
            *g += f;
        }
        Ok(grad)
    }

    /// `dH/dx` at `(t, x, y, m, a)`.
    fn state_gradient(
        &self,
        population: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        m: &[EmpiricalMeasure],
        a: &[f64],
    ) -> Result<Vec<f64>> {
        let dim = self.state_dim;
        let transpose_times = |jac: DMatrix<f64>| -> Vec<f64> {
            (0..dim).map(|c| (0..dim).map(|r| jac[(r, c)] * y[r]).sum()).collect()
        };
        let hx = match &self.hooks.h_x {
            Some(hook) => transpose_times(hook(t, x)),
            None => {
                let step = self.step("h_x", population)?;
                central_difference(x, step, |xp| dot(&(self.h)(t, xp), y))
            }
        };
        let bx = match &self.hooks.b_x {
            Some(hook) => transpose_times(hook(t, x, m, a)),
            None => {
                let step = self.step("b_x", population)?;
                central_difference(x, step, |xp| dot(&(self.b)(t, xp, m, a), y))
            }
        };
        let fx = match &self.hooks.f_x {
            Some(hook) => hook(t, x, m, a),
            None => {
                let step = self.step("f_x", population)?;
                central_difference(x, step, |xp| (self.f)(t, xp, m, a))
            }
        };
        Ok((0..dim).map(|c| hx[c] + bx[c] + fx[c]).collect())
    }

    fn terminal_gradient(&self, population: usize, x: &[f64], m: &[EmpiricalMeasure]) -> Result<Vec<f64>> {
        match &self.hooks.g_x {
            Some(hook) => Ok(hook(x, m)),
            None => {
                let step = self.step("g_x", population)?;
                Ok(central_difference(x, step, |xp| (self.g)(xp, m)))
            }
        }
    }

    /// Projected Newton on `a -> H`. Returns the iterate and its projected
    /// gradient norm.
    fn minimize(
        &self,
        population: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        m: &[EmpiricalMeasure],
    ) -> Result<(Vec<f64>, f64)> {
        let set = &self.controls;
        if let Some(hook) = &self.minimizer {
            return Ok((set.project(&hook(t, x, y, m)), 0.0));
        }
        let k = set.dim();
        let hess_step = self.fd_step.unwrap_or(DEFAULT_FD_STEP);
        let objective = |a: &[f64]| self.hamiltonian_unchecked(t, x, y, m, a);
        let mut a = set.project(&vec![0.0; k]);
        let mut norm = f64::INFINITY;
        for _ in 0..NEWTON_CAP {
            let grad = self.control_gradient(population, t, x, y, m, &a)?;
            let trial: Vec<f64> = a.iter().zip(&grad).map(|(v, g)| v - g).collect();
            norm = norm2(&a.iter().zip(set.project(&trial)).map(|(v, p)| v - p).collect::<Vec<_>>());
            if norm <= NEWTON_TOL {
                break;
            }
            let free: Vec<usize> = (0..k)
                .filter(|&c| !(a[c] <= set.lower[c] && grad[c] > 0.0) && !(a[c] >= set.upper[c] && grad[c] < 0.0))
                .collect();
            let mut direction = vec![0.0; k];
            let mut newton_ok = false;
            if !free.is_empty() {
                let nf = free.len();
                let mut hess = DMatrix::zeros(nf, nf);
                for (j, &c) in free.iter().enumerate() {
                    let mut up = a.clone();
                    let mut down = a.clone();
                    up[c] += hess_step;
                    down[c] -= hess_step;
                    let gu = self.control_gradient(population, t, x, y, m, &up)?;
                    let gd = self.control_gradient(population, t, x, y, m, &down)?;
                    for (i, &r) in free.iter().enumerate() {
                        hess[(i, j)] = (gu[r] - gd[r]) / (2.0 * hess_step);
                    }
                }
                let hess = (&hess + hess.transpose()) * 0.5;
                let rhs = DVector::from_iterator(nf, free.iter().map(|&c| grad[c]));
                if let Some(chol) = hess.cholesky() {
                    let step = chol.solve(&rhs);
                    for (i, &c) in free.iter().enumerate() {
                        direction[c] = step[i];
                    }
                    newton_ok = dot(&direction, &grad) > 0.0;
                }
            }
            if !newton_ok {
                direction = grad.clone();
            }
            let current = objective(&a);
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = set.project(&a.iter().zip(&direction).map(|(v, d)| v - scale * d).collect::<Vec<_>>());
                let moved: Vec<f64> = a.iter().zip(&cand).map(|(v, c)| v - c).collect();
                if objective(&cand) <= current - 1e-4 * dot(&grad, &moved) {
                    accepted = Some(cand);
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some(cand) if cand != a => a = cand,
                _ => break,
            }
        }
        Ok((a, norm))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn central_difference(at: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|c| {
            probe[c] = at[c] + step;
            let up = f(&probe);
            probe[c] = at[c] - step;
            let down = f(&probe);
            probe[c] = at[c];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Populations of a game.
#[derive(Debug, Clone)]
pub struct GameSpec {
    players: Vec<PlayerSpec>,
}

impl GameSpec {
    pub fn new(players: Vec<PlayerSpec>) -> Result<Self> {
        let first = players.first().ok_or_else(|| Error::InvalidArgument("a game needs at least one player".into()))?;
        for p in &players {
            if p.state_dim != first.state_dim {
                return Err(Error::DimensionMismatch { expected: first.state_dim, got: p.state_dim });
            }
        }
        Ok(Self { players })
    }

    pub fn players(&self) -> &[PlayerSpec] {
        &self.players
    }

    pub fn player(&self, population: usize) -> Result<&PlayerSpec> {
        self.players.get(population).ok_or(Error::IndexOutOfRange { index: population, len: self.players.len() })
    }

    pub fn populations(&self) -> usize {
        self.players.len()
    }

    /// `(h + b) . y + f` at an admissible control.
    pub fn hamiltonian(
        &self,
        population: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        m: &[EmpiricalMeasure],
        a: &[f64],
    ) -> Result<f64> {
        let p = self.player(population)?;
        p.controls.check(a)?;
        Ok(p.hamiltonian_unchecked(t, x, y, m, a))
    }

    /// `argmin_{a in A} H(t, x, y, m, a)`, from the closed-form hook when
    /// present and by projected Newton otherwise.
    pub fn minimize_hamiltonian(
        &self,
        population: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        m: &[EmpiricalMeasure],
    ) -> Result<Vec<f64>> {
        let (a, residual) = self.player(population)?.minimize(population, t, x, y, m)?;
        if residual > NEWTON_TOL {
            return Err(Error::NonConvergence { residual });
        }
        Ok(a)
    }

    /// `sup_a f + z . b~` over the control box: tensor grid search followed by
    /// a projected gradient polish. Ties keep the lexicographically smallest
    /// grid point.
    #[allow(clippy::too_many_arguments)]
    pub fn maximize_shifted_driver(
        &self,
        population: usize,
        t: f64,
        x: &[f64],
        m: &[EmpiricalMeasure],
        z: &[f64],
        resolution: usize,
    ) -> Result<(Vec<f64>, f64)> {
        let p = self.player(population)?;
        let bundle_reduce = |a: &[f64]| -> Result<f64> {
            let b = (p.b)(t, x, m, a);
            let sigma = p.sigma.eval(t, x);
            let reduced = crate::coefficients::reduce_with(&sigma, &b, p.constants.ellipticity_eps, t)?;
            Ok((p.f)(t, x, m, a) + dot(z, &reduced))
        };
        // Surface a singular diffusion before searching.
        bundle_reduce(&p.controls.project(p.controls.lower()))?;
        maximize_over_box(&p.controls, resolution, |a| bundle_reduce(a).unwrap_or(f64::NEG_INFINITY))
    }

    /// The Pontryagin system: forward drift `b(t, x, m, a*)`, backward driver
    /// `dH/dx(t, x, y, m, a*)` and terminal value `dg/dx`, with
    /// `a* = argmin_a H(t, x, y, m, a)`.
    pub fn assemble_pontryagin(&self) -> Result<PopulationSystem> {
        let mut bundles = Vec::with_capacity(self.players.len());
        for (i, p) in self.players.iter().enumerate() {
            p.check_gradients(i)?;
            let dims = Dims { state: p.state_dim, noise: p.noise_dim, backward: p.state_dim };
            let (pb, pf, pg) = (Arc::new(p.clone()), Arc::new(p.clone()), Arc::new(p.clone()));
            let h = p.h.clone();
            let bundle = CoefficientBundle::builder(p.name.clone(), dims)
                .h(move |t, x| h(t, x))
                .b(move |t, x, y, _, m| {
                    let a = optimal_control(&pb, i, t, x, y, m);
                    (pb.b)(t, x, m, &a)
                })
                .f(move |t, x, y, _, m| {
                    let a = optimal_control(&pf, i, t, x, y, m);
                    pf.state_gradient(i, t, x, y, m, &a).expect("gradients checked at assembly")
                })
                .g(move |x, m| pg.terminal_gradient(i, x, m).expect("gradients checked at assembly"))
                .sigma(p.sigma.clone())
                .constants(p.constants)
                .build()?;
            bundles.push(bundle);
        }
        PopulationSystem::new(bundles, self.players.iter().map(|p| p.initial_point.clone()).collect())
    }
}

/// Best iterate of the minimizer; inside the assembled system a stalled Newton
/// run still yields an admissible control.
fn optimal_control(p: &PlayerSpec, population: usize, t: f64, x: &[f64], y: &[f64], m: &[EmpiricalMeasure]) -> Vec<f64> {
    p.minimize(population, t, x, y, m).expect("gradients checked at assembly").0
}

/// Maximizes `objective` over a box: exhaustive tensor grid with `resolution`
/// points per coordinate, then projected gradient ascent from the best point.
pub fn maximize_over_box(
    set: &ControlSet,
    resolution: usize,
    objective: impl Fn(&[f64]) -> f64,
) -> Result<(Vec<f64>, f64)> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let k = set.dim();
    let total = resolution
        .checked_pow(k as u32)
        .ok_or_else(|| Error::InvalidArgument("control grid too large".into()))?;
    let node = |c: usize, i: usize| {
        let (lo, hi) = (set.lower[c], set.upper[c]);
        if i + 1 == resolution {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut index = vec![0usize; k];
    for _ in 0..total {
        let a: Vec<f64> = index.iter().enumerate().map(|(c, &i)| node(c, i)).collect();
        let v = objective(&a);
        if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
            best = Some((a, v));
        }
        // Last coordinate varies fastest, so grid order is lexicographic.
        for c in (0..k).rev() {
            index[c] += 1;
            if index[c] < resolution {
                break;
            }
            index[c] = 0;
        }
    }
    let (mut a, mut value) = best.expect("grid is non-empty");
    let spacing: f64 =
        (0..k).map(|c| (set.upper[c] - set.lower[c]) / (resolution - 1) as f64).fold(0.0, f64::max);
    let h = 1e-7 * (1.0 + spacing);
    let mut rate = spacing.max(1e-12);
    for _ in 0..POLISH_CAP {
        let grad = central_difference(&a, h, &objective);
        if norm2(&grad) == 0.0 {
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let cand = set.project(&a.iter().zip(&grad).map(|(v, g)| v + rate * g).collect::<Vec<_>>());
            let cv = objective(&cand);
            if cv > value {
                a = cand;
                value = cv;
                improved = true;
                rate *= 2.0;
                break;
            }
            rate *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((a, value))
}

/// Feedback control per grid step, evaluated as a regression surrogate or a
/// constant and always projected into the control box.
#[derive(Debug, Clone)]
pub struct ControlTable {
    grid: TimeGrid,
    controls: ControlSet,
    surrogate: Surrogate,
}

#[derive(Debug, Clone)]
enum Surrogate {
    Fitted { basis: RegressionBasis, fits: Vec<StepFit> },
    Constant(Vec<f64>),
}

impl ControlTable {
    /// Regresses `a*(t_k, X_k, Y_k, m_k)` on the state at every step before the
    /// horizon.
    pub fn fit(
        game: &GameSpec,
        population: usize,
        solution: &FbsdeSolution,
        flow: &MeasureFlow,
        basis: &RegressionBasis,
    ) -> Result<Self> {
        let p = game.player(population)?;
        let grid = flow.grid();
        if solution.paths.grid() != grid {
            return Err(Error::GridMismatch);
        }
        let (m, n, k) = (p.state_dim, p.state_dim, p.controls.dim());
        let fits = (0..grid.n_steps())
            .map(|step| {
                let t = grid.time(step);
                let states = solution.paths.states_at(step);
                let ys = &solution.y[step];
                let measures = flow.at(step);
                let targets: Vec<f64> = (0..solution.paths.n_particles())
                    .into_par_iter()
                    .flat_map_iter(|q| {
                        optimal_control(p, population, t, &states[q * m..(q + 1) * m], &ys[q * n..(q + 1) * n], measures)
                    })
                    .collect();
                fit_step(basis, states, &targets, k, step, step == 0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.clone(),
            controls: p.controls.clone(),
            surrogate: Surrogate::Fitted { basis: basis.clone(), fits },
        })
    }

    pub fn constant(grid: TimeGrid, controls: ControlSet, value: Vec<f64>) -> Result<Self> {
        controls.check(&value)?;
        Ok(Self { grid, controls, surrogate: Surrogate::Constant(value) })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    /// Control at step `k < K`; the last step's table is reused at the
    /// horizon.
    pub fn eval(&self, k: usize, x: &[f64]) -> Vec<f64> {
        match &self.surrogate {
            Surrogate::Constant(v) => v.clone(),
            Surrogate::Fitted { basis, fits } => {
                let fit = &fits[k.min(fits.len() - 1)];
                self.controls.project(&fit.eval(basis, x))
            }
        }
    }

    /// Rows `time, x_0.., control_0..` at every step before the horizon and
    /// every point of `points`.
    pub fn write_csv<W: Write>(&self, mut out: W, points: &[Vec<f64>]) -> std::io::Result<()> {
        let m = points.first().map_or(0, Vec::len);
        let k = self.controls.dim();
        let mut header = vec!["time".to_string()];
        header.extend((0..m).map(|c| format!("x_{c}")));
        header.extend((0..k).map(|c| format!("control_{c}")));
        writeln!(out, "{}", header.join(","))?;
        for step in 0..self.grid.n_steps() {
            for x in points {
                let mut row = vec![fmt_float(self.grid.time(step))];
                row.extend(x.iter().map(|v| fmt_float(*v)));
                row.extend(self.eval(step, x).iter().map(|v| fmt_float(*v)));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Monte Carlo estimate of a player's cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_particles: usize,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl CostEstimate {
    fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_error: (var / n as f64).sqrt(), n_particles: n, samples }
    }
}

/// Cost of `control(k, x)` against the frozen flow: the controlled state is
/// simulated and `sum f dt + g` is averaged with left-endpoint quadrature.
pub fn estimate_cost<C>(
    game: &GameSpec,
    population: usize,
    control: C,
    flow: &MeasureFlow,
    n_particles: usize,
    seed: u64,
) -> Result<CostEstimate>
where
    C: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    let p = game.player(population)?;
    if flow.populations() != game.populations() {
        return Err(Error::PopulationCountMismatch { left: game.populations(), right: flow.populations() });
    }
    let grid = flow.grid();
    let (m, d, k) = (p.state_dim, p.noise_dim, p.controls.dim());
    // The control travels through the adjoint slot of a plain bundle.
    let drift = p.b.clone();
    let h = p.h.clone();
    let controlled = CoefficientBundle::builder(p.name.clone(), Dims { state: m, noise: d, backward: k })
        .h(move |t, x| h(t, x))
        .b(move |t, x, a, _, mm| drift(t, x, mm, a))
        .sigma(p.sigma.clone())
        .build()?;
    let zeros = vec![0.0; k * d];
    let paths = simulate_feedback(
        &controlled,
        &p.initial_point,
        grid,
        n_particles,
        seed,
        |step, x| control(step, x),
        |_, _| zeros.clone(),
        flow,
    )?;
    let big_k = grid.n_steps();
    let samples: Vec<Result<f64>> = (0..n_particles)
        .into_par_iter()
        .map(|q| {
            let mut total = 0.0;
            for step in 0..big_k {
                let x = paths.state(step, q);
                let a = control(step, x);
                p.controls.check(&a)?;
                total += (p.f)(grid.time(step), x, flow.at(step), &a) * grid.dt(step);
            }
            Ok(total + (p.g)(paths.state(big_k, q), flow.at(big_k)))
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    if let Some(q) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { particle: q, step: big_k });
    }
    Ok(CostEstimate::from_samples(samples))
}

/// Fixed-point run of the Pontryagin system with its feedback tables and
/// costs. The flow the adjoint was solved against is kept frozen for cost
/// estimates and verification.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumResult {
    pub report: FixedPointReport,
    pub costs: Vec<CostEstimate>,
    pub config: PsiConfig,
    #[serde(skip)]
    pub controls: Vec<ControlTable>,
    #[serde(skip)]
    pub flow: MeasureFlow,
}

fn cost_seed(seed: u64, population: usize) -> u64 {
    derive_seed(seed, &[COST_TAG, population as u64])
}

pub fn solve_equilibrium(game: &GameSpec, mu0: &MeasureFlow, config: &PsiConfig) -> Result<EquilibriumResult> {
    let system = game.assemble_pontryagin()?;
    let report = iterate(&system, mu0, config)?;
    let flow = report.input_flow.clone();
    let basis = config.basis(system.dims().state)?;
    let controls = (0..game.populations())
        .map(|i| ControlTable::fit(game, i, &report.solutions[i], &flow, &basis))
        .collect::<Result<Vec<_>>>()?;
    let costs = controls
        .iter()
        .enumerate()
        .map(|(i, table)| {
            estimate_cost(game, i, |k, x| table.eval(k, x), &flow, config.n_particles, cost_seed(config.seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EquilibriumResult { report, costs, config: config.clone(), controls, flow })
}

/// Smooth time bump times a unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub center: f64,
    pub width: f64,
    pub direction: Vec<f64>,
    pub magnitude: f64,
}

impl Deviation {
    pub fn bump(&self, t: f64) -> f64 {
        let s = (t - self.center) / self.width;
        if s.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - s * s)).exp()
        }
    }

    fn draw(horizon: f64, k: usize, magnitude: f64, seed: u64) -> Self {
        let mut rng = uniform_rng(seed);
        let center = horizon * uniform01(&mut rng);
        let width = horizon * (0.25 + 0.25 * uniform01(&mut rng));
        let mut direction: Vec<f64> = (0..k).map(|_| standard_normal(&mut rng)).collect();
        let norm = norm2(&direction);
        direction.iter_mut().for_each(|v| *v /= norm);
        Self { center, width, direction, magnitude }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationOutcome {
    pub deviation: Deviation,
    /// Mean of `J(deviation) - J(reference)` over common random numbers.
    pub gap: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationVerification {
    pub reference_cost: CostEstimate,
    pub outcomes: Vec<DeviationOutcome>,
    /// Smallest gap over deviations; negative means some deviation was cheaper.
    pub worst_gap: f64,
    pub worst_std_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub populations: Vec<PopulationVerification>,
    pub passed: bool,
}

/// Unilateral deviation test. Each population's feedback is bumped by
/// `magnitude * bump(t) * direction`, projected into the box, and its cost is
/// re-estimated with the flow frozen and the same Brownian draws. A population
/// passes when no gap falls below `-3` standard errors.
pub fn verify_equilibrium(
    game: &GameSpec,
    result: &EquilibriumResult,
    n_perturbations: usize,
    magnitude: f64,
    seed: u64,
) -> Result<VerificationReport> {
    verify_controls(
        game,
        &result.flow,
        &result.controls,
        result.config.n_particles,
        n_perturbations,
        magnitude,
        seed,
    )
}

/// [`verify_equilibrium`] for arbitrary feedback tables against a frozen flow.
pub fn verify_controls(
    game: &GameSpec,
    flow: &MeasureFlow,
    controls: &[ControlTable],
    n: usize,
    n_perturbations: usize,
    magnitude: f64,
    seed: u64,
) -> Result<VerificationReport> {
    if controls.len() != game.populations() {
        return Err(Error::PopulationCountMismatch { left: game.populations(), right: controls.len() });
    }
    let grid = flow.grid();
    let mut populations = Vec::with_capacity(game.populations());
    for (i, table) in controls.iter().enumerate() {
        let p = game.player(i)?;
        let crn = cost_seed(seed, i);
        let reference = estimate_cost(game, i, |k, x| table.eval(k, x), flow, n, crn)?;
        let mut outcomes = Vec::with_capacity(n_perturbations);
        for j in 0..n_perturbations {
            let dev = Deviation::draw(
                grid.horizon(),
                p.controls.dim(),
                magnitude,
                derive_seed(seed, &[DEVIATION_TAG, i as u64, j as u64]),
            );
            let cost = estimate_cost(
                game,
                i,
                |k, x| {
                    let shift = dev.magnitude * dev.bump(grid.time(k));
                    let base = table.eval(k, x);
                    p.controls.project(&base.iter().zip(&dev.direction).map(|(a, d)| a + shift * d).collect::<Vec<_>>())
                },
                flow,
                n,
                crn,
            )?;
            let diffs: Vec<f64> = cost.samples.iter().zip(&reference.samples).map(|(a, b)| a - b).collect();
            let diff = CostEstimate::from_samples(diffs);
            outcomes.push(DeviationOutcome { deviation: dev, gap: diff.mean, std_error: diff.std_error });
        }
        let worst = outcomes.iter().min_by(|a, b| a.gap.total_cmp(&b.gap));
        let (worst_gap, worst_std_error) = worst.map_or((0.0, 0.0), |o| (o.gap, o.std_error));
        let passed = outcomes.iter().all(|o| o.gap + 3.0 * o.std_error >= 0.0);
        populations.push(PopulationVerification { reference_cost: reference, outcomes, worst_gap, worst_std_error, passed });
    }
    let passed = populations.iter().all(|p| p.passed);
    Ok(VerificationReport { populations, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::ZView;

    fn interval(lo: f64, hi: f64) -> ControlSet {
        ControlSet::interval(lo, hi).unwrap()
    }

    /// Drift `-a`, cost `a^2`; the example Hamiltonian `-a y + a^2`.
    fn pushed_player(hooks: bool) -> PlayerSpec {
        let builder = PlayerSpec::builder("pushed", 1, 1, interval(0.0, 10.0))
            .b(|_, _, _, a| vec![-a[0]])
            .f(|_, _, _, a| a[0] * a[0]);
        let builder = if hooks {
            builder
                .b_a(|_, _, _, _| DMatrix::from_element(1, 1, -1.0))
                .f_a(|_, _, _, a| vec![2.0 * a[0]])
        } else {
            builder
        };
        builder.build().unwrap()
    }

    fn single(p: PlayerSpec) -> GameSpec {
        GameSpec::new(vec![p]).unwrap()
    }

    fn dirac0() -> Vec<EmpiricalMeasure> {
        vec![EmpiricalMeasure::dirac(&[0.0]).unwrap()]
    }

    #[test]
    fn control_set_rules() {
        assert!(ControlSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(ControlSet::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(ControlSet::new(vec![], vec![]).is_err());
        let set = ControlSet::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(set.project(&[2.0, -3.0]), vec![1.0, -1.0]);
        assert!(set.contains(&[0.5, 0.0]));
        assert!(!set.contains(&[0.5]));
    }

    #[test]
    fn hamiltonian_values() {
        let game = single(pushed_player(true));
        let m = dirac0();
        let h = game.hamiltonian(0, 0.0, &[0.0], &[1.0], &m, &[0.3]).unwrap();
        assert!((h - (-0.3 + 0.09)).abs() < 1e-15);
        assert_eq!(game.hamiltonian(0, 0.0, &[0.0], &[1.0], &m, &[-0.1]), Err(Error::ControlOutOfSet(vec![-0.1])));
        let zero = single(PlayerSpec::builder("zero", 1, 1, interval(-1.0, 1.0)).build().unwrap());
        for a in [-1.0, 0.0, 0.7] {
            assert_eq!(zero.hamiltonian(0, 0.5, &[2.0], &[0.0], &m, &[a]).unwrap(), 0.0);
        }
        // Affine in y.
        let at = |y: f64| game.hamiltonian(0, 0.0, &[0.0], &[y], &m, &[0.3]).unwrap();
        assert!((at(2.0) - 2.0 * at(1.0) + at(0.0)).abs() < 1e-14);
    }

    #[test]
    fn minimizer_matches_closed_form() {
        let m = dirac0();
        for hooks in [true, false] {
            let game = single(pushed_player(hooks));
            let a = game.minimize_hamiltonian(0, 0.0, &[0.0], &[1.0], &m).unwrap();
            assert!((a[0] - 0.5).abs() < 1e-8, "{a:?}");
            let a = game.minimize_hamiltonian(0, 0.0, &[0.0], &[-2.0], &m).unwrap();
            assert_eq!(a, vec![0.0]);
        }
        let boxed = single(
            PlayerSpec::builder("box", 1, 1, interval(0.0, 1.0)).f(|_, _, _, a| (a[0] - 3.0).powi(2)).build().unwrap(),
        );
        assert_eq!(boxed.minimize_hamiltonian(0, 0.0, &[0.0], &[0.0], &m).unwrap(), vec![1.0]);
    }

    #[test]
    fn minimizer_hook_is_used_and_projected() {
        let p = PlayerSpec::builder("hooked", 1, 1, interval(0.0, 10.0))
            .minimizer(|_, _, y, _| vec![y[0].max(0.0) / 2.0])
            .fd_step(None)
            .build()
            .unwrap();
        let game = single(p);
        let m = dirac0();
        assert_eq!(game.minimize_hamiltonian(0, 0.0, &[0.0], &[1.0], &m).unwrap(), vec![0.5]);
        assert_eq!(game.minimize_hamiltonian(0, 0.0, &[0.0], &[50.0], &m).unwrap(), vec![10.0]);
    }

    #[test]
    fn minimizer_invariant_under_cost_shift() {
        let m = dirac0();
        let base = PlayerSpec::builder("q", 2, 2, ControlSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap())
            .b(|_, x, _, a| vec![a[0] + 0.5 * a[1], x[1] - a[1]])
            .f(|_, x, _, a| a[0] * a[0] + 2.0 * a[1] * a[1] + 0.3 * a[0] * a[1] + x[0]);
        let shifted = single(
            PlayerSpec::builder("q", 2, 2, ControlSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap())
                .b(|_, x, _, a| vec![a[0] + 0.5 * a[1], x[1] - a[1]])
                .f(|_, x, _, a| a[0] * a[0] + 2.0 * a[1] * a[1] + 0.3 * a[0] * a[1] + x[0] + 17.0)
                .build()
                .unwrap(),
        );
        let game = single(base.build().unwrap());
        let ys: [[f64; 2]; 4] = [[0.3, -0.2], [1.0, 1.0], [-3.0, 0.5], [5.0, -5.0]];
        for y in ys {
            let a = game.minimize_hamiltonian(0, 0.1, &[0.2, 0.4], &y, &m).unwrap();
            let b = shifted.minimize_hamiltonian(0, 0.1, &[0.2, 0.4], &y, &m).unwrap();
            assert!(norm2(&[a[0] - b[0], a[1] - b[1]]) <= 1e-8, "{a:?} {b:?}");
            assert!(game.player(0).unwrap().controls().contains(&a));
        }
    }

    #[test]
    fn interior_minimizer_satisfies_first_order_condition() {
        let m = dirac0();
        let game = single(pushed_player(false));
        for y in [0.1, 0.7, 3.3, 12.0] {
            let a = game.minimize_hamiltonian(0, 0.0, &[0.0], &[y], &m).unwrap();
            assert!(a[0] > 0.0 && a[0] < 10.0);
            let grad = central_difference(&a, 1e-6, |ap| {
                game.player(0).unwrap().hamiltonian_unchecked(0.0, &[0.0], &[y], &m, ap)
            });
            assert!(grad[0].abs() <= 1e-6, "y={y}: {grad:?}");
        }
    }

    #[test]
    fn unattained_infimum_reports_nonconvergence() {
        // Decreasing up to a jump at 1/3, so the infimum is never attained.
        let game = single(
            PlayerSpec::builder("jump", 1, 1, interval(0.0, 1.0))
                .f(|_, _, _, a| if a[0] < 1.0 / 3.0 { -a[0] } else { 1.0 })
                .build()
                .unwrap(),
        );
        let err = game.minimize_hamiltonian(0, 0.0, &[0.0], &[0.0], &dirac0()).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }), "{err:?}");
    }

    #[test]
    fn shifted_driver_maximization() {
        let m = dirac0();
        let flat = single(PlayerSpec::builder("flat", 1, 1, interval(-2.0, 3.0)).f(|_, _, _, _| 1.5).build().unwrap());
        assert_eq!(flat.maximize_shifted_driver(0, 0.0, &[0.0], &m, &[0.0], 11).unwrap(), (vec![-2.0], 1.5));

        let flat2 = single(
            PlayerSpec::builder("flat2", 1, 1, ControlSet::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap())
                .f(|_, _, _, _| 0.0)
                .build()
                .unwrap(),
        );
        assert_eq!(flat2.maximize_shifted_driver(0, 0.0, &[0.0], &m, &[0.0], 5).unwrap().0, vec![0.0, -1.0]);

        let concave = single(
            PlayerSpec::builder("concave", 1, 1, interval(0.0, 1.0))
                .f(|_, _, _, a| -(a[0] - 0.37).powi(2))
                .build()
                .unwrap(),
        );
        let (a, _) = concave.maximize_shifted_driver(0, 0.0, &[0.0], &m, &[0.0], 101).unwrap();
        assert!((a[0] - 0.37).abs() < 1e-6);
        let (a, _) = concave.maximize_shifted_driver(0, 0.0, &[0.0], &m, &[0.0], 4).unwrap();
        assert!((a[0] - 0.37).abs() < 1e-6, "polish from a coarse grid: {a:?}");

        let linear = single(
            PlayerSpec::builder("linear", 1, 1, interval(-1.0, 1.0)).b(|_, _, _, a| vec![a[0]]).build().unwrap(),
        );
        let (a, v) = linear.maximize_shifted_driver(0, 0.0, &[0.0], &m, &[2.0], 3).unwrap();
        assert_eq!(a, vec![1.0]);
        assert!((v - 2.0).abs() < 1e-12);
        assert!(linear.maximize_shifted_driver(0, 0.0, &[0.0], &m, &[2.0], 1).is_err());
    }

    fn eval_bundle(system: &PopulationSystem, x: f64, y: f64) -> (f64, f64, f64) {
        let bundle = system.bundle(0);
        let m = dirac0();
        let z = [0.0];
        let zv = ZView::from_slice(&z, 1, 1);
        (bundle.b(0.2, &[x], &[y], zv, &m)[0], bundle.f(0.2, &[x], &[y], zv, &m)[0], bundle.g(&[x], &m)[0])
    }

    #[test]
    fn example_game_assembles_expected_system() {
        let slope = 0.3;
        let p = PlayerSpec::builder("example", 1, 1, interval(0.0, 10.0))
            .b(move |_, x, _, a| vec![slope * x[0] - a[0]])
            .f(|_, x, _, a| a[0] * a[0] + x[0].max(0.0))
            .b_x(move |_, _, _, _| DMatrix::from_element(1, 1, slope))
            .f_x(|_, x, _, _| vec![if x[0] >= 0.0 { 1.0 } else { 0.0 }])
            .g_x(|_, _| vec![0.0])
            .h_x(|_, _| DMatrix::zeros(1, 1))
            .minimizer(|_, _, y, _| vec![y[0].max(0.0) / 2.0])
            .fd_step(None)
            .build()
            .unwrap();
        let system = single(p).assemble_pontryagin().unwrap();
        for (x, y) in [(0.5, 1.2), (-0.4, -0.7), (0.0, 3.0)] {
            let (b, f, g) = eval_bundle(&system, x, y);
            assert!((b - (slope * x - y.max(0.0) / 2.0)).abs() < 1e-15);
            let right = if x >= 0.0 { 1.0 } else { 0.0 };
            assert!((f - (right + slope * y)).abs() < 1e-15);
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn state_free_game_has_zero_adjoint() {
        let p = PlayerSpec::builder("free", 1, 1, interval(-1.0, 1.0))
            .b(|_, _, _, a| vec![a[0]])
            .f(|_, _, _, a| (a[0] - 0.25).powi(2))
            .build()
            .unwrap();
        let system = single(p).assemble_pontryagin().unwrap();
        let (b, f, g) = eval_bundle(&system, 0.8, 0.0);
        assert!((b - 0.25).abs() < 1e-8);
        assert!(f.abs() < 1e-9);
        assert!(g.abs() < 1e-9);
    }

    #[test]
    fn linear_quadratic_assembly_by_finite_differences() {
        let p = PlayerSpec::builder("lq", 1, 1, interval(-10.0, 10.0))
            .b(|_, _, _, a| vec![a[0]])
            .f(|_, x, _, a| a[0] * a[0] + x[0] * x[0])
            .build()
            .unwrap();
        let system = single(p).assemble_pontryagin().unwrap();
        for (x, y) in [(0.3, 1.0), (-1.2, -4.0), (2.0, 0.0)] {
            let (b, f, g) = eval_bundle(&system, x, y);
            // a* = -y / 2 from 2a + y = 0; dH/dx = 2x.
            assert!((b + y / 2.0).abs() < 1e-8, "{b}");
            assert!((f - 2.0 * x).abs() < 1e-6, "{f}");
            assert!(g.abs() < 1e-9);
        }
    }

    #[test]
    fn missing_gradient_without_fallback() {
        let p = PlayerSpec::builder("bare", 1, 1, interval(0.0, 1.0))
            .minimizer(|_, _, _, _| vec![0.0])
            .fd_step(None)
            .build()
            .unwrap();
        assert_eq!(
            single(p).assemble_pontryagin().unwrap_err(),
            Error::MissingGradient { population: 0, which: "h_x" }
        );
        assert!(PlayerSpec::builder("bad", 1, 1, interval(0.0, 1.0)).fd_step(Some(0.0)).build().is_err());
    }

    fn frozen(grid: &TimeGrid) -> MeasureFlow {
        MeasureFlow::dirac_path(grid.clone(), |_| vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn deterministic_running_cost_integrates_exactly() {
        let game = single(PlayerSpec::builder("unit", 1, 1, interval(0.0, 1.0)).f(|_, _, _, _| 1.0).build().unwrap());
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let j = estimate_cost(&game, 0, |_, _| vec![0.0], &frozen(&grid), 500, 3).unwrap();
        assert!((j.mean - 1.0).abs() < 1e-12);
        assert!(j.std_error < 1e-12);
    }

    #[test]
    fn martingale_terminal_cost_has_zero_mean() {
        let game = single(PlayerSpec::builder("mart", 1, 1, interval(0.0, 1.0)).g(|x, _| x[0]).build().unwrap());
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let j = estimate_cost(&game, 0, |_, _| vec![0.0], &frozen(&grid), 20_000, 4).unwrap();
        assert!(j.mean.abs() <= 3.0 * j.std_error, "{j:?}");
        assert!((j.std_error - (1.0f64 / 20_000.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn cost_rejects_inadmissible_controls() {
        let game = single(PlayerSpec::builder("box", 1, 1, interval(0.0, 1.0)).build().unwrap());
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let err = estimate_cost(&game, 0, |_, _| vec![2.0], &frozen(&grid), 10, 0).unwrap_err();
        assert_eq!(err, Error::ControlOutOfSet(vec![2.0]));
    }

    #[test]
    fn zero_cost_game_has_zero_gaps() {
        let game = single(
            PlayerSpec::builder("idle", 1, 1, interval(-1.0, 1.0)).b(|_, _, _, a| vec![a[0]]).build().unwrap(),
        );
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let table = ControlTable::constant(grid.clone(), interval(-1.0, 1.0), vec![0.0]).unwrap();
        let report = verify_controls(&game, &frozen(&grid), &[table], 500, 5, 0.2, 9).unwrap();
        assert!(report.passed);
        let pop = &report.populations[0];
        assert_eq!(pop.outcomes.len(), 5);
        assert!(pop.outcomes.iter().all(|o| o.gap == 0.0 && o.std_error == 0.0));
    }

    #[test]
    fn costly_constant_control_is_beaten() {
        let game = single(pushed_player(true));
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let worst = ControlTable::constant(grid.clone(), interval(0.0, 10.0), vec![10.0]).unwrap();
        let report = verify_controls(&game, &frozen(&grid), &[worst], 1000, 10, 0.2, 9).unwrap();
        assert!(!report.passed);
        assert!(report.populations[0].worst_gap < 0.0);
    }

    #[test]
    fn deviation_bump_shape() {
        let dev = Deviation { center: 0.5, width: 0.25, direction: vec![1.0], magnitude: 0.2 };
        assert_eq!(dev.bump(0.5), 1.0);
        assert_eq!(dev.bump(0.75), 0.0);
        assert_eq!(dev.bump(0.1), 0.0);
        assert!(dev.bump(0.6) > 0.0 && dev.bump(0.6) < 1.0);
        let drawn = Deviation::draw(2.0, 3, 0.2, 5);
        assert!((norm2(&drawn.direction) - 1.0).abs() < 1e-12);
        assert!(drawn.width >= 0.5 && drawn.width <= 1.0);
        assert_eq!(drawn, Deviation::draw(2.0, 3, 0.2, 5));
    }

    #[test]
    fn control_table_csv_and_bounds() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        assert_eq!(
            ControlTable::constant(grid.clone(), interval(0.0, 1.0), vec![2.0]).unwrap_err(),
            Error::ControlOutOfSet(vec![2.0])
        );
        let table = ControlTable::constant(grid, interval(0.0, 1.0), vec![0.5]).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf, &[vec![0.0], vec![1.0]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,x_0,control_0");
        assert_eq!(lines.len(), 1 + 2 * 2);
    }
}
