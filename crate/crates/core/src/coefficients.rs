//! Coefficient bundles `(h, b, sigma, f, g)` of each population.
//!
//! The forward drift is split into an unbounded part `h(t, x)` that drives the
//! reference diffusion and a bounded mean-field part `b(t, x, y, z, m)` that is
//! absorbed by a change of measure. The measure argument `m` is the vector of
//! the `H` population laws at the current time.
//!
//! `Z` values are passed as `n x d` column-major matrix views.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure_flow::EmpiricalMeasure;
use crate::rng::{derive_seed, standard_normal, uniform_rng};

/// Column-major `n x d` view of a `Z` value.
pub type ZView<'a> = DMatrixView<'a, f64>;

pub type StateFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type FieldFn =
    Arc<dyn Fn(f64, &[f64], &[f64], ZView<'_>, &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64], &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// `sigma sigma^T` below this fraction of the declared lower ellipticity
/// bound is treated as singular.
const SINGULAR_FLOOR: f64 = 1e-8;

/// State, noise and backward dimensions `(m, d, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub noise: usize,
    pub backward: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Self { state: 1, noise: 1, backward: 1 }
    }
}

/// Growth and ellipticity constants declared by the bundle author.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub c_growth: f64,
    pub growth_exponent: f64,
    pub ellipticity_eps: f64,
}

impl Default for DeclaredConstants {
    fn default() -> Self {
        Self { c_growth: 1.0, growth_exponent: 0.0, ellipticity_eps: 1.0 }
    }
}

/// Diffusion matrix `sigma(t, x)` of shape `m x d`.
#[derive(Clone)]
pub enum Diffusion {
    Constant {
        sigma: DMatrix<f64>,
        /// `sigma^T (sigma sigma^T)^{-1}`, absent when singular.
        pinv: Option<DMatrix<f64>>,
    },
    Variable(MatrixFn),
}

impl Diffusion {
    pub fn constant(sigma: DMatrix<f64>) -> Self {
        let gram = &sigma * sigma.transpose();
        let pinv = gram
            .clone()
            .cholesky()
            .filter(|c| c.l().diagonal().iter().all(|d| *d * *d > 1e-300))
            .map(|c| sigma.transpose() * c.inverse());
        Self::Constant { sigma, pinv }
    }

    pub fn scalar(s: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, s))
    }

    pub fn variable(f: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self::Variable(Arc::new(f))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Cow<'_, DMatrix<f64>> {
        match self {
            Self::Constant { sigma, .. } => Cow::Borrowed(sigma),
            Self::Variable(f) => Cow::Owned(f(t, x)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. })
    }
}

/// `sigma^T (sigma sigma^T)^{-1} b` for an explicit `sigma`.
pub fn reduce_with(sigma: &DMatrix<f64>, b: &[f64], eps: f64, t: f64) -> Result<Vec<f64>> {
    let floor = SINGULAR_FLOOR / eps;
    if sigma.nrows() == 1 {
        let s2: f64 = sigma.iter().map(|v| v * v).sum();
        if !(s2 > floor) {
            return Err(Error::SingularDiffusion { t });
        }
        let v = b[0] / s2;
        return Ok(sigma.iter().map(|s| s * v).collect());
    }
    let gram = sigma * sigma.transpose();
    let chol = gram.cholesky().ok_or(Error::SingularDiffusion { t })?;
    if chol.l().diagonal().iter().any(|d| !(d * d > floor)) {
        return Err(Error::SingularDiffusion { t });
    }
    let v = chol.solve(&nalgebra::DVector::from_column_slice(b));
    Ok((sigma.transpose() * v).iter().copied().collect())
}

/// Coefficients of one population.
#[derive(Clone)]
pub struct CoefficientBundle {
    name: String,
    dims: Dims,
    h: StateFn,
    b: FieldFn,
    sigma: Diffusion,
    f: FieldFn,
    g: TerminalFn,
    constants: DeclaredConstants,
}

impl fmt::Debug for CoefficientBundle {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("CoefficientBundle")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("constant_sigma", &self.sigma.is_constant())
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

pub struct BundleBuilder {
    name: String,
    dims: Dims,
    h: Option<StateFn>,
    b: Option<FieldFn>,
    sigma: Option<Diffusion>,
    f: Option<FieldFn>,
    g: Option<TerminalFn>,
    constants: DeclaredConstants,
}

impl BundleBuilder {
    pub fn h(mut self, h: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.h = Some(Arc::new(h));
        self
    }

    pub fn b(
        mut self,
        b: impl Fn(f64, &[f64], &[f64], ZView<'_>, &[EmpiricalMeasure]) -> Vec<f64>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.b = Some(Arc::new(b));
        self
    }

    pub fn sigma(mut self, sigma: Diffusion) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn f(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], ZView<'_>, &[EmpiricalMeasure]) -> Vec<f64>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.f = Some(Arc::new(f));
        self
    }

    pub fn g(
        mut self,
        g: impl Fn(&[f64], &[EmpiricalMeasure]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.g = Some(Arc::new(g));
        self
    }

    pub fn constants(mut self, constants: DeclaredConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn build(self) -> Result<CoefficientBundle> {
        let Dims { state: m, noise: d, backward: n } = self.dims;
        if m == 0 || d == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("zero dimension in {:?}", self.dims)));
        }
        let c = self.constants;
        if !(c.ellipticity_eps > 0.0) {
            return Err(Error::InvalidArgument("ellipticity_eps must be positive".into()));
        }
        if !(c.c_growth >= 0.0) || !(c.growth_exponent >= 0.0) {
            return Err(Error::InvalidArgument("growth constants must be nonnegative".into()));
        }
        let sigma = match self.sigma {
            Some(s) => s,
            None if m == d => Diffusion::constant(DMatrix::identity(m, d)),
            None => {
                return Err(Error::InvalidArgument(
                    "sigma is required when state and noise dimensions differ".into(),
                ))
            }
        };
        Ok(CoefficientBundle {
            name: self.name,
            dims: self.dims,
            h: self.h.unwrap_or_else(|| Arc::new(move |_, _| vec![0.0; m])),
            b: self.b.unwrap_or_else(|| Arc::new(move |_, _, _, _, _| vec![0.0; m])),
            sigma,
            f: self.f.unwrap_or_else(|| Arc::new(move |_, _, _, _, _| vec![0.0; n])),
            g: self.g.unwrap_or_else(|| Arc::new(move |_, _| vec![0.0; n])),
            constants: c,
        })
    }
}

impl CoefficientBundle {
    /// Builder with zero `h, b, f, g` and identity `sigma` by default.
    pub fn builder(name: impl Into<String>, dims: Dims) -> BundleBuilder {
        BundleBuilder {
            name: name.into(),
            dims,
            h: None,
            b: None,
            sigma: None,
            f: None,
            g: None,
            constants: DeclaredConstants::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn constants(&self) -> DeclaredConstants {
        self.constants
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.sigma
    }

    pub fn h(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.h)(t, x)
    }

    pub fn b(&self, t: f64, x: &[f64], y: &[f64], z: ZView<'_>, m: &[EmpiricalMeasure]) -> Vec<f64> {
        (self.b)(t, x, y, z, m)
    }

    pub fn sigma(&self, t: f64, x: &[f64]) -> Cow<'_, DMatrix<f64>> {
        self.sigma.eval(t, x)
    }

    pub fn f(&self, t: f64, x: &[f64], y: &[f64], z: ZView<'_>, m: &[EmpiricalMeasure]) -> Vec<f64> {
        (self.f)(t, x, y, z, m)
    }

    pub fn g(&self, x: &[f64], m: &[EmpiricalMeasure]) -> Vec<f64> {
        (self.g)(x, m)
    }

    /// Maps a drift vector `b` at `(t, x)` to `sigma^T (sigma sigma^T)^{-1} b`.
    pub fn reduce(&self, t: f64, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        match &self.sigma {
            Diffusion::Constant { pinv: Some(p), .. } => {
                Ok((0..p.nrows()).map(|r| (0..p.ncols()).map(|c| p[(r, c)] * b[c]).sum()).collect())
            }
            Diffusion::Constant { pinv: None, .. } => Err(Error::SingularDiffusion { t }),
            Diffusion::Variable(f) => reduce_with(&f(t, x), b, self.constants.ellipticity_eps, t),
        }
    }

    /// Reduced drift `b~ = sigma^T (sigma sigma^T)^{-1} b`, the integrand of the
    /// measure change.
    pub fn reduced_drift(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: ZView<'_>,
        m: &[EmpiricalMeasure],
    ) -> Result<Vec<f64>> {
        let b = self.b(t, x, y, z, m);
        self.reduce(t, x, &b)
    }

    /// Shifted driver `f + z b~`.
    pub fn shifted_driver(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: ZView<'_>,
        m: &[EmpiricalMeasure],
    ) -> Result<Vec<f64>> {
        let bt = self.reduced_drift(t, x, y, z, m)?;
        let mut out = self.f(t, x, y, z, m);
        for (r, o) in out.iter_mut().enumerate() {
            for (c, b) in bt.iter().enumerate() {
                *o += z[(r, c)] * b;
            }
        }
        Ok(out)
    }
}

/// The `H` bundles together with their initial points.
#[derive(Debug, Clone)]
pub struct PopulationSystem {
    bundles: Vec<CoefficientBundle>,
    initial_points: Vec<Vec<f64>>,
}

impl PopulationSystem {
    /// Checks shapes by evaluating every coefficient once at the initial point.
    pub fn new(bundles: Vec<CoefficientBundle>, initial_points: Vec<Vec<f64>>) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::InvalidArgument("system needs at least one population".into()));
        }
        if bundles.len() != initial_points.len() {
            return Err(Error::LengthMismatch { expected: bundles.len(), got: initial_points.len() });
        }
        let dims = bundles[0].dims();
        let diracs = initial_points
            .iter()
            .map(|p| EmpiricalMeasure::dirac(p))
            .collect::<Result<Vec<_>>>()?;
        for (bundle, x0) in bundles.iter().zip(&initial_points) {
            let dm = bundle.dims();
            if dm != dims {
                return Err(Error::InvalidArgument(format!(
                    "bundle `{}` has dims {dm:?}, expected {dims:?}",
                    bundle.name()
                )));
            }
            check_len("x0", x0.len(), dims.state)?;
            let y = vec![0.0; dims.backward];
            let zbuf = vec![0.0; dims.backward * dims.noise];
            let z = ZView::from_slice(&zbuf, dims.backward, dims.noise);
            check_len("h", bundle.h(0.0, x0).len(), dims.state)?;
            check_len("b", bundle.b(0.0, x0, &y, z, &diracs).len(), dims.state)?;
            check_len("f", bundle.f(0.0, x0, &y, z, &diracs).len(), dims.backward)?;
            check_len("g", bundle.g(x0, &diracs).len(), dims.backward)?;
            let s = bundle.sigma(0.0, x0);
            if s.nrows() != dims.state || s.ncols() != dims.noise {
                return Err(Error::InvalidArgument(format!(
                    "sigma of `{}` is {}x{}, expected {}x{}",
                    bundle.name(),
                    s.nrows(),
                    s.ncols(),
                    dims.state,
                    dims.noise
                )));
            }
        }
        Ok(Self { bundles, initial_points })
    }

    pub fn bundles(&self) -> &[CoefficientBundle] {
        &self.bundles
    }

    pub fn bundle(&self, i: usize) -> &CoefficientBundle {
        &self.bundles[i]
    }

    pub fn initial_points(&self) -> &[Vec<f64>] {
        &self.initial_points
    }

    pub fn populations(&self) -> usize {
        self.bundles.len()
    }

    pub fn dims(&self) -> Dims {
        self.bundles[0].dims()
    }
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::InvalidArgument(format!("{what} has length {got}, expected {expected}")));
    }
    Ok(())
}

/// One `(t, x, y, z)` probe; `z` is column-major `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Probe points, the measure argument used at the probes, and the number of
/// random directions for the ellipticity check.
#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub points: Vec<ProbePoint>,
    pub measures: Vec<EmpiricalMeasure>,
    pub n_directions: usize,
    /// Decreasing jitter magnitudes for the continuity-in-measure check.
    pub jitters: Vec<f64>,
}

impl ProbeSpec {
    /// Tensor grid of probes around the initial points: `t` in `{0, T/2, T}`,
    /// each state coordinate offset by `{0, ±1, ±10}`, `y` and `z` in
    /// `{-1, 0, 1}`. Measures are Gaussian clouds centred at the initial points.
    pub fn around(system: &PopulationSystem, horizon: f64, seed: u64) -> Result<Self> {
        let dims = system.dims();
        let mut xs = Vec::new();
        for x0 in system.initial_points() {
            xs.push(x0.clone());
            for c in 0..dims.state {
                for off in [-10.0, -1.0, 1.0, 10.0] {
                    let mut x = x0.clone();
                    x[c] += off;
                    xs.push(x);
                }
            }
        }
        let mut points = Vec::new();
        for t in [0.0, 0.5 * horizon, horizon] {
            for x in &xs {
                for level in [-1.0, 0.0, 1.0] {
                    for zl in [-1.0, 0.0, 1.0] {
                        points.push(ProbePoint {
                            t,
                            x: x.clone(),
                            y: vec![level; dims.backward],
                            z: vec![zl; dims.backward * dims.noise],
                        });
                    }
                }
            }
        }
        let mut rng = uniform_rng(derive_seed(seed, &[0x9120_be]));
        let measures = system
            .initial_points()
            .iter()
            .map(|x0| {
                let samples: Vec<f64> = (0..256)
                    .flat_map(|_| x0.iter().map(|c| c + standard_normal(&mut rng)).collect::<Vec<_>>())
                    .collect();
                EmpiricalMeasure::from_flat(dims.state, samples, None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, measures, n_directions: 8, jitters: vec![1e-1, 1e-2, 1e-3, 1e-4] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Ellipticity,
    DriftBound,
    TerminalGrowth,
    DriverGrowth,
    MeasureContinuity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub population: usize,
    pub check: CheckKind,
    pub passed: bool,
    /// Largest observed ratio of measured value to allowed bound (or, for the
    /// continuity check, the output change at the smallest jitter).
    pub worst: f64,
    pub detail: String,
}

/// Outcome of the sampled assumption checks. A failure is definitive; a pass
/// only means no probe falsified the assumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn verdict(&self, population: usize, check: CheckKind) -> Option<bool> {
        self.checks
            .iter()
            .find(|c| c.population == population && c.check == check)
            .map(|c| c.passed)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sampled falsification of the standing assumptions on every bundle.
pub fn validate_assumptions(
    system: &PopulationSystem,
    probe: &ProbeSpec,
    seed: u64,
) -> Result<ValidationReport> {
    if probe.points.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    if probe.measures.len() != system.populations() {
        return Err(Error::PopulationCountMismatch {
            left: system.populations(),
            right: probe.measures.len(),
        });
    }
    let dims = system.dims();
    let mut checks = Vec::new();
    for (i, bundle) in system.bundles().iter().enumerate() {
        let c = bundle.constants();
        let mut rng = uniform_rng(derive_seed(seed, &[i as u64, 1]));
        let m = &probe.measures;

        // Ellipticity over random directions.
        let (lo, hi) = (1.0 / c.ellipticity_eps, c.ellipticity_eps);
        let mut worst = 0.0f64;
        let mut ok = true;
        for p in &probe.points {
            let s = bundle.sigma(p.t, &p.x);
            let gram = &*s * s.transpose();
            for _ in 0..probe.n_directions.max(1) {
                let u: Vec<f64> = (0..dims.state).map(|_| standard_normal(&mut rng)).collect();
                let n2 = u.iter().map(|v| v * v).sum::<f64>();
                if n2 == 0.0 {
                    continue;
                }
                let uv = nalgebra::DVector::from_column_slice(&u);
                let q = (uv.transpose() * &gram * &uv)[(0, 0)] / n2;
                let tol = 1e-12;
                if q < lo * (1.0 - tol) || q > hi * (1.0 + tol) {
                    ok = false;
                }
                worst = worst.max((lo / q.max(1e-300)).max(q / hi));
            }
        }
        checks.push(CheckResult {
            population: i,
            check: CheckKind::Ellipticity,
            passed: ok,
            worst,
            detail: format!("x'^T sigma sigma^T x' / |x'|^2 must lie in [{lo:e}, {hi:e}]"),
        });

        let mut drift_worst = 0.0f64;
        let mut g_worst = 0.0f64;
        let mut f_worst = 0.0f64;
        for p in &probe.points {
            let z = ZView::from_slice(&p.z, dims.backward, dims.noise);
            let xr = norm(&p.x).powf(c.growth_exponent);
            let b = norm(&bundle.b(p.t, &p.x, &p.y, z, m));
            drift_worst = drift_worst.max(ratio(b, c.c_growth));
            let g = norm(&bundle.g(&p.x, m));
            g_worst = g_worst.max(ratio(g, c.c_growth * (1.0 + xr)));
            let f = norm(&bundle.f(p.t, &p.x, &p.y, z, m));
            f_worst = f_worst.max(ratio(f, c.c_growth * (1.0 + xr + norm(&p.y) + norm(&p.z))));
        }
        let bound_check = |check, worst: f64, detail: &str| CheckResult {
            population: i,
            check,
            passed: worst <= 1.0 + 1e-12,
            worst,
            detail: detail.to_string(),
        };
        checks.push(bound_check(CheckKind::DriftBound, drift_worst, "|b| <= C"));
        checks.push(bound_check(CheckKind::TerminalGrowth, g_worst, "|g| <= C(1+|x|^r)"));
        checks.push(bound_check(
            CheckKind::DriverGrowth,
            f_worst,
            "|f| <= C(1+|x|^r+|y|+|z|)",
        ));

        // Continuity in the measure argument under shrinking sample jitter.
        let noise: Vec<Vec<f64>> = m
            .iter()
            .map(|mm| (0..mm.samples().len()).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        let mut changes = Vec::new();
        for &eps in &probe.jitters {
            let jittered = m
                .iter()
                .zip(&noise)
                .map(|(mm, nz)| {
                    let s = mm.samples().iter().zip(nz).map(|(a, b)| a + eps * b).collect();
                    EmpiricalMeasure::from_flat(mm.dim(), s, Some(mm.weights().to_vec()))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut change = 0.0f64;
            for p in &probe.points {
                let z = ZView::from_slice(&p.z, dims.backward, dims.noise);
                change = change
                    .max(max_abs_diff(&bundle.b(p.t, &p.x, &p.y, z, m), &bundle.b(p.t, &p.x, &p.y, z, &jittered)))
                    .max(max_abs_diff(&bundle.f(p.t, &p.x, &p.y, z, m), &bundle.f(p.t, &p.x, &p.y, z, &jittered)))
                    .max(max_abs_diff(&bundle.g(&p.x, m), &bundle.g(&p.x, &jittered)));
            }
            changes.push(change);
        }
        let first = changes.first().copied().unwrap_or(0.0);
        let last = changes.last().copied().unwrap_or(0.0);
        checks.push(CheckResult {
            population: i,
            check: CheckKind::MeasureContinuity,
            passed: last <= 1e-9 + 0.05 * first,
            worst: last,
            detail: format!("output change by jitter: {changes:?}"),
        });
    }
    Ok(ValidationReport { checks })
}

fn ratio(value: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        value / bound
    } else if value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}
