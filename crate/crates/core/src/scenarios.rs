//! Builtin scenario catalog and the JSON scenario schema.
//!
//! A scenario names its populations by bundle (with numeric parameters), the
//! time grid, the solver settings, the initial flow(s) of the fixed-point
//! iteration and, for games, the control box. Custom scenarios use the same
//! schema as the builtins.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coefficients::{CoefficientBundle, DeclaredConstants, Diffusion, Dims, PopulationSystem};
use crate::error::{Error, Result};
use crate::forward_sde::simulate_reference;
use crate::measure_flow::{MeasureFlow, TimeGrid};
use crate::mfg::{ControlSet, GameSpec, PlayerSpec};
use crate::picard::{PsiConfig, PsiMode};
use crate::rng::derive_seed;

pub const DEFAULT_CLIP: f64 = 10.0;
const INIT_TAG: u64 = 0x1417;

/// Bundles available to plain systems.
pub const SYSTEM_BUNDLES: &[&str] = &["brownian", "mean-coupled", "mean-reverting"];
/// Bundles available to games.
pub const GAME_BUNDLES: &[&str] = &["bounded-adjoint", "linear-quadratic"];
/// Builtin scenario names.
pub const BUILTINS: &[&str] = &["counterexample", "bounded-adjoint-game", "mean-reverting", "brownian"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationRef {
    pub bundle: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default = "origin")]
    pub x0: Vec<f64>,
}

fn origin() -> Vec<f64> {
    vec![0.0]
}

impl PopulationRef {
    pub fn new(bundle: &str, params: &[(&str, f64)], x0: Vec<f64>) -> Self {
        Self {
            bundle: bundle.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            x0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub dt: f64,
}

/// Initial flow of a fixed-point run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    /// Dirac masses at `amplitude * sin t` in every coordinate.
    DiracSine { amplitude: f64 },
    /// Dirac masses at `point`, or at each population's initial point.
    Dirac {
        #[serde(default)]
        point: Option<Vec<f64>>,
    },
    /// Law flow of each population's reference diffusion `dX = h dt + sigma dW`.
    Reference,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::Dirac { point: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HookMode {
    /// Closed-form minimizer and one-sided derivatives.
    #[default]
    Analytic,
    /// Central differences and projected Newton only.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub n_perturbations: usize,
    pub magnitude: f64,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self { n_perturbations: 10, magnitude: 0.2, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub control_box: ControlBox,
    #[serde(default)]
    pub hooks: HookMode,
    #[serde(default)]
    pub verification: VerificationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub measure_flow: String,
    pub fixedpoint_report: String,
    pub equilibrium: String,
    pub control_table: String,
    pub clusters: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            measure_flow: "measure_flow.csv".into(),
            fixedpoint_report: "fixedpoint_report.json".into(),
            equilibrium: "equilibrium.json".into(),
            control_table: "control_table.csv".into(),
            clusters: "clusters.json".into(),
        }
    }
}

/// How an expected value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Closed-form value of the model.
    ClosedForm,
    /// Holds by construction, e.g. a zero coupling.
    Identity,
    /// Computed by an independent numerical oracle at check time.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedOutcome {
    pub id: String,
    pub description: String,
    /// Absent when the value comes from an oracle evaluated at check time.
    #[serde(default)]
    pub value: Option<f64>,
    pub tolerance: f64,
    pub provenance: Provenance,
}

impl ExpectedOutcome {
    fn new(id: &str, description: &str, value: Option<f64>, tolerance: f64, provenance: Provenance) -> Self {
        Self { id: id.into(), description: description.into(), value, tolerance, provenance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub populations: Vec<PopulationRef>,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: PsiConfig,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub multistart: Vec<InitSpec>,
    #[serde(default)]
    pub game: Option<GameConfig>,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub expected: Vec<ExpectedOutcome>,
}

impl ScenarioConfig {
    /// Parses a JSON value, reporting the failing field path.
    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::SchemaError(format!("{path}: {}", e.inner()))
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::SchemaError(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario configs serialize")
    }
}

/// Sets `path` (dot-separated object keys) in `target` to `raw`, parsed as JSON
/// when possible and as a string otherwise.
pub fn apply_override(target: &mut Value, path: &str, raw: &str) -> Result<()> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = target;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::SchemaError(format!("invalid override path `{path}`")));
    }
    for key in &keys[..keys.len() - 1] {
        node = match node {
            Value::Array(items) => {
                let i: usize = key.parse().map_err(|_| Error::SchemaError(format!("`{key}` is not an index")))?;
                let len = items.len();
                items.get_mut(i).ok_or(Error::SchemaError(format!("index {i} out of range ({len})")))?
            }
            Value::Object(map) => map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default())),
            _ => return Err(Error::SchemaError(format!("`{path}` does not name an object field"))),
        };
    }
    let last = keys[keys.len() - 1];
    match node {
        Value::Object(map) => {
            map.insert(last.to_string(), parsed);
            Ok(())
        }
        Value::Array(items) => {
            let i: usize = last.parse().map_err(|_| Error::SchemaError(format!("`{last}` is not an index")))?;
            let len = items.len();
            *items.get_mut(i).ok_or(Error::SchemaError(format!("index {i} out of range ({len})")))? = parsed;
            Ok(())
        }
        _ => Err(Error::SchemaError(format!("`{path}` does not name an object field"))),
    }
}

/// Named parameters with defaults; unknown names are rejected.
struct Params<'a> {
    values: &'a BTreeMap<String, f64>,
    known: Vec<&'static str>,
    context: String,
}

impl<'a> Params<'a> {
    fn new(values: &'a BTreeMap<String, f64>, context: String) -> Self {
        Self { values, known: Vec::new(), context }
    }

    fn get(&mut self, name: &'static str, default: f64) -> Result<f64> {
        self.known.push(name);
        let v = self.values.get(name).copied().unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::SchemaError(format!("{}.params.{name}: must be finite", self.context)));
        }
        Ok(v)
    }

    fn positive(&mut self, name: &'static str, default: f64) -> Result<f64> {
        let v = self.get(name, default)?;
        if v <= 0.0 {
            return Err(Error::SchemaError(format!("{}.params.{name}: must be positive", self.context)));
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().find(|k| !self.known.contains(&k.as_str())) {
            Some(k) => Err(Error::SchemaError(format!("{}.params: unknown parameter `{k}`", self.context))),
            None => Ok(()),
        }
    }
}

fn mean_of(m: &[crate::measure_flow::EmpiricalMeasure]) -> f64 {
    m[0].mean()[0]
}

/// Constants for a scalar diffusion `sigma`; a zero diffusion keeps the unit
/// ellipticity bound so that validation reports it.
fn constants(sigma: f64, c_growth: f64, growth_exponent: f64) -> DeclaredConstants {
    let s2 = sigma * sigma;
    let ellipticity_eps = if s2 > 0.0 { s2.max(1.0 / s2) } else { 1.0 };
    DeclaredConstants { c_growth, growth_exponent, ellipticity_eps }
}

fn system_bundle(r: &PopulationRef, context: String) -> Result<CoefficientBundle> {
    let mut p = Params::new(&r.params, context);
    let bundle = match r.bundle.as_str() {
        "brownian" => {
            let sigma = p.get("sigma", 1.0)?;
            CoefficientBundle::builder("brownian", Dims::scalar())
                .sigma(Diffusion::scalar(sigma))
                .constants(constants(sigma, 1.0, 0.0))
                .build()?
        }
        "mean-coupled" => {
            let clip = p.positive("clip", DEFAULT_CLIP)?;
            let sigma = p.get("sigma", 1.0)?;
            CoefficientBundle::builder("mean-coupled", Dims::scalar())
                .b(move |_, _, y, _, _| vec![y[0].clamp(-clip, clip)])
                .f(move |_, _, _, _, m| vec![mean_of(m).clamp(-clip, clip)])
                .g(move |_, m| vec![mean_of(m).clamp(-clip, clip)])
                .sigma(Diffusion::scalar(sigma))
                .constants(constants(sigma, clip, 0.0))
                .build()?
        }
        "mean-reverting" => {
            let rate = p.get("rate", 0.5)?;
            let target = p.get("target", 1.0)?;
            let sigma = p.get("sigma", 1.0)?;
            CoefficientBundle::builder("mean-reverting", Dims::scalar())
                .h(move |_, x| vec![-rate * x[0]])
                .b(move |_, _, _, _, m| vec![(target - mean_of(m)).tanh()])
                .sigma(Diffusion::scalar(sigma))
                .constants(constants(sigma, 1.0, 0.0))
                .build()?
        }
        other => {
            return Err(if GAME_BUNDLES.contains(&other) {
                Error::SchemaError(format!("bundle `{other}` needs a `game` section"))
            } else {
                Error::UnknownBundle(other.to_string())
            })
        }
    };
    p.finish()?;
    Ok(bundle)
}

fn game_player(r: &PopulationRef, controls: ControlSet, hooks: HookMode, context: String) -> Result<PlayerSpec> {
    if r.x0.len() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: r.x0.len() });
    }
    let reach = controls.lower().iter().chain(controls.upper()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut p = Params::new(&r.params, context);
    let analytic = hooks == HookMode::Analytic;
    let player = match r.bundle.as_str() {
        "bounded-adjoint" => {
            let c = p.positive("c_lip", 1.0)?;
            let sigma = p.get("sigma", 1.0)?;
            let pull = p.get("pull", 0.5)?;
            let builder = PlayerSpec::builder("bounded-adjoint", 1, 1, controls)
                .initial_point(r.x0.clone())
                .h(move |_, x| vec![c * x[0]])
                .b(move |_, _, m, a| vec![-pull * mean_of(m).tanh() - a[0]])
                .f(move |_, x, m, a| a[0] * a[0] + c * (x[0] - 0.5 * mean_of(m)).max(0.0))
                .sigma(Diffusion::scalar(sigma))
                .constants(constants(sigma, (pull.abs() + reach).max(c), 0.0));
            if analytic {
                builder
                    .h_x(move |_, _| DMatrix::from_element(1, 1, c))
                    .b_x(|_, _, _, _| DMatrix::zeros(1, 1))
                    .f_x(move |_, x, m, _| vec![if x[0] >= 0.5 * mean_of(m) { c } else { 0.0 }])
                    .g_x(|_, _| vec![0.0])
                    .minimizer(|_, _, y, _| vec![y[0].max(0.0) / 2.0])
                    .build()?
            } else {
                builder.build()?
            }
        }
        "linear-quadratic" => {
            let sigma = p.get("sigma", 1.0)?;
            let builder = PlayerSpec::builder("linear-quadratic", 1, 1, controls)
                .initial_point(r.x0.clone())
                .b(|_, _, _, a| vec![a[0]])
                .f(|_, x, _, a| a[0] * a[0] + x[0] * x[0])
                .sigma(Diffusion::scalar(sigma))
                .constants(constants(sigma, reach.max(2.0), 1.0));
            if analytic {
                builder
                    .h_x(|_, _| DMatrix::zeros(1, 1))
                    .b_x(|_, _, _, _| DMatrix::zeros(1, 1))
                    .f_x(|_, x, _, _| vec![2.0 * x[0]])
                    .g_x(|_, _| vec![0.0])
                    .minimizer(|_, _, y, _| vec![-y[0] / 2.0])
                    .build()?
            } else {
                builder.build()?
            }
        }
        other => {
            return Err(if SYSTEM_BUNDLES.contains(&other) {
                Error::SchemaError(format!("bundle `{other}` cannot be used in a game"))
            } else {
                Error::UnknownBundle(other.to_string())
            })
        }
    };
    p.finish()?;
    Ok(player)
}

#[derive(Debug, Clone)]
pub enum Model {
    System(PopulationSystem),
    Game(GameSpec),
}

/// A resolved scenario: configuration plus the model it names.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    model: Model,
    grid: TimeGrid,
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        if config.populations.is_empty() {
            return Err(Error::SchemaError("populations: at least one population is required".into()));
        }
        config.solver.validate().map_err(|e| Error::SchemaError(format!("solver: {e}")))?;
        let grid = TimeGrid::with_step(config.grid.horizon, config.grid.dt)
            .map_err(|e| Error::SchemaError(format!("grid: {e}")))?;
        for (i, spec) in config.multistart.iter().chain(std::iter::once(&config.init)).enumerate() {
            if let InitSpec::Dirac { point: Some(p) } = spec {
                if p.len() != config.populations[0].x0.len() {
                    return Err(Error::SchemaError(format!("init {i}: point has dimension {}", p.len())));
                }
            }
        }
        let model = match &config.game {
            None => {
                let bundles = config
                    .populations
                    .iter()
                    .enumerate()
                    .map(|(i, r)| system_bundle(r, format!("populations.{i}")))
                    .collect::<Result<Vec<_>>>()?;
                for (r, b) in config.populations.iter().zip(&bundles) {
                    if b.name() == "mean-coupled" {
                        check_clip(r.params.get("clip").copied().unwrap_or(DEFAULT_CLIP), &config)?;
                    }
                }
                let x0 = config.populations.iter().map(|r| r.x0.clone()).collect();
                Model::System(PopulationSystem::new(bundles, x0)?)
            }
            Some(game) => {
                let controls = ControlSet::new(game.control_box.lower.clone(), game.control_box.upper.clone())
                    .map_err(|e| Error::SchemaError(format!("game.control_box: {e}")))?;
                let players = config
                    .populations
                    .iter()
                    .enumerate()
                    .map(|(i, r)| game_player(r, controls.clone(), game.hooks, format!("populations.{i}")))
                    .collect::<Result<Vec<_>>>()?;
                Model::Game(GameSpec::new(players)?)
            }
        };
        Ok(Self { config, model, grid })
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn game(&self) -> Option<&GameSpec> {
        match &self.model {
            Model::Game(g) => Some(g),
            Model::System(_) => None,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn solver(&self) -> &PsiConfig {
        &self.config.solver
    }

    /// The system handed to the fixed-point iteration; games are assembled
    /// into their adjoint system.
    pub fn system(&self) -> Result<PopulationSystem> {
        match &self.model {
            Model::System(s) => Ok(s.clone()),
            Model::Game(g) => g.assemble_pontryagin(),
        }
    }

    /// Same scenario on a grid with the step halved.
    pub fn refined(&self) -> Result<Self> {
        let mut config = self.config.clone();
        config.grid.dt /= 2.0;
        Self::from_config(config)
    }

    pub fn flow(&self, spec: &InitSpec) -> Result<MeasureFlow> {
        let x0: Vec<Vec<f64>> = self.config.populations.iter().map(|r| r.x0.clone()).collect();
        match spec {
            InitSpec::DiracSine { amplitude } => MeasureFlow::dirac_path(self.grid.clone(), |t| {
                x0.iter().map(|p| vec![amplitude * t.sin(); p.len()]).collect()
            }),
            InitSpec::Dirac { point } => MeasureFlow::dirac_path(self.grid.clone(), |_| match point {
                Some(p) => vec![p.clone(); x0.len()],
                None => x0.clone(),
            }),
            InitSpec::Reference => {
                let system = self.system()?;
                let solver = &self.config.solver;
                let laws = (0..system.populations())
                    .map(|i| {
                        let seed = derive_seed(solver.seed, &[INIT_TAG, i as u64]);
                        Ok(simulate_reference(system.bundle(i), &x0[i], &self.grid, solver.n_particles, seed)?
                            .law_flow()
                            .into_rows())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let rows = (0..self.grid.len())
                    .map(|k| laws.iter().map(|l| l[k][0].clone()).collect())
                    .collect();
                MeasureFlow::new(self.grid.clone(), rows)
            }
        }
    }

    pub fn initial_flow(&self) -> Result<MeasureFlow> {
        self.flow(&self.config.init)
    }

    pub fn multistart_flows(&self) -> Result<Vec<MeasureFlow>> {
        self.config.multistart.iter().map(|s| self.flow(s)).collect()
    }

    pub fn expected(&self, id: &str) -> Option<&ExpectedOutcome> {
        self.config.expected.iter().find(|e| e.id == id)
    }
}

fn check_clip(clip: f64, config: &ScenarioConfig) -> Result<()> {
    for spec in std::iter::once(&config.init).chain(&config.multistart) {
        if let InitSpec::DiracSine { amplitude } = spec {
            if amplitude.abs() > clip {
                return Err(Error::ClipViolation { c_prime: *amplitude, clip });
            }
        }
    }
    Ok(())
}

fn solver(mode: PsiMode) -> PsiConfig {
    PsiConfig { mode, n_particles: 100_000, seed: 20_240_613, damping: 1.0, tol: 0.02, max_iter: 20, basis_degree: 3 }
}

/// The mean-coupled system whose fixed points are the whole family
/// `X_t = C' sin t + W_t`, `Y_t = C' cos t` on `[0, pi/4]`.
pub fn scenario_counterexample(clip: f64, c_prime_inits: &[f64]) -> Result<Scenario> {
    let config = ScenarioConfig {
        name: "counterexample".into(),
        description: "Mean-coupled system with a one-parameter family of solutions C' sin t + W_t; \
                      every member is a fixed point of the law-flow map."
            .into(),
        populations: vec![PopulationRef::new("mean-coupled", &[("clip", clip)], vec![0.0])],
        grid: GridConfig { horizon: FRAC_PI_4, dt: FRAC_PI_4 / 100.0 },
        solver: solver(PsiMode::Girsanov),
        init: InitSpec::DiracSine { amplitude: 0.4 },
        multistart: c_prime_inits.iter().map(|&c| InitSpec::DiracSine { amplitude: c }).collect(),
        game: None,
        outputs: OutputConfig::default(),
        expected: vec![
            ExpectedOutcome::new(
                "fixed-mean-sup-error",
                "psi of the flow with mean C' sin t returns mean C' sin t (sup over the grid)",
                Some(0.0),
                0.05,
                Provenance::ClosedForm,
            ),
            ExpectedOutcome::new(
                "adjoint-initial-value",
                "Y_0 = C' for the member C' = 0.4",
                Some(0.4),
                0.02,
                Provenance::ClosedForm,
            ),
            ExpectedOutcome::new(
                "cluster-count",
                "multi-start from 0.2 sin t and 0.6 sin t finds two clusters",
                Some(2.0),
                0.0,
                Provenance::ClosedForm,
            ),
            ExpectedOutcome::new(
                "cluster-separation",
                "flow distance between the two limits is at least 0.25",
                Some(0.4 * FRAC_PI_4.sin()),
                0.4 * FRAC_PI_4.sin() - 0.25,
                Provenance::ClosedForm,
            ),
        ],
    };
    Scenario::from_config(config)
}

/// One-population game with drift `c x - pull tanh(mean) - a`, cost
/// `a^2 + c (x - mean / 2)^+` and no terminal cost. The adjoint satisfies
/// `0 <= Y_t <= exp(c (T - t)) - 1`.
pub fn scenario_bounded_adjoint_game(c_lip: f64, horizon: f64, sigma: f64) -> Result<Scenario> {
    if !(c_lip > 0.0) {
        return Err(Error::InvalidArgument(format!("c_lip {c_lip} must be positive")));
    }
    let upper = (c_lip * horizon).exp() - 1.0;
    let config = ScenarioConfig {
        name: "bounded-adjoint-game".into(),
        description: "Single-population game with a convex nondecreasing running cost; the equilibrium \
                      feedback is (Y v 0) / 2 and the adjoint is bounded by exp(c (T - t)) - 1."
            .into(),
        populations: vec![PopulationRef::new("bounded-adjoint", &[("c_lip", c_lip), ("sigma", sigma)], vec![2.0])],
        grid: GridConfig { horizon, dt: 0.01 },
        solver: solver(PsiMode::Direct),
        init: InitSpec::Reference,
        multistart: Vec::new(),
        game: Some(GameConfig {
            control_box: ControlBox { lower: vec![0.0], upper: vec![10.0] },
            hooks: HookMode::Analytic,
            verification: VerificationConfig::default(),
        }),
        outputs: OutputConfig::default(),
        expected: vec![
            ExpectedOutcome::new(
                "adjoint-upper-bound",
                "fitted Y stays below exp(c T) - 1",
                Some(upper),
                0.02,
                Provenance::ClosedForm,
            ),
            ExpectedOutcome::new("adjoint-lower-bound", "fitted Y stays above 0", Some(0.0), 0.02, Provenance::ClosedForm),
            ExpectedOutcome::new(
                "nash-verification",
                "no unilateral deviation lowers the cost by more than 3 standard errors",
                None,
                3.0,
                Provenance::ClosedForm,
            ),
        ],
    };
    Scenario::from_config(config)
}

/// Ornstein-Uhlenbeck reference with a bounded mean-field pull; the fixed
/// point is unique and its mean solves `m' = -rate m + tanh(target - m)`.
pub fn scenario_mean_reverting() -> Result<Scenario> {
    let config = ScenarioConfig {
        name: "mean-reverting".into(),
        description: "Decoupled system whose drift depends on the state law only through a Lipschitz \
                      function of the mean; the fixed point is unique."
            .into(),
        populations: vec![PopulationRef::new("mean-reverting", &[("rate", 0.5), ("target", 1.0)], vec![0.0])],
        grid: GridConfig { horizon: 1.0, dt: 0.01 },
        solver: PsiConfig { damping: 1.0, ..solver(PsiMode::Girsanov) },
        init: InitSpec::Dirac { point: None },
        multistart: vec![
            InitSpec::Dirac { point: None },
            InitSpec::Reference,
            InitSpec::Dirac { point: Some(vec![2.0]) },
        ],
        game: None,
        outputs: OutputConfig::default(),
        expected: vec![
            ExpectedOutcome::new("cluster-count", "every start reaches one cluster", Some(1.0), 0.0, Provenance::Oracle),
            ExpectedOutcome::new(
                "mean-path",
                "cluster mean agrees with the scalar mean equation solved by fixed-point iteration",
                None,
                0.05,
                Provenance::Oracle,
            ),
        ],
    };
    Scenario::from_config(config)
}

/// Uncoupled Brownian motion: the law-flow map is constant.
pub fn scenario_brownian() -> Result<Scenario> {
    let config = ScenarioConfig {
        name: "brownian".into(),
        description: "Standard Brownian motion with no coupling; psi ignores its input.".into(),
        populations: vec![PopulationRef::new("brownian", &[], vec![0.0])],
        grid: GridConfig { horizon: 1.0, dt: 0.01 },
        solver: solver(PsiMode::Girsanov),
        init: InitSpec::Reference,
        multistart: vec![InitSpec::Dirac { point: Some(vec![0.0]) }, InitSpec::Dirac { point: Some(vec![1.0]) }],
        game: None,
        outputs: OutputConfig::default(),
        expected: vec![ExpectedOutcome::new(
            "iterations",
            "converges after one application of psi",
            Some(1.0),
            0.0,
            Provenance::Identity,
        )],
    };
    Scenario::from_config(config)
}

pub fn builtin(name: &str) -> Result<Scenario> {
    match name {
        "counterexample" => scenario_counterexample(DEFAULT_CLIP, &[0.2, 0.6]),
        "bounded-adjoint-game" => scenario_bounded_adjoint_game(1.0, 1.0, 0.5),
        "mean-reverting" => scenario_mean_reverting(),
        "brownian" => scenario_brownian(),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// Resolves a JSON scenario document.
pub fn scenario_custom(json: &str) -> Result<Scenario> {
    Scenario::from_config(ScenarioConfig::from_json(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::ZView;
    use crate::measure_flow::EmpiricalMeasure;

    #[test]
    fn builtins_resolve_and_round_trip() {
        for name in BUILTINS {
            let s = builtin(name).unwrap();
            assert_eq!(s.name(), *name);
            let text = serde_json::to_string(s.config()).unwrap();
            let back = scenario_custom(&text).unwrap();
            assert_eq!(back.config(), s.config());
            assert_eq!(back.grid(), s.grid());
            assert!(s.config().expected.iter().all(|e| e.tolerance >= 0.0));
        }
        assert_eq!(builtin("nope").unwrap_err(), Error::UnknownScenario("nope".into()));
    }

    #[test]
    fn counterexample_grid_and_coefficients() {
        let s = builtin("counterexample").unwrap();
        assert_eq!(s.grid().n_steps(), 100);
        assert!((s.grid().horizon() - FRAC_PI_4).abs() < 1e-15);
        let system = s.system().unwrap();
        let b = system.bundle(0);
        let m = vec![EmpiricalMeasure::from_values(&[0.2, 0.4]).unwrap()];
        let z = [0.0];
        let zv = ZView::from_slice(&z, 1, 1);
        assert_eq!(b.b(0.0, &[5.0], &[0.7], zv, &m), vec![0.7]);
        assert_eq!(b.b(0.0, &[5.0], &[70.0], zv, &m), vec![10.0]);
        assert!((b.f(0.0, &[5.0], &[0.7], zv, &m)[0] - 0.3).abs() < 1e-15);
        assert!((b.g(&[5.0], &m)[0] - 0.3).abs() < 1e-15);
        assert_eq!(s.multistart_flows().unwrap().len(), 2);
    }

    #[test]
    fn clip_violation() {
        assert_eq!(
            scenario_counterexample(0.3, &[0.2, 0.6]).unwrap_err(),
            Error::ClipViolation { c_prime: 0.4, clip: 0.3 }
        );
        assert!(matches!(scenario_counterexample(0.5, &[0.2, 0.6]), Err(Error::ClipViolation { c_prime, .. }) if c_prime == 0.6));
    }

    #[test]
    fn minimal_custom_config() {
        let s = scenario_custom(r#"{"name": "bm", "populations": [{"bundle": "brownian"}], "grid": {"horizon": 1.0, "dt": 0.1}}"#)
            .unwrap();
        assert_eq!(s.system().unwrap().populations(), 1);
        assert_eq!(s.solver(), &PsiConfig::default());
        assert!(s.game().is_none());
    }

    #[test]
    fn custom_config_errors() {
        let unknown = r#"{"name": "x", "populations": [{"bundle": "nope"}], "grid": {"horizon": 1.0, "dt": 0.1}}"#;
        assert_eq!(scenario_custom(unknown).unwrap_err(), Error::UnknownBundle("nope".into()));

        let negative = r#"{"name": "x", "populations": [{"bundle": "brownian"}], "grid": {"horizon": 1.0, "dt": 0.1},
                          "solver": {"n_particles": -5}}"#;
        match scenario_custom(negative).unwrap_err() {
            Error::SchemaError(msg) => assert!(msg.starts_with("solver.n_particles"), "{msg}"),
            other => panic!("{other:?}"),
        }

        let zero_iter = r#"{"name": "x", "populations": [{"bundle": "brownian"}], "grid": {"horizon": 1.0, "dt": 0.1},
                           "solver": {"max_iter": 0}}"#;
        assert!(matches!(scenario_custom(zero_iter), Err(Error::SchemaError(_))));

        let bad_param = r#"{"name": "x", "populations": [{"bundle": "brownian", "params": {"sigmaa": 1}}],
                           "grid": {"horizon": 1.0, "dt": 0.1}}"#;
        match scenario_custom(bad_param).unwrap_err() {
            Error::SchemaError(msg) => assert!(msg.contains("sigmaa"), "{msg}"),
            other => panic!("{other:?}"),
        }

        let extra = r#"{"name": "x", "populations": [{"bundle": "brownian"}], "grid": {"horizon": 1.0, "dt": 0.1}, "colour": 1}"#;
        assert!(matches!(scenario_custom(extra), Err(Error::SchemaError(_))));

        let game_bundle = r#"{"name": "x", "populations": [{"bundle": "linear-quadratic"}], "grid": {"horizon": 1.0, "dt": 0.1}}"#;
        assert!(matches!(scenario_custom(game_bundle), Err(Error::SchemaError(_))));
        assert!(matches!(scenario_custom("not json"), Err(Error::SchemaError(_))));
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = builtin("brownian").unwrap().config().to_value();
        apply_override(&mut v, "solver.max_iter", "3").unwrap();
        apply_override(&mut v, "solver.mode", "direct").unwrap();
        apply_override(&mut v, "populations.0.x0", "[1.5]").unwrap();
        let cfg = ScenarioConfig::from_value(v.clone()).unwrap();
        assert_eq!(cfg.solver.max_iter, 3);
        assert_eq!(cfg.solver.mode, PsiMode::Direct);
        assert_eq!(cfg.populations[0].x0, vec![1.5]);
        assert!(apply_override(&mut v, "populations.9.x0", "1").is_err());
        assert!(apply_override(&mut v, "solver..mode", "1").is_err());
    }

    #[test]
    fn game_scenarios_assemble() {
        let s = builtin("bounded-adjoint-game").unwrap();
        let game = s.game().unwrap();
        assert_eq!(game.populations(), 1);
        let system = s.system().unwrap();
        let m = vec![EmpiricalMeasure::dirac(&[2.0]).unwrap()];
        let z = [0.0];
        let zv = ZView::from_slice(&z, 1, 1);
        let bundle = system.bundle(0);
        // Above the threshold: right derivative c plus c y.
        assert!((bundle.f(0.0, &[1.5], &[0.4], zv, &m)[0] - (1.0 + 0.4)).abs() < 1e-15);
        assert!((bundle.f(0.0, &[0.5], &[0.4], zv, &m)[0] - 0.4).abs() < 1e-15);
        let pull = -0.5 * 2.0f64.tanh();
        assert!((bundle.b(0.0, &[1.5], &[0.4], zv, &m)[0] - (pull - 0.2)).abs() < 1e-15);
        assert!((bundle.b(0.0, &[1.5], &[-0.4], zv, &m)[0] - pull).abs() < 1e-15);
        assert!((bundle.h(0.0, &[1.5])[0] - 1.5).abs() < 1e-15);

        let mut cfg = s.config().clone();
        cfg.game.as_mut().unwrap().hooks = HookMode::FiniteDifference;
        let fd = Scenario::from_config(cfg).unwrap().system().unwrap();
        let b_fd = fd.bundle(0).b(0.0, &[1.5], &[0.4], zv, &m)[0];
        assert!((b_fd - (pull - 0.2)).abs() < 1e-7, "{b_fd}");
        assert_eq!(
            scenario_bounded_adjoint_game(0.0, 1.0, 1.0).unwrap_err(),
            Error::InvalidArgument("c_lip 0 must be positive".into())
        );
    }

    #[test]
    fn init_flows() {
        let s = builtin("mean-reverting").unwrap();
        let flows = s.multistart_flows();
        // Reference flows simulate n_particles, keep this test light.
        assert!(flows.is_ok());
        let flows = flows.unwrap();
        assert_eq!(flows.len(), 3);
        assert_eq!(flows[0].measure(50, 0).mean(), &[0.0]);
        assert_eq!(flows[2].measure(50, 0).mean(), &[2.0]);
        assert_eq!(flows[1].measure(50, 0).len(), s.solver().n_particles);
        let sine = s.flow(&InitSpec::DiracSine { amplitude: 2.0 }).unwrap();
        assert!((sine.measure(100, 0).mean()[0] - 2.0 * 1.0f64.sin()).abs() < 1e-15);
    }
}
