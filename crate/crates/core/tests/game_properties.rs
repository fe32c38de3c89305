use mffbsde::mfg::{estimate_cost, solve_equilibrium};
use mffbsde::picard::PsiConfig;
use mffbsde::scenarios::{scenario_bounded_adjoint_game, scenario_custom};

const N: usize = 20_000;

#[test]
fn equilibrium_control_beats_doing_nothing() {
    let s = scenario_bounded_adjoint_game(1.0, 1.0, 0.5).unwrap();
    let game = s.game().unwrap();
    let config = PsiConfig { n_particles: N, ..s.solver().clone() };
    let result = solve_equilibrium(game, &s.initial_flow().unwrap(), &config).unwrap();
    assert!(result.report.converged, "{:?}", result.report.rho_history);

    let table = &result.controls[0];
    let optimal = estimate_cost(game, 0, |k, x| table.eval(k, x), &result.flow, N, 11).unwrap();
    let idle = estimate_cost(game, 0, |_, _| vec![0.0], &result.flow, N, 11).unwrap();
    let pooled = (optimal.std_error.powi(2) + idle.std_error.powi(2)).sqrt();
    assert!(optimal.mean <= idle.mean + 3.0 * pooled, "J(a*) {} vs J(0) {}", optimal.mean, idle.mean);

    let upper = 1f64.exp() - 1.0;
    for y in result.report.solutions[0].y.iter().flatten() {
        assert!((-0.02..=upper + 0.02).contains(y), "adjoint {y}");
    }
}

const LINEAR_QUADRATIC: &str = r#"{
    "name": "lq",
    "populations": [{"bundle": "linear-quadratic", "x0": [1.0]}],
    "grid": {"horizon": 1.0, "dt": 0.02},
    "solver": {"mode": "direct", "n_particles": 20000, "seed": 5},
    "game": {"control_box": {"lower": [-10.0], "upper": [10.0]}}
}"#;

#[test]
fn linear_quadratic_table_matches_adjoint_and_riccati_feedback() {
    let s = scenario_custom(LINEAR_QUADRATIC).unwrap();
    let game = s.game().unwrap();
    let result = solve_equilibrium(game, &s.initial_flow().unwrap(), s.solver()).unwrap();
    assert!(result.report.converged);
    let backward = result.report.solutions[0].backward.as_ref().unwrap();
    let table = &result.controls[0];
    let grid = s.grid();
    for k in (5..grid.n_steps()).step_by(5) {
        let law = result.report.final_flow.measure(k, 0);
        for q in [0.25, 0.5, 0.75] {
            let x = [law.quantile(0, q)];
            let control = table.eval(k, &x)[0];
            let from_adjoint = -backward.evaluate_u(k, &x).unwrap()[0] / 2.0;
            assert!((control - from_adjoint).abs() <= 0.05, "step {k}, x {}: {control} vs {from_adjoint}", x[0]);
            // Value function P(t) x^2 with P' = P^2 - 1, P(T) = 0.
            let riccati = -(grid.horizon() - grid.time(k)).tanh() * x[0];
            assert!((control - riccati).abs() <= 0.05, "step {k}, x {}: {control} vs {riccati}", x[0]);
        }
    }
}
