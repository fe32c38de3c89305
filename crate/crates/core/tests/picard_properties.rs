use mffbsde::measure_flow::{flow_distance, holder_modulus, EmpiricalMeasure, MeasureFlow};
use mffbsde::picard::{iterate, psi_map, FixedPointReport, PsiConfig, PsiMode};
use mffbsde::rng::derive_seed;
use mffbsde::scenarios::{builtin, Scenario};

const N: usize = 20_000;

fn scenario() -> Scenario {
    builtin("mean-reverting").unwrap()
}

fn config(scenario: &Scenario, mode: PsiMode) -> PsiConfig {
    PsiConfig { mode, n_particles: N, ..scenario.solver().clone() }
}

fn run(scenario: &Scenario, mode: PsiMode) -> FixedPointReport {
    let report = iterate(&scenario.system().unwrap(), &scenario.initial_flow().unwrap(), &config(scenario, mode)).unwrap();
    assert!(report.converged, "{mode:?}: {:?}", report.rho_history);
    report
}

/// Standard error of a weighted sample mean with normalized weights.
fn mean_std_error(m: &EmpiricalMeasure) -> f64 {
    let mean = m.mean()[0];
    m.samples().iter().zip(m.weights()).map(|(x, w)| (w * (x - mean)).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn girsanov_and_direct_means_agree() {
    let s = scenario();
    let girsanov = run(&s, PsiMode::Girsanov).final_flow;
    let direct = run(&s, PsiMode::Direct).final_flow;
    for k in 0..s.grid().len() {
        let (a, b) = (girsanov.measure(k, 0), direct.measure(k, 0));
        let pooled = (mean_std_error(a).powi(2) + mean_std_error(b).powi(2)).sqrt();
        let gap = (a.mean()[0] - b.mean()[0]).abs();
        assert!(gap <= 3.0 * pooled + 1e-12, "step {k}: gap {gap}, pooled se {pooled}");
    }
}

#[test]
fn converged_flow_is_reproduced_with_fresh_seeds() {
    let s = scenario();
    let cfg = config(&s, PsiMode::Girsanov);
    let report = run(&s, PsiMode::Girsanov);
    let system = s.system().unwrap();
    let fresh: Vec<f64> = (0..5u64)
        .map(|j| {
            let seeded = PsiConfig { seed: derive_seed(0xf4e5, &[j]), ..cfg.clone() };
            flow_distance(&report.final_flow, &psi_map(&system, &report.final_flow, &seeded).unwrap()).unwrap()
        })
        .collect();
    let mean = fresh.iter().sum::<f64>() / 5.0;
    let se = (fresh.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 4.0).sqrt() / 5f64.sqrt();
    for rho in &fresh {
        assert!(*rho <= cfg.tol + 3.0 * se, "rho {rho}, tol {}, se {se}", cfg.tol);
    }
}

fn converged_flow(s: &Scenario) -> MeasureFlow {
    run(s, PsiMode::Girsanov).final_flow
}

#[test]
fn holder_modulus_is_stable_under_step_halving() {
    let coarse = scenario();
    let fine = coarse.refined().unwrap();
    assert_eq!(fine.grid().n_steps(), 2 * coarse.grid().n_steps());
    let h_coarse = holder_modulus(&converged_flow(&coarse)).unwrap();
    let h_fine = holder_modulus(&converged_flow(&fine)).unwrap();
    assert!(h_coarse.is_finite() && h_fine.is_finite());
    let ratio = h_coarse.max(h_fine) / h_coarse.min(h_fine);
    assert!(ratio < 2.0, "coarse {h_coarse}, fine {h_fine}");
}
