use mffbsde::coefficients::{CoefficientBundle, Diffusion, Dims, ZView};
use mffbsde::measure_flow::EmpiricalMeasure;
use nalgebra::DMatrix;
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn diffusion_matrix(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |r, c| entries[r * dim + c] + if r == c { 2.0 } else { 0.0 })
}

fn drift_bundle(sigma: Diffusion, dim: usize) -> CoefficientBundle {
    CoefficientBundle::builder("probe", Dims { state: dim, noise: dim, backward: 2 })
        .b(|t, x, _, _, m| x.iter().enumerate().map(|(i, v)| (v * (i + 1) as f64 + t).sin() + m[0].mean()[0]).collect())
        .f(|_, x, y, z, _| {
            (0..2).map(|r| x[0].cos() * y[r] + (0..z.ncols()).map(|c| 0.3 * z[(r, c)]).sum::<f64>()).collect()
        })
        .sigma(sigma)
        .build()
        .unwrap()
}

fn case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, f64)> {
    (1usize..=3).prop_flat_map(|dim| {
        (
            Just(dim),
            prop::collection::vec(-0.5..0.5f64, dim * dim),
            prop::collection::vec(-3.0..3.0f64, dim),
            0.0..1.0f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn diffusion_times_reduced_drift_recovers_drift((dim, entries, x, t) in case()) {
        let sigma = diffusion_matrix(dim, &entries);
        let m = [EmpiricalMeasure::from_values(&[0.25, -1.0]).unwrap()];
        let zero = vec![0.0; 2 * dim];
        let z = ZView::from_slice(&zero, 2, dim);
        let variable = {
            let s = sigma.clone();
            Diffusion::variable(move |_, _| s.clone())
        };
        for diffusion in [Diffusion::constant(sigma.clone()), variable] {
            let bundle = drift_bundle(diffusion, dim);
            let b = bundle.b(t, &x, &[0.0, 0.0], z, &m);
            let reduced = bundle.reduced_drift(t, &x, &[0.0, 0.0], z, &m).unwrap();
            for r in 0..dim {
                let back: f64 = (0..dim).map(|c| sigma[(r, c)] * reduced[c]).sum();
                prop_assert!((back - b[r]).abs() <= TOL, "row {r}: {back} vs {}", b[r]);
            }
        }
    }

    #[test]
    fn shifted_driver_is_affine_in_z(
        (dim, entries, x, t) in case(),
        z1 in prop::collection::vec(-2.0..2.0f64, 6),
        z2 in prop::collection::vec(-2.0..2.0f64, 6),
        y in prop::array::uniform2(-2.0..2.0f64),
    ) {
        let bundle = drift_bundle(Diffusion::constant(diffusion_matrix(dim, &entries)), dim);
        let m = [EmpiricalMeasure::from_values(&[0.5]).unwrap()];
        let w = 2 * dim;
        let sum: Vec<f64> = z1[..w].iter().zip(&z2[..w]).map(|(a, b)| a + b).collect();
        let zero = vec![0.0; w];
        let eval = |z: &[f64]| bundle.shifted_driver(t, &x, &y, ZView::from_slice(z, 2, dim), &m).unwrap();
        let (f12, f1, f2, f0) = (eval(&sum), eval(&z1[..w]), eval(&z2[..w]), eval(&zero));
        for r in 0..2 {
            prop_assert!((f12[r] - f1[r] - f2[r] + f0[r]).abs() <= TOL);
        }
    }
}
