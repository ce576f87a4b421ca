//! Randomized invariants over the public API.

use covtune::assim::{blue_analysis, cost_j, ensemble_covariance, Ensemble, JoResidual};
use covtune::covmat::{
    build_sw_covariance, cholesky_lower, hybrid_regularize, sample_lorenz_r_params, soar, spd_from_lorenz_params,
    symmetrize, SW_LENGTH_SCALE,
};
use covtune::datagen::{build_dataset, CovParams, GenConfig, ProblemKind};
use covtune::dynmodels::{ObservationOperator, SwParams};
use covtune::experiment::{epsilon_mse, epsilon_std_mse};
use covtune::tuning::{d05_expectation, d05_iterate, di01_tune, AssimilationWindow, LinearGaussianWindow};
use covtune::{CovarianceMatrix, DMatrix, DVector, RandomSource, SwRParams};
use proptest::prelude::*;

fn spd3(rng: &mut RandomSource) -> CovarianceMatrix {
    spd_from_lorenz_params(&sample_lorenz_r_params(rng)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_parameters_give_spd_matrices(seed in any::<u64>(), side in 2usize..6) {
        let mut rng = RandomSource::new(seed);
        prop_assert!(cholesky_lower(spd3(&mut rng).matrix()).is_ok());
        let sw = build_sw_covariance(&SwRParams::sample(side, &mut rng), SW_LENGTH_SCALE).unwrap();
        prop_assert!(cholesky_lower(sw.matrix()).is_ok());
    }

    #[test]
    fn soar_is_bounded_and_decreasing(d in 0.0f64..50.0, step in 1e-3f64..5.0, l in 0.5f64..20.0) {
        let a = soar(d, l).unwrap();
        let b = soar(d + step, l).unwrap();
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!(b < a);
    }

    #[test]
    fn symmetrize_then_regularize_keeps_trace(v in proptest::collection::vec(-3.0f64..3.0, 9), mu in 0.01f64..0.99) {
        let a = DMatrix::from_vec(3, 3, v);
        let m = &a * a.transpose() + DMatrix::identity(3, 3);
        let s = symmetrize(&m).unwrap();
        prop_assert_eq!(symmetrize(&s).unwrap(), s.clone());
        prop_assert!(rel(hybrid_regularize(&s, mu).unwrap().trace(), s.trace()) <= 1e-12);
    }

    #[test]
    fn observation_operators_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = RandomSource::new(seed);
        let p = SwParams { nx: 6, ny: 6, ..SwParams::default() };
        for op in [ObservationOperator::lorenz(), ObservationOperator::grid_average(&p).unwrap()] {
            let n = op.input_dim();
            let s1: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let s2: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let lhs = op.apply(&mix).unwrap();
            let rhs = op.apply(&s1).unwrap() * a + op.apply(&s2).unwrap() * b;
            prop_assert!((&lhs - &rhs).amax() <= 1e-12 * (1.0 + rhs.amax()));
        }
    }

    #[test]
    fn blue_is_identity_without_innovation_and_minimizes_j(seed in any::<u64>()) {
        let mut rng = RandomSource::new(seed);
        let (b, r) = (spd3(&mut rng), spd3(&mut rng));
        let h = ObservationOperator::lorenz().dense();
        let xb = DVector::from_fn(3, |_, _| 5.0 * rng.normal());
        let same = blue_analysis(&xb, &(&h * &xb), b.matrix(), &r, &h).unwrap();
        prop_assert_eq!(same.xa, xb.clone());
        let y = &h * &xb + DVector::from_fn(3, |_, _| rng.normal());
        let xa = blue_analysis(&xb, &y, b.matrix(), &r, &h).unwrap().xa;
        let ja = cost_j(&xa, &xb, &y, &b, &r, &h).unwrap().total;
        for _ in 0..20 {
            let x = &xa + DVector::from_fn(3, |_, _| rng.normal());
            prop_assert!(ja <= cost_j(&x, &xb, &y, &b, &r, &h).unwrap().total);
        }
    }

    #[test]
    fn ensemble_covariance_ignores_member_order(seed in any::<u64>(), m in 3usize..12) {
        let mut rng = RandomSource::new(seed);
        let members: Vec<DVector<f64>> = (0..m).map(|_| DVector::from_fn(3, |_, _| rng.normal())).collect();
        let mut rev = members.clone();
        rev.reverse();
        rev.rotate_left(1);
        let a = ensemble_covariance(&Ensemble::new(members).unwrap());
        let b = ensemble_covariance(&Ensemble::new(rev).unwrap());
        prop_assert!((a - b).amax() <= 1e-12);
    }

    #[test]
    fn di01_rescales_without_changing_correlation(seed in any::<u64>(), s in 0.2f64..5.0) {
        let mut rng = RandomSource::new(seed);
        let (b, r) = (spd3(&mut rng), spd3(&mut rng));
        let h = ObservationOperator::lorenz().dense();
        let w = LinearGaussianWindow::sample(&b, &r, &h, 50, &mut rng).unwrap();
        let r0 = r.scaled(s).unwrap();
        let out = di01_tune(&w, &r0, 3, JoResidual::Analysis).unwrap();
        let shape0 = r0.matrix() / r0.trace();
        for st in &out.trace {
            let shape = st.r.matrix() / st.r.trace();
            prop_assert!((shape - &shape0).amax() <= 1e-12);
        }
    }

    #[test]
    fn d05_products_match_double_loop_and_output_is_spd(seed in any::<u64>(), mu in 0.05f64..0.95) {
        let mut rng = RandomSource::new(seed);
        let (b, r) = (spd3(&mut rng), spd3(&mut rng));
        let h = ObservationOperator::lorenz().dense();
        let w = LinearGaussianWindow::sample(&b, &r, &h, 40, &mut rng).unwrap();
        let records: Vec<_> = w.run(1.0, &r, JoResidual::Analysis).unwrap().into_iter().map(|d| d.record).collect();
        let fast = d05_expectation(&records).unwrap();
        let mut slow = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                for rec in &records {
                    slow[(i, j)] += rec.d_a[i] * rec.d_b[j];
                }
                slow[(i, j)] /= records.len() as f64;
            }
        }
        prop_assert!((fast - slow).amax() <= 1e-12 * (1.0 + r.matrix().amax()));
        let out = d05_iterate(&r.scaled(3.0).unwrap(), &w, 2, mu).unwrap();
        prop_assert!(cholesky_lower(out.r.matrix()).is_ok());
    }

    #[test]
    fn parameter_normalization_round_trips(seed in any::<u64>()) {
        let mut rng = RandomSource::new(seed);
        let lz = CovParams::Lorenz(sample_lorenz_r_params(&mut rng)).to_vec();
        let sw = CovParams::ShallowWater(SwRParams::sample(4, &mut rng)).to_vec();
        for (kind, p) in [(ProblemKind::Lorenz, lz), (ProblemKind::ShallowWater, sw)] {
            let back = kind.denormalize_params(&kind.normalize_params(&p));
            for (a, b) in back.iter().zip(&p) {
                prop_assert!(rel(*a, *b) <= 1e-12 || (a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn metrics_ignore_example_and_member_order(seed in any::<u64>()) {
        let mut rng = RandomSource::new(seed);
        let truth: Vec<Vec<DVector<f64>>> = (0..3)
            .map(|_| (0..5).map(|_| DVector::from_fn(2, |_, _| 1.0 + rng.normal())).collect())
            .collect();
        let runs: Vec<Vec<Vec<DVector<f64>>>> = truth
            .iter()
            .map(|tr| tr.iter().map(|x| (0..4).map(|_| x + DVector::from_fn(2, |_, _| rng.normal())).collect()).collect())
            .collect();
        let mut runs_p = runs.clone();
        let mut truth_p = truth.clone();
        runs_p.reverse();
        truth_p.reverse();
        for ex in runs_p.iter_mut() {
            for step in ex.iter_mut() {
                step.reverse();
            }
        }
        let a = epsilon_mse(&runs, &truth).unwrap();
        let b = epsilon_mse(&runs_p, &truth_p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(rel(*x, *y) <= 1e-12);
        }
        let a = epsilon_std_mse(&runs, &truth).unwrap();
        let b = epsilon_std_mse(&runs_p, &truth_p).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!(rel(*x, *y) <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generated_parameters_stay_in_range(seed in any::<u64>()) {
        for kind in [ProblemKind::Lorenz, ProblemKind::ShallowWater] {
            let mut g = GenConfig::for_kind(kind);
            g.steps = 5;
            g.sw.nx = 6;
            g.sw.ny = 6;
            let d = build_dataset(&g, 10, &RandomSource::new(seed)).unwrap();
            for s in &d.samples {
                prop_assert!(CovParams::from_slice(kind, &s.params).unwrap().in_range());
            }
        }
    }
}
