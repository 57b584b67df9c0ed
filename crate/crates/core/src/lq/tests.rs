use super::*;
use crate::exec::Sequential;
use crate::filters::kalman_bucy;
use crate::model::FiniteModel;
use crate::rng::PathSeed;
use crate::sim::{sample_lg_path, BundleSpec, PathSource};
use nalgebra::{DMatrix, DVector};

fn canonical_grid(n: usize) -> TimeGrid {
    TimeGrid::new(1.0, n).unwrap()
}

#[test]
fn marginal_law_two_state() {
    let model = FiniteModel::canonical().with_prior(DVector::from_vec(vec![1.0, 0.0])).unwrap();
    let grid = canonical_grid(100);
    let (rho, eq) = marginal_moments(&model, &grid);
    for k in [0, 37, 100] {
        let t = grid.t(k);
        assert!((rho.get(k)[1] - 0.5 * (1.0 - (-2.0 * t).exp())).abs() < 1e-8);
        // ρ(Q) for the symmetric chain is [[1,-1],[-1,1]] regardless of ρ
        assert!((eq.get(k)[0] - 1.0).abs() < 1e-12);
    }
    let frozen = FiniteModel::canonical().with_generator(DMatrix::zeros(2, 2)).unwrap();
    let (rho, _) = marginal_moments(&frozen, &grid);
    assert_eq!(rho.last(), &[0.5, 0.5]);
}

#[test]
fn expected_covariation_matches_monte_carlo() {
    let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.6, 0.4, 0.2, -0.5, 0.3, 1.0, 1.0, -2.0]);
    let model = FiniteModel::new(
        a,
        DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_vec(vec![1.0, 0.0, 0.0]),
        1.0,
    )
    .unwrap();
    let grid = canonical_grid(20);
    let (_, eq) = marginal_moments(&model, &grid);
    let spec = BundleSpec::new(model.clone(), grid, 20_000, 4).unwrap();
    let qs: Vec<f64> = (0..spec.n_paths)
        .map(|i| {
            let x = spec.path(i).0.terminal();
            crate::algebra::jump_covariation(model.a(), x).unwrap()[(0, 1)]
        })
        .collect();
    let mc = crate::stats::MeanSe::of(&qs);
    assert!((mc.mean - eq.last()[1]).abs() < 3.0 * mc.se, "{mc:?} {}", eq.last()[1]);
}

#[test]
fn dre_matches_reference_solution() {
    let model = FiniteModel::canonical();
    let s = dre_forward(&model, &canonical_grid(1000)).unwrap();
    // tight-tolerance adaptive integration of the same ODE
    let want = 0.23622663286174686;
    assert!((s.last()[0] - want).abs() < 1e-10);
    assert!((s.last()[1] + want).abs() < 1e-10);
    let fine = dre_forward(&model, &canonical_grid(10_000)).unwrap();
    assert!(linalg::max_abs_diff(s.last(), fine.last()) < 1e-8);

    let single = FiniteModel::new(
        DMatrix::zeros(1, 1),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 1.0),
        1.0,
    )
    .unwrap();
    let s = dre_forward(&single, &canonical_grid(10)).unwrap();
    assert!(s.iter().all(|m| m[0] == 0.0));
}

#[test]
fn lq_solution_matches_reference() {
    let model = FiniteModel::canonical();
    let sol = lq_solve(&model, &[1.0, 0.0], &canonical_grid(1000)).unwrap();
    assert_eq!(sol.y.last().unwrap(), &vec![1.0, 0.0]);
    assert!((sol.y[0][0] - 0.5058477073905321).abs() < 1e-10);
    assert!((sol.y[0][1] - 0.3992979240847421).abs() < 1e-10);
    assert!((sol.initial_term - 0.0014191070403138507).abs() < 1e-10);
    assert!((sol.value - 0.11811331643087024).abs() < 1e-10);
}

#[test]
fn lq_without_observations_is_open_loop() {
    let model = FiniteModel::canonical()
        .with_observation(DMatrix::zeros(2, 1), DMatrix::from_element(1, 1, 1.0))
        .unwrap();
    let sol = lq_solve(&model, &[1.0, 0.0], &canonical_grid(500)).unwrap();
    assert!(sol.u.iter().all(|u| u[0] == 0.0));
    // y_t = e^{A(T−t)} f, and the value is ½ Var f(X_T) = 1/8 under the stationary prior
    let e = (-2.0f64).exp();
    assert!((sol.y[0][0] - (0.5 + 0.5 * e)).abs() < 1e-10);
    assert!((sol.value - 0.125).abs() < 1e-10);
}

#[test]
fn constants_are_free() {
    // equal rows of H: a constant f needs no control and costs nothing
    let model = FiniteModel::canonical()
        .with_observation(DMatrix::from_row_slice(2, 1, &[0.7, 0.7]), DMatrix::from_element(1, 1, 1.0))
        .unwrap();
    let sol = lq_solve(&model, &[2.0, 2.0], &canonical_grid(200)).unwrap();
    assert!(sol.value.abs() < 1e-14);
    assert!(sol.u.iter().all(|u| u[0].abs() < 1e-14));
}

#[test]
fn scalar_riccati_reaches_positive_root() {
    let model = LinearGaussianModel::scalar(-1.0, 1.0, 1.0, 1.0, 0.0, 3.0, 10.0).unwrap();
    let s = kalman_riccati(&model, &TimeGrid::new(10.0, 10_000).unwrap()).unwrap();
    assert!((s.last()[0] - 0.41421356237309515).abs() < 1e-6);
    let dev = riccati_duality_check(&model, &TimeGrid::new(10.0, 10_000).unwrap()).unwrap();
    assert!(dev < 1e-8);
}

fn model3() -> LinearGaussianModel {
    LinearGaussianModel::new(
        DMatrix::from_row_slice(3, 3, &[-1.0, 0.3, 0.0, 0.2, -0.7, 0.4, 0.0, -0.3, -1.2]),
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.2, 0.3])),
        DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
        DVector::from_vec(vec![1.0, -1.0, 0.5]),
        DMatrix::identity(3, 3) * 0.8,
        1.0,
    )
    .unwrap()
}

#[test]
fn riccati_duality_on_three_states() {
    let model = model3();
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    let s = kalman_riccati(&model, &grid).unwrap();
    let want = [
        0.2390131870587096,
        0.0476307990318371,
        -0.03549828219658587,
        0.04763079903183709,
        0.16486126020530942,
        0.010699047631301405,
        -0.03549828219658588,
        0.010699047631301402,
        0.17288366882707387,
    ];
    assert!(linalg::max_abs_diff(s.last(), &want) < 1e-10);
    assert!(riccati_duality_check(&model, &grid).unwrap() < 1e-8);
    let lyap = LinearGaussianModel::new(
        model.a().clone(),
        DMatrix::zeros(2, 3),
        DMatrix::zeros(3, 3),
        model.r().clone(),
        model.m0().clone(),
        model.sigma0().clone(),
        1.0,
    )
    .unwrap();
    assert!(riccati_duality_check(&lyap, &grid).unwrap() < 1e-8);
}

#[test]
fn dual_estimator_equals_kalman_projection() {
    let model = model3();
    let f = [1.0, 0.5, -2.0];
    let mut devs = Vec::new();
    for n in [250, 500, 1000] {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let mut worst = 0.0f64;
        for p in 0..5 {
            let (_, obs) = sample_lg_path(&model, &grid, PathSeed::new(21, p));
            let s = dual_estimator_lg(&model, &f, &obs).unwrap();
            let kf = kalman_bucy(&model, &obs).unwrap();
            worst = worst.max((s - linalg::dot(&f, kf.terminal_mean())).abs());
        }
        devs.push(worst);
    }
    assert!(devs[2] < devs[0], "{devs:?}");
    assert!(devs[2] < 1e-3, "{devs:?}");
    let (_, obs) = sample_lg_path(&model, &TimeGrid::new(1.0, 50).unwrap(), PathSeed::new(1, 0));
    assert_eq!(dual_estimator_lg(&model, &[0.0; 3], &obs).unwrap(), 0.0);
}

#[test]
fn no_information_estimate_is_prior_prediction() {
    let model = LinearGaussianModel::scalar(-0.5, 0.0, 1.0, 1.0, 2.0, 1.0, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let (_, obs) = sample_lg_path(&model, &grid, PathSeed::new(3, 3));
    let s = dual_estimator_lg(&model, &[1.0], &obs).unwrap();
    assert!((s - 2.0 * (-0.5f64).exp()).abs() < 1e-9);
}

#[test]
fn lq_value_is_half_mse_of_its_estimator() {
    let model = FiniteModel::canonical();
    let grid = canonical_grid(200);
    let sol = lq_solve(&model, &[1.0, 0.0], &grid).unwrap();
    let bundle = BundleSpec::new(model.clone(), grid, 20_000, 77).unwrap().materialize(&Sequential);
    let errs: Vec<f64> = (0..bundle.len())
        .map(|i| {
            let s = estimate_with(&sol, model.prior().as_slice(), &bundle.obs[i]);
            let fx = if bundle.states[i].terminal() == 0 { 1.0 } else { 0.0 };
            0.5 * (s - fx) * (s - fx)
        })
        .collect();
    let mc = crate::stats::MeanSe::of(&errs);
    assert!((mc.mean - sol.value).abs() < 3.0 * mc.se + 1e-3, "{mc:?} {}", sol.value);
}
