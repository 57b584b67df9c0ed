use super::*;
use crate::exec::Sequential;
use crate::model::{PriorDensity, ScalarFn};
use crate::rng::PathSeed;
use crate::sim::{sample_lg_path, simulate_path, BundleSpec, PathSource};
use crate::stats::{loglog_slope, MeanSe};

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(1.0, n).unwrap()
}

/// Discrete-time HMM filter: exact two-state transition kernel and
/// Gaussian likelihood of each increment.
fn hmm_reference(obs: &ObsPath) -> Vec<f64> {
    let dt = obs.grid.dt();
    let e = (-2.0 * dt).exp();
    let (stay, jump) = (0.5 + 0.5 * e, 0.5 - 0.5 * e);
    let mut p = [0.5, 0.5];
    for k in 0..obs.grid.n_steps() {
        let pred = [p[0] * stay + p[1] * jump, p[0] * jump + p[1] * stay];
        let dz = obs.dz[k];
        // h = (1, 0), R = 1
        let l0 = (dz - 0.5 * dt).exp();
        let w = [pred[0] * l0, pred[1]];
        let s = w[0] + w[1];
        p = [w[0] / s, w[1] / s];
    }
    p.to_vec()
}

#[test]
fn uninformative_filter_is_forward_equation() {
    let model = FiniteModel::canonical()
        .with_observation(DMatrix::zeros(2, 1), DMatrix::from_element(1, 1, 1.0))
        .unwrap()
        .with_prior(DVector::from_vec(vec![0.9, 0.1]))
        .unwrap();
    let g = grid(1000);
    let (_, obs) = simulate_path(&model, &g, PathSeed::new(1, 0));
    let f = wonham_filter(&model, &obs).unwrap();
    let want = 0.5 + 0.4 * (-2.0f64).exp();
    assert!((f.terminal()[0] - want).abs() < 2e-3);
    assert!(f.di.iter().zip(&obs.dz).all(|(a, b)| a == b));
}

#[test]
fn degenerate_prior_stays_put() {
    let model = FiniteModel::canonical()
        .with_generator(DMatrix::zeros(2, 2))
        .unwrap()
        .with_prior(DVector::from_vec(vec![0.0, 1.0]))
        .unwrap();
    let (_, obs) = simulate_path(&model, &grid(100), PathSeed::new(2, 0));
    let f = wonham_filter(&model, &obs).unwrap();
    assert!(f.pi.iter().all(|p| p == [0.0, 1.0]));
}

#[test]
fn wonham_agrees_with_fine_hmm_filter() {
    let model = FiniteModel::canonical();
    let fine = grid(10_000);
    let mut diffs = Vec::new();
    for p in 0..100 {
        let (_, obs) = simulate_path(&model, &fine, PathSeed::new(9, p));
        let reference = hmm_reference(&obs);
        let coarse = obs.coarsen(10).unwrap();
        let f = wonham_filter(&model, &coarse).unwrap();
        diffs.push((f.terminal()[0] - reference[0]).abs());
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean < 2e-2, "{mean}");
}

#[test]
fn filter_mean_is_a_martingale() {
    let model = FiniteModel::canonical().with_prior(DVector::from_vec(vec![0.8, 0.2])).unwrap();
    let spec = BundleSpec::new(model.clone(), grid(500), 4000, 12).unwrap();
    let vals: Vec<f64> = (0..spec.n_paths)
        .map(|i| wonham_filter(&model, &spec.path(i).1).unwrap().terminal()[0])
        .collect();
    let mc = MeanSe::of(&vals);
    let want = 0.5 + 0.3 * (-2.0f64).exp();
    assert!((mc.mean - want).abs() < 3.0 * mc.se, "{mc:?} {want}");
}

#[test]
fn innovations_are_white() {
    let model = FiniteModel::canonical();
    let spec = BundleSpec::new(model.clone(), grid(200), 2000, 13).unwrap();
    let b = spec.materialize(&Sequential);
    let mut qv = Vec::new();
    let mut mid = Vec::new();
    for o in &b.obs {
        let f = wonham_filter(&model, o).unwrap();
        qv.push(f.di.iter().map(|x| x * x).sum::<f64>());
        mid.push(f.di[100] / o.grid.dt().sqrt());
    }
    let q = MeanSe::of(&qv);
    assert!((q.mean - 1.0).abs() < 3.0 * q.se + 1e-3, "{q:?}");
    let z = MeanSe::of(&mid);
    assert!(z.mean.abs() < 4.0 * z.se);
    assert!((z.std() - 1.0).abs() < 0.1);
}

#[test]
fn dre_without_observations_tracks_covariance_of_marginal() {
    let model = FiniteModel::canonical()
        .with_observation(DMatrix::zeros(2, 1), DMatrix::from_element(1, 1, 1.0))
        .unwrap()
        .with_prior(DVector::from_vec(vec![0.9, 0.1]))
        .unwrap();
    let (_, obs) = simulate_path(&model, &grid(1000), PathSeed::new(4, 0));
    let f = wonham_filter(&model, &obs).unwrap();
    let s = sigma_dre_step(&f, &model).unwrap();
    assert!(dre_tracking_error(&f, &s) < 1e-3);

    let frozen = model.with_generator(DMatrix::zeros(2, 2)).unwrap();
    let f = wonham_filter(&frozen, &obs).unwrap();
    let s = sigma_dre_step(&f, &frozen).unwrap();
    assert!(s.iter().all(|m| linalg::max_abs_diff(m, s.get(0)) == 0.0));
}

fn dre_error(scheme: Scheme, n: usize, paths: u64) -> f64 {
    let model = FiniteModel::canonical();
    let fine = grid(4000);
    let mut total = 0.0;
    for p in 0..paths {
        let (_, obs) = simulate_path(&model, &fine, PathSeed::new(31, p));
        let obs = obs.coarsen(4000 / n).unwrap();
        let f = wonham_filter_with(&model, &obs, scheme).unwrap();
        let s = sigma_dre_step(&f, &model).unwrap();
        total += dre_tracking_error(&f, &s);
    }
    total / paths as f64
}

#[test]
fn dre_tracking_converges_at_order_one_with_milstein() {
    let dts = [4e-3, 2e-3, 1e-3];
    let errs: Vec<f64> = [250, 500, 1000].iter().map(|&n| dre_error(Scheme::Milstein, n, 40)).collect();
    let slope = loglog_slope(&dts, &errs);
    assert!((slope - 1.0).abs() < 0.3, "{errs:?} {slope}");
    assert!(errs[2] < 5e-2);
}

#[test]
fn kalman_without_observations_is_open_loop() {
    let model = LinearGaussianModel::scalar(-0.5, 0.0, 1.0, 1.0, 2.0, 0.5, 1.0).unwrap();
    let (_, obs) = sample_lg_path(&model, &grid(1000), PathSeed::new(5, 0));
    let kf = kalman_bucy(&model, &obs).unwrap();
    assert!((kf.terminal_mean()[0] - 2.0 * (-0.5f64).powi(1).exp()).abs() < 1e-3);
    // Lyapunov: s' = −s + 1 from 0.5 gives 1 − 0.5e^{−1}
    assert!((kf.cov.last()[0] - (1.0 - 0.5 * (-1.0f64).exp())).abs() < 1e-10);
}

#[test]
fn riccati_blow_up_is_reported() {
    let model = LinearGaussianModel::scalar(0.0, 30.0, 0.0, 1e-4, 0.0, 1.0, 1.0).unwrap();
    let err = kalman_riccati(&model, &grid(10)).unwrap_err();
    assert!(matches!(err, Error::RiccatiBlowUp { .. }), "{err:?}");
}

fn ou_model() -> Diffusion1DModel {
    Diffusion1DModel {
        drift: ScalarFn::linear(-1.0),
        sigma: ScalarFn::constant(1.0),
        obs: vec![ScalarFn::linear(1.0)],
        r: DMatrix::from_element(1, 1, 1.0),
        prior: PriorDensity::Gaussian { mean: 0.5, std: 1.0 },
        domain: [-5.0, 5.0],
        horizon: 1.0,
        epsilon: 1e-3,
    }
}

#[test]
fn grid_kushner_approaches_kalman() {
    let diff = ou_model();
    let lg = LinearGaussianModel::scalar(-1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0).unwrap();
    let mut errs = [0.0; 3];
    for p in 0..10 {
        let (_, obs) = sample_lg_path(&lg, &grid(1000), PathSeed::new(17, p));
        let kf = kalman_bucy(&lg, &obs).unwrap();
        for (e, n) in errs.iter_mut().zip([51, 101, 201]) {
            let (traj, nodes) = grid_kushner(&diff, n, &obs).unwrap();
            let (mean, _) = *grid_moments(&traj, &nodes).last().unwrap();
            *e += (mean - kf.terminal_mean()[0]).abs() / 10.0;
        }
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 0.02, "{errs:?}");
}

#[test]
fn grid_kushner_without_observations_spreads_like_heat_kernel() {
    let mut diff = ou_model();
    diff.drift = ScalarFn::constant(0.0);
    diff.obs = vec![ScalarFn::constant(0.0)];
    diff.prior = PriorDensity::Gaussian { mean: 0.0, std: 0.5 };
    let (_, obs) = simulate_path(&FiniteModel::canonical(), &grid(1000), PathSeed::new(2, 2));
    let (traj, nodes) = grid_kushner(&diff, 201, &obs).unwrap();
    let (mean, var) = *grid_moments(&traj, &nodes).last().unwrap();
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.25).abs() < 2e-2, "{var}");
}

#[test]
fn point_mass_prior_stays_local() {
    let mut diff = ou_model();
    diff.prior = PriorDensity::PointMass { x: 1.0 };
    let (_, obs) = simulate_path(&FiniteModel::canonical(), &TimeGrid::new(1.0, 1000).unwrap(), PathSeed::new(3, 1));
    let short = ObsPath::new(TimeGrid::new(0.01, 10).unwrap(), 1, obs.dz[..10].to_vec()).unwrap();
    let mut d = diff.clone();
    d.horizon = 0.01;
    let (traj, nodes) = grid_kushner(&d, 201, &short).unwrap();
    let p = traj.terminal();
    let argmax = (0..p.len()).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
    assert!((nodes[argmax] - 1.0).abs() < 1e-9);
}

#[test]
fn mc_kalman_is_suboptimal() {
    let model = FiniteModel::canonical();
    let g = grid(500);
    let sigma = crate::lq::dre_forward(&model, &g).unwrap();
    let spec = BundleSpec::new(model.clone(), g, 5000, 8).unwrap();
    let mut diff = Vec::new();
    let mut minus = Vec::new();
    for i in 0..spec.n_paths {
        let (x, obs) = spec.path(i);
        let fx = if x.terminal() == 0 { 1.0 } else { 0.0 };
        let w = wonham_filter(&model, &obs).unwrap().terminal()[0];
        let k = mc_kalman(&model, &obs, &sigma).unwrap().terminal_mean()[0];
        diff.push((k - fx).powi(2) - (w - fx).powi(2));
        minus.push(mc_kalman_minus(&model, &obs, &sigma, fx) - (k - fx).powi(2));
    }
    let d = MeanSe::of(&diff);
    assert!(d.mean > 2.0 * d.se, "{d:?}");
    let m = MeanSe::of(&minus);
    assert!(m.mean > 2.0 * m.se, "{m:?}");
}

/// Same recursion with the gain sign flipped; returns the squared error.
fn mc_kalman_minus(model: &FiniteModel, obs: &ObsPath, sigma: &MatPath, fx: f64) -> f64 {
    let dt = obs.grid.dt();
    let a = model.a();
    let mut x = [model.prior()[0], model.prior()[1]];
    for k in 0..obs.grid.n_steps() {
        let innov = obs.dz[k] - x[0] * dt;
        let s = sigma.get(k);
        let ax = [a[(0, 0)] * x[0] + a[(1, 0)] * x[1], a[(0, 1)] * x[0] + a[(1, 1)] * x[1]];
        x = [x[0] + ax[0] * dt - s[0] * innov, x[1] + ax[1] * dt - s[2] * innov];
    }
    (x[0] - fx).powi(2)
}
