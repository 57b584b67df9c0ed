//! The ordering of dual costs on the canonical model: zero control, the LQ
//! schedule, regression feedback and the value function.

use dualfilter_core::dual::{
    cost_J, duality_gaps, path_outcomes, policy_iteration, BasisSpec, ControlPolicy, DualField, FilteredBundle,
};
use dualfilter_core::lq::lq_solve;
use dualfilter_core::sde::Scheme;
use dualfilter_core::sim::BundleSpec;
use dualfilter_core::stats::MeanSe;
use dualfilter_core::{FiniteModel, Sequential, TimeGrid};

const F: [f64; 2] = [1.0, 0.0];

/// Mean and SE of `a_i − b_i` over shared paths.
fn paired(a: &[f64], b: &[f64]) -> MeanSe {
    MeanSe::of(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

#[test]
fn optimality_chain() {
    let model = FiniteModel::canonical();
    let g = TimeGrid::new(1.0, 250).unwrap();
    let spec = BundleSpec::new(model.clone(), g, 6000, 41).unwrap();
    let bundle = FilteredBundle::new(&spec, Scheme::Milstein, &Sequential).unwrap();

    let zero = ControlPolicy::zero(&g, 1);
    let zero_cost = cost_J(&zero, None, &F, &bundle, Scheme::Milstein, &Sequential).unwrap();
    let lq = lq_solve(&model, &F, &g).unwrap();
    let lq_policy = ControlPolicy::schedule(&g, lq.schedule()).unwrap();
    let lq_cost = cost_J(&lq_policy, None, &F, &bundle, Scheme::Milstein, &Sequential).unwrap();
    assert!((zero_cost.j.mean - 0.125).abs() < 1e-9, "{zero_cost:?}");
    assert!((lq_cost.closed_form.unwrap() - lq.value).abs() < 1e-8);

    // Every policy's cost is ½E|S_T − fᵀX_T|²; compare paths pairwise.
    let iter = policy_iteration(&F, &bundle, BasisSpec::quadratic(), 2, &Sequential).unwrap();
    let reg_field = iter.fields.last().unwrap().as_ref() as &dyn DualField;
    let outcomes = path_outcomes(
        &[(&zero, None), (&lq_policy, None), (iter.final_policy(), Some(reg_field))],
        &F,
        &bundle,
        Scheme::Milstein,
        &Sequential,
    )
    .unwrap();
    let half: Vec<Vec<f64>> = outcomes.iter().map(|o| o.iter().map(|p| p.half_mse()).collect()).collect();
    let value: Vec<f64> = outcomes[2].iter().map(|p| p.terminal_value).collect();
    // given the observations, ½|S_T − fᵀX_T|² averages to ½|S_T − π_T(f)|² + 𝒱(f; π_T)
    let excess: Vec<Vec<f64>> =
        outcomes.iter().map(|o| o.iter().map(|p| 0.5 * (p.s_t - p.pi_f).powi(2)).collect()).collect();

    let d = paired(&half[0], &half[1]);
    assert!(d.mean > 2.0 * d.se, "zero vs lq {d:?}");
    let d = paired(&excess[1], &excess[2]);
    assert!(d.mean > 2.0 * d.se, "lq vs regression {d:?}");
    let d = paired(&half[2], &value);
    assert!(d.mean >= -2.0 * d.se, "regression vs value {d:?}");
    assert!(MeanSe::of(&excess[1]).mean > 0.0);
}

#[test]
fn duality_gap_holds_for_every_tested_policy() {
    let model = FiniteModel::canonical();
    let g = TimeGrid::new(1.0, 200).unwrap();
    let spec = BundleSpec::new(model.clone(), g, 8000, 43).unwrap();
    let lq = lq_solve(&model, &F, &g).unwrap();
    let policies = [ControlPolicy::zero(&g, 1), ControlPolicy::schedule(&g, lq.schedule()).unwrap()];
    let pairs: Vec<_> = policies.iter().map(|p| (p, None)).collect();
    let gaps = duality_gaps(&pairs, &F, &spec, Scheme::Milstein, &Sequential).unwrap();
    for (p, gap) in policies.iter().zip(&gaps) {
        assert!(gap.within(3.0), "{}: {gap:?}", p.kind());
    }
}
