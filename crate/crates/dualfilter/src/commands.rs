//! The `simulate`, `filter`, `dual` and `lq` subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dualfilter_core::dual::{
    cost_J, costate_identity_error, duality_gap, martingale_diagnostic, path_outcomes, policy_iteration, synthesize,
    ControlPolicy, CostReport, DualField, FilteredBundle, GapReport, OptimalField,
};
use dualfilter_core::filters::{grid_kushner, grid_moments, kalman_bucy, mc_kalman, wonham_filter_with};
use dualfilter_core::lq::{dre_forward, lq_solve, lq_solve_lg, riccati_duality_check, LqSolution};
use dualfilter_core::linalg::dot;
use dualfilter_core::model::PriorDensity;
use dualfilter_core::rng::{standard_normal, PathSeed};
use dualfilter_core::sim::{sample_diffusion_path, sample_lg_path, simulate_path, BundleSpec, ObsPath, PathSource};
use dualfilter_core::stats::MeanSe;
use dualfilter_core::{Executor, FiniteModel, TimeGrid, VecPath};
use serde::{Deserialize, Serialize};

use crate::config::{DualAction, Experiment, FilterKind, Model, PolicySpec};
use crate::error::{CliError, Result};
use crate::io::{columns, path_file, write_csv, write_json, Manifest, MANIFEST};

/// Milstein substeps per grid interval for diffusion paths.
pub const DIFFUSION_SUBSTEPS: usize = 10;

/// Everything a subcommand needs.
pub struct Context<E> {
    pub exp: Experiment,
    pub out: PathBuf,
    pub exec: E,
}

/// One simulated path in a model-independent form.
struct Sample {
    /// State at the grid nodes: chain index, or coordinates.
    states: VecPath,
    obs: ObsPath,
}

fn sample(model: &Model, grid: &TimeGrid, seed: u64, i: usize) -> Result<Sample> {
    let ps = PathSeed::new(seed, i as u64);
    Ok(match model {
        Model::Finite(m) => {
            let (s, obs) = simulate_path(m, grid, ps);
            let states = VecPath::from_flat(1, s.on_grid().into_iter().map(|j| j as f64).collect());
            Sample { states, obs }
        }
        Model::LinearGaussian(m) => {
            let (states, obs) = sample_lg_path(m, grid, ps);
            Sample { states, obs }
        }
        Model::Diffusion(m) => {
            let (states, obs) = sample_diffusion_path(m, grid, ps, DIFFUSION_SUBSTEPS)?;
            Sample { states, obs }
        }
    })
}

fn state_columns(model: &Model) -> Vec<String> {
    match model {
        Model::Finite(_) => vec!["state".into()],
        _ => columns("x", model.d()),
    }
}

/// Writes the leading paths as CSV (`t`, state, cumulative `Z`), the
/// terminal table of all paths, and the manifest.
pub fn simulate<E: Executor>(ctx: &Context<E>) -> Result<Manifest> {
    let exp = &ctx.exp;
    let (grid, seed, n) = (exp.grid, exp.config.bundle.seed, exp.config.bundle.n_paths);
    let m = exp.model.m();
    let rows = ctx.exec.map_indexed(n, |i| -> Result<_> {
        let s = sample(&exp.model, &grid, seed, i)?;
        let z = s.obs.cumulative();
        let mut row = vec![i as f64];
        row.extend_from_slice(s.states.last());
        row.extend_from_slice(z.last());
        Ok((row, (i < exp.config.bundle.export_paths).then_some(s)))
    });
    let mut header = vec!["t".to_string()];
    header.extend(state_columns(&exp.model));
    header.extend(columns("z", m));
    let mut exported = Vec::new();
    let mut terminal = Vec::with_capacity(n);
    for r in rows {
        let (row, s) = r?;
        terminal.push(row);
        if let Some(s) = s {
            let file = path_file(Path::new("paths"), exported.len());
            let z = s.obs.cumulative();
            let table = (0..=grid.n_steps()).map(|k| {
                let mut row = vec![grid.t(k)];
                row.extend_from_slice(s.states.get(k));
                row.extend_from_slice(z.get(k));
                row
            });
            write_csv(&ctx.out.join(&file), &header, table)?;
            exported.push(file.to_string_lossy().into_owned());
        }
    }
    let mut term_header = vec!["path".to_string()];
    term_header.extend(header[1..].iter().cloned());
    write_csv(&ctx.out.join("terminal.csv"), &term_header, terminal)?;
    let manifest = Manifest::for_experiment(exp, exported, "terminal.csv".into());
    write_json(&ctx.out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    /// `|estimate − reference|` at `T`.
    pub abs_diff: MeanSe,
    pub prior_std: f64,
    /// Mean absolute difference over the prior standard deviation.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub kind: String,
    pub n_paths: usize,
    pub dt: f64,
    /// Terminal estimate of the target (`fᵀX_T`, or `X_T` for diffusions).
    pub estimate: MeanSe,
    pub truth: MeanSe,
    /// Squared error of the terminal estimate.
    pub mse: MeanSe,
    pub comparison: Option<Comparison>,
    pub exported: Vec<String>,
}

struct FilterRun {
    estimate: f64,
    truth: f64,
    reference: Option<f64>,
    table: Option<Vec<Vec<f64>>>,
}

fn mismatch(what: &str, model: &Model) -> CliError {
    CliError::KindMismatch {
        what: what.to_string(),
        model: model.kind(),
    }
}

/// Runs a filter over the bundle; writes trajectories of the exported
/// paths and a summary.
pub fn filter<E: Executor>(ctx: &Context<E>, kind: FilterKind) -> Result<FilterSummary> {
    let exp = &ctx.exp;
    Manifest::require(&ctx.out, exp)?;
    let ok = matches!(
        (kind, &exp.model),
        (FilterKind::Wonham | FilterKind::McKalman, Model::Finite(_))
            | (FilterKind::Kalman, Model::LinearGaussian(_))
            | (FilterKind::GridKushner, Model::Diffusion(_))
    );
    if !ok {
        return Err(mismatch(&format!("filter {}", kind.name()), &exp.model));
    }
    let (grid, seed, n) = (exp.grid, exp.config.bundle.seed, exp.config.bundle.n_paths);
    let export = exp.config.bundle.export_paths;
    let f = &exp.f;
    let sigma_bar = match (&exp.model, kind) {
        (Model::Finite(m), FilterKind::McKalman) => Some(dre_forward(m, &grid)?),
        _ => None,
    };
    let (reference_lg, prior_std) = match &exp.model {
        Model::Diffusion(m) => (
            m.as_linear_gaussian(),
            match m.prior {
                PriorDensity::Gaussian { std, .. } => std,
                _ => f64::NAN,
            },
        ),
        _ => (None, f64::NAN),
    };
    let d = exp.model.d();
    let header: Vec<String> = {
        let mut h = vec!["t".to_string()];
        match kind {
            FilterKind::Wonham => h.extend(columns("pi", d)),
            FilterKind::Kalman | FilterKind::McKalman => h.extend(columns("mean", d)),
            FilterKind::GridKushner => h.extend(["mean".to_string(), "variance".to_string()]),
        }
        h.push("estimate".into());
        h
    };
    let runs = ctx.exec.map_indexed(n, |i| -> Result<FilterRun> {
        let s = sample(&exp.model, &grid, seed, i)?;
        let keep = i < export;
        let t = |k: usize| grid.t(k);
        let run = match &exp.model {
            Model::Finite(model) => {
                let truth = f[s.states.last()[0] as usize];
                if kind == FilterKind::Wonham {
                    let traj = wonham_filter_with(model, &s.obs, exp.config.scheme)?;
                    let table = keep.then(|| {
                        (0..traj.pi.len())
                            .map(|k| {
                                let mut r = vec![t(k)];
                                r.extend_from_slice(traj.pi.get(k));
                                r.push(dot(traj.pi.get(k), f));
                                r
                            })
                            .collect()
                    });
                    FilterRun { estimate: dot(traj.terminal(), f), truth, reference: None, table }
                } else {
                    let kf = mc_kalman(model, &s.obs, sigma_bar.as_ref().expect("computed above"))?;
                    FilterRun {
                        estimate: dot(kf.terminal_mean(), f),
                        truth,
                        reference: None,
                        table: keep.then(|| mean_table(&kf.mean, f, &grid)),
                    }
                }
            }
            Model::LinearGaussian(model) => {
                let kf = kalman_bucy(model, &s.obs)?;
                FilterRun {
                    estimate: dot(kf.terminal_mean(), f),
                    truth: dot(s.states.last(), f),
                    reference: None,
                    table: keep.then(|| mean_table(&kf.mean, f, &grid)),
                }
            }
            Model::Diffusion(model) => {
                let (traj, nodes) = grid_kushner(model, exp.config.filter.grid_nodes, &s.obs)?;
                let moments = grid_moments(&traj, &nodes);
                let reference = match &reference_lg {
                    Some(lg) => Some(kalman_bucy(lg, &s.obs)?.terminal_mean()[0]),
                    None => None,
                };
                FilterRun {
                    estimate: moments.last().expect("nonempty").0,
                    truth: s.states.last()[0],
                    reference,
                    table: keep.then(|| {
                        moments
                            .iter()
                            .enumerate()
                            .map(|(k, (mean, var))| vec![t(k), *mean, *var, *mean])
                            .collect()
                    }),
                }
            }
        };
        Ok(run)
    });
    let dir = PathBuf::from(format!("filter_{}", kind.name()));
    let (mut est, mut truth, mut sq, mut diff) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut exported = Vec::new();
    for r in runs {
        let r = r?;
        est.push(r.estimate);
        truth.push(r.truth);
        sq.push((r.estimate - r.truth).powi(2));
        if let Some(reference) = r.reference {
            diff.push((r.estimate - reference).abs());
        }
        if let Some(table) = r.table {
            let file = path_file(&dir, exported.len());
            write_csv(&ctx.out.join(&file), &header, table)?;
            exported.push(file.to_string_lossy().into_owned());
        }
    }
    let comparison = (!diff.is_empty()).then(|| {
        let abs_diff = MeanSe::of(&diff);
        Comparison {
            reference: "kalman".into(),
            abs_diff,
            prior_std,
            relative: abs_diff.mean / prior_std,
        }
    });
    let summary = FilterSummary {
        kind: kind.name().into(),
        n_paths: n,
        dt: grid.dt(),
        estimate: MeanSe::of(&est),
        truth: MeanSe::of(&truth),
        mse: MeanSe::of(&sq),
        comparison,
        exported,
    };
    write_json(&ctx.out.join(&dir).join("summary.json"), &summary)?;
    Ok(summary)
}

fn mean_table(mean: &VecPath, f: &[f64], grid: &TimeGrid) -> Vec<Vec<f64>> {
    (0..mean.len())
        .map(|k| {
            let mut r = vec![grid.t(k)];
            r.extend_from_slice(mean.get(k));
            r.push(dot(mean.get(k), f));
            r
        })
        .collect()
}

/// Smooth schedule `u_c(t) = a Σ_{j=1}^{4} (α_jc sin(2πjt/T) + β_jc cos(2πjt/T))/j`
/// with standard normal coefficients drawn from `seed`.
pub fn random_schedule(grid: &TimeGrid, m: usize, amplitude: f64, seed: u64) -> VecPath {
    let mut rng = PathSeed::new(seed, 0).stream(0);
    let coef: Vec<[f64; 2]> = (0..4 * m).map(|_| [standard_normal(&mut rng), standard_normal(&mut rng)]).collect();
    let tau = 2.0 * std::f64::consts::PI / grid.horizon();
    let mut u = VecPath::with_capacity(grid.n_steps() + 1, m);
    let mut row = vec![0.0; m];
    for k in 0..=grid.n_steps() {
        let t = grid.t(k);
        for (c, out) in row.iter_mut().enumerate() {
            *out = amplitude
                * (1..=4)
                    .map(|j| {
                        let [a, b] = coef[(j - 1) * m + c];
                        let w = tau * j as f64 * t;
                        (a * w.sin() + b * w.cos()) / j as f64
                    })
                    .sum::<f64>();
        }
        u.push(&row);
    }
    u
}

/// A policy together with the BSDE solution it is evaluated against.
pub struct BuiltPolicy {
    pub policy: ControlPolicy,
    pub field: Option<Arc<dyn DualField>>,
    pub name: &'static str,
}

impl BuiltPolicy {
    pub fn field(&self) -> Option<&dyn DualField> {
        self.field.as_deref()
    }
}

pub fn build_policy<E: Executor>(
    spec: &PolicySpec,
    model: &FiniteModel,
    f: &[f64],
    source: &BundleSpec,
    exp: &Experiment,
    exec: &E,
) -> Result<BuiltPolicy> {
    let grid = &source.grid;
    Ok(match spec {
        PolicySpec::Zero => BuiltPolicy {
            policy: ControlPolicy::zero(grid, model.m()),
            field: None,
            name: "zero",
        },
        PolicySpec::Lq => BuiltPolicy {
            policy: ControlPolicy::schedule(grid, lq_solve(model, f, grid)?.schedule())?,
            field: None,
            name: "lq",
        },
        PolicySpec::Random { amplitude, seed } => BuiltPolicy {
            policy: ControlPolicy::schedule(grid, random_schedule(grid, model.m(), *amplitude, *seed))?,
            field: None,
            name: "random",
        },
        PolicySpec::Schedule { u } => {
            let mut path = VecPath::with_capacity(u.len(), model.m());
            u.iter().for_each(|r| path.push(r));
            BuiltPolicy {
                policy: ControlPolicy::schedule(grid, path)?,
                field: None,
                name: "schedule",
            }
        }
        PolicySpec::Optimal { pde_nodes } => {
            let field = Arc::new(OptimalField::solve(model, f, grid, *pde_nodes)?);
            BuiltPolicy {
                policy: ControlPolicy::optimal_on(field.clone(), model, "optimal"),
                field: Some(field),
                name: "optimal",
            }
        }
        PolicySpec::PolicyIteration { iterations } => {
            let bundle = FilteredBundle::new(source, exp.config.scheme, exec)?;
            let report = policy_iteration(f, &bundle, exp.config.basis, *iterations, exec)?;
            let field = report.fields.last().expect("at least one field").clone();
            BuiltPolicy {
                policy: report.final_policy().clone(),
                field: if report.final_policy().is_deterministic() {
                    None
                } else {
                    Some(field)
                },
                name: "policy_iteration",
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDoc {
    pub policy: String,
    #[serde(rename = "J")]
    pub j: f64,
    pub se: f64,
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDoc {
    pub policy: String,
    #[serde(rename = "J")]
    pub j: f64,
    pub half_mse: f64,
    pub gap: f64,
    pub se: f64,
    pub allowance: f64,
    pub pass: bool,
    pub report: GapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDoc {
    #[serde(rename = "J")]
    pub j: Vec<f64>,
    pub se: Vec<f64>,
    /// Every iterate costs no more than its predecessor, up to
    /// `gap_se` combined standard errors.
    pub monotone: bool,
    /// Largest increase `J_{k+1} − J_k` along the sequence.
    pub max_increase: f64,
    pub converged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDoc {
    pub policy: String,
    pub trend: MeanSe,
    pub t_stat: f64,
    /// `|t| ≤` the configured bound.
    pub flat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisDoc {
    pub policy: String,
    /// `|S_T − π_T(f)|` over the bundle.
    pub estimator_error: MeanSe,
    /// `sup_k ‖P_k − Σ_kY_k‖∞` on the exported paths.
    pub costate_error: MeanSe,
    pub std_f_x: f64,
    pub exported: Vec<String>,
}

/// Report written by one `dual` action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum DualDoc {
    Cost(CostDoc),
    Gap(GapDoc),
    PolicyIter(IterationDoc),
    Martingale(MartingaleDoc),
    Synthesis(SynthesisDoc),
}

pub fn dual<E: Executor>(ctx: &Context<E>, action: DualAction) -> Result<DualDoc> {
    let exp = &ctx.exp;
    let Model::Finite(model) = &exp.model else {
        return Err(mismatch("the dual control problem", &exp.model));
    };
    Manifest::require(&ctx.out, exp)?;
    let source = BundleSpec::new(model.clone(), exp.grid, exp.config.bundle.n_paths, exp.config.bundle.seed)?;
    let (f, scheme, exec) = (&exp.f[..], exp.config.scheme, &ctx.exec);
    let dir = ctx.out.join("dual");
    let doc = match action {
        DualAction::PolicyIter => {
            let bundle = FilteredBundle::new(&source, scheme, exec)?;
            let report = policy_iteration(f, &bundle, exp.config.basis, exp.config.dual.iterations, exec)?;
            let j: Vec<f64> = report.costs.iter().map(|c| c.j.mean).collect();
            let se: Vec<f64> = report.costs.iter().map(|c| c.j.se).collect();
            write_csv(
                &dir.join("policy_iter.csv"),
                &["iteration".into(), "J".into(), "se".into()],
                j.iter().zip(&se).enumerate().map(|(i, (j, s))| vec![i as f64, *j, *s]),
            )?;
            let k = exp.config.tolerances.gap_se;
            let monotone = (1..j.len()).all(|i| j[i] - j[i - 1] <= k * se[i].hypot(se[i - 1]));
            let max_increase = j.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            DualDoc::PolicyIter(IterationDoc {
                monotone,
                max_increase: if max_increase.is_finite() { max_increase } else { 0.0 },
                j,
                se,
                converged_at: report.converged_at,
            })
        }
        _ => {
            let built = build_policy(&exp.config.policy, model, f, &source, exp, exec)?;
            let name = built.name.to_string();
            match action {
                DualAction::Cost => {
                    let report = cost_J(&built.policy, built.field(), f, &source, scheme, exec)?;
                    DualDoc::Cost(CostDoc {
                        policy: name,
                        j: report.j.mean,
                        se: report.j.se,
                        report,
                    })
                }
                DualAction::Gap => {
                    let r = duality_gap(&built.policy, built.field(), f, &source, scheme, exec)?;
                    DualDoc::Gap(GapDoc {
                        policy: name,
                        j: r.j.mean,
                        half_mse: r.half_mse.mean,
                        gap: r.gap.mean,
                        se: r.gap.se,
                        allowance: r.allowance,
                        pass: r.within(exp.config.tolerances.gap_se) && r.bias_halves(),
                        report: r,
                    })
                }
                DualAction::Martingale => {
                    let r = martingale_diagnostic(&built.policy, built.field(), f, &source, scheme, exec)?;
                    write_csv(
                        &dir.join("martingale.csv"),
                        &["t".into(), "mean".into(), "se".into()],
                        (0..r.times.len()).map(|k| vec![r.times[k], r.mean[k], r.se[k]]),
                    )?;
                    DualDoc::Martingale(MartingaleDoc {
                        policy: name,
                        t_stat: r.t_stat(),
                        flat: r.t_stat().abs() <= exp.config.tolerances.martingale_t,
                        trend: r.trend,
                    })
                }
                DualAction::Synthesis => synthesis(ctx, model, &source, &built, &dir)?,
                DualAction::PolicyIter => unreachable!(),
            }
        }
    };
    write_json(&dir.join(format!("{}.json", action.name())), &doc)?;
    Ok(doc)
}

fn synthesis<E: Executor>(
    ctx: &Context<E>,
    model: &FiniteModel,
    source: &BundleSpec,
    built: &BuiltPolicy,
    dir: &Path,
) -> Result<DualDoc> {
    let exp = &ctx.exp;
    let Some(field) = built.field() else {
        return Err(CliError::config(
            "synthesis needs a policy with a BSDE solution (optimal or policy_iteration)",
        ));
    };
    let (f, scheme) = (&exp.f[..], exp.config.scheme);
    let outcomes = path_outcomes(&[(&built.policy, Some(field))], f, source, scheme, &ctx.exec)?.remove(0);
    let err: Vec<f64> = outcomes.iter().map(|o| o.estimator_error().abs()).collect();
    let fx: Vec<f64> = outcomes.iter().map(|o| o.f_x).collect();
    let (d, m) = (model.d(), model.m());
    let mut header = vec!["t".to_string()];
    header.extend(columns("y", d));
    header.extend(columns("u", m));
    header.extend(columns("p", d));
    header.extend(["s".to_string(), "pi_f".to_string()]);
    let n_export = exp.config.bundle.export_paths.min(source.n_paths);
    let mut exported = Vec::new();
    let mut costate = Vec::new();
    for i in 0..n_export {
        let (_, obs) = source.path(i);
        let filt = wonham_filter_with(model, &obs, scheme)?;
        let tr = synthesize(field, model, &obs, &filt)?;
        let pif = filt.estimate(f);
        let rows = (0..=exp.grid.n_steps()).map(|k| {
            let mut r = vec![exp.grid.t(k)];
            r.extend_from_slice(tr.y.get(k));
            r.extend_from_slice(tr.u.get(k));
            r.extend_from_slice(tr.p.get(k));
            r.extend([tr.s[k], pif[k]]);
            r
        });
        let file = path_file(Path::new("synthesis"), i);
        write_csv(&dir.join(&file), &header, rows)?;
        exported.push(Path::new("dual").join(file).to_string_lossy().into_owned());
        costate.push(costate_identity_error(field, model, &obs, scheme)?);
    }
    Ok(DualDoc::Synthesis(SynthesisDoc {
        policy: built.name.into(),
        estimator_error: MeanSe::of(&err),
        costate_error: MeanSe::of(&costate),
        std_f_x: MeanSe::of(&fx).std(),
        exported,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqDoc {
    pub model: String,
    pub solution: LqSolution,
    /// Filter Riccati against the control Riccati (linear-Gaussian only).
    pub riccati_duality: Option<f64>,
}

pub fn lq<E: Executor>(ctx: &Context<E>) -> Result<LqDoc> {
    let exp = &ctx.exp;
    let (solution, riccati_duality) = match &exp.model {
        Model::Finite(m) => (lq_solve(m, &exp.f, &exp.grid)?, None),
        Model::LinearGaussian(m) => (lq_solve_lg(m, &exp.f, &exp.grid)?, Some(riccati_duality_check(m, &exp.grid)?)),
        Model::Diffusion(_) => return Err(mismatch("the deterministic dual", &exp.model)),
    };
    let (d, m) = (exp.model.d(), exp.model.m());
    let mut header = vec!["t".to_string()];
    header.extend(columns("u", m));
    header.extend(columns("y", d));
    let rows = (0..solution.u.len()).map(|k| {
        let mut r = vec![exp.grid.t(k)];
        r.extend_from_slice(&solution.u[k]);
        r.extend_from_slice(&solution.y[k]);
        r
    });
    write_csv(&ctx.out.join("lq").join("schedule.csv"), &header, rows)?;
    let doc = LqDoc {
        model: exp.model.kind().into(),
        solution,
        riccati_duality,
    };
    write_json(&ctx.out.join("lq").join("solution.json"), &doc)?;
    Ok(doc)
}
