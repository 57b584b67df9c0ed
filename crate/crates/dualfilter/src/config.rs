//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use dualfilter_core::dual::BasisSpec;
use dualfilter_core::sde::Scheme;
use dualfilter_core::{Diffusion1DModel, FiniteModel, LinearGaussianModel, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One JSON document describing a complete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub bundle: BundleConfig,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Terminal function; defaults to the first coordinate.
    #[serde(default)]
    pub f: Option<Vec<f64>>,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub dual: DualSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// The two-state reference chain.
    Canonical,
    Finite(FiniteModel),
    LinearGaussian(LinearGaussianModel),
    Diffusion(Diffusion1DModel),
    /// Another model document, relative to the configuration file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Number of leading paths written out as per-path CSV files.
    #[serde(default = "default_export")]
    pub export_paths: usize,
}

fn default_export() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    #[default]
    Zero,
    Lq,
    /// Smooth deterministic schedule with random Fourier coefficients.
    Random { amplitude: f64, seed: u64 },
    /// Explicit schedule, one row of `m` values per grid node.
    Schedule { u: Vec<Vec<f64>> },
    /// Feedback law on the PDE solution of the dual (two states only).
    Optimal {
        #[serde(default = "default_pde_nodes")]
        pde_nodes: usize,
    },
    /// Final iterate of regression policy iteration on the bundle.
    PolicyIteration { iterations: usize },
}

pub(crate) fn default_pde_nodes() -> usize {
    201
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    Wonham,
    Kalman,
    GridKushner,
    McKalman,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Wonham => "wonham",
            FilterKind::Kalman => "kalman",
            FilterKind::GridKushner => "grid_kushner",
            FilterKind::McKalman => "mc_kalman",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub kind: FilterKind,
    #[serde(default = "default_grid_nodes")]
    pub grid_nodes: usize,
}

fn default_grid_nodes() -> usize {
    101
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            kind: FilterKind::default(),
            grid_nodes: default_grid_nodes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualAction {
    Cost,
    #[default]
    Gap,
    PolicyIter,
    Martingale,
    Synthesis,
}

impl DualAction {
    pub fn name(self) -> &'static str {
        match self {
            DualAction::Cost => "cost",
            DualAction::Gap => "gap",
            DualAction::PolicyIter => "policy_iter",
            DualAction::Martingale => "martingale",
            DualAction::Synthesis => "synthesis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualSpec {
    #[serde(default)]
    pub action: DualAction,
    /// Iterations for `policy_iter`.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

fn default_iterations() -> usize {
    3
}

impl Default for DualSpec {
    fn default() -> Self {
        DualSpec {
            action: DualAction::default(),
            iterations: default_iterations(),
        }
    }
}

/// Acceptance thresholds. Zero is accepted so that a run can be forced to
/// fail; negative or non-finite values are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Duality gap bound in units of its standard error plus bias allowance.
    pub gap_se: f64,
    /// Mean `|S_T − π_T(f)|` relative to the standard deviation of `fᵀX_T`.
    pub estimator_rel: f64,
    /// Allowed deviation of convergence slopes from one.
    pub slope_band: f64,
    /// Sup-norm error of the covariance DRE.
    pub dre_sup: f64,
    /// Bound on `|t|` of the martingale trend for the optimal policy.
    pub martingale_t: f64,
    /// Relative distance between the optimal cost and the value.
    pub value_rel: f64,
    /// Dual estimator against the Kalman mean, relative to the state scale.
    pub kalman_dual: f64,
    /// Filter Riccati against the time-reversed control Riccati.
    pub riccati: f64,
    /// Required MSE excess of the chain Kalman filter, in standard errors.
    pub mse_se: f64,
    /// LQ value against half the MSE of its estimator, in standard errors.
    pub lq_value_se: f64,
    /// Grid filter mean against the Kalman mean, relative to the prior std.
    pub kushner_rel: f64,
    /// Exact algebraic identities.
    pub identity_abs: f64,
    /// Relative error of finite-difference Hamiltonian partials.
    pub fd_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            gap_se: 3.0,
            estimator_rel: 5e-2,
            slope_band: 0.3,
            dre_sup: 5e-2,
            martingale_t: 3.0,
            value_rel: 5e-2,
            kalman_dual: 1e-3,
            riccati: 1e-8,
            mse_se: 2.0,
            lq_value_se: 3.0,
            kushner_rel: 2e-2,
            identity_abs: 1e-12,
            fd_rel: 1e-6,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gap_se", self.gap_se),
            ("estimator_rel", self.estimator_rel),
            ("slope_band", self.slope_band),
            ("dre_sup", self.dre_sup),
            ("martingale_t", self.martingale_t),
            ("value_rel", self.value_rel),
            ("kalman_dual", self.kalman_dual),
            ("riccati", self.riccati),
            ("mse_se", self.mse_se),
            ("lq_value_se", self.lq_value_se),
            ("kushner_rel", self.kushner_rel),
            ("identity_abs", self.identity_abs),
            ("fd_rel", self.fd_rel),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::config(format!("tolerance {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A model after file references are resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Finite(FiniteModel),
    LinearGaussian(LinearGaussianModel),
    Diffusion(Diffusion1DModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Finite(_) => "finite",
            Model::LinearGaussian(_) => "linear_gaussian",
            Model::Diffusion(_) => "diffusion",
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Model::Finite(m) => m.horizon(),
            Model::LinearGaussian(m) => m.horizon(),
            Model::Diffusion(m) => m.horizon,
        }
    }

    /// State dimension (`1` for a scalar diffusion).
    pub fn d(&self) -> usize {
        match self {
            Model::Finite(m) => m.d(),
            Model::LinearGaussian(m) => m.d(),
            Model::Diffusion(_) => 1,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            Model::Finite(m) => m.m(),
            Model::LinearGaussian(m) => m.m(),
            Model::Diffusion(m) => m.obs.len(),
        }
    }
}

/// A validated configuration with everything needed to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub grid: TimeGrid,
    pub f: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Reads a configuration and resolves model references relative to its
    /// directory.
    pub fn load(path: &Path) -> Result<Experiment> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base)
    }

    pub fn resolve(self, base: &Path) -> Result<Experiment> {
        let model = resolve_model(&self.model, base)?;
        let grid = TimeGrid::new(self.grid.horizon, self.grid.n_steps)
            .map_err(|e| CliError::config(format!("grid: {e}")))?;
        if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon() {
            return Err(CliError::config(format!(
                "grid horizon {} differs from the model horizon {}",
                grid.horizon(),
                model.horizon()
            )));
        }
        if self.bundle.n_paths == 0 {
            return Err(CliError::Core(dualfilter_core::Error::EmptyBundle));
        }
        self.tolerances.validate()?;
        let f = match &self.f {
            Some(f) if f.len() != model.d() => {
                return Err(CliError::config(format!("f has {} entries, the model has {} states", f.len(), model.d())))
            }
            Some(f) => f.clone(),
            None => {
                let mut f = vec![0.0; model.d()];
                f[0] = 1.0;
                f
            }
        };
        if let PolicySpec::Schedule { u } = &self.policy {
            if u.len() != grid.n_steps() + 1 || u.iter().any(|r| r.len() != model.m()) {
                return Err(CliError::config("schedule must have n_steps + 1 rows of m values"));
            }
        }
        Ok(Experiment {
            config: self,
            model,
            grid,
            f,
        })
    }
}

fn resolve_model(spec: &ModelSpec, base: &Path) -> Result<Model> {
    Ok(match spec {
        ModelSpec::Canonical => Model::Finite(FiniteModel::canonical()),
        ModelSpec::Finite(m) => Model::Finite(m.clone()),
        ModelSpec::LinearGaussian(m) => Model::LinearGaussian(m.clone()),
        ModelSpec::Diffusion(m) => {
            m.validate()?;
            Model::Diffusion(m.clone())
        }
        ModelSpec::File { path } => {
            let full = base.join(path);
            if !full.is_file() {
                return Err(CliError::config(format!("model file {} does not exist", full.display())));
            }
            let text = std::fs::read_to_string(&full).map_err(|e| CliError::io(&full, e))?;
            let inner: ModelSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: invalid model: {e}", full.display())))?;
            if matches!(inner, ModelSpec::File { .. }) {
                return Err(CliError::config("model files cannot reference other files"));
            }
            let dir = full.parent().unwrap_or(base);
            resolve_model(&inner, dir)?
        }
    })
}

/// The reference configuration: two-state chain, `T = 1`, `dt = 10⁻³`.
pub fn canonical_config(n_paths: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec::Canonical,
        grid: GridSpec {
            horizon: 1.0,
            n_steps: 1000,
        },
        bundle: BundleConfig {
            n_paths,
            seed,
            export_paths: default_export(),
        },
        policy: PolicySpec::default(),
        f: Some(vec![1.0, 0.0]),
        basis: BasisSpec::default(),
        scheme: Scheme::default(),
        filter: FilterSpec::default(),
        dual: DualSpec::default(),
        output_dir: default_output_dir(),
        tolerances: Tolerances::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(
            r#"{"model": {"kind": "canonical"}, "grid": {"T": 1.0, "n_steps": 100},
                "bundle": {"n_paths": 5, "seed": 1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.policy, PolicySpec::Zero);
        assert_eq!(cfg.tolerances, Tolerances::default());
        assert_eq!(cfg.bundle.export_paths, 10);
        let exp = cfg.resolve(Path::new(".")).unwrap();
        assert_eq!(exp.f, vec![1.0, 0.0]);
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = canonical_config(100, 7);
        cfg.policy = PolicySpec::Random {
            amplitude: 0.4,
            seed: 3,
        };
        cfg.model = ModelSpec::Finite(FiniteModel::canonical());
        cfg.tolerances.fd_rel = 0.0;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"model": {"kind": "canonical"}, "grid": {"T": 1.0, "n_steps": 10},
                       "bundle": {"n_paths": 1, "seed": 1}, "colour": 3}"#;
        assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = canonical_config(0, 1);
        let err = cfg.clone().resolve(Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("empty bundle"), "{err}");
        cfg.bundle.n_paths = 1;
        cfg.tolerances.gap_se = -1.0;
        assert_eq!(cfg.clone().resolve(Path::new(".")).unwrap_err().exit_code(), 2);
        cfg.tolerances.gap_se = 0.0;
        assert!(cfg.clone().resolve(Path::new(".")).is_ok());
        cfg.grid.horizon = 2.0;
        assert_eq!(cfg.clone().resolve(Path::new(".")).unwrap_err().exit_code(), 2);
        cfg.grid.horizon = 1.0;
        cfg.f = Some(vec![1.0]);
        assert_eq!(cfg.resolve(Path::new(".")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_model_file() {
        let mut cfg = canonical_config(1, 1);
        cfg.model = ModelSpec::File {
            path: PathBuf::from("does/not/exist.json"),
        };
        let err = cfg.resolve(Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }
}
