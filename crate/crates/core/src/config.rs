//! TOML run configuration. Every key has a default, so an empty file is a
//! valid configuration (a 2-d Gaussian tempering problem).

use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{SamplerConfig, ScheduleSpec};
use crate::error::{Result, SmcError};
use crate::kernels::{KernelKind, KernelSpec};
use crate::paths::{AdaptiveRule, Path};
use crate::targets::{
    laplace_initializer, synthetic_logistic_data, GaussianTarget, LogisticDataset, LogisticRegressionTarget,
    SequentialModel, TargetDensity,
};

/// A scalar broadcast to every coordinate, or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coords {
    Scalar(f64),
    List(Vec<f64>),
}

impl Coords {
    pub fn expand(&self, d: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            Coords::Scalar(v) => Ok(vec![*v; d]),
            Coords::List(v) if v.len() == d => Ok(v.clone()),
            Coords::List(v) => Err(SmcError::config(format!("`{name}` has {} entries, expected {d}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Gaussian,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    pub dim: usize,
    /// Gaussian pair: initial `N(initial_mean, initial_variance)` and
    /// target `N(mean, variance)`, both normalized.
    pub initial_mean: Coords,
    pub initial_variance: Coords,
    pub mean: Coords,
    pub variance: Coords,
    /// Logistic regression: CSV file, or synthetic data when absent.
    pub data: Option<PathBuf>,
    pub true_beta: Vec<f64>,
    pub rows: usize,
    pub data_seed: u64,
    /// Trailing rows held out for predictive scores.
    pub test_rows: usize,
    pub prior_mean: Coords,
    pub prior_variance: Coords,
    /// Start geometric paths from the Laplace approximation instead of the prior.
    pub laplace: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::Gaussian,
            dim: 2,
            initial_mean: Coords::Scalar(1.0),
            initial_variance: Coords::Scalar(0.5),
            mean: Coords::Scalar(0.0),
            variance: Coords::Scalar(1.0),
            data: None,
            true_beta: vec![0.5, -1.0, 1.0],
            rows: 1000,
            data_seed: 1,
            test_rows: 0,
            prior_mean: Coords::Scalar(0.0),
            prior_variance: Coords::Scalar(10.0),
            laplace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Geometric,
    PartialPosterior,
    PartialWithBridges,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleChoice {
    Named(String),
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub kind: PathKind,
    /// `"adaptive"` or a list of parameters.
    pub schedule: ScheduleChoice,
    pub batch_size: usize,
    /// Truncated paths: terminal level of the score `direction · x`.
    pub level: f64,
    pub direction: Option<Vec<f64>>,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            kind: PathKind::Geometric,
            schedule: ScheduleChoice::Named("adaptive".into()),
            batch_size: 10,
            level: 1.0,
            direction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Dimension-based defaults apply when unset.
    pub step_size: Option<f64>,
    pub leapfrog_steps: Option<usize>,
    pub iterations: Option<usize>,
    pub adapt: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Hmc,
            step_size: None,
            leapfrog_steps: None,
            iterations: None,
            adapt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kappa: f64,
    pub resample_threshold: f64,
    pub tol: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            resample_threshold: 0.5,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Adaptive,
    FrozenReplay,
    FixedSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub n: usize,
    pub seed: u64,
    pub repeats: usize,
    pub mode: RunMode,
    /// Frozen schedule consumed by particle MCMC.
    pub frozen: Option<PathBuf>,
    pub pimh_iterations: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n: 1024,
            seed: 0,
            repeats: 20,
            mode: RunMode::Adaptive,
            frozen: None,
            pimh_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Record wall-clock time per step (makes traces non-reproducible).
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "fixed_N")]
    FixedN,
    #[serde(rename = "linear_N")]
    LinearN,
    #[serde(rename = "fixed_N_d_steps")]
    FixedNDSteps,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::FixedN, Regime::LinearN, Regime::FixedNDSteps];

    pub fn name(self) -> &'static str {
        match self {
            Regime::FixedN => "fixed_N",
            Regime::LinearN => "linear_N",
            Regime::FixedNDSteps => "fixed_N_d_steps",
        }
    }

    pub fn particles(self, d: usize) -> usize {
        match self {
            Regime::LinearN => 256 + 8 * d,
            Regime::FixedN | Regime::FixedNDSteps => 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub dims: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub repeats: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 4, 8, 16, 32, 64],
            regimes: Regime::ALL.to_vec(),
            repeats: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetConfig,
    pub path: PathConfig,
    pub kernel: KernelConfig,
    pub schedule: ScheduleConfig,
    pub run: RunSection,
    pub output: OutputConfig,
    pub scaling: ScalingConfig,
}

/// Concrete objects built from a [`RunConfig`].
pub enum BuiltTarget {
    Gaussian {
        initial: GaussianTarget,
        terminal: GaussianTarget,
    },
    Logistic {
        model: Arc<LogisticRegressionTarget>,
        test: Option<LogisticRegressionTarget>,
    },
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SmcError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &FsPath) -> Result<Self> {
        if !path.exists() {
            return Err(SmcError::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.n == 0 {
            return Err(SmcError::config("run.n must be at least 1"));
        }
        if !(self.schedule.kappa > 0.0 && self.schedule.kappa < 1.0) {
            return Err(SmcError::config(format!("schedule.kappa {} outside (0, 1)", self.schedule.kappa)));
        }
        if !(self.schedule.resample_threshold > 0.0 && self.schedule.resample_threshold <= 1.0) {
            return Err(SmcError::config("schedule.resample_threshold outside (0, 1]"));
        }
        if let ScheduleChoice::Named(name) = &self.path.schedule {
            if name != "adaptive" {
                return Err(SmcError::config(format!("unknown schedule `{name}`")));
            }
        }
        if self.run.mode == RunMode::FixedSchedule && !matches!(self.path.schedule, ScheduleChoice::Fixed(_)) {
            return Err(SmcError::config("fixed-schedule mode needs `path.schedule` to be a list"));
        }
        for file in [&self.target.data, &self.run.frozen].into_iter().flatten() {
            if !file.exists() {
                return Err(SmcError::MissingFile(file.clone()));
            }
        }
        if self.target.kind == TargetKind::Gaussian && self.path.kind != PathKind::Geometric && self.path.kind != PathKind::Truncated {
            return Err(SmcError::config("partial-posterior paths need a logistic target"));
        }
        Ok(())
    }

    pub fn dim(&self) -> Result<usize> {
        match self.target.kind {
            TargetKind::Gaussian => Ok(self.target.dim),
            TargetKind::Logistic => match &self.target.data {
                Some(file) => Ok(LogisticDataset::from_path(file)?.dim()),
                None => Ok(self.target.true_beta.len()),
            },
        }
    }

    pub fn build_target(&self) -> Result<BuiltTarget> {
        let t = &self.target;
        match t.kind {
            TargetKind::Gaussian => {
                let d = t.dim;
                let initial = GaussianTarget::diagonal(
                    t.initial_mean.expand(d, "target.initial_mean")?,
                    t.initial_variance.expand(d, "target.initial_variance")?,
                )?
                .normalized();
                let terminal = GaussianTarget::diagonal(t.mean.expand(d, "target.mean")?, t.variance.expand(d, "target.variance")?)?
                    .normalized();
                Ok(BuiltTarget::Gaussian { initial, terminal })
            }
            TargetKind::Logistic => {
                let (covariates, outcomes, d) = match &t.data {
                    Some(file) => {
                        let ds = LogisticDataset::from_path(file)?;
                        let d = ds.dim();
                        (ds.covariates, ds.outcomes, d)
                    }
                    None => {
                        let (x, y) = synthetic_logistic_data(&t.true_beta, t.rows, t.data_seed);
                        (x, y, t.true_beta.len())
                    }
                };
                let full = LogisticRegressionTarget::new(
                    covariates,
                    outcomes,
                    t.prior_mean.expand(d, "target.prior_mean")?,
                    t.prior_variance.expand(d, "target.prior_variance")?,
                )?;
                let m = full.n_observations();
                if t.test_rows >= m {
                    return Err(SmcError::config("target.test_rows must leave training rows"));
                }
                let train = m - t.test_rows;
                let test = if t.test_rows > 0 { Some(full.subset(train..m)?) } else { None };
                Ok(BuiltTarget::Logistic {
                    model: Arc::new(full.subset(0..train)?),
                    test,
                })
            }
        }
    }

    /// The path described by `path.kind`, with `kind` overriding it when given.
    pub fn build_path_of(&self, target: &BuiltTarget, kind: PathKind) -> Result<Path> {
        match (target, kind) {
            (BuiltTarget::Gaussian { initial, terminal }, PathKind::Geometric) => {
                Path::geometric(Arc::new(initial.clone()), Arc::new(terminal.clone()))
            }
            (BuiltTarget::Gaussian { initial, terminal }, PathKind::Truncated) => {
                let d = terminal.dim();
                let direction = self.path.direction.clone().unwrap_or_else(|| {
                    let mut v = vec![0.0; d];
                    v[0] = 1.0;
                    v
                });
                if direction.len() != d {
                    return Err(SmcError::DimensionMismatch {
                        expected: d,
                        got: direction.len(),
                    });
                }
                let _ = initial;
                let score = Arc::new(move |x: &[f64]| x.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>());
                Path::truncated(Arc::new(terminal.clone()), score, self.path.level)
            }
            (BuiltTarget::Logistic { model, .. }, PathKind::Geometric) => {
                let initial: Arc<dyn TargetDensity> = if self.target.laplace {
                    Arc::new(laplace_initializer(model, 100, 1e-8)?)
                } else {
                    Arc::new(model.prior().clone())
                };
                Path::geometric(initial, model.clone())
            }
            (BuiltTarget::Logistic { model, .. }, PathKind::PartialPosterior) => {
                Path::partial(model.clone(), self.path.batch_size, false)
            }
            (BuiltTarget::Logistic { model, .. }, PathKind::PartialWithBridges) => {
                Path::partial(model.clone(), self.path.batch_size, true)
            }
            (_, kind) => Err(SmcError::config(format!("path kind {kind:?} does not fit the target"))),
        }
    }

    pub fn build_path(&self, target: &BuiltTarget) -> Result<Path> {
        self.build_path_of(target, self.path.kind)
    }

    pub fn kernel_spec(&self, d: usize) -> KernelSpec {
        let mut spec = KernelSpec::default_for(self.kernel.kind, d);
        if let Some(eps) = self.kernel.step_size {
            spec.step_size = eps;
            if self.kernel.leapfrog_steps.is_none() && self.kernel.kind.uses_mass_matrix() {
                spec.leapfrog_steps = (1.0 / eps).ceil() as usize;
            }
        }
        if let Some(m) = self.kernel.leapfrog_steps {
            spec.leapfrog_steps = m;
        }
        if let Some(it) = self.kernel.iterations {
            spec.iterations = it;
        }
        spec
    }

    /// Sampler settings for `path`; fixed lists become the parameter schedule.
    pub fn sampler_config(&self, path: &Path) -> Result<SamplerConfig> {
        let schedule = match (&self.path.schedule, self.run.mode) {
            (ScheduleChoice::Fixed(values), _) => ScheduleSpec::Fixed(path.fixed_schedule(values)?),
            (ScheduleChoice::Named(_), _) => ScheduleSpec::Adaptive(AdaptiveRule {
                kappa: self.schedule.kappa,
                tol: self.schedule.tol,
            }),
        };
        let mut cfg = SamplerConfig::new(self.run.n, self.run.seed, self.kernel_spec(path.dim()), schedule);
        cfg.adapt = self.kernel.adapt;
        cfg.resample_threshold = self.schedule.resample_threshold;
        cfg.timing = self.output.timing;
        cfg.validate(path)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.run.n, 1024);
        assert_eq!(cfg.schedule.kappa, 0.5);
        let target = cfg.build_target().unwrap();
        let path = cfg.build_path(&target).unwrap();
        assert_eq!(path.dim(), 2);
        assert!(matches!(cfg.sampler_config(&path).unwrap().schedule, ScheduleSpec::Adaptive(_)));
    }

    #[test]
    fn sections_and_lists_parse() {
        let text = r#"
            [target]
            kind = "gaussian"
            dim = 1
            initial_mean = [2.0]
            [path]
            schedule = [0.0, 0.5, 1.0]
            [kernel]
            kind = "mala"
            step_size = 0.3
            iterations = 3
            [run]
            n = 64
            mode = "fixed-schedule"
            [scaling]
            regimes = ["fixed_N", "linear_N"]
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        let target = cfg.build_target().unwrap();
        let path = cfg.build_path(&target).unwrap();
        let sc = cfg.sampler_config(&path).unwrap();
        assert_eq!(sc.kernel.kind, KernelKind::Mala);
        assert_eq!(sc.kernel.iterations, 3);
        assert!(matches!(sc.schedule, ScheduleSpec::Fixed(ref p) if p.len() == 2));
        assert_eq!(cfg.scaling.regimes, vec![Regime::FixedN, Regime::LinearN]);
    }

    #[test]
    fn dotted_keys_work() {
        let cfg = RunConfig::from_toml("run.n = 10\nschedule.kappa = 0.3\n").unwrap();
        assert_eq!(cfg.run.n, 10);
        assert_eq!(cfg.schedule.kappa, 0.3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("schedule.kappa = 1.5").is_err());
        assert!(RunConfig::from_toml("run.n = 0").is_err());
        assert!(RunConfig::from_toml("kernel.kind = \"nuts\"").is_err());
        assert!(RunConfig::from_toml("path.schedule = \"sometimes\"").is_err());
        assert!(RunConfig::from_toml("run.unknown = 1").is_err());
        assert!(matches!(
            RunConfig::from_toml("target.kind = \"logistic\"\ntarget.data = \"/no/such/file.csv\""),
            Err(SmcError::MissingFile(_))
        ));
    }

    #[test]
    fn logistic_holdout_split() {
        let cfg = RunConfig::from_toml(
            "target.kind = \"logistic\"\ntarget.rows = 50\ntarget.test_rows = 10\npath.kind = \"partial_with_bridges\"",
        )
        .unwrap();
        let BuiltTarget::Logistic { model, test } = cfg.build_target().unwrap() else { panic!() };
        assert_eq!(model.n_observations(), 40);
        assert_eq!(test.unwrap().n_observations(), 10);
    }

    #[test]
    fn hmc_step_size_sets_leapfrog_count() {
        let cfg = RunConfig::from_toml("kernel.step_size = 0.1").unwrap();
        let spec = cfg.kernel_spec(3);
        assert_eq!(spec.leapfrog_steps, 10);
    }
}
