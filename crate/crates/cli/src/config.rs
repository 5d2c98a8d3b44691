//! Experiment configuration: TOML with fixed sections, serde defaults and
//! range validation that runs before any computation.

use std::path::{Path, PathBuf};

use bilevel_core::data::LabelMode;
use bilevel_core::diagnostics::StepRule;
use bilevel_core::rng::derive_seed;
use bilevel_core::strategies::{OuterKind, StrategyKind};
use bilevel_core::{HypergradMethod, MethodKind, ModelKind, ModelSpec, SplitMode, SplitPlan};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Counters used to derive unset seeds from the top-level `seed`.
pub mod stream {
    pub const BETA: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TEST: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const HOLDOUT: u64 = 6;
    pub const BIASVAR: u64 = 7;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<CleanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biasvar: Option<BiasVarConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    SyntheticLinear,
    SyntheticClasses,
    Libsvm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default = "defaults::n")]
    pub n: usize,
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default = "defaults::noise_sigma")]
    pub noise_sigma: f64,
    /// Seed of the generating coefficients or class centers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_seed: Option<u64>,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::separation")]
    pub separation: f64,
    /// Extra synthetic test rows drawn from the same distribution.
    #[serde(default)]
    pub n_test: usize,
    /// Fraction of the loaded rows held out as a test set.
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<CorruptConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptConfig {
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "defaults::u")]
    pub u: usize,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            u: defaults::u(),
            gamma: defaults::gamma(),
            mode: SplitMode::default(),
            master_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ModelKind,
    #[serde(default = "defaults::smoothing_delta")]
    pub smoothing_delta: f64,
    /// Inferred from multiclass data when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub hyperclean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "defaults::method_kind")]
    pub kind: MethodKind,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::z")]
    pub z: usize,
    #[serde(default = "defaults::h")]
    pub h: usize,
    #[serde(default = "defaults::alpha_in")]
    pub alpha_in: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_step: Option<f64>,
    #[serde(default = "defaults::solver_tol")]
    pub solver_tol: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: defaults::method_kind(),
            k: defaults::k(),
            z: defaults::z(),
            h: defaults::h(),
            alpha_in: defaults::alpha_in(),
            fp_step: None,
            solver_tol: defaults::solver_tol(),
        }
    }
}

impl MethodConfig {
    pub fn to_method(&self) -> HypergradMethod {
        HypergradMethod {
            kind: self.kind,
            inner_steps: self.k,
            solver_steps: self.z,
            window: self.h,
            alpha_in: self.alpha_in,
            fp_step: self.fp_step,
            solver_tol: self.solver_tol,
        }
    }
}

/// A scalar broadcast to every hyperparameter, or one value per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperInit {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl HyperInit {
    pub fn expand(&self, dim: usize) -> CliResult<Vec<f64>> {
        match self {
            HyperInit::Scalar(v) => Ok(vec![*v; dim]),
            HyperInit::Vector(v) if v.len() == dim => Ok(v.clone()),
            HyperInit::Vector(v) => Err(CliError::config(
                "strategy.hyper_init",
                format!("expected {dim} values, got {}", v.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterConfig {
    #[serde(default = "defaults::outer_kind")]
    pub kind: OuterKind,
    #[serde(default = "defaults::alpha_out")]
    pub alpha_out: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            kind: defaults::outer_kind(),
            alpha_out: defaults::alpha_out(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default = "defaults::strategy_kind")]
    pub kind: StrategyKind,
    #[serde(default = "defaults::t")]
    pub t: usize,
    /// Step of the deployed model under OEHG; defaults to `method.alpha_in`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_deploy: Option<f64>,
    #[serde(default = "defaults::hyper_init")]
    pub hyper_init: HyperInit,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub outer: OuterConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: defaults::strategy_kind(),
            t: defaults::t(),
            alpha_deploy: None,
            hyper_init: defaults::hyper_init(),
            warm_start: false,
            outer: OuterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "defaults::out_dir")]
    pub dir: PathBuf,
    #[serde(default = "defaults::formats")]
    pub formats: Vec<Format>,
    /// Adds wall-clock time to the manifest, which then differs per run.
    #[serde(default)]
    pub record_timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: defaults::out_dir(),
            formats: defaults::formats(),
            record_timing: false,
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanConfig {
    /// Clean rows reserved at the end of the pool for validation splits;
    /// defaults to a fifth of the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trusted: Option<usize>,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            trusted: None,
            threshold: defaults::threshold(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Oracle,
    Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasVarConfig {
    #[serde(default = "defaults::grid")]
    pub grid: String,
    #[serde(default = "defaults::replicates")]
    pub replicates: usize,
    #[serde(default = "defaults::estimator")]
    pub estimator: EstimatorKind,
    #[serde(default = "defaults::step_rule")]
    pub step_rule: StepRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for BiasVarConfig {
    fn default() -> Self {
        BiasVarConfig {
            grid: defaults::grid(),
            replicates: defaults::replicates(),
            estimator: defaults::estimator(),
            step_rule: defaults::step_rule(),
            seed: None,
        }
    }
}

mod defaults {
    use super::*;

    pub fn n() -> usize {
        100
    }
    pub fn d() -> usize {
        5
    }
    pub fn noise_sigma() -> f64 {
        0.1
    }
    pub fn classes() -> usize {
        4
    }
    pub fn separation() -> f64 {
        1.0
    }
    pub fn u() -> usize {
        5
    }
    pub fn gamma() -> f64 {
        0.25
    }
    pub fn smoothing_delta() -> f64 {
        1e-6
    }
    pub fn method_kind() -> MethodKind {
        MethodKind::Itd
    }
    pub fn k() -> usize {
        100
    }
    pub fn z() -> usize {
        20
    }
    pub fn h() -> usize {
        10
    }
    pub fn alpha_in() -> f64 {
        0.1
    }
    pub fn solver_tol() -> f64 {
        1e-12
    }
    pub fn outer_kind() -> OuterKind {
        OuterKind::Adam
    }
    pub fn alpha_out() -> f64 {
        0.05
    }
    pub fn strategy_kind() -> StrategyKind {
        StrategyKind::Ehg
    }
    pub fn t() -> usize {
        100
    }
    pub fn hyper_init() -> HyperInit {
        HyperInit::Scalar(0.0)
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn formats() -> Vec<Format> {
        vec![Format::Csv, Format::Json]
    }
    pub fn threshold() -> f64 {
        0.5
    }
    pub fn grid() -> String {
        "0.3:3:50".into()
    }
    pub fn replicates() -> usize {
        500
    }
    pub fn estimator() -> EstimatorKind {
        EstimatorKind::Oracle
    }
    pub fn step_rule() -> StepRule {
        StepRule::Fixed
    }
}

/// Which subcommand a config is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Tune,
    BiasVar,
    Clean,
}

fn positive(path: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(path, format!("must be a positive number, got {v}")))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> CliResult<()> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::config(path, format!("must be at least {min}, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses TOML, reporting the dotted path of any malformed field.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::config("<root>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            CliError::config(path, e.into_inner().message().to_string())
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Core(bilevel_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Fills every seed and default that depends on other fields. Explicit
    /// values are kept, so resolving twice changes nothing.
    pub fn resolve(&mut self) {
        let seed = self.seed;
        let d = &mut self.data;
        if d.source != DataSource::Libsvm {
            d.beta_seed.get_or_insert(derive_seed(seed, stream::BETA));
        }
        if let Some(c) = &mut d.corrupt {
            c.seed.get_or_insert(derive_seed(seed, stream::CORRUPT));
        }
        self.split.master_seed.get_or_insert(derive_seed(seed, stream::SPLIT));
        if d.source == DataSource::SyntheticClasses && self.problem.num_classes.is_none() {
            let k = d.classes;
            let multiclass = matches!(self.problem.kind, ModelKind::SoftmaxL2 | ModelKind::HypercleanSoftmax);
            if multiclass {
                self.problem.num_classes = Some(k);
            }
        }
        if self.strategy.alpha_deploy.is_none() && self.strategy.kind == StrategyKind::Oehg {
            self.strategy.alpha_deploy = Some(self.method.alpha_in);
        }
        if let Some(b) = &mut self.biasvar {
            b.seed.get_or_insert(derive_seed(seed, stream::BIASVAR));
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            u: self.split.u,
            gamma: self.split.gamma,
            mode: self.split.mode,
            master_seed: self.split.master_seed.unwrap_or(derive_seed(self.seed, stream::SPLIT)),
        }
    }

    pub fn model_spec(&self, inferred_classes: Option<usize>) -> ModelSpec {
        ModelSpec {
            kind: self.problem.kind,
            smoothing_delta: self.problem.smoothing_delta,
            num_classes: self.problem.num_classes.or(inferred_classes).unwrap_or(2),
            hyperclean_l2: self.problem.hyperclean_l2,
        }
    }

    /// Range checks for `cmd`, run before any data is loaded.
    pub fn validate(&self, cmd: Command) -> CliResult<()> {
        let d = &self.data;
        match d.source {
            DataSource::Libsvm => {
                if d.path.is_none() {
                    return Err(CliError::config("data.path", "required for source = \"libsvm\""));
                }
                if d.n_test > 0 {
                    return Err(CliError::config("data.n_test", "only synthetic sources can draw test rows"));
                }
            }
            DataSource::SyntheticLinear | DataSource::SyntheticClasses => {
                at_least("data.n", d.n, 2)?;
                at_least("data.d", d.d, 1)?;
            }
        }
        if d.source == DataSource::SyntheticLinear && !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return Err(CliError::config("data.noise_sigma", "must be non-negative"));
        }
        if d.source == DataSource::SyntheticClasses {
            at_least("data.classes", d.classes, 2)?;
            positive("data.separation", d.separation)?;
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(CliError::config("data.test_fraction", "must lie in [0, 1)"));
        }
        if d.n_test > 0 && d.test_fraction > 0.0 {
            return Err(CliError::config("data.test_fraction", "set either n_test or test_fraction, not both"));
        }
        if let Some(c) = &d.corrupt {
            if !(0.0..=1.0).contains(&c.p) {
                return Err(CliError::config("data.corrupt.p", format!("must lie in [0, 1], got {}", c.p)));
            }
            if d.source == DataSource::SyntheticLinear {
                return Err(CliError::config("data.corrupt", "regression targets cannot be corrupted"));
            }
        }

        at_least("split.u", self.split.u, 1)?;
        let g = self.split.gamma;
        if !(g > 0.0 && g < 1.0) {
            return Err(CliError::config("split.gamma", format!("must lie in (0, 1), got {g}")));
        }

        let p = &self.problem;
        if matches!(p.kind, ModelKind::LassoSmooth | ModelKind::ElasticNet) {
            positive("problem.smoothing_delta", p.smoothing_delta)?;
        }
        if let Some(k) = p.num_classes {
            at_least("problem.num_classes", k, 2)?;
        }
        if !(p.hyperclean_l2 >= 0.0 && p.hyperclean_l2.is_finite()) {
            return Err(CliError::config("problem.hyperclean_l2", "must be non-negative"));
        }
        let synthetic_task = match d.source {
            DataSource::SyntheticLinear => Some(bilevel_core::Task::Regression),
            DataSource::SyntheticClasses => Some(bilevel_core::Task::Multiclass(d.classes)),
            DataSource::Libsvm => None,
        };
        if let Some(task) = synthetic_task {
            let binary_ok = d.classes == 2 && matches!(p.kind, ModelKind::LogisticL2 | ModelKind::SvmSqhinge);
            if !p.kind.accepts(task) && !(task != bilevel_core::Task::Regression && binary_ok) {
                return Err(CliError::config(
                    "problem.kind",
                    format!("{} cannot be fit on {:?} data", p.kind, d.source),
                ));
            }
        }

        let m = &self.method;
        positive("method.alpha_in", m.alpha_in)?;
        positive("method.solver_tol", m.solver_tol)?;
        match m.kind {
            MethodKind::Itd => {}
            MethodKind::Trhg => {
                at_least("method.h", m.h, 1)?;
                if m.h > m.k {
                    return Err(CliError::config("method.h", format!("must not exceed k = {}", m.k)));
                }
            }
            MethodKind::AidCg | MethodKind::AidFp => {
                at_least("method.z", m.z, 1)?;
                if let Some(s) = m.fp_step {
                    positive("method.fp_step", s)?;
                }
                let no_aid = p.kind == ModelKind::SvmSqhinge
                    || (p.kind == ModelKind::HypercleanSoftmax && p.hyperclean_l2 == 0.0);
                if no_aid {
                    return Err(CliError::config(
                        "method.kind",
                        format!("implicit differentiation is not available for {}", p.kind),
                    ));
                }
            }
        }

        if cmd != Command::BiasVar {
            let s = &self.strategy;
            at_least("strategy.t", s.t, 1)?;
            if s.kind != StrategyKind::Oehg {
                at_least("method.k", m.k, 1)?;
            }
            if let Some(a) = s.alpha_deploy {
                positive("strategy.alpha_deploy", a)?;
            }
            positive("strategy.outer.alpha_out", s.outer.alpha_out)?;
            let finite = match &s.hyper_init {
                HyperInit::Scalar(v) => v.is_finite(),
                HyperInit::Vector(v) => v.iter().all(|x| x.is_finite()),
            };
            if !finite {
                return Err(CliError::config("strategy.hyper_init", "values must be finite"));
            }
        }
        if self.output.formats.is_empty() {
            return Err(CliError::config("output.formats", "at least one format is required"));
        }

        match cmd {
            Command::Tune => {}
            Command::Clean => {
                if p.kind != ModelKind::HypercleanSoftmax {
                    return Err(CliError::config("problem.kind", "clean requires hyperclean_softmax"));
                }
                if let Some(c) = &self.clean {
                    if let Some(t) = c.trusted {
                        at_least("clean.trusted", t, 2)?;
                    }
                    if !(c.threshold > 0.0 && c.threshold < 1.0) {
                        return Err(CliError::config("clean.threshold", "must lie in (0, 1)"));
                    }
                }
            }
            Command::BiasVar => {
                if d.source != DataSource::SyntheticLinear {
                    return Err(CliError::config("data.source", "biasvar needs synthetic_linear data"));
                }
                let b = self.biasvar.clone().unwrap_or_default();
                bilevel_core::diagnostics::parse_grid(&b.grid).map_err(|e| CliError::config("biasvar.grid", e.to_string()))?;
                at_least("biasvar.replicates", b.replicates, 2)?;
                match b.estimator {
                    EstimatorKind::Oracle if p.kind != ModelKind::Ridge => {
                        return Err(CliError::config("biasvar.estimator", "the oracle estimator needs problem.kind = \"ridge\""));
                    }
                    EstimatorKind::Method => at_least("method.k", m.k, 1)?,
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
