use bilevel_core::diagnostics::{
    bias_variance_sweep, parse_grid, BiasVarianceConfig, BiasVariancePoint, Estimator, LinearGenerator,
};
use bilevel_core::rng::derive_seed;

use crate::config::{stream, Command, EstimatorKind, ExperimentConfig};
use crate::error::{at, CliResult};
use crate::output::{csv_bytes, fmt_f64, Sink};

pub const BIASVAR_HEADER: [&str; 7] = ["lambda", "error", "variance", "bias_sq", "identity_residual", "R", "U"];

pub fn sweep_config(cfg: &ExperimentConfig) -> CliResult<BiasVarianceConfig> {
    cfg.validate(Command::BiasVar)?;
    let b = cfg.biasvar.clone().unwrap_or_default();
    let d = &cfg.data;
    Ok(BiasVarianceConfig {
        generator: LinearGenerator {
            n: d.n,
            d: d.d,
            noise_sigma: d.noise_sigma,
            beta_seed: d.beta_seed.unwrap_or(derive_seed(cfg.seed, stream::BETA)),
        },
        model: cfg.model_spec(None),
        estimator: match b.estimator {
            EstimatorKind::Oracle => Estimator::Oracle,
            EstimatorKind::Method => Estimator::Method(cfg.method.to_method()),
        },
        step_rule: b.step_rule,
        lambdas: parse_grid(&b.grid).map_err(at("biasvar.grid"))?,
        replicates: b.replicates,
        u: cfg.split.u,
        gamma: cfg.split.gamma,
        mode: cfg.split.mode,
        seed: b.seed.unwrap_or(derive_seed(cfg.seed, stream::BIASVAR)),
    })
}

pub fn rows(points: &[BiasVariancePoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.lambda),
                fmt_f64(p.error),
                fmt_f64(p.variance),
                fmt_f64(p.bias_sq),
                fmt_f64(p.identity_residual),
                p.replicates.to_string(),
                p.u.to_string(),
            ]
        })
        .collect()
}

/// Runs the sweep and writes `biasvar.csv`.
pub fn biasvar(cfg: &ExperimentConfig, sink: &mut Sink) -> CliResult<Vec<BiasVariancePoint>> {
    let sweep = sweep_config(cfg)?;
    let points = bias_variance_sweep(&sweep).map_err(at("biasvar"))?;
    sink.write("biasvar.csv", &csv_bytes(&BIASVAR_HEADER, rows(&points)))?;
    Ok(points)
}
