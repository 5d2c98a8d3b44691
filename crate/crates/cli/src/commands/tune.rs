use bilevel_core::data::{make_splits, Split};
use bilevel_core::linalg::norm;
use bilevel_core::problems::build_problem;
use bilevel_core::strategies::{run_ehg, run_oehg, run_single, HpoTask, OuterOptimizer, RunConfig, StrategyKind};
use bilevel_core::{BilevelProblem, HpoTrace};
use serde::Serialize;
use serde_json::Value;

use crate::config::{Command, ExperimentConfig, Format};
use crate::error::{at, CliResult};
use crate::inputs::{self, Prepared};
use crate::output::{csv_bytes, fmt_f64, fmt_opt, Sink};

/// Hyperparameter vectors longer than this are left out of `trace.csv`.
pub const MAX_TRACE_HYPER: usize = 64;

pub const TRACE_HEADER: [&str; 8] = [
    "step",
    "split_id",
    "lambda_norm",
    "raw_lambda_json",
    "hypergrad_norm",
    "train_loss",
    "val_loss",
    "test_loss",
];

#[derive(Debug, Clone, Serialize)]
pub struct FinalReport {
    pub strategy: StrategyKind,
    pub problem: String,
    pub outer_steps: usize,
    pub final_hyper_raw: Vec<f64>,
    pub final_hyper_effective: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub final_val_loss: f64,
    pub final_test_loss: Option<f64>,
    pub config: Value,
}

/// Splits of the pool, expressed in dataset row indices.
pub fn pool_splits(cfg: &ExperimentConfig, pool: &[usize]) -> CliResult<Vec<Split>> {
    let plan = cfg.split_plan();
    let splits = make_splits(pool.len(), &plan).map_err(at("split"))?;
    Ok(splits.iter().map(|s| s.remap(pool)).collect())
}

/// Runs the configured strategy on `task`; single-split runs use the first split.
pub fn run_strategy(cfg: &ExperimentConfig, task: &HpoTask, splits: &[Split]) -> CliResult<HpoTrace> {
    let s = &cfg.strategy;
    let mut run = RunConfig::new(
        cfg.method.to_method(),
        s.t,
        s.hyper_init.expand(task.problem.hyper_dim())?,
    );
    run.warm_start = s.warm_start;
    let mut opt = OuterOptimizer::new(s.outer.kind, s.outer.alpha_out).map_err(at("strategy.outer"))?;
    let trace = match s.kind {
        StrategyKind::Single => run_single(task, &splits[0], &run, &mut opt),
        StrategyKind::Ehg => run_ehg(task, splits, &run, &mut opt),
        StrategyKind::Oehg => {
            let alpha = s.alpha_deploy.unwrap_or(cfg.method.alpha_in);
            run_oehg(task, splits, &run, &mut opt, alpha)
        }
    };
    trace.map_err(at("strategy"))
}

pub fn trace_rows(problem: &dyn BilevelProblem, trace: &HpoTrace) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in &trace.records {
        let eff = problem.effective_hyper(&r.hyper);
        let raw_json = if r.hyper.len() <= MAX_TRACE_HYPER {
            serde_json::to_string(&r.hyper).expect("floats serialize")
        } else {
            String::new()
        };
        for (j, (tr, va)) in r.train_losses.iter().zip(&r.val_losses).enumerate() {
            rows.push(vec![
                r.step.to_string(),
                j.to_string(),
                fmt_f64(norm(&eff)),
                raw_json.clone(),
                fmt_opt(r.split_grad_norms.get(j).copied()),
                fmt_f64(*tr),
                fmt_f64(*va),
                fmt_opt(r.test_loss),
            ]);
        }
    }
    rows
}

pub fn final_report(cfg: &ExperimentConfig, problem: &dyn BilevelProblem, trace: &HpoTrace) -> FinalReport {
    let last = trace.records.last().expect("trace holds the final record");
    FinalReport {
        strategy: cfg.strategy.kind,
        problem: problem.name().to_string(),
        outer_steps: cfg.strategy.t,
        final_hyper_raw: trace.final_hyper.clone(),
        final_hyper_effective: problem.effective_hyper(&trace.final_hyper),
        final_theta: trace.deployed_theta.clone(),
        final_val_loss: last.val_losses.iter().sum::<f64>() / last.val_losses.len() as f64,
        final_test_loss: last.test_loss,
        config: serde_json::to_value(cfg).expect("config serializes"),
    }
}

pub fn build(cfg: &ExperimentConfig, prepared: &Prepared) -> CliResult<Box<dyn BilevelProblem>> {
    let spec = cfg.model_spec(prepared.classes());
    build_problem(&spec, prepared.data.dim(), prepared.data.len()).map_err(at("problem"))
}

/// Runs a search and writes `trace.csv` and `final.json` into the sink.
pub fn tune(cfg: &ExperimentConfig, sink: &mut Sink) -> CliResult<FinalReport> {
    cfg.validate(Command::Tune)?;
    let prepared = inputs::load(cfg)?;
    let mut data = prepared.data.clone();
    if let Some((noisy, _)) = inputs::corrupt_rows(cfg, &data, &prepared.pool)? {
        data = noisy;
    }
    let problem = build(cfg, &prepared)?;
    let splits = pool_splits(cfg, &prepared.pool)?;
    let task = HpoTask {
        problem: problem.as_ref(),
        data: &data,
        deploy_idx: &prepared.pool,
        test_idx: (!prepared.test.is_empty()).then_some(prepared.test.as_slice()),
    };
    let trace = run_strategy(cfg, &task, &splits)?;
    if cfg.output.wants(Format::Csv) {
        sink.write("trace.csv", &csv_bytes(&TRACE_HEADER, trace_rows(problem.as_ref(), &trace)))?;
    }
    let report = final_report(cfg, problem.as_ref(), &trace);
    if cfg.output.wants(Format::Json) {
        sink.json("final.json", &report)?;
    }
    Ok(report)
}
