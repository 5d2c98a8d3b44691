use bilevel_core::data::Split;
use bilevel_core::hypergrad::inner_solve;
use bilevel_core::problems::{accuracy, DataLoss};
use bilevel_core::strategies::{HpoTask, StrategyKind};
use bilevel_core::{Dataset, Task};
use serde::Serialize;

use crate::commands::tune::{build, pool_splits, run_strategy, trace_rows, TRACE_HEADER};
use crate::config::{Command, ExperimentConfig, Format};
use crate::error::{CliError, CliResult};
use crate::inputs;
use crate::output::{csv_bytes, fmt_f64, Sink};

/// Raw weight whose sigmoid rounds to one: the uniform-weight baseline.
const FULL_WEIGHT: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleanReport {
    pub strategy: StrategyKind,
    pub untrusted: usize,
    pub trusted: usize,
    pub corrupted: Option<usize>,
    pub threshold: f64,
    pub flagged: usize,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mean_weight_corrupted: Option<f64>,
    pub mean_weight_clean: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub baseline_test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

struct Scores {
    f1: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    warning: Option<String>,
}

/// Cleaner quality with "corrupted" as the positive class.
fn scores(flagged: &[bool], corrupted: &[bool]) -> Scores {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&f, &c) in flagged.iter().zip(corrupted) {
        match (f, c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fn_ == 0 {
        return Scores {
            f1: None,
            precision: None,
            recall: None,
            warning: Some("no corrupted samples; F1 is not applicable".into()),
        };
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    Scores {
        f1: Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
        precision,
        recall: Some(tp as f64 / (tp + fn_) as f64),
        warning: None,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Learns per-sample weights for the untrusted rows of the pool.
///
/// The last `trusted` pool rows keep their labels and supply the validation
/// sets: each split trains on every untrusted row plus the training part of
/// a split of the trusted rows, and validates on the rest. The deployed model
/// and the uniform-weight baseline are both trained on the untrusted rows
/// with the same number of gradient steps.
pub fn clean(cfg: &ExperimentConfig, sink: &mut Sink) -> CliResult<CleanReport> {
    cfg.validate(Command::Clean)?;
    let prepared = inputs::load(cfg)?;
    let settings = cfg.clean.clone().unwrap_or_default();
    let n_pool = prepared.pool.len();
    let trusted_n = settings.trusted.unwrap_or((n_pool as f64 * 0.2).round() as usize);
    if trusted_n < 2 || trusted_n >= n_pool {
        return Err(CliError::config(
            "clean.trusted",
            format!("need 2 <= trusted < {n_pool} pool rows, got {trusted_n}"),
        ));
    }
    let (untrusted, trusted) = prepared.pool.split_at(n_pool - trusted_n);
    let corrupted = inputs::corrupt_rows(cfg, &prepared.data, untrusted)?;
    let (data, mask): (Dataset, Option<Vec<bool>>) = match corrupted {
        Some((ds, clean)) => (ds, Some(clean)),
        None => (prepared.data.clone(), None),
    };
    let k = match data.task() {
        Task::Multiclass(k) => k,
        other => return Err(CliError::config("data", format!("clean needs multiclass labels, got {other:?}"))),
    };

    let problem = build(cfg, &prepared)?;
    let splits: Vec<Split> = pool_splits(cfg, trusted)?
        .into_iter()
        .map(|s| {
            let mut train = untrusted.to_vec();
            train.extend(&s.train_idx);
            Split::new(train, s.val_idx, s.seed)
        })
        .collect::<bilevel_core::Result<_>>()?;
    let test = (!prepared.test.is_empty()).then_some(prepared.test.as_slice());
    let task = HpoTask {
        problem: problem.as_ref(),
        data: &data,
        deploy_idx: untrusted,
        test_idx: test,
    };
    let trace = run_strategy(cfg, &task, &splits)?;

    let weights = problem.effective_hyper(&trace.final_hyper);
    let flagged: Vec<bool> = untrusted.iter().map(|&i| weights[i] < settings.threshold).collect();
    let truth: Option<Vec<bool>> = mask.as_ref().map(|m| untrusted.iter().map(|&i| !m[i]).collect());
    let sc = match &truth {
        Some(t) => scores(&flagged, t),
        None => Scores {
            f1: None,
            precision: None,
            recall: None,
            warning: Some("no corruption mask; F1 omitted".into()),
        },
    };
    if let Some(w) = &sc.warning {
        eprintln!("warning: {w}");
    }
    let pick = |want: bool| {
        truth.as_ref().and_then(|t| mean(untrusted.iter().zip(t).filter(|(_, c)| **c == want).map(|(&i, _)| weights[i])))
    };

    let loss = DataLoss::Softmax { classes: k };
    let (steps, alpha) = match cfg.strategy.kind {
        StrategyKind::Oehg => (cfg.strategy.t, cfg.strategy.alpha_deploy.unwrap_or(cfg.method.alpha_in)),
        _ => (cfg.method.k, cfg.method.alpha_in),
    };
    let (test_accuracy, baseline_test_accuracy) = match test {
        Some(idx) => {
            let view = data.view(idx);
            let uniform = vec![FULL_WEIGHT; problem.hyper_dim()];
            let theta0 = vec![0.0; problem.param_dim()];
            let base = inner_solve(problem.as_ref(), &uniform, &theta0, &data.view(untrusted), steps, alpha)?;
            (
                Some(accuracy(loss, &trace.deployed_theta, &view)),
                Some(accuracy(loss, base.last(), &view)),
            )
        }
        None => (None, None),
    };

    let report = CleanReport {
        strategy: cfg.strategy.kind,
        untrusted: untrusted.len(),
        trusted: trusted_n,
        corrupted: truth.as_ref().map(|t| t.iter().filter(|c| **c).count()),
        threshold: settings.threshold,
        flagged: flagged.iter().filter(|f| **f).count(),
        f1: sc.f1,
        precision: sc.precision,
        recall: sc.recall,
        mean_weight_corrupted: pick(true),
        mean_weight_clean: pick(false),
        test_accuracy,
        baseline_test_accuracy,
        warning: sc.warning,
    };

    if cfg.output.wants(Format::Csv) {
        let rows = untrusted.iter().map(|&i| {
            vec![
                i.to_string(),
                fmt_f64(trace.final_hyper[i]),
                fmt_f64(weights[i]),
                mask.as_ref().map(|m| m[i].to_string()).unwrap_or_default(),
            ]
        });
        sink.write(
            "weights.csv",
            &csv_bytes(&["sample_id", "raw_weight", "sigmoid_weight", "is_clean_truth"], rows),
        )?;
        sink.write("trace.csv", &csv_bytes(&TRACE_HEADER, trace_rows(problem.as_ref(), &trace)))?;
    }
    if cfg.output.wants(Format::Json) {
        sink.json("clean_report.json", &report)?;
    }
    Ok(report)
}
