use bilevel_core::data::{gen_classes, gen_linear};
use bilevel_core::diagnostics::ridge_exact_hypergrad;
use bilevel_core::hypergrad::{aid_hypergrad, finite_diff_hypergrad, inner_solve, itd_hypergrad, AidSolver};
use bilevel_core::linalg::rel_err;
use bilevel_core::problems::{build_problem, verify_derivatives};
use bilevel_core::strategies::oehg_split_step;
use bilevel_core::{BilevelProblem, Dataset, ModelKind, ModelSpec, Split, Task};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::Sink;

pub const ITD_TOLERANCE: f64 = 1e-4;
pub const OEHG_TOLERANCE: f64 = 1e-10;
pub const AID_TOLERANCE: f64 = 1e-6;
const ALPHA_IN: f64 = 0.1;

/// A problem with the data it is checked on.
pub struct CheckTarget {
    pub problem: Box<dyn BilevelProblem>,
    pub data: Dataset,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub trials: usize,
    pub seed: u64,
    pub checks: Vec<CheckEntry>,
    pub passed: bool,
}

impl CheckReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
    }
}

fn entry(name: String, error: f64, threshold: f64) -> CheckEntry {
    CheckEntry {
        passed: error < threshold,
        name,
        error,
        threshold,
    }
}

fn split_of(n: usize) -> Split {
    let cut = n * 2 / 3;
    Split::new((0..cut).collect(), (cut..n).collect(), 0).expect("disjoint halves")
}

/// Every zoo model on small seeded data of the matching task.
pub fn default_targets(seed: u64) -> CliResult<Vec<CheckTarget>> {
    let n = 24;
    let (reg, _) = gen_linear(n, 3, seed, 0.3, seed.wrapping_add(1))?;
    let two = gen_classes(n, 3, 2, 1.0, seed.wrapping_add(2), seed.wrapping_add(3))?;
    let y = two.labels().iter().map(|v| if *v > 0.5 { 1.0 } else { -1.0 }).collect();
    let bin = Dataset::new(two.features().clone(), y, Task::Binary)?;
    let multi = gen_classes(n, 3, 3, 1.0, seed.wrapping_add(4), seed.wrapping_add(5))?;
    ModelKind::ALL
        .iter()
        .map(|&kind| {
            let data = match kind {
                ModelKind::LogisticL2 | ModelKind::SvmSqhinge => bin.clone(),
                ModelKind::SoftmaxL2 | ModelKind::HypercleanSoftmax => multi.clone(),
                _ => reg.clone(),
            };
            let spec = ModelSpec::new(kind).with_delta(1e-2).with_classes(3);
            let problem = build_problem(&spec, 3, data.len())?;
            Ok(CheckTarget {
                problem,
                data,
                split: split_of(n),
            })
        })
        .collect()
}

fn probe(dim: usize, offset: f64, scale: f64) -> Vec<f64> {
    (0..dim).map(|i| offset + scale * ((i as f64) + 1.0).sin()).collect()
}

/// Derivative checks against finite differences, ITD against differences of
/// the unrolled objective, one OEHG step against one-step ITD, and, for
/// ridge, AID at the closed-form optimum against the exact hypergradient.
pub fn run_checks(targets: &[CheckTarget], trials: usize, seed: u64) -> CliResult<CheckReport> {
    let mut checks = Vec::new();
    for t in targets {
        let p = t.problem.as_ref();
        let name = p.name().to_string();
        let train = t.split.train(&t.data);
        let val = t.split.val(&t.data);

        let report = verify_derivatives(p, &train, &val, trials, seed);
        for c in &report.checks {
            checks.push(entry(format!("{name}/{}", c.name), c.max_rel_err, report.threshold));
        }

        let hyper = probe(p.hyper_dim(), -1.0, 0.1);
        let theta0 = probe(p.param_dim(), 0.0, 0.2);
        for k in [1, 5, 20] {
            let err = match inner_solve(p, &hyper, &theta0, &train, k, ALPHA_IN)
                .and_then(|traj| itd_hypergrad(p, &hyper, &traj, &train, &val))
                .and_then(|itd| {
                    let fd = finite_diff_hypergrad(p, &hyper, &theta0, &train, &val, k, ALPHA_IN, 1e-5)?;
                    Ok(rel_err(&itd.grad, &fd))
                }) {
                Ok(e) => e,
                Err(_) => f64::INFINITY,
            };
            checks.push(entry(format!("{name}/itd_vs_fd_k{k}"), err, ITD_TOLERANCE));
        }

        let err = match oehg_split_step(p, &hyper, &theta0, &t.split, &t.data, ALPHA_IN).and_then(|(_, g)| {
            let traj = inner_solve(p, &hyper, &theta0, &train, 1, ALPHA_IN)?;
            Ok(rel_err(&g, &itd_hypergrad(p, &hyper, &traj, &train, &val)?.grad))
        }) {
            Ok(e) => e,
            Err(_) => f64::INFINITY,
        };
        checks.push(entry(format!("{name}/oehg_one_step"), err, OEHG_TOLERANCE));

        if name == ModelKind::Ridge.as_str() {
            let lambda: f64 = 0.3;
            let u = [lambda.ln()];
            let err = match bilevel_core::diagnostics::ridge_closed_form(&train, lambda).and_then(|theta| {
                let z = p.param_dim();
                let aid = aid_hypergrad(p, &u, &theta, &train, &val, AidSolver::ConjugateGradient, z, 1e-14)?;
                let exact = ridge_exact_hypergrad(&train, &val, lambda)? * lambda;
                Ok(rel_err(&aid.grad, &[exact]))
            }) {
                Ok(e) => e,
                Err(_) => f64::INFINITY,
            };
            checks.push(entry(format!("{name}/aid_vs_exact"), err, AID_TOLERANCE));
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(CheckReport {
        trials,
        seed,
        checks,
        passed,
    })
}

pub fn print_report(report: &CheckReport) {
    for c in &report.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("{mark} {:<40} {:.3e} (< {:.0e})", c.name, c.error, c.threshold);
    }
    let failed = report.failures().len();
    println!("{} checks, {} failed", report.checks.len(), failed);
}

/// Runs the checks, writes `check.json`, and fails if any check failed.
pub fn check(targets: &[CheckTarget], trials: usize, seed: u64, sink: &mut Sink) -> CliResult<CheckReport> {
    let report = run_checks(targets, trials, seed)?;
    print_report(&report);
    sink.json("check.json", &report)?;
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::CheckFailed(report.failures()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_zoo_passes() {
        let targets = default_targets(1).unwrap();
        let report = run_checks(&targets, 3, 7).unwrap();
        assert!(report.passed, "{:?}", report.failures());
        assert!(report.checks.iter().any(|c| c.name == "ridge/aid_vs_exact"));
    }
}
