//! Outer-loop optimizers and hyperparameter search strategies.
//!
//! * single split: the classical unrolled or implicit outer loop;
//! * EHG: the hypergradient is averaged over `U` train/validation splits;
//! * OEHG: one shadow model per split advances a single inner step per outer
//!   step, and a separately deployed model is trained alongside.
//!
//! Per-split work runs on the rayon pool; results are always reduced in
//! split order so traces are bit-reproducible for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::hypergrad::{inner_solve, HypergradMethod, HypergradResult};
use crate::linalg::{all_finite, axpy, norm, scale};
use crate::problems::BilevelProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterKind {
    Gd,
    Adam,
}

/// Gradient descent or Adam on the raw hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptimizer {
    pub kind: OuterKind,
    pub alpha_out: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl OuterOptimizer {
    pub fn new(kind: OuterKind, alpha_out: f64) -> Result<Self> {
        if !(alpha_out > 0.0 && alpha_out.is_finite()) {
            return Err(Error::Config(format!("alpha_out must be positive, got {alpha_out}")));
        }
        Ok(OuterOptimizer {
            kind,
            alpha_out,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn gd(alpha_out: f64) -> Result<Self> {
        Self::new(OuterKind::Gd, alpha_out)
    }

    pub fn adam(alpha_out: f64) -> Result<Self> {
        Self::new(OuterKind::Adam, alpha_out)
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Applies one update to `hyper` in place.
    pub fn step(&mut self, hyper: &mut [f64], g: &[f64]) -> Result<()> {
        if g.len() != hyper.len() {
            return Err(Error::dims("outer gradient", hyper.len(), g.len()));
        }
        self.t += 1;
        match self.kind {
            OuterKind::Gd => axpy(-self.alpha_out, g, hyper),
            OuterKind::Adam => {
                if self.m.len() != g.len() {
                    self.m = vec![0.0; g.len()];
                    self.v = vec![0.0; g.len()];
                }
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..g.len() {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    hyper[i] -= self.alpha_out * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Single,
    Ehg,
    Oehg,
}

/// The problem and data a search runs on.
#[derive(Clone, Copy)]
pub struct HpoTask<'a> {
    pub problem: &'a dyn BilevelProblem,
    pub data: &'a Dataset,
    /// Rows the deployed model is trained on.
    pub deploy_idx: &'a [usize],
    pub test_idx: Option<&'a [usize]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: HypergradMethod,
    pub outer_steps: usize,
    pub hyper_init: Vec<f64>,
    /// Defaults to the zero vector.
    pub theta_init: Option<Vec<f64>>,
    /// Start each inner solve from the previous outer step's `θ_K`.
    pub warm_start: bool,
}

impl RunConfig {
    pub fn new(method: HypergradMethod, outer_steps: usize, hyper_init: Vec<f64>) -> Self {
        RunConfig {
            method,
            outer_steps,
            hyper_init,
            theta_init: None,
            warm_start: false,
        }
    }
}

/// Everything recorded at one outer step `t`, evaluated at `λ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub hyper: Vec<f64>,
    /// Mean hypergradient used for the update; absent on the final record.
    pub hypergrad: Option<Vec<f64>>,
    pub split_grad_norms: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoTrace {
    /// `T + 1` records, one per visited `λ_t`.
    pub records: Vec<StepRecord>,
    pub final_hyper: Vec<f64>,
    /// Per-split inner solutions (shadow models for OEHG) at `λ_T`.
    pub split_thetas: Vec<Vec<f64>>,
    pub deployed_theta: Vec<f64>,
}

fn validate(task: &HpoTask, splits: &[Split], cfg: &RunConfig) -> Result<Vec<f64>> {
    let p = task.problem;
    if cfg.outer_steps == 0 {
        return Err(Error::Config("outer steps T must be at least 1".into()));
    }
    if splits.is_empty() {
        return Err(Error::Config("at least one split is required".into()));
    }
    if cfg.hyper_init.len() != p.hyper_dim() {
        return Err(Error::dims("initial hyperparameters", p.hyper_dim(), cfg.hyper_init.len()));
    }
    if task.deploy_idx.is_empty() {
        return Err(Error::EmptyData("deployment set is empty".into()));
    }
    cfg.method.validate(p)?;
    let theta0 = cfg.theta_init.clone().unwrap_or_else(|| vec![0.0; p.param_dim()]);
    if theta0.len() != p.param_dim() {
        return Err(Error::dims("initial parameters", p.param_dim(), theta0.len()));
    }
    Ok(theta0)
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtOuterStep {
        step,
        source: Box::new(e),
    }
}

/// Ordered mean of per-split hypergradients.
pub fn mean_hypergrad(grads: &[Vec<f64>]) -> Vec<f64> {
    let mut sum = vec![0.0; grads[0].len()];
    for g in grads {
        axpy(1.0, g, &mut sum);
    }
    scale(1.0 / grads.len() as f64, &mut sum);
    sum
}

/// Evaluates `method` on every split at `hyper`, in parallel, returning the
/// per-split results in split order.
pub fn split_hypergrads(
    problem: &dyn BilevelProblem,
    data: &Dataset,
    splits: &[Split],
    method: &HypergradMethod,
    hyper: &[f64],
    theta0s: &[Vec<f64>],
) -> Result<Vec<HypergradResult>> {
    splits
        .par_iter()
        .zip(theta0s.par_iter())
        .map(|(s, t0)| method.estimate(problem, hyper, t0, &s.train(data), &s.val(data)))
        .collect()
}

fn deployed_fit(task: &HpoTask, method: &HypergradMethod, hyper: &[f64], theta0: &[f64]) -> Result<Vec<f64>> {
    let view = task.data.view(task.deploy_idx);
    let traj = inner_solve(task.problem, hyper, theta0, &view, method.inner_steps, method.alpha_in)?;
    Ok(traj.last().to_vec())
}

fn test_loss(task: &HpoTask, hyper: &[f64], theta: &[f64]) -> Option<f64> {
    task.test_idx
        .map(|idx| task.problem.outer_loss(hyper, theta, &task.data.view(idx)))
}

fn split_losses(task: &HpoTask, splits: &[Split], hyper: &[f64], thetas: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    splits
        .iter()
        .zip(thetas)
        .map(|(s, t)| {
            (
                task.problem.outer_loss(hyper, t, &s.train(task.data)),
                task.problem.outer_loss(hyper, t, &s.val(task.data)),
            )
        })
        .unzip()
}

/// Classical outer loop on one split. Identical to [`run_ehg`] with `U = 1`.
pub fn run_single(task: &HpoTask, split: &Split, cfg: &RunConfig, opt: &mut OuterOptimizer) -> Result<HpoTrace> {
    run_ehg(task, std::slice::from_ref(split), cfg, opt)
}

/// Ensemble hypergradient descent: each outer step re-solves the inner
/// problem on every split and steps with the mean hypergradient.
pub fn run_ehg(task: &HpoTask, splits: &[Split], cfg: &RunConfig, opt: &mut OuterOptimizer) -> Result<HpoTrace> {
    let theta0 = validate(task, splits, cfg)?;
    let p = task.problem;
    let u = splits.len();
    let mut hyper = cfg.hyper_init.clone();
    p.project(&mut hyper);
    let mut starts = vec![theta0.clone(); u];
    let mut records = Vec::with_capacity(cfg.outer_steps + 1);

    for t in 0..=cfg.outer_steps {
        let last = t == cfg.outer_steps;
        let (grad, norms, thetas) = if last {
            let thetas: Vec<Vec<f64>> = splits
                .par_iter()
                .zip(starts.par_iter())
                .map(|(s, t0)| {
                    inner_solve(p, &hyper, t0, &s.train(task.data), cfg.method.inner_steps, cfg.method.alpha_in)
                        .map(|tr| tr.last().to_vec())
                })
                .collect::<Result<_>>()
                .map_err(at_step(t))?;
            (None, Vec::new(), thetas)
        } else {
            let results = split_hypergrads(p, task.data, splits, &cfg.method, &hyper, &starts).map_err(at_step(t))?;
            let grads: Vec<Vec<f64>> = results.iter().map(|r| r.grad.clone()).collect();
            let norms = grads.iter().map(|g| norm(g)).collect();
            let thetas = results.into_iter().map(|r| r.inner_final).collect();
            (Some(mean_hypergrad(&grads)), norms, thetas)
        };
        let (train_losses, val_losses) = split_losses(task, splits, &hyper, &thetas);
        let test = match task.test_idx {
            Some(_) => {
                let deployed = deployed_fit(task, &cfg.method, &hyper, &theta0).map_err(at_step(t))?;
                test_loss(task, &hyper, &deployed)
            }
            None => None,
        };
        if cfg.warm_start {
            starts = thetas.clone();
        }
        let record = StepRecord {
            step: t,
            hyper: hyper.clone(),
            hypergrad: grad.clone(),
            split_grad_norms: norms,
            train_losses,
            val_losses,
            test_loss: test,
        };
        check_record(&record)?;
        records.push(record);

        if last {
            let deployed = deployed_fit(task, &cfg.method, &hyper, &theta0).map_err(at_step(t))?;
            return Ok(HpoTrace {
                records,
                final_hyper: hyper,
                split_thetas: thetas,
                deployed_theta: deployed,
            });
        }
        let g = grad.expect("hypergradient on non-final step");
        opt.step(&mut hyper, &g).map_err(at_step(t))?;
        p.project(&mut hyper);
    }
    unreachable!("loop returns on the final step")
}

fn check_record(r: &StepRecord) -> Result<()> {
    let finite = all_finite(&r.hyper)
        && r.hypergrad.as_deref().is_none_or(all_finite)
        && all_finite(&r.train_losses)
        && all_finite(&r.val_losses)
        && r.test_loss.is_none_or(f64::is_finite);
    if finite {
        Ok(())
    } else {
        Err(Error::AtOuterStep {
            step: r.step,
            source: Box::new(Error::NonFinite {
                step: r.step,
                what: "outer trace value",
            }),
        })
    }
}

/// Online ensemble hypergradient descent.
///
/// Each outer step advances every shadow model by one inner gradient step,
/// differentiates the validation loss through that single step, updates the
/// hyperparameters with the ordered mean, and then moves the deployed model
/// by one gradient step (size `alpha_deploy`) at the new hyperparameters.
pub fn run_oehg(
    task: &HpoTask,
    splits: &[Split],
    cfg: &RunConfig,
    opt: &mut OuterOptimizer,
    alpha_deploy: f64,
) -> Result<HpoTrace> {
    let theta0 = validate(task, splits, cfg)?;
    if !(alpha_deploy > 0.0 && alpha_deploy.is_finite()) {
        return Err(Error::Config(format!("alpha_deploy must be positive, got {alpha_deploy}")));
    }
    let p = task.problem;
    let alpha = cfg.method.alpha_in;
    let deploy_view = task.data.view(task.deploy_idx);
    let mut hyper = cfg.hyper_init.clone();
    p.project(&mut hyper);
    let mut shadows = vec![theta0.clone(); splits.len()];
    let mut deployed = theta0;
    let mut records = Vec::with_capacity(cfg.outer_steps + 1);

    for t in 0..cfg.outer_steps {
        let steps: Vec<(Vec<f64>, Vec<f64>)> = splits
            .par_iter()
            .zip(shadows.par_iter())
            .map(|(s, shadow)| oehg_split_step(p, &hyper, shadow, s, task.data, alpha))
            .collect::<Result<_>>()
            .map_err(at_step(t))?;
        let (next, grads): (Vec<Vec<f64>>, Vec<Vec<f64>>) = steps.into_iter().unzip();
        let g = mean_hypergrad(&grads);
        let (train_losses, val_losses) = split_losses(task, splits, &hyper, &next);
        let record = StepRecord {
            step: t,
            hyper: hyper.clone(),
            hypergrad: Some(g.clone()),
            split_grad_norms: grads.iter().map(|g| norm(g)).collect(),
            train_losses,
            val_losses,
            test_loss: test_loss(task, &hyper, &deployed),
        };
        check_record(&record)?;
        records.push(record);

        opt.step(&mut hyper, &g).map_err(at_step(t))?;
        p.project(&mut hyper);
        shadows = next;
        let dg = p.inner_grad_theta(&hyper, &deployed, &deploy_view);
        axpy(-alpha_deploy, &dg, &mut deployed);
        if !all_finite(&deployed) {
            return Err(at_step(t)(Error::NonFinite {
                step: t,
                what: "deployed model",
            }));
        }
    }

    let t = cfg.outer_steps;
    let (train_losses, val_losses) = split_losses(task, splits, &hyper, &shadows);
    let record = StepRecord {
        step: t,
        hyper: hyper.clone(),
        hypergrad: None,
        split_grad_norms: Vec::new(),
        train_losses,
        val_losses,
        test_loss: test_loss(task, &hyper, &deployed),
    };
    check_record(&record)?;
    records.push(record);
    Ok(HpoTrace {
        records,
        final_hyper: hyper,
        split_thetas: shadows,
        deployed_theta: deployed,
    })
}

/// One shadow update and the hypergradient through it; returns the new
/// shadow and the split's hypergradient.
pub fn oehg_split_step(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    shadow: &[f64],
    split: &Split,
    data: &Dataset,
    alpha_in: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let train = split.train(data);
    let val = split.val(data);
    let mut next = shadow.to_vec();
    axpy(-alpha_in, &problem.inner_grad_theta(hyper, shadow, &train), &mut next);
    if !all_finite(&next) {
        return Err(Error::NonFinite {
            step: 0,
            what: "shadow model",
        });
    }
    let a = problem.outer_grad_theta(hyper, &next, &val);
    let mut g = problem.outer_grad_lambda(hyper, &next, &val);
    axpy(-alpha_in, &problem.inner_mixed_vp(hyper, shadow, &train, &a), &mut g);
    Ok((next, g))
}
