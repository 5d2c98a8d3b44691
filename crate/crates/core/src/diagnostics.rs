//! Reference computations for validating hypergradient estimators.
//!
//! * A closed-form ridge oracle with the exact hypergradient.
//! * A Monte-Carlo bias/variance decomposition of estimator error over
//!   replicated datasets and split sets.
//! * An exhaustive check of the finite-population correction for sampling
//!   splits without replacement.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_beta, enumerate_all_splits, gen_linear_with_beta, make_splits, DataView, Split, SplitMode, SplitPlan};
use crate::error::{Error, Result};
use crate::hypergrad::{hessian_extremes, optimal_step, HypergradMethod};
use crate::linalg::{dense_solve, dot, norm_sq, spectral_extremes, sub, Mat};
use crate::problems::{build_problem, BilevelProblem, ModelKind, ModelSpec};
use crate::rng::{derive_seed, rng_from_seed};

/// Closed-form solution of the ridge inner problem
/// `(1/m)‖Xθ − y‖² + λ‖θ‖²`, i.e. `(XᵀX/m + λI) θ = Xᵀy/m`.
#[derive(Debug, Clone)]
pub struct RidgeOracle {
    gram: Mat,
    xty: Vec<f64>,
    val_x: Vec<Vec<f64>>,
    val_y: Vec<f64>,
}

impl RidgeOracle {
    pub fn new(train: &DataView, val: &DataView) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyData("ridge oracle needs nonempty train and validation views".into()));
        }
        let d = train.dim();
        let m = train.len() as f64;
        let mut gram = Mat::zeros(d, d);
        let mut xty = vec![0.0; d];
        for (_, x, y) in train.samples() {
            for i in 0..d {
                xty[i] += x[i] * y / m;
                for j in 0..d {
                    gram.set(i, j, gram.get(i, j) + x[i] * x[j] / m);
                }
            }
        }
        let (val_x, val_y) = val.samples().map(|(_, x, y)| (x.to_vec(), y)).unzip();
        Ok(RidgeOracle {
            gram,
            xty,
            val_x,
            val_y,
        })
    }

    fn system(&self, lambda_eff: f64) -> Mat {
        let mut a = self.gram.clone();
        for i in 0..a.rows() {
            a.set(i, i, a.get(i, i) + lambda_eff);
        }
        a
    }

    pub fn theta(&self, lambda_eff: f64) -> Result<Vec<f64>> {
        dense_solve(&self.system(lambda_eff), &self.xty)
    }

    pub fn val_loss(&self, lambda_eff: f64) -> Result<f64> {
        let theta = self.theta(lambda_eff)?;
        let m = self.val_y.len() as f64;
        Ok(self
            .val_x
            .iter()
            .zip(&self.val_y)
            .map(|(x, y)| (dot(x, &theta) - y).powi(2))
            .sum::<f64>()
            / m)
    }

    /// `d R̂^val / d λ_eff` through `θ̂(λ)`, using `dθ̂/dλ = −(XᵀX/m + λI)⁻¹ θ̂`.
    pub fn hypergrad(&self, lambda_eff: f64) -> Result<f64> {
        let a = self.system(lambda_eff);
        let theta = dense_solve(&a, &self.xty)?;
        let dtheta: Vec<f64> = dense_solve(&a, &theta)?.into_iter().map(|v| -v).collect();
        let m = self.val_y.len() as f64;
        Ok(self
            .val_x
            .iter()
            .zip(&self.val_y)
            .map(|(x, y)| 2.0 / m * (dot(x, &theta) - y) * dot(x, &dtheta))
            .sum())
    }

    /// Hypergradient with respect to the raw coordinate `u = ln λ_eff`.
    pub fn hypergrad_raw(&self, u: f64) -> Result<f64> {
        Ok(u.exp() * self.hypergrad(u.exp())?)
    }

    /// `(L, μ)` for the inner loss: `L` is the top eigenvalue of its Hessian
    /// `2(XᵀX/m + λI)` and `μ = 2λ` its guaranteed strong-convexity modulus.
    pub fn curvature(&self, lambda_eff: f64) -> (f64, f64) {
        let (top, _) = spectral_extremes(&self.gram, 500, 0);
        (2.0 * (top + lambda_eff), 2.0 * lambda_eff)
    }
}

pub fn ridge_closed_form(train: &DataView, lambda_eff: f64) -> Result<Vec<f64>> {
    RidgeOracle::new(train, train)?.theta(lambda_eff)
}

pub fn ridge_exact_hypergrad(train: &DataView, val: &DataView, lambda_eff: f64) -> Result<f64> {
    RidgeOracle::new(train, val)?.hypergrad(lambda_eff)
}

/// Linear-Gaussian data generator for replicated experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGenerator {
    pub n: usize,
    pub d: usize,
    pub noise_sigma: f64,
    /// Coefficients are drawn once from this seed and shared by all replicates.
    pub beta_seed: u64,
}

/// How the hypergradient estimate of each split is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// The closed-form ridge hypergradient itself.
    Oracle,
    Method(HypergradMethod),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Fixed,
    /// `2/(L+μ)` from the inner Hessian of each split at `θ₀ = 0`.
    Contraction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarianceConfig {
    pub generator: LinearGenerator,
    pub model: ModelSpec,
    pub estimator: Estimator,
    pub step_rule: StepRule,
    /// Effective regularization strengths, applied to every coordinate.
    pub lambdas: Vec<f64>,
    pub replicates: usize,
    pub u: usize,
    pub gamma: f64,
    pub mode: SplitMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVariancePoint {
    pub lambda: f64,
    pub error: f64,
    pub variance: f64,
    pub bias_sq: f64,
    pub identity_residual: f64,
    pub replicates: usize,
    pub u: usize,
}

/// Inner steps of the reference estimator for models without a closed form.
pub const REFERENCE_STEPS: usize = 2000;

fn contraction_alpha(problem: &dyn BilevelProblem, hyper: &[f64], train: &DataView) -> Result<f64> {
    let theta0 = vec![0.0; problem.param_dim()];
    let (l, mu) = hessian_extremes(problem, hyper, &theta0, train, 200, 0);
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::NumericalBreakdown {
            iteration: 0,
            reason: format!("inner Hessian has no positive curvature (L = {l})"),
        });
    }
    Ok(optimal_step(l, mu))
}

/// Hypergradient of one split in effective coordinates `d/dλ_eff`.
fn split_estimate(
    problem: &dyn BilevelProblem,
    model: ModelKind,
    estimator: &Estimator,
    rule: &StepRule,
    lambda: f64,
    train: &DataView,
    val: &DataView,
) -> Result<Vec<f64>> {
    let hyper = vec![lambda.ln(); problem.hyper_dim()];
    let raw = match estimator {
        Estimator::Oracle => {
            if model != ModelKind::Ridge {
                return Err(Error::Config(format!("no closed-form hypergradient for {model}")));
            }
            return Ok(vec![RidgeOracle::new(train, val)?.hypergrad(lambda)?]);
        }
        Estimator::Method(method) => {
            let mut method = method.clone();
            if *rule == StepRule::Contraction {
                method.alpha_in = contraction_alpha(problem, &hyper, train)?;
            }
            let theta0 = vec![0.0; problem.param_dim()];
            method.estimate(problem, &hyper, &theta0, train, val)?.grad
        }
    };
    Ok(raw.into_iter().map(|g| g / lambda).collect())
}

fn ensemble(per_split: Vec<Vec<f64>>) -> Vec<f64> {
    let u = per_split.len() as f64;
    let mut sum = vec![0.0; per_split[0].len()];
    for g in &per_split {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    sum.into_iter().map(|s| s / u).collect()
}

/// Empirical error, variance and squared bias of an ensemble hypergradient
/// estimator at each grid point.
///
/// Each replicate draws a fresh dataset (shared coefficients) and a fresh set
/// of `U` splits. The reference `ḡ` is the mean over replicates of the exact
/// ridge hypergradient, or of a long ITD run for other models; `g̃` is the
/// sample mean of the estimates, so `error = variance + bias²` holds exactly
/// up to rounding.
pub fn bias_variance_sweep(cfg: &BiasVarianceConfig) -> Result<Vec<BiasVariancePoint>> {
    if cfg.replicates < 2 {
        return Err(Error::Config(format!("replicates R must be at least 2, got {}", cfg.replicates)));
    }
    if cfg.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::Config("lambda grid values must be positive".into()));
    }
    if cfg.u == 0 {
        return Err(Error::Config("U must be at least 1".into()));
    }
    let g = &cfg.generator;
    let problem = build_problem(&cfg.model, g.d, g.n)?;
    let problem = problem.as_ref();
    if let Estimator::Method(m) = &cfg.estimator {
        m.validate(problem)?;
    }
    let beta = draw_beta(g.d, g.beta_seed);
    let reference = if cfg.model.kind == ModelKind::Ridge {
        Estimator::Oracle
    } else {
        Estimator::Method(HypergradMethod::itd(REFERENCE_STEPS, 1.0))
    };

    // (estimate, reference) per replicate and grid point
    let per_replicate: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|j| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
            let rep_seed = derive_seed(cfg.seed, j as u64);
            let ds = gen_linear_with_beta(g.n, &beta, g.noise_sigma, derive_seed(rep_seed, 0))?;
            let plan = SplitPlan {
                u: cfg.u,
                gamma: cfg.gamma,
                mode: cfg.mode,
                master_seed: derive_seed(rep_seed, 1),
            };
            let splits = make_splits(g.n, &plan)?;
            cfg.lambdas
                .iter()
                .map(|&lambda| {
                    let mut est = Vec::with_capacity(splits.len());
                    let mut refs = Vec::with_capacity(splits.len());
                    for s in &splits {
                        let (tr, va) = (s.train(&ds), s.val(&ds));
                        est.push(split_estimate(problem, cfg.model.kind, &cfg.estimator, &cfg.step_rule, lambda, &tr, &va)?);
                        refs.push(split_estimate(
                            problem,
                            cfg.model.kind,
                            &reference,
                            &StepRule::Contraction,
                            lambda,
                            &tr,
                            &va,
                        )?);
                    }
                    Ok((ensemble(est), ensemble(refs)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let r = cfg.replicates as f64;
    Ok(cfg
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let est: Vec<&Vec<f64>> = per_replicate.iter().map(|rep| &rep[i].0).collect();
            let refs: Vec<Vec<f64>> = per_replicate.iter().map(|rep| rep[i].1.clone()).collect();
            let truth = ensemble(refs);
            let mean = ensemble(est.iter().map(|v| (*v).clone()).collect());
            let error = est.iter().map(|e| norm_sq(&sub(e, &truth))).sum::<f64>() / r;
            let variance = est.iter().map(|e| norm_sq(&sub(e, &mean))).sum::<f64>() / r;
            let bias_sq = norm_sq(&sub(&mean, &truth));
            BiasVariancePoint {
                lambda,
                error,
                variance,
                bias_sq,
                identity_residual: (error - variance - bias_sq).abs(),
                replicates: cfg.replicates,
                u: cfg.u,
            }
        })
        .collect())
}

/// Parses `"start:stop:count"` into `count` evenly spaced values.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid must look like start:stop:count, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    let step = (stop - start) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| if i == count - 1 { stop } else { start + step * i as f64 })
        .collect())
}

/// Exhaustive population versus Monte-Carlo sampling of split subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcReport {
    pub n: usize,
    pub gamma: f64,
    /// Number of distinct splits `V`.
    pub population: usize,
    pub u: usize,
    pub samples: usize,
    /// Population variance `σ²` (normalized by `V`).
    pub sigma_sq: f64,
    /// Monte-Carlo `E‖x̄ − X̄‖²` drawing `U` splits without replacement.
    pub empirical: f64,
    /// `(V − U) σ² / (U (V − 1))`
    pub formula_without: f64,
    /// Monte-Carlo `E‖x̄ − X̄‖²` drawing with replacement.
    pub empirical_with: f64,
    /// `σ² / U`
    pub formula_with: f64,
}

fn mean_of(values: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut sum = vec![0.0; values[0].len()];
    for &i in idx {
        for (s, v) in sum.iter_mut().zip(&values[i]) {
            *s += v;
        }
    }
    let k = idx.len() as f64;
    sum.into_iter().map(|s| s / k).collect()
}

/// Checks the finite-population correction on the full population of
/// splits of `n` samples, with `value` giving each split's (hyper)gradient.
pub fn fpc_verify<F>(n: usize, gamma: f64, u: usize, samples: usize, seed: u64, value: F) -> Result<FpcReport>
where
    F: Fn(&Split) -> Result<Vec<f64>> + Sync,
{
    let splits = enumerate_all_splits(n, gamma)?;
    let v = splits.len();
    if u == 0 || u > v {
        return Err(Error::Config(format!("U must lie in 1..={v}, got {u}")));
    }
    if samples == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    let values: Vec<Vec<f64>> = splits.par_iter().map(&value).collect::<Result<_>>()?;
    let all: Vec<usize> = (0..v).collect();
    let pop_mean = mean_of(&values, &all);
    let sigma_sq = values.iter().map(|x| norm_sq(&sub(x, &pop_mean))).sum::<f64>() / v as f64;

    let chunks = 64.min(samples);
    let per_chunk: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, c as u64));
            let count = samples / chunks + usize::from(c < samples % chunks);
            let (mut without, mut with) = (0.0, 0.0);
            for _ in 0..count {
                let mut idx = sample(&mut rng, v, u).into_vec();
                idx.sort_unstable();
                without += norm_sq(&sub(&mean_of(&values, &idx), &pop_mean));
                let idx: Vec<usize> = (0..u).map(|_| rng.random_range(0..v)).collect();
                with += norm_sq(&sub(&mean_of(&values, &idx), &pop_mean));
            }
            (without, with)
        })
        .collect();
    let (mut without, mut with) = (0.0, 0.0);
    for (a, b) in per_chunk {
        without += a;
        with += b;
    }
    let s = samples as f64;
    let (vf, uf) = (v as f64, u as f64);
    let formula_without = if v == 1 { 0.0 } else { (vf - uf) * sigma_sq / (uf * (vf - 1.0)) };
    Ok(FpcReport {
        n,
        gamma,
        population: v,
        u,
        samples,
        sigma_sq,
        empirical: without / s,
        formula_without,
        empirical_with: with / s,
        formula_with: sigma_sq / uf,
    })
}
