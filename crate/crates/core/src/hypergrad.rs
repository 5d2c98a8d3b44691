//! Hypergradient engines.
//!
//! * ITD differentiates through `K` unrolled gradient steps by reverse
//!   accumulation of Hessian- and mixed-vector products.
//! * T-RHG runs the same recursion but keeps only the mixed-product terms of
//!   the last `h` steps.
//! * AID solves `∇²_θ R̂^tr · v = ∇_θ R̂^val` with `Z` steps of a fixed-point or
//!   conjugate-gradient solver and applies the implicit function theorem.

use serde::{Deserialize, Serialize};

use crate::data::DataView;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, cg_solve, fixed_point_solve, norm, spectral_extremes, FnOperator};
use crate::problems::BilevelProblem;

/// Iterates `θ₀ … θ_K` of full-batch gradient descent on the inner loss.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTrajectory {
    pub thetas: Vec<Vec<f64>>,
    pub alpha_in: f64,
}

impl InnerTrajectory {
    /// Number of gradient steps taken.
    pub fn steps(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        self.thetas.last().expect("trajectory holds θ₀")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HypergradDiagnostics {
    /// `‖∇²_θ R̂^tr · v_Z − ∇_θ R̂^val‖` for AID.
    pub residual: Option<f64>,
    /// `‖θ_K‖`
    pub trajectory_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypergradResult {
    /// Hypergradient in raw hyperparameter coordinates.
    pub grad: Vec<f64>,
    pub inner_final: Vec<f64>,
    pub diagnostics: HypergradDiagnostics,
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual: v.len(),
        })
    }
}

fn check_inputs(problem: &dyn BilevelProblem, hyper: &[f64], theta: &[f64]) -> Result<()> {
    check_len("hyperparameters", problem.hyper_dim(), hyper)?;
    check_len("model parameters", problem.param_dim(), theta)
}

/// Runs `k` steps of `θ ← θ − α_in ∇_θ R̂^tr(λ, θ)` from `theta0`.
pub fn inner_solve(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    theta0: &[f64],
    train: &DataView,
    k: usize,
    alpha_in: f64,
) -> Result<InnerTrajectory> {
    check_inputs(problem, hyper, theta0)?;
    if !(alpha_in > 0.0 && alpha_in.is_finite()) {
        return Err(Error::Config(format!("alpha_in must be positive, got {alpha_in}")));
    }
    let mut thetas = Vec::with_capacity(k + 1);
    thetas.push(theta0.to_vec());
    for step in 0..k {
        let cur = &thetas[step];
        let g = problem.inner_grad_theta(hyper, cur, train);
        if !all_finite(&g) {
            return Err(Error::NonFinite {
                step,
                what: "inner gradient",
            });
        }
        let mut next = cur.clone();
        axpy(-alpha_in, &g, &mut next);
        if !all_finite(&next) {
            return Err(Error::NonFinite {
                step,
                what: "inner iterate",
            });
        }
        thetas.push(next);
    }
    Ok(InnerTrajectory { thetas, alpha_in })
}

fn reverse_accumulate(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    traj: &InnerTrajectory,
    train: &DataView,
    val: &DataView,
    window: usize,
) -> Result<HypergradResult> {
    let theta_k = traj.last();
    check_inputs(problem, hyper, theta_k)?;
    let k = traj.steps();
    let alpha = traj.alpha_in;
    let mut g = problem.outer_grad_lambda(hyper, theta_k, val);
    let mut a = problem.outer_grad_theta(hyper, theta_k, val);
    check_len("outer hypergradient", problem.hyper_dim(), &g)?;
    // steps older than the window contribute no mixed terms, so the adjoint
    // need not be propagated past them
    for step in (k - window.min(k)..k).rev() {
        let theta = &traj.thetas[step];
        let mixed = problem.inner_mixed_vp(hyper, theta, train, &a);
        axpy(-alpha, &mixed, &mut g);
        if step > k - window.min(k) {
            let hv = problem.inner_hvp(hyper, theta, train, &a);
            axpy(-alpha, &hv, &mut a);
        }
        if !all_finite(&g) || !all_finite(&a) {
            return Err(Error::NonFinite {
                step,
                what: "reverse accumulation",
            });
        }
    }
    Ok(HypergradResult {
        grad: g,
        inner_final: theta_k.to_vec(),
        diagnostics: HypergradDiagnostics {
            residual: None,
            trajectory_norm: norm(theta_k),
        },
    })
}

/// Exact derivative of `λ ↦ R̂^val(λ, θ_K(λ))` through the unrolled trajectory.
pub fn itd_hypergrad(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    traj: &InnerTrajectory,
    train: &DataView,
    val: &DataView,
) -> Result<HypergradResult> {
    reverse_accumulate(problem, hyper, traj, train, val, traj.steps())
}

/// ITD restricted to the mixed-product terms of the last `h` inner steps.
pub fn trhg_hypergrad(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    traj: &InnerTrajectory,
    train: &DataView,
    val: &DataView,
    h: usize,
) -> Result<HypergradResult> {
    if h == 0 || h > traj.steps() {
        return Err(Error::Config(format!(
            "truncation window must satisfy 1 <= h <= K = {}, got {h}",
            traj.steps()
        )));
    }
    reverse_accumulate(problem, hyper, traj, train, val, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AidSolver {
    FixedPoint { step: f64 },
    ConjugateGradient,
}

/// Implicit hypergradient `∇_λ R̂^val − ∇²_{λθ} R̂^tr · v_Z` at `theta_k`.
#[allow(clippy::too_many_arguments)]
pub fn aid_hypergrad(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    theta_k: &[f64],
    train: &DataView,
    val: &DataView,
    solver: AidSolver,
    z: usize,
    tol: f64,
) -> Result<HypergradResult> {
    check_inputs(problem, hyper, theta_k)?;
    if !problem.supports_aid() {
        return Err(Error::Config(format!(
            "implicit differentiation is not available for {}",
            problem.name()
        )));
    }
    if z == 0 {
        return Err(Error::Config("solver_steps must be at least 1".into()));
    }
    let rhs = problem.outer_grad_theta(hyper, theta_k, val);
    let op = FnOperator::new(problem.param_dim(), |v: &[f64]| problem.inner_hvp(hyper, theta_k, train, v));
    let outcome = match solver {
        AidSolver::ConjugateGradient => cg_solve(&op, &rhs, z, tol)?,
        AidSolver::FixedPoint { step } => fixed_point_solve(&op, &rhs, step, z, tol)?,
    };
    let mut grad = problem.outer_grad_lambda(hyper, theta_k, val);
    let mixed = problem.inner_mixed_vp(hyper, theta_k, train, &outcome.solution);
    axpy(-1.0, &mixed, &mut grad);
    if !all_finite(&grad) {
        return Err(Error::NonFinite {
            step: outcome.iterations,
            what: "implicit hypergradient",
        });
    }
    Ok(HypergradResult {
        grad,
        inner_final: theta_k.to_vec(),
        diagnostics: HypergradDiagnostics {
            residual: Some(outcome.residual),
            trajectory_norm: norm(theta_k),
        },
    })
}

/// Central differences of the unrolled validation loss, re-running the inner
/// solver for every perturbed raw coordinate.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_hypergrad(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    theta0: &[f64],
    train: &DataView,
    val: &DataView,
    k: usize,
    alpha_in: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let unrolled = |h: &[f64]| -> Result<f64> {
        let traj = inner_solve(problem, h, theta0, train, k, alpha_in)?;
        Ok(problem.outer_loss(h, traj.last(), val))
    };
    let mut probe = hyper.to_vec();
    let mut grad = Vec::with_capacity(hyper.len());
    for j in 0..hyper.len() {
        probe[j] = hyper[j] + eps;
        let up = unrolled(&probe)?;
        probe[j] = hyper[j] - eps;
        let down = unrolled(&probe)?;
        probe[j] = hyper[j];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Contraction factor of the gradient step `θ ↦ θ − α∇` on an `L`-smooth,
/// `μ`-strongly convex function.
pub fn contraction_params(l: f64, mu: f64, alpha_in: f64) -> Result<f64> {
    if !(mu > 0.0 && l >= mu && l.is_finite()) {
        return Err(Error::Config(format!("need L >= mu > 0, got L = {l}, mu = {mu}")));
    }
    if !(alpha_in > 0.0) {
        return Err(Error::Config(format!("alpha_in must be positive, got {alpha_in}")));
    }
    if alpha_in > 2.0 / l {
        return Err(Error::NonContractive {
            alpha: alpha_in,
            limit: 2.0 / l,
        });
    }
    if alpha_in == 2.0 / (l + mu) {
        return Ok((l - mu) / (l + mu));
    }
    Ok((1.0 - alpha_in * mu).max(alpha_in * l - 1.0))
}

/// Step size `2/(L+μ)` minimizing the contraction factor.
pub fn optimal_step(l: f64, mu: f64) -> f64 {
    2.0 / (l + mu)
}

/// Largest and smallest eigenvalues of the inner Hessian at `theta`.
pub fn hessian_extremes(
    problem: &dyn BilevelProblem,
    hyper: &[f64],
    theta: &[f64],
    train: &DataView,
    iters: usize,
    seed: u64,
) -> (f64, f64) {
    let op = FnOperator::new(problem.param_dim(), |v: &[f64]| problem.inner_hvp(hyper, theta, train, v));
    spectral_extremes(&op, iters, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Itd,
    Trhg,
    AidFp,
    AidCg,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Itd => "itd",
            MethodKind::Trhg => "trhg",
            MethodKind::AidFp => "aid_fp",
            MethodKind::AidCg => "aid_cg",
        }
    }
}

/// A fully parameterized hypergradient estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradMethod {
    pub kind: MethodKind,
    /// `K`
    pub inner_steps: usize,
    /// `Z`, AID only.
    pub solver_steps: usize,
    /// `h`, T-RHG only.
    pub window: usize,
    pub alpha_in: f64,
    /// Fixed-point solver step; defaults to `alpha_in`.
    pub fp_step: Option<f64>,
    pub solver_tol: f64,
}

impl HypergradMethod {
    fn base(kind: MethodKind, k: usize, alpha_in: f64) -> Self {
        HypergradMethod {
            kind,
            inner_steps: k,
            solver_steps: 0,
            window: 0,
            alpha_in,
            fp_step: None,
            solver_tol: 1e-12,
        }
    }

    pub fn itd(k: usize, alpha_in: f64) -> Self {
        Self::base(MethodKind::Itd, k, alpha_in)
    }

    pub fn trhg(k: usize, h: usize, alpha_in: f64) -> Self {
        HypergradMethod {
            window: h,
            ..Self::base(MethodKind::Trhg, k, alpha_in)
        }
    }

    pub fn aid_cg(k: usize, z: usize, alpha_in: f64) -> Self {
        HypergradMethod {
            solver_steps: z,
            ..Self::base(MethodKind::AidCg, k, alpha_in)
        }
    }

    pub fn aid_fp(k: usize, z: usize, alpha_in: f64) -> Self {
        HypergradMethod {
            solver_steps: z,
            ..Self::base(MethodKind::AidFp, k, alpha_in)
        }
    }

    pub fn validate(&self, problem: &dyn BilevelProblem) -> Result<()> {
        if !(self.alpha_in > 0.0 && self.alpha_in.is_finite()) {
            return Err(Error::Config(format!("alpha_in must be positive, got {}", self.alpha_in)));
        }
        match self.kind {
            MethodKind::Itd => {}
            MethodKind::Trhg => {
                if self.window == 0 || self.window > self.inner_steps {
                    return Err(Error::Config(format!(
                        "truncation window must satisfy 1 <= h <= K = {}, got {}",
                        self.inner_steps, self.window
                    )));
                }
            }
            MethodKind::AidFp | MethodKind::AidCg => {
                if self.solver_steps == 0 {
                    return Err(Error::Config("solver_steps must be at least 1".into()));
                }
                if !problem.supports_aid() {
                    return Err(Error::Config(format!(
                        "implicit differentiation is not available for {}",
                        problem.name()
                    )));
                }
                if let Some(step) = self.fp_step {
                    if !(step > 0.0) {
                        return Err(Error::Config(format!("fp_step must be positive, got {step}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Solves the inner problem from `theta0` and returns the hypergradient.
    pub fn estimate(
        &self,
        problem: &dyn BilevelProblem,
        hyper: &[f64],
        theta0: &[f64],
        train: &DataView,
        val: &DataView,
    ) -> Result<HypergradResult> {
        self.validate(problem)?;
        let traj = inner_solve(problem, hyper, theta0, train, self.inner_steps, self.alpha_in)?;
        match self.kind {
            MethodKind::Itd => itd_hypergrad(problem, hyper, &traj, train, val),
            MethodKind::Trhg => trhg_hypergrad(problem, hyper, &traj, train, val, self.window),
            MethodKind::AidCg => aid_hypergrad(
                problem,
                hyper,
                traj.last(),
                train,
                val,
                AidSolver::ConjugateGradient,
                self.solver_steps,
                self.solver_tol,
            ),
            MethodKind::AidFp => aid_hypergrad(
                problem,
                hyper,
                traj.last(),
                train,
                val,
                AidSolver::FixedPoint {
                    step: self.fp_step.unwrap_or(self.alpha_in),
                },
                self.solver_steps,
                self.solver_tol,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classes, gen_linear, Dataset, Task};
    use crate::linalg::{dense_solve, dot, rel_err, scale, sub, Mat};
    use crate::problems::{build_problem, ModelKind, ModelSpec};
    use approx::assert_abs_diff_eq;

    fn ridge() -> Box<dyn BilevelProblem> {
        build_problem(&ModelSpec::new(ModelKind::Ridge), 1, 0).unwrap()
    }

    fn ridge_d(d: usize) -> Box<dyn BilevelProblem> {
        build_problem(&ModelSpec::new(ModelKind::Ridge), d, 0).unwrap()
    }

    fn seq(a: usize, b: usize) -> Vec<usize> {
        (a..b).collect()
    }

    /// Normalized ridge normal equations solved densely, plus the chain-rule
    /// derivative of the validation loss in `λ_eff`.
    fn oracle(train: &DataView, val: &DataView, lam: f64) -> (Vec<f64>, f64) {
        let d = train.dim();
        let m = train.len() as f64;
        let mut a = Mat::zeros(d, d);
        let mut b = vec![0.0; d];
        for (_, x, y) in train.samples() {
            for i in 0..d {
                b[i] += x[i] * y / m;
                for j in 0..d {
                    a.set(i, j, a.get(i, j) + x[i] * x[j] / m);
                }
            }
        }
        for i in 0..d {
            a.set(i, i, a.get(i, i) + lam);
        }
        let theta = dense_solve(&a, &b).unwrap();
        let dtheta: Vec<f64> = dense_solve(&a, &theta).unwrap().iter().map(|v| -v).collect();
        let mv = val.len() as f64;
        let g: f64 = val
            .samples()
            .map(|(_, x, y)| 2.0 / mv * (dot(x, &theta) - y) * dot(x, &dtheta))
            .sum();
        (theta, g)
    }

    /// Ridge inner problem with an outer loss `a·MSE + b·(‖θ − t‖² + ‖λ‖²)`.
    struct Blend {
        base: Box<dyn BilevelProblem>,
        a: f64,
        b: f64,
        target: Vec<f64>,
    }

    impl BilevelProblem for Blend {
        fn name(&self) -> &str {
            "blend"
        }
        fn hyper_dim(&self) -> usize {
            self.base.hyper_dim()
        }
        fn param_dim(&self) -> usize {
            self.base.param_dim()
        }
        fn inner_loss(&self, h: &[f64], t: &[f64], d: &DataView) -> f64 {
            self.base.inner_loss(h, t, d)
        }
        fn inner_grad_theta(&self, h: &[f64], t: &[f64], d: &DataView) -> Vec<f64> {
            self.base.inner_grad_theta(h, t, d)
        }
        fn inner_hvp(&self, h: &[f64], t: &[f64], d: &DataView, v: &[f64]) -> Vec<f64> {
            self.base.inner_hvp(h, t, d, v)
        }
        fn inner_mixed_vp(&self, h: &[f64], t: &[f64], d: &DataView, v: &[f64]) -> Vec<f64> {
            self.base.inner_mixed_vp(h, t, d, v)
        }
        fn outer_loss(&self, h: &[f64], t: &[f64], d: &DataView) -> f64 {
            let diff = sub(t, &self.target);
            self.a * self.base.outer_loss(h, t, d) + self.b * (dot(&diff, &diff) + dot(h, h))
        }
        fn outer_grad_theta(&self, h: &[f64], t: &[f64], d: &DataView) -> Vec<f64> {
            let mut g = self.base.outer_grad_theta(h, t, d);
            scale(self.a, &mut g);
            axpy(2.0 * self.b, &sub(t, &self.target), &mut g);
            g
        }
        fn outer_grad_lambda(&self, h: &[f64], _t: &[f64], _d: &DataView) -> Vec<f64> {
            h.iter().map(|u| 2.0 * self.b * u).collect()
        }
    }

    fn toy() -> Dataset {
        Dataset::new(Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), vec![1.0, 1.0], Task::Regression).unwrap()
    }

    #[test]
    fn inner_solve_zero_steps_and_hand_step() {
        let ds = toy();
        let idx = seq(0, 2);
        let p = ridge();
        let traj = inner_solve(p.as_ref(), &[0.0], &[0.0], &ds.view(&idx), 0, 0.1).unwrap();
        assert_eq!(traj.thetas, vec![vec![0.0]]);
        let traj = inner_solve(p.as_ref(), &[0.0], &[0.0], &ds.view(&idx), 1, 0.1).unwrap();
        assert_abs_diff_eq!(traj.thetas[1][0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn inner_solve_replays() {
        let (ds, _) = gen_linear(20, 3, 1, 0.3, 2).unwrap();
        let idx = seq(0, 20);
        let view = ds.view(&idx);
        let p = ridge_d(3);
        let traj = inner_solve(p.as_ref(), &[-0.3], &[0.1, 0.2, 0.3], &view, 7, 0.05).unwrap();
        for k in 0..7 {
            let mut next = traj.thetas[k].clone();
            axpy(-0.05, &p.inner_grad_theta(&[-0.3], &traj.thetas[k], &view), &mut next);
            assert_eq!(next, traj.thetas[k + 1]);
        }
    }

    #[test]
    fn inner_solve_rejects_bad_input() {
        let ds = toy();
        let idx = seq(0, 2);
        let p = ridge();
        assert!(inner_solve(p.as_ref(), &[0.0], &[0.0], &ds.view(&idx), 1, 0.0).is_err());
        assert!(matches!(
            inner_solve(p.as_ref(), &[0.0, 1.0], &[0.0], &ds.view(&idx), 1, 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
        let err = inner_solve(p.as_ref(), &[0.0], &[0.0], &ds.view(&idx), 2000, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn inner_solve_reaches_closed_form() {
        let (ds, _) = gen_linear(40, 4, 3, 0.5, 4).unwrap();
        let tr = seq(0, 30);
        let va = seq(30, 40);
        let p = ridge_d(4);
        let (theta_hat, _) = oracle(&ds.view(&tr), &ds.view(&va), 1.0);
        let traj = inner_solve(p.as_ref(), &[0.0], &[0.0; 4], &ds.view(&tr), 500, 0.1).unwrap();
        assert!(norm(&sub(traj.last(), &theta_hat)) <= 1e-6);
    }

    #[test]
    fn itd_zero_steps_is_direct_gradient() {
        let (ds, _) = gen_linear(20, 2, 1, 0.3, 2).unwrap();
        let idx = seq(0, 20);
        let view = ds.view(&idx);
        let p = Blend {
            base: ridge_d(2),
            a: 1.0,
            b: 0.5,
            target: vec![1.0, -1.0],
        };
        let traj = inner_solve(&p, &[0.4], &[0.0, 0.0], &view, 0, 0.1).unwrap();
        let res = itd_hypergrad(&p, &[0.4], &traj, &view, &view).unwrap();
        assert_eq!(res.grad, vec![0.4]);
    }

    #[test]
    fn itd_matches_finite_differences_across_zoo() {
        let (reg, _) = gen_linear(24, 3, 1, 0.3, 2).unwrap();
        let bin = {
            let ds = gen_classes(24, 3, 2, 1.0, 3, 4).unwrap();
            let y = ds.labels().iter().map(|v| if *v > 0.5 { 1.0 } else { -1.0 }).collect();
            Dataset::new(ds.features().clone(), y, Task::Binary).unwrap()
        };
        let multi = gen_classes(24, 3, 3, 1.0, 5, 6).unwrap();
        let tr = seq(0, 16);
        let va = seq(16, 24);
        for kind in ModelKind::ALL {
            let ds = match kind {
                ModelKind::LogisticL2 | ModelKind::SvmSqhinge => &bin,
                ModelKind::SoftmaxL2 | ModelKind::HypercleanSoftmax => &multi,
                _ => &reg,
            };
            let spec = ModelSpec::new(kind).with_delta(1e-2).with_classes(3);
            let p = build_problem(&spec, 3, ds.len()).unwrap();
            let hyper: Vec<f64> = (0..p.hyper_dim()).map(|i| -1.0 + 0.1 * (i % 7) as f64).collect();
            let theta0: Vec<f64> = (0..p.param_dim()).map(|i| 0.2 * ((i as f64) + 1.0).sin()).collect();
            for k in [1, 5, 20] {
                let traj = inner_solve(p.as_ref(), &hyper, &theta0, &ds.view(&tr), k, 0.1).unwrap();
                let itd = itd_hypergrad(p.as_ref(), &hyper, &traj, &ds.view(&tr), &ds.view(&va)).unwrap();
                let fd =
                    finite_diff_hypergrad(p.as_ref(), &hyper, &theta0, &ds.view(&tr), &ds.view(&va), k, 0.1, 1e-5)
                        .unwrap();
                let err = rel_err(&itd.grad, &fd);
                assert!(err < 1e-5, "{kind} K={k}: {err:e}");
            }
        }
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let (ds, _) = gen_linear(20, 2, 1, 0.3, 2).unwrap();
        let tr = seq(0, 14);
        let va = seq(14, 20);
        let p = ridge_d(2);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let traj = inner_solve(p.as_ref(), &[0.5], &[0.0; 2], &train, 10, 0.1).unwrap();
        let itd = itd_hypergrad(p.as_ref(), &[0.5], &traj, &train, &val).unwrap().grad[0];
        let err = |eps| {
            (finite_diff_hypergrad(p.as_ref(), &[0.5], &[0.0; 2], &train, &val, 10, 0.1, eps).unwrap()[0] - itd).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn itd_converges_to_exact_hypergradient() {
        let (ds, _) = gen_linear(40, 3, 7, 0.5, 8).unwrap();
        let tr = seq(0, 30);
        let va = seq(30, 40);
        let p = ridge_d(3);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let u: f64 = 0.0;
        let (_, g_eff) = oracle(&train, &val, u.exp());
        let exact = g_eff * u.exp();
        let traj = inner_solve(p.as_ref(), &[u], &[0.0; 3], &train, 500, 0.1).unwrap();
        let itd = itd_hypergrad(p.as_ref(), &[u], &traj, &train, &val).unwrap();
        assert!((itd.grad[0] - exact).abs() / exact.abs().max(1.0) < 1e-4);

        let mut prev = f64::INFINITY;
        for k in [5, 10, 20, 50, 100, 200] {
            let traj = inner_solve(p.as_ref(), &[u], &[0.0; 3], &train, k, 0.1).unwrap();
            let err = (itd_hypergrad(p.as_ref(), &[u], &traj, &train, &val).unwrap().grad[0] - exact).abs();
            assert!(err <= prev, "K={k}: {err} > {prev}");
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn itd_is_linear_in_outer_loss() {
        let (ds, _) = gen_linear(20, 3, 1, 0.3, 2).unwrap();
        let tr = seq(0, 14);
        let va = seq(14, 20);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let t = vec![0.5, -0.5, 1.0];
        let make = |a, b| Blend {
            base: ridge_d(3),
            a,
            b,
            target: t.clone(),
        };
        let grad = |p: &Blend| {
            let traj = inner_solve(p, &[0.2], &[0.0; 3], &train, 15, 0.1).unwrap();
            itd_hypergrad(p, &[0.2], &traj, &train, &val).unwrap().grad[0]
        };
        let (a, b) = (1.7, -0.6);
        let combined = grad(&make(a, b));
        let split = a * grad(&make(1.0, 0.0)) + b * grad(&make(0.0, 1.0));
        assert!((combined - split).abs() < 1e-8);
    }

    #[test]
    fn trhg_window_semantics() {
        let (ds, _) = gen_linear(30, 3, 1, 0.3, 2).unwrap();
        let tr = seq(0, 20);
        let va = seq(20, 30);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let p = ridge_d(3);
        let hyper = [-1.0];
        let k = 20;
        let traj = inner_solve(p.as_ref(), &hyper, &[0.0; 3], &train, k, 0.1).unwrap();
        let itd = itd_hypergrad(p.as_ref(), &hyper, &traj, &train, &val).unwrap();
        let full = trhg_hypergrad(p.as_ref(), &hyper, &traj, &train, &val, k).unwrap();
        assert_eq!(itd.grad, full.grad);

        let one = trhg_hypergrad(p.as_ref(), &hyper, &traj, &train, &val, 1).unwrap();
        let f_theta = p.outer_grad_theta(&hyper, traj.last(), &val);
        let mut hand = p.outer_grad_lambda(&hyper, traj.last(), &val);
        axpy(-0.1, &p.inner_mixed_vp(&hyper, &traj.thetas[k - 1], &train, &f_theta), &mut hand);
        assert_abs_diff_eq!(one.grad[0], hand[0], epsilon = 1e-14);

        let direct = p.outer_grad_lambda(&hyper, traj.last(), &val);
        let mut prev = (direct[0] - itd.grad[0]).abs();
        for h in 1..=k {
            let g = trhg_hypergrad(p.as_ref(), &hyper, &traj, &train, &val, h).unwrap();
            let gap = (g.grad[0] - itd.grad[0]).abs();
            assert!(gap <= prev + 1e-15, "h={h}");
            prev = gap;
        }
        assert!(trhg_hypergrad(p.as_ref(), &hyper, &traj, &train, &val, 0).is_err());
        assert!(trhg_hypergrad(p.as_ref(), &hyper, &traj, &train, &val, k + 1).is_err());
    }

    #[test]
    fn aid_zero_rhs_returns_direct_gradient() {
        let ds = toy();
        let idx = seq(0, 2);
        let view = ds.view(&idx);
        let p = Blend {
            base: ridge(),
            a: 0.0,
            b: 1.0,
            target: vec![0.3],
        };
        let res = aid_hypergrad(&p, &[0.7], &[0.3], &view, &view, AidSolver::ConjugateGradient, 3, 1e-12).unwrap();
        assert_abs_diff_eq!(res.grad[0], 1.4, epsilon = 1e-15);
    }

    #[test]
    fn aid_cg_matches_dense_implicit_gradient() {
        let (ds, _) = gen_linear(30, 5, 1, 0.3, 2).unwrap();
        let tr = seq(0, 20);
        let va = seq(20, 30);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let p = ridge_d(5);
        let hyper = [-0.5];
        let theta = [0.1, 0.2, -0.1, 0.4, 0.0];
        let mut hess = Mat::zeros(5, 5);
        for j in 0..5 {
            let mut e = vec![0.0; 5];
            e[j] = 1.0;
            let col = p.inner_hvp(&hyper, &theta, &train, &e);
            for i in 0..5 {
                hess.set(i, j, col[i]);
            }
        }
        let rhs = p.outer_grad_theta(&hyper, &theta, &val);
        let v = dense_solve(&hess, &rhs).unwrap();
        let expected = -p.inner_mixed_vp(&hyper, &theta, &train, &v)[0];
        let res = aid_hypergrad(p.as_ref(), &hyper, &theta, &train, &val, AidSolver::ConjugateGradient, 5, 1e-14)
            .unwrap();
        assert!((res.grad[0] - expected).abs() < 1e-8);
        assert!(res.diagnostics.residual.unwrap() < 1e-8);
    }

    #[test]
    fn aid_at_optimum_matches_oracle_and_solvers_agree() {
        let (ds, _) = gen_linear(40, 4, 5, 0.5, 6).unwrap();
        let tr = seq(0, 30);
        let va = seq(30, 40);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let p = ridge_d(4);
        let u: f64 = -0.3;
        let (theta_hat, g_eff) = oracle(&train, &val, u.exp());
        let exact = g_eff * u.exp();
        let cg = aid_hypergrad(p.as_ref(), &[u], &theta_hat, &train, &val, AidSolver::ConjugateGradient, 50, 1e-14)
            .unwrap();
        assert!((cg.grad[0] - exact).abs() < 1e-6);
        let fp = aid_hypergrad(
            p.as_ref(),
            &[u],
            &theta_hat,
            &train,
            &val,
            AidSolver::FixedPoint { step: 0.1 },
            5000,
            1e-12,
        )
        .unwrap();
        assert!((fp.grad[0] - cg.grad[0]).abs() < 1e-8);
    }

    #[test]
    fn aid_refused_for_squared_hinge() {
        let p = build_problem(&ModelSpec::new(ModelKind::SvmSqhinge), 2, 0).unwrap();
        let m = HypergradMethod::aid_cg(5, 5, 0.1);
        assert!(matches!(m.validate(p.as_ref()), Err(Error::Config(_))));
    }

    #[test]
    fn method_estimate_dispatch() {
        let (ds, _) = gen_linear(30, 3, 1, 0.3, 2).unwrap();
        let tr = seq(0, 20);
        let va = seq(20, 30);
        let (train, val) = (ds.view(&tr), ds.view(&va));
        let p = ridge_d(3);
        let h = [0.0];
        let t0 = [0.0; 3];
        let itd = HypergradMethod::itd(10, 0.1).estimate(p.as_ref(), &h, &t0, &train, &val).unwrap();
        let trhg = HypergradMethod::trhg(10, 10, 0.1).estimate(p.as_ref(), &h, &t0, &train, &val).unwrap();
        assert_eq!(itd.grad, trhg.grad);
        let cg = HypergradMethod::aid_cg(300, 20, 0.1).estimate(p.as_ref(), &h, &t0, &train, &val).unwrap();
        let fp = HypergradMethod::aid_fp(300, 2000, 0.1).estimate(p.as_ref(), &h, &t0, &train, &val).unwrap();
        assert!((cg.grad[0] - fp.grad[0]).abs() < 1e-7);
        assert!(HypergradMethod::trhg(3, 4, 0.1).validate(p.as_ref()).is_err());
        assert!(HypergradMethod::aid_cg(3, 0, 0.1).validate(p.as_ref()).is_err());
    }

    #[test]
    fn contraction_examples() {
        assert_abs_diff_eq!(contraction_params(3.0, 1.0, 0.5).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(contraction_params(2.0, 2.0, 0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(contraction_params(2.0, 1.0, 0.4).unwrap(), 0.6, epsilon = 1e-15);
        assert!(matches!(contraction_params(2.0, 1.0, 1.1), Err(Error::NonContractive { .. })));
        assert!(contraction_params(1.0, 2.0, 0.1).is_err());
    }

    #[test]
    fn hessian_extremes_on_diagonal_problem() {
        let ds = Dataset::new(
            Mat::from_rows(&[vec![2f64.sqrt(), 0.0], vec![0.0, 2f64.sqrt()], vec![0.0, 0.0]]).unwrap(),
            vec![0.0, 0.0, 0.0],
            Task::Regression,
        )
        .unwrap();
        let ds2 = Dataset::new(
            Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
            vec![0.0; 3],
            Task::Regression,
        )
        .unwrap();
        let idx = seq(0, 3);
        let p = ridge_d(2);
        let (l, mu) = hessian_extremes(p.as_ref(), &[0.0], &[0.0; 2], &ds2.view(&idx), 200, 1);
        assert!((l - (6.0 + 2.0)).abs() < 1e-8, "{l}");
        assert!((mu - (2.0 / 3.0 + 2.0)).abs() < 1e-8, "{mu}");
        let (l, mu) = hessian_extremes(p.as_ref(), &[0.0], &[0.0; 2], &ds.view(&idx), 50, 1);
        assert!((l - mu).abs() < 1e-8);
    }
}
