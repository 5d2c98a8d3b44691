//! The bilevel-problem contract and the model zoo.
//!
//! Every model exposes the inner (training) objective with first and second
//! order directional derivatives, and the outer (validation) objective with
//! first-order derivatives. Hyperparameters are stored in raw, unconstrained
//! coordinates; positivity and box constraints are handled by
//! reparameterization (`exp` for regularization strengths, logistic sigmoid
//! for sample weights).

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataView, Task};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, rel_err};
use crate::rng::rng_from_seed;

/// Inner and outer objectives of a bilevel hyperparameter problem.
///
/// All callbacks must be pure. `hyper` is in raw coordinates of length
/// [`hyper_dim`](Self::hyper_dim); `theta` and `v` have length
/// [`param_dim`](Self::param_dim).
pub trait BilevelProblem: Send + Sync {
    fn name(&self) -> &str;
    fn hyper_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    fn inner_loss(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> f64;
    fn inner_grad_theta(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64>;
    /// `∇²_θ R̂^tr · v`
    fn inner_hvp(&self, hyper: &[f64], theta: &[f64], data: &DataView, v: &[f64]) -> Vec<f64>;
    /// `∇²_{λθ} R̂^tr · v`, a vector over hyperparameters.
    fn inner_mixed_vp(&self, hyper: &[f64], theta: &[f64], data: &DataView, v: &[f64]) -> Vec<f64>;

    fn outer_loss(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> f64;
    fn outer_grad_theta(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64>;
    fn outer_grad_lambda(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64>;

    /// Per-coordinate interval used to project raw hyperparameters.
    fn hyper_domain(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY); self.hyper_dim()]
    }

    /// Raw coordinates mapped to the values the model actually uses.
    fn effective_hyper(&self, raw: &[f64]) -> Vec<f64> {
        raw.to_vec()
    }

    /// Whether implicit differentiation is offered (needs an SPD inner Hessian).
    fn supports_aid(&self) -> bool {
        true
    }

    fn project(&self, hyper: &mut [f64]) {
        for (h, (lo, hi)) in hyper.iter_mut().zip(self.hyper_domain()) {
            *h = h.clamp(lo, hi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ridge,
    LassoSmooth,
    ElasticNet,
    LogisticL2,
    SvmSqhinge,
    SoftmaxL2,
    RidgePerParam,
    HypercleanSoftmax,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Ridge,
        ModelKind::LassoSmooth,
        ModelKind::ElasticNet,
        ModelKind::LogisticL2,
        ModelKind::SvmSqhinge,
        ModelKind::SoftmaxL2,
        ModelKind::RidgePerParam,
        ModelKind::HypercleanSoftmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ridge => "ridge",
            ModelKind::LassoSmooth => "lasso_smooth",
            ModelKind::ElasticNet => "elastic_net",
            ModelKind::LogisticL2 => "logistic_l2",
            ModelKind::SvmSqhinge => "svm_sqhinge",
            ModelKind::SoftmaxL2 => "softmax_l2",
            ModelKind::RidgePerParam => "ridge_per_param",
            ModelKind::HypercleanSoftmax => "hyperclean_softmax",
        }
    }

    /// Whether the model can be fit on data labelled for `task`.
    pub fn accepts(self, task: Task) -> bool {
        match self {
            ModelKind::Ridge | ModelKind::LassoSmooth | ModelKind::ElasticNet | ModelKind::RidgePerParam => {
                task == Task::Regression
            }
            ModelKind::LogisticL2 | ModelKind::SvmSqhinge => task == Task::Binary,
            ModelKind::SoftmaxL2 | ModelKind::HypercleanSoftmax => matches!(task, Task::Multiclass(_)),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Pseudo-Huber smoothing of the L1 term.
    pub smoothing_delta: f64,
    pub num_classes: usize,
    /// Fixed L2 strength added to the hyper-cleaning inner loss.
    pub hyperclean_l2: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            smoothing_delta: 1e-6,
            num_classes: 2,
            hyperclean_l2: 0.0,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.smoothing_delta = delta;
        self
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }
}

/// Instantiates a zoo model for `feature_dim` input features.
///
/// `num_samples` is the size of the dataset whose rows the hyper-cleaning
/// weights index; other models ignore it.
pub fn build_problem(spec: &ModelSpec, feature_dim: usize, num_samples: usize) -> Result<Box<dyn BilevelProblem>> {
    if feature_dim == 0 {
        return Err(Error::Config("feature_dim must be at least 1".into()));
    }
    let smooth = || -> Result<f64> {
        if spec.smoothing_delta > 0.0 && spec.smoothing_delta.is_finite() {
            Ok(spec.smoothing_delta)
        } else {
            Err(Error::Config(format!(
                "smoothing_delta must be positive for {}, got {}",
                spec.kind, spec.smoothing_delta
            )))
        }
    };
    let classes = || -> Result<usize> {
        if spec.num_classes >= 2 {
            Ok(spec.num_classes)
        } else {
            Err(Error::Config(format!("{} needs num_classes >= 2", spec.kind)))
        }
    };
    let reg = |loss, reg| -> Box<dyn BilevelProblem> {
        Box::new(RegularizedModel::new(spec.kind, loss, reg, feature_dim))
    };
    Ok(match spec.kind {
        ModelKind::Ridge => reg(DataLoss::Squared, Regularizer::L2),
        ModelKind::LassoSmooth => reg(DataLoss::Squared, Regularizer::SmoothL1 { delta: smooth()? }),
        ModelKind::ElasticNet => reg(DataLoss::Squared, Regularizer::ElasticNet { delta: smooth()? }),
        ModelKind::LogisticL2 => reg(DataLoss::Logistic, Regularizer::L2),
        ModelKind::SvmSqhinge => reg(DataLoss::SquaredHinge, Regularizer::L2),
        ModelKind::SoftmaxL2 => reg(DataLoss::Softmax { classes: classes()? }, Regularizer::L2),
        ModelKind::RidgePerParam => reg(DataLoss::Squared, Regularizer::PerParamL2),
        ModelKind::HypercleanSoftmax => {
            if num_samples == 0 {
                return Err(Error::Config("hyperclean_softmax needs num_samples >= 1".into()));
            }
            if !(spec.hyperclean_l2 >= 0.0) {
                return Err(Error::Config("hyperclean_l2 must be non-negative".into()));
            }
            Box::new(HypercleanModel {
                classes: classes()?,
                feature_dim,
                num_samples,
                l2: spec.hyperclean_l2,
            })
        }
    })
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Per-sample data loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataLoss {
    /// `(⟨x,θ⟩ − y)²`
    Squared,
    /// `ln(1 + exp(−y⟨x,θ⟩))`, `y ∈ {−1, +1}`
    Logistic,
    /// `max(0, 1 − y⟨x,θ⟩)²`
    SquaredHinge,
    /// Multiclass cross-entropy; `θ` is a row-major `classes × d` matrix.
    Softmax { classes: usize },
}

impl DataLoss {
    pub fn param_dim(&self, d: usize) -> usize {
        match self {
            DataLoss::Softmax { classes } => classes * d,
            _ => d,
        }
    }

    fn softmax(classes: usize, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let d = x.len();
        let z: Vec<f64> = (0..classes).map(|c| dot(&theta[c * d..(c + 1) * d], x)).collect();
        let zmax = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn value(&self, x: &[f64], y: f64, theta: &[f64]) -> f64 {
        match *self {
            DataLoss::Squared => (dot(x, theta) - y).powi(2),
            DataLoss::Logistic => softplus(-y * dot(x, theta)),
            DataLoss::SquaredHinge => (1.0 - y * dot(x, theta)).max(0.0).powi(2),
            DataLoss::Softmax { classes } => {
                let d = x.len();
                let z: Vec<f64> = (0..classes).map(|c| dot(&theta[c * d..(c + 1) * d], x)).collect();
                let zmax = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
                lse - z[y as usize]
            }
        }
    }

    /// Derivative of the loss with respect to the score `⟨x,θ⟩` (scalar losses).
    fn score_grad(&self, x: &[f64], y: f64, theta: &[f64]) -> f64 {
        let z = dot(x, theta);
        match *self {
            DataLoss::Squared => 2.0 * (z - y),
            DataLoss::Logistic => -y * sigmoid(-y * z),
            DataLoss::SquaredHinge => -2.0 * y * (1.0 - y * z).max(0.0),
            DataLoss::Softmax { .. } => unreachable!("softmax has a vector score"),
        }
    }

    /// Second derivative with respect to the score (scalar losses).
    fn score_curv(&self, x: &[f64], y: f64, theta: &[f64]) -> f64 {
        let z = dot(x, theta);
        match *self {
            DataLoss::Squared => 2.0,
            DataLoss::Logistic => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            DataLoss::SquaredHinge => {
                if 1.0 - y * z > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
            DataLoss::Softmax { .. } => unreachable!("softmax has a vector score"),
        }
    }

    /// `out += w · ∇_θ ℓ`
    pub fn add_grad(&self, x: &[f64], y: f64, theta: &[f64], w: f64, out: &mut [f64]) {
        match *self {
            DataLoss::Softmax { classes } => {
                let d = x.len();
                let p = Self::softmax(classes, x, theta);
                for (c, pc) in p.iter().enumerate() {
                    let coef = pc - if c == y as usize { 1.0 } else { 0.0 };
                    axpy(w * coef, x, &mut out[c * d..(c + 1) * d]);
                }
            }
            _ => axpy(w * self.score_grad(x, y, theta), x, out),
        }
    }

    /// `⟨∇_θ ℓ, v⟩`
    pub fn grad_dot(&self, x: &[f64], y: f64, theta: &[f64], v: &[f64]) -> f64 {
        match *self {
            DataLoss::Softmax { classes } => {
                let d = x.len();
                let p = Self::softmax(classes, x, theta);
                p.iter()
                    .enumerate()
                    .map(|(c, pc)| {
                        let coef = pc - if c == y as usize { 1.0 } else { 0.0 };
                        coef * dot(&v[c * d..(c + 1) * d], x)
                    })
                    .sum()
            }
            _ => self.score_grad(x, y, theta) * dot(x, v),
        }
    }

    /// `out += w · ∇²_θ ℓ · v`
    pub fn add_hvp(&self, x: &[f64], y: f64, theta: &[f64], v: &[f64], w: f64, out: &mut [f64]) {
        match *self {
            DataLoss::Softmax { classes } => {
                let d = x.len();
                let p = Self::softmax(classes, x, theta);
                let s: Vec<f64> = (0..classes).map(|c| dot(&v[c * d..(c + 1) * d], x)).collect();
                let t = dot(&p, &s);
                for c in 0..classes {
                    axpy(w * p[c] * (s[c] - t), x, &mut out[c * d..(c + 1) * d]);
                }
            }
            _ => {
                let curv = self.score_curv(x, y, theta);
                if curv != 0.0 {
                    axpy(w * curv * dot(x, v), x, out);
                }
            }
        }
    }
}

fn mean_loss(loss: DataLoss, theta: &[f64], data: &DataView) -> f64 {
    let m = data.len() as f64;
    data.samples().map(|(_, x, y)| loss.value(x, y, theta)).sum::<f64>() / m
}

fn mean_grad(loss: DataLoss, theta: &[f64], data: &DataView) -> Vec<f64> {
    let w = 1.0 / data.len() as f64;
    let mut g = vec![0.0; theta.len()];
    for (_, x, y) in data.samples() {
        loss.add_grad(x, y, theta, w, &mut g);
    }
    g
}

fn mean_hvp(loss: DataLoss, theta: &[f64], data: &DataView, v: &[f64]) -> Vec<f64> {
    let w = 1.0 / data.len() as f64;
    let mut h = vec![0.0; theta.len()];
    for (_, x, y) in data.samples() {
        loss.add_hvp(x, y, theta, v, w, &mut h);
    }
    h
}

/// Regularizer scaled by exponentiated raw hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    /// `e^u ‖θ‖²`
    L2,
    /// `e^u Σ_j (√(θ_j² + δ²) − δ)`
    SmoothL1 { delta: f64 },
    /// `e^{u₁} · SmoothL1 + e^{u₂} ‖θ‖²`
    ElasticNet { delta: f64 },
    /// `Σ_j e^{u_j} θ_j²`
    PerParamL2,
}

impl Regularizer {
    pub fn hyper_dim(&self, r: usize) -> usize {
        match self {
            Regularizer::L2 | Regularizer::SmoothL1 { .. } => 1,
            Regularizer::ElasticNet { .. } => 2,
            Regularizer::PerParamL2 => r,
        }
    }

    fn smooth_l1(delta: f64, theta: &[f64]) -> f64 {
        theta.iter().map(|t| (t * t + delta * delta).sqrt() - delta).sum()
    }

    fn value(&self, hyper: &[f64], theta: &[f64]) -> f64 {
        match *self {
            Regularizer::L2 => hyper[0].exp() * dot(theta, theta),
            Regularizer::SmoothL1 { delta } => hyper[0].exp() * Self::smooth_l1(delta, theta),
            Regularizer::ElasticNet { delta } => {
                hyper[0].exp() * Self::smooth_l1(delta, theta) + hyper[1].exp() * dot(theta, theta)
            }
            Regularizer::PerParamL2 => hyper.iter().zip(theta).map(|(u, t)| u.exp() * t * t).sum(),
        }
    }

    fn add_grad(&self, hyper: &[f64], theta: &[f64], out: &mut [f64]) {
        let l1 = |scale: f64, delta: f64, out: &mut [f64]| {
            for (o, t) in out.iter_mut().zip(theta) {
                *o += scale * t / (t * t + delta * delta).sqrt();
            }
        };
        match *self {
            Regularizer::L2 => axpy(2.0 * hyper[0].exp(), theta, out),
            Regularizer::SmoothL1 { delta } => l1(hyper[0].exp(), delta, out),
            Regularizer::ElasticNet { delta } => {
                l1(hyper[0].exp(), delta, out);
                axpy(2.0 * hyper[1].exp(), theta, out);
            }
            Regularizer::PerParamL2 => {
                for ((o, t), u) in out.iter_mut().zip(theta).zip(hyper) {
                    *o += 2.0 * u.exp() * t;
                }
            }
        }
    }

    fn add_hvp(&self, hyper: &[f64], theta: &[f64], v: &[f64], out: &mut [f64]) {
        let l1 = |scale: f64, delta: f64, out: &mut [f64]| {
            let d2 = delta * delta;
            for ((o, t), vi) in out.iter_mut().zip(theta).zip(v) {
                *o += scale * d2 / (t * t + d2).powf(1.5) * vi;
            }
        };
        match *self {
            Regularizer::L2 => axpy(2.0 * hyper[0].exp(), v, out),
            Regularizer::SmoothL1 { delta } => l1(hyper[0].exp(), delta, out),
            Regularizer::ElasticNet { delta } => {
                l1(hyper[0].exp(), delta, out);
                axpy(2.0 * hyper[1].exp(), v, out);
            }
            Regularizer::PerParamL2 => {
                for ((o, vi), u) in out.iter_mut().zip(v).zip(hyper) {
                    *o += 2.0 * u.exp() * vi;
                }
            }
        }
    }

    fn mixed_vp(&self, hyper: &[f64], theta: &[f64], v: &[f64]) -> Vec<f64> {
        let l1 = |delta: f64| -> f64 {
            theta
                .iter()
                .zip(v)
                .map(|(t, vi)| t / (t * t + delta * delta).sqrt() * vi)
                .sum()
        };
        match *self {
            Regularizer::L2 => vec![2.0 * hyper[0].exp() * dot(theta, v)],
            Regularizer::SmoothL1 { delta } => vec![hyper[0].exp() * l1(delta)],
            Regularizer::ElasticNet { delta } => {
                vec![hyper[0].exp() * l1(delta), 2.0 * hyper[1].exp() * dot(theta, v)]
            }
            Regularizer::PerParamL2 => hyper
                .iter()
                .zip(theta)
                .zip(v)
                .map(|((u, t), vi)| 2.0 * u.exp() * t * vi)
                .collect(),
        }
    }
}

/// Mean data loss plus a hyperparameter-weighted regularizer; the outer
/// objective is the plain mean data loss on validation data.
#[derive(Debug, Clone)]
pub struct RegularizedModel {
    kind: ModelKind,
    loss: DataLoss,
    reg: Regularizer,
    param_dim: usize,
}

impl RegularizedModel {
    pub fn new(kind: ModelKind, loss: DataLoss, reg: Regularizer, feature_dim: usize) -> Self {
        RegularizedModel {
            kind,
            loss,
            reg,
            param_dim: loss.param_dim(feature_dim),
        }
    }

    pub fn loss(&self) -> DataLoss {
        self.loss
    }
}

impl BilevelProblem for RegularizedModel {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn hyper_dim(&self) -> usize {
        self.reg.hyper_dim(self.param_dim)
    }

    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn inner_loss(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> f64 {
        mean_loss(self.loss, theta, data) + self.reg.value(hyper, theta)
    }

    fn inner_grad_theta(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64> {
        let mut g = mean_grad(self.loss, theta, data);
        self.reg.add_grad(hyper, theta, &mut g);
        g
    }

    fn inner_hvp(&self, hyper: &[f64], theta: &[f64], data: &DataView, v: &[f64]) -> Vec<f64> {
        let mut h = mean_hvp(self.loss, theta, data, v);
        self.reg.add_hvp(hyper, theta, v, &mut h);
        h
    }

    fn inner_mixed_vp(&self, hyper: &[f64], theta: &[f64], _data: &DataView, v: &[f64]) -> Vec<f64> {
        self.reg.mixed_vp(hyper, theta, v)
    }

    fn outer_loss(&self, _hyper: &[f64], theta: &[f64], data: &DataView) -> f64 {
        mean_loss(self.loss, theta, data)
    }

    fn outer_grad_theta(&self, _hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64> {
        mean_grad(self.loss, theta, data)
    }

    fn outer_grad_lambda(&self, hyper: &[f64], _theta: &[f64], _data: &DataView) -> Vec<f64> {
        vec![0.0; hyper.len()]
    }

    fn effective_hyper(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|u| u.exp()).collect()
    }

    fn supports_aid(&self) -> bool {
        // squared hinge has a discontinuous Hessian; the implicit system is
        // not offered for it
        self.kind != ModelKind::SvmSqhinge
    }
}

/// Softmax regression with one sigmoid-squashed weight per dataset row.
///
/// Inner: `(1/m) Σ_{i ∈ train} σ(u_i) ℓ_CE(θ; x_i, y_i) + l2 ‖θ‖²`.
/// Outer: unweighted mean cross-entropy on validation data.
#[derive(Debug, Clone)]
pub struct HypercleanModel {
    classes: usize,
    feature_dim: usize,
    num_samples: usize,
    l2: f64,
}

impl HypercleanModel {
    fn loss(&self) -> DataLoss {
        DataLoss::Softmax { classes: self.classes }
    }
}

impl BilevelProblem for HypercleanModel {
    fn name(&self) -> &str {
        ModelKind::HypercleanSoftmax.as_str()
    }

    fn hyper_dim(&self) -> usize {
        self.num_samples
    }

    fn param_dim(&self) -> usize {
        self.classes * self.feature_dim
    }

    fn inner_loss(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> f64 {
        let m = data.len() as f64;
        let loss = self.loss();
        let weighted: f64 = data
            .samples()
            .map(|(i, x, y)| sigmoid(hyper[i]) * loss.value(x, y, theta))
            .sum();
        weighted / m + self.l2 * dot(theta, theta)
    }

    fn inner_grad_theta(&self, hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64> {
        let m = data.len() as f64;
        let loss = self.loss();
        let mut g = vec![0.0; theta.len()];
        for (i, x, y) in data.samples() {
            loss.add_grad(x, y, theta, sigmoid(hyper[i]) / m, &mut g);
        }
        axpy(2.0 * self.l2, theta, &mut g);
        g
    }

    fn inner_hvp(&self, hyper: &[f64], theta: &[f64], data: &DataView, v: &[f64]) -> Vec<f64> {
        let m = data.len() as f64;
        let loss = self.loss();
        let mut h = vec![0.0; theta.len()];
        for (i, x, y) in data.samples() {
            loss.add_hvp(x, y, theta, v, sigmoid(hyper[i]) / m, &mut h);
        }
        axpy(2.0 * self.l2, v, &mut h);
        h
    }

    fn inner_mixed_vp(&self, hyper: &[f64], theta: &[f64], data: &DataView, v: &[f64]) -> Vec<f64> {
        let m = data.len() as f64;
        let loss = self.loss();
        let mut out = vec![0.0; self.num_samples];
        for (i, x, y) in data.samples() {
            let s = sigmoid(hyper[i]);
            out[i] += s * (1.0 - s) / m * loss.grad_dot(x, y, theta, v);
        }
        out
    }

    fn outer_loss(&self, _hyper: &[f64], theta: &[f64], data: &DataView) -> f64 {
        mean_loss(self.loss(), theta, data)
    }

    fn outer_grad_theta(&self, _hyper: &[f64], theta: &[f64], data: &DataView) -> Vec<f64> {
        mean_grad(self.loss(), theta, data)
    }

    fn outer_grad_lambda(&self, hyper: &[f64], _theta: &[f64], _data: &DataView) -> Vec<f64> {
        vec![0.0; hyper.len()]
    }

    fn effective_hyper(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|u| sigmoid(*u)).collect()
    }

    fn supports_aid(&self) -> bool {
        self.l2 > 0.0
    }
}

/// Predicted class (multiclass) or sign (binary) of a linear model.
pub fn predict(loss: DataLoss, theta: &[f64], x: &[f64]) -> f64 {
    match loss {
        DataLoss::Softmax { classes } => {
            let d = x.len();
            let mut best = 0;
            let mut best_z = f64::NEG_INFINITY;
            for c in 0..classes {
                let z = dot(&theta[c * d..(c + 1) * d], x);
                if z > best_z {
                    best_z = z;
                    best = c;
                }
            }
            best as f64
        }
        DataLoss::Logistic | DataLoss::SquaredHinge => {
            if dot(x, theta) >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        DataLoss::Squared => dot(x, theta),
    }
}

/// Fraction of samples in `data` whose predicted label matches.
pub fn accuracy(loss: DataLoss, theta: &[f64], data: &DataView) -> f64 {
    let hits = data
        .samples()
        .filter(|(_, x, y)| predict(loss, theta, x) == *y)
        .count();
    hits as f64 / data.len() as f64
}

/// Worst relative error of one analytic derivative against finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub problem: String,
    pub trials: usize,
    pub checks: Vec<DerivativeCheck>,
    pub threshold: f64,
    pub passed: bool,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_rel_err))
    }
}

pub const DERIVATIVE_TOLERANCE: f64 = 1e-4;

fn fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + norm(x))
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = fd_step(x);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares every analytic derivative of `problem` with central finite
/// differences on `trials` random `(λ, θ, v)` probes.
pub fn verify_derivatives(
    problem: &dyn BilevelProblem,
    train: &DataView,
    val: &DataView,
    trials: usize,
    seed: u64,
) -> DerivativeReport {
    let p = problem.hyper_dim();
    let r = problem.param_dim();
    let mut rng = rng_from_seed(seed);
    let hyper_dist = Normal::new(-0.5, 0.5).expect("valid normal");
    let names = [
        "inner_grad_theta",
        "inner_hvp",
        "inner_mixed_vp",
        "outer_grad_theta",
        "outer_grad_lambda",
    ];
    let mut worst = [0.0_f64; 5];

    for _ in 0..trials.max(1) {
        let hyper: Vec<f64> = (0..p).map(|_| hyper_dist.sample(&mut rng)).collect();
        let theta: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();

        let g = problem.inner_grad_theta(&hyper, &theta, train);
        let g_fd = fd_gradient(|t| problem.inner_loss(&hyper, t, train), &theta);
        worst[0] = worst[0].max(rel_err(&g, &g_fd));

        let hv = problem.inner_hvp(&hyper, &theta, train, &v);
        let h = fd_step(&theta) / norm(&v).max(1e-12);
        let mut up = theta.clone();
        axpy(h, &v, &mut up);
        let mut down = theta.clone();
        axpy(-h, &v, &mut down);
        let hv_fd: Vec<f64> = problem
            .inner_grad_theta(&hyper, &up, train)
            .iter()
            .zip(problem.inner_grad_theta(&hyper, &down, train))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        worst[1] = worst[1].max(rel_err(&hv, &hv_fd));

        let mv = problem.inner_mixed_vp(&hyper, &theta, train, &v);
        let mv_fd = fd_gradient(|u| dot(&problem.inner_grad_theta(u, &theta, train), &v), &hyper);
        worst[2] = worst[2].max(rel_err(&mv, &mv_fd));

        let og = problem.outer_grad_theta(&hyper, &theta, val);
        let og_fd = fd_gradient(|t| problem.outer_loss(&hyper, t, val), &theta);
        worst[3] = worst[3].max(rel_err(&og, &og_fd));

        let ol = problem.outer_grad_lambda(&hyper, &theta, val);
        let ol_fd = fd_gradient(|u| problem.outer_loss(u, &theta, val), &hyper);
        worst[4] = worst[4].max(rel_err(&ol, &ol_fd));
    }

    let checks: Vec<DerivativeCheck> = names
        .iter()
        .zip(worst)
        .map(|(n, e)| DerivativeCheck {
            name: n.to_string(),
            max_rel_err: e,
        })
        .collect();
    let passed = checks.iter().all(|c| c.max_rel_err < DERIVATIVE_TOLERANCE);
    DerivativeReport {
        problem: problem.name().to_string(),
        trials,
        checks,
        threshold: DERIVATIVE_TOLERANCE,
        passed,
    }
}
