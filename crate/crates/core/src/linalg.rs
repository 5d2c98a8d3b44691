//! Dense vector/matrix kernels and matrix-free iterative solvers.
//!
//! Vectors are plain `[f64]` slices. [`Mat`] is a row-major dense matrix.
//! Solvers consume anything implementing [`LinearOperator`], so Hessians can
//! be applied through Hessian-vector products without ever being assembled.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Relative distance `‖a − b‖ / max(1, ‖b‖)`, the comparison used by the
/// derivative checks.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(b).max(1.0)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dims("Mat::from_vec", rows * cols, data.len()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("Mat::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Mat::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// `A x`
    pub fn gemv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dims("gemv", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `Aᵀ x`
    pub fn gemv_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::dims("gemv_t", self.rows, x.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(*xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::dims("matmul", self.cols, other.rows));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }
}

/// A square linear map applied matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Mat {
    fn dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnOperator { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// Result of an iterative solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// True residual `‖op(v) − b‖` of the returned solution.
    pub residual: f64,
    pub converged: bool,
}

fn check_rhs(op: &dyn LinearOperator, b: &[f64]) -> Result<()> {
    if b.len() != op.dim() {
        return Err(Error::dims("linear solve rhs", op.dim(), b.len()));
    }
    if !all_finite(b) {
        return Err(Error::NumericalBreakdown {
            iteration: 0,
            reason: "non-finite right-hand side".into(),
        });
    }
    Ok(())
}

fn finish(op: &dyn LinearOperator, b: &[f64], v: Vec<f64>, iterations: usize, tol: f64) -> SolveOutcome {
    let residual = norm(&sub(&op.apply(&v), b));
    SolveOutcome {
        converged: residual <= tol * norm(b).max(1.0),
        solution: v,
        iterations,
        residual,
    }
}

/// Conjugate gradients from `v = 0` on a symmetric positive-definite
/// operator. Stops once `‖r‖ ≤ tol · max(1, ‖b‖)` or after `max_iters`.
pub fn cg_solve(op: &dyn LinearOperator, b: &[f64], max_iters: usize, tol: f64) -> Result<SolveOutcome> {
    check_rhs(op, b)?;
    let n = op.dim();
    let threshold = tol * norm(b).max(1.0);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;

    while iterations < max_iters {
        if rr.sqrt() <= threshold {
            break;
        }
        iterations += 1;
        let ap = op.apply(&p);
        if ap.len() != n {
            return Err(Error::dims("cg operator output", n, ap.len()));
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::NumericalBreakdown {
                iteration: iterations,
                reason: format!("curvature pᵀAp = {pap:e} is not positive"),
            });
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() || !all_finite(&x) {
            return Err(Error::NumericalBreakdown {
                iteration: iterations,
                reason: "non-finite iterate".into(),
            });
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Ok(finish(op, b, x, iterations, tol))
}

/// Richardson iteration `v ← v − step · (op(v) − b)` from `v = 0`.
///
/// Fails with [`Error::Divergence`] once the residual has grown for ten
/// consecutive iterations.
pub fn fixed_point_solve(
    op: &dyn LinearOperator,
    b: &[f64],
    step: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SolveOutcome> {
    check_rhs(op, b)?;
    if !(step > 0.0) {
        return Err(Error::Config(format!("fixed-point step must be positive, got {step}")));
    }
    let threshold = tol * norm(b).max(1.0);
    let mut v = vec![0.0; op.dim()];
    let mut prev = f64::INFINITY;
    let mut growth = 0;

    for it in 0..max_iters {
        let r = sub(&op.apply(&v), b);
        let rn = norm(&r);
        if !rn.is_finite() {
            return Err(Error::NumericalBreakdown {
                iteration: it,
                reason: "non-finite residual".into(),
            });
        }
        if rn <= threshold {
            return Ok(finish(op, b, v, it, tol));
        }
        if rn > prev {
            growth += 1;
            if growth >= 10 {
                return Err(Error::Divergence {
                    iteration: it,
                    residual: rn,
                });
            }
        } else {
            growth = 0;
        }
        prev = rn;
        axpy(-step, &r, &mut v);
    }
    Ok(finish(op, b, v, max_iters, tol))
}

/// Solves `A x = b` by LU with partial pivoting.
///
/// Pivots below `1e-12 · max|A|` are reported as [`Error::Singular`].
pub fn dense_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims("dense_solve (square)", n, a.cols()));
    }
    if b.len() != n {
        return Err(Error::dims("dense_solve rhs", n, b.len()));
    }
    let threshold = 1e-12 * a.max_abs();
    let mut lu = a.data.clone();
    let mut x = b.to_vec();

    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|i| (i, lu[i * n + k].abs()))
            .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if !(pmax > threshold) {
            return Err(Error::Singular {
                pivot: pmax,
                threshold,
            });
        }
        if piv != k {
            for j in 0..n {
                lu.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        let pivot = lu[k * n + k];
        for i in k + 1..n {
            let f = lu[i * n + k] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lu[i * n + j] -= f * lu[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| lu[k * n + j] * x[j]).sum();
        x[k] = (x[k] - s) / lu[k * n + k];
    }
    Ok(x)
}

/// Largest and smallest eigenvalues of a symmetric positive semi-definite
/// operator, by power iteration on `A` and on `λ_max·I − A`.
pub fn spectral_extremes(op: &dyn LinearOperator, iters: usize, seed: u64) -> (f64, f64) {
    use rand::Rng;
    let n = op.dim();
    let mut rng = crate::rng::rng_from_seed(seed);
    let start: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let power = |apply: &dyn Fn(&[f64]) -> Vec<f64>| -> f64 {
        let mut v = start.clone();
        let n0 = norm(&v);
        scale(1.0 / n0, &mut v);
        let mut est = 0.0;
        for _ in 0..iters.max(1) {
            let w = apply(&v);
            est = dot(&v, &w);
            let nw = norm(&w);
            if nw == 0.0 {
                break;
            }
            v = w;
            scale(1.0 / nw, &mut v);
        }
        est
    };
    let top = power(&|v| op.apply(v));
    let gap = power(&|v| {
        let av = op.apply(v);
        v.iter().zip(av).map(|(x, y)| top * x - y).collect()
    });
    (top, (top - gap).max(0.0))
}
