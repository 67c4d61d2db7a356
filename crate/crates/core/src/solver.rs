//! Solvers shared by every valuation method.
//!
//! [`solve_quadratic`] minimizes
//!
//! ```text
//! f(b) = |U - X b|^2 + ridge |b|^2 + graph_weight * b^T L b + eta * sum_i w_i (t_i - b_i)^2
//! ```
//!
//! through its stationary system `(X^T X + ridge I + graph_weight L + eta W) b = X^T U + eta W t`.
//! `L` may carry negative couplings, so the system can be indefinite; the
//! report says which of the three regimes produced the answer.
//!
//! [`solve_lasso`] is cyclic coordinate descent for `|U - X b|^2 + lambda |b|_1`
//! with a KKT stopping rule, and [`cross_validate`] is the k-fold grid search
//! used to pick regularization strengths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SignedQuadratic;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Positive-definite system, solved by Cholesky (or MINRES with a positive Lanczos pivot sequence).
    Definite,
    /// Nonsingular indefinite system; the answer is a stationary point, not a minimizer.
    IndefiniteStationary,
    /// Singular or unsolvable system; `delta I` was added to make it solvable.
    Damped,
}

/// Anchor term `eta * sum_i w_i (target_i - b_i)^2`.
#[derive(Clone, Copy, Debug)]
pub struct Anchor<'a> {
    pub target: &'a [f64],
    pub weights: &'a [f64],
    pub strength: f64,
}

#[derive(Clone, Debug)]
pub struct QuadraticProblem<'a> {
    n: usize,
    data_fit: Option<(&'a DMatrix<f64>, &'a DVector<f64>)>,
    ridge: f64,
    graph: Option<(&'a SignedQuadratic, f64)>,
    anchor: Option<Anchor<'a>>,
    init: Option<Vec<f64>>,
}

impl<'a> QuadraticProblem<'a> {
    pub fn new(n: usize) -> Self {
        QuadraticProblem { n, data_fit: None, ridge: 0.0, graph: None, anchor: None, init: None }
    }

    pub fn with_data_fit(mut self, x: &'a DMatrix<f64>, u: &'a DVector<f64>) -> Self {
        self.data_fit = Some((x, u));
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn with_graph(mut self, l: &'a SignedQuadratic, weight: f64) -> Self {
        self.graph = Some((l, weight));
        self
    }

    pub fn with_anchor(mut self, anchor: Anchor<'a>) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn with_init(mut self, init: Vec<f64>) -> Self {
        self.init = Some(init);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn init(&self) -> Vec<f64> {
        self.init.clone().unwrap_or_else(|| vec![0.0; self.n])
    }

    fn validate(&self) -> Result<()> {
        let n = self.n;
        let finite = |s: &[f64], what: &str| {
            if s.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFinite(what.to_string()))
            }
        };
        if let Some((x, u)) = self.data_fit {
            if x.ncols() != n || x.nrows() != u.len() {
                return Err(Error::dims(format!("X is {}x{}, U has {} entries, N = {n}", x.nrows(), x.ncols(), u.len())));
            }
            finite(x.as_slice(), "X")?;
            finite(u.as_slice(), "U")?;
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid("ridge weight must be finite and nonnegative"));
        }
        if let Some((l, w)) = self.graph {
            if l.n() != n {
                return Err(Error::dims(format!("graph has {} nodes, N = {n}", l.n())));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("graph weight must be finite and nonnegative"));
            }
        }
        if let Some(a) = &self.anchor {
            if a.target.len() != n || a.weights.len() != n {
                return Err(Error::dims("anchor target/weights length differs from N"));
            }
            finite(a.target, "anchor target")?;
            if a.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(a.strength >= 0.0 && a.strength.is_finite()) {
                return Err(Error::invalid("anchor weights and strength must be finite and nonnegative"));
            }
        }
        if let Some(b0) = &self.init {
            if b0.len() != n {
                return Err(Error::dims("initial point length differs from N"));
            }
            finite(b0, "initial point")?;
        }
        Ok(())
    }

    pub fn objective(&self, b: &[f64]) -> f64 {
        let mut f = self.ridge * b.iter().map(|v| v * v).sum::<f64>();
        if let Some((x, u)) = self.data_fit {
            let r = u - x * DVector::from_column_slice(b);
            f += r.norm_squared();
        }
        if let Some((l, w)) = self.graph {
            f += w * l.quad_form(b);
        }
        if let Some(a) = &self.anchor {
            f += a.strength * a.target.iter().zip(a.weights).zip(b).map(|((t, w), v)| w * (t - v).powi(2)).sum::<f64>();
        }
        f
    }

    /// `A v` for the stationary-system matrix, plus `shift * v`.
    fn apply(&self, v: &[f64], shift: f64) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| (self.ridge + shift) * x).collect();
        if let Some((x, _)) = self.data_fit {
            let xv = x * DVector::from_column_slice(v);
            let xtxv = x.tr_mul(&xv);
            out.iter_mut().zip(xtxv.iter()).for_each(|(o, a)| *o += a);
        }
        if let Some((l, w)) = self.graph {
            out.iter_mut().zip(l.apply(v)).for_each(|(o, a)| *o += w * a);
        }
        if let Some(a) = &self.anchor {
            for (i, o) in out.iter_mut().enumerate() {
                *o += a.strength * a.weights[i] * v[i];
            }
        }
        out
    }

    fn rhs(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n];
        if let Some((x, u)) = self.data_fit {
            b.iter_mut().zip(x.tr_mul(u).iter()).for_each(|(o, a)| *o += a);
        }
        if let Some(a) = &self.anchor {
            for (i, o) in b.iter_mut().enumerate() {
                *o += a.strength * a.weights[i] * a.target[i];
            }
        }
        b
    }

    /// Dense stationary system `(A, rhs)`; `grad f(b) = 2 (A b - rhs)`.
    pub fn system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n;
        let mut a = match self.data_fit {
            Some((x, _)) => x.tr_mul(x),
            None => DMatrix::zeros(n, n),
        };
        for i in 0..n {
            a[(i, i)] += self.ridge;
        }
        if let Some((l, w)) = self.graph {
            l.add_to(&mut a, w);
        }
        if let Some(an) = &self.anchor {
            for i in 0..n {
                a[(i, i)] += an.strength * an.weights[i];
            }
        }
        (a, DVector::from_vec(self.rhs()))
    }

    pub fn gradient(&self, b: &[f64]) -> Vec<f64> {
        self.apply(b, 0.0).iter().zip(self.rhs()).map(|(ab, r)| 2.0 * (ab - r)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative gradient tolerance: `|grad f(b*)| <= tol (1 + |grad f(b0)|)`.
    pub tol: f64,
    /// Largest N solved by dense factorization; above it MINRES is used.
    pub direct_max_n: usize,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-8, direct_max_n: 2000, max_iter: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub beta: Vec<f64>,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub iterations: usize,
    pub objective: f64,
    pub conditioning: Conditioning,
    /// Diagonal shift added when `conditioning` is `Damped`, else 0.
    pub damping: f64,
}

const MAX_DOUBLINGS: usize = 200;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn solve_quadratic(prob: &QuadraticProblem<'_>, opts: &SolverOptions) -> Result<SolveReport> {
    prob.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("solver tol must be positive"));
    }
    let b0 = prob.init();
    let g0 = norm(&prob.gradient(&b0));
    let target = opts.tol * (1.0 + g0);
    let (beta, iterations, conditioning, damping) = if prob.n() <= opts.direct_max_n {
        solve_direct(prob, target)?
    } else {
        solve_iterative(prob, &b0, target, opts.max_iter)?
    };
    let grad_norm = norm(&prob.gradient(&beta));
    Ok(SolveReport { objective: prob.objective(&beta), beta, grad_norm, initial_grad_norm: g0, iterations, conditioning, damping })
}

fn pivot_ratio_ok(min: f64, max: f64, n: usize) -> bool {
    max > 0.0 && min / max > (n.max(1) as f64) * f64::EPSILON
}

/// Solve with one step of iterative refinement against the undamped `a`.
fn refine_solve(a: &DMatrix<f64>, rhs: &DVector<f64>, solve: impl Fn(&DVector<f64>) -> Option<DVector<f64>>) -> Option<DVector<f64>> {
    let mut x = solve(rhs)?;
    let r = rhs - a * &x;
    if let Some(dx) = solve(&r) {
        let cand = &x + dx;
        if (rhs - a * &cand).norm() < r.norm() {
            x = cand;
        }
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

fn factor(a: &DMatrix<f64>, definite_only: bool) -> Option<(Factor, bool)> {
    let n = a.nrows();
    if let Some(ch) = a.clone().cholesky() {
        let d = ch.l_dirty().diagonal();
        let (mn, mx) = (d.min(), d.max());
        if pivot_ratio_ok(mn * mn, mx * mx, n) {
            return Some((Factor::Cholesky(ch), true));
        }
    }
    if definite_only {
        return None;
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let d = u.diagonal().map(f64::abs);
    if pivot_ratio_ok(d.min(), d.max(), n) {
        return Some((Factor::Lu(lu), false));
    }
    None
}

fn solve_factor(f: &Factor, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    match f {
        Factor::Cholesky(c) => Some(c.solve(rhs)),
        Factor::Lu(l) => l.solve(rhs),
    }
}

fn solve_direct(prob: &QuadraticProblem<'_>, target: f64) -> Result<(Vec<f64>, usize, Conditioning, f64)> {
    let (a, rhs) = prob.system();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("system matrix".into()));
    }
    let grad_ok = |x: &DVector<f64>, m: &DMatrix<f64>| 2.0 * (m * x - &rhs).norm() <= target;

    if let Some((f, definite)) = factor(&a, false) {
        if let Some(x) = refine_solve(&a, &rhs, |r| solve_factor(&f, r)) {
            if grad_ok(&x, &a) {
                let cond = if definite { Conditioning::Definite } else { Conditioning::IndefiniteStationary };
                return Ok((x.as_slice().to_vec(), 1, cond, 0.0));
            }
        }
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut delta = 1e-10 * scale;
    for k in 0..MAX_DOUBLINGS {
        let mut damped = a.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += delta;
        }
        if let Some((f, _)) = factor(&damped, false) {
            if let Some(x) = refine_solve(&damped, &rhs, |r| solve_factor(&f, r)) {
                if grad_ok(&x, &damped) {
                    return Ok((x.as_slice().to_vec(), k + 2, Conditioning::Damped, delta));
                }
            }
        }
        delta *= 2.0;
    }
    Err(Error::Degenerate("stationary system unsolvable even with damping".into()))
}

struct MinresOutcome {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
    positive_pivots: bool,
}

/// MINRES (Paige & Saunders) on `(A + shift I) x = rhs` from `x0`. Also tracks
/// the LDL^T pivots of the Lanczos tridiagonal to detect indefiniteness.
fn minres(prob: &QuadraticProblem<'_>, rhs: &[f64], x0: &[f64], shift: f64, target_resid: f64, max_iter: usize) -> MinresOutcome {
    let n = rhs.len();
    let mut x = x0.to_vec();
    let ax = prob.apply(&x, shift);
    let mut r1: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let beta1 = norm(&r1);
    if beta1 <= target_resid {
        return MinresOutcome { x, iterations: 0, converged: true, positive_pivots: true };
    }
    let mut y = r1.clone();
    let mut r2 = r1.clone();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0, 0.0);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut pivot_prev = f64::NAN;
    let mut positive = true;
    for itn in 1..=max_iter {
        let s = 1.0 / beta;
        let v: Vec<f64> = y.iter().map(|t| s * t).collect();
        y = prob.apply(&v, shift);
        if itn >= 2 {
            let f = beta / oldb;
            y.iter_mut().zip(&r1).for_each(|(t, r)| *t -= f * r);
        }
        let alfa: f64 = v.iter().zip(&y).map(|(a, b)| a * b).sum();
        let pivot = if itn == 1 { alfa } else { alfa - beta * beta / pivot_prev };
        positive &= pivot > 0.0;
        pivot_prev = pivot;
        let f = alfa / beta;
        y.iter_mut().zip(&r2).for_each(|(t, r)| *t -= f * r);
        r1 = std::mem::replace(&mut r2, y.clone());
        oldb = beta;
        beta = norm(&r2);
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w.clone());
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) / gamma;
            x[i] += phi * w[i];
        }
        if phibar <= target_resid || beta == 0.0 {
            return MinresOutcome { x, iterations: itn, converged: true, positive_pivots: positive };
        }
    }
    MinresOutcome { x, iterations: max_iter, converged: false, positive_pivots: positive }
}

fn solve_iterative(prob: &QuadraticProblem<'_>, b0: &[f64], target: f64, max_iter: usize) -> Result<(Vec<f64>, usize, Conditioning, f64)> {
    let rhs = prob.rhs();
    // grad = 2 * residual, so the residual target is half the gradient target.
    let resid_ok = |x: &[f64], shift: f64| {
        let ax = prob.apply(x, shift);
        2.0 * norm(&ax.iter().zip(&rhs).map(|(a, b)| a - b).collect::<Vec<_>>()) <= target
    };
    let out = minres(prob, &rhs, b0, 0.0, 0.5 * target, max_iter);
    let mut total = out.iterations;
    if out.converged && resid_ok(&out.x, 0.0) {
        let cond = if out.positive_pivots { Conditioning::Definite } else { Conditioning::IndefiniteStationary };
        return Ok((out.x, total, cond, 0.0));
    }
    let scale = prob.apply(&vec![1.0; prob.n()], 0.0).iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut delta = 1e-10 * scale;
    for _ in 0..MAX_DOUBLINGS {
        let out = minres(prob, &rhs, b0, delta, 0.5 * target, max_iter);
        total += out.iterations;
        if out.converged && resid_ok(&out.x, delta) {
            return Ok((out.x, total, Conditioning::Damped, delta));
        }
        delta *= 2.0;
    }
    Err(Error::Degenerate("MINRES stagnated even with damping".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    /// Absolute tolerance on the KKT residual.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions { tol: 1e-8, max_sweeps: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoReport {
    pub beta: Vec<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

/// Largest KKT violation of `b` for `|U - X b|^2 + lambda |b|_1`.
pub fn lasso_kkt_residual(x: &DMatrix<f64>, u: &DVector<f64>, lambda: f64, b: &[f64]) -> f64 {
    let r = u - x * DVector::from_column_slice(b);
    let g = x.tr_mul(&r) * 2.0;
    g.iter()
        .zip(b)
        .map(|(&gj, &bj)| if bj == 0.0 { (gj.abs() - lambda).max(0.0) } else { (gj - lambda * bj.signum()).abs() })
        .fold(0.0, f64::max)
}

/// `max_j |2 X_j^T U|`: every `lambda` at or above this gives `b = 0`.
pub fn lasso_lambda_max(x: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    x.tr_mul(u).iter().fold(0.0f64, |m, v| m.max(2.0 * v.abs()))
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

pub fn solve_lasso(x: &DMatrix<f64>, u: &DVector<f64>, lambda: f64, opts: &LassoOptions) -> Result<LassoReport> {
    solve_lasso_from(x, u, lambda, None, opts)
}

/// Coordinate descent from an optional warm start.
pub fn solve_lasso_from(x: &DMatrix<f64>, u: &DVector<f64>, lambda: f64, warm: Option<&[f64]>, opts: &LassoOptions) -> Result<LassoReport> {
    let (m, n) = x.shape();
    if u.len() != m {
        return Err(Error::dims(format!("X has {m} rows, U has {}", u.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be finite and nonnegative"));
    }
    if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs".into()));
    }
    let mut b = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        Some(_) => return Err(Error::dims("warm start length differs from N")),
        None => vec![0.0; n],
    };
    let col_sq: Vec<f64> = (0..n).map(|j| x.column(j).norm_squared()).collect();
    let mut r = u - x * DVector::from_column_slice(&b);
    let half = 0.5 * lambda;
    let mut sweeps = 0;
    let mut kkt = lasso_kkt_residual(x, u, lambda, &b);
    while kkt > opts.tol && sweeps < opts.max_sweeps {
        for j in 0..n {
            if col_sq[j] == 0.0 {
                b[j] = 0.0;
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&r) + col_sq[j] * b[j];
            let new = soft_threshold(rho, half) / col_sq[j];
            let delta = new - b[j];
            if delta != 0.0 {
                r.axpy(-delta, &col, 1.0);
                b[j] = new;
            }
        }
        sweeps += 1;
        if sweeps % 50 == 0 {
            r = u - x * DVector::from_column_slice(&b);
        }
        kkt = lasso_kkt_residual(x, u, lambda, &b);
    }
    Ok(LassoReport { beta: b, sweeps, kkt_residual: kkt, converged: kkt <= opts.tol })
}

/// Outcome of a grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct CvResult<T> {
    pub best: T,
    pub best_index: usize,
    /// Mean held-out error per grid entry, in grid order.
    pub errors: Vec<f64>,
}

/// Row indices of fold `f`: rows whose index is `f` modulo `folds`.
pub fn fold_split(n_rows: usize, folds: usize, f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n_rows).partition(|&r| r % folds != f)
}

/// k-fold grid search. `score(entry, train_rows, held_out_rows)` returns the
/// held-out error of one fold; folds are assigned by row index modulo `folds`.
/// The lowest mean error wins, ties going to the earliest grid entry.
pub fn cross_validate<T, F>(grid: &[T], folds: usize, n_rows: usize, score: F) -> Result<CvResult<T>>
where
    T: Clone + Sync,
    F: Fn(&T, &[usize], &[usize]) -> Result<f64> + Sync + Send,
{
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if folds < 2 || n_rows < folds {
        return Err(Error::InsufficientData(format!("{n_rows} rows cannot form {folds} folds")));
    }
    let cells = par::try_map_range(grid.len() * folds, |c| {
        let (g, f) = (c / folds, c % folds);
        let (train, test) = fold_split(n_rows, folds, f);
        score(&grid[g], &train, &test)
    })?;
    let errors: Vec<f64> = cells.chunks(folds).map(|c| c.iter().sum::<f64>() / folds as f64).collect();
    let mut best_index = 0;
    for (i, e) in errors.iter().enumerate() {
        if *e < errors[best_index] || errors[best_index].is_nan() {
            best_index = i;
        }
    }
    Ok(CvResult { best: grid[best_index].clone(), best_index, errors })
}

/// Linear predictor `intercept + X b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows)
}

/// Grid search on a regression dataset: each entry is fit on the training
/// folds and scored by held-out `|U - (c + X b)|^2 / |fold|`.
pub fn cross_validate_regression<T, F>(grid: &[T], folds: usize, x: &DMatrix<f64>, u: &DVector<f64>, fit: F) -> Result<CvResult<T>>
where
    T: Clone + Sync,
    F: Fn(&DMatrix<f64>, &DVector<f64>, &T) -> Result<LinearFit> + Sync + Send,
{
    cross_validate(grid, folds, x.nrows(), |entry, train, test| {
        let xt = x.select_rows(train);
        let ut = u.select_rows(train);
        let lf = fit(&xt, &ut, entry)?;
        let xh = x.select_rows(test);
        let uh = u.select_rows(test);
        let pred = xh * DVector::from_column_slice(&lf.coef);
        let err: f64 = uh.iter().zip(pred.iter()).map(|(a, p)| (a - lf.intercept - p).powi(2)).sum();
        Ok(err / test.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::assemble_quadratic;
    use rand::Rng;

    fn random_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::rng_from(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vector(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = crate::rng::rng_from(seed);
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn square_ols() {
        let x = random_matrix(6, 6, 1) + DMatrix::identity(6, 6) * 3.0;
        let u = random_vector(6, 2);
        let rep = solve_quadratic(&QuadraticProblem::new(6).with_data_fit(&x, &u), &SolverOptions::default()).unwrap();
        let expect = x.clone().lu().solve(&u).unwrap();
        for i in 0..6 {
            assert!((rep.beta[i] - expect[i]).abs() < 1e-8);
        }
        assert_eq!(rep.conditioning, Conditioning::Definite);
    }

    #[test]
    fn ridge_closed_form() {
        let x = random_matrix(30, 10, 3);
        let u = random_vector(30, 4);
        let rep = solve_quadratic(&QuadraticProblem::new(10).with_data_fit(&x, &u).with_ridge(0.7), &SolverOptions::default()).unwrap();
        let a = x.tr_mul(&x) + DMatrix::identity(10, 10) * 0.7;
        let expect = a.try_inverse().unwrap() * x.tr_mul(&u);
        for i in 0..10 {
            assert!((rep.beta[i] - expect[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_psd_is_damped() {
        // Single same-sign clique, no ridge or anchor: any constant vector minimizes.
        let nb = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let ws = vec![vec![1.0; 2]; 3];
        let l = assemble_quadratic(3, &nb, &ws).unwrap();
        let prob = QuadraticProblem::new(3).with_graph(&l, 1.0).with_init(vec![0.0, 2.0, 1.0]);
        let rep = solve_quadratic(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(rep.conditioning, Conditioning::Damped);
        assert!(rep.damping > 0.0);
        assert!(rep.objective <= prob.objective(&[0.0, 2.0, 1.0]));
    }

    #[test]
    fn indefinite_gives_stationary_point() {
        let l = assemble_quadratic(2, &[vec![1], vec![]], &[vec![-1.0], vec![]]).unwrap();
        let t = [1.0, 2.0];
        let w = [1.0, 1.0];
        let prob = QuadraticProblem::new(2).with_graph(&l, 1.0).with_anchor(Anchor { target: &t, weights: &w, strength: 0.5 });
        let rep = solve_quadratic(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(rep.conditioning, Conditioning::IndefiniteStationary);
        assert!(rep.grad_norm <= 1e-8 * (1.0 + rep.initial_grad_norm));
    }

    #[test]
    fn iterative_matches_direct() {
        let x = random_matrix(60, 25, 5);
        let u = random_vector(60, 6);
        let nb: Vec<Vec<usize>> = (0..25).map(|i| vec![(i + 1) % 25, (i + 3) % 25]).collect();
        let ws: Vec<Vec<f64>> = (0..25).map(|i| vec![0.5, if i % 2 == 0 { 0.3 } else { -0.2 }]).collect();
        let l = assemble_quadratic(25, &nb, &ws).unwrap();
        let prob = QuadraticProblem::new(25).with_data_fit(&x, &u).with_ridge(0.1).with_graph(&l, 0.5);
        let direct = solve_quadratic(&prob, &SolverOptions::default()).unwrap();
        let iter = solve_quadratic(&prob, &SolverOptions { direct_max_n: 10, ..Default::default() }).unwrap();
        assert!(iter.grad_norm <= 1e-8 * (1.0 + iter.initial_grad_norm));
        for i in 0..25 {
            assert!((direct.beta[i] - iter.beta[i]).abs() < 1e-7);
        }
        assert_eq!(iter.conditioning, direct.conditioning);
    }

    #[test]
    fn iterative_flags_indefinite() {
        let l = assemble_quadratic(2, &[vec![1], vec![]], &[vec![-1.0], vec![]]).unwrap();
        let t = [1.0, 2.0];
        let w = [1.0, 1.0];
        let prob = QuadraticProblem::new(2).with_graph(&l, 1.0).with_anchor(Anchor { target: &t, weights: &w, strength: 0.5 });
        let rep = solve_quadratic(&prob, &SolverOptions { direct_max_n: 0, ..Default::default() }).unwrap();
        assert_eq!(rep.conditioning, Conditioning::IndefiniteStationary);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let x = random_matrix(5, 3, 1);
        let u = random_vector(4, 1);
        assert!(matches!(solve_quadratic(&QuadraticProblem::new(3).with_data_fit(&x, &u), &SolverOptions::default()), Err(Error::DimensionMismatch(_))));
        let mut u5 = random_vector(5, 1);
        u5[0] = f64::NAN;
        assert!(matches!(solve_quadratic(&QuadraticProblem::new(3).with_data_fit(&x, &u5), &SolverOptions::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shrinkage_is_monotone() {
        let x = random_matrix(40, 8, 9);
        let u = random_vector(40, 10);
        let mut prev = f64::INFINITY;
        for lam in [0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28] {
            let rep = solve_quadratic(&QuadraticProblem::new(8).with_data_fit(&x, &u).with_ridge(lam), &SolverOptions::default()).unwrap();
            let nb = norm(&rep.beta);
            assert!(nb < prev);
            prev = nb;
        }
    }

    #[test]
    fn row_permutation_invariance() {
        let x = random_matrix(20, 5, 11);
        let u = random_vector(20, 12);
        let perm: Vec<usize> = (0..20).rev().collect();
        let xp = x.select_rows(&perm);
        let up = u.select_rows(&perm);
        let a = solve_quadratic(&QuadraticProblem::new(5).with_data_fit(&x, &u).with_ridge(0.1), &SolverOptions::default()).unwrap();
        let b = solve_quadratic(&QuadraticProblem::new(5).with_data_fit(&xp, &up).with_ridge(0.1), &SolverOptions::default()).unwrap();
        for i in 0..5 {
            assert!((a.beta[i] - b.beta[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn lasso_zero_threshold() {
        let x = random_matrix(10, 6, 13);
        let u = random_vector(10, 14);
        let lmax = lasso_lambda_max(&x, &u);
        for lam in [lmax, 2.0 * lmax] {
            let rep = solve_lasso(&x, &u, lam, &LassoOptions::default()).unwrap();
            assert!(rep.beta.iter().all(|&b| b == 0.0));
        }
        let rep = solve_lasso(&x, &u, 0.9 * lmax, &LassoOptions::default()).unwrap();
        assert!(rep.beta.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn lasso_zero_lambda_is_least_squares() {
        let x = random_matrix(20, 5, 15);
        let u = random_vector(20, 16);
        let rep = solve_lasso(&x, &u, 0.0, &LassoOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let ls = (x.tr_mul(&x)).cholesky().unwrap().solve(&x.tr_mul(&u));
        for i in 0..5 {
            assert!((rep.beta[i] - ls[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn lasso_coordinatewise_optimal() {
        // Oracle: each coordinate is a 1-D minimizer of the objective with the
        // others fixed, checked by a refined grid line search.
        let x = random_matrix(10, 6, 17);
        let u = random_vector(10, 18);
        let lam = 0.3 * lasso_lambda_max(&x, &u);
        let rep = solve_lasso(&x, &u, lam, &LassoOptions::default()).unwrap();
        assert!(rep.kkt_residual <= 1e-8);
        let obj = |b: &[f64]| (&u - &x * DVector::from_column_slice(b)).norm_squared() + lam * b.iter().map(|v| v.abs()).sum::<f64>();
        let f_star = obj(&rep.beta);
        for j in 0..6 {
            let (mut lo, mut hi) = (rep.beta[j] - 1.0, rep.beta[j] + 1.0);
            let mut best = (f64::INFINITY, 0.0);
            for _ in 0..6 {
                for s in 0..=200 {
                    let t = lo + (hi - lo) * s as f64 / 200.0;
                    let mut b = rep.beta.clone();
                    b[j] = t;
                    let f = obj(&b);
                    if f < best.0 {
                        best = (f, t);
                    }
                }
                let w = (hi - lo) / 100.0;
                lo = best.1 - w;
                hi = best.1 + w;
            }
            assert!(f_star <= best.0 + 1e-10, "coordinate {j}");
            assert!((best.1 - rep.beta[j]).abs() < 1e-6, "coordinate {j}: grid {} vs {}", best.1, rep.beta[j]);
        }
    }

    #[test]
    fn cv_rules() {
        let score = |t: &f64, _: &[usize], _: &[usize]| Ok((t - 2.0).abs());
        assert_eq!(cross_validate(&[7.0], 5, 10, score).unwrap().best, 7.0);
        let r = cross_validate(&[3.0, 1.0, 3.0, 1.0], 5, 10, score).unwrap();
        assert_eq!(r.best_index, 0);
        assert!(matches!(cross_validate::<f64, _>(&[], 5, 10, score), Err(Error::EmptyGrid)));
        assert!(cross_validate(&[1.0], 5, 3, score).is_err());
        let (train, test) = fold_split(12, 5, 2);
        assert_eq!(test, vec![2, 7]);
        assert_eq!(train.len(), 10);
    }
}
