//! Static valuation: AME (Lasso on the design matrix), GLOC (ridge plus the
//! signed neighbourhood penalty) and refinement of values from any estimator.
//!
//! Regression coefficients estimate `c / v` for an additive utility with
//! per-sample contributions `c`, where `v = E_p[1 / (p (1 - p))]` is the
//! encoding scale of the sampling distribution. Reported values are the
//! coefficients multiplied by `v`, so they sit on the utility scale.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::par;
use crate::sampling::DesignMatrix;
use crate::solver::{
    cross_validate_regression, lasso_lambda_max, solve_lasso_from, solve_quadratic, Anchor, LassoOptions, LinearFit, QuadraticProblem,
    SolveReport, SolverOptions,
};

/// Per-sample values with the method and every knob that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueVector {
    pub values: Vec<f64>,
    pub method: String,
    pub hyperparams: BTreeMap<String, Value>,
    pub ids: Vec<u64>,
}

/// Everything in a [`ValueVector`] except the values themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueMeta {
    pub method: String,
    pub n: usize,
    pub hyperparams: BTreeMap<String, Value>,
}

impl ValueVector {
    pub fn new(values: Vec<f64>, method: impl Into<String>, ids: Vec<u64>) -> Result<Self> {
        if values.len() != ids.len() {
            return Err(Error::dims(format!("{} values for {} ids", values.len(), ids.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value for id {}", ids[i])));
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        if let Some(id) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::IdMismatch(format!("duplicate id {id}")));
        }
        Ok(ValueVector { values, method: method.into(), hyperparams: BTreeMap::new(), ids })
    }

    pub fn with_param(mut self, key: &str, value: impl Serialize) -> Self {
        self.set_param(key, value);
        self
    }

    pub fn set_param(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.hyperparams.insert(key.to_string(), v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_of(&self, id: u64) -> Option<f64> {
        self.ids.iter().position(|&x| x == id).map(|i| self.values[i])
    }

    pub fn id_map(&self) -> std::collections::HashMap<u64, f64> {
        self.ids.iter().copied().zip(self.values.iter().copied()).collect()
    }

    pub fn meta(&self) -> ValueMeta {
        ValueMeta { method: self.method.clone(), n: self.len(), hyperparams: self.hyperparams.clone() }
    }

    pub fn from_table_and_meta<R: Read>(table: R, meta: ValueMeta) -> Result<Self> {
        let (ids, values) = read_value_table(table)?;
        if ids.len() != meta.n {
            return Err(Error::dims(format!("value table has {} rows, metadata says {}", ids.len(), meta.n)));
        }
        let mut v = ValueVector::new(values, meta.method, ids)?;
        v.hyperparams = meta.hyperparams;
        Ok(v)
    }

    /// `id,value` table.
    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "value"])?;
        for (id, v) in self.ids.iter().zip(&self.values) {
            wr.write_record([id.to_string(), v.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads an `id,value` table.
pub fn read_value_table<R: Read>(r: R) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "value" {
        return Err(Error::Schema { line: 1, msg: "expected header `id,value`".into() });
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 2 {
            return Err(Error::Parse { line, msg: "expected two fields".into() });
        }
        ids.push(rec[0].parse().map_err(|_| Error::Parse { line, msg: format!("bad id `{}`", &rec[0]) })?);
        values.push(rec[1].parse().map_err(|_| Error::Parse { line, msg: format!("bad value `{}`", &rec[1]) })?);
    }
    Ok((ids, values))
}

/// Centres the columns of `x` and `u`; returns the means used.
fn center(x: &DMatrix<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, Vec<f64>, f64) {
    let m = x.nrows() as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / m).collect();
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] - means[c]);
    let um = u.sum() / m;
    (xc, u.add_scalar(-um), means, um)
}

fn intercept_of(means: &[f64], um: f64, coef: &[f64]) -> f64 {
    um - means.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>()
}

fn design_provenance(v: &mut ValueVector, dm: &DesignMatrix) {
    v.set_param("m", dm.n_rows());
    v.set_param("p_support", &dm.sampling.p_support);
    v.set_param("sampling_seed", dm.sampling.seed);
    v.set_param("model", &dm.model);
    v.set_param("value_scale", dm.encoding_scale());
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmeConfig {
    /// Fixed Lasso strength; chosen by cross-validation when absent.
    pub lambda: Option<f64>,
    pub folds: usize,
    pub grid_points: usize,
    /// Smallest grid entry as a fraction of `lambda_max`.
    pub grid_min_ratio: f64,
    /// Fit an unpenalized intercept by centring `X` and `U`.
    pub fit_intercept: bool,
    pub lasso: LassoOptions,
}

impl Default for AmeConfig {
    fn default() -> Self {
        AmeConfig {
            lambda: None,
            folds: 5,
            grid_points: 20,
            grid_min_ratio: 1e-5,
            fit_intercept: true,
            lasso: LassoOptions { tol: 1e-6, max_sweeps: 20_000 },
        }
    }
}

/// Log-spaced grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lasso_grid(lambda_max: f64, points: usize, ratio: f64) -> Vec<f64> {
    if points <= 1 || lambda_max <= 0.0 {
        return vec![lambda_max.max(0.0)];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    (0..points).map(|i| (hi + (lo - hi) * i as f64 / (points - 1) as f64).exp()).collect()
}

fn fit_lasso(x: &DMatrix<f64>, u: &DVector<f64>, lambda: f64, warm: Option<&[f64]>, cfg: &AmeConfig) -> Result<(LinearFit, bool)> {
    if cfg.fit_intercept {
        let (xc, uc, means, um) = center(x, u);
        let rep = solve_lasso_from(&xc, &uc, lambda, warm, &cfg.lasso)?;
        let intercept = intercept_of(&means, um, &rep.beta);
        Ok((LinearFit { coef: rep.beta, intercept }, rep.converged))
    } else {
        let rep = solve_lasso_from(x, u, lambda, warm, &cfg.lasso)?;
        Ok((LinearFit { coef: rep.beta, intercept: 0.0 }, rep.converged))
    }
}

fn centred_lambda_max(x: &DMatrix<f64>, u: &DVector<f64>, fit_intercept: bool) -> f64 {
    if fit_intercept {
        let (xc, uc, _, _) = center(x, u);
        lasso_lambda_max(&xc, &uc)
    } else {
        lasso_lambda_max(x, u)
    }
}

/// Lasso values; `cfg.lambda` absent selects it by k-fold CV along a warm-started path.
pub fn ame(dm: &DesignMatrix, cfg: &AmeConfig) -> Result<ValueVector> {
    let (x, u) = (&dm.x, &dm.u);
    let lmax = centred_lambda_max(x, u, cfg.fit_intercept);
    let (lambda, selection) = match cfg.lambda {
        Some(l) => {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid("lambda must be finite and nonnegative"));
            }
            (l, None)
        }
        None => {
            let grid = lasso_grid(lmax, cfg.grid_points, cfg.grid_min_ratio);
            let errors = lasso_path_cv(x, u, &grid, cfg)?;
            let mut best = 0;
            for (i, e) in errors.iter().enumerate() {
                if *e < errors[best] {
                    best = i;
                }
            }
            (grid[best], Some((grid, errors)))
        }
    };
    let (fit, converged) = fit_lasso(x, u, lambda, None, cfg)?;
    if !converged {
        log::warn!("ame: lasso stopped at the sweep cap before reaching tol {}", cfg.lasso.tol);
    }
    let scale = dm.encoding_scale();
    let mut v = ValueVector::new(fit.coef.iter().map(|b| scale * b).collect(), "ame", dm.ids.clone())?;
    v.set_param("lambda", lambda);
    v.set_param("lambda_max", lmax);
    v.set_param("fit_intercept", cfg.fit_intercept);
    v.set_param("intercept", fit.intercept);
    v.set_param("lasso_tol", cfg.lasso.tol);
    v.set_param("converged", converged);
    match selection {
        Some((grid, errors)) => {
            v.set_param("lambda_selection", "cv");
            v.set_param("cv_folds", cfg.folds);
            v.set_param("cv_grid", grid);
            v.set_param("cv_errors", errors);
        }
        None => v.set_param("lambda_selection", "given"),
    }
    design_provenance(&mut v, dm);
    Ok(v)
}

/// Mean held-out error per grid entry; each fold walks the grid in order with warm starts.
fn lasso_path_cv(x: &DMatrix<f64>, u: &DVector<f64>, grid: &[f64], cfg: &AmeConfig) -> Result<Vec<f64>> {
    let folds = cfg.folds;
    if folds < 2 || x.nrows() < folds {
        return Err(Error::InsufficientData(format!("{} rows cannot form {folds} folds", x.nrows())));
    }
    let per_fold = par::try_map_range(folds, |f| -> Result<Vec<f64>> {
        let (train, test) = crate::solver::fold_split(x.nrows(), folds, f);
        let (xt, ut) = (x.select_rows(&train), u.select_rows(&train));
        let (xh, uh) = (x.select_rows(&test), u.select_rows(&test));
        let mut warm: Option<Vec<f64>> = None;
        let mut errs = Vec::with_capacity(grid.len());
        for &lam in grid {
            let (fit, _) = fit_lasso(&xt, &ut, lam, warm.as_deref(), cfg)?;
            let pred = &xh * DVector::from_column_slice(&fit.coef);
            let e: f64 = uh.iter().zip(pred.iter()).map(|(a, p)| (a - fit.intercept - p).powi(2)).sum();
            errs.push(e / test.len() as f64);
            warm = Some(fit.coef);
        }
        Ok(errs)
    })?;
    Ok((0..grid.len()).map(|g| per_fold.iter().map(|e| e[g]).sum::<f64>() / folds as f64).collect())
}

pub const LAMBDA_GRID: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlocConfig {
    /// Global (ridge) strength; chosen by CV over `grid` when absent.
    pub lambda1: Option<f64>,
    /// Local (graph) strength; chosen by CV over `grid` when absent.
    pub lambda2: Option<f64>,
    pub grid: Vec<f64>,
    pub folds: usize,
    pub fit_intercept: bool,
    pub solver: SolverOptions,
}

impl Default for GlocConfig {
    fn default() -> Self {
        GlocConfig { lambda1: None, lambda2: None, grid: LAMBDA_GRID.to_vec(), folds: 5, fit_intercept: true, solver: SolverOptions::default() }
    }
}

fn fit_gloc(x: &DMatrix<f64>, u: &DVector<f64>, g: &SimilarityGraph, l1: f64, l2: f64, cfg: &GlocConfig) -> Result<(LinearFit, SolveReport)> {
    let n = x.ncols();
    if cfg.fit_intercept {
        let (xc, uc, means, um) = center(x, u);
        let prob = QuadraticProblem::new(n).with_data_fit(&xc, &uc).with_ridge(l1).with_graph(&g.quadratic, l2);
        let rep = solve_quadratic(&prob, &cfg.solver)?;
        let intercept = intercept_of(&means, um, &rep.beta);
        Ok((LinearFit { coef: rep.beta.clone(), intercept }, rep))
    } else {
        let prob = QuadraticProblem::new(n).with_data_fit(x, u).with_ridge(l1).with_graph(&g.quadratic, l2);
        let rep = solve_quadratic(&prob, &cfg.solver)?;
        Ok((LinearFit { coef: rep.beta.clone(), intercept: 0.0 }, rep))
    }
}

/// Ridge plus signed-graph regression on the design matrix.
pub fn gloc(dm: &DesignMatrix, g: &SimilarityGraph, cfg: &GlocConfig) -> Result<ValueVector> {
    if g.ids != dm.ids {
        return Err(Error::IdMismatch("graph nodes and design-matrix columns differ".into()));
    }
    let check = |l: f64| {
        if l >= 0.0 && l.is_finite() {
            Ok(l)
        } else {
            Err(Error::invalid("lambda must be finite and nonnegative"))
        }
    };
    let l1_grid = match cfg.lambda1 {
        Some(l) => vec![check(l)?],
        None => cfg.grid.clone(),
    };
    let l2_grid = match cfg.lambda2 {
        Some(l) => vec![check(l)?],
        None => cfg.grid.clone(),
    };
    let pairs: Vec<(f64, f64)> = l1_grid.iter().flat_map(|&a| l2_grid.iter().map(move |&b| (a, b))).collect();
    let cv = if pairs.len() > 1 {
        Some(cross_validate_regression(&pairs, cfg.folds, &dm.x, &dm.u, |x, u, &(a, b)| Ok(fit_gloc(x, u, g, a, b, cfg)?.0))?)
    } else if pairs.is_empty() {
        return Err(Error::EmptyGrid);
    } else {
        None
    };
    let (l1, l2) = cv.as_ref().map(|c| c.best).unwrap_or(pairs[0]);
    let (fit, rep) = fit_gloc(&dm.x, &dm.u, g, l1, l2, cfg)?;
    let scale = dm.encoding_scale();
    let mut v = ValueVector::new(fit.coef.iter().map(|b| scale * b).collect(), "gloc", dm.ids.clone())?;
    v.set_param("lambda1", l1);
    v.set_param("lambda2", l2);
    v.set_param("lambda_selection", if cv.is_some() { "cv" } else { "given" });
    if let Some(c) = &cv {
        v.set_param("cv_folds", cfg.folds);
        v.set_param("cv_grid", &pairs);
        v.set_param("cv_errors", &c.errors);
    }
    v.set_param("k", g.k);
    v.set_param("metric", g.metric);
    v.set_param("fit_intercept", cfg.fit_intercept);
    v.set_param("intercept", fit.intercept);
    v.set_param("solver", solve_summary(&rep, &cfg.solver));
    design_provenance(&mut v, dm);
    Ok(v)
}

pub(crate) fn solve_summary(rep: &SolveReport, opts: &SolverOptions) -> Value {
    json!({
        "conditioning": rep.conditioning,
        "damping": rep.damping,
        "grad_norm": rep.grad_norm,
        "initial_grad_norm": rep.initial_grad_norm,
        "iterations": rep.iterations,
        "objective": rep.objective,
        "tol": opts.tol,
        "direct_max_n": opts.direct_max_n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub solver: SolverOptions,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { eta1: 1e-2, eta2: 5.0, solver: SolverOptions::default() }
    }
}

/// Smooths `base` over the graph: minimizes
/// `b^T L b + eta1 |b|^2 + eta2 sum_i (base_i - b_i)^2` starting from `base`.
pub fn refine(base: &ValueVector, g: &SimilarityGraph, cfg: &RefineConfig) -> Result<ValueVector> {
    if g.ids != base.ids {
        return Err(Error::IdMismatch("graph nodes and base values differ".into()));
    }
    let n = base.len();
    let weights = vec![1.0; n];
    let prob = QuadraticProblem::new(n)
        .with_ridge(cfg.eta1)
        .with_graph(&g.quadratic, 1.0)
        .with_anchor(Anchor { target: &base.values, weights: &weights, strength: cfg.eta2 })
        .with_init(base.values.clone());
    let rep = solve_quadratic(&prob, &cfg.solver)?;
    let mut v = ValueVector::new(rep.beta.clone(), format!("refined:{}", base.method), base.ids.clone())?;
    v.set_param("eta1", cfg.eta1);
    v.set_param("eta2", cfg.eta2);
    v.set_param("k", g.k);
    v.set_param("metric", g.metric);
    v.set_param("solver", solve_summary(&rep, &cfg.solver));
    v.set_param("base_method", &base.method);
    v.set_param("base_hyperparams", &base.hyperparams);
    Ok(v)
}
