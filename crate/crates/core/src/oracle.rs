//! Shapley baselines: exact enumeration, Monte-Carlo and truncated
//! Monte-Carlo permutation sampling, and the large-M least-squares ground truth.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{subset_utility, ModelConfig};
use crate::par;
use crate::rng::stream_rng;
use crate::sampling::{build_design_matrix_on, DesignMatrix, SamplingConfig, DEFAULT_P_SUPPORT};
use crate::solver::{solve_quadratic, QuadraticProblem, SolverOptions};
use crate::valuation::ValueVector;

pub const EXACT_CAP: usize = 20;
const MEMO_MAX_N: usize = 64;

/// Utility of a subset of players `0..n`, given as sorted indices.
pub trait UtilityFunction: Sync {
    fn n(&self) -> usize;
    fn eval(&self, subset: &[usize]) -> Result<f64>;
}

/// Wraps a closure.
pub struct FnUtility<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> f64 + Sync> FnUtility<F> {
    pub fn new(n: usize, f: F) -> Self {
        FnUtility { n, f }
    }
}

impl<F: Fn(&[usize]) -> f64 + Sync> UtilityFunction for FnUtility<F> {
    fn n(&self) -> usize {
        self.n
    }
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        Ok((self.f)(subset))
    }
}

/// Counts calls that reach the inner utility.
pub struct CountingUtility<U> {
    inner: U,
    calls: AtomicU64,
}

impl<U: UtilityFunction> CountingUtility<U> {
    pub fn new(inner: U) -> Self {
        CountingUtility { inner, calls: AtomicU64::new(0) }
    }
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
    pub fn into_inner(self) -> U {
        self.inner
    }
}

impl<U: UtilityFunction> UtilityFunction for CountingUtility<U> {
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(subset)
    }
}

/// Caches utilities by subset bitmask; only active for `n <= 64`.
pub struct Memoized<U> {
    inner: U,
    cache: Mutex<HashMap<u64, f64>>,
}

impl<U: UtilityFunction> Memoized<U> {
    pub fn new(inner: U) -> Self {
        Memoized { inner, cache: Mutex::new(HashMap::new()) }
    }
    pub fn inner(&self) -> &U {
        &self.inner
    }
    pub fn cached(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

impl<U: UtilityFunction> UtilityFunction for Memoized<U> {
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        if self.inner.n() > MEMO_MAX_N {
            return self.inner.eval(subset);
        }
        let key = subset.iter().fold(0u64, |k, &i| k | (1u64 << i));
        if let Some(v) = self.cache.lock().ok().and_then(|c| c.get(&key).copied()) {
            return Ok(v);
        }
        let v = self.inner.eval(subset)?;
        if let Ok(mut c) = self.cache.lock() {
            c.insert(key, v);
        }
        Ok(v)
    }
}

/// Accuracy of the utility model trained on a subset of the train split.
pub struct ModelUtility<'a> {
    data: &'a Dataset,
    train: Vec<usize>,
    eval: Vec<usize>,
    cfg: ModelConfig,
}

impl<'a> ModelUtility<'a> {
    pub fn new(data: &'a Dataset, eval_split: Split, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let eval = data.split_indices(eval_split);
        if eval.is_empty() {
            return Err(Error::InsufficientData(format!("no {eval_split} rows to score on")));
        }
        Ok(ModelUtility { data, train: data.split_indices(Split::Train), eval, cfg })
    }

    /// Dataset ids of the players.
    pub fn ids(&self) -> Vec<u64> {
        self.train.iter().map(|&r| self.data.ids()[r]).collect()
    }
}

impl UtilityFunction for ModelUtility<'_> {
    fn n(&self) -> usize {
        self.train.len()
    }
    fn eval(&self, subset: &[usize]) -> Result<f64> {
        let rows: Vec<usize> = subset.iter().map(|&i| self.train[i]).collect();
        subset_utility(self.data, &rows, &self.eval, &self.cfg)
    }
}

fn check_ids(n: usize, ids: &[u64]) -> Result<()> {
    if ids.len() != n {
        return Err(Error::dims(format!("{} ids for {n} players", ids.len())));
    }
    Ok(())
}

/// Enumerates all `2^N` subsets. Refuses `N > 20`.
pub fn exact_shapley<U: UtilityFunction + ?Sized>(u: &U, ids: &[u64]) -> Result<ValueVector> {
    let n = u.n();
    check_ids(n, ids)?;
    if n > EXACT_CAP {
        return Err(Error::TooLarge { n, cap: EXACT_CAP, evaluations: 2f64.powi(n as i32) });
    }
    let table = par::try_map_range(1usize << n, |mask| {
        let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        u.eval(&s)
    })?;
    // weight(s) = s! (N - s - 1)! / N! = 1 / (N * C(N - 1, s))
    let mut binom = vec![1.0f64; n.max(1)];
    for s in 1..n {
        binom[s] = binom[s - 1] * (n - s) as f64 / s as f64;
    }
    let weight: Vec<f64> = binom.iter().map(|c| 1.0 / (n as f64 * c)).collect();
    let values = par::map_range(n, |i| {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for mask in 0..(1usize << n) {
            if mask & bit == 0 {
                acc += weight[mask.count_ones() as usize] * (table[mask | bit] - table[mask]);
            }
        }
        acc
    });
    Ok(ValueVector::new(values, "exact", ids.to_vec())?.with_param("n", n))
}

/// Average marginal contribution over the given orderings.
pub fn shapley_from_permutations<U: UtilityFunction + ?Sized>(u: &U, perms: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n = u.n();
    if perms.is_empty() {
        return Err(Error::invalid("need at least one permutation"));
    }
    let empty = u.eval(&[])?;
    let mut sum = vec![0.0; n];
    for p in perms {
        if p.len() != n {
            return Err(Error::dims("permutation length differs from N"));
        }
        let m = walk(u, p, empty, None)?;
        sum.iter_mut().zip(m).for_each(|(s, v)| *s += v);
    }
    Ok(sum.into_iter().map(|s| s / perms.len() as f64).collect())
}

/// Marginal contributions along one ordering. With `trunc = Some((tol, full))`
/// a player's marginal is 0 once the running utility is within `tol` of `full`.
fn walk<U: UtilityFunction + ?Sized>(u: &U, perm: &[usize], empty: f64, trunc: Option<(f64, f64)>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; perm.len()];
    let mut members: Vec<usize> = Vec::with_capacity(perm.len());
    let mut prev = empty;
    for &i in perm {
        if let Some((tol, full)) = trunc {
            if (full - prev).abs() < tol {
                break;
            }
        }
        let pos = members.partition_point(|&x| x < i);
        members.insert(pos, i);
        let cur = u.eval(&members)?;
        out[i] = cur - prev;
        prev = cur;
    }
    Ok(out)
}

const PERM_CHUNK: usize = 32;

fn permutation_estimate<U: UtilityFunction + ?Sized>(u: &U, n_perm: usize, seed: u64, trunc_tol: Option<f64>) -> Result<Vec<f64>> {
    let n = u.n();
    if n_perm == 0 {
        return Err(Error::invalid("n_permutations must be at least 1"));
    }
    let empty = u.eval(&[])?;
    let trunc = match trunc_tol {
        Some(t) => Some((t, u.eval(&(0..n).collect::<Vec<_>>())?)),
        None => None,
    };
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let sum = par::chunked_vec_sum(n_perm, PERM_CHUNK, n, |start, end| {
        let mut acc = vec![0.0; n];
        for t in start..end {
            let mut rng = stream_rng(seed, t as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            match walk(u, &perm, empty, trunc) {
                Ok(m) => acc.iter_mut().zip(m).for_each(|(a, v)| *a += v),
                Err(e) => {
                    if let Ok(mut f) = failure.lock() {
                        f.get_or_insert(e);
                    }
                }
            }
        }
        acc
    });
    if let Some(e) = failure.into_inner().ok().flatten() {
        return Err(e);
    }
    Ok(sum.into_iter().map(|s| s / n_perm as f64).collect())
}

/// Monte-Carlo permutation estimate; permutation `t` is drawn from its own stream of `seed`.
pub fn mc_shapley<U: UtilityFunction + ?Sized>(u: &U, ids: &[u64], n_permutations: usize, seed: u64) -> Result<ValueVector> {
    check_ids(u.n(), ids)?;
    let v = permutation_estimate(u, n_permutations, seed, None)?;
    Ok(ValueVector::new(v, "mc", ids.to_vec())?.with_param("n_permutations", n_permutations).with_param("seed", seed))
}

/// Truncated Monte-Carlo: same permutations as [`mc_shapley`] for the same seed.
pub fn tmc_shapley<U: UtilityFunction + ?Sized>(u: &U, ids: &[u64], n_permutations: usize, trunc_tol: f64, seed: u64) -> Result<ValueVector> {
    check_ids(u.n(), ids)?;
    if trunc_tol.is_nan() || trunc_tol < 0.0 {
        return Err(Error::invalid("trunc_tol must be nonnegative"));
    }
    let v = permutation_estimate(u, n_permutations, seed, Some(trunc_tol))?;
    Ok(ValueVector::new(v, "tmc", ids.to_vec())?
        .with_param("n_permutations", n_permutations)
        .with_param("trunc_tol", if trunc_tol.is_finite() { serde_json::json!(trunc_tol) } else { serde_json::json!("inf") })
        .with_param("seed", seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthConfig {
    /// Sampled subsets per training sample.
    pub multiplier: usize,
    pub p_support: Vec<f64>,
    pub seed: u64,
    pub fit_intercept: bool,
    pub solver: SolverOptions,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig { multiplier: 10, p_support: DEFAULT_P_SUPPORT.to_vec(), seed: 0, fit_intercept: true, solver: SolverOptions::default() }
    }
}

/// Unpenalized least squares on a design matrix with `M = multiplier * N` rows.
pub fn ame_ground_truth(data: &Dataset, model_cfg: &ModelConfig, cfg: &GroundTruthConfig) -> Result<ValueVector> {
    if cfg.multiplier == 0 {
        return Err(Error::invalid("ground-truth multiplier must be at least 1"));
    }
    let n = data.split_indices(Split::Train).len();
    let sampling = SamplingConfig { m: n * cfg.multiplier, p_support: cfg.p_support.clone(), seed: cfg.seed };
    let dm = build_design_matrix_on(data, &sampling, model_cfg, Split::Valid)?;
    let mut v = ground_truth_from_design(&dm, cfg)?;
    v.set_param("multiplier", cfg.multiplier);
    Ok(v)
}

/// Least-squares values from an existing design matrix.
pub fn ground_truth_from_design(dm: &DesignMatrix, cfg: &GroundTruthConfig) -> Result<ValueVector> {
    let n = dm.n_samples();
    let (x, u, means, um) = if cfg.fit_intercept {
        let m = dm.n_rows() as f64;
        let means: Vec<f64> = dm.x.column_iter().map(|c| c.sum() / m).collect();
        let xc = nalgebra::DMatrix::from_fn(dm.n_rows(), n, |r, c| dm.x[(r, c)] - means[c]);
        let um = dm.u.sum() / m;
        (xc, dm.u.add_scalar(-um), means, um)
    } else {
        (dm.x.clone(), dm.u.clone(), vec![0.0; n], 0.0)
    };
    let rep = solve_quadratic(&QuadraticProblem::new(n).with_data_fit(&x, &u), &cfg.solver)?;
    let intercept = um - means.iter().zip(&rep.beta).map(|(a, b)| a * b).sum::<f64>();
    let scale = dm.encoding_scale();
    let mut v = ValueVector::new(rep.beta.iter().map(|b| scale * b).collect(), "exact-proxy", dm.ids.clone())?;
    v.set_param("m", dm.n_rows());
    v.set_param("p_support", &dm.sampling.p_support);
    v.set_param("sampling_seed", dm.sampling.seed);
    v.set_param("model", &dm.model);
    v.set_param("value_scale", scale);
    v.set_param("fit_intercept", cfg.fit_intercept);
    v.set_param("intercept", intercept);
    v.set_param("solver", crate::valuation::solve_summary(&rep, &cfg.solver));
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<u64> {
        (0..n as u64).collect()
    }

    fn random_game(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::rng_from(seed);
        (0..1usize << n).map(|_| rng.random::<f64>()).collect()
    }

    fn table_game(n: usize, table: Vec<f64>) -> FnUtility<impl Fn(&[usize]) -> f64 + Sync> {
        FnUtility::new(n, move |s: &[usize]| table[s.iter().fold(0usize, |m, &i| m | 1 << i)])
    }

    #[test]
    fn additive_game() {
        let c = [0.3, -0.1, 0.5, 0.0, 0.2];
        let u = FnUtility::new(5, |s: &[usize]| s.iter().map(|&i| c[i]).sum());
        let v = exact_shapley(&u, &ids(5)).unwrap();
        for i in 0..5 {
            assert!((v.values[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn majority_game() {
        let u = FnUtility::new(3, |s: &[usize]| if s.len() >= 2 { 1.0 } else { 0.0 });
        let v = exact_shapley(&u, &ids(3)).unwrap();
        for x in v.values {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dummy_player_and_efficiency() {
        let mut t = random_game(6, 1);
        for m in 0..64usize {
            if m & 0b100 != 0 {
                t[m] = t[m & !0b100];
            }
        }
        let (full, empty) = (t[63], t[0]);
        let u = table_game(6, t);
        let v = exact_shapley(&u, &ids(6)).unwrap();
        assert_eq!(v.values[2], 0.0);
        assert!((v.values.iter().sum::<f64>() - (full - empty)).abs() < 1e-12);
        let mc = mc_shapley(&u, &ids(6), 50, 3).unwrap();
        assert_eq!(mc.values[2], 0.0);
    }

    #[test]
    fn refuses_large_n() {
        let u = FnUtility::new(21, |_: &[usize]| 0.0);
        assert!(matches!(exact_shapley(&u, &ids(21)), Err(Error::TooLarge { n: 21, .. })));
    }

    #[test]
    fn all_permutations_equal_exact() {
        let t = random_game(4, 7);
        let u = table_game(4, t);
        let mut perms = Vec::new();
        let mut p = vec![0, 1, 2, 3];
        permute(&mut p, 0, &mut perms);
        assert_eq!(perms.len(), 24);
        let avg = shapley_from_permutations(&u, &perms).unwrap();
        let ex = exact_shapley(&u, &ids(4)).unwrap();
        for i in 0..4 {
            assert!((avg[i] - ex.values[i]).abs() < 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, out);
            p.swap(k, i);
        }
    }

    #[test]
    fn tmc_limits() {
        let u = table_game(6, random_game(6, 9));
        let mc = mc_shapley(&u, &ids(6), 40, 5).unwrap();
        let t0 = tmc_shapley(&u, &ids(6), 40, 0.0, 5).unwrap();
        assert_eq!(mc.values, t0.values);
        let tinf = tmc_shapley(&u, &ids(6), 40, f64::INFINITY, 5).unwrap();
        assert!(tinf.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tmc_uses_fewer_calls() {
        // Saturating game: utility reaches its maximum after three players.
        let game = |s: &[usize]| (s.len().min(3) as f64) / 3.0;
        let mc_u = CountingUtility::new(FnUtility::new(8, game));
        mc_shapley(&mc_u, &ids(8), 200, 1).unwrap();
        let tmc_u = CountingUtility::new(FnUtility::new(8, game));
        tmc_shapley(&tmc_u, &ids(8), 200, 1e-3, 1).unwrap();
        assert!(tmc_u.calls() < mc_u.calls());
    }

    #[test]
    fn memo_does_not_change_results() {
        let t = random_game(5, 11);
        let plain = CountingUtility::new(table_game(5, t.clone()));
        let memo = Memoized::new(CountingUtility::new(table_game(5, t)));
        let a = mc_shapley(&plain, &ids(5), 300, 2).unwrap();
        let b = mc_shapley(&memo, &ids(5), 300, 2).unwrap();
        assert_eq!(a.values, b.values);
        assert!(memo.inner().calls() <= 32);
        assert!(plain.calls() > 32);
    }

    #[test]
    fn mc_is_worker_independent() {
        let u = table_game(7, random_game(7, 13));
        let a = mc_shapley(&u, &ids(7), 500, 4).unwrap();
        let b = par::sequential(|| mc_shapley(&u, &ids(7), 500, 4)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn ground_truth_recovers_additive() {
        use crate::sampling::sample_memberships;
        let c: Vec<f64> = (0..12).map(|i| 0.01 * (i % 4) as f64 - 0.01).collect();
        let cfg = SamplingConfig { m: 120, seed: 8, ..Default::default() };
        let (mem, p) = sample_memberships(12, &cfg).unwrap();
        let u: Vec<f64> = (0..120).map(|r| 0.5 + mem.row_members(r).iter().map(|&i| c[i]).sum::<f64>()).collect();
        let dm = DesignMatrix::from_parts(mem, p, u, ids(12), cfg, ModelConfig::default()).unwrap();
        let v = ground_truth_from_design(&dm, &GroundTruthConfig::default()).unwrap();
        assert_eq!(v.method, "exact-proxy");
        for i in 0..12 {
            assert!((v.values[i] - c[i]).abs() < 0.05);
        }
    }
}
