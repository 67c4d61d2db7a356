//! Metrics against ground truth, mislabel detection by 1-D 2-means, value-ordered
//! addition/removal curves, and wall-clock timing.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NoiseMask, Split};
use crate::error::{Error, Result};
use crate::model::{subset_utility, ModelConfig};
use crate::par;
use crate::rng::rng_from;
use crate::valuation::ValueVector;

/// Pairs `a`'s values with `b`'s by id, in `a`'s order.
pub fn align(a: &ValueVector, b: &ValueVector) -> Result<Vec<(f64, f64)>> {
    if a.len() != b.len() {
        return Err(Error::IdMismatch(format!("{} values vs {}", a.len(), b.len())));
    }
    let map = b.id_map();
    a.ids
        .iter()
        .zip(&a.values)
        .map(|(id, &va)| map.get(id).map(|&vb| (va, vb)).ok_or_else(|| Error::IdMismatch(format!("id {id} missing from `{}`", b.method))))
        .collect()
}

fn nonempty(pairs: &[(f64, f64)]) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

pub fn mse(sv: &ValueVector, beta: &ValueVector) -> Result<f64> {
    let p = align(sv, beta)?;
    nonempty(&p)?;
    Ok(p.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

pub fn mae(sv: &ValueVector, beta: &ValueVector) -> Result<f64> {
    let p = align(sv, beta)?;
    nonempty(&p)?;
    Ok(p.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman rank correlation; 0 (with a warning) when either side is all ties.
pub fn spearman(sv: &ValueVector, beta: &ValueVector) -> Result<f64> {
    let p = align(sv, beta)?;
    nonempty(&p)?;
    let (a, b): (Vec<f64>, Vec<f64>) = p.into_iter().unzip();
    match pearson(&average_ranks(&a), &average_ranks(&b)) {
        Some(r) => Ok(r),
        None => {
            log::warn!("spearman: `{}` or `{}` is constant; reporting 0", sv.method, beta.method);
            Ok(0.0)
        }
    }
}

/// Comparison of two value vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mse: f64,
    pub mae: f64,
    pub spearman: f64,
}

pub fn compare(a: &ValueVector, b: &ValueVector) -> Result<Comparison> {
    Ok(Comparison { mse: mse(a, b)?, mae: mae(a, b)?, spearman: spearman(a, b)? })
}

/// Optimal 1-D 2-means split of `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoMeans {
    /// Values `<= threshold` form the low cluster.
    pub threshold: f64,
    pub low_mean: f64,
    pub high_mean: f64,
    pub sse: f64,
}

/// Exact 1-D 2-means: scans every split of the sorted values, never splitting
/// equal values apart. Errors when all values are equal.
pub fn two_means_1d(v: &[f64]) -> Result<TwoMeans> {
    if v.len() < 2 {
        return Err(Error::InsufficientData("2-means needs at least two values".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut pre = vec![0.0; n + 1];
    let mut pre2 = vec![0.0; n + 1];
    for (i, x) in s.iter().enumerate() {
        pre[i + 1] = pre[i] + x;
        pre2[i + 1] = pre2[i] + x * x;
    }
    let sse = |a: usize, b: usize| {
        let cnt = (b - a) as f64;
        let sum = pre[b] - pre[a];
        (pre2[b] - pre2[a] - sum * sum / cnt).max(0.0)
    };
    let mut best: Option<(f64, usize)> = None;
    for k in 1..n {
        if s[k - 1] == s[k] {
            continue;
        }
        let e = sse(0, k) + sse(k, n);
        if best.is_none_or(|(b, _)| e < b) {
            best = Some((e, k));
        }
    }
    let (e, k) = best.ok_or_else(|| Error::Degenerate("all values are equal; 2-means is undefined".into()))?;
    Ok(TwoMeans { threshold: s[k - 1], low_mean: pre[k] / k as f64, high_mean: (pre[n] - pre[k]) / (n - k) as f64, sse: e })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub ids: Vec<u64>,
    /// True for samples in the low-value cluster.
    pub flags: Vec<bool>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Low and high cluster means.
    pub cluster_means: [f64; 2],
}

/// F1 with flipped labels as the positive class.
pub fn f1_score(predicted: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = predicted.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = predicted.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fnn = predicted.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

/// Flags the lower-mean 2-means cluster of `beta` and scores it against `mask`.
pub fn detect_mislabeled(beta: &ValueVector, mask: &NoiseMask) -> Result<DetectionResult> {
    let truth: HashMap<u64, bool> = mask.ids.iter().copied().zip(mask.flags.iter().copied()).collect();
    let aligned: Vec<bool> = beta
        .ids
        .iter()
        .map(|id| truth.get(id).copied().ok_or_else(|| Error::IdMismatch(format!("id {id} missing from noise mask"))))
        .collect::<Result<_>>()?;
    let tm = two_means_1d(&beta.values)?;
    let flags: Vec<bool> = beta.values.iter().map(|&v| v <= tm.threshold).collect();
    let (precision, recall, f1) = f1_score(&flags, &aligned);
    Ok(DetectionResult { ids: beta.ids.clone(), flags, precision, recall, f1, cluster_means: [tm.low_mean, tm.high_mean] })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    RemoveDesc,
    RemoveAsc,
    AddAsc,
    AddDesc,
    /// Removal in a seeded random order.
    Random,
}

impl Direction {
    pub const ALL: [Direction; 5] = [Direction::RemoveDesc, Direction::AddAsc, Direction::RemoveAsc, Direction::AddDesc, Direction::Random];

    fn is_removal(self) -> bool {
        matches!(self, Direction::RemoveDesc | Direction::RemoveAsc | Direction::Random)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::RemoveDesc => "remove-desc",
            Direction::RemoveAsc => "remove-asc",
            Direction::AddAsc => "add-asc",
            Direction::AddDesc => "add-desc",
            Direction::Random => "random",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL.into_iter().find(|d| d.to_string() == s).ok_or_else(|| Error::invalid(format!("unknown curve direction `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub step_fraction: f64,
    /// Last fraction processed.
    pub max_fraction: f64,
    pub eval_split: Split,
    /// Seed of the random order.
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { step_fraction: 0.05, max_fraction: 0.5, eval_split: Split::Test, seed: 0, model: ModelConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub accuracy: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub direction: Direction,
    pub points: Vec<CurvePoint>,
    /// Set when the train set ran out before `max_fraction`.
    pub terminated_early: bool,
}

impl Curve {
    /// Accuracy at the point closest to `fraction`.
    pub fn accuracy_at(&self, fraction: f64) -> Option<f64> {
        self.points.iter().min_by(|a, b| (a.fraction - fraction).abs().total_cmp(&(b.fraction - fraction).abs())).map(|p| p.accuracy)
    }

    /// `direction,fraction,accuracy` table.
    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        write_curves(&[self], w)
    }
}

pub fn write_curves<W: Write>(curves: &[&Curve], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["direction", "fraction", "accuracy"])?;
    for c in curves {
        for p in &c.points {
            wr.write_record([p.direction.to_string(), p.fraction.to_string(), p.accuracy.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Train rows ordered for `direction`: by value (ties by ascending id) or by a seeded shuffle.
fn ordering(data: &Dataset, beta: &ValueVector, direction: Direction, seed: u64) -> Result<Vec<usize>> {
    let train = data.split_indices(Split::Train);
    let values = beta.id_map();
    let mut keyed: Vec<(f64, u64, usize)> = train
        .iter()
        .map(|&r| {
            let id = data.ids()[r];
            values.get(&id).map(|&v| (v, id, r)).ok_or_else(|| Error::IdMismatch(format!("train id {id} has no value")))
        })
        .collect::<Result<_>>()?;
    if keyed.len() != beta.len() {
        return Err(Error::IdMismatch("value vector covers ids outside the train split".into()));
    }
    match direction {
        Direction::RemoveDesc | Direction::AddDesc => keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))),
        Direction::RemoveAsc | Direction::AddAsc => keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))),
        Direction::Random => {
            keyed.sort_by_key(|k| k.1);
            keyed.shuffle(&mut rng_from(seed));
        }
    }
    Ok(keyed.into_iter().map(|k| k.2).collect())
}

/// Retrains on a shrinking (removal) or growing (addition) train set and records
/// accuracy on `cfg.eval_split` after every step.
pub fn value_curve(data: &Dataset, beta: &ValueVector, direction: Direction, cfg: &CurveConfig) -> Result<Curve> {
    if !(cfg.step_fraction > 0.0 && cfg.step_fraction <= 0.5) {
        return Err(Error::invalid("step_fraction must lie in (0, 0.5]"));
    }
    if !(cfg.max_fraction > 0.0 && cfg.max_fraction <= 1.0) {
        return Err(Error::invalid("max_fraction must lie in (0, 1]"));
    }
    let order = ordering(data, beta, direction, cfg.seed)?;
    let eval = data.split_indices(cfg.eval_split);
    if eval.is_empty() {
        return Err(Error::InsufficientData(format!("no {} rows to evaluate curves on", cfg.eval_split)));
    }
    let n = order.len();
    let first = if direction.is_removal() { 0 } else { 1 };
    let steps = (cfg.max_fraction / cfg.step_fraction + 1e-9).floor() as usize;
    let mut plan = Vec::new();
    let mut terminated_early = false;
    for s in first..=steps {
        let fraction = s as f64 * cfg.step_fraction;
        let k = (fraction * n as f64).round() as usize;
        let rows: Vec<usize> = if direction.is_removal() { order[k.min(n)..].to_vec() } else { order[..k.min(n)].to_vec() };
        if rows.is_empty() {
            terminated_early = true;
            break;
        }
        plan.push((fraction, rows));
    }
    let acc = par::try_map_range(plan.len(), |i| subset_utility(data, &plan[i].1, &eval, &cfg.model))?;
    let points = plan.iter().zip(acc).map(|((fraction, _), accuracy)| CurvePoint { fraction: *fraction, accuracy, direction }).collect();
    Ok(Curve { direction, points, terminated_early })
}

/// Min/median/max wall-clock seconds over timed runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub runs: usize,
    pub warmup: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

/// Runs `f` `warmup` times untimed, then `runs` times timed. Returns the last result.
pub fn stopwatch<T>(warmup: usize, runs: usize, mut f: impl FnMut() -> T) -> (T, TimingReport) {
    for _ in 0..warmup {
        f();
    }
    let runs = runs.max(1);
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for _ in 0..runs {
        let t = Instant::now();
        let out = f();
        times.push(t.elapsed().as_secs_f64());
        last = Some(out);
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 { times[runs / 2] } else { 0.5 * (times[runs / 2 - 1] + times[runs / 2]) };
    let report = TimingReport { runs, warmup, min: times[0], median, max: times[runs - 1] };
    (last.expect("at least one run"), report)
}
