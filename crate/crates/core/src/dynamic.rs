//! Value updates after adding or removing training samples, driven by the
//! neighbourhood graph and the stored values alone: no subsets are resampled
//! and no utility model is retrained.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{neighborhood_change_ratio, GraphConfig, SimilarityGraph};
use crate::solver::{cross_validate, solve_quadratic, Anchor, Conditioning, QuadraticProblem, SolveReport, SolverOptions};
use crate::valuation::{solve_summary, ValueVector};

/// Stored per-sample values of a prior run, keyed by dataset id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueStore {
    pub values: BTreeMap<u64, f64>,
    pub method: String,
    pub hyperparams: BTreeMap<String, Value>,
    /// Digest of the dataset whose train split was valued.
    pub dataset_digest: String,
}

impl ValueStore {
    pub fn new(v: &ValueVector, dataset: &Dataset) -> Result<Self> {
        let store = ValueStore {
            values: v.ids.iter().copied().zip(v.values.iter().copied()).collect(),
            method: v.method.clone(),
            hyperparams: v.hyperparams.clone(),
            dataset_digest: dataset.digest(),
        };
        store.check(dataset)?;
        Ok(store)
    }

    /// The store must come from `dataset` and cover exactly its train split.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        if self.dataset_digest != dataset.digest() {
            return Err(Error::Provenance(format!("value store was computed on dataset {}, not {}", self.dataset_digest, dataset.digest())));
        }
        let train: HashSet<u64> = dataset.split_indices(Split::Train).iter().map(|&r| dataset.ids()[r]).collect();
        if train.len() != self.values.len() || self.values.keys().any(|id| !train.contains(id)) {
            return Err(Error::Provenance("value store ids differ from the dataset's train split".into()));
        }
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.values.get(&id).copied()
    }

    pub fn mean(&self) -> f64 {
        self.values.values().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn to_value_vector(&self) -> Result<ValueVector> {
        let mut v = ValueVector::new(self.values.values().copied().collect(), self.method.clone(), self.values.keys().copied().collect())?;
        v.hyperparams = self.hyperparams.clone();
        Ok(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Writes to a sibling temporary file, then renames it over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_json()?.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Add,
    Remove,
}

/// Per-sample bounds on how far a value may move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBounds {
    pub eps: Vec<f64>,
    pub mean: f64,
    pub eps0: f64,
    pub size_ratio: f64,
    pub r: Vec<f64>,
}

/// `eps_i = size_ratio * (1 + r_i) * eps0`, where `size_ratio` is `n_new / n_old`
/// for additions and `n_old / n_new` for removals.
pub fn epsilon_bounds(kind: UpdateKind, n_old: usize, n_new: usize, r: &[f64], eps0: f64) -> Result<EpsilonBounds> {
    if n_old == 0 || n_new == 0 {
        return Err(Error::invalid("dataset sizes must be positive"));
    }
    if !(eps0 > 0.0 && eps0.is_finite()) {
        return Err(Error::invalid("eps0 must be positive"));
    }
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid("neighbourhood change ratios must lie in [0, 1]"));
    }
    if r.is_empty() {
        return Err(Error::InsufficientData("no anchored samples".into()));
    }
    let size_ratio = match kind {
        UpdateKind::Add => n_new as f64 / n_old as f64,
        UpdateKind::Remove => n_old as f64 / n_new as f64,
    };
    let eps: Vec<f64> = r.iter().map(|ri| size_ratio * (1.0 + ri) * eps0).collect();
    let mean = eps.iter().sum::<f64>() / eps.len() as f64;
    Ok(EpsilonBounds { eps, mean, eps0, size_ratio, r: r.to_vec() })
}

/// Initial values for new nodes: the weighted average of their positive-weight
/// old neighbours' values, or `fallback` when there are none.
pub fn init_added_values(g: &SimilarityGraph, new_nodes: &[usize], old_values: &HashMap<usize, f64>, fallback: f64) -> Vec<f64> {
    new_nodes
        .iter()
        .map(|&i| {
            let (mut num, mut den) = (0.0, 0.0);
            for (&j, &s) in g.neighbors[i].iter().zip(&g.weights[i]) {
                if s > 0.0 {
                    if let Some(&b) = old_values.get(&j) {
                        num += s * b;
                        den += s;
                    }
                }
            }
            if den > 0.0 {
                num / den
            } else {
                fallback
            }
        })
        .collect()
}

pub const ETA1_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];
pub const ETA2_GRID: [f64; 3] = [1.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicConfig {
    /// Fixed knobs; when either is absent and `cv` is set, it is chosen by CV.
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub eta1_grid: Vec<f64>,
    pub eta2_grid: Vec<f64>,
    pub cv: bool,
    pub folds: usize,
    pub eps0: f64,
    pub graph: GraphConfig,
    pub solver: SolverOptions,
}

pub const DEFAULT_ETA1: f64 = 1e-2;
pub const DEFAULT_ETA2: f64 = 5.0;

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            eta1: None,
            eta2: None,
            eta1_grid: ETA1_GRID.to_vec(),
            eta2_grid: ETA2_GRID.to_vec(),
            cv: true,
            folds: 5,
            eps0: 1.0,
            graph: GraphConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DynamicOutcome {
    pub values: ValueVector,
    pub eps: EpsilonBounds,
    /// Fraction of anchored samples with `|b_cur - b| > eps`.
    pub violation_fraction: f64,
    pub conditioning: Conditioning,
}

/// Problem data shared by the add and remove paths.
struct Update<'a> {
    graph: &'a SimilarityGraph,
    anchor_target: Vec<f64>,
    anchor_nodes: Vec<usize>,
    eps: &'a EpsilonBounds,
    init: Vec<f64>,
}

impl Update<'_> {
    fn solve(&self, eta1: f64, eta2: f64, drop: &[bool], solver: &SolverOptions) -> Result<SolveReport> {
        let n = self.graph.n();
        let mut weights = vec![0.0; n];
        for (a, &node) in self.anchor_nodes.iter().enumerate() {
            if !drop[a] {
                weights[node] = self.eps.eps[a] / self.eps.mean;
            }
        }
        let prob = QuadraticProblem::new(n)
            .with_ridge(eta1)
            .with_graph(&self.graph.quadratic, 1.0)
            .with_anchor(Anchor { target: &self.anchor_target, weights: &weights, strength: eta2 })
            .with_init(self.init.clone());
        solve_quadratic(&prob, solver)
    }

    /// Chooses `(eta1, eta2)`; CV holds out a fold of anchors and scores how well
    /// the solution reconstructs their stored values.
    fn select(&self, cfg: &DynamicConfig) -> Result<((f64, f64), Option<(Vec<(f64, f64)>, Vec<f64>)>)> {
        let g1 = match cfg.eta1 {
            Some(e) => vec![e],
            None if cfg.cv => cfg.eta1_grid.clone(),
            None => vec![DEFAULT_ETA1],
        };
        let g2 = match cfg.eta2 {
            Some(e) => vec![e],
            None if cfg.cv => cfg.eta2_grid.clone(),
            None => vec![DEFAULT_ETA2],
        };
        for e in g1.iter().chain(&g2) {
            if !(*e >= 0.0 && e.is_finite()) {
                return Err(Error::invalid("eta values must be finite and nonnegative"));
            }
        }
        let grid: Vec<(f64, f64)> = g1.iter().flat_map(|&a| g2.iter().map(move |&b| (a, b))).collect();
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if grid.len() == 1 {
            return Ok((grid[0], None));
        }
        let na = self.anchor_nodes.len();
        let res = cross_validate(&grid, cfg.folds, na, |&(e1, e2), _train, test| {
            let mut drop = vec![false; na];
            test.iter().for_each(|&a| drop[a] = true);
            let rep = self.solve(e1, e2, &drop, &cfg.solver)?;
            let err: f64 = test.iter().map(|&a| (rep.beta[self.anchor_nodes[a]] - self.anchor_target[self.anchor_nodes[a]]).powi(2)).sum();
            Ok(err / test.len() as f64)
        })?;
        Ok((res.best, Some((grid, res.errors))))
    }

    fn finish(&self, kind: UpdateKind, ids: Vec<u64>, store: &ValueStore, changed: &[u64], cfg: &DynamicConfig) -> Result<DynamicOutcome> {
        let ((eta1, eta2), cv) = self.select(cfg)?;
        let rep = self.solve(eta1, eta2, &vec![false; self.anchor_nodes.len()], &cfg.solver)?;
        let violations = self
            .anchor_nodes
            .iter()
            .enumerate()
            .filter(|&(a, &node)| (rep.beta[node] - self.anchor_target[node]).abs() > self.eps.eps[a])
            .count();
        let violation_fraction = violations as f64 / self.anchor_nodes.len() as f64;
        let method = match kind {
            UpdateKind::Add => "inc-gloc",
            UpdateKind::Remove => "dec-gloc",
        };
        let mut v = ValueVector::new(rep.beta.clone(), method, ids)?;
        v.set_param("eta1", eta1);
        v.set_param("eta2", eta2);
        v.set_param("eta_selection", if cv.is_some() { "cv" } else if cfg.eta1.is_some() && cfg.eta2.is_some() { "given" } else { "default" });
        if let Some((grid, errors)) = cv {
            v.set_param("cv_folds", cfg.folds);
            v.set_param("cv_grid", grid);
            v.set_param("cv_errors", errors);
        }
        v.set_param("eps0", cfg.eps0);
        v.set_param("size_ratio", self.eps.size_ratio);
        v.set_param("k", self.graph.k);
        v.set_param("metric", self.graph.metric);
        v.set_param(if kind == UpdateKind::Add { "added_ids" } else { "removed_ids" }, changed);
        v.set_param("violation_fraction", violation_fraction);
        v.set_param("solver", solve_summary(&rep, &cfg.solver));
        v.set_param("base_method", &store.method);
        v.set_param("base_digest", &store.dataset_digest);
        Ok(DynamicOutcome { values: v, eps: self.eps.clone(), violation_fraction, conditioning: rep.conditioning })
    }
}

fn train_part(d: &Dataset) -> Dataset {
    d.subset(&d.split_indices(Split::Train))
}

/// Neighbour lists of `g` as id lists, keyed by node id.
fn id_neighbourhoods(g: &SimilarityGraph) -> HashMap<u64, Vec<u64>> {
    g.ids.iter().zip(&g.neighbors).map(|(&id, list)| (id, list.iter().map(|&j| g.ids[j]).collect())).collect()
}

fn change_ratios(old: &SimilarityGraph, new: &SimilarityGraph, anchored: &[usize]) -> Vec<f64> {
    let before = id_neighbourhoods(old);
    anchored
        .iter()
        .map(|&node| {
            let after: Vec<u64> = new.neighbors[node].iter().map(|&j| new.ids[j]).collect();
            let prev = before.get(&new.ids[node]).map(Vec::as_slice).unwrap_or(&[]);
            neighborhood_change_ratio(prev, &after, new.k.max(1)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Adds the rows of `added` to the train split of `data` and updates the stored values.
pub fn inc_gloc(data: &Dataset, added: &Dataset, store: &ValueStore, cfg: &DynamicConfig) -> Result<DynamicOutcome> {
    store.check(data)?;
    let old = train_part(data);
    let combined = old.concat(&added.clone().with_split(Split::Train)).map_err(|e| match e {
        Error::IdMismatch(m) | Error::InvalidParameter(m) => Error::invalid(format!("added samples must be new: {m}")),
        other => other,
    })?;
    let n_old = old.len();
    let old_graph = SimilarityGraph::build_all(&old, &cfg.graph)?;
    let graph = SimilarityGraph::build_all(&combined, &cfg.graph)?;
    let anchored: Vec<usize> = (0..n_old).collect();
    let r = change_ratios(&old_graph, &graph, &anchored);
    let eps = epsilon_bounds(UpdateKind::Add, n_old, combined.len(), &r, cfg.eps0)?;

    let mut target = vec![0.0; combined.len()];
    let mut old_values = HashMap::with_capacity(n_old);
    for (i, &id) in old.ids().iter().enumerate() {
        let b = store.get(id).ok_or_else(|| Error::Provenance(format!("no stored value for id {id}")))?;
        target[i] = b;
        old_values.insert(i, b);
    }
    let new_nodes: Vec<usize> = (n_old..combined.len()).collect();
    let mut init = target.clone();
    for (node, b) in new_nodes.iter().zip(init_added_values(&graph, &new_nodes, &old_values, store.mean())) {
        init[*node] = b;
    }
    let update = Update { graph: &graph, anchor_target: target, anchor_nodes: anchored, eps: &eps, init };
    update.finish(UpdateKind::Add, combined.ids().to_vec(), store, added.ids(), cfg)
}

/// Removes the ids in `removed` from the train split of `data` and updates the stored values.
pub fn dec_gloc(data: &Dataset, removed: &[u64], store: &ValueStore, cfg: &DynamicConfig) -> Result<DynamicOutcome> {
    store.check(data)?;
    let old = train_part(data);
    let gone: HashSet<u64> = removed.iter().copied().collect();
    if let Some(id) = removed.iter().find(|id| store.get(**id).is_none()) {
        return Err(Error::invalid(format!("cannot remove id {id}: not in the valued train split")));
    }
    let keep: Vec<usize> = (0..old.len()).filter(|&i| !gone.contains(&old.ids()[i])).collect();
    if keep.len() < 2 {
        return Err(Error::InsufficientData("fewer than two samples would remain".into()));
    }
    let remaining = old.subset(&keep);
    let old_graph = SimilarityGraph::build_all(&old, &cfg.graph)?;
    let graph = SimilarityGraph::build_all(&remaining, &cfg.graph)?;
    let anchored: Vec<usize> = (0..remaining.len()).collect();
    let r = change_ratios(&old_graph, &graph, &anchored);
    let eps = epsilon_bounds(UpdateKind::Remove, old.len(), remaining.len(), &r, cfg.eps0)?;
    let target: Vec<f64> = remaining.ids().iter().map(|&id| store.get(id).expect("checked above")).collect();
    let update = Update { graph: &graph, init: target.clone(), anchor_target: target, anchor_nodes: anchored, eps: &eps };
    let mut sorted: Vec<u64> = gone.into_iter().collect();
    sorted.sort_unstable();
    update.finish(UpdateKind::Remove, remaining.ids().to_vec(), store, &sorted, cfg)
}
