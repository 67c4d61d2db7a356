//! Reduced-scale experiment protocols on the synthetic two-Gaussian task:
//! estimator accuracy against ground truth, mislabel detection, value-ordered
//! removal curves, and dynamic updates against recomputation.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_random_gaussian, generate_random_task, inject_split_noise, Dataset, RandomTaskConfig, Split, Standardizer};
use crate::dynamic::{dec_gloc, inc_gloc, init_added_values, DynamicConfig, UpdateKind, ValueStore};
use crate::error::Result;
use crate::evaluation::{detect_mislabeled, mse, spearman, stopwatch, value_curve, CurveConfig, Direction};
use crate::graph::{GraphConfig, SimilarityGraph};
use crate::model::ModelConfig;
use crate::oracle::{ame_ground_truth, GroundTruthConfig};
use crate::rng::{derive_seed, rng_from};
use crate::sampling::{build_design_matrix, SamplingConfig};
use crate::valuation::{ame, gloc, AmeConfig, GlocConfig, ValueVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub task: RandomTaskConfig,
    pub standardize: bool,
    /// Sampled subsets for the estimators under test.
    pub m: usize,
    pub model: ModelConfig,
    pub truth: GroundTruthConfig,
    pub graph: GraphConfig,
    pub ame: AmeConfig,
    pub gloc: GlocConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            task: RandomTaskConfig::default(),
            standardize: true,
            m: 100,
            model: ModelConfig::default(),
            truth: GroundTruthConfig::default(),
            graph: GraphConfig::default(),
            ame: AmeConfig::default(),
            gloc: GlocConfig::default(),
        }
    }
}

impl ProtocolConfig {
    /// The task of this trial seed, and the standardizer fitted on its train split.
    pub fn task(&self, seed: u64) -> Result<(Dataset, Option<Standardizer>)> {
        let raw = generate_random_task(&self.task, derive_seed(seed, "data"))?;
        if self.standardize {
            let s = Standardizer::fit(&raw)?;
            Ok((s.apply(&raw)?, Some(s)))
        } else {
            Ok((raw, None))
        }
    }

    fn truth_cfg(&self, seed: u64, name: &str) -> GroundTruthConfig {
        GroundTruthConfig { seed: derive_seed(seed, name), ..self.truth.clone() }
    }

    /// AME and GLOC values from one design matrix.
    pub fn estimate(&self, data: &Dataset, seed: u64) -> Result<(ValueVector, ValueVector)> {
        let sampling = SamplingConfig { m: self.m, seed: derive_seed(seed, "sample"), ..Default::default() };
        let dm = build_design_matrix(data, &sampling, &self.model)?;
        let g = SimilarityGraph::build(data, &data.split_indices(Split::Train), &self.graph)?;
        Ok((ame(&dm, &self.ame)?, gloc(&dm, &g, &self.gloc)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseTrial {
    pub seed: u64,
    pub mse_ame: f64,
    pub mse_gloc: f64,
    pub spearman_ame: f64,
    pub spearman_gloc: f64,
}

/// AME and GLOC against the large-M ground truth.
pub fn mse_trial(cfg: &ProtocolConfig, seed: u64) -> Result<MseTrial> {
    let (data, _) = cfg.task(seed)?;
    let truth = ame_ground_truth(&data, &cfg.model, &cfg.truth_cfg(seed, "truth"))?;
    let (a, g) = cfg.estimate(&data, seed)?;
    Ok(MseTrial { seed, mse_ame: mse(&a, &truth)?, mse_gloc: mse(&g, &truth)?, spearman_ame: spearman(&a, &truth)?, spearman_gloc: spearman(&g, &truth)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTrial {
    pub seed: u64,
    pub flipped: usize,
    pub f1_ame: f64,
    pub f1_gloc: f64,
}

/// Flips `p_noise` of the train labels and scores 2-means detection on AME and GLOC values.
pub fn detection_trial(cfg: &ProtocolConfig, p_noise: f64, seed: u64) -> Result<DetectionTrial> {
    let (clean, _) = cfg.task(seed)?;
    let (data, mask) = inject_split_noise(&clean, Split::Train, p_noise, derive_seed(seed, "noise"))?;
    let (a, g) = cfg.estimate(&data, seed)?;
    Ok(DetectionTrial { seed, flipped: mask.count(), f1_ame: detect_mislabeled(&a, &mask)?.f1, f1_gloc: detect_mislabeled(&g, &mask)?.f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveTrial {
    pub seed: u64,
    pub fraction: f64,
    pub gloc_accuracy: f64,
    pub random_accuracy: f64,
}

/// Accuracy after removing `fraction` of the noisy train set, highest GLOC values
/// first versus a random order.
pub fn curve_trial(cfg: &ProtocolConfig, p_noise: f64, fraction: f64, seed: u64) -> Result<CurveTrial> {
    let (clean, _) = cfg.task(seed)?;
    let (data, _) = inject_split_noise(&clean, Split::Train, p_noise, derive_seed(seed, "noise"))?;
    let (_, g) = cfg.estimate(&data, seed)?;
    let curve_cfg = CurveConfig { max_fraction: fraction, seed: derive_seed(seed, "random-order"), model: cfg.model.clone(), ..Default::default() };
    let desc = value_curve(&data, &g, Direction::RemoveDesc, &curve_cfg)?;
    let rand = value_curve(&data, &g, Direction::Random, &curve_cfg)?;
    let at = |c: &crate::evaluation::Curve| c.accuracy_at(fraction).unwrap_or(f64::NAN);
    Ok(CurveTrial { seed, fraction, gloc_accuracy: at(&desc), random_accuracy: at(&rand) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicTrial {
    pub seed: u64,
    pub kind: UpdateKind,
    pub count: usize,
    pub mse_update: f64,
    pub mse_stale: f64,
    pub update_secs: f64,
    pub recompute_secs: f64,
}

/// Values a base task with the ground-truth protocol, applies one add or remove
/// event, and compares the dynamic update and the stale values against a fresh
/// ground truth on the changed dataset. Recomputation time is that fresh ground truth.
pub fn dynamic_trial(cfg: &ProtocolConfig, dynamic: &DynamicConfig, kind: UpdateKind, count: usize, seed: u64) -> Result<DynamicTrial> {
    let (data, scaler) = cfg.task(seed)?;
    let current = ame_ground_truth(&data, &cfg.model, &cfg.truth_cfg(seed, "truth"))?;
    let store = ValueStore::new(&current, &data)?;
    let fresh_cfg = cfg.truth_cfg(seed, "fresh-truth");
    match kind {
        UpdateKind::Add => {
            let raw = generate_random_gaussian(count.div_ceil(2).max(1), cfg.task.k_ratio, cfg.task.sigma_minus, derive_seed(seed, "added"))?;
            let raw = raw.subset(&(0..count).collect::<Vec<_>>());
            let next_id = data.ids().iter().max().map_or(0, |m| m + 1);
            let added = match &scaler {
                Some(s) => s.apply(&raw)?,
                None => raw,
            }
            .renumbered(next_id);
            let (out, update_t) = stopwatch(0, 1, || inc_gloc(&data, &added, &store, dynamic));
            let out = out?;
            let grown = data.concat(&added.clone().with_split(Split::Train))?;
            let (fresh, recompute_t) = stopwatch(0, 1, || ame_ground_truth(&grown, &cfg.model, &fresh_cfg));
            let fresh = fresh?;
            let stale = padded_stale(&grown, &data, &store, &dynamic.graph)?;
            Ok(DynamicTrial {
                seed,
                kind,
                count,
                mse_update: mse(&out.values, &fresh)?,
                mse_stale: mse(&stale, &fresh)?,
                update_secs: update_t.median,
                recompute_secs: recompute_t.median,
            })
        }
        UpdateKind::Remove => {
            let train = data.split_indices(Split::Train);
            let mut rng = rng_from(derive_seed(seed, "removed"));
            let removed: Vec<u64> = sample_indices(&mut rng, train.len(), count).into_iter().map(|k| data.ids()[train[k]]).collect();
            let (out, update_t) = stopwatch(0, 1, || dec_gloc(&data, &removed, &store, dynamic));
            let out = out?;
            let keep: Vec<usize> = (0..data.len()).filter(|&r| !removed.contains(&data.ids()[r])).collect();
            let shrunk = data.subset(&keep);
            let (fresh, recompute_t) = stopwatch(0, 1, || ame_ground_truth(&shrunk, &cfg.model, &fresh_cfg));
            let fresh = fresh?;
            let ids: Vec<u64> = fresh.ids.clone();
            let stale = ValueVector::new(ids.iter().map(|&id| store.get(id).unwrap_or(0.0)).collect(), "stale", ids)?;
            Ok(DynamicTrial {
                seed,
                kind,
                count,
                mse_update: mse(&out.values, &fresh)?,
                mse_stale: mse(&stale, &fresh)?,
                update_secs: update_t.median,
                recompute_secs: recompute_t.median,
            })
        }
    }
}

/// Stored values for old samples; new samples get the neighbour-average initialization.
fn padded_stale(grown: &Dataset, base: &Dataset, store: &ValueStore, graph: &GraphConfig) -> Result<ValueVector> {
    let rows = grown.split_indices(Split::Train);
    let g = SimilarityGraph::build(grown, &rows, graph)?;
    let old: std::collections::HashMap<usize, f64> =
        g.ids.iter().enumerate().filter_map(|(node, id)| store.get(*id).map(|b| (node, b))).collect();
    let new_nodes: Vec<usize> = (0..g.n()).filter(|n| !old.contains_key(n)).collect();
    let init = init_added_values(&g, &new_nodes, &old, store.mean());
    let mut values: Vec<f64> = (0..g.n()).map(|n| old.get(&n).copied().unwrap_or(0.0)).collect();
    for (n, b) in new_nodes.iter().zip(init) {
        values[*n] = b;
    }
    debug_assert_eq!(base.split_indices(Split::Train).len(), old.len());
    ValueVector::new(values, "stale", g.ids.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ProtocolConfig {
        ProtocolConfig {
            task: RandomTaskConfig { train_per_class: 10, valid_per_class: 10, test_per_class: 20, ..Default::default() },
            m: 40,
            truth: GroundTruthConfig { multiplier: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn protocols_run_and_are_deterministic() {
        let cfg = small();
        let a = mse_trial(&cfg, 1).unwrap();
        assert_eq!(a, mse_trial(&cfg, 1).unwrap());
        let d = detection_trial(&cfg, 0.2, 1).unwrap();
        assert_eq!(d.flipped, 4);
        let c = curve_trial(&cfg, 0.2, 0.3, 1).unwrap();
        assert!((0.0..=1.0).contains(&c.gloc_accuracy));
        let dynamic = DynamicConfig { eta1: Some(0.01), eta2: Some(5.0), ..Default::default() };
        for kind in [UpdateKind::Add, UpdateKind::Remove] {
            let t = dynamic_trial(&cfg, &dynamic, kind, 2, 1).unwrap();
            assert!(t.mse_update.is_finite() && t.mse_stale.is_finite());
        }
    }
}
