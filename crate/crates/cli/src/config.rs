//! Run configuration: one TOML document with a flat section per module.
//!
//! Resolution order, lowest to highest: built-in defaults, the `--config`
//! file, `--set section.key=value` overrides, then dedicated command flags.
//! Unknown keys are rejected. Per-component seeds are never read from the
//! document; they are derived from `run.seed` by component name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gloc_core::dataset::{RandomTaskConfig, Split};
use gloc_core::dynamic::DynamicConfig;
use gloc_core::graph::GraphConfig;
use gloc_core::model::ModelConfig;
use gloc_core::oracle::GroundTruthConfig;
use gloc_core::rng::derive_seed;
use gloc_core::sampling::SamplingConfig;
use gloc_core::valuation::{AmeConfig, GlocConfig, RefineConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
    pub k_ratio: f64,
    pub sigma_minus: f64,
    /// Standardize features with train-split statistics.
    pub standardize: bool,
    /// Fraction of train labels to flip after generation.
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let t = RandomTaskConfig::default();
        DataSection {
            train_per_class: t.train_per_class,
            valid_per_class: t.valid_per_class,
            test_per_class: t.test_per_class,
            k_ratio: t.k_ratio,
            sigma_minus: t.sigma_minus,
            standardize: true,
            noise: 0.0,
        }
    }
}

impl DataSection {
    pub fn task(&self) -> RandomTaskConfig {
        RandomTaskConfig {
            train_per_class: self.train_per_class,
            valid_per_class: self.valid_per_class,
            test_per_class: self.test_per_class,
            k_ratio: self.k_ratio,
            sigma_minus: self.sigma_minus,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSection {
    pub permutations: usize,
    pub trunc_tol: f64,
    pub truth: GroundTruthConfig,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { permutations: 1000, trunc_tol: 1e-3, truth: GroundTruthConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveSection {
    pub step_fraction: f64,
    pub max_fraction: f64,
    pub eval_split: Split,
    pub directions: Vec<String>,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            step_fraction: 0.05,
            max_fraction: 0.5,
            eval_split: Split::Test,
            directions: ["remove-desc", "remove-asc", "add-asc", "add-desc", "random"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub ame: AmeConfig,
    pub gloc: GlocConfig,
    pub refine: RefineConfig,
    pub dynamic: DynamicConfig,
    pub oracle: OracleSection,
    pub curve: CurveSection,
}

/// Components whose seeds fan out from `run.seed`.
pub const SEED_COMPONENTS: [&str; 8] = ["data", "noise", "extra", "sampling", "model", "truth", "oracle", "curve"];

impl Config {
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = SEED_COMPONENTS.iter().map(|c| (c.to_string(), derive_seed(self.run.seed, c))).collect();
        out.insert("run".into(), self.run.seed);
        out
    }

    pub fn seed(&self, component: &str) -> u64 {
        derive_seed(self.run.seed, component)
    }

    /// Writes the derived seeds into the sections that carry one.
    fn apply_seeds(&mut self) {
        self.sampling.seed = self.seed("sampling");
        self.model.seed = self.seed("model");
        self.oracle.truth.seed = self.seed("truth");
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad key `{path}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::config(format!("`{p}` in `{path}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `section.key=value` overrides.
pub fn apply_sets(table: &mut toml::Table, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::config(format!("override `{s}` is not `section.key=value`")))?;
        set_path(table, k.trim(), parse_literal(v.trim()))?;
    }
    Ok(())
}

pub fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>().map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Deserializes the merged document, rejecting keys no section knows.
pub fn resolve(table: toml::Table) -> Result<Config, CliError> {
    let mut unknown = Vec::new();
    let mut cfg: Config = serde_ignored::deserialize(toml::Value::Table(table), |p| unknown.push(p.to_string()))
        .map_err(|e| CliError::config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(CliError::config(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    cfg.apply_seeds();
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_then_sets_then_file_then_defaults() {
        let mut t: toml::Table = "[sampling]\nm = 50\n[graph]\nk = 7\n".parse().unwrap();
        assert_eq!(resolve(t.clone()).unwrap().sampling.m, 50);
        apply_sets(&mut t, &["sampling.m=70".into()]).unwrap();
        let c = resolve(t.clone()).unwrap();
        assert_eq!((c.sampling.m, c.graph.k), (70, 7));
        set_path(&mut t, "sampling.m", toml::Value::Integer(90)).unwrap();
        let c = resolve(t).unwrap();
        assert_eq!(c.sampling.m, 90);
        assert_eq!(c.model.l2_strength, ModelConfig::default().l2_strength);
        assert_eq!(resolve(toml::Table::new()).unwrap().sampling.m, 500);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let t: toml::Table = "[graph]\nkk = 3\n".parse().unwrap();
        assert!(resolve(t).unwrap_err().to_string().contains("graph.kk"));
        let t: toml::Table = "[sampling]\nm = \"many\"\n".parse().unwrap();
        assert!(resolve(t).is_err());
        let mut t = toml::Table::new();
        assert!(apply_sets(&mut t, &["novalue".into()]).is_err());
    }

    #[test]
    fn literals_and_strings() {
        let mut t = toml::Table::new();
        apply_sets(&mut t, &["gloc.grid=[0.1, 0.01]".into(), "graph.metric=euclidean".into(), "ame.lambda=0.5".into()]).unwrap();
        let c = resolve(t).unwrap();
        assert_eq!(c.gloc.grid, vec![0.1, 0.01]);
        assert_eq!(c.graph.metric, gloc_core::Metric::Euclidean);
        assert_eq!(c.ame.lambda, Some(0.5));
    }

    #[test]
    fn seeds_are_derived_not_read() {
        let t: toml::Table = "[run]\nseed = 3\n[sampling]\nseed = 99\n".parse().unwrap();
        let c = resolve(t).unwrap();
        assert_eq!(c.sampling.seed, derive_seed(3, "sampling"));
        assert_eq!(c.seeds()["run"], 3);
    }
}
