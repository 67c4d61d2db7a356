use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use gloc_core::dataset::{generate_random_gaussian, generate_random_task, inject_split_noise, Dataset, NoiseMask, Split, Standardizer, TableSchema};
use gloc_core::dynamic::{dec_gloc, inc_gloc, DynamicOutcome, ValueStore};
use gloc_core::evaluation::{align, compare, detect_mislabeled, value_curve, write_curves, Curve, CurveConfig, Direction};
use gloc_core::graph::SimilarityGraph;
use gloc_core::model::ModelConfig;
use gloc_core::oracle::{ame_ground_truth, exact_shapley, mc_shapley, tmc_shapley, Memoized, ModelUtility};
use gloc_core::sampling::{build_design_matrix, read_utilities, DesignMatrix, Membership, SamplingConfig};
use gloc_core::valuation::{ame, gloc, refine, ValueMeta, ValueVector};

use crate::config::{self, Config};
use crate::output::{sha256_hex, FileRecord, OutputDir, RunManifest};
use crate::report;
use crate::{Cli, CliError, Command, Method};

const DESIGN_META: &str = "design.json";
const MEMBERSHIP: &str = "membership.bits";
const UTILITIES: &str = "utilities.csv";

/// Provenance of a stored design matrix, written by `sample`.
#[derive(Debug, Serialize, Deserialize)]
struct DesignMeta {
    ids: Vec<u64>,
    dataset_digest: String,
    sampling: SamplingConfig,
    model: ModelConfig,
}

/// State shared by every command while it runs.
struct Run {
    cfg: Config,
    out: OutputDir,
    inputs: Vec<FileRecord>,
    dataset_digest: Option<String>,
    details: BTreeMap<String, Value>,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        self.inputs.push(FileRecord { file, sha256: sha256_hex(&bytes), bytes: bytes.len() });
        Ok(bytes)
    }

    fn dataset(&mut self, path: &Path) -> Result<Dataset, CliError> {
        let bytes = self.read(path)?;
        let d = Dataset::read_table(bytes.as_slice(), &TableSchema::default()).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Ok(d)
    }

    /// The primary dataset of the run; its digest goes into the manifest.
    fn main_dataset(&mut self, path: &Path) -> Result<Dataset, CliError> {
        let d = self.dataset(path)?;
        self.dataset_digest = Some(d.digest());
        Ok(d)
    }

    /// An `id,value` table plus its sibling `.meta.json` when there is one.
    fn values(&mut self, path: &Path) -> Result<ValueVector, CliError> {
        let table = self.read(path)?;
        let meta_path = path.with_extension("meta.json");
        let meta = if meta_path.exists() {
            serde_json::from_slice::<ValueMeta>(&self.read(&meta_path)?)?
        } else {
            let (ids, _) = gloc_core::valuation::read_value_table(table.as_slice())?;
            let method = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "external".into());
            ValueMeta { method, n: ids.len(), hyperparams: BTreeMap::new() }
        };
        Ok(ValueVector::from_table_and_meta(table.as_slice(), meta)?)
    }

    fn design(&mut self, dir: &Path, data: &Dataset) -> Result<DesignMatrix, CliError> {
        let meta: DesignMeta = serde_json::from_slice(&self.read(&dir.join(DESIGN_META))?)?;
        if meta.dataset_digest != data.digest() {
            return Err(CliError::from(gloc_core::Error::Provenance(format!(
                "design matrix was sampled from dataset {}, not {}",
                meta.dataset_digest,
                data.digest()
            ))));
        }
        let membership = Membership::read_bits(self.read(&dir.join(MEMBERSHIP))?.as_slice())?;
        let (p_row, u) = read_utilities(self.read(&dir.join(UTILITIES))?.as_slice())?;
        Ok(DesignMatrix::from_parts(membership, p_row, u, meta.ids, meta.sampling, meta.model)?)
    }

    fn write_values(&mut self, v: &ValueVector) -> Result<(), CliError> {
        self.out.write_with("values.csv", |w| v.write_table(w))?;
        self.out.write_json("values.meta.json", &v.meta())
    }

    fn write_dataset(&mut self, name: &str, d: &Dataset) -> Result<(), CliError> {
        self.out.write_with(name, |w| d.write_table(w))
    }

    fn write_store(&mut self, v: &ValueVector, data: &Dataset) -> Result<(), CliError> {
        let store = ValueStore::new(v, data)?;
        let mut bytes = store.to_json()?.into_bytes();
        bytes.push(b'\n');
        self.out.write("store.json", bytes)
    }

    fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn finish(self, cli: &Cli) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: cli.command.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(&self.cfg)?,
            seeds: self.cfg.seeds(),
            dataset_digest: self.dataset_digest,
            inputs: self.inputs,
            outputs: Vec::new(),
            timings: String::new(),
            details: self.details,
        };
        self.out.finish(manifest, rayon::current_num_threads())
    }
}

/// Dedicated flags, expressed as configuration keys so they take part in the
/// precedence order and show up in the config snapshot.
fn flag_overrides(cli: &Cli) -> Vec<(&'static str, toml::Value)> {
    let mut v = Vec::new();
    let int = |x: usize| toml::Value::Integer(x as i64);
    if let Some(s) = cli.seed {
        v.push(("run.seed", toml::Value::Integer(s as i64)));
    }
    match &cli.command {
        Command::GenData { noise: Some(p), .. } => v.push(("data.noise", toml::Value::Float(*p))),
        Command::Sample { m: Some(m), .. } => v.push(("sampling.m", int(*m))),
        Command::Value { k, permutations, .. } => {
            if let Some(k) = k {
                v.push(("graph.k", int(*k)));
            }
            if let Some(p) = permutations {
                v.push(("oracle.permutations", int(*p)));
            }
        }
        Command::Refine { eta1, eta2, .. } => {
            if let Some(e) = eta1 {
                v.push(("refine.eta1", toml::Value::Float(*e)));
            }
            if let Some(e) = eta2 {
                v.push(("refine.eta2", toml::Value::Float(*e)));
            }
        }
        _ => {}
    }
    v
}

pub fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut table = match &cli.config {
        Some(p) => config::read_table(p)?,
        None => toml::Table::new(),
    };
    config::apply_sets(&mut table, &cli.sets)?;
    for (k, val) in flag_overrides(cli) {
        if k == "run.seed" && val.as_integer().is_some_and(|s| s < 0) {
            return Err(CliError::config("seed does not fit in a signed 64-bit integer"));
        }
        config::set_path(&mut table, k, val)?;
    }
    config::resolve(table)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let out = OutputDir::create(&cli.out, cli.force)?;
    let mut r = Run { cfg, out, inputs: Vec::new(), dataset_digest: None, details: BTreeMap::new() };
    match &cli.command {
        Command::GenData { extra, .. } => gen_data(&mut r, *extra)?,
        Command::Sample { data, .. } => sample(&mut r, data)?,
        Command::Value { method, data, design, .. } => value(&mut r, *method, data, design.as_deref())?,
        Command::Refine { data, values, .. } => refine_cmd(&mut r, data, values)?,
        Command::DynamicAdd { data, store, added } => dynamic_add(&mut r, data, store, added)?,
        Command::DynamicRemove { data, store, remove } => dynamic_remove(&mut r, data, store, remove)?,
        Command::DetectNoise { values, mask } => detect_noise(&mut r, values, mask)?,
        Command::Curve { data, values, directions } => curve(&mut r, data, values, directions)?,
        Command::Compare { values, reference } => compare_cmd(&mut r, values, reference.as_deref())?,
        Command::Report { curves, metrics } => report_cmd(&mut r, curves, metrics)?,
    }
    r.finish(cli)
}

fn gen_data(r: &mut Run, extra: usize) -> Result<(), CliError> {
    let d = r.cfg.data.clone();
    if !(0.0..=1.0).contains(&d.noise) {
        return Err(CliError::config("data.noise must lie in [0, 1]"));
    }
    let raw = generate_random_task(&d.task(), r.cfg.seed("data"))?;
    let scaler = if d.standardize { Some(Standardizer::fit(&raw)?) } else { None };
    let mut data = match &scaler {
        Some(s) => s.apply(&raw)?,
        None => raw,
    };
    if d.noise > 0.0 {
        let (noisy, mask) = inject_split_noise(&data, Split::Train, d.noise, r.cfg.seed("noise"))?;
        data = noisy;
        r.out.write_with("noise_mask.csv", |w| mask.write_table(w))?;
        r.detail("flipped", mask.count());
    }
    r.write_dataset("data.csv", &data)?;
    if extra > 0 {
        let fresh = generate_random_gaussian(extra.div_ceil(2), d.k_ratio, d.sigma_minus, r.cfg.seed("extra"))?;
        let fresh = fresh.subset(&(0..extra).collect::<Vec<_>>());
        let next = data.ids().iter().max().map_or(0, |m| m + 1);
        let fresh = match &scaler {
            Some(s) => s.apply(&fresh)?,
            None => fresh,
        }
        .renumbered(next);
        r.write_dataset("extra.csv", &fresh)?;
    }
    if let Some(s) = &scaler {
        r.detail("standardizer", json!({"mean": s.mean, "std": s.std}));
    }
    r.detail("rows", data.len());
    r.dataset_digest = Some(data.digest());
    Ok(())
}

fn write_design(r: &mut Run, dm: &DesignMatrix, data: &Dataset) -> Result<(), CliError> {
    r.out.write_with(MEMBERSHIP, |w| dm.membership.write_bits(w))?;
    r.out.write_with(UTILITIES, |w| dm.write_utilities(w))?;
    let meta = DesignMeta { ids: dm.ids.clone(), dataset_digest: data.digest(), sampling: dm.sampling.clone(), model: dm.model.clone() };
    r.out.write_json(DESIGN_META, &meta)
}

fn sample(r: &mut Run, data: &Path) -> Result<(), CliError> {
    let data = r.main_dataset(data)?;
    let (sampling, model) = (r.cfg.sampling.clone(), r.cfg.model.clone());
    let dm = r.out.stage("collect_utilities", || build_design_matrix(&data, &sampling, &model))?;
    write_design(r, &dm, &data)?;
    r.detail("rows", dm.n_rows());
    r.detail("samples", dm.n_samples());
    Ok(())
}

fn design_for(r: &mut Run, dir: Option<&Path>, data: &Dataset) -> Result<DesignMatrix, CliError> {
    match dir {
        Some(d) => r.design(d, data),
        None => {
            let (sampling, model) = (r.cfg.sampling.clone(), r.cfg.model.clone());
            Ok(r.out.stage("collect_utilities", || build_design_matrix(data, &sampling, &model))?)
        }
    }
}

fn value(r: &mut Run, method: Method, data_path: &Path, design: Option<&Path>) -> Result<(), CliError> {
    let data = r.main_dataset(data_path)?;
    let cfg = r.cfg.clone();
    let v = match method {
        Method::Ame => {
            let dm = design_for(r, design, &data)?;
            r.out.stage("ame", || ame(&dm, &cfg.ame))?
        }
        Method::Gloc => {
            let dm = design_for(r, design, &data)?;
            let g = r.out.stage("graph", || SimilarityGraph::build(&data, &data.split_indices(Split::Train), &cfg.graph))?;
            r.detail("graph_warnings", &g.warnings);
            r.out.write_with("graph_edges.csv", |w| g.write_edges(w))?;
            r.out.stage("gloc", || gloc(&dm, &g, &cfg.gloc))?
        }
        Method::Mc | Method::Tmc | Method::Exact => {
            let util = Memoized::new(ModelUtility::new(&data, Split::Valid, cfg.model.clone())?);
            let ids = util.inner().ids();
            let seed = cfg.seed("oracle");
            let (perms, tol) = (cfg.oracle.permutations, cfg.oracle.trunc_tol);
            let v = r.out.stage(&method.to_string(), || match method {
                Method::Mc => mc_shapley(&util, &ids, perms, seed),
                Method::Tmc => tmc_shapley(&util, &ids, perms, tol, seed),
                _ => exact_shapley(&util, &ids),
            })?;
            r.detail("utility_evaluations", util.cached());
            v
        }
        Method::AmeTruth => r.out.stage("ame_truth", || ame_ground_truth(&data, &cfg.model, &cfg.oracle.truth))?,
    };
    r.write_values(&v)?;
    r.write_store(&v, &data)?;
    r.detail("method", &v.method);
    r.detail("n", v.len());
    Ok(())
}

fn refine_cmd(r: &mut Run, data: &Path, values: &Path) -> Result<(), CliError> {
    let data = r.main_dataset(data)?;
    let base = r.values(values)?;
    let cfg = r.cfg.clone();
    let g = r.out.stage("graph", || SimilarityGraph::build(&data, &data.split_indices(Split::Train), &cfg.graph))?;
    if g.ids != base.ids {
        // reorder the base values to the graph's node order
        let map = base.id_map();
        let vals = g
            .ids
            .iter()
            .map(|id| map.get(id).copied().ok_or_else(|| CliError::from(gloc_core::Error::IdMismatch(format!("train id {id} has no base value")))))
            .collect::<Result<Vec<_>, _>>()?;
        if base.len() != g.ids.len() {
            return Err(gloc_core::Error::IdMismatch("base values cover ids outside the train split".into()).into());
        }
        let mut aligned = ValueVector::new(vals, base.method.clone(), g.ids.clone())?;
        aligned.hyperparams = base.hyperparams.clone();
        return finish_refine(r, &aligned, &g, &data);
    }
    finish_refine(r, &base, &g, &data)
}

fn finish_refine(r: &mut Run, base: &ValueVector, g: &SimilarityGraph, data: &Dataset) -> Result<(), CliError> {
    let cfg = r.cfg.refine.clone();
    let v = r.out.stage("refine", || refine(base, g, &cfg))?;
    r.write_values(&v)?;
    r.write_store(&v, data)?;
    r.detail("method", &v.method);
    Ok(())
}

fn write_update(r: &mut Run, out: &DynamicOutcome, before: &Dataset, after: &Dataset) -> Result<(), CliError> {
    r.write_values(&out.values)?;
    r.write_store(&out.values, after)?;
    r.write_dataset("data.csv", after)?;
    r.detail("digest_before", before.digest());
    r.detail("digest_after", after.digest());
    r.detail("violation_fraction", out.violation_fraction);
    r.detail("conditioning", out.conditioning);
    r.detail("eps_mean", out.eps.mean);
    r.detail("size_ratio", out.eps.size_ratio);
    for key in ["eta1", "eta2", "eta_selection"] {
        if let Some(v) = out.values.hyperparams.get(key) {
            r.details.insert(key.to_string(), v.clone());
        }
    }
    Ok(())
}

fn dynamic_add(r: &mut Run, data: &Path, store: &Path, added: &Path) -> Result<(), CliError> {
    let data = r.main_dataset(data)?;
    let store: ValueStore = serde_json::from_slice(&r.read(store)?)?;
    let added = r.dataset(added)?;
    let cfg = r.cfg.dynamic.clone();
    let out = r.out.stage("inc_gloc", || inc_gloc(&data, &added, &store, &cfg))?;
    let grown = data.concat(&added.clone().with_split(Split::Train))?;
    r.detail("added_ids", added.ids());
    write_update(r, &out, &data, &grown)
}

fn dynamic_remove(r: &mut Run, data: &Path, store: &Path, removed: &[u64]) -> Result<(), CliError> {
    let data = r.main_dataset(data)?;
    let store: ValueStore = serde_json::from_slice(&r.read(store)?)?;
    let cfg = r.cfg.dynamic.clone();
    let out = r.out.stage("dec_gloc", || dec_gloc(&data, removed, &store, &cfg))?;
    let keep: Vec<usize> = (0..data.len()).filter(|&i| !removed.contains(&data.ids()[i])).collect();
    let shrunk = data.subset(&keep);
    r.detail("removed_ids", removed);
    write_update(r, &out, &data, &shrunk)
}

fn detect_noise(r: &mut Run, values: &Path, mask: &Path) -> Result<(), CliError> {
    let v = r.values(values)?;
    let mask = NoiseMask::read_table(r.read(mask)?.as_slice())?;
    let det = detect_mislabeled(&v, &mask)?;
    let flipped: BTreeMap<u64, bool> = mask.ids.iter().copied().zip(mask.flags.iter().copied()).collect();
    let mut table = String::from("id,flagged,flipped\n");
    for (id, f) in det.ids.iter().zip(&det.flags) {
        table.push_str(&format!("{id},{f},{}\n", flipped[id]));
    }
    r.out.write("detection.csv", table.into_bytes())?;
    let metrics = format!(
        "method,precision,recall,f1,low_mean,high_mean\n{},{},{},{},{},{}\n",
        v.method, det.precision, det.recall, det.f1, det.cluster_means[0], det.cluster_means[1]
    );
    r.out.write("detection_metrics.csv", metrics.into_bytes())?;
    r.detail("f1", det.f1);
    Ok(())
}

fn curve(r: &mut Run, data: &Path, values: &Path, directions: &[String]) -> Result<(), CliError> {
    let data = r.main_dataset(data)?;
    let v = r.values(values)?;
    let names = if directions.is_empty() { r.cfg.curve.directions.clone() } else { directions.to_vec() };
    let dirs: Vec<Direction> = names.iter().map(|s| s.parse::<Direction>()).collect::<Result<_, _>>()?;
    let c = &r.cfg.curve;
    let cfg = CurveConfig { step_fraction: c.step_fraction, max_fraction: c.max_fraction, eval_split: c.eval_split, seed: r.cfg.seed("curve"), model: r.cfg.model.clone() };
    let curves: Vec<Curve> = r.out.stage("curves", || dirs.iter().map(|&d| value_curve(&data, &v, d, &cfg)).collect::<gloc_core::Result<_>>())?;
    let refs: Vec<&Curve> = curves.iter().collect();
    r.out.write_with("curves.csv", |w| write_curves(&refs, w))?;
    let early: Vec<String> = curves.iter().filter(|c| c.terminated_early).map(|c| c.direction.to_string()).collect();
    r.detail("terminated_early", early);
    r.detail("values_method", &v.method);
    Ok(())
}

fn compare_cmd(r: &mut Run, values: &[PathBuf], reference: Option<&Path>) -> Result<(), CliError> {
    let vs: Vec<ValueVector> = values.iter().map(|p| r.values(p)).collect::<Result<_, _>>()?;
    let labels: Vec<String> = vs.iter().enumerate().map(|(i, v)| format!("{i}:{}", v.method)).collect();
    let mut pairs: Vec<(String, &ValueVector, String, &ValueVector)> = Vec::new();
    let ref_v;
    match reference {
        Some(p) => {
            ref_v = r.values(p)?;
            for (l, v) in labels.iter().zip(&vs) {
                pairs.push((l.clone(), v, format!("ref:{}", ref_v.method), &ref_v));
            }
        }
        None if vs.len() == 1 => pairs.push((labels[0].clone(), &vs[0], labels[0].clone(), &vs[0])),
        None => {
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    pairs.push((labels[i].clone(), &vs[i], labels[j].clone(), &vs[j]));
                }
            }
        }
    }
    let mut table = String::from("a,b,n,mse,mae,spearman\n");
    for (la, a, lb, b) in pairs {
        let n = align(a, b)?.len();
        let c = compare(a, b)?;
        table.push_str(&format!("{la},{lb},{n},{},{},{}\n", c.mse, c.mae, c.spearman));
    }
    r.out.write("metrics.csv", table.into_bytes())
}

fn report_cmd(r: &mut Run, curves: &[PathBuf], metrics: &[PathBuf]) -> Result<(), CliError> {
    if curves.is_empty() && metrics.is_empty() {
        return Err(CliError::input("report needs at least one --curves or --metrics table"));
    }
    let mut md = String::from("# Valuation report\n\n");
    for (i, p) in curves.iter().enumerate() {
        let text = String::from_utf8(r.read(p)?).map_err(|_| CliError::input(format!("{} is not UTF-8", p.display())))?;
        let series = report::parse_curves(&text)?;
        let name = format!("curves_{i}.svg");
        let title = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        r.out.write(&name, report::line_chart(&title, "fraction of train set", "accuracy", &series).into_bytes())?;
        md.push_str(&format!("## Curves {i}\n\n![{title}]({name})\n\n"));
    }
    for (i, p) in metrics.iter().enumerate() {
        let text = String::from_utf8(r.read(p)?).map_err(|_| CliError::input(format!("{} is not UTF-8", p.display())))?;
        md.push_str(&format!("## Metrics {i}\n\n{}\n", report::markdown_table(&text)?));
    }
    r.out.write("report.md", md.into_bytes())
}
