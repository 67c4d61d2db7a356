//! Labelled feature tables: the synthetic two-Gaussian generator, train-split
//! standardization, label-noise injection and the delimited-text format.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Row-major feature table with integer labels, stable ids and split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    ids: Vec<u64>,
    split: Vec<Split>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        ids: Vec<u64>,
        split: Vec<Split>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if ids.len() != n || split.len() != n || features.len() != n * dim {
            return Err(Error::dims(format!(
                "features {} (dim {dim}), labels {n}, ids {}, split {}",
                features.len(),
                ids.len(),
                split.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("duplicate sample id {id}")));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature table".into()));
        }
        Ok(Dataset { features, dim, labels, ids, split, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    /// Row indices carrying `tag`, in table order.
    pub fn split_indices(&self, tag: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    /// New dataset with the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            split: rows.iter().map(|&r| self.split[r]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn select_split(&self, tag: Split) -> Dataset {
        self.subset(&self.split_indices(tag))
    }

    /// Same rows with every split tag replaced by `tag`.
    pub fn with_split(mut self, tag: Split) -> Dataset {
        self.split.iter_mut().for_each(|s| *s = tag);
        self
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(Error::dims(format!("feature dim {} vs {}", self.dim, other.dim)));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut split = self.split.clone();
        split.extend_from_slice(&other.split);
        Dataset::new(features, self.dim, labels, ids, split, self.n_classes.max(other.n_classes))
    }

    /// Same dataset with ids replaced by `offset, offset + 1, ...`.
    pub fn renumbered(mut self, offset: u64) -> Dataset {
        for (i, id) in self.ids.iter_mut().enumerate() {
            *id = offset + i as u64;
        }
        self
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// SHA-256 of the canonical table serialization.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_table(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }

    fn has_non_train(&self) -> bool {
        self.split.iter().any(|s| *s != Split::Train)
    }

    /// Writes `id,label[,split],f0,f1,...`. The split column is only emitted
    /// when some row is not tagged `train`.
    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        let with_split = self.has_non_train();
        let mut wr = csv::WriterBuilder::new().from_writer(w);
        let mut header = vec!["id".to_string(), "label".to_string()];
        if with_split {
            header.push("split".into());
        }
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].to_string(), self.labels[i].to_string()];
            if with_split {
                rec.push(self.split[i].to_string());
            }
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_table<R: Read>(r: R, schema: &TableSchema) -> Result<Dataset> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let header = rd.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
            return Err(Error::Schema { line: 1, msg: "header must start with `id,label`".into() });
        }
        let with_split = cols.get(2) == Some(&"split");
        let first_feature = if with_split { 3 } else { 2 };
        let dim = cols.len() - first_feature;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        let mut split = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != cols.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", cols.len(), rec.len()),
                });
            }
            let parse_err = |what: &str, v: &str| Error::Parse { line, msg: format!("bad {what} `{v}`") };
            ids.push(rec[0].parse::<u64>().map_err(|_| parse_err("id", &rec[0]))?);
            labels.push(rec[1].parse::<usize>().map_err(|_| parse_err("label", &rec[1]))?);
            split.push(if with_split {
                rec[2].parse::<Split>().map_err(|_| parse_err("split", &rec[2]))?
            } else {
                Split::Train
            });
            for cell in rec.iter().skip(first_feature) {
                let v = cell.parse::<f64>().map_err(|_| parse_err("feature", cell))?;
                if !v.is_finite() {
                    return Err(parse_err("feature", cell));
                }
                features.push(v);
            }
            if let Some(c) = schema.n_classes {
                let y = *labels.last().unwrap();
                if y >= c {
                    return Err(Error::Schema { line, msg: format!("label {y} outside [0, {c})") });
                }
            }
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n_classes = schema
            .n_classes
            .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1)
            .max(2);
        Dataset::new(features, dim, labels, ids, split, n_classes)
    }
}

/// Expectations applied while loading a table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    /// Number of classes; inferred as `max(label) + 1` (at least 2) when absent.
    pub n_classes: Option<usize>,
}

pub fn load_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    Dataset::read_table(std::io::BufReader::new(f), schema)
}

pub fn save_table(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    d.write_table(std::io::BufWriter::new(f))
}

/// Two isotropic Gaussians in the plane: label 1 around `[+1, +1]` with std
/// `k_ratio * sigma_minus`, label 0 around `[-1, -1]` with std `sigma_minus`.
/// Rows are shuffled; ids are `0..2n`; every row is tagged `train`.
pub fn generate_random_gaussian(n_per_class: usize, k_ratio: f64, sigma_minus: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if !(k_ratio > 0.0 && k_ratio.is_finite()) || !(sigma_minus > 0.0 && sigma_minus.is_finite()) {
        return Err(Error::invalid("K and sigma_minus must be positive and finite"));
    }
    let sigma_plus = k_ratio * sigma_minus;
    let mut rng = rng_from(seed);
    let pos = Normal::new(1.0, sigma_plus).map_err(|e| Error::invalid(e.to_string()))?;
    let neg = Normal::new(-1.0, sigma_minus).map_err(|e| Error::invalid(e.to_string()))?;
    let n = 2 * n_per_class;
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        rows.push(([pos.sample(&mut rng), pos.sample(&mut rng)], 1));
    }
    for _ in 0..n_per_class {
        rows.push(([neg.sample(&mut rng), neg.sample(&mut rng)], 0));
    }
    // Fisher-Yates with the same stream keeps the whole table seed-determined.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    let features = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let labels = rows.iter().map(|(_, y)| *y).collect();
    Dataset::new(features, 2, labels, (0..n as u64).collect(), vec![Split::Train; n], 2)
}

/// Sizes and shape of a split synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomTaskConfig {
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
    pub k_ratio: f64,
    pub sigma_minus: f64,
}

impl Default for RandomTaskConfig {
    fn default() -> Self {
        RandomTaskConfig { train_per_class: 100, valid_per_class: 100, test_per_class: 500, k_ratio: 2.0, sigma_minus: 1.0 }
    }
}

/// Train, valid and test parts drawn independently and concatenated in that
/// order with consecutive ids. Not standardized.
pub fn generate_random_task(cfg: &RandomTaskConfig, seed: u64) -> Result<Dataset> {
    let part = |n: usize, name: &str, tag: Split| -> Result<Option<Dataset>> {
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(generate_random_gaussian(n, cfg.k_ratio, cfg.sigma_minus, derive_seed(seed, name))?.with_split(tag)))
    };
    let mut out = part(cfg.train_per_class, "train", Split::Train)?
        .ok_or_else(|| Error::invalid("train_per_class must be at least 1"))?;
    for (n, name, tag) in [(cfg.valid_per_class, "valid", Split::Valid), (cfg.test_per_class, "test", Split::Test)] {
        if let Some(p) = part(n, name, tag)? {
            let offset = out.len() as u64;
            out = out.concat(&p.renumbered(offset))?;
        }
    }
    Ok(out)
}

/// Per-feature mean and std of a dataset's train split (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(d: &Dataset) -> Result<Self> {
        let train = d.split_indices(Split::Train);
        if train.len() < 2 {
            return Err(Error::InsufficientData(format!("standardization needs at least 2 train rows, found {}", train.len())));
        }
        let n = train.len() as f64;
        let mut mean = Vec::with_capacity(d.dim());
        let mut std = Vec::with_capacity(d.dim());
        for j in 0..d.dim() {
            let m = train.iter().map(|&i| d.row(i)[j]).sum::<f64>() / n;
            let var = train.iter().map(|&i| (d.row(i)[j] - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Standardizer { mean, std })
    }

    /// Applies the fitted statistics to every row. Zero-variance features become all-zero.
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.dim() != self.mean.len() {
            return Err(Error::dims(format!("standardizer fitted on {} features, dataset has {}", self.mean.len(), d.dim())));
        }
        let dim = d.dim();
        let mut out = d.clone();
        for j in 0..dim {
            let (mean, std) = (self.mean[j], self.std[j]);
            let degenerate = std <= 1e-12 * mean.abs().max(1.0);
            for i in 0..d.len() {
                let v = &mut out.features[i * dim + j];
                *v = if degenerate { 0.0 } else { (*v - mean) / std };
            }
        }
        Ok(out)
    }
}

/// Zero-mean, unit-std features using statistics of the train split, applied
/// to every row.
pub fn standardize(d: &Dataset) -> Result<Dataset> {
    Standardizer::fit(d)?.apply(d)
}

/// Which labels were flipped by [`inject_label_noise`], aligned with the dataset rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMask {
    pub ids: Vec<u64>,
    pub flags: Vec<bool>,
    pub p_noise: f64,
}

impl NoiseMask {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn write_table<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "flipped"])?;
        for (id, f) in self.ids.iter().zip(&self.flags) {
            wr.write_record([id.to_string(), f.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_table<R: Read>(r: R) -> Result<NoiseMask> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut ids = Vec::new();
        let mut flags = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |v: &str| Error::Parse { line, msg: format!("bad field `{v}`") };
            if rec.len() != 2 {
                return Err(Error::Parse { line, msg: "expected `id,flipped`".into() });
            }
            ids.push(rec[0].parse::<u64>().map_err(|_| bad(&rec[0]))?);
            flags.push(match &rec[1] {
                "true" | "1" => true,
                "false" | "0" => false,
                v => return Err(bad(v)),
            });
        }
        let n = flags.len().max(1) as f64;
        let p_noise = flags.iter().filter(|&&f| f).count() as f64 / n;
        Ok(NoiseMask { ids, flags, p_noise })
    }
}

/// Flips exactly `round(p_noise * N)` labels, chosen uniformly without
/// replacement; each new label is uniform over the other classes.
pub fn inject_label_noise(d: &Dataset, p_noise: f64, seed: u64) -> Result<(Dataset, NoiseMask)> {
    if !(0.0..=1.0).contains(&p_noise) {
        return Err(Error::invalid(format!("p_noise {p_noise} outside [0, 1]")));
    }
    let c = d.n_classes();
    if c < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    let n = d.len();
    let count = (p_noise * n as f64).round() as usize;
    let mut rng = rng_from(seed);
    let mut out = d.clone();
    let mut flags = vec![false; n];
    let mut chosen = sample_indices(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let old = out.labels[i];
        let mut new = rng.random_range(0..c - 1);
        if new >= old {
            new += 1;
        }
        out.labels[i] = new;
        flags[i] = true;
    }
    Ok((out, NoiseMask { ids: d.ids().to_vec(), flags, p_noise }))
}

/// [`inject_label_noise`] restricted to the rows tagged `tag`; the mask covers those rows only.
pub fn inject_split_noise(d: &Dataset, tag: Split, p_noise: f64, seed: u64) -> Result<(Dataset, NoiseMask)> {
    let rows = d.split_indices(tag);
    let (noisy, mask) = inject_label_noise(&d.subset(&rows), p_noise, seed)?;
    let mut out = d.clone();
    for (k, &r) in rows.iter().enumerate() {
        out.labels[r] = noisy.labels[k];
    }
    Ok((out, mask))
}
