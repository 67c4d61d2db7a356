//! Random training subsets and their utilities: the `(X, U)` regression data
//! behind AME and GLOC.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{subset_utility, ModelConfig};
use crate::par;
use crate::rng::stream_rng;

pub const DEFAULT_P_SUPPORT: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Number of sampled subsets.
    pub m: usize,
    /// Inclusion rates, each drawn with equal probability per subset.
    pub p_support: Vec<f64>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { m: 500, p_support: DEFAULT_P_SUPPORT.to_vec(), seed: 0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("number of subsets must be at least 1"));
        }
        if self.p_support.is_empty() {
            return Err(Error::invalid("sampling-rate support is empty"));
        }
        if let Some(p) = self.p_support.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::invalid(format!("sampling rate {p} not strictly inside (0, 1)")));
        }
        Ok(())
    }

    /// `E_p[1 / (p (1 - p))]` under the uniform support; the variance of an encoded entry.
    pub fn encoding_scale(&self) -> f64 {
        encoding_scale(&self.p_support)
    }
}

pub fn encoding_scale(p_support: &[f64]) -> f64 {
    p_support.iter().map(|p| 1.0 / (p * (1.0 - p))).sum::<f64>() / p_support.len() as f64
}

/// `r / p - (1 - r) / (1 - p)`: zero-mean under `r ~ Bernoulli(p)`.
pub fn encode_entry(r: bool, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("sampling rate {p} not strictly inside (0, 1)")));
    }
    Ok(if r { 1.0 / p } else { -1.0 / (1.0 - p) })
}

/// Dense bit table, one row per subset, packed into 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

const BITS_MAGIC: &[u8; 8] = b"GLOCBIT1";

impl Membership {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Membership { rows, cols, words_per_row, words: vec![0; rows * words_per_row] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, m: usize, i: usize) -> bool {
        (self.words[m * self.words_per_row + i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, m: usize, i: usize, v: bool) {
        let w = &mut self.words[m * self.words_per_row + i / 64];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    /// Column indices set in row `m`.
    pub fn row_members(&self, m: usize) -> Vec<usize> {
        (0..self.cols).filter(|&i| self.get(m, i)).collect()
    }

    pub fn row_count(&self, m: usize) -> usize {
        self.words[m * self.words_per_row..(m + 1) * self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Binary layout: magic `GLOCBIT1`, rows and cols as little-endian u64,
    /// then each row as `ceil(cols / 8)` bytes, bit `i % 8` of byte `i / 8`
    /// holding column `i`.
    pub fn write_bits<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BITS_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        let bytes_per_row = self.cols.div_ceil(8);
        for m in 0..self.rows {
            let row = &self.words[m * self.words_per_row..(m + 1) * self.words_per_row];
            let bytes: Vec<u8> = row.iter().flat_map(|w| w.to_le_bytes()).take(bytes_per_row).collect();
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_bits<R: Read>(mut r: R) -> Result<Membership> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BITS_MAGIC {
            return Err(Error::Parse { line: 0, msg: "not a membership bit table".into() });
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let rows = u64::from_le_bytes(buf) as usize;
        r.read_exact(&mut buf)?;
        let cols = u64::from_le_bytes(buf) as usize;
        let mut out = Membership::new(rows, cols);
        let bytes_per_row = cols.div_ceil(8);
        let mut row = vec![0u8; out.words_per_row * 8];
        for m in 0..rows {
            row.iter_mut().for_each(|b| *b = 0);
            r.read_exact(&mut row[..bytes_per_row])?;
            for (k, chunk) in row.chunks_exact(8).enumerate() {
                out.words[m * out.words_per_row + k] = u64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(out)
    }
}

/// Row `m` draws its rate uniformly from the support, then `n` Bernoulli bits,
/// all from a stream keyed by `(seed, m)`.
pub fn sample_memberships(n: usize, cfg: &SamplingConfig) -> Result<(Membership, Vec<f64>)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one sample to draw memberships"));
    }
    let rows = par::map_range(cfg.m, |m| {
        let mut rng = stream_rng(cfg.seed, m as u64);
        let p = cfg.p_support[rng.random_range(0..cfg.p_support.len())];
        let bits: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
        (p, bits)
    });
    let mut membership = Membership::new(cfg.m, n);
    let mut p_row = Vec::with_capacity(cfg.m);
    for (m, (p, bits)) in rows.into_iter().enumerate() {
        p_row.push(p);
        for (i, b) in bits.into_iter().enumerate() {
            if b {
                membership.set(m, i, true);
            }
        }
    }
    Ok((membership, p_row))
}

/// `X[m, i] = encode_entry(membership[m, i], p_row[m])`.
pub fn encode(membership: &Membership, p_row: &[f64]) -> Result<DMatrix<f64>> {
    if p_row.len() != membership.rows() {
        return Err(Error::dims(format!("{} rates for {} rows", p_row.len(), membership.rows())));
    }
    let mut x = DMatrix::zeros(membership.rows(), membership.cols());
    for (m, &p) in p_row.iter().enumerate() {
        let hit = encode_entry(true, p)?;
        let miss = encode_entry(false, p)?;
        for i in 0..membership.cols() {
            x[(m, i)] = if membership.get(m, i) { hit } else { miss };
        }
    }
    Ok(x)
}

/// Utility of the model trained on each row's subset of the train split,
/// scored on `eval_split`. Columns of `membership` follow the train split order.
pub fn collect_utilities(membership: &Membership, dataset: &Dataset, model_cfg: &ModelConfig, eval_split: Split) -> Result<Vec<f64>> {
    let train = dataset.split_indices(Split::Train);
    if membership.cols() != train.len() {
        return Err(Error::dims(format!("membership has {} columns, train split has {} rows", membership.cols(), train.len())));
    }
    let eval = dataset.split_indices(eval_split);
    if eval.is_empty() {
        return Err(Error::InsufficientData(format!("`{eval_split}` split is empty")));
    }
    par::try_map_range(membership.rows(), |m| {
        let rows: Vec<usize> = membership.row_members(m).into_iter().map(|i| train[i]).collect();
        subset_utility(dataset, &rows, &eval, model_cfg).map_err(|e| Error::Row { row: m, source: Box::new(e) })
    })
}

/// Encoded memberships `x`, utilities `u`, and what produced them.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub u: DVector<f64>,
    pub p_row: Vec<f64>,
    pub membership: Membership,
    /// Sample ids of the columns.
    pub ids: Vec<u64>,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
}

impl DesignMatrix {
    /// Assembles a design matrix from stored parts, re-deriving `x`.
    pub fn from_parts(
        membership: Membership,
        p_row: Vec<f64>,
        u: Vec<f64>,
        ids: Vec<u64>,
        sampling: SamplingConfig,
        model: ModelConfig,
    ) -> Result<Self> {
        if u.len() != membership.rows() || ids.len() != membership.cols() {
            return Err(Error::dims("design matrix parts disagree in shape"));
        }
        if u.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("utilities must lie in [0, 1]"));
        }
        let x = encode(&membership, &p_row)?;
        Ok(DesignMatrix { x, u: DVector::from_vec(u), p_row, membership, ids, sampling, model })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn encoding_scale(&self) -> f64 {
        self.sampling.encoding_scale()
    }

    /// `row,p,utility` table.
    pub fn write_utilities<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["row", "p", "utility"])?;
        for m in 0..self.n_rows() {
            wr.write_record([m.to_string(), self.p_row[m].to_string(), self.u[m].to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads a `row,p,utility` table.
pub fn read_utilities<R: Read>(r: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut p = Vec::new();
    let mut u = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(Error::Parse { line, msg: "expected `row,p,utility`".into() });
        }
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad number `{v}`") });
        p.push(num(&rec[1])?);
        u.push(num(&rec[2])?);
    }
    Ok((p, u))
}

/// Samples memberships over the train split, trains one model per subset and
/// scores it on the valid split.
pub fn build_design_matrix(dataset: &Dataset, sampling: &SamplingConfig, model: &ModelConfig) -> Result<DesignMatrix> {
    build_design_matrix_on(dataset, sampling, model, Split::Valid)
}

pub fn build_design_matrix_on(dataset: &Dataset, sampling: &SamplingConfig, model: &ModelConfig, eval_split: Split) -> Result<DesignMatrix> {
    model.validate()?;
    let train = dataset.split_indices(Split::Train);
    let (membership, p_row) = sample_memberships(train.len(), sampling)?;
    let u = collect_utilities(&membership, dataset, model, eval_split)?;
    let x = encode(&membership, &p_row)?;
    Ok(DesignMatrix {
        x,
        u: DVector::from_vec(u),
        p_row,
        membership,
        ids: train.iter().map(|&i| dataset.ids()[i]).collect(),
        sampling: sampling.clone(),
        model: model.clone(),
    })
}
