//! Multinomial logistic regression trained by full-batch gradient descent, and
//! the accuracy utility used to score sampled training subsets.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub l2_strength: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls to this value.
    pub tol: f64,
    /// Recorded for provenance; the full-batch trainer starts from zero and draws nothing.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { l2_strength: 1e-4, max_iters: 300, tol: 1e-5, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("model tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("model max_iters must be at least 1"));
        }
        if !(self.l2_strength >= 0.0) {
            return Err(Error::invalid("l2_strength must be nonnegative"));
        }
        Ok(())
    }
}

/// Softmax-linear classifier: `weights` is `n_classes x dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_classes: usize,
    pub dim: usize,
}

impl FittedModel {
    fn scores(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * self.dim..(c + 1) * self.dim];
            *o = self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut s = vec![0.0; self.n_classes];
        self.scores(x, &mut s);
        argmax(&s)
    }
}

fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    best
}

/// Result of training on a subset.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    /// Empty training subset: predicts the evaluation set's majority class.
    Baseline,
    /// Single-class training subset.
    Constant(usize),
    Linear(FittedModel),
}

impl Predictor {
    fn predict(&self, x: &[f64], majority: usize) -> usize {
        match self {
            Predictor::Baseline => majority,
            Predictor::Constant(c) => *c,
            Predictor::Linear(m) => m.predict(x),
        }
    }
}

pub fn train(data: &Dataset, rows: &[usize], cfg: &ModelConfig) -> Result<Predictor> {
    train_inner(data, rows, cfg, None)
}

/// Like [`train`], also returning the regularized loss at every iterate.
pub fn train_with_trace(data: &Dataset, rows: &[usize], cfg: &ModelConfig) -> Result<(Predictor, Vec<f64>)> {
    let mut trace = Vec::new();
    let p = train_inner(data, rows, cfg, Some(&mut trace))?;
    Ok((p, trace))
}

fn train_inner(data: &Dataset, rows: &[usize], cfg: &ModelConfig, mut trace: Option<&mut Vec<f64>>) -> Result<Predictor> {
    cfg.validate()?;
    if rows.is_empty() {
        return Ok(Predictor::Baseline);
    }
    let first = data.label(rows[0]);
    if rows.iter().all(|&r| data.label(r) == first) {
        return Ok(Predictor::Constant(first));
    }
    let c = data.n_classes();
    let d = data.dim();
    let n = rows.len() as f64;
    let l2 = cfg.l2_strength;

    // Softmax cross-entropy has Hessian bounded by 0.5 * E[x~ x~^T] (x~ = [x, 1]),
    // so 1 / (0.5 * E|x~|^2 + l2) is a step that never increases the loss.
    let mean_sq = rows.iter().map(|&r| 1.0 + data.row(r).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
    let step = 1.0 / (0.5 * mean_sq + l2);

    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    let mut prob = vec![0.0; c];

    for _ in 0..cfg.max_iters {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for &r in rows {
            let x = data.row(r);
            let y = data.label(r);
            for k in 0..c {
                prob[k] = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
            let mx = prob.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in prob.iter_mut() {
                *p = (*p - mx).exp();
                z += *p;
            }
            loss += z.ln() + mx - (prob[y].ln() + mx);
            for k in 0..c {
                let g = prob[k] / z - if k == y { 1.0 } else { 0.0 };
                gb[k] += g;
                for (gwk, v) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *gwk += g * v;
                }
            }
        }
        loss /= n;
        loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g = *g / n + l2 * wv;
        }
        gb.iter_mut().for_each(|g| *g /= n);
        if let Some(t) = trace.as_deref_mut() {
            t.push(loss);
        }
        let gnorm = (gw.iter().chain(&gb).map(|v| v * v).sum::<f64>()).sqrt();
        if gnorm <= cfg.tol {
            break;
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= step * g;
        }
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic regression weights diverged".into()));
    }
    Ok(Predictor::Linear(FittedModel { weights: w, bias: b, n_classes: c, dim: d }))
}

/// Majority label among `rows`; ties go to the lowest label.
pub fn majority_label(data: &Dataset, rows: &[usize]) -> usize {
    let mut counts = vec![0usize; data.n_classes()];
    for &r in rows {
        counts[data.label(r)] += 1;
    }
    let mut best = 0;
    for (k, &cnt) in counts.iter().enumerate() {
        if cnt > counts[best] {
            best = k;
        }
    }
    best
}

/// Accuracy of `pred` on the evaluation rows.
pub fn utility(pred: &Predictor, data: &Dataset, eval_rows: &[usize]) -> Result<f64> {
    if eval_rows.is_empty() {
        return Err(Error::invalid("utility needs a nonempty evaluation set"));
    }
    let majority = majority_label(data, eval_rows);
    let correct = eval_rows.iter().filter(|&&r| pred.predict(data.row(r), majority) == data.label(r)).count();
    Ok(correct as f64 / eval_rows.len() as f64)
}

/// Trains on `train_rows` and scores on `eval_rows`; both index into `data`.
pub fn subset_utility(data: &Dataset, train_rows: &[usize], eval_rows: &[usize], cfg: &ModelConfig) -> Result<f64> {
    let p = train(data, train_rows, cfg)?;
    utility(&p, data, eval_rows)
}
