//! Signed k-nearest-neighbour graphs and the quadratic form of the local
//! regularizer `sum_i sum_{j in N_k(i)} S_ij (b_i - b_j)^2`.

use std::collections::HashSet;
use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_K: usize = 5;

/// Floor on the Euclidean distance in the inverse-distance weight.
pub const EUCLIDEAN_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub k: usize,
    pub metric: Metric,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { k: DEFAULT_K, metric: Metric::Cosine }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn label_sign(yi: usize, yj: usize) -> f64 {
    if yi == yj {
        1.0
    } else {
        -1.0
    }
}

/// `cos(x_i, x_j)` for same labels, `-cos(x_i, x_j)` otherwise.
pub fn signed_similarity(xi: &[f64], yi: usize, xj: &[f64], yj: usize) -> Result<f64> {
    Ok(cosine(xi, xj)? * label_sign(yi, yj))
}

/// Cosine with zero vectors mapped to similarity 0.
fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).unwrap_or(0.0)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Edge weight under `metric`: signed cosine, or signed inverse distance.
pub fn edge_weight(metric: Metric, xi: &[f64], yi: usize, xj: &[f64], yj: usize) -> f64 {
    let s = match metric {
        Metric::Cosine => cosine_or_zero(xi, xj),
        Metric::Euclidean => 1.0 / euclidean(xi, xj).max(EUCLIDEAN_FLOOR),
    };
    s * label_sign(yi, yj)
}

/// Neighbour lists plus any warnings raised while building them.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub lists: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Exact k nearest neighbours of each row among `rows` (indices into the
/// returned lists are positions in `rows`). Cosine ranks by descending
/// similarity, Euclidean by ascending distance; exact ties go to the lower
/// position. `k >= n` is truncated to `n - 1`.
pub fn knn(data: &Dataset, rows: &[usize], k: usize, metric: Metric) -> Result<Neighbors> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("k-NN needs at least 2 points, found {n}")));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut warnings = Vec::new();
    let k_eff = if k >= n {
        let w = format!("k = {k} >= N = {n}; truncated to {}", n - 1);
        warn!("{w}");
        warnings.push(w);
        n - 1
    } else {
        k
    };
    let zero: Vec<usize> = (0..n).filter(|&i| norm(data.row(rows[i])) == 0.0).collect();
    if metric == Metric::Cosine && !zero.is_empty() {
        let w = format!("{} zero feature vectors; their cosine similarity is taken as 0", zero.len());
        warn!("{w}");
        warnings.push(w);
    }
    let lists = par::map_range(n, |i| {
        let xi = data.row(rows[i]);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let xj = data.row(rows[j]);
                // Smaller key = nearer.
                let key = match metric {
                    Metric::Cosine => -cosine_or_zero(xi, xj),
                    Metric::Euclidean => euclidean(xi, xj),
                };
                (key, j)
            })
            .collect();
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k_eff < cand.len() {
            cand.select_nth_unstable_by(k_eff, by_key);
            cand.truncate(k_eff);
        }
        cand.sort_by(by_key);
        cand.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    Ok(Neighbors { k: k_eff, lists, warnings })
}

/// Directed k-NN graph with signed edge weights and its quadratic form.
#[derive(Clone, Debug)]
pub struct SimilarityGraph {
    pub k: usize,
    pub metric: Metric,
    /// Dataset ids of the nodes, in node order.
    pub ids: Vec<u64>,
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub quadratic: SignedQuadratic,
    pub warnings: Vec<String>,
}

impl SimilarityGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// Graph over `rows` of `data` (node `a` is `rows[a]`).
    pub fn build(data: &Dataset, rows: &[usize], cfg: &GraphConfig) -> Result<Self> {
        let nb = knn(data, rows, cfg.k, cfg.metric)?;
        let weights: Vec<Vec<f64>> = nb
            .lists
            .iter()
            .enumerate()
            .map(|(i, list)| {
                let (xi, yi) = (data.row(rows[i]), data.label(rows[i]));
                list.iter().map(|&j| edge_weight(cfg.metric, xi, yi, data.row(rows[j]), data.label(rows[j]))).collect()
            })
            .collect();
        let quadratic = assemble_quadratic(rows.len(), &nb.lists, &weights)?;
        let ids = rows.iter().map(|&r| data.ids()[r]).collect();
        Ok(SimilarityGraph { k: nb.k, metric: cfg.metric, ids, neighbors: nb.lists, weights, quadratic, warnings: nb.warnings })
    }

    /// Graph from explicit neighbour lists and edge weights.
    pub fn from_lists(ids: Vec<u64>, metric: Metric, neighbors: Vec<Vec<usize>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != neighbors.len() {
            return Err(Error::dims(format!("{} ids for {} nodes", ids.len(), neighbors.len())));
        }
        let quadratic = assemble_quadratic(ids.len(), &neighbors, &weights)?;
        let k = neighbors.iter().map(Vec::len).max().unwrap_or(0);
        Ok(SimilarityGraph { k, metric, ids, neighbors, weights, quadratic, warnings: Vec::new() })
    }

    /// Graph over every row of `data`.
    pub fn build_all(data: &Dataset, cfg: &GraphConfig) -> Result<Self> {
        let rows: Vec<usize> = (0..data.len()).collect();
        Self::build(data, &rows, cfg)
    }

    /// `i,j,s_ij` edge table, one line per directed edge.
    pub fn write_edges<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["i", "j", "s_ij"])?;
        for (i, (list, ws)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (j, s) in list.iter().zip(ws) {
                wr.write_record([i.to_string(), j.to_string(), s.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Symmetric matrix `L` with `b^T L b = sum over directed edges of s (b_i - b_j)^2`,
/// stored as undirected couplings (`i < j`, summed weights) plus the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedQuadratic {
    n: usize,
    couplings: Vec<(usize, usize, f64)>,
    diag: Vec<f64>,
}

/// Accumulates each directed edge's rank-one term `s (e_i - e_j)(e_i - e_j)^T`.
pub fn assemble_quadratic(n: usize, neighbors: &[Vec<usize>], weights: &[Vec<f64>]) -> Result<SignedQuadratic> {
    if neighbors.len() != n || weights.len() != n {
        return Err(Error::dims(format!("{} neighbour lists, {} weight lists for {n} nodes", neighbors.len(), weights.len())));
    }
    let mut pairs: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    let mut diag = vec![0.0; n];
    for (i, (list, ws)) in neighbors.iter().zip(weights).enumerate() {
        if list.len() != ws.len() {
            return Err(Error::dims(format!("node {i}: {} neighbours, {} weights", list.len(), ws.len())));
        }
        for (&j, &s) in list.iter().zip(ws) {
            if j >= n || j == i {
                return Err(Error::invalid(format!("node {i}: bad neighbour {j}")));
            }
            diag[i] += s;
            diag[j] += s;
            *pairs.entry((i.min(j), i.max(j))).or_insert(0.0) += s;
        }
    }
    Ok(SignedQuadratic { n, couplings: pairs.into_iter().map(|((i, j), s)| (i, j, s)).collect(), diag })
}

impl SignedQuadratic {
    pub fn empty(n: usize) -> Self {
        SignedQuadratic { n, couplings: Vec::new(), diag: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Undirected couplings `(i, j, w)` with `i < j`; `L[i][j] = -w`.
    pub fn couplings(&self) -> &[(usize, usize, f64)] {
        &self.couplings
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn quad_form(&self, b: &[f64]) -> f64 {
        self.couplings.iter().map(|&(i, j, s)| s * (b[i] - b[j]).powi(2)).sum()
    }

    /// `L b`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.diag.iter().zip(b).map(|(d, v)| d * v).collect();
        for &(i, j, s) in &self.couplings {
            out[i] -= s * b[j];
            out[j] -= s * b[i];
        }
        out
    }

    /// Adds `scale * L` to `m`.
    pub fn add_to(&self, m: &mut DMatrix<f64>, scale: f64) {
        for (i, d) in self.diag.iter().enumerate() {
            m[(i, i)] += scale * d;
        }
        for &(i, j, s) in &self.couplings {
            m[(i, j)] -= scale * s;
            m[(j, i)] -= scale * s;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        self.add_to(&mut m, 1.0);
        m
    }
}

/// `|new \ old| / k`: the share of a point's neighbourhood that changed.
pub fn neighborhood_change_ratio<T: Eq + std::hash::Hash>(old: &[T], new: &[T], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let old: HashSet<&T> = old.iter().collect();
    new.iter().filter(|x| !old.contains(x)).count() as f64 / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_random_gaussian, Split};
    use rand::Rng;

    fn points(xs: &[[f64; 2]], ys: &[usize]) -> Dataset {
        Dataset::new(
            xs.iter().flat_map(|p| p.iter().copied()).collect(),
            2,
            ys.to_vec(),
            (0..xs.len() as u64).collect(),
            vec![Split::Train; xs.len()],
            2,
        )
        .unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn signed_similarity_cases() {
        assert_eq!(signed_similarity(&[1.0, 2.0], 1, &[1.0, 2.0], 1).unwrap().round(), 1.0);
        assert_eq!(signed_similarity(&[1.0, 2.0], 1, &[1.0, 2.0], 0).unwrap().round(), -1.0);
        assert_eq!(signed_similarity(&[1.0, 0.0], 0, &[0.0, 3.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn collinear_points_euclidean() {
        let d = points(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], &[0, 0, 0]);
        let nb = knn(&d, &[0, 1, 2], 1, Metric::Euclidean).unwrap();
        assert_eq!(nb.lists[1], vec![0]);
    }

    #[test]
    fn duplicate_points_tie_to_lower_index() {
        let d = points(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [-1.0, 0.5]], &[0, 0, 0, 0]);
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let nb = knn(&d, &[0, 1, 2, 3], 1, metric).unwrap();
            assert_eq!(nb.lists[0], vec![1]);
            assert_eq!(nb.lists[1], vec![0]);
            assert_eq!(nb.lists[2], vec![0]);
        }
    }

    #[test]
    fn k_truncated_with_warning() {
        let d = points(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], &[0, 1, 0]);
        let nb = knn(&d, &[0, 1, 2], 5, Metric::Cosine).unwrap();
        assert_eq!(nb.k, 2);
        assert_eq!(nb.warnings.len(), 1);
        assert!(nb.lists.iter().enumerate().all(|(i, l)| l.len() == 2 && !l.contains(&i)));
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let d = generate_random_gaussian(25, 2.0, 1.0, 12).unwrap();
        let rows: Vec<usize> = (0..50).collect();
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let nb = knn(&d, &rows, 5, metric).unwrap();
            for i in 0..50 {
                // Oracle: full stable sort of all other points.
                let mut all: Vec<usize> = (0..50).filter(|&j| j != i).collect();
                let dist = |j: usize| match metric {
                    Metric::Cosine => {
                        let (a, b) = (d.row(i), d.row(j));
                        -(a[0] * b[0] + a[1] * b[1]) / ((a[0].hypot(a[1])) * (b[0].hypot(b[1])))
                    }
                    Metric::Euclidean => (d.row(i)[0] - d.row(j)[0]).hypot(d.row(i)[1] - d.row(j)[1]),
                };
                all.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap());
                assert_eq!(nb.lists[i], all[..5].to_vec(), "row {i} {metric:?}");
            }
        }
    }

    #[test]
    fn quadratic_single_edge_and_null_space() {
        let q = assemble_quadratic(3, &[vec![1], vec![], vec![]], &[vec![1.0], vec![], vec![]]).unwrap();
        assert_eq!(q.quad_form(&[1.0, 0.0, 0.0]), 1.0);
        let l = q.to_dense();
        let v = [1.0, 0.0, 0.0];
        let lv: f64 = (0..3).map(|i| (0..3).map(|j| v[i] * l[(i, j)] * v[j]).sum::<f64>()).sum();
        assert_eq!(lv, 1.0);
        assert_eq!(q.quad_form(&[2.5, 2.5, 2.5]), 0.0);
    }

    fn random_graph(n: usize, k: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
        let mut rng = crate::rng::rng_from(seed);
        let mut nbrs = Vec::new();
        let mut ws = Vec::new();
        for i in 0..n {
            let mut l = Vec::new();
            while l.len() < k {
                let j = rng.random_range(0..n);
                if j != i && !l.contains(&j) {
                    l.push(j);
                }
            }
            ws.push(l.iter().map(|_| rng.random_range(-1.0..1.0)).collect());
            nbrs.push(l);
        }
        (nbrs, ws)
    }

    #[test]
    fn quadratic_matches_direct_sum_and_is_symmetric() {
        let (nbrs, ws) = random_graph(20, 4, 7);
        let q = assemble_quadratic(20, &nbrs, &ws).unwrap();
        let l = q.to_dense();
        assert_eq!(l, l.transpose());
        for i in 0..20 {
            assert!(l.row(i).sum().abs() < 1e-12);
        }
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let direct: f64 = (0..20).flat_map(|i| nbrs[i].iter().zip(&ws[i]).map(move |(&j, &s)| (i, j, s))).map(|(i, j, s)| s * (b[i] - b[j]).powi(2)).sum();
        let bv = nalgebra::DVector::from_vec(b.clone());
        let dense = (bv.transpose() * &l * &bv)[(0, 0)];
        assert!((q.quad_form(&b) - direct).abs() < 1e-12);
        assert!((dense - direct).abs() < 1e-12);
        let lb = q.apply(&b);
        let lb_dense = &l * &bv;
        for i in 0..20 {
            assert!((lb[i] - lb_dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn same_class_positive_graph_is_psd() {
        let d = generate_random_gaussian(15, 2.0, 1.0, 8).unwrap();
        let same = Dataset::new(d.features().to_vec(), 2, vec![0; 30], d.ids().to_vec(), d.splits().to_vec(), 2).unwrap();
        let g = SimilarityGraph::build_all(&same, &GraphConfig { k: 4, metric: Metric::Euclidean }).unwrap();
        let eig = g.quadratic.to_dense().symmetric_eigenvalues();
        assert!(eig.min() > -1e-9, "min eigenvalue {}", eig.min());
    }

    #[test]
    fn edge_contribution_signs() {
        let d = generate_random_gaussian(15, 2.0, 1.0, 9).unwrap();
        let g = SimilarityGraph::build_all(&d, &GraphConfig::default()).unwrap();
        for i in 0..g.n() {
            for (&j, &s) in g.neighbors[i].iter().zip(&g.weights[i]) {
                let cos = cosine(d.row(i), d.row(j)).unwrap();
                assert_eq!(s, if d.label(i) == d.label(j) { cos } else { -cos });
                // Near neighbours point the same way, so a value gap is penalised
                // for same-class pairs and rewarded across classes.
                if cos > 0.0 {
                    assert_eq!(s > 0.0, d.label(i) == d.label(j));
                }
            }
        }
    }

    #[test]
    fn change_ratio_cases() {
        assert_eq!(neighborhood_change_ratio(&[1, 2, 3], &[3, 2, 1], 3), 0.0);
        assert_eq!(neighborhood_change_ratio(&[1, 2, 3], &[4, 5, 6], 3), 1.0);
        assert_eq!(neighborhood_change_ratio(&[1, 2, 3, 4, 5], &[1, 2, 3, 8, 9], 5), 0.4);
    }
}
