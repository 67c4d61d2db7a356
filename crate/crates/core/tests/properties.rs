use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use gloc_core::dataset::{generate_random_gaussian, Dataset, Split, TableSchema};
use gloc_core::evaluation::{compare, mse, spearman};
use gloc_core::graph::{assemble_quadratic, Metric, SimilarityGraph};
use gloc_core::oracle::{exact_shapley, mc_shapley, FnUtility};
use gloc_core::solver::{lasso_kkt_residual, solve_lasso, solve_quadratic, Conditioning, LassoOptions, QuadraticProblem, SolverOptions};
use gloc_core::valuation::{refine, RefineConfig, ValueVector};

/// Random directed k-NN style lists: node i gets up to `k` distinct neighbours != i.
fn random_lists(n: usize, k: usize, seeds: &[u64]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let mut neighbors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut list = Vec::new();
        let mut ws = Vec::new();
        for t in 0..k {
            let s = seeds[(i * k + t) % seeds.len()].wrapping_mul(2654435761).wrapping_add((i * 31 + t) as u64);
            let j = (s % n as u64) as usize;
            if j == i || list.contains(&j) {
                continue;
            }
            list.push(j);
            ws.push(((s >> 11) % 2001) as f64 / 1000.0 - 1.0);
        }
        neighbors.push(list);
        weights.push(ws);
    }
    (neighbors, weights)
}

fn direct_sum(neighbors: &[Vec<usize>], weights: &[Vec<f64>], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, (list, ws)) in neighbors.iter().zip(weights).enumerate() {
        for (&j, &w) in list.iter().zip(ws) {
            s += w * (b[i] - b[j]).powi(2);
        }
    }
    s
}

/// Gaussian elimination with partial pivoting; test-only reference.
fn gauss_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<Vec<f64>> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).chain(std::iter::once(b[i])).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))?;
        if m[p][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Some(x)
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| data[(i * cols + j) % data.len()] * (1.0 + ((i + 2 * j) % 5) as f64 * 0.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_form_matches_double_sum(n in 2usize..30, k in 1usize..6, seeds in prop::collection::vec(any::<u64>(), 8..64),
                                         b in prop::collection::vec(-5.0f64..5.0, 30)) {
        let (nb, ws) = random_lists(n, k, &seeds);
        let l = assemble_quadratic(n, &nb, &ws).unwrap();
        let b = &b[..n];
        let direct = direct_sum(&nb, &ws, b);
        prop_assert!((l.quad_form(b) - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        let lb = l.apply(b);
        let via_apply: f64 = b.iter().zip(&lb).map(|(x, y)| x * y).sum();
        prop_assert!((via_apply - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
        for v in l.apply(&vec![1.0; n]) {
            prop_assert!(v.abs() <= 1e-12);
        }
        let dense = l.to_dense();
        prop_assert_eq!(dense.clone(), dense.transpose());
    }

    #[test]
    fn quadratic_solver_is_stationary(m in 3usize..40, n in 1usize..20, ridge in 0.0f64..2.0, gw in 0.0f64..1.0,
                                      data in prop::collection::vec(-2.0f64..2.0, 16..64), seeds in prop::collection::vec(any::<u64>(), 8..32)) {
        let x = matrix(m, n, &data);
        let u = DVector::from_fn(m, |i, _| data[(3 * i + 1) % data.len()]);
        let (nb, ws) = random_lists(n, 3, &seeds);
        let l = assemble_quadratic(n, &nb, &ws).unwrap();
        let prob = QuadraticProblem::new(n).with_data_fit(&x, &u).with_ridge(ridge).with_graph(&l, gw);
        let rep = solve_quadratic(&prob, &SolverOptions::default()).unwrap();
        let tol = 1e-8 * (1.0 + rep.initial_grad_norm);
        prop_assert!(rep.grad_norm <= tol || rep.conditioning == Conditioning::Damped);
        let g = prob.gradient(&rep.beta);
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((gn - rep.grad_norm).abs() <= 1e-6 * (1.0 + gn));
        if rep.conditioning != Conditioning::Damped {
            let (a, rhs) = prob.system();
            if let Some(reference) = gauss_solve(&a, &rhs) {
                let scale = 1.0 + reference.iter().fold(0.0f64, |s, v| s.max(v.abs()));
                for (p, q) in rep.beta.iter().zip(&reference) {
                    prop_assert!((p - q).abs() <= 1e-6 * scale, "{} vs {}", p, q);
                }
            }
        }
    }

    #[test]
    fn lasso_satisfies_kkt(m in 5usize..40, n in 1usize..15, frac in 0.0f64..1.2,
                           data in prop::collection::vec(-2.0f64..2.0, 16..64)) {
        let x = matrix(m, n, &data);
        let u = DVector::from_fn(m, |i, _| data[(5 * i + 2) % data.len()]);
        let lmax = x.tr_mul(&u).iter().fold(0.0f64, |s, v| s.max(2.0 * v.abs()));
        let lambda = frac * lmax;
        let rep = solve_lasso(&x, &u, lambda, &LassoOptions::default()).unwrap();
        prop_assert!(rep.converged);
        // independent residual: subgradient conditions of |U - Xb|^2 + lambda |b|_1
        let r = &u - &x * DVector::from_column_slice(&rep.beta);
        for j in 0..n {
            let gj = 2.0 * x.column(j).dot(&r);
            let v = if rep.beta[j] == 0.0 { (gj.abs() - lambda).max(0.0) } else { (gj - lambda * rep.beta[j].signum()).abs() };
            prop_assert!(v <= 1e-6);
        }
        prop_assert!(lasso_kkt_residual(&x, &u, lambda, &rep.beta) <= 1e-6);
        if frac >= 1.0 {
            prop_assert!(rep.beta.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn shapley_axioms_hold(coef in prop::collection::vec(-1.0f64..1.0, 7), pair in -1.0f64..1.0) {
        // players 0..7 additive with a synergy between 0 and 1, player 7 null
        let n = 8;
        let u = FnUtility::new(n, |s: &[usize]| {
            let mut v: f64 = s.iter().filter(|&&i| i < 7).map(|&i| coef[i]).sum();
            if s.contains(&0) && s.contains(&1) {
                v += pair;
            }
            v
        });
        let ids: Vec<u64> = (0..n as u64).collect();
        let sv = exact_shapley(&u, &ids).unwrap();
        let total: f64 = coef.iter().sum::<f64>() + pair;
        assert_abs_diff_eq!(sv.values.iter().sum::<f64>(), total, epsilon = 1e-9);
        prop_assert_eq!(sv.values[7], 0.0);
        for i in 2..7 {
            prop_assert!((sv.values[i] - coef[i]).abs() <= 1e-12);
        }
        prop_assert!((sv.values[0] - coef[0] - pair / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_are_symmetric(a in prop::collection::vec(-3.0f64..3.0, 3..40), shift in -1.0f64..1.0) {
        let n = a.len();
        let ids: Vec<u64> = (0..n as u64).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.5 + shift * (i as f64).sin()).collect();
        let va = ValueVector::new(a.clone(), "a", ids.clone()).unwrap();
        let vb = ValueVector::new(b, "b", ids).unwrap();
        prop_assert_eq!(mse(&va, &vb).unwrap(), mse(&vb, &va).unwrap());
        let c = compare(&va, &vb).unwrap();
        prop_assert!(c.mse >= 0.0 && c.mae >= 0.0);
        prop_assert!(c.mae * c.mae <= c.mse + 1e-12);
        if a.iter().any(|v| *v != a[0]) {
            prop_assert!((spearman(&va, &va).unwrap() - 1.0).abs() <= 1e-12);
        }
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c.spearman));
    }
}

#[test]
fn mc_converges_to_exact_on_a_small_game() {
    let w = [0.3, -0.2, 0.5, 0.1, 0.0, 0.25];
    let u = FnUtility::new(6, |s: &[usize]| {
        let a: f64 = s.iter().map(|&i| w[i]).sum();
        a * a
    });
    let ids: Vec<u64> = (10..16).collect();
    let exact = exact_shapley(&u, &ids).unwrap();
    let mc = mc_shapley(&u, &ids, 4000, 3).unwrap();
    let range = exact.values.iter().cloned().fold(f64::MIN, f64::max) - exact.values.iter().cloned().fold(f64::MAX, f64::min);
    for (a, b) in mc.values.iter().zip(&exact.values) {
        assert!((a - b).abs() <= 0.02 * range, "{a} vs {b}");
    }
}

#[test]
fn refine_pulls_toward_neighbours_and_stays_bounded() {
    // two same-class neighbours, positive edge both ways
    let g = SimilarityGraph::from_lists(vec![1, 2, 3], Metric::Cosine, vec![vec![1], vec![0], vec![]], vec![vec![1.0], vec![1.0], vec![]]).unwrap();
    let base = ValueVector::new(vec![1.0, -1.0, 0.5], "ame", vec![1, 2, 3]).unwrap();
    let out = refine(&base, &g, &RefineConfig::default()).unwrap();
    assert_eq!(out.method, "refined:ame");
    assert!(out.values[0] < 1.0 && out.values[1] > -1.0);
    assert!((out.values[0] + out.values[1]).abs() < 1e-12);
    // isolated node: (eta2 / (eta1 + eta2)) * base
    assert_abs_diff_eq!(out.values[2], 5.0 / 5.01 * 0.5, epsilon = 1e-12);
}

#[test]
fn dataset_table_round_trip() {
    let d = generate_random_gaussian(6, 2.0, 1.0, 9).unwrap().with_split(Split::Valid);
    let mut buf = Vec::new();
    d.write_table(&mut buf).unwrap();
    let back = Dataset::read_table(buf.as_slice(), &TableSchema::default()).unwrap();
    assert_eq!(back.ids(), d.ids());
    assert_eq!(back.labels(), d.labels());
    assert_eq!(back.features(), d.features());
    assert_eq!(back.splits(), d.splits());
    assert_eq!(back.digest(), d.digest());
}
