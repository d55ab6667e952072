//! Reference implementations the library is checked against, written
//! without sharing code paths with `perturbdag-core` where it matters:
//! a dense Newton solver for Poisson regression, breadth-first reachability,
//! a Kahn acyclicity check and the naive log-count proxy.
//!
//! The acceptance suite lives in `tests/acceptance.rs`.

use std::collections::{BTreeSet, VecDeque};

use perturbdag_core::dataset::PerturbDataset;
use perturbdag_core::glm::{fit_poisson_qmle, GlmConfig};
use perturbdag_core::proxy_iv::{build_proxy, second_stage_design, Proxy, ProxyError};
use perturbdag_core::simulator::GroundTruth;

/// Maximizes the Poisson log-likelihood by Newton–Raphson with Gaussian
/// elimination and step halving, starting from zero. `x` holds one row per
/// observation.
pub fn newton_poisson(y: &[u32], x: &[Vec<f64>], offset: &[f64]) -> Vec<f64> {
    let q = x[0].len();
    let mut beta = vec![0.0; q];
    let loglik = |b: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .zip(offset)
            .map(|((row, &yi), o)| {
                let eta = o + dot(row, b);
                f64::from(yi) * eta - eta.exp()
            })
            .sum()
    };
    for _ in 0..200 {
        let mut g = vec![0.0; q];
        let mut h = vec![vec![0.0; q]; q];
        for ((row, &yi), o) in x.iter().zip(y).zip(offset) {
            let mu = (o + dot(row, &beta)).exp();
            for r in 0..q {
                g[r] += (f64::from(yi) - mu) * row[r];
                for s in 0..q {
                    h[r][s] += mu * row[r] * row[s];
                }
            }
        }
        let step = solve(h, g);
        let base = loglik(&beta);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            if loglik(&cand) >= base || t < 1e-10 {
                beta = cand;
                break;
            }
            t /= 2.0;
        }
        if step.iter().fold(0.0f64, |m, s| m.max(s.abs())) < 1e-13 {
            break;
        }
    }
    beta
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Gauss–Jordan with partial pivoting.
fn solve(a: Vec<Vec<f64>>, b: Vec<f64>) -> Vec<f64> {
    let q = b.len();
    let mut aug: Vec<Vec<f64>> = a.into_iter().zip(b).map(|(mut r, bi)| {
        r.push(bi);
        r
    }).collect();
    for c in 0..q {
        let piv = (c..q).max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs())).unwrap();
        aug.swap(c, piv);
        for r in 0..q {
            if r != c {
                let f = aug[r][c] / aug[c][c];
                for s in c..=q {
                    aug[r][s] -= f * aug[c][s];
                }
            }
        }
    }
    (0..q).map(|r| aug[r][q] / aug[r][r]).collect()
}

/// Nodes reachable from `start` in one or more steps.
pub fn bfs_reach(rel: &[BTreeSet<usize>], start: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<usize> = rel[start].iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        if seen.insert(v) {
            queue.extend(rel[v].iter().copied());
        }
    }
    seen
}

/// Kahn's algorithm on `p` nodes.
pub fn is_acyclic(p: usize, edges: &[(usize, usize)]) -> bool {
    let mut indeg = vec![0usize; p];
    let mut out = vec![Vec::new(); p];
    for &(a, b) in edges {
        indeg[b] += 1;
        out[a].push(b);
    }
    let mut ready: Vec<usize> = (0..p).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &w in &out[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    seen == p
}

/// True ancestors of gene `j`.
pub fn true_ancestors(truth: &GroundTruth, j: usize) -> Vec<usize> {
    let des = truth.descendants().expect("acyclic truth");
    (0..truth.n_genes()).filter(|&a| des[a].contains(&j)).collect()
}

/// Fitted proxies for `genes`, each built on its true ancestor set.
pub fn true_proxies(ds: &PerturbDataset, truth: &GroundTruth, genes: &[usize]) -> Result<Vec<Proxy>, ProxyError> {
    genes
        .iter()
        .map(|&k| {
            let anc: BTreeSet<usize> = true_ancestors(truth, k).into_iter().collect();
            build_proxy(ds, k, &anc, &GlmConfig::default())
        })
        .collect()
}

/// Second-stage coefficients of `parents` when each latent expression is
/// replaced by `log(Y/ℓ + 1)` of the observed counts.
pub fn naive_theta(ds: &PerturbDataset, child: usize, parents: &[usize]) -> Result<Vec<f64>, String> {
    let mut proxies = Vec::with_capacity(parents.len());
    for &k in parents {
        let mut p = build_proxy(ds, k, &BTreeSet::new(), &GlmConfig::default()).map_err(|e| e.to_string())?;
        p.values = (0..ds.n_cells()).map(|i| (f64::from(ds.count(i, k)) / ds.size_factors()[i] + 1.0).ln()).collect();
        proxies.push(p);
    }
    let design = second_stage_design(ds, child, &proxies).map_err(|e| e.to_string())?;
    let fit = fit_poisson_qmle(&ds.gene_counts(child), &design, &ds.log_size_factors(), &GlmConfig::default())
        .map_err(|e| e.to_string())?;
    let first = fit.coefficients.len() - proxies.len();
    Ok(fit.coefficients[first..].to_vec())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
