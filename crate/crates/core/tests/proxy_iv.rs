use std::collections::BTreeSet;

use perturbdag_core::dataset::{DatasetParts, PerturbDataset};
use perturbdag_core::glm::{fit_poisson_qmle, mean_score, GlmConfig};
use perturbdag_core::linalg::symmetric_eigenvalues;
use perturbdag_core::proxy_iv::{
    build_proxy, fit_proxy, fit_second_stage, predict_proxy, second_stage_design, Proxy, ProxyConfig, ProxyError,
};
use perturbdag_core::simulator::{oracle_population_proxy, simulate, GroundTruth, TrueEdge};

fn glm() -> GlmConfig {
    GlmConfig::default()
}

/// Proxies for `candidates` built with the true ancestor sets.
fn true_proxies(ds: &PerturbDataset, truth: &GroundTruth, candidates: &[usize]) -> Vec<Proxy> {
    let des = truth.descendants().unwrap();
    candidates
        .iter()
        .map(|&k| {
            let anc: BTreeSet<usize> = (0..truth.n_genes()).filter(|&a| des[a].contains(&k)).collect();
            build_proxy(ds, k, &anc, &glm()).unwrap()
        })
        .collect()
}

fn true_ancestors(truth: &GroundTruth, j: usize) -> Vec<usize> {
    let des = truth.descendants().unwrap();
    (0..truth.n_genes()).filter(|&a| des[a].contains(&j)).collect()
}

#[test]
fn constant_expression_intercept_recovers_log_mean() {
    let mut truth = GroundTruth::with_edges(vec!["g1".into()], Vec::new(), 20000);
    truth.design.covariates.clear();
    truth.beta = vec![Vec::new()];
    truth.noise_sd = vec![0.0];
    let sim = simulate(&truth, 20000, Some(1)).unwrap();
    let model = fit_proxy(&sim.dataset, 0, &BTreeSet::new(), &glm()).unwrap();
    assert_eq!(model.regressor_labels(), vec!["intercept".to_string(), "D_g1".to_string()]);
    let se = model.xi_covariance[(0, 0)].sqrt();
    assert!((model.xi[0] - truth.intercepts[0]).abs() < 3.0 * se, "{} vs {}", model.xi[0], truth.intercepts[0]);
    let se_tau = model.xi_covariance[(1, 1)].sqrt();
    assert!((model.xi[1] - truth.tau[0]).abs() < 3.0 * se_tau);
}

#[test]
fn own_gene_among_ancestors_is_rejected() {
    let sim = simulate(&GroundTruth::chain(2, 0.5, 500), 500, Some(2)).unwrap();
    let err = fit_proxy(&sim.dataset, 1, &BTreeSet::from([0, 1]), &glm()).unwrap_err();
    assert_eq!(err, ProxyError::SelfAncestor(1));
}

#[test]
fn ancestor_guide_shifts_proxy_by_path_effect() {
    let truth = GroundTruth::chain(2, 0.5, 16000);
    let sim = simulate(&truth, 16000, Some(3)).unwrap();
    let model = fit_proxy(&sim.dataset, 1, &BTreeSet::from([0]), &glm()).unwrap();
    let c = model.regressor_labels().iter().position(|l| l == "D_g1").unwrap();
    let expected = 0.5 * truth.tau[0];
    let se = model.xi_covariance[(c, c)].sqrt();
    assert!((model.xi[c] - expected).abs() < 3.0 * se, "{} vs {expected}", model.xi[c]);
}

#[test]
fn prediction_is_a_deterministic_linear_map() {
    let truth = GroundTruth::chain(3, 0.5, 3000);
    let sim = simulate(&truth, 3000, Some(4)).unwrap();
    let ds = &sim.dataset;
    let model = fit_proxy(ds, 2, &BTreeSet::from([0, 1]), &glm()).unwrap();
    let eta = predict_proxy(&model, ds).unwrap();

    // Same (D, X) row, same value.
    let mut parts = ds.clone().into_parts();
    let p = parts.gene_names.len();
    for g in 0..p {
        parts.guides[p + g] = parts.guides[g];
    }
    parts.covariates[1] = parts.covariates[0];
    parts.counts[p] = parts.counts[0] + 17;
    parts.size_factors[1] = parts.size_factors[0] * 3.0;
    let twin = PerturbDataset::new(parts).unwrap();
    let eta_twin = predict_proxy(&model, &twin).unwrap();
    assert_eq!(eta_twin[0].to_bits(), eta_twin[1].to_bits());

    // Control cell with X = 0 gives the intercept.
    let mut parts = ds.clone().into_parts();
    let control = (0..ds.n_cells()).find(|&i| ds.is_control(i)).unwrap();
    parts.covariates[control] = 0.0;
    let zeroed = PerturbDataset::new(parts).unwrap();
    assert_eq!(predict_proxy(&model, &zeroed).unwrap()[control], model.xi[0]);

    // Reordering cells reorders the proxy.
    let order: Vec<usize> = (0..ds.n_cells()).rev().collect();
    let parts = ds.clone().into_parts();
    let reordered = PerturbDataset::new(DatasetParts {
        cell_ids: order.iter().map(|&i| parts.cell_ids[i].clone()).collect(),
        gene_names: parts.gene_names.clone(),
        counts: order.iter().flat_map(|&i| parts.counts[i * p..(i + 1) * p].to_vec()).collect(),
        guides: order.iter().flat_map(|&i| parts.guides[i * p..(i + 1) * p].to_vec()).collect(),
        covariate_names: parts.covariate_names.clone(),
        covariates: order.iter().map(|&i| parts.covariates[i]).collect(),
        size_factors: order.iter().map(|&i| parts.size_factors[i]).collect(),
    })
    .unwrap();
    let eta_rev = predict_proxy(&model, &reordered).unwrap();
    for (a, &i) in eta_rev.iter().zip(&order) {
        assert_eq!(a.to_bits(), eta[i].to_bits());
    }

    let mut missing = ds.clone().into_parts();
    missing.covariate_names = vec!["other".into()];
    assert!(predict_proxy(&model, &PerturbDataset::new(missing).unwrap()).is_err());
}

#[test]
fn no_candidates_leaves_the_sandwich_untouched() {
    let sim = simulate(&GroundTruth::chain(2, 0.5, 2000), 2000, Some(5)).unwrap();
    let fit = fit_second_stage(&sim.dataset, 1, &[], &ProxyConfig::default()).unwrap();
    assert!(fit.edge_stats.is_empty());
    assert!(fit.mt_covariance.max_abs_diff(&fit.glm.sandwich_covariance) < 1e-15);
}

#[test]
fn cross_derivatives_match_finite_differences() {
    let truth = GroundTruth::eight_gene();
    let sim = simulate(&truth, 4000, Some(6)).unwrap();
    let ds = &sim.dataset;
    let j = 5;
    let cands = true_ancestors(&truth, j);
    let proxies = true_proxies(ds, &truth, &cands);
    let fit = fit_second_stage(ds, j, &proxies, &ProxyConfig::default()).unwrap();
    let y = ds.gene_counts(j);
    let offset = ds.log_size_factors();
    let beta = &fit.glm.coefficients;
    for (idx, proxy) in proxies.iter().enumerate() {
        let c = &fit.cross_derivatives[idx];
        for s in 0..proxy.model.xi.len() {
            let h = 1e-6;
            let score_at = |by: f64| {
                let mut moved = proxies.clone();
                moved[idx].model.xi[s] += by;
                moved[idx].values = predict_proxy(&moved[idx].model, ds).unwrap();
                mean_score(&y, &second_stage_design(ds, j, &moved).unwrap(), &offset, beta)
            };
            let (up, dn) = (score_at(h), score_at(-h));
            let scale = (0..c.rows()).map(|r| c[(r, s)].abs()).fold(0.0, f64::max);
            for r in 0..c.rows() {
                let fd = (up[r] - dn[r]) / (2.0 * h);
                assert!(
                    (fd - c[(r, s)]).abs() <= 1e-4 * scale.max(1e-12),
                    "proxy {idx} entry ({r},{s}): fd {fd} analytic {}",
                    c[(r, s)]
                );
            }
        }
    }
}

#[test]
fn murphy_topel_adds_a_positive_semidefinite_term() {
    let truth = GroundTruth::eight_gene();
    for seed in 0..5 {
        let sim = simulate(&truth, 4000, Some(100 + seed)).unwrap();
        for j in [1, 3, 5] {
            let proxies = true_proxies(&sim.dataset, &truth, &true_ancestors(&truth, j));
            let fit = fit_second_stage(&sim.dataset, j, &proxies, &ProxyConfig::default()).unwrap();
            let diff = fit.mt_covariance.sub(&fit.glm.sandwich_covariance);
            let scale = fit.mt_covariance.diagonal().into_iter().fold(0.0, f64::max);
            let min_eig = symmetric_eigenvalues(&diff).into_iter().fold(f64::INFINITY, f64::min);
            assert!(min_eig >= -1e-10 * scale, "min eigenvalue {min_eig}");
            let mt_eig = symmetric_eigenvalues(&fit.mt_covariance).into_iter().fold(f64::INFINITY, f64::min);
            assert!(mt_eig >= -1e-12 * scale);
            for s in &fit.edge_stats {
                assert!(s.se_mt >= s.se_sandwich - 1e-12);
            }
        }
    }
}

#[test]
fn identical_regressor_spans_are_flagged() {
    // Two genes sharing every regressor and, with no guide of their own in
    // the second-stage data, collinear proxies.
    let truth = GroundTruth::chain(3, 0.5, 3000);
    let sim = simulate(&truth, 3000, Some(7)).unwrap();
    let ds = &sim.dataset;
    let a = build_proxy(ds, 0, &BTreeSet::new(), &glm()).unwrap();
    let mut b = a.clone();
    b.model.gene = 1;
    b.model.gene_name = "g2".into();
    b.values = a.values.iter().map(|v| 2.0 * v + 1.0).collect();
    match fit_second_stage(ds, 2, &[a, b], &ProxyConfig::default()).unwrap_err() {
        ProxyError::Collinear { first_name, second_name, .. } => {
            assert_eq!((first_name.as_str(), second_name.as_str()), ("g1", "g2"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn fitted_proxies_approach_the_population_proxy() {
    let truth = GroundTruth::chain(3, 0.5, 32000);
    let sim = simulate(&truth, 32000, Some(8)).unwrap();
    let ds = &sim.dataset;
    let proxies = true_proxies(ds, &truth, &[0, 1, 2]);
    let mut worst: f64 = 0.0;
    for i in 0..ds.n_cells() {
        let oracle = oracle_population_proxy(&truth, ds.target(i), ds.covariate_row(i)).unwrap();
        for (k, proxy) in proxies.iter().enumerate() {
            worst = worst.max((proxy.values[i] - oracle[k]).abs());
        }
    }
    assert!(worst < 0.05, "max deviation {worst}");
}

#[test]
fn mt_standard_errors_match_the_bootstrap_spread() {
    let truth = GroundTruth::chain(3, 0.5, 4000);
    let mut theta = Vec::new();
    let mut se = Vec::new();
    for rep in 0..200 {
        let sim = simulate(&truth, 4000, Some(20_000 + rep)).unwrap();
        let proxies = true_proxies(&sim.dataset, &truth, &[0, 1]);
        let fit = fit_second_stage(&sim.dataset, 2, &proxies, &ProxyConfig::default()).unwrap();
        let s = &fit.edge_stats[1];
        theta.push(s.theta);
        se.push(s.se_mt);
    }
    let n = theta.len() as f64;
    let m = theta.iter().sum::<f64>() / n;
    let spread = (theta.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ratio = se.iter().sum::<f64>() / n / spread;
    assert!((0.85..=1.15).contains(&ratio), "MT/bootstrap {ratio}");
}

fn naive_theta(ds: &PerturbDataset, j: usize, proxies: &[Proxy]) -> Vec<f64> {
    let mut naive = proxies.to_vec();
    for p in &mut naive {
        let k = p.model.gene;
        p.values = (0..ds.n_cells()).map(|i| (f64::from(ds.count(i, k)) / ds.size_factors()[i] + 1.0).ln()).collect();
    }
    let design = second_stage_design(ds, j, &naive).unwrap();
    let fit = fit_poisson_qmle(&ds.gene_counts(j), &design, &ds.log_size_factors(), &glm()).unwrap();
    let first = fit.coefficients.len() - naive.len();
    fit.coefficients[first..].to_vec()
}

/// Per-edge mean estimate and its Monte-Carlo standard error.
fn edge_means(samples: &[Vec<f64>]) -> Vec<(f64, f64)> {
    samples
        .iter()
        .map(|v| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (var / n).sqrt())
        })
        .collect()
}

#[test]
fn proxy_estimates_are_consistent_while_the_naive_foil_is_not() {
    let truth = GroundTruth::eight_gene();
    let edges: Vec<TrueEdge> = truth.edges.clone();
    let mut worst_t = Vec::new();
    let mut naive_worst_t = 0.0;
    let mut naive_worst_bias = 0.0;
    for (n, reps) in [(2000usize, 40u64), (8000, 20), (32000, 10)] {
        let mut proxy = vec![Vec::new(); edges.len()];
        let mut naive = vec![Vec::new(); edges.len()];
        for rep in 0..reps {
            let sim = simulate(&truth, n, Some(40_000 + rep)).unwrap();
            for j in 0..truth.n_genes() {
                let cands = true_ancestors(&truth, j);
                if cands.is_empty() {
                    continue;
                }
                let proxies = true_proxies(&sim.dataset, &truth, &cands);
                let fit = fit_second_stage(&sim.dataset, j, &proxies, &ProxyConfig::default()).unwrap();
                let foil = naive_theta(&sim.dataset, j, &proxies);
                for (e, edge) in edges.iter().enumerate().filter(|(_, e)| e.child == j) {
                    let c = cands.iter().position(|&k| k == edge.parent).unwrap();
                    proxy[e].push(fit.edge_stats[c].theta);
                    naive[e].push(foil[c]);
                }
            }
        }
        let t_max = |means: &[(f64, f64)]| {
            means.iter().zip(&edges).map(|((m, se), e)| (m - e.weight).abs() / se).fold(0.0, f64::max)
        };
        worst_t.push(t_max(&edge_means(&proxy)));
        if n == 32000 {
            let means = edge_means(&naive);
            naive_worst_t = t_max(&means);
            naive_worst_bias = means.iter().zip(&edges).map(|((m, _), e)| (m - e.weight).abs()).fold(0.0, f64::max);
        }
    }
    // No edge shows a detectable bias at the largest N, while the foil's
    // bias stays large relative to its Monte-Carlo error.
    assert!(worst_t[2] < 3.5, "largest |bias| / MC SE by N: {worst_t:?}");
    assert!(naive_worst_t > 3.5 && naive_worst_bias > 0.05, "naive: t {naive_worst_t}, bias {naive_worst_bias}");
}
