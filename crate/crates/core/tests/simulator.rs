use perturbdag_core::dag_search::{CausalDag, EdgeEstimate};
use perturbdag_core::exec::Executor;
use perturbdag_core::fdr::{OnlineFdrState, SpendingSequence};
use perturbdag_core::simulator::{
    evaluate, oracle_population_proxy, simulate, simulate_with, ConfounderRule, ExpressionModel, GroundTruth,
    SimulatorError, TrueEdge,
};

fn bare_single_gene(n: usize) -> GroundTruth {
    let mut t = GroundTruth::with_edges(vec!["g1".into()], Vec::new(), n);
    t.intercepts = vec![2f64.ln()];
    t.design.covariates.clear();
    t.beta = vec![Vec::new()];
    t.noise_sd = vec![0.0];
    t.design.guide_weights = vec![0.0];
    t
}

#[test]
fn poisson_mean_identity() {
    let t = bare_single_gene(100_000);
    let sim = simulate(&t, 100_000, Some(1)).unwrap();
    let ds = &sim.dataset;
    assert!((0..ds.n_cells()).all(|i| ds.is_control(i)));
    let mean = (0..ds.n_cells()).map(|i| f64::from(ds.count(i, 0)) / ds.size_factors()[i]).sum::<f64>() / ds.n_cells() as f64;
    assert!((1.9..=2.1).contains(&mean), "{mean}");
}

#[test]
fn gamma_prior_gives_negative_binomial_variance() {
    let mut t = bare_single_gene(100_000);
    t.intercepts = vec![5f64.ln()];
    t.design.size_factor_sd_log = 0.0;
    t.expression = ExpressionModel::Gamma { dispersion: vec![0.5] };
    let sim = simulate(&t, 100_000, Some(2)).unwrap();
    let y: Vec<f64> = sim.dataset.gene_counts(0).into_iter().map(f64::from).collect();
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let expected = 5.0 + 0.5 * 25.0;
    assert!(var > m * 1.5);
    assert!((var / expected - 1.0).abs() < 0.1, "variance {var}, expected {expected}");
}

#[test]
fn eight_gene_design_shape() {
    let t = GroundTruth::eight_gene();
    assert_eq!(t.n_genes(), 8);
    assert_eq!(t.design.n_cells, 8000);
    assert!(t.edges.iter().all(|e| e.weight.abs() == 0.5));
    let sim = simulate(&t, 8000, Some(3)).unwrap();
    assert_eq!(sim.truth.seed, Some(3));
    let counts = sim.dataset.perturbed_cell_counts();
    assert!(counts.iter().all(|&c| (300..=450).contains(&c)), "{counts:?}");
    let controls = sim.dataset.control_cells().len();
    assert!((4700..=5300).contains(&controls), "{controls}");
}

#[test]
fn invalid_truths_are_refused() {
    let t = GroundTruth::chain(3, 0.5, 100);
    assert_eq!(simulate(&t, 100, None).unwrap_err(), SimulatorError::MissingSeed);
    let mut cyclic = t.clone();
    cyclic.edges.push(TrueEdge { parent: 2, child: 0, weight: 0.5 });
    match simulate(&cyclic, 100, Some(1)).unwrap_err() {
        SimulatorError::Cyclic(names) => {
            assert_eq!(names.first(), names.last());
            assert!(names.len() == 4);
        }
        other => panic!("{other:?}"),
    }
    let mut zero_tau = t.clone();
    zero_tau.tau[1] = 0.0;
    assert!(matches!(simulate(&zero_tau, 100, Some(1)), Err(SimulatorError::Invalid(_))));
    let mut quad = t;
    quad.confounder.dim = 1;
    quad.confounder.noise_sd = vec![1.0];
    quad.confounder.gamma = vec![vec![0.3]; 3];
    quad.confounder.rule = ConfounderRule::QuadraticInX { loadings: vec![vec![1.0]] };
    assert!(simulate(&quad, 100, Some(1)).is_ok());
    assert_eq!(oracle_population_proxy(&quad, None, &[0.0]).unwrap_err(), SimulatorError::NonlinearConfounder);
}

#[test]
fn relabelled_genes_permute_the_output() {
    let t = GroundTruth::eight_gene();
    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4]; // new index i holds old gene perm[i]
    let mut inv = [0usize; 8];
    for (i, &o) in perm.iter().enumerate() {
        inv[o] = i;
    }
    let mut u = t.clone();
    u.gene_names = perm.iter().map(|&o| t.gene_names[o].clone()).collect();
    u.intercepts = perm.iter().map(|&o| t.intercepts[o]).collect();
    u.tau = perm.iter().map(|&o| t.tau[o]).collect();
    u.beta = perm.iter().map(|&o| t.beta[o].clone()).collect();
    u.noise_sd = perm.iter().map(|&o| t.noise_sd[o]).collect();
    u.confounder.gamma = perm.iter().map(|&o| t.confounder.gamma[o].clone()).collect();
    u.design.guide_weights = perm.iter().map(|&o| t.design.guide_weights[o]).collect();
    u.edges = t.edges.iter().map(|e| TrueEdge { parent: inv[e.parent], child: inv[e.child], weight: e.weight }).collect();
    let a = simulate(&t, 3000, Some(4)).unwrap().dataset;
    let b = simulate(&u, 3000, Some(4)).unwrap().dataset;
    for i in 0..a.n_cells() {
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(a.count(i, old), b.count(i, new));
            assert_eq!(a.guide(i, old), b.guide(i, new));
        }
        assert_eq!(a.size_factors()[i].to_bits(), b.size_factors()[i].to_bits());
    }
}

/// Evaluates cells back to front in uneven chunks.
struct Scrambled;

impl Executor for Scrambled {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
        for i in (0..n).rev() {
            out[i] = Some(f(i));
        }
        out.into_iter().map(Option::unwrap).collect()
    }
}

#[test]
fn output_does_not_depend_on_evaluation_order() {
    let t = GroundTruth::eight_gene();
    let a = simulate(&t, 2000, Some(5)).unwrap();
    let b = simulate_with(&Scrambled, &t, 2000, Some(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn guides_are_independent_of_latent_confounders() {
    let t = GroundTruth::eight_gene();
    let sim = simulate(&t, 100_000, Some(6)).unwrap();
    let ds = &sim.dataset;
    let n = ds.n_cells();
    let m = t.confounder.dim;
    let corr = |a: &[f64], b: &[f64]| {
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for c in 0..m {
        let u: Vec<f64> = (0..n).map(|i| sim.latent.u[i * m + c]).collect();
        for g in 0..t.n_genes() {
            let d: Vec<f64> = (0..n).map(|i| if ds.guide(i, g) { 1.0 } else { 0.0 }).collect();
            let r = corr(&u, &d);
            assert!(r.abs() < 0.02, "U{c} vs D_{g}: {r}");
        }
    }
}

fn mean_and_se(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    (m, (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt())
}

#[test]
fn stratum_means_match_the_population_proxy() {
    let t = GroundTruth::eight_gene();
    let sim = simulate(&t, 100_000, Some(7)).unwrap();
    let ds = &sim.dataset;
    let p = t.n_genes();
    // strata: target (None or gene) × sign of the covariate
    let mut acc = vec![vec![Vec::new(); p]; 2 * (p + 1)];
    let mut pooled = vec![Vec::new(); p];
    for i in 0..ds.n_cells() {
        let x = ds.covariate_row(i);
        let target = ds.target(i);
        let s = 2 * target.map_or(0, |g| g + 1) + usize::from(x[0] >= 0.0);
        let eta = oracle_population_proxy(&t, target, x).unwrap();
        for g in 0..p {
            let r = f64::from(ds.count(i, g)) / ds.size_factors()[i] - eta[g].exp();
            acc[s][g].push(r);
            pooled[g].push(r);
        }
    }
    for (g, d) in pooled.iter().enumerate() {
        let (m, se) = mean_and_se(d);
        assert!(m.abs() <= 3.0 * se, "gene {g}: mean difference {m}, MC SE {se}");
    }
    // Log-normal tails make small-stratum t statistics skewed, so the per-stratum
    // bound is looser.
    for (s, genes) in acc.iter().enumerate() {
        for (g, d) in genes.iter().enumerate() {
            let (m, se) = mean_and_se(d);
            assert!(m.abs() <= 6.0 * se, "stratum {s}, gene {g}: mean difference {m}, MC SE {se}");
        }
    }
}

#[test]
fn population_proxy_reference_values() {
    let mut t = GroundTruth::with_edges(vec!["a".into(), "b".into()], Vec::new(), 10);
    let eta = oracle_population_proxy(&t, None, &[0.0]).unwrap();
    for g in 0..2 {
        assert!((eta[g] - (t.intercepts[g] + 0.5 * 0.09)).abs() < 1e-12);
    }
    t.edges.push(TrueEdge { parent: 0, child: 1, weight: 0.7 });
    let base = oracle_population_proxy(&t, None, &[0.3]).unwrap();
    let hit = oracle_population_proxy(&t, Some(0), &[0.3]).unwrap();
    assert!((hit[1] - base[1] - 0.7 * t.tau[0]).abs() < 1e-12);
}

fn dag_with(names: &[String], ordering: Vec<usize>, edges: &[(usize, usize, f64)]) -> CausalDag {
    CausalDag {
        gene_names: names.to_vec(),
        ordering,
        edges: edges
            .iter()
            .map(|&(parent, child, theta)| EdgeEstimate { parent, child, theta, se_mt: 0.1, z: 5.0, p: 1e-6, alpha_used: 0.05 })
            .collect(),
        layer_log: Vec::new(),
        fdr: OnlineFdrState::new(0.1, SpendingSequence::default()).unwrap(),
    }
}

#[test]
fn evaluation_examples() {
    let t = GroundTruth::eight_gene();
    let sub: Vec<String> = t.gene_names[..6].to_vec();
    let inner: Vec<(usize, usize, f64)> =
        t.edges.iter().filter(|e| e.parent < 6 && e.child < 6).map(|e| (e.parent, e.child, e.weight)).collect();
    assert_eq!(inner.len(), 6);

    let perfect = dag_with(&sub, (0..6).collect(), &inner);
    let m = evaluate(&perfect, &t, Some(&sub)).unwrap();
    assert_eq!((m.shd, m.precision, m.recall, m.ordering_validity), (0, Some(1.0), Some(1.0), 1.0));

    let empty = dag_with(&sub, (0..6).collect(), &[]);
    let m = evaluate(&empty, &t, Some(&sub)).unwrap();
    assert_eq!((m.shd, m.recall, m.precision), (6, Some(0.0), None));

    let mut reversed: Vec<(usize, usize, f64)> = inner.clone();
    reversed[0] = (inner[0].1, inner[0].0, 0.5);
    let m = evaluate(&dag_with(&sub, (0..6).rev().collect(), &reversed), &t, Some(&sub)).unwrap();
    assert_eq!(m.shd, 1);
    assert_eq!(m.ordering_validity, 0.0);

    let full: Vec<(usize, usize, f64)> = t.edges.iter().map(|e| (e.parent, e.child, e.weight + 0.01)).collect();
    let m = evaluate(&dag_with(&t.gene_names, vec![6, 7, 0, 1, 2, 3, 4, 5], &full), &t, None).unwrap();
    assert_eq!(m.shd, 0);
    assert!(m.edge_errors.iter().all(|e| (e.error.unwrap() - 0.01).abs() < 1e-12));

    assert!(matches!(evaluate(&perfect, &t, None), Err(SimulatorError::UniverseMismatch(_))));
}
