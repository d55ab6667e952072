//! Synthetic screens with known structure, and scoring of estimates
//! against it.
//!
//! Per cell: a guide (or none), covariates `X`, a size factor `ℓ`, latent
//! confounders `U` (drawn after the guide), then for genes in topological
//! order
//!
//! ```text
//! log μ_j = θ_j0 + Σ_k θ_jk log μ_k + τ_j D_j + β_jᵀX + γ_jᵀU + ε_j
//! ```
//!
//! followed by `λ_j` (μ_j itself, or Gamma with mean μ_j) and
//! `Y_j ~ Poisson(ℓ λ_j)`.
//!
//! Every random draw comes from a ChaCha stream keyed by the cell index and
//! the label of the thing being drawn (gene, covariate, guide category), so
//! relabelling or reordering genes permutes the output without changing it,
//! and splitting cells across workers cannot change the result.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag_search::CausalDag;
use crate::dataset::{DatasetError, DatasetParts, PerturbDataset};
use crate::exec::{Executor, Sequential};
use crate::math::{self, label_hash, mix64};

/// Target label written for cells without a targeting guide.
pub const CONTROL_LABEL: &str = "non-targeting";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimulatorError {
    #[error("a seed is required for simulation")]
    MissingSeed,
    #[error("true graph has a cycle through {}", .0.join(" -> "))]
    Cyclic(Vec<String>),
    #[error("invalid ground truth: {0}")]
    Invalid(String),
    #[error("confounder rule is not linear in the covariates; the population proxy has no closed form")]
    NonlinearConfounder,
    #[error("gene universe mismatch: {0}")]
    UniverseMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEdge {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

/// How `U` depends on `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConfounderRule {
    /// `U = noise`, independent of `X`.
    Independent,
    /// `U = intercept + loadingsᵀ X + noise`; `loadings` is `J × m`.
    LinearInX { intercept: Vec<f64>, loadings: Vec<Vec<f64>> },
    /// `U = loadingsᵀ X² + noise`, elementwise square; `loadings` is `J × m`.
    QuadraticInX { loadings: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSpec {
    pub dim: usize,
    pub rule: ConfounderRule,
    /// Standard deviation of each Gaussian noise component.
    pub noise_sd: Vec<f64>,
    /// Loadings `γ_j`, one row of length `dim` per gene.
    pub gamma: Vec<Vec<f64>>,
}

/// Prior on the cell-level expression given `μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExpressionModel {
    /// `λ = μ`; counts are Poisson.
    PointMass,
    /// `λ ~ Gamma(shape 1/φ_j, mean μ_j)`; counts are negative binomial.
    Gamma { dispersion: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub n_cells: usize,
    /// Relative frequency of control cells.
    pub control_weight: f64,
    /// Relative frequency of cells carrying each gene's guide.
    pub guide_weights: Vec<f64>,
    pub covariates: Vec<CovariateSpec>,
    /// Median and log-scale standard deviation of the log-normal `ℓ`.
    pub size_factor_median: f64,
    pub size_factor_sd_log: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub gene_names: Vec<String>,
    pub intercepts: Vec<f64>,
    pub edges: Vec<TrueEdge>,
    pub tau: Vec<f64>,
    /// `β_j`, one row of length `J` per gene.
    pub beta: Vec<Vec<f64>>,
    pub confounder: ConfounderSpec,
    /// Standard deviation of the Gaussian `ε_j`.
    pub noise_sd: Vec<f64>,
    pub expression: ExpressionModel,
    pub design: DesignSpec,
    /// Seed of the run that produced a data set from this truth.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Baseline control expression used by the presets.
const BASELINE_LOG_MEAN: f64 = core::f64::consts::LN_10;

impl GroundTruth {
    /// Genes with the given edges and default everything else: control mean
    /// near 10 for every gene, `τ = −1.5`, one standard Gaussian covariate
    /// with loadings ±0.2, no latent confounder, `ε` sd 0.3, Poisson counts,
    /// equal guide shares summing to 3/8 of cells.
    pub fn with_edges(gene_names: Vec<String>, edges: Vec<TrueEdge>, n_cells: usize) -> Self {
        let p = gene_names.len();
        let mut intercepts = vec![BASELINE_LOG_MEAN; p];
        for e in &edges {
            intercepts[e.child] -= e.weight * BASELINE_LOG_MEAN;
        }
        let beta = (0..p).map(|j| vec![if j % 2 == 0 { 0.2 } else { -0.2 }]).collect();
        GroundTruth {
            gene_names,
            intercepts,
            edges,
            tau: vec![-1.5; p],
            beta,
            confounder: ConfounderSpec {
                dim: 0,
                rule: ConfounderRule::Independent,
                noise_sd: Vec::new(),
                gamma: vec![Vec::new(); p],
            },
            noise_sd: vec![0.3; p],
            expression: ExpressionModel::PointMass,
            design: DesignSpec {
                n_cells,
                control_weight: 0.625,
                guide_weights: vec![0.375 / p as f64; p],
                covariates: vec![CovariateSpec { name: "x1".to_string(), mean: 0.0, sd: 1.0 }],
                size_factor_median: 1.0,
                size_factor_sd_log: 0.4,
            },
            seed: None,
        }
    }

    /// Adds `dim` independent standard Gaussian confounders with loadings
    /// `±magnitude`, signs drawn from `sign_seed`.
    pub fn with_latent_confounders(mut self, dim: usize, magnitude: f64, sign_seed: u64) -> Self {
        let p = self.gene_names.len();
        let mut rng = ChaCha8Rng::seed_from_u64(sign_seed);
        self.confounder = ConfounderSpec {
            dim,
            rule: ConfounderRule::Independent,
            noise_sd: vec![1.0; dim],
            gamma: (0..p)
                .map(|_| (0..dim).map(|_| if rng.random::<bool>() { magnitude } else { -magnitude }).collect())
                .collect(),
        };
        self
    }

    /// Eight genes: two three-level cascades joining at `g6`
    /// (`g1→g2→g4→g6`, `g1→g3→g5→g6`, weights ±0.5), and two roots `g7`,
    /// `g8` feeding `{g1, g2, g4}` and `{g3, g5, g6}` that act as hidden
    /// confounders once left out. Two latent Gaussian confounders with
    /// loadings ±0.4 (signs drawn with seed 0); 8000 cells, about 5000
    /// controls and 375 per guide.
    pub fn eight_gene() -> Self {
        let names = (1..=8).map(|i| format!("g{i}")).collect();
        let e = |parent: usize, child: usize, weight: f64| TrueEdge { parent, child, weight };
        let edges = vec![
            e(0, 1, 0.5),
            e(0, 2, -0.5),
            e(1, 3, 0.5),
            e(2, 4, -0.5),
            e(3, 5, 0.5),
            e(4, 5, -0.5),
            e(6, 0, 0.5),
            e(6, 1, -0.5),
            e(6, 3, 0.5),
            e(7, 2, 0.5),
            e(7, 4, -0.5),
            e(7, 5, 0.5),
        ];
        Self::with_edges(names, edges, 8000).with_latent_confounders(2, 0.4, 0)
    }

    /// `g1 → g2 → … → gp` with a common weight.
    pub fn chain(p: usize, weight: f64, n_cells: usize) -> Self {
        let names = (1..=p).map(|i| format!("g{i}")).collect();
        let edges = (1..p).map(|c| TrueEdge { parent: c - 1, child: c, weight }).collect();
        Self::with_edges(names, edges, n_cells)
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn weight(&self, parent: usize, child: usize) -> f64 {
        self.edges.iter().find(|e| e.parent == parent && e.child == child).map_or(0.0, |e| e.weight)
    }

    pub fn parents(&self, child: usize) -> Vec<(usize, f64)> {
        self.edges.iter().filter(|e| e.child == child).map(|e| (e.parent, e.weight)).collect()
    }

    /// Genes with every parent before its children.
    pub fn topological_order(&self) -> Result<Vec<usize>, SimulatorError> {
        let p = self.n_genes();
        let mut children = vec![BTreeSet::new(); p];
        let mut indeg = vec![0usize; p];
        for e in &self.edges {
            if children[e.parent].insert(e.child) {
                indeg[e.child] += 1;
            }
        }
        let mut ready: BTreeSet<usize> = (0..p).filter(|&g| indeg[g] == 0).collect();
        let mut order = Vec::with_capacity(p);
        while let Some(g) = ready.pop_first() {
            order.push(g);
            for &c in &children[g] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() < p {
            let cycle = crate::descendants::find_cycle(&children).unwrap_or_default();
            let mut names: Vec<String> = cycle.iter().map(|&g| self.gene_names[g].clone()).collect();
            if let Some(first) = names.first().cloned() {
                names.push(first);
            }
            return Err(SimulatorError::Cyclic(names));
        }
        Ok(order)
    }

    /// True descendant sets.
    pub fn descendants(&self) -> Result<Vec<BTreeSet<usize>>, SimulatorError> {
        let mut children = vec![BTreeSet::new(); self.n_genes()];
        for e in &self.edges {
            children[e.parent].insert(e.child);
        }
        crate::descendants::close_descendants(&children).map_err(|_| {
            self.topological_order().err().unwrap_or(SimulatorError::Invalid("cyclic graph".to_string()))
        })
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let p = self.n_genes();
        let bad = |m: String| Err(SimulatorError::Invalid(m));
        if p == 0 {
            return bad("no genes".to_string());
        }
        let names: BTreeSet<&String> = self.gene_names.iter().collect();
        if names.len() != p {
            return bad("gene names are not unique".to_string());
        }
        if names.contains(&CONTROL_LABEL.to_string()) {
            return bad(format!("`{CONTROL_LABEL}` is reserved"));
        }
        let j = self.design.covariates.len();
        let m = self.confounder.dim;
        if self.intercepts.len() != p
            || self.tau.len() != p
            || self.noise_sd.len() != p
            || self.beta.len() != p
            || self.confounder.gamma.len() != p
            || self.design.guide_weights.len() != p
        {
            return bad(format!("per-gene vectors must have length {p}"));
        }
        if self.beta.iter().any(|b| b.len() != j) {
            return bad(format!("each β row must have {j} entries"));
        }
        if self.confounder.gamma.iter().any(|g| g.len() != m) || self.confounder.noise_sd.len() != m {
            return bad(format!("confounder loadings must have {m} entries"));
        }
        match &self.confounder.rule {
            ConfounderRule::Independent => {}
            ConfounderRule::LinearInX { intercept, loadings } => {
                if intercept.len() != m || loadings.len() != j || loadings.iter().any(|r| r.len() != m) {
                    return bad("linear confounder rule has wrong dimensions".to_string());
                }
            }
            ConfounderRule::QuadraticInX { loadings } => {
                if loadings.len() != j || loadings.iter().any(|r| r.len() != m) {
                    return bad("quadratic confounder rule has wrong dimensions".to_string());
                }
            }
        }
        if let ExpressionModel::Gamma { dispersion } = &self.expression {
            if dispersion.len() != p || dispersion.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return bad("dispersions must be positive, one per gene".to_string());
            }
        }
        for (g, &t) in self.tau.iter().enumerate() {
            if !(t != 0.0 && t.is_finite()) {
                return bad(format!("intervention effect of {} must be non-zero", self.gene_names[g]));
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.parent >= p || e.child >= p || e.parent == e.child {
                return bad(format!("edge {} -> {} is out of range or a self-loop", e.parent, e.child));
            }
            if !(e.weight != 0.0 && e.weight.is_finite()) {
                return bad(format!(
                    "edge {} -> {} must have a non-zero weight",
                    self.gene_names[e.parent], self.gene_names[e.child]
                ));
            }
            if !seen.insert((e.parent, e.child)) {
                return bad("duplicate edge".to_string());
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.intercepts) || self.beta.iter().any(|b| !finite(b)) || self.confounder.gamma.iter().any(|g| !finite(g)) {
            return bad("non-finite coefficients".to_string());
        }
        if self.noise_sd.iter().chain(&self.confounder.noise_sd).any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise standard deviations must be non-negative".to_string());
        }
        let d = &self.design;
        if !(d.control_weight >= 0.0) || d.guide_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("guide weights must be non-negative".to_string());
        }
        if !(d.control_weight > 0.0) {
            return bad("control weight must be positive".to_string());
        }
        if d.covariates.iter().any(|c| !(c.sd >= 0.0 && c.mean.is_finite())) {
            return bad("covariate distributions are invalid".to_string());
        }
        let cov_names: BTreeSet<&String> = d.covariates.iter().map(|c| &c.name).collect();
        if cov_names.len() != j {
            return bad("covariate names are not unique".to_string());
        }
        if !(d.size_factor_median > 0.0 && d.size_factor_sd_log >= 0.0) {
            return bad("size-factor distribution is invalid".to_string());
        }
        self.topological_order()?;
        Ok(())
    }
}

/// Hidden quantities behind a simulated data set, row-major `N × p`
/// (`N × m` for `u`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub dataset: PerturbDataset,
    pub latent: LatentRecord,
    /// The truth with the seed filled in.
    pub truth: GroundTruth,
}

const TAG_GUIDE: u64 = 0x6775_6964_65;
const TAG_COVARIATE: u64 = 0x636f_7661_72;
const TAG_SIZE: u64 = 0x7369_7a65;
const TAG_LATENT: u64 = 0x6c61_7465_6e74;
const TAG_GENE: u64 = 0x6765_6e65;

fn stream(seed: u64, cell: usize, label: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix64(mix64(cell as u64) ^ mix64(label ^ tag)));
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

struct CellDraw {
    target: Option<usize>,
    x: Vec<f64>,
    size: f64,
    u: Vec<f64>,
    mu: Vec<f64>,
    lambda: Vec<f64>,
    y: Vec<u32>,
}

fn confounder_mean(rule: &ConfounderRule, x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    match rule {
        ConfounderRule::Independent => {}
        ConfounderRule::LinearInX { intercept, loadings } => {
            out.copy_from_slice(intercept);
            for (xj, row) in x.iter().zip(loadings) {
                for (o, l) in out.iter_mut().zip(row) {
                    *o += l * xj;
                }
            }
        }
        ConfounderRule::QuadraticInX { loadings } => {
            for (xj, row) in x.iter().zip(loadings) {
                for (o, l) in out.iter_mut().zip(row) {
                    *o += l * xj * xj;
                }
            }
        }
    }
    out
}

fn draw_cell(truth: &GroundTruth, order: &[usize], seed: u64, cell: usize) -> CellDraw {
    let p = truth.n_genes();
    let d = &truth.design;

    // guide by exponential race: argmin E_c / w_c is multinomial in w
    let mut target = None;
    let mut best = {
        let e: f64 = stream(seed, cell, label_hash(CONTROL_LABEL), TAG_GUIDE).sample(Exp1);
        e / d.control_weight
    };
    for g in 0..p {
        let w = d.guide_weights[g];
        if w <= 0.0 {
            continue;
        }
        let e: f64 = stream(seed, cell, label_hash(&truth.gene_names[g]), TAG_GUIDE).sample(Exp1);
        if e / w < best {
            best = e / w;
            target = Some(g);
        }
    }

    let x: Vec<f64> = d
        .covariates
        .iter()
        .map(|c| c.mean + c.sd * normal(&mut stream(seed, cell, label_hash(&c.name), TAG_COVARIATE)))
        .collect();
    let size = d.size_factor_median * math::exp(d.size_factor_sd_log * normal(&mut stream(seed, cell, 0, TAG_SIZE)));

    let conf = &truth.confounder;
    let mut u_rng = stream(seed, cell, 0, TAG_LATENT);
    let u: Vec<f64> = confounder_mean(&conf.rule, &x, conf.dim)
        .into_iter()
        .zip(&conf.noise_sd)
        .map(|(m, s)| m + s * normal(&mut u_rng))
        .collect();

    let mut log_mu = vec![0.0; p];
    let mut mu = vec![0.0; p];
    let mut lambda = vec![0.0; p];
    let mut y = vec![0u32; p];
    for &j in order {
        let mut rng = stream(seed, cell, label_hash(&truth.gene_names[j]), TAG_GENE);
        let eps = truth.noise_sd[j] * normal(&mut rng);
        let mut v = truth.intercepts[j] + eps;
        for e in truth.edges.iter().filter(|e| e.child == j) {
            v += e.weight * log_mu[e.parent];
        }
        if target == Some(j) {
            v += truth.tau[j];
        }
        v += crate::linalg::dot(&truth.beta[j], &x);
        v += crate::linalg::dot(&conf.gamma[j], &u);
        log_mu[j] = v;
        mu[j] = math::exp(v);
        lambda[j] = match &truth.expression {
            ExpressionModel::PointMass => mu[j],
            ExpressionModel::Gamma { dispersion } => {
                let phi = dispersion[j];
                Gamma::new(1.0 / phi, mu[j] * phi).map_or(mu[j], |g| g.sample(&mut rng))
            }
        };
        let rate = size * lambda[j];
        y[j] = if rate > 0.0 && rate.is_finite() {
            Poisson::new(rate).map_or(0, |ps| {
                let draw: f64 = ps.sample(&mut rng);
                if draw >= u32::MAX as f64 {
                    u32::MAX
                } else {
                    draw as u32
                }
            })
        } else {
            0
        };
    }
    CellDraw { target, x, size, u, mu, lambda, y }
}

/// Draws `n_cells` cells from `truth`.
pub fn simulate(truth: &GroundTruth, n_cells: usize, seed: Option<u64>) -> Result<Simulation, SimulatorError> {
    simulate_with(&Sequential, truth, n_cells, seed)
}

pub fn simulate_with<E: Executor>(
    exec: &E,
    truth: &GroundTruth,
    n_cells: usize,
    seed: Option<u64>,
) -> Result<Simulation, SimulatorError> {
    let seed = seed.ok_or(SimulatorError::MissingSeed)?;
    truth.validate()?;
    if n_cells == 0 {
        return Err(SimulatorError::Invalid("need at least one cell".to_string()));
    }
    let order = truth.topological_order()?;
    let p = truth.n_genes();
    let draws = exec.map(n_cells, |i| draw_cell(truth, &order, seed, i));

    let j = truth.design.covariates.len();
    let m = truth.confounder.dim;
    let mut counts = Vec::with_capacity(n_cells * p);
    let mut guides = Vec::with_capacity(n_cells * p);
    let mut covariates = Vec::with_capacity(n_cells * j);
    let mut size_factors = Vec::with_capacity(n_cells);
    let mut latent = LatentRecord {
        mu: Vec::with_capacity(n_cells * p),
        lambda: Vec::with_capacity(n_cells * p),
        u: Vec::with_capacity(n_cells * m),
    };
    for d in draws {
        counts.extend_from_slice(&d.y);
        guides.extend((0..p).map(|g| d.target == Some(g)));
        covariates.extend_from_slice(&d.x);
        size_factors.push(d.size);
        latent.mu.extend_from_slice(&d.mu);
        latent.lambda.extend_from_slice(&d.lambda);
        latent.u.extend_from_slice(&d.u);
    }
    let dataset = PerturbDataset::new(DatasetParts {
        cell_ids: (0..n_cells).map(|i| format!("cell{i}")).collect(),
        gene_names: truth.gene_names.clone(),
        counts,
        guides,
        covariate_names: truth.design.covariates.iter().map(|c| c.name.clone()).collect(),
        covariates,
        size_factors,
    })?;
    let mut truth = truth.clone();
    truth.seed = Some(seed);
    Ok(Simulation { dataset, latent, truth })
}

/// `log E[Y_k / ℓ | D = d, X = x]` for every gene. `log μ` given `(d, x)` is
/// Gaussian, so each entry is its conditional mean plus half its variance.
/// `d` holds the targeted gene, if any.
pub fn oracle_population_proxy(truth: &GroundTruth, d: Option<usize>, x: &[f64]) -> Result<Vec<f64>, SimulatorError> {
    truth.validate()?;
    if matches!(truth.confounder.rule, ConfounderRule::QuadraticInX { .. }) {
        return Err(SimulatorError::NonlinearConfounder);
    }
    if x.len() != truth.design.covariates.len() {
        return Err(SimulatorError::Invalid(format!("expected {} covariates", truth.design.covariates.len())));
    }
    let p = truth.n_genes();
    let m = truth.confounder.dim;
    let order = truth.topological_order()?;
    let u_mean = confounder_mean(&truth.confounder.rule, x, m);
    // log μ_j = c_j + g_jᵀ w with w = (U noise, ε) independent standard normals
    let mut c = vec![0.0; p];
    let mut g = vec![vec![0.0; m + p]; p];
    for &j in &order {
        let mut cj = truth.intercepts[j]
            + crate::linalg::dot(&truth.beta[j], x)
            + crate::linalg::dot(&truth.confounder.gamma[j], &u_mean);
        if d == Some(j) {
            cj += truth.tau[j];
        }
        let mut gj = vec![0.0; m + p];
        for a in 0..m {
            gj[a] = truth.confounder.gamma[j][a] * truth.confounder.noise_sd[a];
        }
        gj[m + j] = truth.noise_sd[j];
        for (k, w) in truth.parents(j) {
            cj += w * c[k];
            for (t, s) in gj.iter_mut().zip(&g[k]) {
                *t += w * s;
            }
        }
        c[j] = cj;
        g[j] = gj;
    }
    Ok((0..p).map(|j| c[j] + 0.5 * g[j].iter().map(|v| v * v).sum::<f64>()).collect())
}

/// Estimated against true coefficient for one edge present in either graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeError {
    pub parent: String,
    pub child: String,
    pub true_theta: f64,
    pub estimated_theta: Option<f64>,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub genes: Vec<String>,
    pub shd: usize,
    pub true_edges: usize,
    pub estimated_edges: usize,
    pub true_positives: usize,
    /// Undefined when nothing was called.
    pub precision: Option<f64>,
    /// Undefined when the truth has no edges.
    pub recall: Option<f64>,
    /// Fraction of true edges running forward in the estimated ordering
    /// (1 when the truth has no edges).
    pub ordering_validity: f64,
    pub edge_errors: Vec<EdgeError>,
}

/// Scores `dag` against `truth`. Without `restriction` both must cover the
/// same genes; with it, the truth is cut down to the induced subgraph on the
/// listed genes, which must be exactly the genes of `dag`.
pub fn evaluate(dag: &CausalDag, truth: &GroundTruth, restriction: Option<&[String]>) -> Result<Metrics, SimulatorError> {
    let universe: Vec<String> = match restriction {
        Some(r) => r.to_vec(),
        None => truth.gene_names.clone(),
    };
    let uni_set: BTreeSet<&String> = universe.iter().collect();
    let dag_set: BTreeSet<&String> = dag.gene_names.iter().collect();
    if uni_set.len() != universe.len() {
        return Err(SimulatorError::UniverseMismatch("restriction lists a gene twice".to_string()));
    }
    if uni_set != dag_set {
        return Err(SimulatorError::UniverseMismatch(format!(
            "estimated graph covers {:?} but the truth {} {:?}",
            dag.gene_names,
            if restriction.is_some() { "restriction is" } else { "covers" },
            universe
        )));
    }
    // truth index -> dag index
    let mut to_dag = vec![None; truth.n_genes()];
    for name in &universe {
        let t = truth
            .gene_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| SimulatorError::UniverseMismatch(format!("gene {name} is not in the truth")))?;
        to_dag[t] = dag.gene_names.iter().position(|n| n == name);
    }
    let p = dag.n_genes();
    let mut true_w = vec![0.0; p * p];
    let mut true_edges = 0;
    for e in &truth.edges {
        if let (Some(a), Some(b)) = (to_dag[e.parent], to_dag[e.child]) {
            true_w[a * p + b] = e.weight;
            true_edges += 1;
        }
    }
    let mut est = vec![None; p * p];
    for e in &dag.edges {
        est[e.parent * p + e.child] = Some(e.theta);
    }

    let mut shd = 0;
    let mut tp = 0;
    for a in 0..p {
        for b in (a + 1)..p {
            let t = (true_w[a * p + b] != 0.0, true_w[b * p + a] != 0.0);
            let s = (est[a * p + b].is_some(), est[b * p + a].is_some());
            if t != s {
                shd += 1;
            }
        }
    }
    let mut edge_errors = Vec::new();
    for a in 0..p {
        for b in 0..p {
            let tw = true_w[a * p + b];
            let e = est[a * p + b];
            if tw != 0.0 && e.is_some() {
                tp += 1;
            }
            if tw != 0.0 || e.is_some() {
                edge_errors.push(EdgeError {
                    parent: dag.gene_names[a].clone(),
                    child: dag.gene_names[b].clone(),
                    true_theta: tw,
                    estimated_theta: e,
                    error: e.map(|v| v - tw),
                });
            }
        }
    }
    let pos = dag.positions();
    let forward = (0..p * p).filter(|&i| true_w[i] != 0.0 && pos[i / p] < pos[i % p]).count();
    let n_est = dag.edges.len();
    Ok(Metrics {
        genes: dag.gene_names.clone(),
        shd,
        true_edges,
        estimated_edges: n_est,
        true_positives: tp,
        precision: (n_est > 0).then(|| tp as f64 / n_est as f64),
        recall: (true_edges > 0).then(|| tp as f64 / true_edges as f64),
        ordering_validity: if true_edges == 0 { 1.0 } else { forward as f64 / true_edges as f64 },
        edge_errors,
    })
}
