//! Two-stage proxy regression for direct effects.
//!
//! The first stage replaces the latent log-expression of a candidate parent
//! `k` by the link-scale fit `η̂_k = (1, D_k, D_anc(k), X)ᵀ ξ̂_k`. The second
//! stage regresses the target's counts on `(1, X, D_j, η̂_k …)`. Because the
//! η̂ are estimated, the second-stage covariance gets the Murphy–Topel term
//! `A⁻¹ C V_ξξ Cᵀ A⁻¹`, where `C_k` is the derivative of the mean
//! second-stage score with respect to `ξ_k`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PerturbDataset;
use crate::exec::{Executor, Sequential};
use crate::glm::{self, DesignMatrix, GlmConfig, GlmError, GlmFit};
use crate::linalg::{self, Matrix};
use crate::math::{self, PValueConvention};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProxyError {
    #[error("gene {0} cannot be its own ancestor")]
    SelfAncestor(usize),
    #[error("gene index {0} out of range")]
    GeneOutOfRange(usize),
    #[error("ancestor gene {0} has no perturbed cells")]
    NoPerturbedCells(usize),
    #[error("dataset lacks regressor `{0}`")]
    MissingRegressor(String),
    #[error("target gene {0} also appears among the proxies")]
    TargetAmongProxies(usize),
    #[error("proxy length {found} does not match {expected} cells")]
    ProxyLength { expected: usize, found: usize },
    #[error("proxies for `{first}` and `{second}` are collinear (condition number {condition:e})")]
    Collinear { first: usize, second: usize, first_name: String, second_name: String, condition: f64 },
    #[error("proxy for `{name}` has no variation beyond the covariates and the target's guide")]
    DegenerateProxy { gene: usize, name: String },
    #[error("regression for gene {gene} failed: {source}")]
    Glm { gene: usize, source: GlmError },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyConfig {
    pub glm: GlmConfig,
    pub convention: PValueConvention,
    /// Largest tolerated condition number of the residualized proxy
    /// correlation matrix.
    pub collinearity_threshold: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { glm: GlmConfig::default(), convention: PValueConvention::TwoSided, collinearity_threshold: 1e8 }
    }
}

/// One first-stage regressor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regressor {
    Intercept,
    /// Guide indicator of the named gene.
    Guide(String),
    /// Covariate column by name.
    Covariate(String),
}

impl Regressor {
    pub fn label(&self) -> String {
        match self {
            Regressor::Intercept => "intercept".to_string(),
            Regressor::Guide(g) => format!("D_{g}"),
            Regressor::Covariate(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    One,
    Guide(usize),
    Covariate(usize),
}

fn resolve(regressors: &[Regressor], dataset: &PerturbDataset) -> Result<Vec<Source>, ProxyError> {
    regressors
        .iter()
        .map(|r| match r {
            Regressor::Intercept => Ok(Source::One),
            Regressor::Guide(g) => {
                dataset.gene_index(g).map(Source::Guide).ok_or_else(|| ProxyError::MissingRegressor(r.label()))
            }
            Regressor::Covariate(c) => dataset
                .covariate_names()
                .iter()
                .position(|n| n == c)
                .map(Source::Covariate)
                .ok_or_else(|| ProxyError::MissingRegressor(r.label())),
        })
        .collect()
}

fn fill_row(sources: &[Source], dataset: &PerturbDataset, cell: usize, out: &mut [f64]) {
    for (o, s) in out.iter_mut().zip(sources) {
        *o = match *s {
            Source::One => 1.0,
            Source::Guide(g) => {
                if dataset.guide(cell, g) {
                    1.0
                } else {
                    0.0
                }
            }
            Source::Covariate(c) => dataset.covariate(cell, c),
        };
    }
}

/// First-stage fit for one gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyModel {
    pub gene: usize,
    pub gene_name: String,
    pub regressors: Vec<Regressor>,
    pub xi: Vec<f64>,
    /// Sandwich covariance of `xi` (already divided by the number of cells).
    pub xi_covariance: Matrix,
}

impl ProxyModel {
    pub fn regressor_labels(&self) -> Vec<String> {
        self.regressors.iter().map(Regressor::label).collect()
    }

    /// Trace of the coefficient covariance; larger means a noisier proxy.
    pub fn variance_trace(&self) -> f64 {
        self.xi_covariance.diagonal().iter().sum()
    }

    /// Regressor rows `z_i` for every cell, row-major.
    pub fn regressor_matrix(&self, dataset: &PerturbDataset) -> Result<Matrix, ProxyError> {
        let sources = resolve(&self.regressors, dataset)?;
        let d = sources.len();
        let mut data = vec![0.0; dataset.n_cells() * d];
        for (i, row) in data.chunks_mut(d).enumerate() {
            fill_row(&sources, dataset, i, row);
        }
        Ok(Matrix::from_row_major(dataset.n_cells(), d, data))
    }
}

/// A fitted proxy together with its per-cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct Proxy {
    pub model: ProxyModel,
    pub values: Vec<f64>,
}

/// Poisson QMLE of `Y_k` on `offset(log ℓ) + (1, D_k, D_anc(k), X)` over all
/// cells.
pub fn fit_proxy(
    dataset: &PerturbDataset,
    k: usize,
    anc_k: &BTreeSet<usize>,
    glm_config: &GlmConfig,
) -> Result<ProxyModel, ProxyError> {
    let p = dataset.n_genes();
    if k >= p {
        return Err(ProxyError::GeneOutOfRange(k));
    }
    if anc_k.contains(&k) {
        return Err(ProxyError::SelfAncestor(k));
    }
    let counts = dataset.perturbed_cell_counts();
    for &a in anc_k {
        if a >= p {
            return Err(ProxyError::GeneOutOfRange(a));
        }
        if counts[a] == 0 {
            return Err(ProxyError::NoPerturbedCells(a));
        }
    }
    let names = dataset.gene_names();
    let mut regressors = vec![Regressor::Intercept, Regressor::Guide(names[k].clone())];
    regressors.extend(anc_k.iter().map(|&a| Regressor::Guide(names[a].clone())));
    regressors.extend(dataset.covariate_names().iter().cloned().map(Regressor::Covariate));

    let labels: Vec<String> = regressors.iter().map(Regressor::label).collect();
    let z = resolve(&regressors, dataset)?;
    let d = z.len();
    let mut data = vec![0.0; dataset.n_cells() * d];
    for (i, row) in data.chunks_mut(d).enumerate() {
        fill_row(&z, dataset, i, row);
    }
    let glm_err = |source| ProxyError::Glm { gene: k, source };
    let design = DesignMatrix::new(Matrix::from_row_major(dataset.n_cells(), d, data), labels).map_err(glm_err)?;
    let fit = glm::fit_poisson_qmle(&dataset.gene_counts(k), &design, &dataset.log_size_factors(), glm_config)
        .map_err(glm_err)?;
    Ok(ProxyModel {
        gene: k,
        gene_name: names[k].clone(),
        regressors,
        xi: fit.coefficients,
        xi_covariance: fit.sandwich_covariance,
    })
}

/// `η̂_k(D_i, X_i) = z_iᵀ ξ̂_k` for every cell; free of size factors and counts.
pub fn predict_proxy(model: &ProxyModel, dataset: &PerturbDataset) -> Result<Vec<f64>, ProxyError> {
    let sources = resolve(&model.regressors, dataset)?;
    let mut row = vec![0.0; sources.len()];
    Ok((0..dataset.n_cells())
        .map(|i| {
            fill_row(&sources, dataset, i, &mut row);
            linalg::dot(&row, &model.xi)
        })
        .collect())
}

/// Fits and evaluates the proxy of gene `k`.
pub fn build_proxy(
    dataset: &PerturbDataset,
    k: usize,
    anc_k: &BTreeSet<usize>,
    glm_config: &GlmConfig,
) -> Result<Proxy, ProxyError> {
    let model = fit_proxy(dataset, k, anc_k, glm_config)?;
    let values = predict_proxy(&model, dataset)?;
    Ok(Proxy { model, values })
}

/// Label of the second-stage column holding the proxy of `gene_name`.
pub fn proxy_label(gene_name: &str) -> String {
    format!("eta_{gene_name}")
}

/// Inference for one candidate parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyEdgeStat {
    pub parent: usize,
    pub theta: f64,
    pub se_sandwich: f64,
    pub se_mt: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageFit {
    pub target: usize,
    pub glm: GlmFit,
    /// Murphy–Topel covariance of the second-stage coefficients.
    pub mt_covariance: Matrix,
    /// `∂(mean score)/∂ξ_kᵀ` per proxy, in proxy order.
    pub cross_derivatives: Vec<Matrix>,
    /// One entry per proxy, in proxy order.
    pub edge_stats: Vec<ProxyEdgeStat>,
}

/// Second-stage design `(1, X, D_j, η̂_k …)` over all cells.
pub fn second_stage_design(
    dataset: &PerturbDataset,
    j: usize,
    proxies: &[Proxy],
) -> Result<DesignMatrix, ProxyError> {
    if j >= dataset.n_genes() {
        return Err(ProxyError::GeneOutOfRange(j));
    }
    let n = dataset.n_cells();
    let names = dataset.gene_names();
    let mut columns = Vec::with_capacity(2 + dataset.n_covariates() + proxies.len());
    columns.push(("intercept".to_string(), vec![1.0; n]));
    for (c, name) in dataset.covariate_names().iter().enumerate() {
        columns.push((name.clone(), (0..n).map(|i| dataset.covariate(i, c)).collect()));
    }
    columns.push((
        format!("D_{}", names[j]),
        (0..n).map(|i| if dataset.guide(i, j) { 1.0 } else { 0.0 }).collect(),
    ));
    for proxy in proxies {
        if proxy.model.gene == j {
            return Err(ProxyError::TargetAmongProxies(j));
        }
        if proxy.values.len() != n {
            return Err(ProxyError::ProxyLength { expected: n, found: proxy.values.len() });
        }
        columns.push((proxy_label(&proxy.model.gene_name), proxy.values.clone()));
    }
    DesignMatrix::from_columns(columns).map_err(|source| ProxyError::Glm { gene: j, source })
}

/// Flags proxies that are (nearly) linear combinations of one another once
/// the intercept, covariates and the target's guide are projected out.
pub fn check_proxy_collinearity(design: &DesignMatrix, proxies: &[Proxy], threshold: f64) -> Result<(), ProxyError> {
    let m = proxies.len();
    if m == 0 {
        return Ok(());
    }
    let q = design.n_cols();
    let base: Vec<usize> = (0..q - m).collect();
    let n = design.n_rows();
    let w = design.matrix().select(&(0..n).collect::<Vec<_>>(), &base);
    let wd = DesignMatrix::new(w, design.labels()[..q - m].to_vec());
    let mut resid: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut scale = Vec::with_capacity(m);
    for proxy in proxies {
        let v = &proxy.values;
        let mean = v.iter().sum::<f64>() / n as f64;
        scale.push(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>());
        let r = match &wd {
            Ok(wd) => {
                let g = wd.weighted_gram(&vec![1.0; n]);
                match linalg::cholesky(&g) {
                    Some(l) => {
                        let b = linalg::cholesky_solve(&l, &wd.transpose_times(v));
                        let fitted = wd.linear_predictor(&b, &vec![0.0; n]);
                        v.iter().zip(fitted).map(|(a, f)| a - f).collect()
                    }
                    None => v.iter().map(|x| x - mean).collect(),
                }
            }
            Err(_) => v.iter().map(|x| x - mean).collect(),
        };
        resid.push(r);
    }
    let mut cov = Matrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let s = linalg::dot(&resid[a], &resid[b]);
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    for a in 0..m {
        if !(cov[(a, a)] > 1e-12 * scale[a].max(1e-300)) {
            return Err(ProxyError::DegenerateProxy {
                gene: proxies[a].model.gene,
                name: proxies[a].model.gene_name.clone(),
            });
        }
    }
    if m == 1 {
        return Ok(());
    }
    let mut corr = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            corr[(a, b)] = cov[(a, b)] / math::sqrt(cov[(a, a)] * cov[(b, b)]);
        }
    }
    let eig = linalg::symmetric_eigenvalues(&corr);
    let (lo, hi) = (eig[0], eig[m - 1]);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition > threshold {
        let mut best = (0, 1);
        let mut best_r = -1.0;
        for a in 0..m {
            for b in (a + 1)..m {
                let r = math::abs(corr[(a, b)]);
                if r > best_r {
                    best_r = r;
                    best = (a, b);
                }
            }
        }
        let (pa, pb) = (&proxies[best.0].model, &proxies[best.1].model);
        return Err(ProxyError::Collinear {
            first: pa.gene,
            second: pb.gene,
            first_name: pa.gene_name.clone(),
            second_name: pb.gene_name.clone(),
            condition,
        });
    }
    Ok(())
}

/// Second-stage regression with Murphy–Topel inference.
pub fn fit_second_stage(
    dataset: &PerturbDataset,
    j: usize,
    proxies: &[Proxy],
    config: &ProxyConfig,
) -> Result<SecondStageFit, ProxyError> {
    fit_second_stage_with(&Sequential, dataset, j, proxies, config)
}

pub fn fit_second_stage_with<E: Executor>(
    exec: &E,
    dataset: &PerturbDataset,
    j: usize,
    proxies: &[Proxy],
    config: &ProxyConfig,
) -> Result<SecondStageFit, ProxyError> {
    let design = second_stage_design(dataset, j, proxies)?;
    check_proxy_collinearity(&design, proxies, config.collinearity_threshold)?;
    let y = dataset.gene_counts(j);
    let fit = glm::fit_poisson_qmle(&y, &design, &dataset.log_size_factors(), &config.glm)
        .map_err(|source| ProxyError::Glm { gene: j, source })?;

    let q = design.n_cols();
    let first_proxy_col = q - proxies.len();
    let cross = exec.map(proxies.len(), |idx| {
        cross_derivative(dataset, &design, &y, &fit, first_proxy_col + idx, &proxies[idx].model)
    });
    let cross: Vec<Matrix> = cross.into_iter().collect::<Result<_, _>>()?;

    let a_inv = fit.bread_inverse();
    let mut extra = Matrix::zeros(q, q);
    for (c, proxy) in cross.iter().zip(proxies) {
        let cv = c.matmul(&proxy.model.xi_covariance).matmul(&c.transpose());
        extra = extra.add(&cv);
    }
    let mt = fit.sandwich_covariance.add(&a_inv.matmul(&extra).matmul(&a_inv)).symmetrized();

    let mut edge_stats = Vec::with_capacity(proxies.len());
    for (idx, proxy) in proxies.iter().enumerate() {
        let c = first_proxy_col + idx;
        let label = proxy_label(&proxy.model.gene_name);
        let w = glm::wald_from_variance(fit.coefficients[c], mt[(c, c)], &label, config.convention)
            .map_err(|source| ProxyError::Glm { gene: j, source })?;
        edge_stats.push(ProxyEdgeStat {
            parent: proxy.model.gene,
            theta: w.estimate,
            se_sandwich: fit.sandwich_se(c),
            se_mt: w.std_error,
            z: w.z,
            p: w.p,
        });
    }
    Ok(SecondStageFit { target: j, glm: fit, mt_covariance: mt, cross_derivatives: cross, edge_stats })
}

/// `∂S̄/∂ξ_kᵀ` with `S̄ = (1/N) Σ (y_i - μ_i) x̃_i`; `η̂_k` enters both `x̃_i`
/// (column `col`) and `μ_i`, giving
/// `(1/N) Σ [(y_i - μ_i) e_col - μ_i θ_k x̃_i] z_kiᵀ`.
fn cross_derivative(
    dataset: &PerturbDataset,
    design: &DesignMatrix,
    y: &[u32],
    fit: &GlmFit,
    col: usize,
    model: &ProxyModel,
) -> Result<Matrix, ProxyError> {
    let sources = resolve(&model.regressors, dataset)?;
    let d = sources.len();
    let q = design.n_cols();
    let theta = fit.coefficients[col];
    let mut c = Matrix::zeros(q, d);
    let mut z = vec![0.0; d];
    for i in 0..design.n_rows() {
        fill_row(&sources, dataset, i, &mut z);
        let mu = fit.fitted[i];
        let a = mu * theta;
        let x = design.row(i);
        for r in 0..q {
            let w = -a * x[r] + if r == col { f64::from(y[i]) - mu } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            for (s, zs) in z.iter().enumerate() {
                c[(r, s)] += w * zs;
            }
        }
    }
    Ok(c.scale(1.0 / design.n_rows() as f64))
}
