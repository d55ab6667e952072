//! Poisson quasi-maximum-likelihood regression with a log link and an
//! offset, fitted by iteratively reweighted least squares.
//!
//! The mean model is `E[y_i] = exp(offset_i + x_iᵀβ)`. Only the mean has to
//! be right: the Huber–White sandwich `A⁻¹ B A⁻¹ / N` stays valid under any
//! variance misspecification (negative-binomial overdispersion included),
//! which is why every regression in the pipeline goes through this kernel.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::math::{self, PValueConvention};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GlmError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("design has {n_cols} columns but only {n_obs} observations")]
    TooFewObservations { n_obs: usize, n_cols: usize },
    #[error("design column `{0}` is entirely zero")]
    ZeroColumn(String),
    #[error("design column `{0}` has non-finite entries")]
    NonFinite(String),
    #[error("duplicate design column label `{0}`")]
    DuplicateLabel(String),
    #[error("design is rank deficient; collinear column(s): {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("response is identically zero (no signal to fit)")]
    NoSignal,
    #[error("complete separation on column `{column}`: fitted means run to zero")]
    Separation { column: String },
    #[error("fit diverged: {0}")]
    Diverged(String),
    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("unknown design column `{0}`")]
    UnknownColumn(String),
    #[error("variance of `{column}` is not positive ({variance:e})")]
    NonPositiveVariance { column: String, variance: f64 },
}

/// Regressors for one fit, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: Matrix,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(x: Matrix, labels: Vec<String>) -> Result<Self, GlmError> {
        if labels.len() != x.cols() {
            return Err(GlmError::Shape(format!(
                "{} labels for {} columns",
                labels.len(),
                x.cols()
            )));
        }
        for (c, label) in labels.iter().enumerate() {
            if labels[..c].contains(label) {
                return Err(GlmError::DuplicateLabel(label.clone()));
            }
            let mut all_zero = true;
            for i in 0..x.rows() {
                let v = x[(i, c)];
                if !v.is_finite() {
                    return Err(GlmError::NonFinite(label.clone()));
                }
                if v != 0.0 {
                    all_zero = false;
                }
            }
            if all_zero {
                return Err(GlmError::ZeroColumn(label.clone()));
            }
        }
        Ok(Self { x, labels })
    }

    /// Builds a design from named columns.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self, GlmError> {
        let n = columns.first().map_or(0, |c| c.1.len());
        let q = columns.len();
        if let Some((label, _)) = columns.iter().find(|c| c.1.len() != n) {
            return Err(GlmError::Shape(format!("column `{label}` has a different length")));
        }
        let mut data = vec![0.0; n * q];
        for (c, (_, col)) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[i * q + c] = *v;
            }
        }
        let labels = columns.into_iter().map(|c| c.0).collect();
        Self::new(Matrix::from_row_major(n, q, data), labels)
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn matrix(&self) -> &Matrix {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.x[(i, c)]).collect()
    }

    fn is_constant(&self, c: usize) -> bool {
        let first = self.x[(0, c)];
        (1..self.n_rows()).all(|i| self.x[(i, c)] == first)
    }

    fn is_indicator(&self, c: usize) -> bool {
        (0..self.n_rows()).all(|i| {
            let v = self.x[(i, c)];
            v == 0.0 || v == 1.0
        })
    }

    fn column_range(&self, c: usize) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..self.n_rows() {
            lo = lo.min(self.x[(i, c)]);
            hi = hi.max(self.x[(i, c)]);
        }
        hi - lo
    }

    /// `Xᵀ diag(w) X`
    pub fn weighted_gram(&self, w: &[f64]) -> Matrix {
        let q = self.n_cols();
        let mut g = Matrix::zeros(q, q);
        for (i, &wi) in w.iter().enumerate() {
            let r = self.row(i);
            for a in 0..q {
                let ra = wi * r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..q {
                    g[(a, b)] += ra * r[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                g[(a, b)] = g[(b, a)];
            }
        }
        g
    }

    /// `Xᵀ v`
    pub fn transpose_times(&self, v: &[f64]) -> Vec<f64> {
        let q = self.n_cols();
        let mut out = vec![0.0; q];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += vi * x;
            }
        }
        out
    }

    pub fn linear_predictor(&self, beta: &[f64], offset: &[f64]) -> Vec<f64> {
        (0..self.n_rows()).map(|i| offset[i] + linalg::dot(self.row(i), beta)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmConfig {
    pub max_iterations: usize,
    /// On the max absolute mean score component.
    pub gradient_tolerance: f64,
    pub deviance_tolerance: f64,
    /// Relative pivot tolerance of the rank check.
    pub rank_tolerance: f64,
    /// A non-intercept coefficient moving the log mean by more than this
    /// across its column's range is treated as separation.
    pub separation_bound: f64,
}

impl Default for GlmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            deviance_tolerance: 1e-10,
            rank_tolerance: 1e-10,
            separation_bound: 15.0,
        }
    }
}

/// A converged Poisson QMLE fit with its covariance estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    /// `A⁻¹ / N`
    pub model_covariance: Matrix,
    /// `A⁻¹ B A⁻¹ / N`
    pub sandwich_covariance: Matrix,
    /// `A = -(1/N) Σ ∂s_i/∂βᵀ`
    pub bread: Matrix,
    /// `B = (1/N) Σ s_i s_iᵀ`
    pub meat: Matrix,
    /// Fitted means `exp(offset + xᵀβ)`.
    pub fitted: Vec<f64>,
    pub deviance: f64,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
}

impl GlmFit {
    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.column_index(label).map(|c| self.coefficients[c])
    }

    pub fn sandwich_se(&self, c: usize) -> f64 {
        math::sqrt(self.sandwich_covariance[(c, c)])
    }

    pub fn model_se(&self, c: usize) -> f64 {
        math::sqrt(self.model_covariance[(c, c)])
    }

    /// `A⁻¹`, the inverse of the bread.
    pub fn bread_inverse(&self) -> Matrix {
        self.model_covariance.scale(self.n_obs as f64)
    }
}

/// Wald statistic and p-value for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p: f64,
}

/// `Σ_i [y_i η_i - exp(η_i)]`, the Poisson log quasi-likelihood up to terms
/// free of β.
pub fn quasi_log_likelihood(y: &[u32], design: &DesignMatrix, offset: &[f64], beta: &[f64]) -> f64 {
    design
        .linear_predictor(beta, offset)
        .iter()
        .zip(y)
        .map(|(&eta, &yi)| f64::from(yi) * eta - math::exp(eta))
        .sum()
}

/// `(1/N) Σ_i (y_i - exp(η_i)) x_i`, the mean Poisson score at `beta`.
pub fn mean_score(y: &[u32], design: &DesignMatrix, offset: &[f64], beta: &[f64]) -> Vec<f64> {
    let resid: Vec<f64> = design
        .linear_predictor(beta, offset)
        .iter()
        .zip(y)
        .map(|(&eta, &yi)| f64::from(yi) - math::exp(eta))
        .collect();
    let n = design.n_rows() as f64;
    design.transpose_times(&resid).into_iter().map(|v| v / n).collect()
}

fn poisson_deviance(y: &[u32], mu: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&yi, &m) in y.iter().zip(mu) {
        let yf = f64::from(yi);
        if yi > 0 {
            d += yf * math::ln(yf / m) - (yf - m);
        } else {
            d += m;
        }
    }
    2.0 * d
}

fn means(eta: &[f64]) -> Option<Vec<f64>> {
    let mu: Vec<f64> = eta.iter().map(|&e| math::exp(e)).collect();
    if mu.iter().all(|m| m.is_finite() && *m > 0.0) {
        Some(mu)
    } else {
        None
    }
}

/// Fits `log E[y] = offset + Xβ` by IRLS with step halving and returns the
/// coefficients with model and sandwich covariances.
pub fn fit_poisson_qmle(
    y: &[u32],
    design: &DesignMatrix,
    offset: &[f64],
    config: &GlmConfig,
) -> Result<GlmFit, GlmError> {
    let n = design.n_rows();
    let q = design.n_cols();
    if y.len() != n || offset.len() != n {
        return Err(GlmError::Shape(format!(
            "{} responses and {} offsets for {n} design rows",
            y.len(),
            offset.len()
        )));
    }
    if n <= q {
        return Err(GlmError::TooFewObservations { n_obs: n, n_cols: q });
    }
    if offset.iter().any(|o| !o.is_finite()) {
        return Err(GlmError::Shape("offset has non-finite entries".to_string()));
    }
    if y.iter().all(|&v| v == 0) {
        return Err(GlmError::NoSignal);
    }
    check_indicator_separation(y, design)?;

    // rank check and starting values from one weighted least-squares pass
    // on log(y + 0.1)
    let w0: Vec<f64> = y.iter().map(|&v| f64::from(v) + 0.1).collect();
    let g0 = design.weighted_gram(&w0);
    let piv = linalg::pivoted_cholesky(&g0, config.rank_tolerance);
    if !piv.deficient.is_empty() {
        return Err(GlmError::RankDeficient {
            columns: piv.deficient.iter().map(|&c| design.labels()[c].clone()).collect(),
        });
    }
    let z0: Vec<f64> = w0
        .iter()
        .zip(offset)
        .map(|(&w, &o)| w * (math::ln(w) - o))
        .collect();
    let l0 = linalg::cholesky(&g0).ok_or_else(|| GlmError::RankDeficient {
        columns: design.labels().to_vec(),
    })?;
    let mut beta = linalg::cholesky_solve(&l0, &design.transpose_times(&z0));

    let nf = n as f64;
    let mut mu = means(&design.linear_predictor(&beta, offset)).ok_or_else(|| GlmError::Diverged("overflow at start".to_string()))?;
    let mut dev = poisson_deviance(y, &mu);
    let mut iterations = 0;
    let mut grad_norm;
    let mut converged = false;
    loop {
        let resid: Vec<f64> = y.iter().zip(&mu).map(|(&yi, &m)| f64::from(yi) - m).collect();
        let score = design.transpose_times(&resid);
        grad_norm = score.iter().map(|s| math::abs(*s) / nf).fold(0.0, f64::max);
        if grad_norm < config.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations >= config.max_iterations {
            break;
        }
        iterations += 1;
        let info = design.weighted_gram(&mu);
        let l = linalg::cholesky(&info).ok_or_else(|| GlmError::Diverged(format!(
            "information matrix lost positive definiteness at iteration {iterations}"
        )))?;
        let step = linalg::cholesky_solve(&l, &score);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let trial_eta = design.linear_predictor(&trial, offset);
            if let Some(trial_mu) = means(&trial_eta) {
                let trial_dev = poisson_deviance(y, &trial_mu);
                if trial_dev.is_finite() && trial_dev <= dev * (1.0 + 1e-12) + 1e-12 {
                    accepted = Some((trial, trial_mu, trial_dev));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((b, m, d)) = accepted else {
            return Err(GlmError::Diverged(format!(
                "step halving failed to reduce the deviance at iteration {iterations}"
            )));
        };
        let rel_change = math::abs(dev - d) / (math::abs(d) + 0.1);
        beta = b;
        mu = m;
        dev = d;
        if rel_change < config.deviance_tolerance {
            let resid: Vec<f64> = y.iter().zip(&mu).map(|(&yi, &m)| f64::from(yi) - m).collect();
            grad_norm = design
                .transpose_times(&resid)
                .iter()
                .map(|s| math::abs(*s) / nf)
                .fold(0.0, f64::max);
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GlmError::NotConverged { iterations, gradient_norm: grad_norm });
    }

    for c in 0..q {
        if design.is_constant(c) {
            continue;
        }
        if math::abs(beta[c]) * design.column_range(c) > config.separation_bound {
            return Err(GlmError::Separation { column: design.labels()[c].clone() });
        }
    }

    let bread = design.weighted_gram(&mu).scale(1.0 / nf);
    let sq_resid: Vec<f64> = y
        .iter()
        .zip(&mu)
        .map(|(&yi, &m)| {
            let r = f64::from(yi) - m;
            r * r
        })
        .collect();
    let meat = design.weighted_gram(&sq_resid).scale(1.0 / nf);
    let bread_inv = linalg::spd_inverse(&bread).ok_or_else(|| GlmError::RankDeficient {
        columns: design.labels().to_vec(),
    })?;
    let model_covariance = bread_inv.scale(1.0 / nf);
    let sandwich_covariance = bread_inv.matmul(&meat).matmul(&bread_inv).scale(1.0 / nf).symmetrized();

    Ok(GlmFit {
        labels: design.labels().to_vec(),
        coefficients: beta,
        model_covariance,
        sandwich_covariance,
        bread,
        meat,
        fitted: mu,
        deviance: dev,
        n_obs: n,
        converged,
        iterations,
        final_gradient_norm: grad_norm,
    })
}

/// An indicator column whose "on" group (or, with an intercept, whose "off"
/// group) has no counts at all sends its coefficient to ±∞.
fn check_indicator_separation(y: &[u32], design: &DesignMatrix) -> Result<(), GlmError> {
    let has_intercept = (0..design.n_cols()).any(|c| design.is_constant(c));
    for c in 0..design.n_cols() {
        if design.is_constant(c) || !design.is_indicator(c) {
            continue;
        }
        let (mut on, mut off) = (0u64, 0u64);
        for (i, &yi) in y.iter().enumerate() {
            if design.matrix()[(i, c)] == 1.0 {
                on += u64::from(yi);
            } else {
                off += u64::from(yi);
            }
        }
        if on == 0 || (has_intercept && off == 0) {
            return Err(GlmError::Separation { column: design.labels()[c].clone() });
        }
    }
    Ok(())
}

/// Wald z for one coefficient using the sandwich variance.
pub fn wald_z(fit: &GlmFit, label: &str, convention: PValueConvention) -> Result<WaldTest, GlmError> {
    let c = fit.column_index(label).ok_or_else(|| GlmError::UnknownColumn(label.to_string()))?;
    wald_from_variance(fit.coefficients[c], fit.sandwich_covariance[(c, c)], label, convention)
}

pub(crate) fn wald_from_variance(
    estimate: f64,
    variance: f64,
    label: &str,
    convention: PValueConvention,
) -> Result<WaldTest, GlmError> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(GlmError::NonPositiveVariance { column: label.to_string(), variance });
    }
    let se = math::sqrt(variance);
    let z = estimate / se;
    Ok(WaldTest { estimate, std_error: se, z, p: convention.p_value(z) })
}
