//! Descendant and ancestor sets from guide perturbations.
//!
//! For every ordered pair `(j, k)` the counts of gene `k` are regressed on
//! the guide indicator of `j` over the cells perturbed at `j` plus the
//! control cells. A non-zero indicator coefficient marks `k` as an
//! intervention-descendant of `j`. The pooled p-values go through one BH
//! step-up, and the resulting relation is closed transitively (descendants
//! of descendants are descendants), which needs only non-degenerate direct
//! effects rather than influentiality.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, PerturbDataset};
use crate::exec::{Executor, Sequential};
use crate::glm::{self, DesignMatrix, GlmConfig, GlmError};
use crate::linalg::Matrix;
use crate::math::PValueConvention;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AncestryError {
    #[error("a gene cannot be tested against itself (gene {0})")]
    SelfPair(usize),
    #[error("gene {0} has no perturbed cells")]
    NoPerturbedCells(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("p-value {0} is outside [0, 1]")]
    PValueRange(f64),
    #[error("alpha {0} must lie strictly between 0 and 1")]
    AlphaRange(f64),
    #[error("no gene pair could be tested")]
    NothingTestable,
    #[error("need at least two genes, found {0}")]
    TooFewGenes(usize),
}

/// Which descendant estimate to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AncestryMode {
    /// Transitive closure of the intervention-descendant relation.
    #[default]
    Closure,
    /// The intervention-descendant relation itself (assumes every ancestor
    /// shifts every descendant).
    Influential,
}

impl AncestryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AncestryMode::Closure => "closure",
            AncestryMode::Influential => "influential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "closure" => Some(Self::Closure),
            "influential" => Some(Self::Influential),
            _ => None,
        }
    }
}

/// Outcome of one `(j, k)` descendant test.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTest {
    pub z: f64,
    pub p: f64,
    pub tested: bool,
    /// Why the pair was not testable.
    pub reason: Option<String>,
}

impl PairTest {
    fn untested(reason: String) -> Self {
        Self { z: f64::NAN, p: 1.0, tested: false, reason: Some(reason) }
    }
}

/// Row `j`, column `k` holds the test of "k descends from j".
#[derive(Debug, Clone, PartialEq)]
pub struct PairTestMatrix {
    n: usize,
    z: Vec<f64>,
    pvals: Vec<f64>,
    tested: Vec<bool>,
    reasons: Vec<Option<String>>,
}

impl PairTestMatrix {
    /// Everything untested.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            z: vec![f64::NAN; n * n],
            pvals: vec![1.0; n * n],
            tested: vec![false; n * n],
            reasons: vec![None; n * n],
        }
    }

    /// Builds a matrix from raw p-values; entries that are `None` or on the
    /// diagonal are untested. z-scores are left undefined.
    pub fn from_pvalues(n: usize, pvals: &[Option<f64>]) -> Self {
        let mut m = Self::new(n);
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    continue;
                }
                if let Some(p) = pvals[j * n + k] {
                    m.set(j, k, PairTest { z: f64::NAN, p, tested: true, reason: None });
                }
            }
        }
        m
    }

    pub fn n_genes(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, j: usize, k: usize, t: PairTest) {
        let idx = j * self.n + k;
        self.z[idx] = t.z;
        self.pvals[idx] = t.p;
        self.tested[idx] = t.tested;
        self.reasons[idx] = t.reason;
    }

    pub fn z(&self, j: usize, k: usize) -> f64 {
        self.z[j * self.n + k]
    }

    pub fn p(&self, j: usize, k: usize) -> f64 {
        self.pvals[j * self.n + k]
    }

    pub fn is_tested(&self, j: usize, k: usize) -> bool {
        self.tested[j * self.n + k]
    }

    pub fn reason(&self, j: usize, k: usize) -> Option<&str> {
        self.reasons[j * self.n + k].as_deref()
    }

    /// Tested off-diagonal pairs in row-major order.
    pub fn tested_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.n {
            for k in 0..self.n {
                if j != k && self.is_tested(j, k) {
                    out.push((j, k));
                }
            }
        }
        out
    }
}

/// A descendant claim dropped to keep the relation acyclic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleConflict {
    /// The dropped claim "to ∈ des_I(from)".
    pub from: usize,
    pub to: usize,
    pub p: f64,
    /// Genes on the cycle the claim closed.
    pub cycle: Vec<usize>,
}

/// A directed cycle found while closing a descendant relation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("descendant relation is cyclic: {cycle:?}")]
pub struct CycleReport {
    /// Genes on the cycle in order; the last one points back to the first.
    pub cycle: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncestryResult {
    pub mode: AncestryMode,
    pub des_i: Vec<BTreeSet<usize>>,
    pub des: Vec<BTreeSet<usize>>,
    pub anc: Vec<BTreeSet<usize>>,
    pub pair_tests: PairTestMatrix,
    pub alpha_adjusted_threshold: f64,
    pub conflicts: Vec<CycleConflict>,
}

impl AncestryResult {
    /// Wraps hand-made descendant sets (taken as already closed) with the
    /// given pair tests.
    pub fn from_descendants(
        des: Vec<BTreeSet<usize>>,
        pair_tests: PairTestMatrix,
    ) -> Result<Self, CycleReport> {
        let closed = close_descendants(&des)?;
        let anc = ancestors_from(&closed);
        Ok(Self {
            mode: AncestryMode::Closure,
            des_i: des,
            des: closed,
            anc,
            pair_tests,
            alpha_adjusted_threshold: 0.0,
            conflicts: Vec::new(),
        })
    }

    pub fn n_genes(&self) -> usize {
        self.des.len()
    }

    /// Checks duality, irreflexivity, acyclicity and, in closure mode,
    /// transitivity.
    pub fn check_consistency(&self) -> Result<(), String> {
        let p = self.des.len();
        if self.anc.len() != p || self.pair_tests.n_genes() != p {
            return Err("ancestry components disagree on the number of genes".to_string());
        }
        for j in 0..p {
            if self.des[j].contains(&j) {
                return Err(format!("gene {j} is its own descendant"));
            }
            for &k in &self.des[j] {
                if k >= p {
                    return Err(format!("descendant index {k} out of range"));
                }
                if !self.anc[k].contains(&j) {
                    return Err(format!("{k} in des({j}) but {j} not in anc({k})"));
                }
            }
            for &k in &self.anc[j] {
                if k >= p || !self.des[k].contains(&j) {
                    return Err(format!("{k} in anc({j}) but {j} not in des({k})"));
                }
            }
        }
        if let Some(cycle) = find_cycle(&self.des) {
            return Err(format!("descendant relation has a cycle {cycle:?}"));
        }
        if self.mode == AncestryMode::Closure {
            for j in 0..p {
                for &k in &self.des[j] {
                    for &m in &self.des[k] {
                        if !self.des[j].contains(&m) {
                            return Err(format!("not transitive: {j}->{k}->{m}"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AncestryConfig {
    pub alpha: f64,
    pub mode: AncestryMode,
    pub convention: PValueConvention,
    pub glm: GlmConfig,
}

impl Default for AncestryConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: AncestryMode::Closure,
            convention: PValueConvention::TwoSided,
            glm: GlmConfig::default(),
        }
    }
}

pub(crate) fn guide_label(dataset: &PerturbDataset, gene: usize) -> String {
    format!("D_{}", dataset.gene_names()[gene])
}

/// Tests whether gene `k` responds to the guide of gene `j`.
pub fn test_descendant_pair(
    dataset: &PerturbDataset,
    j: usize,
    k: usize,
    convention: PValueConvention,
    glm_config: &GlmConfig,
) -> Result<PairTest, AncestryError> {
    if j == k {
        return Err(AncestryError::SelfPair(j));
    }
    if k >= dataset.n_genes() {
        return Err(DatasetError::GeneOutOfRange { index: k, n_genes: dataset.n_genes() }.into());
    }
    let treated = dataset.perturbation_cells(j)?;
    if treated.is_empty() {
        return Err(AncestryError::NoPerturbedCells(j));
    }
    let subset = treated.union(&dataset.control_cells());
    let cells = subset.indices();
    let y: Vec<u32> = cells.iter().map(|&i| dataset.count(i, k)).collect();
    let offset: Vec<f64> = cells.iter().map(|&i| crate::math::ln(dataset.size_factors()[i])).collect();

    let jc = dataset.n_covariates();
    let q = 2 + jc;
    let mut data = Vec::with_capacity(cells.len() * q);
    for &i in cells {
        data.push(1.0);
        data.push(if dataset.guide(i, j) { 1.0 } else { 0.0 });
        data.extend_from_slice(dataset.covariate_row(i));
    }
    let label = guide_label(dataset, j);
    let mut labels = vec!["intercept".to_string(), label.clone()];
    labels.extend(dataset.covariate_names().iter().cloned());
    let design = match DesignMatrix::new(Matrix::from_row_major(cells.len(), q, data), labels) {
        Ok(d) => d,
        Err(e) => return Ok(PairTest::untested(untestable_reason(&e))),
    };
    let fit = match glm::fit_poisson_qmle(&y, &design, &offset, glm_config) {
        Ok(f) => f,
        Err(e) => return Ok(PairTest::untested(untestable_reason(&e))),
    };
    match glm::wald_z(&fit, &label, convention) {
        Ok(w) => Ok(PairTest { z: w.z, p: w.p, tested: true, reason: None }),
        Err(e) => Ok(PairTest::untested(untestable_reason(&e))),
    }
}

fn untestable_reason(e: &GlmError) -> String {
    match e {
        GlmError::NoSignal => "no-signal".to_string(),
        GlmError::TooFewObservations { .. } => "too-few-cells".to_string(),
        GlmError::Separation { column } => format!("separation on {column}"),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BhResult {
    pub rejected: Vec<bool>,
    pub threshold: f64,
}

/// Benjamini–Hochberg step-up at level `alpha`.
pub fn bh_adjust(pvals: &[f64], alpha: f64) -> Result<BhResult, AncestryError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AncestryError::AlphaRange(alpha));
    }
    if let Some(&bad) = pvals.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(AncestryError::PValueRange(bad));
    }
    let m = pvals.len();
    if m == 0 {
        return Ok(BhResult { rejected: Vec::new(), threshold: 0.0 });
    }
    let threshold = bh_threshold(pvals, alpha);
    Ok(BhResult { rejected: pvals.iter().map(|&p| p <= threshold && threshold > 0.0).collect(), threshold })
}

/// `k* α / m` for the largest `k*` with `p_(k*) ≤ k* α / m`, or 0.
pub(crate) fn bh_threshold(pvals: &[f64], alpha: f64) -> f64 {
    let m = pvals.len();
    let mut sorted = pvals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let mut threshold = 0.0;
    for (rank, &p) in sorted.iter().enumerate() {
        let level = (rank + 1) as f64 * alpha / m as f64;
        if p <= level {
            threshold = level;
        }
    }
    threshold
}

/// Transitive closure by breadth-first reachability from each gene. Fails
/// with the offending cycle if any gene reaches itself.
pub fn close_descendants(des_i: &[BTreeSet<usize>]) -> Result<Vec<BTreeSet<usize>>, CycleReport> {
    if let Some(cycle) = find_cycle(des_i) {
        return Err(CycleReport { cycle });
    }
    let p = des_i.len();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let mut seen = BTreeSet::new();
        let mut frontier: Vec<usize> = des_i[j].iter().copied().collect();
        while let Some(m) = frontier.pop() {
            if seen.insert(m) {
                frontier.extend(des_i[m].iter().copied().filter(|x| !seen.contains(x)));
            }
        }
        out.push(seen);
    }
    Ok(out)
}

pub(crate) fn ancestors_from(des: &[BTreeSet<usize>]) -> Vec<BTreeSet<usize>> {
    let mut anc = vec![BTreeSet::new(); des.len()];
    for (j, set) in des.iter().enumerate() {
        for &k in set {
            anc[k].insert(j);
        }
    }
    anc
}

/// Some directed cycle of the relation (self-loops included), if any.
pub(crate) fn find_cycle(rel: &[BTreeSet<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let p = rel.len();
    let mut mark = vec![Mark::New; p];
    for root in 0..p {
        if mark[root] != Mark::New {
            continue;
        }
        // iterative DFS keeping the active path
        let mut path: Vec<usize> = vec![root];
        let mut iters: Vec<alloc::collections::btree_set::Iter<'_, usize>> = vec![rel[root].iter()];
        mark[root] = Mark::Active;
        while let Some(it) = iters.last_mut() {
            match it.next() {
                Some(&next) if next < p => match mark[next] {
                    Mark::Active => {
                        let start = path.iter().position(|&g| g == next).unwrap();
                        return Some(path[start..].to_vec());
                    }
                    Mark::New => {
                        mark[next] = Mark::Active;
                        path.push(next);
                        iters.push(rel[next].iter());
                    }
                    Mark::Done => {}
                },
                Some(_) => {}
                None => {
                    let done = path.pop().unwrap();
                    mark[done] = Mark::Done;
                    iters.pop();
                }
            }
        }
    }
    None
}

/// Runs every pair test, then [`ancestry_from_pair_tests`].
pub fn estimate_ancestry(dataset: &PerturbDataset, config: &AncestryConfig) -> Result<AncestryResult, AncestryError> {
    estimate_ancestry_with(&Sequential, dataset, config)
}

pub fn estimate_ancestry_with<E: Executor>(
    exec: &E,
    dataset: &PerturbDataset,
    config: &AncestryConfig,
) -> Result<AncestryResult, AncestryError> {
    let p = dataset.n_genes();
    if p < 2 {
        return Err(AncestryError::TooFewGenes(p));
    }
    let violations = dataset.validate();
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(AncestryError::InvalidDataset(msgs.join("; ")));
    }
    for (g, &n) in dataset.perturbed_cell_counts().iter().enumerate() {
        if n == 0 {
            return Err(AncestryError::NoPerturbedCells(g));
        }
    }
    let pairs: Vec<(usize, usize)> =
        (0..p).flat_map(|j| (0..p).filter(move |&k| k != j).map(move |k| (j, k))).collect();
    let results = exec.map(pairs.len(), |idx| {
        let (j, k) = pairs[idx];
        test_descendant_pair(dataset, j, k, config.convention, &config.glm)
    });
    let mut matrix = PairTestMatrix::new(p);
    for (&(j, k), r) in pairs.iter().zip(results) {
        matrix.set(j, k, r?);
    }
    ancestry_from_pair_tests(matrix, config.alpha, config.mode)
}

/// BH over all tested pairs, 2-cycle and longer-cycle resolution, closure
/// (per mode) and ancestor sets.
pub fn ancestry_from_pair_tests(
    pair_tests: PairTestMatrix,
    alpha: f64,
    mode: AncestryMode,
) -> Result<AncestryResult, AncestryError> {
    let p = pair_tests.n_genes();
    let tested = pair_tests.tested_pairs();
    if tested.is_empty() {
        return Err(AncestryError::NothingTestable);
    }
    let pvals: Vec<f64> = tested.iter().map(|&(j, k)| pair_tests.p(j, k)).collect();
    let bh = bh_adjust(&pvals, alpha)?;
    let mut des_i = vec![BTreeSet::new(); p];
    for (&(j, k), &rej) in tested.iter().zip(&bh.rejected) {
        if rej {
            des_i[j].insert(k);
        }
    }

    let mut conflicts = Vec::new();
    // mutual claims: keep the direction with the smaller p-value
    for j in 0..p {
        for k in (j + 1)..p {
            if des_i[j].contains(&k) && des_i[k].contains(&j) {
                let (pjk, pkj) = (pair_tests.p(j, k), pair_tests.p(k, j));
                let (from, to, pv) = if pjk <= pkj { (k, j, pkj) } else { (j, k, pjk) };
                des_i[from].remove(&to);
                log::warn!("mutual descendant claims between genes {j} and {k}; dropped {from}->{to}");
                conflicts.push(CycleConflict { from, to, p: pv, cycle: vec![j, k] });
            }
        }
    }
    // longer cycles: drop the weakest claim on each until none remain
    while let Some(cycle) = find_cycle(&des_i) {
        let mut worst = (cycle[cycle.len() - 1], cycle[0]);
        let mut worst_p = pair_tests.p(worst.0, worst.1);
        for w in cycle.windows(2) {
            let pv = pair_tests.p(w[0], w[1]);
            if pv > worst_p || (pv == worst_p && (w[0], w[1]) > worst) {
                worst = (w[0], w[1]);
                worst_p = pv;
            }
        }
        des_i[worst.0].remove(&worst.1);
        log::warn!("descendant cycle {cycle:?}; dropped {}->{}", worst.0, worst.1);
        conflicts.push(CycleConflict { from: worst.0, to: worst.1, p: worst_p, cycle });
    }

    let des = match mode {
        AncestryMode::Closure => close_descendants(&des_i).expect("cycles were removed above"),
        AncestryMode::Influential => des_i.clone(),
    };
    let anc = ancestors_from(&des);
    let result = AncestryResult {
        mode,
        des_i,
        des,
        anc,
        pair_tests,
        alpha_adjusted_threshold: bh.threshold,
        conflicts,
    };
    debug_assert!(result.check_consistency().is_ok());
    Ok(result)
}
