//! Observed Perturb-seq data: UMI counts, guide indicators, technical
//! covariates and per-cell size factors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DatasetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate gene name `{0}`")]
    DuplicateGene(String),
    #[error("gene index {index} out of range for {n_genes} genes")]
    GeneOutOfRange { index: usize, n_genes: usize },
    #[error("cell {cell} has zero total count; size factor undefined")]
    ZeroTotal { cell: usize },
    #[error("minimum perturbed-cell threshold must be at least 1")]
    ZeroThreshold,
    #[error("threshold {threshold} exceeds the number of cells ({n_cells})")]
    ThresholdTooLarge { threshold: usize, n_cells: usize },
    #[error("every gene has fewer than {threshold} perturbed cells")]
    AllGenesDropped { threshold: usize },
    #[error("dataset has no cells left after restriction")]
    NoCells,
}

/// Everything needed to build a [`PerturbDataset`]. All matrices are
/// row-major with one row per cell.
#[derive(Debug, Clone, Default)]
pub struct DatasetParts {
    pub cell_ids: Vec<String>,
    pub gene_names: Vec<String>,
    pub counts: Vec<u32>,
    pub guides: Vec<bool>,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<f64>,
    pub size_factors: Vec<f64>,
}

/// N cells by p genes. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbDataset {
    cell_ids: Vec<String>,
    gene_names: Vec<String>,
    counts: Vec<u32>,
    guides: Vec<bool>,
    covariate_names: Vec<String>,
    covariates: Vec<f64>,
    size_factors: Vec<f64>,
}

/// A structural problem found by [`PerturbDataset::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    GuideRowSum { cell: usize, sum: usize },
    NonPositiveSizeFactor { cell: usize, value: f64 },
    NonFiniteCovariate { cell: usize, covariate: usize },
    NoControlCells,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::GuideRowSum { cell, sum } => {
                write!(f, "cell {cell}: guide row sums to {sum} (expected 0 or 1)")
            }
            Violation::NonPositiveSizeFactor { cell, value } => {
                write!(f, "cell {cell}: size factor {value} is not strictly positive")
            }
            Violation::NonFiniteCovariate { cell, covariate } => {
                write!(f, "cell {cell}: covariate column {covariate} is not finite")
            }
            Violation::NoControlCells => write!(f, "no control cell (all-zero guide row) present"),
        }
    }
}

/// Strictly increasing cell indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellSubset {
    indices: Vec<usize>,
}

impl CellSubset {
    /// Panics unless `indices` is strictly increasing.
    pub fn new(indices: Vec<usize>) -> Self {
        assert!(indices.windows(2).all(|w| w[0] < w[1]), "cell subset must be strictly increasing");
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Sorted union of two subsets.
    pub fn union(&self, other: &CellSubset) -> CellSubset {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut a, mut b) = (0, 0);
        while a < self.len() || b < other.len() {
            let next = match (self.indices.get(a), other.indices.get(b)) {
                (Some(&x), Some(&y)) if x == y => {
                    a += 1;
                    b += 1;
                    x
                }
                (Some(&x), Some(&y)) if x < y => {
                    a += 1;
                    x
                }
                (Some(_), Some(&y)) => {
                    b += 1;
                    y
                }
                (Some(&x), None) => {
                    a += 1;
                    x
                }
                (None, Some(&y)) => {
                    b += 1;
                    y
                }
                (None, None) => unreachable!(),
            };
            out.push(next);
        }
        CellSubset { indices: out }
    }
}

impl PerturbDataset {
    pub fn new(parts: DatasetParts) -> Result<Self, DatasetError> {
        let n = parts.cell_ids.len();
        let p = parts.gene_names.len();
        let j = parts.covariate_names.len();
        if parts.counts.len() != n * p {
            return Err(DatasetError::Shape(format!(
                "counts has {} entries, expected {n} cells x {p} genes",
                parts.counts.len()
            )));
        }
        if parts.guides.len() != n * p {
            return Err(DatasetError::Shape(format!(
                "guides has {} entries, expected {n} cells x {p} genes",
                parts.guides.len()
            )));
        }
        if parts.covariates.len() != n * j {
            return Err(DatasetError::Shape(format!(
                "covariates has {} entries, expected {n} cells x {j} columns",
                parts.covariates.len()
            )));
        }
        if parts.size_factors.len() != n {
            return Err(DatasetError::Shape(format!(
                "{} size factors for {n} cells",
                parts.size_factors.len()
            )));
        }
        for (a, name) in parts.gene_names.iter().enumerate() {
            if parts.gene_names[..a].contains(name) {
                return Err(DatasetError::DuplicateGene(name.clone()));
            }
        }
        Ok(Self {
            cell_ids: parts.cell_ids,
            gene_names: parts.gene_names,
            counts: parts.counts,
            guides: parts.guides,
            covariate_names: parts.covariate_names,
            covariates: parts.covariates,
            size_factors: parts.size_factors,
        })
    }

    pub fn into_parts(self) -> DatasetParts {
        DatasetParts {
            cell_ids: self.cell_ids,
            gene_names: self.gene_names,
            counts: self.counts,
            guides: self.guides,
            covariate_names: self.covariate_names,
            covariates: self.covariates,
            size_factors: self.size_factors,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn gene_index(&self, name: &str) -> Option<usize> {
        self.gene_names.iter().position(|g| g == name)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn guides(&self) -> &[bool] {
        &self.guides
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn size_factors(&self) -> &[f64] {
        &self.size_factors
    }

    #[inline]
    pub fn count(&self, cell: usize, gene: usize) -> u32 {
        self.counts[cell * self.n_genes() + gene]
    }

    #[inline]
    pub fn guide(&self, cell: usize, gene: usize) -> bool {
        self.guides[cell * self.n_genes() + gene]
    }

    #[inline]
    pub fn covariate(&self, cell: usize, column: usize) -> f64 {
        self.covariates[cell * self.n_covariates() + column]
    }

    pub fn covariate_row(&self, cell: usize) -> &[f64] {
        let j = self.n_covariates();
        &self.covariates[cell * j..(cell + 1) * j]
    }

    /// Counts of one gene across all cells.
    pub fn gene_counts(&self, gene: usize) -> Vec<u32> {
        (0..self.n_cells()).map(|i| self.count(i, gene)).collect()
    }

    /// The gene targeted in `cell`, if any (first set indicator).
    pub fn target(&self, cell: usize) -> Option<usize> {
        let p = self.n_genes();
        self.guides[cell * p..(cell + 1) * p].iter().position(|&g| g)
    }

    pub fn is_control(&self, cell: usize) -> bool {
        let p = self.n_genes();
        !self.guides[cell * p..(cell + 1) * p].iter().any(|&g| g)
    }

    pub fn log_size_factors(&self) -> Vec<f64> {
        self.size_factors.iter().map(|&l| crate::math::ln(l)).collect()
    }

    /// Empty iff every structural invariant holds.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let p = self.n_genes();
        let mut any_control = false;
        for i in 0..self.n_cells() {
            let sum = self.guides[i * p..(i + 1) * p].iter().filter(|&&g| g).count();
            if sum > 1 {
                out.push(Violation::GuideRowSum { cell: i, sum });
            }
            if sum == 0 {
                any_control = true;
            }
        }
        for (i, &l) in self.size_factors.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                out.push(Violation::NonPositiveSizeFactor { cell: i, value: l });
            }
        }
        for i in 0..self.n_cells() {
            for c in 0..self.n_covariates() {
                if !self.covariate(i, c).is_finite() {
                    out.push(Violation::NonFiniteCovariate { cell: i, covariate: c });
                }
            }
        }
        if !any_control {
            out.push(Violation::NoControlCells);
        }
        out
    }

    /// Cells carrying the guide for gene `j`.
    pub fn perturbation_cells(&self, j: usize) -> Result<CellSubset, DatasetError> {
        self.check_gene(j)?;
        Ok(CellSubset::new((0..self.n_cells()).filter(|&i| self.guide(i, j)).collect()))
    }

    /// Cells with an all-zero guide row.
    pub fn control_cells(&self) -> CellSubset {
        CellSubset::new((0..self.n_cells()).filter(|&i| self.is_control(i)).collect())
    }

    pub fn perturbed_cell_counts(&self) -> Vec<usize> {
        let p = self.n_genes();
        let mut out = alloc::vec![0usize; p];
        for i in 0..self.n_cells() {
            for (j, o) in out.iter_mut().enumerate() {
                if self.guide(i, j) {
                    *o += 1;
                }
            }
        }
        out
    }

    fn check_gene(&self, j: usize) -> Result<(), DatasetError> {
        if j >= self.n_genes() {
            return Err(DatasetError::GeneOutOfRange { index: j, n_genes: self.n_genes() });
        }
        Ok(())
    }

    /// Keeps the listed genes (in the given order) as nodes. Cells whose guide
    /// targets a removed gene are dropped: they are neither controls nor
    /// perturbations of a retained node. Size factors are carried over
    /// unchanged.
    pub fn restrict_genes(&self, keep: &[usize]) -> Result<PerturbDataset, DatasetError> {
        for &g in keep {
            self.check_gene(g)?;
        }
        let p = self.n_genes();
        let j = self.n_covariates();
        let mut parts = DatasetParts {
            gene_names: keep.iter().map(|&g| self.gene_names[g].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            ..Default::default()
        };
        for i in 0..self.n_cells() {
            let row = &self.guides[i * p..(i + 1) * p];
            let hits_removed = row.iter().enumerate().any(|(g, &on)| on && !keep.contains(&g));
            if hits_removed {
                continue;
            }
            parts.cell_ids.push(self.cell_ids[i].clone());
            parts.counts.extend(keep.iter().map(|&g| self.count(i, g)));
            parts.guides.extend(keep.iter().map(|&g| row[g]));
            parts.covariates.extend_from_slice(&self.covariates[i * j..(i + 1) * j]);
            parts.size_factors.push(self.size_factors[i]);
        }
        if parts.cell_ids.is_empty() {
            return Err(DatasetError::NoCells);
        }
        PerturbDataset::new(parts)
    }

    /// Same data with every size factor multiplied by `factor`.
    pub fn with_scaled_size_factors(&self, factor: f64) -> PerturbDataset {
        let mut out = self.clone();
        out.size_factors.iter_mut().for_each(|l| *l *= factor);
        out
    }

    /// Same data with new size factors.
    pub fn with_size_factors(&self, size_factors: Vec<f64>) -> Result<PerturbDataset, DatasetError> {
        if size_factors.len() != self.n_cells() {
            return Err(DatasetError::Shape(format!(
                "{} size factors for {} cells",
                size_factors.len(),
                self.n_cells()
            )));
        }
        let mut out = self.clone();
        out.size_factors = size_factors;
        Ok(out)
    }
}

/// Total-count size factors, normalized by the median total.
pub fn size_factors_from_totals(
    counts: &[u32],
    n_cells: usize,
    n_genes: usize,
) -> Result<Vec<f64>, DatasetError> {
    if counts.len() != n_cells * n_genes {
        return Err(DatasetError::Shape(format!(
            "counts has {} entries, expected {n_cells} x {n_genes}",
            counts.len()
        )));
    }
    let totals: Vec<f64> = (0..n_cells)
        .map(|i| counts[i * n_genes..(i + 1) * n_genes].iter().map(|&c| f64::from(c)).sum())
        .collect();
    if let Some(cell) = totals.iter().position(|&t| t <= 0.0) {
        return Err(DatasetError::ZeroTotal { cell });
    }
    let med = median(&totals);
    Ok(totals.iter().map(|t| t / med).collect())
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Drops genes with fewer than `min_perturbed` perturbed cells. Returns the
/// filtered dataset and the names of the dropped genes.
pub fn min_cell_filter(
    dataset: &PerturbDataset,
    min_perturbed: usize,
) -> Result<(PerturbDataset, Vec<String>), DatasetError> {
    if min_perturbed == 0 {
        return Err(DatasetError::ZeroThreshold);
    }
    if min_perturbed > dataset.n_cells() {
        return Err(DatasetError::ThresholdTooLarge {
            threshold: min_perturbed,
            n_cells: dataset.n_cells(),
        });
    }
    let per_gene = dataset.perturbed_cell_counts();
    let keep: Vec<usize> = (0..dataset.n_genes()).filter(|&g| per_gene[g] >= min_perturbed).collect();
    if keep.is_empty() {
        return Err(DatasetError::AllGenesDropped { threshold: min_perturbed });
    }
    let dropped = (0..dataset.n_genes())
        .filter(|g| !keep.contains(g))
        .map(|g| dataset.gene_names()[g].clone())
        .collect();
    if keep.len() == dataset.n_genes() {
        return Ok((dataset.clone(), dropped));
    }
    Ok((dataset.restrict_genes(&keep)?, dropped))
}
