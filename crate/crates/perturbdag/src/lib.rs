//! File formats, a thread-pool executor and the `perturbdag` command line
//! for [`perturbdag_core`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use perturbdag_core::dag_search::{search_with, CausalDag, SearchConfig, SearchError};
use perturbdag_core::dataset::{min_cell_filter, DatasetError, PerturbDataset};
use perturbdag_core::descendants::{estimate_ancestry_with, AncestryConfig, AncestryError, AncestryResult};
use perturbdag_core::exec::Executor;
use perturbdag_core::proxy_iv::ProxyConfig;
use perturbdag_core::simulator::SimulatorError;
use thiserror::Error;

pub mod cli;
pub mod config;
pub mod executor;
pub mod formats;
pub mod report;

pub use config::RunConfig;
pub use executor::RayonExecutor;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid dataset:\n  {}", .0.join("\n  "))]
    InvalidDataset(Vec<String>),
    #[error("need ≥2 genes, found {0}")]
    TooFewGenes(usize),
    #[error("need ≥2 genes, {left} left after exclusions: {}", .excluded.join("; "))]
    TooFewAfterExclusion { left: usize, excluded: Vec<String> },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ancestry(#[from] AncestryError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}

/// Everything a fit produces.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// The dataset actually analysed (after gene exclusions).
    pub dataset: PerturbDataset,
    /// Removed gene → reason.
    pub excluded: BTreeMap<String, String>,
    pub ancestry: AncestryResult,
    pub dag: CausalDag,
}

/// Validation, gene exclusion, descendant estimation and DAG search.
///
/// `omit` names genes to leave out of the analysis entirely (their counts
/// and the cells perturbing them are removed).
pub fn fit_dataset<E: Executor>(
    exec: &E,
    dataset: &PerturbDataset,
    config: &RunConfig,
    omit: &[String],
) -> Result<FitOutcome, Error> {
    let violations = dataset.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(violations.iter().map(ToString::to_string).collect()));
    }
    let mut excluded = BTreeMap::new();
    let mut ds = dataset.clone();
    if !omit.is_empty() {
        for name in omit {
            if ds.gene_index(name).is_none() {
                return Err(Error::Usage(format!("cannot omit unknown gene `{name}`")));
            }
            excluded.insert(name.clone(), "omitted".to_string());
        }
        let keep: Vec<usize> = (0..ds.n_genes()).filter(|&g| !omit.contains(&ds.gene_names()[g])).collect();
        if keep.len() < 2 {
            return Err(Error::TooFewGenes(keep.len()));
        }
        ds = ds.restrict_genes(&keep)?;
    }
    if ds.n_genes() < 2 {
        return Err(Error::TooFewGenes(ds.n_genes()));
    }
    let (filtered, dropped) = min_cell_filter(&ds, config.min_cells)?;
    for name in dropped {
        excluded.insert(name, format!("fewer than {} perturbed cells", config.min_cells));
    }
    if filtered.n_genes() < 2 {
        return Err(Error::TooFewAfterExclusion {
            left: filtered.n_genes(),
            excluded: excluded.iter().map(|(g, why)| format!("{g} ({why})")).collect(),
        });
    }
    let violations = filtered.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(violations.iter().map(ToString::to_string).collect()));
    }
    let proxy = ProxyConfig { convention: config.pvalue_convention, ..ProxyConfig::default() };
    let anc_cfg = AncestryConfig {
        alpha: config.alpha,
        mode: config.ancestry_mode,
        convention: config.pvalue_convention,
        glm: proxy.glm,
    };
    let ancestry = estimate_ancestry_with(exec, &filtered, &anc_cfg)?;
    let search_cfg = SearchConfig { alpha: config.alpha, spending: config.spending, proxy };
    let dag = search_with(exec, &filtered, &ancestry, &search_cfg)?;
    Ok(FitOutcome { dataset: filtered, excluded, ancestry, dag })
}
