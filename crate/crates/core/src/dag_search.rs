//! Ordering and parent selection.
//!
//! Nodes are ordered from sink to root: at each step the unordered gene with
//! the fewest unordered descendants is placed next (ties broken by the
//! summed descendant evidence, then by index). The placed gene's parents
//! are chosen among its still-unordered estimated ancestors with one
//! proxy regression whose p-values form one online-FDR batch. Every edge
//! points from a gene placed later in the loop to one placed earlier, so
//! the result is acyclic whatever the input evidence.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PerturbDataset;
use crate::descendants::{AncestryResult, PairTestMatrix};
use crate::exec::{Executor, Sequential};
use crate::fdr::{FdrError, OnlineFdrState, SpendingSequence};
use crate::math;
use crate::proxy_iv::{self, Proxy, ProxyConfig, ProxyError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SearchError {
    #[error("need at least two genes, found {0}")]
    TooFewGenes(usize),
    #[error("ancestry covers {ancestry} genes but the dataset has {dataset}")]
    GeneCountMismatch { ancestry: usize, dataset: usize },
    #[error("inconsistent ancestry: {0}")]
    InconsistentAncestry(String),
    #[error(transparent)]
    Fdr(#[from] FdrError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub alpha: f64,
    pub spending: SpendingSequence,
    pub proxy: ProxyConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { alpha: 0.1, spending: SpendingSequence::default(), proxy: ProxyConfig::default() }
    }
}

/// A called edge `parent → child`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEstimate {
    pub parent: usize,
    pub child: usize,
    pub theta: f64,
    pub se_mt: f64,
    pub z: f64,
    pub p: f64,
    pub alpha_used: f64,
}

/// Second-stage inference for one candidate parent, called or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStat {
    pub parent: usize,
    pub theta: f64,
    pub se_sandwich: f64,
    pub se_mt: f64,
    pub z: f64,
    pub p: f64,
    pub called: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub gene: usize,
    pub reason: String,
}

/// What happened when one node was placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub node: usize,
    /// Intervention score at selection time.
    pub score: usize,
    /// Tie-break score at selection time.
    pub tiebreak: f64,
    pub candidates: Vec<usize>,
    pub dropped: Vec<DroppedCandidate>,
    /// Level of the FDR batch, absent when no batch was formed.
    pub batch_alpha: Option<f64>,
    pub stats: Vec<CandidateStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDag {
    pub gene_names: Vec<String>,
    /// Root-most first.
    pub ordering: Vec<usize>,
    pub edges: Vec<EdgeEstimate>,
    /// In the order nodes were placed (sink-most first).
    pub layer_log: Vec<LayerRecord>,
    pub fdr: OnlineFdrState,
}

impl CausalDag {
    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    /// Position of every gene in the ordering.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = alloc::vec![usize::MAX; self.ordering.len()];
        for (i, &g) in self.ordering.iter().enumerate() {
            pos[g] = i;
        }
        pos
    }

    /// Ordering is a permutation and every edge runs forward in it.
    pub fn check_invariants(&self) -> Result<(), String> {
        let p = self.n_genes();
        let mut seen = alloc::vec![false; p];
        if self.ordering.len() != p {
            return Err(format!("ordering has {} entries for {p} genes", self.ordering.len()));
        }
        for &g in &self.ordering {
            if g >= p || seen[g] {
                return Err(format!("ordering is not a permutation (gene {g})"));
            }
            seen[g] = true;
        }
        let pos = self.positions();
        for e in &self.edges {
            if pos[e.parent] >= pos[e.child] {
                return Err(format!("edge {} -> {} runs against the ordering", e.parent, e.child));
            }
            if !(e.theta.is_finite() && e.se_mt > 0.0 && e.se_mt.is_finite()) {
                return Err(format!("edge {} -> {} has non-finite statistics", e.parent, e.child));
            }
        }
        Ok(())
    }

    pub fn edge(&self, parent: usize, child: usize) -> Option<&EdgeEstimate> {
        self.edges.iter().find(|e| e.parent == parent && e.child == child)
    }

    /// Second-stage statistics of `parent` as a candidate for `child`.
    pub fn candidate_stat(&self, parent: usize, child: usize) -> Option<&CandidateStat> {
        self.layer_log
            .iter()
            .find(|l| l.node == child)
            .and_then(|l| l.stats.iter().find(|s| s.parent == parent))
    }
}

/// `|des(gene) \ removed|`
pub fn intervention_score(des: &[BTreeSet<usize>], removed: &BTreeSet<usize>, gene: usize) -> usize {
    des[gene].iter().filter(|k| !removed.contains(k)).count()
}

/// `−Σ log₁₀ p(gene, k)` over retained descendants `k`. Untested pairs
/// contribute nothing.
pub fn continuous_tiebreak(
    pair_tests: &PairTestMatrix,
    des: &BTreeSet<usize>,
    removed: &BTreeSet<usize>,
    gene: usize,
) -> f64 {
    let mut s = 0.0;
    for &k in des.iter().filter(|k| !removed.contains(k)) {
        if !pair_tests.is_tested(gene, k) {
            log::warn!("descendant claim {gene} -> {k} has no test; ignored in the tie-break score");
            continue;
        }
        let pv = pair_tests.p(gene, k).max(f64::MIN_POSITIVE);
        s -= math::log10(pv);
    }
    s
}

fn select_next(ancestry: &AncestryResult, removed: &BTreeSet<usize>) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for g in (0..ancestry.n_genes()).filter(|g| !removed.contains(g)) {
        let nu = intervention_score(&ancestry.des, removed, g);
        let s = continuous_tiebreak(&ancestry.pair_tests, &ancestry.des[g], removed, g);
        let better = match best {
            None => true,
            Some((_, bnu, bs)) => nu < bnu || (nu == bnu && s < bs),
        };
        if better {
            best = Some((g, nu, s));
        }
    }
    best
}

pub fn search(dataset: &PerturbDataset, ancestry: &AncestryResult, config: &SearchConfig) -> Result<CausalDag, SearchError> {
    search_with(&Sequential, dataset, ancestry, config)
}

pub fn search_with<E: Executor>(
    exec: &E,
    dataset: &PerturbDataset,
    ancestry: &AncestryResult,
    config: &SearchConfig,
) -> Result<CausalDag, SearchError> {
    let p = dataset.n_genes();
    if p < 2 {
        return Err(SearchError::TooFewGenes(p));
    }
    if ancestry.n_genes() != p {
        return Err(SearchError::GeneCountMismatch { ancestry: ancestry.n_genes(), dataset: p });
    }
    ancestry.check_consistency().map_err(SearchError::InconsistentAncestry)?;
    let mut fdr = OnlineFdrState::new(config.alpha, config.spending)?;

    let mut removed = BTreeSet::new();
    let mut placed = Vec::with_capacity(p);
    let mut edges = Vec::new();
    let mut layer_log = Vec::with_capacity(p);
    while let Some((node, score, tiebreak)) = select_next(ancestry, &removed) {
        removed.insert(node);
        placed.push(node);
        let candidates: Vec<usize> = ancestry.anc[node].iter().copied().filter(|k| !removed.contains(k)).collect();
        let mut record =
            LayerRecord { node, score, tiebreak, candidates: candidates.clone(), dropped: Vec::new(), batch_alpha: None, stats: Vec::new() };
        if candidates.is_empty() {
            layer_log.push(record);
            continue;
        }

        let built = exec.map(candidates.len(), |i| {
            let k = candidates[i];
            proxy_iv::build_proxy(dataset, k, &ancestry.anc[k], &config.proxy.glm)
        });
        let mut proxies: Vec<Proxy> = Vec::with_capacity(candidates.len());
        for (&k, r) in candidates.iter().zip(built) {
            match r {
                Ok(proxy) => proxies.push(proxy),
                Err(e) => {
                    log::warn!("gene {node}: dropping candidate {k}: {e}");
                    record.dropped.push(DroppedCandidate { gene: k, reason: e.to_string() });
                }
            }
        }

        let fit = loop {
            if proxies.is_empty() {
                break None;
            }
            match proxy_iv::fit_second_stage_with(exec, dataset, node, &proxies, &config.proxy) {
                Ok(fit) => break Some(fit),
                Err(ProxyError::Collinear { first, second, first_name, second_name, .. }) => {
                    let trace = |g: usize| {
                        proxies.iter().find(|px| px.model.gene == g).map_or(0.0, |px| px.model.variance_trace())
                    };
                    let drop = if trace(second) > trace(first) { second } else { first };
                    log::warn!("gene {node}: proxies {first_name} and {second_name} are collinear; dropping {drop}");
                    proxies.retain(|px| px.model.gene != drop);
                    record.dropped.push(DroppedCandidate {
                        gene: drop,
                        reason: format!("proxy collinear with {}", if drop == first { second_name } else { first_name }),
                    });
                }
                Err(ProxyError::DegenerateProxy { gene, name }) => {
                    log::warn!("gene {node}: proxy {name} is degenerate; dropping it");
                    proxies.retain(|px| px.model.gene != gene);
                    record.dropped.push(DroppedCandidate { gene, reason: "degenerate proxy".to_string() });
                }
                Err(e) => {
                    log::warn!("gene {node}: parent regression failed: {e}");
                    for px in proxies.drain(..) {
                        record.dropped.push(DroppedCandidate { gene: px.model.gene, reason: e.to_string() });
                    }
                    break None;
                }
            }
        };
        if let Some(fit) = fit {
            let pvals: Vec<f64> = fit.edge_stats.iter().map(|s| s.p).collect();
            let decision = fdr.next_batch(Some(node), &pvals)?;
            record.batch_alpha = Some(decision.alpha_used);
            for (s, &called) in fit.edge_stats.iter().zip(&decision.rejected) {
                record.stats.push(CandidateStat {
                    parent: s.parent,
                    theta: s.theta,
                    se_sandwich: s.se_sandwich,
                    se_mt: s.se_mt,
                    z: s.z,
                    p: s.p,
                    called,
                });
                if called {
                    edges.push(EdgeEstimate {
                        parent: s.parent,
                        child: node,
                        theta: s.theta,
                        se_mt: s.se_mt,
                        z: s.z,
                        p: s.p,
                        alpha_used: decision.alpha_used,
                    });
                }
            }
        }
        record.dropped.sort_by_key(|d| d.gene);
        layer_log.push(record);
    }

    placed.reverse();
    let dag = CausalDag { gene_names: dataset.gene_names().to_vec(), ordering: placed, edges, layer_log, fdr };
    debug_assert!(dag.check_invariants().is_ok());
    Ok(dag)
}
