//! Fit outputs: `dag.json`, `edges.tsv`, `graph.dot`, and audit tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use perturbdag_core::dag_search::CausalDag;
use perturbdag_core::descendants::{AncestryMode, AncestryResult, CycleConflict};
use serde::{Deserialize, Serialize};

use crate::formats::{fmt_real, write_table};
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DAG_JSON: &str = "dag.json";
pub const EDGES_TSV: &str = "edges.tsv";
pub const GRAPH_DOT: &str = "graph.dot";
pub const FDR_AUDIT_TSV: &str = "fdr_audit.tsv";
pub const PAIR_TESTS_TSV: &str = "pair_tests.tsv";
pub const SECOND_STAGE_TSV: &str = "second_stage.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UntestedPair {
    pub from: String,
    pub to: String,
    pub reason: String,
}

/// Descendant-stage summary, with genes by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncestryDiagnostics {
    pub mode: AncestryMode,
    /// Largest p-value rejected by the pooled BH step (0 when none).
    pub bh_threshold: f64,
    pub intervention_descendants: BTreeMap<String, Vec<String>>,
    pub descendants: BTreeMap<String, Vec<String>>,
    pub ancestors: BTreeMap<String, Vec<String>>,
    /// Claims removed to break cycles; indices refer to `gene_names` of the DAG.
    pub conflicts: Vec<CycleConflict>,
    pub untested: Vec<UntestedPair>,
}

impl AncestryDiagnostics {
    pub fn new(anc: &AncestryResult, names: &[String]) -> Self {
        let by_name = |sets: &[std::collections::BTreeSet<usize>]| {
            sets.iter().enumerate().map(|(j, s)| (names[j].clone(), s.iter().map(|&k| names[k].clone()).collect())).collect()
        };
        let p = names.len();
        let mut untested = Vec::new();
        for j in 0..p {
            for k in 0..p {
                if j != k && !anc.pair_tests.is_tested(j, k) {
                    untested.push(UntestedPair {
                        from: names[j].clone(),
                        to: names[k].clone(),
                        reason: anc.pair_tests.reason(j, k).unwrap_or("untested").to_string(),
                    });
                }
            }
        }
        Self {
            mode: anc.mode,
            bh_threshold: anc.alpha_adjusted_threshold,
            intervention_descendants: by_name(&anc.des_i),
            descendants: by_name(&anc.des),
            ancestors: by_name(&anc.anc),
            conflicts: anc.conflicts.clone(),
            untested,
        }
    }
}

/// Contents of `dag.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub software_version: String,
    /// Seconds since the Unix epoch; the only field that differs between
    /// reruns on identical input.
    pub timestamp: u64,
    /// Seed recorded with the input data, when known.
    pub data_seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    /// Genes removed before fitting and why.
    pub excluded_genes: BTreeMap<String, String>,
    pub ancestry: AncestryDiagnostics,
    pub dag: CausalDag,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_report(path: &Path) -> Result<FitReport, Error> {
    let value: serde_json::Value = read_json(path)?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => return Err(Error::Format(format!("{}: unsupported schema_version {v}", path.display()))),
        None => return Err(Error::Format(format!("{}: missing schema_version", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One row per second-stage candidate, called or not.
pub fn write_edges(dag: &CausalDag, path: &Path) -> Result<(), Error> {
    let names = &dag.gene_names;
    let rows = dag.layer_log.iter().flat_map(|layer| {
        layer.stats.iter().map(move |s| {
            [
                names[s.parent].clone(),
                names[layer.node].clone(),
                fmt_real(s.theta),
                fmt_real(s.se_mt),
                fmt_real(s.z),
                fmt_real(s.p),
                fmt_real(layer.batch_alpha.unwrap_or(f64::NAN)),
                s.called.to_string(),
            ]
        })
    });
    write_table(path, &["parent", "child", "theta", "se_mt", "z", "p", "alpha_used", "called"], rows)
}

/// Called edges, blue for positive and red for negative coefficients.
pub fn render_dot(dag: &CausalDag) -> String {
    let names = &dag.gene_names;
    let mut s = String::from("digraph causal {\n  rankdir=TB;\n");
    for &g in &dag.ordering {
        s.push_str(&format!("  \"{}\";\n", names[g]));
    }
    for e in &dag.edges {
        let (color, sign) = if e.theta >= 0.0 { ("blue", "positive") } else { ("red", "negative") };
        s.push_str(&format!(
            "  \"{}\" -> \"{}\" [color={color}, sign={sign}, label=\"{:.3}\"];\n",
            names[e.parent], names[e.child], e.theta
        ));
    }
    s.push_str("}\n");
    s
}

pub fn write_fdr_audit(dag: &CausalDag, path: &Path) -> Result<(), Error> {
    let rows = dag.fdr.history().iter().enumerate().map(|(t, b)| {
        [
            (t + 1).to_string(),
            b.node.map_or_else(|| "-".to_string(), |g| dag.gene_names[g].clone()),
            b.size.to_string(),
            fmt_real(b.alpha),
            b.rejections.to_string(),
        ]
    });
    write_table(path, &["batch", "node", "m_t", "alpha_t", "rejections"], rows)
}

pub fn write_pair_tests(anc: &AncestryResult, names: &[String], path: &Path) -> Result<(), Error> {
    let p = names.len();
    let rows = (0..p).flat_map(|j| (0..p).filter(move |&k| k != j).map(move |k| (j, k))).map(|(j, k)| {
        let m = &anc.pair_tests;
        [
            names[j].clone(),
            names[k].clone(),
            fmt_real(m.z(j, k)),
            fmt_real(m.p(j, k)),
            m.is_tested(j, k).to_string(),
            anc.des_i[j].contains(&k).to_string(),
            m.reason(j, k).unwrap_or("-").to_string(),
        ]
    });
    write_table(path, &["j", "k", "z", "p", "tested", "called", "reason"], rows)
}

pub fn write_second_stage(dag: &CausalDag, path: &Path) -> Result<(), Error> {
    let names = &dag.gene_names;
    let rows = dag.layer_log.iter().flat_map(|layer| {
        let fitted = layer.stats.iter().map(move |s| {
            [
                names[layer.node].clone(),
                names[s.parent].clone(),
                fmt_real(s.theta),
                fmt_real(s.se_sandwich),
                fmt_real(s.se_mt),
                fmt_real(s.z),
                fmt_real(s.p),
                if s.called { "called" } else { "not_called" }.to_string(),
            ]
        });
        let dropped = layer.dropped.iter().map(move |d| {
            let nan = fmt_real(f64::NAN);
            [
                names[layer.node].clone(),
                names[d.gene].clone(),
                nan.clone(),
                nan.clone(),
                nan.clone(),
                nan.clone(),
                nan,
                format!("dropped:{}", d.reason.replace(['\t', '\n'], " ")),
            ]
        });
        fitted.chain(dropped)
    });
    write_table(path, &["node", "parent", "theta", "se_sandwich", "se_mt", "z", "p", "status"], rows)
}

/// Writes every fit output into `dir`.
pub fn write_fit_outputs(report: &FitReport, anc: &AncestryResult, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(DAG_JSON), report)?;
    write_edges(&report.dag, &dir.join(EDGES_TSV))?;
    let dot = dir.join(GRAPH_DOT);
    fs::write(&dot, render_dot(&report.dag)).map_err(|e| Error::io(&dot, e))?;
    write_fdr_audit(&report.dag, &dir.join(FDR_AUDIT_TSV))?;
    write_pair_tests(anc, &report.dag.gene_names, &dir.join(PAIR_TESTS_TSV))?;
    write_second_stage(&report.dag, &dir.join(SECOND_STAGE_TSV))
}
