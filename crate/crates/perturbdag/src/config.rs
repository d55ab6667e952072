//! Run configuration and the flat `key=value` config file.
//!
//! ```text
//! # comment
//! alpha = 0.1
//! ancestry_mode = closure
//! spending = geometric:0.5
//! ```
//!
//! Keys match the long command-line flags with `-` replaced by `_`. Unknown
//! keys and duplicate keys are errors. Command-line flags override the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use perturbdag_core::descendants::AncestryMode;
use perturbdag_core::fdr::SpendingSequence;
use perturbdag_core::math::PValueConvention;
use serde::Serialize;

use crate::Error;

pub const KEYS: &[&str] = &[
    "alpha",
    "ancestry_mode",
    "pvalue_convention",
    "min_cells",
    "spending",
    "seed",
    "threads",
    "cells",
    "data",
    "out",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub ancestry_mode: AncestryMode,
    pub pvalue_convention: PValueConvention,
    /// Genes with fewer perturbed cells are not graph nodes.
    pub min_cells: usize,
    pub spending: SpendingSequence,
    pub seed: Option<u64>,
    /// 0 means one thread per core.
    pub threads: usize,
    /// Cell count for `simulate`; the truth's design size when absent.
    pub cells: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            ancestry_mode: AncestryMode::Closure,
            pvalue_convention: PValueConvention::TwoSided,
            min_cells: 50,
            spending: SpendingSequence::InverseSquare,
            seed: None,
            threads: 0,
            cells: None,
            data: None,
            out: None,
        }
    }
}

/// Parses `inverse_square` or `geometric:<ratio>`.
pub fn parse_spending(s: &str) -> Result<SpendingSequence, String> {
    let seq = match s.split_once(':') {
        None if s == "inverse_square" => SpendingSequence::InverseSquare,
        Some(("geometric", r)) => {
            SpendingSequence::Geometric { ratio: r.parse().map_err(|_| format!("bad geometric ratio `{r}`"))? }
        }
        _ => return Err(format!("unknown spending sequence `{s}` (inverse_square | geometric:<ratio>)")),
    };
    seq.validate().map_err(|e| e.to_string())?;
    Ok(seq)
}

pub fn spending_str(s: SpendingSequence) -> String {
    match s {
        SpendingSequence::InverseSquare => "inverse_square".into(),
        SpendingSequence::Geometric { ratio } => format!("geometric:{ratio}"),
    }
}

pub fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha {a} must lie strictly between 0 and 1"))
    }
}

pub fn parse_ancestry_mode(s: &str) -> Result<AncestryMode, String> {
    AncestryMode::parse(s).ok_or_else(|| format!("unknown ancestry mode `{s}` (closure | influential)"))
}

pub fn parse_convention(s: &str) -> Result<PValueConvention, String> {
    PValueConvention::parse(s).ok_or_else(|| format!("unknown p-value convention `{s}` (two_sided | upper_tail)"))
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
}

fn parse_min_cells(s: &str) -> Result<usize, String> {
    match parse_num::<usize>(s)? {
        0 => Err("min_cells must be at least 1".into()),
        n => Ok(n),
    }
}

/// Key/value pairs of a config file.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text).map_err(|m| Error::Config(format!("{}: {m}", path.display())))
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(format!("line {}: unknown key `{k}`", n + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{k}`", n + 1));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let err = |m: String| format!("{key}: {m}");
        match key {
            "alpha" => self.alpha = parse_alpha(value).map_err(err)?,
            "ancestry_mode" => self.ancestry_mode = parse_ancestry_mode(value).map_err(err)?,
            "pvalue_convention" => self.pvalue_convention = parse_convention(value).map_err(err)?,
            "min_cells" => self.min_cells = parse_min_cells(value).map_err(err)?,
            "spending" => self.spending = parse_spending(value).map_err(err)?,
            "seed" => self.seed = Some(parse_num(value).map_err(err)?),
            "threads" => self.threads = parse_num(value).map_err(err)?,
            "cells" => self.cells = Some(parse_num(value).map_err(err)?),
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), Error> {
        for (k, v) in pairs {
            self.set(k, v).map_err(Error::Config)?;
        }
        Ok(())
    }

    /// Text form accepted back by [`RunConfig::set`]; unset keys are omitted.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("alpha", self.alpha.to_string()),
            ("ancestry_mode", self.ancestry_mode.as_str().to_string()),
            ("pvalue_convention", self.pvalue_convention.as_str().to_string()),
            ("min_cells", self.min_cells.to_string()),
            ("spending", spending_str(self.spending)),
        ];
        if let Some(s) = self.seed {
            out.push(("seed", s.to_string()));
        }
        out.push(("threads", self.threads.to_string()));
        if let Some(c) = self.cells {
            out.push(("cells", c.to_string()));
        }
        if let Some(d) = &self.data {
            out.push(("data", d.display().to_string()));
        }
        if let Some(o) = &self.out {
            out.push(("out", o.display().to_string()));
        }
        out
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
