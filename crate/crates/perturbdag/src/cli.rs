//! `perturbdag simulate | fit | evaluate`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use perturbdag_core::simulator::{evaluate, simulate_with, GroundTruth};

use crate::config::{read_config_file, RunConfig};
use crate::executor::{RayonExecutor, THREADS_ENV};
use crate::formats::{load_dataset, save_dataset, CountsFormat};
use crate::report::{read_json, read_report, write_fit_outputs, write_json, AncestryDiagnostics, FitReport, SCHEMA_VERSION, SOFTWARE_VERSION};
use crate::{fit_dataset, Error};

pub const TRUTH_JSON: &str = "truth.json";

#[derive(Debug, Parser)]
#[command(name = "perturbdag", version, about = "Causal gene networks from single-cell CRISPR perturbation screens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a screen from a ground-truth specification.
    Simulate(SimulateArgs),
    /// Estimate the causal graph of a data directory.
    Fit(FitArgs),
    /// Score a fitted graph against the truth; metrics JSON on stdout.
    Evaluate(EvaluateArgs),
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = one per core). Default from PERTURBDAG_THREADS.
    #[arg(long)]
    pub threads: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    /// closure | influential
    #[arg(long)]
    pub ancestry_mode: Option<String>,
    /// two_sided | upper_tail
    #[arg(long)]
    pub pvalue_convention: Option<String>,
    /// Minimum perturbed cells for a gene to be a graph node.
    #[arg(long)]
    pub min_cells: Option<String>,
    /// inverse_square | geometric:<ratio>
    #[arg(long)]
    pub spending: Option<String>,
    /// Input data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    EightGene,
    Chain3,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum CountsArg {
    #[default]
    Tsv,
    Mtx,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Ground-truth JSON (the format written to truth.json).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub truth: Option<PathBuf>,
    /// Built-in truth instead of a file.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Number of cells; defaults to the truth's design size.
    #[arg(long)]
    pub cells: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub counts_format: CountsArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated genes to leave out of the analysis.
    #[arg(long, value_delimiter = ',')]
    pub omit: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// dag.json written by `fit`.
    #[arg(long)]
    pub dag: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Comma-separated genes; the truth is restricted to their induced subgraph.
    #[arg(long, value_delimiter = ',')]
    pub restrict: Vec<String>,
}

/// Defaults, then PERTURBDAG_THREADS, then the config file, then flags.
pub fn resolve_config(common: &Common, cells: Option<&str>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.set("threads", &v).map_err(|m| Error::Config(format!("{THREADS_ENV}: {m}")))?;
    }
    if let Some(path) = &common.config {
        cfg.apply(&read_config_file(path)?)?;
    }
    let flags = [
        ("threads", common.threads.as_deref()),
        ("seed", common.seed.as_deref()),
        ("alpha", common.alpha.as_deref()),
        ("ancestry_mode", common.ancestry_mode.as_deref()),
        ("pvalue_convention", common.pvalue_convention.as_deref()),
        ("min_cells", common.min_cells.as_deref()),
        ("spending", common.spending.as_deref()),
        ("cells", cells),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(Error::Config)?;
        }
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn executor(cfg: &RunConfig) -> Result<RayonExecutor, Error> {
    RayonExecutor::new(cfg.threads).map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Error> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required (flag or config key)")))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let cfg = resolve_config(&args.common, args.cells.as_deref())?;
    let out = required(&cfg.out, "out")?;
    let truth = match (&args.truth, args.preset) {
        (Some(path), _) => read_json::<GroundTruth>(path)?,
        (None, Some(Preset::EightGene)) => GroundTruth::eight_gene(),
        (None, Some(Preset::Chain3)) => GroundTruth::chain(3, 0.5, 4000),
        (None, None) => return Err(Error::Usage("--truth or --preset is required".into())),
    };
    let seed = cfg.seed.ok_or_else(|| Error::Usage("--seed is required for simulate".into()))?;
    let n = cfg.cells.unwrap_or(truth.design.n_cells);
    let sim = simulate_with(&executor(&cfg)?, &truth, n, Some(seed))?;
    let format = match args.counts_format {
        CountsArg::Tsv => CountsFormat::Tsv,
        CountsArg::Mtx => CountsFormat::Mtx,
    };
    save_dataset(&sim.dataset, out, format)?;
    write_json(&out.join(TRUTH_JSON), &sim.truth)
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), Error> {
    let cfg = resolve_config(&args.common, None)?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let dataset = load_dataset(data)?;
    let data_seed = {
        let p = data.join(TRUTH_JSON);
        if p.exists() {
            read_json::<GroundTruth>(&p)?.seed
        } else {
            None
        }
    };
    let fit = fit_dataset(&executor(&cfg)?, &dataset, &cfg, &args.omit)?;
    let mut config: std::collections::BTreeMap<String, String> =
        cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if !args.omit.is_empty() {
        config.insert("omit".into(), args.omit.join(","));
    }
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        software_version: SOFTWARE_VERSION.to_string(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        data_seed,
        config,
        excluded_genes: fit.excluded.clone(),
        ancestry: AncestryDiagnostics::new(&fit.ancestry, fit.dataset.gene_names()),
        dag: fit.dag,
    };
    write_fit_outputs(&report, &fit.ancestry, out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String, Error> {
    let report = read_report(&args.dag)?;
    let truth: GroundTruth = read_json(&args.truth)?;
    let restriction = (!args.restrict.is_empty()).then_some(args.restrict.as_slice());
    let metrics = evaluate(&report.dag, &truth, restriction)?;
    serde_json::to_string_pretty(&metrics).map_err(|e| Error::Format(e.to_string()))
}

/// Runs a parsed command line; returns text for standard output.
pub fn run(cli: &Cli) -> Result<Option<String>, Error> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(|_| None),
        Command::Fit(a) => cmd_fit(a).map(|_| None),
        Command::Evaluate(a) => cmd_evaluate(a).map(Some),
    }
}

pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if let Some(text) = out {
                use std::io::Write;
                // A closed pipe (e.g. `| head`) is not a failure of the run.
                let _ = writeln!(std::io::stdout(), "{text}");
            }
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "alpha = 0.2\nmin_cells = 10\nspending = geometric:0.5\n").unwrap();
        let common = Common { config: Some(path), alpha: Some("0.05".into()), ..Common::default() };
        let cfg = resolve_config(&common, None).unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.min_cells, 10);
        assert_eq!(crate::config::spending_str(cfg.spending), "geometric:0.5");
    }
}
