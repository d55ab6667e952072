use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use perturbdag::formats::{load_dataset, save_dataset, CountsFormat};
use perturbdag::report::{read_report, DAG_JSON};
use perturbdag_core::dataset::DatasetParts;
use perturbdag_core::dataset::PerturbDataset;
use perturbdag_core::simulator::{GroundTruth, TrueEdge};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perturbdag"))
        .args(args)
        .env_remove("PERTURBDAG_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_with(out: &Output, needle: &str) {
    assert!(!out.status.success(), "unexpected success");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "stderr `{err}` lacks `{needle}`");
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_is_reproducible_and_records_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&run(&["simulate", "--preset", "eight-gene", "--seed", "17", "--out", p(d)]));
    }
    assert_eq!(dir_files(&a), dir_files(&b));
    let ds = load_dataset(&a).unwrap();
    assert_eq!((ds.n_cells(), ds.n_genes()), (8000, 8));
    let truth: GroundTruth = serde_json::from_slice(&fs::read(a.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth.seed, Some(17));

    let c = tmp.path().join("c");
    ok(&run(&["simulate", "--truth", p(&a.join("truth.json")), "--seed", "18", "--cells", "500", "--counts-format", "mtx", "--out", p(&c)]));
    assert!(c.join("counts.mtx").exists() && c.join("genes.tsv").exists());
    assert_eq!(load_dataset(&c).unwrap().n_cells(), 500);
}

#[test]
fn simulate_refuses_bad_specs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut truth = GroundTruth::chain(3, 0.5, 300);
    truth.edges.push(TrueEdge { parent: 2, child: 0, weight: 0.5 });
    let spec = tmp.path().join("cyclic.json");
    fs::write(&spec, serde_json::to_string(&truth).unwrap()).unwrap();
    let out = tmp.path().join("out");
    fails_with(&run(&["simulate", "--truth", p(&spec), "--seed", "1", "--out", p(&out)]), "cycle through");
    fails_with(&run(&["simulate", "--preset", "chain3", "--out", p(&out)]), "--seed");
    fs::write(&spec, "{ not json").unwrap();
    fails_with(&run(&["simulate", "--truth", p(&spec), "--seed", "1", "--out", p(&out)]), "cyclic.json");
}

#[test]
fn fit_and_evaluate_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (f1, f2) = (tmp.path().join("fit1"), tmp.path().join("fit2"));
    ok(&run(&["simulate", "--preset", "eight-gene", "--seed", "3", "--out", p(&data)]));
    ok(&run(&["fit", "--data", p(&data), "--out", p(&f1), "--omit", "g7,g8"]));
    ok(&run(&["fit", "--data", p(&data), "--out", p(&f2), "--omit", "g7,g8", "--threads", "3"]));

    // Identical apart from the timestamp and the echoed thread count and output path.
    let strip = |dir: &Path| {
        let text = fs::read_to_string(dir.join(DAG_JSON)).unwrap();
        text.lines()
            .filter(|l| !l.trim_start().starts_with("\"timestamp\"") && !l.trim_start().starts_with("\"threads\"")
                    && !l.trim_start().starts_with("\"out\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&f1), strip(&f2));
    for f in ["edges.tsv", "graph.dot", "fdr_audit.tsv", "pair_tests.tsv", "second_stage.tsv"] {
        assert_eq!(fs::read(f1.join(f)).unwrap(), fs::read(f2.join(f)).unwrap(), "{f}");
    }

    let report = read_report(&f1.join(DAG_JSON)).unwrap();
    assert_eq!(report.schema_version, 1);
    assert_eq!(report.data_seed, Some(3));
    assert_eq!(report.config["alpha"], "0.1");
    assert_eq!(report.config["omit"], "g7,g8");
    assert_eq!(report.excluded_genes.len(), 2);
    assert_eq!(report.dag.gene_names.len(), 6);
    assert_eq!(report.dag.check_invariants(), Ok(()));

    let edges = fs::read_to_string(f1.join("edges.tsv")).unwrap();
    let mut lines = edges.lines();
    assert_eq!(lines.next().unwrap(), "parent\tchild\ttheta\tse_mt\tz\tp\talpha_used\tcalled");
    let called: Vec<&str> = lines.filter(|l| l.ends_with("\ttrue")).collect();
    assert_eq!(called.len(), report.dag.edges.len());
    for line in &called {
        let theta = line.split('\t').nth(2).unwrap();
        let mantissa = theta.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17, "{theta}");
        let e = report.dag.edges.iter().find(|e| theta.parse::<f64>().unwrap() == e.theta);
        assert!(e.is_some(), "{line}");
    }
    let dot = fs::read_to_string(f1.join("graph.dot")).unwrap();
    assert_eq!(dot.matches("->").count(), report.dag.edges.len());
    assert!(dot.contains("color=blue") || dot.contains("color=red"));

    let genes = "g1,g2,g3,g4,g5,g6";
    let out = run(&["evaluate", "--dag", p(&f1.join(DAG_JSON)), "--truth", p(&data.join("truth.json")), "--restrict", genes]);
    ok(&out);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["true_edges"], 6);
    assert!(metrics["shd"].as_u64().is_some());
    assert_eq!(metrics["edge_errors"].as_array().unwrap().len() as u64 >= 6, true);

    fails_with(&run(&["evaluate", "--dag", p(&f1.join(DAG_JSON)), "--truth", p(&data.join("truth.json"))]), "mismatch");
    fails_with(&run(&["evaluate", "--dag", p(&f1.join(DAG_JSON)), "--truth", p(&tmp.path().join("nope.json"))]), "nope.json");
}

fn write_dataset(dir: &Path, p_genes: usize, control: bool) {
    let n = 40;
    let gene_names: Vec<String> = (0..p_genes).map(|g| format!("g{g}")).collect();
    let guides = (0..n)
        .flat_map(|i| (0..p_genes).map(move |g| if control && i % 4 == 0 { false } else { i % p_genes == g }))
        .collect();
    let ds = PerturbDataset::new(DatasetParts {
        cell_ids: (0..n).map(|i| format!("c{i}")).collect(),
        gene_names,
        counts: (0..n * p_genes).map(|i| 1 + (i % 7) as u32).collect(),
        guides,
        covariate_names: Vec::new(),
        covariates: Vec::new(),
        size_factors: vec![1.0; n],
    })
    .unwrap();
    save_dataset(&ds, dir, CountsFormat::Tsv).unwrap();
}

#[test]
fn fit_refuses_unusable_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let no_controls = tmp.path().join("nc");
    write_dataset(&no_controls, 2, false);
    fails_with(&run(&["fit", "--data", p(&no_controls), "--out", p(&out), "--min-cells", "1"]), "no control cell");

    let single = tmp.path().join("single");
    write_dataset(&single, 1, true);
    fails_with(&run(&["fit", "--data", p(&single), "--out", p(&out), "--min-cells", "1"]), "need ≥2 genes");

    // Two genes with 15 perturbed cells each.
    let small = tmp.path().join("small");
    write_dataset(&small, 2, true);
    fails_with(&run(&["fit", "--data", p(&small), "--out", p(&out), "--min-cells", "20"]), "fewer than 20");
    fails_with(&run(&["fit", "--data", p(&small), "--out", p(&out)]), "exceeds the number of cells");

    fails_with(&run(&["fit", "--data", p(&tmp.path().join("missing")), "--out", p(&out)]), "missing");
    assert!(!out.join(DAG_JSON).exists());
}

#[test]
fn configuration_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 2, true);
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("run.cfg");

    fs::write(&cfg, "alpha = 0.1\ncolour = blue\n").unwrap();
    fails_with(&run(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]), "unknown key `colour`");
    fails_with(&run(&["fit", "--data", p(&data), "--out", p(&out), "--alpha", "1.5"]), "alpha");
    fails_with(&run(&["fit", "--data", p(&data), "--out", p(&out), "--ancestry-mode", "bfs"]), "ancestry mode");
    fails_with(&run(&["fit", "--data", p(&data), "--out", p(&out), "--spending", "harmonic"]), "spending");
    fails_with(&run(&["fit", "--data", p(&data)]), "--out");

    let bad_env = Command::new(env!("CARGO_BIN_EXE_perturbdag"))
        .args(["fit", "--data", p(&data), "--out", p(&out)])
        .env("PERTURBDAG_THREADS", "many")
        .output()
        .unwrap();
    fails_with(&bad_env, "PERTURBDAG_THREADS");
}

#[test]
fn config_file_drives_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# chain run\nseed = 5\ncells = 3000\nout = {}\n",
            data.display()
        ),
    )
    .unwrap();
    ok(&run(&["simulate", "--preset", "chain3", "--config", p(&cfg)]));
    fs::write(
        &cfg,
        format!(
            "data = {}\nout = {}\nalpha = 0.05\nancestry_mode = influential\npvalue_convention = upper_tail\nspending = geometric:0.5\nmin_cells = 20\nthreads = 1\n",
            data.display(),
            out.display()
        ),
    )
    .unwrap();
    ok(&run(&["fit", "--config", p(&cfg)]));
    let report = read_report(&out.join(DAG_JSON)).unwrap();
    assert_eq!(report.config["ancestry_mode"], "influential");
    assert_eq!(report.config["spending"], "geometric:0.5");
    assert_eq!(report.config["alpha"], "0.05");
    assert_eq!(report.dag.fdr.alpha_total(), 0.05);
    assert_eq!(report.dag.ordering.len(), 3);
}
