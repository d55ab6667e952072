//! On-disk dataset layout.
//!
//! A data directory holds
//!
//! - `counts.tsv` (header `cell_id` then gene names) or `counts.mtx` plus
//!   `genes.tsv` (one gene name per line; cells are rows, genes columns),
//! - `guides.tsv` with columns `cell_id`, `target_gene` (a gene name or
//!   `non-targeting`),
//! - optionally `covariates.tsv` (header of covariate names, one row per cell),
//! - optionally `size_factors.tsv` (header `size_factor`); when absent the
//!   size factors are computed from count totals.
//!
//! Cell order is the row order of the counts file. Reals are written with 17
//! significant digits so that a save/load cycle is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use perturbdag_core::dataset::{size_factors_from_totals, DatasetParts, PerturbDataset};
use perturbdag_core::simulator::CONTROL_LABEL;

use crate::Error;

pub const COUNTS_TSV: &str = "counts.tsv";
pub const COUNTS_MTX: &str = "counts.mtx";
pub const GENES: &str = "genes.tsv";
pub const GUIDES: &str = "guides.tsv";
pub const COVARIATES: &str = "covariates.tsv";
pub const SIZE_FACTORS: &str = "size_factors.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountsFormat {
    #[default]
    Tsv,
    Mtx,
}

/// Renders a real with 17 significant digits; parses back to the same bits.
pub fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_real(s: &str, what: &str) -> Result<f64, Error> {
    s.trim().parse::<f64>().map_err(|_| Error::Format(format!("{what}: `{s}` is not a number")))
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<fs::File>, Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).flexible(false).from_reader(file))
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().delimiter(b'\t').quote_style(csv::QuoteStyle::Never).from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Writes `header` and `rows` as a tab-separated table.
pub fn write_table<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), Error>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = tsv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.into_iter()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Counts {
    cell_ids: Option<Vec<String>>,
    gene_names: Vec<String>,
    n_cells: usize,
    values: Vec<u32>,
}

fn read_counts_tsv(path: &Path) -> Result<Counts, Error> {
    let mut r = tsv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let with_ids = header.get(0) == Some("cell_id");
    let gene_names: Vec<String> = header.iter().skip(usize::from(with_ids)).map(str::to_string).collect();
    let mut cell_ids = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let mut fields = rec.iter();
        if with_ids {
            cell_ids.push(fields.next().unwrap_or_default().to_string());
        }
        for (g, f) in fields.enumerate() {
            let v = f.trim().parse::<u32>().map_err(|_| {
                Error::Format(format!(
                    "{}: row {}, gene {}: `{f}` is not a non-negative integer",
                    path.display(),
                    row + 1,
                    gene_names[g]
                ))
            })?;
            values.push(v);
        }
    }
    let n_cells = values.len() / gene_names.len().max(1);
    Ok(Counts { cell_ids: with_ids.then_some(cell_ids), gene_names, n_cells, values })
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

fn read_counts_mtx(path: &Path, genes_path: &Path) -> Result<Counts, Error> {
    let gene_names = read_lines(genes_path)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let banner = lines.next().ok_or_else(|| bad("empty file".into()))?.map_err(|e| Error::io(path, e))?;
    let banner_lc = banner.to_ascii_lowercase();
    if !banner_lc.starts_with("%%matrixmarket matrix coordinate") {
        return Err(bad("expected a coordinate Matrix Market file".into()));
    }
    if !(banner_lc.contains("integer") && banner_lc.contains("general")) {
        return Err(bad("only `integer general` matrices are supported".into()));
    }
    let mut dims = None;
    let mut values = Vec::new();
    let mut n_cells = 0;
    let mut seen = 0usize;
    let mut declared = 0usize;
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let nums: Vec<&str> = t.split_whitespace().collect();
        if nums.len() != 3 {
            return Err(bad(format!("malformed line `{t}`")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("`{s}` is not a non-negative integer")));
        match dims {
            None => {
                let (rows, cols, nnz) = (parse(nums[0])?, parse(nums[1])?, parse(nums[2])?);
                if cols != gene_names.len() {
                    return Err(bad(format!("{cols} columns but {} gene names", gene_names.len())));
                }
                n_cells = rows;
                declared = nnz;
                values = vec![0u32; rows * cols];
                dims = Some((rows, cols));
            }
            Some((rows, cols)) => {
                let (i, j) = (parse(nums[0])?, parse(nums[1])?);
                let v = nums[2].parse::<u32>().map_err(|_| bad(format!("`{}` is not a count", nums[2])))?;
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(bad(format!("entry ({i}, {j}) outside {rows} x {cols}")));
                }
                values[(i - 1) * cols + (j - 1)] = v;
                seen += 1;
            }
        }
    }
    if dims.is_none() {
        return Err(bad("missing size line".into()));
    }
    if seen != declared {
        return Err(bad(format!("{seen} entries but {declared} declared")));
    }
    Ok(Counts { cell_ids: None, gene_names, n_cells, values })
}

fn read_guides(path: &Path, gene_names: &[String]) -> Result<(Vec<String>, Vec<bool>), Error> {
    let mut r = tsv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["cell_id", "target_gene"] {
        return Err(Error::Format(format!("{}: header must be `cell_id<TAB>target_gene`", path.display())));
    }
    let p = gene_names.len();
    let mut ids = Vec::new();
    let mut guides = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let target = rec.get(1).unwrap_or_default();
        let mut row = vec![false; p];
        if target != CONTROL_LABEL {
            let g = gene_names.iter().position(|n| n == target).ok_or_else(|| {
                Error::Format(format!("{}: cell `{id}` targets unknown gene `{target}`", path.display()))
            })?;
            row[g] = true;
        }
        ids.push(id);
        guides.extend(row);
    }
    Ok((ids, guides))
}

fn read_real_table(path: &Path) -> Result<(Vec<String>, Vec<f64>, usize), Error> {
    let mut r = tsv_reader(path)?;
    let names: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for f in rec.iter() {
            values.push(parse_real(f, &path.display().to_string())?);
        }
        rows += 1;
    }
    Ok((names, values, rows))
}

/// Loads a data directory. Structural invariants (one guide per cell,
/// controls present, positive size factors) are not checked here; use
/// [`PerturbDataset::validate`].
pub fn load_dataset(dir: &Path) -> Result<PerturbDataset, Error> {
    let tsv = dir.join(COUNTS_TSV);
    let mtx = dir.join(COUNTS_MTX);
    let counts = if tsv.exists() {
        read_counts_tsv(&tsv)?
    } else if mtx.exists() {
        read_counts_mtx(&mtx, &dir.join(GENES))?
    } else {
        return Err(Error::Format(format!("{}: no {COUNTS_TSV} or {COUNTS_MTX}", dir.display())));
    };
    let n = counts.n_cells;
    let p = counts.gene_names.len();
    let (guide_ids, guides) = read_guides(&dir.join(GUIDES), &counts.gene_names)?;
    if guide_ids.len() != n {
        return Err(Error::Format(format!("{GUIDES} has {} cells, counts have {n}", guide_ids.len())));
    }
    if let Some(ids) = &counts.cell_ids {
        if let Some(i) = (0..n).find(|&i| ids[i] != guide_ids[i]) {
            return Err(Error::Format(format!(
                "cell {i}: `{}` in counts but `{}` in {GUIDES}",
                ids[i], guide_ids[i]
            )));
        }
    }
    let (covariate_names, covariates) = {
        let path = dir.join(COVARIATES);
        if path.exists() {
            let (names, values, rows) = read_real_table(&path)?;
            if rows != n {
                return Err(Error::Format(format!("{COVARIATES} has {rows} rows for {n} cells")));
            }
            (names, values)
        } else {
            (Vec::new(), Vec::new())
        }
    };
    let sf_path = dir.join(SIZE_FACTORS);
    let size_factors = if sf_path.exists() {
        let (names, values, rows) = read_real_table(&sf_path)?;
        if names != ["size_factor"] || rows != n {
            return Err(Error::Format(format!("{SIZE_FACTORS}: expected one `size_factor` column with {n} rows")));
        }
        values
    } else {
        size_factors_from_totals(&counts.values, n, p)?
    };
    Ok(PerturbDataset::new(DatasetParts {
        cell_ids: guide_ids,
        gene_names: counts.gene_names,
        counts: counts.values,
        guides,
        covariate_names,
        covariates,
        size_factors,
    })?)
}

/// Writes every file of the layout, including `size_factors.tsv`.
pub fn save_dataset(ds: &PerturbDataset, dir: &Path, format: CountsFormat) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = ds.n_cells();
    let p = ds.n_genes();
    match format {
        CountsFormat::Tsv => {
            let mut header = vec!["cell_id"];
            header.extend(ds.gene_names().iter().map(String::as_str));
            write_table(
                &dir.join(COUNTS_TSV),
                &header,
                (0..n).map(|i| {
                    std::iter::once(ds.cell_ids()[i].clone()).chain((0..p).map(move |g| ds.count(i, g).to_string()))
                }),
            )?;
        }
        CountsFormat::Mtx => {
            let path = dir.join(COUNTS_MTX);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            let nnz = ds.counts().iter().filter(|&&c| c > 0).count();
            let io = |e| Error::io(&path, e);
            writeln!(w, "%%MatrixMarket matrix coordinate integer general").map_err(io)?;
            writeln!(w, "{n} {p} {nnz}").map_err(io)?;
            for i in 0..n {
                for g in 0..p {
                    let c = ds.count(i, g);
                    if c > 0 {
                        writeln!(w, "{} {} {c}", i + 1, g + 1).map_err(io)?;
                    }
                }
            }
            w.flush().map_err(io)?;
            let genes = dir.join(GENES);
            let mut text = ds.gene_names().join("\n");
            text.push('\n');
            fs::write(&genes, text).map_err(|e| Error::io(&genes, e))?;
        }
    }
    write_table(
        &dir.join(GUIDES),
        &["cell_id", "target_gene"],
        (0..n).map(|i| {
            let target = ds.target(i).map_or(CONTROL_LABEL.to_string(), |g| ds.gene_names()[g].clone());
            [ds.cell_ids()[i].clone(), target]
        }),
    )?;
    if ds.n_covariates() > 0 {
        let header: Vec<&str> = ds.covariate_names().iter().map(String::as_str).collect();
        write_table(&dir.join(COVARIATES), &header, (0..n).map(|i| ds.covariate_row(i).iter().map(|&x| fmt_real(x))))?;
    }
    write_table(&dir.join(SIZE_FACTORS), &["size_factor"], ds.size_factors().iter().map(|&l| [fmt_real(l)]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_rendering_round_trips() {
        for x in [0.1, -0.5, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, 0.0, -0.0, 7.3] {
            let s = fmt_real(x);
            assert_eq!(parse_real(&s, "x").unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_real(0.5), "5.0000000000000000e-1");
        assert!(parse_real(&fmt_real(f64::NAN), "x").unwrap().is_nan());
    }
}
