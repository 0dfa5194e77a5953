//! On-disk formats.
//!
//! * `y.csv`: one 0/1 value per line, no header.
//! * `X.csv`, `Z.csv`: numeric tables with a header row of column names.
//! * `blocks.json`: `{"blocks": [{"name": .., "cols": [start, end)}]}`, half-open
//!   0-based column ranges of `Z.csv` that must tile its columns.
//! * Fit and path results as versioned JSON (`"schema": 1`) and CSV tables.
//!
//! CSV floats are written with 17 significant digits; JSON floats use the
//! shortest representation that round-trips exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::model::{ModelParams, ProblemData};
use crate::penalized::{Criterion, RegPath};
use crate::simulate::Simulated;
use crate::solver::{FitDiagnostics, FitResult};

pub const SCHEMA_VERSION: u32 = 1;

fn parse_err(path: &Path, message: impl Into<String>) -> VcmmError {
    VcmmError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> VcmmError {
    VcmmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Float formatted with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_cell(path: &Path, text: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| parse_err(path, format!("row {row}, column {col}: cannot parse {text:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, format!("row {row}, column {col}: value {text:?} is not finite")));
    }
    Ok(v)
}

/// Response vector; rows are numbered from 1 in diagnostics.
pub fn read_y(path: &Path) -> Result<DVector<f64>> {
    let text = read_to_string(path)?;
    let mut values = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let row = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line.contains(',') {
            return Err(parse_err(path, format!("row {row}: expected a single column")));
        }
        let v = parse_cell(path, line, row, 1)?;
        if v != 0.0 && v != 1.0 {
            return Err(parse_err(path, format!("row {row}, column 1: response must be 0 or 1, got {v}")));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(parse_err(path, "no observations"));
    }
    Ok(DVector::from_vec(values))
}

/// Numeric table with a header row. Row numbers in diagnostics count the
/// header as row 1.
pub fn read_table(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, format!("row 1: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() || names.iter().all(|s| s.is_empty()) {
        return Err(parse_err(path, "row 1: missing header"));
    }
    let cols = names.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => parse_err(
                path,
                format!("row {row}: expected {cols} columns, found {len}"),
            ),
            _ => parse_err(path, format!("row {row}: {e}")),
        })?;
        for (c, cell) in record.iter().enumerate() {
            values.push(parse_cell(path, cell, row, c + 1)?);
        }
        rows += 1;
    }
    Ok((names, DMatrix::from_row_slice(rows, cols, &values)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// Half-open `[start, end)` range of Z columns.
    pub cols: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlocksFile {
    pub blocks: Vec<BlockSpec>,
}

pub fn read_blocks(path: &Path) -> Result<Vec<BlockSpec>> {
    let text = read_to_string(path)?;
    let parsed: BlocksFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    Ok(parsed.blocks)
}

/// Check that the blocks tile `0..q` in order.
fn check_blocks(path: &Path, blocks: &[BlockSpec], q: usize) -> Result<()> {
    if blocks.is_empty() {
        return Err(parse_err(path, "at least one block is required"));
    }
    let mut next = 0;
    for b in blocks {
        let [start, end] = b.cols;
        if start != next || end <= start {
            return Err(parse_err(
                path,
                format!(
                    "block {:?} covers [{start}, {end}); blocks must be nonempty and tile the Z columns in order starting at {next}",
                    b.name
                ),
            ));
        }
        next = end;
    }
    if next != q {
        return Err(parse_err(path, format!("blocks cover {next} columns but Z has {q}")));
    }
    Ok(())
}

/// A dataset read from disk along with its column labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: ProblemData,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub block_names: Vec<String>,
}

pub fn load_dataset(y: &Path, x: &Path, z: &Path, blocks: &Path) -> Result<Dataset> {
    let yv = read_y(y)?;
    let (x_names, xm) = read_table(x)?;
    let (z_names, zm) = read_table(z)?;
    let specs = read_blocks(blocks)?;
    check_blocks(blocks, &specs, zm.ncols())?;
    let n = yv.len();
    if xm.nrows() != n {
        return Err(parse_err(x, format!("{} data rows but y has {n}", xm.nrows())));
    }
    if zm.nrows() != n {
        return Err(parse_err(z, format!("{} data rows but y has {n}", zm.nrows())));
    }
    let z_blocks = specs
        .iter()
        .map(|b| zm.columns(b.cols[0], b.cols[1] - b.cols[0]).into_owned())
        .collect();
    let data = ProblemData::new(yv, xm, z_blocks)?;
    Ok(Dataset {
        data,
        x_names,
        z_names,
        block_names: specs.into_iter().map(|b| b.name).collect(),
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

/// Write CSV text built from pre-formatted rows.
fn write_rows(path: &Path, header: Option<&[String]>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = create(path)?;
    let mut push = |line: String| -> Result<()> { writeln!(out, "{line}").map_err(|e| io_err(path, e)) };
    if let Some(h) = header {
        push(h.join(","))?;
    }
    for row in rows {
        push(row.join(","))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

fn write_matrix(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    write_rows(
        path,
        Some(names),
        (0..m.nrows()).map(|r| m.row(r).iter().map(|&v| fmt_f64(v)).collect()),
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub x_names: Vec<String>,
    pub block_names: Vec<String>,
}

/// Paths of the five files making up an exported dataset.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub y: PathBuf,
    pub x: PathBuf,
    pub z: PathBuf,
    pub blocks: PathBuf,
    pub truth: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            y: dir.join("y.csv"),
            x: dir.join("X.csv"),
            z: dir.join("Z.csv"),
            blocks: dir.join("blocks.json"),
            truth: dir.join("truth.json"),
        }
    }
}

/// Export a simulated dataset as `y.csv`, `X.csv`, `Z.csv`, `blocks.json`
/// and `truth.json` in `dir`.
pub fn write_dataset(dir: &Path, sim: &Simulated) -> Result<DatasetPaths> {
    let paths = DatasetPaths::in_dir(dir);
    let data = &sim.data;
    write_rows(&paths.y, None, data.y().iter().map(|&v| vec![format!("{}", v as u8)]))?;
    write_matrix(&paths.x, &sim.x_names, data.x())?;
    let mut z_names = Vec::with_capacity(data.q());
    let mut blocks = Vec::with_capacity(data.m());
    for (i, name) in sim.block_names.iter().enumerate() {
        let range = data.block_range(i);
        for k in 0..range.len() {
            z_names.push(format!("{name}_{}", k + 1));
        }
        blocks.push(BlockSpec {
            name: name.clone(),
            cols: [range.start, range.end],
        });
    }
    write_matrix(&paths.z, &z_names, data.z())?;
    write_json(&paths.blocks, &BlocksFile { blocks })?;
    write_json(
        &paths.truth,
        &TruthFile {
            beta: sim.truth.beta.iter().copied().collect(),
            sigma2: sim.truth.sigma2.iter().copied().collect(),
            x_names: sim.x_names.clone(),
            block_names: sim.block_names.clone(),
        },
    )?;
    Ok(paths)
}

/// Serialized single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: u32,
    pub algorithm: String,
    pub converged: bool,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    pub lambda: f64,
    pub x_names: Vec<String>,
    pub block_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub loglik_la: f64,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    #[serde(default)]
    pub diagnostics: Option<FitDiagnostics>,
}

impl FitReport {
    pub fn new(fit: &FitResult, x_names: &[String], block_names: &[String]) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            algorithm: fit.formulation.algorithm_name().to_string(),
            converged: fit.converged,
            outer_iters: fit.outer_iters,
            inner_iters_total: fit.inner_iters_total,
            lambda: fit.lambda,
            x_names: x_names.to_vec(),
            block_names: block_names.to_vec(),
            beta: fit.params.beta.iter().copied().collect(),
            sigma2: fit.params.sigma2.iter().copied().collect(),
            loglik_la: fit.loglik_la,
            objective: fit.objective(),
            objective_trace: fit.objective_trace.clone(),
            diagnostics: Some(fit.diagnostics.clone()),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(DVector::from_vec(self.beta.clone()), DVector::from_vec(self.sigma2.clone()))
    }
}

/// Path table with one row per lambda:
/// `lambda, df, loglik_la, aic, bic, sigma2_1, .., sigma2_m`.
pub fn write_path_csv(path: &Path, reg: &RegPath) -> Result<()> {
    let m = reg.fits.first().map_or(0, |f| f.params.sigma2.len());
    let mut header: Vec<String> = ["lambda", "df", "loglik_la", "aic", "bic", "converged"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=m).map(|i| format!("sigma2_{i}")));
    let rows = (0..reg.lambdas.len()).map(|k| {
        let fit = &reg.fits[k];
        let mut row = vec![
            fmt_f64(reg.lambdas[k]),
            reg.df[k].to_string(),
            fmt_f64(fit.loglik_la),
            fmt_f64(reg.aic[k]),
            fmt_f64(reg.bic[k]),
            fit.converged.to_string(),
        ];
        row.extend(fit.params.sigma2.iter().map(|&s| fmt_f64(s)));
        row
    });
    write_rows(path, Some(&header), rows)
}

/// Long-format `lambda, block, sigma2` table for plotting coefficient paths.
pub fn write_path_long_csv(path: &Path, reg: &RegPath, block_names: &[String]) -> Result<()> {
    let header: Vec<String> = ["lambda", "block", "sigma2"].iter().map(|s| s.to_string()).collect();
    let rows = reg.lambdas.iter().zip(&reg.fits).flat_map(|(&lambda, fit)| {
        fit.params
            .sigma2
            .iter()
            .enumerate()
            .map(move |(i, &s)| vec![fmt_f64(lambda), block_names[i].clone(), fmt_f64(s)])
            .collect::<Vec<_>>()
    });
    write_rows(path, Some(&header), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub criterion: Criterion,
    pub index: usize,
    pub lambda: f64,
    pub df: usize,
    pub value: f64,
    pub selected_blocks: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub loglik_la: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub schema: u32,
    pub n: usize,
    pub lambdas: Vec<f64>,
    pub df_nonincreasing_in_lambda: bool,
    pub all_converged: bool,
    pub block_names: Vec<String>,
    pub selected: Vec<SelectedModel>,
}

impl PathSummary {
    pub fn new(reg: &RegPath, block_names: &[String], criteria: &[Criterion]) -> Self {
        let selected = criteria
            .iter()
            .map(|&criterion| {
                let index = reg.selected(criterion);
                let fit = &reg.fits[index];
                SelectedModel {
                    criterion,
                    index,
                    lambda: reg.lambdas[index],
                    df: reg.df[index],
                    value: match criterion {
                        Criterion::Aic => reg.aic[index],
                        Criterion::Bic => reg.bic[index],
                    },
                    selected_blocks: reg
                        .selected_support(criterion)
                        .into_iter()
                        .map(|i| block_names[i].clone())
                        .collect(),
                    beta: fit.params.beta.iter().copied().collect(),
                    sigma2: fit.params.sigma2.iter().copied().collect(),
                    loglik_la: fit.loglik_la,
                }
            })
            .collect();
        Self {
            schema: SCHEMA_VERSION,
            n: reg.n,
            lambdas: reg.lambdas.clone(),
            df_nonincreasing_in_lambda: reg.df_nonincreasing_in_lambda(),
            all_converged: reg.fits.iter().all(|f| f.converged),
            block_names: block_names.to_vec(),
            selected,
        }
    }
}

/// Lambda grid file: one value per line, no header.
pub fn read_lambdas(path: &Path) -> Result<Vec<f64>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_cell(path, line, k + 1, 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_anova, AnovaDesign};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for v in [0.1, -1.0 / 3.0, 6.02e23, 1e-300, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sim = simulate_anova(&AnovaDesign::standard(2, 7)).unwrap();
        let paths = write_dataset(dir.path(), &sim).unwrap();
        let ds = load_dataset(&paths.y, &paths.x, &paths.z, &paths.blocks).unwrap();
        assert_eq!(ds.data.y(), sim.data.y());
        assert_eq!(ds.data.x(), sim.data.x());
        assert_eq!(ds.data.z(), sim.data.z());
        assert_eq!(ds.block_names, sim.block_names);
        let truth: TruthFile = read_json(&paths.truth).unwrap();
        assert_eq!(truth.sigma2, vec![0.5, 0.9, 0.3]);
    }

    #[test]
    fn malformed_cells_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let x = write(dir.path(), "X.csv", "a,b\n1,2\n3,oops\n");
        let err = read_table(&x).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("column 2"), "{err}");
        let ragged = write(dir.path(), "R.csv", "a,b\n1,2\n3\n");
        let err = read_table(&ragged).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        let y = write(dir.path(), "y.csv", "1\n0\n2\n");
        let err = read_y(&y).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn blocks_must_tile_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = Path::new("blocks.json");
        let spec = |a, b| BlockSpec { name: "b".into(), cols: [a, b] };
        assert!(check_blocks(p, &[spec(0, 2), spec(2, 4)], 4).is_ok());
        assert!(check_blocks(p, &[spec(0, 2), spec(3, 4)], 4).is_err());
        assert!(check_blocks(p, &[spec(0, 2)], 4).is_err());
        assert!(check_blocks(p, &[spec(0, 0), spec(0, 4)], 4).is_err());
        let missing = dir.path().join("nope.json");
        let err = read_blocks(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.json"), "{err}");
    }

    #[test]
    fn fit_report_ignores_unknown_fields() {
        let json = r#"{"schema":1,"algorithm":"mmla1","converged":true,"outer_iters":3,
            "inner_iters_total":9,"lambda":0.0,"x_names":["x"],"block_names":["g"],
            "beta":[0.5],"sigma2":[1.25],"loglik_la":-3.0,"objective":-3.0,
            "objective_trace":[-4.0,-3.0],"added_later":{"k":1}}"#;
        let r: FitReport = serde_json::from_str(json).unwrap();
        assert_eq!(r.sigma2, vec![1.25]);
        assert!(r.diagnostics.is_none());
    }
}
