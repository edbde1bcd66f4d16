//! CSV dataset files and report serialization.
//!
//! Datasets travel as one wide CSV per channel, curves in rows and grid
//! points in columns. Target cells may be empty or `NA` to mark missing
//! values; covariate channels must be fully observed. Files either imply
//! an equispaced grid on `[0, 1]` or carry the grid points in a shared
//! leading header row.
//!
//! Numbers are written in shortest round-trip decimal form and missing
//! cells as empty fields, so a load → write → load cycle reproduces every
//! value exactly.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, FunctionalDataset, Grid, GRID_TOL};
use crate::sim::RunReport;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path} has no data rows")]
    Empty { path: PathBuf },
    #[error("{path}, row {row}: expected {expected} columns, found {got}")]
    ColumnCount { path: PathBuf, row: usize, expected: usize, got: usize },
    #[error("{path}: expected {expected} rows, found {got}")]
    RowCount { path: PathBuf, expected: usize, got: usize },
    #[error("{path}, row {row}, column {col}: cannot parse {token:?} as a number")]
    Parse { path: PathBuf, row: usize, col: usize, token: String },
    #[error("{path}, row {row}, column {col}: missing value in a covariate; covariates must be fully observed")]
    CovariateMissing { path: PathBuf, row: usize, col: usize },
    #[error("{path}: header row is not the dataset grid")]
    GridHeader { path: PathBuf },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// The files one dataset is spread across: a target channel and any number
/// of covariate channels, all sharing shape, delimiter, and header
/// convention.
#[derive(Debug, Clone)]
pub struct DatasetFileSet {
    pub target: PathBuf,
    pub covariates: Vec<PathBuf>,
    /// Field delimiter, a comma unless the data say otherwise.
    pub delimiter: u8,
    /// Cell contents (after trimming) read as missing target values.
    pub missing_tokens: Vec<String>,
    /// Every file starts with a row of grid points instead of implying an
    /// equispaced grid.
    pub grid_header: bool,
}

impl DatasetFileSet {
    pub fn new(target: impl Into<PathBuf>, covariates: Vec<PathBuf>) -> Self {
        DatasetFileSet {
            target: target.into(),
            covariates,
            delimiter: b',',
            missing_tokens: vec![String::new(), "NA".to_string()],
            grid_header: false,
        }
    }
}

/// One parsed channel file: optional header row and cell values, `None`
/// where a missing token appeared.
struct RawChannel {
    header: Option<Vec<f64>>,
    cells: Vec<Vec<Option<f64>>>,
}

fn read_channel(path: &Path, fileset: &DatasetFileSet) -> Result<RawChannel, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(fileset.delimiter)
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                if let csv::ErrorKind::Io(io) = e.into_kind() {
                    IoError::File { path: path.to_path_buf(), source: io }
                } else {
                    unreachable!()
                }
            }
            _ => IoError::Csv { path: path.to_path_buf(), source: e },
        })?;

    let mut header = None;
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
        let row = idx + 1;
        if fileset.grid_header && idx == 0 {
            let mut points = Vec::with_capacity(record.len());
            for (c, field) in record.iter().enumerate() {
                let token = field.trim();
                points.push(token.parse::<f64>().map_err(|_| IoError::Parse {
                    path: path.to_path_buf(),
                    row,
                    col: c + 1,
                    token: token.to_string(),
                })?);
            }
            header = Some(points);
            continue;
        }
        let mut parsed = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            let token = field.trim();
            if fileset.missing_tokens.iter().any(|m| m == token) {
                parsed.push(None);
            } else {
                parsed.push(Some(token.parse::<f64>().map_err(|_| IoError::Parse {
                    path: path.to_path_buf(),
                    row,
                    col: c + 1,
                    token: token.to_string(),
                })?));
            }
        }
        cells.push(parsed);
    }
    if cells.is_empty() {
        return Err(IoError::Empty { path: path.to_path_buf() });
    }
    let width = cells[0].len();
    let header_rows = usize::from(fileset.grid_header);
    if let Some(h) = &header {
        if h.len() != width {
            return Err(IoError::ColumnCount {
                path: path.to_path_buf(),
                row: 1,
                expected: width,
                got: h.len(),
            });
        }
    }
    for (i, row) in cells.iter().enumerate() {
        if row.len() != width {
            return Err(IoError::ColumnCount {
                path: path.to_path_buf(),
                row: i + 1 + header_rows,
                expected: width,
                got: row.len(),
            });
        }
    }
    Ok(RawChannel { header, cells })
}

/// Loads and validates a dataset from its channel files.
///
/// The grid comes from the target file's header row when
/// [`DatasetFileSet::grid_header`] is set (covariate headers must agree
/// with it) and is the implied equispaced grid otherwise. Missing tokens
/// in the target become masked cells; one in a covariate is a hard error.
pub fn load_dataset(fileset: &DatasetFileSet) -> Result<FunctionalDataset, IoError> {
    let raw_target = read_channel(&fileset.target, fileset)?;
    let t = raw_target.cells.len();
    let n = raw_target.cells[0].len();

    let grid = match &raw_target.header {
        Some(points) => Grid::from_points(points.clone())
            .map_err(|_| IoError::GridHeader { path: fileset.target.clone() })?,
        None => Grid::equispaced(n)?,
    };

    let mut target = Array2::zeros((t, n));
    let mut mask = Array2::from_elem((t, n), true);
    for (i, row) in raw_target.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            match cell {
                Some(x) => target[(i, j)] = *x,
                None => mask[(i, j)] = false,
            }
        }
    }

    let header_rows = usize::from(fileset.grid_header);
    let mut covariates = Vec::with_capacity(fileset.covariates.len());
    for path in &fileset.covariates {
        let raw = read_channel(path, fileset)?;
        if raw.cells.len() != t {
            return Err(IoError::RowCount {
                path: path.clone(),
                expected: t,
                got: raw.cells.len(),
            });
        }
        if raw.cells[0].len() != n {
            return Err(IoError::ColumnCount {
                path: path.clone(),
                row: 1 + header_rows,
                expected: n,
                got: raw.cells[0].len(),
            });
        }
        if let Some(h) = &raw.header {
            let agrees = h.len() == grid.len()
                && h.iter().zip(grid.points()).all(|(a, b)| (a - b).abs() <= GRID_TOL);
            if !agrees {
                return Err(IoError::GridHeader { path: path.clone() });
            }
        }
        let mut values = Array2::zeros((t, n));
        for (i, row) in raw.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                match cell {
                    Some(x) => values[(i, j)] = *x,
                    None => {
                        return Err(IoError::CovariateMissing {
                            path: path.clone(),
                            row: i + 1 + header_rows,
                            col: j + 1,
                        })
                    }
                }
            }
        }
        covariates.push(values);
    }

    Ok(FunctionalDataset::new(grid, target, mask, covariates)?)
}

fn writer_for(path: &Path, delimiter: u8) -> Result<csv::Writer<std::fs::File>, IoError> {
    csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })
}

fn write_rows<F>(
    path: &Path,
    delimiter: u8,
    grid: Option<&Grid>,
    n_rows: usize,
    n_cols: usize,
    mut cell: F,
) -> Result<(), IoError>
where
    F: FnMut(usize, usize) -> Option<f64>,
{
    let mut writer = writer_for(path, delimiter)?;
    let format = |x: f64| x.to_string();
    if let Some(grid) = grid {
        let row: Vec<String> = grid.points().iter().map(|&u| format(u)).collect();
        writer.write_record(&row).map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
    }
    for i in 0..n_rows {
        let row: Vec<String> =
            (0..n_cols).map(|j| cell(i, j).map(format).unwrap_or_default()).collect();
        writer.write_record(&row).map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
    }
    writer.flush().map_err(|e| IoError::File { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// Writes a fully observed matrix as one CSV, optionally with a grid
/// header row.
pub fn write_matrix_csv(
    path: &Path,
    values: &ArrayView2<f64>,
    grid: Option<&Grid>,
    delimiter: u8,
) -> Result<(), IoError> {
    write_rows(path, delimiter, grid, values.nrows(), values.ncols(), |i, j| {
        Some(values[(i, j)])
    })
}

/// Like [`write_matrix_csv`] for partially filled matrices; `None` cells
/// become empty fields.
pub fn write_optional_csv(
    path: &Path,
    values: &ArrayView2<Option<f64>>,
    grid: Option<&Grid>,
    delimiter: u8,
) -> Result<(), IoError> {
    write_rows(path, delimiter, grid, values.nrows(), values.ncols(), |i, j| values[(i, j)])
}

/// Writes a dataset back to its file set: masked target cells become empty
/// fields, covariates are written in full.
pub fn write_dataset(ds: &FunctionalDataset, fileset: &DatasetFileSet) -> Result<(), IoError> {
    let grid = fileset.grid_header.then_some(ds.grid());
    write_rows(
        &fileset.target,
        fileset.delimiter,
        grid,
        ds.n_curves(),
        ds.n_grid(),
        |i, j| ds.mask()[(i, j)].then(|| ds.target()[(i, j)]),
    )?;
    for (d, path) in fileset.covariates.iter().enumerate() {
        let cov = ds.covariate(d + 1);
        write_rows(path, fileset.delimiter, grid, ds.n_curves(), ds.n_grid(), |i, j| {
            Some(cov[(i, j)])
        })?;
    }
    Ok(())
}

/// Study report in its exchange shape: configuration echo, one row per
/// run, and the aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    pub config: crate::sim::SimulationConfig,
    pub per_run: Vec<ReportRow>,
    pub aggregates: ReportAggregates,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: usize,
    pub mae: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportAggregates {
    pub mae_mean: f64,
    pub mae_sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_sd: Option<f64>,
}

impl ReportDoc {
    /// Projects a study report onto the exchange schema. Coverage columns
    /// come from the report's first level when several were run.
    pub fn from_report(report: &RunReport) -> Self {
        let coverage = report.coverage.first();
        let per_run = report
            .mae_per_run
            .iter()
            .enumerate()
            .map(|(b, &mae)| ReportRow {
                run: b,
                mae,
                coverage: coverage.map(|c| c.per_run[b]),
            })
            .collect();
        ReportDoc {
            config: report.config.clone(),
            per_run,
            aggregates: ReportAggregates {
                mae_mean: report.mae_mean,
                mae_sd: report.mae_sd,
                coverage_mean: coverage.map(|c| c.mean),
                coverage_sd: coverage.map(|c| c.sd),
            },
        }
    }
}

/// Writes the flat CSV of an exchange-shape report document.
pub fn write_doc_csv(path: &Path, doc: &ReportDoc) -> Result<(), IoError> {
    let mut writer = writer_for(path, b',')?;
    let has_coverage = doc.per_run.iter().any(|r| r.coverage.is_some());
    let mut head = vec!["run".to_string(), "mae".to_string()];
    if has_coverage {
        let label = doc.config.alpha.map(|a| format!("coverage_{a}"));
        head.push(label.unwrap_or_else(|| "coverage".to_string()));
    }
    writer
        .write_record(&head)
        .map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
    for row in &doc.per_run {
        let mut record = vec![row.run.to_string(), row.mae.to_string()];
        if has_coverage {
            record.push(row.coverage.map(|c| c.to_string()).unwrap_or_default());
        }
        writer
            .write_record(&record)
            .map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
    }
    writer.flush().map_err(|e| IoError::File { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// Writes the plot-ready flat CSV: one row per run with its MAE and the
/// coverage at every level the study ran.
pub fn write_report_csv(path: &Path, report: &RunReport) -> Result<(), IoError> {
    let mut writer = writer_for(path, b',')?;
    let mut head = vec!["run".to_string(), "mae".to_string()];
    for c in &report.coverage {
        head.push(format!("coverage_{}", c.alpha));
    }
    writer
        .write_record(&head)
        .map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
    for (b, &mae) in report.mae_per_run.iter().enumerate() {
        let mut row = vec![b.to_string(), mae.to_string()];
        for c in &report.coverage {
            row.push(c.per_run[b].to_string());
        }
        writer
            .write_record(&row)
            .map_err(|e| IoError::Csv { path: path.to_path_buf(), source: e })?;
    }
    writer.flush().map_err(|e| IoError::File { path: path.to_path_buf(), source: e })?;
    Ok(())
}
