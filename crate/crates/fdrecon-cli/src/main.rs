//! Command-line front end: load channel CSVs, reconstruct partially
//! observed curves, calibrate prediction bands, pick ranks by
//! cross-validation, and drive simulation studies.
//!
//! Errors leave through a machine-readable JSON object on stderr with a
//! module-qualified code and a nonzero exit status. `FDRECON_THREADS`
//! caps the worker pool used by the parallel pieces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use fdrecon::bands::{fit_band_model, BandError, BandOptions};
use fdrecon::dataset::{FunctionalDataset, Grid, ObservationPattern};
use fdrecon::io::{
    load_dataset, write_doc_csv, write_matrix_csv, write_optional_csv, write_report_csv,
    DatasetFileSet, IoError, ReportDoc,
};
use fdrecon::recon::{ReconError, Reconstructor};
use fdrecon::selection::{cv_rank, empirical_weights, CvReport, SelectionError, WeightVector};
use fdrecon::sim::{run_study, EigenDecay, Setting, SimError, SimulationConfig};
use ndarray::Array2;

#[derive(Parser)]
#[command(
    name = "fdrecon",
    version,
    about = "Factor-model reconstruction of partially observed curves",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Impute missing target cells and denoise observed ones.
    Reconstruct(ReconstructArgs),
    /// Reconstruct and wrap simultaneous prediction bands around the
    /// missing fragments.
    Bands(BandsArgs),
    /// Print the cross-validated rank for each distinct missing pattern.
    CvRank(CvRankArgs),
    /// Run a seeded simulation study and write its report.
    Simulate(SimulateArgs),
    /// Summarize a report JSON and optionally re-emit the flat CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Target channel CSV, curves in rows; empty or NA cells are missing.
    #[arg(long)]
    target: PathBuf,
    /// Covariate channel CSV (fully observed); repeat for more channels.
    #[arg(long = "covariate")]
    covariates: Vec<PathBuf>,
    /// Field delimiter.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Files start with a grid-point header row instead of implying an
    /// equispaced grid on [0, 1].
    #[arg(long)]
    grid_header: bool,
    /// Channel weights: "empirical" or a comma-separated list, target
    /// first.
    #[arg(long, default_value = "empirical")]
    weights: String,
}

#[derive(Args)]
struct RankArgs {
    /// "cv" for the cross-validated choice or an explicit integer.
    #[arg(long, default_value = "cv")]
    rank: String,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Cap of the cross-validated rank search.
    #[arg(long)]
    r_max: Option<usize>,
    /// Seed for the fold shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rank: RankArgs,
    /// Splice the raw observations back over the fitted values.
    #[arg(long)]
    keep_observed: bool,
    /// Output CSV with the full curve matrix.
    #[arg(long)]
    out: PathBuf,
    /// JSON sidecar with per-curve ranks and pattern summaries.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct BandsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    rank: RankArgs,
    /// Miscoverage level of the bands.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Calibrate residuals with each curve left inside its own fit
    /// (cheaper, less honest).
    #[arg(long)]
    leave_in: bool,
    #[arg(long)]
    keep_observed: bool,
    /// Output CSV with the full curve matrix.
    #[arg(long)]
    out: PathBuf,
    /// Lower band CSV; filled only at missing cells.
    #[arg(long)]
    lower: PathBuf,
    /// Upper band CSV; filled only at missing cells.
    #[arg(long)]
    upper: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct CvRankArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full cross-validation reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Observation-window setting: A or B.
    #[arg(long)]
    setting: String,
    /// Eigenvalue decay: exp or poly.
    #[arg(long)]
    decay: String,
    /// Measurement noise standard deviation.
    #[arg(long)]
    sigma: f64,
    /// Number of completely observed training curves.
    #[arg(long)]
    tc: usize,
    /// Number of simulation runs.
    #[arg(long, default_value_t = 100)]
    runs: usize,
    /// Include the covariate channel.
    #[arg(long)]
    covariate: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Build prediction bands at this level and report coverage.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 51)]
    n_grid: usize,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Flat per-run CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON produced by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Re-emit the flat per-run CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Bands(#[from] BandError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    /// Module-qualified error code, e.g. `selection.rank_too_large`.
    fn code(&self) -> String {
        let (module, debug) = match self {
            CliError::Io(e) => ("io", format!("{e:?}")),
            CliError::Recon(e) => ("recon", format!("{e:?}")),
            CliError::Selection(e) => ("selection", format!("{e:?}")),
            CliError::Bands(e) => ("bands", format!("{e:?}")),
            CliError::Sim(e) => ("sim", format!("{e:?}")),
            CliError::Usage(_) => return "cli.usage".to_string(),
            CliError::File { .. } => return "cli.file".to_string(),
            CliError::Json { .. } => return "cli.json".to_string(),
        };
        format!("{module}.{}", snake_variant(&debug))
    }
}

/// First identifier of a Debug rendering, lowered to snake case:
/// `RankTooLarge { .. }` becomes `rank_too_large`.
fn snake_variant(debug: &str) -> String {
    let name: String =
        debug.chars().take_while(|c| c.is_ascii_alphanumeric()).collect();
    let mut out = String::with_capacity(name.len() + 4);
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

fn main() {
    if let Ok(threads) = std::env::var("FDRECON_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        let payload = serde_json::json!({
            "error": { "code": err.code(), "message": err.to_string() }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Bands(args) => cmd_bands(args),
        Command::CvRank(args) => cmd_cv_rank(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn fileset(data: &DataArgs) -> Result<DatasetFileSet, CliError> {
    if !data.delimiter.is_ascii() {
        return Err(CliError::Usage(format!(
            "delimiter {:?} is not an ASCII character",
            data.delimiter
        )));
    }
    let mut fs = DatasetFileSet::new(data.target.clone(), data.covariates.clone());
    fs.delimiter = data.delimiter as u8;
    fs.grid_header = data.grid_header;
    Ok(fs)
}

fn resolve_weights(ds: &FunctionalDataset, arg: &str) -> Result<WeightVector, CliError> {
    if arg == "empirical" {
        return Ok(empirical_weights(ds)?);
    }
    let values: Result<Vec<f64>, _> = arg.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| {
        CliError::Usage(format!("weights must be \"empirical\" or a comma-separated list, got {arg:?}"))
    })?;
    if values.len() != ds.n_channels() {
        return Err(CliError::Usage(format!(
            "dataset has {} channels but {} weights were given",
            ds.n_channels(),
            values.len()
        )));
    }
    WeightVector::new(values).map_err(|e| CliError::Selection(e.into()))
}

enum RankChoice {
    Cv,
    Fixed(usize),
}

fn parse_rank(arg: &str) -> Result<RankChoice, CliError> {
    if arg == "cv" {
        return Ok(RankChoice::Cv);
    }
    match arg.parse::<usize>() {
        Ok(r) if r >= 1 => Ok(RankChoice::Fixed(r)),
        _ => Err(CliError::Usage(format!(
            "rank must be \"cv\" or a positive integer, got {arg:?}"
        ))),
    }
}

/// One distinct missing pattern with its curves and the rank to use.
#[derive(Serialize)]
struct PatternPlan {
    curves: Vec<usize>,
    n_observed: usize,
    n_missing: usize,
    rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<CvReport>,
    #[serde(skip)]
    observed: Vec<bool>,
}

#[derive(Serialize)]
struct Sidecar {
    rank_source: String,
    /// Rank used to denoise fully observed curves.
    complete_rank: usize,
    curves: Vec<SidecarCurve>,
    patterns: Vec<PatternPlan>,
}

#[derive(Serialize)]
struct SidecarCurve {
    curve: usize,
    rank: usize,
    n_observed: usize,
    n_missing: usize,
}

fn incomplete_groups(ds: &FunctionalDataset) -> BTreeMap<Vec<bool>, Vec<usize>> {
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for t in ds.incomplete_indices() {
        groups.entry(ds.mask().row(t).to_vec()).or_default().push(t);
    }
    groups
}

/// Decides the rank for every distinct incomplete pattern plus the rank for
/// fully observed curves (which borrow the largest selected one, having no
/// missing cells to validate against).
fn plan_ranks(
    ds: &FunctionalDataset,
    weights: &WeightVector,
    rank: &RankArgs,
) -> Result<(Vec<PatternPlan>, usize, String), CliError> {
    let choice = parse_rank(&rank.rank)?;
    let groups = incomplete_groups(ds);
    let mut plans = Vec::with_capacity(groups.len());
    for (observed, curves) in groups {
        let pattern = ObservationPattern::new(observed.clone());
        let (chosen, cv) = match choice {
            RankChoice::Fixed(r) => (r, None),
            RankChoice::Cv => {
                let report =
                    cv_rank(ds, &pattern, weights, rank.r_max, rank.folds, rank.seed)?;
                (report.chosen_rank, Some(report))
            }
        };
        plans.push(PatternPlan {
            curves,
            n_observed: pattern.n_observed(),
            n_missing: ds.n_grid() - pattern.n_observed(),
            rank: chosen,
            cv,
            observed,
        });
    }
    let complete_rank = match choice {
        RankChoice::Fixed(r) => r,
        RankChoice::Cv => plans.iter().map(|p| p.rank).max().ok_or_else(|| {
            CliError::Usage(
                "every curve is fully observed; pass an explicit --rank to denoise".to_string(),
            )
        })?,
    };
    let source = match choice {
        RankChoice::Cv => "cv",
        RankChoice::Fixed(_) => "fixed",
    };
    Ok((plans, complete_rank, source.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Json { path: path.to_path_buf(), source: e })?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::File { path: path.to_path_buf(), source: e })
}

/// Reconstructs every curve: incomplete ones on their own pattern,
/// complete ones denoised at `complete_rank`. Returns the full matrix and
/// the per-curve sidecar rows.
fn reconstruct_all(
    ds: &FunctionalDataset,
    weights: &WeightVector,
    plans: &[PatternPlan],
    complete_rank: usize,
    keep_observed: bool,
) -> Result<(Array2<f64>, Vec<SidecarCurve>), CliError> {
    let rec = Reconstructor::new(ds, weights.as_slice().to_vec())?;
    let mut rank_of: Vec<usize> = vec![complete_rank; ds.n_curves()];
    for plan in plans {
        for &t in &plan.curves {
            rank_of[t] = plan.rank;
        }
    }
    let mut out = Array2::zeros((ds.n_curves(), ds.n_grid()));
    let mut curves = Vec::with_capacity(ds.n_curves());
    for t in 0..ds.n_curves() {
        let reconstruction = rec.reconstruct(t, rank_of[t])?;
        let values = if keep_observed {
            reconstruction.merged_with_observed(ds)
        } else {
            reconstruction.grid_values.clone()
        };
        out.row_mut(t).assign(&values);
        let observed = ds.mask().row(t).iter().filter(|&&b| b).count();
        curves.push(SidecarCurve {
            curve: t,
            rank: rank_of[t],
            n_observed: observed,
            n_missing: ds.n_grid() - observed,
        });
    }
    Ok((out, curves))
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let ds = load_dataset(&fileset(&args.data)?)?;
    let weights = resolve_weights(&ds, &args.data.weights)?;
    let (plans, complete_rank, source) = plan_ranks(&ds, &weights, &args.rank)?;
    let (matrix, curves) =
        reconstruct_all(&ds, &weights, &plans, complete_rank, args.keep_observed)?;
    let grid = args.data.grid_header.then_some(ds.grid());
    write_matrix_csv(&args.out, &matrix.view(), grid, args.data.delimiter as u8)?;
    if let Some(sidecar) = &args.sidecar {
        write_json(sidecar, &Sidecar { rank_source: source, complete_rank, curves, patterns: plans })?;
    }
    Ok(())
}

fn cmd_bands(args: BandsArgs) -> Result<(), CliError> {
    let ds = load_dataset(&fileset(&args.data)?)?;
    let weights = resolve_weights(&ds, &args.data.weights)?;
    let (plans, complete_rank, source) = plan_ranks(&ds, &weights, &args.rank)?;
    let (matrix, curves) =
        reconstruct_all(&ds, &weights, &plans, complete_rank, args.keep_observed)?;

    let options = BandOptions { leave_in: args.leave_in };
    // Lower/upper live only on missing cells; everything else stays empty.
    let mut lower = Array2::from_elem((ds.n_curves(), ds.n_grid()), f64::NAN);
    let mut upper = lower.clone();
    let rec = Reconstructor::new(&ds, weights.as_slice().to_vec())?;
    for plan in &plans {
        let pattern = ObservationPattern::new(plan.observed.clone());
        let model = fit_band_model(&ds, &pattern, plan.rank, &weights, args.alpha, &options)?;
        for &t in &plan.curves {
            let values = rec.reconstruct_on(t, &pattern, plan.rank)?.grid_values;
            let center: Vec<f64> = model.missing.iter().map(|&i| values[i]).collect();
            let band = model.band(&center)?;
            for (j, &i) in band.missing.iter().enumerate() {
                lower[(t, i)] = band.lower[j];
                upper[(t, i)] = band.upper[j];
            }
        }
    }

    let grid = args.data.grid_header.then_some(ds.grid());
    let delimiter = args.data.delimiter as u8;
    write_matrix_csv(&args.out, &matrix.view(), grid, delimiter)?;
    write_band_csv(&args.lower, &lower, grid, delimiter)?;
    write_band_csv(&args.upper, &upper, grid, delimiter)?;
    if let Some(sidecar) = &args.sidecar {
        write_json(sidecar, &Sidecar { rank_source: source, complete_rank, curves, patterns: plans })?;
    }
    Ok(())
}

/// Band matrices use NaN for "no band here"; written as empty cells.
fn write_band_csv(
    path: &Path,
    values: &Array2<f64>,
    grid: Option<&Grid>,
    delimiter: u8,
) -> Result<(), CliError> {
    let masked = values.mapv(|x| if x.is_nan() { None } else { Some(x) });
    write_optional_csv(path, &masked.view(), grid, delimiter)?;
    Ok(())
}

fn cmd_cv_rank(args: CvRankArgs) -> Result<(), CliError> {
    let ds = load_dataset(&fileset(&args.data)?)?;
    let weights = resolve_weights(&ds, &args.data.weights)?;
    let groups = incomplete_groups(&ds);
    if groups.is_empty() {
        return Err(CliError::Usage(
            "every curve is fully observed; there is no missing pattern to validate".to_string(),
        ));
    }
    let mut reports = Vec::new();
    for (observed, curves) in groups {
        let pattern = ObservationPattern::new(observed);
        let report = cv_rank(&ds, &pattern, &weights, args.r_max, args.folds, args.seed)?;
        println!("{}", report.chosen_rank);
        reports.push(serde_json::json!({ "curves": curves, "report": report }));
    }
    if let Some(out) = &args.out {
        write_json(out, &reports)?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let setting = match args.setting.as_str() {
        "A" | "a" => Setting::A,
        "B" | "b" => Setting::B,
        other => return Err(CliError::Usage(format!("setting must be A or B, got {other:?}"))),
    };
    let decay = match args.decay.as_str() {
        "exp" => EigenDecay::Exponential,
        "poly" => EigenDecay::Polynomial,
        other => return Err(CliError::Usage(format!("decay must be exp or poly, got {other:?}"))),
    };
    let mut config = SimulationConfig::new(decay, args.sigma, args.tc, setting);
    config.n_runs = args.runs;
    config.seed = args.seed;
    config.use_covariate = args.covariate;
    config.alpha = args.alpha;
    config.n_test = args.n_test;
    config.n_grid = args.n_grid;

    let report = run_study(&config)?;
    let doc = ReportDoc::from_report(&report);
    write_json(&args.out, &doc)?;
    if let Some(csv) = &args.csv {
        write_report_csv(csv, &report)?;
    }
    match report.coverage.first() {
        Some(c) => println!(
            "runs {} mae_mean {:.6} mae_sd {:.6} coverage_mean {:.6} coverage_sd {:.6}",
            args.runs, report.mae_mean, report.mae_sd, c.mean, c.sd
        ),
        None => println!(
            "runs {} mae_mean {:.6} mae_sd {:.6}",
            args.runs, report.mae_mean, report.mae_sd
        ),
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::File { path: args.input.clone(), source: e })?;
    let doc: ReportDoc = serde_json::from_str(&text)
        .map_err(|e| CliError::Json { path: args.input.clone(), source: e })?;
    match (doc.aggregates.coverage_mean, doc.aggregates.coverage_sd) {
        (Some(mean), Some(sd)) => println!(
            "runs {} mae_mean {:.6} mae_sd {:.6} coverage_mean {:.6} coverage_sd {:.6}",
            doc.per_run.len(),
            doc.aggregates.mae_mean,
            doc.aggregates.mae_sd,
            mean,
            sd
        ),
        _ => println!(
            "runs {} mae_mean {:.6} mae_sd {:.6}",
            doc.per_run.len(),
            doc.aggregates.mae_mean,
            doc.aggregates.mae_sd
        ),
    }
    if let Some(csv) = &args.csv {
        write_doc_csv(csv, &doc)?;
    }
    Ok(())
}
