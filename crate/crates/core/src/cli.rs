//! Command implementations behind the `apcsim` binary.
//!
//! Each command writes plain files (CSV for tables, JSON for reports) and
//! attaches a [`RunManifest`] describing how the output was produced. The
//! binary only parses flags and maps errors to exit codes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{run_grid, BiasReport};
use crate::datagen::{enumerate_cases, generate_case, CaseSpec, Dataset, EffectSet};
use crate::error::{ApcError, Result};
use crate::grid::{index_weight_sum, weight_gap, weight_ratios, GridSpec};
use crate::inference::{fit, FitConfig, FitResult};
use crate::models::ModelKind;

/// Version tag of every JSON document written by the CLI.
pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const IO: i32 = 2;
    pub const VALIDATION: i32 = 3;
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &ApcError) -> i32 {
    match err {
        ApcError::Domain(_) => exit::USAGE,
        ApcError::Io { .. } => exit::IO,
        ApcError::Validation(_) | ApcError::Parse { .. } | ApcError::Serde(_) => exit::VALIDATION,
    }
}

/// Provenance attached to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments of the producing command, sufficient to re-run it.
    pub args: serde_json::Value,
    pub grid: Option<GridSpec>,
    pub fit_config: Option<FitConfig>,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch, taken from `SOURCE_DATE_EPOCH` when set.
    /// Left empty otherwise so repeated runs stay byte-identical.
    pub timestamp: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, args: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            grid: None,
            fit_config: None,
            seed: None,
            timestamp: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|s| s.trim().parse().ok()),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ApcError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ApcError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| ApcError::io(path, e))?;
    w.flush().map_err(|e| ApcError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| ApcError::io(path, e))?;
    w.flush().map_err(|e| ApcError::io(path, e))
}

/// `data.csv` → `data.truth.json`.
pub fn truth_path(csv: &Path) -> PathBuf {
    csv.with_extension("truth.json")
}

/// `plot.csv` → `plot.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateArgs {
    pub case_id: usize,
    pub ages: usize,
    pub periods: usize,
    pub replicates: usize,
    pub gamma: f64,
    pub slope: f64,
    pub nl: f64,
    pub seed: u64,
    pub out: PathBuf,
}

/// Sidecar written next to a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema: u32,
    pub case: CaseSpec,
    pub signs: String,
    pub grid: GridSpec,
    pub seed: u64,
    pub truth: EffectSet,
    pub manifest: RunManifest,
}

/// Generates a case dataset; writes the CSV and its `.truth.json` sidecar.
pub fn cmd_generate(args: &GenerateArgs) -> Result<TruthFile> {
    let spec = GridSpec::new(args.ages, args.periods, args.replicates, args.gamma)?;
    let case = CaseSpec::canonical(args.case_id, args.slope, args.nl)?;
    let (truth, data) = generate_case(&case, &spec, args.seed)?;

    let mut manifest = RunManifest::new("generate", serde_json::to_value(args)?);
    manifest.grid = Some(spec);
    manifest.seed = Some(args.seed);

    let mut w = create(&args.out)?;
    data.write_csv(&mut w)?;
    w.flush().map_err(|e| ApcError::io(&args.out, e))?;

    let sidecar = TruthFile {
        schema: SCHEMA_VERSION,
        case,
        signs: case.label(),
        grid: spec,
        seed: args.seed,
        truth,
        manifest,
    };
    write_json(&truth_path(&args.out), &sidecar)?;
    Ok(sidecar)
}

// --------------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArgs {
    pub model: ModelKind,
    pub data: PathBuf,
    pub config: FitConfig,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: u32,
    pub data: PathBuf,
    #[serde(flatten)]
    pub fit: FitResult,
    pub manifest: RunManifest,
}

/// Reads a dataset CSV, picking up grid metadata from its sidecar if present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let hint = match std::fs::read_to_string(truth_path(path)) {
        Ok(text) => Some(serde_json::from_str::<TruthFile>(&text)?.grid),
        Err(_) => None,
    };
    let file = File::open(path).map_err(|e| ApcError::io(path, e))?;
    Dataset::read_csv(std::io::BufReader::new(file), hint)
}

/// Fits one model to a dataset CSV. Non-convergence is reported, not raised.
pub fn cmd_fit(args: &FitArgs) -> Result<FitReport> {
    args.config.validate()?;
    let data = load_dataset(&args.data)?;
    let result = fit(args.model, &data, &args.config)?;

    let mut manifest = RunManifest::new("fit", serde_json::to_value(args)?);
    manifest.grid = Some(data.spec);
    manifest.fit_config = Some(args.config.clone());
    manifest.seed = Some(args.config.seed);
    let report = FitReport {
        schema: SCHEMA_VERSION,
        data: args.data.clone(),
        fit: result,
        manifest,
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

// -------------------------------------------------------------------- grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridArgs {
    pub models: Vec<ModelKind>,
    pub config: FitConfig,
    pub grid: GridSpec,
    pub slope: f64,
    pub nl: f64,
    /// JSON report path; the CSV table goes next to it with a `.csv` extension.
    pub out: PathBuf,
    /// Worker threads; `None` uses the available parallelism.
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl GridArgs {
    /// The full 13 x 3 grid with the given fit configuration.
    pub fn defaults(config: FitConfig, out: PathBuf) -> Self {
        GridArgs {
            models: ModelKind::ALL.to_vec(),
            config,
            grid: GridSpec::default(),
            slope: crate::datagen::DEFAULT_SLOPE,
            nl: crate::datagen::DEFAULT_NONLINEAR,
            out,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema: u32,
    pub centering: String,
    pub reports: Vec<BiasReport>,
    pub manifest: RunManifest,
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{:.6}", x + 0.0)
    } else {
        String::new()
    }
}

/// Long-format results table: one row per (case, model).
pub fn grid_csv(reports: &[BiasReport]) -> String {
    let mut s = String::from("case,signs,model,s,grade,converged,max_rhat,divergences,nonlinear_error\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.case_id,
            r.signs,
            r.model,
            fmt_num(r.s),
            r.grade,
            r.fit_meta.converged,
            r.fit_meta.max_rhat.map(fmt_num).unwrap_or_default(),
            r.fit_meta.divergences,
            fmt_num(r.nonlinear_error),
        ));
    }
    s
}

/// Runs every case against every requested model; writes JSON and CSV.
pub fn cmd_grid(args: &GridArgs) -> Result<GridReport> {
    if args.models.is_empty() {
        return Err(ApcError::domain("at least one model is required"));
    }
    args.config.validate()?;
    args.grid.validate()?;
    let cases = enumerate_cases(args.slope, args.nl)?;
    let run = || run_grid(&args.grid, &cases, &args.models, &args.config);
    let reports = match args.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| ApcError::domain(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let mut manifest = RunManifest::new("grid", serde_json::to_value(args)?);
    manifest.grid = Some(args.grid);
    manifest.fit_config = Some(args.config.clone());
    manifest.seed = Some(args.config.seed);
    let report = GridReport {
        schema: SCHEMA_VERSION,
        centering: crate::inference::CENTERING_NOTE.to_string(),
        reports,
        manifest,
    };
    write_json(&args.out.with_extension("json"), &report)?;
    write_text(&args.out.with_extension("csv"), &grid_csv(&report.reports))?;
    Ok(report)
}

// ------------------------------------------------------------------ theory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema: u32,
    pub ages: usize,
    pub periods: usize,
    pub cohorts: usize,
    pub sum_sq_age: f64,
    pub sum_sq_period: f64,
    pub sum_sq_cohort: f64,
    /// `(K-1)/(J-1)`.
    pub walk_ratio: f64,
    /// `Σ vC² / Σ vP²`.
    pub weight_ratio: f64,
    pub weight_gap: f64,
    pub gap_positive: bool,
    pub manifest: RunManifest,
}

/// Index-weight sums and the gap between the two weight ratios.
pub fn cmd_theory(ages: usize, periods: usize) -> Result<TheoryReport> {
    let gap = weight_gap(ages, periods)?;
    let (weight_ratio, walk_ratio) = weight_ratios(ages, periods);
    let cohorts = ages + periods - 1;
    Ok(TheoryReport {
        schema: SCHEMA_VERSION,
        ages,
        periods,
        cohorts,
        sum_sq_age: index_weight_sum(ages),
        sum_sq_period: index_weight_sum(periods),
        sum_sq_cohort: index_weight_sum(cohorts),
        walk_ratio,
        weight_ratio,
        weight_gap: gap,
        gap_positive: gap > 0.0,
        manifest: RunManifest::new("theory", serde_json::json!({ "ages": ages, "periods": periods })),
    })
}

// ---------------------------------------------------------------- plotdata

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotSource {
    /// Noise-free cell means of a case, by period against cohort.
    Case {
        case_id: usize,
        ages: usize,
        periods: usize,
        slope: f64,
        nl: f64,
    },
    /// Point estimates of a fit report, by effect block.
    Fit { path: PathBuf },
}

/// One `series,x,y` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: usize,
    pub y: f64,
}

fn plot_csv(points: &[PlotPoint]) -> String {
    let mut s = String::from("series,x,y\n");
    for p in points {
        // fixed precision keeps mathematically equal surfaces byte-identical
        s.push_str(&format!("{},{},{:.10}\n", p.series, p.x, (p.y * 1e10).round() / 1e10 + 0.0));
    }
    s
}

/// Long-format plot data: periods against cohort for a case, or
/// estimates against level index for a fit.
pub fn plot_points(source: &PlotSource) -> Result<Vec<PlotPoint>> {
    match source {
        PlotSource::Case {
            case_id,
            ages,
            periods,
            slope,
            nl,
        } => {
            let spec = GridSpec::new(*ages, *periods, 1, 1.0)?;
            let case = CaseSpec::canonical(*case_id, *slope, *nl)?;
            let beta = crate::datagen::artificial_effects(&case, &spec);
            let mut pts = Vec::with_capacity(spec.n_cells());
            for j in 1..=spec.periods {
                for i in (1..=spec.ages).rev() {
                    let k = spec.cohort_of(i, j)?;
                    pts.push(PlotPoint {
                        series: j.to_string(),
                        x: k,
                        y: beta.cell_mean(i, j, k),
                    });
                }
            }
            Ok(pts)
        }
        PlotSource::Fit { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| ApcError::io(path, e))?;
            let doc: serde_json::Value = serde_json::from_str(&text)?;
            let point = doc
                .get("point")
                .ok_or_else(|| ApcError::Validation(format!("{} has no 'point' field", path.display())))?;
            let eff: EffectSet = serde_json::from_value(point.clone())?;
            let mut pts = Vec::new();
            for (name, block) in ["age", "period", "cohort"].iter().zip(eff.blocks()) {
                pts.extend(block.iter().enumerate().map(|(a, y)| PlotPoint {
                    series: name.to_string(),
                    x: a + 1,
                    y: *y,
                }));
            }
            Ok(pts)
        }
    }
}

/// Writes plot data to `out` and a `.manifest.json` next to it.
pub fn cmd_plotdata(source: &PlotSource, out: &Path) -> Result<Vec<PlotPoint>> {
    let pts = plot_points(source)?;
    write_text(out, &plot_csv(&pts))?;
    let manifest = RunManifest::new(
        "plotdata",
        serde_json::json!({ "source": source, "out": out }),
    );
    write_json(&manifest_path(out), &manifest)?;
    Ok(pts)
}
