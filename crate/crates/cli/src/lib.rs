//! Commands behind the `fedhet` binary. Each command writes into one output
//! directory and refuses to clobber existing files unless told to.

pub mod spec;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use fedhet::analysis::{self, compare_table_by, Curve, Param, TableRow};
use fedhet::federation::{ExperimentResult, RoundRecord, Simulation};
use fedhet::heterogeneity::{self, emd_sweep};
use fedhet::partition::{build_partition, PartitionManifest};
use serde::{Deserialize, Serialize};

pub use spec::RunSpec;

/// Bumped whenever the result file layout changes; `analyze` refuses to mix
/// versions.
pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEC_ECHO_FILE: &str = "spec.toml";
pub const ROUND_LOG_FILE: &str = "rounds.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const SWEEP_TRIALS_FILE: &str = "emd_trials.csv";
pub const SWEEP_CELLS_FILE: &str = "emd_cells.csv";
pub const SWEEP_META_FILE: &str = "sweep.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const COMPARE_META_FILE: &str = "compare.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{} already exists (pass --overwrite to replace it)", .0.display())]
    WouldClobber(PathBuf),
    #[error(transparent)]
    Core(#[from] fedhet::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    BadInput { path: PathBuf, reason: String },
}

impl CliError {
    /// 2 for anything wrong with the invocation or spec, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::WouldClobber(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub overwrite: bool,
    /// Adds wall-clock `elapsed_ms` to round records (breaks byte-identical logs).
    pub timings: bool,
}

struct Prepared {
    spec: RunSpec,
    hash: String,
    out: PathBuf,
}

fn prepare(opts: &RunOptions) -> Result<Prepared, CliError> {
    let mut spec = RunSpec::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        spec.override_seed(seed);
    }
    let out = opts
        .out
        .clone()
        .or_else(|| spec.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    let hash = spec.config_hash();
    Ok(Prepared { spec, hash, out })
}

/// Fails if any target exists and `overwrite` is off; otherwise creates the
/// directory and removes stale targets.
fn claim_outputs(dir: &Path, files: &[&str], overwrite: bool) -> Result<(), CliError> {
    for f in files {
        let p = dir.join(f);
        if p.exists() {
            if !overwrite {
                return Err(CliError::WouldClobber(p));
            }
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_spec_echo(p: &Prepared) -> Result<(), CliError> {
    let text = format!(
        "# fedhet {}\n# config_hash = \"{}\"\n{}",
        fedhet::VERSION,
        p.hash,
        p.spec.to_toml()?
    );
    write_text(&p.out.join(SPEC_ECHO_FILE), &text)
}

fn thread_pool(workers: Option<usize>) -> Result<Option<rayon::ThreadPool>, CliError> {
    workers
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Config(format!("--workers {n}: {e}")))
        })
        .transpose()
}

#[derive(Clone, Debug)]
pub struct PartitionOutcome {
    pub manifest: PartitionManifest,
    pub summary: String,
    pub out: PathBuf,
}

pub fn cmd_partition(opts: &RunOptions) -> Result<PartitionOutcome, CliError> {
    let p = prepare(opts)?;
    let params = p.spec.partition_params()?;
    p.spec.check_data()?;
    claim_outputs(&p.out, &[MANIFEST_FILE, SPEC_ECHO_FILE], opts.overwrite)?;
    let data = p.spec.load_data(params.seed)?;
    let mut manifest = build_partition(&data.train, &params)?;
    let emd = heterogeneity::annotate(&mut manifest, &data.train.labels)?;
    manifest.config_hash = Some(p.hash.clone());
    manifest.write(p.out.join(MANIFEST_FILE))?;
    write_spec_echo(&p)?;
    let level = manifest.iid_level.map_or_else(|| "n/a".to_string(), |l| l.to_string());
    let summary = format!(
        "dataset {}: k={} var={} D={} s={} -> EMD {:.4}, IID level {}",
        manifest.dataset.name, params.k, params.var, params.num_devices, params.max_samples, emd, level
    );
    Ok(PartitionOutcome {
        manifest,
        summary,
        out: p.out,
    })
}

#[derive(Serialize)]
struct SweepMeta<'a> {
    tool_version: &'a str,
    config_hash: &'a str,
    grid: &'a heterogeneity::SweepGrid,
    cells: &'a [heterogeneity::SweepCell],
}

pub fn cmd_sweep(opts: &RunOptions) -> Result<heterogeneity::EmdSweep, CliError> {
    let p = prepare(opts)?;
    let grid = p.spec.sweep()?.clone();
    p.spec.check_data()?;
    claim_outputs(
        &p.out,
        &[SWEEP_TRIALS_FILE, SWEEP_CELLS_FILE, SWEEP_META_FILE, SPEC_ECHO_FILE],
        opts.overwrite,
    )?;
    let data = p.spec.load_data(grid.seed)?;
    let sweep = match thread_pool(opts.workers)? {
        Some(pool) => pool.install(|| emd_sweep(&data.train, &grid))?,
        None => emd_sweep(&data.train, &grid)?,
    };
    sweep.write_trials_csv(p.out.join(SWEEP_TRIALS_FILE))?;
    sweep.write_cells_csv(p.out.join(SWEEP_CELLS_FILE))?;
    let meta = SweepMeta {
        tool_version: fedhet::VERSION,
        config_hash: &p.hash,
        grid: &grid,
        cells: &sweep.cells,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(fedhet::Error::from)?;
    write_text(&p.out.join(SWEEP_META_FILE), &(json + "\n"))?;
    write_spec_echo(&p)?;
    Ok(sweep)
}

/// One line of the round log.
#[derive(Debug, Serialize, Deserialize)]
pub struct RoundLogLine {
    pub round: usize,
    pub f1: f64,
    pub loss: f64,
    pub selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

impl From<&RoundRecord> for RoundLogLine {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            f1: r.macro_f1,
            loss: r.mean_train_loss,
            selected: r.selected.clone(),
            elapsed_ms: r.elapsed_ms,
        }
    }
}

/// Summary written at the end of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultFile {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub result: ExperimentResult,
}

impl ResultFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::BadInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: ExperimentResult,
    pub out: PathBuf,
}

pub fn cmd_train(opts: &RunOptions) -> Result<TrainOutcome, CliError> {
    let p = prepare(opts)?;
    let cfg = p.spec.experiment()?.clone();
    p.spec.check_data()?;
    claim_outputs(
        &p.out,
        &[SPEC_ECHO_FILE, MANIFEST_FILE, ROUND_LOG_FILE, RESULT_FILE],
        opts.overwrite,
    )?;
    write_spec_echo(&p)?;
    let data = p.spec.load_data(cfg.seed)?;
    let mut sim = Simulation::new(cfg, &data.train, data.test.as_ref())?.with_timing(opts.timings);
    if let Some(n) = opts.workers {
        sim = sim.with_workers(n)?;
    }
    sim.manifest.config_hash = Some(p.hash.clone());
    sim.manifest.write(p.out.join(MANIFEST_FILE))?;

    let log_path = p.out.join(ROUND_LOG_FILE);
    let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut result = sim.run(|record| {
        let mut line = serde_json::to_string(&RoundLogLine::from(record))?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.flush()?;
        Ok(())
    })?;
    result.manifest_path = Some(MANIFEST_FILE.to_string());

    let file = ResultFile {
        schema_version: SCHEMA_VERSION,
        tool_version: fedhet::VERSION.to_string(),
        config_hash: p.hash.clone(),
        result,
    };
    let json = serde_json::to_string_pretty(&file).map_err(fedhet::Error::from)?;
    write_text(&p.out.join(RESULT_FILE), &(json + "\n"))?;
    Ok(TrainOutcome {
        result: file.result,
        out: p.out,
    })
}

#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    /// Result files, or run directories containing one.
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub smooth_window: usize,
    pub sigma: f64,
    pub group_by: Param,
    pub overwrite: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            out: PathBuf::new(),
            smooth_window: 3,
            sigma: 3.0,
            group_by: Param::ActiveCount,
            overwrite: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyzeRow {
    #[serde(flatten)]
    pub row: TableRow,
    pub raw_best_f1: f64,
    pub raw_best_round: usize,
}

pub const ANALYZE_HEADER: &str =
    "dataset,iid_level,param,param_value,aggregator,best_f1,best_round,is_best,raw_best_f1,raw_best_round";

#[derive(Serialize)]
struct CompareMeta<'a> {
    tool_version: &'a str,
    schema_version: u32,
    smooth_window: usize,
    sigma: f64,
    inputs: Vec<(String, String)>,
    rows: &'a [AnalyzeRow],
}

fn processed_best(r: &ExperimentResult, sigma: f64, window: usize) -> fedhet::Result<(usize, f64)> {
    let curve = Curve::new(r.f1_curve())?;
    Ok(analysis::best_f1(&analysis::process_curve(&curve, sigma, window)?))
}

/// Processed bests (outlier removal, then trailing smoothing) drive the
/// `best_f1`/`is_best` columns; raw bests ride along.
pub fn cmd_analyze(opts: &AnalyzeOptions) -> Result<Vec<AnalyzeRow>, CliError> {
    if opts.inputs.is_empty() {
        return Err(CliError::Config("analyze needs at least one result file".into()));
    }
    if opts.smooth_window == 0 {
        return Err(CliError::Config("--smooth-window must be at least 1".into()));
    }
    if opts.sigma.is_nan() || opts.sigma < 0.0 {
        return Err(CliError::Config("--sigma must be non-negative".into()));
    }
    let mut files = Vec::with_capacity(opts.inputs.len());
    for input in &opts.inputs {
        let path = if input.is_dir() {
            input.join(RESULT_FILE)
        } else {
            input.clone()
        };
        let file = ResultFile::read(&path)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CliError::BadInput {
                path,
                reason: format!(
                    "result schema version {} does not match {}",
                    file.schema_version, SCHEMA_VERSION
                ),
            });
        }
        if file.result.curve.is_empty() {
            return Err(CliError::BadInput {
                path,
                reason: "empty learning curve".into(),
            });
        }
        files.push((path, file));
    }
    claim_outputs(&opts.out, &[COMPARE_FILE, COMPARE_META_FILE], opts.overwrite)?;

    let results: Vec<ExperimentResult> = files.iter().map(|(_, f)| f.result.clone()).collect();
    let mut processed = Vec::with_capacity(results.len());
    for r in &results {
        processed.push(processed_best(r, opts.sigma, opts.smooth_window)?);
    }
    // Both tables sort on config fields only, so their rows line up.
    let index_of = |r: &ExperimentResult| results.iter().position(|x| std::ptr::eq(x, r)).expect("own result");
    let table = compare_table_by(&results, opts.group_by, |r| processed[index_of(r)])?;
    let raw = compare_table_by(&results, opts.group_by, |r| (r.best_round, r.best_f1))?;
    let rows: Vec<AnalyzeRow> = table
        .into_iter()
        .zip(raw)
        .map(|(row, raw)| AnalyzeRow {
            row,
            raw_best_f1: raw.best_f1,
            raw_best_round: raw.best_round,
        })
        .collect();

    let mut csv = String::from(ANALYZE_HEADER);
    csv.push('\n');
    for r in &rows {
        let t = &r.row;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            t.dataset,
            t.iid_level,
            t.param,
            t.param_value,
            t.aggregator,
            t.best_f1,
            t.best_round,
            t.is_best,
            r.raw_best_f1,
            r.raw_best_round
        ));
    }
    write_text(&opts.out.join(COMPARE_FILE), &csv)?;
    let meta = CompareMeta {
        tool_version: fedhet::VERSION,
        schema_version: SCHEMA_VERSION,
        smooth_window: opts.smooth_window,
        sigma: opts.sigma,
        inputs: files
            .iter()
            .map(|(p, f)| (p.display().to_string(), f.config_hash.clone()))
            .collect(),
        rows: &rows,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(fedhet::Error::from)?;
    write_text(&opts.out.join(COMPARE_META_FILE), &(json + "\n"))?;
    Ok(rows)
}
