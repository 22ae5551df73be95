use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use loadanon::backtest::{self, BacktestError, InputRef};
use loadanon::ingest::{self, GapPolicy, IngestError, LclColumns, SynthConfig};
use loadanon::manifest::{file_digest, RunManifest};
use loadanon::mdav::{anonymize, MdavError};
use loadanon::metrics::{privacy_sweep, SweepConfig, SweepError};
use loadanon::panel::ProfilePanel;

/// MDAV microaggregation of half-hourly load profiles.
///
/// Exit codes: 0 ok, 2 usage, 3 I/O, 4 domain error, 5 config schema.
#[derive(Debug, Parser)]
#[command(name = "loadanon", version)]
struct Cli {
    /// Worker threads for parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic wide panel.
    Synth(SynthArgs),
    /// Convert long-format meter readings to a wide panel.
    Ingest(IngestArgs),
    /// Microaggregate a wide panel at one k.
    Anonymize(AnonymizeArgs),
    /// Utility loss across a ladder of k values.
    Metrics(MetricsArgs),
    /// Run the aggregated forecasting backtest described by a JSON config.
    Backtest(BacktestArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Number of households.
    #[arg(long)]
    households: usize,
    /// Number of days (48 ticks each).
    #[arg(long)]
    days: usize,
    /// Generator seed.
    #[arg(long)]
    seed: u64,
    /// Output wide CSV.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// First timestamp (RFC 3339).
    #[arg(long, default_value = "2013-01-01T00:00:00Z")]
    start: DateTime<Utc>,
    /// Mean load per half hour (kWh).
    #[arg(long, default_value_t = SynthConfig::default().base_load)]
    base_load: f64,
    /// Amplitude of the daily cycle.
    #[arg(long, default_value_t = SynthConfig::default().daily_amplitude)]
    daily_amplitude: f64,
    /// Amplitude of the weekly cycle.
    #[arg(long, default_value_t = SynthConfig::default().weekly_amplitude)]
    weekly_amplitude: f64,
    /// Standard deviation of per-tick Gaussian noise.
    #[arg(long, default_value_t = SynthConfig::default().noise_sd)]
    noise_sd: f64,
    /// Probability of a positive spike at each tick.
    #[arg(long, default_value_t = SynthConfig::default().spike_prob)]
    spike_prob: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GapMode {
    /// Drop any series with a missing reading.
    DropSeries,
    /// Treat missing readings as zero.
    FillZero,
    /// Fill short interior gaps linearly (see --max-gap); drop the rest.
    Interpolate,
}

#[derive(Debug, Args, Serialize)]
struct LclArgs {
    /// Household id column of the long-format input.
    #[arg(long, default_value = "LCLid")]
    id_column: String,
    /// Timestamp column of the long-format input.
    #[arg(long, default_value = "DateTime")]
    timestamp_column: String,
    /// Energy column of the long-format input.
    #[arg(long, default_value = "KWH/hh (per half hour)")]
    energy_column: String,
    /// How missing readings are resolved.
    #[arg(long, value_enum, default_value_t = GapMode::Interpolate)]
    gap_policy: GapMode,
    /// Longest interior gap, in ticks, that interpolation fills.
    #[arg(long, default_value_t = 4)]
    max_gap: usize,
}

impl LclArgs {
    fn columns(&self) -> LclColumns {
        LclColumns {
            id: self.id_column.clone(),
            timestamp: self.timestamp_column.clone(),
            energy: self.energy_column.clone(),
        }
    }

    fn policy(&self) -> GapPolicy {
        match self.gap_policy {
            GapMode::DropSeries => GapPolicy::DropSeries,
            GapMode::FillZero => GapPolicy::FillZero,
            GapMode::Interpolate => GapPolicy::LinearInterpolate { max_gap: self.max_gap },
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Long-format meter CSV.
    #[arg(long)]
    #[serde(skip)]
    input: PathBuf,
    /// Output wide CSV.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[command(flatten)]
    lcl: LclArgs,
    /// Keep a random sample of this many households.
    #[arg(long)]
    sample_size: Option<usize>,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct AnonymizeArgs {
    /// Wide panel CSV.
    #[arg(long)]
    #[serde(skip)]
    input: PathBuf,
    /// Minimum group size.
    #[arg(long)]
    k: usize,
    /// Output `series_id,group_index` CSV.
    #[arg(long)]
    #[serde(skip)]
    out_assignments: PathBuf,
    /// Output wide CSV of group centroids.
    #[arg(long)]
    #[serde(skip)]
    out_centroids: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum InputFormat {
    /// Wide panel CSV.
    Wide,
    /// Long-format meter CSV.
    Lcl,
}

#[derive(Debug, Args, Serialize)]
struct MetricsArgs {
    /// Panel to evaluate.
    #[arg(long)]
    #[serde(skip)]
    input: PathBuf,
    /// Format of --input.
    #[arg(long, value_enum, default_value_t = InputFormat::Wide)]
    format: InputFormat,
    #[command(flatten)]
    lcl: LclArgs,
    /// Comma-separated k values, or `default` for the fifteen-level ladder.
    #[arg(long, default_value = "default")]
    k_ladder: String,
    /// Independent household samples per k.
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    /// Households per replicate (default: all).
    #[arg(long)]
    sample_size: Option<usize>,
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON report.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Optional `k,sse,il,volatility_mean,volatility_sd` CSV.
    #[arg(long)]
    #[serde(skip)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BacktestArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Output long CSV `k,model,window,repeat,metric,value` (default: --out with a .csv extension).
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Domain(String),
    Config(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 3,
            CliError::Domain(_) => 4,
            CliError::Config(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Domain(m) | CliError::Config(m) => m,
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match &e {
            IngestError::Io(_) => CliError::Io(e.to_string()),
            IngestError::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => CliError::Io(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

impl From<MdavError> for CliError {
    fn from(e: MdavError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Ingest(e) => e.into(),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Config { .. } => CliError::Config(e.to_string()),
            BacktestError::Ingest(e) => e.into(),
            other => CliError::Domain(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| io_err(path, e))
}

/// `results.json` -> `results.manifest.json`.
fn manifest_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn finish_manifest(mut manifest: RunManifest, out: &Path) -> CliResult {
    manifest.finish();
    write_json(&manifest_path(out), &manifest)
}

fn digest(path: &Path) -> Result<loadanon::manifest::InputDigest, CliError> {
    file_digest(path).map_err(|e| io_err(path, e))
}

fn read_wide(path: &Path) -> Result<ProfilePanel, CliError> {
    Ok(ingest::read_wide_csv(open(path)?)?)
}

fn write_panel(path: &Path, panel: &ProfilePanel) -> CliResult {
    let mut out = create(path)?;
    ingest::write_wide_csv(panel, &mut out)?;
    out.flush().map_err(|e| io_err(path, e))
}

fn cmd_synth(args: &SynthArgs) -> CliResult {
    if args.households == 0 {
        return Err(CliError::Domain("--households: must be at least 1".into()));
    }
    if args.days == 0 {
        return Err(CliError::Domain("--days: must be at least 1".into()));
    }
    let config = SynthConfig {
        n_households: args.households,
        days: args.days,
        start: args.start,
        base_load: args.base_load,
        daily_amplitude: args.daily_amplitude,
        weekly_amplitude: args.weekly_amplitude,
        noise_sd: args.noise_sd,
        spike_prob: args.spike_prob,
        seed: args.seed,
    };
    let manifest = RunManifest::begin("synth", &config, args.seed, vec![]);
    let panel = ingest::synth_panel(&config)?;
    write_panel(&args.out, &panel)?;
    finish_manifest(manifest, &args.out)
}

fn cmd_ingest(args: &IngestArgs) -> CliResult {
    let manifest = RunManifest::begin("ingest", args, args.seed, vec![digest(&args.input)?]);
    let (reg, skipped) = ingest::load_lcl_panel(open(&args.input)?, &args.lcl.columns(), args.lcl.policy())?;
    if skipped > 0 {
        log::warn!("skipped {skipped} unparseable rows");
    }
    if !reg.dropped.is_empty() {
        log::warn!("dropped {} series with inadmissible gaps", reg.dropped.len());
    }
    let panel = match args.sample_size {
        Some(n) => ingest::sample_households(&reg.panel, n, args.seed)?,
        None => reg.panel,
    };
    write_panel(&args.out, &panel)?;
    finish_manifest(manifest, &args.out)
}

fn cmd_anonymize(args: &AnonymizeArgs) -> CliResult {
    if args.k == 0 {
        return Err(CliError::Domain("--k: k must be at least 1".into()));
    }
    let manifest = RunManifest::begin("anonymize", args, 0, vec![digest(&args.input)?]);
    let panel = read_wide(&args.input)?;
    let anon = anonymize(&panel, args.k)?;
    if anon.assignment().is_degenerate() {
        log::warn!(
            "k = {} exceeds the {} series; all series form one group",
            args.k,
            panel.n_series()
        );
    }
    let mut out = create(&args.out_assignments)?;
    anon.assignment().write_csv(&mut out)?;
    out.flush().map_err(|e| io_err(&args.out_assignments, e))?;
    let mut out = create(&args.out_centroids)?;
    anon.write_centroids_csv(&mut out)?;
    out.flush().map_err(|e| io_err(&args.out_centroids, e))?;
    finish_manifest(manifest, &args.out_assignments)
}

fn parse_ladder(raw: &str) -> Result<Vec<usize>, CliError> {
    if raw.trim() == "default" {
        return Ok(backtest::default_k_ladder());
    }
    let ladder = raw
        .split(',')
        .map(|s| {
            let s = s.trim();
            match s.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(CliError::Domain(format!("--k-ladder: `{s}` is not a positive integer"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ladder)
}

fn cmd_metrics(args: &MetricsArgs) -> CliResult {
    let ladder = parse_ladder(&args.k_ladder)?;
    if args.replicates == 0 {
        return Err(CliError::Domain("--replicates: must be at least 1".into()));
    }
    if args.sample_size == Some(0) {
        return Err(CliError::Domain("--sample-size: must be at least 1".into()));
    }
    let manifest = RunManifest::begin("metrics", args, args.seed, vec![digest(&args.input)?]);
    let panel = match args.format {
        InputFormat::Wide => read_wide(&args.input)?,
        InputFormat::Lcl => {
            let (reg, skipped) = ingest::load_lcl_panel(open(&args.input)?, &args.lcl.columns(), args.lcl.policy())?;
            if skipped > 0 {
                log::warn!("skipped {skipped} unparseable rows");
            }
            reg.panel
        }
    };
    let config = SweepConfig {
        ladder,
        replicates: args.replicates,
        sample_size: args.sample_size,
        seed: args.seed,
    };
    let report = privacy_sweep(&panel, &config)?;
    write_json(&args.out, &report)?;
    if let Some(path) = &args.out_csv {
        let mut out = create(path)?;
        report.write_csv(&mut out)?;
        out.flush().map_err(|e| io_err(path, e))?;
    }
    finish_manifest(manifest, &args.out)
}

fn cmd_backtest(args: &BacktestArgs) -> CliResult {
    let text = std::fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let config = backtest::parse_config(&text)?;
    let (panel, digests) = match &config.input {
        InputRef::Path(p) => {
            let path = args.config.parent().unwrap_or(Path::new(".")).join(p);
            let d = digest(&path)?;
            (read_wide(&path)?, vec![d])
        }
        InputRef::Synthetic { synthetic } => (ingest::synth_panel(synthetic)?, vec![]),
    };
    let mut config_digest = digest(&args.config)?;
    config_digest.path = args.config.display().to_string();
    let manifest = RunManifest::begin(
        "backtest",
        &config,
        config.seed,
        std::iter::once(config_digest).chain(digests).collect(),
    );
    let report = backtest::run_experiment(&config, &panel)?;
    if !report.failures.is_empty() {
        log::warn!("{} cells failed; see `failures` in the report", report.failures.len());
    }
    write_json(&args.out, &report)?;
    let csv_path = args.out_csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut out = create(&csv_path)?;
    report.write_csv(&mut out)?;
    out.flush().map_err(|e| io_err(&csv_path, e))?;
    finish_manifest(manifest, &args.out)
}

fn run(cli: Cli) -> CliResult {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| CliError::Domain(format!("--workers: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Anonymize(a) => cmd_anonymize(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Backtest(a) => cmd_backtest(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
