//! Aggregated day-ahead backtest over a ladder of anonymization levels.
//!
//! For every repeat, level and window each model is fitted per series
//! (households at the `raw` level, group centroids otherwise) on everything
//! before the forecast day. The per-series forecasts are summed into one
//! aggregate, centroid forecasts weighted by their group size, and scored
//! against the summed actual load of the households.

use std::fmt;
use std::io::Write;

use chrono::{Datelike, NaiveDate, TimeZone, Utc};
use rayon::prelude::*;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::forecast::{fit_model, predict_recursive, ForecastError, ModelSpec};
use crate::ingest::{sample_households, IngestError, SynthConfig, SAMPLER_ALGORITHM};
use crate::mdav::{anonymize, MdavError};
use crate::metrics::mean_sd;
use crate::panel::{ProfilePanel, TICKS_PER_DAY};
use crate::seed::{derive_seed, SEED_RULE};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("window {label} ({day}) is not covered by the panel")]
    WindowOutOfRange { label: u8, day: NaiveDate },
    #[error("forecast and actual lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no points left after excluding zero denominators")]
    EmptyAfterExclusion,
    #[error("nothing to aggregate")]
    EmptyAggregate,
    #[error(transparent)]
    Mdav(#[from] MdavError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> BacktestError {
    BacktestError::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// An anonymization level: the untouched households or MDAV at `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Raw,
    K(usize),
}

impl Level {
    fn code(&self) -> u64 {
        match self {
            Level::Raw => 0,
            Level::K(k) => *k as u64,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Raw => f.write_str("raw"),
            Level::K(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for Level {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Level::Raw => s.serialize_str("raw"),
            Level::K(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct LevelVisitor;
        impl Visitor<'_> for LevelVisitor {
            type Value = Level;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an integer k or the string \"raw\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Level, E> {
                Ok(Level::K(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Level, E> {
                if v < 0 {
                    return Err(E::custom("k must be positive"));
                }
                Ok(Level::K(v as usize))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Level, E> {
                match v {
                    "raw" => Ok(Level::Raw),
                    other => other
                        .parse()
                        .map(Level::K)
                        .map_err(|_| E::custom(format!("expected \"raw\" or an integer, got \"{other}\""))),
                }
            }
        }
        d.deserialize_any(LevelVisitor)
    }
}

/// The fifteen privacy levels of the reference experiment.
pub fn default_k_ladder() -> Vec<usize> {
    vec![2, 3, 5, 10, 15, 20, 25, 30, 40, 50, 70, 100, 200, 500, 1000]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub label: u8,
    /// Last day of training data (inclusive).
    pub train_end: NaiveDate,
    pub forecast_day: NaiveDate,
}

impl Window {
    pub fn new(label: u8, train_end: NaiveDate) -> Self {
        Self {
            label,
            train_end,
            forecast_day: train_end.succ_opt().expect("date in range"),
        }
    }
}

/// Late-summer to year-end windows: train through Aug 28, Sep 28, Oct 29,
/// Nov 29 and Dec 30, forecasting the following day.
pub fn default_windows(year: i32) -> Vec<Window> {
    [(8, 28), (9, 28), (10, 29), (11, 29), (12, 30)]
        .iter()
        .enumerate()
        .map(|(i, &(m, d))| Window::new(i as u8 + 1, NaiveDate::from_ymd_opt(year, m, d).expect("valid date")))
        .collect()
}

/// Sum of household forecasts at each tick.
pub fn aggregate_raw(forecasts: &[Vec<f64>]) -> Result<Vec<f64>, BacktestError> {
    let first = forecasts.first().ok_or(BacktestError::EmptyAggregate)?;
    let mut out = vec![0.0; first.len()];
    for f in forecasts {
        if f.len() != out.len() {
            return Err(BacktestError::LengthMismatch(f.len(), out.len()));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    Ok(out)
}

/// Group forecasts scaled by group size and summed at each tick.
pub fn aggregate_anonymized(group_forecasts: &[Vec<f64>], sizes: &[usize]) -> Result<Vec<f64>, BacktestError> {
    if group_forecasts.len() != sizes.len() {
        return Err(BacktestError::LengthMismatch(group_forecasts.len(), sizes.len()));
    }
    let first = group_forecasts.first().ok_or(BacktestError::EmptyAggregate)?;
    let mut out = vec![0.0; first.len()];
    for (f, &size) in group_forecasts.iter().zip(sizes) {
        if f.len() != out.len() {
            return Err(BacktestError::LengthMismatch(f.len(), out.len()));
        }
        let w = size as f64;
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mape: f64,
    pub mse: f64,
    pub rmse: f64,
    pub smape: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["mae", "mape", "mse", "rmse", "smape"];

    pub fn values(&self) -> [f64; 5] {
        [self.mae, self.mape, self.mse, self.rmse, self.smape]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Points left out of MAPE because the actual value was zero.
    pub mape_excluded: usize,
    /// Points left out of SMAPE because actual and forecast were both zero.
    pub smape_excluded: usize,
}

/// MAE, MAPE, MSE, RMSE and SMAPE; the percentage errors are fractions.
pub fn score(actual: &[f64], predicted: &[f64]) -> Result<Score, BacktestError> {
    if actual.len() != predicted.len() {
        return Err(BacktestError::LengthMismatch(actual.len(), predicted.len()));
    }
    if actual.is_empty() {
        return Err(BacktestError::EmptyAfterExclusion);
    }
    let n = actual.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    let (mut ape, mut ape_n) = (0.0, 0usize);
    let (mut sape, mut sape_n) = (0.0, 0usize);
    for (&y, &p) in actual.iter().zip(predicted) {
        let e = (y - p).abs();
        abs += e;
        sq += e * e;
        if y != 0.0 {
            ape += e / y.abs();
            ape_n += 1;
        }
        let denom = (y.abs() + p.abs()) / 2.0;
        if denom > 0.0 {
            sape += e / denom;
            sape_n += 1;
        } else {
            // Both zero: a perfect point.
        }
    }
    if ape_n == 0 || sape_n == 0 {
        return Err(BacktestError::EmptyAfterExclusion);
    }
    let mse = sq / n;
    Ok(Score {
        metrics: Metrics {
            mae: abs / n,
            mape: ape / ape_n as f64,
            mse,
            rmse: mse.sqrt(),
            smape: sape / sape_n as f64,
        },
        mape_excluded: actual.len() - ape_n,
        smape_excluded: actual.len() - sape_n,
    })
}

/// Either the keyword `"default"` or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrDefault<T> {
    Keyword(DefaultKeyword),
    Explicit(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefaultKeyword {
    #[serde(rename = "default")]
    Default,
}

impl<T> Default for OrDefault<T> {
    fn default() -> Self {
        OrDefault::Keyword(DefaultKeyword::Default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default)]
    pub label: Option<u8>,
    pub train_end: NaiveDate,
}

/// Where the panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputRef {
    /// Wide panel CSV, relative paths resolved against the config file.
    Path(String),
    Synthetic {
        synthetic: SynthConfig,
    },
}

fn default_repeats() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub input: InputRef,
    #[serde(default)]
    pub k_ladder: OrDefault<Vec<Level>>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub windows: OrDefault<Vec<WindowSpec>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub seed: u64,
    /// Households drawn per repeat; all of them when absent.
    #[serde(default)]
    pub sample_size: Option<usize>,
}

impl ExperimentConfig {
    /// Levels to run: `raw` first, then the ladder in order, duplicates
    /// removed.
    pub fn levels(&self) -> Vec<Level> {
        let ladder: Vec<Level> = match &self.k_ladder {
            OrDefault::Keyword(_) => default_k_ladder().into_iter().map(Level::K).collect(),
            OrDefault::Explicit(v) => v.clone(),
        };
        let mut out = vec![Level::Raw];
        for l in ladder {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    pub fn windows_for(&self, year: i32) -> Vec<Window> {
        match &self.windows {
            OrDefault::Keyword(_) => default_windows(year),
            OrDefault::Explicit(specs) => specs
                .iter()
                .enumerate()
                .map(|(i, w)| Window::new(w.label.unwrap_or(i as u8 + 1), w.train_end))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        if let OrDefault::Explicit(levels) = &self.k_ladder {
            for (i, l) in levels.iter().enumerate() {
                if let Level::K(k) = l {
                    if *k < 2 {
                        return Err(config_error(format!(".k_ladder[{i}]"), "k must be at least 2"));
                    }
                }
            }
        }
        if self.models.is_empty() {
            return Err(config_error(".models", "at least one model is required"));
        }
        for (i, m) in self.models.iter().enumerate() {
            m.validate()
                .map_err(|e| config_error(format!(".models[{i}]"), e.to_string()))?;
        }
        let mut labels: Vec<String> = self.models.iter().map(ModelSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_error(".models", "model labels must be unique; set `name`"));
        }
        if let OrDefault::Explicit(w) = &self.windows {
            if w.is_empty() {
                return Err(config_error(".windows", "at least one window is required"));
            }
        }
        if self.repeats == 0 {
            return Err(config_error(".repeats", "repeats must be at least 1"));
        }
        if self.sample_size == Some(0) {
            return Err(config_error(".sample_size", "sample size must be at least 1"));
        }
        Ok(())
    }
}

/// Parses and validates a config document, reporting the JSON path of the
/// first offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, BacktestError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner().to_string();
        let mut path = e.path().to_string();
        if path == "." {
            path.clear();
        }
        let path = match inner.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            Some(field) => format!("{path}.{field}"),
            None if path.is_empty() => ".".to_string(),
            None => format!(".{}", path.trim_start_matches('.')),
        };
        config_error(path, inner)
    })?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub k: Level,
    pub model: String,
    pub window: u8,
    pub repeat: usize,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub k: Level,
    pub model: String,
    pub window: u8,
    pub repeat: usize,
    pub series: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub k: Level,
    pub model: String,
    pub count: usize,
    pub mean: Metrics,
    pub sd: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub levels: Vec<Level>,
    pub models: Vec<String>,
    pub windows: Vec<Window>,
    pub repeats: usize,
    pub seed: u64,
    pub seed_rule: String,
    pub sampler: String,
    /// Group forecasts are weighted by actual group size, not nominal `k`.
    pub aggregation: String,
    pub records: Vec<Record>,
    pub failures: Vec<Failure>,
    pub summaries: Vec<Summary>,
}

impl ExperimentReport {
    pub fn record(&self, k: Level, model: &str, window: u8, repeat: usize) -> Option<&Record> {
        self.records
            .iter()
            .find(|r| r.k == k && r.model == model && r.window == window && r.repeat == repeat)
    }

    pub fn summary(&self, k: Level, model: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.k == k && s.model == model)
    }

    /// Long format: `k,model,window,repeat,metric,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "model", "window", "repeat", "metric", "value"])?;
        for r in &self.records {
            for (name, v) in Metrics::NAMES.iter().zip(r.score.metrics.values()) {
                w.write_record([
                    r.k.to_string(),
                    r.model.clone(),
                    r.window.to_string(),
                    r.repeat.to_string(),
                    name.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct WindowTicks {
    window: Window,
    /// Training covers ticks `[0, origin)`; the forecast day starts at `origin`.
    origin: usize,
}

fn locate_windows(panel: &ProfilePanel, windows: &[Window]) -> Result<Vec<WindowTicks>, BacktestError> {
    windows
        .iter()
        .map(|w| {
            let day_start = Utc.from_utc_datetime(&w.forecast_day.and_hms_opt(0, 0, 0).expect("midnight"));
            let origin = panel.index().position(day_start);
            match origin {
                Some(o) if o > 0 && o + TICKS_PER_DAY <= panel.n_ticks() => Ok(WindowTicks { window: *w, origin: o }),
                _ => Err(BacktestError::WindowOutOfRange {
                    label: w.label,
                    day: w.forecast_day,
                }),
            }
        })
        .collect()
}

enum CellOutcome {
    Scored(Score),
    Failed { series: Option<String>, error: String },
}

#[allow(clippy::too_many_arguments)]
fn forecast_cell(
    names: &[String],
    series: &[&[f64]],
    weights: &[usize],
    panel: &ProfilePanel,
    spec: &ModelSpec,
    origin: usize,
    actual: &[f64],
    seed_path: [u64; 4],
    root: u64,
) -> CellOutcome {
    let calendar = panel.index();
    let forecasts: Vec<Result<Vec<f64>, ForecastError>> = series
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let history = &s[..origin];
            let seed = derive_seed(
                root,
                &[seed_path[0], seed_path[1], seed_path[2], seed_path[3], i as u64],
            );
            let model = fit_model(spec, history, calendar, seed)?;
            predict_recursive(&model, history, calendar, TICKS_PER_DAY)
        })
        .collect();
    let mut ok = Vec::with_capacity(forecasts.len());
    for (i, f) in forecasts.into_iter().enumerate() {
        match f {
            Ok(f) => ok.push(f),
            Err(e) => {
                return CellOutcome::Failed {
                    series: Some(names[i].clone()),
                    error: e.to_string(),
                }
            }
        }
    }
    let aggregate = match aggregate_anonymized(&ok, weights) {
        Ok(a) => a,
        Err(e) => {
            return CellOutcome::Failed {
                series: None,
                error: e.to_string(),
            }
        }
    };
    match score(actual, &aggregate) {
        Ok(s) => CellOutcome::Scored(s),
        Err(e) => CellOutcome::Failed {
            series: None,
            error: e.to_string(),
        },
    }
}

/// Runs the full grid of repeats, levels, windows and models on `panel`.
pub fn run_experiment(config: &ExperimentConfig, panel: &ProfilePanel) -> Result<ExperimentReport, BacktestError> {
    config.validate()?;
    let levels = config.levels();
    let windows = config.windows_for(panel.index().start().year());
    let located = locate_windows(panel, &windows)?;
    let labels: Vec<String> = config.models.iter().map(ModelSpec::label).collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for repeat in 0..config.repeats {
        let repeat_seed = derive_seed(config.seed, &[repeat as u64]);
        let sample = match config.sample_size {
            Some(n) => sample_households(panel, n, repeat_seed)?,
            None => panel.sorted_by_id(),
        };
        let actuals: Vec<Vec<f64>> = located
            .iter()
            .map(|w| {
                let mut sum = vec![0.0; TICKS_PER_DAY];
                for row in sample.rows() {
                    for (s, v) in sum.iter_mut().zip(&row[w.origin..w.origin + TICKS_PER_DAY]) {
                        *s += v;
                    }
                }
                sum
            })
            .collect();

        for &level in &levels {
            let (names, rows, weights): (Vec<String>, Vec<Vec<f64>>, Vec<usize>) = match level {
                Level::Raw => (
                    sample.ids().to_vec(),
                    sample.rows().map(<[f64]>::to_vec).collect(),
                    vec![1; sample.n_series()],
                ),
                Level::K(k) => {
                    let anon = anonymize(&sample, k)?;
                    (
                        (0..anon.n_groups()).map(|g| format!("group_{g}")).collect(),
                        anon.centroids().map(<[f64]>::to_vec).collect(),
                        anon.group_sizes(),
                    )
                }
            };
            let series: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let cells: Vec<(usize, usize)> = (0..located.len())
                .flat_map(|w| (0..config.models.len()).map(move |m| (w, m)))
                .collect();
            let outcomes: Vec<CellOutcome> = cells
                .par_iter()
                .map(|&(w, m)| {
                    forecast_cell(
                        &names,
                        &series,
                        &weights,
                        &sample,
                        &config.models[m],
                        located[w].origin,
                        &actuals[w],
                        [repeat as u64, level.code(), w as u64, m as u64],
                        config.seed,
                    )
                })
                .collect();
            for (&(w, m), outcome) in cells.iter().zip(outcomes) {
                let window = located[w].window.label;
                match outcome {
                    CellOutcome::Scored(score) => records.push(Record {
                        k: level,
                        model: labels[m].clone(),
                        window,
                        repeat,
                        score,
                    }),
                    CellOutcome::Failed { series, error } => {
                        log::warn!(
                            "level {level}, model {}, window {window}, repeat {repeat} failed: {error}",
                            labels[m]
                        );
                        failures.push(Failure {
                            k: level,
                            model: labels[m].clone(),
                            window,
                            repeat,
                            series,
                            error,
                        })
                    }
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for &level in &levels {
        for label in &labels {
            let rows: Vec<[f64; 5]> = records
                .iter()
                .filter(|r| r.k == level && &r.model == label)
                .map(|r| r.score.metrics.values())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let stat = |i: usize| mean_sd(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
            let stats: Vec<(f64, f64)> = (0..5).map(stat).collect();
            let pick = |f: fn(&(f64, f64)) -> f64| Metrics {
                mae: f(&stats[0]),
                mape: f(&stats[1]),
                mse: f(&stats[2]),
                rmse: f(&stats[3]),
                smape: f(&stats[4]),
            };
            summaries.push(Summary {
                k: level,
                model: label.clone(),
                count: rows.len(),
                mean: pick(|s| s.0),
                sd: pick(|s| s.1),
            });
        }
    }

    Ok(ExperimentReport {
        levels,
        models: labels,
        windows: located.iter().map(|w| w.window).collect(),
        repeats: config.repeats,
        seed: config.seed,
        seed_rule: SEED_RULE.to_string(),
        sampler: SAMPLER_ALGORITHM.to_string(),
        aggregation: "size-weighted".to_string(),
        records,
        failures,
        summaries,
    })
}
