//! Reading and writing panels: long-format meter CSV (Low Carbon London
//! layout), gap handling, household sampling, the wide panel CSV, and a
//! synthetic load generator.

use std::io::{Read, Write};

use chrono::{DateTime, Duration, NaiveDateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{grid_cells, PanelError, ProfilePanel, Reading, TimeIndex, TICKS_PER_DAY};

/// Identifier of the household sampling procedure, recorded in manifests:
/// ChaCha8 seeded through `seed_from_u64`, partial Fisher-Yates over
/// id-sorted rows with `random_range(i..n)` draws.
pub const SAMPLER_ALGORITHM: &str = "chacha8-partial-fisher-yates/v1";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input has no header row")]
    MissingHeader,
    #[error("header has no `{0}` column")]
    MissingColumn(String),
    #[error("no parseable readings ({skipped} rows skipped)")]
    NoReadings { skipped: usize },
    #[error("every series was dropped by the gap policy")]
    AllSeriesDropped,
    #[error("cannot sample {requested} households from a panel of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(&'static str),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column names of the long-format input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LclColumns {
    pub id: String,
    pub timestamp: String,
    pub energy: String,
}

impl Default for LclColumns {
    fn default() -> Self {
        Self {
            id: "LCLid".into(),
            timestamp: "DateTime".into(),
            energy: "KWH/hh (per half hour)".into(),
        }
    }
}

/// Readings parsed from a long-format file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReadings {
    pub readings: Vec<Reading>,
    /// Rows whose energy or timestamp field could not be parsed.
    pub skipped: usize,
}

/// Accepts `2013-01-01 00:30:00`, `2012-10-12 00:30:00.0000000`,
/// `2013-01-01T00:30:00` and RFC 3339 with an offset. Naive times are UTC.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let s = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    None
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn header_position(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

/// Parses long-format readings. Rows with an unparseable energy value (LCL
/// uses `Null`) or timestamp are skipped and counted.
pub fn parse_lcl_csv<R: Read>(input: R, columns: &LclColumns) -> Result<ParsedReadings, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    let headers = match records.next() {
        Some(h) => h?,
        None => return Err(IngestError::MissingHeader),
    };
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(IngestError::MissingHeader);
    }
    let id_col = header_position(&headers, &columns.id)?;
    let ts_col = header_position(&headers, &columns.timestamp)?;
    let kwh_col = header_position(&headers, &columns.energy)?;

    let mut readings = Vec::new();
    let mut skipped = 0;
    for record in records {
        let record = record?;
        let parsed = (|| {
            let id = record.get(id_col)?.trim();
            let ts = parse_timestamp(record.get(ts_col)?)?;
            let kwh: f64 = record.get(kwh_col)?.trim().parse().ok()?;
            (!id.is_empty() && kwh.is_finite()).then(|| Reading {
                id: id.to_string(),
                timestamp: ts,
                kwh,
            })
        })();
        match parsed {
            Some(r) => readings.push(r),
            None => {
                let line = record.position().map_or(0, |p| p.line());
                log::warn!("skipping unparseable row at line {line}");
                skipped += 1;
            }
        }
    }
    if readings.is_empty() {
        return Err(IngestError::NoReadings { skipped });
    }
    Ok(ParsedReadings { readings, skipped })
}

/// What to do with series that miss ticks on the union grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GapPolicy {
    DropSeries,
    FillZero,
    /// Interior runs of at most `max_gap` missing ticks are filled linearly;
    /// longer runs, or any missing ticks at either end, drop the series.
    LinearInterpolate {
        max_gap: usize,
    },
}

impl Default for GapPolicy {
    fn default() -> Self {
        GapPolicy::LinearInterpolate { max_gap: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularized {
    pub panel: ProfilePanel,
    pub dropped: Vec<String>,
}

fn fill_series(cells: &[Option<f64>], policy: GapPolicy) -> Option<Vec<f64>> {
    match policy {
        GapPolicy::DropSeries => cells.iter().copied().collect(),
        GapPolicy::FillZero => Some(cells.iter().map(|c| c.unwrap_or(0.0)).collect()),
        GapPolicy::LinearInterpolate { max_gap } => {
            let mut out = Vec::with_capacity(cells.len());
            let mut j = 0;
            while j < cells.len() {
                if let Some(v) = cells[j] {
                    out.push(v);
                    j += 1;
                    continue;
                }
                let gap_start = j;
                while j < cells.len() && cells[j].is_none() {
                    j += 1;
                }
                let gap = j - gap_start;
                if gap_start == 0 || j == cells.len() || gap > max_gap {
                    return None;
                }
                let left = out[gap_start - 1];
                let right = cells[j].unwrap();
                let span = (gap + 1) as f64;
                for step in 1..=gap {
                    out.push(left + (right - left) * step as f64 / span);
                }
            }
            Some(out)
        }
    }
}

/// Places readings on the union half-hour grid and resolves gaps per
/// `policy`. Series are processed independently.
pub fn regularize(readings: &[Reading], policy: GapPolicy) -> Result<Regularized, IngestError> {
    let grid = grid_cells(readings)?;
    let series: Vec<(String, Vec<Option<f64>>)> = grid.series.into_iter().collect();
    let filled: Vec<Option<Vec<f64>>> = series.par_iter().map(|(_, cells)| fill_series(cells, policy)).collect();

    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut dropped = Vec::new();
    for ((id, _), row) in series.into_iter().zip(filled) {
        match row {
            Some(row) => {
                ids.push(id);
                values.extend(row);
            }
            None => {
                log::warn!("dropping series `{id}`: gaps not admissible under {policy:?}");
                dropped.push(id);
            }
        }
    }
    if ids.is_empty() {
        return Err(IngestError::AllSeriesDropped);
    }
    let panel = ProfilePanel::new(ids, grid.index, values)?;
    Ok(Regularized { panel, dropped })
}

/// Draws `n` households uniformly without replacement. Output rows are
/// sorted by id. See [`SAMPLER_ALGORITHM`].
pub fn sample_households(panel: &ProfilePanel, n: usize, seed: u64) -> Result<ProfilePanel, IngestError> {
    let available = panel.n_series();
    if n == 0 {
        return Err(IngestError::EmptySample);
    }
    if n > available {
        return Err(IngestError::SampleTooLarge {
            requested: n,
            available,
        });
    }
    let sorted = panel.sorted_by_id();
    let mut order: Vec<usize> = (0..available).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let j = rng.random_range(i..available);
        order.swap(i, j);
    }
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(sorted.select_rows(&chosen))
}

/// Parameters of the synthetic household generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_households: usize,
    pub days: usize,
    pub start: DateTime<Utc>,
    pub base_load: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub noise_sd: f64,
    pub spike_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_households: 100,
            days: 28,
            start: Utc.with_ymd_and_hms(2013, 1, 1, 0, 0, 0).unwrap(),
            base_load: 0.5,
            daily_amplitude: 0.34,
            weekly_amplitude: 0.08,
            noise_sd: 0.065,
            spike_prob: 0.002,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), IngestError> {
        if self.n_households == 0 {
            return Err(IngestError::InvalidConfig("n_households must be at least 1"));
        }
        if self.days == 0 {
            return Err(IngestError::InvalidConfig("days must be at least 1"));
        }
        let nonneg = [
            self.base_load,
            self.daily_amplitude,
            self.weekly_amplitude,
            self.noise_sd,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(IngestError::InvalidConfig(
                "loads, amplitudes and noise must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.spike_prob) {
            return Err(IngestError::InvalidConfig("spike_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Synthetic panel: each household is the base load plus a daily
/// (48-tick) and weekly (336-tick) sinusoid shared by everyone up to a
/// per-household amplitude and phase jitter, Gaussian noise and occasional
/// positive spikes. Values are clipped at zero. The sinusoids are anchored
/// to wall-clock time so the same tick always has the same phase.
pub fn synth_panel(config: &SynthConfig) -> Result<ProfilePanel, IngestError> {
    use std::f64::consts::{PI, TAU};
    config.validate()?;
    let t_len = config.days * TICKS_PER_DAY;
    let index = TimeIndex::half_hourly(config.start, t_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sd).expect("validated noise sd");
    let spike_scale = config.base_load + config.daily_amplitude;
    let width = config.n_households.to_string().len().max(4);

    // Tick phase relative to the Unix epoch, in half-hours.
    let epoch_offset = config.start.timestamp().div_euclid(1800);
    let week_len = (7 * TICKS_PER_DAY) as i64;

    let mut ids = Vec::with_capacity(config.n_households);
    let mut values = Vec::with_capacity(config.n_households * t_len);
    for h in 0..config.n_households {
        ids.push(format!("H{h:0width$}"));
        let daily = config.daily_amplitude * rng.random_range(0.8..1.2);
        let weekly = config.weekly_amplitude * rng.random_range(0.8..1.2);
        let daily_phase = rng.random_range(-PI / 12.0..PI / 12.0);
        let weekly_phase = rng.random_range(-PI / 12.0..PI / 12.0);
        for j in 0..t_len {
            let abs = epoch_offset + j as i64;
            let day_pos = abs.rem_euclid(TICKS_PER_DAY as i64) as f64 / TICKS_PER_DAY as f64;
            let week_pos = abs.rem_euclid(week_len) as f64 / week_len as f64;
            let mut v = config.base_load
                + daily * (TAU * day_pos + daily_phase).sin()
                + weekly * (TAU * week_pos + weekly_phase).sin();
            if config.noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            if config.spike_prob > 0.0 && rng.random_bool(config.spike_prob) {
                let e: f64 = Exp1.sample(&mut rng);
                v += e * spike_scale;
            }
            values.push(v.max(0.0));
        }
    }
    Ok(ProfilePanel::new(ids, index, values)?)
}

/// Writes the wide panel CSV: `timestamp` then one column per series.
pub fn write_wide_csv<W: Write>(panel: &ProfilePanel, out: W) -> Result<(), IngestError> {
    write_wide_columns(panel.ids(), panel.index(), |i, j| panel.row(i)[j], out)
}

pub(crate) fn write_wide_columns<W: Write>(
    names: &[String],
    index: &TimeIndex,
    value: impl Fn(usize, usize) -> f64,
    out: W,
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = Vec::with_capacity(names.len() + 1);
    header.push("timestamp".to_string());
    header.extend(names.iter().cloned());
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(names.len() + 1);
    for j in 0..index.len() {
        record.clear();
        record.push(format_timestamp(index.tick(j)));
        for i in 0..names.len() {
            record.push(value(i, j).to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a wide panel CSV. Rows must be evenly spaced and complete.
pub fn read_wide_csv<R: Read>(input: R) -> Result<ProfilePanel, IngestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(IngestError::MissingHeader),
    };
    if header.get(0).map(str::trim) != Some("timestamp") {
        return Err(IngestError::MissingColumn("timestamp".into()));
    }
    let ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = ids.len();
    let mut stamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |message: String| IngestError::Malformed { line, message };
        if record.len() != n + 1 {
            return Err(malformed(format!("expected {} fields, got {}", n + 1, record.len())));
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| malformed(format!("bad timestamp `{}`", &record[0])))?;
        stamps.push(ts);
        for (i, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(format!("bad value `{field}`")))?;
            columns[i].push(v);
        }
    }
    if stamps.is_empty() {
        return Err(IngestError::NoReadings { skipped: 0 });
    }
    let step = if stamps.len() > 1 {
        stamps[1] - stamps[0]
    } else {
        Duration::seconds(crate::panel::HALF_HOUR_SECS)
    };
    for (j, pair) in stamps.windows(2).enumerate() {
        if pair[1] - pair[0] != step {
            return Err(IngestError::Malformed {
                line: j as u64 + 3,
                message: "timestamps are not evenly spaced".into(),
            });
        }
    }
    let index = TimeIndex::new(stamps[0], step, stamps.len())?;
    let values = columns.into_iter().flatten().collect();
    Ok(ProfilePanel::new(ids, index, values)?)
}

/// Loads readings, drops or fills gaps, and builds the panel in one step.
pub fn load_lcl_panel<R: Read>(
    input: R,
    columns: &LclColumns,
    policy: GapPolicy,
) -> Result<(Regularized, usize), IngestError> {
    let parsed = parse_lcl_csv(input, columns)?;
    let reg = regularize(&parsed.readings, policy)?;
    Ok((reg, parsed.skipped))
}
