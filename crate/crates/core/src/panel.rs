//! Aligned panels of half-hourly load profiles.
//!
//! A [`ProfilePanel`] holds `N` series over a shared regular [`TimeIndex`],
//! stored row-major so that each series is one contiguous slice.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;

/// Default sampling step: one half hour.
pub const HALF_HOUR_SECS: i64 = 1800;

/// Ticks per day at half-hour resolution.
pub const TICKS_PER_DAY: usize = 48;

#[derive(Debug, Error, PartialEq)]
pub enum PanelError {
    #[error("no readings supplied")]
    EmptyInput,
    #[error("duplicate reading for series `{id}` at {timestamp}")]
    DuplicateReading { id: String, timestamp: DateTime<Utc> },
    #[error("timestamp {0} is not on the {1}s grid")]
    OffGrid(DateTime<Utc>, i64),
    #[error("series `{id}` has no reading at {timestamp}")]
    MissingReading { id: String, timestamp: DateTime<Utc> },
    #[error("window is empty")]
    EmptyWindow,
    #[error("window bound {0} lies outside the panel index")]
    OutOfRange(DateTime<Utc>),
    #[error("window bounds are inverted")]
    InvertedWindow,
    #[error("duplicate series id `{0}`")]
    DuplicateId(String),
    #[error("panel shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("step must be positive and length at least 1")]
    InvalidIndex,
}

/// Regular time axis: `tick(i) = start + i * step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeIndex {
    start: DateTime<Utc>,
    step: Duration,
    len: usize,
}

impl TimeIndex {
    pub fn new(start: DateTime<Utc>, step: Duration, len: usize) -> Result<Self, PanelError> {
        if step <= Duration::zero() || len == 0 {
            return Err(PanelError::InvalidIndex);
        }
        Ok(Self { start, step, len })
    }

    pub fn half_hourly(start: DateTime<Utc>, len: usize) -> Result<Self, PanelError> {
        Self::new(start, Duration::seconds(HALF_HOUR_SECS), len)
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn step(&self) -> Duration {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Timestamp of tick `i`. Defined for any `i`, including ticks past the
    /// end of the index, so forecasters can extrapolate the calendar.
    pub fn tick(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::milliseconds(self.step.num_milliseconds() * i as i64)
    }

    /// One past the last tick.
    pub fn end(&self) -> DateTime<Utc> {
        self.tick(self.len)
    }

    /// Position of `t` if it lies on the grid (possibly beyond the end).
    pub fn position(&self, t: DateTime<Utc>) -> Option<usize> {
        let offset = (t - self.start).num_seconds();
        let step = self.step.num_seconds();
        if offset < 0 || offset % step != 0 {
            return None;
        }
        Some((offset / step) as usize)
    }

    fn with_range(&self, from: usize, to: usize) -> Self {
        Self {
            start: self.tick(from),
            step: self.step,
            len: to - from,
        }
    }
}

/// Anything that exposes an `N x T` matrix by rows.
pub trait RowSource {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
}

/// `N` aligned series on a shared time index.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePanel {
    ids: Vec<String>,
    index: TimeIndex,
    values: Vec<f64>,
}

impl ProfilePanel {
    /// Builds a panel from row-major values. Ids must be unique; their order
    /// is kept as given.
    pub fn new(ids: Vec<String>, index: TimeIndex, values: Vec<f64>) -> Result<Self, PanelError> {
        let expected = ids.len() * index.len();
        if values.len() != expected {
            return Err(PanelError::Shape {
                expected,
                got: values.len(),
            });
        }
        if ids.is_empty() {
            return Err(PanelError::EmptyInput);
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(PanelError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, index, values })
    }

    pub fn from_rows(ids: Vec<String>, index: TimeIndex, rows: &[Vec<f64>]) -> Result<Self, PanelError> {
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(ids, index, values)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index(&self) -> &TimeIndex {
        &self.index
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_series(&self) -> usize {
        self.ids.len()
    }

    pub fn n_ticks(&self) -> usize {
        self.index.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let t = self.n_ticks();
        &self.values[i * t..(i + 1) * t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_ticks())
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    /// Same rows re-ordered so ids are ascending.
    pub fn sorted_by_id(&self) -> Self {
        let mut order: Vec<usize> = (0..self.n_series()).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        self.select_rows(&order)
    }

    pub(crate) fn select_rows(&self, rows: &[usize]) -> Self {
        let ids = rows.iter().map(|&i| self.ids[i].clone()).collect();
        let mut values = Vec::with_capacity(rows.len() * self.n_ticks());
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self {
            ids,
            index: self.index,
            values,
        }
    }

    /// Flattens the panel back into `(id, timestamp, value)` triples.
    pub fn to_readings(&self) -> Vec<Reading> {
        let mut out = Vec::with_capacity(self.values.len());
        for (i, id) in self.ids.iter().enumerate() {
            for (j, &v) in self.row(i).iter().enumerate() {
                out.push(Reading {
                    id: id.clone(),
                    timestamp: self.index.tick(j),
                    kwh: v,
                });
            }
        }
        out
    }

    /// Per-column sum over all series.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_ticks()];
        for row in self.rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

impl RowSource for ProfilePanel {
    fn n_rows(&self) -> usize {
        self.n_series()
    }

    fn n_cols(&self) -> usize {
        self.n_ticks()
    }

    fn row(&self, i: usize) -> &[f64] {
        ProfilePanel::row(self, i)
    }
}

/// One meter reading in long format.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub id: String,
    pub timestamp: DateTime<Utc>,
    pub kwh: f64,
}

/// Series id to sparse `(tick position -> value)` cells on a common grid.
pub(crate) struct GridCells {
    pub index: TimeIndex,
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

/// Places readings onto the union half-hour grid, rejecting duplicates and
/// off-grid timestamps. Grid alignment is relative to the Unix epoch.
pub(crate) fn grid_cells(readings: &[Reading]) -> Result<GridCells, PanelError> {
    let step = HALF_HOUR_SECS;
    let first = readings.first().ok_or(PanelError::EmptyInput)?;
    let mut lo = first.timestamp;
    let mut hi = first.timestamp;
    for r in readings {
        if r.timestamp.timestamp() % step != 0 || r.timestamp.timestamp_subsec_nanos() != 0 {
            return Err(PanelError::OffGrid(r.timestamp, step));
        }
        lo = lo.min(r.timestamp);
        hi = hi.max(r.timestamp);
    }
    let len = ((hi - lo).num_seconds() / step) as usize + 1;
    let index = TimeIndex::half_hourly(lo, len)?;
    let mut series: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in readings {
        let cells = series.entry(r.id.clone()).or_insert_with(|| vec![None; len]);
        let j = index.position(r.timestamp).expect("timestamp on grid");
        if cells[j].is_some() {
            return Err(PanelError::DuplicateReading {
                id: r.id.clone(),
                timestamp: r.timestamp,
            });
        }
        cells[j] = Some(r.kwh);
    }
    Ok(GridCells { index, series })
}

/// Builds a dense panel from long-format readings. Ids come out sorted and
/// every series must have a reading at every tick of the union grid; use
/// [`crate::ingest::regularize`] to fill or drop incomplete series.
pub fn build_panel(readings: &[Reading]) -> Result<ProfilePanel, PanelError> {
    let cells = grid_cells(readings)?;
    let t = cells.index.len();
    let mut ids = Vec::with_capacity(cells.series.len());
    let mut values = Vec::with_capacity(cells.series.len() * t);
    for (id, row) in cells.series {
        for (j, v) in row.iter().enumerate() {
            match v {
                Some(v) => values.push(*v),
                None => {
                    return Err(PanelError::MissingReading {
                        id,
                        timestamp: cells.index.tick(j),
                    })
                }
            }
        }
        ids.push(id);
    }
    ProfilePanel::new(ids, cells.index, values)
}

/// Column means over all series.
pub fn global_average_profile(panel: &ProfilePanel) -> Vec<f64> {
    let n = panel.n_series() as f64;
    panel.column_sums().into_iter().map(|s| s / n).collect()
}

/// Restricts the panel to ticks in `[from, to)`.
pub fn slice_window(panel: &ProfilePanel, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<ProfilePanel, PanelError> {
    if from == to {
        return Err(PanelError::EmptyWindow);
    }
    if from > to {
        return Err(PanelError::InvertedWindow);
    }
    let index = panel.index();
    let a = index
        .position(from)
        .filter(|&a| a < index.len())
        .ok_or(PanelError::OutOfRange(from))?;
    let b = index
        .position(to)
        .filter(|&b| b <= index.len())
        .ok_or(PanelError::OutOfRange(to))?;
    Ok(slice_ticks(panel, a, b))
}

/// Column range `[from, to)` by position.
pub fn slice_ticks(panel: &ProfilePanel, from: usize, to: usize) -> ProfilePanel {
    assert!(from < to && to <= panel.n_ticks(), "tick range out of bounds");
    let mut values = Vec::with_capacity(panel.n_series() * (to - from));
    for row in panel.rows() {
        values.extend_from_slice(&row[from..to]);
    }
    ProfilePanel {
        ids: panel.ids.clone(),
        index: panel.index.with_range(from, to),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(i: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2013, 1, 1, 0, 0, 0).unwrap() + Duration::seconds(HALF_HOUR_SECS * i)
    }

    fn reading(id: &str, i: i64, kwh: f64) -> Reading {
        Reading {
            id: id.into(),
            timestamp: t(i),
            kwh,
        }
    }

    fn panel_2x4() -> ProfilePanel {
        let index = TimeIndex::half_hourly(t(0), 4).unwrap();
        ProfilePanel::new(
            vec!["a".into(), "b".into()],
            index,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap()
    }

    #[test]
    fn build_empty_is_error() {
        assert_eq!(build_panel(&[]), Err(PanelError::EmptyInput));
    }

    #[test]
    fn build_two_by_two() {
        let p = build_panel(&[
            reading("b", 0, 3.0),
            reading("a", 1, 2.0),
            reading("a", 0, 1.0),
            reading("b", 1, 4.0),
        ])
        .unwrap();
        assert_eq!(p.ids(), ["a", "b"]);
        assert_eq!(p.row(0), [1.0, 2.0]);
        assert_eq!(p.row(1), [3.0, 4.0]);
        assert_eq!(p.index().tick(1), t(1));
    }

    #[test]
    fn build_duplicate_is_error() {
        let err = build_panel(&[reading("a", 0, 1.0), reading("a", 0, 2.0)]).unwrap_err();
        assert!(matches!(err, PanelError::DuplicateReading { .. }));
    }

    #[test]
    fn build_off_grid_is_error() {
        let mut r = reading("a", 0, 1.0);
        r.timestamp += Duration::minutes(7);
        assert!(matches!(build_panel(&[r]), Err(PanelError::OffGrid(..))));
    }

    #[test]
    fn build_missing_cell_is_error() {
        let err = build_panel(&[reading("a", 0, 1.0), reading("a", 1, 1.0), reading("b", 0, 1.0)]).unwrap_err();
        assert!(matches!(err, PanelError::MissingReading { .. }));
    }

    #[test]
    fn average_profile() {
        let index = TimeIndex::half_hourly(t(0), 2).unwrap();
        let p = ProfilePanel::new(vec!["a".into(), "b".into()], index, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_average_profile(&p), [2.0, 3.0]);

        let single = ProfilePanel::new(vec!["a".into()], index, vec![0.3, 0.7]).unwrap();
        assert_eq!(global_average_profile(&single), [0.3, 0.7]);

        let same = ProfilePanel::new(vec!["a".into(), "b".into(), "c".into()], index, vec![0.25; 6]).unwrap();
        assert_eq!(global_average_profile(&same), [0.25, 0.25]);
    }

    #[test]
    fn slice_full_and_middle() {
        let p = panel_2x4();
        assert_eq!(slice_window(&p, t(0), t(4)).unwrap(), p);
        let mid = slice_window(&p, t(1), t(3)).unwrap();
        assert_eq!(mid.row(0), [2.0, 3.0]);
        assert_eq!(mid.row(1), [6.0, 7.0]);
        assert_eq!(mid.index().start(), t(1));
        assert_eq!(mid.ids(), p.ids());
    }

    #[test]
    fn slice_errors() {
        let p = panel_2x4();
        assert_eq!(slice_window(&p, t(2), t(2)), Err(PanelError::EmptyWindow));
        assert_eq!(slice_window(&p, t(3), t(1)), Err(PanelError::InvertedWindow));
        assert!(matches!(slice_window(&p, t(0), t(5)), Err(PanelError::OutOfRange(_))));
        assert!(matches!(slice_window(&p, t(-1), t(2)), Err(PanelError::OutOfRange(_))));
    }

    #[test]
    fn slices_compose() {
        let p = panel_2x4();
        let once = slice_window(&p, t(1), t(3)).unwrap();
        let twice = slice_window(&slice_window(&p, t(0), t(3)).unwrap(), t(1), t(4).min(t(3))).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let index = TimeIndex::half_hourly(t(0), 1).unwrap();
        assert!(matches!(
            ProfilePanel::new(vec!["a".into(), "a".into()], index, vec![1.0, 2.0]),
            Err(PanelError::DuplicateId(_))
        ));
    }
}
