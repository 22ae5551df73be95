//! Lag features and seasonal differencing for the lag regressor.
//!
//! Features are built from the level series: lags 1, 48 and 336, the
//! expanding mean and the 24-tick rolling mean of everything strictly before
//! the row's tick, and a one-hot day of week. The target is the level
//! differenced at lag 48 and then at lag 336.

use chrono::Datelike;

use super::ForecastError;
use crate::panel::TimeIndex;

pub const LAGS: [usize; 3] = [1, 48, 336];
pub const ROLLING_WINDOW: usize = 24;
pub const DIFF_LAGS: [usize; 2] = [48, 336];

/// Largest lag; rows start at this tick.
pub const MAX_LAG: usize = 336;
/// First tick with a fully differenced target.
pub const DIFF_SPAN: usize = DIFF_LAGS[0] + DIFF_LAGS[1];

pub const FEATURE_NAMES: [&str; 12] = [
    "lag_1",
    "lag_48",
    "lag_336",
    "expanding_mean",
    "rolling_mean_24",
    "dow_mon",
    "dow_tue",
    "dow_wed",
    "dow_thu",
    "dow_fri",
    "dow_sat",
    "dow_sun",
];

/// Design matrix with one row per tick and an optional target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    names: Vec<String>,
    data: Vec<f64>,
    ticks: Vec<usize>,
    targets: Vec<Option<f64>>,
}

impl FeatureMatrix {
    /// Generic constructor; `rows` must all have `names.len()` entries.
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>, targets: Vec<Option<f64>>) -> Result<Self, ForecastError> {
        if rows.len() != targets.len() || rows.iter().any(|r| r.len() != names.len()) {
            return Err(ForecastError::Shape);
        }
        let ticks = (0..rows.len()).collect();
        Ok(Self {
            names,
            data: rows.into_iter().flatten().collect(),
            ticks,
            targets,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Tick (position in the source series) of row `i`.
    pub fn tick(&self, i: usize) -> usize {
        self.ticks[i]
    }

    pub fn target(&self, i: usize) -> Option<f64> {
        self.targets[i]
    }

    /// Row index of tick `t`, if present.
    pub fn row_at_tick(&self, t: usize) -> Option<usize> {
        self.ticks.binary_search(&t).ok()
    }

    pub fn feature(&self, i: usize, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|c| self.row(i)[c])
    }
}

/// Running sums needed to build feature rows incrementally.
#[derive(Debug, Clone)]
pub(crate) struct FeatureState {
    prefix_sum: f64,
    consumed: usize,
}

impl FeatureState {
    pub fn new() -> Self {
        Self {
            prefix_sum: 0.0,
            consumed: 0,
        }
    }

    /// Writes the feature row for tick `t` into `out`, using `series[..t]`.
    pub fn row(&mut self, series: &[f64], t: usize, calendar: &TimeIndex, out: &mut Vec<f64>) {
        debug_assert!(t >= MAX_LAG && t <= series.len());
        while self.consumed < t {
            self.prefix_sum += series[self.consumed];
            self.consumed += 1;
        }
        out.clear();
        for lag in LAGS {
            out.push(series[t - lag]);
        }
        out.push(self.prefix_sum / t as f64);
        out.push(series[t - ROLLING_WINDOW..t].iter().sum::<f64>() / ROLLING_WINDOW as f64);
        let dow = calendar.tick(t).weekday().num_days_from_monday() as usize;
        out.extend((0..7).map(|d| if d == dow { 1.0 } else { 0.0 }));
    }
}

/// Lag-48 then lag-336 differences of a level series.
pub fn difference(series: &[f64]) -> Vec<Option<f64>> {
    let [a, b] = DIFF_LAGS;
    let d1: Vec<Option<f64>> = (0..series.len())
        .map(|t| (t >= a).then(|| series[t] - series[t - a]))
        .collect();
    (0..series.len())
        .map(|t| match (t >= b).then(|| (d1[t], d1[t - b])) {
            Some((Some(x), Some(y))) => Some(x - y),
            _ => None,
        })
        .collect()
}

/// Level at tick `t` from its twice-differenced value and the levels before
/// it: undo the lag-336 difference, then the lag-48 one.
pub fn undifference(diffed: f64, history: &[f64], t: usize) -> f64 {
    let [a, b] = DIFF_LAGS;
    let d1_prev = history[t - b] - history[t - b - a];
    let d1 = diffed + d1_prev;
    d1 + history[t - a]
}

/// Feature rows for every tick from 336 on. Targets are defined from tick
/// 384, where both differences exist.
pub fn make_features(series: &[f64], calendar: &TimeIndex) -> Result<FeatureMatrix, ForecastError> {
    if series.len() <= MAX_LAG {
        return Err(ForecastError::TooShort {
            needed: MAX_LAG + 1,
            got: series.len(),
        });
    }
    let diffed = difference(series);
    let mut state = FeatureState::new();
    let mut buf = Vec::with_capacity(FEATURE_NAMES.len());
    let rows = series.len() - MAX_LAG;
    let mut data = Vec::with_capacity(rows * FEATURE_NAMES.len());
    let mut ticks = Vec::with_capacity(rows);
    let mut targets = Vec::with_capacity(rows);
    for t in MAX_LAG..series.len() {
        state.row(series, t, calendar, &mut buf);
        data.extend_from_slice(&buf);
        ticks.push(t);
    }
    targets.extend_from_slice(&diffed[MAX_LAG..]);
    Ok(FeatureMatrix {
        names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        data,
        ticks,
        targets,
    })
}
