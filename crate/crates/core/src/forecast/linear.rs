//! Ridge regression on standardized lag features.

use super::features::{undifference, FeatureMatrix, FeatureState, DIFF_SPAN};
use super::ForecastError;
use crate::panel::TimeIndex;

/// Fitted ridge model. Features are standardized with the training mean and
/// (population) standard deviation; zero-spread columns keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    target_mean: f64,
}

impl LinearModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.target_mean
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }

    /// Weights on the standardized features.
    pub fn standardized_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Intercept and per-feature weights in the original feature units.
    pub fn coefficients(&self) -> (f64, Vec<f64>) {
        let w: Vec<f64> = self.weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect();
        let intercept = self.target_mean - w.iter().zip(&self.mean).map(|(w, m)| w * m).sum::<f64>();
        (intercept, w)
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }
}

/// In-place Cholesky solve of a symmetric positive definite system.
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>, ForecastError> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= tol {
            return Err(ForecastError::Singular);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(b)
}

/// Closed-form ridge regression over the rows of `features` that have a
/// target. The intercept is not penalized.
pub fn fit_ridge(features: &FeatureMatrix, l2: f64) -> Result<LinearModel, ForecastError> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(ForecastError::InvalidSpec(format!("l2 must be non-negative, got {l2}")));
    }
    let rows: Vec<(usize, f64)> = (0..features.n_rows())
        .filter_map(|i| features.target(i).map(|y| (i, y)))
        .collect();
    if rows.is_empty() {
        return Err(ForecastError::NoTrainingRows);
    }
    let p = features.n_cols();
    let m = rows.len() as f64;
    let mut mean = vec![0.0; p];
    let mut target_mean = 0.0;
    for &(i, y) in &rows {
        for (a, x) in mean.iter_mut().zip(features.row(i)) {
            *a += x;
        }
        target_mean += y;
    }
    mean.iter_mut().for_each(|a| *a /= m);
    target_mean /= m;
    let mut var = vec![0.0; p];
    for &(i, _) in &rows {
        for ((v, x), mu) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / m).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut z = vec![0.0; p];
    for &(i, y) in &rows {
        for (c, x) in features.row(i).iter().enumerate() {
            z[c] = (x - mean[c]) / scale[c];
        }
        let yc = y - target_mean;
        for a in 0..p {
            rhs[a] += z[a] * yc;
            for b in 0..=a {
                gram[a * p + b] += z[a] * z[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[b * p + a] = gram[a * p + b];
        }
        gram[a * p + a] += l2;
    }
    let weights = cholesky_solve(gram, rhs, p)?;
    Ok(LinearModel {
        mean,
        scale,
        weights,
        target_mean,
    })
}

/// Ridge model over the lag features, forecasting the differenced target.
#[derive(Debug, Clone, PartialEq)]
pub struct LagLinearModel {
    pub(crate) linear: LinearModel,
}

/// Fits the lag regressor on a feature matrix from [`super::make_features`].
pub fn fit_lag_linear(features: &FeatureMatrix, l2: f64) -> Result<LagLinearModel, ForecastError> {
    Ok(LagLinearModel {
        linear: fit_ridge(features, l2)?,
    })
}

impl LagLinearModel {
    pub fn linear(&self) -> &LinearModel {
        &self.linear
    }

    /// One step at a time: each prediction is appended to the history and
    /// feeds the next step's lag, rolling and expanding features.
    pub fn predict(&self, history: &[f64], calendar: &TimeIndex, horizon: usize) -> Result<Vec<f64>, ForecastError> {
        if history.len() < DIFF_SPAN {
            return Err(ForecastError::InsufficientHistory {
                needed: DIFF_SPAN,
                got: history.len(),
            });
        }
        let mut series = Vec::with_capacity(history.len() + horizon);
        series.extend_from_slice(history);
        let mut state = FeatureState::new();
        let mut row = Vec::new();
        for _ in 0..horizon {
            let t = series.len();
            state.row(&series, t, calendar, &mut row);
            let diffed = self.linear.predict_row(&row);
            let level = undifference(diffed, &series, t);
            series.push(level);
        }
        Ok(series.split_off(history.len()))
    }
}
