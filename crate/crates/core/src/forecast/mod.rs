//! Day-ahead forecasters: seasonal naive, additive decomposition, a ridge
//! lag regressor and a small multi-output network.

mod baseline;
mod features;
mod linear;
mod mlp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::TimeIndex;

pub use baseline::{decomposition_forecast, seasonal_naive_forecast};
pub use features::{
    difference, make_features, undifference, FeatureMatrix, DIFF_LAGS, DIFF_SPAN, FEATURE_NAMES, LAGS, MAX_LAG,
    ROLLING_WINDOW,
};
pub use linear::{fit_lag_linear, fit_ridge, LagLinearModel, LinearModel};
pub use mlp::{fit_mlp_series, Mlp, MlpModel, MlpParams, Optimizer, RobustScaler};

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("series too short: need {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("history too short to forecast: need {needed} values, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("normal matrix is singular")]
    Singular,
    #[error("no training rows with a defined target")]
    NoTrainingRows,
    #[error("feature rows and targets disagree in shape")]
    Shape,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("forecast contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SeasonalNaive,
    Decomposition,
    LagLinear,
    Mlp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::SeasonalNaive => "seasonal-naive",
            ModelKind::Decomposition => "decomposition",
            ModelKind::LagLinear => "lag-linear",
            ModelKind::Mlp => "mlp",
        }
    }
}

fn default_period() -> usize {
    48
}

fn default_l2() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Label used in reports; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_period")]
    pub horizon: usize,
    /// Ridge penalty of the lag regressor.
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default)]
    pub mlp: MlpParams,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            name: None,
            period: default_period(),
            horizon: default_period(),
            l2: default_l2(),
            mlp: MlpParams::default(),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.period < 2 {
            return Err(ForecastError::InvalidSpec("period must be at least 2".into()));
        }
        if self.horizon < 1 {
            return Err(ForecastError::InvalidSpec("horizon must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(ForecastError::InvalidSpec("l2 must be non-negative".into()));
        }
        if self.kind == ModelKind::Mlp && (self.mlp.input_window == 0 || self.mlp.hidden == 0) {
            return Err(ForecastError::InvalidSpec(
                "mlp input window and width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A model ready to forecast from a history.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    SeasonalNaive { period: usize },
    Decomposition { period: usize },
    LagLinear(LagLinearModel),
    Mlp(MlpModel),
}

/// Fits `spec` on `series`, whose first value sits at `calendar.tick(0)`.
pub fn fit_model(
    spec: &ModelSpec,
    series: &[f64],
    calendar: &TimeIndex,
    seed: u64,
) -> Result<FittedModel, ForecastError> {
    spec.validate()?;
    match spec.kind {
        ModelKind::SeasonalNaive => {
            if series.len() < spec.period {
                return Err(ForecastError::TooShort {
                    needed: spec.period,
                    got: series.len(),
                });
            }
            Ok(FittedModel::SeasonalNaive { period: spec.period })
        }
        ModelKind::Decomposition => {
            if series.len() < 2 * spec.period {
                return Err(ForecastError::TooShort {
                    needed: 2 * spec.period,
                    got: series.len(),
                });
            }
            Ok(FittedModel::Decomposition { period: spec.period })
        }
        ModelKind::LagLinear => {
            let features = make_features(series, calendar)?;
            Ok(FittedModel::LagLinear(fit_lag_linear(&features, spec.l2)?))
        }
        ModelKind::Mlp => Ok(FittedModel::Mlp(fit_mlp(series, spec, seed)?)),
    }
}

/// Fits the network with the spec's window, width and training schedule.
pub fn fit_mlp(series: &[f64], spec: &ModelSpec, seed: u64) -> Result<MlpModel, ForecastError> {
    spec.validate()?;
    fit_mlp_series(series, spec.horizon, &spec.mlp, seed)
}

/// Forecasts `horizon` values following `history`.
pub fn predict_recursive(
    model: &FittedModel,
    history: &[f64],
    calendar: &TimeIndex,
    horizon: usize,
) -> Result<Vec<f64>, ForecastError> {
    let out = match model {
        FittedModel::SeasonalNaive { period } => seasonal_naive_forecast(history, *period, horizon)?,
        FittedModel::Decomposition { period } => decomposition_forecast(history, *period, horizon)?,
        FittedModel::LagLinear(m) => m.predict(history, calendar, horizon)?,
        FittedModel::Mlp(m) => m.predict(history, horizon)?,
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::NonFinite);
    }
    Ok(out)
}
