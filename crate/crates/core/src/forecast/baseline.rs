//! Seasonal naive and classical additive decomposition forecasters.

use super::ForecastError;

/// Repeats the last observed season: `y(n-1+h) = y(n-1+h - period*ceil(h/period))`.
pub fn seasonal_naive_forecast(series: &[f64], period: usize, horizon: usize) -> Result<Vec<f64>, ForecastError> {
    if period == 0 {
        return Err(ForecastError::InvalidSpec("period must be positive".into()));
    }
    if series.len() < period {
        return Err(ForecastError::TooShort {
            needed: period,
            got: series.len(),
        });
    }
    let last = series.len() - 1;
    Ok((1..=horizon)
        .map(|h| series[last + h - period * h.div_ceil(period)])
        .collect())
}

/// Centred moving average over one period (a 2 x period average when the
/// period is even). `None` where the window does not fit.
fn centered_trend(series: &[f64], period: usize) -> Vec<Option<f64>> {
    let n = series.len();
    let half = period / 2;
    let mut out = vec![None; n];
    if n < period + (period + 1) % 2 {
        return out;
    }
    for t in half..n.saturating_sub(half) {
        let v = if period % 2 == 1 {
            series[t - half..=t + half].iter().sum::<f64>() / period as f64
        } else {
            let inner: f64 = series[t - half + 1..t + half].iter().sum();
            (inner + 0.5 * (series[t - half] + series[t + half])) / period as f64
        };
        out[t] = Some(v);
    }
    out
}

/// Trend plus seasonal-profile forecast.
///
/// The trend is a centred moving average; the seasonal profile is the
/// per-phase mean of the detrended series, shifted to sum to zero. The
/// forecast extends the last trend value along the slope of the trend over
/// its final period and adds the seasonal profile.
pub fn decomposition_forecast(series: &[f64], period: usize, horizon: usize) -> Result<Vec<f64>, ForecastError> {
    if period < 2 {
        return Err(ForecastError::InvalidSpec("period must be at least 2".into()));
    }
    if series.len() < 2 * period {
        return Err(ForecastError::TooShort {
            needed: 2 * period,
            got: series.len(),
        });
    }
    let trend = centered_trend(series, period);
    let mut phase_sum = vec![0.0; period];
    let mut phase_count = vec![0usize; period];
    for (t, tr) in trend.iter().enumerate() {
        if let Some(tr) = tr {
            phase_sum[t % period] += series[t] - tr;
            phase_count[t % period] += 1;
        }
    }
    let mut seasonal: Vec<f64> = phase_sum
        .iter()
        .zip(&phase_count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let offset = seasonal.iter().sum::<f64>() / period as f64;
    seasonal.iter_mut().for_each(|s| *s -= offset);

    let defined: Vec<usize> = (0..series.len()).filter(|&t| trend[t].is_some()).collect();
    let t_last = *defined.last().expect("trend defined for 2 periods of data");
    let t_first = defined[0].max(t_last.saturating_sub(period));
    let last = trend[t_last].unwrap();
    let slope = if t_last > t_first {
        (last - trend[t_first].unwrap()) / (t_last - t_first) as f64
    } else {
        0.0
    };
    let n = series.len();
    Ok((1..=horizon)
        .map(|h| {
            let t = n - 1 + h;
            last + slope * (t - t_last) as f64 + seasonal[t % period]
        })
        .collect())
}
