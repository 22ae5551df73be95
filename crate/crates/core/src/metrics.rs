//! Utility loss of anonymized panels: sum of squared errors, information
//! loss, returns volatility, and an exponential decay fit of volatility
//! against `k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{sample_households, IngestError};
use crate::mdav::{anonymize, AnonymizedPanel, MdavError};
use crate::panel::{ProfilePanel, RowSource};
use crate::seed::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("need at least {needed} defined returns, found {found}")]
    TooFewReturns { needed: usize, found: usize },
    #[error("need at least 3 points to fit a decay curve, got {0}")]
    TooFewPoints(usize),
    #[error("xs and ys differ in length")]
    LengthMismatch,
    #[error("no group produced a defined volatility")]
    NoVolatility,
}

fn check_shape(a: &impl RowSource, b: &impl RowSource) -> Result<(), MetricsError> {
    if a.n_rows() != b.n_rows() || a.n_cols() != b.n_cols() {
        return Err(MetricsError::Shape(a.n_rows(), a.n_cols(), b.n_rows(), b.n_cols()));
    }
    Ok(())
}

/// Sum of squared differences between original and anonymized values.
pub fn sse(original: &impl RowSource, anonymized: &impl RowSource) -> Result<f64, MetricsError> {
    check_shape(original, anonymized)?;
    Ok((0..original.n_rows())
        .map(|i| {
            original
                .row(i)
                .iter()
                .zip(anonymized.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum())
}

/// Sample standard deviation (denominator `N - 1`) of each column; zero for
/// a single row.
pub fn column_sd(panel: &impl RowSource) -> Vec<f64> {
    let n = panel.n_rows();
    let t = panel.n_cols();
    let mut mean = vec![0.0; t];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(panel.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss = vec![0.0; t];
    for i in 0..n {
        for ((s, v), m) in ss.iter_mut().zip(panel.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    if n < 2 {
        return vec![0.0; t];
    }
    ss.into_iter().map(|s| (s / (n - 1) as f64).sqrt()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationLoss {
    pub value: f64,
    /// Columns with zero spread in the original panel but a non-zero
    /// anonymization error; left out of both sums.
    pub excluded_columns: usize,
}

/// Mean absolute deviation scaled by `sqrt(2) * sd_j` of the original column.
pub fn information_loss(
    original: &impl RowSource,
    anonymized: &impl RowSource,
) -> Result<InformationLoss, MetricsError> {
    check_shape(original, anonymized)?;
    let sigma = column_sd(original);
    information_loss_with_sigma(original, anonymized, &sigma)
}

fn information_loss_with_sigma(
    original: &impl RowSource,
    anonymized: &impl RowSource,
    sigma: &[f64],
) -> Result<InformationLoss, MetricsError> {
    let n = original.n_rows();
    let t = original.n_cols();
    let mut abs_dev = vec![0.0; t];
    for i in 0..n {
        for ((d, x), y) in abs_dev.iter_mut().zip(original.row(i)).zip(anonymized.row(i)) {
            *d += (x - y).abs();
        }
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (dev, sd) in abs_dev.iter().zip(sigma) {
        if *sd > 0.0 {
            total += dev / (std::f64::consts::SQRT_2 * sd);
            used += 1;
        } else if *dev == 0.0 {
            used += 1;
        } else {
            excluded += 1;
        }
    }
    if excluded > 0 {
        log::warn!("information loss: {excluded} zero-spread columns with non-zero error were excluded");
    }
    let value = if used == 0 { 0.0 } else { total / (used * n) as f64 };
    Ok(InformationLoss {
        value,
        excluded_columns: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volatility {
    pub value: f64,
    /// Steps skipped because the previous value was zero.
    pub excluded_returns: usize,
}

/// Sample standard deviation of relative one-step changes.
pub fn returns_volatility(series: &[f64]) -> Result<Volatility, MetricsError> {
    let mut returns = Vec::with_capacity(series.len().saturating_sub(1));
    let mut excluded = 0;
    for w in series.windows(2) {
        if w[0] == 0.0 {
            excluded += 1;
        } else {
            returns.push((w[1] - w[0]) / w[0]);
        }
    }
    if returns.len() < 2 {
        return Err(MetricsError::TooFewReturns {
            needed: 2,
            found: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mu = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / (n - 1.0);
    Ok(Volatility {
        value: var.sqrt(),
        excluded_returns: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelVolatility {
    /// `None` for groups whose centroid has fewer than two defined returns.
    pub per_group: Vec<Option<f64>>,
    pub mean: f64,
    /// Sample standard deviation across groups; 0 with a single group.
    pub sd: f64,
    pub excluded_returns: usize,
}

/// Mean and spread of sample values, `sd` with denominator `n - 1`.
pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Returns volatility of every group centroid, summarized across groups.
pub fn panel_volatility(anonymized: &AnonymizedPanel) -> Result<PanelVolatility, MetricsError> {
    let mut per_group = Vec::with_capacity(anonymized.n_groups());
    let mut excluded = 0;
    for (g, centroid) in anonymized.centroids().enumerate() {
        match returns_volatility(centroid) {
            Ok(v) => {
                excluded += v.excluded_returns;
                per_group.push(Some(v.value));
            }
            Err(e) => {
                log::warn!("group {g}: volatility undefined ({e})");
                per_group.push(None);
            }
        }
    }
    let defined: Vec<f64> = per_group.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoVolatility);
    }
    let (mean, sd) = mean_sd(&defined);
    Ok(PanelVolatility {
        per_group,
        mean,
        sd,
        excluded_returns: excluded,
    })
}

/// Utility loss of one anonymization level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub k: usize,
    pub sse: f64,
    pub il: f64,
    pub il_excluded_columns: usize,
    /// Per-column sample standard deviation of the original panel.
    #[serde(skip)]
    pub sigma: Vec<f64>,
    pub volatility: PanelVolatility,
}

pub fn privacy_report(original: &ProfilePanel, anonymized: &AnonymizedPanel) -> Result<PrivacyReport, MetricsError> {
    check_shape(original, anonymized)?;
    let sigma = column_sd(original);
    let il = information_loss_with_sigma(original, anonymized, &sigma)?;
    Ok(PrivacyReport {
        k: anonymized.k(),
        sse: sse(original, anonymized)?,
        il: il.value,
        il_excluded_columns: il.excluded_columns,
        sigma,
        volatility: panel_volatility(anonymized)?,
    })
}

/// `f(t) = a * exp(-t / b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub converged: bool,
}

impl DecayFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * (-t / self.b).exp()
    }
}

const GN_MAX_ITER: usize = 100;
const GN_STEP_TOL: f64 = 1e-10;

fn r_squared(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a * (-x / b).exp()).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

fn residual_ss(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    xs.iter().zip(ys).map(|(x, y)| (y - a * (-x / b).exp()).powi(2)).sum()
}

/// Best amplitude for a fixed decay constant.
fn amplitude_for(xs: &[f64], ys: &[f64], b: f64) -> f64 {
    let (num, den) = xs.iter().zip(ys).fold((0.0, 0.0), |(n, d), (x, y)| {
        let e = (-x / b).exp();
        (n + y * e, d + e * e)
    });
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Log-spaced search over `b` with the amplitude solved in closed form.
fn grid_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let span = xs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let (lo, hi) = ((span * 1e-4).ln(), (span * 1e4).ln());
    let steps = 2000;
    let mut best = (f64::INFINITY, 1.0, 1.0);
    for s in 0..=steps {
        let b = (lo + (hi - lo) * s as f64 / steps as f64).exp();
        let a = amplitude_for(xs, ys, b);
        let rss = residual_ss(xs, ys, a, b);
        if rss < best.0 {
            best = (rss, a, b);
        }
    }
    (best.1, best.2)
}

/// Least-squares fit of `a * exp(-t / b)`.
///
/// Starts from the linear regression of `ln y` on `t` and refines with
/// Gauss-Newton (step halving on any increase of the residual sum). If the
/// log-linear start is unavailable (a non-positive `y`, or a non-negative
/// slope) a grid search over `b` is returned instead, marked unconverged.
pub fn fit_exp_decay(xs: &[f64], ys: &[f64]) -> Result<DecayFit, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch);
    }
    if xs.len() < 3 {
        return Err(MetricsError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let log_linear = if ys.iter().all(|&y| y > 0.0) {
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        (sxx > 0.0 && slope < 0.0).then(|| ((my - slope * mx).exp(), -1.0 / slope))
    } else {
        None
    };
    let Some((mut a, mut b)) = log_linear else {
        log::warn!("decay fit: log-linear start unavailable, using grid search");
        let (a, b) = grid_fit(xs, ys);
        return Ok(DecayFit {
            a,
            b,
            r2: r_squared(xs, ys, a, b),
            converged: false,
        });
    };

    let (a0, b0) = (a, b);
    let mut rss = residual_ss(xs, ys, a, b);
    let mut converged = false;
    for _ in 0..GN_MAX_ITER {
        // Normal equations of the linearized residuals.
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(ys) {
            let e = (-x / b).exp();
            let r = y - a * e;
            let da = e;
            let db = a * x * e / (b * b);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let det = jaa * jbb - jab * jab;
        if det.abs() <= f64::EPSILON * jaa * jbb || !det.is_finite() {
            converged = rss == 0.0;
            break;
        }
        let mut step_a = (jbb * ga - jab * gb) / det;
        let mut step_b = (jaa * gb - jab * ga) / det;
        let mut accepted = false;
        for _ in 0..30 {
            let (na, nb) = (a + step_a, b + step_b);
            if nb > 0.0 {
                let nrss = residual_ss(xs, ys, na, nb);
                if nrss <= rss {
                    a = na;
                    b = nb;
                    rss = nrss;
                    accepted = true;
                    break;
                }
            }
            step_a *= 0.5;
            step_b *= 0.5;
        }
        let rel_step = (step_a / a.abs().max(1e-300)).abs().max((step_b / b).abs());
        if !accepted || rel_step < GN_STEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("decay fit did not converge in {GN_MAX_ITER} iterations");
        a = a0;
        b = b0;
    }
    Ok(DecayFit {
        a,
        b,
        r2: r_squared(xs, ys, a, b),
        converged,
    })
}

/// Utility loss of one `k`, averaged over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub k: usize,
    pub sse: f64,
    pub il: f64,
    pub volatility_mean: f64,
    pub volatility_sd: f64,
    pub excluded_returns: usize,
    pub replicate_count: usize,
    /// Standard deviations across replicates (0 with one replicate).
    pub sse_replicate_sd: f64,
    pub il_replicate_sd: f64,
    pub volatility_mean_replicate_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecayFitOutcome {
    Ok { a: f64, b: f64, r2: f64, converged: bool },
    InsufficientPoints { points: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub levels: Vec<LevelSummary>,
    pub decay_fit: DecayFitOutcome,
    pub sampler: String,
    pub sample_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ladder: Vec<usize>,
    pub replicates: usize,
    /// Households per replicate; `None` uses the whole panel.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mdav(#[from] MdavError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("replicates must be at least 1")]
    NoReplicates,
    #[error("k ladder is empty")]
    EmptyLadder,
}

/// Evaluates every `k` of the ladder on `replicates` household samples and
/// fits the decay curve to mean volatility against `k`.
///
/// When the sample covers the whole panel every replicate is identical, so
/// the levels are evaluated once and reported with the requested count.
pub fn privacy_sweep(panel: &ProfilePanel, config: &SweepConfig) -> Result<MetricsReport, SweepError> {
    if config.replicates == 0 {
        return Err(SweepError::NoReplicates);
    }
    if config.ladder.is_empty() {
        return Err(SweepError::EmptyLadder);
    }
    let sample_size = config.sample_size.unwrap_or(panel.n_series()).min(panel.n_series());
    let distinct = if sample_size == panel.n_series() {
        1
    } else {
        config.replicates
    };

    let samples: Vec<ProfilePanel> = (0..distinct)
        .map(|r| {
            if sample_size == panel.n_series() {
                Ok(panel.sorted_by_id())
            } else {
                sample_households(panel, sample_size, derive_seed(config.seed, &[r as u64]))
            }
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, usize)> = (0..distinct)
        .flat_map(|r| config.ladder.iter().map(move |&k| (r, k)))
        .collect();
    let reports: Vec<PrivacyReport> = jobs
        .par_iter()
        .map(|&(r, k)| -> Result<PrivacyReport, SweepError> {
            let anon = anonymize(&samples[r], k)?;
            Ok(privacy_report(&samples[r], &anon)?)
        })
        .collect::<Result<_, _>>()?;

    let levels: Vec<LevelSummary> = config
        .ladder
        .iter()
        .enumerate()
        .map(|(li, &k)| {
            let reps: Vec<&PrivacyReport> = (0..distinct).map(|r| &reports[r * config.ladder.len() + li]).collect();
            // Identical replicates collapse to one value with zero spread.
            let expand = |f: &dyn Fn(&PrivacyReport) -> f64| -> Vec<f64> { reps.iter().map(|r| f(r)).collect() };
            let (sse, sse_sd) = mean_sd(&expand(&|r| r.sse));
            let (il, il_sd) = mean_sd(&expand(&|r| r.il));
            let (vol, vol_rep_sd) = mean_sd(&expand(&|r| r.volatility.mean));
            let (vol_sd, _) = mean_sd(&expand(&|r| r.volatility.sd));
            let excluded = reps.iter().map(|r| r.volatility.excluded_returns).sum::<usize>() / reps.len();
            LevelSummary {
                k,
                sse,
                il,
                volatility_mean: vol,
                volatility_sd: vol_sd,
                excluded_returns: excluded,
                replicate_count: config.replicates,
                sse_replicate_sd: sse_sd,
                il_replicate_sd: il_sd,
                volatility_mean_replicate_sd: vol_rep_sd,
            }
        })
        .collect();

    let decay_fit = if levels.len() < 3 {
        DecayFitOutcome::InsufficientPoints { points: levels.len() }
    } else {
        let xs: Vec<f64> = levels.iter().map(|l| l.k as f64).collect();
        let ys: Vec<f64> = levels.iter().map(|l| l.volatility_mean).collect();
        let fit = fit_exp_decay(&xs, &ys)?;
        DecayFitOutcome::Ok {
            a: fit.a,
            b: fit.b,
            r2: fit.r2,
            converged: fit.converged,
        }
    };

    Ok(MetricsReport {
        levels,
        decay_fit,
        sampler: crate::ingest::SAMPLER_ALGORITHM.to_string(),
        sample_size,
        seed: config.seed,
    })
}

impl MetricsReport {
    /// `k,sse,il,volatility_mean,volatility_sd`
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "sse", "il", "volatility_mean", "volatility_sd"])?;
        for l in &self.levels {
            w.write_record([
                l.k.to_string(),
                l.sse.to_string(),
                l.il.to_string(),
                l.volatility_mean.to_string(),
                l.volatility_sd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
