//! Single-hidden-layer multi-output network over a window of robust-scaled
//! history.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ForecastError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub input_window: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Most recent training windows kept per fit.
    pub max_windows: usize,
    pub optimizer: Optimizer,
    pub shuffle: bool,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            input_window: 500,
            hidden: 64,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 32,
            max_windows: 512,
            optimizer: Optimizer::Adam,
            shuffle: true,
        }
    }
}

/// Median / interquartile-range scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustScaler {
    pub median: f64,
    pub scale: f64,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl RobustScaler {
    /// Falls back to scale 1 when the interquartile range is zero.
    pub fn fit(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = quantile_sorted(&sorted, 0.5);
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let scale = if iqr > 0.0 {
            iqr
        } else {
            log::warn!("interquartile range is zero; using unit scale");
            1.0
        };
        Self { median, scale }
    }

    pub fn transform(&self, v: f64) -> f64 {
        (v - self.median) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.median
    }
}

/// `tanh` hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    /// `w1 (hidden x input) | b1 | w2 (output x hidden) | b2`
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = hidden * input + hidden + output * hidden + output;
        let mut params = vec![0.0; n];
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        for w in &mut params[..hidden * input] {
            *w = rng.random_range(-b1..b1);
        }
        let w2 = hidden * input + hidden;
        for w in &mut params[w2..w2 + output * hidden] {
            *w = rng.random_range(-b2..b2);
        }
        Self {
            input,
            hidden,
            output,
            params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    fn hidden_layer(&self, x: &[f64], h: &mut [f64]) {
        let (b1, _, _) = self.offsets();
        for (j, hj) in h.iter_mut().enumerate() {
            let w = &self.params[j * self.input..(j + 1) * self.input];
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.params[b1 + j];
            *hj = z.tanh();
        }
    }

    fn output_layer(&self, h: &[f64], out: &mut [f64]) {
        let (_, w2, b2) = self.offsets();
        for (o, y) in out.iter_mut().enumerate() {
            let w = &self.params[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
            *y = w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + self.params[b2 + o];
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output];
        self.hidden_layer(x, &mut h);
        self.output_layer(&h, &mut out);
        out
    }

    /// Mean over samples of the mean squared error over outputs, and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[&[f64]]) -> (f64, Vec<f64>) {
        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut h = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.output];
        let mut dh = vec![0.0; self.hidden];
        let mut loss = 0.0;
        let norm = 1.0 / (xs.len() * self.output) as f64;
        for (x, y) in xs.iter().zip(ys) {
            self.hidden_layer(x, &mut h);
            self.output_layer(&h, &mut out);
            dh.iter_mut().for_each(|d| *d = 0.0);
            for o in 0..self.output {
                let e = out[o] - y[o];
                loss += e * e * norm;
                let g = 2.0 * e * norm;
                grad[b2 + o] += g;
                let row = w2 + o * self.hidden;
                for j in 0..self.hidden {
                    grad[row + j] += g * h[j];
                    dh[j] += g * self.params[row + j];
                }
            }
            for j in 0..self.hidden {
                let dz = dh[j] * (1.0 - h[j] * h[j]);
                if dz == 0.0 {
                    continue;
                }
                grad[b1 + j] += dz;
                let row = j * self.input;
                for (g, xi) in grad[row..row + self.input].iter_mut().zip(x.iter()) {
                    *g += dz * xi;
                }
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, xs: &[&[f64]], ys: &[&[f64]]) -> f64 {
        let norm = 1.0 / (xs.len() * self.output) as f64;
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                self.forward(x)
                    .iter()
                    .zip(y.iter())
                    .map(|(a, b)| (a - b) * (a - b) * norm)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Trains on `(input, target)` pairs; returns the full-data loss after
    /// each epoch.
    pub fn train(&mut self, xs: &[&[f64]], ys: &[&[f64]], params: &MlpParams, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut adam = Adam::new(self.params.len());
        let batch = params.batch_size.clamp(1, xs.len().max(1));
        let mut history = Vec::with_capacity(params.epochs);
        let mut bx: Vec<&[f64]> = Vec::with_capacity(batch);
        let mut by: Vec<&[f64]> = Vec::with_capacity(batch);
        for _ in 0..params.epochs {
            if params.shuffle {
                order.shuffle(&mut rng);
            }
            for chunk in order.chunks(batch) {
                bx.clear();
                by.clear();
                bx.extend(chunk.iter().map(|&i| xs[i]));
                by.extend(chunk.iter().map(|&i| ys[i]));
                let (_, grad) = self.loss_and_gradient(&bx, &by);
                match params.optimizer {
                    Optimizer::Sgd => {
                        for (p, g) in self.params.iter_mut().zip(&grad) {
                            *p -= params.learning_rate * g;
                        }
                    }
                    Optimizer::Adam => adam.step(&mut self.params, &grad, params.learning_rate),
                }
            }
            history.push(self.loss(xs, ys));
        }
        history
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trained network plus the scaling of its training series.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub(crate) net: Mlp,
    pub(crate) scaler: RobustScaler,
    pub(crate) input_window: usize,
    pub(crate) loss_history: Vec<f64>,
}

impl MlpModel {
    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn output_len(&self) -> usize {
        self.net.output
    }

    /// Direct multi-output forecast; horizons longer than the output layer
    /// are covered by feeding earlier outputs back as input.
    pub fn predict(&self, history: &[f64], horizon: usize) -> Result<Vec<f64>, ForecastError> {
        if history.len() < self.input_window {
            return Err(ForecastError::InsufficientHistory {
                needed: self.input_window,
                got: history.len(),
            });
        }
        let mut scaled: Vec<f64> = history[history.len() - self.input_window..]
            .iter()
            .map(|&v| self.scaler.transform(v))
            .collect();
        let mut out = Vec::with_capacity(horizon);
        while out.len() < horizon {
            let x = &scaled[scaled.len() - self.input_window..];
            let y = self.net.forward(x);
            let take = (horizon - out.len()).min(y.len());
            out.extend(y[..take].iter().map(|&v| self.scaler.inverse(v)));
            scaled.extend_from_slice(&y[..take]);
        }
        Ok(out)
    }
}

/// Fits the network on sliding windows of the robust-scaled series.
pub fn fit_mlp_series(
    series: &[f64],
    horizon: usize,
    params: &MlpParams,
    seed: u64,
) -> Result<MlpModel, ForecastError> {
    let w = params.input_window;
    if w == 0 || params.hidden == 0 || horizon == 0 {
        return Err(ForecastError::InvalidSpec("mlp sizes must be positive".into()));
    }
    if series.len() < w + horizon {
        return Err(ForecastError::TooShort {
            needed: w + horizon,
            got: series.len(),
        });
    }
    let scaler = RobustScaler::fit(series);
    let scaled: Vec<f64> = series.iter().map(|&v| scaler.transform(v)).collect();
    let n_windows = series.len() - w - horizon + 1;
    let first = n_windows.saturating_sub(params.max_windows.max(1));
    let xs: Vec<&[f64]> = (first..n_windows).map(|s| &scaled[s..s + w]).collect();
    let ys: Vec<&[f64]> = (first..n_windows).map(|s| &scaled[s + w..s + w + horizon]).collect();
    let mut net = Mlp::new(w, params.hidden, horizon, seed);
    let loss_history = net.train(&xs, &ys, params, seed.wrapping_add(1));
    Ok(MlpModel {
        net,
        scaler,
        input_window: w,
        loss_history,
    })
}
