//! Short-horizon x0-predictor, its training step and the latest/EMA
//! parameter pair.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradtape::{Tape, TapeError, Tensor, Var};
use crate::rng::gaussian_vec;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("time embedding dimension must be even, got {0}")]
    OddEmbedding(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match model input [batch, {expected}]")]
    Shape { expected: usize, got: Vec<usize> },
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("non-finite training loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("checkpoint schedule hash {found} does not match schedule {expected}")]
    ScheduleMismatch { expected: String, found: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per chunk.
    pub frames: usize,
    /// Entries per frame.
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Data scale for the skip parametrization
    /// `x0 = c_skip·x_t + c_out·net(c_in·x_t, t)`; the raw network output is
    /// the estimate when `None`.
    #[serde(default)]
    pub sigma_data: Option<f64>,
}

impl ModelConfig {
    pub fn new(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            hidden: vec![256, 256, 256],
            time_dim: 16,
            activation: Activation::Silu,
            sigma_data: Some(1.0),
        }
    }

    pub fn data_len(&self) -> usize {
        self.frames * self.dim
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.time_dim % 2 != 0 {
            return Err(DenoiserError::OddEmbedding(self.time_dim));
        }
        if self.frames == 0 || self.dim == 0 {
            return Err(DenoiserError::Config("frames and dim must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(DenoiserError::Config("hidden widths must be positive".into()));
        }
        if let Some(sd) = self.sigma_data {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(DenoiserError::Config(format!(
                    "sigma_data must be positive, got {sd}"
                )));
            }
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut input = self.data_len() + self.time_dim;
        for &h in &self.hidden {
            dims.push((input, h));
            input = h;
        }
        dims.push((input, self.data_len()));
        dims
    }
}

/// Sinusoidal features of `t/T`: entry `2k` is `sin(ω_k·t/T)` and `2k+1` is
/// `cos(ω_k·t/T)`, with `ω_k = 1000^(k/(dim/2 − 1))` (and `ω_0 = 1`).
pub fn time_embed(t: usize, total: usize, dim: usize) -> Result<Tensor, DenoiserError> {
    if dim % 2 != 0 {
        return Err(DenoiserError::OddEmbedding(dim));
    }
    let half = dim / 2;
    let tau = t as f64 / total.max(1) as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = if half > 1 {
            1000f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((omega * tau).sin());
        out.push((omega * tau).cos());
    }
    Ok(Tensor::vector(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[inputs, outputs]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
}

/// Feed-forward x0-predictor over a flattened chunk plus time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: ModelConfig,
    /// `ᾱ_t` for `t = 0..=T` of the schedule the model is trained under.
    alpha_bar: Vec<f64>,
    layers: Vec<Layer>,
}

impl Denoiser {
    /// Random hidden layers (`N(0, 1/fan_in)`) and a zero output layer.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (inputs, outputs))| {
                let weight = if i == last {
                    vec![0.0; inputs * outputs]
                } else {
                    let scale = (1.0 / inputs as f64).sqrt();
                    gaussian_vec(rng, inputs * outputs)
                        .into_iter()
                        .map(|v| v * scale)
                        .collect()
                };
                Layer {
                    weight,
                    bias: vec![0.0; outputs],
                    inputs,
                    outputs,
                }
            })
            .collect();
        Ok(Self {
            config,
            alpha_bar: schedule.alpha_bars().to_vec(),
            layers,
        })
    }

    pub fn from_layers(
        config: ModelConfig,
        schedule: &NoiseSchedule,
        layers: Vec<Layer>,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len()
            || dims.iter().zip(&layers).any(|(&(i, o), l)| {
                l.inputs != i || l.outputs != o || l.weight.len() != i * o || l.bias.len() != o
            })
        {
            return Err(DenoiserError::Format(
                "layer shapes do not match model config".into(),
            ));
        }
        Ok(Self {
            config,
            alpha_bar: schedule.alpha_bars().to_vec(),
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `(c_in, c_skip, c_out)` at step `t`; `(1, 0, 1)` without a data scale.
    pub fn coefficients(&self, t: usize) -> (f64, f64, f64) {
        match self.config.sigma_data {
            None => (1.0, 0.0, 1.0),
            Some(sd) => {
                let a = self.alpha_bar[t];
                let var = a * sd * sd + (1.0 - a);
                (
                    1.0 / var.sqrt(),
                    a.sqrt() * sd * sd / var,
                    (1.0 - a).sqrt() * sd / var.sqrt(),
                )
            }
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, DenoiserError> {
        let w = self.config.data_len();
        if x.shape().len() != 2 || x.shape()[1] != w {
            return Err(DenoiserError::Shape {
                expected: w,
                got: x.shape().to_vec(),
            });
        }
        Ok(x.shape()[0])
    }

    fn check_t(&self, t: usize) -> Result<(), DenoiserError> {
        if t == 0 || t > self.total_steps() {
            return Err(DenoiserError::Timestep {
                t,
                max: self.total_steps(),
            });
        }
        Ok(())
    }

    /// `[batch, time_dim]` embedding rows for per-row timesteps.
    pub fn embedding_rows(&self, times: &[usize]) -> Result<Tensor, DenoiserError> {
        let dim = self.config.time_dim;
        let mut data = Vec::with_capacity(times.len() * dim);
        for &t in times {
            data.extend_from_slice(time_embed(t, self.total_steps(), dim)?.data());
        }
        Ok(Tensor::new(data, vec![times.len(), dim])?)
    }

    /// Places the parameters on `tape` as leaves, in layer order
    /// (weight, bias, weight, bias, ...).
    pub fn parameter_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            vars.push(tape.leaf(
                Tensor::new(l.weight.clone(), vec![l.inputs, l.outputs]).expect("weight shape"),
            ));
            vars.push(tape.leaf(Tensor::new(l.bias.clone(), vec![1, l.outputs]).expect("bias shape")));
        }
        vars
    }

    /// Records the estimate for input `x` (`[batch, F·d]`) with one timestep
    /// per row.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        times: &[usize],
    ) -> Result<Var, DenoiserError> {
        for &t in times {
            self.check_t(t)?;
        }
        let emb = tape.leaf(self.embedding_rows(times)?);
        if self.config.sigma_data.is_none() {
            return self.network_on(tape, params, x, emb);
        }
        let w = self.config.data_len();
        let (mut c_in, mut c_skip, mut c_out) = (Vec::new(), Vec::new(), Vec::new());
        for &t in times {
            let (i, s, o) = self.coefficients(t);
            c_in.extend(std::iter::repeat_n(i, w));
            c_skip.extend(std::iter::repeat_n(s, w));
            c_out.extend(std::iter::repeat_n(o, w));
        }
        let shape = vec![times.len(), w];
        let c_in = tape.leaf(Tensor::new(c_in, shape.clone())?);
        let c_skip = tape.leaf(Tensor::new(c_skip, shape.clone())?);
        let c_out = tape.leaf(Tensor::new(c_out, shape)?);
        let scaled = tape.mul(x, c_in)?;
        let net = self.network_on(tape, params, scaled, emb)?;
        let skip = tape.mul(x, c_skip)?;
        let residual = tape.mul(net, c_out)?;
        Ok(tape.add(skip, residual)?)
    }

    fn network_on(&self, tape: &mut Tape, params: &[Var], x: Var, emb: Var) -> Result<Var, DenoiserError> {
        let mut h = tape.concat(&[x, emb], 1)?;
        let last = self.layers.len() - 1;
        for (i, pair) in params.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_row(h, pair[1])?;
            if i < last {
                h = match self.config.activation {
                    Activation::Silu => tape.silu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Records `x_θ(x, t)` on an existing tape, with parameters as constants.
    pub fn predict_on(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var, DenoiserError> {
        self.check_t(t)?;
        let batch = self.check_input(tape.value(x))?;
        let params = self.parameter_leaves(tape);
        self.forward_on(tape, &params, x, &vec![t; batch])
    }

    /// Tweedie estimate for every row of `x_t`.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor, DenoiserError> {
        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let out = self.predict_on(&mut tape, x, t)?;
        Ok(tape.value(out).clone())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn params(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    /// Euclidean distance between two parameter sets of the same shape.
    pub fn parameter_distance(&self, other: &Denoiser) -> f64 {
        self.params()
            .zip(other.params())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn apply(&mut self, params: &mut Denoiser, grads: &[Tensor]) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.params_mut().enumerate() {
            let g = grads[k].data();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Latest parameters, their exponential moving average, and the optimizer
/// state that updates the latest set.
#[derive(Debug, Clone)]
pub struct EmaPair {
    pub latest: Denoiser,
    pub ema: Denoiser,
    pub decay: f64,
    pub optimizer: Adam,
    steps_taken: u64,
}

impl EmaPair {
    pub fn new(model: Denoiser, decay: f64, lr: f64) -> Result<Self, DenoiserError> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(DenoiserError::Config(format!(
                "EMA decay must lie in (0, 1], got {decay}"
            )));
        }
        Ok(Self {
            ema: model.clone(),
            latest: model,
            decay,
            optimizer: Adam::new(lr),
            steps_taken: 0,
        })
    }

    /// Pair restored from a checkpoint; the optimizer starts fresh.
    pub fn from_parts(latest: Denoiser, ema: Denoiser, decay: f64, lr: f64) -> Self {
        Self {
            latest,
            ema,
            decay,
            optimizer: Adam::new(lr),
            steps_taken: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// `ema ← decay·ema + (1−decay)·latest`.
    pub fn update_ema(&mut self) {
        let d = self.decay;
        let latest: Vec<&Vec<f64>> = self.latest.params().collect();
        for (e, l) in self.ema.params_mut().zip(latest) {
            for (ev, lv) in e.iter_mut().zip(l) {
                *ev = d * *ev + (1.0 - d) * lv;
            }
        }
    }

    /// One Adam step on the x0-prediction loss followed by an EMA update.
    /// Returns the batch's mean squared x0 error before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<f64, DenoiserError> {
        let rows = self.latest.check_input(batch)?;
        let w = self.latest.config.data_len();
        let total = schedule.steps();
        let times: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=total)).collect();
        let eps = gaussian_vec(rng, rows * w);
        let mut noisy = Vec::with_capacity(rows * w);
        for (r, &t) in times.iter().enumerate() {
            let a = schedule.alpha_bar(t);
            let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
            for k in 0..w {
                noisy.push(ca * batch.data()[r * w + k] + cb * eps[r * w + k]);
            }
        }

        let mut tape = Tape::new();
        let params = self.latest.parameter_leaves(&mut tape);
        let x = tape.leaf(Tensor::new(noisy, vec![rows, w])?);
        let pred = self.latest.forward_on(&mut tape, &params, x, &times)?;
        let target = tape.leaf(batch.clone());
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff)?;
        let mse = tape.mean(sq)?;
        let loss = tape.value(mse).item();
        if !loss.is_finite() {
            return Err(DenoiserError::NonFinite {
                step: self.steps_taken,
                loss,
            });
        }
        // With the skip parametrization each row is weighted by 1/c_out², so
        // the network output is fit at unit scale for every t.
        let objective = if self.latest.config.sigma_data.is_some() {
            let mut weights = Vec::with_capacity(rows * w);
            for &t in &times {
                let (_, _, c_out) = self.latest.coefficients(t);
                weights.extend(std::iter::repeat_n(1.0 / (c_out * c_out), w));
            }
            let weights = tape.leaf(Tensor::new(weights, vec![rows, w])?);
            let weighted = tape.mul(sq, weights)?;
            tape.mean(weighted)?
        } else {
            mse
        };
        let grads = tape.backward(objective, &params)?;
        self.optimizer.apply(&mut self.latest, &grads);
        self.update_ema();
        self.steps_taken += 1;
        Ok(loss)
    }
}

/// Uniformly resampled minibatch (with replacement) from the rows of `data`.
pub fn sample_batch<R: Rng + ?Sized>(data: &Tensor, size: usize, rng: &mut R) -> Tensor {
    let w = data.row_len();
    let mut out = Vec::with_capacity(size * w);
    for _ in 0..size {
        let r = rng.random_range(0..data.rows());
        out.extend_from_slice(data.row(r));
    }
    Tensor::new(out, vec![size, w]).expect("batch shape")
}

pub const CHECKPOINT_FORMAT: &str = "chainplan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk record of an [`EmaPair`]. See `docs/formats.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub schedule_hash: String,
    pub total_steps: usize,
    pub model: ModelConfig,
    pub decay: f64,
    pub train_steps: u64,
    pub latest: Vec<Layer>,
    pub ema: Vec<Layer>,
}

impl Checkpoint {
    pub fn from_pair(pair: &EmaPair, schedule: &NoiseSchedule) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            schedule_hash: schedule.hash(),
            total_steps: pair.latest.total_steps(),
            model: pair.latest.config.clone(),
            decay: pair.decay,
            train_steps: pair.steps_taken,
            latest: pair.latest.layers.clone(),
            ema: pair.ema.layers.clone(),
        }
    }

    /// Rebuilds the pair, refusing a checkpoint trained under another
    /// schedule.
    pub fn into_pair(self, schedule: &NoiseSchedule, lr: f64) -> Result<EmaPair, DenoiserError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(DenoiserError::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let expected = schedule.hash();
        if self.schedule_hash != expected {
            return Err(DenoiserError::ScheduleMismatch {
                expected,
                found: self.schedule_hash,
            });
        }
        if self.total_steps != schedule.steps() {
            return Err(DenoiserError::Format(format!(
                "checkpoint has T = {}, schedule has T = {}",
                self.total_steps,
                schedule.steps()
            )));
        }
        let latest = Denoiser::from_layers(self.model.clone(), schedule, self.latest)?;
        let ema = Denoiser::from_layers(self.model, schedule, self.ema)?;
        let mut pair = EmaPair::from_parts(latest, ema, self.decay, lr);
        pair.steps_taken = self.train_steps;
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<(), DenoiserError> {
        let text = serde_json::to_string(self).map_err(|e| DenoiserError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| DenoiserError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DenoiserError> {
        let text = std::fs::read_to_string(path).map_err(|source| DenoiserError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DenoiserError::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schedule::ScheduleConfig;

    fn small(frames: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            frames,
            dim,
            hidden: vec![16, 16],
            time_dim: 4,
            activation: Activation::Silu,
            sigma_data: None,
        }
    }

    fn sched(steps: usize) -> NoiseSchedule {
        NoiseSchedule::linear(ScheduleConfig {
            steps,
            ..ScheduleConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let m = Denoiser::new(small(3, 2), &sched(50), &mut seeded(0)).unwrap();
        let x = Tensor::new(gaussian_vec(&mut seeded(1), 12), vec![2, 6]).unwrap();
        let y = m.predict_x0(&x, 10).unwrap();
        assert_eq!(y, Tensor::zeros(&[2, 6]));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut m = Denoiser::new(small(3, 2), &sched(50), &mut seeded(0)).unwrap();
        m.layers.last_mut().unwrap().weight.iter_mut().for_each(|w| *w = 0.1);
        let row = gaussian_vec(&mut seeded(2), 6);
        let x = Tensor::new([row.clone(), row].concat(), vec![2, 6]).unwrap();
        let y = m.predict_x0(&x, 7).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert!(y.all_finite());
    }

    #[test]
    fn predict_rejects_bad_inputs() {
        let m = Denoiser::new(small(3, 2), &sched(50), &mut seeded(0)).unwrap();
        assert!(matches!(
            m.predict_x0(&Tensor::zeros(&[2, 5]), 3),
            Err(DenoiserError::Shape { .. })
        ));
        assert!(matches!(
            m.predict_x0(&Tensor::zeros(&[2, 6]), 0),
            Err(DenoiserError::Timestep { .. })
        ));
    }

    #[test]
    fn skip_parametrization_with_zero_output_layer() {
        // Untrained net contributes nothing, so x0 = c_skip·x_t.
        let schedule = sched(500);
        let cfg = ModelConfig {
            sigma_data: Some(0.5),
            ..small(3, 2)
        };
        let m = Denoiser::new(cfg, &schedule, &mut seeded(0)).unwrap();
        let x = Tensor::new(gaussian_vec(&mut seeded(1), 6), vec![1, 6]).unwrap();
        for t in [1, 250, 500] {
            let a = schedule.alpha_bar(t);
            let c_skip = a.sqrt() * 0.25 / (a * 0.25 + 1.0 - a);
            let y = m.predict_x0(&x, t).unwrap();
            for (yv, xv) in y.data().iter().zip(x.data()) {
                assert!((yv - c_skip * xv).abs() < 1e-14);
            }
        }
        // Near t = 0 the estimate is almost the input.
        let (_, c_skip, c_out) = m.coefficients(1);
        assert!((c_skip - 1.0).abs() < 1e-3 && c_out < 0.01);
    }

    #[test]
    fn skip_parametrization_gradient_matches_finite_differences() {
        let schedule = sched(50);
        let cfg = ModelConfig {
            sigma_data: Some(1.0),
            ..small(2, 2)
        };
        let mut m = Denoiser::new(cfg, &schedule, &mut seeded(5)).unwrap();
        let mut rng = seeded(6);
        for l in &mut m.layers {
            l.weight = gaussian_vec(&mut rng, l.weight.len());
        }
        let x = Tensor::new(gaussian_vec(&mut rng, 4), vec![1, 4]).unwrap();
        let t = 17;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = m.predict_on(&mut tape, xv, t).unwrap();
        let l = tape.sum_squares(y).unwrap();
        let g = tape.backward(l, &[xv]).unwrap().remove(0);
        let f = |v: &[f64]| {
            let y = m.predict_x0(&Tensor::new(v.to_vec(), vec![1, 4]).unwrap(), t).unwrap();
            y.data().iter().map(|a| a * a).sum::<f64>()
        };
        for i in 0..4 {
            let h = 1e-6;
            let (mut p, mut q) = (x.data().to_vec(), x.data().to_vec());
            p[i] += h;
            q[i] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embed(0, 500, 8).unwrap();
        for k in 0..4 {
            assert_eq!(e.data()[2 * k], 0.0);
            assert_eq!(e.data()[2 * k + 1], 1.0);
        }
        assert_eq!(time_embed(37, 500, 8).unwrap(), time_embed(37, 500, 8).unwrap());
        let e = time_embed(500, 500, 4).unwrap();
        let expected = [1f64.sin(), 1f64.cos(), 1000f64.sin(), 1000f64.cos()];
        for (a, b) in e.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(time_embed(3, 10, 5), Err(DenoiserError::OddEmbedding(5))));
    }

    #[test]
    fn ema_with_unit_decay_is_frozen() {
        let sched = sched(20);
        let m = Denoiser::new(small(2, 1), &sched, &mut seeded(4)).unwrap();
        let mut pair = EmaPair::new(m, 1.0, 1e-2).unwrap();
        let before = pair.ema.clone();
        let data = Tensor::new(vec![0.5, -0.5, 0.4, -0.6], vec![2, 2]).unwrap();
        let mut rng = seeded(5);
        for _ in 0..5 {
            let loss = pair.train_step(&data, &sched, &mut rng).unwrap();
            assert!(loss >= 0.0);
        }
        assert_eq!(pair.ema, before);
        assert_ne!(pair.latest, before);
    }

    #[test]
    fn ema_gap_shrinks_by_decay_when_latest_frozen() {
        let mut rng = seeded(8);
        let a = Denoiser::new(small(2, 1), &sched(20), &mut rng).unwrap();
        let b = Denoiser::new(small(2, 1), &sched(20), &mut rng).unwrap();
        let mut pair = EmaPair::new(a, 0.9, 1e-3).unwrap();
        pair.latest = b;
        let mut gap = pair.ema.parameter_distance(&pair.latest);
        for _ in 0..10 {
            pair.update_ema();
            let next = pair.ema.parameter_distance(&pair.latest);
            assert!((next - 0.9 * gap).abs() < 1e-12 * gap.max(1.0));
            gap = next;
        }
    }

    #[test]
    fn memorizes_a_constant_chunk() {
        let sched = sched(100);
        let m = Denoiser::new(small(3, 2), &sched, &mut seeded(1)).unwrap();
        let mut pair = EmaPair::new(m, 0.99, 1e-3).unwrap();
        let chunk = [0.3, -0.2, 0.5, 0.1, 0.7, 0.4];
        let data = Tensor::new(chunk.repeat(16), vec![16, 6]).unwrap();
        let mut rng = seeded(2);
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            last = pair.train_step(&data, &sched, &mut rng).unwrap();
        }
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let sched = sched(500);
        let m = Denoiser::new(small(3, 2), &sched, &mut seeded(3)).unwrap();
        let pair = EmaPair::new(m, 0.999, 1e-4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_pair(&pair, &sched).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_pair(&sched, 1e-4).unwrap();
        assert_eq!(back.latest, pair.latest);
        assert_eq!(back.ema, pair.ema);

        let other = NoiseSchedule::linear(ScheduleConfig {
            beta_end: 0.03,
            ..ScheduleConfig::default()
        })
        .unwrap();
        assert!(matches!(
            Checkpoint::load(&path).unwrap().into_pair(&other, 1e-4),
            Err(DenoiserError::ScheduleMismatch { .. })
        ));
    }
}
