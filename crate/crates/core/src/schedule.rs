//! Linear-β noise schedule, forward noising and the deterministic part of
//! the DDIM transition.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gradtape::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid schedule config: {0}")]
    Config(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("sigma^2 = {sigma_sq} exceeds 1 - alpha_bar = {budget} at t = {t}")]
    Sigma { t: usize, sigma_sq: f64, budget: f64 },
}

/// Parameters a schedule is built from. Serialized in experiment configs and
/// hashed into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta_ddim: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            eta_ddim: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// `sigma[t]` for `t = 0..=T`; `sigma[0]` is unused and zero.
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced β between `beta_start` and `beta_end` over `T` steps.
    pub fn linear(config: ScheduleConfig) -> Result<Self, ScheduleError> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            eta_ddim,
        } = config;
        if steps == 0 {
            return Err(ScheduleError::Config("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if !(0.0..=1.0).contains(&eta_ddim) {
            return Err(ScheduleError::Config(format!(
                "eta_ddim must lie in [0, 1], got {eta_ddim}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for k in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
            };
            let prev = alpha_bar[k];
            alpha_bar.push(prev * (1.0 - beta));
        }
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            sigma[t] = ddim_sigma(eta_ddim, alpha_bar[t], alpha_bar[t - 1]);
        }
        Ok(Self {
            config,
            alpha_bar,
            sigma,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn eta(&self) -> f64 {
        self.config.eta_ddim
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// σ for a jump from `t` to an earlier `t_prev` (strided sampling).
    pub fn sigma_between(&self, t: usize, t_prev: usize) -> f64 {
        ddim_sigma(self.eta(), self.alpha_bar[t], self.alpha_bar[t_prev])
    }

    /// Stable identifier of the parameters that determine `alpha_bar`.
    pub fn hash(&self) -> String {
        let c = &self.config;
        let canonical = format!(
            "linear;T={};beta_start={:e};beta_end={:e}",
            c.steps, c.beta_start, c.beta_end
        );
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<(), ScheduleError> {
        if t < lo || t > self.steps() {
            return Err(ScheduleError::Timestep {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn noise_forward(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, ScheduleError> {
        self.check_t(t, 0)?;
        if x0.shape() != eps.shape() {
            return Err(ScheduleError::Shape(x0.shape().to_vec(), eps.shape().to_vec()));
        }
        let a = self.alpha_bar[t];
        let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| ca * x + cb * e)
            .collect();
        Ok(Tensor::new(data, x0.shape().to_vec()).expect("shape preserved"))
    }

    /// Deterministic part of one DDIM step from `t` to `t − 1`.
    pub fn ddim_mu(&self, x_t: &Tensor, x0_hat: &Tensor, t: usize) -> Result<Tensor, ScheduleError> {
        self.check_t(t, 1)?;
        self.ddim_mu_between(x_t, x0_hat, t, t - 1, self.sigma[t])
    }

    /// Deterministic part of a DDIM step from `t` to `t_prev < t` with
    /// stochastic scale `sigma`.
    pub fn ddim_mu_between(
        &self,
        x_t: &Tensor,
        x0_hat: &Tensor,
        t: usize,
        t_prev: usize,
        sigma: f64,
    ) -> Result<Tensor, ScheduleError> {
        self.check_t(t, 1)?;
        if t_prev >= t {
            return Err(ScheduleError::Timestep {
                t: t_prev,
                lo: 0,
                hi: t - 1,
            });
        }
        if x_t.shape() != x0_hat.shape() {
            return Err(ScheduleError::Shape(x_t.shape().to_vec(), x0_hat.shape().to_vec()));
        }
        let (a_t, a_prev) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        let budget = 1.0 - a_prev;
        let sigma_sq = sigma * sigma;
        if sigma_sq > budget + 1e-15 {
            return Err(ScheduleError::Sigma { t, sigma_sq, budget });
        }
        let dir = (budget - sigma_sq).max(0.0).sqrt();
        let (sa_t, sa_prev, s1_t) = (a_t.sqrt(), a_prev.sqrt(), (1.0 - a_t).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(x0_hat.data())
            .map(|(&x, &x0)| sa_prev * x0 + dir * (x - sa_t * x0) / s1_t)
            .collect();
        Ok(Tensor::new(data, x_t.shape().to_vec()).expect("shape preserved"))
    }

    /// Evenly spaced descending timesteps from `T` down to `1`.
    pub fn strided_timesteps(&self, count: usize) -> Vec<usize> {
        strided_timesteps(self.steps(), count)
    }
}

fn ddim_sigma(eta: f64, a_t: f64, a_prev: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let v = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev);
    eta * v.max(0.0).sqrt()
}

/// `count` distinct timesteps in `[1, total]`, descending, always including
/// `total` and (when `count > 1`) `1`.
pub fn strided_timesteps(total: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, total);
    if count == 1 {
        return vec![total];
    }
    let mut ts: Vec<usize> = (0..count)
        .map(|k| 1 + ((total - 1) as f64 * k as f64 / (count - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}
