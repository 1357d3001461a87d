//! Compositional samplers.
//!
//! * [`compose_guided`]: every chunk is denoised in one batch; on each DDIM
//!   step the joint message-passing loss on the Tweedie estimates is pulled
//!   back to `x_t` and the update is placed on the sphere of radius `√s·σ_t`
//!   around the DDIM mean, in a direction interpolated between the sampling
//!   noise and the normalized descent direction.
//! * [`compose_diffcollage`]: joint denoising of the whole plan with the
//!   factor-product / marginal-quotient score.
//! * [`compose_independent`]: per-chunk sampling with no cross-chunk terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BoundaryResiduals, ChainError, FactorChain};
use crate::denoiser::{Denoiser, DenoiserError, EmaPair};
use crate::gradtape::{Tape, TapeError, Tensor};
use crate::messages::{joint_loss, AsyncConfig, LossParts, MessageError, MessageWeights, SyncSystem};
use crate::rng::{gaussian_vec, seeded};
use crate::schedule::{NoiseSchedule, ScheduleError};

/// Gradient norms below this skip guidance for the step.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("non-finite state at t = {t} (step {step})")]
    NonFinite { t: usize, step: usize },
    #[error("diffcollage needs a boundary model when n > 1")]
    MissingBoundaryModel,
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Messages(#[from] MessageError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Interpolation weight between sampling noise (0) and descent (1).
    pub g_r: f64,
    /// Number of DDIM steps; fewer than `T` uses an evenly strided subsequence.
    pub steps: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            g_r: 0.6,
            steps: 300,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(0.0..=1.0).contains(&self.g_r) {
            return Err(SamplerError::Config(format!(
                "g_r must lie in [0, 1], got {}",
                self.g_r
            )));
        }
        if self.steps == 0 {
            return Err(SamplerError::Config("steps must be positive".into()));
        }
        Ok(())
    }

    /// Entries of the stacked chunk state, the `s` in the sphere radius `√s·σ_t`.
    pub fn element_count(chain: &FactorChain) -> usize {
        chain.element_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct NfeCount {
    /// Forward passes of the chunk model (EMA and latest each count once).
    pub chunk_model: usize,
    /// Forward passes of the single-frame boundary model.
    pub boundary_model: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub sigma: f64,
    pub sync_loss: f64,
    pub async_loss: f64,
    /// Residuals of the Tweedie estimate that the loss saw at this step.
    pub residuals: BoundaryResiduals,
    /// Cumulative chunk-model forward passes after this step.
    pub nfe: usize,
    pub guided: bool,
    /// `√s·σ` for this step.
    pub radius: f64,
    /// `‖x_{t_prev} − μ‖`.
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub records: Vec<StepRecord>,
    /// Final `[n, F·d]` chunk state.
    pub chunks: Tensor,
    /// Final merged `[m, d]` plan.
    pub plan: Tensor,
    pub nfe: NfeCount,
    pub skipped_guidance: usize,
}

impl SampleTrace {
    pub fn residuals(&self, chain: &FactorChain) -> BoundaryResiduals {
        chain
            .boundary_residuals(&self.chunks)
            .expect("trace chunks have chain shape")
    }
}

/// Message-passing objective used for guidance.
#[derive(Debug, Clone, Copy)]
pub struct Messages<'a> {
    pub sync: &'a SyncSystem,
    pub async_cfg: AsyncConfig,
    pub weights: MessageWeights,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn timestep_pairs(schedule: &NoiseSchedule, steps: usize) -> Vec<(usize, usize)> {
    let ts = schedule.strided_timesteps(steps);
    ts.iter()
        .enumerate()
        .map(|(k, &t)| (t, ts.get(k + 1).copied().unwrap_or(0)))
        .collect()
}

/// `μ + r·d/‖d‖`, or `μ` when the radius or direction vanishes.
fn sphere_step(mu: &Tensor, radius: f64, direction: &[f64]) -> Tensor {
    let dn = norm(direction);
    if radius == 0.0 || dn == 0.0 {
        return mu.clone();
    }
    let data = mu
        .data()
        .iter()
        .zip(direction)
        .map(|(m, d)| m + radius * d / dn)
        .collect();
    Tensor::new(data, mu.shape().to_vec()).expect("shape preserved")
}

struct GuidedStep {
    next: Tensor,
    mu: Tensor,
    x0: Tensor,
    parts: LossParts,
    guided: bool,
}

/// One guided DDIM update from `x` at `t` to `t_prev` with sampling noise `eps`.
#[allow(clippy::too_many_arguments)]
fn guided_step(
    pair: &EmaPair,
    chain: &FactorChain,
    schedule: &NoiseSchedule,
    messages: Messages<'_>,
    x: &Tensor,
    (t, t_prev): (usize, usize),
    g_r: f64,
    eps: &[f64],
) -> Result<GuidedStep, SamplerError> {
    let sigma = schedule.sigma_between(t, t_prev);
    let radius = (x.len() as f64).sqrt() * sigma;

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let x0 = pair.ema.predict_on(&mut tape, xv, t)?;
    let latest = tape.leaf(pair.latest.predict_x0(x, t)?);
    let (loss, parts) = joint_loss(
        &mut tape,
        messages.sync,
        &messages.async_cfg,
        chain,
        x0,
        latest,
        messages.weights,
    )?;
    let grad = tape.backward(loss, &[xv])?.remove(0);
    let x0 = tape.value(x0).clone();

    let mu = schedule.ddim_mu_between(x, &x0, t, t_prev, sigma)?;
    let d_sample: Vec<f64> = eps.iter().map(|e| sigma * e).collect();
    let gnorm = grad.norm();
    let guided = gnorm >= MIN_GRAD_NORM;
    let d_m: Vec<f64> = if guided {
        d_sample
            .iter()
            .zip(grad.data())
            .map(|(&ds, &gv)| {
                let d_star = -radius * gv / gnorm;
                ds + g_r * (d_star - ds)
            })
            .collect()
    } else {
        d_sample
    };
    Ok(GuidedStep {
        next: sphere_step(&mu, radius, &d_m),
        mu,
        x0,
        parts,
        guided,
    })
}

/// Guided compositional sampling over all chunks.
pub fn compose_guided(
    pair: &EmaPair,
    chain: &FactorChain,
    schedule: &NoiseSchedule,
    messages: Messages<'_>,
    g: &GuidanceConfig,
) -> Result<SampleTrace, SamplerError> {
    g.validate()?;
    messages.async_cfg.validate()?;
    messages.weights.validate()?;
    let mut rng = seeded(g.seed);
    let count = GuidanceConfig::element_count(chain);
    let mut x = chain.split_noise(&mut rng);
    let mut records = Vec::new();
    let mut nfe = 0;
    let mut skipped = 0;

    for (step, (t, t_prev)) in timestep_pairs(schedule, g.steps).into_iter().enumerate() {
        let sigma = schedule.sigma_between(t, t_prev);
        let radius = (count as f64).sqrt() * sigma;

        let eps = gaussian_vec(&mut rng, count);
        let out = guided_step(pair, chain, schedule, messages, &x, (t, t_prev), g.g_r, &eps)?;
        nfe += 2;
        if !out.guided {
            skipped += 1;
        }
        let GuidedStep {
            next,
            mu,
            x0: x0_val,
            parts,
            guided,
        } = out;
        if !next.all_finite() {
            return Err(SamplerError::NonFinite { t, step });
        }
        records.push(StepRecord {
            t,
            t_prev,
            sigma,
            sync_loss: parts.sync,
            async_loss: parts.asynchronous,
            residuals: chain.boundary_residuals(&x0_val)?,
            nfe,
            guided,
            radius,
            step_norm: norm(&sub(next.data(), mu.data())),
        });
        x = next;
    }

    let plan = chain.merge(&x)?;
    Ok(SampleTrace {
        records,
        chunks: x,
        plan,
        nfe: NfeCount {
            chunk_model: nfe,
            boundary_model: 0,
        },
        skipped_guidance: skipped,
    })
}

/// Every chunk sampled from its own noise with the same sphere-constrained
/// update and no guidance.
pub fn compose_independent(
    pair: &EmaPair,
    chain: &FactorChain,
    schedule: &NoiseSchedule,
    g: &GuidanceConfig,
) -> Result<SampleTrace, SamplerError> {
    g.validate()?;
    let mut rng = seeded(g.seed);
    let count = chain.element_count();
    let mut x = Tensor::new(gaussian_vec(&mut rng, count), chain.chunk_shape().to_vec())
        .expect("chunk shape");
    let mut records = Vec::new();
    let mut nfe = 0;

    for (step, (t, t_prev)) in timestep_pairs(schedule, g.steps).into_iter().enumerate() {
        let sigma = schedule.sigma_between(t, t_prev);
        let radius = (count as f64).sqrt() * sigma;
        let x0 = pair.ema.predict_x0(&x, t)?;
        nfe += 1;
        let mu = schedule.ddim_mu_between(&x, &x0, t, t_prev, sigma)?;
        let eps = gaussian_vec(&mut rng, count);
        let d_sample: Vec<f64> = eps.iter().map(|e| sigma * e).collect();
        let next = sphere_step(&mu, radius, &d_sample);
        if !next.all_finite() {
            return Err(SamplerError::NonFinite { t, step });
        }
        records.push(StepRecord {
            t,
            t_prev,
            sigma,
            sync_loss: f64::NAN,
            async_loss: f64::NAN,
            residuals: chain.boundary_residuals(&x0)?,
            nfe,
            guided: false,
            radius,
            step_norm: norm(&sub(next.data(), mu.data())),
        });
        x = next;
    }

    let plan = chain.merge(&x)?;
    Ok(SampleTrace {
        records,
        chunks: x,
        plan,
        nfe: NfeCount {
            chunk_model: nfe,
            boundary_model: 0,
        },
        skipped_guidance: 0,
    })
}

/// Plan-frame indices shared by two chunks.
fn shared_frames(chain: &FactorChain) -> Vec<usize> {
    (1..chain.factors())
        .map(|i| chain.plan_index(i, 0))
        .collect()
}

/// Score of a Gaussian-noised variable given its clean estimate.
fn score(x_t: f64, x0: f64, alpha_bar: f64) -> f64 {
    -(x_t - alpha_bar.sqrt() * x0) / (1.0 - alpha_bar)
}

/// Joint denoising of the full `m`-frame plan with the composed score
///
/// `Σ_i ∇log p(x^i_t) + Σ_j (1 − d_j)·∇log p(u^j_t)`
///
/// where `d_j = 2` for frames shared by two chunks and `1` otherwise. Each
/// model's clean estimate is turned into a score, the scores are combined on
/// the plan, and the result is turned back into an equivalent clean estimate
/// for a standard DDIM step `μ + σ·ε`.
pub fn compose_diffcollage(
    chunk_model: &Denoiser,
    boundary_model: Option<&Denoiser>,
    chain: &FactorChain,
    schedule: &NoiseSchedule,
    g: &GuidanceConfig,
) -> Result<SampleTrace, SamplerError> {
    g.validate()?;
    let shared = shared_frames(chain);
    if !shared.is_empty() && boundary_model.is_none() {
        return Err(SamplerError::MissingBoundaryModel);
    }
    let (m, d, f) = (chain.plan_frames(), chain.dim(), chain.frames());
    let mut rng = seeded(g.seed);
    let mut z = Tensor::new(gaussian_vec(&mut rng, m * d), vec![m, d]).expect("plan shape");
    let mut records = Vec::new();
    let mut nfe = NfeCount::default();

    for (step, (t, t_prev)) in timestep_pairs(schedule, g.steps).into_iter().enumerate() {
        let sigma = schedule.sigma_between(t, t_prev);
        let a = schedule.alpha_bar(t);
        let chunks = chain.split_plan(&z)?;
        let x0_chunks = chunk_model.predict_x0(&chunks, t)?;
        nfe.chunk_model += 1;

        let mut composed = vec![0.0; m * d];
        for i in 0..chain.factors() {
            let row = x0_chunks.row(i);
            let x_row = chunks.row(i);
            for k in 0..f {
                let p = chain.plan_index(i, k);
                for j in 0..d {
                    composed[p * d + j] += score(x_row[k * d + j], row[k * d + j], a);
                }
            }
        }
        if let (Some(bm), false) = (boundary_model, shared.is_empty()) {
            let mut frames = Vec::with_capacity(shared.len() * d);
            for &p in &shared {
                frames.extend_from_slice(z.row(p));
            }
            let frames = Tensor::new(frames, vec![shared.len(), d]).expect("frames");
            let marg = bm.predict_x0(&frames, t)?;
            nfe.boundary_model += 1;
            for (q, &p) in shared.iter().enumerate() {
                for j in 0..d {
                    // (1 − d_j) with d_j = 2.
                    composed[p * d + j] -= score(z.row(p)[j], marg.row(q)[j], a);
                }
            }
        }
        // Back to an equivalent clean estimate: x0 = (x_t + (1 − ᾱ)·score)/√ᾱ.
        let x0_plan: Vec<f64> = z
            .data()
            .iter()
            .zip(&composed)
            .map(|(&x, &s)| (x + (1.0 - a) * s) / a.sqrt())
            .collect();
        let x0_plan = Tensor::new(x0_plan, vec![m, d]).expect("plan shape");
        let mu = schedule.ddim_mu_between(&z, &x0_plan, t, t_prev, sigma)?;
        let eps = gaussian_vec(&mut rng, m * d);
        let next_data: Vec<f64> = mu.data().iter().zip(&eps).map(|(u, e)| u + sigma * e).collect();
        let next = Tensor::new(next_data, vec![m, d]).expect("plan shape");
        if !next.all_finite() {
            return Err(SamplerError::NonFinite { t, step });
        }
        records.push(StepRecord {
            t,
            t_prev,
            sigma,
            sync_loss: f64::NAN,
            async_loss: f64::NAN,
            residuals: chain.boundary_residuals(&chain.split_plan(&x0_plan)?)?,
            nfe: nfe.chunk_model,
            guided: false,
            radius: sigma * ((m * d) as f64).sqrt(),
            step_norm: norm(&sub(next.data(), mu.data())),
        });
        z = next;
    }

    let chunks = chain.split_plan(&z)?;
    Ok(SampleTrace {
        records,
        chunks,
        plan: z,
        nfe,
        skipped_guidance: 0,
    })
}
