//! Boundary-agreement objectives on Tweedie estimates.
//!
//! Two objectives are provided, both recorded on a [`Tape`] so their gradient
//! can be pulled back through the denoiser:
//!
//! * the synchronous residual `‖Σ⁻¹·x − η‖` of the chain's Gaussian
//!   constraint system, and
//! * the asynchronous loss, which compares each boundary of the EMA estimate
//!   against a stop-gradient target taken from the latest-model estimate, with
//!   a discount `γ` that decays away from the start (forward messages) or the
//!   goal (backward messages).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{FactorChain, Selector};
use crate::gradtape::{Tape, TapeError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MessageError {
    #[error("boundary variances must be positive, got c[{index}] = {value}")]
    Variance { index: usize, value: f64 },
    #[error("expected {expected} boundary variances, got {got}")]
    VarianceCount { expected: usize, got: usize },
    #[error("discount must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("message weights must be non-negative, got ({0}, {1})")]
    Weights(f64, f64),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// How a residual vector is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Squared,
    Plain,
}

impl Norm {
    fn reduce(self, tape: &mut Tape, v: Var) -> Result<Var, TapeError> {
        match self {
            Norm::Squared => tape.sum_squares(v),
            Norm::Plain => tape.l2norm(v),
        }
    }

    fn of(self, v: &[f64]) -> f64 {
        let sq: f64 = v.iter().map(|x| x * x).sum();
        match self {
            Norm::Squared => sq,
            Norm::Plain => sq.sqrt(),
        }
    }
}

/// Precision matrix and potential vector of the chain's Gaussian constraint
/// system.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncSystem {
    factors: usize,
    frames: usize,
    dim: usize,
    variances: Vec<f64>,
    start: Vec<f64>,
    goal: Vec<f64>,
    precision: Tensor,
    eta: Tensor,
}

impl SyncSystem {
    /// Builds the system with per-boundary variances `c_0..c_n` (start anchor,
    /// the `n−1` transitions, goal anchor).
    pub fn build(chain: &FactorChain, variances: &[f64]) -> Result<Self, MessageError> {
        let n = chain.factors();
        if variances.len() != n + 1 {
            return Err(MessageError::VarianceCount {
                expected: n + 1,
                got: variances.len(),
            });
        }
        if let Some((index, &value)) = variances.iter().enumerate().find(|(_, &c)| !(c > 0.0)) {
            return Err(MessageError::Variance { index, value });
        }
        let (f, d) = (chain.frames(), chain.dim());
        let w = f * d;
        let size = n * w;
        let mut p = vec![0.0; size * size];
        let first = Selector::First.frame(f);
        let last = Selector::Last.frame(f);
        let idx = |chunk: usize, frame: usize, j: usize| chunk * w + frame * d + j;
        for i in 0..n {
            for j in 0..d {
                // A_iᵀA_i / c_i  and  B_iᵀB_i / c_{i+1}
                let a = idx(i, first, j);
                p[a * size + a] += 1.0 / variances[i];
                let b = idx(i, last, j);
                p[b * size + b] += 1.0 / variances[i + 1];
                if i + 1 < n {
                    // −B_iᵀA_{i+1} / c_{i+1} and its transpose.
                    let a_next = idx(i + 1, first, j);
                    p[b * size + a_next] -= 1.0 / variances[i + 1];
                    p[a_next * size + b] -= 1.0 / variances[i + 1];
                }
            }
        }
        let mut eta = vec![0.0; size];
        for j in 0..d {
            eta[idx(0, first, j)] += chain.start()[j] / variances[0];
            eta[idx(n - 1, last, j)] += chain.goal()[j] / variances[n];
        }
        Ok(Self {
            factors: n,
            frames: f,
            dim: d,
            variances: variances.to_vec(),
            start: chain.start().to_vec(),
            goal: chain.goal().to_vec(),
            precision: Tensor::new(p, vec![size, size]).expect("square"),
            eta: Tensor::new(eta, vec![size, 1]).expect("column"),
        })
    }

    /// System with all variances equal to one.
    pub fn unit(chain: &FactorChain) -> Self {
        Self::build(chain, &vec![1.0; chain.factors() + 1]).expect("unit variances are valid")
    }

    pub fn size(&self) -> usize {
        self.factors * self.frames * self.dim
    }

    pub fn precision(&self) -> &Tensor {
        &self.precision
    }

    pub fn eta(&self) -> &Tensor {
        &self.eta
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// `Σ⁻¹·x` using only the nonzero blocks.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.size());
        let (n, f, d) = (self.factors, self.frames, self.dim);
        let w = f * d;
        let c = &self.variances;
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for j in 0..d {
                let a = i * w + j;
                let b = i * w + (f - 1) * d + j;
                y[a] += x[a] / c[i];
                y[b] += x[b] / c[i + 1];
                if i > 0 {
                    y[a] -= x[(i - 1) * w + (f - 1) * d + j] / c[i];
                }
                if i + 1 < n {
                    y[b] -= x[(i + 1) * w + j] / c[i + 1];
                }
            }
        }
        y
    }

    /// `Σ⁻¹·x − η` without recording anything.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.apply(x);
        for (v, e) in r.iter_mut().zip(self.eta.data()) {
            *v -= e;
        }
        r
    }

    pub fn loss_value(&self, x: &[f64], norm: Norm) -> f64 {
        norm.of(&self.residual(x))
    }
}

/// Records `‖Σ⁻¹·vec(x0) − η‖` for a `[n, F·d]` estimate.
///
/// Only the first and last frame of each chunk have nonzero residual
/// entries, and each is a scaled boundary difference, e.g.
/// `(A_i x_i − B_{i−1} x_{i−1}) / c_i`. Forming the differences directly
/// (rather than `Σ⁻¹x` by matmul) keeps the loss exactly zero on consistent
/// chains.
pub fn sync_loss(tape: &mut Tape, system: &SyncSystem, x0: Var, norm: Norm) -> Result<Var, TapeError> {
    let (n, f, d) = (system.factors, system.frames, system.dim);
    let c = &system.variances;
    let frames = tape.reshape(x0, &[n * f, d])?;
    let firsts: Vec<usize> = (0..n).map(|i| i * f).collect();
    let lasts: Vec<usize> = (0..n).map(|i| i * f + f - 1).collect();
    let first = tape.select_rows(frames, &firsts)?;
    let last = tape.select_rows(frames, &lasts)?;
    let start = tape.leaf(Tensor::new(system.start.clone(), vec![1, d])?);
    let goal = tape.leaf(Tensor::new(system.goal.clone(), vec![1, d])?);

    // Frame each boundary row is compared against.
    let mut prev = vec![start];
    let mut next = Vec::with_capacity(n);
    if n > 1 {
        let before: Vec<usize> = lasts[..n - 1].to_vec();
        prev.push(tape.select_rows(frames, &before)?);
        let after: Vec<usize> = firsts[1..].to_vec();
        next.push(tape.select_rows(frames, &after)?);
    }
    next.push(goal);
    let prev = tape.concat(&prev, 0)?;
    let next = tape.concat(&next, 0)?;

    let inv = |range: std::ops::Range<usize>| -> Result<Tensor, TapeError> {
        Tensor::new(range.flat_map(|i| std::iter::repeat_n(1.0 / c[i], d)).collect(), vec![n, d])
    };
    let inv_in = tape.leaf(inv(0..n)?);
    let inv_out = tape.leaf(inv(1..n + 1)?);
    let d_in = tape.sub(first, prev)?;
    let d_out = tape.sub(last, next)?;
    let r_in = tape.mul(d_in, inv_in)?;
    let r_out = tape.mul(d_out, inv_out)?;
    let r = tape.concat(&[r_in, r_out], 0)?;
    norm.reduce(tape, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsyncConfig {
    pub gamma: f64,
    #[serde(default)]
    pub norm: Norm,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            norm: Norm::Squared,
        }
    }
}

impl AsyncConfig {
    pub fn new(gamma: f64, norm: Norm) -> Result<Self, MessageError> {
        let cfg = Self { gamma, norm };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(MessageError::Gamma(self.gamma));
        }
        Ok(())
    }
}

fn frame_row(tape: &mut Tape, frames_view: Var, chain: &FactorChain, chunk: usize, sel: Selector) -> Result<Var, TapeError> {
    let row = chunk * chain.frames() + sel.frame(chain.frames());
    tape.select_rows(frames_view, &[row])
}

/// Records the asynchronous loss. `latest` enters only through a
/// stop-gradient.
pub fn async_loss(
    tape: &mut Tape,
    cfg: &AsyncConfig,
    chain: &FactorChain,
    ema: Var,
    latest: Var,
) -> Result<Var, TapeError> {
    let (n, f, d) = (chain.factors(), chain.frames(), chain.dim());
    let ema_frames = tape.reshape(ema, &[n * f, d])?;
    let latest_sg = tape.stop_gradient(latest)?;
    let latest_frames = tape.reshape(latest_sg, &[n * f, d])?;
    let start = tape.leaf(Tensor::new(chain.start().to_vec(), vec![1, d]).expect("start"));
    let goal = tape.leaf(Tensor::new(chain.goal().to_vec(), vec![1, d]).expect("goal"));

    let first_ema = frame_row(tape, ema_frames, chain, 0, Selector::First)?;
    let diff = tape.sub(start, first_ema)?;
    let mut total = cfg.norm.reduce(tape, diff)?;

    for i in 1..n {
        // Boundary between chunk i−1 and chunk i (1-based boundary index i).
        let fwd_w = cfg.gamma.powi(i as i32);
        let target = frame_row(tape, latest_frames, chain, i - 1, Selector::Last)?;
        let incoming = frame_row(tape, ema_frames, chain, i, Selector::First)?;
        let diff = tape.sub(target, incoming)?;
        let term = cfg.norm.reduce(tape, diff)?;
        let term = tape.scale(term, fwd_w)?;
        total = tape.add(total, term)?;
    }
    for i in 1..n {
        let bwd_w = cfg.gamma.powi((n - i) as i32);
        let outgoing = frame_row(tape, ema_frames, chain, i - 1, Selector::Last)?;
        let target = frame_row(tape, latest_frames, chain, i, Selector::First)?;
        let diff = tape.sub(outgoing, target)?;
        let term = cfg.norm.reduce(tape, diff)?;
        let term = tape.scale(term, bwd_w)?;
        total = tape.add(total, term)?;
    }

    let last_ema = frame_row(tape, ema_frames, chain, n - 1, Selector::Last)?;
    let diff = tape.sub(last_ema, goal)?;
    let term = cfg.norm.reduce(tape, diff)?;
    tape.add(total, term)
}

/// Relative weights of the two objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageWeights {
    pub w_sync: f64,
    pub w_async: f64,
}

impl Default for MessageWeights {
    fn default() -> Self {
        Self::JOINT
    }
}

impl MessageWeights {
    pub const JOINT: Self = Self {
        w_sync: 1.0,
        w_async: 1.0,
    };
    pub const SYNC_ONLY: Self = Self {
        w_sync: 1.0,
        w_async: 0.0,
    };
    pub const ASYNC_ONLY: Self = Self {
        w_sync: 0.0,
        w_async: 1.0,
    };

    pub fn validate(&self) -> Result<(), MessageError> {
        if !(self.w_sync >= 0.0 && self.w_async >= 0.0) {
            return Err(MessageError::Weights(self.w_sync, self.w_async));
        }
        Ok(())
    }
}

/// Scalar values of each recorded objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub sync: f64,
    pub asynchronous: f64,
}

/// Records `w_sync·L_sync + w_async·L_async`. Terms with zero weight are not
/// recorded; their reported value is still evaluated.
pub fn joint_loss(
    tape: &mut Tape,
    system: &SyncSystem,
    cfg: &AsyncConfig,
    chain: &FactorChain,
    ema: Var,
    latest: Var,
    weights: MessageWeights,
) -> Result<(Var, LossParts), MessageError> {
    weights.validate()?;
    cfg.validate()?;
    let mut parts = LossParts::default();
    let mut total: Option<Var> = None;
    let sync = sync_loss(tape, system, ema, cfg.norm)?;
    parts.sync = tape.value(sync).item();
    if weights.w_sync > 0.0 {
        total = Some(tape.scale(sync, weights.w_sync)?);
    }
    let asy = async_loss(tape, cfg, chain, ema, latest)?;
    parts.asynchronous = tape.value(asy).item();
    if weights.w_async > 0.0 {
        let scaled = tape.scale(asy, weights.w_async)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_chain(s: f64, g: f64) -> FactorChain {
        FactorChain::new(2, 3, 1, vec![s], vec![g]).unwrap()
    }

    fn chunks(v: &[f64], n: usize) -> Tensor {
        Tensor::new(v.to_vec(), vec![n, v.len() / n]).unwrap()
    }

    #[test]
    fn unit_two_factor_blocks() {
        let sys = SyncSystem::unit(&scalar_chain(0.3, 0.9));
        let p = sys.precision().data();
        let expected = [
            [1., 0., 0., 0., 0., 0.],
            [0., 0., 0., 0., 0., 0.],
            [0., 0., 1., -1., 0., 0.],
            [0., 0., -1., 1., 0., 0.],
            [0., 0., 0., 0., 0., 0.],
            [0., 0., 0., 0., 0., 1.],
        ];
        for r in 0..6 {
            assert_eq!(&p[r * 6..r * 6 + 6], &expected[r]);
        }
        assert_eq!(sys.eta().data(), &[0.3, 0.0, 0.0, 0.0, 0.0, 0.9]);
    }

    #[test]
    fn tape_loss_matches_dense_system() {
        let mut rng = crate::rng::seeded(8);
        for (n, f, d) in [(1, 2, 1), (2, 3, 2), (4, 3, 2), (3, 5, 3)] {
            let chain = FactorChain::new(n, f, d, vec![0.3; d], vec![-0.7; d]).unwrap();
            let c: Vec<f64> = (0..=n).map(|i| 0.5 + 0.3 * i as f64).collect();
            let sys = SyncSystem::build(&chain, &c).unwrap();
            let x = crate::rng::gaussian_vec(&mut rng, n * f * d);
            let px = sys.precision().data().chunks(sys.size()).map(|row| {
                row.iter().zip(&x).map(|(p, v)| p * v).sum::<f64>()
            });
            let dense: f64 = px.zip(sys.eta().data()).map(|(a, e)| (a - e).powi(2)).sum();
            let mut tape = Tape::new();
            let v = tape.leaf(chunks(&x, n));
            let l = sync_loss(&mut tape, &sys, v, Norm::Squared).unwrap();
            assert!((tape.value(l).item() - dense).abs() < 1e-12 * dense.max(1.0));
            assert!((sys.loss_value(&x, Norm::Squared) - dense).abs() < 1e-12 * dense.max(1.0));
        }
    }

    #[test]
    fn consistent_chain_loss_is_exactly_zero_for_any_variances() {
        let chain = FactorChain::new(3, 3, 1, vec![0.1], vec![0.7]).unwrap();
        let sys = SyncSystem::build(&chain, &[0.3, 1.7, 0.9, 2.3]).unwrap();
        let x = [0.1, 0.33, 0.41, 0.41, 0.5, 0.63, 0.63, 0.2, 0.7];
        let mut tape = Tape::new();
        let v = tape.leaf(chunks(&x, 3));
        for norm in [Norm::Squared, Norm::Plain] {
            let l = sync_loss(&mut tape, &sys, v, norm).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
        assert!(sys.residual(&x).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn consistent_chain_has_zero_residual() {
        let sys = SyncSystem::unit(&scalar_chain(0.0, 1.0));
        let x = [0.0, 0.3, 0.5, 0.5, 0.8, 1.0];
        assert!(sys.residual(&x).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn hand_fixture_loss() {
        let chain = scalar_chain(0.0, 1.0);
        let sys = SyncSystem::unit(&chain);
        let x = [0.0, 0.4, 0.5, 0.7, 0.9, 1.0];
        let r = sys.residual(&x);
        let expected = [0.0, 0.0, -0.2, 0.2, 0.0, 0.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let v = tape.leaf(chunks(&x, 2));
        let l = sync_loss(&mut tape, &sys, v, Norm::Squared).unwrap();
        assert!((tape.value(l).item() - 0.08).abs() < 1e-12);
    }

    #[test]
    fn sync_loss_is_quadratic_in_scale() {
        let x = [0.1, 0.4, 0.55, 0.7, 0.9, 1.2];
        let a = SyncSystem::unit(&scalar_chain(0.2, 1.1)).loss_value(&x, Norm::Squared);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let b = SyncSystem::unit(&scalar_chain(0.4, 2.2)).loss_value(&x2, Norm::Squared);
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_variances() {
        let chain = scalar_chain(0.0, 1.0);
        assert!(matches!(
            SyncSystem::build(&chain, &[1.0, 0.0, 1.0]),
            Err(MessageError::Variance { index: 1, .. })
        ));
        assert!(matches!(
            SyncSystem::build(&chain, &[1.0, 1.0]),
            Err(MessageError::VarianceCount { .. })
        ));
    }

    #[test]
    fn async_hand_fixture() {
        let chain = scalar_chain(0.0, 1.0);
        let cfg = AsyncConfig::new(0.6, Norm::Squared).unwrap();
        let x = chunks(&[0.0, 0.25, 0.5, 0.6, 0.75, 1.0], 2);
        let mut tape = Tape::new();
        let ema = tape.leaf(x.clone());
        let latest = tape.leaf(x);
        let l = async_loss(&mut tape, &cfg, &chain, ema, latest).unwrap();
        assert!((tape.value(l).item() - 0.012).abs() < 1e-12);
        let g = tape.backward(l, &[latest]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_weights_select_terms() {
        let chain = scalar_chain(0.0, 1.0);
        let sys = SyncSystem::unit(&chain);
        let cfg = AsyncConfig::default();
        let x = chunks(&[0.1, 0.25, 0.5, 0.6, 0.75, 0.9], 2);
        let eval = |w: MessageWeights| {
            let mut tape = Tape::new();
            let e = tape.leaf(x.clone());
            let l = tape.leaf(x.clone());
            let (v, parts) = joint_loss(&mut tape, &sys, &cfg, &chain, e, l, w).unwrap();
            (tape.value(v).item(), parts)
        };
        let (joint, parts) = eval(MessageWeights::JOINT);
        assert_eq!(eval(MessageWeights::SYNC_ONLY).0, parts.sync);
        assert_eq!(eval(MessageWeights::ASYNC_ONLY).0, parts.asynchronous);
        assert!((joint - parts.sync - parts.asynchronous).abs() < 1e-15);
        assert!(matches!(
            MessageWeights {
                w_sync: -1.0,
                w_async: 1.0
            }
            .validate(),
            Err(MessageError::Weights(..))
        ));
    }

    #[test]
    fn gamma_range() {
        assert!(AsyncConfig::new(0.0, Norm::Squared).is_err());
        assert!(AsyncConfig::new(1.5, Norm::Squared).is_err());
        assert!(AsyncConfig::new(1.0, Norm::Plain).is_ok());
    }
}
