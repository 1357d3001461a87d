//! Exact noisy-Bethe gap on three-variable discrete chains.
//!
//! For a Markov chain `u¹ → u² → u³` observed through a per-variable noise
//! channel, the true noisy joint and the Bethe-style estimator
//! `(Σa)(Σb)/(Σc)` are both computed by full enumeration, and their difference
//! is compared against `Z·Cov_q[a/c, b/c]` with
//!
//! * `a(u²) = Σ_{u¹} p(u¹,u²) p(o¹|u¹) p(o²|u²)`
//! * `b(u²) = Σ_{u³} p(u²,u³) p(o²|u²) p(o³|u³)`
//! * `c(u²) = p(u²) p(o²|u²)`, `Z = Σc`, `q = c/Z`.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

pub const MAX_ALPHABET: usize = 6;
const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GapError {
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("alphabet size {0} outside [2, {MAX_ALPHABET}]")]
    Alphabet(usize),
    #[error("observation {obs:?} outside alphabet of size {k}")]
    Observation { obs: [usize; 3], k: usize },
    #[error("boundary evidence c(u2 = {u2}) is zero")]
    ZeroEvidence { u2: usize },
}

fn check_alphabet(k: usize) -> Result<(), GapError> {
    if (2..=MAX_ALPHABET).contains(&k) {
        Ok(())
    } else {
        Err(GapError::Alphabet(k))
    }
}

fn check_distribution(name: &str, row: &[f64]) -> Result<(), GapError> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(GapError::Invalid(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(GapError::Invalid(format!("{name} sums to {sum}")));
    }
    Ok(())
}

fn check_table(name: &str, k: usize, table: &[f64]) -> Result<(), GapError> {
    if table.len() != k * k {
        return Err(GapError::Invalid(format!(
            "{name} has {} entries, expected {}",
            table.len(),
            k * k
        )));
    }
    for (i, row) in table.chunks(k).enumerate() {
        check_distribution(&format!("{name} row {i}"), row)?;
    }
    Ok(())
}

/// Strictly positive random distribution of length `k`.
fn random_distribution<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / sum).collect()
}

fn random_table<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).flat_map(|_| random_distribution(rng, k)).collect()
}

/// Row-major `K×K` table whose rows put `stay` on the diagonal and spread the
/// rest evenly.
fn symmetric_table(k: usize, stay: f64) -> Vec<f64> {
    let off = (1.0 - stay) / (k - 1) as f64;
    let mut t = vec![off; k * k];
    for i in 0..k {
        t[i * k + i] = stay;
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChain {
    k: usize,
    p1: Vec<f64>,
    /// `p(u²|u¹)`, row `u¹`.
    t12: Vec<f64>,
    /// `p(u³|u²)`, row `u²`.
    t23: Vec<f64>,
}

impl DiscreteChain {
    pub fn new(k: usize, p1: Vec<f64>, t12: Vec<f64>, t23: Vec<f64>) -> Result<Self, GapError> {
        check_alphabet(k)?;
        if p1.len() != k {
            return Err(GapError::Invalid(format!("p1 has {} entries, expected {k}", p1.len())));
        }
        check_distribution("p1", &p1)?;
        check_table("T12", k, &t12)?;
        check_table("T23", k, &t23)?;
        Ok(Self { k, p1, t12, t23 })
    }

    /// Uniform start and transitions that keep the symbol with probability `stay`.
    pub fn sticky(k: usize, stay: f64) -> Result<Self, GapError> {
        check_alphabet(k)?;
        let t = symmetric_table(k, stay);
        Self::new(k, vec![1.0 / k as f64; k], t.clone(), t)
    }

    /// Random start with uniform transitions: `u²` is independent of `u¹` and
    /// `u³` is independent of `u²`.
    pub fn independent<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self, GapError> {
        check_alphabet(k)?;
        let t = vec![1.0 / k as f64; k * k];
        Self::new(k, random_distribution(rng, k), t.clone(), t)
    }

    /// Strictly positive random chain.
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self, GapError> {
        check_alphabet(k)?;
        let p1 = random_distribution(rng, k);
        let t12 = random_table(rng, k);
        let t23 = random_table(rng, k);
        Self::new(k, p1, t12, t23)
    }

    pub fn alphabet(&self) -> usize {
        self.k
    }

    pub fn p12(&self, u1: usize, u2: usize) -> f64 {
        self.p1[u1] * self.t12[u1 * self.k + u2]
    }

    pub fn p2(&self, u2: usize) -> f64 {
        (0..self.k).map(|u1| self.p12(u1, u2)).sum()
    }

    pub fn p23(&self, u2: usize, u3: usize) -> f64 {
        self.p2(u2) * self.t23[u2 * self.k + u3]
    }

    pub fn joint(&self, u1: usize, u2: usize, u3: usize) -> f64 {
        self.p12(u1, u2) * self.t23[u2 * self.k + u3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseChannel {
    k: usize,
    /// `p(u_t|u_0)`, row `u_0`.
    table: Vec<f64>,
}

impl NoiseChannel {
    pub fn new(k: usize, table: Vec<f64>) -> Result<Self, GapError> {
        check_alphabet(k)?;
        check_table("channel", k, &table)?;
        Ok(Self { k, table })
    }

    pub fn identity(k: usize) -> Result<Self, GapError> {
        Self::flip(k, 0.0)
    }

    /// Keeps the symbol with probability `1 − λ`, otherwise moves to one of
    /// the other `K − 1` symbols uniformly.
    pub fn flip(k: usize, lambda: f64) -> Result<Self, GapError> {
        check_alphabet(k)?;
        let max = (k - 1) as f64 / k as f64;
        if !(0.0..=max).contains(&lambda) {
            return Err(GapError::Invalid(format!(
                "flip strength {lambda} outside [0, {max}]"
            )));
        }
        Self::new(k, symmetric_table(k, 1.0 - lambda))
    }

    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self, GapError> {
        check_alphabet(k)?;
        Self::new(k, random_table(rng, k))
    }

    pub fn prob(&self, observed: usize, clean: usize) -> f64 {
        self.table[clean * self.k + observed]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectGap {
    pub p_true: f64,
    pub p_hat: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceGap {
    pub z: f64,
    pub cov: f64,
    pub delta_formula: f64,
}

fn check_obs(chain: &DiscreteChain, channel: &NoiseChannel, obs: [usize; 3]) -> Result<(), GapError> {
    if channel.k != chain.k {
        return Err(GapError::Invalid(format!(
            "channel alphabet {} differs from chain alphabet {}",
            channel.k, chain.k
        )));
    }
    if obs.iter().any(|&o| o >= chain.k) {
        return Err(GapError::Observation { obs, k: chain.k });
    }
    Ok(())
}

/// The messages `(a, b, c)` for every value of `u²`.
fn messages(chain: &DiscreteChain, ch: &NoiseChannel, [o1, o2, o3]: [usize; 3]) -> Vec<(f64, f64, f64)> {
    let k = chain.k;
    (0..k)
        .map(|u2| {
            let e2 = ch.prob(o2, u2);
            let a: f64 = (0..k).map(|u1| chain.p12(u1, u2) * ch.prob(o1, u1) * e2).sum();
            let b: f64 = (0..k).map(|u3| chain.p23(u2, u3) * e2 * ch.prob(o3, u3)).sum();
            (a, b, chain.p2(u2) * e2)
        })
        .collect()
}

/// Direct enumeration of the true noisy joint and the Bethe-style estimator.
pub fn gap_direct(chain: &DiscreteChain, channel: &NoiseChannel, obs: [usize; 3]) -> Result<DirectGap, GapError> {
    check_obs(chain, channel, obs)?;
    let k = chain.k;
    let [o1, o2, o3] = obs;
    let mut p_true = 0.0;
    for u1 in 0..k {
        for u2 in 0..k {
            for u3 in 0..k {
                p_true += chain.joint(u1, u2, u3)
                    * channel.prob(o1, u1)
                    * channel.prob(o2, u2)
                    * channel.prob(o3, u3);
            }
        }
    }
    let (sa, sb, sc) = messages(chain, channel, obs)
        .into_iter()
        .fold((0.0, 0.0, 0.0), |(x, y, z), (a, b, c)| (x + a, y + b, z + c));
    let p_hat = if sc == 0.0 { 0.0 } else { sa * sb / sc };
    Ok(DirectGap {
        p_true,
        p_hat,
        delta: p_true - p_hat,
    })
}

/// The gap as `Z·Cov_q[a/c, b/c]` under `q = c/Z`.
pub fn gap_covariance(
    chain: &DiscreteChain,
    channel: &NoiseChannel,
    obs: [usize; 3],
) -> Result<CovarianceGap, GapError> {
    check_obs(chain, channel, obs)?;
    let msgs = messages(chain, channel, obs);
    if let Some(u2) = msgs.iter().position(|&(_, _, c)| c == 0.0) {
        return Err(GapError::ZeroEvidence { u2 });
    }
    let z: f64 = msgs.iter().map(|m| m.2).sum();
    let (mut eab, mut ea, mut eb) = (0.0, 0.0, 0.0);
    for &(a, b, c) in &msgs {
        let q = c / z;
        let (ra, rb) = (a / c, b / c);
        eab += q * ra * rb;
        ea += q * ra;
        eb += q * rb;
    }
    let cov = eab - ea * eb;
    Ok(CovarianceGap {
        z,
        cov,
        delta_formula: z * cov,
    })
}

pub fn all_observations(k: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..k * k * k).map(move |i| [i / (k * k), (i / k) % k, i % k])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub strength: f64,
    pub max_abs_delta: f64,
}

/// Worst-case `|Δ|` over every observation, per flip strength.
pub fn gap_sweep(chain: &DiscreteChain, strengths: &[f64]) -> Result<Vec<SweepRow>, GapError> {
    strengths
        .iter()
        .map(|&strength| {
            let channel = NoiseChannel::flip(chain.k, strength)?;
            let mut max_abs_delta: f64 = 0.0;
            for obs in all_observations(chain.k) {
                max_abs_delta = max_abs_delta.max(gap_direct(chain, &channel, obs)?.delta.abs());
            }
            Ok(SweepRow {
                strength,
                max_abs_delta,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Strictly positive random start, transitions and channel.
    #[default]
    Random,
    /// Uniform start and sticky transitions.
    Sticky,
    /// Transitions that ignore the previous symbol.
    Independent,
}

impl std::str::FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "sticky" => Ok(Self::Sticky),
            "independent" => Ok(Self::Independent),
            other => Err(format!("unknown structure `{other}` (random, sticky, independent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    /// Fixed alphabet size; random in `[2, MAX_ALPHABET]` when `None`.
    pub alphabet: Option<usize>,
    pub structure: Structure,
    /// Flip strength as a fraction of its maximum `(K−1)/K`; a random
    /// strictly positive channel when `None`.
    pub strength: Option<f64>,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            alphabet: None,
            structure: Structure::Random,
            strength: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub k: usize,
    pub obs: [usize; 3],
    pub delta_direct: f64,
    pub delta_formula: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub rows: Vec<TrialRow>,
    /// Trials whose observation had zero boundary evidence somewhere.
    pub skipped: Vec<(usize, [usize; 3])>,
}

impl VerifyReport {
    /// NaN if any trial produced NaN.
    pub fn max_abs_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.abs_diff).fold(0.0, nan_max)
    }

    pub fn max_abs_delta(&self) -> f64 {
        self.rows.iter().map(|r| r.delta_direct.abs()).fold(0.0, nan_max)
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Cross-checks the two gap computations on random instances.
pub fn verify_random(cfg: &VerifyConfig) -> Result<VerifyReport, GapError> {
    if let Some(k) = cfg.alphabet {
        check_alphabet(k)?;
    }
    if let Some(s) = cfg.strength {
        if !(0.0..=1.0).contains(&s) {
            return Err(GapError::Invalid(format!("strength fraction {s} outside [0, 1]")));
        }
    }
    let mut rng = crate::rng::seeded(cfg.seed);
    let mut report = VerifyReport::default();
    for trial in 0..cfg.trials {
        let k = cfg.alphabet.unwrap_or_else(|| rng.random_range(2..=MAX_ALPHABET));
        let chain = match cfg.structure {
            Structure::Random => DiscreteChain::random(k, &mut rng)?,
            Structure::Sticky => DiscreteChain::sticky(k, rng.random_range(0.5..0.99))?,
            Structure::Independent => DiscreteChain::independent(k, &mut rng)?,
        };
        let channel = match cfg.strength {
            Some(s) => NoiseChannel::flip(k, s * (k - 1) as f64 / k as f64)?,
            None => NoiseChannel::random(k, &mut rng)?,
        };
        let obs = [
            rng.random_range(0..k),
            rng.random_range(0..k),
            rng.random_range(0..k),
        ];
        let direct = gap_direct(&chain, &channel, obs)?;
        match gap_covariance(&chain, &channel, obs) {
            Ok(formula) => report.rows.push(TrialRow {
                trial,
                k,
                obs,
                delta_direct: direct.delta,
                delta_formula: formula.delta_formula,
                abs_diff: (direct.delta - formula.delta_formula).abs(),
            }),
            Err(GapError::ZeroEvidence { .. }) => report.skipped.push((trial, obs)),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
