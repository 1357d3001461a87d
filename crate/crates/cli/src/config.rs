//! Experiment configuration, read from TOML. The grammar is documented in
//! `docs/formats.md`.

use std::path::{Path, PathBuf};

use chainplan::denoiser::Activation;
use chainplan::messages::Norm;
use chainplan::tasks::{arc_chord, SegmentConfig, TOLERANCE_FRACTION};
use chainplan::{AsyncConfig, FactorChain, MessageWeights, ModelConfig, ScheduleConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CHAINPLAN_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Arcs,
    Segments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Guided,
    Diffcollage,
    Independent,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Guided => "guided",
            Self::Diffcollage => "diffcollage",
            Self::Independent => "independent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sync,
    Async,
    Joint,
}

impl Scheme {
    /// `base` with the terms this scheme drops set to zero.
    pub fn weights(self, base: MessageWeights) -> MessageWeights {
        match self {
            Self::Sync => MessageWeights { w_async: 0.0, ..base },
            Self::Async => MessageWeights { w_sync: 0.0, ..base },
            Self::Joint => base,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sync => "sync",
            Self::Async => "async",
            Self::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSet {
    Ind,
    Ood,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,
    pub sigma_data: Option<f64>,
    pub lr: f64,
    pub ema_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub dataset_size: usize,
    pub seed: u64,
    /// Also train the single-frame model used by the diffcollage sampler.
    pub boundary_model: bool,
    /// Rows between loss-curve records.
    pub log_every: usize,
    /// Chunk CSV to train on instead of the generated task data.
    pub dataset: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            hidden: m.hidden,
            time_dim: m.time_dim,
            activation: m.activation,
            sigma_data: m.sigma_data,
            lr: 1e-4,
            ema_decay: 0.999,
            batch: 128,
            steps: 20_000,
            dataset_size: 20_000,
            seed: 0,
            boundary_model: false,
            log_every: 1,
            dataset: None,
        }
    }
}

impl TrainSection {
    pub fn model(&self, frames: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            frames,
            dim,
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            activation: self.activation,
            sigma_data: self.sigma_data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub factors: usize,
    pub frames: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self {
            factors: 3,
            frames: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub g_r: f64,
    pub gamma: f64,
    pub w_sync: f64,
    pub w_async: f64,
    pub norm: Norm,
    /// `c_0..c_n` of the synchronous system; all ones when empty.
    pub variances: Vec<f64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Guided,
            steps: 300,
            g_r: 0.6,
            gamma: 0.6,
            w_sync: 1.0,
            w_async: 1.0,
            norm: Norm::Squared,
            variances: Vec::new(),
        }
    }
}

impl SamplerSection {
    pub fn async_config(&self) -> AsyncConfig {
        AsyncConfig {
            gamma: self.gamma,
            norm: self.norm,
        }
    }

    pub fn weights(&self) -> MessageWeights {
        MessageWeights {
            w_sync: self.w_sync,
            w_async: self.w_async,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcSection {
    pub radius: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
}

impl Default for ArcSection {
    fn default() -> Self {
        Self {
            radius: 1.0,
            start: [0.0, 0.0],
            goal: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSection {
    pub routes: usize,
    pub spacing: f64,
    pub jitter: f64,
    pub pairs: PairSet,
}

impl Default for SegmentSection {
    fn default() -> Self {
        let d = SegmentConfig::default();
        Self {
            routes: d.routes,
            spacing: d.spacing,
            jitter: d.jitter,
            pairs: PairSet::Ood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub steps: Vec<usize>,
    pub schemes: Vec<Scheme>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            steps: vec![50, 100, 300],
            schemes: vec![Scheme::Sync, Scheme::Async, Scheme::Joint],
        }
    }
}

/// Checks applied by `eval`; a violated check exits with status 3.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceptanceSection {
    pub max_median_residual: Option<f64>,
    pub min_success_rate: Option<f64>,
    pub max_success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Tolerance as a fraction of the task's characteristic length.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub arcs: ArcSection,
    #[serde(default)]
    pub segments: SegmentSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub acceptance: AcceptanceSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_tolerance() -> f64 {
    TOLERANCE_FRACTION
}

/// Plane dimension of every task.
pub const DIM: usize = 2;

impl ExperimentConfig {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            output_dir: default_output(),
            seeds: default_seeds(),
            tolerance: default_tolerance(),
            schedule: ScheduleConfig::default(),
            train: TrainSection::default(),
            chain: ChainSection::default(),
            sampler: SamplerSection::default(),
            arcs: ArcSection::default(),
            segments: SegmentSection::default(),
            ablate: AblateSection::default(),
            acceptance: AcceptanceSection::default(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.chain.factors == 0 || self.chain.frames < 2 {
            return bad("chain needs factors ≥ 1 and frames ≥ 2".into());
        }
        if self.train.batch == 0 || self.train.dataset_size == 0 || self.train.log_every == 0 {
            return bad("train batch, dataset_size and log_every must be positive".into());
        }
        if !(self.train.lr > 0.0) {
            return bad(format!("train lr must be positive, got {}", self.train.lr));
        }
        if self.sampler.steps == 0 {
            return bad("sampler steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sampler.g_r) {
            return bad(format!("g_r must lie in [0, 1], got {}", self.sampler.g_r));
        }
        if !self.sampler.variances.is_empty()
            && self.sampler.variances.len() != self.chain.factors + 1
        {
            return bad(format!(
                "sampler.variances needs {} entries, got {}",
                self.chain.factors + 1,
                self.sampler.variances.len()
            ));
        }
        self.sampler
            .async_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sampler
            .weights()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .model(self.chain.frames, DIM)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.ablate.steps.is_empty() || self.ablate.schemes.is_empty() {
            return bad("ablate needs at least one step count and one scheme".into());
        }
        for s in &self.ablate.schemes {
            s.weights(self.sampler.weights())
                .validate()
                .map_err(|e| CliError::Config(format!("ablate scheme {}: {e}", s.name())))?;
        }
        if self.task == TaskKind::Segments && self.segments.routes < 2 {
            return bad("segments needs at least two routes".into());
        }
        Ok(())
    }

    /// Replaces the training seed with `seed` and the sampling seeds with
    /// `seed, seed + 1, ...` (same count).
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        let n = self.seeds.len() as u64;
        self.seeds = (seed..seed + n).collect();
    }

    /// Characteristic length used for success tolerances.
    pub fn characteristic_length(&self) -> f64 {
        match self.task {
            TaskKind::Arcs => arc_chord(self.arcs.radius),
            TaskKind::Segments => self.segments.spacing,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.tolerance * self.characteristic_length()
    }

    pub fn segment_config(&self) -> SegmentConfig {
        SegmentConfig {
            routes: self.segments.routes,
            frames: self.chain.frames,
            chunks: self.train.dataset_size,
            spacing: self.segments.spacing,
            jitter: self.segments.jitter,
        }
    }

    pub fn chain_for(&self, start: [f64; 2], goal: [f64; 2]) -> Result<FactorChain, CliError> {
        FactorChain::new(
            self.chain.factors,
            self.chain.frames,
            DIM,
            start.to_vec(),
            goal.to_vec(),
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.json")
    }

    pub fn boundary_checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("boundary.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse("task = \"arcs\"\n", "inline").unwrap();
        assert_eq!(cfg.sampler.steps, 300);
        assert_eq!(cfg.sampler.g_r, 0.6);
        assert_eq!(cfg.sampler.gamma, 0.6);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.schedule.steps, 500);
        assert_eq!(cfg.seeds.len(), 5);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::new(TaskKind::Segments);
        cfg.sampler.kind = SamplerKind::Diffcollage;
        cfg.ablate.schemes = vec![Scheme::Joint];
        let back = ExperimentConfig::parse(&cfg.to_toml(), "inline").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("task = \"arcs\"\n[sampler]\ng_r = \"high\"\n", "cfg.toml")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml") && msg.contains("line 3"), "{msg}");
        let err = ExperimentConfig::parse("task = \"arcs\"\nbogus = 1\n", "cfg.toml").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "task = \"arcs\"\nseeds = []\n",
            "task = \"arcs\"\n[sampler]\ng_r = 1.5\n",
            "task = \"arcs\"\n[sampler]\ngamma = 0.0\n",
            "task = \"arcs\"\n[sampler]\nvariances = [1.0]\n",
            "task = \"arcs\"\n[chain]\nframes = 1\n",
            "task = \"arcs\"\n[train]\ntime_dim = 3\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(text, "x"), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_override_keeps_count() {
        let mut cfg = ExperimentConfig::new(TaskKind::Arcs);
        cfg.override_seed(10);
        assert_eq!(cfg.seeds, vec![10, 11, 12, 13, 14]);
        assert_eq!(cfg.train.seed, 10);
    }

    #[test]
    fn thresholds_follow_task_length() {
        let arcs = ExperimentConfig::new(TaskKind::Arcs);
        assert!((arcs.threshold() - 0.05 * 3f64.sqrt()).abs() < 1e-15);
        let seg = ExperimentConfig::new(TaskKind::Segments);
        assert!((seg.threshold() - 0.05).abs() < 1e-15);
    }
}
