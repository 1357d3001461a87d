//! Long-horizon plans composed from a short-horizon diffusion denoiser.
//!
//! A plan is split into overlapping chunks that form a chain-structured
//! factor graph. Each chunk is denoised by the same short-horizon model and
//! boundary agreement is enforced on the model's clean-data (Tweedie)
//! estimates through synchronous and asynchronous message-passing losses,
//! applied as sphere-constrained guidance on every DDIM step.

pub mod bethegap;
pub mod chain;
pub mod denoiser;
pub mod gradtape;
pub mod messages;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tasks;

pub use chain::{BoundaryResiduals, FactorChain, Selector};
pub use denoiser::{Denoiser, EmaPair, ModelConfig};
pub use gradtape::{Tape, Tensor, Var};
pub use messages::{AsyncConfig, MessageWeights, Norm, SyncSystem};
pub use sampler::{compose_diffcollage, compose_guided, compose_independent, GuidanceConfig, Messages, SampleTrace};
pub use schedule::{NoiseSchedule, ScheduleConfig};
