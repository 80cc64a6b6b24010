//! Noise schedule, deterministic DDIM sampling and inversion, guidance, and
//! null-text optimisation.

mod sampler;
mod schedule;

pub use sampler::{
    combine_cfg, GuidedPrediction, Inversion, NoHook, NullTextResult, RecordingHook, Sampler, SamplerConfig,
    SamplingHook,
};
pub use schedule::{make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
