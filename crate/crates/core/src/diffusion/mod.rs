//! Noise schedule, forward noising, the class-conditional noise predictor
//! and the reverse sampler.

pub mod epsnet;
pub mod process;
pub mod sampler;
pub mod schedule;

pub use epsnet::{eps_loss, time_embedding, train_epsnet, EpsNet, EpsNetConfig, EpsTrainConfig};
pub use process::{ddim_step, ddim_step_between, predict_x0, q_sample};
pub use sampler::{sample, Batching, EpsHook, DEFAULT_SAMPLE_BATCH};
pub use schedule::{NoiseSchedule, ScheduleConfig};
