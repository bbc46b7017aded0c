//! Latent diffusion over voxel volumes: VAE, noise schedule, conditional
//! U-Net denoiser, training loops, sampling and controllability evaluation.

mod condition;
mod evaluate;
pub mod layers;
mod sample;
mod schedule;
mod train;
mod unet;
mod vae;

pub use condition::{ConditionConfig, ConditionEncoder, ConditionKind, ConditionSpec};
pub use evaluate::{evaluate_conditional, realized_attribute, summarize_conditional, ConditionalEvaluation, SpreadRow};
pub use sample::{
    load_denoiser, load_model, load_vae, sample_latents, sample_latents_with, save_denoiser, save_vae, LatentDiffusion,
    ScheduleConfig,
};
pub use schedule::{
    ddpm_step, linear_schedule, predict_x0, q_sample, NoiseSchedule, PAPER_BETA_END, PAPER_BETA_START, PAPER_STEPS,
};
pub use train::{encode_latents, latent_scale, train_diffusion, train_vae, LossTrace, TrainConfig};
pub use unet::{timestep_embedding, Denoiser, DenoiserConfig};
pub use vae::{reparameterize, stack, tensor_to_volume, unstack, volume_to_tensor, Vae, VaeConfig};
