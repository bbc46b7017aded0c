use std::path::Path;

use serde::{Deserialize, Serialize};

use super::condition::ConditionSpec;
use super::schedule::{ddpm_step, linear_schedule, NoiseSchedule, PAPER_BETA_END, PAPER_BETA_START, PAPER_STEPS};
use super::unet::{Denoiser, DenoiserConfig};
use super::vae::{stack, tensor_to_volume, unstack, Vae, VaeConfig};
use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed};
use crate::scalar::Real;
use crate::tensor::{load_checkpoint, load_into, save_checkpoint, NdArray};
use crate::volume::{VoxelVolume, VolumeMeta};

/// Serializable description of a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: PAPER_STEPS,
            beta_start: PAPER_BETA_START,
            beta_end: PAPER_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Runs the reverse chain from `x_T ~ N(0, I)` for each seed.
///
/// Sample `i` draws its start point and every step's noise from its own seed,
/// so results do not depend on batch composition.
pub fn sample_latents_with<T: Real>(
    mut predict: impl FnMut(&NdArray<T>, &[usize]) -> Result<NdArray<T>>,
    shape: &[usize],
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<NdArray<T>>> {
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
    let starts: Vec<NdArray<T>> = rngs.iter_mut().map(|r| NdArray::randn(shape, 1.0, r)).collect();
    let mut x = stack(&starts.iter().collect::<Vec<_>>())?;
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; seeds.len()];
        let eps = predict(&x, &ts)?;
        if eps.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for latents {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        let z: Vec<NdArray<T>> = rngs.iter_mut().map(|r| NdArray::randn(shape, 1.0, r)).collect();
        let z = stack(&z.iter().collect::<Vec<_>>())?;
        x = ddpm_step(&x, t, &eps, &z, schedule)?;
    }
    Ok(unstack(&x))
}

/// Reverse chain driven by a trained denoiser. `keep[i] == false` samples unconditionally.
pub fn sample_latents<T: Real>(
    den: &Denoiser<T>,
    specs: &[ConditionSpec],
    keep: &[bool],
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<NdArray<T>>> {
    if specs.len() != seeds.len() || keep.len() != seeds.len() {
        return Err(Error::Shape(format!(
            "{} seeds, {} conditions, {} keep flags",
            seeds.len(),
            specs.len(),
            keep.len()
        )));
    }
    let shape = den.config.latent_shape();
    sample_latents_with(|x, ts| den.predict(x, ts, specs, keep), &shape, schedule, seeds)
}

/// VAE, denoiser and schedule packaged for generation.
#[derive(Debug, Clone)]
pub struct LatentDiffusion<T> {
    pub vae: Vae<T>,
    pub denoiser: Denoiser<T>,
    pub schedule: ScheduleConfig,
    /// Multiplier applied to VAE latents before diffusion.
    pub latent_scale: f64,
}

impl<T: Real> LatentDiffusion<T> {
    pub fn check(&self) -> Result<()> {
        let v = self.vae.config.latent_shape();
        let d = self.denoiser.config.latent_shape();
        if v != d {
            return Err(Error::Shape(format!("vae latents {v:?} vs denoiser latents {d:?}")));
        }
        Ok(())
    }

    /// One volume per condition; volume `i` uses seed `child_seed(seed, i)`.
    pub fn generate(&self, specs: &[ConditionSpec], seed: u64, voxel_size_um: f64) -> Result<Vec<VoxelVolume>> {
        self.check()?;
        let seeds: Vec<u64> = (0..specs.len() as u64).map(|i| child_seed(seed, i)).collect();
        let keep = vec![true; specs.len()];
        self.generate_seeded(specs, &keep, &seeds, voxel_size_um)
    }

    pub fn generate_seeded(
        &self,
        specs: &[ConditionSpec],
        keep: &[bool],
        seeds: &[u64],
        voxel_size_um: f64,
    ) -> Result<Vec<VoxelVolume>> {
        self.check()?;
        let schedule = self.schedule.build()?;
        let latents = sample_latents(&self.denoiser, specs, keep, &schedule, seeds)?;
        let inv = T::lit(1.0 / self.latent_scale);
        let mut out = Vec::with_capacity(latents.len());
        for (z, &s) in latents.iter().zip(seeds) {
            let z = z.map(|v| v * inv);
            let batch = stack(&[&z])?;
            let decoded = self.vae.decode(&batch)?;
            let vol = tensor_to_volume(&unstack(&decoded)[0], voxel_size_um)?;
            out.push(vol.with_meta(VolumeMeta {
                palette_id: String::new(),
                seed: Some(s),
                extra: Default::default(),
            }));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VaeMeta {
    kind: String,
    config: VaeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenoiserMeta {
    kind: String,
    config: DenoiserConfig,
    schedule: ScheduleConfig,
    latent_scale: f64,
}

pub fn save_vae<T: Real>(vae: &Vae<T>, step: u64, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(VaeMeta {
        kind: "vae".into(),
        config: vae.config.clone(),
    })?;
    save_checkpoint(&vae.store, step, &meta, path)
}

pub fn load_vae<T: Real>(path: &Path) -> Result<Vae<T>> {
    let (store, info) = load_checkpoint::<T>(path)?;
    let meta: VaeMeta = serde_json::from_value(info.metadata)?;
    if meta.kind != "vae" {
        return Err(Error::Config(format!("{} holds a {} checkpoint, not a vae", path.display(), meta.kind)));
    }
    let mut vae = Vae::new(meta.config, 0)?;
    load_into(&mut vae.store, &store)?;
    Ok(vae)
}

pub fn save_denoiser<T: Real>(
    den: &Denoiser<T>,
    schedule: &ScheduleConfig,
    latent_scale: f64,
    step: u64,
    path: &Path,
) -> Result<()> {
    let meta = serde_json::to_value(DenoiserMeta {
        kind: "denoiser".into(),
        config: den.config.clone(),
        schedule: *schedule,
        latent_scale,
    })?;
    save_checkpoint(&den.store, step, &meta, path)
}

/// Denoiser with the schedule and latent scale it was trained with.
pub fn load_denoiser<T: Real>(path: &Path) -> Result<(Denoiser<T>, ScheduleConfig, f64)> {
    let (store, info) = load_checkpoint::<T>(path)?;
    let meta: DenoiserMeta = serde_json::from_value(info.metadata)?;
    if meta.kind != "denoiser" {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, not a denoiser",
            path.display(),
            meta.kind
        )));
    }
    let mut den = Denoiser::new(meta.config, 0)?;
    load_into(&mut den.store, &store)?;
    Ok((den, meta.schedule, meta.latent_scale))
}

pub fn load_model<T: Real>(vae_path: &Path, denoiser_path: &Path) -> Result<LatentDiffusion<T>> {
    let vae = load_vae(vae_path)?;
    let (denoiser, schedule, latent_scale) = load_denoiser(denoiser_path)?;
    let m = LatentDiffusion {
        vae,
        denoiser,
        schedule,
        latent_scale,
    };
    m.check()?;
    Ok(m)
}
