use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::condition::ConditionSpec;
use super::layers::{clip_grad_norm, cosine_lr, Ctx};
use super::schedule::{q_sample, NoiseSchedule};
use super::unet::Denoiser;
use super::vae::{reparameterize_graph, stack, unstack, Vae};
use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed, Rng};
use crate::scalar::Real;
use crate::tensor::{AdamConfig, AdamState, NdArray};

/// Optimization settings shared by both training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// When set, overrides `steps` with whole passes over the data.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_lr: bool,
    pub grad_clip: Option<f64>,
    /// VAE only: weight of the KL term.
    pub kl_weight: f64,
    /// Diffusion only: probability of replacing the condition with null tokens.
    pub condition_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            epochs: None,
            batch_size: 4,
            lr: 1e-3,
            cosine_lr: false,
            grad_clip: Some(1.0),
            kl_weight: 1e-6,
            condition_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Published VAE settings: Adam at 1e-6, batch 2, 400 epochs, cosine decay, clipping.
    pub fn paper_vae() -> Self {
        TrainConfig {
            epochs: Some(400),
            batch_size: 2,
            lr: 1e-6,
            cosine_lr: true,
            ..Self::default()
        }
    }

    /// Published diffusion settings: as the VAE with batch 1.
    pub fn paper_diffusion() -> Self {
        TrainConfig {
            batch_size: 1,
            ..Self::paper_vae()
        }
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        match self.epochs {
            Some(e) => e * n_samples.div_ceil(self.batch_size.max(1)),
            None => self.steps,
        }
    }

    fn validate(&self, n_samples: usize) -> Result<()> {
        if n_samples < 2 {
            return Err(Error::Config(format!("training needs at least 2 samples, got {n_samples}")));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config(format!("condition dropout {} outside [0, 1]", self.condition_dropout)));
        }
        Ok(())
    }
}

/// Per-step losses of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Optimized objective.
    pub loss: Vec<f64>,
    /// Reconstruction or noise-prediction MSE.
    pub mse: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

impl LossTrace {
    /// Trailing moving average of `mse` over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.mse.len());
        let mut acc = 0.0;
        for i in 0..self.mse.len() {
            acc += self.mse[i];
            if i >= w {
                acc -= self.mse[i - w];
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

/// Visits samples in a fresh shuffled order every epoch.
struct Batches {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
    epoch_losses: Vec<f64>,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Batches {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            epoch_losses: Vec::new(),
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng_from_seed(child_seed(self.seed, self.epoch as u64)));
        self.pos = 0;
    }

    fn next(&mut self, trace: &mut LossTrace) -> Vec<usize> {
        if self.pos >= self.n {
            self.close(trace);
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.pos + self.batch).min(self.n);
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        idx
    }

    fn record(&mut self, loss: f64) {
        self.epoch_losses.push(loss);
    }

    fn close(&mut self, trace: &mut LossTrace) {
        if !self.epoch_losses.is_empty() {
            let m = self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64;
            log::info!("epoch {} mean loss {m:.6}", self.epoch);
            trace.epoch_means.push(m);
            self.epoch_losses.clear();
        }
    }
}

fn noise_rng(seed: u64) -> Rng {
    rng_from_seed(child_seed(seed, u64::MAX))
}

fn finish_step<T: Real>(
    step: usize,
    loss: f64,
    mut grads: Vec<NdArray<T>>,
    cfg: &TrainConfig,
    total: usize,
    adam: &mut AdamState<T>,
    store: &mut crate::tensor::ParamStore<T>,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    if let Some(c) = cfg.grad_clip {
        let norm = clip_grad_norm(&mut grads, c);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: norm });
        }
    }
    if cfg.cosine_lr {
        adam.config.lr = cosine_lr(cfg.lr, step, total);
    }
    adam.step(store, &grads)
}

fn adam_for(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    }
}

/// Trains `vae` in place on `[3, S, S, S]` volumes; loss = MSE + λ·KL per sample.
pub fn train_vae<T: Real>(vae: &mut Vae<T>, data: &[NdArray<T>], cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate(data.len())?;
    let total = cfg.total_steps(data.len());
    let mut adam = AdamState::new(&vae.store, adam_for(cfg));
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut rng = noise_rng(cfg.seed);
    let mut trace = LossTrace::default();
    for step in 0..total {
        let idx = batches.next(&mut trace);
        let x = stack(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>())?;
        let (loss, mse, grads) = {
            let mut c = Ctx::new(&vae.store);
            let xv = c.constant(x);
            let (mu, lv) = vae.encode_graph(&mut c, xv)?;
            let shape = c.g.shape(mu).to_vec();
            let noise = c.constant(NdArray::randn(&shape, 1.0, &mut rng));
            let z = reparameterize_graph(&mut c, mu, lv, noise)?;
            let recon = vae.decode_graph(&mut c, z)?;
            let mse = c.g.mse(recon, xv)?;
            let kl = c.g.kl_gaussian(mu, lv)?;
            let kl = c.g.scale(kl, T::lit(cfg.kl_weight / idx.len() as f64));
            let loss = c.g.add(mse, kl)?;
            let mse_v = c.value(mse).item().as_f64();
            let (l, g) = c.gradients(loss)?;
            (l, mse_v, g)
        };
        finish_step(step, loss, grads, cfg, total, &mut adam, &mut vae.store)?;
        trace.loss.push(loss);
        trace.mse.push(mse);
        batches.record(loss);
        log::debug!("vae step {step}: loss {loss:.6} mse {mse:.6}");
    }
    batches.close(&mut trace);
    Ok(trace)
}

/// Posterior means of `data`, one `[C, s, s, s]` latent per volume.
pub fn encode_latents<T: Real>(vae: &Vae<T>, data: &[NdArray<T>], batch: usize) -> Result<Vec<NdArray<T>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch.max(1)) {
        let x = stack(&chunk.iter().collect::<Vec<_>>())?;
        let (mu, _) = vae.encode(&x)?;
        out.extend(unstack(&mu));
    }
    Ok(out)
}

/// Factor bringing latents to unit standard deviation.
pub fn latent_scale<T: Real>(latents: &[NdArray<T>]) -> f64 {
    let vals: Vec<f64> = latents.iter().flat_map(|l| l.data().iter().map(|v| v.as_f64())).collect();
    if vals.len() < 2 {
        return 1.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
    if var > 0.0 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Trains the noise predictor in place on pre-scaled latents.
pub fn train_diffusion<T: Real>(
    den: &mut Denoiser<T>,
    latents: &[NdArray<T>],
    conditions: &[ConditionSpec],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate(latents.len())?;
    if conditions.len() != latents.len() {
        return Err(Error::Shape(format!(
            "{} latents with {} conditions",
            latents.len(),
            conditions.len()
        )));
    }
    let total = cfg.total_steps(latents.len());
    let mut adam = AdamState::new(&den.store, adam_for(cfg));
    let mut batches = Batches::new(latents.len(), cfg.batch_size, cfg.seed);
    let mut rng = noise_rng(cfg.seed);
    let mut trace = LossTrace::default();
    for step in 0..total {
        let idx = batches.next(&mut trace);
        let mut xs = Vec::with_capacity(idx.len());
        let mut eps = Vec::with_capacity(idx.len());
        let mut ts = Vec::with_capacity(idx.len());
        let mut keep = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = rng.random_range(1..=schedule.steps());
            let e = NdArray::randn(latents[i].shape(), 1.0, &mut rng);
            xs.push(q_sample(&latents[i], t, &e, schedule)?);
            eps.push(e);
            ts.push(t);
            keep.push(rng.random::<f64>() >= cfg.condition_dropout);
        }
        let specs: Vec<ConditionSpec> = idx.iter().map(|&i| conditions[i]).collect();
        let (loss, grads) = {
            let mut c = Ctx::new(&den.store);
            let x = c.constant(stack(&xs.iter().collect::<Vec<_>>())?);
            let e = c.constant(stack(&eps.iter().collect::<Vec<_>>())?);
            let pred = den.forward(&mut c, x, &ts, &specs, &keep)?;
            let loss = c.g.mse(pred, e)?;
            c.gradients(loss)?
        };
        finish_step(step, loss, grads, cfg, total, &mut adam, &mut den.store)?;
        trace.loss.push(loss);
        trace.mse.push(loss);
        batches.record(loss);
        log::debug!("diffusion step {step}: loss {loss:.6}");
    }
    batches.close(&mut trace);
    Ok(trace)
}
