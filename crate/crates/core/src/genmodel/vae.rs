use serde::{Deserialize, Serialize};

use super::layers::{Conv, Ctx, Norm};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::Real;
use crate::tensor::{NdArray, ParamStore, Var};
use crate::volume::{Dims, VoxelVolume, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    /// Cube side of the input volume.
    pub input: usize,
    /// Width of each encoder level; every level halves the extent.
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    pub groups: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            input: 16,
            widths: vec![16, 32],
            latent_channels: 4,
            groups: 4,
        }
    }
}

impl VaeConfig {
    /// Paper-scale geometry: 64³ in, 16³ latent.
    pub fn paper() -> Self {
        VaeConfig {
            input: 64,
            ..Self::default()
        }
    }

    pub fn latent_side(&self) -> usize {
        self.input >> self.widths.len()
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let s = self.latent_side();
        [self.latent_channels, s, s, s]
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.widths.len();
        if levels == 0 || self.latent_channels == 0 || self.groups == 0 {
            return Err(Error::Config("vae needs at least one level, latent channels and groups".into()));
        }
        if self.input == 0 || !self.input.is_multiple_of(1 << levels) {
            return Err(Error::Config(format!(
                "vae input {} is not divisible by 2^{levels}",
                self.input
            )));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % self.groups != 0) {
            return Err(Error::Config(format!("vae width {w} is not a multiple of {} groups", self.groups)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncLevel {
    conv: Conv,
    norm: Norm,
    down: Conv,
}

#[derive(Debug, Clone)]
struct DecLevel {
    conv: Conv,
    norm: Norm,
}

/// Convolutional VAE over `[N, 3, S, S, S]` volumes with a tanh-bounded decoder.
#[derive(Debug, Clone)]
pub struct Vae<T> {
    pub config: VaeConfig,
    pub store: ParamStore<T>,
    enc: Vec<EncLevel>,
    mu: Conv,
    log_var: Conv,
    dec_in: Conv,
    dec: Vec<DecLevel>,
    out: Conv,
}

impl<T: Real> Vae<T> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut s = ParamStore::new();
        let w = &config.widths;
        let mut enc = Vec::new();
        let mut prev = CHANNELS;
        for (i, &wi) in w.iter().enumerate() {
            enc.push(EncLevel {
                conv: Conv::new(&mut s, &format!("enc{i}.conv"), prev, wi, 3, 1, 1.0, &mut rng),
                norm: Norm::new(&mut s, &format!("enc{i}.norm"), wi, config.groups),
                down: Conv::new(&mut s, &format!("enc{i}.down"), wi, wi, 3, 2, 1.0, &mut rng),
            });
            prev = wi;
        }
        let c = config.latent_channels;
        let mu = Conv::new(&mut s, "enc.mu", prev, c, 3, 1, 0.5, &mut rng);
        let log_var = Conv::new(&mut s, "enc.log_var", prev, c, 3, 1, 0.1, &mut rng);
        let dec_in = Conv::new(&mut s, "dec.in", c, prev, 3, 1, 1.0, &mut rng);
        let mut dec = Vec::new();
        for i in (0..w.len()).rev() {
            dec.push(DecLevel {
                conv: Conv::new(&mut s, &format!("dec{i}.conv"), prev, w[i], 3, 1, 1.0, &mut rng),
                norm: Norm::new(&mut s, &format!("dec{i}.norm"), w[i], config.groups),
            });
            prev = w[i];
        }
        let out = Conv::new(&mut s, "dec.out", prev, CHANNELS, 3, 1, 0.5, &mut rng);
        Ok(Vae {
            config,
            store: s,
            enc,
            mu,
            log_var,
            dec_in,
            dec,
            out,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let n = self.config.input;
        if shape.len() != 5 || shape[1] != CHANNELS || shape[2..] != [n, n, n] {
            return Err(Error::Shape(format!(
                "vae expects [N, {CHANNELS}, {n}, {n}, {n}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Posterior mean and log-variance, each `[N, C, s, s, s]`.
    pub fn encode_graph(&self, c: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        self.check_input(c.g.shape(x))?;
        let mut h = x;
        for l in &self.enc {
            h = l.conv.forward(c, h)?;
            h = l.norm.forward(c, h)?;
            h = c.g.silu(h);
            h = l.down.forward(c, h)?;
            h = c.g.silu(h);
        }
        Ok((self.mu.forward(c, h)?, self.log_var.forward(c, h)?))
    }

    pub fn decode_graph(&self, c: &mut Ctx<T>, z: Var) -> Result<Var> {
        let [ch, s, ..] = self.config.latent_shape();
        let shape = c.g.shape(z);
        if shape.len() != 5 || shape[1..] != [ch, s, s, s] {
            return Err(Error::Shape(format!(
                "vae decoder expects [N, {ch}, {s}, {s}, {s}], got {shape:?}"
            )));
        }
        let mut h = self.dec_in.forward(c, z)?;
        h = c.g.silu(h);
        for l in &self.dec {
            h = l.conv.forward(c, h)?;
            h = l.norm.forward(c, h)?;
            h = c.g.silu(h);
            h = c.g.upsample2(h)?;
        }
        h = self.out.forward(c, h)?;
        Ok(c.g.tanh(h))
    }

    pub fn encode(&self, x: &NdArray<T>) -> Result<(NdArray<T>, NdArray<T>)> {
        let mut c = Ctx::new(&self.store);
        let xv = c.constant(x.clone());
        let (mu, lv) = self.encode_graph(&mut c, xv)?;
        Ok((c.value(mu).clone(), c.value(lv).clone()))
    }

    /// Decodes latents to `[N, 3, S, S, S]` with every value in `[-1, 1]`.
    pub fn decode(&self, z: &NdArray<T>) -> Result<NdArray<T>> {
        let mut c = Ctx::new(&self.store);
        let zv = c.constant(z.clone());
        let y = self.decode_graph(&mut c, zv)?;
        Ok(c.value(y).map(|v| v.max(-T::one()).min(T::one())))
    }
}

/// `μ + exp(½·log σ²)·noise` on the tape.
pub fn reparameterize_graph<T: Real>(c: &mut Ctx<T>, mu: Var, log_var: Var, noise: Var) -> Result<Var> {
    let half = c.g.scale(log_var, T::lit(0.5));
    let std = c.g.exp(half);
    let spread = c.g.mul(std, noise)?;
    c.g.add(mu, spread)
}

pub fn reparameterize<T: Real>(mu: &NdArray<T>, log_var: &NdArray<T>, noise: &NdArray<T>) -> Result<NdArray<T>> {
    if mu.shape() != log_var.shape() || mu.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "reparameterize: mu {:?}, log_var {:?}, noise {:?}",
            mu.shape(),
            log_var.shape(),
            noise.shape()
        )));
    }
    let half = T::lit(0.5);
    let data = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(noise.data())
        .map(|((&m, &l), &n)| m + (half * l).exp() * n)
        .collect();
    NdArray::new(mu.shape(), data)
}

/// Channel-first `[3, X, Y, Z]` view of a volume.
pub fn volume_to_tensor<T: Real>(v: &VoxelVolume) -> NdArray<T> {
    let d = v.dims();
    let n = d.len();
    let mut out = vec![T::zero(); CHANNELS * n];
    for (i, px) in v.data().chunks(CHANNELS).enumerate() {
        for (c, &val) in px.iter().enumerate() {
            out[c * n + i] = T::lit(val as f64);
        }
    }
    NdArray::new(&[CHANNELS, d.x, d.y, d.z], out).expect("volume tensor shape")
}

/// Inverse of [`volume_to_tensor`], clamping to `[-1, 1]`.
pub fn tensor_to_volume<T: Real>(t: &NdArray<T>, voxel_size_um: f64) -> Result<VoxelVolume> {
    let s = t.shape();
    if s.len() != 4 || s[0] != CHANNELS {
        return Err(Error::Shape(format!("expected [{CHANNELS}, X, Y, Z], got {s:?}")));
    }
    let dims = Dims::new(s[1], s[2], s[3]);
    let n = dims.len();
    let mut data = vec![0f32; CHANNELS * n];
    for c in 0..CHANNELS {
        for i in 0..n {
            data[i * CHANNELS + c] = t.data()[c * n + i].as_f64().clamp(-1.0, 1.0) as f32;
        }
    }
    VoxelVolume::new(dims, data, voxel_size_um)
}

/// Stacks equally shaped arrays along a new leading axis.
pub fn stack<T: Real>(items: &[&NdArray<T>]) -> Result<NdArray<T>> {
    let first = items.first().ok_or_else(|| Error::Shape("cannot stack zero arrays".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for a in items {
        if a.shape() != first.shape() {
            return Err(Error::Shape(format!("stack {:?} with {:?}", first.shape(), a.shape())));
        }
        data.extend_from_slice(a.data());
    }
    NdArray::new(&shape, data)
}

/// Splits the leading axis back into separate arrays.
pub fn unstack<T: Real>(a: &NdArray<T>) -> Vec<NdArray<T>> {
    let n = a.shape()[0];
    let inner = &a.shape()[1..];
    let per = a.len() / n.max(1);
    (0..n)
        .map(|i| NdArray::new(inner, a.data()[i * per..(i + 1) * per].to_vec()).expect("unstack shape"))
        .collect()
}
