use serde::{Deserialize, Serialize};

use super::condition::{ConditionConfig, ConditionEncoder, ConditionSpec};
use super::layers::{Conv, Ctx, Dense, Norm};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::Real;
use crate::tensor::nn::{cross_attention, AttentionVars};
use crate::tensor::{NdArray, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    /// Channels at the top level; the bottleneck uses twice this.
    pub width: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub condition: ConditionConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            latent_side: 4,
            width: 32,
            time_dim: 32,
            groups: 8,
            condition: ConditionConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_side < 2 || !self.latent_side.is_multiple_of(2) {
            return Err(Error::Config(format!("latent side {} must be even and ≥ 2", self.latent_side)));
        }
        if self.width == 0 || self.groups == 0 || !self.width.is_multiple_of(self.groups) {
            return Err(Error::Config(format!("width {} not divisible into {} groups", self.width, self.groups)));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim {} must be even", self.time_dim)));
        }
        if self.condition.tokens == 0 || self.condition.token_dim == 0 {
            return Err(Error::Config("condition needs at least one token of positive width".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let s = self.latent_side;
        [self.latent_channels, s, s, s]
    }
}

/// Sinusoidal embedding of time steps, `[N, dim]`: sines then cosines.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> NdArray<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        out.extend(s);
        out.extend(c);
    }
    NdArray::new(&[ts.len(), dim], out).expect("embedding shape")
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: Norm,
    c1: Conv,
    time: Dense,
    n2: Norm,
    c2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &DenoiserConfig,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        ResBlock {
            n1: Norm::new(s, &format!("{name}.n1"), cin, cfg.groups),
            c1: Conv::new(s, &format!("{name}.c1"), cin, cout, 3, 1, 1.0, rng),
            time: Dense::new(s, &format!("{name}.time"), cfg.time_dim, cout, 1.0, rng),
            n2: Norm::new(s, &format!("{name}.n2"), cout, cfg.groups),
            c2: Conv::new(s, &format!("{name}.c2"), cout, cout, 3, 1, 0.2, rng),
            skip: (cin != cout).then(|| Conv::new(s, &format!("{name}.skip"), cin, cout, 1, 1, 0.5, rng)),
        }
    }

    fn forward<T: Real>(&self, c: &mut Ctx<T>, x: Var, temb: Var) -> Result<Var> {
        let mut h = self.n1.forward(c, x)?;
        h = c.g.silu(h);
        h = self.c1.forward(c, h)?;
        let tv = self.time.forward(c, temb)?;
        h = c.g.add_channel(h, tv)?;
        h = self.n2.forward(c, h)?;
        h = c.g.silu(h);
        h = self.c2.forward(c, h)?;
        let base = match &self.skip {
            Some(s) => s.forward(c, x)?,
            None => x,
        };
        c.g.add(base, h)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: ParamId,
}

/// Two-level U-Net predicting the noise in a latent, with condition tokens
/// entering through cross-attention at the bottleneck.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub store: ParamStore<T>,
    pub encoder: ConditionEncoder,
    t1: Dense,
    t2: Dense,
    conv_in: Conv,
    res_a: ResBlock,
    down: Conv,
    res_b: ResBlock,
    attn: Attention,
    res_c: ResBlock,
    up: Conv,
    res_d: ResBlock,
    norm_out: Norm,
    conv_out: Conv,
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let s = &mut ParamStore::new();
        let (c, w, td) = (config.latent_channels, config.width, config.time_dim);
        let encoder = ConditionEncoder::new(s, config.condition.clone(), &mut rng);
        let t1 = Dense::new(s, "time.1", td, td, 1.0, &mut rng);
        let t2 = Dense::new(s, "time.2", td, td, 1.0, &mut rng);
        let conv_in = Conv::new(s, "in", c, w, 3, 1, 1.0, &mut rng);
        let res_a = ResBlock::new(s, "res_a", w, w, &config, &mut rng);
        let down = Conv::new(s, "down", w, 2 * w, 3, 2, 1.0, &mut rng);
        let res_b = ResBlock::new(s, "res_b", 2 * w, 2 * w, &config, &mut rng);
        let d = config.condition.token_dim;
        let attn = Attention {
            norm: Norm::new(s, "attn.norm", 2 * w, config.groups),
            q: s.add_init("attn.q", &[2 * w, 2 * w], 2 * w, 0.7, &mut rng),
            k: s.add_init("attn.k", &[2 * w, d], d, 0.7, &mut rng),
            v: s.add_init("attn.v", &[2 * w, d], d, 0.7, &mut rng),
            out: s.add_init("attn.out", &[2 * w, 2 * w], 2 * w, 0.2, &mut rng),
        };
        let res_c = ResBlock::new(s, "res_c", 2 * w, 2 * w, &config, &mut rng);
        let up = Conv::new(s, "up", 2 * w, w, 3, 1, 1.0, &mut rng);
        let res_d = ResBlock::new(s, "res_d", 2 * w, w, &config, &mut rng);
        let norm_out = Norm::new(s, "out.norm", w, config.groups);
        let conv_out = Conv::new(s, "out.conv", w, c, 3, 1, 0.0, &mut rng);
        Ok(Denoiser {
            config,
            store: std::mem::take(s),
            encoder,
            t1,
            t2,
            conv_in,
            res_a,
            down,
            res_b,
            attn,
            res_c,
            up,
            res_d,
            norm_out,
            conv_out,
        })
    }

    /// ε̂ for latents `x: [N, C, s, s, s]` at steps `ts` under `specs`.
    pub fn forward(&self, c: &mut Ctx<T>, x: Var, ts: &[usize], specs: &[ConditionSpec], keep: &[bool]) -> Result<Var> {
        let [ch, side, ..] = self.config.latent_shape();
        let shape = c.g.shape(x).to_vec();
        if shape.len() != 5 || shape[1..] != [ch, side, side, side] || shape[0] != ts.len() {
            return Err(Error::Shape(format!(
                "denoiser expects [{}, {ch}, {side}, {side}, {side}], got {shape:?}",
                ts.len()
            )));
        }
        let n = shape[0];
        let ctx = self.encoder.embed(c, specs, keep)?;

        let te = c.constant(timestep_embedding(ts, self.config.time_dim).cast());
        let mut temb = self.t1.forward(c, te)?;
        temb = c.g.silu(temb);
        temb = self.t2.forward(c, temb)?;
        let temb = c.g.silu(temb);

        let h = self.conv_in.forward(c, x)?;
        let h1 = self.res_a.forward(c, h, temb)?;
        let mut h = self.down.forward(c, h1)?;
        h = self.res_b.forward(c, h, temb)?;

        let w2 = 2 * self.config.width;
        let cells = (side / 2).pow(3);
        let a = self.attn.norm.forward(c, h)?;
        let a = c.g.reshape(a, &[n, w2, cells])?;
        let a = c.g.transpose_last(a)?;
        let vars = AttentionVars {
            q: c.p(self.attn.q),
            k: c.p(self.attn.k),
            v: c.p(self.attn.v),
            out: c.p(self.attn.out),
        };
        let a = cross_attention(&mut c.g, a, ctx, &vars)?;
        let a = c.g.transpose_last(a)?;
        let a = c.g.reshape(a, &[n, w2, side / 2, side / 2, side / 2])?;
        h = c.g.add(h, a)?;
        h = self.res_c.forward(c, h, temb)?;

        h = c.g.upsample2(h)?;
        h = self.up.forward(c, h)?;
        h = c.g.concat_channels(h, h1)?;
        h = self.res_d.forward(c, h, temb)?;
        h = self.norm_out.forward(c, h)?;
        h = c.g.silu(h);
        self.conv_out.forward(c, h)
    }

    /// Inference-only prediction.
    pub fn predict(&self, x: &NdArray<T>, ts: &[usize], specs: &[ConditionSpec], keep: &[bool]) -> Result<NdArray<T>> {
        let mut c = Ctx::new(&self.store);
        let xv = c.constant(x.clone());
        let y = self.forward(&mut c, xv, ts, specs, keep)?;
        Ok(c.value(y).clone())
    }
}
