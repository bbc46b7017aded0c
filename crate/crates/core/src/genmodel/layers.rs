//! Parameterized building blocks shared by the VAE and the denoiser.

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::{Bound, Graph, NdArray, ParamId, ParamStore, Var};

/// One forward pass over a parameter store.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    bound: Bound,
    store: &'s ParamStore<T>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Ctx {
            g: Graph::new(),
            bound: Bound::new(store),
            store,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.bound.var(&mut self.g, self.store, id)
    }

    pub fn constant(&mut self, v: NdArray<T>) -> Var {
        self.g.constant(v)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        self.g.value(v)
    }

    /// Loss value and one gradient per stored parameter.
    pub fn gradients(&self, loss: Var) -> Result<(f64, Vec<NdArray<T>>)> {
        let mut grads = self.g.backward(loss)?;
        Ok((self.g.value(loss).item().as_f64(), self.bound.collect(self.store, &mut grads)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// Cubic kernel of side `k`, padded to keep the extent at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        Conv {
            w: s.add_init(format!("{name}.w"), &[cout, cin, k, k, k], fan_in, gain, rng),
            b: s.add(format!("{name}.b"), NdArray::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, c: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (c.p(self.w), c.p(self.b));
        c.g.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<T: Real>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut Rng) -> Self {
        Dense {
            w: s.add_init(format!("{name}.w"), &[cout, cin], cin, gain, rng),
            b: s.add(format!("{name}.b"), NdArray::zeros(&[cout])),
        }
    }

    pub fn forward<T: Real>(&self, c: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (c.p(self.w), c.p(self.b));
        c.g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    pub fn new<T: Real>(s: &mut ParamStore<T>, name: &str, ch: usize, groups: usize) -> Self {
        Norm {
            gamma: s.add(format!("{name}.gamma"), NdArray::full(&[ch], T::one())),
            beta: s.add(format!("{name}.beta"), NdArray::zeros(&[ch])),
            groups,
        }
    }

    pub fn forward<T: Real>(&self, c: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (c.p(self.gamma), c.p(self.beta));
        c.g.group_norm(x, g, b, self.groups)
    }
}

/// Global L2 norm of all gradients; rescales them to `max_norm` when above it.
pub fn clip_grad_norm<T: Real>(grads: &mut [NdArray<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

/// Learning rate at `step` (0-based) of `total` under half-cosine decay.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / (total - 1) as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![NdArray::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![NdArray::<f64>::from_f64(&[1], &[0.5]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 11), 1.0);
        assert!(cosine_lr(1.0, 10, 11).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 11) - 0.5).abs() < 1e-15);
    }
}
