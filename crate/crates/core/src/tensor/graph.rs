//! Reverse-mode tape. Nodes are appended in execution order, so the node
//! list is already topologically sorted and backward is one reverse sweep.

use super::array::{gemm_nn, gemm_nt, gemm_tn, ConvGeom, NdArray};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    KlGaussian(Var, Var),
    Reshape(Var),
    TransposeLast(Var),
    Matmul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Softmax(Var),
    AddChannel(Var, Var),
    RepeatRows(Var),
    ConcatChannels(Var, Var),
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn same_shape<T: Real>(what: &str, a: &NdArray<T>, b: &NdArray<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (parameters, checked inputs).
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (data, noise, masks).
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, what: &str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(what, self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = NdArray::new(va.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(NdArray::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let ng = self.needs(a);
        self.push(NdArray::scalar(m), Op::Mean(a), ng)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let m = s / T::lit(va.len() as f64);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(NdArray::scalar(m), Op::Mse(a, b), ng))
    }

    /// ½ Σ (μ² + e^{lv} − 1 − lv)
    pub fn kl_gaussian(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        same_shape("kl_gaussian", self.value(mu), self.value(log_var))?;
        let (m, l) = (self.value(mu), self.value(log_var));
        let half = T::lit(0.5);
        let s: T = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(&u, &v)| half * (u * u + v.exp() - T::one() - v))
            .sum();
        let ng = self.needs(mu) || self.needs(log_var);
        Ok(self.push(NdArray::scalar(s), Op::KlGaussian(mu, log_var), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs 2 axes, got {s:?}")));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let out = transpose_batches(v.data(), m, n);
        let value = NdArray::new(&shape, out)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::TransposeLast(a), ng))
    }

    /// Batched product `[B, M, K] × [B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("matmul {sa:?} × {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bsz * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            gemm_nn(m, n, k, &va[i * m * k..], &vb[i * k * n..], &mut out[i * m * n..(i + 1) * m * n]);
        }
        let value = NdArray::new(&[bsz, m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), ng))
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(Error::Shape(format!("linear input {sx:?} vs weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape(format!("linear bias {:?} vs weight {sw:?}", self.shape(b))));
            }
        }
        let (o, i) = (sw[0], sw[1]);
        let rows = self.value(x).len() / i;
        let mut out = vec![T::zero(); rows * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * o..(r + 1) * o].copy_from_slice(bv);
            }
        }
        gemm_nt(rows, o, i, self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = o;
        let value = NdArray::new(&shape, out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear(x, w, b), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s = s + *e;
            }
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let value = NdArray::new(v.shape(), out)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), ng))
    }

    /// `x: [N, C, ...] + v: [N, C]` broadcast over the trailing axes.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sx.len() < 2 || sv != sx[..2] {
            return Err(Error::Shape(format!("add_channel {sx:?} + {sv:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        for (k, &b) in self.value(v).data().iter().enumerate() {
            for e in &mut out[k * inner..(k + 1) * inner] {
                *e = *e + b;
            }
        }
        let value = NdArray::new(&sx, out)?;
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(value, Op::AddChannel(x, v), ng))
    }

    /// Stacks `n` copies of a 1-D array into `[n, K]`.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let sv = self.shape(v).to_vec();
        if sv.len() != 1 {
            return Err(Error::Shape(format!("repeat_rows wants a vector, got {sv:?}")));
        }
        let row = self.value(v).data();
        let out: Vec<T> = (0..n).flat_map(|_| row.iter().copied()).collect();
        let value = NdArray::new(&[n, sv[0]], out)?;
        let ng = self.needs(v);
        Ok(self.push(value, Op::RepeatRows(v), ng))
    }

    /// `[N, C1, ...] ++ [N, C2, ...]` along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat_channels {sa:?} ++ {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (la, lb) = (sa[1] * inner, sb[1] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&va[n * la..(n + 1) * la]);
            out.extend_from_slice(&vb[n * lb..(n + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let value = NdArray::new(&shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatChannels(a, b), ng))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, D, H, W]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 5 {
            return Err(Error::Shape(format!("upsample2 wants 5-D input, got {s:?}")));
        }
        let (d, h, w) = (s[2], s[3], s[4]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len() * 8];
        for nc in 0..s[0] * s[1] {
            let base_in = nc * d * h * w;
            let base_out = nc * 8 * d * h * w;
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out[base_out + (z * 2 * h + y) * 2 * w + x] = src[base_in + ((z / 2) * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        let value = NdArray::new(&[s[0], s[1], 2 * d, 2 * h, 2 * w], out)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Upsample2(a), ng))
    }

    /// Group normalization of `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(Error::Shape(format!("group_norm: {groups} groups over {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "group_norm affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let inner: usize = s[2..].iter().product();
        let per = c / groups * inner;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(s[0] * groups);
        let mut out = vec![T::zero(); xv.len()];
        let m = T::lit(per as f64);
        for blk in 0..s[0] * groups {
            let r = blk * per..(blk + 1) * per;
            let mean = xv[r.clone()].iter().copied().sum::<T>() / m;
            let var = xv[r.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let rs = T::one() / (var + T::lit(GROUP_NORM_EPS)).sqrt();
            rstd.push(rs);
            for i in r {
                let ch = (i / inner) % c;
                xhat[i] = (xv[i] - mean) * rs;
                out[i] = xhat[i] * g[ch] + bt[ch];
            }
        }
        let value = NdArray::new(&s, out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Cross-correlation of `[N, Ci, D, H, W]` with `[Co, Ci, kd, kh, kw]`, zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let geom = ConvGeom::new(&sx, self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::Shape(format!(
                    "conv3d bias {:?} for {} output channels",
                    self.shape(b),
                    geom.out_ch
                )));
            }
        }
        let n = sx[0];
        let ns = geom.out_spatial();
        let mut out = vec![T::zero(); n * geom.out_ch * ns];
        let mut col = vec![T::zero(); geom.col_rows() * ns];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            geom.im2col(&xv[s * geom.in_len()..(s + 1) * geom.in_len()], &mut col);
            let o = &mut out[s * geom.out_ch * ns..(s + 1) * geom.out_ch * ns];
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    o[co * ns..(co + 1) * ns].iter_mut().for_each(|e| *e = bv);
                }
            }
            gemm_nn(geom.out_ch, ns, geom.col_rows(), wv, &col, o);
        }
        let [od, oh, ow] = geom.output;
        let value = NdArray::new(&[n, geom.out_ch, od, oh, ow], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<NdArray<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NdArray::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<NdArray<T>>], v: Var, g: NdArray<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &NdArray<T>, grads: &mut [Option<NdArray<T>>]) -> Result<()> {
        let gd = g.data();
        let shaped = |like: &NdArray<T>, data: Vec<T>| NdArray::new(like.shape(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, shaped(va, d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, shaped(vb, d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * *c)),
            Op::Silu(a) => {
                let va = self.value(*a);
                let d = gd
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                self.accumulate(grads, *a, shaped(self.value(*a), d));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gv, &e)| gv * e).collect();
                self.accumulate(grads, *a, shaped(self.value(*a), d));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, NdArray::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                self.accumulate(grads, *a, NdArray::full(self.shape(*a), g.item() / n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = T::lit(2.0) * g.item() / T::lit(va.len() as f64);
                let d: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| k * (x - y)).collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, shaped(vb, d.iter().map(|&v| -v).collect()));
                }
                self.accumulate(grads, *a, shaped(va, d));
            }
            Op::KlGaussian(mu, lv) => {
                let gs = g.item();
                let (m, l) = (self.value(*mu), self.value(*lv));
                self.accumulate(grads, *mu, m.map(|u| u * gs));
                let half = T::lit(0.5);
                self.accumulate(grads, *lv, l.map(|v| half * (v.exp() - T::one()) * gs));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshape(self.shape(*a))?);
            }
            Op::TransposeLast(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                // Output is [.., n, m]; transposing back restores [.., m, n].
                let d = transpose_batches(gd, n, m);
                self.accumulate(grads, *a, shaped(self.value(*a), d));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for i in 0..bsz {
                        gemm_nt(m, k, n, &gd[i * m * n..], &vb[i * k * n..], &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, shaped(self.value(*a), da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for i in 0..bsz {
                        gemm_tn(k, n, m, &va[i * m * k..], &gd[i * m * n..], &mut db[i * k * n..(i + 1) * k * n]);
                    }
                    self.accumulate(grads, *b, shaped(self.value(*b), db));
                }
            }
            Op::Linear(x, w, b) => {
                let sw = self.shape(*w);
                let (o, i) = (sw[0], sw[1]);
                let xv = self.value(*x).data();
                let rows = xv.len() / i;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    gemm_nn(rows, i, o, gd, self.value(*w).data(), &mut dx);
                    self.accumulate(grads, *x, shaped(self.value(*x), dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm_tn(o, i, rows, gd, xv, &mut dw);
                    self.accumulate(grads, *w, shaped(self.value(*w), dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for r in 0..rows {
                            for (d, &v) in db.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                                *d = *d + v;
                            }
                        }
                        self.accumulate(grads, *b, shaped(self.value(*b), db));
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, shaped(self.value(*a), d));
            }
            Op::AddChannel(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*v) {
                    let nv = self.value(*v).len();
                    let inner = gd.len() / nv;
                    let d = (0..nv).map(|k| gd[k * inner..(k + 1) * inner].iter().copied().sum()).collect();
                    self.accumulate(grads, *v, shaped(self.value(*v), d));
                }
            }
            Op::RepeatRows(v) => {
                let k = self.value(*v).len();
                let mut d = vec![T::zero(); k];
                for row in gd.chunks(k) {
                    for (o, &x) in d.iter_mut().zip(row) {
                        *o = *o + x;
                    }
                }
                self.accumulate(grads, *v, shaped(self.value(*v), d));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner: usize = sa[2..].iter().product();
                let (la, lb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * la);
                let mut db = Vec::with_capacity(sa[0] * lb);
                for n in 0..sa[0] {
                    let base = n * (la + lb);
                    da.extend_from_slice(&gd[base..base + la]);
                    db.extend_from_slice(&gd[base + la..base + la + lb]);
                }
                self.accumulate(grads, *a, shaped(self.value(*a), da));
                self.accumulate(grads, *b, shaped(self.value(*b), db));
            }
            Op::Upsample2(a) => {
                let s = self.shape(*a);
                let (d, h, w) = (s[2], s[3], s[4]);
                let mut out = vec![T::zero(); self.value(*a).len()];
                for nc in 0..s[0] * s[1] {
                    let base_in = nc * d * h * w;
                    let base_out = nc * 8 * d * h * w;
                    for z in 0..2 * d {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let o = &mut out[base_in + ((z / 2) * h + y / 2) * w + x / 2];
                                *o = *o + gd[base_out + (z * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, shaped(self.value(*a), out));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let per = c / groups * inner;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..gd.len() {
                    let ch = (i / inner) % c;
                    dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                    dbeta[ch] = dbeta[ch] + gd[i];
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m = T::lit(per as f64);
                    for (blk, &rs) in rstd.iter().enumerate() {
                        let r = blk * per..(blk + 1) * per;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in r.clone() {
                            let dxh = gd[i] * gam[(i / inner) % c];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[i];
                        }
                        for i in r {
                            let dxh = gd[i] * gam[(i / inner) % c];
                            dx[i] = rs / m * (m * dxh - s1 - xhat[i] * s2);
                        }
                    }
                    self.accumulate(grads, *x, shaped(self.value(*x), dx));
                }
                self.accumulate(grads, *gamma, shaped(self.value(*gamma), dgamma));
                self.accumulate(grads, *beta, shaped(self.value(*beta), dbeta));
            }
            Op::Conv3d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let ns = geom.out_spatial();
                let rows = geom.col_rows();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut col = vec![T::zero(); rows * ns];
                let mut dw = vec![T::zero(); wv.len()];
                let mut dx = vec![T::zero(); if self.needs(*x) { xv.len() } else { 0 }];
                let mut dcol = vec![T::zero(); rows * ns];
                for s in 0..n {
                    let go = &gd[s * geom.out_ch * ns..(s + 1) * geom.out_ch * ns];
                    if self.needs(*w) {
                        geom.im2col(&xv[s * geom.in_len()..(s + 1) * geom.in_len()], &mut col);
                        gemm_nt(geom.out_ch, rows, ns, go, &col, &mut dw);
                    }
                    if self.needs(*x) {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(rows, ns, geom.out_ch, wv, go, &mut dcol);
                        geom.col2im(&dcol, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, shaped(self.value(*x), dx));
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, shaped(self.value(*w), dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); geom.out_ch];
                        for s in 0..n {
                            for (co, d) in db.iter_mut().enumerate() {
                                let base = (s * geom.out_ch + co) * ns;
                                *d = *d + gd[base..base + ns].iter().copied().sum();
                            }
                        }
                        self.accumulate(grads, *b, shaped(self.value(*b), db));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Transposes every trailing `[m, n]` block of `data`.
fn transpose_batches<T: Copy>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    if m * n == 0 {
        return out;
    }
    for blk in data.chunks(m * n) {
        for j in 0..n {
            for i in 0..m {
                out.push(blk[i * n + j]);
            }
        }
    }
    out
}
