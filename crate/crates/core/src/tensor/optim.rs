use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::NdArray;
use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, FormatError, Result};
use crate::rng::Rng;
use crate::scalar::Real;

/// Named parameter arrays, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<NdArray<T>>,
}

/// Index of a parameter in its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-style normal init with std `sqrt(2 / fan_in)` scaled by `gain`.
    pub fn add_init(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> ParamId {
        let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, NdArray::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &NdArray<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray<T> {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray<T>] {
        &self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Maps parameters onto one graph so gradients can be collected after backward.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        Bound {
            vars: vec![None; store.len()],
        }
    }

    /// Leaf for `id`, created on first use.
    pub fn var<T: Real>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.param(store.get(id).clone()))
    }

    /// Per-parameter gradients; unused parameters get zeros.
    pub fn collect<T: Real>(&self, store: &ParamStore<T>, grads: &mut Gradients<T>) -> Vec<NdArray<T>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| NdArray::zeros(store.values[i].shape()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<NdArray<T>>,
    v: Vec<NdArray<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore<T>| s.values.iter().map(|p| NdArray::zeros(p.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[NdArray<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "adam: {} parameters, {} gradients, {} moments",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.values[i].shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    store.names[i],
                    store.values[i].shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (i, g) in grads.iter().enumerate() {
            let p = store.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &str = "PCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    dtype: String,
    step: u64,
    params: Vec<CheckpointEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Checkpoint contents besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub step: u64,
    pub metadata: serde_json::Value,
}

/// JSON header line, newline, then every parameter in order as little-endian values.
pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>, step: u64, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        dtype: T::DTYPE.into(),
        step,
        params: store
            .names
            .iter()
            .zip(&store.values)
            .map(|(n, v)| CheckpointEntry {
                name: n.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in &store.values {
        for &x in v.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(ParamStore<T>, CheckpointInfo)> {
    if bytes.first() != Some(&b'{') {
        return Err(FormatError::UnrecognizedFormat {
            expected: CHECKPOINT_MAGIC.into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        }
        .into());
    }
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::MalformedHeader("no newline after header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(FormatError::UnrecognizedFormat {
            expected: CHECKPOINT_MAGIC.into(),
            found: header.magic,
        }
        .into());
    }
    if header.dtype != T::DTYPE {
        return Err(FormatError::UnsupportedDtype(header.dtype).into());
    }
    let payload = &bytes[nl + 1..];
    if !payload.len().is_multiple_of(T::BYTES) {
        return Err(FormatError::TruncatedPayload {
            bytes: payload.len(),
            unit: T::BYTES,
        }
        .into());
    }
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if expected != payload.len() / T::BYTES {
        return Err(FormatError::PayloadSizeMismatch {
            expected,
            actual: payload.len() / T::BYTES,
        }
        .into());
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let data = (0..n).map(|k| T::read_le(&payload[off + k * T::BYTES..])).collect();
        off += n * T::BYTES;
        store.add(p.name, NdArray::new(&p.shape, data)?);
    }
    Ok((
        store,
        CheckpointInfo {
            step: header.step,
            metadata: header.metadata,
        },
    ))
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, step: u64, metadata: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store, step, metadata)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, CheckpointInfo)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Copies values from `src` into `dst` by name; every name in `dst` must be present with the same shape.
pub fn load_into<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<()> {
    for i in 0..dst.len() {
        let name = &dst.names[i];
        let j = src
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        if src.values[j].shape() != dst.values[i].shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: checkpoint {:?} vs model {:?}",
                src.values[j].shape(),
                dst.values[i].shape()
            )));
        }
        dst.values[i] = src.values[j].clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", NdArray::scalar(v));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut s = one_param(1.0);
            let mut st = AdamState::new(&s, AdamConfig { lr: 0.01, ..Default::default() });
            st.step(&mut s, &[NdArray::scalar(g)]).unwrap();
            let moved = (s.get(ParamId(0)).item() - 1.0).abs();
            assert!((moved - 0.01).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = one_param(3.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..50 {
            st.step(&mut s, &[NdArray::scalar(0.0)]).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).item(), 3.0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // Started far enough out that 100 steps of size ~lr never reach the
        // minimum; nearer starts overshoot and oscillate around 0.
        let mut s = one_param(10.0);
        let mut st = AdamState::new(&s, AdamConfig { lr: 0.1, ..Default::default() });
        // Independent scalar simulation.
        let (mut x, mut m, mut v) = (10.0f64, 0.0, 0.0);
        let mut trace = vec![];
        for t in 1..=100 {
            trace.push(s.get(ParamId(0)).item().abs());
            let g = 2.0 * s.get(ParamId(0)).item();
            st.step(&mut s, &[NdArray::scalar(g)]).unwrap();
            let gx = 2.0 * x;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((s.get(ParamId(0)).item() - x).abs() < 1e-12);
        }
        trace.push(s.get(ParamId(0)).item().abs());
        assert!(trace[3..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = one_param(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        assert!(st.step(&mut s, &[NdArray::zeros(&[2])]).is_err());
        assert!(st.step(&mut s, &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = rng_from_seed(5);
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("a", NdArray::randn(&[3, 4], 1.0, &mut rng));
        s.add("b", NdArray::randn(&[7], 0.1, &mut rng));
        let meta = serde_json::json!({"kind": "test"});
        let bytes = encode_checkpoint(&s, 42, &meta).unwrap();
        let (back, info) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(info.step, 42);
        assert_eq!(info.metadata, meta);
        assert_eq!(back.names(), s.names());
        for (x, y) in back.values().iter().zip(s.values()) {
            assert_eq!(x.shape(), y.shape());
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(Error::Format(FormatError::UnsupportedDtype(_)))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 4]),
            Err(Error::Format(FormatError::PayloadSizeMismatch { .. }))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(b"PCK1"),
            Err(Error::Format(FormatError::UnrecognizedFormat { .. }))
        ));
    }
}
