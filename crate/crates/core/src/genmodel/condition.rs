use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Dense};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::{NdArray, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    None,
    ClassLabel,
    GrainCount,
    MeanSphericity,
}

impl ConditionKind {
    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::None => "none",
            ConditionKind::ClassLabel => "class_label",
            ConditionKind::GrainCount => "grain_count",
            ConditionKind::MeanSphericity => "mean_sphericity",
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConditionKind::None),
            "class_label" => Ok(ConditionKind::ClassLabel),
            "grain_count" => Ok(ConditionKind::GrainCount),
            "mean_sphericity" => Ok(ConditionKind::MeanSphericity),
            _ => Err(Error::Config(format!(
                "unknown condition kind {s:?} (expected none, class_label, grain_count or mean_sphericity)"
            ))),
        }
    }
}

/// A requested attribute value and the training range it is normalized by.
/// For class labels `value` is the class index and `range` is `[0, classes - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub value: f64,
    pub range: [f64; 2],
}

impl ConditionSpec {
    pub fn none() -> Self {
        ConditionSpec {
            kind: ConditionKind::None,
            value: 0.0,
            range: [0.0, 1.0],
        }
    }

    pub fn new(kind: ConditionKind, value: f64, range: [f64; 2]) -> Result<Self> {
        if !(range[0] < range[1]) && kind != ConditionKind::None {
            return Err(Error::Config(format!("condition range {range:?} is empty")));
        }
        if !value.is_finite() {
            return Err(Error::Config(format!("condition value {value} is not finite")));
        }
        Ok(ConditionSpec { kind, value, range })
    }

    /// Parses `kind=value`, e.g. `grain_count=125`.
    pub fn parse(text: &str, range: [f64; 2]) -> Result<Self> {
        if text == "none" {
            return Ok(Self::none());
        }
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("condition {text:?} is not kind=value")))?;
        let value = v
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("condition value {v:?}: {e}")))?;
        Self::new(k.trim().parse()?, value, range)
    }

    /// Min-max position of `value` in the training range.
    pub fn normalized(&self) -> f64 {
        (self.value - self.range[0]) / (self.range[1] - self.range[0])
    }

    pub fn in_range(&self) -> bool {
        (self.range[0]..=self.range[1]).contains(&self.value)
    }

    pub fn classes(&self) -> usize {
        self.range[1].round().max(0.0) as usize + 1
    }
}

/// Condition encoder geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionConfig {
    pub kind: ConditionKind,
    pub range: [f64; 2],
    pub tokens: usize,
    pub token_dim: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        ConditionConfig {
            kind: ConditionKind::GrainCount,
            range: [50.0, 300.0],
            tokens: 4,
            token_dim: 32,
        }
    }
}

impl ConditionConfig {
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ConditionKind::None => 0,
            ConditionKind::ClassLabel => self.range[1].round().max(0.0) as usize + 1,
            ConditionKind::GrainCount | ConditionKind::MeanSphericity => 1,
        }
    }

    pub fn spec(&self, value: f64) -> Result<ConditionSpec> {
        ConditionSpec::new(self.kind, value, self.range)
    }

    /// Encoder input for `spec`: the normalized scalar, or a one-hot class.
    pub fn features(&self, spec: &ConditionSpec) -> Result<Vec<f64>> {
        if spec.kind != ConditionKind::None && spec.kind != self.kind {
            return Err(Error::Config(format!(
                "model is conditioned on {}, got a {} condition",
                self.kind, spec.kind
            )));
        }
        if !spec.in_range() {
            log::warn!("{} = {} is outside the training range {:?}", spec.kind, spec.value, spec.range);
        }
        Ok(match self.kind {
            ConditionKind::None => vec![],
            ConditionKind::ClassLabel => {
                let mut v = vec![0.0; self.feature_dim()];
                let k = spec.value.round();
                if k < 0.0 || k as usize >= v.len() {
                    return Err(Error::OutOfRange {
                        index: k.max(0.0) as usize,
                        extent: v.len(),
                    });
                }
                v[k as usize] = 1.0;
                v
            }
            ConditionKind::GrainCount | ConditionKind::MeanSphericity => {
                // Scale by this model's range, whatever range the caller carried.
                vec![(spec.value - self.range[0]) / (self.range[1] - self.range[0])]
            }
        })
    }
}

/// Linear map from condition features to `m` tokens, plus a learned null token set.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub config: ConditionConfig,
    proj: Option<Dense>,
    null: ParamId,
}

impl ConditionEncoder {
    pub fn new<T: Real>(s: &mut ParamStore<T>, config: ConditionConfig, rng: &mut Rng) -> Self {
        let width = config.tokens * config.token_dim;
        let proj = (config.feature_dim() > 0).then(|| Dense::new(s, "cond.proj", config.feature_dim(), width, 1.0, rng));
        let null = s.add("cond.null", NdArray::randn(&[width], 1.0, rng));
        ConditionEncoder { config, proj, null }
    }

    /// Tokens `[N, m, D]`. Entries with `keep[i] == false`, and every
    /// unconditional spec, get the null tokens.
    pub fn embed<T: Real>(&self, c: &mut Ctx<T>, specs: &[ConditionSpec], keep: &[bool]) -> Result<Var> {
        let n = specs.len();
        if keep.len() != n || n == 0 {
            return Err(Error::Shape(format!("{n} conditions with {} keep flags", keep.len())));
        }
        let (m, d) = (self.config.tokens, self.config.token_dim);
        let null = c.p(self.null);
        let null_rows = c.g.repeat_rows(null, n)?;
        let use_proj: Vec<bool> = specs
            .iter()
            .zip(keep)
            .map(|(s, &k)| k && s.kind != ConditionKind::None)
            .collect();
        let flat = match (&self.proj, use_proj.iter().any(|&u| u)) {
            (Some(proj), true) => {
                let f = self.config.feature_dim();
                let mut feats = Vec::with_capacity(n * f);
                for (s, &u) in specs.iter().zip(&use_proj) {
                    if u {
                        feats.extend(self.config.features(s)?);
                    } else {
                        feats.extend(std::iter::repeat_n(0.0, f));
                    }
                }
                let fx = c.constant(NdArray::from_f64(&[n, f], &feats)?);
                let enc = proj.forward(c, fx)?;
                let mask: Vec<f64> = use_proj
                    .iter()
                    .flat_map(|&u| std::iter::repeat_n(if u { 1.0 } else { 0.0 }, m * d))
                    .collect();
                let inv: Vec<f64> = mask.iter().map(|v| 1.0 - v).collect();
                let mk = c.constant(NdArray::from_f64(&[n, m * d], &mask)?);
                let mi = c.constant(NdArray::from_f64(&[n, m * d], &inv)?);
                let a = c.g.mul(enc, mk)?;
                let b = c.g.mul(null_rows, mi)?;
                c.g.add(a, b)?
            }
            _ => null_rows,
        };
        c.g.reshape(flat, &[n, m, d])
    }

    /// Tokens `[m, D]` for one condition.
    pub fn embed_one<T: Real>(&self, store: &ParamStore<T>, spec: &ConditionSpec) -> Result<NdArray<T>> {
        let mut c = Ctx::new(store);
        let v = self.embed(&mut c, std::slice::from_ref(spec), &[true])?;
        c.value(v).clone().reshape(&[self.config.tokens, self.config.token_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn normalization_by_training_range() {
        let cfg = ConditionConfig {
            range: [50.0, 300.0],
            ..Default::default()
        };
        assert_eq!(cfg.features(&cfg.spec(50.0).unwrap()).unwrap(), vec![0.0]);
        assert_eq!(cfg.features(&cfg.spec(175.0).unwrap()).unwrap(), vec![0.5]);
        assert_eq!(cfg.spec(175.0).unwrap().normalized(), 0.5);
        assert!(!cfg.spec(400.0).unwrap().in_range());
    }

    #[test]
    fn parse_and_unknown_kind() {
        let s = ConditionSpec::parse("grain_count=125", [50.0, 300.0]).unwrap();
        assert_eq!(s.kind, ConditionKind::GrainCount);
        assert_eq!(s.value, 125.0);
        assert!(matches!(ConditionSpec::parse("texture=1", [0.0, 1.0]), Err(Error::Config(_))));
        assert!("mean_sphericity".parse::<ConditionKind>().is_ok());
    }

    #[test]
    fn token_shape_for_every_kind() {
        for (kind, range, value) in [
            (ConditionKind::None, [0.0, 1.0], 0.0),
            (ConditionKind::ClassLabel, [0.0, 2.0], 1.0),
            (ConditionKind::GrainCount, [50.0, 300.0], 125.0),
            (ConditionKind::MeanSphericity, [0.6, 0.9], 0.7),
        ] {
            let cfg = ConditionConfig {
                kind,
                range,
                tokens: 4,
                token_dim: 8,
            };
            let mut store = ParamStore::<f32>::new();
            let enc = ConditionEncoder::new(&mut store, cfg, &mut rng_from_seed(1));
            let spec = ConditionSpec::new(kind, value, range).unwrap();
            assert_eq!(enc.embed_one(&store, &spec).unwrap().shape(), &[4, 8]);
        }
    }

    #[test]
    fn dropped_conditions_equal_null_tokens() {
        let cfg = ConditionConfig::default();
        let mut store = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&mut store, cfg.clone(), &mut rng_from_seed(4));
        let spec = cfg.spec(125.0).unwrap();
        let null = enc.embed_one(&store, &ConditionSpec::none()).unwrap();
        let mut c = Ctx::new(&store);
        let v = enc.embed(&mut c, &[spec, spec], &[false, true]).unwrap();
        let out = c.value(v).data();
        let width = 4 * 32;
        assert_eq!(&out[..width], null.data());
        assert_ne!(&out[width..], null.data());
    }

    #[test]
    fn class_labels_are_one_hot() {
        let cfg = ConditionConfig {
            kind: ConditionKind::ClassLabel,
            range: [0.0, 3.0],
            ..Default::default()
        };
        assert_eq!(cfg.features(&cfg.spec(2.0).unwrap()).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(cfg.features(&ConditionSpec::new(ConditionKind::ClassLabel, 7.0, [0.0, 3.0]).unwrap()).is_err());
    }
}
