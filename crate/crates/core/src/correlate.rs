//! Two-point correlation curves and channel CDFs.
//!
//! S2 uses the periodic convention: the autocorrelation of a mask `m` at
//! offset `d` is `(1/N) Σ_x m(x) m((x + d) mod dims)`, and offsets are
//! grouped into integer shells by the rounded minimum-image length.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{volume_fractions, Dims, IndexMap, VoxelVolume, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2Curve {
    /// Integer lags `0..=r_max`.
    pub radii: Vec<usize>,
    pub values: Vec<f64>,
}

impl S2Curve {
    pub fn r_max(&self) -> usize {
        self.radii.len().saturating_sub(1)
    }

    fn zeros(r_max: usize) -> Self {
        S2Curve {
            radii: (0..=r_max).collect(),
            values: vec![0.0; r_max + 1],
        }
    }
}

/// Largest lag reported for a grid: half the smallest extent.
pub fn r_max(dims: Dims) -> usize {
    dims.x.min(dims.y).min(dims.z) / 2
}

/// Shell index of every offset, or `usize::MAX` beyond `r_max`.
pub fn shell_map(dims: Dims) -> Vec<usize> {
    let rm = r_max(dims);
    let mi = |d: usize, n: usize| {
        let d = d.min(n - d);
        (d * d) as f64
    };
    (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let r = (mi(x, dims.x) + mi(y, dims.y) + mi(z, dims.z)).sqrt().round() as usize;
            if r <= rm {
                r
            } else {
                usize::MAX
            }
        })
        .collect()
}

/// In-place 3D FFT as 1D passes along each axis.
fn fft3(buf: &mut [Complex<f64>], dims: Dims, planner: &mut FftPlanner<f64>, inverse: bool) {
    let extents = [dims.x, dims.y, dims.z];
    let strides = [dims.y * dims.z, dims.z, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = extents[axis];
        let s = strides[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        for start in 0..buf.len() {
            if !(start / s).is_multiple_of(n) {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|k| buf[start + k * s]));
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, v) in line.iter().enumerate() {
                buf[start + k * s] = *v;
            }
        }
    }
}

/// Periodic autocorrelation at every offset.
pub fn autocorrelation(mask: &[bool], dims: Dims) -> Result<Vec<f64>> {
    check_mask(mask, dims)?;
    let n = dims.len() as f64;
    let mut buf: Vec<Complex<f64>> = mask.iter().map(|&m| Complex::new(m as u8 as f64, 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft3(&mut buf, dims, &mut planner, false);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    fft3(&mut buf, dims, &mut planner, true);
    // Unnormalized inverse carries a factor N; the correlation another 1/N.
    Ok(buf.iter().map(|v| v.re / (n * n)).collect())
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.x < 2 || dims.y < 2 || dims.z < 2 {
        return Err(Error::Shape(format!("S2 needs every extent >= 2, got {dims:?}")));
    }
    Ok(())
}

fn check_mask(mask: &[bool], dims: Dims) -> Result<()> {
    check_dims(dims)?;
    if mask.len() != dims.len() {
        return Err(Error::Shape(format!("mask has {} voxels, dims {:?}", mask.len(), dims)));
    }
    Ok(())
}

/// Shell averages of a per-offset field.
pub fn radial_average(field: &[f64], dims: Dims) -> S2Curve {
    let rm = r_max(dims);
    let mut sum = vec![0.0; rm + 1];
    let mut count = vec![0usize; rm + 1];
    for (v, r) in field.iter().zip(shell_map(dims)) {
        if r != usize::MAX {
            sum[r] += v;
            count[r] += 1;
        }
    }
    S2Curve {
        radii: (0..=rm).collect(),
        values: sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect(),
    }
}

/// S2 of a binary mask. Lag 0 is the counted volume fraction.
pub fn s2_fft(mask: &[bool], dims: Dims) -> Result<S2Curve> {
    check_mask(mask, dims)?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(S2Curve::zeros(r_max(dims)));
    }
    let mut curve = radial_average(&autocorrelation(mask, dims)?, dims);
    for v in curve.values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    curve.values[0] = count as f64 / dims.len() as f64;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedS2 {
    pub fractions: Vec<f64>,
    pub per_orientation: Vec<S2Curve>,
    pub weighted: S2Curve,
}

/// Per-orientation curves and their volume-fraction-weighted sum.
pub fn s2_weighted(map: &IndexMap) -> Result<WeightedS2> {
    let dims = map.dims;
    check_dims(dims)?;
    let fractions = volume_fractions(&map.indices, map.k);
    let mut per = Vec::with_capacity(map.k);
    let mut weighted = S2Curve::zeros(r_max(dims));
    for (k, &phi) in fractions.iter().enumerate() {
        let curve = if phi > 0.0 {
            let mask: Vec<bool> = map.indices.iter().map(|&i| i as usize == k).collect();
            s2_fft(&mask, dims)?
        } else {
            S2Curve::zeros(r_max(dims))
        };
        for (w, v) in weighted.values.iter_mut().zip(&curve.values) {
            *w += phi * v;
        }
        per.push(curve);
    }
    Ok(WeightedS2 {
        fractions,
        per_orientation: per,
        weighted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2Envelope {
    pub radii: Vec<usize>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn s2_envelope(curves: &[S2Curve]) -> Result<S2Envelope> {
    let first = curves.first().ok_or_else(|| Error::Shape("envelope of no curves".into()))?;
    let len = first.values.len();
    if let Some(c) = curves.iter().find(|c| c.values.len() != len) {
        return Err(Error::Shape(format!(
            "curve lengths differ: {} vs {}",
            len,
            c.values.len()
        )));
    }
    let n = curves.len() as f64;
    let mut env = S2Envelope {
        radii: first.radii.clone(),
        min: first.values.clone(),
        mean: vec![0.0; len],
        max: first.values.clone(),
    };
    for c in curves {
        for (r, &v) in c.values.iter().enumerate() {
            env.min[r] = env.min[r].min(v);
            env.max[r] = env.max[r].max(v);
            env.mean[r] += v / n;
        }
    }
    Ok(env)
}

pub const CDF_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbCdf {
    /// Evenly spaced over [-1, 1].
    pub grid: Vec<f64>,
    /// Fraction of voxels with channel value ≤ grid point.
    pub channels: [Vec<f64>; CHANNELS],
}

pub fn cdf_grid() -> Vec<f64> {
    (0..CDF_POINTS)
        .map(|i| -1.0 + 2.0 * i as f64 / (CDF_POINTS - 1) as f64)
        .collect()
}

pub fn rgb_cdf(volume: &VoxelVolume) -> RgbCdf {
    let grid = cdf_grid();
    let n = volume.dims().len();
    let channels = std::array::from_fn(|c| {
        let mut vals: Vec<f64> = volume.data().iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect();
        vals.sort_by(f64::total_cmp);
        grid.iter()
            .map(|&g| {
                if n == 0 {
                    0.0
                } else {
                    vals.partition_point(|&v| v <= g) as f64 / n as f64
                }
            })
            .collect()
    });
    RgbCdf { grid, channels }
}
