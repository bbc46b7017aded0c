//! Grain segmentation and per-grain morphology.
//!
//! Grains are 6-connected regions of one palette color. Small regions are
//! excluded (label -1), merged neighbours are split by a distance-transform
//! watershed, and every retained grain gets volume, marching-cubes surface
//! area, sphericity and aspect ratio.

pub mod edt;
pub mod mc;
pub mod segment;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GrainLabelVolume, IndexMap, OrientationPalette, VoxelVolume};
use mc::{case_index, SurfaceAccumulator, CORNERS};

pub use segment::{connected_components, relabel_scan_order, segment};

/// Sphericity above which a grain is reported as a discretization outlier.
pub const SPHERICITY_FLAG: f64 = 1.05;

/// Segmentation knobs. Connectivity is always 6-face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub size_threshold_vox: usize,
    pub watershed_marker_min_distance: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            size_threshold_vox: 200,
            watershed_marker_min_distance: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainMetrics {
    pub grain_id: usize,
    pub volume_vox: usize,
    pub volume_um3: f64,
    pub surface_area_um2: f64,
    pub sphericity: f64,
    pub aspect_ratio: f64,
    /// Mean voxel index `(x, y, z)`.
    pub centroid: [f64; 3],
    pub palette_index: u16,
    /// Sphericity exceeded [`SPHERICITY_FLAG`].
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub index_map: IndexMap,
    pub labels: GrainLabelVolume,
    pub metrics: Vec<GrainMetrics>,
}

/// Quantize, segment and measure.
pub fn analyze(
    volume: &VoxelVolume,
    palette: &OrientationPalette,
    config: &SegmentationConfig,
) -> Result<Analysis> {
    let (_, index_map) = volume.quantize(palette)?;
    let labels = segment(&index_map, config);
    let metrics = grain_metrics(&labels, &index_map, volume.voxel_size_um())?;
    Ok(Analysis {
        index_map,
        labels,
        metrics,
    })
}

#[derive(Clone, Copy)]
struct Moments {
    count: usize,
    lo: [usize; 3],
    hi: [usize; 3],
    sum: [f64; 3],
    /// xx, yy, zz, xy, xz, yz
    sq: [f64; 6],
    palette_index: u16,
}

impl Moments {
    fn empty() -> Self {
        Moments {
            count: 0,
            lo: [usize::MAX; 3],
            hi: [0; 3],
            sum: [0.0; 3],
            sq: [0.0; 6],
            palette_index: 0,
        }
    }
}

/// Per-grain metrics for every id in `labels`, in id order.
///
/// Surface area comes from marching cubes over each grain's mask (the
/// enclosed volume of the same surface feeds the sphericity, so a digital
/// shape is compared with its own iso-surface rather than with its voxel
/// count). Aspect ratio uses the voxel-coordinate covariance plus 1/12 per
/// diagonal entry, the covariance of a unit voxel.
pub fn grain_metrics(
    labels: &GrainLabelVolume,
    index_map: &IndexMap,
    voxel_size_um: f64,
) -> Result<Vec<GrainMetrics>> {
    let dims = labels.dims;
    if index_map.dims != dims {
        return Err(Error::Shape(format!(
            "labels {:?} vs index map {:?}",
            dims, index_map.dims
        )));
    }
    let n = labels.n_grains();
    let mut mom = vec![Moments::empty(); n];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let m = &mut mom[l as usize];
        let (x, y, z) = dims.coords(i);
        let p = [x, y, z];
        if m.count == 0 {
            m.palette_index = index_map.indices[i];
        }
        m.count += 1;
        for a in 0..3 {
            m.lo[a] = m.lo[a].min(p[a]);
            m.hi[a] = m.hi[a].max(p[a]);
        }
        let (fx, fy, fz) = (x as f64, y as f64, z as f64);
        m.sum[0] += fx;
        m.sum[1] += fy;
        m.sum[2] += fz;
        m.sq[0] += fx * fx;
        m.sq[1] += fy * fy;
        m.sq[2] += fz * fz;
        m.sq[3] += fx * fy;
        m.sq[4] += fx * fz;
        m.sq[5] += fy * fz;
    }
    let vs = voxel_size_um;
    let mut out = Vec::with_capacity(n);
    for (g, m) in mom.iter().enumerate() {
        if m.count == 0 {
            return Err(Error::Domain(format!("grain {g} has no voxels")));
        }
        let surface = grain_surface(labels, g as i32, m.lo, m.hi);
        let area = surface.area * vs * vs;
        let enclosed = surface.volume() * vs * vs * vs;
        let sphericity = sphericity(enclosed, area);
        let flagged = sphericity > SPHERICITY_FLAG;
        if flagged {
            log::warn!("grain {g}: sphericity {sphericity:.4} above {SPHERICITY_FLAG}");
        }
        let c = m.count as f64;
        let mean = m.sum.map(|s| s / c);
        let cov = |k: usize, a: usize, b: usize| m.sq[k] / c - mean[a] * mean[b];
        let reg = 1.0 / 12.0;
        let (xy, xz, yz) = (cov(3, 0, 1), cov(4, 0, 2), cov(5, 1, 2));
        let matrix = Matrix3::new(
            cov(0, 0, 0) + reg, xy, xz,
            xy, cov(1, 1, 1) + reg, yz,
            xz, yz, cov(2, 2, 2) + reg,
        );
        let aspect_ratio = aspect_ratio_of(matrix);
        out.push(GrainMetrics {
            grain_id: g,
            volume_vox: m.count,
            volume_um3: c * vs * vs * vs,
            surface_area_um2: area,
            sphericity,
            aspect_ratio,
            centroid: mean,
            palette_index: m.palette_index,
            flagged,
        });
    }
    Ok(out)
}

/// ψ = π^(1/3) (6V)^(2/3) / A.
pub fn sphericity(volume: f64, area: f64) -> f64 {
    std::f64::consts::PI.cbrt() * (6.0 * volume).powf(2.0 / 3.0) / area
}

fn aspect_ratio_of(cov: Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    (max / min).sqrt().max(1.0)
}

/// Marching cubes over the bounding box of grain `g`, padded by one empty layer.
fn grain_surface(labels: &GrainLabelVolume, g: i32, lo: [usize; 3], hi: [usize; 3]) -> SurfaceAccumulator {
    let dims = labels.dims;
    let at = |x: isize, y: isize, z: isize| -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < dims.x
            && (y as usize) < dims.y
            && (z as usize) < dims.z
            && labels.labels[dims.index(x as usize, y as usize, z as usize)] == g
    };
    let mut acc = SurfaceAccumulator::default();
    for x in lo[0] as isize - 1..=hi[0] as isize {
        for y in lo[1] as isize - 1..=hi[1] as isize {
            for z in lo[2] as isize - 1..=hi[2] as isize {
                let flags = CORNERS.map(|c| at(x + c[0] as isize, y + c[1] as isize, z + c[2] as isize));
                acc.add(case_index(flags), [x as f64, y as f64, z as f64]);
            }
        }
    }
    acc
}

/// Equivalent-sphere diameter d = (6V / (nπ))^(1/3).
pub fn mean_grain_size(total_volume_um3: f64, n_grains: usize) -> Result<f64> {
    if n_grains == 0 {
        return Err(Error::Domain("mean grain size needs at least one grain".into()));
    }
    if !(total_volume_um3 > 0.0) {
        return Err(Error::Domain(format!("volume must be positive, got {total_volume_um3}")));
    }
    Ok((6.0 * total_volume_um3 / (n_grains as f64 * std::f64::consts::PI)).cbrt())
}

/// Grain count whose equivalent-sphere diameter is `d_um`: round(6V / (π d³)).
pub fn grain_count_for_size(total_volume_um3: f64, d_um: f64) -> Result<usize> {
    if !(total_volume_um3 > 0.0) || !(d_um > 0.0) {
        return Err(Error::Domain(format!(
            "volume and diameter must be positive, got {total_volume_um3} and {d_um}"
        )));
    }
    let n = (6.0 * total_volume_um3 / (std::f64::consts::PI * d_um.powi(3))).round();
    if n < 1.0 {
        return Err(Error::Domain(format!("diameter {d_um} µm exceeds the volume")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMeans {
    pub volume_um3: f64,
    pub sphericity: f64,
    pub aspect_ratio: f64,
}

/// Arithmetic means, or `None` for an empty list.
pub fn descriptor_means(metrics: &[GrainMetrics]) -> Option<DescriptorMeans> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    Some(DescriptorMeans {
        volume_um3: metrics.iter().map(|m| m.volume_um3).sum::<f64>() / n,
        sphericity: metrics.iter().map(|m| m.sphericity).sum::<f64>() / n,
        aspect_ratio: metrics.iter().map(|m| m.aspect_ratio).sum::<f64>() / n,
    })
}

/// Histogram binning: `n` equal bins over the data range, or explicit edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bins {
    Uniform(usize),
    Edges(Vec<f64>),
}

impl Default for Bins {
    fn default() -> Self {
        Bins::Uniform(20)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins are half-open `[e_i, e_{i+1})` except the last, which is closed.
    /// Values outside the edges are not counted.
    pub fn new(values: &[f64], bins: &Bins) -> Result<Self> {
        let edges = match bins {
            Bins::Edges(e) => {
                if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config("histogram edges must be increasing".into()));
                }
                e.clone()
            }
            Bins::Uniform(0) => return Err(Error::Config("need at least one bin".into())),
            Bins::Uniform(n) => {
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let (lo, hi) = if !lo.is_finite() {
                    (0.0, 1.0)
                } else if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                };
                (0..=*n).map(|i| lo + (hi - lo) * i as f64 / *n as f64).collect()
            }
        };
        let mut counts = vec![0usize; edges.len() - 1];
        let last = edges.len() - 1;
        for &v in values {
            if v < edges[0] || v > edges[last] {
                continue;
            }
            let k = edges.partition_point(|&e| e <= v).saturating_sub(1).min(last - 1);
            counts[k] += 1;
        }
        Ok(Histogram { edges, counts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SummaryBins {
    pub volume_um3: Bins,
    pub aspect_ratio: Bins,
    pub sphericity: Bins,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSummary {
    pub n_grains: usize,
    pub means: DescriptorMeans,
    pub volume_um3: Histogram,
    pub aspect_ratio: Histogram,
    pub sphericity: Histogram,
    pub flagged: usize,
}

pub fn descriptor_summary(metrics: &[GrainMetrics], bins: &SummaryBins) -> Result<DescriptorSummary> {
    let means = descriptor_means(metrics).ok_or(Error::NoGrains)?;
    let col = |f: fn(&GrainMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
    Ok(DescriptorSummary {
        n_grains: metrics.len(),
        means,
        volume_um3: Histogram::new(&col(|m| m.volume_um3), &bins.volume_um3)?,
        aspect_ratio: Histogram::new(&col(|m| m.aspect_ratio), &bins.aspect_ratio)?,
        sphericity: Histogram::new(&col(|m| m.sphericity), &bins.sphericity)?,
        flagged: metrics.iter().filter(|m| m.flagged).count(),
    })
}
