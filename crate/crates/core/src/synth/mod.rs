//! Voronoi microstructure synthesis.
//!
//! Seeds are placed by a hard-core process: every pair of seeds keeps a
//! distance of at least `regularity * r_eq`, where `r_eq = (3V / (4πn))^(1/3)`
//! is the radius of a sphere holding one grain's share of the domain. Voxels
//! take the label of the nearest seed (voxel centers at `i + 0.5`, open
//! domain boundaries), grains are colored greedily over their face-contact
//! graph, and descriptors come from running the grain analysis on the result.

mod coloring;
mod dataset;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grains::{self, SegmentationConfig};
use crate::rng::{rng_from_seed, Rng};
use crate::volume::{Dims, GrainLabelVolume, OrientationPalette, VolumeMeta, VoxelVolume, DEFAULT_VOXEL_SIZE_UM};

pub use coloring::{build_adjacency, greedy_color, AdjacencyGraph, Coloring};
pub use dataset::{generate_dataset, load_manifest, sample_plan, DatasetManifest, DatasetWriter, SampleFailure, MANIFEST_NAME};

pub type Seed = [f64; 3];

/// Attempts allowed per requested seed before seeding is declared infeasible.
pub const ATTEMPTS_PER_SEED: usize = 10_000;

/// Exclusion radius for `n` seeds at `regularity` in a domain of `volume` voxels.
pub fn exclusion_radius(n: usize, regularity: f64, volume: f64) -> f64 {
    regularity * (3.0 * volume / (4.0 * std::f64::consts::PI * n as f64)).cbrt()
}

/// Draw `n` seeds strictly inside the domain with pairwise distance at least
/// the exclusion radius.
pub fn sample_seeds(n: usize, regularity: f64, dims: Dims, rng: &mut Rng) -> Result<Vec<Seed>> {
    if n == 0 {
        return Err(Error::Config("n_grains must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&regularity) {
        return Err(Error::Config(format!("regularity must be in [0, 1], got {regularity}")));
    }
    if dims.is_empty() {
        return Err(Error::Config("domain has zero extent".into()));
    }
    sample_seeds_spaced(n, exclusion_radius(n, regularity, dims.len() as f64), dims, rng)
}

/// Random sequential seeding with an explicit exclusion radius `delta` (voxels).
pub fn sample_seeds_spaced(n: usize, delta: f64, dims: Dims, rng: &mut Rng) -> Result<Vec<Seed>> {
    if n == 0 || dims.is_empty() {
        return Err(Error::Config("need at least one seed and a non-empty domain".into()));
    }
    let delta2 = delta * delta;
    let ext = [dims.x as f64, dims.y as f64, dims.z as f64];
    let max_attempts = ATTEMPTS_PER_SEED * n;
    let mut seeds: Vec<Seed> = Vec::with_capacity(n);
    let mut attempts = 0;
    while seeds.len() < n {
        if attempts >= max_attempts {
            return Err(Error::Infeasible { n, delta });
        }
        attempts += 1;
        let p = [
            open_unit(rng) * ext[0],
            open_unit(rng) * ext[1],
            open_unit(rng) * ext[2],
        ];
        if delta2 > 0.0 && seeds.iter().any(|s| dist2(s, &p) < delta2) {
            continue;
        }
        seeds.push(p);
    }
    Ok(seeds)
}

fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[inline]
fn dist2(a: &Seed, b: &Seed) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Nearest-seed labeling of every voxel center.
///
/// Ties go to the lowest seed index. Seeds whose cell captures no voxel
/// center are dropped and the remaining labels compacted, so ids always
/// cover `0..n_grains`; with no empty cells label `i` is seed `i`.
pub fn voronoi_labels(seeds: &[Seed], dims: Dims) -> Result<GrainLabelVolume> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let n = seeds.len();
    // Per-axis squared offsets, table[axis][coord * n + seed].
    let table = |extent: usize, axis: usize| -> Vec<f64> {
        let mut t = Vec::with_capacity(extent * n);
        for c in 0..extent {
            let center = c as f64 + 0.5;
            t.extend(seeds.iter().map(|s| (center - s[axis]).powi(2)));
        }
        t
    };
    let tx = table(dims.x, 0);
    let ty = table(dims.y, 1);
    let tz = table(dims.z, 2);
    let mut labels = vec![0i32; dims.len()];
    let mut partial = vec![0.0f64; n];
    for x in 0..dims.x {
        let rx = &tx[x * n..(x + 1) * n];
        for y in 0..dims.y {
            let ry = &ty[y * n..(y + 1) * n];
            for s in 0..n {
                partial[s] = rx[s] + ry[s];
            }
            for z in 0..dims.z {
                let rz = &tz[z * n..(z + 1) * n];
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for s in 0..n {
                    let d = partial[s] + rz[s];
                    if d < best_d {
                        best_d = d;
                        best = s;
                    }
                }
                labels[dims.index(x, y, z)] = best as i32;
            }
        }
    }
    let mut used = vec![false; n];
    for &l in &labels {
        used[l as usize] = true;
    }
    if used.iter().any(|u| !u) {
        let mut remap = vec![-1i32; n];
        let mut next = 0;
        for (s, &u) in used.iter().enumerate() {
            if u {
                remap[s] = next;
                next += 1;
            }
        }
        log::debug!("{} of {n} seeds own no voxel center; labels compacted", n - next as usize);
        for l in labels.iter_mut() {
            *l = remap[*l as usize];
        }
    }
    GrainLabelVolume::new(dims, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Voronoi,
    Diffusion,
}

/// Dataset unit: where a volume lives plus its grain descriptors.
///
/// Descriptor means are zero when no grain survives segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRecord {
    pub volume_path: String,
    pub grain_count: usize,
    pub mean_grain_size_um3: f64,
    pub mean_sphericity: f64,
    pub mean_aspect_ratio: f64,
    pub rng_seed: u64,
    pub generator: Generator,
    /// Seed count requested from the generator (the grain-count condition).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_grains: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coloring_conflicts: Option<usize>,
}

impl StructureRecord {
    /// Builds a record from an analyzed volume.
    pub fn from_analysis(
        analysis: &grains::Analysis,
        rng_seed: u64,
        generator: Generator,
    ) -> Self {
        let (size, sph, ar) = match grains::descriptor_means(&analysis.metrics) {
            Some(m) => (m.volume_um3, m.sphericity, m.aspect_ratio),
            None => (0.0, 0.0, 0.0),
        };
        StructureRecord {
            volume_path: String::new(),
            grain_count: analysis.metrics.len(),
            mean_grain_size_um3: size,
            mean_sphericity: sph,
            mean_aspect_ratio: ar,
            rng_seed,
            generator,
            target_grains: None,
            coloring_conflicts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub dims: Dims,
    pub n_grains: usize,
    pub regularity: f64,
    pub palette_id: String,
    pub rng_seed: u64,
    pub voxel_size_um: f64,
    /// Segmentation used to compute the record's descriptors.
    pub analysis: SegmentationConfig,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            dims: Dims::cube(64),
            n_grains: 125,
            regularity: 0.5,
            palette_id: crate::volume::DEFAULT_PALETTE_ID.into(),
            rng_seed: 0,
            voxel_size_um: DEFAULT_VOXEL_SIZE_UM,
            analysis: SegmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Structure {
    pub volume: VoxelVolume,
    /// Tessellation labels (one id per surviving seed).
    pub tessellation: GrainLabelVolume,
    pub coloring: Coloring,
    pub analysis: grains::Analysis,
    pub record: StructureRecord,
}

/// Full synthesis recipe: seeds, tessellation, coloring, descriptors.
/// A pure function of `params`.
pub fn generate_structure(params: &SynthParams) -> Result<Structure> {
    let palette = OrientationPalette::by_id(&params.palette_id)?;
    let mut rng = rng_from_seed(params.rng_seed);
    let seeds = sample_seeds(params.n_grains, params.regularity, params.dims, &mut rng)?;
    let tessellation = voronoi_labels(&seeds, params.dims)?;
    let graph = build_adjacency(&tessellation);
    let coloring = greedy_color(&graph, palette.len(), &mut rng)?;
    let mut data = Vec::with_capacity(params.dims.len() * 3);
    for &l in &tessellation.labels {
        data.extend_from_slice(&palette.color(coloring.colors[l as usize] as usize));
    }
    let volume = VoxelVolume::new(params.dims, data, params.voxel_size_um)?.with_meta(VolumeMeta {
        palette_id: palette.id().to_string(),
        seed: Some(params.rng_seed),
        extra: Default::default(),
    });
    let analysis = grains::analyze(&volume, &palette, &params.analysis)?;
    let mut record = StructureRecord::from_analysis(&analysis, params.rng_seed, Generator::Voronoi);
    record.target_grains = Some(params.n_grains);
    record.coloring_conflicts = Some(coloring.conflicts);
    Ok(Structure {
        volume,
        tessellation,
        coloring,
        analysis,
        record,
    })
}
