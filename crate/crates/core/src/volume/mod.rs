//! Voxel microstructure data model.
//!
//! Memory and file order is channel-fastest, then z, then y, with x slowest:
//! the value of channel `c` at voxel `(x, y, z)` lives at
//! `((x * ny + y) * nz + z) * 3 + c`. Scalar per-voxel grids (palette
//! indices, grain labels) use the same order without the channel term.

mod palette;
mod pcv;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use palette::{OrientationPalette, PaletteEntry, DEFAULT_PALETTE_ID};
pub use pcv::{load, read_pcv, save, write_pcv, PCV_MAGIC};

pub const CHANNELS: usize = 3;
pub const DEFAULT_VOXEL_SIZE_UM: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Dims { x, y, z }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { x: n, y: n, z: n }
    }

    pub const fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.y + y) * self.z + z
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let z = i % self.z;
        let y = (i / self.z) % self.y;
        let x = i / (self.z * self.y);
        (x, y, z)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    /// Physical volume of the whole grid.
    pub fn volume_um3(&self, voxel_size_um: f64) -> f64 {
        self.len() as f64 * voxel_size_um.powi(3)
    }

    /// Visits the face neighbours of voxel `i`.
    #[inline]
    pub fn for_each_face_neighbor(&self, i: usize, mut f: impl FnMut(usize)) {
        let (x, y, z) = self.coords(i);
        let sx = self.y * self.z;
        let sy = self.z;
        if x > 0 {
            f(i - sx);
        }
        if x + 1 < self.x {
            f(i + sx);
        }
        if y > 0 {
            f(i - sy);
        }
        if y + 1 < self.y {
            f(i + sy);
        }
        if z > 0 {
            f(i - 1);
        }
        if z + 1 < self.z {
            f(i + 1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

/// Header metadata carried alongside a volume through save/load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub palette_id: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Dense 3-channel orientation-color grid with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: Dims,
    voxel_size_um: f64,
    data: Vec<f32>,
    pub meta: VolumeMeta,
}

impl VoxelVolume {
    pub fn new(dims: Dims, data: Vec<f32>, voxel_size_um: f64) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config(format!("volume extents must be positive, got {dims:?}")));
        }
        if data.len() != dims.len() * CHANNELS {
            return Err(Error::Shape(format!(
                "volume {:?} needs {} values, got {}",
                dims,
                dims.len() * CHANNELS,
                data.len()
            )));
        }
        if !(voxel_size_um > 0.0 && voxel_size_um.is_finite()) {
            return Err(Error::Config(format!("voxel size must be positive, got {voxel_size_um}")));
        }
        if let Some(bad) = data.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "value {} at offset {bad} lies outside [-1, 1]",
                data[bad]
            )));
        }
        Ok(VoxelVolume {
            dims,
            voxel_size_um,
            data,
            meta: VolumeMeta::default(),
        })
    }

    /// Volume with every voxel set to `color`.
    pub fn constant(dims: Dims, color: [f32; 3], voxel_size_um: f64) -> Result<Self> {
        let data = (0..dims.len()).flat_map(|_| color).collect();
        Self::new(dims, data, voxel_size_um)
    }

    pub fn with_meta(mut self, meta: VolumeMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size_um(&self) -> f64 {
        self.voxel_size_um
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, i: usize) -> [f32; 3] {
        let o = i * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn voxel_at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.voxel(self.dims.index(x, y, z))
    }

    /// 2D section perpendicular to `axis` at `index`.
    pub fn extract_slice(&self, axis: Axis, index: usize) -> Result<SliceImage> {
        let extent = self.dims.extent(axis);
        if index >= extent {
            return Err(Error::OutOfRange { index, extent });
        }
        let d = self.dims;
        let (rows, cols) = match axis {
            Axis::X => (d.y, d.z),
            Axis::Y => (d.x, d.z),
            Axis::Z => (d.x, d.y),
        };
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let i = match axis {
                    Axis::X => d.index(index, r, c),
                    Axis::Y => d.index(r, index, c),
                    Axis::Z => d.index(r, c, index),
                };
                pixels.push(self.voxel(i));
            }
        }
        Ok(SliceImage { rows, cols, pixels })
    }

    /// Copy of this volume with the section at `axis`/`index` replaced by `image`.
    pub fn embed_slice(&self, axis: Axis, index: usize, image: &SliceImage) -> Result<Self> {
        let probe = self.extract_slice(axis, index)?;
        if probe.rows != image.rows || probe.cols != image.cols {
            return Err(Error::Shape(format!(
                "slice is {}x{}, image is {}x{}",
                probe.rows, probe.cols, image.rows, image.cols
            )));
        }
        let d = self.dims;
        let mut out = self.clone();
        for r in 0..image.rows {
            for c in 0..image.cols {
                let i = match axis {
                    Axis::X => d.index(index, r, c),
                    Axis::Y => d.index(r, index, c),
                    Axis::Z => d.index(r, c, index),
                };
                let px = image.pixels[r * image.cols + c];
                out.data[i * CHANNELS..i * CHANNELS + CHANNELS].copy_from_slice(&px);
            }
        }
        Ok(out)
    }

    /// Replace each voxel with its nearest palette color.
    ///
    /// Distance is Euclidean in color space; ties resolve to the lowest
    /// palette index.
    pub fn quantize(&self, palette: &OrientationPalette) -> Result<(VoxelVolume, IndexMap)> {
        if palette.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }
        let colors: Vec<[f32; 3]> = palette.entries().iter().map(|e| e.color).collect();
        let mut indices = Vec::with_capacity(self.dims.len());
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(CHANNELS) {
            let k = nearest_color(&colors, [px[0], px[1], px[2]]);
            indices.push(k as u16);
            data.extend_from_slice(&colors[k]);
        }
        let volume = VoxelVolume {
            dims: self.dims,
            voxel_size_um: self.voxel_size_um,
            data,
            meta: self.meta.clone(),
        };
        let map = IndexMap {
            dims: self.dims,
            k: colors.len(),
            indices,
        };
        Ok((volume, map))
    }
}

/// Index of the nearest color; the strict comparison keeps the lowest index on ties.
#[inline]
pub fn nearest_color(colors: &[[f32; 3]], px: [f32; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (k, c) in colors.iter().enumerate() {
        let d = (px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<[f32; 3]>,
}

/// Per-voxel palette index produced by quantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub dims: Dims,
    /// Palette size the indices refer to.
    pub k: usize,
    pub indices: Vec<u16>,
}

impl IndexMap {
    pub fn new(dims: Dims, k: usize, indices: Vec<u16>) -> Result<Self> {
        if indices.len() != dims.len() {
            return Err(Error::Shape(format!(
                "index map {:?} needs {} entries, got {}",
                dims,
                dims.len(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::Domain(format!("palette index {bad} not below K = {k}")));
        }
        Ok(IndexMap { dims, k, indices })
    }

    /// Fraction of voxels carrying each palette index, as counts over total.
    pub fn volume_fractions(&self) -> Vec<f64> {
        volume_fractions(&self.indices, self.k)
    }
}

pub fn volume_fractions(indices: &[u16], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i as usize] += 1;
    }
    let total = indices.len() as f64;
    if indices.is_empty() {
        return vec![0.0; k];
    }
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// Per-voxel grain identifier; `-1` marks voxels excluded from statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrainLabelVolume {
    pub dims: Dims,
    pub labels: Vec<i32>,
}

pub const UNASSIGNED: i32 = -1;

impl GrainLabelVolume {
    pub fn new(dims: Dims, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "label volume {:?} needs {} entries, got {}",
                dims,
                dims.len(),
                labels.len()
            )));
        }
        Ok(GrainLabelVolume { dims, labels })
    }

    pub fn n_grains(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    pub fn unassigned_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    /// Voxel count per grain id.
    pub fn grain_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_grains()];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(n: usize, seed: u64) -> VoxelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims::cube(n);
        let data = (0..dims.len() * 3).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        VoxelVolume::new(dims, data, DEFAULT_VOXEL_SIZE_UM).unwrap()
    }

    #[test]
    fn index_and_coords_agree() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
        assert_eq!(d.index(1, 0, 0), 20);
        assert_eq!(d.index(0, 1, 0), 5);
    }

    #[test]
    fn rejects_out_of_range_values() {
        let err = VoxelVolume::new(Dims::cube(1), vec![0.0, 1.5, 0.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(VoxelVolume::new(Dims::cube(1), vec![0.0; 3], 0.0).is_err());
        assert!(VoxelVolume::new(Dims::cube(2), vec![0.0; 3], 0.5).is_err());
    }

    #[test]
    fn quantize_fixed_point_on_palette_colors() {
        let palette = OrientationPalette::default_palette();
        let dims = Dims::cube(4);
        let data = (0..dims.len())
            .flat_map(|i| palette.entries()[i % palette.len()].color)
            .collect();
        let v = VoxelVolume::new(dims, data, 0.5).unwrap();
        let (q, map) = v.quantize(&palette).unwrap();
        assert_eq!(q.data(), v.data());
        for (i, &k) in map.indices.iter().enumerate() {
            assert_eq!(k as usize, i % palette.len());
        }
    }

    #[test]
    fn quantize_tie_goes_to_lowest_index() {
        let mut entries: Vec<PaletteEntry> = (0..6)
            .map(|i| PaletteEntry {
                color: [-1.0 + 0.3 * i as f32, -1.0, -1.0],
                euler: [0.0; 3],
            })
            .collect();
        // Entries 2 and 5 equidistant from the origin, everything else farther.
        entries[2].color = [0.5, 0.0, 0.0];
        entries[5].color = [-0.5, 0.0, 0.0];
        let palette = OrientationPalette::new("tie", entries).unwrap();
        let v = VoxelVolume::constant(Dims::cube(1), [0.0, 0.0, 0.0], 0.5).unwrap();
        let (_, map) = v.quantize(&palette).unwrap();
        assert_eq!(map.indices, vec![2]);
    }

    #[test]
    fn quantize_matches_exhaustive_search() {
        let palette = OrientationPalette::default_palette();
        let v = random_volume(8, 7);
        let (q, map) = v.quantize(&palette).unwrap();
        for i in 0..v.dims().len() {
            let px = v.voxel(i);
            // Brute force: collect all distances, pick the first minimum.
            let dists: Vec<f32> = palette
                .entries()
                .iter()
                .map(|e| (0..3).map(|c| (px[c] - e.color[c]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f32::INFINITY, f32::min);
            let expected = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(map.indices[i] as usize, expected);
            assert_eq!(q.voxel(i), palette.entries()[expected].color);
        }
    }

    #[test]
    fn quantize_empty_palette_is_config_error() {
        let v = random_volume(2, 1);
        let empty = OrientationPalette::unchecked("empty", vec![]);
        assert!(matches!(v.quantize(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn constant_volume_gives_constant_slices() {
        let v = VoxelVolume::constant(Dims::new(3, 4, 5), [0.25, -0.5, 1.0], 0.5).unwrap();
        for axis in Axis::ALL {
            let img = v.extract_slice(axis, 1).unwrap();
            assert!(img.pixels.iter().all(|&p| p == [0.25, -0.5, 1.0]));
        }
        let img = v.extract_slice(Axis::X, 0).unwrap();
        assert_eq!((img.rows, img.cols), (4, 5));
        let img = v.extract_slice(Axis::Y, 0).unwrap();
        assert_eq!((img.rows, img.cols), (3, 5));
        let img = v.extract_slice(Axis::Z, 0).unwrap();
        assert_eq!((img.rows, img.cols), (3, 4));
    }

    #[test]
    fn slice_index_out_of_range() {
        let v = VoxelVolume::constant(Dims::new(3, 4, 5), [0.0; 3], 0.5).unwrap();
        assert!(matches!(
            v.extract_slice(Axis::Z, 5),
            Err(Error::OutOfRange { index: 5, extent: 5 })
        ));
    }

    #[test]
    fn slice_reembed_is_identity() {
        let v = random_volume(6, 3);
        for axis in Axis::ALL {
            for idx in [0, 3, 5] {
                let img = v.extract_slice(axis, idx).unwrap();
                assert_eq!(v.embed_slice(axis, idx, &img).unwrap(), v);
            }
        }
    }

    #[test]
    fn z_halves_slice_colors() {
        let dims = Dims::cube(64);
        let a = [1.0f32, -1.0, -1.0];
        let b = [-1.0f32, 1.0, -1.0];
        let mut data = Vec::with_capacity(dims.len() * 3);
        for i in 0..dims.len() {
            let (_, _, z) = dims.coords(i);
            data.extend_from_slice(if z < 32 { &a } else { &b });
        }
        let v = VoxelVolume::new(dims, data, 0.5).unwrap();
        assert!(v.extract_slice(Axis::Z, 10).unwrap().pixels.iter().all(|&p| p == a));
        assert!(v.extract_slice(Axis::Z, 50).unwrap().pixels.iter().all(|&p| p == b));
    }

    #[test]
    fn fractions_basic_cases() {
        let f = volume_fractions(&[0; 8], 10);
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|&x| x == 0.0));
        let f = volume_fractions(&[0, 1, 0, 1], 10);
        assert_eq!(&f[..3], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn fractions_match_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let idx: Vec<u16> = (0..16 * 16 * 16).map(|_| rng.random_range(0..10)).collect();
        let f = volume_fractions(&idx, 10);
        for k in 0..10u16 {
            let count = idx.iter().filter(|&&i| i == k).count();
            assert_eq!(f[k as usize], count as f64 / idx.len() as f64);
        }
        let total: f64 = f.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
            (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f32>().sqrt()
        }

        proptest! {
            #[test]
            fn quantize_idempotent(vals in proptest::collection::vec(-1.0f32..=1.0, 27 * 3)) {
                let palette = OrientationPalette::default_palette();
                let v = VoxelVolume::new(Dims::cube(3), vals, 0.5).unwrap();
                let (q1, m1) = v.quantize(&palette).unwrap();
                let (q2, m2) = q1.quantize(&palette).unwrap();
                prop_assert_eq!(q1.data(), q2.data());
                prop_assert_eq!(m1, m2);
            }

            #[test]
            fn quantize_never_moves_away(vals in proptest::collection::vec(-1.0f32..=1.0, 27 * 3)) {
                let palette = OrientationPalette::default_palette();
                let v = VoxelVolume::new(Dims::cube(3), vals, 0.5).unwrap();
                let (q, _) = v.quantize(&palette).unwrap();
                for i in 0..27 {
                    let near = |p: [f32; 3]| palette.entries().iter()
                        .map(|e| dist(p, e.color)).fold(f32::INFINITY, f32::min);
                    prop_assert!(near(q.voxel(i)) <= near(v.voxel(i)));
                }
            }

            #[test]
            fn fractions_sum_to_one(idx in proptest::collection::vec(0u16..10, 1..200)) {
                let s: f64 = volume_fractions(&idx, 10).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
