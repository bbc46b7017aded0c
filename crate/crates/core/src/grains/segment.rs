//! Connectivity segmentation with small-grain removal and watershed splitting.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use super::edt::squared_edt;
use super::SegmentationConfig;
use crate::volume::{Dims, GrainLabelVolume, IndexMap, UNASSIGNED};

/// 6-connected components of equal palette index. Returns per-voxel
/// component ids (scan order of first voxel) and component sizes.
pub fn connected_components(map: &IndexMap) -> (Vec<u32>, Vec<usize>) {
    let dims = map.dims;
    const NONE: u32 = u32::MAX;
    let mut comp = vec![NONE; dims.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..dims.len() {
        if comp[start] != NONE {
            continue;
        }
        let id = sizes.len() as u32;
        let color = map.indices[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            dims.for_each_face_neighbor(i, |j| {
                if comp[j] == NONE && map.indices[j] == color {
                    comp[j] = id;
                    queue.push_back(j);
                }
            });
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Quantized index map to grain labels.
///
/// Components below the size threshold become [`UNASSIGNED`]. Each remaining
/// component is flooded from the local maxima of its distance transform (one
/// marker per connected plateau, markers closer than the configured minimum
/// distance to a higher one dropped). Final ids are assigned in scan order.
pub fn segment(map: &IndexMap, config: &SegmentationConfig) -> GrainLabelVolume {
    let dims = map.dims;
    if dims.is_empty() {
        return GrainLabelVolume {
            dims,
            labels: Vec::new(),
        };
    }
    let (comp, sizes) = connected_components(map);
    let n_comp = sizes.len();
    // Voxel lists per component, in scan order.
    let mut members: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (i, &c) in comp.iter().enumerate() {
        members[c as usize].push(i);
    }
    let mut raw = vec![UNASSIGNED; dims.len()];
    let mut next_label = 0i32;
    for c in 0..n_comp {
        if sizes[c] < config.size_threshold_vox {
            continue;
        }
        let basins = split_component(&members[c], dims, config.watershed_marker_min_distance);
        let k = basins.iter().copied().max().map_or(0, |m| m + 1);
        for (&i, &b) in members[c].iter().zip(&basins) {
            raw[i] = next_label + b as i32;
        }
        next_label += k as i32;
    }
    GrainLabelVolume {
        dims,
        labels: relabel_scan_order(&raw),
    }
}

/// Renumbers labels 0..n in order of first appearance; negatives are kept.
pub fn relabel_scan_order(raw: &[i32]) -> Vec<i32> {
    let max = raw.iter().copied().max().unwrap_or(-1);
    let mut remap = vec![-1i32; (max + 1).max(0) as usize];
    let mut next = 0;
    raw.iter()
        .map(|&l| {
            if l < 0 {
                return UNASSIGNED;
            }
            let r = &mut remap[l as usize];
            if *r < 0 {
                *r = next;
                next += 1;
            }
            *r
        })
        .collect()
}

/// Local box around a component, padded by one empty voxel on every side.
struct LocalBox {
    origin: [usize; 3],
    dims: Dims,
}

impl LocalBox {
    fn around(voxels: &[usize], dims: Dims) -> Self {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &i in voxels {
            let (x, y, z) = dims.coords(i);
            for (a, v) in [x, y, z].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        // Local coordinate = global - lo + 1
        LocalBox {
            origin: lo,
            dims: Dims::new(hi[0] - lo[0] + 3, hi[1] - lo[1] + 3, hi[2] - lo[2] + 3),
        }
    }

    fn local(&self, i: usize, dims: Dims) -> usize {
        let (x, y, z) = dims.coords(i);
        self.dims.index(x - self.origin[0] + 1, y - self.origin[1] + 1, z - self.origin[2] + 1)
    }
}

/// Watershed basin index (0..k) for each member voxel.
fn split_component(voxels: &[usize], dims: Dims, min_distance: f64) -> Vec<u32> {
    let bx = LocalBox::around(voxels, dims);
    let ld = bx.dims;
    let mut inside = vec![false; ld.len()];
    let local: Vec<usize> = voxels.iter().map(|&i| bx.local(i, dims)).collect();
    for &l in &local {
        inside[l] = true;
    }
    let dist = squared_edt(&inside, ld);
    let markers = find_markers(&dist, &inside, ld, min_distance);
    if markers.len() <= 1 {
        return vec![0; voxels.len()];
    }
    let basin = flood(&dist, &inside, ld, &markers);
    local.iter().map(|&l| basin[l]).collect()
}

/// Marker plateaus, ordered by descending height.
fn find_markers(dist: &[f64], inside: &[bool], ld: Dims, min_distance: f64) -> Vec<Vec<usize>> {
    let radius = min_distance.floor().max(1.0) as usize;
    let peak = max_filter(dist, ld, radius);
    let candidate: Vec<bool> = (0..ld.len())
        .map(|i| inside[i] && dist[i] > 0.0 && dist[i] >= peak[i])
        .collect();
    // Plateaus: 26-connected groups of candidates (necessarily equal height).
    let mut seen = vec![false; ld.len()];
    let mut plateaus: Vec<(f64, Vec<usize>)> = Vec::new();
    for start in 0..ld.len() {
        if !candidate[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut group = vec![start];
        let mut head = 0;
        while head < group.len() {
            let i = group[head];
            head += 1;
            let (x, y, z) = ld.coords(i);
            for dx in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dz in -1isize..=1 {
                        let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        if a < 0 || b < 0 || c < 0 || a >= ld.x as isize || b >= ld.y as isize || c >= ld.z as isize {
                            continue;
                        }
                        let j = ld.index(a as usize, b as usize, c as usize);
                        if candidate[j] && !seen[j] {
                            seen[j] = true;
                            group.push(j);
                        }
                    }
                }
            }
        }
        group.sort_unstable();
        plateaus.push((dist[start], group));
    }
    plateaus.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1[0].cmp(&b.1[0])));
    let min2 = min_distance * min_distance;
    let mut accepted: Vec<Vec<usize>> = Vec::new();
    for (_, group) in plateaus {
        let far = accepted.iter().all(|m| plateau_distance2(m, &group, ld) >= min2);
        if far {
            accepted.push(group);
        }
    }
    accepted
}

fn plateau_distance2(a: &[usize], b: &[usize], ld: Dims) -> f64 {
    let mut best = f64::INFINITY;
    for &i in a {
        let p = ld.coords(i);
        for &j in b {
            let q = ld.coords(j);
            let d = (p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2) + (p.2 as f64 - q.2 as f64).powi(2);
            best = best.min(d);
        }
    }
    best
}

/// Maximum over the cube window of half-width `r`, separably per axis.
fn max_filter(src: &[f64], ld: Dims, r: usize) -> Vec<f64> {
    let mut cur = src.to_vec();
    let strides = [ld.y * ld.z, ld.z, 1];
    let extents = [ld.x, ld.y, ld.z];
    let mut line = Vec::new();
    for axis in 0..3 {
        let mut next = cur.clone();
        let n = extents[axis];
        let s = strides[axis];
        for i in 0..ld.len() {
            let coord = (i / s) % n;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|k| cur[i + k * s]));
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r).min(n - 1);
                let m = line[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                next[i + k * s] = m;
            }
        }
        cur = next;
    }
    cur
}

#[derive(PartialEq)]
struct Item {
    height: f64,
    age: Reverse<u64>,
    voxel: usize,
    basin: u32,
}

impl Eq for Item {}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        self.height
            .partial_cmp(&other.height)
            .unwrap_or(Ordering::Equal)
            .then(self.age.cmp(&other.age))
    }
}

/// Priority flood on the negated distance: highest distance first, ties FIFO.
fn flood(dist: &[f64], inside: &[bool], ld: Dims, markers: &[Vec<usize>]) -> Vec<u32> {
    const NONE: u32 = u32::MAX;
    let mut basin = vec![NONE; ld.len()];
    let mut queued = vec![false; ld.len()];
    let mut heap = BinaryHeap::new();
    let mut age = 0u64;
    for (b, group) in markers.iter().enumerate() {
        for &i in group {
            queued[i] = true;
            heap.push(Item {
                height: dist[i],
                age: Reverse(age),
                voxel: i,
                basin: b as u32,
            });
            age += 1;
        }
    }
    while let Some(item) = heap.pop() {
        if basin[item.voxel] != NONE {
            continue;
        }
        basin[item.voxel] = item.basin;
        ld.for_each_face_neighbor(item.voxel, |j| {
            if inside[j] && !queued[j] {
                queued[j] = true;
                heap.push(Item {
                    height: dist[j],
                    age: Reverse(age),
                    voxel: j,
                    basin: item.basin,
                });
                age += 1;
            }
        });
    }
    basin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u16) -> IndexMap {
        let idx = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        IndexMap::new(dims, 10, idx).unwrap()
    }

    fn cfg(threshold: usize) -> SegmentationConfig {
        SegmentationConfig {
            size_threshold_vox: threshold,
            ..Default::default()
        }
    }

    fn ball(c: [f64; 3], r: f64, x: usize, y: usize, z: usize) -> bool {
        (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
    }

    #[test]
    fn two_cubes_across_a_gap() {
        let dims = Dims::new(14, 6, 6);
        let map = map_from(dims, |x, _, _| if x == 6 || x == 7 { 1 } else { 0 });
        let labels = segment(&map, &cfg(100));
        // 6-wide gap component has 72 voxels: removed.
        assert_eq!(labels.n_grains(), 2);
        assert_eq!(labels.unassigned_count(), 72);
        assert_eq!(labels.grain_sizes(), vec![216, 216]);
    }

    #[test]
    fn ball_radius_8_stays_whole() {
        let dims = Dims::cube(21);
        let map = map_from(dims, |x, y, z| if ball([10.0; 3], 8.0, x, y, z) { 0 } else { 1 });
        let labels = segment(&map, &cfg(200));
        let inside = (0..dims.len()).filter(|&i| map.indices[i] == 0).count();
        assert!((2000..2300).contains(&inside));
        // The surrounding shell may split at its corners; the ball must not.
        let ball_label = labels.labels[dims.index(10, 10, 10)];
        let ball_labels: std::collections::BTreeSet<i32> =
            (0..dims.len()).filter(|&i| map.indices[i] == 0).map(|i| labels.labels[i]).collect();
        assert_eq!(ball_labels.len(), 1);
        assert_eq!(labels.grain_sizes()[ball_label as usize], inside);
    }

    #[test]
    fn dumbbell_splits_in_two() {
        // Two r=7 balls whose extents overlap by 3 voxels: centers 11 apart.
        let dims = Dims::new(35, 17, 17);
        let a = [8.0, 8.0, 8.0];
        let b = [19.0, 8.0, 8.0];
        let inside = |x, y, z| ball(a, 7.0, x, y, z) || ball(b, 7.0, x, y, z);
        let map = map_from(dims, |x, y, z| if inside(x, y, z) { 0 } else { 1 });
        let mut shape = vec![false; dims.len()];
        for i in 0..dims.len() {
            shape[i] = map.indices[i] == 0;
        }
        // Oracle: the distance transform of the shape has exactly two separated maxima.
        let d = squared_edt(&shape, dims);
        let peak_a = d[dims.index(8, 8, 8)];
        let peak_b = d[dims.index(19, 8, 8)];
        let neck = d[dims.index(13, 8, 8)].max(d[dims.index(14, 8, 8)]);
        assert!(neck < peak_a && neck < peak_b);

        let labels = segment(&map, &cfg(200));
        let la = labels.labels[dims.index(8, 8, 8)];
        let lb = labels.labels[dims.index(19, 8, 8)];
        assert_ne!(la, lb);
        let dumbbell: std::collections::BTreeSet<i32> =
            (0..dims.len()).filter(|&i| shape[i]).map(|i| labels.labels[i]).collect();
        assert_eq!(dumbbell.len(), 2);
    }

    #[test]
    fn elongated_box_is_one_grain() {
        let dims = Dims::new(20, 10, 10);
        let map = map_from(dims, |_, _, _| 3);
        let labels = segment(&map, &cfg(200));
        assert_eq!(labels.n_grains(), 1);
    }

    #[test]
    fn empty_volume_gives_empty_labels() {
        let map = IndexMap::new(Dims::new(0, 0, 0), 10, vec![]).unwrap();
        let labels = segment(&map, &cfg(200));
        assert!(labels.labels.is_empty());
    }

    #[test]
    fn voxel_accounting_is_complete() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let dims = Dims::cube(12);
        let map = map_from(dims, |_, _, _| rng.random_range(0..2));
        let labels = segment(&map, &cfg(5));
        let total: usize = labels.grain_sizes().iter().sum::<usize>() + labels.unassigned_count();
        assert_eq!(total, dims.len());
    }

    #[test]
    fn relabel_is_scan_order() {
        assert_eq!(relabel_scan_order(&[5, 5, -1, 2, 7, 2]), vec![0, 0, -1, 1, 2, 1]);
    }
}
