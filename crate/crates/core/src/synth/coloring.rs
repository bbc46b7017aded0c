use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::GrainLabelVolume;

/// Face-contact graph between grains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    n: usize,
    /// Each edge once, as `(low, high)`.
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            assert!(a < n && b < n, "edge ({a}, {b}) outside {n} nodes");
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        AdjacencyGraph {
            n,
            edges: set,
            neighbors,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }
}

/// Grains that share at least one voxel face. Unassigned voxels are ignored.
pub fn build_adjacency(labels: &GrainLabelVolume) -> AdjacencyGraph {
    let d = labels.dims;
    let l = &labels.labels;
    let mut edges = Vec::new();
    for x in 0..d.x {
        for y in 0..d.y {
            for z in 0..d.z {
                let i = d.index(x, y, z);
                let a = l[i];
                if a < 0 {
                    continue;
                }
                let mut check = |j: usize| {
                    let b = l[j];
                    if b >= 0 && b != a {
                        edges.push((a as usize, b as usize));
                    }
                };
                if x + 1 < d.x {
                    check(d.index(x + 1, y, z));
                }
                if y + 1 < d.y {
                    check(d.index(x, y + 1, z));
                }
                if z + 1 < d.z {
                    check(d.index(x, y, z + 1));
                }
            }
        }
    }
    AdjacencyGraph::from_edges(labels.n_grains(), edges)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring {
    pub colors: Vec<u16>,
    /// Edges whose endpoints ended up with the same color.
    pub conflicts: usize,
}

/// Greedy palette assignment in a seeded random visiting order.
///
/// Each grain takes the globally least-used color among those not already on
/// a colored neighbour. When every color is blocked it takes the color with
/// the fewest colored neighbours carrying it. Ties go to the lowest index.
pub fn greedy_color(graph: &AdjacencyGraph, k: usize, rng: &mut Rng) -> Result<Coloring> {
    if k == 0 {
        return Err(Error::Config("need at least one color".into()));
    }
    let n = graph.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut colors: Vec<Option<u16>> = vec![None; n];
    let mut usage = vec![0usize; k];
    let mut around = vec![0usize; k];
    for &v in &order {
        around.iter_mut().for_each(|c| *c = 0);
        for &u in graph.neighbors(v) {
            if let Some(c) = colors[u] {
                around[c as usize] += 1;
            }
        }
        let free = (0..k).filter(|&c| around[c] == 0).min_by_key(|&c| (usage[c], c));
        let pick = free.unwrap_or_else(|| (0..k).min_by_key(|&c| (around[c], c)).expect("k >= 1"));
        colors[v] = Some(pick as u16);
        usage[pick] += 1;
    }
    let colors: Vec<u16> = colors.into_iter().map(|c| c.expect("all visited")).collect();
    let conflicts = graph
        .edges()
        .filter(|&(a, b)| colors[a] == colors[b])
        .count();
    Ok(Coloring { colors, conflicts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::synth::{sample_seeds, voronoi_labels};
    use crate::volume::Dims;

    #[test]
    fn half_spaces_make_one_edge() {
        let dims = Dims::cube(4);
        let labels = (0..dims.len()).map(|i| (dims.coords(i).0 >= 2) as i32).collect();
        let g = build_adjacency(&GrainLabelVolume::new(dims, labels).unwrap());
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn two_by_two_blocks_make_a_four_cycle() {
        let dims = Dims::new(2, 2, 1);
        // (x, y) -> label: 0 1 / 3 2 around the square
        let labels = vec![0, 1, 3, 2];
        let g = build_adjacency(&GrainLabelVolume::new(dims, labels).unwrap());
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
        assert!(!g.has_edge(0, 2) && !g.has_edge(1, 3));
    }

    #[test]
    fn adjacency_matches_face_pair_scan() {
        let dims = Dims::cube(16);
        let seeds = sample_seeds(8, 0.5, dims, &mut rng_from_seed(21)).unwrap();
        let labels = voronoi_labels(&seeds, dims).unwrap();
        let g = build_adjacency(&labels);
        let mut expected = BTreeSet::new();
        for i in 0..dims.len() {
            for j in 0..dims.len() {
                let (a, b) = (dims.coords(i), dims.coords(j));
                let manhattan = a.0.abs_diff(b.0) + a.1.abs_diff(b.1) + a.2.abs_diff(b.2);
                let (la, lb) = (labels.labels[i], labels.labels[j]);
                if manhattan == 1 && la != lb {
                    expected.insert((la.min(lb) as usize, la.max(lb) as usize));
                }
            }
        }
        assert_eq!(g.edges().collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn unassigned_voxels_do_not_connect() {
        let dims = Dims::new(3, 1, 1);
        let g = build_adjacency(&GrainLabelVolume::new(dims, vec![0, -1, 1]).unwrap());
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn single_node() {
        let g = AdjacencyGraph::from_edges(1, []);
        let c = greedy_color(&g, 10, &mut rng_from_seed(0)).unwrap();
        assert_eq!(c.colors.len(), 1);
        assert_eq!(c.conflicts, 0);
    }

    #[test]
    fn path_never_conflicts() {
        let g = AdjacencyGraph::from_edges(3, [(0, 1), (1, 2)]);
        for s in 0..20 {
            let c = greedy_color(&g, 10, &mut rng_from_seed(s)).unwrap();
            assert_ne!(c.colors[0], c.colors[1]);
            assert_ne!(c.colors[1], c.colors[2]);
            assert_eq!(c.conflicts, 0);
        }
    }

    #[test]
    fn k11_with_ten_colors_has_one_conflict() {
        let edges = (0..11).flat_map(|a| (a + 1..11).map(move |b| (a, b)));
        let g = AdjacencyGraph::from_edges(11, edges);
        for s in 0..10 {
            let c = greedy_color(&g, 10, &mut rng_from_seed(s)).unwrap();
            // Exhaustive check over all pairs.
            let mut same = 0;
            for a in 0..11 {
                for b in a + 1..11 {
                    same += (c.colors[a] == c.colors[b]) as usize;
                }
            }
            assert_eq!(same, 1);
            assert_eq!(c.conflicts, 1);
        }
    }

    #[test]
    fn zero_colors_rejected() {
        let g = AdjacencyGraph::from_edges(1, []);
        assert!(greedy_color(&g, 0, &mut rng_from_seed(0)).is_err());
    }
}
