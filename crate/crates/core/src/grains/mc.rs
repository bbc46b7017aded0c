//! Marching cubes for binary masks at the 0.5 iso-level.
//!
//! The 256-case table is built procedurally. Corner `i` of a cell is
//! `(i & 1 ^ (i >> 1) & 1, (i >> 1) & 1, (i >> 2) & 1)` in the usual
//! Lorensen numbering (0..3 on the bottom face counter-clockwise, 4..7 above
//! them); edges 0..11 follow the same convention. With 0/1 corner values
//! every surface vertex is an edge midpoint. On each cell face the crossing
//! edges are paired into segments; a face whose inside corners sit on a
//! diagonal cuts each inside corner off separately, which keeps the surface
//! consistent with 6-connected grains. Segments are chained into loops and
//! each loop is fanned around its vertex centroid, so the triangulation does
//! not depend on how the cell is labeled. Triangles wind counter-clockwise
//! seen from outside the mask.

use std::sync::OnceLock;

pub const CORNERS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Faces as corner cycles plus the outward normal.
const FACES: [([usize; 4], [f64; 3]); 6] = [
    ([0, 1, 2, 3], [0.0, 0.0, -1.0]),
    ([4, 5, 6, 7], [0.0, 0.0, 1.0]),
    ([0, 1, 5, 4], [0.0, -1.0, 0.0]),
    ([3, 2, 6, 7], [0.0, 1.0, 0.0]),
    ([0, 3, 7, 4], [-1.0, 0.0, 0.0]),
    ([1, 2, 6, 5], [1.0, 0.0, 0.0]),
];

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Default)]
pub struct CellCase {
    /// Triangles in cell-local coordinates.
    pub triangles: Vec<[Vec3; 3]>,
    pub area: f64,
    /// Σ det(a, b, c) over the triangles.
    pub det_sum: f64,
    /// Σ (b - a) × (c - a): twice the vector area.
    pub area_vector: Vec3,
}

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

fn corner_pos(c: usize) -> Vec3 {
    let p = CORNERS[c];
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

fn midpoint(e: usize) -> Vec3 {
    let a = corner_pos(EDGES[e][0]);
    let b = corner_pos(EDGES[e][1]);
    [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Directed segments (from edge, to edge) for one face.
fn face_segments(case: u8, corners: [usize; 4], normal: Vec3, out: &mut Vec<(usize, usize)>) {
    let inside = |c: usize| case >> c & 1 == 1;
    let ins: [bool; 4] = corners.map(inside);
    let face_edge = |k: usize| edge_between(corners[k], corners[(k + 1) % 4]);
    let crossing: Vec<usize> = (0..4).filter(|&k| ins[k] != ins[(k + 1) % 4]).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    match crossing.len() {
        0 => {}
        2 => pairs.push((face_edge(crossing[0]), face_edge(crossing[1]))),
        4 => {
            // Diagonal pattern: cut around each inside corner.
            for k in 0..4 {
                if ins[k] {
                    pairs.push((face_edge((k + 3) % 4), face_edge(k)));
                }
            }
        }
        _ => unreachable!("a square has an even number of sign changes"),
    }
    for (ea, eb) in pairs {
        let (pa, pb) = (midpoint(ea), midpoint(eb));
        let d = sub(pb, pa);
        let [c0, c1] = EDGES[ea];
        let (cin, cout) = if inside(c0) { (c0, c1) } else { (c1, c0) };
        let outward = sub(corner_pos(cout), corner_pos(cin));
        if dot(outward, cross(normal, d)) > 0.0 {
            out.push((ea, eb));
        } else {
            out.push((eb, ea));
        }
    }
}

fn build_case(case: u8) -> CellCase {
    let mut segments = Vec::new();
    for (corners, normal) in FACES {
        face_segments(case, corners, normal, &mut segments);
    }
    let mut next = [usize::MAX; 12];
    for &(a, b) in &segments {
        debug_assert_eq!(next[a], usize::MAX, "edge starts two segments in case {case}");
        next[a] = b;
    }
    let mut visited = [false; 12];
    let mut cell = CellCase::default();
    for &(start, _) in &segments {
        if visited[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            lp.push(midpoint(e));
            e = next[e];
        }
        let k = lp.len() as f64;
        let c = lp.iter().fold([0.0; 3], |acc, p| [acc[0] + p[0] / k, acc[1] + p[1] / k, acc[2] + p[2] / k]);
        for i in 0..lp.len() {
            let tri = [c, lp[i], lp[(i + 1) % lp.len()]];
            let n2 = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
            cell.area += 0.5 * norm(n2);
            cell.det_sum += dot(tri[0], cross(tri[1], tri[2]));
            for j in 0..3 {
                cell.area_vector[j] += n2[j];
            }
            cell.triangles.push(tri);
        }
    }
    cell
}

pub fn case_table() -> &'static [CellCase] {
    static TABLE: OnceLock<Vec<CellCase>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(build_case).collect())
}

/// Corner-bit case index from the eight inside flags.
#[inline]
pub fn case_index(inside: [bool; 8]) -> u8 {
    inside.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i))
}

/// Running area and enclosed volume of one mask, cell by cell.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurfaceAccumulator {
    pub area: f64,
    six_volume: f64,
}

impl SurfaceAccumulator {
    /// Adds the cell whose corner 0 sits at `origin` (voxel-center coordinates).
    #[inline]
    pub fn add(&mut self, case: u8, origin: Vec3) {
        if case == 0 || case == 255 {
            return;
        }
        let c = &case_table()[case as usize];
        self.area += c.area;
        self.six_volume += c.det_sum + dot(origin, c.area_vector);
    }

    pub fn volume(&self) -> f64 {
        self.six_volume / 6.0
    }
}

/// Triangles of the iso-surface of `inside` over a grid whose outside is empty.
pub fn mask_triangles(inside: &[bool], dims: crate::volume::Dims) -> Vec<[Vec3; 3]> {
    let table = case_table();
    let at = |x: isize, y: isize, z: isize| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= dims.x as isize || y >= dims.y as isize || z >= dims.z as isize {
            false
        } else {
            inside[dims.index(x as usize, y as usize, z as usize)]
        }
    };
    let mut tris = Vec::new();
    for x in -1..dims.x as isize {
        for y in -1..dims.y as isize {
            for z in -1..dims.z as isize {
                let flags = CORNERS.map(|c| at(x + c[0] as isize, y + c[1] as isize, z + c[2] as isize));
                let o = [x as f64, y as f64, z as f64];
                for t in &table[case_index(flags) as usize].triangles {
                    tris.push(t.map(|p| [p[0] + o[0], p[1] + o[1], p[2] + o[2]]));
                }
            }
        }
    }
    tris
}
