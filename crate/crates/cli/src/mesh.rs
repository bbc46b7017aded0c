//! Neutral mesh export: a plain-text grain-id grid, an orientation table and
//! a metadata JSON with the crystal-plasticity material constants.
//!
//! Grid file layout:
//!
//! ```text
//! # polycrys grain-id grid
//! dims <nx> <ny> <nz>
//! voxel_size_um <s>
//! order x-slowest z-fastest
//! <id of voxel (0,0,0)>
//! <id of voxel (0,0,1)>
//! ...
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use polycrys::grains::{self, edt::squared_edt, SegmentationConfig};
use polycrys::volume::{Dims, GrainLabelVolume, OrientationPalette, VoxelVolume, UNASSIGNED};
use polycrys::{Error, FormatError, Result};
use serde::{Deserialize, Serialize};

pub const GRID_FILE: &str = "grain_ids.txt";
pub const ORIENTATION_FILE: &str = "orientations.csv";
pub const META_FILE: &str = "mesh_meta.json";
const GRID_MAGIC: &str = "# polycrys grain-id grid";

/// Cubic elastic constants (GPa) and applied strain for the downstream solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub c11_gpa: f64,
    pub c12_gpa: f64,
    pub c44_gpa: f64,
    pub applied_strain: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material {
            c11_gpa: 107.3,
            c12_gpa: 60.9,
            c44_gpa: 28.3,
            applied_strain: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshExport {
    pub dims: Dims,
    pub voxel_size_um: f64,
    /// One contiguous id per voxel, x slowest.
    pub ids: Vec<u32>,
    /// Bunge (φ1, Φ, φ2) in radians per grain id.
    pub euler: Vec<[f64; 3]>,
    pub reassigned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshMeta {
    pub dims: [usize; 3],
    pub voxel_size_um: f64,
    pub n_grains: usize,
    pub reassigned_voxels: usize,
    pub palette_id: String,
    pub voxel_order: String,
    pub euler_convention: String,
    pub material: Material,
}

/// Gives every unassigned voxel the id of the nearest assigned voxel
/// (Euclidean, between voxel centers). Ties go to the smaller id.
///
/// The exact distance comes from the squared EDT of the unassigned set; the
/// owner is then found by scanning the shell at that distance.
pub fn reassign_unassigned(labels: &GrainLabelVolume) -> Result<(Vec<u32>, usize)> {
    let dims = labels.dims;
    if labels.n_grains() == 0 {
        return Err(Error::NoGrains);
    }
    let free: Vec<bool> = labels.labels.iter().map(|&l| l == UNASSIGNED).collect();
    let d2 = squared_edt(&free, dims);
    let mut out = Vec::with_capacity(dims.len());
    let mut moved = 0;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != UNASSIGNED {
            out.push(l as u32);
            continue;
        }
        moved += 1;
        let target = d2[i].round() as i64;
        let r = (d2[i].sqrt().ceil()) as i64;
        let (x, y, z) = dims.coords(i);
        let mut best: Option<i32> = None;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx * dx + dy * dy + dz * dz != target {
                        continue;
                    }
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= dims.x as i64 || ny >= dims.y as i64 || nz >= dims.z as i64 {
                        continue;
                    }
                    let n = labels.labels[dims.index(nx as usize, ny as usize, nz as usize)];
                    if n != UNASSIGNED && best.is_none_or(|b| n < b) {
                        best = Some(n);
                    }
                }
            }
        }
        let id = best.ok_or_else(|| Error::Domain(format!("voxel {i} has no assigned neighbour at the EDT distance")))?;
        out.push(id as u32);
    }
    Ok((out, moved))
}

/// Export of an already segmented structure.
pub fn from_analysis(
    analysis: &grains::Analysis,
    palette: &OrientationPalette,
    dims: Dims,
    voxel_size_um: f64,
) -> Result<MeshExport> {
    if analysis.metrics.is_empty() {
        return Err(Error::NoGrains);
    }
    let (ids, reassigned) = reassign_unassigned(&analysis.labels)?;
    let euler = analysis
        .metrics
        .iter()
        .map(|m| palette.entries()[m.palette_index as usize].euler)
        .collect();
    Ok(MeshExport {
        dims,
        voxel_size_um,
        ids,
        euler,
        reassigned,
    })
}

/// Segments `volume` and builds the export in memory.
pub fn build_export(
    volume: &VoxelVolume,
    palette: &OrientationPalette,
    seg: &SegmentationConfig,
) -> Result<(MeshExport, GrainLabelVolume)> {
    let analysis = grains::analyze(volume, palette, seg)?;
    let m = from_analysis(&analysis, palette, volume.dims(), volume.voxel_size_um())?;
    Ok((m, analysis.labels))
}

pub fn grid_text(m: &MeshExport) -> String {
    let mut s = String::with_capacity(m.ids.len() * 4 + 128);
    let _ = writeln!(s, "{GRID_MAGIC}");
    let _ = writeln!(s, "dims {} {} {}", m.dims.x, m.dims.y, m.dims.z);
    let _ = writeln!(s, "voxel_size_um {}", m.voxel_size_um);
    let _ = writeln!(s, "order x-slowest z-fastest");
    for id in &m.ids {
        let _ = writeln!(s, "{id}");
    }
    s
}

pub fn orientation_csv(m: &MeshExport) -> String {
    let mut s = String::from("grain_id,phi1_rad,Phi_rad,phi2_rad\n");
    for (i, e) in m.euler.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", e[0], e[1], e[2]);
    }
    s
}

pub fn meta(m: &MeshExport, palette_id: &str) -> MeshMeta {
    MeshMeta {
        dims: m.dims.as_array(),
        voxel_size_um: m.voxel_size_um,
        n_grains: m.euler.len(),
        reassigned_voxels: m.reassigned,
        palette_id: palette_id.into(),
        voxel_order: "index = (x * ny + y) * nz + z".into(),
        euler_convention: "Bunge ZXZ (phi1, Phi, phi2), radians".into(),
        material: Material::default(),
    }
}

/// Segments `volume` and writes the three export files into `dir`.
pub fn export_mesh(
    volume: &VoxelVolume,
    palette: &OrientationPalette,
    seg: &SegmentationConfig,
    dir: &Path,
) -> Result<MeshExport> {
    let (m, _) = build_export(volume, palette, seg)?;
    write_export(&m, palette.id(), dir)?;
    Ok(m)
}

pub fn write_export(m: &MeshExport, palette_id: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (dir.join(GRID_FILE), grid_text(m)),
        (dir.join(ORIENTATION_FILE), orientation_csv(m)),
        (dir.join(META_FILE), serde_json::to_string_pretty(&meta(m, palette_id))? + "\n"),
    ];
    for (p, text) in &files {
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

fn malformed(msg: impl Into<String>) -> Error {
    FormatError::MalformedHeader(msg.into()).into()
}

/// Reads a grid file back: dims, voxel size and ids.
pub fn read_grid(path: &Path) -> Result<(Dims, f64, Vec<u32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| malformed("grid file ends inside the header"))?
            .map_err(|e| Error::io(path, e))
    };
    let magic = next()?;
    if magic != GRID_MAGIC {
        return Err(FormatError::UnrecognizedFormat {
            expected: GRID_MAGIC.into(),
            found: magic,
        }
        .into());
    }
    let dims_line = next()?;
    let d: Vec<usize> = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| malformed(format!("expected dims, got {dims_line:?}")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| malformed(format!("bad extent {t:?}"))))
        .collect::<Result<_>>()?;
    if d.len() != 3 {
        return Err(malformed(format!("expected 3 extents, got {}", d.len())));
    }
    let size_line = next()?;
    let voxel: f64 = size_line
        .strip_prefix("voxel_size_um ")
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| malformed(format!("expected voxel_size_um, got {size_line:?}")))?;
    let order = next()?;
    if order != "order x-slowest z-fastest" {
        return Err(malformed(format!("unsupported voxel order {order:?}")));
    }
    let dims = Dims::new(d[0], d[1], d[2]);
    let mut ids = Vec::with_capacity(dims.len());
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        ids.push(line.trim().parse().map_err(|_| malformed(format!("bad id {line:?}")))?);
    }
    if ids.len() != dims.len() {
        return Err(FormatError::PayloadSizeMismatch {
            expected: dims.len(),
            actual: ids.len(),
        }
        .into());
    }
    Ok((dims, voxel, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use polycrys::volume::OrientationPalette;

    fn seg() -> SegmentationConfig {
        SegmentationConfig {
            size_threshold_vox: 1,
            watershed_marker_min_distance: 100.0,
        }
    }

    #[test]
    fn single_grain_is_all_zeros() {
        let p = OrientationPalette::default_palette();
        let v = VoxelVolume::constant(Dims::cube(6), p.color(2), 0.5).unwrap();
        let (m, _) = build_export(&v, &p, &seg()).unwrap();
        assert!(m.ids.iter().all(|&i| i == 0));
        assert_eq!(m.euler, vec![p.entries()[2].euler]);
        assert_eq!(orientation_csv(&m).lines().count(), 2);
    }

    #[test]
    fn two_halves_split_at_mid_plane() {
        let p = OrientationPalette::default_palette();
        let dims = Dims::cube(8);
        let mut data = Vec::new();
        for i in 0..dims.len() {
            let (x, _, _) = dims.coords(i);
            data.extend_from_slice(&p.color(if x < 4 { 0 } else { 5 }));
        }
        let v = VoxelVolume::new(dims, data, 0.5).unwrap();
        let (m, _) = build_export(&v, &p, &seg()).unwrap();
        for i in 0..dims.len() {
            let (x, _, _) = dims.coords(i);
            assert_eq!(m.ids[i], if x < 4 { 0 } else { 1 });
        }
        assert_eq!(m.euler, vec![p.entries()[0].euler, p.entries()[5].euler]);
    }

    #[test]
    fn unassigned_voxels_go_to_nearest_grain() {
        let dims = Dims::new(7, 1, 1);
        let labels = GrainLabelVolume::new(dims, vec![1, -1, -1, -1, 0, -1, 1]).unwrap();
        let (ids, moved) = reassign_unassigned(&labels).unwrap();
        // Voxel 2 is two away from both grains and goes to the smaller id.
        assert_eq!(ids, vec![1, 1, 0, 0, 0, 0, 1]);
        assert_eq!(moved, 4);
    }

    #[test]
    fn reassignment_matches_brute_force() {
        let dims = Dims::new(9, 7, 5);
        let mut labels = vec![UNASSIGNED; dims.len()];
        for (k, &i) in [3usize, 100, 200, 250, 301].iter().enumerate() {
            labels[i] = k as i32;
        }
        let lv = GrainLabelVolume::new(dims, labels.clone()).unwrap();
        let (ids, _) = reassign_unassigned(&lv).unwrap();
        for i in 0..dims.len() {
            let (x, y, z) = dims.coords(i);
            let mut best = (i64::MAX, i32::MAX);
            for (j, &l) in labels.iter().enumerate() {
                if l == UNASSIGNED {
                    continue;
                }
                let (a, b, c) = dims.coords(j);
                let d = (x as i64 - a as i64).pow(2) + (y as i64 - b as i64).pow(2) + (z as i64 - c as i64).pow(2);
                best = best.min((d, l));
            }
            assert_eq!(ids[i], best.1 as u32, "voxel {i}");
        }
    }

    #[test]
    fn no_grains_is_an_error() {
        let labels = GrainLabelVolume::new(Dims::cube(2), vec![UNASSIGNED; 8]).unwrap();
        assert!(matches!(reassign_unassigned(&labels), Err(Error::NoGrains)));
    }

    #[test]
    fn grid_roundtrip() {
        let m = MeshExport {
            dims: Dims::new(2, 1, 3),
            voxel_size_um: 0.25,
            ids: vec![0, 1, 1, 2, 0, 2],
            euler: vec![[0.0; 3]; 3],
            reassigned: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        write_export(&m, "p", dir.path()).unwrap();
        let (d, s, ids) = read_grid(&dir.path().join(GRID_FILE)).unwrap();
        assert_eq!((d, s, ids), (m.dims, m.voxel_size_um, m.ids.clone()));
        let meta: MeshMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(META_FILE)).unwrap()).unwrap();
        assert_eq!(meta.material.c11_gpa, 107.3);
        assert_eq!(meta.material.c12_gpa, 60.9);
        assert_eq!(meta.material.c44_gpa, 28.3);
        assert_eq!(meta.material.applied_strain, 0.05);
    }

    #[test]
    fn truncated_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.txt");
        std::fs::write(&p, format!("{GRID_MAGIC}\ndims 2 2 2\nvoxel_size_um 1\norder x-slowest z-fastest\n0\n1\n")).unwrap();
        assert!(matches!(
            read_grid(&p),
            Err(Error::Format(FormatError::PayloadSizeMismatch { expected: 8, actual: 2 }))
        ));
    }
}
