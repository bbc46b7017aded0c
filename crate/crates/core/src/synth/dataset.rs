use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{generate_structure, StructureRecord, SynthParams};
use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed, splitmix64};
use crate::volume;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub records: Vec<StructureRecord>,
    pub failures: Vec<SampleFailure>,
}

impl DatasetManifest {
    /// Volume file of `record`, resolved against the manifest directory.
    pub fn volume_path(&self, record: &StructureRecord) -> PathBuf {
        resolve(&self.path, &record.volume_path)
    }
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Grain count and structure seed for sample `index`.
///
/// Sample `i` uses `s = child_seed(master, i)` as its structure seed and draws
/// its grain count from a stream seeded with `splitmix64(s)`.
pub fn sample_plan(master_seed: u64, index: usize, n_range: &RangeInclusive<usize>) -> (usize, u64) {
    let seed = child_seed(master_seed, index as u64);
    let n = rng_from_seed(splitmix64(seed)).random_range(n_range.clone());
    (n, seed)
}

/// Streams volumes and manifest lines into a dataset directory.
///
/// A volume that fails to save is listed in `failures` and left out of the
/// manifest; later samples are still written.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest_path: PathBuf,
    manifest: std::io::BufWriter<std::fs::File>,
    records: Vec<StructureRecord>,
    failures: Vec<SampleFailure>,
}

impl DatasetWriter {
    pub fn create(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let manifest_path = out_dir.join(MANIFEST_NAME);
        let file = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(DatasetWriter {
            dir: out_dir.to_path_buf(),
            manifest_path,
            manifest: std::io::BufWriter::new(file),
            records: Vec::new(),
            failures: Vec::new(),
        })
    }

    /// Saves `volume` as `sample_<index>.pcv` and appends its record.
    pub fn push(&mut self, index: usize, volume: &volume::VoxelVolume, mut record: StructureRecord) -> Result<()> {
        let name = format!("sample_{index:05}.pcv");
        let path = self.dir.join(&name);
        if let Err(e) = volume::save(volume, &path) {
            log::warn!("sample {index}: {e}");
            self.failures.push(SampleFailure {
                index,
                path: name,
                error: e.to_string(),
            });
            return Ok(());
        }
        record.volume_path = name;
        let line = serde_json::to_string(&record)?;
        writeln!(self.manifest, "{line}").map_err(|e| Error::io(&self.manifest_path, e))?;
        self.records.push(record);
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        self.manifest.flush().map_err(|e| Error::io(&self.manifest_path, e))?;
        Ok(DatasetManifest {
            path: self.manifest_path,
            records: self.records,
            failures: self.failures,
        })
    }
}

/// Write `count` structures and a JSON-lines manifest into `out_dir`.
pub fn generate_dataset(
    count: usize,
    n_range: RangeInclusive<usize>,
    template: &SynthParams,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_range.is_empty() || *n_range.start() == 0 {
        return Err(Error::Config(format!("invalid grain range {n_range:?}")));
    }
    let mut writer = DatasetWriter::create(out_dir)?;
    for i in 0..count {
        let (n, seed) = sample_plan(master_seed, i, &n_range);
        let params = SynthParams {
            n_grains: n,
            rng_seed: seed,
            ..template.clone()
        };
        let structure = generate_structure(&params)?;
        writer.push(i, &structure.volume, structure.record)?;
    }
    writer.finish()
}

/// Reads a manifest; `path` may name the file or its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(DatasetManifest {
        path,
        records,
        failures: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grains::SegmentationConfig;
    use crate::volume::Dims;

    fn small_template() -> SynthParams {
        SynthParams {
            dims: Dims::cube(16),
            analysis: SegmentationConfig {
                size_threshold_vox: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn three_samples_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(3, 4..=8, &small_template(), 1, dir.path()).unwrap();
        assert_eq!(m.records.len(), 3);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(text.lines().count(), 3);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.records, m.records);
        for r in &loaded.records {
            let v = volume::load(&loaded.volume_path(r)).unwrap();
            assert_eq!(v.dims(), Dims::cube(16));
            assert!((4..=8).contains(&r.target_grains.unwrap()));
        }
    }

    #[test]
    fn same_master_seed_same_manifest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(2, 3..=6, &small_template(), 9, a.path()).unwrap();
        generate_dataset(2, 3..=6, &small_template(), 9, b.path()).unwrap();
        let ta = std::fs::read(a.path().join(MANIFEST_NAME)).unwrap();
        let tb = std::fs::read(b.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(ta, tb);
        for i in 0..2 {
            let name = format!("sample_{i:05}.pcv");
            assert_eq!(
                std::fs::read(a.path().join(&name)).unwrap(),
                std::fs::read(b.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn unwritable_sample_is_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        // A directory squatting on the first sample's file name makes its save fail.
        std::fs::create_dir(dir.path().join("sample_00000.pcv")).unwrap();
        let m = generate_dataset(2, 3..=4, &small_template(), 2, dir.path()).unwrap();
        assert_eq!(m.failures.len(), 1);
        assert_eq!(m.failures[0].index, 0);
        assert_eq!(m.records.len(), 1);
        assert_eq!(load_manifest(dir.path()).unwrap().records.len(), 1);
    }
}
