use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the palette shipped in `palettes/default-v1.json`.
pub const DEFAULT_PALETTE_ID: &str = "default-v1";

const DEFAULT_PALETTE_JSON: &str = include_str!("../../palettes/default-v1.json");

/// Minimum pairwise color distance a palette must keep.
const MIN_SEPARATION: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub color: [f32; 3],
    /// Bunge (φ1, Φ, φ2) in radians.
    pub euler: [f64; 3],
}

/// Fixed set of orientation colors with their export Euler angles.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationPalette {
    id: String,
    entries: Vec<PaletteEntry>,
}

impl OrientationPalette {
    pub fn new(id: impl Into<String>, entries: Vec<PaletteEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.color.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("palette entry {i} color {:?} outside [-1, 1]", e.color)));
            }
            for (j, f) in entries.iter().enumerate().skip(i + 1) {
                let d: f32 = (0..3).map(|c| (e.color[c] - f.color[c]).powi(2)).sum::<f32>().sqrt();
                if d <= MIN_SEPARATION {
                    return Err(Error::Config(format!(
                        "palette entries {i} and {j} are {d:.3} apart (need > {MIN_SEPARATION})"
                    )));
                }
            }
        }
        Ok(OrientationPalette {
            id: id.into(),
            entries,
        })
    }

    /// Skips validation; only for exercising error paths.
    pub fn unchecked(id: impl Into<String>, entries: Vec<PaletteEntry>) -> Self {
        OrientationPalette {
            id: id.into(),
            entries,
        }
    }

    /// The ten-color default: the eight cube corners followed by the two ±x face centers.
    pub fn default_palette() -> Self {
        Self::from_json(DEFAULT_PALETTE_ID, DEFAULT_PALETTE_JSON).expect("bundled palette is valid")
    }

    /// First `k` colors of the default palette.
    pub fn default_prefix(k: usize) -> Result<Self> {
        let full = Self::default_palette();
        if k == 0 || k > full.len() {
            return Err(Error::Config(format!("palette size must be in 1..={}, got {k}", full.len())));
        }
        Ok(OrientationPalette {
            id: format!("{DEFAULT_PALETTE_ID}[..{k}]"),
            entries: full.entries[..k].to_vec(),
        })
    }

    /// Resolves ids produced by [`Self::id`] for the bundled palette family.
    pub fn by_id(id: &str) -> Result<Self> {
        if id == DEFAULT_PALETTE_ID {
            return Ok(Self::default_palette());
        }
        if let Some(k) = id
            .strip_prefix(DEFAULT_PALETTE_ID)
            .and_then(|rest| rest.strip_prefix("[..")?.strip_suffix(']'))
            .and_then(|k| k.parse::<usize>().ok())
        {
            return Self::default_prefix(k);
        }
        Err(Error::Config(format!("unknown palette id {id:?}")))
    }

    pub fn from_json(id: impl Into<String>, text: &str) -> Result<Self> {
        let entries: Vec<PaletteEntry> = serde_json::from_str(text)?;
        Self::new(id, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::from_json(id, &text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("palette serializes")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn color(&self, k: usize) -> [f32; 3] {
        self.entries[k].color
    }
}
