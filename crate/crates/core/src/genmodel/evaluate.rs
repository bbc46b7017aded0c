use serde::{Deserialize, Serialize};

use super::condition::{ConditionKind, ConditionSpec};
use crate::error::{Error, Result};
use crate::grains::{self, SegmentationConfig};
use crate::rng::child_seed;
use crate::stats::{self, BinStat};
use crate::volume::{OrientationPalette, VoxelVolume};

/// Realized attribute statistics at one condition value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub target: f64,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single sample.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEvaluation {
    pub kind: ConditionKind,
    pub targets: Vec<f64>,
    pub realized: Vec<f64>,
    /// Least-squares fit of realized on target; absent with a single target value.
    pub r_squared: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub spearman: Option<f64>,
    pub binned: Vec<BinStat>,
    pub spread: Vec<SpreadRow>,
}

/// Grain count or mean sphericity of a generated volume.
pub fn realized_attribute(
    kind: ConditionKind,
    volume: &VoxelVolume,
    palette: &OrientationPalette,
    seg: &SegmentationConfig,
) -> Result<f64> {
    let a = grains::analyze(volume, palette, seg)?;
    match kind {
        ConditionKind::GrainCount => Ok(a.metrics.len() as f64),
        ConditionKind::MeanSphericity => Ok(grains::descriptor_means(&a.metrics).map_or(0.0, |m| m.sphericity)),
        k => Err(Error::Config(format!("no realized attribute for {k} conditions"))),
    }
}

/// Generates `samples_per_condition` volumes per grid value, measures the
/// conditioned attribute and summarizes controllability.
///
/// Sample `j` of grid entry `i` is generated with seed
/// `child_seed(seed, i · samples_per_condition + j)`.
pub fn evaluate_conditional(
    mut generate: impl FnMut(&ConditionSpec, u64) -> Result<VoxelVolume>,
    grid: &[ConditionSpec],
    samples_per_condition: usize,
    palette: &OrientationPalette,
    seg: &SegmentationConfig,
    seed: u64,
) -> Result<ConditionalEvaluation> {
    let kind = grid
        .first()
        .ok_or_else(|| Error::Config("empty condition grid".into()))?
        .kind;
    if grid.iter().any(|s| s.kind != kind) {
        return Err(Error::Config("condition grid mixes kinds".into()));
    }
    if samples_per_condition == 0 {
        return Err(Error::Config("need at least one sample per condition".into()));
    }
    let mut groups = Vec::with_capacity(grid.len());
    for (i, spec) in grid.iter().enumerate() {
        let mut vals = Vec::with_capacity(samples_per_condition);
        for j in 0..samples_per_condition {
            let s = child_seed(seed, (i * samples_per_condition + j) as u64);
            let vol = generate(spec, s)?;
            vals.push(realized_attribute(kind, &vol, palette, seg)?);
        }
        log::info!("{} = {}: realized {:?}", kind, spec.value, vals);
        groups.push((spec.value, vals));
    }
    summarize_conditional(kind, &groups)
}

/// Controllability summary of realized values grouped by target value.
pub fn summarize_conditional(kind: ConditionKind, groups: &[(f64, Vec<f64>)]) -> Result<ConditionalEvaluation> {
    if groups.is_empty() || groups.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("every condition needs at least one realized value".into()));
    }
    let mut targets = Vec::new();
    let mut realized = Vec::new();
    let mut spread = Vec::with_capacity(groups.len());
    for (target, vals) in groups {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        spread.push(SpreadRow {
            target: *target,
            n: vals.len(),
            mean,
            std,
            min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
        targets.extend(std::iter::repeat_n(*target, vals.len()));
        realized.extend(vals.iter().copied());
    }
    let fit = stats::linear_fit(&targets, &realized).ok();
    let mut distinct = targets.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    Ok(ConditionalEvaluation {
        kind,
        r_squared: fit.and_then(|_| stats::r_squared_fit(&targets, &realized).ok()),
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
        spearman: stats::spearman(&targets, &realized).ok().filter(|_| distinct.len() > 1),
        binned: stats::binned_mean_stderr(&targets, &realized, distinct.len())?,
        spread,
        targets,
        realized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_structure, SynthParams};
    use crate::volume::Dims;

    fn oracle(spec: &ConditionSpec, seed: u64) -> Result<VoxelVolume> {
        let p = SynthParams {
            dims: Dims::cube(16),
            n_grains: spec.value as usize,
            rng_seed: seed,
            palette_id: "default-v1[..3]".into(),
            analysis: toy_seg(),
            ..SynthParams::default()
        };
        Ok(generate_structure(&p)?.volume)
    }

    fn toy_seg() -> SegmentationConfig {
        SegmentationConfig {
            size_threshold_vox: 20,
            watershed_marker_min_distance: 3.0,
        }
    }

    #[test]
    fn single_condition_gives_one_spread_row() {
        let palette = OrientationPalette::default_prefix(3).unwrap();
        let spec = ConditionSpec::new(ConditionKind::GrainCount, 8.0, [4.0, 32.0]).unwrap();
        let ev = evaluate_conditional(oracle, &[spec], 3, &palette, &toy_seg(), 1).unwrap();
        assert_eq!(ev.spread.len(), 1);
        assert_eq!(ev.spread[0].n, 3);
        assert!(ev.r_squared.is_none());
        assert_eq!(ev.realized.len(), 3);
    }

    #[test]
    fn mixed_grid_is_rejected() {
        let palette = OrientationPalette::default_prefix(3).unwrap();
        let a = ConditionSpec::new(ConditionKind::GrainCount, 8.0, [4.0, 32.0]).unwrap();
        let b = ConditionSpec::new(ConditionKind::MeanSphericity, 0.7, [0.5, 0.9]).unwrap();
        assert!(evaluate_conditional(oracle, &[a, b], 1, &palette, &toy_seg(), 1).is_err());
    }
}
