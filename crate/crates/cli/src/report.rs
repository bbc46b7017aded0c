//! Plot artifacts: each is a CSV of the data, a JSON summary and an SVG.
//!
//! Builders only compute; nothing touches the disk until [`write_all`], so a
//! failing report leaves no partial files behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use polycrys::correlate::{RgbCdf, S2Curve, WeightedS2};
use polycrys::genmodel::{ConditionalEvaluation, LossTrace};
use polycrys::grains::{Bins, Histogram, SummaryBins};
use polycrys::stats::{self, DescriptorSamples};
use polycrys::{Error, Result};
use serde_json::json;

use crate::svg::{data_range, padded, Canvas, COLORS};

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub csv: String,
    pub json: serde_json::Value,
    pub svg: String,
}

impl Artifact {
    pub fn paths(&self, dir: &Path) -> [PathBuf; 3] {
        ["csv", "json", "svg"].map(|ext| dir.join(format!("{}.{ext}", self.name)))
    }
}

/// Writes `<name>.csv`, `<name>.json` and `<name>.svg` for every artifact.
pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for a in artifacts {
        let [csv, js, svg] = a.paths(dir);
        std::fs::write(&csv, &a.csv).map_err(|e| Error::io(&csv, e))?;
        let text = serde_json::to_string_pretty(&a.json)? + "\n";
        std::fs::write(&js, text).map_err(|e| Error::io(&js, e))?;
        std::fs::write(&svg, &a.svg).map_err(|e| Error::io(&svg, e))?;
        written.extend([csv, js, svg]);
    }
    Ok(written)
}

/// Mean and sample standard deviation (0 for one value).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn histogram(name: &str, label: &str, values: &[f64], bins: &Bins) -> Result<Artifact> {
    if values.is_empty() {
        return Err(Error::NoGrains);
    }
    let h = Histogram::new(values, bins)?;
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", h.edges[i], h.edges[i + 1], c);
    }
    let (mean, std) = mean_std(values);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let top = h.counts.iter().copied().max().unwrap_or(0) as f64;
    let x = (h.edges[0], h.edges[h.edges.len() - 1]);
    let mut c = Canvas::new(label, label, "count", x, (0.0, (top * 1.1).max(1.0)));
    for (i, &n) in h.counts.iter().enumerate() {
        c.bar(h.edges[i], h.edges[i + 1], n as f64, COLORS[0]);
    }
    c.note(&format!("n = {}, mean = {:.4}", values.len(), mean));
    Ok(Artifact {
        name: name.into(),
        csv,
        json: json!({
            "descriptor": label,
            "n": values.len(),
            "mean": mean,
            "std": std,
            "min": min,
            "max": max,
            "edges": h.edges,
            "counts": h.counts,
        }),
        svg: c.finish(),
    })
}

/// Grain size, aspect ratio and sphericity histograms.
pub fn descriptor_histograms(samples: &DescriptorSamples, bins: &SummaryBins) -> Result<Vec<Artifact>> {
    if samples.grain_size_um3.is_empty() {
        return Err(Error::NoGrains);
    }
    Ok(vec![
        histogram("hist_grain_size", "grain size (µm³)", &samples.grain_size_um3, &bins.volume_um3)?,
        histogram("hist_aspect_ratio", "aspect ratio", &samples.aspect_ratio, &bins.aspect_ratio)?,
        histogram("hist_sphericity", "sphericity", &samples.sphericity, &bins.sphericity)?,
    ])
}

/// Min / mean / max envelope of weighted S2 curves.
pub fn s2_envelope(name: &str, curves: &[S2Curve]) -> Result<Artifact> {
    let env = polycrys::correlate::s2_envelope(curves)?;
    let mut csv = String::from("r,min,mean,max\n");
    for (i, r) in env.radii.iter().enumerate() {
        let _ = writeln!(csv, "{r},{},{},{}", env.min[i], env.mean[i], env.max[i]);
    }
    let r: Vec<f64> = env.radii.iter().map(|&r| r as f64).collect();
    let y = padded(data_range(env.min.iter().chain(&env.max).copied()), 0.05);
    let mut c = Canvas::new("two-point correlation", "r (voxels)", "S2(r)", data_range(r.iter().copied()), y);
    c.polyline(&r, &env.mean, COLORS[0], false);
    c.polyline(&r, &env.min, COLORS[0], true);
    c.polyline(&r, &env.max, COLORS[0], true);
    c.legend("mean", COLORS[0], false);
    c.legend("min / max", COLORS[0], true);
    Ok(Artifact {
        name: name.into(),
        csv,
        json: json!({
            "structures": curves.len(),
            "r_max": env.radii.last().copied().unwrap_or(0),
            "s2_0_mean": env.mean.first().copied().unwrap_or(0.0),
            "s2_rmax_mean": env.mean.last().copied().unwrap_or(0.0),
        }),
        svg: c.finish(),
    })
}

/// Weighted and per-orientation S2 of one structure.
pub fn s2_single(name: &str, s2: &WeightedS2) -> Artifact {
    let r: Vec<f64> = s2.weighted.radii.iter().map(|&r| r as f64).collect();
    let mut csv = String::from("r,weighted");
    for k in 0..s2.per_orientation.len() {
        let _ = write!(csv, ",orientation_{k}");
    }
    csv.push('\n');
    for (i, rr) in s2.weighted.radii.iter().enumerate() {
        let _ = write!(csv, "{rr},{}", s2.weighted.values[i]);
        for c in &s2.per_orientation {
            let _ = write!(csv, ",{}", c.values[i]);
        }
        csv.push('\n');
    }
    let all = s2.per_orientation.iter().flat_map(|c| c.values.iter()).chain(&s2.weighted.values);
    let mut c = Canvas::new(
        "two-point correlation",
        "r (voxels)",
        "S2(r)",
        data_range(r.iter().copied()),
        padded(data_range(all.copied()), 0.05),
    );
    c.polyline(&r, &s2.weighted.values, "#000", false);
    c.legend("volume-fraction weighted", "#000", false);
    for (k, curve) in s2.per_orientation.iter().enumerate() {
        if s2.fractions[k] > 0.0 {
            c.polyline(&r, &curve.values, COLORS[k % COLORS.len()], true);
        }
    }
    Artifact {
        name: name.into(),
        csv,
        json: json!({
            "fractions": s2.fractions,
            "weighted_s2_0": s2.weighted.values.first(),
            "r_max": s2.weighted.r_max(),
        }),
        svg: c.finish(),
    }
}

/// Per-channel CDF averaged over structures.
pub fn rgb_cdf(name: &str, cdfs: &[RgbCdf]) -> Result<Artifact> {
    let first = cdfs.first().ok_or_else(|| Error::Domain("no volumes for channel CDFs".into()))?;
    let n = cdfs.len() as f64;
    let mean: Vec<Vec<f64>> = (0..3)
        .map(|ch| {
            (0..first.grid.len())
                .map(|i| cdfs.iter().map(|c| c.channels[ch][i]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    let mut csv = String::from("value,r,g,b\n");
    for (i, g) in first.grid.iter().enumerate() {
        let _ = writeln!(csv, "{g},{},{},{}", mean[0][i], mean[1][i], mean[2][i]);
    }
    let median = |m: &[f64]| first.grid[m.partition_point(|&v| v < 0.5).min(first.grid.len() - 1)];
    let mut c = Canvas::new("channel CDF", "channel value", "fraction of voxels ≤ value", (-1.0, 1.0), (0.0, 1.0));
    for (ch, label) in ["R", "G", "B"].iter().enumerate() {
        c.polyline(&first.grid, &mean[ch], ["#d62728", "#2ca02c", "#1f77b4"][ch], false);
        c.legend(label, ["#d62728", "#2ca02c", "#1f77b4"][ch], false);
    }
    Ok(Artifact {
        name: name.into(),
        csv,
        json: json!({
            "structures": cdfs.len(),
            "median": [median(&mean[0]), median(&mean[1]), median(&mean[2])],
        }),
        svg: c.finish(),
    })
}

/// Realized vs target with the identity line; R² about the identity and
/// about the least-squares fit are both annotated.
pub fn scatter(name: &str, eval: &ConditionalEvaluation) -> Result<Artifact> {
    if eval.targets.is_empty() {
        return Err(Error::Domain("evaluation holds no samples".into()));
    }
    let r2_identity = stats::r_squared(&eval.targets, &eval.realized).ok();
    let mut csv = String::from("target,realized\n");
    for (t, r) in eval.targets.iter().zip(&eval.realized) {
        let _ = writeln!(csv, "{t},{r}");
    }
    let range = padded(data_range(eval.targets.iter().chain(&eval.realized).copied()), 0.05);
    let label = eval.kind.to_string();
    let mut c = Canvas::new("controllability", &format!("target {label}"), &format!("realized {label}"), range, range);
    c.line((range.0, range.0), (range.1, range.1), "#000", true);
    for (t, r) in eval.targets.iter().zip(&eval.realized) {
        c.marker(*t, *r, COLORS[0]);
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    c.note(&format!("R² (identity) = {}", fmt(r2_identity)));
    c.note(&format!("R² (fit) = {}", fmt(eval.r_squared)));
    c.legend("y = x", "#000", true);
    Ok(Artifact {
        name: name.into(),
        csv,
        json: json!({
            "kind": eval.kind,
            "n": eval.targets.len(),
            "r_squared_identity": r2_identity,
            "r_squared_fit": eval.r_squared,
            "slope": eval.slope,
            "intercept": eval.intercept,
            "spearman": eval.spearman,
        }),
        svg: c.finish(),
    })
}

/// Binned mean ± standard error of the realized attribute.
pub fn binned(name: &str, eval: &ConditionalEvaluation) -> Result<Artifact> {
    if eval.binned.is_empty() {
        return Err(Error::Domain("evaluation holds no bins".into()));
    }
    let mut csv = String::from("bin_lo,bin_hi,count,mean,stderr,degenerate\n");
    for b in &eval.binned {
        let _ = writeln!(csv, "{},{},{},{},{},{}", b.lo, b.hi, b.count, b.mean, b.stderr, b.degenerate);
    }
    let centers: Vec<f64> = eval.binned.iter().map(|b| 0.5 * (b.lo + b.hi)).collect();
    let x = padded(data_range(eval.binned.iter().flat_map(|b| [b.lo, b.hi])), 0.05);
    let y = padded(
        data_range(eval.binned.iter().flat_map(|b| [b.mean - b.stderr, b.mean + b.stderr]).chain(centers.iter().copied())),
        0.05,
    );
    let label = eval.kind.to_string();
    let mut c = Canvas::new("binned controllability", &format!("target {label}"), &format!("realized {label}"), x, y);
    let lo = x.0.max(y.0);
    let hi = x.1.min(y.1);
    if hi > lo {
        c.line((lo, lo), (hi, hi), "#000", true);
    }
    let means: Vec<f64> = eval.binned.iter().map(|b| b.mean).collect();
    c.polyline(&centers, &means, COLORS[1], false);
    for (b, &cx) in eval.binned.iter().zip(&centers) {
        c.error_bar(cx, b.mean - b.stderr, b.mean + b.stderr, COLORS[1]);
        c.marker(cx, b.mean, COLORS[1]);
    }
    c.legend("mean ± stderr", COLORS[1], false);
    Ok(Artifact {
        name: name.into(),
        csv,
        json: json!({ "kind": eval.kind, "bins": eval.binned, "spread": eval.spread }),
        svg: c.finish(),
    })
}

/// KDE density and CDF of one descriptor for two datasets.
pub fn kde_overlay(name: &str, label: &str, a: (&str, &[f64]), b: (&str, &[f64])) -> Result<Artifact> {
    let ka = stats::kde_pdf(a.1, None)?;
    let kb = stats::kde_pdf(b.1, None)?;
    let (ca, cb) = (stats::cdf_from_pdf(&ka), stats::cdf_from_pdf(&kb));
    let mut csv = format!("x_{0},pdf_{0},cdf_{0},x_{1},pdf_{1},cdf_{1}\n", a.0, b.0);
    for i in 0..ka.grid.len() {
        let _ = writeln!(csv, "{},{},{},{},{},{}", ka.grid[i], ka.pdf[i], ca[i], kb.grid[i], kb.pdf[i], cb[i]);
    }
    let x = data_range(ka.grid.iter().chain(&kb.grid).copied());
    let top = ka.pdf.iter().chain(&kb.pdf).cloned().fold(0.0, f64::max);
    let mut c = Canvas::new(&format!("{label} density"), label, "density", x, (0.0, (top * 1.1).max(1e-12)));
    c.polyline(&ka.grid, &ka.pdf, COLORS[0], false);
    c.polyline(&kb.grid, &kb.pdf, COLORS[1], false);
    c.legend(a.0, COLORS[0], false);
    c.legend(b.0, COLORS[1], false);
    Ok(Artifact {
        name: name.into(),
        csv,
        json: json!({
            "descriptor": label,
            "bandwidth": { a.0: ka.bandwidth, b.0: kb.bandwidth },
            "n": { a.0: a.1.len(), b.0: b.1.len() },
            "ks": stats::ks_distance(a.1, b.1)?,
            "emd_normalized": stats::emd_normalized(a.1, b.1)?,
        }),
        svg: c.finish(),
    })
}

/// Per-step MSE with a trailing moving average.
pub fn loss_trace(name: &str, trace: &LossTrace, window: usize) -> Artifact {
    let sm = trace.smoothed(window);
    let mut csv = String::from("step,loss,mse,smoothed_mse\n");
    for i in 0..trace.mse.len() {
        let _ = writeln!(csv, "{i},{},{},{}", trace.loss[i], trace.mse[i], sm[i]);
    }
    let steps: Vec<f64> = (0..trace.mse.len()).map(|i| i as f64).collect();
    let y = padded(data_range(trace.mse.iter().copied()), 0.05);
    let mut c = Canvas::new("training loss", "step", "MSE", data_range(steps.iter().copied()), (y.0.min(0.0), y.1));
    c.polyline(&steps, &trace.mse, "#bbbbbb", false);
    c.polyline(&steps, &sm, COLORS[0], false);
    c.legend("per step", "#bbbbbb", false);
    c.legend(&format!("moving average ({window})"), COLORS[0], false);
    let first = trace.mse.first().copied();
    let last = sm.last().copied();
    Artifact {
        name: name.into(),
        csv,
        json: json!({
            "steps": trace.mse.len(),
            "initial_mse": first,
            "final_smoothed_mse": last,
            "smoothing_window": window,
            "relative_drop": first.zip(last).map(|(f, l)| 1.0 - l / f),
            "epoch_means": trace.epoch_means,
        }),
        svg: c.finish(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use polycrys::genmodel::{ConditionKind, SpreadRow};

    #[test]
    fn empty_grain_list_is_no_grains() {
        let e = descriptor_histograms(&DescriptorSamples::default(), &SummaryBins::default()).unwrap_err();
        assert_eq!(e.to_string(), "no grains");
    }

    #[test]
    fn histogram_csv_counts_every_value() {
        let a = histogram("h", "x", &[1.0, 2.0, 2.0, 3.0], &Bins::Uniform(2)).unwrap();
        assert_eq!(a.csv, "bin_lo,bin_hi,count\n1,2,1\n2,3,3\n");
        assert_eq!(a.json["n"], 4);
        assert_eq!(a.json["mean"], 2.0);
    }

    fn eval() -> ConditionalEvaluation {
        let targets = vec![1.0, 1.0, 2.0, 2.0];
        let realized = vec![1.0, 1.2, 2.1, 1.9];
        ConditionalEvaluation {
            kind: ConditionKind::GrainCount,
            binned: stats::binned_mean_stderr(&targets, &realized, 2).unwrap(),
            r_squared: Some(stats::r_squared_fit(&targets, &realized).unwrap()),
            slope: None,
            intercept: None,
            spearman: None,
            spread: vec![SpreadRow {
                target: 1.0,
                n: 2,
                mean: 1.1,
                std: 0.1,
                min: 1.0,
                max: 1.2,
            }],
            targets,
            realized,
        }
    }

    #[test]
    fn scatter_reports_identity_r2() {
        let e = eval();
        let a = scatter("s", &e).unwrap();
        let want = stats::r_squared(&e.targets, &e.realized).unwrap();
        assert_eq!(a.json["r_squared_identity"].as_f64().unwrap(), want);
        assert!(a.svg.contains("R² (identity) ="));
        assert_eq!(a.csv.lines().count(), 5);
    }

    #[test]
    fn binned_has_one_row_per_bin() {
        let a = binned("b", &eval()).unwrap();
        assert_eq!(a.csv.lines().count(), 3);
    }

    #[test]
    fn write_all_emits_three_files_each() {
        let dir = tempfile::tempdir().unwrap();
        let a = histogram("h", "x", &[1.0, 2.0], &Bins::Uniform(2)).unwrap();
        let paths = write_all(dir.path(), std::slice::from_ref(&a)).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(std::fs::read_to_string(&paths[2]).unwrap(), a.svg);
    }
}
