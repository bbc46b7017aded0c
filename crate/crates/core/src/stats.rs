//! Distribution distances, regression and density estimates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grains::{self, GrainMetrics, SegmentationConfig};
use crate::synth::DatasetManifest;
use crate::volume::{self, OrientationPalette};

/// A labeled list of finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{label}: non-finite value {v}")));
        }
        Ok(SampleSet { label, values })
    }
}

fn sorted(values: &[f64], what: &str) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Domain(format!("{what}: empty sample")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what}: non-finite sample")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Walks the pooled support in increasing order, calling `f(x, next_x, Fa(x), Fb(x))`
/// at each distinct pooled value with right-continuous empirical CDFs.
fn walk_cdfs(a: &[f64], b: &[f64], mut f: impl FnMut(f64, Option<f64>, f64, f64)) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => Some(u.min(v)),
            (Some(&u), None) => Some(u),
            (None, Some(&v)) => Some(v),
            (None, None) => None,
        };
        f(x, next, i as f64 / na, j as f64 / nb);
    }
}

/// sup |F_a − F_b| over the pooled sample points.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a, "ks a")?, sorted(b, "ks b")?);
    let mut d: f64 = 0.0;
    walk_cdfs(&a, &b, |_, _, fa, fb| d = d.max((fa - fb).abs()));
    Ok(d)
}

/// 1-Wasserstein distance ∫ |F_a − F_b| dx, exact for any sample sizes.
pub fn emd(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a, "emd a")?, sorted(b, "emd b")?);
    let mut total = 0.0;
    walk_cdfs(&a, &b, |x, next, fa, fb| {
        if let Some(nx) = next {
            total += (fa - fb).abs() * (nx - x);
        }
    });
    Ok(total)
}

/// Pooled value range `max − min` over both sets.
pub fn pooled_range(a: &[f64], b: &[f64]) -> f64 {
    let it = || a.iter().chain(b);
    let lo = it().cloned().fold(f64::INFINITY, f64::min);
    let hi = it().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// EMD divided by the pooled range; 0 when every pooled value is equal.
pub fn emd_normalized(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = emd(a, b)?;
    let range = pooled_range(a, b);
    Ok(if range > 0.0 { (d / range).min(1.0) } else { 0.0 })
}

/// Coefficient of determination of `actuals` against the line y = x.
pub fn r_squared(targets: &[f64], actuals: &[f64]) -> Result<f64> {
    if targets.len() != actuals.len() || targets.len() < 2 {
        return Err(Error::Domain(format!(
            "r_squared needs two equal-length series of at least 2, got {} and {}",
            targets.len(),
            actuals.len()
        )));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("targets have zero variance".into()));
    }
    let ss_res: f64 = targets.iter().zip(actuals).map(|(t, a)| (a - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("linear fit needs two equal-length series of at least 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("x has zero variance".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Coefficient of determination of the least-squares line of `y` on `x`.
pub fn r_squared_fit(x: &[f64], y: &[f64]) -> Result<f64> {
    let (slope, icept) = linear_fit(x, y)?;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("y has zero variance".into()));
    }
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - icept).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let m = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let vx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub const KDE_POINTS: usize = 512;
/// Grid half-margin beyond the data, in bandwidths.
pub const KDE_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub pdf: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Silverman's rule: 0.9 · min(σ, IQR/1.34) · n^(-1/5); σ alone if the IQR is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let s = sorted(samples, "kde")?;
    if s.len() < 2 {
        return Err(Error::Domain("automatic bandwidth needs at least 2 samples".into()));
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = (quantile(&s, 0.75) - quantile(&s, 0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        Ok(h)
    } else {
        Err(Error::Domain("samples have zero spread; give a bandwidth".into()))
    }
}

/// Gaussian kernel density on 512 points over [min − 4h, max + 4h].
pub fn kde_pdf(samples: &[f64], bandwidth: Option<f64>) -> Result<Kde> {
    let s = sorted(samples, "kde")?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Domain(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(&s)?,
    };
    let lo = s[0] - KDE_MARGIN * h;
    let hi = s[s.len() - 1] + KDE_MARGIN * h;
    let grid: Vec<f64> = (0..KDE_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (KDE_POINTS - 1) as f64)
        .collect();
    let norm = 1.0 / (s.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let pdf = grid
        .iter()
        .map(|&g| norm * s.iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(Kde { bandwidth: h, grid, pdf })
}

/// Cumulative trapezoid integral of the density, starting at 0.
pub fn cdf_from_pdf(kde: &Kde) -> Vec<f64> {
    let mut out = Vec::with_capacity(kde.pdf.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..kde.pdf.len() {
        acc += 0.5 * (kde.pdf[i] + kde.pdf[i - 1]) * (kde.grid[i] - kde.grid[i - 1]);
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation over √n; 0 for a single point.
    pub stderr: f64,
    /// Set when the standard error is undefined (one point).
    pub degenerate: bool,
}

/// Equal-width bins over the x range; empty bins are omitted.
pub fn binned_mean_stderr(x: &[f64], y: &[f64], n_bins: usize) -> Result<Vec<BinStat>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("x has {} points, y {}", x.len(), y.len())));
    }
    if n_bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (&xi, &yi) in x.iter().zip(y) {
        let k = if width > 0.0 {
            (((xi - lo) / width).floor() as usize).min(n_bins - 1)
        } else {
            0
        };
        members[k].push(yi);
    }
    Ok(members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(k, m)| {
            let n = m.len() as f64;
            let mean = m.iter().sum::<f64>() / n;
            let (stderr, degenerate) = if m.len() > 1 {
                let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var.sqrt() / n.sqrt(), false)
            } else {
                (0.0, true)
            };
            BinStat {
                lo: lo + width * k as f64,
                hi: if k + 1 == n_bins { hi } else { lo + width * (k + 1) as f64 },
                count: m.len(),
                mean,
                stderr,
                degenerate,
            }
        })
        .collect())
}

/// Per-grain descriptor samples pooled over a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSamples {
    pub grain_size_um3: Vec<f64>,
    pub aspect_ratio: Vec<f64>,
    pub sphericity: Vec<f64>,
}

impl DescriptorSamples {
    pub fn extend(&mut self, metrics: &[GrainMetrics]) {
        for m in metrics {
            self.grain_size_um3.push(m.volume_um3);
            self.aspect_ratio.push(m.aspect_ratio);
            self.sphericity.push(m.sphericity);
        }
    }

    pub fn columns(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("grain_size", &self.grain_size_um3),
            ("aspect_ratio", &self.aspect_ratio),
            ("sphericity", &self.sphericity),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorComparison {
    pub descriptor: String,
    pub ks: f64,
    pub emd: f64,
    pub emd_normalized: f64,
    pub normalization_range: f64,
    pub n_a: usize,
    pub n_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<DescriptorComparison>,
    /// How the EMD was normalized.
    pub normalization: String,
    pub structures_a: usize,
    pub structures_b: usize,
    /// Volume files that could not be read.
    pub missing: Vec<String>,
}

impl ComparisonReport {
    /// Metric × descriptor table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for r in &self.rows {
            s.push(',');
            s.push_str(&r.descriptor);
        }
        s.push('\n');
        for (name, get) in [
            ("KS", (|r: &DescriptorComparison| r.ks) as fn(&DescriptorComparison) -> f64),
            ("EMD", |r| r.emd_normalized),
        ] {
            s.push_str(name);
            for r in &self.rows {
                s.push_str(&format!(",{:.6}", get(r)));
            }
            s.push('\n');
        }
        s
    }
}

pub const POOLED_NORMALIZATION: &str = "pooled min-max range of both datasets";

/// KS and normalized EMD for each descriptor.
pub fn compare_samples(a: &DescriptorSamples, b: &DescriptorSamples) -> Result<Vec<DescriptorComparison>> {
    a.columns()
        .into_iter()
        .zip(b.columns())
        .map(|((name, xa), (_, xb))| {
            Ok(DescriptorComparison {
                descriptor: name.to_string(),
                ks: ks_distance(xa, xb)?,
                emd: emd(xa, xb)?,
                emd_normalized: emd_normalized(xa, xb)?,
                normalization_range: pooled_range(xa, xb),
                n_a: xa.len(),
                n_b: xb.len(),
            })
        })
        .collect()
}

/// Re-analyzes every readable volume of a manifest.
pub fn collect_descriptors(
    manifest: &DatasetManifest,
    palette: &OrientationPalette,
    config: &SegmentationConfig,
) -> (DescriptorSamples, usize, Vec<String>) {
    let mut samples = DescriptorSamples::default();
    let mut used = 0;
    let mut missing = Vec::new();
    for r in &manifest.records {
        let path = manifest.volume_path(r);
        match volume::load(&path).and_then(|v| grains::analyze(&v, palette, config)) {
            Ok(a) => {
                samples.extend(&a.metrics);
                used += 1;
            }
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                missing.push(path.display().to_string());
            }
        }
    }
    (samples, used, missing)
}

/// Table-style comparison of two datasets over every grain of every structure.
pub fn compare_datasets(
    a: &DatasetManifest,
    b: &DatasetManifest,
    palette: &OrientationPalette,
    config: &SegmentationConfig,
) -> Result<ComparisonReport> {
    if a.records.is_empty() || b.records.is_empty() {
        return Err(Error::Domain("both datasets need at least one structure".into()));
    }
    let (sa, na, mut missing) = collect_descriptors(a, palette, config);
    let (sb, nb, mb) = collect_descriptors(b, palette, config);
    missing.extend(mb);
    Ok(ComparisonReport {
        rows: compare_samples(&sa, &sb)?,
        normalization: POOLED_NORMALIZATION.into(),
        structures_a: na,
        structures_b: nb,
        missing,
    })
}

/// Writes `report.csv` and `report.json` next to each other.
pub fn write_report(report: &ComparisonReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    std::fs::write(csv_path, report.to_csv()).map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    /// CDF by counting at each pooled point.
    fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
        let f = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&x| (f(a, x) - f(b, x)).abs()).fold(0.0, f64::max)
    }

    fn emd_sorted_matching(a: &[f64], b: &[f64]) -> f64 {
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    /// ∫_0^1 |Q_a(u) − Q_b(u)| du with piecewise-constant quantile functions.
    fn emd_quantile(a: &[f64], b: &[f64]) -> f64 {
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut cuts: Vec<f64> = (0..=a.len()).map(|i| i as f64 / a.len() as f64).collect();
        cuts.extend((0..=b.len()).map(|j| j as f64 / b.len() as f64));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let q = |s: &[f64], u: f64| s[((u * s.len() as f64).floor() as usize).min(s.len() - 1)];
        cuts.windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                (q(&a, mid) - q(&b, mid)).abs() * (w[1] - w[0])
            })
            .sum()
    }

    fn random_set(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        // Rounded values force ties.
        (0..n).map(|_| (rng.random::<f64>() * 20.0).round() / 4.0).collect()
    }

    #[test]
    fn worked_triple() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 3.0, 4.0];
        assert!((ks_distance(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((emd(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!((emd_normalized(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn point_masses() {
        assert_eq!(ks_distance(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(emd(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(emd_normalized(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(emd_normalized(&[2.0, 2.0], &[2.0]).unwrap(), 0.0);
        assert!(ks_distance(&[], &[1.0]).is_err());
        assert!(emd(&[1.0], &[]).is_err());
    }

    #[test]
    fn oracles_agree_on_random_pairs() {
        let mut rng = rng_from_seed(17);
        for _ in 0..100 {
            let na = rng.random_range(1..=64);
            let nb = rng.random_range(1..=64);
            let a = random_set(&mut rng, na);
            let b = random_set(&mut rng, nb);
            assert!((ks_distance(&a, &b).unwrap() - ks_brute(&a, &b)).abs() < 1e-12);
            assert!((emd(&a, &b).unwrap() - emd_quantile(&a, &b)).abs() < 1e-12);
            let c = random_set(&mut rng, na);
            assert!((emd(&a, &c).unwrap() - emd_sorted_matching(&a, &c)).abs() < 1e-12);
        }
    }

    #[test]
    fn r_squared_cases() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!((r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap()).abs() < 1e-15);
        assert!((r_squared(&[1.0, 2.0, 3.0], &[1.1, 2.0, 2.9]).unwrap() - 0.99).abs() < 1e-12);
        assert!(r_squared(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn fitted_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let (s, c) = linear_fit(&x, &y).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
        assert!((r_squared_fit(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_ranks() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn kde_single_gaussian() {
        let k = kde_pdf(&[2.0], Some(0.5)).unwrap();
        for (g, p) in k.grid.iter().zip(&k.pdf) {
            let want = (-0.5 * ((g - 2.0) / 0.5f64).powi(2)).exp() / (0.5 * (2.0 * std::f64::consts::PI).sqrt());
            assert!((p - want).abs() < 1e-12);
        }
        assert!(kde_pdf(&[2.0], Some(0.0)).is_err());
        assert!(kde_pdf(&[2.0], None).is_err());
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = rng_from_seed(6);
        for n in [2, 5, 50, 300] {
            let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) * 10.0).collect();
            let k = kde_pdf(&s, None).unwrap();
            let total = *cdf_from_pdf(&k).last().unwrap();
            assert!((0.999..=1.001).contains(&total), "n={n}: {total}");
        }
    }

    #[test]
    fn kde_symmetric() {
        let k = kde_pdf(&[-1.0, 1.0], None).unwrap();
        let n = k.pdf.len();
        for i in 0..n {
            assert!((k.pdf[i] - k.pdf[n - 1 - i]).abs() < 1e-12);
            assert!((k.grid[i] + k.grid[n - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn binned_single_bin() {
        let x = [1.0, 1.0, 1.0];
        let y = [1.0, 2.0, 6.0];
        let b = binned_mean_stderr(&x, &y, 4).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].mean, 3.0);
        let sd = (((1.0f64 - 3.0).powi(2) + 1.0 + 9.0) / 2.0).sqrt();
        assert!((b[0].stderr - sd / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn binned_singletons_are_flagged() {
        let b = binned_mean_stderr(&[0.0, 1.0], &[5.0, 7.0], 2).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|s| s.degenerate && s.stderr == 0.0));
    }

    #[test]
    fn binned_matches_recomputation() {
        let mut rng = rng_from_seed(8);
        let x: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + rng.random::<f64>()).collect();
        let bins = binned_mean_stderr(&x, &y, 7).unwrap();
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w = (hi - lo) / 7.0;
        for b in &bins {
            let k = ((b.lo - lo) / w).round() as usize;
            let ys: Vec<f64> = x
                .iter()
                .zip(&y)
                .filter(|(xi, _)| {
                    let j = (((**xi - lo) / w).floor() as usize).min(6);
                    j == k
                })
                .map(|(_, yi)| *yi)
                .collect();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            assert_eq!(ys.len(), b.count);
            assert!((m - b.mean).abs() < 1e-12);
        }
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 200);
    }

    #[test]
    fn csv_layout() {
        let a = DescriptorSamples {
            grain_size_um3: vec![100.0],
            aspect_ratio: vec![1.0],
            sphericity: vec![0.8],
        };
        let b = DescriptorSamples {
            grain_size_um3: vec![200.0],
            ..a.clone()
        };
        let report = ComparisonReport {
            rows: compare_samples(&a, &b).unwrap(),
            normalization: POOLED_NORMALIZATION.into(),
            structures_a: 1,
            structures_b: 1,
            missing: vec![],
        };
        assert_eq!(report.rows[0].ks, 1.0);
        assert_eq!(report.rows[1].ks, 0.0);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,grain_size,aspect_ratio,sphericity");
        assert!(lines[1].starts_with("KS,1.000000,0.000000"));
        assert!(lines[2].starts_with("EMD,1.000000"));
    }

    fn arb_set() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((-50i32..50).prop_map(|v| v as f64 * 0.5), 1..24)
    }

    proptest! {
        #[test]
        fn symmetric(a in arb_set(), b in arb_set()) {
            prop_assert_eq!(ks_distance(&a, &b).unwrap(), ks_distance(&b, &a).unwrap());
            prop_assert!((emd(&a, &b).unwrap() - emd(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn zero_iff_equal(a in arb_set(), perm_seed in 0u64..100) {
            let mut b = a.clone();
            use rand::seq::SliceRandom;
            b.shuffle(&mut rng_from_seed(perm_seed));
            prop_assert_eq!(ks_distance(&a, &b).unwrap(), 0.0);
            prop_assert_eq!(emd(&a, &b).unwrap(), 0.0);
            let mut c = a.clone();
            c[0] += 0.25;
            prop_assert!(ks_distance(&a, &c).unwrap() > 0.0);
            prop_assert!(emd(&a, &c).unwrap() > 0.0);
        }

        #[test]
        fn triangle_inequality(n in 1usize..16, seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let a = random_set(&mut rng, n);
            let b = random_set(&mut rng, n);
            let c = random_set(&mut rng, n);
            let ab = emd(&a, &b).unwrap();
            let bc = emd(&b, &c).unwrap();
            let ac = emd(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn normalized_affine_invariance(a in arb_set(), b in arb_set(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let map = |s: &[f64]| s.iter().map(|v| v * scale + shift).collect::<Vec<_>>();
            let d0 = emd_normalized(&a, &b).unwrap();
            let d1 = emd_normalized(&map(&a), &map(&b)).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn ks_monotone_invariance(a in arb_set(), b in arb_set()) {
            let map = |s: &[f64]| s.iter().map(|v| v.powi(3) + (v / 7.0).exp()).collect::<Vec<_>>();
            prop_assert_eq!(ks_distance(&a, &b).unwrap(), ks_distance(&map(&a), &map(&b)).unwrap());
        }

        #[test]
        fn r_squared_identity(t in prop::collection::vec(-100.0f64..100.0, 2..20)) {
            prop_assume!(t.iter().any(|v| *v != t[0]));
            prop_assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        }
    }
}
