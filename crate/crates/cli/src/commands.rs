//! Subcommand implementations, usable as library calls.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use polycrys::correlate::{rgb_cdf, s2_weighted, RgbCdf};
use polycrys::genmodel::{
    self, encode_latents, latent_scale, load_model, load_vae, save_denoiser, save_vae, summarize_conditional,
    volume_to_tensor, ConditionKind, ConditionSpec, ConditionalEvaluation, Denoiser, DenoiserConfig, LatentDiffusion,
    Vae, VaeConfig,
};
use polycrys::grains::{self, Analysis};
use polycrys::rng::child_seed;
use polycrys::stats::{self, ComparisonReport, DescriptorSamples};
use polycrys::synth::{
    generate_structure, load_manifest, sample_plan, DatasetManifest, DatasetWriter, Generator, StructureRecord,
    SynthParams,
};
use polycrys::volume::{self, Dims, OrientationPalette, VoxelVolume};
use polycrys::{Error, Result, Tensor32};
use rayon::prelude::*;

use crate::config::Settings;
use crate::report::{self, Artifact};
use crate::{mesh, write_json, Command, RunCard};

/// Seed streams: training seeds derive from the master seed, model
/// initialization from the training seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const VAE: u64 = 1;
    pub const DIFFUSION: u64 = 2;
}

pub const EVALUATION_FILE: &str = "evaluation.json";
pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const DENOISER_CHECKPOINT: &str = "denoiser.ckpt";

pub fn dispatch(card: &RunCard, out: &Path) -> Result<Vec<PathBuf>> {
    let s = &card.settings;
    let seed = card.seed;
    match &card.command {
        Command::Synth(a) => {
            let range = a.grains.min..=a.grains.max;
            let m = synth_dataset(a.count, range, &template(s), seed, out)?;
            report_failures(&m);
            Ok(vec![m.path])
        }
        Command::Analyze(a) => {
            let analyzed = analyze_items(&resolve_inputs(&a.input)?, s)?;
            write_analysis(&analyzed, out)
        }
        Command::S2(a) => {
            let items = resolve_inputs(&a.input)?;
            let analyzed = analyze_items(&items, s)?;
            let art = if is_volume_file(&a.input) {
                report::s2_single("s2", &s2_weighted(&analyzed[0].analysis.index_map)?)
            } else {
                report::s2_envelope("s2_envelope", &s2_curves(&analyzed)?)?
            };
            report::write_all(out, &[art])
        }
        Command::Compare(a) => {
            let xa = analyze_items(&resolve_inputs(&a.a)?, s)?;
            let xb = analyze_items(&resolve_inputs(&a.b)?, s)?;
            let (table, arts) = compare_analyzed((&a.label_a, &xa), (&a.label_b, &xb))?;
            write_comparison(&table, &arts, out)
        }
        Command::TrainVae(a) => {
            let manifest = load_manifest(&a.data)?;
            train_vae(&dataset_items(&manifest), s, out)
        }
        Command::TrainDiff(a) => {
            let manifest = load_manifest(&a.data)?;
            let kind = match &a.condition {
                Some(k) => k.parse()?,
                None => s.denoiser.condition.kind,
            };
            let range = a.range.as_deref().map(parse_range).transpose()?;
            train_diffusion(&manifest, &a.vae, kind, range, s, out)
        }
        Command::Sample(a) => {
            let model: LatentDiffusion<f32> = load_model(&a.vae, &a.denoiser)?;
            let range = model.denoiser.config.condition.range;
            let specs = a
                .conditions
                .iter()
                .map(|c| ConditionSpec::parse(c, range))
                .collect::<Result<Vec<_>>>()?;
            let (m, eval) = sample_dataset(&model, &specs, a.count, seed, s, out)?;
            report_failures(&m);
            let mut paths = vec![m.path];
            if let Some(e) = eval {
                let p = out.join(EVALUATION_FILE);
                write_json(&p, &e)?;
                paths.push(p);
            }
            Ok(paths)
        }
        Command::ExportMesh(a) => {
            let items = resolve_inputs(&a.input)?;
            let analyzed = analyze_items(&items, s)?;
            export_analyzed(&analyzed, out, !is_volume_file(&a.input))
        }
        Command::Report(a) => {
            if a.data.is_empty() && a.evaluation.is_none() {
                return Err(Error::Config("report needs --data and/or --evaluation".into()));
            }
            let mut sets = Vec::new();
            for (i, d) in a.data.iter().enumerate() {
                let label = if a.data.len() == 1 { String::new() } else { dataset_label(d, i) };
                sets.push((label, analyze_items(&resolve_inputs(d)?, s)?));
            }
            let eval = match &a.evaluation {
                Some(p) => Some(read_evaluation(p)?),
                None => None,
            };
            let mut plan = Vec::new();
            for (label, analyzed) in &sets {
                plan.push((out.join(label), dataset_report(analyzed, s)?));
            }
            if let Some(e) = &eval {
                plan.push((out.to_path_buf(), evaluation_report(e)?));
            }
            let mut written = Vec::new();
            for (dir, arts) in plan {
                written.extend(report::write_all(&dir, &arts)?);
            }
            Ok(written)
        }
        Command::Pipeline(_) => {
            let spec = card
                .pipeline
                .as_ref()
                .ok_or_else(|| Error::Config("run card holds no pipeline spec".into()))?;
            crate::pipeline::run_pipeline(spec, s, seed, out).map(|r| r.written)
        }
    }
}

fn report_failures(m: &DatasetManifest) {
    for f in &m.failures {
        log::error!("sample {} ({}) not written: {}", f.index, f.path, f.error);
    }
}

fn parse_range(text: &str) -> Result<[f64; 2]> {
    let bad = || Error::Config(format!("range {text:?} is not lo,hi"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok([lo, hi])
}

fn dataset_label(p: &Path, i: usize) -> String {
    let p = if p.is_file() { p.parent().unwrap_or(p) } else { p };
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| format!("data{i}"))
}

/// Synthesis template from settings.
pub fn template(s: &Settings) -> SynthParams {
    SynthParams {
        dims: Dims::cube(s.size),
        regularity: s.regularity,
        palette_id: s.palette.clone(),
        voxel_size_um: s.voxel_size_um,
        analysis: s.segmentation.clone(),
        ..SynthParams::default()
    }
}

fn chunk_len() -> usize {
    rayon::current_num_threads().max(1) * 2
}

/// Same files as `synth::generate_dataset`, with structures generated in parallel.
pub fn synth_dataset(
    count: usize,
    n_range: RangeInclusive<usize>,
    template: &SynthParams,
    master_seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    if n_range.is_empty() || *n_range.start() == 0 {
        return Err(Error::Config(format!("invalid grain range {n_range:?}")));
    }
    let plans: Vec<(usize, u64)> = (0..count).map(|i| sample_plan(master_seed, i, &n_range)).collect();
    let mut writer = DatasetWriter::create(dir)?;
    for (c, chunk) in plans.chunks(chunk_len()).enumerate() {
        let built = chunk
            .par_iter()
            .map(|&(n, seed)| {
                generate_structure(&SynthParams {
                    n_grains: n,
                    rng_seed: seed,
                    ..template.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, st) in built.into_iter().enumerate() {
            writer.push(c * chunk_len() + k, &st.volume, st.record)?;
        }
    }
    writer.finish()
}

/// Realized value of the conditioned attribute in an analyzed structure.
pub fn realized(kind: ConditionKind, record: &StructureRecord) -> Option<f64> {
    match kind {
        ConditionKind::GrainCount => Some(record.grain_count as f64),
        ConditionKind::MeanSphericity => Some(record.mean_sphericity),
        _ => None,
    }
}

/// Generates `per` volumes for every condition into a dataset directory.
///
/// Volume `j` of condition `i` uses seed `child_seed(seed, i · per + j)` and is
/// saved as sample `i · per + j`. The evaluation is present for grain-count
/// and sphericity conditions.
pub fn sample_dataset(
    model: &LatentDiffusion<f32>,
    specs: &[ConditionSpec],
    per: usize,
    seed: u64,
    s: &Settings,
    dir: &Path,
) -> Result<(DatasetManifest, Option<ConditionalEvaluation>)> {
    if specs.is_empty() || per == 0 {
        return Err(Error::Config("sampling needs at least one condition and one volume".into()));
    }
    let kind = specs[0].kind;
    if specs.iter().any(|c| c.kind != kind) {
        return Err(Error::Config("conditions mix kinds".into()));
    }
    let palette = OrientationPalette::by_id(&s.palette)?;
    let jobs: Vec<usize> = (0..specs.len() * per).collect();
    let mut writer = DatasetWriter::create(dir)?;
    let mut groups: Vec<(f64, Vec<f64>)> = specs.iter().map(|c| (c.value, Vec::new())).collect();
    for chunk in jobs.chunks(chunk_len()) {
        let built = chunk
            .par_iter()
            .map(|&k| {
                let spec = specs[k / per];
                let sd = child_seed(seed, k as u64);
                let mut v = model.generate_seeded(&[spec], &[true], &[sd], s.voxel_size_um)?.remove(0);
                v.meta.palette_id = palette.id().to_string();
                let a = grains::analyze(&v, &palette, &s.segmentation)?;
                let mut r = StructureRecord::from_analysis(&a, sd, Generator::Diffusion);
                if kind == ConditionKind::GrainCount {
                    r.target_grains = Some(spec.value.round().max(0.0) as usize);
                }
                Ok((k, v, r))
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, v, r) in built {
            if let Some(x) = realized(kind, &r) {
                groups[k / per].1.push(x);
            }
            writer.push(k, &v, r)?;
        }
    }
    let manifest = writer.finish()?;
    let eval = match kind {
        ConditionKind::GrainCount | ConditionKind::MeanSphericity => Some(summarize_conditional(kind, &groups)?),
        _ => None,
    };
    Ok((manifest, eval))
}

pub fn is_volume_file(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e == "pcv")
}

/// Named volume paths of a dataset manifest.
pub fn dataset_items(m: &DatasetManifest) -> Vec<(String, PathBuf)> {
    m.records
        .iter()
        .map(|r| (r.volume_path.clone(), m.volume_path(r)))
        .collect()
}

/// A single `.pcv` file, or every volume of a dataset; fails listing every
/// missing volume.
pub fn resolve_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let items = if is_volume_file(input) {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(name, input.to_path_buf())]
    } else {
        dataset_items(&load_manifest(input)?)
    };
    if items.is_empty() {
        return Err(Error::Domain(format!("{} lists no volumes", input.display())));
    }
    let paths: Vec<PathBuf> = items.iter().map(|(_, p)| p.clone()).collect();
    crate::require_inputs(&paths)?;
    Ok(items)
}

/// Palette named in the volume header, else the configured one.
pub fn palette_for(v: &VoxelVolume, s: &Settings) -> Result<OrientationPalette> {
    if v.meta.palette_id.is_empty() {
        OrientationPalette::by_id(&s.palette)
    } else {
        OrientationPalette::by_id(&v.meta.palette_id)
    }
}

/// A segmented structure with what the reports need from its volume.
#[derive(Debug, Clone)]
pub struct Analyzed {
    pub name: String,
    pub dims: Dims,
    pub voxel_size_um: f64,
    pub palette: OrientationPalette,
    pub analysis: Analysis,
    pub cdf: RgbCdf,
}

pub fn analyze_volume(name: &str, v: &VoxelVolume, s: &Settings) -> Result<Analyzed> {
    let palette = palette_for(v, s)?;
    let analysis = grains::analyze(v, &palette, &s.segmentation)?;
    Ok(Analyzed {
        name: name.to_string(),
        dims: v.dims(),
        voxel_size_um: v.voxel_size_um(),
        palette,
        analysis,
        cdf: rgb_cdf(v),
    })
}

/// Loads and segments every item, in parallel, keeping input order.
pub fn analyze_items(items: &[(String, PathBuf)], s: &Settings) -> Result<Vec<Analyzed>> {
    items
        .par_iter()
        .map(|(name, path)| analyze_volume(name, &volume::load(path)?, s))
        .collect()
}

pub fn descriptor_samples(analyzed: &[Analyzed]) -> DescriptorSamples {
    let mut d = DescriptorSamples::default();
    for a in analyzed {
        d.extend(&a.analysis.metrics);
    }
    d
}

fn s2_curves(analyzed: &[Analyzed]) -> Result<Vec<polycrys::correlate::S2Curve>> {
    analyzed
        .par_iter()
        .map(|a| Ok(s2_weighted(&a.analysis.index_map)?.weighted))
        .collect()
}

/// `grains.csv`, `structures.csv` and `summary.json`.
pub fn write_analysis(analyzed: &[Analyzed], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut g = String::from(
        "structure,grain_id,volume_vox,volume_um3,surface_area_um2,sphericity,aspect_ratio,centroid_x,centroid_y,centroid_z,palette_index,flagged\n",
    );
    let mut st = String::from(
        "structure,grain_count,unassigned_voxels,mean_grain_size_um,mean_volume_um3,mean_sphericity,mean_aspect_ratio,flagged\n",
    );
    let mut per_structure = Vec::new();
    for a in analyzed {
        let m = &a.analysis.metrics;
        for x in m {
            let _ = writeln!(
                g,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                a.name,
                x.grain_id,
                x.volume_vox,
                x.volume_um3,
                x.surface_area_um2,
                x.sphericity,
                x.aspect_ratio,
                x.centroid[0],
                x.centroid[1],
                x.centroid[2],
                x.palette_index,
                x.flagged
            );
        }
        let d = grains::mean_grain_size(a.dims.volume_um3(a.voxel_size_um), m.len()).ok();
        let means = grains::descriptor_means(m);
        let flagged = m.iter().filter(|x| x.flagged).count();
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            st,
            "{},{},{},{},{},{},{},{}",
            a.name,
            m.len(),
            a.analysis.labels.unassigned_count(),
            opt(d),
            opt(means.map(|x| x.volume_um3)),
            opt(means.map(|x| x.sphericity)),
            opt(means.map(|x| x.aspect_ratio)),
            flagged
        );
        per_structure.push(serde_json::json!({
            "structure": a.name,
            "grain_count": m.len(),
            "mean_grain_size_um": d,
            "means": means,
            "flagged": flagged,
        }));
    }
    let all: Vec<grains::GrainMetrics> = analyzed.iter().flat_map(|a| a.analysis.metrics.iter().cloned()).collect();
    let counts: Vec<f64> = analyzed.iter().map(|a| a.analysis.metrics.len() as f64).collect();
    let summary = serde_json::json!({
        "structures": analyzed.len(),
        "grains": all.len(),
        "mean_grain_count": counts.iter().sum::<f64>() / counts.len().max(1) as f64,
        "descriptor_means": grains::descriptor_means(&all),
        "flagged": all.iter().filter(|x| x.flagged).count(),
        "per_structure": per_structure,
    });
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = [dir.join("grains.csv"), dir.join("structures.csv"), dir.join("summary.json")];
    std::fs::write(&paths[0], g).map_err(|e| Error::io(&paths[0], e))?;
    std::fs::write(&paths[1], st).map_err(|e| Error::io(&paths[1], e))?;
    write_json(&paths[2], &summary)?;
    Ok(paths.to_vec())
}

/// Table-style KS / EMD comparison plus per-descriptor density overlays.
pub fn compare_analyzed(a: (&str, &[Analyzed]), b: (&str, &[Analyzed])) -> Result<(ComparisonReport, Vec<Artifact>)> {
    if a.1.is_empty() || b.1.is_empty() {
        return Err(Error::Domain("both datasets need at least one structure".into()));
    }
    let (sa, sb) = (descriptor_samples(a.1), descriptor_samples(b.1));
    if sa.grain_size_um3.is_empty() || sb.grain_size_um3.is_empty() {
        return Err(Error::NoGrains);
    }
    let table = ComparisonReport {
        rows: stats::compare_samples(&sa, &sb)?,
        normalization: stats::POOLED_NORMALIZATION.into(),
        structures_a: a.1.len(),
        structures_b: b.1.len(),
        missing: Vec::new(),
    };
    let mut arts = Vec::new();
    for ((name, xa), (_, xb)) in sa.columns().into_iter().zip(sb.columns()) {
        match report::kde_overlay(&format!("kde_{name}"), name, (a.0, xa), (b.0, xb)) {
            Ok(art) => arts.push(art),
            Err(e) => log::warn!("no density overlay for {name}: {e}"),
        }
    }
    Ok((table, arts))
}

pub fn write_comparison(table: &ComparisonReport, arts: &[Artifact], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("comparison.csv");
    let json = dir.join("comparison.json");
    stats::write_report(table, &csv, &json)?;
    let mut out = vec![csv, json];
    out.extend(report::write_all(dir, arts)?);
    Ok(out)
}

/// Mesh export of every structure; `nested` puts each in its own directory.
pub fn export_analyzed(analyzed: &[Analyzed], dir: &Path, nested: bool) -> Result<Vec<PathBuf>> {
    let exports = analyzed
        .par_iter()
        .map(|a| mesh::from_analysis(&a.analysis, &a.palette, a.dims, a.voxel_size_um))
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for (a, m) in analyzed.iter().zip(&exports) {
        let sub = if nested {
            dir.join(Path::new(&a.name).file_stem().unwrap_or_default())
        } else {
            dir.to_path_buf()
        };
        written.extend(mesh::write_export(m, a.palette.id(), &sub)?);
    }
    Ok(written)
}

/// Histograms, S2 envelope and channel CDFs of one dataset.
pub fn dataset_report(analyzed: &[Analyzed], s: &Settings) -> Result<Vec<Artifact>> {
    let mut arts = report::descriptor_histograms(&descriptor_samples(analyzed), &s.bins)?;
    arts.push(report::s2_envelope("s2_envelope", &s2_curves(analyzed)?)?);
    let cdfs: Vec<RgbCdf> = analyzed.iter().map(|a| a.cdf.clone()).collect();
    arts.push(report::rgb_cdf("rgb_cdf", &cdfs)?);
    Ok(arts)
}

pub fn evaluation_report(e: &ConditionalEvaluation) -> Result<Vec<Artifact>> {
    Ok(vec![
        report::scatter("controllability_scatter", e)?,
        report::binned("controllability_binned", e)?,
    ])
}

pub fn read_evaluation(p: &Path) -> Result<ConditionalEvaluation> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_tensors(items: &[(String, PathBuf)]) -> Result<(Dims, Vec<Tensor32>)> {
    let vols = items
        .par_iter()
        .map(|(_, p)| volume::load(p))
        .collect::<Result<Vec<_>>>()?;
    let dims = vols
        .first()
        .ok_or_else(|| Error::Domain("training set is empty".into()))?
        .dims();
    if let Some(v) = vols.iter().find(|v| v.dims() != dims) {
        return Err(Error::Shape(format!("mixed volume sizes {:?} and {:?}", dims, v.dims())));
    }
    Ok((dims, vols.iter().map(volume_to_tensor::<f32>).collect()))
}

/// Trains the autoencoder and writes its checkpoint and loss report.
pub fn train_vae(items: &[(String, PathBuf)], s: &Settings, out: &Path) -> Result<Vec<PathBuf>> {
    let (dims, data) = load_tensors(items)?;
    let cfg = s.vae.clone().unwrap_or(VaeConfig {
        input: dims.x,
        ..VaeConfig::default()
    });
    if dims != Dims::cube(cfg.input) {
        return Err(Error::Config(format!(
            "autoencoder expects {0}³ volumes, data is {1:?}",
            cfg.input, dims
        )));
    }
    let mut vae = Vae::<f32>::new(cfg, child_seed(s.vae_training.seed, streams::INIT))?;
    let trace = genmodel::train_vae(&mut vae, &data, &s.vae_training)?;
    let ckpt = out.join(VAE_CHECKPOINT);
    save_vae(&vae, trace.mse.len() as u64, &ckpt)?;
    let mut written = vec![ckpt];
    written.extend(report::write_all(out, &[report::loss_trace("vae_loss", &trace, s.loss_window)])?);
    Ok(written)
}

/// Trains the denoiser on scaled autoencoder latents of a dataset.
pub fn train_diffusion(
    manifest: &DatasetManifest,
    vae_path: &Path,
    kind: ConditionKind,
    range: Option<[f64; 2]>,
    s: &Settings,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let vae: Vae<f32> = load_vae(vae_path)?;
    let (_, data) = load_tensors(&dataset_items(manifest))?;
    let values: Vec<f64> = match kind {
        ConditionKind::None => vec![0.0; manifest.records.len()],
        ConditionKind::GrainCount | ConditionKind::MeanSphericity => {
            let missing = |r: &StructureRecord| Error::Domain(format!("{}: no {kind} value", r.volume_path));
            manifest
                .records
                .iter()
                .map(|r| realized(kind, r).ok_or_else(|| missing(r)))
                .collect::<Result<_>>()?
        }
        ConditionKind::ClassLabel => {
            return Err(Error::Config("class-label training needs labels; manifests carry none".into()));
        }
    };
    let range = match range {
        Some(r) => r,
        None if kind == ConditionKind::None => [0.0, 1.0],
        None => {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                [lo, hi]
            } else {
                [lo - 0.5, hi + 0.5]
            }
        }
    };
    let mut cfg = DenoiserConfig {
        latent_channels: vae.config.latent_channels,
        latent_side: vae.config.latent_side(),
        ..s.denoiser.clone()
    };
    cfg.condition.kind = kind;
    cfg.condition.range = range;
    let specs = values
        .iter()
        .map(|&v| if kind == ConditionKind::None { Ok(ConditionSpec::none()) } else { cfg.condition.spec(v) })
        .collect::<Result<Vec<_>>>()?;
    let latents = encode_latents(&vae, &data, 8)?;
    let scale = latent_scale(&latents);
    let latents: Vec<Tensor32> = latents.iter().map(|z| z.map(|v| v * scale as f32)).collect();
    let mut den = Denoiser::<f32>::new(cfg, child_seed(s.diffusion_training.seed, streams::INIT))?;
    let schedule = s.schedule.build()?;
    let trace = genmodel::train_diffusion(&mut den, &latents, &specs, &schedule, &s.diffusion_training)?;
    let ckpt = out.join(DENOISER_CHECKPOINT);
    save_denoiser(&den, &s.schedule, scale, trace.mse.len() as u64, &ckpt)?;
    let mut written = vec![ckpt];
    written.extend(report::write_all(out, &[report::loss_trace("diffusion_loss", &trace, s.loss_window)])?);
    Ok(written)
}
