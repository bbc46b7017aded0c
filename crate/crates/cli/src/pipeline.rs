//! generate → analyze → compare → export → report as one run.
//!
//! Layout under the output directory:
//!
//! ```text
//! groups/<name>/            dataset (manifest.jsonl + volumes)
//! analysis/<name>/          grains.csv, structures.csv, summary.json
//! comparison/<a>_vs_<b>/    comparison.csv / .json, density overlays
//! mesh/<name>/<sample>/     grain-id grid, orientation table, metadata
//! report/<name>/            histograms, S2 envelope, channel CDFs
//! report/                   controllability scatter and binned means
//! evaluation.json           realized vs target grain counts
//! stages.json               completed stages (and the failed one, if any)
//! ```

use std::path::{Path, PathBuf};

use polycrys::genmodel::{load_model, summarize_conditional, ConditionKind, ConditionalEvaluation, LatentDiffusion};
use polycrys::grains::grain_count_for_size;
use polycrys::rng::child_seed;
use polycrys::volume::Dims;
use polycrys::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{self, Analyzed, EVALUATION_FILE};
use crate::config::Settings;
use crate::{report, write_json};

pub const STAGES_FILE: &str = "stages.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grain_count: Option<usize>,
    /// Converted to a grain count through the equivalent-sphere diameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_grain_size_um: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum GeneratorSpec {
    #[default]
    Voronoi,
    Diffusion { vae: PathBuf, denoiser: PathBuf },
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub groups: Vec<GroupSpec>,
    /// Structures per group.
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default = "yes")]
    pub export_mesh: bool,
    #[serde(default = "yes")]
    pub report: bool,
}

impl PipelineSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: PipelineSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.samples == 0 {
            return Err(Error::Config("pipeline needs at least one group and one sample".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let ok = !g.name.is_empty() && g.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok || g.name.starts_with('.') {
                return Err(Error::Config(format!("group name {:?} is not a plain file name", g.name)));
            }
            if self.groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::Config(format!("duplicate group name {:?}", g.name)));
            }
            if g.grain_count.is_some() == g.mean_grain_size_um.is_some() {
                return Err(Error::Config(format!(
                    "group {:?} needs exactly one of grain_count and mean_grain_size_um",
                    g.name
                )));
            }
        }
        Ok(())
    }

    /// Files the run reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match &self.generator {
            GeneratorSpec::Voronoi => vec![],
            GeneratorSpec::Diffusion { vae, denoiser } => vec![vae.clone(), denoiser.clone()],
        }
    }

    /// Target grain count of every group.
    pub fn targets(&self, s: &Settings) -> Result<Vec<usize>> {
        let volume = Dims::cube(s.size).volume_um3(s.voxel_size_um);
        self.groups
            .iter()
            .map(|g| match (g.grain_count, g.mean_grain_size_um) {
                (Some(0), _) => Err(Error::Config(format!("group {:?} asks for zero grains", g.name))),
                (Some(n), _) => Ok(n),
                (None, Some(d)) => grain_count_for_size(volume, d).map_err(|e| Error::Config(e.to_string())),
                (None, None) => Err(Error::Config(format!("group {:?} has no target", g.name))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub completed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub targets: Vec<usize>,
    pub evaluation: ConditionalEvaluation,
    pub written: Vec<PathBuf>,
    pub stages: StageLog,
}

struct Stages<'a> {
    path: PathBuf,
    log: StageLog,
    out: &'a Path,
}

impl Stages<'_> {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        match f() {
            Ok(v) => {
                self.log.completed.push(name.to_string());
                write_json(&self.path, &self.log)?;
                Ok(v)
            }
            Err(e) => {
                log::error!(
                    "stage {name} failed in {}; completed: [{}]",
                    self.out.display(),
                    self.log.completed.join(", ")
                );
                self.log.failed = Some(name.to_string());
                self.log.error = Some(e.to_string());
                write_json(&self.path, &self.log)?;
                Err(e)
            }
        }
    }
}

pub fn run_pipeline(spec: &PipelineSpec, s: &Settings, seed: u64, out: &Path) -> Result<PipelineRun> {
    spec.validate()?;
    let targets = spec.targets(s)?;
    let mut stages = Stages {
        path: out.join(STAGES_FILE),
        log: StageLog::default(),
        out,
    };
    write_json(&stages.path, &stages.log)?;
    let mut written = Vec::new();
    let group_dir = |root: &str, g: usize| out.join(root).join(&spec.groups[g].name);

    let model: Option<LatentDiffusion<f32>> = match &spec.generator {
        GeneratorSpec::Voronoi => None,
        GeneratorSpec::Diffusion { vae, denoiser } => Some(stages.run("load-model", || load_model(vae, denoiser))?),
    };

    let manifests = stages.run("generate", || {
        let mut ms = Vec::new();
        for (g, &n) in targets.iter().enumerate() {
            let gseed = child_seed(seed, g as u64);
            let dir = group_dir("groups", g);
            let m = match &model {
                None => commands::synth_dataset(spec.samples, n..=n, &commands::template(s), gseed, &dir)?,
                Some(model) => {
                    let c = model.denoiser.config.condition.spec(n as f64)?;
                    commands::sample_dataset(model, &[c], spec.samples, gseed, s, &dir)?.0
                }
            };
            if !m.failures.is_empty() {
                return Err(Error::Domain(format!(
                    "group {}: {} volume(s) could not be written",
                    spec.groups[g].name,
                    m.failures.len()
                )));
            }
            ms.push(m);
        }
        Ok(ms)
    })?;
    written.extend(manifests.iter().map(|m| m.path.clone()));

    let analyzed: Vec<Vec<Analyzed>> = stages.run("analyze", || {
        let mut all = Vec::new();
        for (g, m) in manifests.iter().enumerate() {
            let a = commands::analyze_items(&commands::dataset_items(m), s)?;
            written.extend(commands::write_analysis(&a, &group_dir("analysis", g))?);
            all.push(a);
        }
        Ok(all)
    })?;
    let groups: Vec<(f64, Vec<f64>)> = targets
        .iter()
        .zip(&analyzed)
        .map(|(&n, a)| (n as f64, a.iter().map(|x| x.analysis.metrics.len() as f64).collect()))
        .collect();
    let evaluation = summarize_conditional(ConditionKind::GrainCount, &groups)?;
    write_json(&out.join(EVALUATION_FILE), &evaluation)?;
    written.push(out.join(EVALUATION_FILE));

    if analyzed.len() > 1 {
        stages.run("compare", || {
            let first = &spec.groups[0].name;
            for g in 1..analyzed.len() {
                let name = &spec.groups[g].name;
                let (table, arts) = commands::compare_analyzed((first, &analyzed[0]), (name, &analyzed[g]))?;
                let dir = out.join("comparison").join(format!("{first}_vs_{name}"));
                written.extend(commands::write_comparison(&table, &arts, &dir)?);
            }
            Ok(())
        })?;
    }

    if spec.export_mesh {
        stages.run("export", || {
            for (g, a) in analyzed.iter().enumerate() {
                written.extend(commands::export_analyzed(a, &group_dir("mesh", g), true)?);
            }
            Ok(())
        })?;
    }

    if spec.report {
        stages.run("report", || {
            let mut plan = Vec::new();
            for (g, a) in analyzed.iter().enumerate() {
                plan.push((group_dir("report", g), commands::dataset_report(a, s)?));
            }
            if evaluation.binned.len() > 1 {
                plan.push((out.join("report"), commands::evaluation_report(&evaluation)?));
            }
            for (dir, arts) in plan {
                written.extend(report::write_all(&dir, &arts)?);
            }
            Ok(())
        })?;
    }

    Ok(PipelineRun {
        targets,
        evaluation,
        written,
        stages: stages.log,
    })
}
