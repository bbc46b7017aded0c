//! Command-line front end for the polycrys toolkit.
//!
//! Every invocation resolves its settings (preset, `--config` file, flags),
//! refuses to write into a non-empty output directory, writes
//! `run_card.json` and only then produces artifacts.

pub mod commands;
pub mod config;
pub mod mesh;
pub mod pipeline;
pub mod report;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use polycrys::{Error, Result};
use serde::{Deserialize, Serialize};

pub use config::{Preset, Settings};

pub const RUN_CARD: &str = "run_card.json";

#[derive(Debug, Clone, Parser)]
#[command(name = "polycrys", version, about = "Voxel polycrystal synthesis, analysis and latent diffusion")]
pub struct Cli {
    /// Master seed; every stochastic step derives its stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON settings file merged over the preset it names (default: desk).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory; must not exist or be empty.
    #[arg(long, global = true, value_name = "DIR", default_value = "polycrys-out")]
    pub out: PathBuf,
    /// Worker threads for per-structure work (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a dataset of Voronoi structures.
    Synth(SynthArgs),
    /// Segment volumes and write per-grain and per-structure metrics.
    Analyze(InputArgs),
    /// Two-point correlation of a volume, or the envelope over a dataset.
    S2(InputArgs),
    /// KS / EMD comparison of two datasets' grain descriptors.
    Compare(CompareArgs),
    /// Train the volume autoencoder on a dataset.
    TrainVae(TrainVaeArgs),
    /// Train the conditional latent denoiser.
    TrainDiff(TrainDiffArgs),
    /// Generate volumes from a trained model.
    Sample(SampleArgs),
    /// Export grain-id grids and orientation tables for meshing.
    ExportMesh(InputArgs),
    /// Histograms, correlation envelopes, CDFs and controllability plots.
    Report(ReportArgs),
    /// Run generate → analyze → compare → export → report from a JSON spec.
    Pipeline(PipelineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Analyze(_) => "analyze",
            Command::S2(_) => "s2",
            Command::Compare(_) => "compare",
            Command::TrainVae(_) => "train-vae",
            Command::TrainDiff(_) => "train-diff",
            Command::Sample(_) => "sample",
            Command::ExportMesh(_) => "export-mesh",
            Command::Report(_) => "report",
            Command::Pipeline(_) => "pipeline",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Synth(_) => vec![],
            Command::Analyze(a) | Command::S2(a) | Command::ExportMesh(a) => vec![a.input.clone()],
            Command::Compare(a) => vec![a.a.clone(), a.b.clone()],
            Command::TrainVae(a) => vec![a.data.clone()],
            Command::TrainDiff(a) => vec![a.data.clone(), a.vae.clone()],
            Command::Sample(a) => vec![a.vae.clone(), a.denoiser.clone()],
            Command::Report(a) => a.data.iter().chain(&a.evaluation).cloned().collect(),
            Command::Pipeline(_) => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of structures.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Seed count per structure: `N` or an inclusive range `LO..HI`, drawn uniformly.
    #[arg(long, default_value = "50..300")]
    pub grains: GrainRange,
    /// Cube side in voxels.
    #[arg(long, alias = "size")]
    pub dims: Option<usize>,
    /// Hard-core spacing in [0, 1].
    #[arg(long)]
    pub regularity: Option<f64>,
    /// Palette id, e.g. `default-v1` or `default-v1[..3]`.
    #[arg(long)]
    pub palette: Option<String>,
}

/// Inclusive grain-count range; `"125"` is shorthand for `"125..125"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrainRange {
    pub min: usize,
    pub max: usize,
}

impl std::str::FromStr for GrainRange {
    type Err = String;

    fn from_str(text: &str) -> std::result::Result<Self, String> {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("{text:?} is not N or LO..HI"));
        let (min, max) = match text.split_once("..") {
            Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
            None => (num(text)?, num(text)?),
        };
        if min == 0 || min > max {
            return Err(format!("grain range {text:?} must satisfy 1 <= LO <= HI"));
        }
        Ok(GrainRange { min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// A `.pcv` volume or a dataset directory / manifest.
    pub input: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value = "a")]
    pub label_a: String,
    #[arg(long, default_value = "b")]
    pub label_b: String,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainVaeArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainDiffArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained autoencoder checkpoint.
    #[arg(long)]
    pub vae: PathBuf,
    /// none, grain_count or mean_sphericity (default from settings).
    #[arg(long)]
    pub condition: Option<String>,
    /// Normalization range `lo,hi` (default: training data min and max).
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub denoiser: PathBuf,
    /// `kind=value`, repeatable, e.g. `grain_count=125`.
    #[arg(long = "condition", required = true)]
    pub conditions: Vec<String>,
    /// Volumes per condition.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Dataset directories (repeatable).
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// `evaluation.json` written by `sample` or `pipeline`.
    #[arg(long)]
    pub evaluation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    /// Pipeline spec (JSON).
    pub spec: PathBuf,
}

/// Everything needed to reproduce a run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCard {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub settings: Settings,
    pub command: Command,
    /// Contents of the pipeline spec file, for `pipeline` runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<pipeline::PipelineSpec>,
}

/// Process exit code for an error: 2 configuration, 4 divergence, 3 data.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

/// Fails listing every path in `paths` that does not exist.
pub fn require_inputs(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        return Ok(());
    }
    Err(Error::io(
        missing.join(", "),
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} missing input(s)", missing.len())),
    ))
}

/// Creates `dir`, which must be absent or empty.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!("output directory {} is not empty", dir.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Settings after applying command-line overrides.
pub fn resolve_settings(mut settings: Settings, command: &Command) -> Result<Settings> {
    match command {
        Command::Synth(a) => {
            if let Some(s) = a.dims {
                settings.size = s;
            }
            if let Some(r) = a.regularity {
                settings.regularity = r;
            }
            if let Some(p) = &a.palette {
                settings.palette = p.clone();
            }
        }
        Command::TrainVae(a) => override_training(&mut settings.vae_training, a.steps, a.epochs, a.lr),
        Command::TrainDiff(a) => override_training(&mut settings.diffusion_training, a.steps, a.epochs, a.lr),
        _ => {}
    }
    settings.validate()?;
    Ok(settings)
}

fn override_training(cfg: &mut polycrys::genmodel::TrainConfig, steps: Option<usize>, epochs: Option<usize>, lr: Option<f64>) {
    if let Some(s) = steps {
        cfg.steps = s;
        cfg.epochs = None;
    }
    if epochs.is_some() {
        cfg.epochs = epochs;
    }
    if let Some(lr) = lr {
        cfg.lr = lr;
    }
}

/// Parses nothing: runs an already-parsed command line.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut settings = resolve_settings(Settings::load(cli.config.as_deref())?, &cli.command)?;
    settings.vae_training.seed = polycrys::rng::child_seed(cli.seed, commands::streams::VAE);
    settings.diffusion_training.seed = polycrys::rng::child_seed(cli.seed, commands::streams::DIFFUSION);
    let pipeline = match &cli.command {
        Command::Pipeline(a) => {
            require_inputs(std::slice::from_ref(&a.spec))?;
            Some(pipeline::PipelineSpec::load(&a.spec)?)
        }
        _ => None,
    };
    let card = RunCard {
        tool: "polycrys".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cli.seed,
        threads: cli.threads,
        settings,
        command: cli.command.clone(),
        pipeline,
    };
    execute(&card, &cli.out)
}

/// Re-runs the command recorded in a run card into `out`.
pub fn replay(card_path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(card_path).map_err(|e| Error::io(card_path, e))?;
    let card: RunCard = serde_json::from_str(&text).map_err(|e| Error::Config(format!("run card: {e}")))?;
    execute(&card, out)
}

fn execute(card: &RunCard, out: &Path) -> Result<Vec<PathBuf>> {
    match &card.pipeline {
        Some(spec) => require_inputs(&spec.inputs())?,
        None => require_inputs(&card.command.inputs())?,
    }
    fresh_dir(out)?;
    write_json(&out.join(RUN_CARD), card)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = card.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log::info!("{} → {}", card.command.name(), out.display());
    pool.install(|| commands::dispatch(card, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::NoGrains), 3);
        assert_eq!(exit_code(&Error::Divergence { step: 1, loss: f64::NAN }), 4);
        assert_eq!(exit_code(&polycrys::FormatError::UnsupportedDtype("x".into()).into()), 3);
    }

    #[test]
    fn missing_inputs_are_listed_together() {
        let e = require_inputs(&["/nope/a".into(), "/nope/b".into()]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("/nope/a") && msg.contains("/nope/b"), "{msg}");
        assert_eq!(exit_code(&e), 3);
    }

    #[test]
    fn non_empty_output_is_refused() {
        let d = tempfile::tempdir().unwrap();
        fresh_dir(d.path()).unwrap();
        std::fs::write(d.path().join("x"), "").unwrap();
        assert!(matches!(fresh_dir(d.path()), Err(Error::Config(_))));
    }

    #[test]
    fn cli_parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["polycrys", "synth", "--count", "3", "--seed", "7", "--out", "o"]).unwrap();
        assert_eq!(cli.seed, 7);
        assert_eq!(cli.out, PathBuf::from("o"));
        assert!(matches!(cli.command, Command::Synth(SynthArgs { count: 3, .. })));
    }

    #[test]
    fn grain_ranges_parse() {
        assert_eq!("50..300".parse(), Ok(GrainRange { min: 50, max: 300 }));
        assert_eq!("7..=9".parse(), Ok(GrainRange { min: 7, max: 9 }));
        assert_eq!("125".parse(), Ok(GrainRange { min: 125, max: 125 }));
        for bad in ["0..5", "9..3", "x", "3..", ""] {
            assert!(bad.parse::<GrainRange>().is_err(), "{bad}");
        }
        let cli = Cli::try_parse_from(["polycrys", "synth"]).unwrap();
        assert!(matches!(cli.command, Command::Synth(SynthArgs { grains: GrainRange { min: 50, max: 300 }, .. })));
    }

    #[test]
    fn synth_overrides_reach_settings() {
        let cli = Cli::try_parse_from(["polycrys", "synth", "--dims", "16", "--palette", "default-v1[..3]"]).unwrap();
        let s = resolve_settings(Settings::preset(Preset::Desk), &cli.command).unwrap();
        assert_eq!(s.size, 16);
        assert_eq!(s.palette, "default-v1[..3]");
    }
}
