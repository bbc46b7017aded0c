use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::Parser;
use polycrys::grains::{analyze, SegmentationConfig};
use polycrys::synth::{generate_dataset, generate_structure, SynthParams};
use polycrys::volume::{Dims, OrientationPalette};
use polycrys::Error;
use polycrys_cli::{commands, mesh, replay, run, Cli, Preset, Settings, RUN_CARD};

const SMALL: &str = r#"{ "size": 16, "palette": "default-v1[..3]",
  "segmentation": { "size_threshold_vox": 20, "watershed_marker_min_distance": 3.0 } }"#;

fn polycrys(args: &[&str], out: &Path) -> polycrys::Result<Vec<PathBuf>> {
    let mut argv = vec!["polycrys"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--out", out.to_str().unwrap()]);
    run(&Cli::try_parse_from(argv).unwrap())
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn without_card(mut t: BTreeMap<PathBuf, Vec<u8>>) -> BTreeMap<PathBuf, Vec<u8>> {
    t.remove(Path::new(RUN_CARD));
    t
}

fn synth(dir: &Path, name: &str, seed: &str, grains: &str) -> PathBuf {
    let out = dir.join(name);
    let cfg = small_config(dir);
    polycrys(
        &["synth", "--count", "4", "--grains", grains, "--seed", seed, "--config", cfg.to_str().unwrap()],
        &out,
    )
    .unwrap();
    out
}

#[test]
fn synth_writes_the_same_files_as_the_library() {
    let d = tempfile::tempdir().unwrap();
    let out = synth(d.path(), "cli", "3", "5..12");
    let s = Settings::from_json(&serde_json::from_str(SMALL).unwrap()).unwrap();
    let lib = d.path().join("lib");
    generate_dataset(4, 5..=12, &commands::template(&s), 3, &lib).unwrap();
    assert_eq!(without_card(tree(&out)), tree(&lib));
}

#[test]
fn run_card_is_written_and_replays_to_identical_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), "data", "1", "6..10");
    let first = d.path().join("r1");
    let cfg = small_config(d.path());
    polycrys(&["report", "--data", data.to_str().unwrap(), "--seed", "9", "--config", cfg.to_str().unwrap()], &first).unwrap();
    let card: serde_json::Value = serde_json::from_slice(&std::fs::read(first.join(RUN_CARD)).unwrap()).unwrap();
    assert_eq!(card["seed"], 9);
    assert_eq!(card["command"]["report"]["data"][0], data.to_str().unwrap());
    assert_eq!(card["settings"]["size"], 16);

    let second = d.path().join("r2");
    replay(&first.join(RUN_CARD), &second).unwrap();
    let (a, b) = (tree(&first), tree(&second));
    assert!(a.keys().any(|k| k.extension().is_some_and(|e| e == "svg")));
    assert_eq!(a, b);
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let run_with = |threads: &str, name: &str| {
        let out = d.path().join(name);
        polycrys(
            &["synth", "--count", "7", "--grains", "4..20", "--config", cfg.to_str().unwrap(), "--threads", threads],
            &out,
        )
        .unwrap();
        without_card(tree(&out))
    };
    assert_eq!(run_with("1", "t1"), run_with("3", "t3"));
}

#[test]
fn report_with_no_grains_writes_no_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), "data", "2", "6..10");
    let cfg = d.path().join("strict.json");
    std::fs::write(&cfg, r#"{ "size": 16, "palette": "default-v1[..3]", "segmentation": { "size_threshold_vox": 100000 } }"#).unwrap();
    let out = d.path().join("report");
    let e = polycrys(&["report", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()], &out).unwrap_err();
    assert!(matches!(e, Error::NoGrains), "{e}");
    assert!(e.to_string().contains("no grains"));
    let left: Vec<_> = tree(&out).into_keys().collect();
    assert_eq!(left, vec![PathBuf::from(RUN_CARD)]);
}

#[test]
fn two_dataset_comparison_is_two_metrics_by_three_descriptors() {
    let d = tempfile::tempdir().unwrap();
    let a = synth(d.path(), "a", "4", "6..8");
    let b = synth(d.path(), "b", "5", "14..18");
    let out = d.path().join("cmp");
    polycrys(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--label-a", "coarse", "--label-b", "fine"], &out).unwrap();
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(header, ["metric", "grain_size", "aspect_ratio", "sphericity"]);
    assert_eq!(rows.len(), 2, "{csv}");
    for r in &rows {
        assert_eq!(r.len(), header.len());
        for v in &r[1..] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x), "{csv}");
        }
    }
    let metrics: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(metrics, ["KS", "EMD"]);
    for f in ["kde_grain_size.svg", "kde_aspect_ratio.csv", "kde_sphericity.json", "comparison.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn single_structure_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let spec = d.path().join("spec.json");
    std::fs::write(&spec, r#"{ "groups": [{ "name": "one", "grain_count": 8 }] }"#).unwrap();
    let out = d.path().join("p");
    polycrys(&["pipeline", spec.to_str().unwrap(), "--config", cfg.to_str().unwrap()], &out).unwrap();

    let files: Vec<PathBuf> = tree(&out).into_keys().collect();
    let volumes = files.iter().filter(|p| commands::is_volume_file(&out.join(p))).count();
    assert_eq!(volumes, 1, "{files:?}");
    let metrics: Vec<_> = files.iter().filter(|p| p.ends_with("grains.csv")).collect();
    assert_eq!(metrics, vec![&PathBuf::from("analysis/one/grains.csv")]);
    let stages: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("stages.json")).unwrap()).unwrap();
    assert_eq!(stages["completed"], serde_json::json!(["generate", "analyze", "export", "report"]));
    let card: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(RUN_CARD)).unwrap()).unwrap();
    assert_eq!(card["pipeline"]["groups"][0]["grain_count"], 8);
}

#[test]
fn pipeline_rerun_gives_identical_tree() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let spec = d.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{ "groups": [{ "name": "few", "grain_count": 6 }, { "name": "many", "grain_count": 16 }], "samples": 3 }"#,
    )
    .unwrap();
    let go = |name: &str| {
        let out = d.path().join(name);
        polycrys(&["pipeline", spec.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--seed", "11"], &out).unwrap();
        tree(&out)
    };
    let (a, b) = (go("p1"), go("p2"));
    assert!(a.contains_key(Path::new("comparison/few_vs_many/comparison.csv")));
    assert!(a.contains_key(Path::new("report/scatter.svg")) || a.keys().any(|k| k.starts_with("report/few")));
    assert_eq!(a, b);

    // The card alone is enough: the spec file can be gone.
    std::fs::remove_file(&spec).unwrap();
    let c = d.path().join("p3");
    replay(&d.path().join("p1").join(RUN_CARD), &c).unwrap();
    assert_eq!(a, tree(&c));
}

#[test]
fn mesh_export_round_trips_segmentation_labels() {
    let palette = OrientationPalette::default_palette();
    let seg = SegmentationConfig::default();
    let st = generate_structure(&SynthParams {
        dims: Dims::cube(64),
        n_grains: 125,
        rng_seed: 2024,
        ..SynthParams::default()
    })
    .unwrap();
    let d = tempfile::tempdir().unwrap();
    let vol = d.path().join("s.pcv");
    polycrys::volume::save(&st.volume, &vol).unwrap();
    let out = d.path().join("mesh");
    polycrys(&["export-mesh", vol.to_str().unwrap()], &out).unwrap();

    let (dims, voxel, ids) = mesh::read_grid(&out.join(mesh::GRID_FILE)).unwrap();
    assert_eq!(dims, Dims::cube(64));
    assert_eq!(voxel, st.volume.voxel_size_um());
    let labels = analyze(&st.volume, &palette, &seg).unwrap().labels;
    let mut unassigned = 0;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l < 0 {
            unassigned += 1;
        } else {
            assert_eq!(ids[i], l as u32, "voxel {i}");
        }
    }
    let n = labels.n_grains();
    assert!(ids.iter().all(|&g| (g as usize) < n));
    let rows = std::fs::read_to_string(out.join(mesh::ORIENTATION_FILE)).unwrap().lines().count();
    assert_eq!(rows, n + 1);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(mesh::META_FILE)).unwrap()).unwrap();
    assert_eq!(meta["reassigned_voxels"], unassigned);
}

fn bin(args: &[&str]) -> (i32, String) {
    let o = Proc::new(env!("CARGO_BIN_EXE_polycrys")).args(args).env("RUST_LOG", "error").output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn binary_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n).to_str().unwrap().to_string();
    let cfg = small_config(d.path());
    let cfg = cfg.to_str().unwrap();

    let (code, _) = bin(&["synth", "--count", "2", "--grains", "6", "--config", cfg, "--out", &p("ok")]);
    assert_eq!(code, 0);

    // Non-empty output directory.
    let (code, err) = bin(&["synth", "--config", cfg, "--out", &p("ok")]);
    assert_eq!(code, 2, "{err}");

    // Unknown settings key.
    std::fs::write(d.path().join("bad.json"), r#"{ "sise": 16 }"#).unwrap();
    let (code, _) = bin(&["synth", "--config", &p("bad.json"), "--out", &p("bad")]);
    assert_eq!(code, 2);

    // Missing inputs are all listed.
    let (code, err) = bin(&["compare", &p("nope_a"), &p("nope_b"), "--out", &p("cmp")]);
    assert_eq!(code, 3);
    assert!(err.contains("nope_a") && err.contains("nope_b"), "{err}");
    assert!(!d.path().join("cmp").exists());

    // Not a volume.
    std::fs::write(d.path().join("junk.pcv"), b"not a volume").unwrap();
    let (code, _) = bin(&["analyze", &p("junk.pcv"), "--config", cfg, "--out", &p("junk")]);
    assert_eq!(code, 3);

    // Learning rate large enough to blow the weights up.
    let (code, err) = bin(&["train-vae", "--data", &p("ok"), "--steps", "20", "--lr", "1e30", "--config", cfg, "--out", &p("div")]);
    assert_eq!(code, 4, "{err}");
}

#[test]
fn inputs_are_not_modified() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), "data", "6", "5..9");
    let before = tree(&data);
    let cfg = small_config(d.path());
    polycrys(&["analyze", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()], &d.path().join("an")).unwrap();
    polycrys(&["export-mesh", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()], &d.path().join("m")).unwrap();
    assert_eq!(before, tree(&data));
    let s = Settings::preset(Preset::Desk);
    assert_eq!(s.size, 64);
}

#[test]
fn train_sample_and_diffusion_pipeline_chain() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let cfg = cfg.to_str().unwrap();
    let data = synth(d.path(), "data", "8", "4..12");
    let data = data.to_str().unwrap();
    let vae_dir = d.path().join("vae");
    polycrys(&["train-vae", "--data", data, "--steps", "4", "--config", cfg], &vae_dir).unwrap();
    let vae = vae_dir.join(commands::VAE_CHECKPOINT);
    for f in ["vae_loss.csv", "vae_loss.json", "vae_loss.svg"] {
        assert!(vae_dir.join(f).is_file(), "{f}");
    }
    let diff_dir = d.path().join("diff");
    polycrys(
        &["train-diff", "--data", data, "--vae", vae.to_str().unwrap(), "--condition", "grain_count", "--steps", "4", "--config", cfg],
        &diff_dir,
    )
    .unwrap();
    let den = diff_dir.join(commands::DENOISER_CHECKPOINT);
    assert!(den.is_file());

    let sample = |name: &str| {
        let out = d.path().join(name);
        polycrys(
            &[
                "sample", "--vae", vae.to_str().unwrap(), "--denoiser", den.to_str().unwrap(),
                "--condition", "grain_count=5", "--condition", "grain_count=10", "--count", "2", "--seed", "3", "--config", cfg,
            ],
            &out,
        )
        .unwrap();
        out
    };
    let s1 = sample("s1");
    let manifest = polycrys::synth::load_manifest(&s1).unwrap();
    assert_eq!(manifest.records.len(), 4);
    let eval = commands::read_evaluation(&s1.join(commands::EVALUATION_FILE)).unwrap();
    assert_eq!(eval.targets, vec![5.0, 5.0, 10.0, 10.0]);
    assert_eq!(without_card(tree(&s1)), without_card(tree(&sample("s2"))));

    let spec = d.path().join("spec.json");
    std::fs::write(
        &spec,
        format!(
            r#"{{ "groups": [{{ "name": "a", "grain_count": 5 }}, {{ "name": "b", "grain_count": 10 }}], "samples": 2,
                 "generator": {{ "kind": "diffusion", "vae": {:?}, "denoiser": {:?} }}, "export_mesh": false, "report": false }}"#,
            vae.to_str().unwrap(),
            den.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = d.path().join("p");
    // Barely trained models may emit structures with no surviving grain; both outcomes must be clean.
    match polycrys(&["pipeline", spec.to_str().unwrap(), "--config", cfg], &out) {
        Ok(_) => {
            let files = tree(&out);
            assert!(files.contains_key(Path::new("groups/a/manifest.jsonl")));
            assert!(files.contains_key(Path::new("evaluation.json")));
        }
        Err(e) => {
            let stages: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("stages.json")).unwrap()).unwrap();
            assert!(stages["failed"].is_string(), "{e}");
            assert_eq!(stages["completed"][0], "load-model", "{e}");
        }
    }
}
