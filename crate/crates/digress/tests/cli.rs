use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use digress::cli::Cli;
use digress::pipeline::{RunManifest, MANIFEST_FILE};

const FAST: &str = r#"
[budget]
iterations = 3
grad_avg = 1

[inversion]
steps = 3

[centroid]
samples = 2

[eval]
seeds = [0]
strengths = [1.0]
steps = 10
augmentations = ["jpeg"]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_digress"));
    c.env_remove("DIGRESS_OUT").env_remove("DIGRESS_CHECKPOINT");
    c
}

fn corpus(name: &str) -> PathBuf {
    digress::checkpoint::bundled_corpus().join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_the_epsilon_default() {
    let out = run(&["immunize", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("12/255"));
    let top = run(&["--help"]);
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in ["immunize", "invert", "centroid", "analyze-timesteps", "inpaint", "evaluate", "augment", "train-toy"] {
        assert!(text.contains(sub), "{sub} missing from --help");
    }
}

#[test]
fn missing_mask_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let image = corpus("images/0000.png");
    let out = run(&["immunize", "--image", path(&image), "--mask", path(&missing), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(path(&missing)));
}

#[test]
fn exit_codes_separate_usage_validation_and_success() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["immunize", "--bogus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[budget]\nepsilon = \"1/0\"\n").unwrap();
    let image = corpus("images/0000.png");
    let mask = corpus("masks/0000.png");
    let args = ["immunize", "--image", path(&image), "--mask", path(&mask), "--out", path(dir.path())];
    let out = bin().args(args).args(["--config", path(&bad)]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin().args(args).args(["--epsilon", "0.5", "--step-size", "0.9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let aug = dir.path().join("a.png");
    assert_eq!(run(&["augment", "--image", path(&image), "--kind", "jpeg", "--out", path(&aug)]).status.code(), Some(0));
    assert_eq!(run(&["augment", "--image", path(&image), "--kind", "blur", "--out", path(&aug)]).status.code(), Some(2));
}

#[test]
fn config_layers_resolve_flag_over_file_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "seed = 5\n[budget]\nepsilon = \"8/255\"\niterations = 40\n").unwrap();
    let base = ["digress", "immunize", "--image", "x.png", "--mask", "m.png"];

    let defaults = Cli::try_parse_from(base).unwrap().resolve_config().unwrap();
    assert_eq!(defaults.budget.epsilon.0, 12.0 / 255.0);
    assert_eq!(defaults.budget.iterations, 250);

    let mut with_file = base.to_vec();
    with_file.extend(["--config", path(&file)]);
    let cfg = Cli::try_parse_from(&with_file).unwrap().resolve_config().unwrap();
    assert_eq!((cfg.budget.epsilon.0, cfg.budget.iterations, cfg.seed), (8.0 / 255.0, 40, 5));
    assert_eq!(cfg.budget.grad_avg, 7);

    let mut with_flags = with_file.clone();
    with_flags.extend(["--epsilon", "4/255", "--seed", "9"]);
    let cfg = Cli::try_parse_from(&with_flags).unwrap().resolve_config().unwrap();
    assert_eq!((cfg.budget.epsilon.0, cfg.budget.iterations, cfg.seed), (4.0 / 255.0, 40, 9));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.toml");
    std::fs::write(&cfg, FAST).unwrap();
    let (image, mask) = (corpus("images/0001.png"), corpus("masks/0001.png"));
    let out = bin()
        .env("DIGRESS_OUT", dir.path())
        .args(["-q", "centroid", "--image", path(&image), "--mask", path(&mask), "--config", path(&cfg)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("centroid/centroid.bin").exists());
    assert!(dir.path().join("centroid/centroid.json").exists());
    assert!(dir.path().join("centroid").join(MANIFEST_FILE).exists());
}

fn immunize(dir: &Path, cfg: &Path, seed: &str) -> RunManifest {
    let (image, mask) = (corpus("images/0002.png"), corpus("masks/0002.png"));
    let out = run(&[
        "-q", "immunize", "--image", path(&image), "--mask", path(&mask), "--config", path(cfg), "--seed", seed, "--out", path(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn immunize_is_reproducible_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.toml");
    std::fs::write(&cfg, FAST).unwrap();
    let a = immunize(&dir.path().join("a"), &cfg, "7");
    let b = immunize(&dir.path().join("b"), &cfg, "7");
    let c = immunize(&dir.path().join("c"), &cfg, "8");
    let hashes = |m: &RunManifest| {
        let mut v: Vec<(String, String)> = m.artifacts.iter().map(|(k, f)| (k.clone(), f.sha256.clone())).collect();
        v.retain(|(k, _)| k != "attack_trace");
        v
    };
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(hashes(&a), hashes(&b));
    assert_ne!(hashes(&a), hashes(&c));
    assert_eq!(a.config, b.config);
    assert_eq!(a.config.budget.iterations, 3);
    assert_eq!(a.seeds["root"], 7);
    for key in ["immunized", "delta", "tau", "pi", "tokens", "centroid", "inversion_loss"] {
        assert!(a.artifacts.contains_key(key), "{key} not in manifest");
    }
    assert!(a.stages.iter().map(|s| s.stage.as_str()).eq(["invert", "centroid", "attack"]));
    let png = |d: &str| std::fs::read(dir.path().join(d).join("immunized.png")).unwrap();
    assert_eq!(png("a"), png("b"));

    // Evaluate the pair just produced.
    let ev = dir.path().join("eval");
    let out = run(&[
        "-q", "evaluate",
        "--clean", path(&corpus("images/0002.png")),
        "--immunized", path(&dir.path().join("a/immunized.png")),
        "--mask", path(&corpus("masks/0002.png")),
        "--tau", path(&dir.path().join("a/tau.bin")),
        "--config", path(&cfg),
        "--out", path(&ev),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(ev.join("rows.csv")).unwrap();
    let mut lines = rows.lines();
    assert!(lines.next().unwrap().starts_with("image_id,strength,seed,aug,ssim,psnr,lpips"));
    assert_eq!(lines.count(), 2);
    assert!(rows.contains("NA"));
}

#[test]
fn every_stage_runs_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.toml");
    std::fs::write(&cfg, FAST).unwrap();
    let (image, mask) = (corpus("images/0003.png"), corpus("masks/0003.png"));
    let common = ["--image", path(&image), "--mask", path(&mask)];
    let inv = dir.path().join("inv");
    let out = bin().args(["-q", "invert"]).args(common).args(["--config", path(&cfg), "--out", path(&inv)]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(inv.join("tau.bin").exists() && inv.join(MANIFEST_FILE).exists());

    let an = dir.path().join("an");
    let out = bin()
        .args(["-q", "analyze-timesteps"])
        .args(common)
        .args(["--grid", "100:900:200", "--draws", "2", "--out", path(&an)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(an.join("eigenfeatures.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "timestep,down.attn.fine,mid.attn.coarse");
    assert_eq!(csv.lines().count(), 6);
    assert!(an.join("eigenfeatures.png").exists());

    let png = dir.path().join("inpaint.png");
    let out = bin()
        .args(["-q", "inpaint"])
        .args(common)
        .args(["--strength", "0.8", "--steps", "10", "--out", path(&png)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin().args(["-q", "inpaint"]).args(common).args(["--steps", "5", "--out", path(&png)]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn analyze_timesteps_defaults_to_corpus_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["-q", "analyze-timesteps", "--grid", "200:800:300", "--draws", "1", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let window: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("window.json")).unwrap()).unwrap();
    assert_eq!(window["window"].as_array().unwrap().len(), 2);

    let image = corpus("images/0000.png");
    let out = run(&["-q", "analyze-timesteps", "--image", path(&image), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
