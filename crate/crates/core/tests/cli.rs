use std::path::Path;
use std::process::{Command, Output};

use dseg::eval::EvalReport;
use dseg::io;

fn dseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
epochs = 3
seed = 5

[encoder]
base_channels = 2
n_levels = 3
latent_channels = 4

[critic]
hidden = [8, 8]
";

#[test]
fn help_exits_zero() {
    let out = dseg(&["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--data") && text.contains("--out"));
}

#[test]
fn unknown_subcommands_and_flags_are_usage_errors() {
    assert_eq!(dseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dseg(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(dseg(&[]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("missing.ckpt");
    let out = dseg(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&ckpt)));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let raw = root.join("raw");
    let data = root.join("data");
    let run = root.join("run");
    let report_dir = root.join("eval");
    let montages = root.join("montages");
    let cfg = root.join("train.toml");
    std::fs::write(&cfg, TINY).unwrap();

    ok(&["phantom", "generate", "--out", p(&raw), "--raw", "--n-healthy", "4", "--n-disease", "4", "--grid-size", "16", "--seed", "3"]);
    let manifest = raw.join("raw_manifest.tsv");
    assert!(manifest.exists());
    ok(&["preprocess", "run", "--manifest", p(&manifest), "--out", p(&data), "--crop-size", "16", "--out-size", "16"]);
    assert_eq!(io::read_dataset(&data).unwrap().len(), 8);

    // flags override the config file
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--epochs", "1"]);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["epochs"], 1);
    assert_eq!(meta["seed"], 5);
    for f in ["config.toml", "loss.tsv", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("best.ckpt");
    ok(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&report_dir)]);
    let report = EvalReport::from_json(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.run_id, "run");
    assert_eq!(report.overall.n, 2);
    assert_eq!(report.healthy.n + report.disease.n, report.overall.n);
    assert!(report.cases.iter().all(|r| (0.0..=1.0).contains(&r.dice)));
    assert!(report_dir.join("report.txt").exists());

    let out = ok(&["render", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&montages)]);
    let listed: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(listed.len(), 2);
    for row in &report.cases {
        let png = montages.join(format!("run_{}.png", row.case_id));
        assert!(png.exists(), "{}", png.display());
        assert!(image::open(&png).is_ok());
    }
    let absent = dseg(&["render", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&montages), "--case", "nobody"]);
    assert_eq!(absent.status.code(), Some(1));

    let case = &report.cases[0].case_id;
    let infer_dir = root.join("infer");
    let volume = data.join(case).join("volume.dseg");
    ok(&["infer", "--checkpoint", p(&ckpt), "--volume", p(&volume), "--out", p(&infer_dir)]);
    for f in ["probs.dseg", "mask.dseg", "recon.dseg", "pseudo_healthy.dseg"] {
        assert_eq!(io::read_grid(&infer_dir.join(f)).unwrap().dims(), [16; 3], "{f}");
    }
}
