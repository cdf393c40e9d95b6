use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
trials = 2
prompts = ["a red square"]
metrics = ["clip", "deviation"]

[model]
latent_size = 8
image_size = 16
channels = [8, 16]
steps = 2

[[targets]]
selector = "mid.t0.sa.wv"
bit = 14
"#;

fn seulab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seulab")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn campaign_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let o = seulab(&["campaign", "--config", path(&cfg), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["result.json", "aggregates.csv", "trials.csv", "baseline.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(out.join("images").join("baseline_p0.ppm").exists());

    let result = out.join("result.json");
    let o = seulab(&["report", "--input", path(&result), "--grouping", "by-layer", "--metric", "deviation"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("\tSA\n"));

    let o = seulab(&["report", "--input", path(&result), "--grouping", "by-row"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL.replace("trials", "trails")).unwrap();
    let o = seulab(&["campaign", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trails"));
}

#[test]
fn corrupt_changes_one_element() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let ckpt = dir.path().join("toy.safetensors");
    let o = seulab(&["init-checkpoint", "--config", path(&cfg), "--out", path(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let hit = dir.path().join("hit.safetensors");
    let args = [
        "corrupt", "--checkpoint", path(&ckpt), "--target", "down.0.t0.sa.wv", "--topology", "toy", "--index", "0",
        "--out", path(&hit),
    ];
    let o = seulab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (fs::read(&ckpt).unwrap(), fs::read(&hit).unwrap());
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    assert!((1..=2).contains(&diff));

    let mut bad = args;
    bad[4] = "down.9.t0.sa.wv";
    assert_eq!(seulab(&bad).status.code(), Some(2));
    let missing = dir.path().join("nope");
    let mut gone = args;
    gone[2] = path(&missing);
    assert_eq!(seulab(&gone).status.code(), Some(3));
}
