use std::fs;

use seulab::half16::BitPosition;
use seulab::model::{ActivationTrace, ForwardOptions};
use seulab::report::{emit_results, export_images, load_result, ImageSet, ReportFormat};
use seulab::{run_campaign, CampaignConfig, DiffuserConfig, Metric, RunOptions, Target, ToyModel};

fn small_model() -> DiffuserConfig {
    DiffuserConfig {
        latent_size: 8,
        image_size: 16,
        channels: vec![8, 16],
        steps: 2,
        ..DiffuserConfig::default()
    }
}

fn small_campaign() -> CampaignConfig {
    let targets = ["down.0.t0.sa.wv", "up.0.t1.ca.wq"]
        .iter()
        .map(|s| Target::new(s.parse().unwrap(), BitPosition::EXPONENT_MSB))
        .collect();
    CampaignConfig {
        trials: 3,
        prompts: vec!["a red square".into(), "a blue circle".into()],
        model: small_model(),
        ..CampaignConfig::new(targets)
    }
}

#[test]
fn bypass_ignores_transformer_corruption() {
    let model = ToyModel::new(small_model()).unwrap();
    let text = model.embed_prompt("a red square");
    let latent = model.initial_latent();
    let bypass = ForwardOptions {
        bypass_transformers: true,
    };
    let clean = model.weights_for(&model.base_view()).unwrap();
    let view = model
        .base_view()
        .flip_element("mid.t0.sa.wv", 3, BitPosition::EXPONENT_MSB)
        .unwrap();
    let hit = model.weights_for(&view).unwrap();

    let a = model.unet_forward_with(&latent, &text, &clean, 0, bypass, None).unwrap();
    let b = model.unet_forward_with(&latent, &text, &hit, 0, bypass, None).unwrap();
    assert_eq!(a.map.data, b.map.data);

    let c = model.unet_forward(&latent, &text, &hit, 0).unwrap();
    assert_ne!(a.map.data, c.map.data);
}

#[test]
fn trace_lists_every_boundary() {
    let model = ToyModel::new(small_model()).unwrap();
    let mut trace = ActivationTrace::default();
    let w = model.base_weights();
    model
        .unet_forward_with(
            &model.initial_latent(),
            &model.embed_prompt("x"),
            w,
            1,
            ForwardOptions::default(),
            Some(&mut trace),
        )
        .unwrap();
    let names: Vec<&str> = trace.entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "down.0.in", "down.0.skip", "down.0.out", "down.1.in", "down.1.skip", "down.1.out", "mid.in", "mid.out",
            "up.1.in", "up.1.out", "up.0.in", "up.0.out", "out"
        ]
    );
}

#[test]
fn emitted_results_round_trip() {
    let run = run_campaign(&small_campaign(), &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(&run.result, ReportFormat::Json, dir.path()).unwrap();
    let loaded = load_result(&files[0]).unwrap();
    assert_eq!(loaded, run.result);
    assert!(loaded.aggregates_consistent());

    let again = tempfile::tempdir().unwrap();
    let files2 = emit_results(&loaded, ReportFormat::Json, again.path()).unwrap();
    assert_eq!(fs::read(&files[0]).unwrap(), fs::read(&files2[0]).unwrap());

    let csv = emit_results(&run.result, ReportFormat::Csv, dir.path()).unwrap();
    let names: Vec<String> = csv
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["aggregates.csv", "trials.csv", "baseline.csv"]);
    let aggregates = fs::read_to_string(&csv[0]).unwrap();
    // header plus one row per target and metric
    assert_eq!(aggregates.lines().count(), 1 + 2 * Metric::ALL.len());
    let trials = fs::read_to_string(&csv[1]).unwrap();
    // long form: target x trial x prompt x metric
    assert_eq!(trials.lines().count(), 1 + 2 * 3 * 2 * Metric::ALL.len());
}

#[test]
fn image_export_is_stable() {
    let cfg = small_campaign();
    let run = run_campaign(&cfg, &RunOptions::default()).unwrap();
    let run2 = run_campaign(&cfg, &RunOptions { threads: Some(2) }).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (r, d) in [(&run, &a), (&run2, &b)] {
        export_images(&r.result, Some(&r.images), ImageSet::Baseline, d.path()).unwrap();
        export_images(&r.result, Some(&r.images), ImageSet::Exemplars, d.path()).unwrap();
    }
    let mut listed: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    listed.sort();
    assert_eq!(listed.len(), 2 + 2 * 2);
    for name in &listed {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let base = fs::read(a.path().join("baseline_p0.ppm")).unwrap();
    let hit = fs::read(a.path().join("down.0.t0.sa.wv_14_p0.ppm")).unwrap();
    assert!(base.starts_with(b"P3"));
    assert_ne!(base, hit);
    assert!(export_images(&run.result, None, ImageSet::Baseline, a.path()).is_err());
}
