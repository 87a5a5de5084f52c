use std::path::Path;
use std::process::{Command, Output};

fn semidense(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semidense"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("SEMIDENSE_THREADS", t),
        None => cmd.env_remove("SEMIDENSE_THREADS"),
    };
    cmd.output().expect("binary runs")
}

const SMALL: [&str; 8] = ["--n-points", "300", "--n-views", "10", "--n-query-views", "3", "--seed", "5"];

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with(extra: &[&str]) -> Vec<String> {
    extra.iter().chain(SMALL.iter()).map(|s| s.to_string()).collect()
}

fn run(args: &[String], threads: Option<&str>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    semidense(&refs, threads)
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(semidense(&[], None).status.code(), Some(2));
    assert_eq!(semidense(&["synth", "--out", out, "--n-views", "1"], None).status.code(), Some(2));
    assert_eq!(semidense(&["synth", "--out", out, "--window", "4"], None).status.code(), Some(2));
    let missing = dir.path().join("nowhere");
    let r = semidense(&["reconstruct", "--scene", path(&missing), "--out", out], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));
    assert_eq!(semidense(&["synth", "--out", out], Some("zero")).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(semidense(&["synth", "--out", out, "--config", path(&cfg)], None).status.code(), Some(2));
}

#[test]
fn stages_match_the_single_pipeline_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let whole = d.join("whole");
    let r = run(&with(&["pipeline", "--out", path(&whole)]), Some("1"));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("metrics ->"));

    let (scene, model, est, metrics) = (d.join("s"), d.join("m"), d.join("e"), d.join("metrics.csv"));
    for args in [
        with(&["synth", "--out", path(&scene)]),
        with(&["reconstruct", "--scene", path(&scene), "--out", path(&model)]),
        with(&["estimate", "--model", path(&model), "--scene", path(&scene), "--out", path(&est)]),
        with(&["eval", "--poses", path(&est.join("poses.json")), "--scene", path(&scene), "--out", path(&metrics)]),
    ] {
        let r = run(&args, Some("3"));
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
    }
    // Thread count and stage split change nothing in the outputs.
    assert_eq!(std::fs::read(whole.join("metrics.csv")).unwrap(), std::fs::read(&metrics).unwrap());
    for f in ["model.json", "refined.ply", "features.fmat", "tracks.json"] {
        assert_eq!(std::fs::read(whole.join("model").join(f)).unwrap(), std::fs::read(model.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 9, "scene": {"n_points": 200, "n_views": 6, "n_query_views": 2}}"#).unwrap();
    let out = dir.path().join("s");
    let r = semidense(&["synth", "--config", path(&cfg), "--n-views", "7", "--out", path(&out)], None);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("scene.json")).unwrap()).unwrap();
    assert_eq!(doc["seed"], 9);
    assert_eq!(doc["params"]["n_points"], 200);
    assert_eq!(doc["params"]["n_views"], 7);
    assert_eq!(doc["views"].as_array().unwrap().len(), 7);
}
