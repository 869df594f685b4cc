use std::fs;
use std::path::Path;

use andor_shape::cli::main_with;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["aog"];
    argv.extend_from_slice(args);
    let code = main_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).expect("utf-8 stdout"),
        String::from_utf8(err).expect("utf-8 stderr"),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "aog {args:?} failed: {err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

#[test]
fn synth_train_detect_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), r#"{"train": [6, 6], "test": [3, 3], "seed": 11}"#).unwrap();
    fs::write(d.join("config.json"), r#"{"train": {"max_iterations": 2}}"#).unwrap();
    let data = d.join("data");
    let manifest = data.join("manifest.txt");
    let cfg = d.join("config.json");

    let out = ok(&["synth", "--spec", p(&d.join("spec.json")), "--out", p(&data)]);
    assert!(out.contains("wrote 18 samples"), "{out}");

    let mut models = Vec::new();
    for name in ["a.aogm", "b.aogm"] {
        let model = d.join(name);
        let log = ok(&["--config", p(&cfg), "train", "--manifest", p(&manifest), "--out", p(&model)]);
        assert!(log.starts_with("init positives=6 negatives=6"), "{log}");
        models.push(fs::read(&model).unwrap());
    }
    assert_eq!(models[0], models[1]);

    let model = d.join("a.aogm");
    let dets = d.join("dets.txt");
    ok(&["detect", "--model", p(&model), "--manifest", p(&manifest), "--out", p(&dets)]);
    let again = d.join("dets2.txt");
    ok(&["detect", "--model", p(&model), "--manifest", p(&manifest), "--out", p(&again)]);
    assert_eq!(fs::read(&dets).unwrap(), fs::read(&again).unwrap());

    let svg = d.join("pr.svg");
    let overlays = d.join("overlays");
    let report = ok(&[
        "eval",
        "--detections",
        p(&dets),
        "--manifest",
        p(&manifest),
        "--pr-svg",
        p(&svg),
        "--overlay-dir",
        p(&overlays),
        "--top1-accuracy",
    ]);
    assert!(report.starts_with("AP "), "{report}");
    assert!(report.contains("recall@1fppi"));
    assert!(report.contains("top1-accuracy"));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    assert_eq!(fs::read_dir(&overlays).unwrap().count(), 6);

    let aot = d.join("aot.txt");
    ok(&["detect", "--model", p(&model), "--manifest", p(&manifest), "--no-edges", "--out", p(&aot)]);
    let inspect = ok(&["inspect", "--model", p(&model)]);
    assert!(inspect.contains("live leaves"), "{inspect}");
}

#[test]
fn eval_rejects_unknown_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), r#"{"train": [1, 1], "test": [1, 1]}"#).unwrap();
    let data = d.join("data");
    ok(&["synth", "--spec", p(&d.join("spec.json")), "--out", p(&data)]);
    let dets = d.join("dets.txt");
    fs::write(&dets, "nowhere 0.5 0 0 10 10\n").unwrap();
    let (code, _, err) = run(&["eval", "--detections", p(&dets), "--manifest", p(&data.join("manifest.txt"))]);
    assert_eq!(code, 2);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn corrupt_model_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.aogm");
    fs::write(&model, b"AOGM garbage").unwrap();
    let (code, _, err) = run(&["inspect", "--model", p(&model)]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
}
