use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lanekit::config::Settings;

fn lanekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanekit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lanekit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Default settings with a short run: two frames, one training epoch.
fn write_config(dir: &Path) -> PathBuf {
    let mut settings = Settings::default();
    settings.frames = 2;
    settings.detector.epochs = 1;
    settings.slc.epochs = 1;
    let path = dir.join("run.cfg");
    std::fs::write(&path, settings.to_text()).unwrap();
    path
}

fn metrics(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn synth_extract_eval_is_exact_on_the_easy_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let pseudo = data.join("pseudo.json");
    ok(&["extract", "--cloud", s(&data), "--camera", s(&data.join("camera.cfg")), "--out", s(&pseudo)]);
    let m = tmp.path().join("metrics.json");
    ok(&["eval", "--pred", s(&pseudo), "--gt", s(&data.join("gt.json")), "--out", s(&m)]);
    let v = metrics(&m);
    assert_eq!(v["f1"], 1.0, "{v}");
    assert_eq!(v["fp"], 0);
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let mut listings = Vec::new();
    for run in ["a", "b"] {
        let data = tmp.path().join(run);
        ok(&["synth", "--config", s(&cfg), "--out", s(&data), "--seed", "7"]);
        let pseudo = data.join("pseudo.json");
        ok(&["extract", "--cloud", s(&data), "--camera", s(&data.join("camera.cfg")), "--out", s(&pseudo), "--seed", "7"]);
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&data)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        listings.push(files);
    }
    assert_eq!(listings[0].len(), 2 * 2 + 3);
    assert!(listings[0] == listings[1], "outputs differ between identical runs");

    let other = tmp.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--out", s(&other), "--seed", "8"]);
    assert_ne!(std::fs::read(other.join("frame_0000.bin")).unwrap(), listings[0].iter().find(|f| f.0 == "frame_0000.bin").unwrap().1);
}

#[test]
fn missing_config_key_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let text: String = Settings::default()
        .to_text()
        .lines()
        .filter(|l| !l.trim_start().starts_with("slc.epsilon"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = tmp.path().join("broken.cfg");
    std::fs::write(&cfg, text).unwrap();
    let out = lanekit(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert!(err["message"].as_str().unwrap().contains("slc.epsilon"), "{err}");
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn module_errors_exit_with_code_1_and_a_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let pseudo = data.join("pseudo.json");
    ok(&["extract", "--cloud", s(&data.join("frame_0000.bin")), "--camera", s(&data.join("camera.cfg")), "--out", s(&pseudo)]);
    // One predicted frame against two ground-truth frames.
    let out = lanekit(&["eval", "--pred", s(&pseudo), "--gt", s(&data.join("gt.json")), "--out", s(&tmp.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert!(err["error"].is_string() && err["message"].as_str().unwrap().contains("frame_0001.ppm"), "{err}");

    std::fs::write(tmp.path().join("bad.bin"), b"not a cloud").unwrap();
    let out = lanekit(&[
        "extract",
        "--cloud",
        s(&tmp.path().join("bad.bin")),
        "--camera",
        s(&data.join("camera.cfg")),
        "--out",
        s(&tmp.path().join("p.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    error_line(&out);
}

#[test]
fn training_distillation_and_rendering_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["extract", "--cloud", s(&data), "--camera", s(&data.join("camera.cfg")), "--out", s(&data.join("pseudo.json"))]);

    let state = tmp.path().join("slc.ckpt");
    ok(&["train-slc", "--data", s(&data), "--config", s(&cfg), "--out", s(&state)]);
    let resumed = tmp.path().join("slc2.ckpt");
    ok(&["train-slc", "--data", s(&data), "--config", s(&cfg), "--out", s(&resumed), "--resume", s(&state)]);
    let a = lanekit::formats::read_state(&std::fs::read(&state).unwrap()).unwrap();
    let b = lanekit::formats::read_state(&std::fs::read(&resumed).unwrap()).unwrap();
    assert_eq!((a.epoch, b.epoch), (1, 2));

    let out = tmp.path().join("out");
    ok(&["distill", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--state", s(&state)]);
    for f in ["naive.net", "student.net", "slc.ckpt", "noisy.json", "refined.json", "student.json", "report.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report = metrics(&out.join("report.json"));
    assert_eq!(report["pseudo"]["f1"], 1.0);

    let img = tmp.path().join("overlay.ppm");
    ok(&[
        "render",
        "--image",
        s(&data.join("frame_0000.ppm")),
        "--out",
        s(&img),
        "--gt",
        s(&data.join("gt.json")),
        "--refined",
        s(&out.join("refined.json")),
    ]);
    let overlay = lanekit::formats::read_ppm(&std::fs::read(&img).unwrap()).unwrap();
    let green = (0..overlay.height).flat_map(|y| (0..overlay.width).map(move |x| (x, y))).filter(|&(x, y)| overlay.pixel(x, y) == [0, 255, 0]).count();
    assert!(green > 1000, "only {green} ground-truth pixels drawn");
}
