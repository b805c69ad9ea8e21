use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn permix() -> Command {
    Command::new(env!("CARGO_BIN_EXE_permix"))
}

/// Ten synthetic "digits": class `c` is a bar at angle `18°·c` with a little jitter.
fn write_digits(dir: &Path, n: usize) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for v in [2051u32, n as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for v in [2049u32, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        let c = i % 10;
        let angle = (c as f64 * 18.0 + (i / 10 % 3) as f64 * 2.0).to_radians();
        let (s, co) = angle.sin_cos();
        let shift = (i / 30 % 3) as f64 - 1.0;
        for y in 0..28 {
            for x in 0..28 {
                let (dy, dx) = (y as f64 - 13.5 - shift, x as f64 - 13.5);
                let on = (dy * co - dx * s).abs() < 1.6 && (dy * s + dx * co).abs() < 9.0;
                images.push(if on { 255 } else { 0 });
            }
        }
        labels.push(c as u8);
    }
    fs::write(dir.join("train-images-idx3-ubyte"), images).unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), labels).unwrap();
}

fn small_train(data: &Path, out: &Path) -> Output {
    permix()
        .args(["--threads", "1", "train", "--preset", "plain", "--data"])
        .arg(data)
        .args(["--n-train", "100", "--n-valid", "20", "--n-test", "30"])
        .args(["--n-patches", "1500", "--max-iters", "3", "--out"])
        .arg(out)
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_digits(&data, 150);
    (dir, data)
}

#[test]
fn train_writes_a_model_and_a_report() {
    let (dir, data) = setup();
    let model = dir.path().join("m.pmx");
    let out = small_train(&data, &model);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&model).unwrap();
    assert_eq!(&bytes[..8], b"PMXMODEL");
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 0);
    assert_eq!(report["layers"][0]["patches"], 1500);
    assert!(report["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["config"]["em"]["max_iters"], 3);
}

#[test]
fn single_thread_training_is_byte_identical() {
    let (dir, data) = setup();
    let (a, b) = (dir.path().join("a.pmx"), dir.path().join("b.pmx"));
    assert!(small_train(&data, &a).status.success());
    assert!(small_train(&data, &b).status.success());
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn eval_reports_error_and_confusion() {
    let (dir, data) = setup();
    let model = dir.path().join("m.pmx");
    assert!(small_train(&data, &model).status.success());
    let out = permix()
        .args([
            "eval",
            "--split",
            "train",
            "--n-train",
            "100",
            "--n-valid",
            "20",
            "--n-test",
            "30",
            "--model",
        ])
        .arg(&model)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n"], 100);
    // the training set of this tiny problem is memorized
    assert_eq!(report["error_rate"], 0.0);
    let confusion = report["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 10);
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 100);
}

#[test]
fn inspect_renders_one_tile_per_part() {
    let (dir, data) = setup();
    let model = dir.path().join("m.pmx");
    assert!(small_train(&data, &model).status.success());
    let img = dir.path().join("parts.pgm");
    let out = permix()
        .arg("inspect")
        .arg("--model")
        .arg(&model)
        .args(["--layer", "1", "--out"])
        .arg(&img)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&img).unwrap();
    assert_eq!(&bytes[..2], b"P5");
    // 1280 tiles of 6×6 on a 36×36 grid with one pixel of padding
    let header = String::from_utf8_lossy(&bytes[..20]).to_string();
    assert!(header.contains("253 253"), "{header}");

    let classes = dir.path().join("classes.pgm");
    let out = permix()
        .arg("inspect")
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&classes)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrote 10 tiles"));
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = permix()
        .args(["train", "--data", "/nonexistent/permix-data", "--out"])
        .arg(dir.path().join("m.pmx"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing input"));

    let corrupt = dir.path().join("bad.pmx");
    fs::write(&corrupt, b"NOTAMODELFILE").unwrap();
    let out = permix().arg("eval").arg("--model").arg(&corrupt).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    let preset = permix()
        .args(["train", "--preset", "deep", "--out"])
        .arg(dir.path().join("m.pmx"))
        .output()
        .unwrap();
    assert_eq!(preset.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&preset.stderr).contains("unknown preset"));

    let usage = permix().arg("train").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}
