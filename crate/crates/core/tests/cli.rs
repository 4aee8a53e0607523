use std::path::Path;
use std::process::{Command, Output};

fn mrsynth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrsynth"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mrsynth")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn phantom_writes_case_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mrsynth(&["phantom", "--cases", "4", "--shape", "32", "--seed", "1", "--out", "data"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut dirs: Vec<_> = std::fs::read_dir(tmp.path().join("data"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["PHANTOM-00000", "PHANTOM-00001", "PHANTOM-00002", "PHANTOM-00003"]);
    let files = std::fs::read_dir(tmp.path().join("data/PHANTOM-00002")).unwrap().count();
    assert_eq!(files, 5);
    let eff = std::fs::read_to_string(tmp.path().join("data/effective_config.toml")).unwrap();
    assert!(eff.contains("cases = 4"));
    assert!(eff.contains("seed = 1"));
}

#[test]
fn exit_codes_and_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mrsynth(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: kind=usage msg="));

    let o = mrsynth(&["train", "--config", "missing.file"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=config msg="), "{err}");

    std::fs::write(tmp.path().join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let o = mrsynth(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = mrsynth(&["train", "--preset", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(3));

    let o = mrsynth(&["--determinism", "phantom", "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(3));

    let o = mrsynth(&["evaluate", "--pred", "nowhere", "--ref", "nowhere"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=io"));
}

#[test]
fn evaluate_identity_copies() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(mrsynth(&["phantom", "--cases", "2", "--shape", "20", "--seed", "4", "--out", "r"], d).status.success());
    let o = mrsynth(&["evaluate", "--pred", "r", "--ref", "r", "--target", "t1n", "--out", "ev"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,ssim_h,ssim_t,psnr_h,psnr_t");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], "mean,1.000000,1.000000,inf,inf");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["cases"], 2);
    assert_eq!(json["mean"]["ssim_h"], 1.0);
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), "seed = 9\ncases = 3\n[phantom]\nshape = [20, 20, 20]\n").unwrap();
    let o = mrsynth(&["--config", "run.toml", "phantom", "--cases", "1", "--out", "p"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("p/PHANTOM-00000").is_dir());
    assert!(!d.join("p/PHANTOM-00001").exists());
    let eff: toml::Value = toml::from_str(&std::fs::read_to_string(d.join("p/effective_config.toml")).unwrap()).unwrap();
    assert_eq!(eff["seed"].as_integer(), Some(9));
    assert_eq!(eff["cases"].as_integer(), Some(1));
    assert_eq!(eff["phantom"]["shape"][0].as_integer(), Some(20));
}

#[test]
fn train_synthesize_evaluate_round() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(mrsynth(&["phantom", "--cases", "3", "--shape", "20", "--seed", "2", "--out", "data"], d).status.success());
    let o = mrsynth(
        &[
            "--seed", "2", "train", "--desk", "--data", "data", "--out", "run", "--target", "t1c", "--epochs", "1",
            "--epoch-size", "8",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("run/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(d.join("run/ckpt/t1c/0.bin").is_file());
    assert!(d.join("run/dev_metrics.csv").is_file());
    let o = mrsynth(
        &["synthesize", "--checkpoint", "run/ckpt/t1c/best.bin", "--input", "data/PHANTOM-00001", "--out", "syn", "--fusion", "three"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("syn/PHANTOM-00001/PHANTOM-00001-t1c.nii.gz").is_file());
    let o = mrsynth(&["evaluate", "--pred", "syn", "--ref", "data", "--out", "ev"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("PHANTOM-00001-t1c,"));
}

#[test]
fn desk_keeps_configured_vgg_source() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(mrsynth(&["phantom", "--cases", "2", "--shape", "16", "--seed", "1", "--out", "data"], d).status.success());
    let args = ["train", "--desk", "--preset", "l1m_vgg", "--data", "data", "--epochs", "1", "--epoch-size", "8"];

    let mut missing = vec!["--seed", "1"];
    missing.extend(args);
    missing.extend(["--out", "a"]);
    let o = mrsynth(&missing, d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=dependency"), "{}", stderr(&o));

    std::fs::write(d.join("v.toml"), "[train.loss.vgg_source]\nkind = \"random\"\nseed = 1\nwidth_divisor = 16\n").unwrap();
    let mut with_file = vec!["--config", "v.toml", "--seed", "1"];
    with_file.extend(args);
    with_file.extend(["--out", "b"]);
    let o = mrsynth(&with_file, d);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("b/log.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_ne!(row[8], "NA");
}
