use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rscalib_cli::{sweep_dir_name, GROUND_TRUTH_FILE, IMU_FILE, OBSERVATIONS_FILE, REPORT_FILE, SUMMARY_FILE};

fn rscalib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rscalib"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn short_spec(dir: &Path, duration: f64) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(&spec, format!("duration_s = {duration}\nseed = 5\n")).unwrap();
    spec
}

#[test]
fn simulate_is_deterministic_and_covers_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = rscalib(&["simulate", "--out", path(out), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in [OBSERVATIONS_FILE, IMU_FILE, GROUND_TRUTH_FILE] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    let observations = fs::read_to_string(a.join(OBSERVATIONS_FILE)).unwrap();
    let frames: BTreeSet<&str> = observations.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(frames.len(), 1000);
}

#[test]
fn sweep_writes_one_dataset_per_line_delay() {
    let dir = tempfile::tempdir().unwrap();
    let spec = short_spec(dir.path(), 10.0);
    let out = dir.path().join("sweep");
    let o = rscalib(&["simulate", "--spec", path(&spec), "--out", path(&out), "--sweep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for d in [137.5e-6, 82.5e-6, 51.563e-6, 41.25e-6] {
        let sub = out.join(sweep_dir_name(d));
        assert!(sub.join(OBSERVATIONS_FILE).exists(), "{}", sub.display());
        let truth = fs::read_to_string(sub.join(GROUND_TRUTH_FILE)).unwrap();
        assert!(truth.contains(&format!("line_delay_s = {d}")), "{truth}");
    }
}

#[test]
fn calibrate_then_evaluate_a_short_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = short_spec(dir.path(), 12.0);
    let data = dir.path().join("data");
    let o = rscalib(&["simulate", "--spec", path(&spec), "--out", path(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let result = dir.path().join("result");
    let o = rscalib(&["calibrate", "--dataset", path(&data), "--out", path(&result), "--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(result.join(SUMMARY_FILE).exists());
    let report = result.join(REPORT_FILE);

    let csv = dir.path().join("errors.csv");
    let truth = data.join(GROUND_TRUTH_FILE);
    let o = rscalib(&[
        "evaluate", "--report", path(&report), "--reference", path(&truth), "--label", "rs", "--out", path(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(&csv).unwrap();
    let row: Vec<f64> = table.lines().nth(1).unwrap().split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    let (rotation_deg, translation_m, time_offset_ms, line_delay_us) = (row[0], row[1], row[2], row[3]);
    assert!(rotation_deg < 0.5, "{table}");
    assert!(translation_m < 0.02, "{table}");
    assert!(time_offset_ms < 1.0, "{table}");
    assert!(line_delay_us < 5.0, "{table}");
}

#[test]
fn evaluating_a_file_against_itself_gives_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = short_spec(dir.path(), 10.0);
    assert!(rscalib(&["simulate", "--spec", path(&spec), "--out", path(&data)]).status.success());
    let truth = data.join(GROUND_TRUTH_FILE);
    let o = rscalib(&["evaluate", "--report", path(&truth), "--reference", path(&truth), "--label", "self"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let row = out.lines().nth(1).unwrap();
    let values: Vec<f64> = row.split(',').skip(1).take(4).map(|x| x.parse().unwrap()).collect();
    assert_eq!(values, [0.0; 4], "{out}");
}

#[test]
fn evaluate_names_a_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = short_spec(dir.path(), 10.0);
    assert!(rscalib(&["simulate", "--spec", path(&spec), "--out", path(&data)]).status.success());
    let truth = data.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&truth).unwrap();
    let broken = dir.path().join("broken.toml");
    fs::write(&broken, text.lines().filter(|l| !l.starts_with("line_delay_s")).collect::<Vec<_>>().join("\n")).unwrap();
    let o = rscalib(&["evaluate", "--report", path(&broken), "--reference", path(&truth)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line_delay_s"), "{}", stderr(&o));
}

#[test]
fn allan_warns_about_short_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let imu = dir.path().join("imu.csv");
    let mut csv = String::from("timestamp_s,gx,gy,gz,ax,ay,az\n");
    for i in 0..20_000 {
        let t = i as f64 / 200.0;
        let wobble = ((i * 7919) % 101) as f64 * 1e-5;
        csv.push_str(&format!("{t},{wobble},{},{},{},{},{}\n", -wobble, wobble * 0.5, wobble, -wobble, 9.81 + wobble));
    }
    fs::write(&imu, csv).unwrap();
    let out = dir.path().join("allan");
    let o = rscalib(&["allan", "--imu", path(&imu), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("one hour"), "{}", stderr(&o));
    assert!(out.join("noise_parameters.csv").exists());
}

#[test]
fn malformed_csv_exits_with_data_error_and_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = short_spec(dir.path(), 10.0);
    assert!(rscalib(&["simulate", "--spec", path(&spec), "--out", path(&data)]).status.success());
    let file = data.join(IMU_FILE);
    let mut lines: Vec<String> = fs::read_to_string(&file).unwrap().lines().map(str::to_owned).collect();
    lines[5] = lines[5].replacen(',', ",abc,", 1);
    fs::write(&file, lines.join("\n")).unwrap();
    let o = rscalib(&["calibrate", "--dataset", path(&data), "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_with_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "duration_seconds = 3\n").unwrap();
    let o = rscalib(&["simulate", "--spec", path(&spec), "--out", path(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
