//! End-to-end tests of the `dpmsim` binary: exit codes, files written, and
//! the shape of what it prints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpmsim"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_preset_writes_traces_and_metrics() {
    let dir = tmp("run-preset");
    let out = bin()
        .args(["run", "--preset", "a1", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for name in ["a1-s1.dpm.csv", "a1-s1.baseline.csv", "a1-s1.metrics.json"] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    let csv = std::fs::read_to_string(dir.join("a1-s1.dpm.csv")).unwrap();
    assert!(csv.starts_with("time_s,ip,event,state,battery_J,temp_C,cum_energy_J\n"));
    let text = stdout(&out);
    assert!(text.contains("saving"), "summary line missing: {text}");
}

#[test]
fn metrics_file_is_valid_json_with_both_runs() {
    let dir = tmp("metrics-json");
    let out = bin()
        .args(["run", "--preset", "a3", "--no-trace", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(dir.join("a3-s1.metrics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).expect("valid JSON");
    assert_eq!(v["scenario"], "a3");
    assert_eq!(v["seed"], 1);
    assert!(v["energy_saving_pct"].is_number());
    assert!(v["managed"]["total_energy_J"].is_number());
    assert!(v["baseline"]["tasks_completed"].is_number());
}

#[test]
fn seed_override_lands_in_the_file_names() {
    let dir = tmp("seed-override");
    let out = bin()
        .args(["run", "--preset", "a1", "--seed", "9", "--no-trace", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(dir.join("a1-s9.metrics.json").is_file());
}

#[test]
fn no_trace_skips_the_csv_files() {
    let dir = tmp("no-trace");
    let out = bin()
        .args(["run", "--preset", "a1", "--no-trace", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["a1-s1.metrics.json"]);
}

#[test]
fn unknown_preset_exits_two() {
    let out = bin()
        .args(["run", "--preset", "nope"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("unknown preset"), "stderr: {err}");
    assert!(err.contains("a1"), "should list what is available: {err}");
}

#[test]
fn malformed_stdin_exits_two() {
    let mut child = bin()
        .args(["run", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary starts");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"name\": unquoted}")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("parse"), "stderr: {}", stderr(&out));
}

#[test]
fn dumped_preset_runs_back_through_stdin() {
    let dump = bin()
        .args(["preset", "dump", "a1"])
        .output()
        .expect("binary runs");
    assert!(dump.status.success());

    let dir = tmp("stdin-roundtrip");
    let mut child = bin()
        .args(["run", "-", "--no-trace", "--out"])
        .arg(&dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary starts");
    child.stdin.take().unwrap().write_all(&dump.stdout).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(dir.join("a1-s1.metrics.json").is_file());
}

#[test]
fn scenario_file_runs_like_the_preset() {
    let dump = bin()
        .args(["preset", "dump", "a2"])
        .output()
        .expect("binary runs");
    let dir = tmp("scenario-file");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a2.json");
    std::fs::write(&path, &dump.stdout).unwrap();

    let out = bin()
        .arg("run")
        .arg(&path)
        .args(["--no-trace", "--out"])
        .arg(&dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(dir.join("a2-s1.metrics.json").is_file());
}

#[test]
fn unwritable_output_directory_exits_three() {
    let out = bin()
        .args(["run", "--preset", "a1", "--out", "/proc/no-such-dir/x"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_scenario_arguments_exit_two() {
    let out = bin().arg("run").output().expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nothing to run"));
}

#[test]
fn preset_list_names_all_six() {
    let out = bin().args(["preset", "list"]).output().expect("binary runs");
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "a1\na2\na3\na4\nb\nc");
}

#[test]
fn preset_dump_is_parseable_json() {
    let out = bin().args(["preset", "dump", "b"]).output().expect("binary runs");
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid JSON");
    assert_eq!(v["name"], "b");
    assert_eq!(v["generators"].as_array().unwrap().len(), 4);
}

#[test]
fn table_prints_every_row_and_flags_the_dead_one() {
    let out = bin().arg("table").output().expect("binary runs");
    assert!(out.status.success());
    let text = stdout(&out);
    let numbered = text.lines().filter(|l| {
        l.split_whitespace()
            .next()
            .is_some_and(|w| w.parse::<usize>().is_ok())
    });
    assert_eq!(numbered.count(), 13);
    assert!(text.contains("fallback: ON4"));
    assert!(text.contains("row 6 can never fire"), "table output: {text}");
}

#[test]
fn report_with_one_seed_shows_zero_spread() {
    let out = bin()
        .args(["report", "--presets", "a1", "--seeds", "4"])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("a1"), "report output: {text}");
    assert!(text.contains("± 0.0"), "single seed has no spread: {text}");
}

#[test]
fn report_rejects_unknown_presets_before_running() {
    let out = bin()
        .args(["report", "--presets", "a1,zz", "--seeds", "1"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown preset"));
}
