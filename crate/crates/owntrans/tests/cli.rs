//! Drives the installed binary end to end: exit codes, output formats,
//! the golden reference run, report/replay round-trips, and determinism
//! across worker counts.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn owntrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owntrans"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn owntrans_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owntrans"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

#[test]
fn exit_codes_follow_the_verdict() {
    assert_eq!(
        owntrans(&["verify", "base"]).status.code(),
        Some(0),
        "all-holds exits 0"
    );
    assert_eq!(
        owntrans(&["verify", "compromised_cks"]).status.code(),
        Some(1),
        "a violation exits 1"
    );
    assert_eq!(
        owntrans(&["verify", "base", "--max-depth", "5"])
            .status
            .code(),
        Some(2),
        "an inconclusive bound exits 2"
    );
}

#[test]
fn usage_errors_exit_3_and_help_exits_0() {
    assert_eq!(
        owntrans(&["verify"]).status.code(),
        Some(3),
        "missing argument"
    );
    assert_eq!(
        owntrans(&["verify", "no_such_scenario"]).status.code(),
        Some(3),
        "unknown scenario"
    );
    assert_eq!(
        owntrans(&["verify", "base", "--property", "bogus"])
            .status
            .code(),
        Some(3),
        "unknown property"
    );
    assert_eq!(
        owntrans(&["frobnicate"]).status.code(),
        Some(3),
        "unknown subcommand"
    );
    assert_eq!(owntrans(&["--help"]).status.code(), Some(0));
    assert_eq!(owntrans(&["verify", "--help"]).status.code(), Some(0));
    assert_eq!(owntrans(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_property_error_names_the_valid_ids() {
    let out = owntrans(&["verify", "base", "--property", "bogus"]);
    let err = stderr_of(&out);
    assert!(
        err.contains("secrecy") && err.contains("transfer_completes"),
        "error lists the vocabulary: {err}"
    );
}

#[test]
fn the_base_verify_report_holds_everything() {
    let out = owntrans(&["verify", "base", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_str(&stdout_of(&out)).expect("stdout is a JSON document");
    assert_eq!(doc["command"], "verify");
    assert_eq!(doc["overall"], "holds");
    assert_eq!(doc["exploration"]["exhausted"], true);
    let properties = doc["properties"].as_array().unwrap();
    assert_eq!(properties.len(), 4);
    for p in properties {
        assert_eq!(p["verdict"], "holds", "property {}", p["id"]);
        assert_eq!(p["attacker_goal_reachable"], false, "property {}", p["id"]);
    }
}

#[test]
fn text_and_json_forms_agree_on_the_verdicts() {
    let text = stdout_of(&owntrans(&["verify", "leaked_password"]));
    let json: Value = serde_json::from_str(&stdout_of(&owntrans(&[
        "verify",
        "leaked_password",
        "--format",
        "json",
    ])))
    .unwrap();
    for p in json["properties"].as_array().unwrap() {
        let display = p["display_name"].as_str().unwrap();
        let verdict = match p["verdict"].as_str().unwrap() {
            "holds" => "Holds",
            "violated" => "Violated",
            other => panic!("unexpected verdict {other}"),
        };
        let line = text
            .lines()
            .find(|l| l.trim_start().starts_with(display))
            .unwrap_or_else(|| panic!("text report mentions {display}"));
        assert!(
            line.contains(verdict),
            "text line {line:?} carries the JSON verdict {verdict}"
        );
    }
}

#[test]
fn the_reference_run_matches_the_golden_file() {
    let out = owntrans(&["run-honest", "base", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let golden = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/run_honest_base.json"),
    )
    .expect("golden file present");
    assert_eq!(stdout_of(&out), golden, "the reference run is byte-stable");
}

#[test]
fn the_reference_run_text_form_lists_the_nine_events() {
    let out = owntrans(&["run-honest", "base"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout_of(&out);
    for label in [
        "M1",
        "M2",
        "RunningOldOwner",
        "M3",
        "M4",
        "M5",
        "ClaimSecret",
        "M6",
        "CommitNewOwner",
    ] {
        assert!(text.contains(label), "text run mentions {label}");
    }
    assert!(
        text.trim_end().ends_with("complete: 9 events"),
        "got: {text}"
    );
}

#[test]
fn a_deadlocked_scenario_reports_where_it_stuck() {
    let out = owntrans(&["run-honest", "leaked_password"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr_of(&out).contains("stuck: CKS waiting at M3"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn a_written_report_replays_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let report_arg = report.to_str().unwrap();

    let out = owntrans(&["verify", "compromised_cks", "--out", report_arg]);
    assert_eq!(out.status.code(), Some(1), "the compromise is found");
    assert!(report.exists(), "--out wrote the report");

    let replayed = owntrans(&["replay", report_arg, "compromised_cks"]);
    assert_eq!(
        replayed.status.code(),
        Some(0),
        "stderr: {}",
        stderr_of(&replayed)
    );
    let said = stdout_of(&replayed);
    assert!(
        said.contains("secrecy") && said.contains("violation confirmed"),
        "got: {said}"
    );
}

#[test]
fn replaying_against_the_wrong_scenario_fails() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let report_arg = report.to_str().unwrap();
    assert_eq!(
        owntrans(&["verify", "leaked_password", "--out", report_arg])
            .status
            .code(),
        Some(1)
    );
    let out = owntrans(&["replay", report_arg, "base"]);
    assert_eq!(out.status.code(), Some(3), "a foreign path cannot replay");
    assert!(
        stderr_of(&out).contains("not enabled"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn scenario_files_load_from_paths_too() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("my.scenario.json");
    std::fs::write(&path, owntrans::bundled("base").unwrap()).unwrap();
    let out = owntrans(&["verify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn worker_count_env_does_not_change_the_report() {
    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let out = owntrans_with_env(
            &["verify", "leaked_password", "--format", "json"],
            "OWNTRANS_THREADS",
            threads,
        );
        assert_eq!(out.status.code(), Some(1));
        let mut doc: Value = serde_json::from_str(&stdout_of(&out)).unwrap();
        doc["exploration"]["duration_ms"] = Value::from(0);
        reports.push(doc);
    }
    assert_eq!(
        reports[0], reports[1],
        "OWNTRANS_THREADS only schedules, never decides"
    );
}
