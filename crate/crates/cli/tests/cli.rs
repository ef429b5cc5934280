//! End-to-end tests against the built binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_multiloc"));
    cmd.env_remove("MULTILOC_SEED");
    cmd
}

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn temp_path(name: &str) -> PathBuf {
    let mut path = std::env::temp_dir();
    path.push(format!("multiloc-cli-{}-{}", std::process::id(), name));
    path
}

#[test]
fn encode_empty_message() {
    let out = bin()
        .args(["encode", "--message", "", "--chunk-width", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "1,3,3\n");
}

#[test]
fn encode_decode_roundtrip() {
    let out = bin()
        .args(["encode", "--message", "hello", "--chunk-width", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let sequence = stdout(&out).trim().to_string();
    let out = bin()
        .args(["decode", "--sequence", &sequence, "--chunk-width", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("text: \"hello\""), "{}", text);
}

#[test]
fn decode_prints_bits_for_non_message_sequences() {
    let out = bin()
        .args(["decode", "--sequence", "1,2,8,3,2,5,3", "--chunk-width", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "bits: 100001\n");
}

#[test]
fn decode_reads_sequence_from_file() {
    let path = temp_path("sequence.txt");
    std::fs::write(&path, "1,2,8,3,2,5,3\n").unwrap();
    let out = bin()
        .args(["decode", "--sequence"])
        .arg(&path)
        .args(["--chunk-width", "3"])
        .output()
        .unwrap();
    std::fs::remove_file(&path).ok();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "bits: 100001\n");
}

#[test]
fn decode_rejects_illegal_derivations() {
    let out = bin()
        .args(["decode", "--sequence", "2,8,3", "--chunk-width", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("illegal derivation"));
}

#[test]
fn legacy_concat_warns_and_prints_digits() {
    let out = bin()
        .args([
            "encode",
            "--message",
            "hello",
            "--chunk-width",
            "3",
            "--legacy-concat",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stderr(&out).contains("ambiguous"));
    let digits = stdout(&out);
    assert!(digits.trim().chars().all(|c| c.is_ascii_digit()));
}

#[test]
fn encode_rejects_wide_characters_with_codec_exit() {
    let out = bin()
        .args(["encode", "--message", "héllo", "--chunk-width", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_widths_exit_two() {
    let out = bin()
        .args(["encode", "--message", "hi", "--chunk-width", "9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["encode", "--message", "hi"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "missing required flag");
}

#[test]
fn keygen_is_deterministic_per_seed() {
    let line = |seed: &str| {
        let out = bin()
            .args(["keygen", "--modulus", "65537", "--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        stdout(&out)
    };
    assert_eq!(line("9"), line("9"));
    assert_ne!(line("9"), line("10"));
    assert!(line("9").starts_with("p=65537 a="));
}

#[test]
fn keygen_falls_back_to_env_seed() {
    let out = bin()
        .args(["keygen", "--modulus", "65537"])
        .env("MULTILOC_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    let direct = bin()
        .args(["keygen", "--modulus", "65537", "--seed", "9"])
        .output()
        .unwrap();
    assert_eq!(stdout(&out), stdout(&direct));

    let out = bin().args(["keygen", "--modulus", "65537"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "no seed anywhere");
}

#[test]
fn run_happy_scenario_succeeds_with_seven_events() {
    let out = bin()
        .arg("run")
        .arg(scenarios_dir().join("happy.scn"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let wire_lines = text
        .lines()
        .filter(|l| l.contains("|secure:"))
        .count();
    assert_eq!(wire_lines, 7, "{}", text);
    assert!(text.contains("ACCEPTED delivered=\"hello\""));
    assert!(text.contains("expectation: ok"));
}

#[test]
fn run_output_is_byte_stable() {
    let run = || {
        let out = bin()
            .arg("run")
            .arg(scenarios_dir().join("replay.scn"))
            .output()
            .unwrap();
        assert!(out.status.success());
        stdout(&out)
    };
    assert_eq!(run(), run());
}

#[test]
fn run_seed_override_changes_the_transcript() {
    let run = |seed: &str| {
        let out = bin()
            .arg("run")
            .arg(scenarios_dir().join("happy.scn"))
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        stdout(&out)
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn run_all_bundled_examples() {
    for name in ["happy", "replay", "mitm", "eavesdrop", "dos", "three_stage"] {
        let out = bin().args(["run", "--example", name]).output().unwrap();
        assert!(out.status.success(), "example {} failed: {}", name, stderr(&out));
    }
    let out = bin().args(["run", "--example", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_suite_covers_the_directory() {
    let out = bin()
        .args(["run", "--suite"])
        .arg(scenarios_dir())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for name in ["happy.scn", "replay.scn", "mitm.scn", "eavesdrop.scn", "dos.scn"] {
        assert!(text.contains(&format!("== {} ==", name)), "{}", text);
    }
}

#[test]
fn run_writes_report_to_out_file() {
    let path = temp_path("report.txt");
    let out = bin()
        .arg("run")
        .arg(scenarios_dir().join("happy.scn"))
        .arg("--out")
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "");
    let report = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert!(report.contains("expectation: ok"));
}

#[test]
fn run_rejects_scenario_with_unknown_party() {
    let path = temp_path("bad.scn");
    std::fs::write(
        &path,
        "protocol = modified\nseed = 1\nmessage = hi\nadversary = dos target=ZZ flood=3\n",
    )
    .unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown party"));
}

#[test]
fn run_uses_env_seed_when_scenario_has_none() {
    let path = temp_path("seedless.scn");
    std::fs::write(&path, "protocol = modified\nmessage = hi\n").unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "seedless scenario must not run");
    let out = bin()
        .arg("run")
        .arg(&path)
        .env("MULTILOC_SEED", "5")
        .output()
        .unwrap();
    std::fs::remove_file(&path).ok();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("seed 5"));
}

#[test]
fn failed_expectation_exits_one() {
    let path = temp_path("fail.scn");
    // A happy run declared as a timeout must fail.
    std::fs::write(
        &path,
        "protocol = modified\nseed = 1\nmessage = hi\nexpect = timeout\n",
    )
    .unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(out.status.code(), Some(1));
}
