//! End-to-end checks of the installed binary: exit codes, not library calls.
//!
//! The exit contract is part of the interface: 0 success, 1 usage, 2
//! validation, 3 transport, 4 replay mismatch. Scripts branch on these.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deliberata"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn deliberata")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for sub in [
        "ingest",
        "deliberate",
        "annotate",
        "analyze",
        "fit",
        "simulate",
        "replay",
        "report",
    ] {
        assert!(text.contains(sub), "--help should mention {sub}\n{text}");
    }
}

#[test]
fn unknown_flag_exits_one() {
    let out = run(&["replay", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_subcommand_exits_one() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_fixture_dir_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["replay", "--fixtures", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("no fixtures"));
}

#[test]
fn builtin_replay_exits_zero() {
    let out = run(&["replay"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("replay half-sister-visits: ok"), "{text}");
    assert!(text.contains("replay disneyland-dealbreaker: ok"), "{text}");
}

#[test]
fn tampered_fixture_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let raw = include_str!("../fixtures/synchronous_pair.json");
    let mut doc: serde_json::Value = serde_json::from_str(raw).unwrap();
    doc["expected"]["outcome"]["verdict"] = "NTA".into();
    std::fs::write(
        dir.path().join("tampered.json"),
        serde_json::to_string_pretty(&doc).unwrap(),
    )
    .unwrap();

    let out = run(&["replay", "--fixtures", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("MISMATCH"));
    assert!(stderr(&out).contains("1 of 1 fixtures mismatched"));
}

fn submission(id: &str, body: &str, comments: &[(&str, &str)]) -> serde_json::Value {
    serde_json::json!({
        "id": id,
        "author": "poster",
        "title": format!("AITA test case {id}"),
        "body": body,
        "created_at": 1_700_000_000,
        "comments": comments
            .iter()
            .map(|(cid, cbody)| serde_json::json!({
                "id": cid,
                "body": cbody,
                "is_top_level": true,
            }))
            .collect::<Vec<_>>(),
    })
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let mut text = String::new();
    for line in lines {
        text.push_str(&serde_json::to_string(line).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn ingest_keeps_long_posts_and_drops_short_ones() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dump.jsonl");
    let output = dir.path().join("corpus.jsonl");
    let long_body = "My roommate and I have argued about the kitchen for a month now. "
        .repeat(20);
    write_lines(
        &input,
        &[
            submission(
                "keepme",
                &long_body,
                &[("c1", "YTA. You agreed to the chore chart."), ("c2", "NTA at all, they broke the deal first.")],
            ),
            submission("short", "Too short to qualify.", &[("c3", "NTA.")]),
        ],
    );

    let out = run(&[
        "ingest",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--top-k",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("2 submissions"), "{text}");
    assert!(text.contains("1 kept"), "{text}");
    assert!(text.contains("wrote 1 ranked posts"), "{text}");

    let corpus = std::fs::read_to_string(&output).unwrap();
    let lines: Vec<&str> = corpus.lines().collect();
    assert_eq!(lines.len(), 1);
    let post: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(post["dilemma"]["id"], "keepme");
    assert_eq!(post["verdict_counts"]["YTA"], 1);
    assert_eq!(post["verdict_counts"]["NTA"], 1);
}

#[test]
fn ingest_rejects_zero_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dump.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = run(&[
        "ingest",
        "--input",
        input.to_str().unwrap(),
        "--output",
        dir.path().join("corpus.jsonl").to_str().unwrap(),
        "--top-k",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--top-k"));
}
