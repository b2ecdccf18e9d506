mod common;

use std::process::{Command, Output};

use common::{fixture, outline};
use opmask::frontend::build_operators;

fn opmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opmask")).args(args).output().unwrap()
}

fn path(name: &str) -> String {
    fixture(name).to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn rex_exit_codes() {
    let v = path("chars12.vocab");
    let ok = opmask(&["rex", r"-?\d+", "--vocab", &v]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("IfElse"));

    let unsupported = opmask(&["rex", r"(a)\1", "--vocab", &v]);
    assert_eq!(unsupported.status.code(), Some(2));

    let ambiguous = opmask(&["rex", "a*a", "--vocab", &v]);
    assert_eq!(ambiguous.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&ambiguous.stderr).contains("overlap"));
}

#[test]
fn missing_input_is_exit_2() {
    let o = opmask(&["build", "--vocab", "/nonexistent.vocab", "--format", "\"a\""]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_dump_matches_library() {
    let (v, f, doc) = outline();
    let expected = build_operators(&doc.parse(&f).unwrap(), &f, &v).unwrap().dump();
    let o = opmask(&[
        "build",
        "--vocab",
        &path("outline.vocab"),
        "--structure",
        &path("outline.wgram"),
        "--request",
        &path("outline.request.json"),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), expected);
}

#[test]
fn compiled_factory_dump_reuses() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("outline.json");
    let dump = dump.to_str().unwrap();
    let c = opmask(&[
        "compile",
        "--templates",
        &path("outline.wgram"),
        "--vocab",
        &path("outline.vocab"),
        "-o",
        dump,
    ]);
    assert_eq!(c.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_slice(&c.stdout).unwrap();
    assert!(stats["structures"].as_u64().unwrap() > 0);

    let build = |structure: &str| {
        let o = opmask(&[
            "build",
            "--vocab",
            &path("outline.vocab"),
            "--structure",
            structure,
            "--request",
            &path("outline.request.json"),
        ]);
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
    };
    assert_eq!(build(dump), build(&path("outline.wgram")));
}

#[test]
fn request_only_prints_canonical_expression() {
    let o = opmask(&[
        "build",
        "--vocab",
        &path("outline.vocab"),
        "--structure",
        &path("outline.wgram"),
        "--format",
        "SECTION(title={t})",
        "--arg",
        "t=Intro",
        "--request-only",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), r#"SECTION(title="Intro")"#);
}

fn replay(vocab: &str, request: &str, stream: &str, extra: &[&str]) -> Output {
    let mut args = vec!["replay", "--vocab", vocab, "--request", request, "--stream", stream];
    args.extend_from_slice(extra);
    opmask(&args)
}

#[test]
fn replay_accepts_recorded_streams() {
    for (vocab, request, stream) in [
        ("digits.vocab", "decimal.request.json", "decimal.stream"),
        ("outline.vocab", "outline.request.json", "outline.stream"),
    ] {
        let mut extra = vec!["--json"];
        let structure = path("outline.wgram");
        if vocab == "outline.vocab" {
            extra.extend(["--structure", &structure]);
        }
        let o = replay(&path(vocab), &path(request), &path(stream), &extra);
        assert_eq!(o.status.code(), Some(0), "{stream}");
        let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(r["verdict"], "accepted");
    }
}

#[test]
fn replay_reports_first_violation() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("decimal.stream")).unwrap();
    let mut ids: Vec<&str> = text.lines().collect();
    // "." right before eos leaves a dangling fraction
    let n = ids.len();
    ids.insert(n - 1, "10");
    let bad = dir.path().join("bad.stream");
    std::fs::write(&bad, ids.join("\n")).unwrap();

    let o = replay(&path("digits.vocab"), &path("decimal.request.json"), bad.to_str().unwrap(), &["--json"]);
    assert_eq!(o.status.code(), Some(1));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["verdict"], "rejected");
    assert_eq!(r["first_violation"]["position"], n as u64);
    assert_eq!(r["first_violation"]["token"], 11);
}

#[test]
fn replay_masks_are_packed_hex() {
    let o = replay(
        &path("digits.vocab"),
        &path("decimal.request.json"),
        &path("decimal.stream"),
        &["--json", "--masks"],
    );
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let masks = r["masks"].as_array().unwrap();
    assert_eq!(masks.len(), r["trace"].as_array().unwrap().len());
    // 12 tokens -> 2 bytes; the first position allows digits only
    assert_eq!(masks[0], "ff03");
}

#[test]
fn run_is_deterministic() {
    let args = [
        "run",
        "--vocab",
        &path("outline.vocab"),
        "--structure",
        &path("outline.wgram"),
        "--request",
        &path("outline.request.json"),
        "--seed",
        "3",
        "--max-tokens",
        "20000",
        "--json",
    ];
    let a: serde_json::Value = serde_json::from_slice(&opmask(&args).stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&opmask(&args).stdout).unwrap();
    assert_eq!(a["tokens"], b["tokens"]);
    assert!(a["report"]["finished"].as_bool().unwrap());
    let text = a["text"].as_str().unwrap();
    assert!(common::outline_skeleton().is_match(text), "{text}");
}

#[test]
fn run_exits_1_when_out_of_tokens() {
    let o = opmask(&[
        "run",
        "--vocab",
        &path("outline.vocab"),
        "--structure",
        &path("outline.wgram"),
        "--request",
        &path("outline.request.json"),
        "--max-tokens",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_json_schema() {
    let o = opmask(&[
        "bench",
        "--vocab",
        &path("digits.vocab"),
        "--request",
        &path("decimal.request.json"),
        "--reps",
        "4",
        "--threads",
        "2",
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["version"], 1);
    assert_eq!(r["repetitions"], 4);
    assert_eq!(r["threads"], 2);
    assert_eq!(r["runs"].as_array().unwrap().len(), 4);
    for stage in [
        "grammar_compilation_ms",
        "state_tracking_ms",
        "mask_creation_ms",
        "ttft_overhead_ms",
        "tpot_overhead_ms",
    ] {
        let s = &r["stages"][stage];
        let (p50, p95) = (s["p50"].as_f64().unwrap(), s["p95"].as_f64().unwrap());
        assert!(p50 >= 0.0 && p50 <= p95, "{stage}");
        assert!(s["mean"].as_f64().unwrap() >= 0.0);
    }
}
