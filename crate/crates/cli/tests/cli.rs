use std::process::Command;

fn ragcrawl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ragcrawl"))
}

fn error_record(out: &std::process::Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("json error record");
    serde_json::from_str(line).unwrap()
}

#[test]
fn bad_override_exits_2() {
    let out = ragcrawl()
        .args(["--mode", "theory-check", "--set", "no_such_key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["exit_code"], 2);
}

#[test]
fn invalid_budget_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ragcrawl()
        .args(["--mode", "attack", "--set", "budget=0", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_corpus_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ragcrawl()
        .args(["--mode", "attack", "--corpus", "/nonexistent/corpus.jsonl", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!error_record(&out)["message"].as_str().unwrap().is_empty());
}

#[test]
fn seeds_fan_out_with_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let st = ragcrawl()
        .args([
            "--mode",
            "attack",
            "--seed",
            "4,9",
            "--set",
            "budget=15",
            "--set",
            "corpus.n_entities=30",
            "--out",
        ])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(st.success());
    for seed in [4, 9] {
        let dir = tmp.path().join(format!("seed_{seed}"));
        for f in [
            "trace.jsonl",
            "coverage.csv",
            "kg.json",
            "scheduler.csv",
            "queries.jsonl",
        ] {
            assert!(dir.join(f).is_file(), "missing seed_{seed}/{f}");
        }
    }
    let summary = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "seed,policy,rounds,converged,coverage");
    assert_eq!(lines.len(), 4);
}

#[test]
fn theory_check_prints_pass_lines() {
    let out = ragcrawl().args(["--mode", "theory-check"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{stdout}");
}
