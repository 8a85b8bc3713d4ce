use std::process::Command;

use chips_core::pacs::{Corpus, MANIFEST_FILE};

fn chips(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chips")).args(args).output().unwrap()
}

#[test]
fn corpus_command_builds_default_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let r = chips(&["corpus", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(printed.as_array().unwrap().len(), 3);
    assert!(out.join(MANIFEST_FILE).is_file());
    let corpus = Corpus::load(&out).unwrap();
    assert_eq!(corpus.studies().len(), 3);
    assert!(corpus
        .studies()
        .iter()
        .all(|s| s.series.len() == 2 && s.instance_count() == 6));
    assert!(out.join("study0001/series01/0001.dcm").is_file());
}

#[test]
fn corpus_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = chips(&[
        "corpus",
        "--out",
        dir.path().join("a").to_str().unwrap(),
        "--seed",
        "11",
    ]);
    let b = chips(&[
        "corpus",
        "--out",
        dir.path().join("b").to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_eq!(a.stdout, b.stdout);
    let c = chips(&[
        "corpus",
        "--out",
        dir.path().join("c").to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn bad_arguments_fail() {
    assert!(!chips(&["core", "meta"]).status.success());
    let r = chips(&["core", "--token", "t", "--url", "http://127.0.0.1:1", "feeds"]);
    assert!(!r.status.success());
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
}
