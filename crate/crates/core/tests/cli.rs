use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use wsigrade::cli::run;
use wsigrade::grading::{EvalReport, SlideGrade, Verdict};

fn wsigrade(data_dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["wsigrade", "--data-dir", data_dir.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(argv)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn assert_same_trees(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in a {
        assert!(bytes == &b[path], "{} differs", path.display());
    }
}

#[test]
fn synth_twice_gives_identical_trees() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(wsigrade(d.path(), &["synth", "--per-class", "1", "--seed", "7", "--size", "512", "--out", "c"]), 0);
    }
    let ta = tree(a.path());
    assert!(ta.keys().any(|p| p.ends_with("dataset.json")));
    assert!(ta.keys().any(|p| p.ends_with("provenance.json")));
    assert_same_trees(&ta, &tree(b.path()));
}

fn pipeline(dir: &Path, jobs: &str) {
    let steps: [&[&str]; 7] = [
        &["synth", "--per-class", "1", "--seed", "3", "--size", "512", "--out", "c"],
        &["mask", "c/train/g3_000"],
        &["decompose", "c/train/g3_000", "--out", "h.png"],
        &["dataset", "--corpus", "c", "--patches", "12", "--seed", "5", "--out", "d.bin"],
        &["train", "--data", "d.bin", "--out", "w.bin", "--iters", "6", "--batch", "8", "--seed", "5"],
        &["eval", "--corpus", "c", "--weights", "w.bin", "--patches", "16", "--seed", "5", "--out", "r.json"],
        &["grade", "c/eval/m34_000", "--weights", "w.bin", "--patches", "16", "--out", "g.json", "--overlay", "g.png"],
    ];
    for step in steps {
        let mut args = vec!["--jobs", jobs];
        args.extend_from_slice(step);
        assert_eq!(wsigrade(dir, &args), 0, "{step:?}");
    }
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_thread_counts() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "2");
    pipeline(b.path(), "2");
    pipeline(c.path(), "1");
    let ta = tree(a.path());
    for needed in ["w.bin", "r.json", "d.bin", "h.png", "c/train/g3_000/tumor_mask.png", "w.bin.provenance.json"] {
        assert!(ta.contains_key(Path::new(needed)), "{needed} missing");
    }
    assert_same_trees(&ta, &tree(b.path()));
    assert_same_trees(&ta, &tree(c.path()));
    let report = EvalReport::load(&a.path().join("r.json")).unwrap();
    assert_eq!(report.slides, 2);
}

#[test]
fn oracle_grades_a_three_four_slide_as_three_four() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(wsigrade(d, &["synth", "--class", "3+4", "--seed", "11", "--out", "s"]), 0);
    assert_eq!(wsigrade(d, &["grade", "s", "--oracle", "--patches", "200", "--out", "g.json"]), 0);
    let grade: SlideGrade = serde_json::from_str(&fs::read_to_string(d.join("g.json")).unwrap()).unwrap();
    assert_eq!(grade.verdict, Verdict::ThreeFour);
    assert!(fs::read_to_string(d.join("g.json")).unwrap().contains("\"3+4*\""));
}

#[test]
fn pattern_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(wsigrade(d, &["synth", "--class", "4+4", "--cribriform", "--seed", "5", "--out", "s"]), 0);
    assert_eq!(wsigrade(d, &["cribriform", "s", "--out", "c.json", "--overlay", "c.png"]), 0);
    assert_eq!(wsigrade(d, &["nucleoli", "s", "--out", "n.json"]), 0);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("c.json")).unwrap()).unwrap();
    assert!(!c["regions"].as_array().unwrap().is_empty());
    let n: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("n.json")).unwrap()).unwrap();
    assert!(n["prominent"].as_u64().unwrap() > 0);
    assert!(d.join("c.png").exists());
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(["wsigrade", "gradcheck"]), 0);
}

#[test]
fn usage_errors_exit_2_and_pipeline_errors_exit_1() {
    assert_eq!(run(["wsigrade", "frobnicate"]), 2);
    assert_eq!(run(["wsigrade", "mask", "x", "--bogus"]), 2);
    assert_eq!(run(["wsigrade", "grade", "x"]), 2);
    assert_eq!(run(["wsigrade", "train", "--data", "/nonexistent/d.bin", "--out", "/tmp/w.bin"]), 1);
    assert_eq!(run(["wsigrade", "--help"]), 0);
}

#[test]
fn binary_reports_single_line_errors_and_reads_data_dir_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_wsigrade");
    let out = Command::new(bin)
        .env("WSIGRADE_DATA_DIR", dir.path())
        .args(["synth", "--class", "3+3", "--size", "256", "--out", "s"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("s/manifest.json").exists());

    let out = Command::new(bin).args(["mask", "/nonexistent/slide"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "));
}
