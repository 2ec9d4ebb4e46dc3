use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use mre_core::corpus::{gen_synthetic, read_records, render_records, SyntheticSpec};
use mre_core::Variant;

fn mre(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mre"))
        .args(args)
        .current_dir(dir)
        .env_remove("MRE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = mre(args, dir);
    assert!(
        out.status.success(),
        "mre {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.cfg");
    fs::write(&path, format!("d_model=16\nff=16\nheads=2\n{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn help_lists_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&["train", "--help"], dir.path());
    for v in Variant::ALL {
        assert!(help.contains(v.as_str()), "{v} missing from help:\n{help}");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = mre(&["train", "--corpus", "missing.txt", "--out", "run"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    ok(&["gen-data", "--out", "c.txt", "--paragraphs", "4"], d);
    let out = mre(
        &["train", "--corpus", "c.txt", "--out", "run", "--variant", "posemb-final", "--mode", "one-pass"],
        d,
    );
    assert_eq!(code(&out), 2);
    assert!(!d.join("run").exists());

    assert_eq!(code(&mre(&["train", "--corpus", "c.txt", "--out", "r", "--variant", "bert"], d)), 2);
    assert_eq!(code(&mre(&["gen-data", "--out", "x.txt", "--labels", "0"], d)), 2);
    fs::write(d.join("bad.cfg"), "depth=3\n").unwrap();
    assert_eq!(code(&mre(&["train", "--corpus", "c.txt", "--out", "r", "--config", "bad.cfg"], d)), 2);
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("broken.txt"), "#mre-corpus v1\nnot a record\n").unwrap();
    assert_eq!(code(&mre(&["train", "--corpus", "broken.txt", "--out", "r"], d)), 1);
}

#[test]
fn gen_data_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "empty.txt", "--paragraphs", "0"], d);
    assert!(read_records(d.join("empty.txt")).unwrap().is_empty());

    let args = ["--paragraphs", "30", "--mentions", "5", "--labels", "6", "--seed", "11"];
    ok(&[&["gen-data", "--out", "a.txt"], &args[..]].concat(), d);
    ok(&[&["gen-data", "--out", "b.txt"], &args[..]].concat(), d);
    let a = fs::read_to_string(d.join("a.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.txt")).unwrap());

    let records = read_records(d.join("a.txt")).unwrap();
    assert_eq!(render_records(&records), a);
    let direct = gen_synthetic(&SyntheticSpec {
        paragraphs: 30,
        mentions: 5,
        labels: 6,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(records, direct);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "flag.txt", "--paragraphs", "5", "--seed", "123"], d);
    let out = Command::new(env!("CARGO_BIN_EXE_mre"))
        .args(["gen-data", "--out", "env.txt", "--paragraphs", "5"])
        .current_dir(d)
        .env("MRE_SEED", "123")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(&["gen-data", "--out", "default.txt", "--paragraphs", "5"], d);
    let read = |f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read("flag.txt"), read("env.txt"));
    assert_ne!(read("flag.txt"), read("default.txt"));
}

#[test]
fn inspect_attention_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let single = ok(
        &["inspect-attention", "--length", "4", "--mention", "1:2", "--k", "1", "--layers", "1", "--heads", "1"],
        dir.path(),
    );
    assert_eq!(single, fs::read_to_string(golden.join("single_mention_k1.txt")).unwrap());
    let two = ok(
        &[
            "inspect-attention", "--length", "4", "--mention", "1:2", "--mention", "2:3", "--k", "1",
            "--layers", "1", "--heads", "2",
        ],
        dir.path(),
    );
    assert_eq!(two, fs::read_to_string(golden.join("two_mentions_k1.txt")).unwrap());
}

#[test]
fn inspect_attention_reads_corpus_paragraphs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "c.txt", "--paragraphs", "3"], d);
    let p = &read_records(d.join("c.txt")).unwrap()[2];
    let grid = ok(&["inspect-attention", "--corpus", "c.txt", "--index", "2", "--layers", "1", "--heads", "1"], d);
    assert_eq!(grid.lines().count(), p.len());
    let restricted = ok(
        &["inspect-attention", "--corpus", "c.txt", "--index", "2", "--pair", "0,1", "--layers", "1", "--heads", "1"],
        d,
    );
    let zeros = |s: &str| s.matches('Z').count();
    assert!(zeros(&restricted) > zeros(&grid));
    assert_eq!(code(&mre(&["inspect-attention", "--corpus", "c.txt", "--index", "9"], d)), 2);
}

#[test]
fn overfit_run_scores_perfectly_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "c.txt", "--paragraphs", "4", "--seed", "3"], d);
    let cfg = small_config(d, "epochs=150\nlr=1e-2\nbatch=4\n");
    ok(&["train", "--corpus", "c.txt", "--out", "run", "--config", &cfg], d);
    for f in ["model.ckpt", "manifest.txt", "loss.csv"] {
        assert!(d.join("run").join(f).is_file(), "{f} missing");
    }

    ok(&["eval", "--corpus", "c.txt", "--checkpoint", "run/model.ckpt", "--out", "ev"], d);
    let metrics = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l == "micro_f1,all,1"), "{metrics}");
    assert!(d.join("ev/predictions.tsv").is_file() && d.join("ev/manifest.txt").is_file());

    // Rerunning from the manifest reproduces the checkpoint, whatever the thread count.
    ok(
        &["train", "--corpus", "c.txt", "--out", "again", "--config", "run/manifest.txt", "--threads", "2"],
        d,
    );
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("again/model.ckpt")).unwrap());

    ok(&["eval", "--corpus", "c.txt", "--checkpoint", "run/model.ckpt", "--out", "ev2", "--config", "run/manifest.txt"], d);
    assert_eq!(metrics, fs::read_to_string(d.join("ev2/metrics.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("ev/predictions.tsv")).unwrap(),
        fs::read(d.join("ev2/predictions.tsv")).unwrap()
    );
}

#[test]
fn eval_refuses_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "c.txt", "--paragraphs", "4"], d);
    let cfg = small_config(d, "epochs=1\n");
    ok(&["train", "--corpus", "c.txt", "--out", "run", "--config", &cfg], d);

    fs::write(d.join("k5.cfg"), "k=5\n").unwrap();
    let out = mre(&["eval", "--corpus", "c.txt", "--checkpoint", "run/model.ckpt", "--out", "ev", "--config", "k5.cfg"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing"));
    assert!(!d.join("ev").exists());

    let manifest = fs::read_to_string(d.join("run/manifest.txt")).unwrap();
    let tampered: String = manifest
        .lines()
        .map(|l| if l.starts_with("# config_sha256=") { "# config_sha256=00" } else { l })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(d.join("tampered.txt"), tampered).unwrap();
    let out = mre(
        &["eval", "--corpus", "c.txt", "--checkpoint", "run/model.ckpt", "--out", "ev", "--config", "tampered.txt"],
        d,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn bench_emits_one_row_per_requested_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "c.txt", "--paragraphs", "3"], d);
    let cfg = small_config(d, "");
    let table = ok(
        &["bench", "--corpus", "c.txt", "--out", "b", "--modes", "one-pass,per-pair", "--reps", "1", "--config", &cfg],
        d,
    );
    let lines = fs::read_to_string(d.join("b/bench.csv")).unwrap();
    for mode in ["one-pass", "per-pair"] {
        assert!(lines.contains(&format!("bench,{mode},relations_per_second,")));
        assert!(table.lines().any(|l| l.starts_with(mode)));
    }
    assert!(!lines.contains("posemb-final"));
    assert!(d.join("b/manifest.txt").is_file());
    assert_eq!(code(&mre(&["bench", "--corpus", "c.txt", "--out", "b", "--modes", "two-pass"], d)), 2);
}

#[test]
fn grad_check_reports_corrupted_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), "d_model=8\nff=8\n").unwrap();
    let report = ok(&["grad-check", "--config", "tiny.cfg"], d);
    assert!(report.contains("0 failed"), "{report}");
    let out = mre(&["grad-check", "--config", "tiny.cfg", "--corrupt", "rel.key"], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rel.key"));
    assert_eq!(code(&mre(&["grad-check", "--corrupt", "nothing"], d)), 2);
}

#[test]
fn truncate_keeps_relation_windows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--out", "c.txt", "--paragraphs", "20", "--min-words", "16", "--max-words", "20"], d);
    ok(&["truncate", "--corpus", "c.txt", "--out", "t.txt", "--radius", "1"], d);
    let before = read_records(d.join("c.txt")).unwrap();
    let after = read_records(d.join("t.txt")).unwrap();
    assert!(!after.is_empty() && after.len() <= before.len());
    let tokens = |c: &[mre_core::corpus::AnnotatedParagraph]| c.iter().map(|p| p.len()).sum::<usize>();
    assert!(tokens(&after) < tokens(&before));
    assert!(after.iter().all(|p| !p.relations.is_empty()));
}

#[test]
fn default_pipeline_finishes_within_five_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    ok(&["gen-data", "--out", "train.txt"], d);
    ok(&["gen-data", "--out", "test.txt", "--paragraphs", "200", "--seed", "99"], d);
    ok(&["train", "--corpus", "train.txt", "--out", "run"], d);
    let table = ok(&["eval", "--corpus", "test.txt", "--checkpoint", "run/model.ckpt", "--out", "ev"], d);
    let secs = start.elapsed().as_secs_f64();
    println!("{table}pipeline took {secs:.1}s");
    assert!(secs < 300.0);
}
