use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use physcorr::fixtures::{files, write_pipeline_fixture, PipelineFixtureSpec};
use physcorr::io::{parse_artifact, write_artifact, PreferenceTable, ScoreTable, VerdictTable};

fn physcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physcorr"))
        .args(args)
        .env("PHYSCORR_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run_ok(cmd: &str, config: &Path, extra: &[&str]) -> String {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend(extra);
    let out = physcorr(&args);
    assert!(
        out.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(prompts: usize, degenerate: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = PipelineFixtureSpec {
        prompts,
        degenerate_prompts: degenerate,
        ..PipelineFixtureSpec::default()
    };
    write_pipeline_fixture(dir.path(), &spec).unwrap();
    let cfg = dir.path().join(files::CONFIG);
    (dir, cfg)
}

fn summary(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().find_map(|l| l.strip_prefix("summary ")).expect("summary line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn score_small_fixture() {
    let (dir, cfg) = fixture(3, 0);
    let out = run_ok("score", &cfg, &[]);
    assert_eq!(summary(&out)["count"], 12);
    let table = parse_artifact::<ScoreTable>(dir.path().join("out/scores.jsonl")).unwrap();
    assert_eq!(table.body.rows.len(), 12);
    assert!(dir.path().join("out/score.resolved.toml").exists());
    let first = std::fs::read(dir.path().join("out/scores.jsonl")).unwrap();
    run_ok("score", &cfg, &["--jobs", "4"]);
    assert_eq!(std::fs::read(dir.path().join("out/scores.jsonl")).unwrap(), first);
}

#[test]
fn missing_verdict_names_the_video() {
    let (dir, cfg) = fixture(3, 0);
    let path = dir.path().join(files::VERDICTS);
    let mut cache = parse_artifact::<VerdictTable>(&path).unwrap();
    let dropped = cache.body.records.remove(5).video_id;
    write_artifact(&cache, &path).unwrap();
    let out = physcorr(&["score", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&dropped));
}

#[test]
fn exit_codes_separate_error_kinds() {
    let (dir, cfg) = fixture(3, 0);
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(physcorr(&["score", "--config", cfg_s, "--tau", "2"]).status.code(), Some(2));
    assert_eq!(physcorr(&["reweight", "--config", cfg_s, "--beta", "peak"]).status.code(), Some(2));
    assert_eq!(physcorr(&["score", "--config", "/nonexistent.toml"]).status.code(), Some(2));
    // later stages need the earlier outputs
    assert_eq!(physcorr(&["select-pairs", "--config", cfg_s]).status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(&cfg).unwrap() + "\n[mixer]\nlearning_rate = 1000.0\n";
    std::fs::write(&bad, text).unwrap();
    let out = physcorr(&["fit-rm", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fit_rm_recovers_generating_weight() {
    let (dir, cfg) = fixture(20, 0);
    let out = run_ok("fit-rm", &cfg, &[]);
    let w = summary(&out)["subject_weight"].as_f64().unwrap();
    assert!((w - 0.7).abs() < 0.01, "{w}");
    for f in ["subject_stats.txt", "mixer.txt", "fit_trace.jsonl"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn overrides_win_and_are_snapshotted() {
    let (dir, cfg) = fixture(6, 0);
    run_ok("score", &cfg, &[]);
    run_ok("select-pairs", &cfg, &[]);
    let out = run_ok("reweight", &cfg, &["--alpha", "0", "--beta", "0.58"]);
    let s = summary(&out);
    assert_eq!(s["alpha"], 0.0);
    assert_eq!(s["beta"], 0.58);
    let weighted = parse_artifact::<PreferenceTable>(dir.path().join("out/weighted_preferences.jsonl")).unwrap();
    assert!(weighted.body.pairs.iter().all(|p| p.weight == 1.0));
    assert_eq!(weighted.header.meta["alpha"], "0");
    assert_eq!(weighted.header.meta["beta"], "0.58");
    assert_eq!(weighted.header.meta["bin_width"], "0.01");
    let snap = std::fs::read_to_string(dir.path().join("out/reweight.resolved.toml")).unwrap();
    assert!(snap.contains("alpha = 0.0"), "{snap}");
    assert!(snap.contains("beta = 0.58"), "{snap}");
}

#[test]
fn wrong_group_size_is_rejected() {
    let (_dir, cfg) = fixture(4, 0);
    run_ok("score", &cfg, &[]);
    let out = physcorr(&["select-pairs", "--config", cfg.to_str().unwrap(), "--n-videos", "5"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_chain_with_degenerate_groups() {
    let (dir, cfg) = fixture(12, 2);
    run_ok("score", &cfg, &[]);
    let out = run_ok("select-pairs", &cfg, &[]);
    assert_eq!(summary(&out)["pairs"], 10);
    assert_eq!(out.matches("degenerate group").count(), 2);
    run_ok("reweight", &cfg, &[]);
    let out = run_ok("train-toy", &cfg, &["--seed", "3"]);
    let s = summary(&out);
    assert_eq!(s["baseline_matches_plain_dpo"], true);
    assert!(s["weighted_final_loss"].as_f64() < s["weighted_initial_loss"].as_f64());
    let report = run_ok("report", &cfg, &[]);
    assert!(report.contains("preference pairs: 10"));
    let written = std::fs::read_to_string(dir.path().join("out/train_report.txt")).unwrap();
    assert!(written.contains("baseline_matches_plain_dpo true"));
    let trace = std::fs::read_to_string(dir.path().join("out/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 500 + 1);
}

#[test]
fn gen_fixture_writes_runnable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = physcorr(&[
        "gen-fixture",
        "--out",
        dir.path().to_str().unwrap(),
        "--prompts",
        "5",
        "--text-embeddings",
    ]);
    assert!(out.status.success());
    run_ok("score", &dir.path().join(files::CONFIG), &[]);
}
