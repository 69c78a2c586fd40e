mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use common::*;
use reinpatch::adaptation::{stream_decide, StreamState};
use reinpatch::config::RunConfig;
use reinpatch::data::{SeriesTable, Split};
use reinpatch::eval::read_results_csv;
use reinpatch::persistence::save_patcher;
use reinpatch::pipeline::{build_trainer, evaluate_split, load_dataset, resume};
use reinpatch::policy::{boundary_logit, PolicyMode};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reinpatch"));
    c.env_remove("REINPATCH_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::toy();
    c.data.synth_length = 900;
    c.train.max_steps = 12;
    c.train.epochs = 1;
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_flat_toml().unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, cfg: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", s(cfg), "--out-dir", s(&out)];
    args.extend(extra);
    ok(&args);
    out
}

#[test]
fn train_is_fast_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let t0 = Instant::now();
    let a = train(dir.path(), &cfg, "a", &["--seed", "7"]);
    assert!(t0.elapsed().as_secs() < 60);
    let b = train(dir.path(), &cfg, "b", &["--seed", "7"]);
    for f in ["metrics.csv", "results.csv", "checkpoint.rpf", "config.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 13);

    let c = train(dir.path(), &cfg, "c", &["--seed", "8"]);
    assert_ne!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--set", "train.nope=1", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nope"));
}

#[test]
fn export_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = train(dir.path(), &cfg, "run", &[]);
    let patcher = dir.path().join("p.rpf");
    ok(&["export-patcher", "--checkpoint", s(&out.join("checkpoint.rpf")), "--out", s(&patcher)]);
    assert_eq!(&std::fs::read(&patcher).unwrap()[..4], b"RPF1");

    let missing = run(&["export-patcher", "--checkpoint", s(&dir.path().join("nope.rpf")), "--out", s(&patcher)]);
    assert_eq!(missing.status.code(), Some(3));

    // Frozen reuse must not touch the patcher file.
    let before = Sha256::digest(std::fs::read(&patcher).unwrap());
    let eval_dir = dir.path().join("frozen");
    ok(&["eval", "--config", s(&cfg), "--patcher", s(&patcher), "--frozen", "--out-dir", s(&eval_dir)]);
    assert_eq!(Sha256::digest(std::fs::read(&patcher).unwrap()), before);
    let rows = read_results_csv(std::fs::File::open(eval_dir.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows[0].method, "reinpatch-frozen");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--patcher", s(&patcher), "--out-dir", s(&eval_dir)]).status.code(), Some(2));

    let ck = dir.path().join("ck");
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint.rpf")), "--out-dir", s(&ck)]);
    let trained = read_results_csv(std::fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    let again = read_results_csv(std::fs::File::open(ck.join("results.csv")).unwrap()).unwrap();
    assert_eq!(trained[0].mse, again[0].mse);
}

#[test]
fn eval_static_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.patcher.kind = "static".into();
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("e");
    ok(&["eval", "--config", s(&path), "--seeds", "1,2,3", "--out-dir", s(&out)]);
    let rows = read_results_csv(std::fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(out.join("table.csv").exists() && out.join("table.txt").exists());

    cfg.train.seed = 2;
    let ds = load_dataset(&cfg.data).unwrap();
    let mut t = build_trainer(&cfg).unwrap();
    resume(&mut t, &cfg, &ds, |_| Ok(())).unwrap();
    let report = evaluate_split(&t, &cfg, &ds, Split::Test).unwrap();
    assert_eq!(rows[1].seed, 2);
    assert_eq!(rows[1].mse, report.mse);
    assert_eq!(rows[1].mae, report.mae);
}

fn series_file(dir: &Path, n: usize) -> PathBuf {
    let mut r = rng(4);
    let table = SeriesTable::from_channels(vec!["x".into(), "y".into()], vec![random_series(&mut r, n), random_series(&mut r, n)]).unwrap();
    let p = dir.join("series.csv");
    table.write_csv(std::fs::File::create(&p).unwrap()).unwrap();
    p
}

fn lines(out: &Output) -> Vec<Vec<usize>> {
    reinpatch::cli::read_boundary_file(&String::from_utf8(out.stdout.clone()).unwrap()).unwrap()
}

#[test]
fn patch_contextual_and_causal() {
    let dir = tempfile::tempdir().unwrap();
    let series = series_file(dir.path(), 96 * 3 + 10);
    let ctx = dir.path().join("ctx.rpf");
    save_patcher(&small_policy(1, PolicyMode::Contextual, 1, 96), &ctx).unwrap();

    let out = ok(&["patch", "--patcher", s(&ctx), "--series", s(&series), "--rate", "8"]);
    let l = lines(&out);
    assert_eq!(l.len(), 3);
    assert!(l.iter().all(|w| w.len() == 12 && w.iter().all(|&i| i < 96)));
    let auto = ok(&["patch", "--patcher", s(&ctx), "--series", s(&series), "--column", "y", "--auto"]);
    assert_eq!(lines(&auto).len(), 3);
    assert_eq!(run(&["patch", "--patcher", s(&ctx), "--series", s(&series), "--rate", "8", "--mode", "causal"]).status.code(), Some(2));

    let causal = small_policy(2, PolicyMode::Causal, 1, 32);
    let cpath = dir.path().join("causal.rpf");
    save_patcher(&causal, &cpath).unwrap();
    let out = ok(&[
        "patch", "--patcher", s(&cpath), "--series", s(&series), "--mode", "causal", "--rate", "4", "--stream-window", "16",
    ]);
    let got = lines(&out);

    let table = reinpatch::data::load_csv(&series).unwrap();
    let mut state = StreamState::new(4.0, 16).unwrap();
    let mut want = Vec::new();
    for w in table.channels[0].chunks_exact(32) {
        let logits = boundary_logit(&causal.forward(w).unwrap(), 1).unwrap();
        let mut idx = Vec::new();
        for (i, &l) in logits.iter().enumerate() {
            let (f, next) = stream_decide(state, l).unwrap();
            state = next;
            if f == 1 {
                idx.push(i);
            }
        }
        want.push(idx);
    }
    assert_eq!(got, want);
}

#[test]
fn plot_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let series = series_file(dir.path(), 200);
    let b = dir.path().join("b.txt");
    std::fs::write(&b, "3,10,63\n\n0\n").unwrap();
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    for p in [&p1, &p2] {
        ok(&["plot", "--series", s(&series), "--boundaries", s(&b), "--length", "64", "--out-dir", s(p)]);
    }
    for (w, count) in [(0, 3), (1, 0), (2, 1)] {
        let name = format!("window_{w:04}.svg");
        let a = std::fs::read_to_string(p1.join(&name)).unwrap();
        assert_eq!(a, std::fs::read_to_string(p2.join(&name)).unwrap());
        assert_eq!(a.matches("<polyline").count(), 1);
        assert_eq!(a.matches("<line ").count(), count);
    }
    // 70 lies outside a 64-step window
    std::fs::write(&b, "70\n").unwrap();
    assert_eq!(run(&["plot", "--series", s(&series), "--boundaries", s(&b), "--length", "64", "--out-dir", s(&p1)]).status.code(), Some(3));
}
