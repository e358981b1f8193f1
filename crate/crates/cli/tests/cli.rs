use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4
model.hidden = [12, 12]
model.embed_dim = 8
train.steps = 12
train.batch = 32
train.snapshot_every = 6
train.log_every = 3
train.lpf_spot_every = 0
train.eval_batch = 128
optim.sam.rho = 0.05

[eval]
samples = 100
target_samples = 100
projections = 8
respacings = [5]
exposure_respacing = 5
exposure_samples = 50
radii = [0.0, 0.1]
directions = 2
surface_resolution = 3

[eval.lpf]
samples = 2
batch = 128
"#;

fn flatdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatdiff")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_sweep_report_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = tmp.path().join("run");
    let o = flatdiff(&["train", "--config", &cfg, "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("SAM seed 4"));
    for f in ["final.ckpt", "ema.ckpt", "swa.ckpt", "metrics.csv", "summary.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let o = flatdiff(&["eval", "--run", s(&run), "--metrics", "loss,lpf"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(run.join("reports/loss.json").exists());
    assert!(run.join("reports/lpf.json").exists());

    for sub in ["quantize-sweep", "exposure", "flatness", "surface", "attack"] {
        let o = flatdiff(&[sub, "--run", s(&run)]);
        assert_eq!(code(&o), 0, "{sub}: {}", text(&o));
    }
    let sweep = std::fs::read_to_string(run.join("reports/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 3);

    let out = tmp.path().join("table");
    let o = flatdiff(&["report", "--out", s(&out), s(&run), s(&run)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let merged = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 3 * 3);
    assert!(text(&o).contains("SAM+EMA"));
}

#[test]
fn report_lists_missing_files_and_still_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = flatdiff(&["report", "--out", s(tmp.path()), s(&tmp.path().join("nope"))]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("missing report files"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&flatdiff(&[])), 2);
    assert_eq!(code(&flatdiff(&["bogus"])), 2);

    let bad = write_config(tmp.path(), "optim.sam.rhoo = 0.1\n");
    let o = flatdiff(&["train", "--config", &bad, "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("rhoo"));

    let cfg = write_config(tmp.path(), "train.steps = 0\n");
    let run = tmp.path().join("run0");
    assert_eq!(code(&flatdiff(&["train", "--config", &cfg, "--out", s(&run)])), 0);
    let o = flatdiff(&["eval", "--run", s(&run), "--metrics", "fid"]);
    assert_eq!(code(&o), 2);
    let t = text(&o);
    assert!(t.contains("unknown metric `fid`") && t.contains("exposure") && t.contains("posthoc-ema"), "{t}");
}

#[test]
fn numeric_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.steps = 5\ntrain.batch = 16\noptim.lr = 1e39\n");
    let run = tmp.path().join("run");
    let o = flatdiff(&["train", "--config", &cfg, "--out", s(&run)]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(run.join("last.ckpt").exists());
}

#[test]
fn theory_verify_passes_and_flags_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let quick = tmp.path().join("quick.toml");
    std::fs::write(
        &quick,
        "loss_instances = 10\ndensity_instances = 3\ngrid = 200\nkl_samples = 200000\n\
         bound_samples = 50\nsign_instances = 3\nsign_samples = 50000\n",
    )
    .unwrap();
    let out = tmp.path().join("theory");
    let o = flatdiff(&["theory-verify", "--config", s(&quick), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("PASS"));
    assert!(out.join("theory.json").exists());

    // A 100-sample Monte-Carlo KL cannot meet the 2% tolerance.
    let coarse = tmp.path().join("coarse.toml");
    std::fs::write(
        &coarse,
        "loss_instances = 2\ndensity_instances = 1\ngrid = 100\nkl_samples = 100\n\
         bound_samples = 10\nsign_instances = 1\nsign_samples = 1000\n",
    )
    .unwrap();
    let o = flatdiff(&["theory-verify", "--config", s(&coarse)]);
    assert_eq!(code(&o), 4, "{}", text(&o));
    assert!(text(&o).contains("FAIL"));
}
