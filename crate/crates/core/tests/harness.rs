use std::path::Path;

use flatdiff::diffusion::DatasetKind;
use flatdiff::harness::checkpoint::Checkpoint;
use flatdiff::harness::train::{files, snapshot_path};
use flatdiff::harness::{evaluate, read_metrics, train, EvalInputs, Metric, RunConfig, RunLock, TrainOptions};
use flatdiff::Error;

fn small(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.data.kind = DatasetKind::GaussianMixture8;
    cfg.model.hidden = vec![16, 16];
    cfg.model.embed_dim = 8;
    cfg.train.steps = steps;
    cfg.train.batch = 32;
    cfg.train.snapshot_every = 10;
    cfg.train.log_every = 5;
    cfg.train.lpf_spot_every = 10;
    cfg.train.lpf_spot_samples = 2;
    cfg.train.eval_batch = 256;
    cfg.optim.sam.rho = 0.05;
    cfg.optim.ip.strength = 0.1;
    cfg.eval.samples = 200;
    cfg.eval.target_samples = 200;
    cfg.eval.projections = 16;
    cfg.eval.respacings = vec![5, 10];
    cfg.eval.lpf.samples = 3;
    cfg.eval.lpf.batch = 256;
    cfg.eval.radii = vec![0.0, 0.1];
    cfg.eval.directions = 2;
    cfg.eval.surface_resolution = 3;
    cfg.eval.exposure_respacing = 5;
    cfg.eval.exposure_samples = 100;
    cfg
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn deterministic_metrics(dir: &Path) -> Vec<(u64, u64, Option<u64>)> {
    read_metrics(&dir.join(files::METRICS))
        .unwrap()
        .iter()
        .map(|r| r.deterministic_part())
        .collect()
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(0);
    let s = train(&cfg, dir.path(), &TrainOptions::default()).unwrap().unwrap();
    assert_eq!(s.steps, 0);
    assert!(dir.path().join(files::FINAL).exists());
    for f in [files::EMA, files::SWA, files::LAST] {
        assert!(!dir.path().join(f).exists(), "{f}");
    }
    assert!(read_metrics(&dir.path().join(files::METRICS)).unwrap().is_empty());
    let ck = Checkpoint::load(&dir.path().join(files::FINAL)).unwrap();
    let init = cfg
        .architecture()
        .init(&mut flatdiff::numerics::Rng::new(cfg.seed).substream("init"))
        .unwrap();
    assert_eq!(ck.params, init);
}

#[test]
fn same_config_and_seed_give_identical_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small(20);
    train(&cfg, a.path(), &TrainOptions::default()).unwrap();
    train(&cfg, b.path(), &TrainOptions::default()).unwrap();
    assert_eq!(deterministic_metrics(a.path()), deterministic_metrics(b.path()));
    for f in [files::FINAL, files::EMA, files::SWA] {
        assert_eq!(bytes(&a.path().join(f)), bytes(&b.path().join(f)), "{f}");
    }
    assert_eq!(bytes(&snapshot_path(a.path(), 10)), bytes(&snapshot_path(b.path(), 10)));
}

#[test]
fn resumed_run_matches_uninterrupted_run_bitwise() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let mut cfg = small(30);
    cfg.optim.swa.start = Some(10);
    cfg.optim.swa.cycle = Some(3);
    train(&cfg, full.path(), &TrainOptions::default()).unwrap();

    let stopped = train(
        &cfg,
        split.path(),
        &TrainOptions {
            resume: false,
            stop_after: Some(17),
        },
    )
    .unwrap();
    assert!(stopped.is_none());
    assert!(!split.path().join(files::FINAL).exists());
    let last = Checkpoint::load(&split.path().join(files::LAST)).unwrap();
    assert_eq!(last.state.unwrap().optimizer.step, 17);

    train(
        &cfg,
        split.path(),
        &TrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    for f in [files::FINAL, files::EMA, files::SWA, files::LAST] {
        assert_eq!(bytes(&full.path().join(f)), bytes(&split.path().join(f)), "{f}");
    }
    assert_eq!(deterministic_metrics(full.path()), deterministic_metrics(split.path()));
}

#[test]
fn resume_from_a_snapshot_after_losing_last_checkpoint() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = small(25);
    train(&cfg, full.path(), &TrainOptions::default()).unwrap();
    let opts = TrainOptions {
        resume: false,
        stop_after: Some(23),
    };
    train(&cfg, split.path(), &opts).unwrap();
    std::fs::remove_file(split.path().join(files::LAST)).unwrap();
    let opts = TrainOptions {
        resume: true,
        stop_after: None,
    };
    train(&cfg, split.path(), &opts).unwrap();
    assert_eq!(bytes(&full.path().join(files::FINAL)), bytes(&split.path().join(files::FINAL)));
    assert_eq!(deterministic_metrics(full.path()), deterministic_metrics(split.path()));
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(10);
    let opts = TrainOptions {
        resume: false,
        stop_after: Some(5),
    };
    train(&cfg, dir.path(), &opts).unwrap();
    let mut other = cfg.clone();
    other.optim.lr *= 2.0;
    let opts = TrainOptions {
        resume: true,
        stop_after: None,
    };
    assert!(matches!(train(&other, dir.path(), &opts), Err(Error::Config(_))));
}

#[test]
fn numeric_failure_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(10);
    cfg.optim.sam.rho = 0.0;
    cfg.optim.lr = 1e39;
    let err = train(&cfg, dir.path(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    let last = Checkpoint::load(&dir.path().join(files::LAST)).unwrap();
    assert!(last.params.is_finite());
    assert!(!dir.path().join(files::FINAL).exists());
    assert!(!dir.path().join(RunLock::FILE).exists());
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _held = RunLock::acquire(dir.path()).unwrap();
    let err = train(&small(1), dir.path(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Locked(_)));
}

#[test]
fn eval_reproduces_training_end_loss() {
    let dir = tempfile::tempdir().unwrap();
    let s = train(&small(12), dir.path(), &TrainOptions::default()).unwrap().unwrap();
    let out = dir.path().join("reports");
    let before = bytes(&dir.path().join(files::FINAL));
    evaluate(&EvalInputs::from_run(dir.path()).unwrap(), &[Metric::Loss], &out).unwrap();
    let doc: serde_json::Value = serde_json::from_slice(&bytes(&out.join("loss.json"))).unwrap();
    let loss = doc["result"]["loss"].as_f64().unwrap();
    assert!((loss - s.final_eval_loss).abs() <= 1e-6, "{loss} vs {}", s.final_eval_loss);
    assert_eq!(doc["config_hash"], s.config_hash.as_str());
    assert_eq!(doc["seed"], 3);
    assert_eq!(bytes(&dir.path().join(files::FINAL)), before);
}

#[test]
fn every_metric_emits_reports_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(20);
    train(&cfg, dir.path(), &TrainOptions::default()).unwrap();
    let out = dir.path().join("reports");
    let written = evaluate(&EvalInputs::from_run(dir.path()).unwrap(), &Metric::ALL, &out).unwrap();
    for p in &written {
        let name = p.file_name().unwrap().to_str().unwrap();
        let meta = if name.ends_with(".csv") {
            out.join(format!("{name}.json"))
        } else if name.ends_with(".json") {
            p.clone()
        } else {
            continue;
        };
        let doc: serde_json::Value = serde_json::from_slice(&bytes(&meta)).unwrap();
        assert_eq!(doc["config_hash"], cfg.hash().as_str(), "{name}");
        assert_eq!(doc["seed"], 3, "{name}");
    }
    // 3 bit widths × 2 chain lengths × (final, EMA, SWA, post-hoc EMA)
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 2 * 4);
    assert!(sweep.contains("IP+SAM+PostHocEMA,8,5,"));
}

#[test]
fn sweep_has_three_rows_per_respacing() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let cfg = small(0);
    train(&cfg, &dir.path().join("run"), &TrainOptions::default()).unwrap();
    std::fs::copy(dir.path().join("run").join(files::FINAL), &ck).unwrap();
    let out = dir.path().join("out");
    evaluate(&EvalInputs::from_checkpoint(cfg.clone(), &ck), &[Metric::Sweep], &out).unwrap();
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count() - 1, 3 * cfg.eval.respacings.len());
}

#[test]
fn unknown_metric_lists_valid_names() {
    let err = Metric::parse_list("loss,sharpness").unwrap_err();
    match err {
        Error::Usage(msg) => {
            assert!(msg.contains("sharpness"));
            for m in Metric::ALL {
                assert!(msg.contains(m.name()), "{msg}");
            }
        }
        e => panic!("{e}"),
    }
}

#[test]
fn config_file_round_trips_through_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(3);
    train(&cfg, dir.path(), &TrainOptions::default()).unwrap();
    let stored = RunConfig::load(&dir.path().join(files::CONFIG)).unwrap();
    assert_eq!(stored, cfg);
    assert_eq!(stored.hash(), cfg.hash());
}
