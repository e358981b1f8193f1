use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsModel, NoisedBatch};
use crate::error::{Error, Result};
use crate::flatness::{lpf, EvalSet, LpfConfig};
use crate::numerics::{grad, ParamVector, Rng};
use crate::optim::{sam_step, AveragerState, OptimizerState};

use super::checkpoint::{Checkpoint, TrainState};
use super::config::RunConfig;
use super::lock::RunLock;
use super::metrics::{MetricsLog, MetricsRow};

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const METRICS: &str = "metrics.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const SNAPSHOTS: &str = "snapshots";
    pub const LAST: &str = "last.ckpt";
    pub const FINAL: &str = "final.ckpt";
    pub const EMA: &str = "ema.ckpt";
    pub const SWA: &str = "swa.ckpt";
    pub const REPORTS: &str = "reports";
}

pub fn snapshot_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(files::SNAPSHOTS).join(format!("step_{step:08}.ckpt"))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the newest resumable checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this many total steps, leaving a resumable `last.ckpt` and
    /// no final checkpoints, as if the process had been interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub algorithm: String,
    pub steps: u64,
    /// Loss of the final weights on the fixed evaluation batch.
    pub final_eval_loss: f64,
    pub ema_eval_loss: f64,
    pub swa_eval_loss: f64,
    pub swa_models: u64,
    pub sam_skips: u64,
    pub wall_time_s: f64,
}

/// Runs the configured training scheme in `run_dir`.
///
/// Returns `Ok(None)` when stopped early by [`TrainOptions::stop_after`].
pub fn train(cfg: &RunConfig, run_dir: &Path, opts: &TrainOptions) -> Result<Option<TrainSummary>> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir.join(files::SNAPSHOTS)).map_err(|e| Error::io(run_dir, e))?;
    let _lock = RunLock::acquire(run_dir)?;

    let config_path = run_dir.join(files::CONFIG);
    if opts.resume {
        let stored = RunConfig::load(&config_path)?;
        if stored.hash() != cfg.hash() {
            return Err(Error::Config(format!(
                "{} was written by a different configuration; refusing to resume",
                config_path.display()
            )));
        }
    } else {
        std::fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;
    }

    let arch = cfg.architecture();
    let sched = cfg.schedule.build()?;
    let dataset = cfg.dataset();
    let ocfg = cfg.optim_config();
    let root = Rng::new(cfg.seed);
    let eval_set = EvalSet::new(&dataset, &sched, cfg.eval.seed, cfg.train.eval_batch)?;
    let checkpoint = |params: &ParamVector, state: Option<TrainState>| -> Result<Checkpoint> {
        let mut c = Checkpoint::new(arch.clone(), cfg.schedule.clone(), params.clone())?;
        c.state = state;
        Ok(c)
    };

    let resumed = if opts.resume { newest_resumable(run_dir)? } else { None };
    let (mut params, mut ostate, mut avg, mut log) = match resumed {
        Some(c) => {
            let st = c.state.expect("resumable checkpoints carry state");
            let log = MetricsLog::resume(&run_dir.join(files::METRICS), st.optimizer.step)?;
            (c.params, st.optimizer, st.averager, log)
        }
        None => {
            let params = arch.init(&mut root.substream("init"))?;
            let ostate = OptimizerState::new(&params);
            let avg = AveragerState::new(&params);
            (params, ostate, avg, MetricsLog::create(&run_dir.join(files::METRICS))?)
        }
    };

    let started = Instant::now();
    let total = cfg.train.steps;
    let stop = opts.stop_after.map_or(total, |s| s.min(total));
    while ostate.step < stop {
        let step = ostate.step + 1;
        let good = (params.clone(), ostate.clone(), avg.clone());
        let outcome = (|| -> Result<f64> {
            let mut rng = root.substream_indexed("batch", step);
            let x0 = dataset.sample(&mut rng, cfg.train.batch);
            let batch = NoisedBatch::draw(&x0, &sched, &mut rng, ocfg.ip_strength)?;
            let out = sam_step(|p| grad(p, |g| batch.loss_graph(&arch, g)), &params, &ocfg, &mut ostate)?;
            if let Some(seg) = out.params.first_non_finite_segment() {
                return Err(Error::numeric(format!("parameters after step {step}"), seg));
            }
            params = out.params;
            avg.ema_update(&params, ocfg.ema_lambda)?;
            avg.swa_update(&params, step, &ocfg)?;
            Ok(out.loss)
        })();
        let loss = match outcome {
            Ok(l) => l,
            Err(e) => {
                let (p, o, a) = good;
                let state = TrainState { optimizer: o, averager: a };
                checkpoint(&p, Some(state))?.save(&run_dir.join(files::LAST))?;
                return Err(e);
            }
        };

        if step % cfg.train.log_every == 0 || step == total {
            let lpf_spot = if cfg.train.lpf_spot_every > 0 && step % cfg.train.lpf_spot_every == 0 {
                let spot = LpfConfig {
                    samples: cfg.train.lpf_spot_samples,
                    ..cfg.eval.lpf.clone()
                };
                let rng = Rng::new(cfg.eval.seed).substream_indexed("lpf-spot", step);
                let model = EpsModel::new(arch.clone(), params.clone())?;
                Some(lpf(eval_set.loss_fn(&model), &params, &spot, &rng)?.value)
            } else {
                None
            };
            log.append(&MetricsRow {
                step,
                loss,
                lpf_spot,
                wall_time_s: started.elapsed().as_secs_f64(),
            })?;
        }
        if step % cfg.train.snapshot_every == 0 {
            let state = TrainState {
                optimizer: ostate.clone(),
                averager: avg.clone(),
            };
            checkpoint(&params, Some(state))?.save(&snapshot_path(run_dir, step))?;
        }
    }

    if ostate.step < total {
        let state = TrainState {
            optimizer: ostate,
            averager: avg,
        };
        checkpoint(&params, Some(state))?.save(&run_dir.join(files::LAST))?;
        return Ok(None);
    }

    checkpoint(&params, None)?.save(&run_dir.join(files::FINAL))?;
    let (ema, swa) = (avg.ema_params(), avg.swa_params());
    if total > 0 {
        checkpoint(&ema, None)?.save(&run_dir.join(files::EMA))?;
        checkpoint(&swa, None)?.save(&run_dir.join(files::SWA))?;
        let state = TrainState {
            optimizer: ostate.clone(),
            averager: avg.clone(),
        };
        checkpoint(&params, Some(state))?.save(&run_dir.join(files::LAST))?;
    }
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        algorithm: cfg.algorithm(),
        steps: total,
        final_eval_loss: eval_set.loss(&arch, &params)?,
        ema_eval_loss: eval_set.loss(&arch, &ema)?,
        swa_eval_loss: eval_set.loss(&arch, &swa)?,
        swa_models: avg.n_models,
        sam_skips: ostate.sam_skips,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let path = run_dir.join(files::SUMMARY);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(Some(summary))
}

/// Newest checkpoint with optimizer state among `last.ckpt` and the snapshots.
fn newest_resumable(run_dir: &Path) -> Result<Option<Checkpoint>> {
    let mut candidates = vec![run_dir.join(files::LAST)];
    candidates.extend(snapshot_files(run_dir)?.into_iter().map(|(_, p)| p));
    let mut best: Option<Checkpoint> = None;
    for path in candidates.into_iter().filter(|p| p.exists()) {
        let c = Checkpoint::load(&path)?;
        let step = match &c.state {
            Some(s) => s.optimizer.step,
            None => continue,
        };
        if best.as_ref().is_none_or(|b| b.state.as_ref().unwrap().optimizer.step < step) {
            best = Some(c);
        }
    }
    Ok(best)
}

/// Snapshot files of a run, sorted by step.
pub fn snapshot_files(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = run_dir.join(files::SNAPSHOTS);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_summary(run_dir: &Path) -> Result<TrainSummary> {
    let path = run_dir.join(files::SUMMARY);
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}
