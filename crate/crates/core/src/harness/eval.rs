use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::diffusion::{
    ddpm_sample, ddpm_sample_from, initial_latent, write_samples_csv, EpsModel, NoiseSchedule, RespacingMap,
};
use crate::error::{Error, Result};
use crate::flatness::{
    loss_surface_grid, lpf, perturbation_curve, write_curve_csv, write_surface_csv, EvalSet,
};
use crate::numerics::{Rng, Tensor};
use crate::optim::{posthoc_ema, CheckpointSeries};
use crate::robustness::{
    exposure_profile, latent_attack, robustness_sweep, sliced_w2, write_profile_csv, write_sweep_csv,
    AttackConfig, SweepConfig,
};

use super::checkpoint::Checkpoint;
use super::config::{variant_name, RunConfig};
use super::train::{files, snapshot_files};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Loss,
    Lpf,
    Curve,
    Surface,
    PosthocEma,
    Sweep,
    Exposure,
    Attack,
    Samples,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Loss,
        Metric::Lpf,
        Metric::Curve,
        Metric::Surface,
        Metric::PosthocEma,
        Metric::Sweep,
        Metric::Exposure,
        Metric::Attack,
        Metric::Samples,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Lpf => "lpf",
            Metric::Curve => "curve",
            Metric::Surface => "surface",
            Metric::PosthocEma => "posthoc-ema",
            Metric::Sweep => "sweep",
            Metric::Exposure => "exposure",
            Metric::Attack => "attack",
            Metric::Samples => "samples",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Metric::name).join(", ")
    }

    /// Parses a comma-separated list, deduplicated into evaluation order.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Metric>>>()?;
        if out.is_empty() {
            return Err(Error::Usage(format!("no metric given; valid metrics: {}", Self::valid_names())));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown metric `{s}`; valid metrics: {}", Self::valid_names())))
    }
}

/// What to evaluate: a primary checkpoint plus, for the sweep, any averaged
/// variants found next to it.
#[derive(Clone, Debug)]
pub struct EvalInputs {
    pub cfg: RunConfig,
    pub primary: PathBuf,
    /// `(variant, path)` pairs; `final`, `ema`, `swa`, `posthoc-ema`.
    pub variants: Vec<(String, PathBuf)>,
    /// Run directory, when known; needed for post-hoc EMA over snapshots.
    pub run_dir: Option<PathBuf>,
}

impl EvalInputs {
    /// Everything a finished run directory provides, with its stored config.
    pub fn from_run(run_dir: &Path) -> Result<Self> {
        let cfg = RunConfig::load(&run_dir.join(files::CONFIG))?;
        let primary = run_dir.join(files::FINAL);
        if !primary.exists() {
            return Err(Error::Usage(format!("{} has no final checkpoint", run_dir.display())));
        }
        let mut variants = vec![("final".to_string(), primary.clone())];
        for (name, file) in [("ema", files::EMA), ("swa", files::SWA)] {
            let p = run_dir.join(file);
            if p.exists() {
                variants.push((name.into(), p));
            }
        }
        Ok(Self {
            cfg,
            primary,
            variants,
            run_dir: Some(run_dir.to_path_buf()),
        })
    }

    pub fn from_checkpoint(cfg: RunConfig, path: &Path) -> Self {
        Self {
            cfg,
            primary: path.to_path_buf(),
            variants: vec![("final".into(), path.to_path_buf())],
            run_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Provenance<'a> {
    config_hash: String,
    seed: u64,
    eval_seed: u64,
    checkpoint: &'a Path,
    metric: &'a str,
}

/// Writes `<out_dir>/<metric>.json` (or `.csv` with a `.csv.json` sidecar)
/// for each requested metric and returns the paths written. Checkpoints are
/// only read.
pub fn evaluate(inputs: &EvalInputs, metrics: &[Metric], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &inputs.cfg;
    let ev = &cfg.eval;
    let ck = Checkpoint::load(&inputs.primary)?;
    let model = ck.model()?;
    let sched = ck.schedule.build()?;
    let dataset = cfg.dataset();
    let root = Rng::new(ev.seed);
    let mut variants = inputs.variants.clone();
    let mut written = Vec::new();

    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    for metric in metrics {
        let prov = Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            eval_seed: ev.seed,
            checkpoint: &inputs.primary,
            metric: metric.name(),
        };
        let json_out = |result: serde_json::Value| -> Result<PathBuf> {
            let path = out_dir.join(format!("{metric}.json"));
            let mut doc = serde_json::to_value(&prov).map_err(|e| Error::Serde(e.to_string()))?;
            doc["result"] = result;
            write_json(&path, &doc)?;
            Ok(path)
        };
        let csv_out = |write: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<PathBuf> {
            let path = out_dir.join(format!("{metric}.csv"));
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            write(&mut f).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))?;
            let sidecar = out_dir.join(format!("{metric}.csv.json"));
            write_json(&sidecar, &serde_json::to_value(&prov).map_err(|e| Error::Serde(e.to_string()))?)?;
            Ok(path)
        };
        match metric {
            Metric::Loss => {
                let set = EvalSet::new(&dataset, &sched, ev.seed, cfg.train.eval_batch)?;
                let loss = set.loss(model.arch(), model.params())?;
                written.push(json_out(json!({ "loss": loss, "batch": cfg.train.eval_batch }))?);
            }
            Metric::Lpf => {
                let set = EvalSet::new(&dataset, &sched, ev.seed, ev.lpf.batch)?;
                let r = lpf(set.loss_fn(&model), model.params(), &ev.lpf, &root.substream("lpf"))?;
                written.push(json_out(to_json(&r)?)?);
            }
            Metric::Curve => {
                let set = EvalSet::new(&dataset, &sched, ev.seed, ev.lpf.batch)?;
                let curve = perturbation_curve(
                    set.loss_fn(&model),
                    model.params(),
                    &ev.radii,
                    ev.directions,
                    &root.substream("curve"),
                )?;
                written.push(csv_out(&|mut w| write_curve_csv(&curve, &mut w))?);
            }
            Metric::Surface => {
                let set = EvalSet::new(&dataset, &sched, ev.seed, ev.lpf.batch)?;
                let grid = loss_surface_grid(
                    set.loss_fn(&model),
                    model.params(),
                    ev.surface_extent,
                    ev.surface_resolution,
                    &root.substream("surface"),
                )?;
                written.push(csv_out(&|mut w| write_surface_csv(&grid, &mut w))?);
            }
            Metric::PosthocEma => {
                let run_dir = inputs.run_dir.as_ref().ok_or_else(|| {
                    Error::Usage("posthoc-ema needs a run directory with snapshots".into())
                })?;
                let mut series = CheckpointSeries::new();
                for (step, path) in snapshot_files(run_dir)? {
                    series.push(step, Checkpoint::load(&path)?.params)?;
                }
                let acc = posthoc_ema(&series, ev.posthoc_gamma)?;
                let path = out_dir.join("posthoc_ema.ckpt");
                Checkpoint::new(ck.arch.clone(), ck.schedule.clone(), acc.to_params())?.save(&path)?;
                variants.push(("posthoc-ema".into(), path.clone()));
                written.push(path);
                written.push(json_out(json!({ "gamma": ev.posthoc_gamma, "snapshots": series.len() }))?);
            }
            Metric::Sweep => {
                let target = target_samples(cfg, &root);
                let named = variants
                    .iter()
                    .map(|(v, p)| Ok((variant_name(&cfg.algorithm(), v), Checkpoint::load(p)?.model()?)))
                    .collect::<Result<Vec<_>>>()?;
                let rows = robustness_sweep(&named, &target, &sched, &sweep_config(cfg))?;
                written.push(csv_out(&|mut w| write_sweep_csv(&rows, &mut w))?);
            }
            Metric::Exposure => {
                let map = respacing(&sched, ev.exposure_respacing)?;
                let profile =
                    exposure_profile(&model, &dataset, &sched, &map, &root.substream("exposure"), ev.exposure_samples)?;
                written.push(csv_out(&|mut w| write_profile_csv(&profile, &mut w))?);
                let path = out_dir.join("exposure.json");
                let mut doc = to_json(&prov)?;
                doc["result"] = json!({
                    "respacing": map.t_prime(),
                    "samples": profile.n,
                    "gap": profile.gap,
                    "gap_stderr": profile.gap_stderr,
                    "end_signed_diff": profile.end_signed_diff,
                });
                write_json(&path, &doc)?;
                written.push(path);
            }
            Metric::Attack => {
                let target = target_samples(cfg, &root);
                let map = respacing(&sched, ev.respacings.first().copied().unwrap_or(20))?;
                let r = attack_degradation(&model, &sched, &map, &ev.attack, &target, ev.samples, ev.projections, &root)?;
                written.push(json_out(to_json(&r)?)?);
            }
            Metric::Samples => {
                let map = respacing(&sched, ev.respacings.first().copied().unwrap_or(20))?;
                let x = ddpm_sample(&model, ev.samples, &sched, &map, &root.substream("samples"))?;
                written.push(csv_out(&|mut w| write_samples_csv(&x, &mut w))?);
            }
        }
    }
    Ok(written)
}

pub fn sweep_config(cfg: &RunConfig) -> SweepConfig {
    SweepConfig {
        bits: cfg.eval.bits.clone(),
        respacings: cfg.eval.respacings.clone(),
        samples: cfg.eval.samples,
        projections: cfg.eval.projections,
        seed: cfg.eval.seed,
    }
}

/// Reference draw from the data distribution used by every distance metric.
pub fn target_samples(cfg: &RunConfig, root: &Rng) -> Tensor {
    cfg.dataset().sample(&mut root.substream("target"), cfg.eval.target_samples)
}

/// Chain of `t_prime` steps; 0 or the schedule length means the full chain.
pub fn respacing(sched: &NoiseSchedule, t_prime: usize) -> Result<RespacingMap> {
    if t_prime == 0 || t_prime == sched.steps() {
        Ok(RespacingMap::full(sched.steps()))
    } else {
        RespacingMap::even(sched.steps(), t_prime)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub strength: f64,
    pub respacing: usize,
    pub clean: f64,
    pub attacked: f64,
    /// `attacked − clean`.
    pub degradation: f64,
}

/// Sliced-W2 to `target` from clean latents and from attacked ones, with the
/// same step noise in both chains.
#[allow(clippy::too_many_arguments)]
pub fn attack_degradation(
    model: &EpsModel,
    sched: &NoiseSchedule,
    map: &RespacingMap,
    attack: &AttackConfig,
    target: &Tensor,
    n: usize,
    projections: usize,
    root: &Rng,
) -> Result<AttackReport> {
    let rng = root.substream("attack");
    let latents = initial_latent(&rng, n, model.arch().dim);
    let attacked_latents = latent_attack(model, sched, map, attack, &latents)?;
    let clean = ddpm_sample_from(model, latents, sched, map, &rng, |_| {})?;
    let attacked = ddpm_sample_from(model, attacked_latents, sched, map, &rng, |_| {})?;
    let d = root.substream("distance");
    let clean = sliced_w2(&clean, target, projections, &d)?;
    let attacked = sliced_w2(&attacked, target, projections, &d)?;
    Ok(AttackReport {
        strength: attack.strength,
        respacing: map.t_prime(),
        clean,
        attacked,
        degradation: attacked - clean,
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Serde(e.to_string()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}
