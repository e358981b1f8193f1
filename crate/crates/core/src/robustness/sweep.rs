use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_sample, EpsModel, NoiseSchedule, RespacingMap};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::distance::{sliced_w2, DistanceMetric};
use super::quantize::{quantize, QuantSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub bits: Vec<u32>,
    /// Reverse-chain lengths; 0 means the full schedule.
    pub respacings: Vec<usize>,
    pub samples: usize,
    pub projections: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            bits: vec![32, 8, 4],
            respacings: vec![20, 100, 0],
            samples: 4000,
            projections: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub bits: u32,
    pub respacing: usize,
    pub metric: DistanceMetric,
    /// `None` when the cell failed.
    pub value: Option<f64>,
    /// `value − value at 32 bits` for the same variant and chain length.
    pub delta_vs_fp32: Option<f64>,
    pub error: Option<String>,
}

/// Sliced-W2 distance to `target` for every (variant, bits, chain length),
/// sampled with shared latents and step noise. A failing cell is recorded and
/// the sweep moves on.
pub fn robustness_sweep(
    variants: &[(String, EpsModel)],
    target: &Tensor,
    sched: &NoiseSchedule,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if let Some((_, first)) = variants.first() {
        if let Some((name, _)) = variants.iter().find(|(_, m)| m.arch() != first.arch()) {
            return Err(Error::Config(format!("variant `{name}` has a different architecture")));
        }
    }
    let specs = cfg
        .bits
        .iter()
        .map(|&b| QuantSpec::new(b))
        .collect::<Result<Vec<_>>>()?;
    let maps = cfg
        .respacings
        .iter()
        .map(|&tp| {
            if tp == 0 || tp == sched.steps() {
                Ok(RespacingMap::full(sched.steps()))
            } else {
                RespacingMap::even(sched.steps(), tp)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let rng = Rng::new(cfg.seed);
    let cell = |model: &EpsModel, spec: QuantSpec, map: &RespacingMap| -> Result<f64> {
        let q = model.with_params(quantize(model.params(), spec)?)?;
        let x = ddpm_sample(&q, cfg.samples, sched, map, &rng.substream("samples"))?;
        sliced_w2(&x, target, cfg.projections, &rng.substream("distance"))
    };
    let mut rows = Vec::new();
    for (name, model) in variants {
        let mut fp32: Vec<Option<Option<f64>>> = vec![None; maps.len()];
        for spec in &specs {
            for (mi, map) in maps.iter().enumerate() {
                let result = cell(model, *spec, map);
                if spec.is_identity() {
                    fp32[mi] = Some(result.as_ref().ok().copied());
                }
                let reference = *fp32[mi].get_or_insert_with(|| cell(model, QuantSpec { bits: 32 }, map).ok());
                let (value, error) = match result {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                rows.push(SweepRow {
                    variant: name.clone(),
                    bits: spec.bits,
                    respacing: map.t_prime(),
                    metric: DistanceMetric::SlicedW2,
                    value,
                    delta_vs_fp32: value.zip(reference).map(|(v, r)| v - r),
                    error,
                });
            }
        }
    }
    Ok(rows)
}

/// Header `variant,bits,respacing,metric,value,delta_vs_fp32`; deltas carry an
/// explicit sign and failed cells read `failed`.
pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "variant,bits,respacing,metric,value,delta_vs_fp32")?;
    for r in rows {
        let value = r.value.map_or("failed".to_string(), |v| format!("{v:.6}"));
        let delta = r.delta_vs_fp32.map_or(String::new(), |d| format!("{d:+.6}"));
        writeln!(
            out,
            "{},{},{},{},{value},{delta}",
            r.variant,
            r.bits,
            r.respacing,
            r.metric.name()
        )?;
    }
    Ok(())
}
