use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ActivationKind, Architecture, DatasetKind, ScheduleDescriptor, ToyDataset};
use crate::error::{Error, Result};
use crate::flatness::LpfConfig;
use crate::optim::{BaseOptimizer, OptimConfig};
use crate::robustness::AttackConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DatasetKind,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: ActivationKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            hidden: a.hidden,
            embed_dim: a.embed_dim,
            activation: a.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    /// Parameter snapshots (and a resumable checkpoint) every this many steps.
    pub snapshot_every: u64,
    pub log_every: u64,
    /// LPF spot checks in the metrics log; 0 disables them.
    pub lpf_spot_every: u64,
    pub lpf_spot_samples: usize,
    /// Rows in the fixed evaluation batch used for the end-of-training loss.
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            snapshot_every: 1000,
            log_every: 100,
            lpf_spot_every: 2000,
            lpf_spot_samples: 4,
            eval_batch: 4096,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamSection {
    pub rho: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwaSection {
    /// First step eligible for averaging; defaults to 90% of the run.
    pub start: Option<u64>,
    /// Steps between absorbed snapshots; defaults to one per 2000th of the run.
    pub cycle: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaSection {
    pub lambda: f64,
}

impl Default for EmaSection {
    fn default() -> Self {
        Self { lambda: 1e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpSection {
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: BaseOptimizer,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sam: SamSection,
    pub swa: SwaSection,
    pub ema: EmaSection,
    pub ip: IpSection,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            kind: o.kind,
            lr: 1e-3,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            sam: SamSection::default(),
            swa: SwaSection::default(),
            ema: EmaSection::default(),
            ip: IpSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Seed of the fixed evaluation batch and of all evaluation sampling.
    pub seed: u64,
    pub samples: usize,
    pub target_samples: usize,
    pub projections: usize,
    pub respacings: Vec<usize>,
    pub bits: Vec<u32>,
    pub lpf: LpfConfig,
    pub radii: Vec<f64>,
    pub directions: usize,
    pub surface_extent: f64,
    pub surface_resolution: usize,
    pub exposure_respacing: usize,
    pub exposure_samples: usize,
    pub attack: AttackConfig,
    pub posthoc_gamma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 12345,
            samples: 4000,
            target_samples: 4000,
            projections: 256,
            respacings: vec![20, 100, 0],
            bits: vec![32, 8, 4],
            lpf: LpfConfig::default(),
            radii: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            directions: 16,
            surface_extent: 2.0,
            surface_resolution: 21,
            exposure_respacing: 20,
            exposure_samples: 4000,
            attack: AttackConfig::default(),
            posthoc_gamma: 6.94,
        }
    }
}

/// Everything needed to reproduce a run. Stored as TOML with nested tables,
/// written either as sections or as dotted keys (`optim.sam.rho = 0.05`).
/// Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub schedule: ScheduleDescriptor,
    pub model: ModelSection,
    pub train: TrainSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: DataSection::default(),
            schedule: ScheduleDescriptor::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            optim: OptimSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.optim_config().validate()?;
        self.schedule.build()?;
        self.eval.lpf.validate()?;
        self.eval.attack.validate()?;
        if self.train.batch == 0 || self.train.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.train.snapshot_every == 0 || self.train.log_every == 0 {
            return Err(Error::Config("snapshot_every and log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> ToyDataset {
        ToyDataset::new(self.data.kind)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dim: self.dataset().dim(),
            hidden: self.model.hidden.clone(),
            embed_dim: self.model.embed_dim,
            activation: self.model.activation,
        }
    }

    /// Flattened optimizer settings with the SWA defaults resolved against
    /// the run length.
    pub fn optim_config(&self) -> OptimConfig {
        let o = &self.optim;
        let steps = self.train.steps;
        OptimConfig {
            kind: o.kind,
            lr: o.lr,
            sam_rho: o.sam.rho,
            swa_cycle: o.swa.cycle.unwrap_or((steps / 2000).max(1)),
            swa_start: o.swa.start.unwrap_or(steps - steps / 10),
            ema_lambda: o.ema.lambda,
            ip_strength: o.ip.strength,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
        }
    }

    /// `baseline`, `IP`, `SAM` or `IP+SAM`, from the training scheme.
    pub fn algorithm(&self) -> String {
        match (self.optim.ip.strength > 0.0, self.optim.sam.rho > 0.0) {
            (false, false) => "baseline".into(),
            (true, false) => "IP".into(),
            (false, true) => "SAM".into(),
            (true, true) => "IP+SAM".into(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Name of a checkpoint variant in comparison tables: `SAM`, `SAM+EMA`, ...
pub fn variant_name(algorithm: &str, variant: &str) -> String {
    match variant {
        "final" => algorithm.to_string(),
        "ema" => format!("{algorithm}+EMA"),
        "swa" => format!("{algorithm}+SWA"),
        "posthoc-ema" => format!("{algorithm}+PostHocEMA"),
        other => format!("{algorithm}+{other}"),
    }
}
