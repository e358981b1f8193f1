use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture8,
    SwissRoll,
    Checkerboard,
    /// Isotropic `N(0, std²·I)`; the exact-score oracle target.
    Gaussian,
}

impl DatasetKind {
    pub const NAMES: [&'static str; 4] = [
        "gaussian-mixture-8",
        "swiss-roll",
        "checkerboard",
        "gaussian",
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianMixture8 => "gaussian-mixture-8",
            DatasetKind::SwissRoll => "swiss-roll",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture-8" => Ok(DatasetKind::GaussianMixture8),
            "swiss-roll" => Ok(DatasetKind::SwissRoll),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            "gaussian" => Ok(DatasetKind::Gaussian),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}`; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// 2-D toy distributions scaled to roughly `[-1, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    kind: DatasetKind,
    dim: usize,
    std: f64,
}

const MIXTURE_RADIUS: f64 = 0.8;
const MIXTURE_STD: f64 = 0.06;

impl ToyDataset {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            dim: 2,
            std: 1.0,
        }
    }

    /// `N(0, std²·I_dim)`.
    pub fn gaussian(dim: usize, std: f64) -> Self {
        Self {
            kind: DatasetKind::Gaussian,
            dim,
            std,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `n` points as an `[n, dim]` tensor.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        let d = self.dim;
        let mut out = Tensor::zeros(vec![n, d]);
        for i in 0..n {
            let row = out.row_mut(i);
            match self.kind {
                DatasetKind::GaussianMixture8 => {
                    let k = rng.below(8) as f64;
                    let angle = 2.0 * PI * k / 8.0;
                    row[0] = (MIXTURE_RADIUS * angle.cos() + MIXTURE_STD * rng.normal()) as f32;
                    row[1] = (MIXTURE_RADIUS * angle.sin() + MIXTURE_STD * rng.normal()) as f32;
                }
                DatasetKind::SwissRoll => {
                    let t = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
                    let scale = 1.0 / 15.0;
                    row[0] = (scale * t * t.cos() + 0.02 * rng.normal()) as f32;
                    row[1] = (scale * t * t.sin() + 0.02 * rng.normal()) as f32;
                }
                DatasetKind::Checkerboard => {
                    // 4x4 board on [-1, 1]², dark cells only.
                    let x = 2.0 * rng.uniform() - 1.0;
                    let col = ((x + 1.0) * 2.0).floor().min(3.0) as i64;
                    let row_cell = 2 * rng.below(2) as i64 + (col % 2);
                    let y = -1.0 + 0.5 * (row_cell as f64 + rng.uniform());
                    row[0] = x as f32;
                    row[1] = y as f32;
                }
                DatasetKind::Gaussian => {
                    for v in row.iter_mut() {
                        *v = (self.std * rng.normal()) as f32;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_samples_are_bounded_and_reproducible() {
        for kind in [
            DatasetKind::GaussianMixture8,
            DatasetKind::SwissRoll,
            DatasetKind::Checkerboard,
        ] {
            let ds = ToyDataset::new(kind);
            let a = ds.sample(&mut Rng::new(4), 5000);
            let b = ds.sample(&mut Rng::new(4), 5000);
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| v.abs() < 1.3), "{kind}");
        }
    }

    #[test]
    fn names_round_trip() {
        for name in DatasetKind::NAMES {
            assert_eq!(name.parse::<DatasetKind>().unwrap().name(), name);
        }
        assert!("mnist".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn mixture_has_eight_modes() {
        let x = ToyDataset::new(DatasetKind::GaussianMixture8).sample(&mut Rng::new(1), 8000);
        let mut counts = [0usize; 8];
        for i in 0..x.rows() {
            let r = x.row(i);
            let a = (r[1] as f64).atan2(r[0] as f64).rem_euclid(2.0 * PI);
            counts[((a / (PI / 4.0)).round() as usize) % 8] += 1;
        }
        assert!(counts.iter().all(|&c| (800..1200).contains(&c)), "{counts:?}");
    }
}
