//! Generator input noise and the serializable training RNG.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, LATENT_DIM};
use crate::tensor::Tensor;

pub type TrainRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> TrainRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact position of a [`TrainRng`], for checkpointing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &TrainRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> TrainRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseDistribution {
    #[default]
    Normal,
    /// Uniform on `[0, 1)`.
    Uniform,
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDistribution::Normal => "normal",
            NoiseDistribution::Uniform => "uniform",
        })
    }
}

impl FromStr for NoiseDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            _ => Err(format!("expected normal or uniform, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    ImageField { height: usize, width: usize },
    LatentVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub distribution: NoiseDistribution,
}

impl NoiseSpec {
    pub fn latent(distribution: NoiseDistribution) -> Self {
        Self {
            kind: NoiseKind::LatentVector,
            distribution,
        }
    }

    /// Noise matching a first-stage generator's input: a 128-vector or a
    /// single-channel image.
    pub fn for_generator(spec: &ModelSpec, distribution: NoiseDistribution) -> Result<Self> {
        let kind = match *spec.input_shape() {
            [LATENT_DIM] => NoiseKind::LatentVector,
            [1, height, width] => NoiseKind::ImageField { height, width },
            ref other => {
                return Err(Error::Precondition(format!(
                    "generator input {other:?} is neither a {LATENT_DIM}-element latent nor a (1, H, W) field"
                )))
            }
        };
        Ok(Self { kind, distribution })
    }

    /// Per-sample shape.
    pub fn dims(&self) -> Vec<usize> {
        match self.kind {
            NoiseKind::LatentVector => vec![LATENT_DIM],
            NoiseKind::ImageField { height, width } => vec![1, height, width],
        }
    }
}

/// `m` i.i.d. draws of shape `(m, ..dims)`.
pub fn sample_noise<R: Rng + ?Sized>(
    spec: &NoiseSpec,
    m: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if m == 0 {
        return Err(Error::Precondition("noise batch must be >= 1".into()));
    }
    let mut shape = vec![m];
    shape.extend(spec.dims());
    let t = match spec.distribution {
        NoiseDistribution::Normal => {
            Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
        }
        NoiseDistribution::Uniform => Tensor::from_fn(shape, |_| rng.random::<f32>()),
    };
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_shape_and_determinism() {
        let spec = NoiseSpec::latent(NoiseDistribution::Normal);
        let a = sample_noise(&spec, 8, &mut seeded_rng(5)).unwrap();
        let b = sample_noise(&spec, 8, &mut seeded_rng(5)).unwrap();
        assert_eq!(a.shape(), &[8, 128]);
        assert_eq!(a, b);
        assert!(sample_noise(&spec, 0, &mut seeded_rng(5)).is_err());
    }

    #[test]
    fn uniform_range() {
        let spec = NoiseSpec {
            kind: NoiseKind::ImageField {
                height: 4,
                width: 4,
            },
            distribution: NoiseDistribution::Uniform,
        };
        let t = sample_noise(&spec, 100, &mut seeded_rng(1)).unwrap();
        assert_eq!(t.shape(), &[100, 1, 4, 4]);
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = seeded_rng(9);
        let _ = sample_noise(&NoiseSpec::latent(NoiseDistribution::Normal), 3, &mut rng).unwrap();
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }
}
