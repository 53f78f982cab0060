//! Built-in synthetic oracles with known ground-truth attributions.
//!
//! These stand in for real predictors in tests and benchmarks: each is a
//! deterministic function of the mask (noisy variants derive their noise
//! from the mask bits, so replaying a mask replays its noise).

use super::{BlackBoxError, Predictor};
use crate::space::{InstanceSpec, MaskVector};
use crate::stats::fnv1a64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Serializable description of a synthetic oracle, as accepted by run
/// configurations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticConfig {
    /// f(z) = intercept + w . z
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        intercept: f64,
    },
    /// f(z) = 1 if every unit of `modality` is active, else 0.
    GroupAnd { modality: usize },
    /// Linear plus zero-mean Gaussian noise derived from (seed, mask).
    NoisyLinear {
        weights: Vec<f64>,
        #[serde(default)]
        intercept: f64,
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Depends only on the units of one modality: f(z) = w . z[g_m].
    UnimodalCollapse { modality: usize, weights: Vec<f64> },
    /// f(z) = value for every mask.
    Constant { value: f64 },
}

impl SyntheticConfig {
    pub fn build(&self, spec: &InstanceSpec) -> Result<Synthetic, BlackBoxError> {
        match self {
            SyntheticConfig::Linear { weights, intercept } => {
                Synthetic::linear(spec, weights.clone(), *intercept)
            }
            SyntheticConfig::GroupAnd { modality } => Synthetic::group_and(spec, *modality),
            SyntheticConfig::NoisyLinear {
                weights,
                intercept,
                sigma,
                seed,
            } => Synthetic::noisy_linear(spec, weights.clone(), *intercept, *sigma, *seed),
            SyntheticConfig::UnimodalCollapse { modality, weights } => {
                Synthetic::unimodal_collapse(spec, *modality, weights.clone())
            }
            SyntheticConfig::Constant { value } => Ok(Synthetic::constant(spec, *value)),
        }
    }
}

/// A synthetic black box over the interpretable space of one instance.
#[derive(Debug, Clone)]
pub enum Synthetic {
    Linear {
        weights: Vec<f64>,
        intercept: f64,
    },
    GroupAnd {
        group: Range<usize>,
    },
    NoisyLinear {
        weights: Vec<f64>,
        intercept: f64,
        sigma: f64,
        seed: u64,
    },
    UnimodalCollapse {
        group: Range<usize>,
        weights: Vec<f64>,
    },
    Constant {
        value: f64,
    },
}

impl Synthetic {
    pub fn linear(
        spec: &InstanceSpec,
        weights: Vec<f64>,
        intercept: f64,
    ) -> Result<Self, BlackBoxError> {
        if weights.len() != spec.total_units() {
            return Err(BlackBoxError::BadParams(format!(
                "linear oracle needs {} weights, got {}",
                spec.total_units(),
                weights.len()
            )));
        }
        Ok(Self::Linear { weights, intercept })
    }

    pub fn group_and(spec: &InstanceSpec, modality: usize) -> Result<Self, BlackBoxError> {
        if modality >= spec.num_modalities() {
            return Err(BlackBoxError::BadParams(format!(
                "modality index {modality} out of range (M={})",
                spec.num_modalities()
            )));
        }
        Ok(Self::GroupAnd {
            group: spec.group(modality),
        })
    }

    pub fn noisy_linear(
        spec: &InstanceSpec,
        weights: Vec<f64>,
        intercept: f64,
        sigma: f64,
        seed: u64,
    ) -> Result<Self, BlackBoxError> {
        if weights.len() != spec.total_units() {
            return Err(BlackBoxError::BadParams(format!(
                "noisy_linear oracle needs {} weights, got {}",
                spec.total_units(),
                weights.len()
            )));
        }
        if sigma < 0.0 {
            return Err(BlackBoxError::BadParams("sigma must be non-negative".into()));
        }
        Ok(Self::NoisyLinear {
            weights,
            intercept,
            sigma,
            seed,
        })
    }

    pub fn unimodal_collapse(
        spec: &InstanceSpec,
        modality: usize,
        weights: Vec<f64>,
    ) -> Result<Self, BlackBoxError> {
        if modality >= spec.num_modalities() {
            return Err(BlackBoxError::BadParams(format!(
                "modality index {modality} out of range (M={})",
                spec.num_modalities()
            )));
        }
        let group = spec.group(modality);
        if weights.len() != group.len() {
            return Err(BlackBoxError::BadParams(format!(
                "unimodal_collapse oracle needs {} weights for modality {modality}, got {}",
                group.len(),
                weights.len()
            )));
        }
        Ok(Self::UnimodalCollapse { group, weights })
    }

    pub fn constant(_spec: &InstanceSpec, value: f64) -> Self {
        Self::Constant { value }
    }

    fn eval(&self, mask: &MaskVector) -> f64 {
        match self {
            Synthetic::Linear { weights, intercept } => {
                intercept
                    + mask
                        .bits()
                        .iter()
                        .zip(weights)
                        .map(|(&b, w)| b as f64 * w)
                        .sum::<f64>()
            }
            Synthetic::GroupAnd { group } => {
                if group.clone().all(|j| mask.get(j) == 1) {
                    1.0
                } else {
                    0.0
                }
            }
            Synthetic::NoisyLinear {
                weights,
                intercept,
                sigma,
                seed,
            } => {
                let clean = intercept
                    + mask
                        .bits()
                        .iter()
                        .zip(weights)
                        .map(|(&b, w)| b as f64 * w)
                        .sum::<f64>();
                if *sigma == 0.0 {
                    return clean;
                }
                // Noise keyed on (seed, bits): the same mask always sees the
                // same draw, independent of query order.
                let mut key = seed.to_le_bytes().to_vec();
                key.extend_from_slice(mask.bits());
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
                clean + sigma * standard_normal(&mut rng)
            }
            Synthetic::UnimodalCollapse { group, weights } => group
                .clone()
                .zip(weights)
                .map(|(j, w)| mask.get(j) as f64 * w)
                .sum(),
            Synthetic::Constant { value } => *value,
        }
    }
}

/// Box-Muller standard normal draw.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Predictor for Synthetic {
    fn predict(&self, masks: &[MaskVector]) -> Result<Vec<Vec<f64>>, BlackBoxError> {
        Ok(masks.iter().map(|m| vec![self.eval(m)]).collect())
    }
}
