//! Local weighted dataset construction around the explained instance.
//!
//! Masks are sampled i.i.d. Bernoulli per bit (the all-ones reference is
//! always row 0), the black box is queried once per mask, and each row gets
//! a locality weight from a modality-aware kernel:
//!
//! * per-modality normalized Hamming distance to the reference,
//! * IQR scaling per modality so no modality dominates by unit count,
//! * convex aggregation with modality weights, then a Gaussian kernel with
//!   bandwidth set to the median aggregated distance.

use crate::blackbox::{BlackBoxError, BlackBoxSession, CallKind, TargetSelector};
use crate::space::{InstanceSpec, MaskVector};
use crate::stats;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeighborhoodError {
    #[error("need at least 2 samples (reference + one perturbation), got {0}")]
    BadSampleCount(usize),
    #[error("modality weights: {0}")]
    BadAlpha(String),
    #[error(transparent)]
    BlackBox(#[from] BlackBoxError),
    #[error("local dataset lengths disagree: {0} masks, {1} targets, {2} weights")]
    LengthMismatch(usize, usize, usize),
    #[error("locality weights must be strictly positive")]
    NonPositiveWeight,
}

fn default_eps_d() -> f64 {
    1e-8
}

fn default_eps_sigma() -> f64 {
    1e-12
}

/// Locality-kernel configuration. `alpha` is one weight per modality
/// (normalized to sum 1 when resolved); `None` means uniform `1/M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default = "default_eps_d")]
    pub eps_d: f64,
    #[serde(default = "default_eps_sigma")]
    pub eps_sigma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            eps_d: default_eps_d(),
            eps_sigma: default_eps_sigma(),
        }
    }
}

impl KernelConfig {
    /// Concrete modality weights for `m` modalities, normalized to sum 1.
    pub fn resolved_alpha(&self, m: usize) -> Result<Vec<f64>, NeighborhoodError> {
        match &self.alpha {
            None => Ok(vec![1.0 / m as f64; m]),
            Some(raw) => normalize_alpha(raw, m),
        }
    }
}

/// Normalizes non-negative modality weights to sum 1.
pub fn normalize_alpha(raw: &[f64], m: usize) -> Result<Vec<f64>, NeighborhoodError> {
    if raw.len() != m {
        return Err(NeighborhoodError::BadAlpha(format!(
            "expected {m} weights, got {}",
            raw.len()
        )));
    }
    if raw.iter().any(|&a| !a.is_finite() || a < 0.0) {
        return Err(NeighborhoodError::BadAlpha(
            "weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(NeighborhoodError::BadAlpha("weights sum to zero".into()));
    }
    Ok(raw.iter().map(|a| a / sum).collect())
}

/// Mask sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Total rows N, including the forced all-ones reference.
    pub n: usize,
    /// Per-bit keep probability for the Bernoulli draws.
    #[serde(default = "default_p_keep")]
    pub p_keep: f64,
    pub seed: u64,
    /// Masks per black-box batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_p_keep() -> f64 {
    0.5
}

fn default_batch_size() -> usize {
    32
}

/// Rows of (mask, target, locality weight).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    masks: Vec<MaskVector>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl LocalDataset {
    pub fn new(
        masks: Vec<MaskVector>,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, NeighborhoodError> {
        if masks.len() != targets.len() || masks.len() != weights.len() {
            return Err(NeighborhoodError::LengthMismatch(
                masks.len(),
                targets.len(),
                weights.len(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(NeighborhoodError::NonPositiveWeight);
        }
        Ok(Self {
            masks,
            targets,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[MaskVector] {
        &self.masks
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Serialize, Deserialize)]
struct LocalDatasetJson {
    masks: Vec<String>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl Serialize for LocalDataset {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        LocalDatasetJson {
            masks: self.masks.iter().map(MaskVector::to_bit_string).collect(),
            targets: self.targets.clone(),
            weights: self.weights.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LocalDataset {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = LocalDatasetJson::deserialize(deserializer)?;
        let masks = json
            .masks
            .iter()
            .map(|s| {
                MaskVector::from_bit_string(s)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad bit-string {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        LocalDataset::new(masks, json.targets, json.weights).map_err(serde::de::Error::custom)
    }
}

/// A fitted locality kernel: the scaling statistics of one neighborhood.
/// Can weight masks that were not part of the fitting population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelModel {
    pub alpha: Vec<f64>,
    /// Per-modality IQR of the raw distances over the N samples.
    pub iqr: Vec<f64>,
    pub eps_d: f64,
    pub sigma: f64,
    pub eps_sigma: f64,
}

impl KernelModel {
    /// Aggregated, IQR-scaled distance for one raw distance row.
    pub fn aggregate(&self, raw: &[f64]) -> f64 {
        raw.iter()
            .zip(&self.iqr)
            .zip(&self.alpha)
            .map(|((d, iqr), a)| a * d / (iqr + self.eps_d))
            .sum()
    }

    pub fn weight_for_raw(&self, raw: &[f64]) -> f64 {
        let d = self.aggregate(raw);
        (-d * d / (self.sigma * self.sigma)).exp()
    }

    pub fn weight_for_mask(&self, mask: &MaskVector, spec: &InstanceSpec) -> f64 {
        self.weight_for_raw(&per_modality_distance(mask, spec))
    }
}

/// Everything produced while building one neighborhood. `raw_distances`
/// stays around so modality weights can be re-selected without re-querying.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub dataset: LocalDataset,
    /// N x M matrix of per-modality distances d_m(z_i).
    pub raw_distances: Vec<Vec<f64>>,
    pub kernel: KernelModel,
}

/// Draws `n` masks; row 0 is the all-ones reference, the rest are i.i.d.
/// Bernoulli(`p_keep`) per bit. Deterministic given `seed`.
pub fn sample_masks(spec: &InstanceSpec, n: usize, p_keep: f64, seed: u64) -> Vec<MaskVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.total_units();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(MaskVector::full(spec));
    for _ in 1..n {
        let bits = (0..k)
            .map(|_| if rng.gen::<f64>() < p_keep { 1 } else { 0 })
            .collect();
        out.push(MaskVector::new(bits));
    }
    out
}

/// Per-modality normalized Hamming distance to the all-ones reference:
/// d_m(z) = (1/|g_m|) * #{j in g_m : z_j != 1}.
pub fn per_modality_distance(mask: &MaskVector, spec: &InstanceSpec) -> Vec<f64> {
    spec.groups()
        .map(|g| {
            let len = g.len();
            let off = g.filter(|&j| mask.get(j) != 1).count();
            off as f64 / len as f64
        })
        .collect()
}

/// N x M raw distance matrix for a set of masks.
pub fn raw_distance_matrix(masks: &[MaskVector], spec: &InstanceSpec) -> Vec<Vec<f64>> {
    masks.iter().map(|z| per_modality_distance(z, spec)).collect()
}

/// Per-modality IQR over the rows of `d_raw` (column statistics).
pub fn column_iqrs(d_raw: &[Vec<f64>]) -> Vec<f64> {
    if d_raw.is_empty() {
        return Vec::new();
    }
    let m = d_raw[0].len();
    (0..m)
        .map(|col| {
            let column: Vec<f64> = d_raw.iter().map(|row| row[col]).collect();
            stats::iqr(&column)
        })
        .collect()
}

/// Divides column m by (IQR of column m) + eps_d.
pub fn iqr_scaled_distances(d_raw: &[Vec<f64>], eps_d: f64) -> Vec<Vec<f64>> {
    let iqrs = column_iqrs(d_raw);
    d_raw
        .iter()
        .map(|row| {
            row.iter()
                .zip(&iqrs)
                .map(|(d, iqr)| d / (iqr + eps_d))
                .collect()
        })
        .collect()
}

/// Gaussian locality weights over scaled distances. Bandwidth is the median
/// aggregated distance, floored at `eps_sigma`.
pub fn kernel_weights(d_scaled: &[Vec<f64>], alpha: &[f64], eps_sigma: f64) -> (Vec<f64>, f64) {
    let aggregated: Vec<f64> = d_scaled
        .iter()
        .map(|row| row.iter().zip(alpha).map(|(d, a)| a * d).sum())
        .collect();
    let sigma = stats::median(&aggregated).max(eps_sigma);
    let weights = aggregated
        .iter()
        .map(|d| (-d * d / (sigma * sigma)).exp())
        .collect();
    (weights, sigma)
}

/// Samples masks, queries the black box, and assembles the weighted local
/// dataset. Adds exactly `sampling.n` forward calls to the explanation
/// ledger.
pub fn build_local_dataset(
    spec: &InstanceSpec,
    session: &BlackBoxSession,
    selector: &TargetSelector,
    sampling: &SamplingConfig,
    kernel_cfg: &KernelConfig,
) -> Result<Neighborhood, NeighborhoodError> {
    if sampling.n < 2 {
        return Err(NeighborhoodError::BadSampleCount(sampling.n));
    }
    let alpha = kernel_cfg.resolved_alpha(spec.num_modalities())?;
    let masks = sample_masks(spec, sampling.n, sampling.p_keep, sampling.seed);

    let mut targets = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(sampling.batch_size.max(1)) {
        targets.extend(session.query_batch(chunk, selector, CallKind::Explanation)?);
    }

    let raw_distances = raw_distance_matrix(&masks, spec);
    let iqr = column_iqrs(&raw_distances);
    let scaled = iqr_scaled_distances(&raw_distances, kernel_cfg.eps_d);
    let (weights, sigma) = kernel_weights(&scaled, &alpha, kernel_cfg.eps_sigma);

    let dataset = LocalDataset::new(masks, targets, weights)?;
    Ok(Neighborhood {
        dataset,
        raw_distances,
        kernel: KernelModel {
            alpha,
            iqr,
            eps_d: kernel_cfg.eps_d,
            sigma,
            eps_sigma: kernel_cfg.eps_sigma,
        },
    })
}

/// Rebuilds kernel weights for an existing neighborhood under different
/// modality weights (used by the modality-weight search).
pub fn reweight(
    raw_distances: &[Vec<f64>],
    alpha: &[f64],
    eps_d: f64,
    eps_sigma: f64,
) -> (Vec<f64>, KernelModel) {
    let iqr = column_iqrs(raw_distances);
    let scaled = iqr_scaled_distances(raw_distances, eps_d);
    let (weights, sigma) = kernel_weights(&scaled, alpha, eps_sigma);
    (
        weights,
        KernelModel {
            alpha: alpha.to_vec(),
            iqr,
            eps_d,
            sigma,
            eps_sigma,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::Synthetic;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn spec_2x4() -> InstanceSpec {
        InstanceSpec::new(vec!["img", "txt"], vec![4, 4]).unwrap()
    }

    #[test]
    fn first_mask_is_reference() {
        let spec = spec_2x4();
        let masks = sample_masks(&spec, 1, 0.5, 3);
        assert_eq!(masks, vec![MaskVector::full(&spec)]);
    }

    #[test]
    fn degenerate_keep_probability_yields_all_ones() {
        let spec = spec_2x4();
        for mask in sample_masks(&spec, 50, 1.0, 9) {
            assert!(mask.is_all_ones());
        }
    }

    #[test]
    fn mean_bit_concentrates_around_p_keep() {
        let spec = spec_2x4();
        let masks = sample_masks(&spec, 1000, 0.5, 42);
        let total_bits = 1000.0 * 8.0;
        let ones: f64 = masks
            .iter()
            .map(|m| m.bits().iter().map(|&b| b as f64).sum::<f64>())
            .sum();
        let mean = ones / total_bits;
        // Binomial concentration: 3 / sqrt(1000 * 8) ~ 0.034.
        assert!((mean - 0.5).abs() < 0.034, "mean bit {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = spec_2x4();
        assert_eq!(sample_masks(&spec, 100, 0.5, 7), sample_masks(&spec, 100, 0.5, 7));
        assert_ne!(sample_masks(&spec, 100, 0.5, 7), sample_masks(&spec, 100, 0.5, 8));
    }

    #[test]
    fn distance_at_reference_and_extremes() {
        let spec = spec_2x4();
        let d0 = per_modality_distance(&MaskVector::full(&spec), &spec);
        assert_eq!(d0, vec![0.0, 0.0]);
        let d1 = per_modality_distance(&MaskVector::zeros(&spec), &spec);
        assert_eq!(d1, vec![1.0, 1.0]);
        let mut two_off = MaskVector::full(&spec);
        two_off.set(0, 0);
        two_off.set(2, 0);
        assert_eq!(per_modality_distance(&two_off, &spec), vec![0.5, 0.0]);
    }

    #[test]
    fn iqr_scaling_matches_percentile_oracle() {
        let eps = 1e-8;
        // Column [0, .25, .5, .75, 1]: IQR = 0.5 by sorted-percentile oracle.
        let raw: Vec<Vec<f64>> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&d| vec![d]).collect();
        let scaled = iqr_scaled_distances(&raw, eps);
        for (row, want) in scaled.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((row[0] - want / (0.5 + eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_falls_back_to_eps() {
        let eps = 1e-8;
        let raw = vec![vec![0.3]; 4];
        let scaled = iqr_scaled_distances(&raw, eps);
        for row in &scaled {
            assert!((row[0] - 0.3 / eps).abs() < 1e-3);
        }
        // Single row: IQR of one value is 0.
        let single = iqr_scaled_distances(&[vec![0.7]], eps);
        assert!((single[0][0] - 0.7 / eps).abs() < 1e-3);
    }

    #[test]
    fn kernel_weights_hand_case() {
        // Aggregated distances {0, s, 2s}: sigma = s, weights {1, e^-1, e^-4}.
        let s = 0.35;
        let d_scaled = vec![vec![0.0], vec![s], vec![2.0 * s]];
        let (w, sigma) = kernel_weights(&d_scaled, &[1.0], 1e-12);
        assert!((sigma - s).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!((w[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((w[2] - (-4.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn all_zero_distances_hit_sigma_floor() {
        let d_scaled = vec![vec![0.0]; 5];
        let (w, sigma) = kernel_weights(&d_scaled, &[1.0], 1e-12);
        assert_eq!(sigma, 1e-12);
        assert!(w.iter().all(|&wi| wi == 1.0));
    }

    fn build_test_neighborhood(n: usize, seed: u64) -> Neighborhood {
        let spec = spec_2x4();
        let oracle = Synthetic::linear(&spec, vec![1.0; 8], 0.0).unwrap();
        let session = BlackBoxSession::new(Box::new(oracle));
        build_local_dataset(
            &spec,
            &session,
            &TargetSelector::identity(0),
            &SamplingConfig {
                n,
                p_keep: 0.5,
                seed,
                batch_size: 32,
            },
            &KernelConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn reference_row_has_unit_weight() {
        let nb = build_test_neighborhood(64, 5);
        assert_eq!(nb.dataset.weights()[0], 1.0);
        assert!(nb.dataset.weights().iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_test_neighborhood(64, 11);
        let b = build_test_neighborhood(64, 11);
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn ledger_grows_by_exactly_n() {
        let spec = spec_2x4();
        let oracle = Synthetic::linear(&spec, vec![1.0; 8], 0.0).unwrap();
        let session = BlackBoxSession::new(Box::new(oracle));
        build_local_dataset(
            &spec,
            &session,
            &TargetSelector::identity(0),
            &SamplingConfig {
                n: 200,
                p_keep: 0.5,
                seed: 1,
                batch_size: 32,
            },
            &KernelConfig::default(),
        )
        .unwrap();
        assert_eq!(session.ledger().explanation_calls, 200);
        assert_eq!(session.ledger().metric_calls, 0);
    }

    #[test]
    fn group_and_targets_are_binary() {
        let spec = spec_2x4();
        let oracle = Synthetic::group_and(&spec, 0).unwrap();
        let session = BlackBoxSession::new(Box::new(oracle));
        let nb = build_local_dataset(
            &spec,
            &session,
            &TargetSelector::identity(0),
            &SamplingConfig {
                n: 200,
                p_keep: 0.5,
                seed: 2,
                batch_size: 32,
            },
            &KernelConfig::default(),
        )
        .unwrap();
        assert!(nb.dataset.targets().iter().all(|&y| y == 0.0 || y == 1.0));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let spec = spec_2x4();
        let oracle = Synthetic::linear(&spec, vec![1.0; 8], 0.0).unwrap();
        let session = BlackBoxSession::new(Box::new(oracle));
        let err = build_local_dataset(
            &spec,
            &session,
            &TargetSelector::identity(0),
            &SamplingConfig {
                n: 1,
                p_keep: 0.5,
                seed: 0,
                batch_size: 32,
            },
            &KernelConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, NeighborhoodError::BadSampleCount(1)));
    }

    #[test]
    fn dataset_json_round_trip() {
        let nb = build_test_neighborhood(16, 3);
        let json = serde_json::to_string(&nb.dataset).unwrap();
        let back: LocalDataset = serde_json::from_str(&json).unwrap();
        assert_eq!(back, nb.dataset);
    }

    proptest! {
        #[test]
        fn distances_are_bounded(bits in proptest::collection::vec(0u8..2, 8)) {
            let spec = spec_2x4();
            let d = per_modality_distance(&MaskVector::new(bits), &spec);
            prop_assert!(d.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn weights_in_unit_interval(seed in 0u64..1000) {
            let nb = build_test_neighborhood(32, seed);
            prop_assert!(nb.dataset.weights().iter().all(|&w| w > 0.0 && w <= 1.0));
        }

        #[test]
        fn superset_deviation_never_increases_weight(seed in 0u64..500) {
            // Start from a random mask b, then zero out extra bits to get a.
            // a deviates from the reference in a superset of b's positions.
            let spec = spec_2x4();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = MaskVector::new((0..8).map(|_| rng.gen_range(0u8..2)).collect());
            let mut a = b.clone();
            for j in 0..8 {
                if a.get(j) == 1 && rng.gen_bool(0.4) {
                    a.set(j, 0);
                }
            }
            let nb = build_test_neighborhood(64, seed);
            let da = nb.kernel.aggregate(&per_modality_distance(&a, &spec));
            let db = nb.kernel.aggregate(&per_modality_distance(&b, &spec));
            prop_assert!(da >= db);
            prop_assert!(nb.kernel.weight_for_mask(&a, &spec) <= nb.kernel.weight_for_mask(&b, &spec));
        }

        #[test]
        fn common_scale_cancels(seed in 0u64..200, scale in 0.1f64..10.0) {
            // Multiplying all raw distances by c > 0 leaves weights unchanged
            // when IQR > 0 and median D > eps (IQR and sigma absorb c).
            let spec = spec_2x4();
            let masks = sample_masks(&spec, 40, 0.5, seed);
            let raw = raw_distance_matrix(&masks, &spec);
            let iqrs = column_iqrs(&raw);
            prop_assume!(iqrs.iter().all(|&q| q > 0.0));
            let scaled_raw: Vec<Vec<f64>> = raw
                .iter()
                .map(|row| row.iter().map(|d| d * scale).collect())
                .collect();
            let alpha = [0.5, 0.5];
            // Scale-invariance needs eps_d = 0 so only the IQR normalizes.
            let (w1, s1) = kernel_weights(&iqr_scaled_distances(&raw, 0.0), &alpha, 1e-12);
            let (w2, s2) = kernel_weights(&iqr_scaled_distances(&scaled_raw, 0.0), &alpha, 1e-12);
            prop_assume!(s1 > 1e-12 && s2 > 1e-12);
            for (a, b) in w1.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
