//! Optional per-instance selection of the kernel's modality weights.
//!
//! The default pipeline keeps uniform weights; when enabled, the search
//! starts from a base point proportional to each modality's inverse
//! distance spread, sweeps a small logarithmic grid around it, and scores
//! each candidate on a held-out validation split by weighted R^2 with a
//! penalty for kernels that concentrate too much mass on too few rows.

use crate::neighborhood::{self, KernelModel, LocalDataset, Neighborhood, NeighborhoodError};
use crate::sgl::{self, SglConfig, SglError};
use crate::space::InstanceSpec;
use crate::stats;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlphaError {
    #[error("weighted target variance on the validation split is zero")]
    DegenerateTargets,
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("candidate grid is empty")]
    EmptyGrid,
    #[error("candidate grid too large: {0} candidates")]
    GridTooLarge(usize),
    #[error("dataset of {n} rows cannot provide {needed} validation rows plus a training split")]
    SplitTooSmall { n: usize, needed: usize },
    #[error(transparent)]
    Fit(#[from] SglError),
    #[error(transparent)]
    Neighborhood(#[from] NeighborhoodError),
}

fn default_grid_multipliers() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}

fn default_lambda_deg() -> f64 {
    1.0
}

fn default_val_fraction() -> f64 {
    0.25
}

/// Search settings. `n_min = None` resolves to `0.1 * N` at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearchConfig {
    /// Whether the pipeline runs the search at all (uniform weights
    /// otherwise).
    #[serde(default)]
    pub enabled: bool,
    /// Per-modality multipliers applied around the base point,
    /// combinatorially over modalities, then renormalized.
    #[serde(default = "default_grid_multipliers")]
    pub grid_multipliers: Vec<f64>,
    /// Minimum effective validation sample size before the degeneracy
    /// penalty fires.
    #[serde(default)]
    pub n_min: Option<f64>,
    #[serde(default = "default_lambda_deg")]
    pub lambda_deg: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for AlphaSearchConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            grid_multipliers: default_grid_multipliers(),
            n_min: None,
            lambda_deg: default_lambda_deg(),
            val_fraction: default_val_fraction(),
            split_seed: 0,
        }
    }
}

/// Base modality weights, proportional to 1 / (IQR_m + eps_d) so modalities
/// with concentrated perturbation distances are not over-downweighted.
pub fn base_alpha(raw_distances: &[Vec<f64>], eps_d: f64) -> Vec<f64> {
    let iqrs = neighborhood::column_iqrs(raw_distances);
    let raw: Vec<f64> = iqrs.iter().map(|q| 1.0 / (q + eps_d)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|a| a / sum).collect()
}

/// Weighted coefficient of determination against the weighted-mean
/// baseline: 1 - sum w(y - yhat)^2 / sum w(y - ybar_w)^2.
pub fn weighted_r2(targets: &[f64], predictions: &[f64], weights: &[f64]) -> Result<f64, AlphaError> {
    debug_assert_eq!(targets.len(), predictions.len());
    debug_assert_eq!(targets.len(), weights.len());
    let ybar = stats::weighted_mean(targets, weights);
    let ss_tot: f64 = targets
        .iter()
        .zip(weights)
        .map(|(y, w)| w * (y - ybar) * (y - ybar))
        .sum();
    if ss_tot <= 0.0 {
        return Err(AlphaError::DegenerateTargets);
    }
    let ss_res: f64 = targets
        .iter()
        .zip(predictions)
        .zip(weights)
        .map(|((y, p), w)| w * (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Effective number of samples: (sum w)^2 / sum w^2.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64, AlphaError> {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq <= 0.0 {
        return Err(AlphaError::AllZeroWeights);
    }
    Ok(sum * sum / sum_sq)
}

/// Fidelity-vs-degeneracy objective: the penalty fires only strictly below
/// `n_min` (equality is not penalized).
pub fn search_objective(wr2: f64, neff: f64, n_min: f64, lambda_deg: f64) -> f64 {
    wr2 - if neff < n_min { lambda_deg } else { 0.0 }
}

/// One evaluated grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaCandidate {
    pub alpha: Vec<f64>,
    pub wr2: f64,
    pub neff: f64,
    pub objective: f64,
    pub penalized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaSearchDiagnostics {
    pub base_alpha: Vec<f64>,
    pub n_min: f64,
    pub candidates: Vec<AlphaCandidate>,
    pub selected_index: usize,
}

/// Search outcome: the winning weights and the kernel refit on the full
/// neighborhood under them.
#[derive(Debug, Clone)]
pub struct AlphaSelection {
    pub alpha_star: Vec<f64>,
    pub weights: Vec<f64>,
    pub kernel: KernelModel,
    pub diagnostics: AlphaSearchDiagnostics,
}

/// All multiplier tuples applied to the base point, renormalized and
/// deduplicated (preserving first occurrence in lexicographic tuple order).
fn build_grid(
    base: &[f64],
    multipliers: &[f64],
) -> Result<Vec<Vec<f64>>, AlphaError> {
    if multipliers.is_empty() {
        return Err(AlphaError::EmptyGrid);
    }
    let m = base.len();
    let total = multipliers
        .len()
        .checked_pow(m as u32)
        .filter(|&t| t <= 100_000)
        .ok_or_else(|| AlphaError::GridTooLarge(usize::MAX))?;
    let mut grid: Vec<Vec<f64>> = Vec::new();
    for index in 0..total {
        let mut rem = index;
        let mut candidate: Vec<f64> = Vec::with_capacity(m);
        for _ in 0..m {
            candidate.push(multipliers[rem % multipliers.len()]);
            rem /= multipliers.len();
        }
        for (c, b) in candidate.iter_mut().zip(base) {
            *c *= b;
        }
        let sum: f64 = candidate.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        for c in &mut candidate {
            *c /= sum;
        }
        let duplicate = grid.iter().any(|existing: &Vec<f64>| {
            existing
                .iter()
                .zip(&candidate)
                .all(|(a, b)| (a - b).abs() <= 1e-12)
        });
        if !duplicate {
            grid.push(candidate);
        }
    }
    if grid.is_empty() {
        return Err(AlphaError::EmptyGrid);
    }
    Ok(grid)
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn lexicographic_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Grid search over modality weights.
///
/// For each candidate the kernel weights are recomputed on the full
/// neighborhood, a surrogate is fitted on the training split (reference row
/// always in train), and the candidate is scored on the validation split.
/// Ties break toward the candidate closest to the base point in L1, then
/// lexicographically. The returned weights are recomputed on the full
/// neighborhood under the winner.
pub fn select_alpha(
    nb: &Neighborhood,
    spec: &InstanceSpec,
    cfg: &AlphaSearchConfig,
    sgl_cfg: &SglConfig,
) -> Result<AlphaSelection, AlphaError> {
    let n = nb.dataset.n();
    let val_count = ((cfg.val_fraction * n as f64).round() as usize).max(2);
    if val_count + 2 > n {
        return Err(AlphaError::SplitTooSmall { n, needed: val_count });
    }

    let base = base_alpha(&nb.raw_distances, nb.kernel.eps_d);
    let grid = build_grid(&base, &cfg.grid_multipliers)?;
    let n_min = cfg.n_min.unwrap_or(0.1 * n as f64);

    // Uniform random split over rows 1..N; the reference row stays in train.
    let mut rest: Vec<usize> = (1..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
    rest.shuffle(&mut rng);
    let (val_rows, train_tail) = rest.split_at(val_count);
    let mut train_rows: Vec<usize> = vec![0];
    train_rows.extend_from_slice(train_tail);

    let masks = nb.dataset.masks();
    let targets = nb.dataset.targets();

    let mut candidates = Vec::with_capacity(grid.len());
    let mut best: Option<usize> = None;
    for alpha in &grid {
        let (weights_full, _) = neighborhood::reweight(
            &nb.raw_distances,
            alpha,
            nb.kernel.eps_d,
            nb.kernel.eps_sigma,
        );
        let train = LocalDataset::new(
            train_rows.iter().map(|&i| masks[i].clone()).collect(),
            train_rows.iter().map(|&i| targets[i]).collect(),
            train_rows.iter().map(|&i| weights_full[i]).collect(),
        )?;
        let tau = sgl::group_penalty_weights(&train, spec);
        let fit = sgl::fit(&train, spec, sgl_cfg, &tau)?;

        let val_targets: Vec<f64> = val_rows.iter().map(|&i| targets[i]).collect();
        let val_weights: Vec<f64> = val_rows.iter().map(|&i| weights_full[i]).collect();
        let val_preds: Vec<f64> = val_rows
            .iter()
            .map(|&i| fit.predict_bits(masks[i].bits()))
            .collect();
        let wr2 = weighted_r2(&val_targets, &val_preds, &val_weights)?;
        let neff = effective_sample_size(&val_weights)?;
        let objective = search_objective(wr2, neff, n_min, cfg.lambda_deg);
        candidates.push(AlphaCandidate {
            alpha: alpha.clone(),
            wr2,
            neff,
            objective,
            penalized: neff < n_min,
        });

        let index = candidates.len() - 1;
        best = Some(match best {
            None => index,
            Some(current) => {
                let cur = &candidates[current];
                let new = &candidates[index];
                if new.objective > cur.objective {
                    index
                } else if new.objective == cur.objective {
                    let d_new = l1_distance(&new.alpha, &base);
                    let d_cur = l1_distance(&cur.alpha, &base);
                    if d_new < d_cur
                        || (d_new == d_cur && lexicographic_less(&new.alpha, &cur.alpha))
                    {
                        index
                    } else {
                        current
                    }
                } else {
                    current
                }
            }
        });
    }

    let selected_index = best.ok_or(AlphaError::EmptyGrid)?;
    let alpha_star = candidates[selected_index].alpha.clone();
    let (weights, kernel) = neighborhood::reweight(
        &nb.raw_distances,
        &alpha_star,
        nb.kernel.eps_d,
        nb.kernel.eps_sigma,
    );
    Ok(AlphaSelection {
        alpha_star,
        weights,
        kernel,
        diagnostics: AlphaSearchDiagnostics {
            base_alpha: base,
            n_min,
            candidates,
            selected_index,
        },
    })
}
