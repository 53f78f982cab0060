//! Hierarchical attribution from a fitted surrogate.
//!
//! All importances are read off the standardized-coordinate coefficients,
//! where magnitudes are comparable across units:
//!
//! * unit importance `a_j = |beta_j|`,
//! * modality importance `A_m = ||beta_{g_m}||_2`,
//! * modality share `s_m = sum_{j in g_m} |beta_j| / sum_j |beta_j|`.
//!
//! Units are ranked within each modality by `a_j`, modalities by `A_m`.

use crate::raster::{BinaryRaster, Raster, RasterError};
use crate::sgl::SurrogateFit;
use crate::space::InstanceSpec;
use serde::{Deserialize, Serialize};

/// Hierarchical explanation for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Per-unit importance a_j = |beta_j| (standardized coordinates).
    pub unit_importance: Vec<f64>,
    /// Signed standardized coefficients, for positive/negative evidence.
    pub signed_coefficients: Vec<f64>,
    /// Per-modality importance A_m = ||beta_{g_m}||_2.
    pub modality_importance: Vec<f64>,
    /// Per-modality share of absolute coefficient mass; all zero when the
    /// surrogate is empty (see `degenerate`).
    pub modality_share: Vec<f64>,
    /// Global unit indices per modality, sorted by descending importance
    /// (ties resolved toward the lower index).
    pub unit_ranking: Vec<Vec<usize>>,
    /// Modality indices sorted by descending importance.
    pub modality_ranking: Vec<usize>,
    /// Set when every coefficient is zero, in which case shares are
    /// meaningless.
    pub degenerate: bool,
}

/// Sorts `indices` by descending key with index tie-break.
fn rank_desc(indices: impl Iterator<Item = usize>, key: &[f64]) -> Vec<usize> {
    let mut v: Vec<usize> = indices.collect();
    v.sort_by(|&a, &b| {
        key[b]
            .partial_cmp(&key[a])
            .expect("importance values are finite")
            .then(a.cmp(&b))
    });
    v
}

/// Derives the hierarchical explanation from a fit.
pub fn explain(fit: &SurrogateFit, spec: &InstanceSpec) -> Explanation {
    let beta = &fit.beta_std;
    let unit_importance: Vec<f64> = beta.iter().map(|b| b.abs()).collect();
    let modality_importance: Vec<f64> = spec
        .groups()
        .map(|g| g.map(|j| beta[j] * beta[j]).sum::<f64>().sqrt())
        .collect();
    let total_mass: f64 = unit_importance.iter().sum();
    let degenerate = total_mass == 0.0;
    let modality_share: Vec<f64> = if degenerate {
        vec![0.0; spec.num_modalities()]
    } else {
        spec.groups()
            .map(|g| g.map(|j| unit_importance[j]).sum::<f64>() / total_mass)
            .collect()
    };
    let unit_ranking: Vec<Vec<usize>> = spec
        .groups()
        .map(|g| rank_desc(g, &unit_importance))
        .collect();
    let modality_ranking = rank_desc(0..spec.num_modalities(), &modality_importance);
    Explanation {
        unit_importance,
        signed_coefficients: beta.clone(),
        modality_importance,
        modality_share,
        unit_ranking,
        modality_ranking,
        degenerate,
    }
}

impl Explanation {
    /// Global unit indices in descending importance order (joint ranking
    /// across all modalities), index tie-break.
    pub fn global_unit_ranking(&self) -> Vec<usize> {
        rank_desc(0..self.unit_importance.len(), &self.unit_importance)
    }
}

/// Positive-evidence heatmap together with its degeneracy flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveEvidenceMap {
    pub heatmap: Raster,
    /// True when no unit had positive coefficient mass; the raster is all
    /// zeros in that case.
    pub degenerate: bool,
}

/// Aggregates unit footprints weighted by the positive part of the
/// modality's coefficients, then min-max normalizes to [0,1]. Overlapping
/// footprints sum before normalization.
pub fn positive_evidence_map(
    explanation: &Explanation,
    spec: &InstanceSpec,
    modality: usize,
    unit_pixel_masks: &[BinaryRaster],
) -> Result<PositiveEvidenceMap, RasterError> {
    let group = spec.group(modality);
    let first = unit_pixel_masks
        .first()
        .ok_or(RasterError::BadDataLength(0, 0, 0))?;
    let (h, w) = (first.height, first.width);
    if unit_pixel_masks.len() != group.len() {
        return Err(RasterError::BadDataLength(
            unit_pixel_masks.len(),
            group.len(),
            1,
        ));
    }
    for m in unit_pixel_masks {
        if m.height != h || m.width != w {
            return Err(RasterError::ShapeMismatch(m.height, m.width, h, w));
        }
    }

    let mut heat = Raster::zeros(h, w);
    for (mask, j) in unit_pixel_masks.iter().zip(group) {
        let weight = explanation.signed_coefficients[j].max(0.0);
        if weight == 0.0 {
            continue;
        }
        for (out, &bit) in heat.data.iter_mut().zip(&mask.data) {
            if bit == 1 {
                *out += weight;
            }
        }
    }

    let max = heat.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = heat.data.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return Ok(PositiveEvidenceMap {
            heatmap: Raster::zeros(h, w),
            degenerate: true,
        });
    }
    if max > min {
        for v in &mut heat.data {
            *v = (*v - min) / (max - min);
        }
    } else {
        // Constant positive heat normalizes to 1 everywhere.
        for v in &mut heat.data {
            *v = 1.0;
        }
    }
    Ok(PositiveEvidenceMap {
        heatmap: heat,
        degenerate: false,
    })
}
