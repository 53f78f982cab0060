//! Evaluation metrics for explanations.
//!
//! Faithfulness is measured by deletion/insertion AOPC over the black box,
//! compactness by the number of selected units, stability by mean pairwise
//! Spearman rank correlation across repeated runs, and cost by exact
//! forward-call counts (explanation vs metric buckets never mix).
//!
//! When a ground-truth region is available, the alignment suite scores the
//! positive-evidence heatmap against it: contrast-heat z-score against a
//! circular-shift null, pixel-level average precision, percentile-threshold
//! IoU, and top-K positive-unit overlap decompositions.

use crate::attribution::Explanation;
use crate::blackbox::{BlackBoxError, BlackBoxSession, CallKind, TargetSelector};
use crate::raster::{BinaryRaster, Raster, RasterError};
use crate::space::{InstanceSpec, MaskVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    BlackBox(#[from] BlackBoxError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("ground-truth mask must contain both classes")]
    DegenerateMask,
    #[error("heatmap has no nonzero pixels to take percentiles over")]
    AllZeroHeatmap,
    #[error("stability needs at least 2 runs, got {0}")]
    NotEnoughRuns(usize),
    #[error("every run pair had a constant importance vector")]
    ConstantVector,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AopcMode {
    Deletion,
    Insertion,
}

/// AOPC value plus the underlying output-difference curve (steps+1 points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopcResult {
    pub value: f64,
    pub curve: Vec<f64>,
}

/// Splits `order` into `steps` chunks; remainder positions go one per chunk
/// from the front.
fn chunk_order(order: &[usize], steps: usize) -> Vec<Vec<usize>> {
    let base = order.len() / steps;
    let rem = order.len() % steps;
    let mut chunks = Vec::with_capacity(steps);
    let mut at = 0;
    for t in 0..steps {
        let size = base + usize::from(t < rem);
        chunks.push(order[at..at + size].to_vec());
        at += size;
    }
    chunks
}

/// Area over the perturbation curve for an explicit unit ordering.
///
/// Deletion starts from the all-ones mask and zeroes units chunk by chunk;
/// insertion starts from all-zeros and adds them. Each call queries the
/// black box exactly `steps + 1` times, logged as metric calls.
pub fn aopc_with_order(
    order: &[usize],
    spec: &InstanceSpec,
    session: &BlackBoxSession,
    selector: &TargetSelector,
    steps: usize,
    mode: AopcMode,
) -> Result<AopcResult, MetricsError> {
    if steps == 0 {
        return Err(MetricsError::InvalidParameter("steps must be >= 1".into()));
    }
    let chunks = chunk_order(order, steps);
    let mut current = match mode {
        AopcMode::Deletion => MaskVector::full(spec),
        AopcMode::Insertion => MaskVector::zeros(spec),
    };
    let mut masks = Vec::with_capacity(steps + 1);
    masks.push(current.clone());
    for chunk in &chunks {
        for &j in chunk {
            current.set(j, if mode == AopcMode::Deletion { 0 } else { 1 });
        }
        masks.push(current.clone());
    }
    let outputs = session.query_batch(&masks, selector, CallKind::Metric)?;
    let reference = outputs[0];
    let curve: Vec<f64> = outputs
        .iter()
        .map(|y| match mode {
            AopcMode::Deletion => reference - y,
            AopcMode::Insertion => y - reference,
        })
        .collect();
    let value = curve.iter().sum::<f64>() / (steps + 1) as f64;
    Ok(AopcResult { value, curve })
}

/// AOPC in descending global importance order of `explanation`.
pub fn aopc(
    explanation: &Explanation,
    spec: &InstanceSpec,
    session: &BlackBoxSession,
    selector: &TargetSelector,
    steps: usize,
    mode: AopcMode,
) -> Result<AopcResult, MetricsError> {
    aopc_with_order(
        &explanation.global_unit_ranking(),
        spec,
        session,
        selector,
        steps,
        mode,
    )
}

/// Number of units with importance strictly above `threshold`.
pub fn l0(explanation: &Explanation, threshold: f64) -> usize {
    explanation
        .unit_importance
        .iter()
        .filter(|&&a| a > threshold)
        .count()
}

/// Fraction of a modality's units with nonzero importance.
pub fn coverage(explanation: &Explanation, spec: &InstanceSpec, modality: usize) -> f64 {
    let g = spec.group(modality);
    let len = g.len();
    let active = g.filter(|&j| explanation.unit_importance[j] > 0.0).count();
    active as f64 / len as f64
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks; `None` when either vector
/// is constant.
fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanStability {
    /// Mean pairwise correlation over the usable pairs.
    pub mean_rho: f64,
    pub pairs_used: usize,
    /// Pairs dropped because a run had all-equal importances.
    pub pairs_excluded: usize,
}

/// Mean pairwise Spearman correlation of importance vectors across runs.
pub fn spearman_stability(runs: &[Vec<f64>]) -> Result<SpearmanStability, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::NotEnoughRuns(runs.len()));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for i in 0..runs.len() {
        for j in (i + 1)..runs.len() {
            match spearman(&runs[i], &runs[j]) {
                Some(rho) => {
                    total += rho;
                    used += 1;
                }
                None => excluded += 1,
            }
        }
    }
    if used == 0 {
        return Err(MetricsError::ConstantVector);
    }
    Ok(SpearmanStability {
        mean_rho: total / used as f64,
        pairs_used: used,
        pairs_excluded: excluded,
    })
}

/// Contrast-heat statistic and its z-score against a circular-shift null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastHeat {
    pub ch_pos: f64,
    pub ch_z: f64,
}

fn contrast(heat: &Raster, gt: &BinaryRaster) -> f64 {
    let mut sum_in = 0.0;
    let mut n_in = 0usize;
    let mut sum_out = 0.0;
    let mut n_out = 0usize;
    for (h, &g) in heat.data.iter().zip(&gt.data) {
        if g == 1 {
            sum_in += h;
            n_in += 1;
        } else {
            sum_out += h;
            n_out += 1;
        }
    }
    sum_in / n_in as f64 - sum_out / n_out as f64
}

/// Mean heat inside minus outside the ground truth, standardized against
/// rolls of the ground-truth mask by random nonzero circular shifts.
pub fn contrast_heat_z(
    heat: &Raster,
    gt: &BinaryRaster,
    rolls: usize,
    seed: u64,
) -> Result<ContrastHeat, MetricsError> {
    heat.same_shape(gt.height, gt.width)?;
    let area = gt.area();
    if area == 0 || area == gt.data.len() {
        return Err(MetricsError::DegenerateMask);
    }
    if rolls < 2 {
        return Err(MetricsError::InvalidParameter("rolls must be >= 2".into()));
    }
    let ch_pos = contrast(heat, gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(rolls);
    for _ in 0..rolls {
        let (mut dr, mut dc) = (0, 0);
        while dr == 0 && dc == 0 {
            dr = rng.gen_range(0..gt.height);
            dc = rng.gen_range(0..gt.width);
        }
        null.push(contrast(heat, &gt.rolled(dr, dc)));
    }
    let mu = null.iter().sum::<f64>() / rolls as f64;
    let var = null.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rolls as f64;
    let ch_z = (ch_pos - mu) / (var.sqrt() + 1e-12);
    Ok(ContrastHeat { ch_pos, ch_z })
}

/// Average precision of pixels ranked by heat, ties grouped: each distinct
/// heat level contributes one (recall, precision) point at its block
/// boundary.
pub fn pixel_ap(heat: &Raster, gt: &BinaryRaster) -> Result<f64, MetricsError> {
    heat.same_shape(gt.height, gt.width)?;
    let positives = gt.area();
    if positives == 0 {
        return Err(MetricsError::DegenerateMask);
    }
    let mut idx: Vec<usize> = (0..heat.data.len()).collect();
    idx.sort_by(|&a, &b| heat.data[b].partial_cmp(&heat.data[a]).expect("finite heat"));
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut cum_tp = 0usize;
    let mut cum_n = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let level = heat.data[idx[i]];
        let mut tp_block = 0usize;
        loop {
            if gt.data[idx[j]] == 1 {
                tp_block += 1;
            }
            if j + 1 < idx.len() && heat.data[idx[j + 1]] == level {
                j += 1;
            } else {
                break;
            }
        }
        cum_tp += tp_block;
        cum_n += j - i + 1;
        let recall = cum_tp as f64 / positives as f64;
        let precision = cum_tp as f64 / cum_n as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouPoint {
    pub percentile: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouAuc {
    pub auc: f64,
    pub curve: Vec<IouPoint>,
}

/// Default percentile grid {90, ..., 99}.
pub fn default_percentile_grid() -> Vec<f64> {
    (90..=99).map(|p| p as f64).collect()
}

/// IoU between heat thresholded at each percentile and the ground truth;
/// the AUC is the mean over the grid. Thresholds are taken over nonzero
/// heat pixels when `nonzero_only`.
pub fn iou_auc(
    heat: &Raster,
    gt: &BinaryRaster,
    percentiles: &[f64],
    nonzero_only: bool,
) -> Result<IouAuc, MetricsError> {
    heat.same_shape(gt.height, gt.width)?;
    if percentiles.is_empty() {
        return Err(MetricsError::InvalidParameter("empty percentile grid".into()));
    }
    let population: Vec<f64> = if nonzero_only {
        heat.data.iter().copied().filter(|&v| v != 0.0).collect()
    } else {
        heat.data.clone()
    };
    if population.is_empty() {
        return Err(MetricsError::AllZeroHeatmap);
    }
    let mut curve = Vec::with_capacity(percentiles.len());
    for &p in percentiles {
        let t = crate::stats::percentile(&population, p);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (h, &g) in heat.data.iter().zip(&gt.data) {
            let m = *h >= t;
            let g = g == 1;
            if m && g {
                inter += 1;
            }
            if m || g {
                union += 1;
            }
        }
        let iou = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        curve.push(IouPoint { percentile: p, iou });
    }
    let auc = curve.iter().map(|pt| pt.iou).sum::<f64>() / curve.len() as f64;
    Ok(IouAuc { auc, curve })
}

/// Top-K positive-unit overlap decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkOverlap {
    /// 100 * (covered ground-truth pixels) / |G|.
    pub gt_cov: f64,
    /// 100 * coefficient-mass-weighted mean overlap ratio.
    pub mass_prec: f64,
    /// Whether any selected unit overlaps at ratio >= tau.
    pub hit: bool,
    /// Unit indices (into the raster list) actually selected.
    pub selected: Vec<usize>,
    /// Fewer than k positive units were available.
    pub shortfall: bool,
    /// No unit had a positive coefficient; all numbers are zero.
    pub no_positive_units: bool,
}

/// Selects the top-k units by descending positive coefficient and scores
/// their overlap with the ground truth.
pub fn topk_overlap(
    unit_rasters: &[BinaryRaster],
    coefficients: &[f64],
    gt: &BinaryRaster,
    k: usize,
    tau: f64,
) -> Result<TopkOverlap, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidParameter("k must be >= 1".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(MetricsError::InvalidParameter("tau must lie in (0,1]".into()));
    }
    if unit_rasters.len() != coefficients.len() {
        return Err(MetricsError::InvalidParameter(format!(
            "{} rasters vs {} coefficients",
            unit_rasters.len(),
            coefficients.len()
        )));
    }
    let g_area = gt.area();
    if g_area == 0 {
        return Err(MetricsError::DegenerateMask);
    }
    for r in unit_rasters {
        if r.height != gt.height || r.width != gt.width {
            return Err(MetricsError::Raster(RasterError::ShapeMismatch(
                r.height, r.width, gt.height, gt.width,
            )));
        }
    }

    let mut positive: Vec<usize> = (0..coefficients.len())
        .filter(|&j| coefficients[j] > 0.0)
        .collect();
    if positive.is_empty() {
        return Ok(TopkOverlap {
            gt_cov: 0.0,
            mass_prec: 0.0,
            hit: false,
            selected: vec![],
            shortfall: true,
            no_positive_units: true,
        });
    }
    positive.sort_by(|&a, &b| {
        coefficients[b]
            .partial_cmp(&coefficients[a])
            .expect("finite coefficients")
            .then(a.cmp(&b))
    });
    let shortfall = positive.len() < k;
    let selected: Vec<usize> = positive.into_iter().take(k).collect();

    let mut overlap_sum = 0.0;
    let mut weighted_ratio = 0.0;
    let mut weight_sum = 0.0;
    let mut max_ratio: f64 = 0.0;
    for &j in &selected {
        let unit = &unit_rasters[j];
        let area = unit.area();
        let overlap = unit
            .data
            .iter()
            .zip(&gt.data)
            .filter(|(&u, &g)| u == 1 && g == 1)
            .count();
        let ratio = overlap as f64 / (area.max(1)) as f64;
        overlap_sum += overlap as f64;
        weighted_ratio += coefficients[j] * ratio;
        weight_sum += coefficients[j];
        max_ratio = max_ratio.max(ratio);
    }
    Ok(TopkOverlap {
        gt_cov: 100.0 * overlap_sum / g_area as f64,
        mass_prec: 100.0 * weighted_ratio / weight_sum,
        hit: max_ratio >= tau,
        selected,
        shortfall,
        no_positive_units: false,
    })
}

/// Alignment block of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub ch_pos: f64,
    pub ch_z: f64,
    pub pixel_ap: f64,
    pub iou_auc: f64,
    pub iou_curve: Vec<IouPoint>,
    pub gt_cov_at_k: f64,
    pub mass_prec_at_k: f64,
    pub spg_hit: bool,
    pub k: usize,
    pub tau: f64,
    pub topk_shortfall: bool,
    pub heatmap_degenerate: bool,
}

/// Full per-instance metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aopc_del: Option<f64>,
    pub aopc_del_curve: Option<Vec<f64>>,
    pub aopc_ins: Option<f64>,
    pub aopc_ins_curve: Option<Vec<f64>>,
    pub l0: usize,
    /// Present only in stability mode (multiple runs).
    pub spearman: Option<SpearmanStability>,
    /// Per-modality coverage, in modality order.
    pub coverage: Vec<f64>,
    pub fwd_calls: crate::blackbox::LedgerSnapshot,
    pub wall_time_seconds: f64,
    pub alignment: Option<AlignmentReport>,
}
