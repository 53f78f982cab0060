//! End-to-end explanation pipeline and its run configuration.
//!
//! One run: build the interpretable space, sample and query the
//! neighborhood, optionally search modality weights, fit the surrogate
//! (plus ridge refit), derive the hierarchical explanation, and score it.
//! Everything a run produced is returned in [`RunArtifacts`]; serializing
//! those files is the front end's job.

use crate::alpha::{self, AlphaError, AlphaSearchConfig, AlphaSearchDiagnostics};
use crate::attribution::{self, Explanation, PositiveEvidenceMap};
use crate::blackbox::{
    BlackBoxError, BlackBoxSession, CallKind, HttpEndpoint, LedgerSnapshot, SubprocessEndpoint,
    SyntheticConfig, TargetSelector,
};
use crate::metrics::{
    self, AlignmentReport, AopcMode, MetricReport, MetricsError, SpearmanStability,
};
use crate::neighborhood::{
    self, KernelConfig, KernelModel, LocalDataset, NeighborhoodError, SamplingConfig,
};
use crate::raster::BinaryRaster;
use crate::sgl::{self, SglConfig, SglError, SurrogateFit};
use crate::space::{InstanceSpec, MaskVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    BlackBox(#[from] BlackBoxError),
    #[error(transparent)]
    Neighborhood(#[from] NeighborhoodError),
    #[error(transparent)]
    Alpha(#[from] AlphaError),
    #[error(transparent)]
    Sgl(#[from] SglError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("alignment config: {0}")]
    Alignment(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad json in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// How to reach the black box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EndpointConfig {
    /// Built-in oracle, for tests and benchmarks.
    Synthetic(SyntheticConfig),
    /// Child process speaking newline-delimited JSON on its stdio.
    Subprocess { command: Vec<String> },
    /// HTTP endpoint accepting one POSTed request per mask.
    Http { url: String },
}

fn default_steps() -> usize {
    20
}

fn default_k() -> usize {
    8
}

fn default_tau() -> f64 {
    0.1
}

fn default_rolls() -> usize {
    50
}

fn default_true() -> bool {
    true
}

/// Which metrics to compute after explaining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricToggles {
    #[serde(default = "default_true")]
    pub aopc_deletion: bool,
    #[serde(default = "default_true")]
    pub aopc_insertion: bool,
    /// Chunked deletion/insertion steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub coverage: bool,
    /// Importance threshold for the selected-unit count.
    #[serde(default)]
    pub l0_threshold: f64,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            aopc_deletion: true,
            aopc_insertion: true,
            steps: default_steps(),
            coverage: true,
            l0_threshold: 0.0,
        }
    }
}

/// Ground-truth alignment inputs and knobs. Unit footprints and the
/// ground-truth mask are JSON files holding arrays of [`BinaryRaster`] / a
/// single [`BinaryRaster`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Modality whose units carry the pixel footprints.
    pub modality: String,
    pub unit_masks_path: String,
    pub ground_truth_path: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_rolls")]
    pub rolls: usize,
    #[serde(default)]
    pub rolls_seed: u64,
    /// Percentile grid for the IoU curve; empty means the default
    /// {90, ..., 99}.
    #[serde(default)]
    pub percentiles: Vec<f64>,
}

fn default_n() -> usize {
    800
}

fn default_batch_size() -> usize {
    32
}

fn default_p_keep() -> f64 {
    0.5
}

/// Full run configuration; the config file is exactly this, as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub endpoint: EndpointConfig,
    pub spec: InstanceSpec,
    #[serde(default)]
    pub target: TargetSelector,
    #[serde(default = "default_n")]
    pub n_perturbations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_p_keep")]
    pub p_keep: f64,
    #[serde(default)]
    pub seed: u64,
    /// Query the all-ones reference once more (one extra explanation call)
    /// and record its output in the run metadata.
    #[serde(default)]
    pub reference_requery: bool,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub alpha_search: AlphaSearchConfig,
    #[serde(default)]
    pub sgl: SglConfig,
    #[serde(default)]
    pub metrics: MetricToggles,
    #[serde(default)]
    pub alignment: Option<AlignmentConfig>,
}

/// Serialized neighborhood: everything needed to re-fit without forward
/// calls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetArtifact {
    pub spec: InstanceSpec,
    pub dataset: LocalDataset,
    pub kernel: KernelModel,
    pub seed: u64,
}

/// Run metadata: config echo, cost accounting, and timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: RunConfig,
    pub seed: u64,
    pub ledger: LedgerSnapshot,
    pub wall_time_seconds: f64,
    /// Output of the optional reference re-query.
    pub reference_output: Option<f64>,
}

/// Everything one explanation run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub explanation: Explanation,
    pub fit: SurrogateFit,
    pub dataset: DatasetArtifact,
    pub metrics: MetricReport,
    pub meta: RunMeta,
    pub heatmap: Option<PositiveEvidenceMap>,
    pub alpha_search: Option<AlphaSearchDiagnostics>,
}

/// Builds a live session for an endpoint description.
pub fn connect(endpoint: &EndpointConfig, spec: &InstanceSpec) -> Result<BlackBoxSession, PipelineError> {
    let predictor: Box<dyn crate::blackbox::Predictor> = match endpoint {
        EndpointConfig::Synthetic(cfg) => Box::new(cfg.build(spec)?),
        EndpointConfig::Subprocess { command } => {
            let (program, args) = command
                .split_first()
                .ok_or_else(|| BlackBoxError::EndpointUnreachable("empty command".into()))?;
            Box::new(SubprocessEndpoint::spawn(program, args)?)
        }
        EndpointConfig::Http { url } => Box::new(HttpEndpoint::new(url.clone())),
    };
    Ok(BlackBoxSession::new(predictor))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &str) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(Path::new(path)).map_err(|source| PipelineError::Io {
        path: path.to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_string(),
        source,
    })
}

struct AlignmentInputs {
    modality: usize,
    unit_masks: Vec<BinaryRaster>,
    ground_truth: BinaryRaster,
}

fn load_alignment(
    cfg: &AlignmentConfig,
    spec: &InstanceSpec,
) -> Result<AlignmentInputs, PipelineError> {
    let modality = spec.modality_index(&cfg.modality).ok_or_else(|| {
        PipelineError::Alignment(format!("unknown modality `{}`", cfg.modality))
    })?;
    let unit_masks: Vec<BinaryRaster> = read_json(&cfg.unit_masks_path)?;
    let ground_truth: BinaryRaster = read_json(&cfg.ground_truth_path)?;
    if unit_masks.len() != spec.group(modality).len() {
        return Err(PipelineError::Alignment(format!(
            "{} unit masks for a modality with {} units",
            unit_masks.len(),
            spec.group(modality).len()
        )));
    }
    Ok(AlignmentInputs {
        modality,
        unit_masks,
        ground_truth,
    })
}

/// Runs the full pipeline for one instance.
pub fn run_explain(config: &RunConfig) -> Result<RunArtifacts, PipelineError> {
    let session = connect(&config.endpoint, &config.spec)?;
    run_explain_with_session(config, &session)
}

/// Same as [`run_explain`] but on a caller-owned session, so several runs
/// can share one endpoint (and one ledger is inspectable afterwards).
pub fn run_explain_with_session(
    config: &RunConfig,
    session: &BlackBoxSession,
) -> Result<RunArtifacts, PipelineError> {
    let started = Instant::now();
    let spec = &config.spec;

    // Neighborhood.
    let nb = neighborhood::build_local_dataset(
        spec,
        session,
        &config.target,
        &SamplingConfig {
            n: config.n_perturbations,
            p_keep: config.p_keep,
            seed: config.seed,
            batch_size: config.batch_size,
        },
        &config.kernel,
    )?;

    // Optional modality-weight search; replaces the locality weights.
    let (dataset, kernel, alpha_diag) = if config.alpha_search.enabled {
        let sel = alpha::select_alpha(&nb, spec, &config.alpha_search, &config.sgl)?;
        let dataset = LocalDataset::new(
            nb.dataset.masks().to_vec(),
            nb.dataset.targets().to_vec(),
            sel.weights,
        )?;
        (dataset, sel.kernel, Some(sel.diagnostics))
    } else {
        (nb.dataset, nb.kernel, None)
    };

    let reference_output = if config.reference_requery {
        let y = session.query_batch(
            &[MaskVector::full(spec)],
            &config.target,
            CallKind::Explanation,
        )?;
        Some(y[0])
    } else {
        None
    };

    // Surrogate.
    let tau = sgl::group_penalty_weights(&dataset, spec);
    let mut fit = sgl::fit(&dataset, spec, &config.sgl, &tau)?;
    if config.sgl.ridge_refit {
        fit = sgl::ridge_refit(&fit, &dataset, spec, config.sgl.ridge_lambda);
    }
    let explanation = attribution::explain(&fit, spec);

    // Metrics.
    let toggles = &config.metrics;
    let (aopc_del, aopc_del_curve) = if toggles.aopc_deletion {
        let r = metrics::aopc(
            &explanation,
            spec,
            session,
            &config.target,
            toggles.steps,
            AopcMode::Deletion,
        )?;
        (Some(r.value), Some(r.curve))
    } else {
        (None, None)
    };
    let (aopc_ins, aopc_ins_curve) = if toggles.aopc_insertion {
        let r = metrics::aopc(
            &explanation,
            spec,
            session,
            &config.target,
            toggles.steps,
            AopcMode::Insertion,
        )?;
        (Some(r.value), Some(r.curve))
    } else {
        (None, None)
    };
    let coverage: Vec<f64> = if toggles.coverage {
        (0..spec.num_modalities())
            .map(|m| metrics::coverage(&explanation, spec, m))
            .collect()
    } else {
        Vec::new()
    };

    let mut heatmap = None;
    let alignment = match &config.alignment {
        None => None,
        Some(acfg) => {
            let inputs = load_alignment(acfg, spec)?;
            let map = attribution::positive_evidence_map(
                &explanation,
                spec,
                inputs.modality,
                &inputs.unit_masks,
            )
            .map_err(MetricsError::Raster)?;
            let report = alignment_report(acfg, &inputs, &explanation, spec, &map)?;
            heatmap = Some(map);
            Some(report)
        }
    };

    let wall_time_seconds = started.elapsed().as_secs_f64();
    let ledger = session.ledger();
    let metrics = MetricReport {
        aopc_del,
        aopc_del_curve,
        aopc_ins,
        aopc_ins_curve,
        l0: metrics::l0(&explanation, toggles.l0_threshold),
        spearman: None,
        coverage,
        fwd_calls: ledger,
        wall_time_seconds,
        alignment,
    };

    Ok(RunArtifacts {
        explanation,
        fit,
        dataset: DatasetArtifact {
            spec: spec.clone(),
            dataset,
            kernel,
            seed: config.seed,
        },
        metrics,
        meta: RunMeta {
            config: config.clone(),
            seed: config.seed,
            ledger,
            wall_time_seconds,
            reference_output,
        },
        heatmap,
        alpha_search: alpha_diag,
    })
}

fn alignment_report(
    cfg: &AlignmentConfig,
    inputs: &AlignmentInputs,
    explanation: &Explanation,
    spec: &InstanceSpec,
    map: &PositiveEvidenceMap,
) -> Result<AlignmentReport, PipelineError> {
    let grid = if cfg.percentiles.is_empty() {
        metrics::default_percentile_grid()
    } else {
        cfg.percentiles.clone()
    };
    let ch = metrics::contrast_heat_z(&map.heatmap, &inputs.ground_truth, cfg.rolls, cfg.rolls_seed)?;
    let ap = metrics::pixel_ap(&map.heatmap, &inputs.ground_truth)?;
    let iou = metrics::iou_auc(&map.heatmap, &inputs.ground_truth, &grid, true)?;
    let group = spec.group(inputs.modality);
    let coeffs: Vec<f64> = group.map(|j| explanation.signed_coefficients[j]).collect();
    let topk = metrics::topk_overlap(
        &inputs.unit_masks,
        &coeffs,
        &inputs.ground_truth,
        cfg.k,
        cfg.tau,
    )?;
    Ok(AlignmentReport {
        ch_pos: ch.ch_pos,
        ch_z: ch.ch_z,
        pixel_ap: ap,
        iou_auc: iou.auc,
        iou_curve: iou.curve,
        gt_cov_at_k: topk.gt_cov,
        mass_prec_at_k: topk.mass_prec,
        spg_hit: topk.hit,
        k: cfg.k,
        tau: cfg.tau,
        topk_shortfall: topk.shortfall,
        heatmap_degenerate: map.degenerate,
    })
}

/// Re-fits the surrogate from a serialized neighborhood, without touching
/// any endpoint. The result is identical to the original run's fit.
pub fn replay(
    artifact: &DatasetArtifact,
    sgl_cfg: &SglConfig,
) -> Result<(SurrogateFit, Explanation), PipelineError> {
    let tau = sgl::group_penalty_weights(&artifact.dataset, &artifact.spec);
    let mut fit = sgl::fit(&artifact.dataset, &artifact.spec, sgl_cfg, &tau)?;
    if sgl_cfg.ridge_refit {
        fit = sgl::ridge_refit(&fit, &artifact.dataset, &artifact.spec, sgl_cfg.ridge_lambda);
    }
    let explanation = attribution::explain(&fit, &artifact.spec);
    Ok((fit, explanation))
}

/// Repeats the unit-importance extraction across `runs` seeded runs and
/// scores stability; seeds derive as `seed + run_index`.
pub fn stability_runs(
    config: &RunConfig,
    runs: usize,
) -> Result<(Vec<RunArtifacts>, SpearmanStability), PipelineError> {
    let mut artifacts = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut cfg = config.clone();
        cfg.seed = config.seed + r as u64;
        artifacts.push(run_explain(&cfg)?);
    }
    let importances: Vec<Vec<f64>> = artifacts
        .iter()
        .map(|a| a.explanation.unit_importance.clone())
        .collect();
    let stability = metrics::spearman_stability(&importances)?;
    Ok((artifacts, stability))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_config() -> RunConfig {
        let spec = InstanceSpec::new(vec!["img", "txt"], vec![4, 4]).unwrap();
        RunConfig {
            endpoint: EndpointConfig::Synthetic(SyntheticConfig::Linear {
                weights: vec![2.0, 0.0, 1.0, 0.0, 0.0, 0.5, 0.0, 0.0],
                intercept: 0.0,
            }),
            spec,
            target: TargetSelector::identity(0),
            n_perturbations: 200,
            batch_size: 32,
            p_keep: 0.5,
            seed: 7,
            reference_requery: false,
            kernel: KernelConfig::default(),
            alpha_search: AlphaSearchConfig::default(),
            sgl: SglConfig {
                lambda: 0.01,
                ..SglConfig::default()
            },
            metrics: MetricToggles::default(),
            alignment: None,
        }
    }

    #[test]
    fn end_to_end_linear_run() {
        let cfg = linear_config();
        let run = run_explain(&cfg).unwrap();
        assert!(run.metrics.aopc_del.unwrap() > 0.0);
        assert!(run.metrics.l0 <= 8);
        assert_eq!(run.meta.ledger.explanation_calls, 200);
        // Two AOPC modes at 20 steps each: 42 metric calls.
        assert_eq!(run.meta.ledger.metric_calls, 42);
        assert_eq!(run.metrics.fwd_calls, run.meta.ledger);
        assert!(run.fit.diagnostics.converged);
    }

    #[test]
    fn reference_requery_adds_one_explanation_call() {
        let mut cfg = linear_config();
        cfg.reference_requery = true;
        let run = run_explain(&cfg).unwrap();
        assert_eq!(run.meta.ledger.explanation_calls, 201);
        // Full mask through the linear oracle: 2 + 1 + 0.5.
        assert_eq!(run.meta.reference_output, Some(3.5));
    }

    #[test]
    fn identical_config_and_seed_reproduce_identical_artifacts() {
        let cfg = linear_config();
        let a = run_explain(&cfg).unwrap();
        let b = run_explain(&cfg).unwrap();
        assert_eq!(a.explanation, b.explanation);
        assert_eq!(a.fit, b.fit);
        assert_eq!(
            serde_json::to_string(&a.dataset.dataset).unwrap(),
            serde_json::to_string(&b.dataset.dataset).unwrap()
        );
        assert_eq!(a.metrics.aopc_del, b.metrics.aopc_del);
    }

    #[test]
    fn replay_reproduces_the_fit_exactly() {
        let cfg = linear_config();
        let run = run_explain(&cfg).unwrap();
        let (fit, explanation) = replay(&run.dataset, &cfg.sgl).unwrap();
        assert_eq!(fit, run.fit);
        assert_eq!(explanation, run.explanation);
        // Round-trip the artifact through JSON first.
        let json = serde_json::to_string(&run.dataset).unwrap();
        let artifact: DatasetArtifact = serde_json::from_str(&json).unwrap();
        let (fit2, _) = replay(&artifact, &cfg.sgl).unwrap();
        assert_eq!(fit2, run.fit);
    }

    #[test]
    fn stability_with_identical_seeds_is_perfect() {
        // Deriving seeds as seed + index makes runs differ; force identical
        // runs by repeating a single-run importance vector.
        let cfg = linear_config();
        let a = run_explain(&cfg).unwrap();
        let b = run_explain(&cfg).unwrap();
        let s = metrics::spearman_stability(&[
            a.explanation.unit_importance.clone(),
            b.explanation.unit_importance.clone(),
        ])
        .unwrap();
        assert_eq!(s.mean_rho, 1.0);
    }

    #[test]
    fn stability_mode_runs_r_times() {
        let mut cfg = linear_config();
        cfg.metrics.aopc_deletion = false;
        cfg.metrics.aopc_insertion = false;
        let (artifacts, stability) = stability_runs(&cfg, 3).unwrap();
        assert_eq!(artifacts.len(), 3);
        assert_eq!(stability.pairs_used, 3);
        assert!(stability.mean_rho > 0.5, "rho = {}", stability.mean_rho);
        let seeds: Vec<u64> = artifacts.iter().map(|a| a.meta.seed).collect();
        assert_eq!(seeds, vec![7, 8, 9]);
    }

    #[test]
    fn alpha_search_runs_when_enabled() {
        let mut cfg = linear_config();
        cfg.alpha_search.enabled = true;
        cfg.alpha_search.grid_multipliers = vec![0.5, 1.0, 2.0];
        let run = run_explain(&cfg).unwrap();
        let diag = run.alpha_search.expect("search diagnostics");
        assert!(!diag.candidates.is_empty());
        let sum: f64 = run.dataset.kernel.alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // The search itself costs no forward calls.
        assert_eq!(run.meta.ledger.explanation_calls, 200);
    }

    #[test]
    fn config_json_round_trip_preserves_defaults() {
        let cfg = linear_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        // Minimal config picks up every documented default.
        let minimal = r#"{
            "endpoint": {"type": "synthetic", "kind": "constant", "value": 0.5},
            "spec": {"modalities": [{"name": "m0", "units": 3}]}
        }"#;
        let parsed: RunConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(parsed.n_perturbations, 800);
        assert_eq!(parsed.batch_size, 32);
        assert_eq!(parsed.metrics.steps, 20);
        assert_eq!(parsed.sgl.lambda, 0.004);
        assert_eq!(parsed.sgl.l1_ratio, 0.9);
        assert_eq!(parsed.p_keep, 0.5);
        assert!(!parsed.alpha_search.enabled);
    }
}
