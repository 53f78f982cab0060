//! Batch evaluation: run many instances, collect per-instance metric rows,
//! and summarize each metric with mean +/- std and median [25th, 75th].

use anyhow::{Context, Result};
use mmexplain_core::metrics::SpearmanStability;
use mmexplain_core::pipeline::{self, AlignmentConfig, EndpointConfig, RunConfig};
use mmexplain_core::space::InstanceSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One work item of a batch run. Fields other than `id` and `spec` override
/// the base configuration.
#[derive(Debug, Clone, Deserialize)]
pub struct InstanceEntry {
    pub id: String,
    pub spec: InstanceSpec,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub alignment: Option<AlignmentConfig>,
}

/// Flattened per-instance metric row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRow {
    pub id: String,
    pub aopc_del: Option<f64>,
    pub aopc_ins: Option<f64>,
    pub l0: f64,
    pub spearman: Option<f64>,
    pub coverage: Vec<f64>,
    pub explanation_calls: f64,
    pub metric_calls: f64,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub id: String,
    pub error: String,
}

/// Five-number summary used in the aggregate table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub metric: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub rows: Vec<InstanceRow>,
    pub aggregate: Vec<AggregateEntry>,
    pub failures: Vec<InstanceFailure>,
    pub stability_runs: Option<usize>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    Some(Summary {
        mean,
        std,
        median: percentile(&sorted, 50.0),
        p25: percentile(&sorted, 25.0),
        p75: percentile(&sorted, 75.0),
        n,
    })
}

fn config_for(base: &RunConfig, entry: &InstanceEntry) -> RunConfig {
    let mut cfg = base.clone();
    cfg.spec = entry.spec.clone();
    if let Some(endpoint) = &entry.endpoint {
        cfg.endpoint = endpoint.clone();
    }
    if let Some(seed) = entry.seed {
        cfg.seed = seed;
    }
    if let Some(alignment) = &entry.alignment {
        cfg.alignment = Some(alignment.clone());
    }
    cfg
}

fn run_one(
    base: &RunConfig,
    entry: &InstanceEntry,
    stability: Option<usize>,
    out_dir: &Path,
) -> Result<InstanceRow> {
    let cfg = config_for(base, entry);
    let (artifacts, spearman): (_, Option<SpearmanStability>) = match stability {
        Some(r) if r >= 2 => {
            let (mut runs, stability) = pipeline::stability_runs(&cfg, r)?;
            (runs.swap_remove(0), Some(stability))
        }
        _ => (pipeline::run_explain(&cfg)?, None),
    };
    let dir = out_dir.join(&entry.id);
    super::write_artifacts(&dir, &artifacts)
        .with_context(|| format!("writing artifacts for {}", entry.id))?;
    let m = &artifacts.metrics;
    Ok(InstanceRow {
        id: entry.id.clone(),
        aopc_del: m.aopc_del,
        aopc_ins: m.aopc_ins,
        l0: m.l0 as f64,
        spearman: spearman.map(|s| s.mean_rho),
        coverage: m.coverage.clone(),
        explanation_calls: m.fwd_calls.explanation_calls as f64,
        metric_calls: m.fwd_calls.metric_calls as f64,
        wall_time_seconds: m.wall_time_seconds,
    })
}

/// Runs every instance (concurrently up to `workers`), writing per-instance
/// artifact directories under `out_dir`. Failures are recorded and the
/// batch continues.
pub fn run_batch(
    base: &RunConfig,
    instances: &[InstanceEntry],
    stability: Option<usize>,
    workers: usize,
    out_dir: &Path,
) -> Result<BatchSummary> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building worker pool")?;
    let results: Vec<(usize, Result<InstanceRow>)> = pool.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, entry)| (i, run_one(base, entry, stability, out_dir)))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, result) in results {
        match result {
            Ok(row) => rows.push(row),
            Err(err) => failures.push(InstanceFailure {
                id: instances[i].id.clone(),
                error: format!("{err:#}"),
            }),
        }
    }

    let mut aggregate = Vec::new();
    let mut push = |name: &str, values: Vec<f64>| {
        if let Some(summary) = summarize(&values) {
            aggregate.push(AggregateEntry {
                metric: name.to_string(),
                summary,
            });
        }
    };
    push(
        "aopc_del",
        rows.iter().filter_map(|r| r.aopc_del).collect(),
    );
    push(
        "aopc_ins",
        rows.iter().filter_map(|r| r.aopc_ins).collect(),
    );
    push("l0", rows.iter().map(|r| r.l0).collect());
    push(
        "spearman",
        rows.iter().filter_map(|r| r.spearman).collect(),
    );
    let max_modalities = rows.iter().map(|r| r.coverage.len()).max().unwrap_or(0);
    for m in 0..max_modalities {
        push(
            &format!("coverage_{m}"),
            rows.iter().filter_map(|r| r.coverage.get(m).copied()).collect(),
        );
    }
    push(
        "explanation_calls",
        rows.iter().map(|r| r.explanation_calls).collect(),
    );
    push(
        "metric_calls",
        rows.iter().map(|r| r.metric_calls).collect(),
    );
    push(
        "wall_time_seconds",
        rows.iter().map(|r| r.wall_time_seconds).collect(),
    );

    Ok(BatchSummary {
        rows,
        aggregate,
        failures,
        stability_runs: stability,
    })
}

/// Plain CSV: one row per instance, then one row per aggregate statistic.
pub fn to_csv(summary: &BatchSummary) -> String {
    let max_modalities = summary
        .rows
        .iter()
        .map(|r| r.coverage.len())
        .max()
        .unwrap_or(0);
    let mut header = vec![
        "id".to_string(),
        "aopc_del".to_string(),
        "aopc_ins".to_string(),
        "l0".to_string(),
        "spearman".to_string(),
    ];
    for m in 0..max_modalities {
        header.push(format!("coverage_{m}"));
    }
    header.extend([
        "explanation_calls".to_string(),
        "metric_calls".to_string(),
        "wall_time_seconds".to_string(),
    ]);
    let mut out = header.join(",") + "\n";

    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for row in &summary.rows {
        let mut cells = vec![
            row.id.clone(),
            fmt(row.aopc_del),
            fmt(row.aopc_ins),
            format!("{}", row.l0),
            fmt(row.spearman),
        ];
        for m in 0..max_modalities {
            cells.push(fmt(row.coverage.get(m).copied()));
        }
        cells.push(format!("{}", row.explanation_calls));
        cells.push(format!("{}", row.metric_calls));
        cells.push(format!("{}", row.wall_time_seconds));
        out.push_str(&cells.join(","));
        out.push('\n');
    }

    let find = |name: &str| -> Option<&Summary> {
        summary
            .aggregate
            .iter()
            .find(|e| e.metric == name)
            .map(|e| &e.summary)
    };
    let stats: [(&str, fn(&Summary) -> f64); 5] = [
        ("mean", |s| s.mean),
        ("std", |s| s.std),
        ("median", |s| s.median),
        ("p25", |s| s.p25),
        ("p75", |s| s.p75),
    ];
    for (label, get) in stats {
        let mut cells = vec![label.to_string()];
        for name in ["aopc_del", "aopc_ins", "l0", "spearman"] {
            cells.push(find(name).map_or(String::new(), |s| format!("{}", get(s))));
        }
        for m in 0..max_modalities {
            cells.push(
                find(&format!("coverage_{m}")).map_or(String::new(), |s| format!("{}", get(s))),
            );
        }
        for name in ["explanation_calls", "metric_calls", "wall_time_seconds"] {
            cells.push(find(name).map_or(String::new(), |s| format!("{}", get(s))));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
