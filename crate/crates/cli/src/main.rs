//! Command-line front end: explain one instance, batch-evaluate a list,
//! or replay a serialized neighborhood without touching any endpoint.

mod batch;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmexplain_core::blackbox::SyntheticConfig;
use mmexplain_core::pipeline::{
    self, DatasetArtifact, EndpointConfig, RunArtifacts, RunConfig,
};
use mmexplain_core::sgl::SglConfig;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mmexplain", version, about = "Local explanations for multimodal black boxes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain a single instance and emit report files.
    Explain(ExplainArgs),
    /// Explain every instance in a list and emit per-instance reports plus
    /// an aggregate table.
    Batch(BatchArgs),
    /// Re-fit the surrogate from a serialized neighborhood (no forward
    /// calls) and emit the explanation.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ExplainArgs {
    /// Run configuration (JSON mirroring the RunConfig schema).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the endpoint: an http(s) URL, or a command line to spawn.
    #[arg(long)]
    endpoint: Option<String>,
    /// Replace the endpoint with a built-in oracle (linear, group_and,
    /// noisy_linear, unimodal_collapse, constant) using default parameters.
    #[arg(long)]
    synthetic: Option<String>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Validate the configuration and exit without any forward calls.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    config: PathBuf,
    /// JSON array of instance entries ({"id", "spec", optional "endpoint",
    /// "seed", "alignment"}).
    #[arg(long)]
    instances: PathBuf,
    /// Repeat each instance R times with derived seeds and report Spearman
    /// stability.
    #[arg(long)]
    stability: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Maximum instances explained concurrently.
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct ReplayArgs {
    /// Serialized neighborhood (dataset.json from a previous run).
    #[arg(long)]
    dataset: PathBuf,
    /// Optional run config supplying the surrogate settings; defaults
    /// otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    chain: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Explain(args) => cmd_explain(args),
        Command::Batch(args) => cmd_batch(args),
        Command::Replay(args) => cmd_replay(args),
    };
    if let Err(err) = outcome {
        let report = ErrorReport {
            error: err.to_string(),
            chain: err.chain().skip(1).map(|c| c.to_string()).collect(),
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&report)
                .unwrap_or_else(|_| format!("{{\"error\":{:?}}}", err.to_string()))
        );
        std::process::exit(1);
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// `--endpoint` accepts an http(s) URL or a command line to spawn.
fn parse_endpoint_flag(value: &str) -> EndpointConfig {
    if value.starts_with("http://") || value.starts_with("https://") {
        EndpointConfig::Http {
            url: value.to_string(),
        }
    } else {
        EndpointConfig::Subprocess {
            command: value.split_whitespace().map(str::to_string).collect(),
        }
    }
}

/// `--synthetic <kind>` smoke-run oracles with default parameters.
fn synthetic_flag(kind: &str, config: &RunConfig) -> Result<SyntheticConfig> {
    let k = config.spec.total_units();
    Ok(match kind {
        "linear" => SyntheticConfig::Linear {
            weights: vec![1.0; k],
            intercept: 0.0,
        },
        "group_and" => SyntheticConfig::GroupAnd { modality: 0 },
        "noisy_linear" => SyntheticConfig::NoisyLinear {
            weights: vec![1.0; k],
            intercept: 0.0,
            sigma: 0.1,
            seed: config.seed,
        },
        "unimodal_collapse" => SyntheticConfig::UnimodalCollapse {
            modality: 0,
            weights: vec![1.0; config.spec.group(0).len()],
        },
        "constant" => SyntheticConfig::Constant { value: 0.5 },
        other => bail!("unknown synthetic oracle kind `{other}`"),
    })
}

fn apply_overrides(
    mut config: RunConfig,
    seed: Option<u64>,
    endpoint: Option<&str>,
    synthetic: Option<&str>,
) -> Result<RunConfig> {
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(value) = endpoint {
        config.endpoint = parse_endpoint_flag(value);
    }
    if let Some(kind) = synthetic {
        config.endpoint = EndpointConfig::Synthetic(synthetic_flag(kind, &config)?);
    }
    Ok(config)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)
        .with_context(|| format!("serializing {name}"))?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Run metadata file: config echo, seed, cost split, timing, and the
/// modality-weight search diagnostics when the search ran.
#[derive(Serialize)]
struct RunFile<'a> {
    config: &'a RunConfig,
    seed: u64,
    ledger: mmexplain_core::blackbox::LedgerSnapshot,
    wall_time_seconds: f64,
    reference_output: Option<f64>,
    alpha_search: Option<&'a mmexplain_core::alpha::AlphaSearchDiagnostics>,
}

fn write_artifacts(dir: &Path, run: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(dir, "explanation.json", &run.explanation)?;
    write_json(dir, "fit.json", &run.fit)?;
    write_json(dir, "dataset.json", &run.dataset)?;
    write_json(dir, "metrics.json", &run.metrics)?;
    write_json(
        dir,
        "run.json",
        &RunFile {
            config: &run.meta.config,
            seed: run.meta.seed,
            ledger: run.meta.ledger,
            wall_time_seconds: run.meta.wall_time_seconds,
            reference_output: run.meta.reference_output,
            alpha_search: run.alpha_search.as_ref(),
        },
    )?;
    if let Some(map) = &run.heatmap {
        write_json(dir, "heatmap.json", map)?;
    }
    Ok(())
}

fn validate_config(config: &RunConfig) -> Result<()> {
    config
        .kernel
        .resolved_alpha(config.spec.num_modalities())
        .context("kernel.alpha")?;
    if let EndpointConfig::Synthetic(cfg) = &config.endpoint {
        cfg.build(&config.spec).context("synthetic endpoint")?;
    }
    if config.n_perturbations < 2 {
        bail!("n_perturbations must be at least 2");
    }
    if !(config.p_keep > 0.0 && config.p_keep <= 1.0) {
        bail!("p_keep must lie in (0, 1]");
    }
    if let Some(alignment) = &config.alignment {
        if config.spec.modality_index(&alignment.modality).is_none() {
            bail!("alignment modality `{}` not in the spec", alignment.modality);
        }
        for path in [&alignment.unit_masks_path, &alignment.ground_truth_path] {
            if !Path::new(path).exists() {
                bail!("alignment input {path} does not exist");
            }
        }
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let config = apply_overrides(
        read_config(&args.config)?,
        args.seed,
        args.endpoint.as_deref(),
        args.synthetic.as_deref(),
    )?;
    validate_config(&config)?;
    if args.dry_run {
        println!("{}", serde_json::json!({"status": "ok", "dry_run": true}));
        return Ok(());
    }
    let run = pipeline::run_explain(&config).context("explanation run failed")?;
    write_artifacts(&args.out, &run)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "out": args.out.display().to_string(),
            "l0": run.metrics.l0,
            "explanation_calls": run.meta.ledger.explanation_calls,
            "metric_calls": run.meta.ledger.metric_calls,
        })
    );
    Ok(())
}

fn cmd_batch(args: BatchArgs) -> Result<()> {
    let mut config = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let text = fs::read_to_string(&args.instances)
        .with_context(|| format!("reading {}", args.instances.display()))?;
    let instances: Vec<batch::InstanceEntry> = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.instances.display()))?;
    if instances.is_empty() {
        bail!("instance list is empty");
    }
    let summary = batch::run_batch(&config, &instances, args.stability, args.workers, &args.out)?;
    write_json(&args.out, "batch_summary.json", &summary)?;
    fs::write(args.out.join("batch_summary.csv"), batch::to_csv(&summary))
        .context("writing batch_summary.csv")?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "out": args.out.display().to_string(),
            "instances": summary.rows.len(),
            "failures": summary.failures.len(),
        })
    );
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&args.dataset)
        .with_context(|| format!("reading {}", args.dataset.display()))?;
    let artifact: DatasetArtifact = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.dataset.display()))?;
    let sgl_cfg: SglConfig = match &args.config {
        Some(path) => read_config(path)?.sgl,
        None => SglConfig::default(),
    };
    let (fit, explanation) = pipeline::replay(&artifact, &sgl_cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out, "explanation.json", &explanation)?;
    write_json(&args.out, "fit.json", &fit)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "out": args.out.display().to_string(),
            "support_size": fit.support.len(),
        })
    );
    Ok(())
}
