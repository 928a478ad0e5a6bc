mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use remind_core::analysis::report::{build_report, ReportOptions};
use remind_core::analysis::{attach_similarity, EmbeddingCache, SimilarityOutcome};
use remind_core::backends::Role;
use remind_core::domain::{ConceptPair, RunConfig, TemplateId};
use remind_core::persistence::{load_full, write_log_atomic, RunLog};
use remind_core::pipeline::execute_run;
use remind_core::review::review_all;
use remind_core::sweep::{execute_sweep, SweepOptions};
use serde_json::json;

use crate::config::EngineConfig;

/// Wake → dream → judge → re-wake ideation runs, sweeps and analysis.
#[derive(Parser, Debug)]
#[command(name = "remind", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML engine configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration value, e.g. `--set sweep.seeds=[0,1]`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run log path (overrides `log_path`).
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    /// Worker count for sweep and review (overrides `jobs`).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute one run, append it to the log and print it.
    Run(RunArgs),
    /// Execute or resume the configured parameter grid.
    Sweep {
        /// Re-execute runs that previously failed.
        #[arg(long)]
        retry_failed: bool,
    },
    /// Attach idea_wake/idea_dream similarities; writes a new log.
    Analyze {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score gated runs with the reviewer; writes a new log.
    Review {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the CSV report bundle.
    Report {
        /// Minimum review sum for the high-quality table.
        #[arg(long)]
        threshold: Option<u8>,
        /// Output directory (overrides `report_dir`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Concept pair as `x,y`.
    #[arg(long)]
    pair: String,
    /// Report identifier of the pair; defaults to a matching configured pair or `x-y`.
    #[arg(long)]
    pair_id: Option<String>,
    #[arg(long)]
    template: u8,
    /// Word limit Z.
    #[arg(long)]
    words: u32,
    /// Dream temperature T.
    #[arg(long)]
    temp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run id; defaults to one past the largest id in the log.
    #[arg(long)]
    id: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Ok(false) means the command finished but some record failed.
fn dispatch(cli: Cli) -> Result<bool> {
    let mut config = EngineConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    if let Some(log) = cli.global.log {
        config.log_path = log;
    }
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        config.jobs = jobs;
    }
    match cli.command {
        Command::Run(args) => cmd_run(&config, args),
        Command::Sweep { retry_failed } => cmd_sweep(&config, retry_failed),
        Command::Analyze { out } => cmd_analyze(&config, out),
        Command::Review { out } => cmd_review(&config, out),
        Command::Report { threshold, out_dir } => {
            if let Some(t) = threshold {
                config.high_quality_threshold = t;
            }
            if let Some(d) = out_dir {
                config.report_dir = d;
            }
            cmd_report(&config)
        }
    }
}

fn resolve_pair(config: &EngineConfig, args: &RunArgs) -> Result<ConceptPair> {
    let Some((x, y)) = args.pair.split_once(',') else {
        bail!("--pair must be `x,y`");
    };
    let (x, y) = (x.trim(), y.trim());
    let pair_id = match &args.pair_id {
        Some(id) => id.clone(),
        None => config
            .sweep
            .pairs
            .iter()
            .find(|p| p.x == x && p.y == y)
            .map(|p| p.pair_id.clone())
            .unwrap_or_else(|| format!("{x}-{y}").to_lowercase().replace(' ', "-")),
    };
    Ok(ConceptPair::new(pair_id, x, y)?)
}

fn cmd_run(config: &EngineConfig, args: RunArgs) -> Result<bool> {
    let pair = resolve_pair(config, &args)?;
    let registry = config.registry.build(false)?;
    let mut log = RunLog::open(&config.log_path, Some(&config.echo("run")))?;
    let run_id = args
        .id
        .unwrap_or_else(|| log.records().map(|r| r.run_id()).max().map_or(1, |m| m + 1));
    let template = TemplateId::try_from(args.template)?;
    let mut run_config = RunConfig::new(run_id, pair, template, args.words, args.temp, args.seed)?;
    run_config.wake_temperature = config.sweep.wake_temperature;
    run_config.judge_temperature = config.sweep.judge_temperature;
    run_config.validate()?;
    if log.get(run_id).is_some() {
        bail!("run id {run_id} already exists in {}", config.log_path.display());
    }

    let record = execute_run(&registry, &run_config, &config.pipeline);
    log.append(&record)?;
    println!("{}", serde_json::to_string(&record)?);
    if let Some(stage) = record.failed_stage {
        eprintln!("run {run_id} failed at {stage}");
    }
    Ok(!record.is_failed())
}

fn cmd_sweep(config: &EngineConfig, retry_failed: bool) -> Result<bool> {
    let registry = config.registry.build(false)?;
    let mut log = RunLog::open(&config.log_path, Some(&config.echo("sweep")))?;
    let options = SweepOptions {
        jobs: config.jobs,
        retry_failed,
    };
    let summary = execute_sweep(&config.sweep, &registry, &mut log, options)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(summary.failed == 0)
}

fn derived_path(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("runs");
    input.with_file_name(format!("{stem}.{suffix}.jsonl"))
}

fn check_output(input: &Path, out: &Path) -> Result<()> {
    let same = match (input.canonicalize(), out.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == out,
    };
    if same {
        bail!("output must differ from the input log; logs are never rewritten in place");
    }
    Ok(())
}

fn load_input(config: &EngineConfig) -> Result<remind_core::persistence::Loaded> {
    let path = &config.log_path;
    if !path.exists() {
        bail!("log {} does not exist", path.display());
    }
    let loaded = load_full(path).with_context(|| format!("loading {}", path.display()))?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded)
}

fn derived_header(config: &EngineConfig, command: &str, parent: Option<serde_json::Value>) -> serde_json::Value {
    let mut header = config.echo(command);
    header["source"] = json!(config.log_path);
    header["parent"] = parent.unwrap_or(serde_json::Value::Null);
    header
}

fn cmd_analyze(config: &EngineConfig, out: Option<PathBuf>) -> Result<bool> {
    let out = out.unwrap_or_else(|| derived_path(&config.log_path, "analyzed"));
    check_output(&config.log_path, &out)?;
    let loaded = load_input(config)?;
    let embedder = config.registry.embedding.build()?;
    let mut cache = EmbeddingCache::new(embedder.as_ref());
    let mut records = loaded.records;
    let (mut attached, mut missing, mut failed) = (0, 0, 0);
    for record in &mut records {
        match attach_similarity(record, &mut cache) {
            SimilarityOutcome::Attached(_) => attached += 1,
            SimilarityOutcome::MissingIdeas => missing += 1,
            SimilarityOutcome::Failed(e) => {
                log::warn!("run {}: {e}", record.run_id());
                failed += 1;
            }
        }
    }
    write_log_atomic(&out, Some(&derived_header(config, "analyze", loaded.header)), &records)?;
    println!(
        "{}",
        json!({"attached": attached, "missing_ideas": missing, "failed": failed, "out": out})
    );
    Ok(failed == 0)
}

fn cmd_review(config: &EngineConfig, out: Option<PathBuf>) -> Result<bool> {
    let out = out.unwrap_or_else(|| derived_path(&config.log_path, "reviewed"));
    check_output(&config.log_path, &out)?;
    let registry = config.registry.build_for(&[Role::Review], false)?;
    let loaded = load_input(config)?;
    let mut records = loaded.records;
    let summary = review_all(&registry, &mut records, config.jobs, config.pipeline.max_reasks);
    write_log_atomic(&out, Some(&derived_header(config, "review", loaded.header)), &records)?;
    let mut printed = serde_json::to_value(summary)?;
    printed["out"] = json!(out);
    println!("{printed}");
    Ok(summary.failed == 0)
}

fn cmd_report(config: &EngineConfig) -> Result<bool> {
    let loaded = load_input(config)?;
    let embedder = config.registry.embedding.build()?;
    let options = ReportOptions {
        high_quality_threshold: config.high_quality_threshold,
    };
    let bundle = build_report(&loaded.records, Some(embedder.as_ref()), &options);
    bundle
        .write_to(&config.report_dir)
        .with_context(|| format!("writing report to {}", config.report_dir.display()))?;
    let tables: serde_json::Map<String, serde_json::Value> = bundle
        .tables
        .iter()
        .map(|t| (format!("{}.csv", t.name), json!(t.rows.len())))
        .collect();
    println!("{}", json!({"report_dir": config.report_dir, "rows": tables}));
    Ok(true)
}
