//! `cpvaudit`: command-line front end for counterfactual fairness audits.
//!
//! Every subcommand reads an experiment config (`--config`) and accepts
//! `--seed` to override the config's seed. Outputs land in the run
//! directory `<output_dir>/<name>/` unless a path is given.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 partial failure
//! (error records remain after `run`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cpvaudit::corpus::{ingest_cases, save_jsonl};
use cpvaudit::cpv::{count_by_spec, Split};
use cpvaudit::embedbias::write_embed_requests;
use cpvaudit::exec::ExecMode;
use cpvaudit::ftexport::{export_ft, save_export, Paradigm};
use cpvaudit::orchestrator::report::{direction_for, embedding_request_texts, generate_report};
use cpvaudit::orchestrator::run::{prepare, CPV_FAILURES_FILE, VARIANTS_FILE};
use cpvaudit::orchestrator::{run_experiment, Analysis, ExperimentConfig, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "cpvaudit", version, about = "Counterfactual fairness audits for clinical multiple-choice QA")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded (results are identical).
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the corpus and write it in canonical JSONL.
    Ingest {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Extract demographic and question features for every case.
    Extract {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Filter the corpus and build counterfactual patient variants.
    Cpv,
    /// Query models for every (variant × model × prompt kind); resumable.
    Run {
        /// Stop after this many new requests.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Accuracy, delta, EO/CV and SkewSize tables.
    Metrics,
    /// Word-level attributions of correctness.
    Shap,
    /// Compute the gender direction from the sentence pairs.
    EmbedDirection {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Embedding bias scores of model explanations.
    Bias {
        /// Instead of scoring, write the texts needing embeddings as
        /// `{"id","text"}` JSONL for an external embedding job.
        #[arg(long)]
        emit_requests: Option<PathBuf>,
    },
    /// Every configured analysis plus a Markdown summary.
    Report,
    /// Write a fine-tuning dataset in chat JSONL.
    ExportFt {
        #[arg(long, default_value = "mcq")]
        paradigm: Paradigm,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Downsample every group to the smallest group's size.
        #[arg(long)]
        balance: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mode(common: &Common) -> ExecMode {
    if common.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report_only(cfg: &ExperimentConfig, analyses: &[Analysis]) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    cfg.analysis.analyses = analyses.to_vec();
    let summary = generate_report(&cfg)?;
    print_json(&summary)
}

fn output_or(path: Option<PathBuf>, run_dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let path = path.unwrap_or_else(|| run_dir.join(name));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn execute(cli: Cli) -> anyhow::Result<u8> {
    let cfg = load_config(&cli.common)?;
    let run_dir = cfg.run_dir();
    let mode = mode(&cli.common);
    match cli.command {
        Command::Ingest { output } => {
            let cases = ingest_cases(&cfg.resolve(&cfg.corpus), cfg.corpus_format()?)?;
            let path = output_or(output, &run_dir, "corpus.jsonl")?;
            save_jsonl(&path, &cases)?;
            println!("{} cases -> {}", cases.len(), path.display());
        }
        Command::Extract { output } => {
            let prepared = prepare(&cfg, mode)?;
            let path = output_or(output, &run_dir, "features.jsonl")?;
            let mut data = Vec::new();
            for (case, f) in prepared.cases.iter().zip(&prepared.features) {
                serde_json::to_writer(&mut data, &serde_json::json!({ "id": case.id, "features": f }))?;
                data.push(b'\n');
            }
            std::fs::write(&path, data)?;
            println!("{} cases ({} pass filters) -> {}", prepared.cases.len(), prepared.filtered.len(), path.display());
        }
        Command::Cpv => {
            let prepared = prepare(&cfg, mode)?;
            std::fs::create_dir_all(&run_dir)?;
            cpvaudit::cpv::save_variants(&run_dir.join(VARIANTS_FILE), &prepared.variants)?;
            let mut failures = Vec::new();
            for f in &prepared.failures {
                serde_json::to_writer(&mut failures, f)?;
                failures.push(b'\n');
            }
            std::fs::write(run_dir.join(CPV_FAILURES_FILE), failures)?;
            for (spec, n) in count_by_spec(&prepared.variants) {
                println!("{}\t{n}", spec.variant_id("*"));
            }
            println!(
                "{} variants from {} cases; {} cases dropped",
                prepared.variants.len(),
                prepared.filtered.len(),
                prepared.failures.len()
            );
        }
        Command::Run { limit } => {
            let summary = run_experiment(&cfg, RunOptions { limit })?;
            print_json(&summary)?;
            return Ok(summary.exit_code() as u8);
        }
        Command::Metrics => report_only(&cfg, &[Analysis::Accuracy, Analysis::EoCv, Analysis::Skewsize])?,
        Command::Shap => report_only(&cfg, &[Analysis::Shap])?,
        Command::EmbedDirection { output } => {
            let direction = direction_for(&cfg)?;
            let path = output_or(output, &run_dir, "direction.json")?;
            std::fs::write(&path, serde_json::to_string_pretty(&direction)? + "\n")?;
            println!(
                "dimension {} explained variance {:.4} -> {}",
                direction.g.len(),
                direction.explained_variance_ratio,
                path.display()
            );
        }
        Command::Bias { emit_requests } => match emit_requests {
            Some(path) => {
                let texts = embedding_request_texts(&cfg, &run_dir)?;
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                let path = output_or(Some(path), &run_dir, "")?;
                let file = std::fs::File::create(&path)?;
                let n = write_embed_requests(std::io::BufWriter::new(file), &refs)?;
                println!("{n} texts -> {}", path.display());
            }
            None => report_only(&cfg, &[Analysis::EmbedBias])?,
        },
        Command::Report => print_json(&generate_report(&cfg)?)?,
        Command::ExportFt {
            paradigm,
            split,
            balance,
            output,
        } => {
            let prepared = prepare(&cfg, mode)?;
            let export = export_ft(&prepared.variants, paradigm, split, balance, cfg.seed, &cfg.templates()?);
            let dir = output.unwrap_or_else(|| run_dir.join("ft"));
            let (data, manifest) = save_export(&dir, &export)?;
            println!(
                "{} examples ({} skipped) -> {} / {}",
                export.examples.len(),
                export.manifest.skipped.len(),
                data.display(),
                manifest.display()
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
