//! `gdkd` command-line front end.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 usage or
//! configuration error.

mod analyze;
mod distill;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use gdkd::io::{write_json, write_labels, write_logit_dump, LogitDump};
use gdkd::losses::presets::{parse_pair, preset, DEFAULT_PAIR, PRESET_NAMES};
use gdkd::numeric::LogitVector;
use gdkd::trainer::{gen_synthetic, Dataset, SyntheticTaskSpec};
use serde::Serialize;

/// Error that maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "gdkd", version, about = "Generalized decoupled knowledge distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run randomized property suites.
    Verify {
        #[arg(value_enum)]
        suite: verify::Suite,
        /// Trials per check; defaults to 10000 (identity, enhancement) and 1000 (gradients).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the manifest and a JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill a teacher into a student on a synthetic task.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the teacher from the experiment settings.
        #[arg(long, conflicts_with = "teacher")]
        train_teacher: bool,
        /// Teacher checkpoint (JSON written by a previous run).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Profiles, enhancement, knee point and discrepancy reports from logit dumps.
    Analyze {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        student_logits: Option<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        temperature: f64,
        /// Rank cut-off of the multimodality ratio.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the named loss configurations for a teacher/student pair.
    Presets {
        /// `Teacher/Student`, e.g. `WRN-40-2/WRN-16-2`.
        #[arg(long)]
        pair: Option<String>,
        /// Print only this preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Generate a synthetic task and write its inputs and labels.
    GenTask {
        /// JSON task spec; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    seed: Option<u64>,
    output_dir: &'a Path,
    timestamp: u64,
    library_version: &'a str,
    dataset_hash: Option<String>,
}

fn write_manifest(
    out: &Path,
    command: &str,
    config_path: Option<&Path>,
    seed: Option<u64>,
    dataset_hash: Option<String>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest {
        command,
        config_path,
        seed,
        output_dir: out,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        library_version: gdkd::VERSION,
        dataset_hash,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GDKD_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UsageError(format!("GDKD_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dataset_dump(d: &Dataset) -> anyhow::Result<LogitDump> {
    // Inputs reuse the logit dump layout with C = input width.
    let rows: Vec<LogitVector<f64>> = if d.input_dim >= 2 {
        (0..d.len()).map(|i| LogitVector::from_slice(d.input(i))).collect::<gdkd::Result<_>>()?
    } else {
        anyhow::bail!(UsageError("input_dim must be at least 2 to dump inputs".into()))
    };
    Ok(LogitDump::from_rows(&rows)?)
}

/// Returns `Ok(false)` when a verification failed.
fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Verify { suite, trials, seed, out } => {
            if let Some(out) = &out {
                write_manifest(out, "verify", None, Some(seed), None)?;
            }
            let report = verify::run(suite, trials.map(|t| t as usize), seed);
            for c in &report.checks {
                println!(
                    "{} {} trials={} failures={} max_error={:e} ({})",
                    if c.failures == 0 { "PASS" } else { "FAIL" },
                    c.name,
                    c.trials,
                    c.failures,
                    c.max_error,
                    c.tolerance
                );
                if let Some(ex) = &c.first_counterexample {
                    println!("  first counterexample: {ex}");
                }
            }
            if let Some(out) = &out {
                write_json(&out.join("verify_report.json"), &report)?;
            }
            Ok(report.passed)
        }
        Command::Distill { config, out, train_teacher, teacher, seed, preset, temperature, k } => {
            let file = distill::load_config(&config)?;
            let ov = distill::Overrides { preset, seed, temperature, k };
            let cfg = distill::resolve(file, &ov)?;
            let source = distill::TeacherSource { train: train_teacher, path: teacher };
            if source.path.is_none() && !source.train {
                anyhow::bail!(UsageError("no teacher: pass --teacher FILE or --train-teacher".into()));
            }
            if let Some(p) = &source.path {
                if !p.exists() {
                    anyhow::bail!(UsageError(format!("teacher checkpoint {} does not exist", p.display())));
                }
            }
            let task_hash = gen_synthetic(&SyntheticTaskSpec { seed: cfg.seed, ..cfg.experiment.task.clone() })
                .map_err(|e| UsageError(format!("config field `experiment.task`: {e}")))?
                .content_hash();
            write_manifest(&out, "distill", Some(&config), Some(cfg.seed), Some(task_hash))?;
            let (setup, trained) = distill::prepare(&cfg, &source)?;
            let summary = distill::run(&out, &cfg, setup, trained)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Analyze { logits, labels, student_logits, temperature, k, out } => {
            write_manifest(&out, "analyze", None, None, None)?;
            let args = analyze::AnalyzeArgs {
                logits: &logits,
                labels: &labels,
                student_logits: student_logits.as_deref(),
                temperature,
                k,
            };
            let summary = analyze::run(&out, &args)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Presets { pair, preset: only } => {
            let pair_name = pair.unwrap_or_else(|| format!("{}/{}", DEFAULT_PAIR.0, DEFAULT_PAIR.1));
            let weights = parse_pair(&pair_name).map_err(|e| UsageError(e.to_string()))?;
            let mut out = serde_json::Map::new();
            for name in PRESET_NAMES {
                if only.as_deref().is_some_and(|o| o != name) {
                    continue;
                }
                match preset(name, &weights) {
                    Ok(cfg) => out.insert(name.into(), serde_json::to_value(cfg)?),
                    Err(e) => out.insert(name.into(), serde_json::json!({ "unavailable": e.to_string() })),
                };
            }
            if out.is_empty() {
                anyhow::bail!(UsageError(format!("unknown preset; known: {}", PRESET_NAMES.join(", "))));
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
        Command::GenTask { config, seed, out } => {
            let mut spec: SyntheticTaskSpec = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| UsageError(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
                }
                None => SyntheticTaskSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let task = gen_synthetic(&spec).map_err(|e| UsageError(e.to_string()))?;
            write_manifest(&out, "gen-task", config.as_deref(), Some(spec.seed), Some(task.content_hash()))?;
            write_json(&out.join("task.json"), &spec)?;
            write_logit_dump(&out.join("train_inputs.bin"), &dataset_dump(&task.train)?)?;
            write_labels(&out.join("train_labels.bin"), &task.train.y)?;
            write_logit_dump(&out.join("test_inputs.bin"), &dataset_dump(&task.test)?)?;
            write_labels(&out.join("test_labels.bin"), &task.test.y)?;
            println!("{}", task.content_hash());
            Ok(true)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<gdkd::Error>() {
        Some(gdkd::Error::Diverged { .. } | gdkd::Error::Degenerate(_) | gdkd::Error::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| dispatch(cli));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
