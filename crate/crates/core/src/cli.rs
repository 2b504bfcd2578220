//! Command-line front end.
//!
//! Every subcommand writes machine-readable JSON (to stdout or `--out`) and
//! reports failures as a single JSON line on stderr:
//! `{"error":"<kind>","exit":<code>,"message":"..."}`. Exit codes are 0 on
//! success, 2 for usage errors, 3 for data errors and 4 for numerical
//! failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::align::{gradcheck, train_alignment, AlignTrainConfig, BatchMode};
use crate::captions::{detect_article_mode, permute_attributes, render, shuffle_tagged, split_by_combo, SplitRatios};
use crate::datamodel::{load_alignment, load_dataset, save_alignment, save_dataset, save_probe, Modality, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, parse_metrics, render_table, EvalConfig};
use crate::probes::{dataset_objects, probe_sweep, train_probe, ProbeConfig, ProbeSweep};
use crate::synth::{gen_dataset, negative_seed, SynthConfig};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "LABALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "labalign", version, about = "Attribute-object binding diagnostics and linear alignment on precomputed embeddings")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Fixed reduction order. All kernels already reduce in a fixed order;
    /// the flag is recorded in outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the embedding oracle.
    GenSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print each sample's hard-negative caption as JSON lines.
    Permute {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reassign combination-based splits in place.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "0.9,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate per-object linear probes.
    Probe(ProbeArgs),
    /// Train a LABCLIP alignment matrix.
    AlignTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate binding accuracy, retrieval, similarity distributions and gap.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        alignment: Option<PathBuf>,
        /// Comma-separated: accuracy, recall@K, gap, simdist.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here and print the table to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the contrastive loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value = "hnb")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    modality: String,
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    object: Option<String>,
    #[arg(long)]
    all: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Save the trained probe (single object only).
    #[arg(long, requires = "object")]
    save: Option<PathBuf>,
    /// Write the JSON report here and print the summary row to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            report_error(&Error::Usage(first));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            e.exit_code()
        }
    }
}

fn report_error(e: &Error) {
    let line = json!({"error": e.kind(), "exit": e.exit_code(), "message": e.to_string()});
    eprintln!("{line}");
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(flag),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.to_path_buf(),
                source: e,
            })
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => stdout_line(text),
    }
}

/// Writes one line to stdout; a closed pipe ends output quietly.
fn stdout_line(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Usage("thread count must be positive".into()));
        }
        // a pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let deterministic = cli.deterministic;
    match cli.command {
        Command::GenSynthetic { config, out } => {
            let cfg: SynthConfig = read_config(config.as_deref())?;
            let ds = gen_dataset(&cfg)?;
            let manifest = save_dataset(&ds, &out)?;
            let counts: serde_json::Map<String, serde_json::Value> = Split::ALL
                .iter()
                .map(|s| (s.as_str().to_string(), json!(ds.indices(Some(*s)).len())))
                .collect();
            emit(
                None,
                &to_json(&json!({
                    "manifest": manifest,
                    "n": ds.len(),
                    "dim": ds.dim(),
                    "splits": counts,
                    "valid_negatives": ds.indices_with_negatives(None).len(),
                    "deterministic": deterministic,
                    "config": cfg,
                })),
            )
        }
        Command::Permute { dataset, seed } => {
            let ds = load_dataset(&dataset)?;
            for s in ds.samples() {
                let nseed = negative_seed(seed, &s.caption_text);
                let neg = if let Some(c) = &s.structured {
                    let mode = detect_article_mode(c, &s.caption_text).ok_or_else(|| {
                        Error::Data(format!("caption of '{}' does not match its structure", s.id))
                    })?;
                    match permute_attributes(c, nseed) {
                        Ok(p) => Some(render(&p, mode)),
                        Err(Error::NoValidNegative(_)) => None,
                        Err(e) => return Err(e),
                    }
                } else if let Some(tags) = &s.token_tags {
                    match shuffle_tagged(tags, nseed) {
                        Ok(t) => Some(t),
                        Err(Error::NoValidNegative(_)) => None,
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                };
                let line = json!({"id": s.id, "caption": s.caption_text, "negative": neg});
                stdout_line(&line.to_string())?;
            }
            Ok(())
        }
        Command::Split { dataset, ratios, seed } => {
            let ratios: SplitRatios = ratios.parse()?;
            let ds = load_dataset(&dataset)?;
            let dir = if dataset.is_dir() {
                dataset.clone()
            } else {
                dataset.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let out = split_by_combo(&ds, ratios, seed)?;
            save_dataset(&out, &dir)?;
            let counts: serde_json::Map<String, serde_json::Value> = Split::ALL
                .iter()
                .map(|s| (s.as_str().to_string(), json!(out.indices(Some(*s)).len())))
                .collect();
            emit(None, &to_json(&json!({"ratios": ratios, "seed": seed, "splits": counts})))
        }
        Command::Probe(args) => run_probe(args, deterministic),
        Command::AlignTrain {
            dataset,
            mode,
            config,
            out,
        } => {
            let mut cfg: AlignTrainConfig = read_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m.parse::<BatchMode>()?;
            }
            cfg.deterministic |= deterministic;
            let ds = load_dataset(&dataset)?;
            let outcome = train_alignment(&ds, &cfg)?;
            save_alignment(&outcome.model, &out)?;
            emit(
                None,
                &to_json(&json!({
                    "model": out,
                    "config": cfg,
                    "epochs": outcome.log,
                    "final_log_temperature": outcome.model.log_temperature,
                    "diverged": outcome.diverged,
                })),
            )?;
            match outcome.diverged {
                Some(msg) => Err(Error::Numerical(format!("training diverged: {msg}"))),
                None => Ok(()),
            }
        }
        Command::Eval {
            dataset,
            alignment,
            metrics,
            config,
            out,
        } => {
            let mut cfg: EvalConfig = read_config(config.as_deref())?;
            if let Some(m) = metrics {
                cfg.metrics = parse_metrics(&m)?;
            }
            let ds = load_dataset(&dataset)?;
            let model = alignment.as_deref().map(load_alignment).transpose()?;
            let report = evaluate(&ds, model.as_ref(), &cfg)?;
            let table = render_table(&report);
            let text = to_json(&json!({
                "alignment": alignment,
                "deterministic": deterministic,
                "report": report,
            }));
            emit(out.as_deref(), &text)?;
            if out.is_some() {
                stdout_line(table.trim_end())?;
            } else {
                eprint!("{table}");
            }
            Ok(())
        }
        Command::Gradcheck {
            dim,
            batch,
            mode,
            seed,
            step,
            tolerance,
        } => {
            let mode: BatchMode = mode.parse()?;
            let r = gradcheck(dim, batch, mode, seed, step)?;
            emit(None, &to_json(&json!({"report": r, "step": step, "tolerance": tolerance, "pass": r.max_rel_error <= tolerance})))?;
            if r.max_rel_error <= tolerance {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "max relative error {:.3e} exceeds {tolerance:.1e}",
                    r.max_rel_error
                )))
            }
        }
    }
}

fn run_probe(args: ProbeArgs, deterministic: bool) -> Result<()> {
    let modality: Modality = args.modality.parse()?;
    let cfg: ProbeConfig = read_config(args.config.as_deref())?;
    let ds = load_dataset(&args.dataset)?;
    let objects = match &args.object {
        Some(o) => vec![o.clone()],
        None => dataset_objects(&ds),
    };
    if objects.is_empty() {
        return Err(Error::Data("dataset has no structured captions to probe".into()));
    }
    let sweep: ProbeSweep = probe_sweep(&ds, &objects, modality, &cfg)?;
    if let (Some(path), Some(o)) = (&args.save, &args.object) {
        let trained = train_probe(&ds, o, modality, &cfg)?;
        save_probe(&trained.probe, path)?;
    }
    let text = to_json(&json!({"deterministic": deterministic, "sweep": sweep}));
    emit(args.out.as_deref(), &text)?;
    let mut row = format!("{:<10}", modality_name(modality));
    for (s, v) in &sweep.mean {
        row.push_str(&format!("  {}={v:.3}", s.as_str()));
    }
    if args.out.is_some() {
        stdout_line(&row)?;
    } else {
        eprintln!("{row}");
    }
    Ok(())
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Image => "image",
        Modality::Text => "text",
    }
}
