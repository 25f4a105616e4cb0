//! `sit`: pretrain and evaluate the self-supervised vision transformer.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! run fails.

mod data_spec;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use data_spec::{DataSpec, Role};
use sit_core::eval::{
    corrupt_preview, domain_transfer, few_shot_protocol, finetune, linear_probe, random_init_checkpoint, reconstruct_preview,
};
use sit_core::gradsuite::run_suite;
use sit_core::train::{model_from_checkpoint, pretrain};
use sit_core::{Checkpoint, EvalReport, RunConfig, SuiteOptions};

#[derive(Parser, Debug)]
#[command(name = "sit", version, about = "Self-supervised vision transformer with rotation and contrastive tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_setting)]
    set: Vec<(String, String)>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// cifar10:DIR, cifar100:DIR, stl10:DIR or synthetic[:SEED].
    #[arg(long, value_name = "SPEC")]
    data: DataSpec,
    /// Keep only the first N training images.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Evaluation images; defaults to the test split of --data.
    #[arg(long, value_name = "SPEC")]
    test_data: Option<DataSpec>,
    /// Keep only the first N test images.
    #[arg(long, value_name = "N")]
    test_limit: Option<usize>,
    /// Append the report as a CSV row to this file.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SourceArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE", required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Evaluate an untrained backbone built from the model settings instead.
    #[arg(long, conflicts_with = "checkpoint")]
    random_init: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain on unlabeled images.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for metrics.csv and checkpoint.ckpt.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Finetune the whole network with both heads replaced by classifiers.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Save the finetuned checkpoint here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train a linear classifier on frozen features.
    Linprobe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Linear evaluation on a dataset other than the pretraining one.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Finetune on a percentage of the labels, then linear-probe on all.
    Fewshot {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Percentage of training labels, in [0, 100]; 0 is a plain linear probe.
        #[arg(long, value_name = "P")]
        percent: f64,
    },
    /// Write original, corrupted and reconstructed PPM triplets.
    Preview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Coordinates checked per model parameter.
        #[arg(long, default_value_t = 64)]
        max_coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write original and corrupted PPM pairs without a model.
    CorruptPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn parse_setting(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got `{s}`")),
    }
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Run(sit_core::Error),
}

impl From<sit_core::Error> for Failure {
    fn from(e: sit_core::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn build_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_kv(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    for (k, v) in &args.set {
        cfg.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_source(source: &SourceArgs, cfg: &RunConfig) -> Result<Checkpoint, Failure> {
    match &source.checkpoint {
        Some(p) => Ok(Checkpoint::load(p)?),
        None => Ok(random_init_checkpoint(&cfg.model)?),
    }
}

fn load_eval_data(args: &EvalArgs, size: usize) -> Result<(sit_core::Dataset, sit_core::Dataset), Failure> {
    let train = args.data.data.load(Role::Train, args.data.limit, size)?;
    let test_spec = args.test_data.as_ref().unwrap_or(&args.data.data);
    let test = test_spec.load(Role::Test, args.test_limit, size)?;
    Ok((train, test))
}

fn emit(reports: &[EvalReport], path: Option<&Path>) -> Result<(), Failure> {
    for r in reports {
        println!("{r}");
    }
    println!("{}", EvalReport::CSV_HEADER);
    for r in reports {
        println!("{}", r.csv_row());
    }
    if let Some(path) = path {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", EvalReport::CSV_HEADER)?;
        }
        for r in reports {
            writeln!(f, "{}", r.csv_row())?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { cfg, data, out, resume } => {
            let mut cfg = build_config(&cfg)?;
            if out.is_some() {
                cfg.out_dir = out;
            }
            let ds = data.data.load(Role::Pretrain, data.limit, cfg.model.image_size)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let started = Instant::now();
            let outcome = pretrain(&cfg, &ds, resume.as_ref())?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step {} epoch {}: l_rec {:.4} l_rot {:.4} l_con {:.4} total {:.4}",
                    last.step, last.epoch, last.losses[0], last.losses[1], last.losses[2], last.total
                );
            }
            println!(
                "{} steps on {} ({} images, tasks {}) in {:.1}s, checkpoint {}",
                outcome.rows.len(),
                ds.name,
                ds.len(),
                cfg.tasks.label(),
                started.elapsed().as_secs_f64(),
                outcome.checkpoint.id()
            );
            if let Some(p) = outcome.checkpoint_path {
                println!("saved {}", p.display());
            }
            Ok(())
        }
        Command::Finetune { cfg, source, eval, out } => {
            let cfg = build_config(&cfg)?;
            let ck = load_source(&source, &cfg)?;
            let (train, test) = load_eval_data(&eval, ck.config.image_size)?;
            let (tuned, report) = finetune(&ck, &train, &test, train.class_count, &cfg.eval, cfg.seed)?;
            if let Some(p) = out {
                tuned.save(&p)?;
                println!("saved {}", p.display());
            }
            emit(&[report], eval.report.as_deref())
        }
        Command::Linprobe { cfg, source, eval } => {
            let cfg = build_config(&cfg)?;
            let ck = load_source(&source, &cfg)?;
            let (train, test) = load_eval_data(&eval, ck.config.image_size)?;
            emit(&[linear_probe(&ck, &train, &test, &cfg.eval, cfg.seed)?], eval.report.as_deref())
        }
        Command::Transfer { cfg, source, eval } => {
            let cfg = build_config(&cfg)?;
            let ck = load_source(&source, &cfg)?;
            let (train, test) = load_eval_data(&eval, ck.config.image_size)?;
            emit(&[domain_transfer(&ck, &train, &test, &cfg.eval, cfg.seed)?], eval.report.as_deref())
        }
        Command::Fewshot { cfg, source, eval, percent } => {
            if !(0.0..=100.0).contains(&percent) {
                return Err(Failure::Usage(format!("--percent {percent} outside [0, 100]")));
            }
            let cfg = build_config(&cfg)?;
            let ck = load_source(&source, &cfg)?;
            let (train, test) = load_eval_data(&eval, ck.config.image_size)?;
            emit(&few_shot_protocol(&ck, &train, &test, percent, &cfg.eval, cfg.seed)?, eval.report.as_deref())
        }
        Command::Preview { cfg, checkpoint, data, out } => {
            let cfg = build_config(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = model_from_checkpoint(&ck)?;
            let ds = data.data.load(Role::Test, Some(data.limit.unwrap_or(8)), ck.config.image_size)?;
            let ds = ds.take(data.limit.unwrap_or(8).min(ds.len()))?;
            let files = reconstruct_preview(&model, &ds, &cfg.corruption, cfg.seed, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
        Command::CorruptPreview { cfg, data, out } => {
            let cfg = build_config(&cfg)?;
            let size = cfg.model.image_size;
            let ds = data.data.load(Role::Test, Some(data.limit.unwrap_or(8)), size)?;
            let ds = ds.take(data.limit.unwrap_or(8).min(ds.len()))?;
            let files = corrupt_preview(&ds, &cfg.corruption, size, cfg.model.patch_size, cfg.seed, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
        Command::Gradcheck { instances, max_coords, seed } => {
            let started = Instant::now();
            let results = run_suite(&SuiteOptions {
                instances,
                max_coords,
                seed,
            })?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:<44} n={:<4} max rel err {:.3e}", r.name, r.instances, r.max_rel_error);
                failed += usize::from(!r.passed());
            }
            println!(
                "{} checks, {failed} failed, {:.1}s",
                results.len(),
                started.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(Failure::Run(sit_core::Error::Contract(format!(
                    "{failed} gradient checks exceeded the tolerance"
                ))));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `sit --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
