use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ltdr::gradcheck::{model_gradcheck, GradcheckOptions, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use ltdr::io::{csv_writer, fmt_real};
use ltdr::metrics::{read_router_log, stats_from_log, write_router_log};
use ltdr::train::{ablation_suite, default_workers, run_experiment, AblationTable};
use ltdr::{parse_config, Error, ExperimentConfig, RunStats};
use serde_json::json;

const EXIT_ACCEPTANCE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

const ABLATION_COLUMNS: [&str; 9] = [
    "arm",
    "seed",
    "acc_overall",
    "acc_head",
    "acc_tail",
    "mean_rpv_vision",
    "tail_fraction",
    "step_time_ms",
    "status",
];

#[derive(Parser, Debug)]
#[command(name = "ltdr", version, about = "Long-tailed distribution-aware routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(clap::Args, Debug, Clone)]
struct RunArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a completed run in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one arm and write its trace, router log and statistics.
    Train(RunArgs),
    /// Run every arm × seed cell listed in the config.
    Ablate(RunArgs),
    /// Recompute statistics from a router log.
    Stats {
        router_log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write stats CSVs here instead of only printing the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure with a fixed process exit code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } | Error::Tensor(_) | Error::Contract(_) => EXIT_NUMERIC,
                Error::Invalid { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_IO
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_IO } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if err.downcast_ref::<Exit>().is_none() {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => train(&args, cli.verbose),
        Command::Ablate(args) => ablate(&args, cli.verbose),
        Command::Stats { router_log, config, out } => stats(&router_log, config.as_deref(), out.as_deref()),
        Command::Gradcheck { config, seed } => gradcheck(config.as_deref(), seed, cli.verbose),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => parse_config(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Creates `out`, refusing to reuse a directory holding a finished run.
fn prepare_out(out: &Path, force: bool) -> anyhow::Result<()> {
    if out.join("run_meta.json").exists() && !force {
        bail!("{} already holds a completed run; pass --force to overwrite", out.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let _ = fs::remove_file(out.join("run_meta.json"));
    Ok(())
}

fn write_meta(out: &Path, command: &str, config: &ExperimentConfig) -> anyhow::Result<()> {
    let meta = json!({
        "command": command,
        "seed": config.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(out.join("run_meta.json"), text).context("writing run_meta.json")?;
    Ok(())
}

fn timing(config: &ExperimentConfig, ms: f64) -> f64 {
    if config.record_timing {
        ms
    } else {
        0.0
    }
}

fn print_summary(stats: &RunStats, verbose: u8) {
    for (name, value) in stats.summary_rows() {
        if verbose > 0 || name.starts_with("accuracy") || name == "tail_fraction" {
            println!("{name:<24} {value:.6}");
        }
    }
}

fn train(args: &RunArgs, verbose: u8) -> anyhow::Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    prepare_out(&args.out, args.force)?;
    if verbose > 0 {
        eprintln!("training arm {} seed {} for {} steps", config.arm, config.seed, config.steps);
    }
    let result = run_experiment(&config)?;

    let mut w = csv_writer(File::create(args.out.join("trace.csv"))?);
    w.write_record(["step", "task_loss", "balance_loss", "step_time_ms"])?;
    for step in 0..result.trace.len() {
        w.write_record([
            step.to_string(),
            fmt_real(result.trace.task_loss[step]),
            fmt_real(result.trace.balance_loss[step]),
            fmt_real(timing(&config, result.trace.step_time_ms[step])),
        ])?;
    }
    w.flush()?;

    result.stats.write_csvs(&args.out.join("stats"))?;
    let mut log = BufWriter::new(File::create(args.out.join("router_log.jsonl"))?);
    write_router_log(&result.records, &mut log)?;
    log.flush()?;
    write_meta(&args.out, "train", &config)?;
    print_summary(&result.stats, verbose);
    Ok(())
}

fn opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn write_ablation(out: &Path, table: &AblationTable, config: &ExperimentConfig) -> anyhow::Result<()> {
    let mut w = csv_writer(File::create(out.join("ablation.csv"))?);
    w.write_record(ABLATION_COLUMNS)?;
    for cell in &table.cells {
        let ok = cell.outcome.as_ref().ok();
        let s = ok.map(|c| &c.stats);
        let status = match &cell.outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {e}"),
        };
        w.write_record([
            cell.arm.as_str().to_string(),
            cell.seed.to_string(),
            opt_real(s.map(|s| s.accuracy_overall)),
            opt_real(s.map(|s| s.accuracy_head_concepts)),
            opt_real(s.map(|s| s.accuracy_tail_concepts)),
            opt_real(s.map(|s| s.mean_rpv_vision)),
            opt_real(s.map(|s| s.tail_fraction)),
            opt_real(ok.map(|c| timing(config, c.mean_step_time_ms))),
            status,
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(File::create(out.join("ablation_medians.csv"))?);
    w.write_record([
        "arm",
        "runs",
        "acc_overall",
        "acc_head",
        "acc_tail",
        "mean_rpv_vision",
        "mean_rpv_language",
        "tail_fraction",
        "step_time_ms",
    ])?;
    for arm in table.arms() {
        let m = table.summary(arm);
        w.write_record([
            arm.as_str().to_string(),
            m.runs.to_string(),
            fmt_real(m.acc_overall),
            fmt_real(m.acc_head),
            fmt_real(m.acc_tail),
            fmt_real(m.mean_rpv_vision),
            fmt_real(m.mean_rpv_language),
            fmt_real(m.tail_fraction),
            fmt_real(timing(config, m.step_time_ms)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn ablate(args: &RunArgs, verbose: u8) -> anyhow::Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.ablation.seeds = vec![seed];
    }
    prepare_out(&args.out, args.force)?;
    let workers = default_workers();
    if verbose > 0 {
        eprintln!(
            "{} arms x {} seeds on {workers} worker(s)",
            config.ablation.arms.len(),
            config.ablation.seeds.len()
        );
    }
    let table = ablation_suite(&config, &config.ablation.arms, &config.ablation.seeds, workers)?;
    write_ablation(&args.out, &table, &config)?;

    for cell in &table.cells {
        if let Ok(c) = &cell.outcome {
            c.stats
                .write_csvs(&args.out.join("cells").join(format!("{}-seed{}", cell.arm, cell.seed)))?;
        } else if let Err(e) = &cell.outcome {
            eprintln!("{} seed {}: {e}", cell.arm, cell.seed);
        }
    }
    write_meta(&args.out, "ablate", &config)?;

    for arm in table.arms() {
        let m = table.summary(arm);
        println!(
            "{:<17} runs={} acc_tail={:.6} mean_rpv_vision={:.6} tail_fraction={:.4}",
            arm.as_str(),
            m.runs,
            m.acc_tail,
            m.mean_rpv_vision,
            m.tail_fraction
        );
    }
    if table.cells.iter().all(|c| c.outcome.is_err()) {
        eprintln!("every ablation cell failed");
        return Err(Exit(EXIT_NUMERIC).into());
    }
    Ok(())
}

fn stats(log: &Path, config: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let file = File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let records = read_router_log(BufReader::new(file))?;
    let stats = stats_from_log(&records, config.specialization_all_slots)?;
    if let Some(dir) = out {
        stats.write_csvs(dir)?;
    }
    print_summary(&stats, 1);
    Ok(())
}

fn gradcheck(config: Option<&Path>, seed: Option<u64>, verbose: u8) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let opts = GradcheckOptions {
        seed: seed.unwrap_or(config.seed),
        ..GradcheckOptions::default()
    };
    let report = model_gradcheck(&config, &opts)?;
    if verbose > 0 {
        for b in &report.blocks {
            println!("{:<24} coords={:<4} max_rel_error={:.3e}", b.name, b.coords, b.max_rel_error);
        }
    }
    let worst = report.worst().expect("at least one block");
    println!(
        "worst relative error {:.3e} in {} (h={GRADCHECK_STEP:e}, tolerance {GRADCHECK_TOLERANCE:e})",
        worst.max_rel_error, worst.name
    );
    println!(
        "language-only balancing: max |grad| over vision logits = {:e}; nonzero language logit grads {}/{}",
        report.dar_vision_grad_max_abs, report.dar_language_nonzero, report.dar_language_total
    );
    let failing = report.failing(GRADCHECK_TOLERANCE);
    for b in &failing {
        eprintln!("FAIL {} max_rel_error={:.3e}", b.name, b.max_rel_error);
    }
    if report.dar_vision_grad_max_abs != 0.0 {
        eprintln!("FAIL vision logits receive language-only balancing gradient");
    }
    if report.dar_language_nonzero == 0 {
        eprintln!("FAIL language logits receive no balancing gradient");
    }
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Exit(EXIT_ACCEPTANCE).into())
    }
}
