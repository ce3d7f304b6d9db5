//! Command-line front end: benchmark generation, training, checkpoint
//! evaluation, leave-one-domain-out runs, and ablation sweeps.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vbcls::harness::{
    evaluate, history_csv, load_domains, run_leave_one_out, target_prior, ExperimentConfig,
    TargetPriorMode, TargetReport,
};
use vbcls::labelshift::pooled;
use vbcls::model::{load_checkpoint, save_checkpoint, train, Variant};
use vbcls::shiftgen::{load_feature_csv, make_benchmark, write_feature_csv, Scenario};
use vbcls::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vbcls",
    version,
    about = "Variational conditional alignment with posterior label-shift correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one feature CSV per domain of a synthetic benchmark.
    Gen {
        /// covariate_only, conditional_shift, label_shift, or conditional_and_label.
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        domains: usize,
        #[arg(long)]
        classes: usize,
        /// Feature dimension.
        #[arg(long)]
        dim: usize,
        /// Samples per domain.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        severity: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured variant on every domain in the config and save a
    /// checkpoint plus its loss history.
    Train {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved checkpoint on one feature CSV; prints a JSON summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// pooled, oracle, or refined.
        #[arg(long, default_value_t = TargetPriorMode::Pooled)]
        prior_mode: TargetPriorMode,
    },
    /// Hold out each domain in turn, train on the rest, and report
    /// mean/sd accuracy per target.
    Loo {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run leave-one-domain-out for several variants and write a combined
    /// summary next to the per-variant reports.
    Ablate {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names, e.g. vbcls,vbcls_no_pa,erm.
        #[arg(long)]
        variants: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return report_usage_error(e),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Prints one line to stdout. When the reading end of a pipe closes early
/// (`vbcls loo ... | head`), the write fails with a broken pipe; stop with the
/// conventional interrupted-pipeline status instead of panicking mid-print.
fn say(line: &str) {
    let mut out = io::stdout().lock();
    if writeln!(out, "{line}").is_err() {
        std::process::exit(141);
    }
}

/// Help and version requests exit 0 through stdout; anything else becomes a
/// single stderr line like runtime failures do.
fn report_usage_error(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        // A reader that stops early (`--help | head`) already has what it
        // asked for, so a failed write is not an error here.
        let _ = write!(io::stdout(), "{e}");
        return ExitCode::SUCCESS;
    }
    let text = e.to_string();
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("error: invalid arguments");
    eprintln!("{line}");
    ExitCode::from(2)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            scenario,
            domains,
            classes,
            dim,
            n,
            severity,
            seed,
            out,
        } => gen(scenario, domains, classes, dim, n, severity, seed, &out),
        Command::Train { config, out } => train_to_checkpoint(&config, &out),
        Command::Eval {
            checkpoint,
            data,
            prior_mode,
        } => eval_checkpoint(&checkpoint, &data, prior_mode),
        Command::Loo { config, out } => leave_one_out(&config, out),
        Command::Ablate {
            config,
            variants,
            out,
        } => ablate(&config, &variants, &out),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen(
    scenario: Scenario,
    domains: usize,
    classes: usize,
    dim: usize,
    n: usize,
    severity: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let datasets = make_benchmark(scenario, domains, classes, dim, n, severity, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    for ds in &datasets {
        let path = out.join(format!("{}.csv", ds.name));
        write_feature_csv(&path, ds)?;
        say(&format!("wrote {}", path.display()));
    }
    Ok(())
}

fn train_to_checkpoint(config_path: &Path, out: &Path) -> Result<()> {
    let config = ExperimentConfig::from_path(config_path)?;
    let datasets = load_domains(&config.data)?;
    let outcome = train(&datasets, &config.train, &config.weights, config.variant)?;
    let prior = pooled(&datasets)?;

    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let checkpoint = out.join("checkpoint.bin");
    save_checkpoint(&outcome.params, &config.train, Some(&prior), &checkpoint)?;
    let history = out.join("history.csv");
    fs::write(&history, history_csv(&outcome.history)).map_err(|e| Error::Io {
        path: history.clone(),
        source: e,
    })?;
    say(&format!("wrote {}", checkpoint.display()));
    say(&format!("wrote {}", history.display()));
    Ok(())
}

fn eval_checkpoint(checkpoint: &Path, data: &Path, prior_mode: TargetPriorMode) -> Result<()> {
    let (params, _config, source_prior) = load_checkpoint(checkpoint)?;
    let p_pool = source_prior.ok_or_else(|| {
        Error::Config(format!(
            "{}: checkpoint stores no source prior, so predictions cannot be reweighted",
            checkpoint.display()
        ))
    })?;
    let dataset = load_feature_csv(data, params.dims.n_classes)?;
    let p_dom = target_prior(&params, Variant::Vbcls, &dataset, &p_pool, prior_mode)?;
    let summary = evaluate(&params, &dataset, &p_dom, &p_pool)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("could not serialize the evaluation: {e}")))?;
    say(&json);
    Ok(())
}

fn fmt_accuracy(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn print_target_lines(targets: &[TargetReport]) {
    for t in targets {
        say(&format!(
            "{}: mean {} sd {} over {} seeds",
            t.target,
            fmt_accuracy(t.mean_accuracy),
            fmt_accuracy(t.sd_accuracy),
            t.seeds.len()
        ));
    }
}

fn leave_one_out(config_path: &Path, out: PathBuf) -> Result<()> {
    let mut config = ExperimentConfig::from_path(config_path)?;
    config.out_dir = out;
    let report = run_leave_one_out(&config)?;
    print_target_lines(&report.targets);
    say(&format!("report written to {}", config.out_dir.display()));
    Ok(())
}

fn ablate(config_path: &Path, variants: &str, out: &Path) -> Result<()> {
    let picks: Vec<Variant> = variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if picks.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    for (i, v) in picks.iter().enumerate() {
        if picks[..i].contains(v) {
            return Err(Error::Config(format!("variant {v} listed twice")));
        }
    }

    let base = ExperimentConfig::from_path(config_path)?;
    let mut rows: Vec<[String; 5]> = Vec::new();
    for &variant in &picks {
        let mut config = base.clone();
        config.variant = variant;
        config.out_dir = out.join(variant.name());
        let report = run_leave_one_out(&config)?;
        say(&format!("{variant}:"));
        print_target_lines(&report.targets);
        for t in &report.targets {
            rows.push([
                t.target.clone(),
                variant.name().to_string(),
                t.mean_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                t.sd_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                t.seeds.len().to_string(),
            ]);
        }
    }

    let path = out.join("summary.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| Error::CsvFormat {
        path: path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut write_row = |row: &[String]| {
        writer.write_record(row).map_err(|e| Error::CsvFormat {
            path: path.clone(),
            line: 0,
            message: e.to_string(),
        })
    };
    write_row(&["target", "variant", "mean", "sd", "n_seeds"].map(String::from))?;
    for row in &rows {
        write_row(row)?;
    }
    writer.flush().map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    say(&format!("combined summary written to {}", path.display()));
    Ok(())
}
