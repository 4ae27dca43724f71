use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use marketsim::workload::Strategy;
use marketsim::{load_scenario, run_logged, Format, RunOptions, ScenarioError, SimReport};

/// Exit status when a run finished but missed its deadline.
const EXIT_DEADLINE: u8 = 1;
/// Exit status for unreadable or invalid scenarios.
const EXIT_SCENARIO: u8 = 2;

#[derive(Parser)]
#[command(
    name = "marketsim",
    version,
    about = "Market-oriented cloud scheduling simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the processed event log, one event per line.
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Run every `*.json` scenario in a directory, writing one report each.
    Batch {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    TimeOpt,
    CostOpt,
    Provision,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::TimeOpt => Strategy::TimeOpt,
            StrategyArg::CostOpt => Strategy::CostOpt,
            StrategyArg::Provision => Strategy::DeadlineProvisioning,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
    Json,
}

impl FormatArg {
    fn format(self) -> Format {
        match self {
            FormatArg::Table => Format::Table,
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FormatArg::Table => "txt",
            FormatArg::Csv => "csv",
            FormatArg::Json => "json",
        }
    }
}

/// Failure split by exit status.
enum Failure {
    Scenario(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load(path: &Path) -> Result<marketsim::Scenario, Failure> {
    load_scenario(path).map_err(|e: ScenarioError| {
        Failure::Scenario(anyhow::Error::new(e).context(format!("{}", path.display())))
    })
}

fn status(report: &SimReport) -> u8 {
    if report.deadline_met {
        0
    } else {
        EXIT_DEADLINE
    }
}

fn write_report(report: &SimReport, format: FormatArg, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut file = fs::File::create(path)
                .with_context(|| format!("cannot create {}", path.display()))?;
            report.emit(format.format(), &mut file)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            report.emit(format.format(), &mut lock)?;
        }
    }
    Ok(())
}

fn run_one(
    scenario: &Path,
    seed: Option<u64>,
    strategy: Option<StrategyArg>,
    format: FormatArg,
    out: Option<&Path>,
    event_log: Option<&Path>,
) -> Result<u8, Failure> {
    let s = load(scenario)?;
    let opts = RunOptions {
        seed,
        strategy: strategy.map(Into::into),
        keep_event_log: event_log.is_some(),
    };
    let output = run_logged(&s, &opts).map_err(|e| Failure::Scenario(e.into()))?;
    write_report(&output.report, format, out)?;
    if let Some(path) = event_log {
        let mut file = io::BufWriter::new(
            fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        );
        for line in &output.event_log {
            writeln!(file, "{line}").map_err(anyhow::Error::from)?;
        }
        file.flush().map_err(anyhow::Error::from)?;
    }
    Ok(status(&output.report))
}

fn batch(dir: &Path, out: &Path, format: FormatArg) -> Result<u8, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let results: Vec<(PathBuf, Result<u8, Failure>)> = files
        .par_iter()
        .map(|path| {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let target = out.join(format!("{stem}.{}", format.extension()));
            let r = run_one(path, None, None, format, Some(&target), None);
            (path.clone(), r)
        })
        .collect();
    let mut code = 0;
    for (path, r) in results {
        match r {
            Ok(c) => {
                println!(
                    "{}: {}",
                    path.display(),
                    if c == 0 { "ok" } else { "deadline not met" }
                );
                code = code.max(c);
            }
            Err(Failure::Scenario(e)) | Err(Failure::Other(e)) => {
                eprintln!("{}: {e:#}", path.display());
                code = EXIT_SCENARIO;
            }
        }
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            strategy,
            format,
            out,
            event_log,
        } => run_one(
            scenario,
            *seed,
            *strategy,
            *format,
            out.as_deref(),
            event_log.as_deref(),
        ),
        Command::Validate { scenario } => load(scenario).map(|s| {
            println!("{}: valid", s.name);
            0
        }),
        Command::Batch { dir, out, format } => batch(dir, out, *format),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Scenario(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_SCENARIO)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
