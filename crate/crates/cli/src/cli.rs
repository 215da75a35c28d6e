//! Subcommands. Exit status is 0 on success, 2 when the input is at fault
//! and 1 otherwise; failures print `error: <Name>: <message>` on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ptsim_core::comparison::compare_logs;
use ptsim_core::discovery::discover;
use ptsim_core::enrichment::{apply_patch, enrich};
use ptsim_core::event_log::{ingest_csv, to_csv_string, ColumnMapping, TimestampFormat};
use ptsim_core::process_tree::parse;
use ptsim_core::spectrum::spectrum_diff;
use ptsim_core::{EnrichedTree, EventLog, ParameterPatch, SimulationConfig};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "ptsim", version, about = "Discover, enrich, simulate and compare process models")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the process tree discovered from a log.
    Discover {
        log: PathBuf,
        #[command(flatten)]
        columns: LogArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Estimate simulation parameters; discovers a tree unless one is given.
    Enrich {
        log: PathBuf,
        /// Tree in text notation, or a file holding it.
        #[arg(allow_hyphen_values = true)]
        tree: Option<String>,
        #[command(flatten)]
        columns: LogArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Simulate a model JSON file into a CSV event log.
    Simulate {
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        cases: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// ISO-8601 instant or epoch milliseconds.
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        process_capacity: Option<u32>,
        /// Parameter patch JSON applied before simulating.
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Behavior delta and transport plan between two logs.
    Compare {
        original: PathBuf,
        simulated: PathBuf,
        #[command(flatten)]
        columns: LogArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Classified performance-spectrum diff between two logs.
    Spectrum {
        original: PathBuf,
        simulated: PathBuf,
        /// Seconds; 5% of the original mean (at least 1 s) when absent.
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        columns: LogArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct LogArgs {
    #[arg(long, default_value = "case_id")]
    case_column: String,
    #[arg(long, default_value = "activity")]
    activity_column: String,
    #[arg(long, default_value = "resource")]
    resource_column: String,
    #[arg(long, default_value = "timestamp")]
    timestamp_column: String,
    /// strftime pattern; ISO-8601 when absent.
    #[arg(long)]
    timestamp_format: Option<String>,
}

impl LogArgs {
    fn read(&self, path: &Path) -> Result<EventLog, Failure> {
        let mapping = ColumnMapping {
            case_id: self.case_column.clone(),
            activity: self.activity_column.clone(),
            resource: self.resource_column.clone(),
            timestamp: self.timestamp_column.clone(),
        };
        let format = self.timestamp_format.clone().map_or(TimestampFormat::Iso8601, TimestampFormat::Custom);
        let file = fs::File::open(path).map_err(|e| Failure::io(path, e))?;
        ingest_csv(std::io::BufReader::new(file), &mapping, &format).map_err(|e| Failure::input(e.name(), e))
    }
}

#[derive(Debug)]
struct Failure {
    code: i32,
    name: &'static str,
    message: String,
}

impl Failure {
    fn input(name: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            name,
            message: e.to_string(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::input("Io", format!("{}: {e}", path.display()))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            name: "Internal",
            message: e.to_string(),
        }
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), Failure> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn parse_start(raw: &str) -> Result<i64, Failure> {
    raw.trim()
        .parse::<i64>()
        .ok()
        .or_else(|| TimestampFormat::Iso8601.parse(raw))
        .ok_or_else(|| Failure::input("BadTimestamp", format!("cannot parse start `{raw}`")))
}

fn pretty(value: &impl serde::Serialize) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(Failure::internal)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Discover { log, columns, output } => {
            let log = columns.read(&log)?;
            let tree = discover(&log).map_err(|e| Failure::input(e.name(), e))?;
            emit(output.as_deref(), &tree.to_string())
        }
        Command::Enrich {
            log,
            tree,
            columns,
            output,
        } => {
            let log = columns.read(&log)?;
            let tree = match tree {
                Some(t) => {
                    let text = if Path::new(&t).is_file() { read_text(Path::new(&t))? } else { t };
                    parse(&text).map_err(|e| Failure::input(e.name(), e))?
                }
                None => discover(&log).map_err(|e| Failure::input(e.name(), e))?,
            };
            let model = enrich(&tree, &log).map_err(|e| Failure::input(e.name(), e))?;
            emit(output.as_deref(), &model.to_json())
        }
        Command::Simulate {
            model,
            cases,
            seed,
            start,
            process_capacity,
            patch,
            output,
        } => {
            let mut model = EnrichedTree::from_json(&read_text(&model)?).map_err(|e| Failure::input(e.name(), e))?;
            let mut config = SimulationConfig {
                number_of_cases: cases,
                start_time: start.as_deref().map(parse_start).transpose()?.unwrap_or(0),
                seed,
                process_capacity,
            };
            if let Some(p) = patch {
                let patch = ParameterPatch::from_json(&read_text(&p)?).map_err(|e| Failure::input(e.name(), e))?;
                model = apply_patch(&model, &patch).map_err(|e| Failure::input(e.name(), e))?;
                config = config.patched(&patch);
            }
            let run = ptsim_core::simulate(&model, &config).map_err(|e| Failure::input(e.name(), e))?;
            emit(output.as_deref(), &to_csv_string(&run.log))
        }
        Command::Compare {
            original,
            simulated,
            columns,
            output,
        } => {
            let a = columns.read(&original)?;
            let b = columns.read(&simulated)?;
            let c = compare_logs(&a, &b).map_err(|e| Failure::input(e.name(), e))?;
            let body = json!({
                "delta": c.delta,
                "emd": c.plan.emd,
                "plan": c.plan,
            });
            emit(output.as_deref(), &pretty(&body)?)
        }
        Command::Spectrum {
            original,
            simulated,
            tolerance,
            columns,
            output,
        } => {
            if let Some(t) = tolerance.filter(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(Failure::input("InvalidTolerance", format!("tolerance {t} must be ≥ 0")));
            }
            let a = columns.read(&original)?;
            let b = columns.read(&simulated)?;
            emit(output.as_deref(), &pretty(&spectrum_diff(&a, &b, tolerance))?)
        }
        Command::Serve { port, snapshot_dir } => {
            if let Some(dir) = &snapshot_dir {
                fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
            }
            let rt = tokio::runtime::Runtime::new().map_err(Failure::internal)?;
            rt.block_on(crate::server::serve(port, snapshot_dir)).map_err(Failure::internal)
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand; returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            if f.message.starts_with(f.name) {
                eprintln!("error: {}", f.message);
            } else {
                eprintln!("error: {}: {}", f.name, f.message);
            }
            f.code
        }
    }
}
