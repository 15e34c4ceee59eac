//! The `thor` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration or input error,
//! 4 backend failure.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;
use thor_core::backend::{BackendError, BackendKind};
use thor_core::eval::{write_report, EvalReport};
use thor_core::export::{export_finetune, write_training_jsonl};
use thor_core::trace_io::{read_traces, TraceFile, TraceHeader, TraceWriter};
use thor_core::{evaluate, load_dataset, run_batch, Backend, Mode};
use toml::{Table, Value};

use crate::config::{from_table, overlay, parse_table, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "thor",
    version,
    about = "Three-hop reasoning runs for implicit sentiment analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a prompting mode over a dataset and write traces.
    Run(Box<RunArgs>),
    /// Score a trace file against gold labels.
    Eval(EvalArgs),
    /// Turn thor traces into supervised revising examples.
    ExportFinetune(ExportArgs),
    /// Compare several trace files in one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run manifest; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["vanilla", "zerocot", "thor"])]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["http", "mock"])]
    backend: Option<String>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    min_cluster: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    requests_per_second: Option<f64>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Backend(m) => write!(f, "backend failure: {m}"),
        }
    }
}

fn config_err(e: impl fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{}: {e}", path.display()))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::ExportFinetune(args) => export(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(failure) => {
            eprintln!("thor: {failure}");
            failure.code()
        }
    }
}

fn resolve_run_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            parse_table(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    let path = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| Value::from(p.to_string_lossy().into_owned()))
    };
    let string = |s: &Option<String>| s.clone().map(Value::from);
    let int = |n: Option<u64>, flag: &str| -> Result<Option<Value>, Failure> {
        n.map(|n| {
            i64::try_from(n)
                .map(Value::from)
                .map_err(|_| Failure::Config(format!("--{flag} is too large")))
        })
        .transpose()
    };

    let overrides = [
        ("", "data", path(&args.data)),
        ("", "mode", string(&args.mode)),
        ("", "out", path(&args.out)),
        (
            "",
            "parallelism",
            int(args.parallelism.map(|n| n as u64), "parallelism")?,
        ),
        ("backend", "kind", string(&args.backend)),
        ("backend", "mock_script", path(&args.mock_script)),
        ("backend", "endpoint_url", string(&args.endpoint)),
        ("backend", "model_name", string(&args.model)),
        ("backend", "api_key_env", string(&args.api_key_env)),
        (
            "backend",
            "max_in_flight",
            int(args.max_in_flight.map(|n| n as u64), "max-in-flight")?,
        ),
        (
            "backend",
            "requests_per_second",
            args.requests_per_second.map(Value::from),
        ),
        (
            "backend",
            "timeout_secs",
            int(args.timeout_secs, "timeout-secs")?,
        ),
        ("backend", "max_retries", args.max_retries.map(Value::from)),
        ("voting", "k", args.k.map(Value::from)),
        ("voting", "min_cluster", args.min_cluster.map(Value::from)),
        ("decoding", "temperature", args.temperature.map(Value::from)),
        ("decoding", "max_tokens", args.max_tokens.map(Value::from)),
        ("decoding", "seed", int(args.seed, "seed")?),
    ];
    for (section, key, value) in overrides {
        overlay(&mut table, section, key, value);
    }

    let config = from_table(table).map_err(Failure::Config)?;
    config
        .check_paths(args.config.as_deref())
        .map_err(Failure::Config)?;
    Ok(config)
}

fn run(args: Box<RunArgs>) -> Result<(), Failure> {
    let config = resolve_run_config(&args)?;
    let chain_config = config.chain_config().map_err(Failure::Config)?;
    let dataset = load_dataset(&config.data).map_err(config_err)?;
    let backend = Backend::from_config(&config.backend).map_err(|e| match e {
        BackendError::AuthMissing(_) => Failure::Backend(e.to_string()),
        other => Failure::Config(other.to_string()),
    })?;
    let parallelism = config.parallelism.unwrap_or(backend.max_in_flight());

    let file = File::create(&config.out).map_err(io_err(&config.out))?;
    let header = TraceHeader::new(config.mode, backend.describe(), chain_config.clone());
    let mut writer =
        TraceWriter::new(BufWriter::new(file), &header).map_err(io_err(&config.out))?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Config(format!("starting runtime: {e}")))?;
    let (total, failed) = runtime.block_on(async {
        let mut traces = run_batch(&dataset, &backend, config.mode, &chain_config, parallelism)
            .map_err(config_err)?;
        let (mut total, mut failed) = (0usize, 0usize);
        while let Some(trace) = traces.next().await {
            total += 1;
            if trace.is_failed() {
                failed += 1;
            }
            writer.write(&trace).map_err(io_err(&config.out))?;
        }
        Ok::<_, Failure>((total, failed))
    })?;
    writer
        .finish()
        .and_then(|mut w| w.flush())
        .map_err(io_err(&config.out))?;

    eprintln!(
        "thor: wrote {total} {} traces to {} ({failed} failed)",
        config.mode,
        config.out.display()
    );
    if total > 0 && failed == total {
        let hint = match config.backend.kind {
            BackendKind::Http => "check the endpoint and credentials",
            BackendKind::Mock => "check the mock script",
        };
        return Err(Failure::Backend(format!("every instance failed; {hint}")));
    }
    Ok(())
}

fn load_traces(path: &Path) -> Result<TraceFile, Failure> {
    read_traces(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn score(traces_path: &Path, data: &Path) -> Result<EvalReport, Failure> {
    let file = load_traces(traces_path)?;
    let dataset = load_dataset(data).map_err(config_err)?;
    let mut report = evaluate(&file.traces, &dataset).map_err(config_err)?;
    report.mode = Some(file.header.mode);
    report.config = Some(file.header.config);
    Ok(report)
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let report = score(&args.traces, &args.data)?;
    match &args.out {
        Some(out) => {
            write_report(out, &report).map_err(config_err)?;
            eprintln!(
                "thor: macro-F1 all {:.4}, isa {:.4}; report written to {}",
                report.macro_f1_all,
                report.macro_f1_isa,
                out.display()
            );
        }
        None => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{text}");
        }
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<(), Failure> {
    let file = load_traces(&args.traces)?;
    let dataset = load_dataset(&args.data).map_err(config_err)?;
    let records = export_finetune(&file.traces, &dataset).map_err(config_err)?;
    let out = File::create(&args.out).map_err(io_err(&args.out))?;
    write_training_jsonl(BufWriter::new(out), &records).map_err(io_err(&args.out))?;
    eprintln!(
        "thor: wrote {} training records to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::with_capacity(args.traces.len());
    for path in &args.traces {
        let report = score(path, &args.data)?;
        rows.push((report.mode.unwrap_or(Mode::Vanilla), report));
    }
    print!("{}", render_table(&rows));
    Ok(())
}

/// Macro-F1 as percentages: one row per mode, All and ISA columns.
pub fn render_table(rows: &[(Mode, EvalReport)]) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8}\n",
        "mode", "All", "ISA", "unparsed", "failed"
    );
    for (mode, r) in rows {
        out.push_str(&format!(
            "{:<10} {:>8.2} {:>8.2} {:>8} {:>8}\n",
            mode.to_string(),
            r.macro_f1_all * 100.0,
            r.macro_f1_isa * 100.0,
            r.counts.n_unparseable,
            r.counts.n_failed
        ));
    }
    out
}
