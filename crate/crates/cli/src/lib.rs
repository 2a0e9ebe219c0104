//! The `dpsqkd` command line.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration or
//! usage error, 3 session protocol error, 4 key verification failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dpsqkd::distill::write_key;
use dpsqkd::params::ConfigError;
use dpsqkd::pipeline::{run_pipeline, DistillOptions, PipelineError, RunReport};
use dpsqkd::security::{rate_point, sweep_distance, SecurityError};
use dpsqkd::session::{run_receiver, run_sender, SessionError, SessionOutcome};
use dpsqkd::sim::{empirical_rates, simulate_session, write_detection_log, write_sender_record};
use dpsqkd::{load_config, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dpsqkd", version, about = "DPS quantum key distribution lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the analytic operating point as JSON
    Analyze(Common),
    /// Tabulate the analytic model over fiber length
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "from-km", default_value_t = 0.0)]
        from_km: f64,
        #[arg(long = "to-km", default_value_t = 40.0)]
        to_km: f64,
        #[arg(long = "step-km", default_value_t = 1.0)]
        step_km: f64,
        /// CSV path; the JSON table goes to `<out>.json`. CSV to stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a session and write its event files
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Detection log path; the sender record goes to `<out>.phases`
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate and distill a key in-process
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sample: SampleArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Sender side of a two-process session
    SessionSend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        peer: PeerArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Receiver side of a two-process session
    SessionRecv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
        #[command(flatten)]
        peer: PeerArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000_000)]
    slots: u64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Fraction of the sifted key disclosed to estimate the QBER
    #[arg(long, default_value_t = dpsqkd::pipeline::DEFAULT_SAMPLE_FRACTION)]
    sample_fraction: f64,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Report path; the key goes to `<out>.key`, the transcript to
    /// `<out>.transcript`. Report to stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include wall-clock time in the report
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct PeerArgs {
    /// Accept one connection on this address
    #[arg(long)]
    listen: Option<String>,
    /// Connect to a listening peer, retrying for up to 30 s
    #[arg(long)]
    connect: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Protocol(String),
    Verification,
    Failure(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Protocol(_) => EXIT_PROTOCOL,
            CliError::Verification => EXIT_VERIFY,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("config: {m}"),
            CliError::Protocol(m) => format!("protocol: {m}"),
            CliError::Verification => "key verification failed; no key was produced".into(),
            CliError::Failure(m) => m.clone(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SecurityError> for CliError {
    fn from(e: SecurityError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Security(e) => e.into(),
            PipelineError::Distill(dpsqkd::distill::DistillError::InvalidFraction(f)) => {
                CliError::Config(format!("--sample-fraction {f} is outside (0, 1)"))
            }
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Security(e) => e.into(),
            SessionError::Distill(dpsqkd::distill::DistillError::InvalidFraction(f)) => {
                CliError::Config(format!("--sample-fraction {f} is outside (0, 1)"))
            }
            other => CliError::Protocol(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Failure(format!("{}: {e}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn config(common: &Common) -> Result<ExperimentConfig, CliError> {
    load_config(&common.config).map_err(|e| {
        CliError::Config(format!("{}: {e}", common.config.display()))
    })
}

fn options(sample_fraction: f64) -> Result<DistillOptions, CliError> {
    if !(sample_fraction > 0.0 && sample_fraction < 1.0) {
        return Err(CliError::Config(format!(
            "--sample-fraction {sample_fraction} is outside (0, 1)"
        )));
    }
    Ok(DistillOptions {
        sample_fraction,
        ..DistillOptions::default()
    })
}

fn emit_report(
    out: &mut dyn Write,
    output: &OutputArgs,
    report: &RunReport,
    key: &dpsqkd::sim::Bits,
    transcript: Option<String>,
) -> Result<(), CliError> {
    let json = report.to_json();
    match &output.out {
        Some(path) => {
            write_file(path, &json)?;
            write_file(&with_suffix(path, ".key"), write_key(key))?;
            if let Some(t) = transcript {
                write_file(&with_suffix(path, ".transcript"), t)?;
            }
        }
        None => out
            .write_all(json.as_bytes())
            .map_err(|e| CliError::Failure(format!("stdout: {e}")))?,
    }
    if report.verified {
        Ok(())
    } else {
        Err(CliError::Verification)
    }
}

fn connect_peer(peer: &PeerArgs) -> Result<TcpStream, CliError> {
    if let Some(addr) = &peer.listen {
        let listener = TcpListener::bind(addr)
            .map_err(|e| CliError::Failure(format!("listen on {addr}: {e}")))?;
        let (stream, _) = listener
            .accept()
            .map_err(|e| CliError::Failure(format!("accept on {addr}: {e}")))?;
        return Ok(stream);
    }
    let addr = peer.connect.as_deref().expect("clap enforces one peer flag");
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(CliError::Failure(format!("connect to {addr}: {e}")))
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn session_output(
    out: &mut dyn Write,
    output: &OutputArgs,
    outcome: SessionOutcome,
    started: Instant,
) -> Result<(), CliError> {
    let mut report = outcome.report;
    if output.timing {
        report.wall_clock_s = Some(started.elapsed().as_secs_f64());
    }
    let transcript = outcome.transcript.map(|t| t.to_text());
    emit_report(out, output, &report, &outcome.key.bits, transcript)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let print = |out: &mut dyn Write, s: &str| {
        out.write_all(s.as_bytes())
            .map_err(|e| CliError::Failure(format!("stdout: {e}")))
    };
    match cli.command {
        Command::Analyze(common) => {
            let c = config(&common)?;
            let point = rate_point(&c)?;
            let mut s = serde_json::to_string_pretty(&point).expect("rate point serializes");
            s.push('\n');
            print(out, &s)
        }
        Command::Sweep {
            common,
            from_km,
            to_km,
            step_km,
            out: path,
        } => {
            let c = config(&common)?;
            let table = sweep_distance(&c, from_km, to_km, step_km)?;
            match path {
                Some(p) => {
                    write_file(&p, table.to_csv())?;
                    write_file(&with_suffix(&p, ".json"), table.to_json())
                }
                None => print(out, &table.to_csv()),
            }
        }
        Command::Simulate {
            common,
            run,
            out: path,
        } => {
            let c = config(&common)?;
            let (record, log) = simulate_session(&c, run.seed, run.slots);
            write_file(&path, write_detection_log(&log))?;
            write_file(&with_suffix(&path, ".phases"), write_sender_record(&record))?;
            let stats = empirical_rates(&record, &log, &c)
                .map_err(|e| CliError::Failure(e.to_string()))?;
            let summary = json!({
                "config_digest": c.digest(),
                "seed": run.seed,
                "slots": run.slots,
                "session_id": log.session_id,
                "events": stats.events,
                "errors": stats.errors,
                "sifted_rate_hz": stats.sifted_rate_hz,
                "qber": stats.qber,
            });
            let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
            s.push('\n');
            print(out, &s)
        }
        Command::Distill {
            common,
            run,
            sample,
            output,
        } => {
            let c = config(&common)?;
            let opts = options(sample.sample_fraction)?;
            let started = Instant::now();
            let result = run_pipeline(&c, run.seed, run.slots, &opts)?;
            let mut report = result.report;
            if output.timing {
                report.wall_clock_s = Some(started.elapsed().as_secs_f64());
            }
            emit_report(
                out,
                &output,
                &report,
                &result.receiver_key.bits,
                Some(result.transcript.to_text()),
            )
        }
        Command::SessionSend {
            common,
            run,
            peer,
            output,
        } => {
            let c = config(&common)?;
            let started = Instant::now();
            let (record, log) = simulate_session(&c, run.seed, run.slots);
            let stream = connect_peer(&peer)?;
            let reader = stream
                .try_clone()
                .map_err(|e| CliError::Failure(format!("socket: {e}")))?;
            let outcome = run_sender(reader, stream, &c, &record, &log)?;
            session_output(out, &output, outcome, started)
        }
        Command::SessionRecv {
            common,
            sample,
            peer,
            output,
        } => {
            let c = config(&common)?;
            let opts = options(sample.sample_fraction)?;
            let started = Instant::now();
            let stream = connect_peer(&peer)?;
            let reader = stream
                .try_clone()
                .map_err(|e| CliError::Failure(format!("socket: {e}")))?;
            let outcome = run_receiver(reader, stream, &c, &opts)?;
            session_output(out, &output, outcome, started)
        }
    }
}

/// Runs one command line, writing results to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
