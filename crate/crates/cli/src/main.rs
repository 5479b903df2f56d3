//! `qgrid`: key inspection, scenario runs, live agents, stats and benchmarks.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qgrid_core::agents::AgentRole;
use qgrid_core::keystore::PartyRole;

pub const DEFAULT_NODE_ADDR: &str = "127.0.0.1:8787";
pub const DEFAULT_BROKER_ADDR: &str = "127.0.0.1:1883";

#[derive(Debug, Parser)]
#[command(
    name = "qgrid",
    version,
    about = "QKD-keyed GMAC authentication for pub/sub SCADA traffic"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Key files and a node's key table
    Keys {
        #[command(subcommand)]
        cmd: KeysCmd,
    },
    /// A node's IV pool
    Iv {
        #[command(subcommand)]
        cmd: IvCmd,
    },
    /// Run the TCP pub/sub broker until interrupted
    Broker(BrokerArgs),
    /// Run one live agent and its node service
    Agent(AgentArgs),
    /// Deterministic two-agent simulations
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Fetch counters from a node and optionally export them
    Stats(StatsArgs),
    /// GMAC versus RSA signature timings
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Debug, Args)]
pub struct NodeArg {
    /// Node service address
    #[arg(long, env = "QGRID_NODE_ADDR", default_value = DEFAULT_NODE_ADDR)]
    pub node: String,
}

#[derive(Debug, Subcommand)]
pub enum KeysCmd {
    /// Print every frame in a key file with its CRC verdict
    Inspect {
        #[arg(env = "QGRID_KEYFILE")]
        file: PathBuf,
    },
    /// Key table counters of a running node
    Status(NodeArg),
    /// Send a key file to a running node
    Ingest {
        file: PathBuf,
        #[command(flatten)]
        node: NodeArg,
    },
    /// Write the same simulated key stream to two files
    Feed(FeedArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Jitter {
    Constant,
    Gaussian,
    Dropout,
}

#[derive(Debug, Args)]
pub struct FeedArgs {
    #[arg(long)]
    pub out_a: PathBuf,
    #[arg(long)]
    pub out_b: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub rate: f64,
    #[arg(long, value_enum, default_value_t = Jitter::Constant)]
    pub jitter: Jitter,
    #[arg(long, default_value_t = 0.0)]
    pub std_dev: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout_start_s: f64,
    #[arg(long, default_value_t = 30.0)]
    pub dropout_duration_s: f64,
    #[arg(long, default_value_t = 60.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = qgrid_core::agents::DEFAULT_WARMUP_KEYS)]
    pub warmup: u64,
    #[arg(long, env = "QGRID_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum IvCmd {
    /// IV pool counters of a running node
    Status(NodeArg),
    /// Send captured entropy to a running node's IV pool
    Chunk {
        file: PathBuf,
        #[command(flatten)]
        node: NodeArg,
    },
}

#[derive(Debug, Args)]
pub struct BrokerArgs {
    #[arg(long, env = "QGRID_BROKER_ADDR", default_value = DEFAULT_BROKER_ADDR)]
    pub listen: SocketAddr,
    /// Resend unacknowledged QoS 1/2 packets this often
    #[arg(long, default_value_t = 1000)]
    pub retransmit_ms: u64,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long, value_parser = parse_role)]
    pub role: AgentRole,
    /// Key serial parity; defaults to ODD for INTEL and EVEN for PV
    #[arg(long, value_parser = parse_party)]
    pub party: Option<PartyRole>,
    #[arg(long, env = "QGRID_BROKER_ADDR", default_value = DEFAULT_BROKER_ADDR)]
    pub broker: SocketAddr,
    /// Key file to tail; keys can also be pushed through the node service
    #[arg(long, env = "QGRID_KEYFILE")]
    pub keyfile: Option<PathBuf>,
    /// Where the node service listens
    #[arg(long, env = "QGRID_NODE_ADDR", default_value = DEFAULT_NODE_ADDR)]
    pub listen: SocketAddr,
    #[arg(long, env = "QGRID_DELTA_MS", default_value_t = qgrid_core::authcodec::DEFAULT_DELTA_MS)]
    pub delta_ms: u64,
    #[arg(long, default_value_t = qgrid_core::keystore::DEFAULT_RESERVE_THRESHOLD)]
    pub reserve: u64,
    /// Seed the IV generator and message content; OS entropy when absent
    #[arg(long, env = "QGRID_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fast_period_ms: Option<u64>,
    #[arg(long)]
    pub slow_period_ms: Option<u64>,
    #[arg(long)]
    pub stats_period_ms: Option<u64>,
    #[arg(long)]
    pub key_poll_ms: Option<u64>,
    /// Stop after this many seconds; run until interrupted when absent
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long, default_value_t = 3000)]
    pub connect_timeout_ms: u64,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCmd {
    /// Run a scenario file and write its series
    Run {
        file: PathBuf,
        #[arg(long, env = "QGRID_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "QGRID_DELTA_MS")]
        delta_ms: Option<u64>,
        #[arg(long)]
        duration_s: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub node: NodeArg,
    /// Number of snapshots to collect
    #[arg(long, default_value_t = 1)]
    pub samples: u32,
    #[arg(long, default_value_t = 1000)]
    pub interval_ms: u64,
    /// Export the collected series here instead of printing the last one
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StatsFormat::Csv)]
    pub format: StatsFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchFormat {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Time sign and verify for each scheme and key size
    Run(BenchArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    pub message_len: usize,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub warmup: usize,
    #[arg(long, value_delimiter = ',', default_value = "128,192,256")]
    pub gmac: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,3072,4096")]
    pub rsa: Vec<u32>,
    /// Also measure RSA-8192
    #[arg(long)]
    pub rsa_extended: bool,
    #[arg(long, default_value_t = 300)]
    pub keygen_timeout_s: u64,
    #[arg(long, env = "QGRID_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to JSON for a `.json` path and CSV otherwise
    #[arg(long, value_enum)]
    pub format: Option<BenchFormat>,
    /// Also write gnuplot-ready series grouped by scheme and operation
    #[arg(long)]
    pub chart: Option<PathBuf>,
}

fn parse_role(s: &str) -> Result<AgentRole, String> {
    s.to_ascii_uppercase().parse()
}

fn parse_party(s: &str) -> Result<PartyRole, String> {
    match s.to_ascii_uppercase().as_str() {
        "ODD" => Ok(PartyRole::Odd),
        "EVEN" => Ok(PartyRole::Even),
        _ => Err(format!("expected ODD or EVEN, got {s:?}")),
    }
}

/// A failure reported as `error: <code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl ToString) -> Self {
        Self {
            code: code.into(),
            message: message.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage-error: {first}");
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("QGRID_LOG").unwrap_or_else(|_| "warn".into()))
        .init();
    match commands::dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code, e.message);
            ExitCode::from(1)
        }
    }
}
