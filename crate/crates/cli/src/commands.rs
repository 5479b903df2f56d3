use std::fs::{self, File};
use std::future::Future;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use qgrid_client::{ClientError, NodeClient};
use qgrid_core::agents::live::{run_agent, LiveOptions};
use qgrid_core::agents::scenario::{run_scenario, Scenario};
use qgrid_core::agents::{run_key_source, AgentConfig, JitterModel, KeyPipe, KeySourceConfig};
use qgrid_core::api::FrameInfo;
use qgrid_core::authcodec::FreshnessPolicy;
use qgrid_core::bench::{bench_gmac, bench_report, bench_rsa_signature, BenchConfig, ReportFormat};
use qgrid_core::clock::{Clock, SystemClock};
use qgrid_core::ivstore::CsprngSource;
use qgrid_core::keyframe::scan_frames;
use qgrid_core::keystore::{KeyStore, PoolPolicy};
use qgrid_core::node::Node;
use qgrid_core::pubsub::spawn_broker;
use qgrid_core::stats::{self, ExportFormat};

use crate::{
    AgentArgs, BenchArgs, BenchCmd, BenchFormat, BrokerArgs, CliError, Cmd, FeedArgs, IvCmd, Jitter, KeysCmd,
    ScenarioCmd, StatsArgs, StatsFormat,
};

type Result<T> = std::result::Result<T, CliError>;

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::new(e.code().to_string(), e)
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::new("io-error", format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn block_on<F: Future>(f: F) -> Result<F::Output> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("runtime-error", e))?;
    Ok(rt.block_on(f))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::new("io-error", e))?;
    println!("{s}");
    Ok(())
}

pub fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Keys { cmd } => keys(cmd),
        Cmd::Iv { cmd } => iv(cmd),
        Cmd::Broker(a) => broker(a),
        Cmd::Agent(a) => agent(a),
        Cmd::Scenario { cmd } => scenario(cmd),
        Cmd::Stats(a) => stats_cmd(a),
        Cmd::Bench { cmd: BenchCmd::Run(a) } => bench(a),
    }
}

fn keys(cmd: KeysCmd) -> Result<()> {
    match cmd {
        KeysCmd::Inspect { file } => {
            let bytes = read(&file)?;
            let frames: Vec<FrameInfo> = scan_frames(&bytes).iter().map(FrameInfo::from).collect();
            let mut out = io::stdout().lock();
            for f in &frames {
                let _ = writeln!(
                    out,
                    "offset={} key_id={} status={} crc={} crc_ok={}",
                    f.offset, f.key_id, f.status, f.crc, f.crc_ok
                );
            }
            let bad = frames.iter().filter(|f| !f.crc_ok).count();
            let _ = writeln!(out, "frames={} crc_failures={bad}", frames.len());
            Ok(())
        }
        KeysCmd::Status(n) => {
            let c = NodeClient::new(&n.node)?;
            print_json(&block_on(c.key_status())??)
        }
        KeysCmd::Ingest { file, node } => {
            let bytes = read(&file)?;
            let c = NodeClient::new(&node.node)?;
            print_json(&block_on(c.ingest(bytes))??)
        }
        KeysCmd::Feed(a) => feed(a),
    }
}

fn feed(a: FeedArgs) -> Result<()> {
    let jitter = match a.jitter {
        Jitter::Constant => JitterModel::Constant,
        Jitter::Gaussian => JitterModel::Gaussian { std_dev: a.std_dev },
        Jitter::Dropout => JitterModel::Dropout {
            start_s: a.dropout_start_s,
            duration_s: a.dropout_duration_s,
            std_dev: a.std_dev,
        },
    };
    let cfg = KeySourceConfig {
        mean_keys_per_sec: a.rate,
        jitter,
        duration_s: Some(a.duration_s),
        warmup_keys: a.warmup,
        first_serial: 1,
    };
    cfg.validate()
        .map_err(|(field, reason)| CliError::new("config-error", format!("{field}: {reason}")))?;
    let result = (|| -> io::Result<u64> {
        let mut fa = File::create(&a.out_a)?;
        let mut fb = File::create(&a.out_b)?;
        let s = run_key_source(&cfg, a.seed, [&mut fa, &mut fb])?;
        fa.sync_all()?;
        fb.sync_all()?;
        Ok(s.frames)
    })();
    match result {
        Ok(frames) => {
            println!(
                "frames={frames} out_a={} out_b={}",
                a.out_a.display(),
                a.out_b.display()
            );
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&a.out_a);
            let _ = fs::remove_file(&a.out_b);
            Err(CliError::new("io-error", e))
        }
    }
}

fn iv(cmd: IvCmd) -> Result<()> {
    match cmd {
        IvCmd::Status(n) => {
            let c = NodeClient::new(&n.node)?;
            print_json(&block_on(c.iv_status())??)
        }
        IvCmd::Chunk { file, node } => {
            let bytes = read(&file)?;
            let c = NodeClient::new(&node.node)?;
            print_json(&block_on(c.chunk_ivs(bytes))??)
        }
    }
}

fn broker(a: BrokerArgs) -> Result<()> {
    block_on(async move {
        let h = spawn_broker(a.listen, Duration::from_millis(a.retransmit_ms))
            .await
            .map_err(|e| CliError::new("io-error", format!("{}: {e}", a.listen)))?;
        println!("broker listening on {}", h.local_addr());
        let _ = tokio::signal::ctrl_c().await;
        h.shutdown().await;
        Ok(())
    })?
}

fn agent(a: AgentArgs) -> Result<()> {
    let mut cfg = AgentConfig::for_role(a.role);
    if let Some(p) = a.party {
        cfg.party = p;
    }
    if let Some(v) = a.fast_period_ms {
        cfg.fast_period_ms = v;
    }
    if let Some(v) = a.slow_period_ms {
        cfg.slow_period_ms = v;
    }
    if let Some(v) = a.stats_period_ms {
        cfg.stats_period_ms = v;
    }
    if let Some(v) = a.key_poll_ms {
        cfg.key_poll_ms = v;
    }
    cfg.validate("agent")
        .map_err(|(field, reason)| CliError::new("config-error", format!("{field}: {reason}")))?;
    let freshness =
        FreshnessPolicy::new(a.delta_ms).ok_or_else(|| CliError::new("config-error", "delta_ms: must be positive"))?;
    let entropy = match a.seed {
        Some(s) => CsprngSource::from_seed(s),
        None => CsprngSource::from_entropy(),
    };
    let feed: Box<dyn io::Read + Send> = match &a.keyfile {
        Some(p) => Box::new(File::open(p).map_err(|e| io_err(p, e))?),
        None => Box::new(KeyPipe::new()),
    };
    let node = Arc::new(
        Node::new(
            cfg.node_id(),
            cfg.party,
            PoolPolicy { threshold: a.reserve },
            freshness,
            KeyStore::new(),
            Arc::new(SystemClock) as Arc<dyn Clock>,
        )
        .with_entropy(Box::new(entropy)),
    );
    let opts = LiveOptions {
        broker: a.broker,
        connect_timeout: Duration::from_millis(a.connect_timeout_ms),
        tick: Duration::from_millis(50),
        duration: a.duration_s.map(Duration::from_secs_f64),
        seed: a.seed.unwrap_or_else(rand_seed),
    };
    block_on(async move {
        let service = qgrid_service::spawn_service(a.listen, node.clone())
            .await
            .map_err(|e| CliError::new("io-error", format!("{}: {e}", a.listen)))?;
        eprintln!("node {} service on {}", cfg.node_id(), service.local_addr());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let result = run_agent(cfg, node, feed, opts, shutdown).await;
        let _ = service.shutdown().await;
        let summary = result.map_err(|e| CliError::new(e.code(), e))?;
        print_json(&summary)
    })?
}

fn rand_seed() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

fn scenario(cmd: ScenarioCmd) -> Result<()> {
    let ScenarioCmd::Run {
        file,
        seed,
        delta_ms,
        duration_s,
        out,
    } = cmd;
    let mut scn = Scenario::load(&file).map_err(|e| CliError::new(e.code(), e))?;
    if let Some(s) = seed {
        scn.seed = s;
    }
    if let Some(d) = delta_ms {
        scn.delta_ms = d;
    }
    if let Some(d) = duration_s {
        scn.duration_s = d;
    }
    scn.validate().map_err(|e| CliError::new(e.code(), e))?;
    let report = run_scenario(&scn, Some(&out)).map_err(|e| CliError::new(e.code(), e))?;
    println!(
        "duration_s={} seed={} frames={} out={}",
        report.duration_s,
        report.seed,
        report.frames_emitted,
        out.display()
    );
    for a in &report.agents {
        let failed: u64 = a
            .verdicts
            .iter()
            .filter(|(r, _)| r.as_str() != "OK")
            .map(|(_, n)| n)
            .sum();
        let last = |s: &[qgrid_core::agents::Sample]| s.last().map_or(0, |x| x.value);
        println!(
            "{} authenticated={} received={} failed={failed} added_keys={} available_keys={}",
            a.node_id,
            a.counters.authenticated,
            a.counters.received,
            last(&a.series.added_keys),
            last(&a.series.available_keys)
        );
    }
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(CliError::new("config-error", "samples: must be positive"));
    }
    let c = NodeClient::new(&a.node.node)?;
    let series = block_on(async {
        let mut out = Vec::new();
        for i in 0..a.samples {
            if i > 0 {
                tokio::time::sleep(Duration::from_millis(a.interval_ms)).await;
            }
            out.push(c.stats().await?);
        }
        Ok::<_, ClientError>(out)
    })??;
    match a.out {
        Some(path) => {
            let format = match a.format {
                StatsFormat::Csv => ExportFormat::Csv,
                StatsFormat::Jsonl => ExportFormat::Jsonl,
            };
            stats::export(&series, format, &path).map_err(|e| CliError::new(e.code(), e))?;
            println!("snapshots={} out={}", series.len(), path.display());
            Ok(())
        }
        None => print_json(series.last().expect("at least one sample")),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut rsa = a.rsa.clone();
    if rsa.contains(&8192) && !a.rsa_extended {
        return Err(CliError::new("config-error", "RSA-8192 requires --rsa-extended"));
    }
    if a.rsa_extended && !rsa.contains(&8192) {
        rsa.push(8192);
    }
    let cfg = BenchConfig {
        message_len_bytes: a.message_len,
        samples: a.samples,
        warmup: a.warmup,
        gmac_key_bits: a.gmac.clone(),
        rsa_key_bits: rsa,
        keygen_timeout: Duration::from_secs(a.keygen_timeout_s),
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::new(e.code(), e))?;
    let format = match a.format {
        Some(BenchFormat::Json) => ReportFormat::Json,
        Some(BenchFormat::Csv) => ReportFormat::Csv,
        None if a.out.extension().is_some_and(|e| e == "json") => ReportFormat::Json,
        None => ReportFormat::Csv,
    };
    let mut results = bench_gmac(&cfg).map_err(|e| CliError::new(e.code(), e))?;
    results.extend(bench_rsa_signature(&cfg).map_err(|e| CliError::new(e.code(), e))?);
    bench_report(&results, format, &a.out, a.chart.as_deref()).map_err(|e| CliError::new(e.code(), e))?;
    for r in &results {
        println!(
            "{:<20} {:<6} {:>5} bits  {:>10.5} ms ± {:.5}",
            r.scheme, r.operation, r.key_bits, r.mean_ms, r.stderr_ms
        );
    }
    Ok(())
}
