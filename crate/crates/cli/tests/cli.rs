use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::Duration;

fn qgrid() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qgrid"));
    for v in [
        "QGRID_BROKER_ADDR",
        "QGRID_KEYFILE",
        "QGRID_DELTA_MS",
        "QGRID_SEED",
        "QGRID_NODE_ADDR",
    ] {
        c.env_remove(v);
    }
    c
}

fn run(args: &[&str]) -> Output {
    qgrid().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string()
}

#[test]
fn help_for_every_verb() {
    for verb in ["keys", "iv", "broker", "agent", "scenario", "stats", "bench"] {
        let o = run(&[verb, "--help"]);
        assert!(o.status.success(), "{verb}");
        assert!(stdout(&o).contains("Usage: qgrid"), "{verb}");
    }
}

#[test]
fn usage_errors_exit_2_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = run(&["bench", "run", "--out", out.to_str().unwrap(), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage-error: "));
    assert!(!out.exists());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn feed_then_inspect_corrupted_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let o = run(&[
        "keys",
        "feed",
        "--out-a",
        a.to_str().unwrap(),
        "--out-b",
        b.to_str().unwrap(),
        "--warmup",
        "3",
        "--duration-s",
        "1",
        "--rate",
        "2",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let mut bytes = fs::read(&a).unwrap();
    assert_eq!(bytes.len(), 5 * 46);
    bytes[46 + 12] ^= 0x40;
    let bad = dir.path().join("corrupted.bin");
    fs::write(&bad, bytes).unwrap();
    let o = run(&["keys", "inspect", bad.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.ends_with("crc_ok=false")).count(), 1);
    assert!(text.contains("offset=46 key_id=2"));
    assert!(text.trim_end().ends_with("frames=5 crc_failures=1"));
}

fn tiny_scenario(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.scenario");
    fs::write(
        &p,
        r#"{
  "key_source": { "mean_keys_per_sec": 3.0, "jitter": { "model": "GAUSSIAN", "std_dev": 0.5 }, "warmup_keys": 120 },
  "agents": [
    { "role": "INTEL", "party": "ODD", "topics_pub": [{ "topic": "PV/Control", "rate": "slow" }], "topics_sub": ["PV/Measurement"] },
    { "role": "PV", "party": "EVEN", "topics_pub": [{ "topic": "PV/Measurement", "rate": "fast" }], "topics_sub": ["PV/Control"] }
  ],
  "duration_s": 40,
  "seed": 1
}"#,
    )
    .unwrap();
    p
}

#[test]
fn scenario_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scn = tiny_scenario(dir.path());
    let mut outputs = Vec::new();
    for name in ["one", "two"] {
        let out = dir.path().join(name);
        let o = run(&[
            "scenario",
            "run",
            scn.to_str().unwrap(),
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("seed=42"));
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        outputs.push(
            files
                .iter()
                .map(|f| (f.file_name().unwrap().to_owned(), fs::read(f).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(outputs[0].len(), 9);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn scenario_env_seed_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let scn = tiny_scenario(dir.path());
    let out = dir.path().join("o");
    let o = qgrid()
        .args(["scenario", "run", scn.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("QGRID_SEED", "7")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("seed=7"));
    let o = qgrid()
        .args([
            "scenario",
            "run",
            scn.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("QGRID_SEED", "7")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("seed=9"));
}

#[test]
fn bad_scenario_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.scenario");
    fs::write(
        &p,
        r#"{ "key_source": { "mean_keys_per_sec": 2.0 },
             "agents": [ { "role": "INTEL", "party": "ODD", "topics_pub": [], "topics_sub": [] },
                         { "role": "PV", "party": "ODD", "topics_pub": [], "topics_sub": [] } ],
             "duration_s": 10 }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["scenario", "run", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error: config-error: agents[1].party"),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists());
}

#[test]
fn bench_quick_run_writes_rows_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.csv");
    let chart = dir.path().join("chart.dat");
    let o = run(&[
        "bench",
        "run",
        "--samples",
        "8",
        "--warmup",
        "1",
        "--rsa",
        "1024",
        "--out",
        out.to_str().unwrap(),
        "--chart",
        chart.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 8);
    assert_eq!(fs::read_to_string(&chart).unwrap().matches("# ").count(), 8);
}

#[test]
fn bench_rejects_rsa_8192_without_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = run(&["bench", "run", "--rsa", "2048,8192", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config-error:"));
    assert!(!out.exists());
}

#[test]
fn agent_without_broker_is_unavailable() {
    let o = run(&[
        "agent",
        "--role",
        "PV",
        "--broker",
        &free_addr(),
        "--listen",
        "127.0.0.1:0",
        "--connect-timeout-ms",
        "500",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error: broker-unavailable:"), "{}", stderr(&o));
}

#[test]
fn node_verbs_without_node_are_unavailable() {
    let o = qgrid()
        .args(["keys", "status"])
        .env("QGRID_NODE_ADDR", free_addr())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: node-unavailable:"));
}

struct Kill(Child);

impl Drop for Kill {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn live_broker_and_two_agents() {
    let dir = tempfile::tempdir().unwrap();
    let (ka, kb) = (dir.path().join("intel.bin"), dir.path().join("pv.bin"));
    let o = run(&[
        "keys",
        "feed",
        "--out-a",
        ka.to_str().unwrap(),
        "--out-b",
        kb.to_str().unwrap(),
        "--warmup",
        "400",
        "--duration-s",
        "1",
    ]);
    assert!(o.status.success());

    let broker_addr = free_addr();
    let _broker = Kill(
        qgrid()
            .args(["broker", "--listen", &broker_addr, "--retransmit-ms", "200"])
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    sleep(Duration::from_millis(300));

    let pv_node = free_addr();
    let agents: Vec<Child> = [("INTEL", &ka, free_addr()), ("PV", &kb, pv_node.clone())]
        .into_iter()
        .map(|(role, key, listen)| {
            qgrid()
                .args([
                    "agent",
                    "--role",
                    role,
                    "--broker",
                    &broker_addr,
                    "--listen",
                    &listen,
                    "--keyfile",
                    key.to_str().unwrap(),
                    "--fast-period-ms",
                    "200",
                    "--slow-period-ms",
                    "600",
                    "--key-poll-ms",
                    "200",
                    "--stats-period-ms",
                    "500",
                    "--duration-s",
                    "5",
                    "--seed",
                    "3",
                ])
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();

    sleep(Duration::from_millis(2500));
    let o = run(&["keys", "status", "--node", &pv_node]);
    assert!(o.status.success(), "{}", stderr(&o));
    let status: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(status["counters"]["added"], 402);
    let series = dir.path().join("pv_stats.csv");
    let o = run(&[
        "stats",
        "--node",
        &pv_node,
        "--samples",
        "2",
        "--interval-ms",
        "200",
        "--out",
        series.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&series).unwrap().lines().count(), 3);

    for child in agents {
        let o = child.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let s: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(s["peer_authenticated"], true, "{s}");
        assert_eq!(s["last_snapshot"]["verify_fail"], 0, "{s}");
        assert!(s["last_snapshot"]["verify_ok"].as_u64().unwrap() > 0, "{s}");
    }
}
