//! Sign/verify latency of GMAC against RSA PKCS#1 v1.5 signatures with
//! SHA-256.
//!
//! Each sample is timed with a monotonic clock around a single operation.
//! Inputs are generated outside the timed region. Warmup iterations run
//! first and are discarded.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rsa::pkcs1v15::{SigningKey, VerifyingKey};
use rsa::sha2::Sha256;
use rsa::signature::{Keypair, SignatureEncoding, Signer, Verifier};
use rsa::RsaPrivateKey;
use serde::{Deserialize, Serialize};

use crate::authcodec::{gmac_tag_any, gmac_verify_any};

pub const GMAC_SCHEME: &str = "GMAC";
pub const RSA_SCHEME: &str = "RSA-PKCS1v15-SHA256";
pub const GMAC_KEY_BITS: [u32; 3] = [128, 192, 256];
pub const RSA_KEY_BITS: [u32; 5] = [1024, 2048, 3072, 4096, 8192];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub message_len_bytes: usize,
    pub samples: usize,
    pub warmup: usize,
    pub gmac_key_bits: Vec<u32>,
    pub rsa_key_bits: Vec<u32>,
    pub keygen_timeout: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            message_len_bytes: 256,
            samples: 512,
            warmup: 16,
            gmac_key_bits: GMAC_KEY_BITS.to_vec(),
            rsa_key_bits: vec![1024, 2048, 3072, 4096],
            keygen_timeout: Duration::from_secs(300),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Operation {
    Sign,
    Verify,
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operation::Sign => "SIGN",
            Operation::Verify => "VERIFY",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub operation: Operation,
    pub scheme: String,
    pub key_bits: u32,
    pub mean_ms: f64,
    pub stderr_ms: f64,
    pub samples: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0}")]
    Config(String),
    #[error("RSA-{bits} key generation exceeded {timeout:?}")]
    KeygenTimeout { bits: u32, timeout: Duration },
    #[error("RSA-{bits} key generation failed: {reason}")]
    Keygen { bits: u32, reason: String },
    #[error("no results to report")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed results file: {0}")]
    Parse(String),
}

impl BenchError {
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::Config(_) => "config-error",
            BenchError::KeygenTimeout { .. } => "keygen-timeout",
            BenchError::Keygen { .. } => "keygen-error",
            BenchError::Empty => "empty-results",
            BenchError::Io(_) => "io-error",
            BenchError::Parse(_) => "parse-error",
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.samples < 2 {
            return Err(BenchError::Config("samples must be at least 2".into()));
        }
        if self.message_len_bytes == 0 {
            return Err(BenchError::Config("message length must be positive".into()));
        }
        if let Some(b) = self.gmac_key_bits.iter().find(|b| !GMAC_KEY_BITS.contains(b)) {
            return Err(BenchError::Config(format!("unsupported GMAC key size {b}")));
        }
        if let Some(b) = self.rsa_key_bits.iter().find(|b| !RSA_KEY_BITS.contains(b)) {
            return Err(BenchError::Config(format!("unsupported RSA key size {b}")));
        }
        Ok(())
    }
}

/// Mean and standard error (sample standard deviation over √n), in ms.
pub fn mean_stderr(samples_ms: &[f64]) -> (f64, f64) {
    let n = samples_ms.len() as f64;
    let mean = samples_ms.iter().sum::<f64>() / n;
    if samples_ms.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

fn result(operation: Operation, scheme: &str, key_bits: u32, samples_ms: &[f64]) -> BenchResult {
    let (mean_ms, stderr_ms) = mean_stderr(samples_ms);
    BenchResult {
        operation,
        scheme: scheme.to_string(),
        key_bits,
        mean_ms,
        stderr_ms,
        samples: samples_ms.len(),
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub fn bench_gmac(cfg: &BenchConfig) -> Result<Vec<BenchResult>, BenchError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for &bits in &cfg.gmac_key_bits {
        let mut key = vec![0u8; bits as usize / 8];
        let mut iv = [0u8; 16];
        let mut msg = vec![0u8; cfg.message_len_bytes];
        let (mut sign, mut verify) = (Vec::with_capacity(cfg.samples), Vec::with_capacity(cfg.samples));
        for i in 0..cfg.warmup + cfg.samples {
            rng.fill_bytes(&mut key);
            rng.fill_bytes(&mut iv);
            rng.fill_bytes(&mut msg);
            let t = Instant::now();
            let tag = gmac_tag_any(&key, &iv, &msg).expect("supported sizes");
            let sign_time = t.elapsed();
            let t = Instant::now();
            let ok = gmac_verify_any(&key, &iv, &msg, &tag).expect("supported sizes");
            let verify_time = t.elapsed();
            assert!(ok, "GMAC failed to verify its own tag");
            if i >= cfg.warmup {
                sign.push(ms(sign_time));
                verify.push(ms(verify_time));
            }
        }
        out.push(result(Operation::Sign, GMAC_SCHEME, bits, &sign));
        out.push(result(Operation::Verify, GMAC_SCHEME, bits, &verify));
    }
    Ok(out)
}

/// Generate an RSA key on a helper thread, giving up after `timeout`.
pub fn generate_rsa_key(bits: u32, seed: u64, timeout: Duration) -> Result<RsaPrivateKey, BenchError> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let _ = tx.send(RsaPrivateKey::new(&mut rng, bits as usize));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(k)) => Ok(k),
        Ok(Err(e)) => Err(BenchError::Keygen {
            bits,
            reason: e.to_string(),
        }),
        Err(_) => Err(BenchError::KeygenTimeout { bits, timeout }),
    }
}

pub fn bench_rsa_signature(cfg: &BenchConfig) -> Result<Vec<BenchResult>, BenchError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5253_4131);
    let mut out = Vec::new();
    for &bits in &cfg.rsa_key_bits {
        let private = generate_rsa_key(bits, cfg.seed.wrapping_add(bits as u64), cfg.keygen_timeout)?;
        let signer = SigningKey::<Sha256>::new(private);
        let verifier: VerifyingKey<Sha256> = signer.verifying_key();
        let mut msg = vec![0u8; cfg.message_len_bytes];
        let (mut sign, mut verify) = (Vec::with_capacity(cfg.samples), Vec::with_capacity(cfg.samples));
        for i in 0..cfg.warmup + cfg.samples {
            rng.fill_bytes(&mut msg);
            let t = Instant::now();
            let sig = signer.sign(&msg);
            let sign_time = t.elapsed();
            let t = Instant::now();
            let ok = verifier.verify(&msg, &sig).is_ok();
            let verify_time = t.elapsed();
            assert!(ok, "RSA failed to verify its own signature");
            debug_assert_eq!(sig.to_bytes().len(), bits as usize / 8);
            if i >= cfg.warmup {
                sign.push(ms(sign_time));
                verify.push(ms(verify_time));
            }
        }
        out.push(result(Operation::Sign, RSA_SCHEME, bits, &sign));
        out.push(result(Operation::Verify, RSA_SCHEME, bits, &verify));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: [&str; 6] = ["scheme", "operation", "key_bits", "mean_ms", "stderr_ms", "samples"];

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut s = CSV_HEADER.join(",");
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.scheme, r.operation, r.key_bits, r.mean_ms, r.stderr_ms, r.samples
        ));
    }
    s
}

pub fn parse_results_csv(text: &str) -> Result<Vec<BenchResult>, BenchError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| BenchError::Parse(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != CSV_HEADER {
        return Err(BenchError::Parse(format!("unexpected header {header:?}")));
    }
    rd.deserialize::<(String, Operation, u32, f64, f64, usize)>()
        .map(|row| {
            let (scheme, operation, key_bits, mean_ms, stderr_ms, samples) =
                row.map_err(|e| BenchError::Parse(e.to_string()))?;
            Ok(BenchResult {
                operation,
                scheme,
                key_bits,
                mean_ms,
                stderr_ms,
                samples,
            })
        })
        .collect()
}

/// Results grouped by (scheme, operation), ordered by key size.
pub fn chart_series(results: &[BenchResult]) -> BTreeMap<(String, Operation), Vec<BenchResult>> {
    let mut m: BTreeMap<(String, Operation), Vec<BenchResult>> = BTreeMap::new();
    for r in results {
        m.entry((r.scheme.clone(), r.operation)).or_default().push(r.clone());
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.key_bits);
    }
    m
}

/// Gnuplot-style blocks, one per (scheme, operation), separated by blank lines.
pub fn chart_text(results: &[BenchResult]) -> String {
    let mut s = String::new();
    for ((scheme, op), rows) in chart_series(results) {
        if !s.is_empty() {
            s.push_str("\n\n");
        }
        s.push_str(&format!("# {scheme} {op}\n# key_bits mean_ms stderr_ms\n"));
        for r in rows {
            s.push_str(&format!("{} {:.6} {:.6}\n", r.key_bits, r.mean_ms, r.stderr_ms));
        }
    }
    s
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("partial");
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Write the results table, and the chart series next to it when `chart`
/// is given.
pub fn bench_report(
    results: &[BenchResult],
    format: ReportFormat,
    path: &Path,
    chart: Option<&Path>,
) -> Result<(), BenchError> {
    if results.is_empty() {
        return Err(BenchError::Empty);
    }
    let body = match format {
        ReportFormat::Csv => results_csv(results).into_bytes(),
        ReportFormat::Json => serde_json::to_vec_pretty(results).map_err(io::Error::other)?,
    };
    write_atomic(path, &body)?;
    if let Some(c) = chart {
        if let Err(e) = write_atomic(c, chart_text(results).as_bytes()) {
            let _ = fs::remove_file(path);
            return Err(e.into());
        }
    }
    Ok(())
}
