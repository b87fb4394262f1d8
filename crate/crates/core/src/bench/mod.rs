//! Latency decomposition harness: repeated full key establishments on an
//! in-process testbed, timed per component on each side.

mod report;
mod stats;

pub use report::{plot_summary_svg, read_records_csv, write_records_csv, write_summary_csv};
pub use stats::{nearest_rank, spearman, summarize, SummaryRow};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{LatencyModel, MediumType};
use crate::client::ClientMode;
use crate::keycore::EncryptionMode;
use crate::testbed::{same_params, Establishment, KemChoice, Testbed, TestbedError, TestbedSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error("cannot launch testbed: {0}")]
    Launch(#[from] TestbedError),
    #[error("no records to summarize")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Qkms,
    Proxy,
    Client,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Qkms => "qkms",
            Side::Proxy => "proxy",
            Side::Client => "client",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    KeyGeneration,
    KeyProcessing,
    Network,
    Decryption,
    Reconstruction,
    PqKem,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::KeyGeneration,
        Component::KeyProcessing,
        Component::Network,
        Component::Decryption,
        Component::Reconstruction,
        Component::PqKem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::KeyGeneration => "key_generation",
            Component::KeyProcessing => "key_processing",
            Component::Network => "network",
            Component::Decryption => "decryption",
            Component::Reconstruction => "reconstruction",
            Component::PqKem => "pq_kem",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One side's view of one trial. Durations are microseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub config_id: String,
    pub trial: u32,
    pub side: Side,
    pub components: BTreeMap<Component, u64>,
    /// The side's measured span for the trial.
    pub wall_us: u64,
    /// Epoch microseconds at the end of the trial.
    pub timestamp_us: u64,
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn component_sum(&self) -> u64 {
        self.components.values().sum()
    }

    /// Wall-clock time not covered by any component, relative to the wall.
    pub fn residual(&self) -> f64 {
        if self.wall_us == 0 {
            return 0.0;
        }
        (self.wall_us as f64 - self.component_sum() as f64).abs() / self.wall_us as f64
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

fn default_id() -> String {
    "bench".into()
}
fn default_runs() -> u32 {
    1000
}
fn default_bits() -> u32 {
    256
}
fn default_splits() -> u32 {
    8
}
fn default_true() -> bool {
    true
}
fn default_channels() -> Vec<MediumType> {
    vec![MediumType::WiFi, MediumType::Bluetooth]
}
fn default_kem() -> KemChoice {
    KemChoice::Stub
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_runs")]
    pub runs: u32,
    #[serde(default = "default_bits")]
    pub key_bits: u32,
    #[serde(default = "default_splits")]
    pub num_splits: u32,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// One channel per listed medium, for each party.
    #[serde(default = "default_channels")]
    pub channels: Vec<MediumType>,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub mode: ClientMode,
    /// Provider used in pq-tunnel mode.
    #[serde(default = "default_kem")]
    pub kem: KemChoice,
    #[serde(default = "default_true")]
    pub via_proxy: bool,
    #[serde(default)]
    pub encryption: EncryptionMode,
    #[serde(default)]
    pub seed: u64,
    /// Run trials concurrently; timings are then not clean.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: BenchConfig =
            serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, BenchError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.num_splits == 0 || self.num_splits > u32::from(u16::MAX) {
            return bad("num_splits out of range");
        }
        if self.channels.is_empty() {
            return bad("need at least one channel");
        }
        if self.mode == ClientMode::PqTunnel && self.kem == KemChoice::None {
            return bad("pq-tunnel mode needs a KEM");
        }
        Ok(())
    }

    fn testbed_spec(&self) -> TestbedSpec {
        let mut spec = TestbedSpec::pair(self.channels.clone(), self.via_proxy, self.seed);
        for p in &mut spec.parties {
            p.latency = self.latency;
        }
        if self.mode == ClientMode::PqTunnel {
            spec.kem = self.kem;
            spec.proxy_upstream_tunnel = true;
        }
        spec
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub records: Vec<TrialRecord>,
    pub failures: u32,
}

impl BenchRun {
    pub fn successful(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(|r| r.is_ok())
    }
}

fn micros(d: Duration) -> u64 {
    d.as_micros().try_into().unwrap_or(u64::MAX)
}

fn epoch_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, micros)
}

fn sides(cfg: &BenchConfig) -> Vec<Side> {
    let mut s = vec![Side::Qkms];
    if cfg.via_proxy {
        s.push(Side::Proxy);
    }
    s.push(Side::Client);
    s
}

/// Per-side records for a successful establishment. The client and proxy
/// sides describe the first party.
fn records_for(cfg: &BenchConfig, trial: u32, est: &Establishment) -> Vec<TrialRecord> {
    let pq = cfg.mode == ClientMode::PqTunnel;
    let timestamp_us = epoch_micros();
    let record = |side, components: BTreeMap<Component, u64>, wall_us| TrialRecord {
        config_id: cfg.id.clone(),
        trial,
        side,
        components,
        wall_us,
        timestamp_us,
        failure: None,
    };
    let mut out = Vec::new();

    let r = &est.report;
    let mut q = BTreeMap::from([
        (Component::KeyGeneration, micros(r.key_generation)),
        (Component::KeyProcessing, micros(r.key_processing())),
        (Component::Network, micros(r.network())),
    ]);
    if pq {
        q.insert(Component::PqKem, micros(r.pq_kem.unwrap_or_default()));
    }
    out.push(record(Side::Qkms, q, micros(r.elapsed)));

    if cfg.via_proxy {
        let t = est.proxy_timing[0].unwrap_or_default();
        let mut p = BTreeMap::from([(Component::Network, micros(t.network()))]);
        if pq {
            p.insert(Component::PqKem, micros(t.pq_kem.unwrap_or_default()));
        }
        let wall = micros(t.network() + t.pq_kem.unwrap_or_default());
        out.push(record(Side::Proxy, p, wall));
    }

    let t = est.client_timing[0];
    let mut c = BTreeMap::from([
        (Component::Network, micros(t.network)),
        (Component::Decryption, micros(t.decryption)),
        (Component::Reconstruction, micros(t.reconstruction)),
    ]);
    if pq {
        c.insert(Component::PqKem, micros(t.pq_kem.unwrap_or_default()));
    }
    out.push(record(Side::Client, c, micros(t.wall)));
    out
}

fn failed_records(cfg: &BenchConfig, trial: u32, reason: &str) -> Vec<TrialRecord> {
    let timestamp_us = epoch_micros();
    sides(cfg)
        .into_iter()
        .map(|side| TrialRecord {
            config_id: cfg.id.clone(),
            trial,
            side,
            components: BTreeMap::new(),
            wall_us: 0,
            timestamp_us,
            failure: Some(reason.to_owned()),
        })
        .collect()
}

async fn one_trial(bed: &Testbed, cfg: &BenchConfig, trial: u32) -> Vec<TrialRecord> {
    let tag = format!("{}-{}-{trial}", cfg.id, cfg.seed);
    let mut params = same_params(&tag, cfg.key_bits, cfg.num_splits, cfg.shuffle);
    params.encryption = cfg.encryption;
    match bed.establish(0, 1, [&params, &params], cfg.mode).await {
        Ok(est) if est.recovered.iter().all(|k| *k == est.issued) => records_for(cfg, trial, &est),
        Ok(_) => failed_records(cfg, trial, "recovered key differs from the issued key"),
        Err(e) => failed_records(cfg, trial, &e.to_string()),
    }
}

/// Runs `cfg.runs` establishments. Launch problems fail the whole run;
/// failed trials are kept as records with `failure` set.
pub async fn run_bench(cfg: &BenchConfig) -> Result<BenchRun, BenchError> {
    cfg.validate()?;
    let bed = Testbed::launch(&cfg.testbed_spec()).await?;
    let records: Vec<TrialRecord> = if cfg.parallel {
        stream::iter(0..cfg.runs)
            .map(|t| one_trial(&bed, cfg, t))
            .buffer_unordered(8)
            .collect::<Vec<_>>()
            .await
            .into_iter()
            .flatten()
            .collect()
    } else {
        let mut all = Vec::new();
        for t in 0..cfg.runs {
            all.extend(one_trial(&bed, cfg, t).await);
        }
        all
    };
    bed.shutdown().await;
    let failures = records
        .iter()
        .filter(|r| r.side == Side::Client && !r.is_ok())
        .count() as u32;
    Ok(BenchRun { records, failures })
}

/// [`run_bench`] on a fresh multi-threaded runtime.
pub fn run_bench_blocking(cfg: &BenchConfig) -> Result<BenchRun, BenchError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(run_bench(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg = BenchConfig::default();
        assert_eq!(cfg.runs, 1000);
        assert_eq!(cfg.num_splits, 8);
        assert_eq!(cfg.mode, ClientMode::ClassicalMultipath);
        assert_eq!(cfg.encryption, EncryptionMode::DirectAsymmetric);
        let cfg = BenchConfig::from_json(
            r#"{"runs": 5, "mode": "pq_tunnel", "kem": "ml_kem768", "channels": ["nfc"], "encryption": "envelope"}"#,
        );
        assert!(cfg.is_err(), "unknown kem name is rejected");
        let cfg = BenchConfig::from_json(
            r#"{"runs": 5, "mode": "pq_tunnel", "kem": "stub", "channels": ["nfc"], "encryption": "envelope"}"#,
        )
        .unwrap();
        assert_eq!(cfg.channels, vec![MediumType::Nfc]);
        assert!(BenchConfig::from_json(r#"{"runs": 0}"#).is_err());
        assert!(BenchConfig::from_json(r#"{"channels": []}"#).is_err());
        assert!(BenchConfig::from_json(r#"{"mode": "pq_tunnel", "kem": "none"}"#).is_err());
    }

    #[test]
    fn residual_measures_unaccounted_time() {
        let r = TrialRecord {
            config_id: "x".into(),
            trial: 0,
            side: Side::Client,
            components: BTreeMap::from([(Component::Network, 90), (Component::Decryption, 5)]),
            wall_us: 100,
            timestamp_us: 0,
            failure: None,
        };
        assert_eq!(r.component_sum(), 95);
        assert!((r.residual() - 0.05).abs() < 1e-12);
    }
}
