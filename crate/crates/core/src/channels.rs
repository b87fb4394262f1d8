//! Heterogeneous channels: medium registry, simulated HTTP transports with
//! latency models and adversary taps, and uniform fragment-to-channel
//! assignment.
//!
//! Every medium is a local HTTP endpoint tagged with its [`MediumType`]. A
//! sender POSTs the JSON [`FragmentMessage`] to `http://host:port/fragment`
//! after sleeping for a delay sampled from the channel's [`LatencyModel`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{self, ServiceHandle};
use crate::wire::FragmentMessage;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel set is empty")]
    EmptyChannelSet,
    #[error("duplicate channel id {0:?}")]
    DuplicateChannel(String),
    #[error("invalid latency model on channel {channel}: {reason}")]
    InvalidLatency { channel: String, reason: String },
    #[error("no fragments to assign")]
    NoFragments,
    #[error("cannot bind {endpoint}: {source}")]
    Bind {
        endpoint: String,
        source: std::io::Error,
    },
    #[error("delivery on channel {channel} failed after {attempts} attempt(s): {reason}")]
    Delivery {
        channel: String,
        attempts: u32,
        reason: String,
    },
    #[error("channel config: {0}")]
    Config(String),
}

/// Structurally distinct transmission media.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MediumType {
    #[serde(rename = "wifi")]
    WiFi,
    #[serde(rename = "bluetooth")]
    Bluetooth,
    #[serde(rename = "nfc")]
    Nfc,
    #[serde(rename = "cellular")]
    Cellular,
    #[serde(rename = "ethernet")]
    Ethernet,
    #[serde(rename = "logical_port")]
    LogicalPort,
}

impl MediumType {
    pub const ALL: [MediumType; 6] = [
        MediumType::WiFi,
        MediumType::Bluetooth,
        MediumType::Nfc,
        MediumType::Cellular,
        MediumType::Ethernet,
        MediumType::LogicalPort,
    ];

    /// Position `1..=6` of this medium in the capacity model's type index.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|m| *m == self).unwrap() + 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MediumType::WiFi => "wifi",
            MediumType::Bluetooth => "bluetooth",
            MediumType::Nfc => "nfc",
            MediumType::Cellular => "cellular",
            MediumType::Ethernet => "ethernet",
            MediumType::LogicalPort => "logical_port",
        }
    }
}

impl fmt::Display for MediumType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Simulated transit delay. Log-normal parameters describe the natural log
/// of the delay in milliseconds, so the median is `exp(mu)` ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { micros: u64 },
    Uniform { min_micros: u64, max_micros: u64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Constant { micros: 0 }
    }
}

impl LatencyModel {
    fn validate(&self) -> Result<(), String> {
        match *self {
            LatencyModel::Constant { .. } => Ok(()),
            LatencyModel::Uniform {
                min_micros,
                max_micros,
            } if min_micros > max_micros => Err("uniform min exceeds max".into()),
            LatencyModel::Uniform { .. } => Ok(()),
            LatencyModel::LogNormal { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
                    Err("log-normal needs finite mu and sigma >= 0".into())
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        match *self {
            LatencyModel::Constant { micros } => Duration::from_micros(micros),
            LatencyModel::Uniform {
                min_micros,
                max_micros,
            } => Duration::from_micros(rng.gen_range(min_micros..=max_micros)),
            LatencyModel::LogNormal { mu, sigma } => {
                let ms = LogNormal::new(mu, sigma)
                    .expect("validated parameters")
                    .sample(rng);
                Duration::from_secs_f64(ms / 1e3)
            }
        }
    }

    pub fn median(&self) -> Duration {
        match *self {
            LatencyModel::Constant { micros } => Duration::from_micros(micros),
            LatencyModel::Uniform {
                min_micros,
                max_micros,
            } => Duration::from_micros((min_micros + max_micros) / 2),
            LatencyModel::LogNormal { mu, .. } => Duration::from_secs_f64(mu.exp() / 1e3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub channel_id: String,
    pub medium: MediumType,
    pub host: String,
    pub port: u16,
    #[serde(default)]
    pub latency_model: LatencyModel,
    /// Adversary observation flag; simulation only.
    #[serde(default)]
    pub tapped: bool,
}

impl ChannelDescriptor {
    /// A loopback channel; port 0 lets the receiver pick a free port.
    pub fn local(channel_id: impl Into<String>, medium: MediumType) -> Self {
        ChannelDescriptor {
            channel_id: channel_id.into(),
            medium,
            host: "127.0.0.1".into(),
            port: 0,
            latency_model: LatencyModel::default(),
            tapped: false,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    pub fn url(&self) -> String {
        format!("http://{}/fragment", self.endpoint())
    }
}

/// Channels available to one party, unique by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelSet(Vec<ChannelDescriptor>);

impl ChannelSet {
    pub fn new(channels: Vec<ChannelDescriptor>) -> Result<Self, ChannelError> {
        let mut seen = HashSet::new();
        for ch in &channels {
            if !seen.insert(ch.channel_id.as_str()) {
                return Err(ChannelError::DuplicateChannel(ch.channel_id.clone()));
            }
            ch.latency_model
                .validate()
                .map_err(|reason| ChannelError::InvalidLatency {
                    channel: ch.channel_id.clone(),
                    reason,
                })?;
        }
        Ok(ChannelSet(channels))
    }

    /// Parses a JSON array of channel descriptors.
    pub fn from_json(text: &str) -> Result<Self, ChannelError> {
        let channels: Vec<ChannelDescriptor> =
            serde_json::from_str(text).map_err(|e| ChannelError::Config(e.to_string()))?;
        Self::new(channels)
    }

    pub fn from_file(path: &Path) -> Result<Self, ChannelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ChannelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn get(&self, channel_id: &str) -> Option<&ChannelDescriptor> {
        self.0.iter().find(|c| c.channel_id == channel_id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ChannelDescriptor> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[ChannelDescriptor] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<ChannelDescriptor> {
        self.0
    }

    /// Number of distinct media (the diversity dimension).
    pub fn diversity(&self) -> usize {
        self.0.iter().map(|c| c.medium).collect::<HashSet<_>>().len()
    }
}

impl<'a> IntoIterator for &'a ChannelSet {
    type Item = &'a ChannelDescriptor;
    type IntoIter = std::slice::Iter<'a, ChannelDescriptor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Fragment index → channel id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchAssignment {
    channel_for: Vec<String>,
}

impl DispatchAssignment {
    pub fn channel_of(&self, fragment: usize) -> Option<&str> {
        self.channel_for.get(fragment).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.channel_for.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_for.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.channel_for
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.as_str()))
    }

    /// Fragments carried per channel id (channels with none are absent).
    pub fn load(&self) -> HashMap<&str, usize> {
        let mut load = HashMap::new();
        for c in &self.channel_for {
            *load.entry(c.as_str()).or_default() += 1;
        }
        load
    }
}

/// Assigns each fragment an independent, uniformly random channel.
pub fn assign_channels<R: Rng + ?Sized>(
    num_fragments: usize,
    channels: &ChannelSet,
    rng: &mut R,
) -> Result<DispatchAssignment, ChannelError> {
    if channels.is_empty() {
        return Err(ChannelError::EmptyChannelSet);
    }
    if num_fragments == 0 {
        return Err(ChannelError::NoFragments);
    }
    let channel_for = (0..num_fragments)
        .map(|_| channels.0[rng.gen_range(0..channels.len())].channel_id.clone())
        .collect();
    Ok(DispatchAssignment { channel_for })
}

/// One observed transmission on a tapped channel: the exact bytes that went
/// over the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    pub channel_id: String,
    pub medium: MediumType,
    pub wire: Vec<u8>,
}

impl Capture {
    pub fn message(&self) -> Option<FragmentMessage> {
        serde_json::from_slice(&self.wire).ok()
    }
}

/// Adversary capture log shared by every sender of a network.
#[derive(Debug, Clone, Default)]
pub struct TapLog(Arc<Mutex<Vec<Capture>>>);

impl TapLog {
    pub fn record(&self, capture: Capture) {
        self.0.lock().unwrap().push(capture);
    }

    pub fn snapshot(&self) -> Vec<Capture> {
        self.0.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelCounters {
    pub sent: u64,
    pub received: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ChannelStats(Arc<Mutex<HashMap<String, ChannelCounters>>>);

impl ChannelStats {
    fn update(&self, channel_id: &str, f: impl FnOnce(&mut ChannelCounters)) {
        let mut map = self.0.lock().unwrap();
        f(map.entry(channel_id.to_owned()).or_default());
    }

    pub fn get(&self, channel_id: &str) -> ChannelCounters {
        self.0
            .lock()
            .unwrap()
            .get(channel_id)
            .copied()
            .unwrap_or_default()
    }

    pub fn snapshot(&self) -> HashMap<String, ChannelCounters> {
        self.0.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryReceipt {
    pub channel_id: String,
    pub medium: MediumType,
    pub sampled_delay: Duration,
    /// Wall time from hand-off to acknowledged delivery.
    pub transit: Duration,
    pub attempts: u32,
}

/// A fragment as handed to a receiver's sink.
#[derive(Debug, Clone)]
pub struct ReceivedFragment {
    pub channel_id: String,
    pub medium: MediumType,
    pub message: FragmentMessage,
    pub received_at: Instant,
}

pub type FragmentSink = Arc<dyn Fn(ReceivedFragment) + Send + Sync>;

/// Sending and receiving side of the simulated media.
#[derive(Clone)]
pub struct ChannelNetwork {
    inner: Arc<NetworkInner>,
}

struct NetworkInner {
    http: reqwest::Client,
    taps: TapLog,
    stats: ChannelStats,
    latency_rng: Mutex<ChaCha8Rng>,
    max_attempts: u32,
}

impl ChannelNetwork {
    pub fn new(seed: u64) -> Self {
        Self::with_taps(seed, TapLog::default())
    }

    pub fn with_taps(seed: u64, taps: TapLog) -> Self {
        ChannelNetwork {
            inner: Arc::new(NetworkInner {
                http: net::http_client(),
                taps,
                stats: ChannelStats::default(),
                latency_rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                max_attempts: 3,
            }),
        }
    }

    pub fn taps(&self) -> &TapLog {
        &self.inner.taps
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.inner.stats
    }

    /// Delivers one fragment message over `channel`.
    ///
    /// The tap capture is recorded synchronously before the first await, so
    /// concurrently started sends appear in the log in start order.
    pub async fn send_fragment(
        &self,
        msg: &FragmentMessage,
        channel: &ChannelDescriptor,
    ) -> Result<DeliveryReceipt, ChannelError> {
        let wire = msg.to_json();
        let start = Instant::now();
        self.inner.stats.update(&channel.channel_id, |c| c.sent += 1);
        if channel.tapped {
            self.inner.taps.record(Capture {
                channel_id: channel.channel_id.clone(),
                medium: channel.medium,
                wire: wire.clone(),
            });
        }
        let delay = channel
            .latency_model
            .sample(&mut *self.inner.latency_rng.lock().unwrap());
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }

        let url = channel.url();
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            let sent = self
                .inner
                .http
                .post(&url)
                .header("content-type", "application/json")
                .body(wire.clone())
                .send()
                .await;
            match sent {
                Ok(resp) if resp.status().is_success() => break Ok(()),
                Ok(resp) => break Err(format!("receiver answered {}", resp.status())),
                Err(err) if attempts < self.inner.max_attempts && err.is_connect() => {
                    tokio::time::sleep(Duration::from_millis(5 * u64::from(attempts))).await;
                }
                Err(err) if err.is_connect() => break Err("endpoint unreachable".into()),
                Err(err) if err.is_timeout() => break Err("timed out".into()),
                Err(_) => break Err("transport error".into()),
            }
        };
        match outcome {
            Ok(()) => Ok(DeliveryReceipt {
                channel_id: channel.channel_id.clone(),
                medium: channel.medium,
                sampled_delay: delay,
                transit: start.elapsed(),
                attempts,
            }),
            Err(reason) => {
                self.inner
                    .stats
                    .update(&channel.channel_id, |c| c.errors += 1);
                Err(ChannelError::Delivery {
                    channel: channel.channel_id.clone(),
                    attempts,
                    reason,
                })
            }
        }
    }

    /// Starts a listener for `channel`; a port of 0 picks a free port, which
    /// is reflected in [`ReceiverHandle::descriptor`].
    pub async fn open_receiver(
        &self,
        channel: ChannelDescriptor,
        sink: FragmentSink,
    ) -> Result<ReceiverHandle, ChannelError> {
        let listener = net::bind(&channel.endpoint())
            .await
            .map_err(|source| ChannelError::Bind {
                endpoint: channel.endpoint(),
                source,
            })?;
        let mut descriptor = channel;
        let local = listener.local_addr().map_err(|source| ChannelError::Bind {
            endpoint: descriptor.endpoint(),
            source,
        })?;
        descriptor.port = local.port();
        let state = Arc::new(ReceiverState {
            channel_id: descriptor.channel_id.clone(),
            medium: descriptor.medium,
            sink,
            stats: self.inner.stats.clone(),
        });
        let router = Router::new()
            .route("/fragment", post(receive))
            .with_state(state);
        let service = net::spawn_service(listener, router).map_err(|source| ChannelError::Bind {
            endpoint: descriptor.endpoint(),
            source,
        })?;
        Ok(ReceiverHandle {
            descriptor,
            service,
        })
    }
}

struct ReceiverState {
    channel_id: String,
    medium: MediumType,
    sink: FragmentSink,
    stats: ChannelStats,
}

async fn receive(State(state): State<Arc<ReceiverState>>, body: Bytes) -> StatusCode {
    let received_at = Instant::now();
    let Ok(message) = serde_json::from_slice::<FragmentMessage>(&body) else {
        return StatusCode::BAD_REQUEST;
    };
    state.stats.update(&state.channel_id, |c| c.received += 1);
    (state.sink)(ReceivedFragment {
        channel_id: state.channel_id.clone(),
        medium: state.medium,
        message,
        received_at,
    });
    StatusCode::NO_CONTENT
}

/// A running channel listener.
#[derive(Debug)]
pub struct ReceiverHandle {
    descriptor: ChannelDescriptor,
    service: ServiceHandle,
}

impl ReceiverHandle {
    /// The descriptor with the port actually bound.
    pub fn descriptor(&self) -> &ChannelDescriptor {
        &self.descriptor
    }

    pub async fn shutdown(self) {
        self.service.shutdown().await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn set(n: usize) -> ChannelSet {
        ChannelSet::new(
            (0..n)
                .map(|i| ChannelDescriptor::local(format!("ch{i}"), MediumType::ALL[i % 6]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn medium_indices_are_distinct() {
        let idx: Vec<usize> = MediumType::ALL.iter().map(|m| m.index()).collect();
        assert_eq!(idx, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(
            serde_json::to_string(&MediumType::LogicalPort).unwrap(),
            "\"logical_port\""
        );
    }

    #[test]
    fn channel_set_validation() {
        let dup = vec![
            ChannelDescriptor::local("a", MediumType::WiFi),
            ChannelDescriptor::local("a", MediumType::Nfc),
        ];
        assert!(matches!(
            ChannelSet::new(dup),
            Err(ChannelError::DuplicateChannel(_))
        ));
        let mut bad = ChannelDescriptor::local("b", MediumType::WiFi);
        bad.latency_model = LatencyModel::LogNormal {
            mu: 1.0,
            sigma: -1.0,
        };
        assert!(ChannelSet::new(vec![bad]).is_err());
    }

    #[test]
    fn config_file_format() {
        let text = r#"[
            {"channel_id": "w", "medium": "wifi", "host": "127.0.0.1", "port": 9001,
             "latency_model": {"distribution": "log_normal", "mu": 1.0, "sigma": 0.3},
             "tapped": true},
            {"channel_id": "b", "medium": "bluetooth", "host": "127.0.0.1", "port": 9002}
        ]"#;
        let set = ChannelSet::from_json(text).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.diversity(), 2);
        let w = set.get("w").unwrap();
        assert!(w.tapped);
        assert_eq!(w.url(), "http://127.0.0.1:9001/fragment");
        assert_eq!(set.get("b").unwrap().latency_model, LatencyModel::default());
    }

    #[test]
    fn assignment_single_channel_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = assign_channels(9, &set(1), &mut rng).unwrap();
        assert!(a.iter().all(|(_, c)| c == "ch0"));
        assert!(matches!(
            assign_channels(3, &ChannelSet::default(), &mut rng),
            Err(ChannelError::EmptyChannelSet)
        ));
        assert!(assign_channels(0, &set(2), &mut rng).is_err());
        let a1 = assign_channels(8, &set(3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a2 = assign_channels(8, &set(3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn assignment_marginals_are_uniform() {
        let channels = set(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut on_first = [0u32; 8];
        for _ in 0..draws {
            let a = assign_channels(8, &channels, &mut rng).unwrap();
            for (i, c) in a.iter() {
                on_first[i] += u32::from(c == "ch0");
            }
        }
        let sigma = (0.25 / f64::from(draws)).sqrt();
        for c in on_first {
            let freq = f64::from(c) / f64::from(draws);
            assert!((freq - 0.5).abs() < 3.0 * sigma, "freq {freq}");
        }
    }

    #[test]
    fn empty_channel_probability_matches_binomial() {
        // n = 8 fragments over d = 4 channels: a given channel stays empty
        // with probability (3/4)^8.
        let channels = set(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000u32;
        let mut empty = 0u32;
        let mut any_empty = 0u32;
        for _ in 0..draws {
            let assignment = assign_channels(8, &channels, &mut rng).unwrap();
            let load = assignment.load();
            empty += u32::from(!load.contains_key("ch0"));
            any_empty += u32::from(load.len() < 4);
        }
        let p = 0.75f64.powi(8);
        let sigma = (p * (1.0 - p) / f64::from(draws)).sqrt();
        let freq = f64::from(empty) / f64::from(draws);
        assert!((freq - p).abs() < 3.0 * sigma, "freq {freq} vs {p}");
        assert!(any_empty > 0);
    }

    #[test]
    fn latency_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = LatencyModel::Constant { micros: 250 };
        assert_eq!(c.sample(&mut rng), Duration::from_micros(250));
        let u = LatencyModel::Uniform {
            min_micros: 10,
            max_micros: 20,
        };
        for _ in 0..100 {
            let d = u.sample(&mut rng).as_micros();
            assert!((10..=20).contains(&d));
        }
        let ln = LatencyModel::LogNormal { mu: 2.0, sigma: 0.7 };
        let mut samples: Vec<f64> = (0..10_001)
            .map(|_| ln.sample(&mut rng).as_secs_f64() * 1e3)
            .collect();
        samples.sort_by(f64::total_cmp);
        let median = samples[5_000];
        assert!((median / 2f64.exp() - 1.0).abs() < 0.05, "median {median}");
    }

    fn counting_sink() -> (FragmentSink, Arc<AtomicUsize>) {
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        (
            Arc::new(move |_f: ReceivedFragment| {
                c.fetch_add(1, Ordering::SeqCst);
            }),
            count,
        )
    }

    fn message() -> FragmentMessage {
        FragmentMessage {
            session_tag: "tag".into(),
            ciphertext: vec![1, 2, 3],
        }
    }

    #[tokio::test]
    async fn loopback_send_with_zero_latency() {
        let net = ChannelNetwork::new(1);
        let (sink, count) = counting_sink();
        let rx = net
            .open_receiver(ChannelDescriptor::local("w", MediumType::WiFi), sink)
            .await
            .unwrap();
        let desc = rx.descriptor().clone();
        assert_ne!(desc.port, 0);
        // Warm the connection pool, then measure.
        net.send_fragment(&message(), &desc).await.unwrap();
        let receipt = net.send_fragment(&message(), &desc).await.unwrap();
        assert!(receipt.transit < Duration::from_millis(5), "{receipt:?}");
        assert_eq!(count.load(Ordering::SeqCst), 2);
        assert_eq!(net.stats().get("w"), ChannelCounters { sent: 2, received: 2, errors: 0 });
        rx.shutdown().await;
    }

    #[tokio::test]
    async fn tap_records_one_ciphertext_per_send() {
        let net = ChannelNetwork::new(2);
        let (sink, _) = counting_sink();
        let mut desc = ChannelDescriptor::local("b", MediumType::Bluetooth);
        desc.tapped = true;
        let rx = net.open_receiver(desc, sink).await.unwrap();
        let desc = rx.descriptor().clone();
        for i in 0..3 {
            net.send_fragment(&message(), &desc).await.unwrap();
            assert_eq!(net.taps().len(), i + 1);
        }
        let cap = &net.taps().snapshot()[0];
        assert_eq!(cap.medium, MediumType::Bluetooth);
        assert_eq!(cap.message().unwrap(), message());
        rx.shutdown().await;
    }

    #[tokio::test]
    async fn shutdown_releases_port_and_bind_conflicts_error() {
        let net = ChannelNetwork::new(3);
        let (sink, _) = counting_sink();
        let rx = net
            .open_receiver(ChannelDescriptor::local("p", MediumType::LogicalPort), sink.clone())
            .await
            .unwrap();
        let desc = rx.descriptor().clone();
        let clash = net.open_receiver(desc.clone(), sink.clone()).await;
        assert!(matches!(clash, Err(ChannelError::Bind { .. })));
        rx.shutdown().await;
        let again = net.open_receiver(desc, sink).await.unwrap();
        again.shutdown().await;
    }

    #[tokio::test]
    async fn logical_ports_deliver_independently() {
        let net = ChannelNetwork::new(4);
        let (sink_a, count_a) = counting_sink();
        let (sink_b, count_b) = counting_sink();
        let a = net
            .open_receiver(ChannelDescriptor::local("lp-a", MediumType::LogicalPort), sink_a)
            .await
            .unwrap();
        let b = net
            .open_receiver(ChannelDescriptor::local("lp-b", MediumType::LogicalPort), sink_b)
            .await
            .unwrap();
        net.send_fragment(&message(), a.descriptor()).await.unwrap();
        net.send_fragment(&message(), b.descriptor()).await.unwrap();
        net.send_fragment(&message(), b.descriptor()).await.unwrap();
        assert_eq!(count_a.load(Ordering::SeqCst), 1);
        assert_eq!(count_b.load(Ordering::SeqCst), 2);
        a.shutdown().await;
        b.shutdown().await;
    }

    #[tokio::test]
    async fn unreachable_endpoint_is_a_delivery_error() {
        let net = ChannelNetwork::new(5);
        let (sink, _) = counting_sink();
        let rx = net
            .open_receiver(ChannelDescriptor::local("gone", MediumType::Ethernet), sink)
            .await
            .unwrap();
        let desc = rx.descriptor().clone();
        rx.shutdown().await;
        let msg = FragmentMessage {
            session_tag: "secret-tag".into(),
            ciphertext: b"PAYLOADBYTES".to_vec(),
        };
        let err = net.send_fragment(&msg, &desc).await.unwrap_err();
        let text = err.to_string();
        assert!(matches!(err, ChannelError::Delivery { attempts: 3, .. }));
        assert!(!text.contains("PAYLOAD"));
        let counters = net.stats().get("gone");
        assert_eq!(counters.sent, counters.received + counters.errors);
    }
}
