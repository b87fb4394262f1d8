//! The key management server: pairs requests by tagname, generates one
//! session key per pair, and dispatches encrypted fragments to each party
//! over that party's channels.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::future::join_all;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;

use crate::channels::{
    assign_channels, ChannelError, ChannelNetwork, ChannelSet, DeliveryReceipt, DispatchAssignment,
};
use crate::client::kem::KemProvider;
use crate::client::tunnel::{TunnelError, TunnelKey, TunnelRequest, TunnelResponse, TunnelTerminator};
use crate::keycore::{
    fragment_key, generate_key_with, shuffle_fragments, EncryptionMode, FragmentSealer, KeyError,
    RecipientPublicKey, SessionKey, DEFAULT_KEY_BITS,
};
use crate::net::{self, ErrorBody, HttpError, ServiceHandle};
use crate::wire::{b64, Ack, AckStatus, FragmentMessage};

/// Body of `POST /get-key-parameters`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRequest {
    pub tagname: String,
    pub key_bits: u32,
    pub num_splits: u32,
    pub shuffle: bool,
    pub channels: ChannelSet,
    /// SubjectPublicKeyInfo DER, base64 on the wire.
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
    pub party_label: String,
    #[serde(default)]
    pub encryption: EncryptionMode,
}

impl KeyRequest {
    /// Checks the request invariants and parses the recipient key.
    pub fn validate(&self) -> Result<RecipientPublicKey, QkmsError> {
        if self.tagname.is_empty() {
            return Err(QkmsError::Invalid("tagname is empty".into()));
        }
        if self.num_splits == 0 {
            return Err(QkmsError::Invalid("num_splits must be at least 1".into()));
        }
        if self.channels.is_empty() {
            return Err(QkmsError::Invalid("channel list is empty".into()));
        }
        RecipientPublicKey::from_der(&self.public_key)
            .map_err(|_| QkmsError::Invalid("public_key does not parse".into()))
    }
}

#[derive(Debug, Error)]
pub enum QkmsError {
    #[error("invalid key request: {0}")]
    Invalid(String),
    #[error("tagname {0:?} already has two parties")]
    Duplicate(String),
    #[error("party {party:?} is already waiting on tagname {tagname:?}")]
    AlreadyWaiting { tagname: String, party: String },
    #[error("key_bits mismatch on tagname {tagname:?}: {first} vs {second}")]
    Negotiation {
        tagname: String,
        first: u32,
        second: u32,
    },
    #[error("key parameters: {0}")]
    Key(#[from] KeyError),
    #[error("dispatch to party {party:?} aborted: {source}")]
    Dispatch {
        party: String,
        #[source]
        source: ChannelError,
    },
    #[error(transparent)]
    Tunnel(#[from] TunnelError),
}

impl QkmsError {
    pub fn status(&self) -> StatusCode {
        match self {
            QkmsError::Invalid(_) | QkmsError::Key(_) => StatusCode::BAD_REQUEST,
            QkmsError::Duplicate(_)
            | QkmsError::AlreadyWaiting { .. }
            | QkmsError::Negotiation { .. } => StatusCode::CONFLICT,
            QkmsError::Dispatch { .. } => StatusCode::BAD_GATEWAY,
            QkmsError::Tunnel(_) => StatusCode::UNAUTHORIZED,
        }
    }
}

impl From<QkmsError> for HttpError {
    fn from(e: QkmsError) -> Self {
        HttpError::new(e.status(), e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct QkmsConfig {
    pub pairing_window: Duration,
    /// How long a dispatched tagname stays reserved against reuse.
    pub issued_retention: Duration,
    pub allowed_bits: Vec<u32>,
    /// Seeds every random choice (key material, shuffles, encryption,
    /// channel assignment, latency); `None` draws from the OS.
    pub seed: Option<u64>,
}

impl Default for QkmsConfig {
    fn default() -> Self {
        QkmsConfig {
            pairing_window: Duration::from_secs(30),
            issued_retention: Duration::from_secs(600),
            allowed_bits: DEFAULT_KEY_BITS.to_vec(),
            seed: None,
        }
    }
}

/// Context of one arriving request.
#[derive(Debug, Clone)]
pub struct Arrival {
    pub at: Instant,
    /// Present when the request came through the KEM tunnel; fragments for
    /// this party are then sealed a second time under it.
    pub tunnel: Option<TunnelKey>,
    /// Time spent terminating the tunnel for this request.
    pub pq_kem: Option<Duration>,
}

impl Arrival {
    pub fn at(at: Instant) -> Self {
        Arrival {
            at,
            tunnel: None,
            pq_kem: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Party {
    request: KeyRequest,
    public_key: RecipientPublicKey,
    arrival: Arrival,
}

/// The first arrival on a tagname, waiting for its partner.
#[derive(Debug, Clone)]
pub struct PendingSession {
    pub tagname: String,
    pub party_label: String,
    pub key_bits: u32,
    pub arrived: Instant,
    pub expiry: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Waiting,
    Dispatching,
    Dispatched,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatusBody {
    pub tagname: String,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Per-party dispatch timings and delivery receipts.
#[derive(Debug, Clone)]
pub struct DispatchReport {
    pub party_label: String,
    /// Fragmentation, shuffle, and per-fragment encryption.
    pub key_processing: Duration,
    /// Concurrent sends until the last delivery is acknowledged.
    pub network: Duration,
    pub assignment: DispatchAssignment,
    pub receipts: Vec<DeliveryReceipt>,
}

/// Server-side record of one paired session.
#[derive(Debug, Clone)]
pub struct SessionReport {
    pub tagname: String,
    /// Tunnel termination for the request that completed the pair.
    pub pq_kem: Option<Duration>,
    pub key_generation: Duration,
    pub parties: Vec<DispatchReport>,
    /// From arrival of the pairing request to the end of the last dispatch.
    pub elapsed: Duration,
    pub outcome: Result<(), String>,
}

impl SessionReport {
    pub fn key_processing(&self) -> Duration {
        self.parties.iter().map(|p| p.key_processing).sum()
    }

    pub fn network(&self) -> Duration {
        self.parties.iter().map(|p| p.network).sum()
    }
}

pub type KeyObserver = Arc<dyn Fn(&str, &SessionKey) + Send + Sync>;

/// A generated key, held only while its session is being dispatched.
struct SessionRecord {
    tagname: String,
    key: Option<SessionKey>,
    live: Arc<AtomicUsize>,
}

impl SessionRecord {
    fn new(tagname: &str, key: SessionKey, live: Arc<AtomicUsize>) -> Self {
        live.fetch_add(1, Ordering::SeqCst);
        SessionRecord {
            tagname: tagname.to_owned(),
            key: Some(key),
            live,
        }
    }

    fn key(&self) -> &SessionKey {
        self.key.as_ref().expect("key present until the record drops")
    }
}

impl Drop for SessionRecord {
    fn drop(&mut self) {
        // SessionKey zeroizes its material on drop.
        self.key.take();
        self.live.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Default)]
struct Table {
    pending: HashMap<String, (Party, Instant)>,
    issued: HashMap<String, (Instant, SessionStatus, Option<String>)>,
}

struct Inner {
    config: QkmsConfig,
    network: ChannelNetwork,
    table: Mutex<Table>,
    rng: Mutex<ChaCha20Rng>,
    reports: Mutex<Vec<SessionReport>>,
    observer: Mutex<Option<KeyObserver>>,
    live_keys: Arc<AtomicUsize>,
    issued_keys: AtomicU64,
    terminator: Mutex<TunnelTerminator>,
}

#[derive(Clone)]
pub struct Qkms {
    inner: Arc<Inner>,
}

impl Qkms {
    pub fn new(config: QkmsConfig, network: ChannelNetwork) -> Self {
        let rng = match config.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Qkms {
            inner: Arc::new(Inner {
                config,
                network,
                table: Mutex::new(Table::default()),
                rng: Mutex::new(rng),
                reports: Mutex::new(Vec::new()),
                observer: Mutex::new(None),
                live_keys: Arc::new(AtomicUsize::new(0)),
                issued_keys: AtomicU64::new(0),
                terminator: Mutex::new(TunnelTerminator::new()),
            }),
        }
    }

    pub fn config(&self) -> &QkmsConfig {
        &self.inner.config
    }

    pub fn network(&self) -> &ChannelNetwork {
        &self.inner.network
    }

    /// Accepts KEM tunnels for `provider`.
    pub fn add_kem_provider(&self, provider: Arc<dyn KemProvider>) {
        let mut t = self.inner.terminator.lock().unwrap();
        *t = std::mem::take(&mut *t).with_provider(provider);
    }

    fn terminator(&self) -> TunnelTerminator {
        self.inner.terminator.lock().unwrap().clone()
    }

    /// Test instrumentation: called once with each generated key.
    pub fn set_key_observer(&self, observer: KeyObserver) {
        *self.inner.observer.lock().unwrap() = Some(observer);
    }

    /// Number of session keys currently held in server state.
    pub fn live_keys(&self) -> usize {
        self.inner.live_keys.load(Ordering::SeqCst)
    }

    /// Number of session keys generated since start.
    pub fn issued_keys(&self) -> u64 {
        self.inner.issued_keys.load(Ordering::SeqCst)
    }

    pub fn pending(&self) -> Vec<PendingSession> {
        let window = self.inner.config.pairing_window;
        self.inner
            .table
            .lock()
            .unwrap()
            .pending
            .iter()
            .map(|(tag, (party, arrived))| PendingSession {
                tagname: tag.clone(),
                party_label: party.request.party_label.clone(),
                key_bits: party.request.key_bits,
                arrived: *arrived,
                expiry: *arrived + window,
            })
            .collect()
    }

    pub fn status(&self, tagname: &str) -> Option<SessionStatusBody> {
        let table = self.inner.table.lock().unwrap();
        if let Some((_, status, reason)) = table.issued.get(tagname) {
            return Some(SessionStatusBody {
                tagname: tagname.to_owned(),
                status: *status,
                reason: reason.clone(),
            });
        }
        table.pending.get(tagname).map(|_| SessionStatusBody {
            tagname: tagname.to_owned(),
            status: SessionStatus::Waiting,
            reason: None,
        })
    }

    pub fn drain_reports(&self) -> Vec<SessionReport> {
        std::mem::take(&mut *self.inner.reports.lock().unwrap())
    }

    /// Removes and returns the latest report for one tagname.
    pub fn take_report(&self, tagname: &str) -> Option<SessionReport> {
        let mut reports = self.inner.reports.lock().unwrap();
        let i = reports.iter().rposition(|r| r.tagname == tagname)?;
        Some(reports.remove(i))
    }

    /// Removes pending sessions older than the pairing window.
    pub fn purge_expired(&self, now: Instant) -> usize {
        let mut table = self.inner.table.lock().unwrap();
        Self::purge_locked(&mut table, &self.inner.config, now)
    }

    fn purge_locked(table: &mut Table, config: &QkmsConfig, now: Instant) -> usize {
        let before = table.pending.len();
        table
            .pending
            .retain(|_, (_, arrived)| now.saturating_duration_since(*arrived) <= config.pairing_window);
        table.issued.retain(|_, (at, status, _)| {
            *status == SessionStatus::Dispatching
                || now.saturating_duration_since(*at) <= config.issued_retention
        });
        before - table.pending.len()
    }

    pub async fn handle_key_request(&self, req: KeyRequest, now: Instant) -> Result<Ack, QkmsError> {
        self.handle_arrival(req, Arrival::at(now)).await
    }

    /// Stores a first arrival, or pairs a second arrival and dispatches the
    /// session to both parties before answering.
    pub async fn handle_arrival(&self, req: KeyRequest, arrival: Arrival) -> Result<Ack, QkmsError> {
        let public_key = req.validate()?;
        let tagname = req.tagname.clone();
        let now = arrival.at;
        let party = Party {
            request: req,
            public_key,
            arrival,
        };

        let first = {
            let mut table = self.inner.table.lock().unwrap();
            Self::purge_locked(&mut table, &self.inner.config, now);
            if table.issued.contains_key(&tagname) {
                return Err(QkmsError::Duplicate(tagname));
            }
            match table.pending.get(&tagname) {
                None => {
                    table.pending.insert(tagname.clone(), (party, now));
                    return Ok(Ack {
                        tagname,
                        status: AckStatus::Waiting,
                    });
                }
                Some((waiting, _)) if waiting.request.party_label == party.request.party_label => {
                    return Err(QkmsError::AlreadyWaiting {
                        tagname,
                        party: party.request.party_label.clone(),
                    });
                }
                Some((waiting, _)) if waiting.request.key_bits != party.request.key_bits => {
                    return Err(QkmsError::Negotiation {
                        tagname,
                        first: waiting.request.key_bits,
                        second: party.request.key_bits,
                    });
                }
                Some(_) => {}
            }
            let (first, _) = table.pending.remove(&tagname).expect("checked above");
            table
                .issued
                .insert(tagname.clone(), (now, SessionStatus::Dispatching, None));
            first
        };

        let (report, error) = self.issue(&tagname, &first, &party).await;
        {
            let mut table = self.inner.table.lock().unwrap();
            let (status, reason) = match &error {
                None => (SessionStatus::Dispatched, None),
                Some(e) => (SessionStatus::Aborted, Some(e.to_string())),
            };
            table
                .issued
                .insert(tagname.clone(), (Instant::now(), status, reason));
        }
        self.inner.reports.lock().unwrap().push(report);
        match error {
            None => Ok(Ack {
                tagname,
                status: AckStatus::Dispatched,
            }),
            Some(e) => Err(e),
        }
    }

    /// Generates the session key and dispatches it to the first, then the
    /// second party. A failed dispatch aborts the session; the key is dropped
    /// (and zeroized) before returning either way.
    async fn issue(
        &self,
        tagname: &str,
        first: &Party,
        second: &Party,
    ) -> (SessionReport, Option<QkmsError>) {
        let mut rng = ChaCha20Rng::from_rng(&mut *self.inner.rng.lock().unwrap())
            .expect("ChaCha20 reseeds from ChaCha20");
        let mut report = SessionReport {
            tagname: tagname.to_owned(),
            pq_kem: second.arrival.pq_kem,
            key_generation: Duration::ZERO,
            parties: Vec::with_capacity(2),
            elapsed: Duration::ZERO,
            outcome: Ok(()),
        };

        let started = Instant::now();
        let key = generate_key_with(
            second.request.key_bits,
            &self.inner.config.allowed_bits,
            &mut rng,
        );
        report.key_generation = started.elapsed();
        let key = match key {
            Ok(k) => k,
            Err(e) => {
                report.outcome = Err(e.to_string());
                report.elapsed = second.arrival.at.elapsed();
                return (report, Some(e.into()));
            }
        };
        self.inner.issued_keys.fetch_add(1, Ordering::SeqCst);
        let record = SessionRecord::new(tagname, key, self.inner.live_keys.clone());
        if let Some(observer) = self.inner.observer.lock().unwrap().clone() {
            observer(&record.tagname, record.key());
        }

        let mut error = None;
        for party in [first, second] {
            match self.dispatch_session(&record, party, &mut rng).await {
                Ok(r) => report.parties.push(r),
                Err((partial, e)) => {
                    if let Some(p) = partial {
                        report.parties.push(p);
                    }
                    tracing::warn!(tagname, error = %e, "session aborted");
                    report.outcome = Err(e.to_string());
                    error = Some(e);
                    break;
                }
            }
        }
        drop(record);
        report.elapsed = second.arrival.at.elapsed();
        (report, error)
    }

    /// Fragments, optionally shuffles, encrypts, assigns, and sends one
    /// party's copy of the session key.
    async fn dispatch_session(
        &self,
        record: &SessionRecord,
        party: &Party,
        rng: &mut ChaCha20Rng,
    ) -> Result<DispatchReport, (Option<DispatchReport>, QkmsError)> {
        let req = &party.request;
        let started = Instant::now();
        let prepared = (|| -> Result<_, QkmsError> {
            let mut frags = fragment_key(record.key(), req.num_splits as usize)?;
            if req.shuffle {
                frags = shuffle_fragments(frags, rng);
            }
            let sealer = FragmentSealer::new(&party.public_key, &req.tagname, req.encryption, rng)?;
            let mut messages = Vec::with_capacity(frags.len());
            for f in &frags {
                let mut msg = FragmentMessage::from(&sealer.seal(f, rng)?);
                if let Some(tunnel) = &party.arrival.tunnel {
                    msg = tunnel.seal_fragment(&msg, rng);
                }
                messages.push(msg);
            }
            let assignment = assign_channels(messages.len(), &req.channels, rng).map_err(|e| {
                QkmsError::Dispatch {
                    party: req.party_label.clone(),
                    source: e,
                }
            })?;
            Ok((messages, assignment))
        })();
        let (messages, assignment) = prepared.map_err(|e| (None, e))?;
        let key_processing = started.elapsed();

        let sent = Instant::now();
        let sends = messages.iter().enumerate().map(|(i, msg)| {
            let channel = assignment
                .channel_of(i)
                .and_then(|id| req.channels.get(id))
                .expect("assignment draws from the request's channels");
            self.inner.network.send_fragment(msg, channel)
        });
        let results = join_all(sends).await;
        let network = sent.elapsed();

        let mut receipts = Vec::with_capacity(results.len());
        let mut failure = None;
        for r in results {
            match r {
                Ok(receipt) => receipts.push(receipt),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        let report = DispatchReport {
            party_label: req.party_label.clone(),
            key_processing,
            network,
            assignment,
            receipts,
        };
        match failure {
            None => Ok(report),
            Some(source) => Err((
                Some(report),
                QkmsError::Dispatch {
                    party: req.party_label.clone(),
                    source,
                },
            )),
        }
    }

    /// Serves the HTTP interface on `listener`.
    pub fn serve(&self, listener: TcpListener) -> std::io::Result<ServiceHandle> {
        net::spawn_service(listener, self.router())
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/get-key-parameters", post(get_key_parameters))
            .route("/kem-public-key/{provider}", get(kem_public_key))
            .route("/pq-tunnel", post(pq_tunnel))
            .route("/session-status/{tagname}", get(session_status))
            .with_state(self.clone())
    }
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, HttpError> {
    serde_json::from_slice(body).map_err(|e| HttpError::bad_request(format!("malformed body: {e}")))
}

async fn get_key_parameters(State(qkms): State<Qkms>, body: Bytes) -> Result<Json<Ack>, HttpError> {
    let arrival = Arrival::at(Instant::now());
    let req: KeyRequest = parse_json(&body)?;
    Ok(Json(qkms.handle_arrival(req, arrival).await?))
}

async fn kem_public_key(
    State(qkms): State<Qkms>,
    Path(provider): Path<String>,
) -> Result<Response, HttpError> {
    let pk = qkms
        .terminator()
        .public_key(&provider)
        .map_err(|e| HttpError::new(StatusCode::NOT_FOUND, e.to_string()))?;
    Ok(Json(pk).into_response())
}

async fn session_status(
    State(qkms): State<Qkms>,
    Path(tagname): Path<String>,
) -> Result<Json<SessionStatusBody>, HttpError> {
    qkms.status(&tagname)
        .map(Json)
        .ok_or_else(|| HttpError::new(StatusCode::NOT_FOUND, "unknown tagname"))
}

async fn pq_tunnel(State(qkms): State<Qkms>, body: Bytes) -> Result<Response, HttpError> {
    let at = Instant::now();
    let treq: TunnelRequest = parse_json(&body)?;
    let (inner, key) = qkms
        .terminator()
        .accept(&treq)
        .map_err(|e| HttpError::from(QkmsError::from(e)))?;
    let pq_kem = at.elapsed();
    let req: KeyRequest = parse_json(&inner)?;
    let arrival = Arrival {
        at,
        tunnel: Some(key.clone()),
        pq_kem: Some(pq_kem),
    };
    let (status, json) = match qkms.handle_arrival(req, arrival).await {
        Ok(ack) => (StatusCode::OK, serde_json::to_vec(&ack)),
        Err(e) => (
            e.status(),
            serde_json::to_vec(&ErrorBody {
                error: e.to_string(),
            }),
        ),
    };
    let sealed = key.seal_response(&json.expect("serializable"), &mut rand::thread_rng());
    Ok((status, Json(TunnelResponse { sealed })).into_response())
}
