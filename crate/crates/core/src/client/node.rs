//! A running client: its fragment endpoints and the request side.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tokio::sync::Notify;

use super::kem::KemProvider;
use super::tunnel::{self, KemPublicKey, TunnelRequest, TunnelResponse};
use super::{ClientError, ClientMode, ClientSessionState, ClientTiming, Phase, DEFAULT_DEADLINE};
use crate::channels::{ChannelDescriptor, ChannelNetwork, ChannelSet, FragmentSink, ReceiverHandle};
use crate::keycore::{AsymmetricKeyPair, EncryptionMode, SessionKey};
use crate::net::{self, ErrorBody, ServiceHandle, REPLY_TO_HEADER};
use crate::proxy::select_entry;
use crate::qkms::KeyRequest;
use crate::wire::{Ack, FragmentMessage};

#[derive(Clone)]
pub struct ClientConfig {
    pub party_label: String,
    pub deadline: Duration,
    /// Channels to listen on when receiving directly from the server; port 0
    /// binds a free port.
    pub channels: Vec<ChannelDescriptor>,
    pub kem: Option<Arc<dyn KemProvider>>,
    pub seed: Option<u64>,
}

impl ClientConfig {
    pub fn new(party_label: impl Into<String>) -> Self {
        ClientConfig {
            party_label: party_label.into(),
            deadline: DEFAULT_DEADLINE,
            channels: Vec::new(),
            kem: None,
            seed: None,
        }
    }
}

/// The per-session request parameters chosen by the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyParams {
    pub tagname: String,
    pub key_bits: u32,
    pub num_splits: u32,
    pub shuffle: bool,
    pub encryption: EncryptionMode,
}

impl KeyParams {
    pub fn new(tagname: impl Into<String>, key_bits: u32, num_splits: u32) -> Self {
        KeyParams {
            tagname: tagname.into(),
            key_bits,
            num_splits,
            shuffle: true,
            encryption: EncryptionMode::DirectAsymmetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// The server itself (possibly intercepted by a redirect rule).
    Qkms(String),
    /// An explicit proxy.
    Proxy(String),
    /// A private proxy pool; one entry is drawn per request.
    Pool(Vec<String>),
}

/// Destination rewrites applied at the trusted-network boundary. A rule from
/// the server's address to a proxy's makes that proxy transparent.
#[derive(Debug, Clone, Default)]
pub struct RedirectRules(HashMap<String, String>);

impl RedirectRules {
    pub fn redirect(mut self, destination: impl Into<String>, proxy: impl Into<String>) -> Self {
        self.0.insert(destination.into(), proxy.into());
        self
    }

    pub fn resolve<'a>(&'a self, destination: &'a str) -> &'a str {
        self.0.get(destination).map_or(destination, String::as_str)
    }
}

/// Every request body this client put on the wire.
#[derive(Debug, Clone, Default)]
pub struct WireLog(Arc<Mutex<Vec<Vec<u8>>>>);

impl WireLog {
    fn record(&self, bytes: &[u8]) {
        self.0.lock().unwrap().push(bytes.to_vec());
    }

    pub fn snapshot(&self) -> Vec<Vec<u8>> {
        self.0.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestOutcome {
    pub ack: Ack,
    /// The address the request was actually sent to.
    pub contacted: String,
}

struct Session {
    state: Mutex<ClientSessionState>,
    done: Notify,
}

struct NodeInner {
    config: ClientConfig,
    keypair: AsymmetricKeyPair,
    base_url: String,
    channels: ChannelSet,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    audit: Mutex<Vec<String>>,
    wire: WireLog,
    redirects: RwLock<RedirectRules>,
    http: reqwest::Client,
    rng: Mutex<ChaCha20Rng>,
    service: Mutex<Option<ServiceHandle>>,
    receivers: Mutex<Vec<ReceiverHandle>>,
}

#[derive(Clone)]
pub struct ClientNode {
    inner: Arc<NodeInner>,
}

impl ClientNode {
    /// Binds `POST /receive-key-fragment` on a free loopback port and opens
    /// one receiver per configured channel.
    pub async fn start(
        config: ClientConfig,
        keypair: AsymmetricKeyPair,
        network: &ChannelNetwork,
    ) -> Result<Self, ClientError> {
        let listener = net::bind("127.0.0.1:0")
            .await
            .map_err(|e| ClientError::Unreachable(format!("cannot bind client endpoint: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;

        let mut handles = Vec::new();
        let pending: Arc<Mutex<Option<std::sync::Weak<NodeInner>>>> = Arc::new(Mutex::new(None));
        for ch in &config.channels {
            let slot = pending.clone();
            let sink: FragmentSink = Arc::new(move |f| {
                let node = slot.lock().unwrap().as_ref().and_then(|w| w.upgrade());
                if let Some(inner) = node {
                    ClientNode { inner }.deliver(f.message);
                }
            });
            handles.push(network.open_receiver(ch.clone(), sink).await?);
        }
        let channels = ChannelSet::new(handles.iter().map(|h| h.descriptor().clone()).collect())?;

        let rng = match config.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let inner = Arc::new(NodeInner {
            config,
            keypair,
            base_url: format!("http://{addr}"),
            channels,
            sessions: Mutex::new(HashMap::new()),
            audit: Mutex::new(Vec::new()),
            wire: WireLog::default(),
            redirects: RwLock::new(RedirectRules::default()),
            http: net::http_client(),
            rng: Mutex::new(rng),
            service: Mutex::new(None),
            receivers: Mutex::new(handles),
        });
        *pending.lock().unwrap() = Some(Arc::downgrade(&inner));

        let node = ClientNode { inner };
        let router = Router::new()
            .route("/receive-key-fragment", post(receive_key_fragment))
            .with_state(node.clone());
        let service = net::spawn_service(listener, router)
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        *node.inner.service.lock().unwrap() = Some(service);
        Ok(node)
    }

    pub fn base_url(&self) -> &str {
        &self.inner.base_url
    }

    pub fn party_label(&self) -> &str {
        &self.inner.config.party_label
    }

    /// The bound channel descriptors this client advertises.
    pub fn channels(&self) -> &ChannelSet {
        &self.inner.channels
    }

    pub fn keypair(&self) -> &AsymmetricKeyPair {
        &self.inner.keypair
    }

    pub fn set_redirects(&self, rules: RedirectRules) {
        *self.inner.redirects.write().unwrap() = rules;
    }

    pub fn wire_log(&self) -> &WireLog {
        &self.inner.wire
    }

    pub fn audit_log(&self) -> Vec<String> {
        self.inner.audit.lock().unwrap().clone()
    }

    fn audit(&self, entry: String) {
        tracing::debug!(client = %self.inner.config.party_label, "{entry}");
        self.inner.audit.lock().unwrap().push(entry);
    }

    fn session(&self, tagname: &str) -> Option<Arc<Session>> {
        self.inner.sessions.lock().unwrap().get(tagname).cloned()
    }

    pub fn phase(&self, tagname: &str) -> Option<Phase> {
        self.session(tagname)
            .map(|s| s.state.lock().unwrap().phase().clone())
    }

    pub fn timing(&self, tagname: &str) -> Option<ClientTiming> {
        self.session(tagname).map(|s| s.state.lock().unwrap().timing())
    }

    pub fn decrypt_failures(&self, tagname: &str) -> Option<u32> {
        self.session(tagname)
            .map(|s| s.state.lock().unwrap().decrypt_failures())
    }

    /// Drops a finished session's state.
    pub fn forget(&self, tagname: &str) {
        self.inner.sessions.lock().unwrap().remove(tagname);
    }

    /// Hands one fragment message to its session.
    pub fn deliver(&self, msg: FragmentMessage) {
        let Some(session) = self.session(&msg.session_tag) else {
            self.audit(format!("ignored fragment for unknown tag {:?}", msg.session_tag));
            return;
        };
        let tag = msg.session_tag.clone();
        let result = session
            .state
            .lock()
            .unwrap()
            .receive_fragment(msg, Instant::now());
        match result {
            Ok(super::Progress::Complete) => session.done.notify_waiters(),
            Ok(_) => {}
            Err(e) => {
                self.audit(format!("fragment for {tag:?} rejected: {e}"));
                session.done.notify_waiters();
            }
        }
    }

    /// Sends the key request and moves the session to collecting.
    pub async fn request_key(
        &self,
        params: &KeyParams,
        target: &Target,
        mode: ClientMode,
    ) -> Result<RequestOutcome, ClientError> {
        let url = match target {
            Target::Qkms(u) => self.inner.redirects.read().unwrap().resolve(u).to_owned(),
            Target::Proxy(u) => u.clone(),
            Target::Pool(pool) => {
                if mode == ClientMode::PqTunnel {
                    return Err(ClientError::Unsupported(
                        "the KEM tunnel is not offered through a proxy pool".into(),
                    ));
                }
                let mut rng = self.inner.rng.lock().unwrap();
                select_entry(pool, &mut *rng)
                    .map_err(|e| ClientError::Unsupported(e.to_string()))?
                    .to_owned()
            }
        };
        let kem = match mode {
            ClientMode::PqTunnel => Some(self.inner.config.kem.clone().ok_or_else(|| {
                ClientError::Unsupported("pq-tunnel mode needs a KEM provider".into())
            })?),
            ClientMode::ClassicalMultipath => None,
        };

        let started = Instant::now();
        let request = KeyRequest {
            tagname: params.tagname.clone(),
            key_bits: params.key_bits,
            num_splits: params.num_splits,
            shuffle: params.shuffle,
            channels: self.inner.channels.clone(),
            public_key: self.inner.keypair.public_key.to_der(),
            party_label: self.inner.config.party_label.clone(),
            encryption: params.encryption,
        };
        let mut state = ClientSessionState::new(
            &params.tagname,
            params.key_bits,
            params.num_splits,
            self.inner.keypair.private_key.clone(),
            mode,
            started + self.inner.config.deadline,
        );
        state.mark_started(started);
        let session = Arc::new(Session {
            state: Mutex::new(state),
            done: Notify::new(),
        });
        {
            let mut sessions = self.inner.sessions.lock().unwrap();
            if sessions.contains_key(&params.tagname) {
                return Err(ClientError::DuplicateSession(params.tagname.clone()));
            }
            sessions.insert(params.tagname.clone(), session.clone());
        }

        let result = match kem {
            Some(kem) => self.send_tunnelled(&url, &request, kem.as_ref(), &session).await,
            None => self.send_plain(&url, &request, &session).await,
        };
        match result {
            Ok(ack) => Ok(RequestOutcome {
                ack,
                contacted: url,
            }),
            Err(e) => {
                session.state.lock().unwrap().fail(e.to_string());
                session.done.notify_waiters();
                Err(e)
            }
        }
    }

    async fn send_plain(
        &self,
        url: &str,
        request: &KeyRequest,
        session: &Session,
    ) -> Result<Ack, ClientError> {
        let body = serde_json::to_vec(request).expect("key request serializes");
        self.inner.wire.record(&body);
        session.state.lock().unwrap().begin_collecting(Instant::now());
        let resp = self
            .inner
            .http
            .post(format!("{url}/get-key-parameters"))
            .header("content-type", "application/json")
            .header(REPLY_TO_HEADER, &self.inner.base_url)
            .body(body)
            .send()
            .await
            .map_err(|e| ClientError::Unreachable(transport_reason(&e)))?;
        if !resp.status().is_success() {
            return Err(ClientError::Rejected(net::error_message(resp).await));
        }
        resp.json::<Ack>()
            .await
            .map_err(|e| ClientError::Rejected(format!("unreadable acknowledgement: {e}")))
    }

    async fn send_tunnelled(
        &self,
        url: &str,
        request: &KeyRequest,
        kem: &dyn KemProvider,
        session: &Session,
    ) -> Result<Ack, ClientError> {
        let handshake = Instant::now();
        let resp = self
            .inner
            .http
            .get(format!("{url}/kem-public-key/{}", kem.name()))
            .send()
            .await
            .map_err(|e| ClientError::Unreachable(transport_reason(&e)))?;
        if !resp.status().is_success() {
            return Err(ClientError::Rejected(net::error_message(resp).await));
        }
        let peer: KemPublicKey = resp
            .json()
            .await
            .map_err(|e| ClientError::Rejected(format!("unreadable KEM key: {e}")))?;
        let json = serde_json::to_vec(request).expect("key request serializes");
        let (body, key) = {
            let mut rng = self.inner.rng.lock().unwrap();
            let (encapsulation, key) = tunnel::initiate(kem, &peer.public_key, &mut *rng)?;
            let sealed = key.seal_request(&json, &mut *rng);
            let body = TunnelRequest {
                provider: kem.name().to_owned(),
                encapsulation,
                sealed,
            };
            (serde_json::to_vec(&body).expect("tunnel request serializes"), key)
        };
        {
            let mut state = session.state.lock().unwrap();
            state.set_tunnel(key.clone());
            state.set_pq_kem(handshake.elapsed());
        }
        self.inner.wire.record(&body);
        session.state.lock().unwrap().begin_collecting(Instant::now());
        let resp = self
            .inner
            .http
            .post(format!("{url}/pq-tunnel"))
            .header("content-type", "application/json")
            .header(REPLY_TO_HEADER, &self.inner.base_url)
            .body(body)
            .send()
            .await
            .map_err(|e| ClientError::Unreachable(transport_reason(&e)))?;
        let status = resp.status();
        let sealed: TunnelResponse = match resp.json().await {
            Ok(r) => r,
            Err(_) => return Err(ClientError::Rejected(status.to_string())),
        };
        let reply = key.open_response(&sealed.sealed)?;
        if status.is_success() {
            serde_json::from_slice(&reply)
                .map_err(|e| ClientError::Rejected(format!("unreadable acknowledgement: {e}")))
        } else {
            let err: ErrorBody = serde_json::from_slice(&reply).unwrap_or(ErrorBody {
                error: status.to_string(),
            });
            Err(ClientError::Rejected(format!("{status}: {}", err.error)))
        }
    }

    /// Waits until the session completes or fails (its deadline included).
    pub async fn wait(&self, tagname: &str) -> Result<SessionKey, ClientError> {
        let session = self
            .session(tagname)
            .ok_or_else(|| ClientError::UnknownTag(tagname.to_owned()))?;
        loop {
            let notified = session.done.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let deadline = {
                let mut state = session.state.lock().unwrap();
                state.check_deadline(Instant::now());
                match state.phase() {
                    Phase::Complete => return state.finalize(),
                    Phase::Failed(reason) if reason == "deadline" => {
                        return Err(ClientError::Deadline(tagname.to_owned()))
                    }
                    Phase::Failed(reason) => return Err(ClientError::Rejected(reason.clone())),
                    _ => state.deadline(),
                }
            };
            let wake = tokio::time::Instant::from_std(deadline) + Duration::from_millis(1);
            let _ = tokio::time::timeout_at(wake, notified).await;
        }
    }

    pub async fn shutdown(&self) {
        let service = self.inner.service.lock().unwrap().take();
        if let Some(s) = service {
            s.shutdown().await;
        }
        let receivers = std::mem::take(&mut *self.inner.receivers.lock().unwrap());
        for r in receivers {
            r.shutdown().await;
        }
    }
}

fn transport_reason(e: &reqwest::Error) -> String {
    if e.is_connect() {
        "connection refused".into()
    } else if e.is_timeout() {
        "timed out".into()
    } else {
        "transport error".into()
    }
}

async fn receive_key_fragment(State(node): State<ClientNode>, body: Bytes) -> StatusCode {
    match serde_json::from_slice::<FragmentMessage>(&body) {
        Ok(msg) => {
            node.deliver(msg);
            StatusCode::NO_CONTENT
        }
        Err(_) => StatusCode::BAD_REQUEST,
    }
}
