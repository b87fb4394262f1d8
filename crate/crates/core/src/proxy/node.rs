//! The proxy as an HTTP service.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{pool_route, prepare_upstream, redraw_peer, PoolPayload, ProxyConfig, ReturnRoute, RouteDecision};
use crate::channels::{ChannelNetwork, ChannelSet, FragmentSink, ReceiverHandle};
use crate::client::tunnel::{
    self, KemPublicKey, TunnelKey, TunnelRequest, TunnelResponse, TunnelTerminator,
};
use crate::net::{self, ErrorBody, HttpError, ServiceHandle, REPLY_TO_HEADER, RETURN_PATH_HEADER};
use crate::qkms::{parse_json, KeyRequest};
use crate::wire::{Ack, FragmentMessage};

/// Opt-in capture of every byte string a proxy holds: request bodies, pool
/// payloads, fragment messages, ciphertexts before and after tunnel layers,
/// and everything it sends.
#[derive(Debug, Clone, Default)]
pub struct BufferRecorder {
    enabled: Arc<AtomicBool>,
    buffers: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl BufferRecorder {
    pub fn enable(&self) {
        self.enabled.store(true, Ordering::SeqCst);
    }

    fn record(&self, bytes: &[u8]) {
        if self.enabled.load(Ordering::Relaxed) {
            self.buffers.lock().unwrap().push(bytes.to_vec());
        }
    }

    pub fn snapshot(&self) -> Vec<Vec<u8>> {
        self.buffers.lock().unwrap().clone()
    }

    pub fn total_bytes(&self) -> usize {
        self.buffers.lock().unwrap().iter().map(Vec::len).sum()
    }

    pub fn clear(&self) {
        self.buffers.lock().unwrap().clear();
    }
}

/// Proxy-side timings of one session, excluding idle time spent waiting for
/// the partner to arrive at the server.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProxySessionTiming {
    pub pq_kem: Option<Duration>,
    /// Handling the client request, mostly the upstream round trip.
    pub upstream: Duration,
    /// From the first fragment's arrival to the last successful relay.
    pub relay: Duration,
    pub relayed: u32,
}

impl ProxySessionTiming {
    pub fn network(&self) -> Duration {
        self.upstream + self.relay
    }
}

#[derive(Default)]
struct TimingCell {
    pq_kem: Option<Duration>,
    upstream: Duration,
    first_fragment: Option<Instant>,
    last_relay: Option<Instant>,
    relayed: u32,
}

#[derive(Clone)]
struct ClientRoute {
    reply_url: String,
    tunnel: Option<TunnelKey>,
}

struct TagRoutes {
    clients: Vec<ClientRoute>,
    /// Reverse pool paths for requests this proxy delivered as exit on
    /// behalf of another entry. Both parties may exit here under one tag.
    return_paths: Vec<Vec<String>>,
    /// Set when this proxy delivered a request of its own clients, so
    /// fragments on its channels belong to them.
    local_exit: bool,
    /// Tunnels to the server, opened on fragments arriving on our channels.
    upstream: Vec<TunnelKey>,
    created: Instant,
}

impl TagRoutes {
    fn new() -> Self {
        TagRoutes {
            clients: Vec::new(),
            return_paths: Vec::new(),
            local_exit: false,
            upstream: Vec::new(),
            created: Instant::now(),
        }
    }
}

struct ProxyInner {
    cfg: ProxyConfig,
    peers: RwLock<Vec<String>>,
    http: reqwest::Client,
    terminator: TunnelTerminator,
    routes: Mutex<HashMap<String, TagRoutes>>,
    timings: Mutex<HashMap<String, TimingCell>>,
    rng: Mutex<ChaCha20Rng>,
    recorder: BufferRecorder,
    upstream_log: Mutex<Vec<KeyRequest>>,
    failures: Mutex<Vec<String>>,
    relayed: AtomicU64,
    service: Mutex<Option<ServiceHandle>>,
    receivers: Mutex<Vec<ReceiverHandle>>,
}

#[derive(Clone)]
pub struct ProxyNode {
    inner: Arc<ProxyInner>,
}

impl ProxyNode {
    /// Binds the proxy on a free loopback port (its id becomes its base URL
    /// unless one is configured) and opens its own channel receivers.
    pub async fn start(mut cfg: ProxyConfig, network: &ChannelNetwork) -> Result<Self, HttpError> {
        cfg.validate()
            .map_err(|e| HttpError::bad_request(e.to_string()))?;
        let internal = |e: String| HttpError::new(StatusCode::INTERNAL_SERVER_ERROR, e);
        let listener = net::bind("127.0.0.1:0")
            .await
            .map_err(|e| internal(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| internal(e.to_string()))?;
        if cfg.id.is_empty() {
            cfg.id = format!("http://{addr}");
        }

        let slot: Arc<Mutex<Option<Weak<ProxyInner>>>> = Arc::new(Mutex::new(None));
        let mut handles = Vec::new();
        for ch in cfg.own_channels.iter() {
            let slot = slot.clone();
            let sink: FragmentSink = Arc::new(move |f| {
                let node = slot.lock().unwrap().as_ref().and_then(Weak::upgrade);
                if let Some(inner) = node {
                    let node = ProxyNode { inner };
                    tokio::spawn(async move { node.on_fragment(f.message, None).await });
                }
            });
            let handle = network
                .open_receiver(ch.clone(), sink)
                .await
                .map_err(|e| internal(e.to_string()))?;
            handles.push(handle);
        }
        cfg.own_channels = ChannelSet::new(handles.iter().map(|h| h.descriptor().clone()).collect())
            .map_err(|e| internal(e.to_string()))?;

        let mut terminator = TunnelTerminator::new();
        for p in &cfg.client_kems {
            terminator = terminator.with_provider(p.clone());
        }
        let rng = match cfg.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let peers = cfg.pool_peers.clone();
        let inner = Arc::new(ProxyInner {
            cfg,
            peers: RwLock::new(peers),
            http: net::http_client(),
            terminator,
            routes: Mutex::new(HashMap::new()),
            timings: Mutex::new(HashMap::new()),
            rng: Mutex::new(rng),
            recorder: BufferRecorder::default(),
            upstream_log: Mutex::new(Vec::new()),
            failures: Mutex::new(Vec::new()),
            relayed: AtomicU64::new(0),
            service: Mutex::new(None),
            receivers: Mutex::new(handles),
        });
        *slot.lock().unwrap() = Some(Arc::downgrade(&inner));
        let node = ProxyNode { inner };
        let router = Router::new()
            .route("/get-key-parameters", post(get_key_parameters))
            .route("/pq-tunnel", post(pq_tunnel))
            .route("/kem-public-key/{provider}", get(kem_public_key))
            .route("/pool-forward", post(pool_forward))
            .route("/receive-key-fragment", post(receive_key_fragment))
            .with_state(node.clone());
        let service = net::spawn_service(listener, router).map_err(|e| internal(e.to_string()))?;
        *node.inner.service.lock().unwrap() = Some(service);
        Ok(node)
    }

    pub fn id(&self) -> &str {
        &self.inner.cfg.id
    }

    pub fn base_url(&self) -> String {
        self.inner
            .service
            .lock()
            .unwrap()
            .as_ref()
            .map(ServiceHandle::base_url)
            .unwrap_or_default()
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.inner.cfg
    }

    /// Bound channel descriptors this proxy offers upstream.
    pub fn own_channels(&self) -> &ChannelSet {
        &self.inner.cfg.own_channels
    }

    /// Sets the pool membership, once every member's address is known.
    pub fn set_pool_peers(&self, peers: Vec<String>) {
        *self.inner.peers.write().unwrap() = peers;
    }

    pub fn recorder(&self) -> &BufferRecorder {
        &self.inner.recorder
    }

    /// Requests as sent to the server.
    pub fn upstream_requests(&self) -> Vec<KeyRequest> {
        self.inner.upstream_log.lock().unwrap().clone()
    }

    /// Tagnames whose relay to the client failed for good.
    pub fn failed_sessions(&self) -> Vec<String> {
        self.inner.failures.lock().unwrap().clone()
    }

    pub fn relayed(&self) -> u64 {
        self.inner.relayed.load(Ordering::SeqCst)
    }

    pub fn session_timing(&self, tagname: &str) -> Option<ProxySessionTiming> {
        self.inner.timings.lock().unwrap().get(tagname).map(|c| ProxySessionTiming {
            pq_kem: c.pq_kem,
            upstream: c.upstream,
            relay: match (c.first_fragment, c.last_relay) {
                (Some(a), Some(b)) => b.saturating_duration_since(a),
                _ => Duration::ZERO,
            },
            relayed: c.relayed,
        })
    }

    pub fn forget(&self, tagname: &str) {
        self.inner.timings.lock().unwrap().remove(tagname);
        self.inner.routes.lock().unwrap().remove(tagname);
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

    fn config_with_peers(&self) -> ProxyConfig {
        let mut cfg = self.inner.cfg.clone();
        cfg.pool_peers = self.inner.peers.read().unwrap().clone();
        cfg
    }

    fn with_routes<T>(&self, tagname: &str, f: impl FnOnce(&mut TagRoutes) -> T) -> T {
        let mut routes = self.inner.routes.lock().unwrap();
        let ttl = self.inner.cfg.route_ttl;
        routes.retain(|_, r| r.created.elapsed() < ttl);
        f(routes.entry(tagname.to_owned()).or_insert_with(TagRoutes::new))
    }

    /// A client request arriving at this proxy (the pool entry, when pooled).
    async fn ingress(
        &self,
        req: KeyRequest,
        reply_url: String,
        tunnel: Option<TunnelKey>,
        pq_kem: Option<Duration>,
        started: Instant,
    ) -> Result<Ack, HttpError> {
        let tag = req.tagname.clone();
        self.with_routes(&tag, |r| r.clients.push(ClientRoute { reply_url, tunnel }));
        let pooled = !self.inner.peers.read().unwrap().is_empty();
        let result = if pooled {
            self.route_pool(PoolPayload::new(req, self.id())).await
        } else {
            self.with_routes(&tag, |r| r.local_exit = true);
            let up = prepare_upstream(&req, &self.inner.cfg.own_channels);
            self.deliver_upstream(up).await
        };
        let mut timings = self.inner.timings.lock().unwrap();
        let cell = timings.entry(tag).or_default();
        cell.pq_kem = pq_kem;
        cell.upstream = started.elapsed() - pq_kem.unwrap_or_default();
        result
    }

    /// One pool hop here, then forward to a peer or deliver to the server.
    async fn route_pool(&self, mut payload: PoolPayload) -> Result<Ack, HttpError> {
        let cfg = self.config_with_peers();
        let decision = {
            let mut rng = self.inner.rng.lock().unwrap();
            pool_route(&mut payload, &cfg, &mut *rng)
        }
        .map_err(|e| HttpError::bad_request(e.to_string()))?;

        let mut next = match decision {
            RouteDecision::Forward(peer) => Some(peer),
            RouteDecision::Deliver => None,
        };
        let mut failed = HashSet::new();
        while let Some(peer) = next {
            let body = serde_json::to_vec(&payload).expect("pool payload serializes");
            self.inner.recorder.record(&body);
            let sent = self
                .inner
                .http
                .post(format!("{peer}/pool-forward"))
                .header("content-type", "application/json")
                .body(body)
                .send()
                .await;
            match sent {
                Ok(resp) => return relay_ack(resp).await,
                Err(e) if e.is_connect() => {
                    tracing::warn!(proxy = %cfg.id, %peer, "pool peer unreachable; redrawing");
                    failed.insert(peer);
                    let mut rng = self.inner.rng.lock().unwrap();
                    next = redraw_peer(&cfg.pool_peers, &failed, &mut *rng);
                }
                Err(e) => return Err(upstream_error(&e)),
            }
        }

        // This proxy is the exit.
        let tag = payload.request.tagname.clone();
        let channels = match cfg.return_route {
            ReturnRoute::ExitPath => cfg.own_channels.clone(),
            ReturnRoute::EntryDirect => payload.hops[0].channels.clone(),
        };
        if cfg.return_route == ReturnRoute::ExitPath {
            let path = payload.reverse_path();
            self.with_routes(&tag, |r| {
                if path.is_empty() {
                    r.local_exit = true;
                } else {
                    r.return_paths.push(path);
                }
            });
        }
        self.deliver_upstream(prepare_upstream(&payload.request, &channels))
            .await
    }

    async fn deliver_upstream(&self, req: KeyRequest) -> Result<Ack, HttpError> {
        let qkms = &self.inner.cfg.qkms_url;
        self.inner.upstream_log.lock().unwrap().push(req.clone());
        let json = serde_json::to_vec(&req).expect("key request serializes");
        let Some(kem) = self.inner.cfg.upstream_kem.clone() else {
            self.inner.recorder.record(&json);
            let resp = self
                .inner
                .http
                .post(format!("{qkms}/get-key-parameters"))
                .header("content-type", "application/json")
                .body(json)
                .send()
                .await
                .map_err(|e| upstream_error(&e))?;
            return relay_ack(resp).await;
        };

        let resp = self
            .inner
            .http
            .get(format!("{qkms}/kem-public-key/{}", kem.name()))
            .send()
            .await
            .map_err(|e| upstream_error(&e))?;
        if !resp.status().is_success() {
            return Err(HttpError::new(StatusCode::BAD_GATEWAY, net::error_message(resp).await));
        }
        let peer: KemPublicKey = resp
            .json()
            .await
            .map_err(|e| HttpError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        let (body, key) = {
            let mut rng = self.inner.rng.lock().unwrap();
            let (encapsulation, key) = tunnel::initiate(kem.as_ref(), &peer.public_key, &mut *rng)
                .map_err(|e| HttpError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
            let sealed = key.seal_request(&json, &mut *rng);
            let body = TunnelRequest {
                provider: kem.name().to_owned(),
                encapsulation,
                sealed,
            };
            (serde_json::to_vec(&body).expect("tunnel request serializes"), key)
        };
        self.inner.recorder.record(&body);
        self.with_routes(&req.tagname, |r| r.upstream.push(key.clone()));
        let resp = self
            .inner
            .http
            .post(format!("{qkms}/pq-tunnel"))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| upstream_error(&e))?;
        let status = resp.status();
        let sealed: TunnelResponse = resp
            .json()
            .await
            .map_err(|_| HttpError::new(StatusCode::BAD_GATEWAY, status.to_string()))?;
        let reply = key
            .open_response(&sealed.sealed)
            .map_err(|e| HttpError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        if status.is_success() {
            serde_json::from_slice(&reply)
                .map_err(|e| HttpError::new(StatusCode::BAD_GATEWAY, e.to_string()))
        } else {
            let err: ErrorBody = serde_json::from_slice(&reply).unwrap_or(ErrorBody {
                error: status.to_string(),
            });
            Err(HttpError::new(status, err.error))
        }
    }

    /// A fragment reaching this proxy, either on one of its channels
    /// (`return_path` is `None`) or from a pool peer on the reverse path.
    async fn on_fragment(&self, msg: FragmentMessage, return_path: Option<Vec<String>>) {
        let tag = msg.session_tag.clone();
        self.inner.recorder.record(&msg.to_json());
        self.inner.recorder.record(&msg.ciphertext);
        {
            let mut timings = self.inner.timings.lock().unwrap();
            let cell = timings.entry(tag.clone()).or_default();
            cell.first_fragment.get_or_insert_with(Instant::now);
        }

        let Some(path) = return_path else {
            let (upstream, paths, local) = self.with_routes(&tag, |r| {
                (r.upstream.clone(), r.return_paths.clone(), r.local_exit)
            });
            let msg = if upstream.is_empty() {
                msg
            } else {
                match upstream.iter().find_map(|k| k.open_fragment(&msg).ok()) {
                    Some(inner) => {
                        self.inner.recorder.record(&inner.ciphertext);
                        inner
                    }
                    None => {
                        tracing::warn!(tag, "fragment failed upstream tunnel authentication");
                        return;
                    }
                }
            };
            // The fragment cannot say whose it is; every recorded route gets
            // a copy and recipients discard what they cannot decrypt.
            for p in &paths {
                self.forward_along(&tag, &msg, p).await;
            }
            if local || paths.is_empty() {
                self.deliver_local(&tag, &msg).await;
            }
            return;
        };
        if path.is_empty() {
            self.deliver_local(&tag, &msg).await;
        } else {
            self.forward_along(&tag, &msg, &path).await;
        }
    }

    async fn forward_along(&self, tag: &str, msg: &FragmentMessage, path: &[String]) {
        let (next, rest) = path.split_first().expect("non-empty path");
        let ok = self.post_fragment(next, msg, Some(rest.join(","))).await;
        self.finish_relay(tag, ok);
    }

    async fn deliver_local(&self, tag: &str, msg: &FragmentMessage) {
        let clients = self.with_routes(tag, |r| r.clients.clone());
        if clients.is_empty() {
            tracing::warn!(proxy = %self.id(), tag, "no route for fragment");
            self.inner.failures.lock().unwrap().push(tag.to_owned());
            return;
        }
        for route in clients {
            let out = match &route.tunnel {
                Some(key) => {
                    let mut rng = self.inner.rng.lock().unwrap();
                    key.seal_fragment(msg, &mut *rng)
                }
                None => msg.clone(),
            };
            let ok = self.post_fragment(&route.reply_url, &out, None).await;
            self.finish_relay(tag, ok);
        }
    }

    fn finish_relay(&self, tag: &str, ok: bool) {
        if ok {
            self.inner.relayed.fetch_add(1, Ordering::SeqCst);
            let mut timings = self.inner.timings.lock().unwrap();
            let cell = timings.entry(tag.to_owned()).or_default();
            cell.last_relay = Some(Instant::now());
            cell.relayed += 1;
        } else {
            tracing::warn!(proxy = %self.id(), tag, "relay failed; session failed");
            self.inner.failures.lock().unwrap().push(tag.to_owned());
        }
    }

    /// POSTs to `{base}/receive-key-fragment` with bounded retries.
    async fn post_fragment(&self, base: &str, msg: &FragmentMessage, return_path: Option<String>) -> bool {
        let body = msg.to_json();
        self.inner.recorder.record(&body);
        for attempt in 1..=self.inner.cfg.relay_attempts {
            let mut req = self
                .inner
                .http
                .post(format!("{base}/receive-key-fragment"))
                .header("content-type", "application/json");
            if let Some(p) = &return_path {
                req = req.header(RETURN_PATH_HEADER, p);
            }
            match req.body(body.clone()).send().await {
                Ok(resp) if resp.status().is_success() => return true,
                Ok(resp) if resp.status().is_client_error() => return false,
                _ => tokio::time::sleep(Duration::from_millis(10 * u64::from(attempt))).await,
            }
        }
        false
    }
}

fn upstream_error(e: &reqwest::Error) -> HttpError {
    let reason = if e.is_connect() {
        "upstream unreachable"
    } else if e.is_timeout() {
        "upstream timed out"
    } else {
        "upstream transport error"
    };
    HttpError::new(StatusCode::BAD_GATEWAY, reason)
}

/// Passes an upstream acknowledgement or error back to the caller.
async fn relay_ack(resp: reqwest::Response) -> Result<Ack, HttpError> {
    let status = resp.status();
    if status.is_success() {
        resp.json::<Ack>()
            .await
            .map_err(|e| HttpError::new(StatusCode::BAD_GATEWAY, e.to_string()))
    } else {
        let msg = match resp.json::<ErrorBody>().await {
            Ok(b) => b.error,
            Err(_) => status.to_string(),
        };
        let status = StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
        Err(HttpError::new(status, msg))
    }
}

fn reply_to(headers: &HeaderMap) -> Result<String, HttpError> {
    headers
        .get(REPLY_TO_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
        .ok_or_else(|| HttpError::bad_request(format!("missing {REPLY_TO_HEADER} header")))
}

async fn get_key_parameters(
    State(node): State<ProxyNode>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<Ack>, HttpError> {
    let started = Instant::now();
    node.inner.recorder.record(&body);
    let reply = reply_to(&headers)?;
    let req: KeyRequest = parse_json(&body)?;
    Ok(Json(node.ingress(req, reply, None, None, started).await?))
}

async fn pq_tunnel(
    State(node): State<ProxyNode>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, HttpError> {
    let started = Instant::now();
    node.inner.recorder.record(&body);
    let reply = reply_to(&headers)?;
    let treq: TunnelRequest = parse_json(&body)?;
    let (inner, key) = node
        .inner
        .terminator
        .accept(&treq)
        .map_err(|e| HttpError::new(StatusCode::UNAUTHORIZED, e.to_string()))?;
    let pq_kem = started.elapsed();
    node.inner.recorder.record(&inner);
    let req: KeyRequest = parse_json(&inner)?;
    let (status, json) = match node
        .ingress(req, reply, Some(key.clone()), Some(pq_kem), started)
        .await
    {
        Ok(ack) => (StatusCode::OK, serde_json::to_vec(&ack)),
        Err(e) => (e.status, serde_json::to_vec(&ErrorBody { error: e.message })),
    };
    let sealed = {
        let mut rng = node.inner.rng.lock().unwrap();
        key.seal_response(&json.expect("serializable"), &mut *rng)
    };
    Ok((status, Json(TunnelResponse { sealed })).into_response())
}

async fn kem_public_key(
    State(node): State<ProxyNode>,
    Path(provider): Path<String>,
) -> Result<Json<KemPublicKey>, HttpError> {
    node.inner
        .terminator
        .public_key(&provider)
        .map(Json)
        .map_err(|e| HttpError::new(StatusCode::NOT_FOUND, e.to_string()))
}

async fn pool_forward(State(node): State<ProxyNode>, body: Bytes) -> Result<Json<Ack>, HttpError> {
    node.inner.recorder.record(&body);
    let payload: PoolPayload = parse_json(&body)?;
    Ok(Json(node.route_pool(payload).await?))
}

async fn receive_key_fragment(
    State(node): State<ProxyNode>,
    headers: HeaderMap,
    body: Bytes,
) -> StatusCode {
    let Ok(msg) = serde_json::from_slice::<FragmentMessage>(&body) else {
        return StatusCode::BAD_REQUEST;
    };
    let path = headers
        .get(RETURN_PATH_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(|v| {
            v.split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect::<Vec<_>>()
        });
    tokio::spawn(async move { node.on_fragment(msg, path).await });
    StatusCode::ACCEPTED
}
