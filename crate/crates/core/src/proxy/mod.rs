//! Proxies between clients and the server, and the private proxy pool.
//!
//! A proxy forwards a client's request upstream with its own channel set in
//! place of the client's, then relays the returned fragments (still
//! encrypted for the client) to the client's `POST /receive-key-fragment`.
//! In a pool, each visited proxy appends its channel list and either forwards
//! the payload to a random pool member or delivers it to the server.

mod node;
pub mod pool;

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use node::{BufferRecorder, ProxyNode, ProxySessionTiming};

use crate::channels::ChannelSet;
use crate::client::kem::KemProvider;
use crate::qkms::KeyRequest;

#[derive(Debug, Error, PartialEq)]
pub enum ProxyError {
    #[error("proxy pool is empty")]
    EmptyPool,
    #[error("forward probability {0} outside [0, 1)")]
    ForwardProbability(f64),
    #[error("weighting factor {0} outside (0, 1]")]
    Beta(f64),
    #[error("max_hops must be at least 1")]
    MaxHops,
    #[error("payload already visited {hops} proxies (cap {max})")]
    HopCapExceeded { hops: u32, max: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyMode {
    /// Clients address the server; a boundary redirect delivers to the proxy.
    #[default]
    Transparent,
    /// Clients address the proxy directly.
    Explicit,
}

/// Where the server sends a pool request's fragments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnRoute {
    /// To the exit node's channels, then back along the reversed pool path.
    #[default]
    ExitPath,
    /// To the entry node's channels.
    EntryDirect,
}

#[derive(Clone)]
pub struct ProxyConfig {
    /// This proxy's pool identity, its base URL.
    pub id: String,
    pub mode: ProxyMode,
    pub own_channels: ChannelSet,
    /// Pool members (this proxy included) eligible as next hop.
    pub pool_peers: Vec<String>,
    pub forward_probability: f64,
    /// Forwarding probability after `k` forwards is `q * beta^k`.
    pub beta: f64,
    pub max_hops: u32,
    pub return_route: ReturnRoute,
    pub qkms_url: String,
    /// Tunnel to the server with this provider instead of plain HTTP.
    pub upstream_kem: Option<Arc<dyn KemProvider>>,
    /// Providers offered to clients for tunnels terminating here.
    pub client_kems: Vec<Arc<dyn KemProvider>>,
    pub relay_attempts: u32,
    pub route_ttl: Duration,
    pub seed: Option<u64>,
}

impl ProxyConfig {
    pub fn new(qkms_url: impl Into<String>, own_channels: ChannelSet) -> Self {
        ProxyConfig {
            id: String::new(),
            mode: ProxyMode::default(),
            own_channels,
            pool_peers: Vec::new(),
            forward_probability: 0.0,
            beta: 1.0,
            max_hops: 1,
            return_route: ReturnRoute::default(),
            qkms_url: qkms_url.into(),
            upstream_kem: None,
            client_kems: Vec::new(),
            relay_attempts: 5,
            route_ttl: Duration::from_secs(120),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        if !(0.0..1.0).contains(&self.forward_probability) {
            return Err(ProxyError::ForwardProbability(self.forward_probability));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(ProxyError::Beta(self.beta));
        }
        if self.max_hops == 0 {
            return Err(ProxyError::MaxHops);
        }
        Ok(())
    }

    /// Forwarding probability for a payload that has visited `hops` proxies.
    pub fn forward_probability_at(&self, hops: u32) -> f64 {
        self.forward_probability * self.beta.powi(hops.saturating_sub(1) as i32)
    }
}

/// One visited proxy and the channels it offers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub proxy_id: String,
    pub channels: ChannelSet,
}

/// Body of `POST /pool-forward`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPayload {
    pub request: KeyRequest,
    pub hops: Vec<HopRecord>,
    pub hop_count: u32,
    pub entry_id: String,
}

impl PoolPayload {
    pub fn new(request: KeyRequest, entry_id: impl Into<String>) -> Self {
        PoolPayload {
            request,
            hops: Vec::new(),
            hop_count: 0,
            entry_id: entry_id.into(),
        }
    }

    /// Proxies still to traverse back to the entry, nearest first, excluding
    /// the last hop (the exit).
    pub fn reverse_path(&self) -> Vec<String> {
        let mut path: Vec<String> = self.hops.iter().map(|h| h.proxy_id.clone()).collect();
        path.pop();
        path.reverse();
        path
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteDecision {
    Forward(String),
    Deliver,
}

/// One pool hop at proxy `cfg.id`: record this proxy, then forward with
/// probability `q_k` while under the hop cap, else deliver.
pub fn pool_route<R: Rng + ?Sized>(
    payload: &mut PoolPayload,
    cfg: &ProxyConfig,
    rng: &mut R,
) -> Result<RouteDecision, ProxyError> {
    if payload.hop_count >= cfg.max_hops {
        return Err(ProxyError::HopCapExceeded {
            hops: payload.hop_count,
            max: cfg.max_hops,
        });
    }
    payload.hops.push(HopRecord {
        proxy_id: cfg.id.clone(),
        channels: cfg.own_channels.clone(),
    });
    payload.hop_count += 1;
    if payload.hop_count >= cfg.max_hops || cfg.pool_peers.is_empty() {
        return Ok(RouteDecision::Deliver);
    }
    if rng.gen::<f64>() < cfg.forward_probability_at(payload.hop_count) {
        let next = &cfg.pool_peers[rng.gen_range(0..cfg.pool_peers.len())];
        Ok(RouteDecision::Forward(next.clone()))
    } else {
        Ok(RouteDecision::Deliver)
    }
}

/// Draws a replacement next hop after `failed` peers proved unreachable.
pub fn redraw_peer<R: Rng + ?Sized>(
    pool: &[String],
    failed: &HashSet<String>,
    rng: &mut R,
) -> Option<String> {
    let candidates: Vec<&String> = pool.iter().filter(|p| !failed.contains(*p)).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.gen_range(0..candidates.len())].clone())
    }
}

/// Uniform choice of a pool entry node.
pub fn select_entry<'a, R: Rng + ?Sized>(
    pool: &'a [String],
    rng: &mut R,
) -> Result<&'a str, ProxyError> {
    if pool.is_empty() {
        return Err(ProxyError::EmptyPool);
    }
    Ok(&pool[rng.gen_range(0..pool.len())])
}

/// The request as the server will see it: the client's channels replaced by
/// the delivering proxy's.
pub fn prepare_upstream(request: &KeyRequest, channels: &ChannelSet) -> KeyRequest {
    KeyRequest {
        channels: channels.clone(),
        ..request.clone()
    }
}
