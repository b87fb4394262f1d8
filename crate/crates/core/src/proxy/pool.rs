//! In-process pool simulation driving the same entry-selection and per-hop
//! routing code as the proxy service, for statistics over many requests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{pool_route, select_entry, PoolPayload, ProxyConfig, ProxyError, RouteDecision};
use crate::channels::ChannelSet;
use crate::keycore::EncryptionMode;
use crate::qkms::KeyRequest;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolSimConfig {
    pub pool_size: usize,
    pub forward_probability: f64,
    pub beta: f64,
    pub max_hops: u32,
}

/// The proxies one request visited, by pool index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolTrace {
    pub path: Vec<usize>,
}

impl PoolTrace {
    pub fn entry(&self) -> usize {
        self.path[0]
    }

    pub fn exit(&self) -> usize {
        *self.path.last().expect("a trace visits at least one proxy")
    }

    /// Proxies visited, entry included.
    pub fn hops(&self) -> usize {
        self.path.len()
    }
}

fn member_id(i: usize) -> String {
    format!("pool-{i}")
}

/// Routes `requests` payloads through a pool of `pool_size` proxies.
/// `tagname_of` supplies each request's tagname, so tests can check that
/// routing ignores request content.
pub fn simulate_pool_with(
    cfg: &PoolSimConfig,
    requests: usize,
    seed: u64,
    mut tagname_of: impl FnMut(usize) -> String,
) -> Result<Vec<PoolTrace>, ProxyError> {
    if cfg.pool_size == 0 {
        return Err(ProxyError::EmptyPool);
    }
    let ids: Vec<String> = (0..cfg.pool_size).map(member_id).collect();
    let proxies: Vec<ProxyConfig> = ids
        .iter()
        .map(|id| {
            let mut c = ProxyConfig::new("sim://qkms", ChannelSet::default());
            c.id = id.clone();
            c.pool_peers = ids.clone();
            c.forward_probability = cfg.forward_probability;
            c.beta = cfg.beta;
            c.max_hops = cfg.max_hops;
            c
        })
        .collect();
    proxies[0].validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(requests);
    for r in 0..requests {
        let request = KeyRequest {
            tagname: tagname_of(r),
            key_bits: 256,
            num_splits: 1,
            shuffle: false,
            channels: ChannelSet::default(),
            public_key: Vec::new(),
            party_label: "sim".into(),
            encryption: EncryptionMode::DirectAsymmetric,
        };
        let entry = select_entry(&ids, &mut rng)?.to_owned();
        let mut payload = PoolPayload::new(request, entry.clone());
        let mut at = index_of(&entry);
        while let RouteDecision::Forward(peer) = pool_route(&mut payload, &proxies[at], &mut rng)? {
            at = index_of(&peer);
        }
        traces.push(PoolTrace {
            path: payload.hops.iter().map(|h| index_of(&h.proxy_id)).collect(),
        });
    }
    Ok(traces)
}

pub fn simulate_pool(
    cfg: &PoolSimConfig,
    requests: usize,
    seed: u64,
) -> Result<Vec<PoolTrace>, ProxyError> {
    simulate_pool_with(cfg, requests, seed, |r| format!("session-{r}"))
}

fn index_of(id: &str) -> usize {
    id.strip_prefix("pool-")
        .and_then(|s| s.parse().ok())
        .expect("simulated pool ids are pool-<index>")
}
