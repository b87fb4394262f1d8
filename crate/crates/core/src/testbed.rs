//! An in-process deployment: one QKMS, client nodes, and optional proxies
//! on loopback, reused across many key establishments.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{ChannelDescriptor, ChannelNetwork, LatencyModel, MediumType};
use crate::client::kem::{KemProvider, MlKemProvider, StubKem};
use crate::client::{
    ClientConfig, ClientError, ClientMode, ClientNode, ClientTiming, KeyParams, Target,
};
use crate::keycore::{AsymmetricKeyPair, SessionKey};
use crate::net::{self, ServiceHandle};
use crate::proxy::{ProxyConfig, ProxyNode, ProxySessionTiming};
use crate::qkms::{Qkms, QkmsConfig, SessionReport};

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("launch failed: {0}")]
    Launch(String),
    #[error("party {0} does not exist")]
    NoSuchParty(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("session {0} left no server report")]
    MissingReport(String),
}

/// Deterministic 2048-bit recipient key pairs, generated once per process.
pub fn recipient_keypair(seed: u64) -> AsymmetricKeyPair {
    static CACHE: OnceLock<Mutex<HashMap<u64, AsymmetricKeyPair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(pair) = cache.lock().unwrap().get(&seed) {
        return pair.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0x6b65_7977 ^ seed);
    let pair = AsymmetricKeyPair::generate(2048, &mut rng).expect("RSA key generation");
    cache.lock().unwrap().entry(seed).or_insert(pair).clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KemChoice {
    #[default]
    None,
    Stub,
    #[serde(rename = "ml_kem_768")]
    MlKem768,
}

#[derive(Debug, Clone)]
pub struct PartySpec {
    pub label: String,
    /// One channel per entry, on the client or on its proxy.
    pub media: Vec<MediumType>,
    pub latency: LatencyModel,
    pub via_proxy: bool,
}

impl PartySpec {
    pub fn new(label: impl Into<String>, media: Vec<MediumType>, via_proxy: bool) -> Self {
        PartySpec {
            label: label.into(),
            media,
            latency: LatencyModel::default(),
            via_proxy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestbedSpec {
    pub parties: Vec<PartySpec>,
    pub kem: KemChoice,
    /// Proxies also tunnel their upstream requests to the server.
    pub proxy_upstream_tunnel: bool,
    /// Capture every byte the proxies hold.
    pub record_proxy_buffers: bool,
    pub seed: u64,
}

impl TestbedSpec {
    pub fn pair(media: Vec<MediumType>, via_proxy: bool, seed: u64) -> Self {
        TestbedSpec {
            parties: vec![
                PartySpec::new("alice", media.clone(), via_proxy),
                PartySpec::new("bob", media, via_proxy),
            ],
            kem: KemChoice::None,
            proxy_upstream_tunnel: false,
            record_proxy_buffers: false,
            seed,
        }
    }
}

pub struct Party {
    pub client: ClientNode,
    pub proxy: Option<ProxyNode>,
}

impl Party {
    pub fn target(&self, qkms_url: &str) -> Target {
        match &self.proxy {
            Some(p) => Target::Proxy(p.base_url()),
            None => Target::Qkms(qkms_url.to_owned()),
        }
    }
}

/// What one two-party establishment produced.
#[derive(Debug, Clone)]
pub struct Establishment {
    pub tagname: String,
    /// The key as issued by the server.
    pub issued: SessionKey,
    /// Keys as recovered by the two clients, in call order.
    pub recovered: [SessionKey; 2],
    pub report: SessionReport,
    pub client_timing: [ClientTiming; 2],
    pub proxy_timing: [Option<ProxySessionTiming>; 2],
}

pub struct Testbed {
    pub network: ChannelNetwork,
    pub qkms: Qkms,
    qkms_url: String,
    service: Option<ServiceHandle>,
    pub parties: Vec<Party>,
    issued: Arc<Mutex<HashMap<String, SessionKey>>>,
}

fn kem_provider(choice: KemChoice, rng: &mut ChaCha20Rng, seed: u64) -> Option<Arc<dyn KemProvider>> {
    match choice {
        KemChoice::None => None,
        KemChoice::Stub => Some(Arc::new(StubKem::from_u64(seed))),
        KemChoice::MlKem768 => Some(Arc::new(MlKemProvider::generate(rng))),
    }
}

impl Testbed {
    pub async fn launch(spec: &TestbedSpec) -> Result<Self, TestbedError> {
        let launch = |e: String| TestbedError::Launch(e);
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let network = ChannelNetwork::new(spec.seed);
        let qkms = Qkms::new(
            QkmsConfig {
                seed: Some(spec.seed),
                ..QkmsConfig::default()
            },
            network.clone(),
        );
        let issued: Arc<Mutex<HashMap<String, SessionKey>>> = Arc::default();
        let sink = issued.clone();
        qkms.set_key_observer(Arc::new(move |tag, key| {
            sink.lock().unwrap().insert(tag.to_owned(), key.clone());
        }));
        if let Some(p) = kem_provider(spec.kem, &mut rng, spec.seed) {
            qkms.add_kem_provider(p);
        }
        let listener = net::bind("127.0.0.1:0").await.map_err(|e| launch(e.to_string()))?;
        let service = qkms.serve(listener).map_err(|e| launch(e.to_string()))?;
        let qkms_url = service.base_url();

        let mut parties = Vec::new();
        for (i, ps) in spec.parties.iter().enumerate() {
            let channels: Vec<ChannelDescriptor> = ps
                .media
                .iter()
                .enumerate()
                .map(|(j, m)| {
                    let mut d = ChannelDescriptor::local(format!("{}-{j}-{m}", ps.label), *m);
                    d.latency_model = ps.latency;
                    d
                })
                .collect();
            let party_seed = spec.seed.wrapping_add(1 + i as u64);
            let mut cfg = ClientConfig::new(ps.label.clone());
            cfg.seed = Some(party_seed);
            cfg.kem = kem_provider(spec.kem, &mut rng, spec.seed);
            let proxy = if ps.via_proxy {
                let own = crate::channels::ChannelSet::new(channels)
                    .map_err(|e| launch(e.to_string()))?;
                let mut pc = ProxyConfig::new(qkms_url.clone(), own);
                pc.seed = Some(party_seed ^ 0x9e37_79b9);
                if let Some(p) = kem_provider(spec.kem, &mut rng, spec.seed) {
                    pc.client_kems.push(p.clone());
                    if spec.proxy_upstream_tunnel {
                        pc.upstream_kem = Some(p);
                    }
                }
                let node = ProxyNode::start(pc, &network)
                    .await
                    .map_err(|e| launch(e.message))?;
                if spec.record_proxy_buffers {
                    node.recorder().enable();
                }
                Some(node)
            } else {
                cfg.channels = channels;
                None
            };
            let client = ClientNode::start(cfg, recipient_keypair(i as u64), &network).await?;
            parties.push(Party { client, proxy });
        }
        Ok(Testbed {
            network,
            qkms,
            qkms_url,
            service: Some(service),
            parties,
            issued,
        })
    }

    pub fn qkms_url(&self) -> &str {
        &self.qkms_url
    }

    pub fn party(&self, i: usize) -> Result<&Party, TestbedError> {
        self.parties.get(i).ok_or(TestbedError::NoSuchParty(i))
    }

    /// The key the server issued under `tagname`, if any.
    pub fn issued_key(&self, tagname: &str) -> Option<SessionKey> {
        self.issued.lock().unwrap().get(tagname).cloned()
    }

    /// Runs one establishment between parties `a` and `b`. Both requests go
    /// out concurrently; the call returns once both clients hold a key.
    pub async fn establish(
        &self,
        a: usize,
        b: usize,
        params: [&KeyParams; 2],
        mode: ClientMode,
    ) -> Result<Establishment, TestbedError> {
        let tag = params[0].tagname.clone();
        let (pa, pb) = (self.party(a)?, self.party(b)?);
        let (ta, tb) = (pa.target(&self.qkms_url), pb.target(&self.qkms_url));
        let (ra, rb) = tokio::join!(
            pa.client.request_key(params[0], &ta, mode),
            pb.client.request_key(params[1], &tb, mode),
        );
        let outcome = async {
            ra?;
            rb?;
            let (ka, kb) = tokio::join!(pa.client.wait(&tag), pb.client.wait(&tag));
            let keys = [ka?, kb?];
            // A client can finish before its proxy has logged the last relay.
            for (party, p) in [(pa, params[0]), (pb, params[1])] {
                if let Some(proxy) = &party.proxy {
                    relays_settled(proxy, &tag, p.num_splits).await;
                }
            }
            Ok::<_, TestbedError>(keys)
        }
        .await;
        let report = self.qkms.take_report(&tag);
        let result = match outcome {
            Ok(recovered) => {
                let issued = self
                    .issued
                    .lock()
                    .unwrap()
                    .remove(&tag)
                    .ok_or_else(|| TestbedError::MissingReport(tag.clone()))?;
                Ok(Establishment {
                    tagname: tag.clone(),
                    issued,
                    recovered,
                    report: report.ok_or_else(|| TestbedError::MissingReport(tag.clone()))?,
                    client_timing: [
                        pa.client.timing(&tag).unwrap_or_default(),
                        pb.client.timing(&tag).unwrap_or_default(),
                    ],
                    proxy_timing: [
                        pa.proxy.as_ref().and_then(|p| p.session_timing(&tag)),
                        pb.proxy.as_ref().and_then(|p| p.session_timing(&tag)),
                    ],
                })
            }
            Err(e) => Err(e),
        };
        self.forget(&tag);
        result
    }

    /// Drops per-session state everywhere.
    pub fn forget(&self, tagname: &str) {
        self.issued.lock().unwrap().remove(tagname);
        for p in &self.parties {
            p.client.forget(tagname);
            if let Some(proxy) = &p.proxy {
                proxy.forget(tagname);
            }
        }
    }

    pub async fn shutdown(mut self) {
        for p in &self.parties {
            p.client.shutdown().await;
            if let Some(proxy) = &p.proxy {
                proxy.shutdown().await;
            }
        }
        if let Some(s) = self.service.take() {
            s.shutdown().await;
        }
    }
}

async fn relays_settled(proxy: &ProxyNode, tag: &str, expected: u32) {
    for _ in 0..400 {
        if proxy.session_timing(tag).is_some_and(|t| t.relayed >= expected) {
            return;
        }
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    }
}

pub fn same_params(tagname: &str, key_bits: u32, num_splits: u32, shuffle: bool) -> KeyParams {
    let mut p = KeyParams::new(tagname, key_bits, num_splits);
    p.shuffle = shuffle;
    p
}
