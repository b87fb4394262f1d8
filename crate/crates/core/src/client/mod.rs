//! The communicating party: requests a key, collects and decrypts its
//! fragments, and reconstructs the session key.

pub mod kem;
mod node;
pub mod tunnel;

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use zeroize::Zeroizing;

pub use node::{ClientConfig, ClientNode, KeyParams, RedirectRules, RequestOutcome, Target, WireLog};

use crate::keycore::{
    reconstruct_key, EncryptedFragment, FragmentOpener, KeyError, PlainFragment,
    RecipientPrivateKey, SessionKey,
};
use crate::wire::FragmentMessage;
use tunnel::{TunnelError, TunnelKey};

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    #[default]
    ClassicalMultipath,
    PqTunnel,
}

impl std::fmt::Display for ClientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClientMode::ClassicalMultipath => "classical_multipath",
            ClientMode::PqTunnel => "pq_tunnel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Requesting,
    Collecting,
    Complete,
    Failed(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("fragment for foreign tagname {0:?}")]
    UnknownTag(String),
    #[error("session {tagname:?} is {phase:?}, not collecting")]
    WrongPhase { tagname: String, phase: Phase },
    #[error("session {0:?} passed its deadline")]
    Deadline(String),
    #[error("session {0:?} is not complete")]
    NotComplete(String),
    #[error("session {0:?} already exists on this client")]
    DuplicateSession(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("KEM tunnel: {0}")]
    Tunnel(#[from] TunnelError),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("channel setup: {0}")]
    Channel(#[from] crate::channels::ChannelError),
    #[error("probe message failed authentication")]
    Probe,
}

/// What a received fragment did to the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    /// Buffered; the expected count has not arrived yet.
    Buffered,
    /// Already held (same ciphertext, or same index and payload).
    Duplicate,
    /// Decrypted the batch; still missing fragments.
    Partial,
    Complete,
}

/// Client-side component timings of one session.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClientTiming {
    pub pq_kem: Option<Duration>,
    /// From sending the request until the last needed fragment arrived.
    pub network: Duration,
    /// Decrypting every fragment, including the tunnel layer.
    pub decryption: Duration,
    pub reconstruction: Duration,
    /// From the start of the request (handshake included) to key recovery.
    pub wall: Duration,
}

/// One tagname session at the client.
///
/// Fragments are buffered as they arrive; once as many distinct ciphertexts
/// as the requested split count are present, the batch is decrypted, checked
/// for completeness, and reassembled.
pub struct ClientSessionState {
    tagname: String,
    key_bits: u32,
    expected: usize,
    mode: ClientMode,
    opener: FragmentOpener,
    tunnel: Option<TunnelKey>,
    phase: Phase,
    deadline: Instant,
    inbox: Vec<FragmentMessage>,
    seen: HashSet<Vec<u8>>,
    received: BTreeMap<u16, PlainFragment>,
    total: Option<u16>,
    decrypt_failures: u32,
    conflicts: u32,
    key: Option<SessionKey>,
    started: Instant,
    request_sent: Option<Instant>,
    timing: ClientTiming,
}

impl ClientSessionState {
    pub fn new(
        tagname: &str,
        key_bits: u32,
        num_splits: u32,
        private_key: RecipientPrivateKey,
        mode: ClientMode,
        deadline: Instant,
    ) -> Self {
        ClientSessionState {
            tagname: tagname.to_owned(),
            key_bits,
            expected: num_splits.max(1) as usize,
            mode,
            opener: FragmentOpener::new(private_key),
            tunnel: None,
            phase: Phase::Requesting,
            deadline,
            inbox: Vec::new(),
            seen: HashSet::new(),
            received: BTreeMap::new(),
            total: None,
            decrypt_failures: 0,
            conflicts: 0,
            key: None,
            started: Instant::now(),
            request_sent: None,
            timing: ClientTiming::default(),
        }
    }

    pub fn tagname(&self) -> &str {
        &self.tagname
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn mode(&self) -> ClientMode {
        self.mode
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn deadline(&self) -> Instant {
        self.deadline
    }

    pub fn decrypt_failures(&self) -> u32 {
        self.decrypt_failures
    }

    pub fn conflicts(&self) -> u32 {
        self.conflicts
    }

    pub fn received_indices(&self) -> Vec<u16> {
        self.received.keys().copied().collect()
    }

    pub fn timing(&self) -> ClientTiming {
        self.timing
    }

    pub(crate) fn mark_started(&mut self, at: Instant) {
        self.started = at;
    }

    pub(crate) fn set_pq_kem(&mut self, d: Duration) {
        self.timing.pq_kem = Some(d);
    }

    /// Installs the tunnel key fragments will be wrapped under.
    pub fn set_tunnel(&mut self, key: TunnelKey) {
        self.tunnel = Some(key);
    }

    /// The request has been sent; start collecting.
    pub fn begin_collecting(&mut self, at: Instant) {
        if self.phase == Phase::Requesting {
            self.phase = Phase::Collecting;
        }
        self.request_sent = Some(at);
    }

    pub fn fail(&mut self, reason: impl Into<String>) {
        if !matches!(self.phase, Phase::Complete | Phase::Failed(_)) {
            self.phase = Phase::Failed(reason.into());
        }
    }

    /// Fails the session if it is still collecting past its deadline.
    pub fn check_deadline(&mut self, now: Instant) -> bool {
        let open = matches!(self.phase, Phase::Requesting | Phase::Collecting);
        if open && now > self.deadline {
            self.phase = Phase::Failed("deadline".into());
            return true;
        }
        false
    }

    pub fn receive_fragment(
        &mut self,
        msg: FragmentMessage,
        now: Instant,
    ) -> Result<Progress, ClientError> {
        if msg.session_tag != self.tagname {
            return Err(ClientError::UnknownTag(msg.session_tag));
        }
        if self.check_deadline(now) {
            return Err(ClientError::Deadline(self.tagname.clone()));
        }
        match self.phase {
            // Fragments may overtake the request acknowledgement.
            Phase::Requesting | Phase::Collecting => {}
            Phase::Complete => return Ok(Progress::Duplicate),
            Phase::Failed(_) => {
                return Err(ClientError::WrongPhase {
                    tagname: self.tagname.clone(),
                    phase: self.phase.clone(),
                })
            }
        }
        if !self.seen.insert(msg.ciphertext.clone()) {
            return Ok(Progress::Duplicate);
        }
        self.inbox.push(msg);
        let needed = self.total.map_or(self.expected, usize::from);
        if self.received.len() + self.inbox.len() < needed {
            return Ok(Progress::Buffered);
        }

        let arrived = now;
        let decrypt_start = Instant::now();
        let mut duplicate_only = true;
        for msg in std::mem::take(&mut self.inbox) {
            match self.open_one(msg) {
                Some(true) => duplicate_only = false,
                Some(false) => {}
                None => duplicate_only = false,
            }
        }
        self.timing.decryption += decrypt_start.elapsed();

        let complete = self
            .total
            .is_some_and(|t| self.received.len() == usize::from(t));
        if !complete {
            return Ok(if duplicate_only {
                Progress::Duplicate
            } else {
                Progress::Partial
            });
        }

        if let Some(sent) = self.request_sent {
            self.timing.network = arrived.saturating_duration_since(sent);
        }
        let rebuild = Instant::now();
        let key = reconstruct_key(self.received.values().cloned())?;
        self.timing.reconstruction = rebuild.elapsed();
        if key.bits() != self.key_bits {
            self.fail(format!("reconstructed {} bits, expected {}", key.bits(), self.key_bits));
            return Err(KeyError::Malformed("key length disagrees with the request").into());
        }
        self.key = Some(key);
        self.received.clear();
        self.phase = Phase::Complete;
        self.timing.wall = Instant::now().saturating_duration_since(self.started);
        Ok(Progress::Complete)
    }

    /// Decrypts one buffered message. `Some(true)` stored a new index,
    /// `Some(false)` was an identical duplicate, `None` was discarded.
    fn open_one(&mut self, msg: FragmentMessage) -> Option<bool> {
        let msg = match &self.tunnel {
            Some(t) => match t.open_fragment(&msg) {
                Ok(inner) => inner,
                Err(_) => {
                    self.decrypt_failures += 1;
                    return None;
                }
            },
            None => msg,
        };
        let frag = match self.opener.open(&EncryptedFragment::from(msg)) {
            Ok(f) => f,
            Err(_) => {
                self.decrypt_failures += 1;
                return None;
            }
        };
        if let Some(t) = self.total {
            if frag.total() != t {
                self.conflicts += 1;
                return None;
            }
        }
        match self.received.get(&frag.index()) {
            Some(held) if held.payload() == frag.payload() => Some(false),
            Some(_) => {
                self.conflicts += 1;
                None
            }
            None => {
                self.total = Some(frag.total());
                self.received.insert(frag.index(), frag);
                Some(true)
            }
        }
    }

    pub fn finalize(&self) -> Result<SessionKey, ClientError> {
        match (&self.phase, &self.key) {
            (Phase::Complete, Some(k)) => Ok(k.clone()),
            _ => Err(ClientError::NotComplete(self.tagname.clone())),
        }
    }
}

const PROBE_INFO: &[u8] = b"keyweave/probe/v1";

fn probe_cipher(key: &SessionKey) -> Aes256Gcm {
    let hk = Hkdf::<Sha256>::new(None, key.material());
    let mut okm = Zeroizing::new([0u8; 32]);
    hk.expand(PROBE_INFO, okm.as_mut())
        .expect("32 bytes is a valid HKDF output length");
    Aes256Gcm::new_from_slice(okm.as_ref()).expect("32-byte key")
}

/// Encrypts an application probe message under the established key with
/// AES-256-GCM (`nonce || ciphertext`).
pub fn probe_seal<R: RngCore + CryptoRng>(key: &SessionKey, message: &[u8], rng: &mut R) -> Vec<u8> {
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let ct = probe_cipher(key)
        .encrypt(Nonce::from_slice(&nonce), message)
        .expect("AES-GCM encryption of in-memory data");
    [nonce.as_slice(), &ct].concat()
}

pub fn probe_open(key: &SessionKey, sealed: &[u8]) -> Result<Vec<u8>, ClientError> {
    if sealed.len() < 12 {
        return Err(ClientError::Probe);
    }
    let (nonce, ct) = sealed.split_at(12);
    probe_cipher(key)
        .decrypt(Nonce::from_slice(nonce), ct)
        .map_err(|_| ClientError::Probe)
}
