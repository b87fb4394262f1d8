//! The KEM-keyed authenticated tunnel protecting the request and the
//! fragments on the wire.
//!
//! Handshake: the initiator fetches `GET /kem-public-key/{provider}`,
//! encapsulates to it, and sends `POST /pq-tunnel` with the encapsulation and
//! the sealed request. Both ends derive the AES-256-GCM tunnel key with
//! HKDF-SHA256 over the KEM secret, salted with a digest of the
//! encapsulation. Fragments destined for a tunnelled party are sealed again
//! under the same key, with the session tag as associated data.

use std::collections::HashMap;
use std::sync::Arc;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

use super::kem::{KemError, KemProvider, SharedSecret};
use crate::wire::{b64, FragmentMessage};

const NONCE_LEN: usize = 12;
const KDF_INFO: &[u8] = b"keyweave/pq-tunnel/v1";
const AAD_REQUEST: &[u8] = b"keyweave/tunnel/request";
const AAD_RESPONSE: &[u8] = b"keyweave/tunnel/response";
const AAD_FRAGMENT: &[u8] = b"keyweave/tunnel/fragment:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TunnelError {
    #[error(transparent)]
    Kem(#[from] KemError),
    #[error("tunnel authentication failed")]
    Authentication,
    #[error("tunnel payload is not valid JSON: {0}")]
    Payload(String),
}

/// `GET /kem-public-key/{provider}` response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KemPublicKey {
    pub provider: String,
    #[serde(with = "b64")]
    pub public_key: Vec<u8>,
}

/// `POST /pq-tunnel` body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelRequest {
    pub provider: String,
    #[serde(with = "b64")]
    pub encapsulation: Vec<u8>,
    #[serde(with = "b64")]
    pub sealed: Vec<u8>,
}

/// `POST /pq-tunnel` response: the sealed JSON reply of the inner endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelResponse {
    #[serde(with = "b64")]
    pub sealed: Vec<u8>,
}

#[derive(Clone)]
pub struct TunnelKey(Zeroizing<[u8; 32]>);

impl std::fmt::Debug for TunnelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TunnelKey(<redacted>)")
    }
}

impl TunnelKey {
    pub fn derive(secret: &SharedSecret, encapsulation: &[u8]) -> Self {
        let salt = Sha256::digest(encapsulation);
        let hk = Hkdf::<Sha256>::new(Some(&salt), secret.as_bytes());
        let mut okm = Zeroizing::new([0u8; 32]);
        hk.expand(KDF_INFO, okm.as_mut())
            .expect("32 bytes is a valid HKDF output length");
        TunnelKey(okm)
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(self.0.as_ref()).expect("32-byte key")
    }

    /// `nonce || AES-256-GCM(plaintext)`.
    pub fn seal<R: RngCore + CryptoRng>(&self, plaintext: &[u8], aad: &[u8], rng: &mut R) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ct = self
            .cipher()
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
            .expect("AES-GCM encryption of in-memory data");
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn open(&self, sealed: &[u8], aad: &[u8]) -> Result<Zeroizing<Vec<u8>>, TunnelError> {
        if sealed.len() < NONCE_LEN {
            return Err(TunnelError::Authentication);
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        self.cipher()
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
            .map(Zeroizing::new)
            .map_err(|_| TunnelError::Authentication)
    }

    pub fn seal_request<R: RngCore + CryptoRng>(&self, json: &[u8], rng: &mut R) -> Vec<u8> {
        self.seal(json, AAD_REQUEST, rng)
    }

    pub fn open_request(&self, sealed: &[u8]) -> Result<Zeroizing<Vec<u8>>, TunnelError> {
        self.open(sealed, AAD_REQUEST)
    }

    pub fn seal_response<R: RngCore + CryptoRng>(&self, json: &[u8], rng: &mut R) -> Vec<u8> {
        self.seal(json, AAD_RESPONSE, rng)
    }

    pub fn open_response(&self, sealed: &[u8]) -> Result<Zeroizing<Vec<u8>>, TunnelError> {
        self.open(sealed, AAD_RESPONSE)
    }

    fn fragment_aad(session_tag: &str) -> Vec<u8> {
        let mut aad = AAD_FRAGMENT.to_vec();
        aad.extend_from_slice(session_tag.as_bytes());
        aad
    }

    /// Wraps the fragment ciphertext; the session tag stays readable.
    pub fn seal_fragment<R: RngCore + CryptoRng>(
        &self,
        msg: &FragmentMessage,
        rng: &mut R,
    ) -> FragmentMessage {
        FragmentMessage {
            session_tag: msg.session_tag.clone(),
            ciphertext: self.seal(&msg.ciphertext, &Self::fragment_aad(&msg.session_tag), rng),
        }
    }

    pub fn open_fragment(&self, msg: &FragmentMessage) -> Result<FragmentMessage, TunnelError> {
        let inner = self.open(&msg.ciphertext, &Self::fragment_aad(&msg.session_tag))?;
        Ok(FragmentMessage {
            session_tag: msg.session_tag.clone(),
            ciphertext: inner.to_vec(),
        })
    }
}

/// Initiator side: encapsulate to the peer and derive the tunnel key.
pub fn initiate(
    provider: &dyn KemProvider,
    peer_public: &[u8],
    rng: &mut dyn rand_core::CryptoRngCore,
) -> Result<(Vec<u8>, TunnelKey), TunnelError> {
    let (encapsulation, secret) = provider.encapsulate(peer_public, rng)?;
    let key = TunnelKey::derive(&secret, &encapsulation);
    Ok((encapsulation, key))
}

/// Terminating side of the tunnel: holds one provider per KEM name.
#[derive(Clone, Default)]
pub struct TunnelTerminator {
    providers: HashMap<String, Arc<dyn KemProvider>>,
}

impl TunnelTerminator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_provider(mut self, provider: Arc<dyn KemProvider>) -> Self {
        self.providers.insert(provider.name().to_owned(), provider);
        self
    }

    pub fn public_key(&self, provider: &str) -> Result<KemPublicKey, TunnelError> {
        let p = self
            .providers
            .get(provider)
            .ok_or_else(|| KemError::UnknownProvider(provider.to_owned()))?;
        Ok(KemPublicKey {
            provider: provider.to_owned(),
            public_key: p.public_key(),
        })
    }

    /// Decapsulates and opens the inner request body.
    pub fn accept(
        &self,
        req: &TunnelRequest,
    ) -> Result<(Zeroizing<Vec<u8>>, TunnelKey), TunnelError> {
        let p = self
            .providers
            .get(&req.provider)
            .ok_or_else(|| KemError::UnknownProvider(req.provider.clone()))?;
        let secret = p.decapsulate(&req.encapsulation)?;
        let key = TunnelKey::derive(&secret, &req.encapsulation);
        let body = key.open_request(&req.sealed)?;
        Ok((body, key))
    }
}
