//! Kiosk credentials: a signed (proxy address, expiry) pair handed to a
//! client over a short-range channel before it touches the network.
//!
//! Text form is `base64(address ‖ 0x1F ‖ expiry_be_u64 ‖ signature)`.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey, SIGNATURE_LENGTH};
use thiserror::Error;

use crate::wire::b64;

const SEPARATOR: u8 = 0x1F;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("validity window must be positive")]
    EmptyWindow,
    #[error("proxy address must be non-empty")]
    EmptyAddress,
    #[error("proxy address may not contain the 0x1F separator")]
    SeparatorInAddress,
    #[error("expiry overflows")]
    ExpiryOverflow,
    #[error("bad key encoding: {0}")]
    KeyEncoding(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    /// `host:port` of the proxy the client is authorised to use.
    pub proxy_address: String,
    /// Epoch seconds.
    pub expiry: u64,
    pub signature: [u8; SIGNATURE_LENGTH],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Expired,
    BadSignature,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected(Rejection),
}

impl Verdict {
    pub fn is_accepted(self) -> bool {
        self == Verdict::Accepted
    }
}

pub fn canonical_bytes(proxy_address: &str, expiry: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(proxy_address.len() + 9);
    out.extend_from_slice(proxy_address.as_bytes());
    out.push(SEPARATOR);
    out.extend_from_slice(&expiry.to_be_bytes());
    out
}

fn parse_canonical(bytes: &[u8]) -> Option<(String, u64)> {
    if bytes.len() < 10 {
        return None;
    }
    let (head, expiry) = bytes.split_at(bytes.len() - 8);
    let (addr, sep) = head.split_at(head.len() - 1);
    if sep[0] != SEPARATOR || addr.contains(&SEPARATOR) {
        return None;
    }
    let addr = std::str::from_utf8(addr).ok()?.to_owned();
    Some((addr, u64::from_be_bytes(expiry.try_into().ok()?)))
}

impl Credential {
    pub fn canonical(&self) -> Vec<u8> {
        canonical_bytes(&self.proxy_address, self.expiry)
    }

    pub fn to_text(&self) -> String {
        let mut raw = self.canonical();
        raw.extend_from_slice(&self.signature);
        b64::encode(&raw)
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let raw = b64::decode(text.trim()).ok()?;
        let (fields, sig) = split_signed(&raw)?;
        let (proxy_address, expiry) = parse_canonical(fields)?;
        Some(Credential {
            proxy_address,
            expiry,
            signature: sig.try_into().ok()?,
        })
    }
}

fn split_signed(raw: &[u8]) -> Option<(&[u8], &[u8])> {
    (raw.len() > SIGNATURE_LENGTH).then(|| raw.split_at(raw.len() - SIGNATURE_LENGTH))
}

pub fn issue_credential(
    proxy_address: &str,
    validity_window: Duration,
    kiosk_key: &SigningKey,
    now: u64,
) -> Result<Credential, BootstrapError> {
    if validity_window.as_secs() == 0 {
        return Err(BootstrapError::EmptyWindow);
    }
    if proxy_address.is_empty() {
        return Err(BootstrapError::EmptyAddress);
    }
    if proxy_address.as_bytes().contains(&SEPARATOR) {
        return Err(BootstrapError::SeparatorInAddress);
    }
    let expiry = now
        .checked_add(validity_window.as_secs())
        .ok_or(BootstrapError::ExpiryOverflow)?;
    let signature = kiosk_key.sign(&canonical_bytes(proxy_address, expiry));
    Ok(Credential {
        proxy_address: proxy_address.to_owned(),
        expiry,
        signature: signature.to_bytes(),
    })
}

pub fn verify_credential(cred: &Credential, kiosk_public: &VerifyingKey, now: u64) -> Verdict {
    verify_parts(&cred.canonical(), &cred.signature, kiosk_public, now)
}

/// Verifies the text form. The signature is checked over the raw field
/// bytes before they are parsed, so tampering always reads as a bad
/// signature rather than a parse failure.
pub fn verify_credential_text(text: &str, kiosk_public: &VerifyingKey, now: u64) -> Verdict {
    let Ok(raw) = b64::decode(text.trim()) else {
        return Verdict::Rejected(Rejection::Malformed);
    };
    let Some((fields, sig)) = split_signed(&raw) else {
        return Verdict::Rejected(Rejection::Malformed);
    };
    verify_parts(fields, sig, kiosk_public, now)
}

fn verify_parts(fields: &[u8], sig: &[u8], kiosk_public: &VerifyingKey, now: u64) -> Verdict {
    let Ok(sig) = Signature::from_slice(sig) else {
        return Verdict::Rejected(Rejection::Malformed);
    };
    if kiosk_public.verify(fields, &sig).is_err() {
        return Verdict::Rejected(Rejection::BadSignature);
    }
    match parse_canonical(fields) {
        None => Verdict::Rejected(Rejection::Malformed),
        Some((_, expiry)) if now > expiry => Verdict::Rejected(Rejection::Expired),
        Some(_) => Verdict::Accepted,
    }
}

pub fn epoch_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn generate_signing_key() -> SigningKey {
    SigningKey::generate(&mut rand::rngs::OsRng)
}

/// Kiosk signing keys are stored as base64 of the 32-byte seed.
pub fn signing_key_from_b64(text: &str) -> Result<SigningKey, BootstrapError> {
    let raw = b64::decode(text.trim()).map_err(|e| BootstrapError::KeyEncoding(e.to_string()))?;
    let seed: [u8; 32] = raw
        .try_into()
        .map_err(|_| BootstrapError::KeyEncoding("expected a 32-byte seed".into()))?;
    Ok(SigningKey::from_bytes(&seed))
}

pub fn verifying_key_from_b64(text: &str) -> Result<VerifyingKey, BootstrapError> {
    let raw = b64::decode(text.trim()).map_err(|e| BootstrapError::KeyEncoding(e.to_string()))?;
    let bytes: [u8; 32] = raw
        .try_into()
        .map_err(|_| BootstrapError::KeyEncoding("expected a 32-byte public key".into()))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| BootstrapError::KeyEncoding(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kiosk() -> SigningKey {
        SigningKey::from_bytes(&[7; 32])
    }

    #[test]
    fn round_trip_and_expiry_arithmetic() {
        let key = kiosk();
        let cred = issue_credential("10.0.0.5:8443", Duration::from_secs(300), &key, 1_000).unwrap();
        assert_eq!(cred.expiry, 1_300);
        let public = key.verifying_key();
        assert_eq!(verify_credential(&cred, &public, 1_000), Verdict::Accepted);
        assert_eq!(verify_credential(&cred, &public, 1_300), Verdict::Accepted);
        assert_eq!(
            verify_credential(&cred, &public, 1_301),
            Verdict::Rejected(Rejection::Expired)
        );
        let text = cred.to_text();
        assert_eq!(Credential::from_text(&text).unwrap(), cred);
        assert!(verify_credential_text(&text, &public, 1_000).is_accepted());
    }

    #[test]
    fn issuance_is_deterministic() {
        let a = issue_credential("p:1", Duration::from_secs(60), &kiosk(), 5).unwrap();
        let b = issue_credential("p:1", Duration::from_secs(60), &kiosk(), 5).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(canonical_bytes("p:1", 65), a.canonical());
    }

    #[test]
    fn issuance_preconditions() {
        let k = kiosk();
        assert_eq!(
            issue_credential("p:1", Duration::ZERO, &k, 0),
            Err(BootstrapError::EmptyWindow)
        );
        assert_eq!(
            issue_credential("", Duration::from_secs(1), &k, 0),
            Err(BootstrapError::EmptyAddress)
        );
        assert_eq!(
            issue_credential("a\u{1f}b", Duration::from_secs(1), &k, 0),
            Err(BootstrapError::SeparatorInAddress)
        );
        assert_eq!(
            issue_credential("p:1", Duration::from_secs(2), &k, u64::MAX),
            Err(BootstrapError::ExpiryOverflow)
        );
    }

    #[test]
    fn every_single_byte_mutation_is_rejected() {
        let key = kiosk();
        let public = key.verifying_key();
        let cred = issue_credential("px:9", Duration::from_secs(60), &key, 100).unwrap();
        let raw = b64::decode(&cred.to_text()).unwrap();
        let fields = raw.len() - SIGNATURE_LENGTH;
        for pos in 0..raw.len() {
            for delta in [1u8, 0x80, 0xFF] {
                let mut m = raw.clone();
                m[pos] ^= delta;
                let verdict = verify_credential_text(&b64::encode(&m), &public, 100);
                assert!(!verdict.is_accepted(), "byte {pos} ^ {delta:#x}");
                if pos < fields {
                    assert_eq!(verdict, Verdict::Rejected(Rejection::BadSignature));
                }
            }
        }
    }

    #[test]
    fn extended_expiry_without_resigning_fails() {
        let key = kiosk();
        let mut cred = issue_credential("px:9", Duration::from_secs(60), &key, 100).unwrap();
        cred.expiry += 3600;
        assert_eq!(
            verify_credential(&cred, &key.verifying_key(), 100),
            Verdict::Rejected(Rejection::BadSignature)
        );
    }

    #[test]
    fn foreign_kiosk_and_garbage_are_rejected() {
        let cred = issue_credential("px:9", Duration::from_secs(60), &kiosk(), 100).unwrap();
        let other = SigningKey::from_bytes(&[8; 32]).verifying_key();
        assert_eq!(
            verify_credential(&cred, &other, 100),
            Verdict::Rejected(Rejection::BadSignature)
        );
        for junk in ["", "!!!", "AAAA", &b64::encode(&[0u8; 64])] {
            assert_eq!(
                verify_credential_text(junk, &other, 0),
                Verdict::Rejected(Rejection::Malformed)
            );
        }
    }

    #[test]
    fn key_text_round_trip() {
        let key = kiosk();
        let seed = b64::encode(&key.to_bytes());
        assert_eq!(signing_key_from_b64(&seed).unwrap().to_bytes(), key.to_bytes());
        let public = b64::encode(key.verifying_key().as_bytes());
        assert_eq!(verifying_key_from_b64(&public).unwrap(), key.verifying_key());
        assert!(signing_key_from_b64("AAAA").is_err());
    }
}
