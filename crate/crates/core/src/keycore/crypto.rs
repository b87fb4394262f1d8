//! Per-fragment public-key encryption.
//!
//! Two modes share one ciphertext container, distinguished by a leading tag
//! byte:
//!
//! * `0x01` direct: RSA-OAEP (SHA-256) over the encoded fragment.
//! * `0x02` envelope: a data key is RSA-OAEP wrapped once per [`FragmentSealer`];
//!   each fragment is sealed with AES-256-GCM under a fresh key derived from
//!   the data key and a per-fragment random salt (HKDF-SHA256).
//!
//! In both modes the session tag is bound into the ciphertext (OAEP label,
//! GCM associated data), so a fragment replayed under another tag fails to
//! open. The index and total travel only inside the ciphertext.

use std::collections::HashMap;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::traits::PublicKeyParts;
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::{KeyError, PlainFragment};

const TAG_DIRECT: u8 = 0x01;
const TAG_ENVELOPE: u8 = 0x02;
const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 12;
const DATA_KEY_LEN: usize = 32;
const FRAGMENT_KDF_INFO: &[u8] = b"keyweave/fragment-key/v1";

/// Default modulus size for generated recipient keys.
pub const DEFAULT_RSA_BITS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncryptionMode {
    #[default]
    DirectAsymmetric,
    Envelope,
}

impl std::fmt::Display for EncryptionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncryptionMode::DirectAsymmetric => "direct_asymmetric",
            EncryptionMode::Envelope => "envelope",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecipientPublicKey(RsaPublicKey);

impl RecipientPublicKey {
    /// SubjectPublicKeyInfo DER.
    pub fn to_der(&self) -> Vec<u8> {
        self.0
            .to_public_key_der()
            .expect("RSA public key always encodes")
            .into_vec()
    }

    pub fn from_der(der: &[u8]) -> Result<Self, KeyError> {
        RsaPublicKey::from_public_key_der(der)
            .map(RecipientPublicKey)
            .map_err(|_| KeyError::BadPublicKey)
    }

    /// Largest encoded fragment accepted in direct mode.
    pub fn direct_plaintext_bound(&self) -> usize {
        // OAEP with SHA-256: k - 2 * hLen - 2.
        self.0.size().saturating_sub(2 * 32 + 2)
    }
}

#[derive(Clone)]
pub struct RecipientPrivateKey(RsaPrivateKey);

impl RecipientPrivateKey {
    /// PKCS#8 DER.
    pub fn to_der(&self) -> Zeroizing<Vec<u8>> {
        Zeroizing::new(
            self.0
                .to_pkcs8_der()
                .expect("RSA private key always encodes")
                .as_bytes()
                .to_vec(),
        )
    }

    pub fn from_der(der: &[u8]) -> Result<Self, KeyError> {
        RsaPrivateKey::from_pkcs8_der(der)
            .map(RecipientPrivateKey)
            .map_err(|_| KeyError::BadPrivateKey)
    }

    pub fn public_key(&self) -> RecipientPublicKey {
        RecipientPublicKey(self.0.to_public_key())
    }
}

impl std::fmt::Debug for RecipientPrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("RecipientPrivateKey(<redacted>)")
    }
}

/// A recipient's classical key pair.
#[derive(Clone, Debug)]
pub struct AsymmetricKeyPair {
    pub public_key: RecipientPublicKey,
    pub private_key: RecipientPrivateKey,
}

impl AsymmetricKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(bits: usize, rng: &mut R) -> Result<Self, KeyError> {
        let private = RsaPrivateKey::new(rng, bits).map_err(|_| KeyError::KeyGeneration)?;
        Ok(AsymmetricKeyPair {
            public_key: RecipientPublicKey(private.to_public_key()),
            private_key: RecipientPrivateKey(private),
        })
    }
}

/// One shuffled, encrypted fragment plus its (later) channel assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedFragment {
    pub session_tag: String,
    pub ciphertext: Vec<u8>,
    pub channel_id: Option<String>,
}

fn oaep(label: &str) -> Oaep {
    Oaep::new_with_label::<Sha256, _>(label)
}

fn fragment_cipher(data_key: &[u8], salt: &[u8]) -> Aes256Gcm {
    let hk = Hkdf::<Sha256>::new(Some(salt), data_key);
    let mut okm = Zeroizing::new([0u8; 32]);
    hk.expand(FRAGMENT_KDF_INFO, okm.as_mut())
        .expect("32 bytes is a valid HKDF output length");
    Aes256Gcm::new_from_slice(okm.as_ref()).expect("32-byte AES key")
}

/// Encrypts fragments for one recipient and session.
///
/// In envelope mode the data key is wrapped once at construction, so sealing
/// `n` fragments costs one asymmetric operation instead of `n`.
pub struct FragmentSealer {
    public: RecipientPublicKey,
    session_tag: String,
    mode: EncryptionMode,
    envelope: Option<(Zeroizing<[u8; DATA_KEY_LEN]>, Vec<u8>)>,
}

impl FragmentSealer {
    pub fn new<R: RngCore + CryptoRng>(
        public: &RecipientPublicKey,
        session_tag: &str,
        mode: EncryptionMode,
        rng: &mut R,
    ) -> Result<Self, KeyError> {
        let envelope = match mode {
            EncryptionMode::DirectAsymmetric => None,
            EncryptionMode::Envelope => {
                let mut data_key = Zeroizing::new([0u8; DATA_KEY_LEN]);
                rng.fill_bytes(data_key.as_mut());
                let wrapped = public
                    .0
                    .encrypt(rng, oaep(session_tag), data_key.as_ref())
                    .map_err(|_| KeyError::PlaintextTooLarge {
                        len: DATA_KEY_LEN,
                        max: public.direct_plaintext_bound(),
                    })?;
                Some((data_key, wrapped))
            }
        };
        Ok(FragmentSealer {
            public: public.clone(),
            session_tag: session_tag.to_owned(),
            mode,
            envelope,
        })
    }

    pub fn mode(&self) -> EncryptionMode {
        self.mode
    }

    pub fn seal<R: RngCore + CryptoRng>(
        &self,
        frag: &PlainFragment,
        rng: &mut R,
    ) -> Result<EncryptedFragment, KeyError> {
        let plain = frag.encode();
        let ciphertext = match &self.envelope {
            None => {
                let max = self.public.direct_plaintext_bound();
                if plain.len() > max {
                    return Err(KeyError::PlaintextTooLarge {
                        len: plain.len(),
                        max,
                    });
                }
                let ct = self
                    .public
                    .0
                    .encrypt(rng, oaep(&self.session_tag), &plain)
                    .map_err(|_| KeyError::PlaintextTooLarge {
                        len: plain.len(),
                        max,
                    })?;
                let mut out = Vec::with_capacity(1 + ct.len());
                out.push(TAG_DIRECT);
                out.extend_from_slice(&ct);
                out
            }
            Some((data_key, wrapped)) => {
                let mut salt = [0u8; SALT_LEN];
                let mut nonce = [0u8; NONCE_LEN];
                rng.fill_bytes(&mut salt);
                rng.fill_bytes(&mut nonce);
                let mut out = Vec::with_capacity(
                    3 + wrapped.len() + SALT_LEN + NONCE_LEN + plain.len() + 16,
                );
                out.push(TAG_ENVELOPE);
                out.extend_from_slice(&(wrapped.len() as u16).to_be_bytes());
                out.extend_from_slice(wrapped);
                out.extend_from_slice(&salt);
                let header_len = out.len();
                out.extend_from_slice(&nonce);
                let aad = envelope_aad(&self.session_tag, &out[..header_len]);
                let sealed = fragment_cipher(data_key.as_ref(), &salt)
                    .encrypt(
                        Nonce::from_slice(&nonce),
                        Payload {
                            msg: &plain,
                            aad: &aad,
                        },
                    )
                    .map_err(|_| KeyError::Decryption)?;
                out.extend_from_slice(&sealed);
                out
            }
        };
        Ok(EncryptedFragment {
            session_tag: self.session_tag.clone(),
            ciphertext,
            channel_id: None,
        })
    }
}

fn envelope_aad(session_tag: &str, header: &[u8]) -> Vec<u8> {
    let mut aad = Vec::with_capacity(session_tag.len() + 1 + header.len());
    aad.extend_from_slice(session_tag.as_bytes());
    aad.push(0);
    aad.extend_from_slice(header);
    aad
}

/// Decrypts fragments with a recipient private key, caching unwrapped
/// envelope data keys so each wrapped key costs one asymmetric operation.
pub struct FragmentOpener {
    private: RecipientPrivateKey,
    data_keys: HashMap<Vec<u8>, Zeroizing<[u8; DATA_KEY_LEN]>>,
}

impl FragmentOpener {
    pub fn new(private: RecipientPrivateKey) -> Self {
        FragmentOpener {
            private,
            data_keys: HashMap::new(),
        }
    }

    pub fn open(&mut self, ef: &EncryptedFragment) -> Result<PlainFragment, KeyError> {
        let (&tag, body) = ef.ciphertext.split_first().ok_or(KeyError::Decryption)?;
        match tag {
            TAG_DIRECT => {
                let plain = Zeroizing::new(
                    self.private
                        .0
                        .decrypt(oaep(&ef.session_tag), body)
                        .map_err(|_| KeyError::Decryption)?,
                );
                PlainFragment::decode(&plain).map_err(|_| KeyError::Decryption)
            }
            TAG_ENVELOPE => self.open_envelope(&ef.session_tag, &ef.ciphertext),
            _ => Err(KeyError::Decryption),
        }
    }

    fn open_envelope(&mut self, session_tag: &str, ct: &[u8]) -> Result<PlainFragment, KeyError> {
        if ct.len() < 3 {
            return Err(KeyError::Decryption);
        }
        let wrapped_len = u16::from_be_bytes([ct[1], ct[2]]) as usize;
        let header_len = 3 + wrapped_len + SALT_LEN;
        if ct.len() < header_len + NONCE_LEN + 16 {
            return Err(KeyError::Decryption);
        }
        let wrapped = &ct[3..3 + wrapped_len];
        let salt = &ct[3 + wrapped_len..header_len];
        let nonce = &ct[header_len..header_len + NONCE_LEN];
        let sealed = &ct[header_len + NONCE_LEN..];

        let mut cache_key = Vec::with_capacity(session_tag.len() + 1 + wrapped_len);
        cache_key.extend_from_slice(session_tag.as_bytes());
        cache_key.push(0);
        cache_key.extend_from_slice(wrapped);
        if !self.data_keys.contains_key(&cache_key) {
            let unwrapped = Zeroizing::new(
                self.private
                    .0
                    .decrypt(oaep(session_tag), wrapped)
                    .map_err(|_| KeyError::Decryption)?,
            );
            let data_key: [u8; DATA_KEY_LEN] = unwrapped
                .as_slice()
                .try_into()
                .map_err(|_| KeyError::Decryption)?;
            self.data_keys
                .insert(cache_key.clone(), Zeroizing::new(data_key));
        }
        let data_key = &self.data_keys[&cache_key];
        let aad = envelope_aad(session_tag, &ct[..header_len]);
        let plain = Zeroizing::new(
            fragment_cipher(data_key.as_ref(), salt)
                .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad: &aad })
                .map_err(|_| KeyError::Decryption)?,
        );
        PlainFragment::decode(&plain).map_err(|_| KeyError::Decryption)
    }
}

/// Single-fragment convenience over [`FragmentSealer`].
pub fn encrypt_fragment<R: RngCore + CryptoRng>(
    frag: &PlainFragment,
    session_tag: &str,
    recipient: &RecipientPublicKey,
    mode: EncryptionMode,
    rng: &mut R,
) -> Result<EncryptedFragment, KeyError> {
    FragmentSealer::new(recipient, session_tag, mode, rng)?.seal(frag, rng)
}

/// Single-fragment convenience over [`FragmentOpener`].
pub fn decrypt_fragment(
    ef: &EncryptedFragment,
    private: &RecipientPrivateKey,
) -> Result<PlainFragment, KeyError> {
    FragmentOpener::new(private.clone()).open(ef)
}
