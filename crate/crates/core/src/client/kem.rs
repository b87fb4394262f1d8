//! Pluggable key-encapsulation providers for the post-quantum wire tunnel.

use std::fmt;

use ml_kem::kem::{Decapsulate, Encapsulate};
use ml_kem::{EncodedSizeUser, KemCore, MlKem768};
use rand_core::CryptoRngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

pub const STUB_KEM: &str = "stub";
pub const ML_KEM_768: &str = "ml-kem-768";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KemError {
    #[error("unknown KEM provider {0:?}")]
    UnknownProvider(String),
    #[error("malformed encapsulation key")]
    BadPublicKey,
    #[error("malformed encapsulation")]
    BadEncapsulation,
    #[error("encapsulation failed")]
    Encapsulate,
    #[error("decapsulation failed")]
    Decapsulate,
}

/// A 32-byte KEM shared secret.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret(Zeroizing<[u8; 32]>);

impl SharedSecret {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedSecret(<redacted>)")
    }
}

/// One side's KEM capability. The terminating side publishes
/// [`public_key`](KemProvider::public_key) and decapsulates; the initiating
/// side encapsulates to the peer's published key.
pub trait KemProvider: Send + Sync {
    fn name(&self) -> &str;

    fn public_key(&self) -> Vec<u8>;

    fn encapsulate(
        &self,
        peer_public: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(Vec<u8>, SharedSecret), KemError>;

    fn decapsulate(&self, encapsulation: &[u8]) -> Result<SharedSecret, KemError>;
}

/// Deterministic test provider: both peers hold the same seed and derive the
/// secret as `SHA-256(label || seed || encapsulation)`. Offers no security.
pub struct StubKem {
    seed: [u8; 32],
}

impl StubKem {
    pub fn new(seed: [u8; 32]) -> Self {
        StubKem { seed }
    }

    pub fn from_u64(seed: u64) -> Self {
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&seed.to_be_bytes());
        StubKem { seed: s }
    }

    fn derive(&self, encapsulation: &[u8]) -> SharedSecret {
        let digest = Sha256::new()
            .chain_update(b"keyweave/stub-kem")
            .chain_update(self.seed)
            .chain_update(encapsulation)
            .finalize();
        SharedSecret(Zeroizing::new(digest.into()))
    }
}

impl KemProvider for StubKem {
    fn name(&self) -> &str {
        STUB_KEM
    }

    fn public_key(&self) -> Vec<u8> {
        b"stub".to_vec()
    }

    fn encapsulate(
        &self,
        _peer_public: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(Vec<u8>, SharedSecret), KemError> {
        let mut ct = vec![0u8; 32];
        rng.fill_bytes(&mut ct);
        let ss = self.derive(&ct);
        Ok((ct, ss))
    }

    fn decapsulate(&self, encapsulation: &[u8]) -> Result<SharedSecret, KemError> {
        if encapsulation.len() != 32 {
            return Err(KemError::BadEncapsulation);
        }
        Ok(self.derive(encapsulation))
    }
}

/// ML-KEM-768 (FIPS 203).
pub struct MlKemProvider {
    decapsulation: <MlKem768 as KemCore>::DecapsulationKey,
    encapsulation: <MlKem768 as KemCore>::EncapsulationKey,
}

impl MlKemProvider {
    pub fn generate(rng: &mut dyn CryptoRngCore) -> Self {
        let (decapsulation, encapsulation) = MlKem768::generate(&mut &mut *rng);
        MlKemProvider {
            decapsulation,
            encapsulation,
        }
    }
}

impl KemProvider for MlKemProvider {
    fn name(&self) -> &str {
        ML_KEM_768
    }

    fn public_key(&self) -> Vec<u8> {
        self.encapsulation.as_bytes().to_vec()
    }

    fn encapsulate(
        &self,
        peer_public: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(Vec<u8>, SharedSecret), KemError> {
        let encoded = ml_kem::Encoded::<<MlKem768 as KemCore>::EncapsulationKey>::try_from(
            peer_public,
        )
        .map_err(|_| KemError::BadPublicKey)?;
        let ek = <MlKem768 as KemCore>::EncapsulationKey::from_bytes(&encoded);
        let (ct, ss) = ek
            .encapsulate(&mut &mut *rng)
            .map_err(|_| KemError::Encapsulate)?;
        let mut secret = Zeroizing::new([0u8; 32]);
        secret.copy_from_slice(ss.as_slice());
        Ok((ct.to_vec(), SharedSecret(secret)))
    }

    fn decapsulate(&self, encapsulation: &[u8]) -> Result<SharedSecret, KemError> {
        let ct = ml_kem::Ciphertext::<MlKem768>::try_from(encapsulation)
            .map_err(|_| KemError::BadEncapsulation)?;
        let ss = self
            .decapsulation
            .decapsulate(&ct)
            .map_err(|_| KemError::Decapsulate)?;
        let mut secret = Zeroizing::new([0u8; 32]);
        secret.copy_from_slice(ss.as_slice());
        Ok(SharedSecret(secret))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn stub_peers_agree_when_seeded_equally() {
        let client = StubKem::from_u64(9);
        let server = StubKem::from_u64(9);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (ct, ss) = client.encapsulate(&server.public_key(), &mut rng).unwrap();
        assert_eq!(server.decapsulate(&ct).unwrap(), ss);
        let other = StubKem::from_u64(10);
        assert_ne!(other.decapsulate(&ct).unwrap(), ss);
        assert_eq!(server.decapsulate(&ct[1..]), Err(KemError::BadEncapsulation));
    }

    #[test]
    fn ml_kem_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let server = MlKemProvider::generate(&mut rng);
        let pk = server.public_key();
        assert_eq!(pk.len(), 1184);
        let initiator = MlKemProvider::generate(&mut rng);
        let (ct, ss) = initiator.encapsulate(&pk, &mut rng).unwrap();
        assert_eq!(ct.len(), 1088);
        assert_eq!(server.decapsulate(&ct).unwrap(), ss);
        assert_eq!(
            initiator.encapsulate(&pk[..100], &mut rng).unwrap_err(),
            KemError::BadPublicKey
        );
        assert!(server.decapsulate(&ct[..10]).is_err());
    }
}
