//! Session-key generation, `(n, n)` fragmentation, shuffling, and exact
//! reconstruction.
//!
//! A [`SessionKey`] is split into contiguous byte chunks ([`PlainFragment`]).
//! Each fragment carries its own `index` and `total`, so a receiver can undo
//! any shuffle without out-of-band information. Reconstruction requires every
//! fragment; there is no threshold.
//!
//! Fragment encryption lives in [`crypto`].

pub mod crypto;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop, Zeroizing};

pub use crypto::{
    decrypt_fragment, encrypt_fragment, AsymmetricKeyPair, EncryptedFragment, EncryptionMode,
    FragmentOpener, FragmentSealer, RecipientPrivateKey, RecipientPublicKey,
};

/// Key lengths accepted by [`generate_key`].
pub const DEFAULT_KEY_BITS: [u32; 3] = [128, 192, 256];

/// Size of the fixed fragment header: index u16, total u16, payload length u32.
pub const FRAGMENT_HEADER_LEN: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("unsupported key length: {bits} bits (allowed: {allowed:?})")]
    UnsupportedBits { bits: u32, allowed: Vec<u32> },
    #[error("invalid split count {n} for a {len}-byte key")]
    InvalidSplit { n: usize, len: usize },
    #[error("empty fragment set")]
    EmptyFragmentSet,
    #[error("incomplete fragment set: missing indices {missing:?}")]
    Incomplete { missing: Vec<u16> },
    #[error("conflicting payloads for fragment index {index}")]
    Conflict { index: u16 },
    #[error("fragments disagree on the total count ({first} vs {other})")]
    MixedTotals { first: u16, other: u16 },
    #[error("fragment index {index} out of range for total {total}")]
    IndexOutOfRange { index: u16, total: u16 },
    #[error("malformed fragment encoding: {0}")]
    Malformed(&'static str),
    #[error("fragment plaintext of {len} bytes exceeds the direct-mode bound of {max} bytes; use envelope mode")]
    PlaintextTooLarge { len: usize, max: usize },
    #[error("public key encoding rejected")]
    BadPublicKey,
    #[error("private key encoding rejected")]
    BadPrivateKey,
    #[error("key pair generation failed")]
    KeyGeneration,
    #[error("fragment decryption failed")]
    Decryption,
}

/// The symmetric secret being established.
///
/// There is no `Default` and no public constructor from caller bytes outside
/// the crate; keys come from [`generate_key`] or from [`reconstruct_key`].
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    bits: u32,
    material: Zeroizing<Vec<u8>>,
}

impl SessionKey {
    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn material(&self) -> &[u8] {
        &self.material
    }

    pub fn len(&self) -> usize {
        self.material.len()
    }

    pub fn is_empty(&self) -> bool {
        self.material.is_empty()
    }

    fn from_material(material: Vec<u8>) -> Self {
        SessionKey {
            bits: (material.len() * 8) as u32,
            material: Zeroizing::new(material),
        }
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("bits", &self.bits)
            .field("material", &"<redacted>")
            .finish()
    }
}

/// Samples a uniformly random key of `bits` bits from `rng`, restricted to
/// [`DEFAULT_KEY_BITS`].
pub fn generate_key<R: RngCore + CryptoRng + ?Sized>(
    bits: u32,
    rng: &mut R,
) -> Result<SessionKey, KeyError> {
    generate_key_with(bits, &DEFAULT_KEY_BITS, rng)
}

/// Like [`generate_key`] with a caller-supplied whitelist of bit lengths.
pub fn generate_key_with<R: RngCore + CryptoRng + ?Sized>(
    bits: u32,
    allowed: &[u32],
    rng: &mut R,
) -> Result<SessionKey, KeyError> {
    if bits == 0 || !bits.is_multiple_of(8) || !allowed.contains(&bits) {
        return Err(KeyError::UnsupportedBits {
            bits,
            allowed: allowed.to_vec(),
        });
    }
    let mut material = vec![0u8; (bits / 8) as usize];
    rng.fill_bytes(&mut material);
    Ok(SessionKey {
        bits,
        material: Zeroizing::new(material),
    })
}

/// One contiguous piece of a session key.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct PlainFragment {
    index: u16,
    total: u16,
    payload: Vec<u8>,
}

impl PlainFragment {
    pub fn new(index: u16, total: u16, payload: Vec<u8>) -> Result<Self, KeyError> {
        if total == 0 || index >= total {
            return Err(KeyError::IndexOutOfRange { index, total });
        }
        Ok(PlainFragment {
            index,
            total,
            payload,
        })
    }

    pub fn index(&self) -> u16 {
        self.index
    }

    pub fn total(&self) -> u16 {
        self.total
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Big-endian `index u16 | total u16 | payload_len u32 | payload`.
    pub fn encode(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Vec::with_capacity(FRAGMENT_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.total.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Zeroizing::new(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, KeyError> {
        if bytes.len() < FRAGMENT_HEADER_LEN {
            return Err(KeyError::Malformed("short header"));
        }
        let index = u16::from_be_bytes([bytes[0], bytes[1]]);
        let total = u16::from_be_bytes([bytes[2], bytes[3]]);
        let len = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let payload = &bytes[FRAGMENT_HEADER_LEN..];
        if payload.len() != len {
            return Err(KeyError::Malformed("payload length mismatch"));
        }
        PlainFragment::new(index, total, payload.to_vec())
    }
}

impl fmt::Debug for PlainFragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlainFragment")
            .field("index", &self.index)
            .field("total", &self.total)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

/// Splits `key` into `n` contiguous chunks whose sizes differ by at most one
/// byte; the first `len % n` chunks take the extra byte.
pub fn fragment_key(key: &SessionKey, n: usize) -> Result<Vec<PlainFragment>, KeyError> {
    let len = key.len();
    if n == 0 || n > len || n > u16::MAX as usize {
        return Err(KeyError::InvalidSplit { n, len });
    }
    let base = len / n;
    let extra = len % n;
    let mut offset = 0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let size = base + usize::from(i < extra);
        out.push(PlainFragment {
            index: i as u16,
            total: n as u16,
            payload: key.material()[offset..offset + size].to_vec(),
        });
        offset += size;
    }
    debug_assert_eq!(offset, len);
    Ok(out)
}

/// Fisher–Yates permutation of the fragment order.
pub fn shuffle_fragments<R: Rng + ?Sized>(
    mut frags: Vec<PlainFragment>,
    rng: &mut R,
) -> Vec<PlainFragment> {
    frags.shuffle(rng);
    frags
}

/// Reassembles a key from a complete, unordered fragment set.
///
/// Exact duplicates are tolerated; a repeated index with a different payload
/// is a conflict.
pub fn reconstruct_key<I>(frags: I) -> Result<SessionKey, KeyError>
where
    I: IntoIterator<Item = PlainFragment>,
{
    let mut by_index: BTreeMap<u16, PlainFragment> = BTreeMap::new();
    let mut total: Option<u16> = None;
    for frag in frags {
        match total {
            None => total = Some(frag.total),
            Some(t) if t != frag.total => {
                return Err(KeyError::MixedTotals {
                    first: t,
                    other: frag.total,
                })
            }
            Some(_) => {}
        }
        if let Some(existing) = by_index.get(&frag.index) {
            if existing.payload != frag.payload {
                return Err(KeyError::Conflict { index: frag.index });
            }
            continue;
        }
        by_index.insert(frag.index, frag);
    }
    let total = total.ok_or(KeyError::EmptyFragmentSet)?;
    let missing: Vec<u16> = (0..total).filter(|i| !by_index.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(KeyError::Incomplete { missing });
    }
    let len = by_index.values().map(|f| f.payload.len()).sum();
    let mut material = Vec::with_capacity(len);
    for frag in by_index.values() {
        material.extend_from_slice(&frag.payload);
    }
    Ok(SessionKey::from_material(material))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn key_lengths() {
        let k = generate_key(256, &mut rng(1)).unwrap();
        assert_eq!(k.len(), 32);
        assert_eq!(k.bits(), 256);
        assert!(matches!(
            generate_key(100, &mut rng(1)),
            Err(KeyError::UnsupportedBits { .. })
        ));
        assert!(generate_key(512, &mut rng(1)).is_err());
        assert!(generate_key_with(512, &[512], &mut rng(1)).is_ok());
        assert!(generate_key_with(12, &[12], &mut rng(1)).is_err());
    }

    #[test]
    fn key_generation_is_seed_deterministic() {
        let a = generate_key(128, &mut rng(7)).unwrap();
        let b = generate_key(128, &mut rng(7)).unwrap();
        let c = generate_key(128, &mut rng(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn debug_output_redacts_material() {
        let k = generate_key(128, &mut rng(3)).unwrap();
        let s = format!("{k:?}");
        assert!(s.contains("redacted"));
    }

    #[test]
    fn per_bit_mean_is_balanced() {
        let mut r = rng(11);
        let trials = 100_000;
        let mut ones = [0u32; 128];
        for _ in 0..trials {
            let k = generate_key(128, &mut r).unwrap();
            for (bit, count) in ones.iter_mut().enumerate() {
                *count += u32::from((k.material()[bit / 8] >> (bit % 8)) & 1);
            }
        }
        for count in ones {
            let mean = f64::from(count) / f64::from(trials);
            assert!((0.49..=0.51).contains(&mean), "bit mean {mean}");
        }
    }

    #[test]
    fn even_split() {
        let k = generate_key(256, &mut rng(2)).unwrap();
        let frags = fragment_key(&k, 8).unwrap();
        assert_eq!(frags.len(), 8);
        assert!(frags.iter().all(|f| f.payload().len() == 4));
        assert!(frags.iter().enumerate().all(|(i, f)| f.index() as usize == i));
    }

    #[test]
    fn single_split_is_identity() {
        let k = generate_key(192, &mut rng(2)).unwrap();
        let frags = fragment_key(&k, 1).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].payload(), k.material());
    }

    #[test]
    fn uneven_split_sizes() {
        let key = SessionKey::from_material((0u8..10).collect());
        let sizes: Vec<usize> = fragment_key(&key, 4)
            .unwrap()
            .iter()
            .map(|f| f.payload().len())
            .collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn split_bounds() {
        let k = generate_key(128, &mut rng(2)).unwrap();
        assert!(fragment_key(&k, 16).is_ok());
        assert_eq!(
            fragment_key(&k, 17),
            Err(KeyError::InvalidSplit { n: 17, len: 16 })
        );
        assert!(fragment_key(&k, 0).is_err());
    }

    #[test]
    fn shuffle_single_and_determinism() {
        let k = generate_key(256, &mut rng(5)).unwrap();
        let one = fragment_key(&k, 1).unwrap();
        assert_eq!(shuffle_fragments(one.clone(), &mut rng(1)), one);

        let frags = fragment_key(&k, 8).unwrap();
        let a = shuffle_fragments(frags.clone(), &mut rng(42));
        let b = shuffle_fragments(frags.clone(), &mut rng(42));
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_by_key(|f| f.index());
        assert_eq!(sorted, frags);
    }

    #[test]
    fn shuffle_is_uniform_over_permutations() {
        // n = 4: 24 permutations, each expected 1/24 of the draws.
        let key = SessionKey::from_material(vec![0, 1, 2, 3]);
        let frags = fragment_key(&key, 4).unwrap();
        let mut counts = std::collections::HashMap::new();
        let mut r = rng(99);
        let trials = 100_000u32;
        for _ in 0..trials {
            let order: Vec<u16> = shuffle_fragments(frags.clone(), &mut r)
                .iter()
                .map(|f| f.index())
                .collect();
            *counts.entry(order).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 24);
        let p = 1.0 / 24.0;
        let expected = f64::from(trials) * p;
        let sigma = (f64::from(trials) * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in counts.values() {
            assert!((f64::from(c) - expected).abs() < 3.0 * sigma + 1.0, "count {c}");
            chi2 += (f64::from(c) - expected).powi(2) / expected;
        }
        // 23 degrees of freedom, 0.999 quantile is about 49.7.
        assert!(chi2 < 49.7, "chi2 {chi2}");
    }

    #[test]
    fn fragment_codec() {
        let f = PlainFragment::new(3, 9, vec![0xaa, 0xbb]).unwrap();
        let bytes = f.encode();
        assert_eq!(&bytes[..], &[0, 3, 0, 9, 0, 0, 0, 2, 0xaa, 0xbb]);
        assert_eq!(PlainFragment::decode(&bytes).unwrap(), f);
        assert!(PlainFragment::decode(&bytes[..9]).is_err());
        assert!(PlainFragment::decode(&[0, 9, 0, 9, 0, 0, 0, 0]).is_err());
        let empty = PlainFragment::new(0, 1, vec![]).unwrap();
        assert_eq!(PlainFragment::decode(&empty.encode()).unwrap(), empty);
    }

    #[test]
    fn reconstruct_inverts_fragmentation_for_all_split_counts() {
        let k = generate_key(128, &mut rng(21)).unwrap();
        for n in 1..=16 {
            let frags = shuffle_fragments(fragment_key(&k, n).unwrap(), &mut rng(n as u64));
            assert_eq!(reconstruct_key(frags).unwrap(), k);
        }
    }

    #[test]
    fn reconstruct_rejects_strict_subsets() {
        let k = generate_key(256, &mut rng(4)).unwrap();
        let frags = fragment_key(&k, 6).unwrap();
        for skip in 0..6 {
            let subset: Vec<_> = frags
                .iter()
                .filter(|f| f.index() != skip)
                .cloned()
                .collect();
            assert_eq!(
                reconstruct_key(subset),
                Err(KeyError::Incomplete {
                    missing: vec![skip]
                })
            );
        }
        assert_eq!(
            reconstruct_key(Vec::new()),
            Err(KeyError::EmptyFragmentSet)
        );
    }

    #[test]
    fn reconstruct_conflicts_and_mixed_totals() {
        let a = PlainFragment::new(0, 2, vec![1]).unwrap();
        let b = PlainFragment::new(1, 2, vec![2]).unwrap();
        let b2 = PlainFragment::new(1, 2, vec![3]).unwrap();
        let c = PlainFragment::new(0, 3, vec![1]).unwrap();
        assert_eq!(
            reconstruct_key(vec![a.clone(), b.clone(), b.clone()])
                .unwrap()
                .material(),
            &[1, 2]
        );
        assert_eq!(
            reconstruct_key(vec![a.clone(), b, b2]),
            Err(KeyError::Conflict { index: 1 })
        );
        assert!(matches!(
            reconstruct_key(vec![a, c]),
            Err(KeyError::MixedTotals { .. })
        ));
    }
}
