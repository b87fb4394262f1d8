//! Multi-path session-key establishment.

pub mod analyzer;
pub mod bench;
pub mod bootstrap;
pub mod channels;
pub mod client;
pub mod keycore;
pub mod net;
pub mod proxy;
pub mod qkms;
pub mod testbed;
pub mod wire;

#[cfg(test)]
pub(crate) mod testkeys {
    use std::sync::OnceLock;

    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use crate::keycore::AsymmetricKeyPair;

    static PAIRS: OnceLock<Vec<AsymmetricKeyPair>> = OnceLock::new();

    /// Deterministic 2048-bit recipient keys shared across unit tests.
    pub fn pair(i: usize) -> AsymmetricKeyPair {
        PAIRS
            .get_or_init(|| {
                (0..3u64)
                    .map(|s| {
                        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed + s);
                        AsymmetricKeyPair::generate(2048, &mut rng).unwrap()
                    })
                    .collect()
            })[i]
            .clone()
    }
}
