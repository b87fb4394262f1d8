//! JSON wire messages shared across services.

use serde::{Deserialize, Serialize};

use crate::keycore::EncryptedFragment;

/// Serde adapter encoding byte strings as standard base64.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD
            .decode(text.as_bytes())
            .map_err(serde::de::Error::custom)
    }

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(text.as_bytes())
    }
}

/// The unit carried by channels and relayed by proxies:
/// `{"session_tag": "...", "ciphertext": "<base64>"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentMessage {
    pub session_tag: String,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
}

impl FragmentMessage {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("fragment message serializes")
    }
}

impl From<&EncryptedFragment> for FragmentMessage {
    fn from(ef: &EncryptedFragment) -> Self {
        FragmentMessage {
            session_tag: ef.session_tag.clone(),
            ciphertext: ef.ciphertext.clone(),
        }
    }
}

impl From<FragmentMessage> for EncryptedFragment {
    fn from(m: FragmentMessage) -> Self {
        EncryptedFragment {
            session_tag: m.session_tag,
            ciphertext: m.ciphertext,
            channel_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Waiting,
    Dispatched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub tagname: String,
    pub status: AckStatus,
}
