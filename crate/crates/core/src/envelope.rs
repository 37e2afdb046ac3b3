//! B2B envelope: the wrapper partner traffic travels in, both for partner
//! orders arriving at capture and for actions sent to partner platforms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad envelope: {0}")]
pub struct BadEnvelope(pub String);

/// Fixed value of the `signature` field. Real signing is out of scope.
pub const SIGNATURE_PLACEHOLDER: &str = "UNSIGNED";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct B2BEnvelope {
    pub partner_id: String,
    pub message_id: String,
    pub ts: u64,
    pub signature: String,
    pub body: String,
}

impl B2BEnvelope {
    pub fn to_document(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}

pub fn b2b_wrap(partner_id: &str, message_id: &str, ts: u64, body: &str) -> B2BEnvelope {
    B2BEnvelope {
        partner_id: partner_id.to_string(),
        message_id: message_id.to_string(),
        ts,
        signature: SIGNATURE_PLACEHOLDER.to_string(),
        body: body.to_string(),
    }
}

/// Parses an envelope document and returns it whole.
pub fn b2b_open(doc: &str) -> Result<B2BEnvelope, BadEnvelope> {
    let env: B2BEnvelope =
        serde_json::from_str(doc).map_err(|e| BadEnvelope(e.to_string()))?;
    if env.partner_id.is_empty() || env.message_id.is_empty() {
        return Err(BadEnvelope("missing partner_id or message_id".into()));
    }
    if env.signature != SIGNATURE_PLACEHOLDER {
        return Err(BadEnvelope(format!("unexpected signature `{}`", env.signature)));
    }
    Ok(env)
}

pub fn b2b_unwrap(doc: &str) -> Result<String, BadEnvelope> {
    b2b_open(doc).map(|e| e.body)
}

