//! B2B gateway: envelope wrapping for partner traffic, and the partner
//! platform that sits on the far side of it.

use serde::{Deserialize, Serialize};

use super::action::{Action, DataMap, Verb};
use super::platform::{translate_for_profile, ActionFailure, PlatformProfile, PlatformState, SimPlatform, TargetAdapter};
use super::FulfillmentError;
use crate::order::SubOrder;

pub use crate::envelope::{b2b_wrap, B2BEnvelope, SIGNATURE_PLACEHOLDER};

/// Parses an envelope document and returns it whole.
pub fn b2b_open(doc: &str) -> Result<B2BEnvelope, FulfillmentError> {
    crate::envelope::b2b_open(doc).map_err(|e| FulfillmentError::BadEnvelope(e.0))
}

pub fn b2b_unwrap(doc: &str) -> Result<String, FulfillmentError> {
    b2b_open(doc).map(|e| e.body)
}

#[derive(Debug, Serialize, Deserialize)]
enum PartnerReply {
    Ok(DataMap),
    Err(ActionFailure),
}

/// The partner's own platform. Only accepts enveloped requests.
#[derive(Debug, Clone)]
pub struct PartnerPlatform {
    partner_id: String,
    platform: SimPlatform,
    replies: u64,
}

impl PartnerPlatform {
    pub fn new(partner_id: &str, target_id: &str, seed: u64) -> Self {
        Self {
            partner_id: partner_id.to_string(),
            platform: SimPlatform::new(target_id, PlatformProfile::Voice, seed),
            replies: 0,
        }
    }

    /// Handles one enveloped action and returns an enveloped reply.
    pub fn handle(&mut self, envelope_doc: &str) -> Result<String, FulfillmentError> {
        let env = b2b_open(envelope_doc)?;
        if env.partner_id != self.partner_id {
            return Err(FulfillmentError::BadEnvelope(format!(
                "envelope addressed to `{}`, this is `{}`",
                env.partner_id, self.partner_id
            )));
        }
        let action: Action =
            serde_json::from_str(&env.body).map_err(|e| FulfillmentError::BadEnvelope(e.to_string()))?;
        let reply = match self.platform.apply(&action) {
            Ok(out) => PartnerReply::Ok(out),
            Err(f) => PartnerReply::Err(f),
        };
        self.replies += 1;
        let body = serde_json::to_string(&reply).expect("reply serializes");
        Ok(b2b_wrap(&self.partner_id, &format!("{}-reply", env.message_id), env.ts, &body).to_document())
    }
}

/// Resource adapter for a partner-operated target: every call crosses the
/// gateway as an envelope.
#[derive(Debug, Clone)]
pub struct PartnerGateway {
    partner: PartnerPlatform,
    sent: u64,
}

impl PartnerGateway {
    pub fn new(target_id: &str, partner_id: &str, seed: u64) -> Self {
        Self {
            partner: PartnerPlatform::new(partner_id, target_id, seed),
            sent: 0,
        }
    }

    pub fn partner_id(&self) -> &str {
        &self.partner.partner_id
    }
}

impl TargetAdapter for PartnerGateway {
    fn target_id(&self) -> &str {
        self.partner.platform.target_id()
    }

    fn supported_verbs(&self) -> Vec<Verb> {
        PlatformProfile::Voice.verbs()
    }

    fn translate(&self, suborder: &SubOrder, bindings: &DataMap) -> Result<Vec<Action>, FulfillmentError> {
        translate_for_profile(PlatformProfile::Voice, suborder, bindings)
    }

    fn apply(&mut self, action: &Action) -> Result<DataMap, ActionFailure> {
        self.sent += 1;
        let body = serde_json::to_string(action).expect("action serializes");
        let env = b2b_wrap(self.partner_id(), &format!("{}-{:06}", self.partner_id(), self.sent), self.sent, &body);
        let gateway_err = |e: FulfillmentError| ActionFailure {
            code: "B2B_GATEWAY".into(),
            message: e.to_string(),
        };
        let reply_doc = self.partner.handle(&env.to_document()).map_err(gateway_err)?;
        let reply_body = b2b_unwrap(&reply_doc).map_err(gateway_err)?;
        match serde_json::from_str::<PartnerReply>(&reply_body) {
            Ok(PartnerReply::Ok(out)) => Ok(out),
            Ok(PartnerReply::Err(f)) => Err(f),
            Err(e) => Err(gateway_err(FulfillmentError::BadEnvelope(e.to_string()))),
        }
    }

    fn state(&self) -> &PlatformState {
        self.partner.platform.state()
    }

    fn set_state(&mut self, state: PlatformState) {
        self.partner.platform.set_state(state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fulfillment::platform::{CUSTOMER_ADDRESS_KEY, CUSTOMER_ID_KEY};
    use crate::order::{Item, SubOrderKind, SubOrderState};
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    proptest! {
        #[test]
        fn unwrap_inverts_wrap(partner in "[a-z]{1,8}", id in "[a-z0-9-]{1,12}", ts in any::<u64>(), body in any::<String>()) {
            let env = b2b_wrap(&partner, &id, ts, &body);
            prop_assert_eq!(b2b_unwrap(&env.to_document()).unwrap(), body);
        }
    }

    #[test]
    fn garbage_is_a_bad_envelope() {
        for doc in ["", "garbage", "{\"partner_id\": 3}", "{}"] {
            assert!(matches!(b2b_unwrap(doc), Err(FulfillmentError::BadEnvelope(_))), "{doc}");
        }
        let mut env = b2b_wrap("p", "m", 1, "x");
        env.signature = "forged".into();
        assert!(b2b_unwrap(&env.to_document()).is_err());
    }

    #[test]
    fn voice_suborder_document_survives_the_gateway() {
        let so = SubOrder {
            suborder_id: "O1-L1-partner-voice".into(),
            order_id: "O1".into(),
            line_id: Some("L1".into()),
            target_id: "partner-voice".into(),
            kind: SubOrderKind::Service,
            items: vec![Item {
                line_id: "L1".into(),
                component_code: "voice".into(),
                service_code: "TELEPHONY".into(),
                params: BTreeMap::new(),
            }],
            requires_data: BTreeSet::new(),
            provides_data: BTreeSet::new(),
            depends_on: BTreeSet::new(),
            state: SubOrderState::Pending,
        };
        let doc = serde_json::to_string(&so).unwrap();
        let env = b2b_wrap("acme", "m-1", 5, &doc);
        assert_eq!(b2b_unwrap(&env.to_document()).unwrap().as_bytes(), doc.as_bytes());
    }

    #[test]
    fn partner_rejects_raw_traffic() {
        let mut p = PartnerPlatform::new("acme", "partner-voice", 1);
        let raw = serde_json::to_string(&Action::new("O", "S", 0, Verb::CreateSubscription, DataMap::new())).unwrap();
        assert!(matches!(p.handle(&raw), Err(FulfillmentError::BadEnvelope(_))));
        let wrong = b2b_wrap("other", "m", 0, &raw).to_document();
        assert!(p.handle(&wrong).is_err());
    }

    #[test]
    fn gateway_fulfills_through_envelopes() {
        let mut gw = PartnerGateway::new("partner-voice", "acme", 1);
        let so = SubOrder {
            suborder_id: "O1-L1-partner-voice".into(),
            order_id: "O1".into(),
            line_id: Some("L1".into()),
            target_id: "partner-voice".into(),
            kind: SubOrderKind::Service,
            items: vec![Item {
                line_id: "L1".into(),
                component_code: "voice".into(),
                service_code: "TELEPHONY".into(),
                params: BTreeMap::new(),
            }],
            requires_data: BTreeSet::new(),
            provides_data: BTreeSet::new(),
            depends_on: BTreeSet::new(),
            state: SubOrderState::Pending,
        };
        let bindings: DataMap = [(CUSTOMER_ID_KEY, "C1"), (CUSTOMER_ADDRESS_KEY, "x")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let actions = gw.translate(&so, &bindings).unwrap();
        for a in &actions {
            gw.apply(a).unwrap();
        }
        assert!(gw.state().records.contains_key("sub/C1/L1/TELEPHONY"));
        let err = gw.apply(&actions[0]).unwrap_err();
        assert_eq!(err.code, "DUPLICATE_RECORD");
    }
}
