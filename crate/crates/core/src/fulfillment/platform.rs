//! Simulated legacy platforms and the resource-adapter contract in front of
//! them.
//!
//! Every platform keeps its business state as a flat map of records. A verb
//! either creates a record that must not exist yet, removes one that must
//! exist, or (for `COMMIT_ADDRESS` and `COMPLETE_TASK`) overwrites in place.
//! Only the overwriting verbs lack an inverse.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::action::{Action, DataMap, Verb, OUTPUTS_PARAM};
use super::FulfillmentError;
use crate::order::{SubOrder, SubOrderKind};

pub const CUSTOMER_ID_KEY: &str = "customer.id";
pub const CUSTOMER_ADDRESS_KEY: &str = "customer.address";
pub const CPE_MAC_KEY: &str = "cpe.mac";
pub const CRM_ADDRESS_KEY: &str = "crm.address";
pub const VISIT_ID_KEY: &str = "visit.id";

/// Data key a verb produces by itself, without an `outputs` request.
pub fn native_output(verb: Verb) -> Option<&'static str> {
    match verb {
        Verb::InstallCpe => Some(CPE_MAC_KEY),
        Verb::CommitAddress => Some(CRM_ADDRESS_KEY),
        Verb::ScheduleVisit => Some(VISIT_ID_KEY),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlatformState {
    pub target_id: String,
    pub records: BTreeMap<String, BTreeMap<String, String>>,
}

impl PlatformState {
    pub fn new(target_id: impl Into<String>) -> Self {
        Self {
            target_id: target_id.into(),
            records: BTreeMap::new(),
        }
    }

    /// Canonical dump: pretty JSON with sorted keys and a trailing newline.
    pub fn dump(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("platform state serializes");
        s.push('\n');
        s
    }

    pub fn dump_hash(&self) -> String {
        content_hash(self.dump().as_bytes())
    }

    pub fn from_dump(doc: &str) -> Result<Self, crate::parse::ParseError> {
        serde_json::from_str(doc).map_err(|e| crate::parse::ParseError::from_json(&e))
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub snapshot_id: String,
    pub target_id: String,
    pub state: PlatformState,
    pub hash: String,
}

impl StateSnapshot {
    pub fn of(snapshot_id: impl Into<String>, state: &PlatformState) -> Self {
        Self {
            snapshot_id: snapshot_id.into(),
            target_id: state.target_id.clone(),
            hash: state.dump_hash(),
            state: state.clone(),
        }
    }

    pub fn verify(&self) -> bool {
        self.state.dump_hash() == self.hash
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionFailure {
    pub code: String,
    pub message: String,
}

impl ActionFailure {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// A fulfillment target behind the resource-adapter boundary.
///
/// `apply` is the raw, non-idempotent platform call; idempotency, fault
/// injection and checkpointing are layered on by
/// [`AdapterHost`](super::AdapterHost).
pub trait TargetAdapter: Send {
    fn target_id(&self) -> &str;
    fn supported_verbs(&self) -> Vec<Verb>;
    fn translate(&self, suborder: &SubOrder, bindings: &DataMap) -> Result<Vec<Action>, FulfillmentError>;
    fn apply(&mut self, action: &Action) -> Result<DataMap, ActionFailure>;
    fn state(&self) -> &PlatformState;
    fn set_state(&mut self, state: PlatformState);
}

/// Checked translation: the adapter must own the sub-order's target and
/// support every verb it emits.
pub fn translate(suborder: &SubOrder, adapter: &dyn TargetAdapter, bindings: &DataMap) -> Result<Vec<Action>, FulfillmentError> {
    if suborder.target_id != adapter.target_id() {
        return Err(FulfillmentError::TargetMismatch {
            expected: adapter.target_id().to_string(),
            got: suborder.target_id.clone(),
        });
    }
    let actions = adapter.translate(suborder, bindings)?;
    let supported = adapter.supported_verbs();
    if let Some(a) = actions.iter().find(|a| !supported.contains(&a.verb)) {
        return Err(FulfillmentError::UnsupportedItem {
            suborder_id: suborder.suborder_id.clone(),
            detail: format!("verb {} not supported by {}", a.verb, adapter.target_id()),
        });
    }
    Ok(actions)
}

pub fn snapshot(adapter: &dyn TargetAdapter, snapshot_id: &str) -> StateSnapshot {
    StateSnapshot::of(snapshot_id, adapter.state())
}

pub fn restore(adapter: &mut dyn TargetAdapter, snap: &StateSnapshot) -> Result<(), FulfillmentError> {
    if snap.target_id != adapter.target_id() {
        return Err(FulfillmentError::SnapshotMismatch {
            expected: adapter.target_id().to_string(),
            got: snap.target_id.clone(),
        });
    }
    adapter.set_state(snap.state.clone());
    Ok(())
}

const RESERVED_PARAMS: [&str; 4] = ["customer", "line", "service", OUTPUTS_PARAM];

fn synth_value(seed: u64, target: &str, record: &str, key: &str) -> String {
    let h = Sha256::digest(format!("{seed}|{target}|{record}|{key}").as_bytes());
    hex::encode(&h[..6])
}

fn mac_address(seed: u64, target: &str, customer: &str, line: &str) -> String {
    let h = Sha256::digest(format!("{seed}|{target}|cpe|{customer}|{line}").as_bytes());
    // Locally administered, unicast.
    let mut b = [0u8; 6];
    b.copy_from_slice(&h[..6]);
    b[0] = (b[0] & 0xfc) | 0x02;
    b.iter().map(|x| format!("{x:02X}")).collect::<Vec<_>>().join(":")
}

fn record_key(action: &Action) -> String {
    let c = action.param("customer");
    let l = action.param("line");
    let s = action.param("service");
    match action.verb {
        Verb::CommitAddress => format!("addr/{c}"),
        Verb::InstallCpe | Verb::RemoveCpe => format!("cpe/{c}/{l}"),
        Verb::CreateSubscription | Verb::CancelSubscription => format!("sub/{c}/{l}/{s}"),
        Verb::ScheduleVisit | Verb::CancelVisit => format!("visit/{c}/{l}/{s}"),
        Verb::ProvisionBilling | Verb::DeprovisionBilling => format!("bill/{c}/{l}/{s}"),
        Verb::CompleteTask => format!("task/{c}/{l}/{s}"),
    }
}

/// Applies one verb to a platform's records. Shared by every simulated
/// platform so that inverse pairs behave the same everywhere.
pub fn apply_verb(state: &mut PlatformState, seed: u64, action: &Action) -> Result<DataMap, ActionFailure> {
    let key = record_key(action);
    let target = state.target_id.clone();
    let mut fields: BTreeMap<String, String> = action
        .params
        .iter()
        .filter(|(k, _)| !RESERVED_PARAMS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut out = DataMap::new();

    let create = |state: &mut PlatformState, fields: BTreeMap<String, String>| {
        if state.records.contains_key(&key) {
            return Err(ActionFailure::new("DUPLICATE_RECORD", format!("{key} already exists on {target}")));
        }
        state.records.insert(key.clone(), fields);
        Ok(())
    };
    let remove = |state: &mut PlatformState| {
        state
            .records
            .remove(&key)
            .map(|_| ())
            .ok_or_else(|| ActionFailure::new("NOT_FOUND", format!("{key} not present on {target}")))
    };

    match action.verb {
        Verb::CancelSubscription | Verb::RemoveCpe | Verb::CancelVisit | Verb::DeprovisionBilling => {
            remove(state)?;
            return Ok(out);
        }
        Verb::CompleteTask => {
            for k in action.output_keys() {
                let v = action
                    .params
                    .get(&k)
                    .ok_or_else(|| ActionFailure::new("MISSING_TASK_DATA", format!("task did not supply `{k}`")))?;
                out.insert(k, v.clone());
            }
            state.records.insert(key, fields);
            return Ok(out);
        }
        _ => {}
    }

    for k in action.output_keys() {
        let v = synth_value(seed, &target, &key, &k);
        fields.insert(k.clone(), v.clone());
        out.insert(k, v);
    }
    match action.verb {
        Verb::CommitAddress => {
            let address = action.param("address").to_string();
            if address.is_empty() {
                return Err(ActionFailure::new("BAD_REQUEST", "COMMIT_ADDRESS without address"));
            }
            out.insert(CRM_ADDRESS_KEY.into(), address);
            state.records.insert(key, fields);
        }
        Verb::InstallCpe => {
            let mac = mac_address(seed, &target, action.param("customer"), action.param("line"));
            fields.insert("mac".into(), mac.clone());
            create(state, fields)?;
            out.insert(CPE_MAC_KEY.into(), mac);
        }
        Verb::ScheduleVisit => {
            let id = format!("V-{}", synth_value(seed, &target, &key, VISIT_ID_KEY));
            fields.insert("visit_id".into(), id.clone());
            create(state, fields)?;
            out.insert(VISIT_ID_KEY.into(), id);
        }
        Verb::CreateSubscription | Verb::ProvisionBilling => create(state, fields)?,
        _ => unreachable!("handled above"),
    }
    Ok(out)
}

/// Behaviour profile of a built-in simulated platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlatformProfile {
    Crm,
    Broadband,
    Voice,
    Billing,
    Workforce,
    Generic,
}

impl PlatformProfile {
    pub fn for_target(target_id: &str) -> PlatformProfile {
        match target_id {
            "crm" => PlatformProfile::Crm,
            "broadband" => PlatformProfile::Broadband,
            "voice" => PlatformProfile::Voice,
            "billing" => PlatformProfile::Billing,
            "workforce" => PlatformProfile::Workforce,
            _ => PlatformProfile::Generic,
        }
    }

    pub fn verbs(self) -> Vec<Verb> {
        match self {
            PlatformProfile::Crm => vec![Verb::CommitAddress],
            PlatformProfile::Broadband => vec![
                Verb::InstallCpe,
                Verb::RemoveCpe,
                Verb::CreateSubscription,
                Verb::CancelSubscription,
            ],
            PlatformProfile::Voice | PlatformProfile::Generic => {
                vec![Verb::CreateSubscription, Verb::CancelSubscription]
            }
            PlatformProfile::Billing => vec![Verb::ProvisionBilling, Verb::DeprovisionBilling],
            PlatformProfile::Workforce => vec![Verb::ScheduleVisit, Verb::CancelVisit, Verb::CompleteTask],
        }
    }
}

fn bound<'a>(bindings: &'a DataMap, key: &str, suborder: &SubOrder) -> Result<&'a String, FulfillmentError> {
    bindings.get(key).ok_or_else(|| FulfillmentError::MissingBinding {
        suborder_id: suborder.suborder_id.clone(),
        key: key.to_string(),
    })
}

/// Common translation logic for the built-in platforms and the partner
/// gateway.
pub fn translate_for_profile(
    profile: PlatformProfile,
    suborder: &SubOrder,
    bindings: &DataMap,
) -> Result<Vec<Action>, FulfillmentError> {
    let customer = bound(bindings, CUSTOMER_ID_KEY, suborder)?.clone();
    let mut required = DataMap::new();
    for k in &suborder.requires_data {
        required.insert(k.clone(), bound(bindings, k, suborder)?.clone());
    }
    let base = |line: &str, service: &str, extra: &BTreeMap<String, String>| {
        let mut p = required.clone();
        p.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        p.insert("customer".into(), customer.clone());
        p.insert("line".into(), line.to_string());
        p.insert("service".into(), service.to_string());
        p
    };

    let mut planned: Vec<(Verb, DataMap)> = Vec::new();
    match profile {
        PlatformProfile::Crm => {
            let address = bound(bindings, CUSTOMER_ADDRESS_KEY, suborder)?.clone();
            for item in &suborder.items {
                let mut p = base(&item.line_id, &item.service_code, &item.params);
                p.insert("address".into(), address.clone());
                planned.push((Verb::CommitAddress, p));
            }
        }
        PlatformProfile::Broadband => {
            if suborder.provides_data.contains(CPE_MAC_KEY) {
                let line = suborder
                    .items
                    .first()
                    .map(|i| i.line_id.clone())
                    .or_else(|| suborder.line_id.clone())
                    .unwrap_or_default();
                planned.push((Verb::InstallCpe, base(&line, "CPE", &BTreeMap::new())));
            }
            for item in &suborder.items {
                planned.push((Verb::CreateSubscription, base(&item.line_id, &item.service_code, &item.params)));
            }
        }
        PlatformProfile::Voice | PlatformProfile::Generic => {
            for item in &suborder.items {
                planned.push((Verb::CreateSubscription, base(&item.line_id, &item.service_code, &item.params)));
            }
        }
        PlatformProfile::Billing => {
            for item in &suborder.items {
                planned.push((Verb::ProvisionBilling, base(&item.line_id, &item.service_code, &item.params)));
            }
        }
        PlatformProfile::Workforce => {
            let address = bindings
                .get(CRM_ADDRESS_KEY)
                .or_else(|| bindings.get(CUSTOMER_ADDRESS_KEY))
                .cloned()
                .unwrap_or_default();
            for item in &suborder.items {
                let mut p = base(&item.line_id, &item.service_code, &item.params);
                p.insert("address".into(), address.clone());
                planned.push((Verb::ScheduleVisit, p));
            }
            if suborder.kind == SubOrderKind::HumanTask {
                if let Some(first) = suborder.items.first() {
                    let mut p = base(&first.line_id, &first.service_code, &BTreeMap::new());
                    p.insert(
                        "instructions".into(),
                        format!("visit premises at {address} and confirm installation"),
                    );
                    planned.push((Verb::CompleteTask, p));
                }
            }
        }
    }

    let native: BTreeSet<&str> = planned.iter().filter_map(|(v, _)| native_output(*v)).collect();
    let rest: Vec<String> = suborder
        .provides_data
        .iter()
        .filter(|k| !native.contains(k.as_str()))
        .cloned()
        .collect();
    if !rest.is_empty() {
        let Some((_, last)) = planned.last_mut() else {
            return Err(FulfillmentError::UnsupportedItem {
                suborder_id: suborder.suborder_id.clone(),
                detail: format!("no action can produce {}", rest.join(",")),
            });
        };
        last.insert(OUTPUTS_PARAM.into(), rest.join(","));
    }

    Ok(planned
        .into_iter()
        .enumerate()
        .map(|(i, (verb, params))| Action::new(&suborder.order_id, &suborder.suborder_id, i as u32, verb, params))
        .collect())
}

/// Built-in simulated platform.
#[derive(Debug, Clone)]
pub struct SimPlatform {
    profile: PlatformProfile,
    seed: u64,
    state: PlatformState,
}

impl SimPlatform {
    pub fn new(target_id: &str, profile: PlatformProfile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            state: PlatformState::new(target_id),
        }
    }

    /// Profile picked from the target id; unknown ids get the generic
    /// subscription platform.
    pub fn for_target(target_id: &str, seed: u64) -> Self {
        Self::new(target_id, PlatformProfile::for_target(target_id), seed)
    }

    pub fn profile(&self) -> PlatformProfile {
        self.profile
    }
}

impl TargetAdapter for SimPlatform {
    fn target_id(&self) -> &str {
        &self.state.target_id
    }

    fn supported_verbs(&self) -> Vec<Verb> {
        self.profile.verbs()
    }

    fn translate(&self, suborder: &SubOrder, bindings: &DataMap) -> Result<Vec<Action>, FulfillmentError> {
        translate_for_profile(self.profile, suborder, bindings)
    }

    fn apply(&mut self, action: &Action) -> Result<DataMap, ActionFailure> {
        if !self.profile.verbs().contains(&action.verb) {
            return Err(ActionFailure::new("UNSUPPORTED", format!("{} on {}", action.verb, self.state.target_id)));
        }
        apply_verb(&mut self.state, self.seed, action)
    }

    fn state(&self) -> &PlatformState {
        &self.state
    }

    fn set_state(&mut self, state: PlatformState) {
        self.state = state;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::{Item, SubOrderState};

    pub(crate) fn suborder(target: &str, kind: SubOrderKind, items: &[&str]) -> SubOrder {
        SubOrder {
            suborder_id: format!("O1-L1-{target}"),
            order_id: "O1".into(),
            line_id: Some("L1".into()),
            target_id: target.into(),
            kind,
            items: items
                .iter()
                .map(|s| Item {
                    line_id: "L1".into(),
                    component_code: s.to_lowercase(),
                    service_code: s.to_string(),
                    params: BTreeMap::new(),
                })
                .collect(),
            requires_data: BTreeSet::new(),
            provides_data: BTreeSet::new(),
            depends_on: BTreeSet::new(),
            state: SubOrderState::Pending,
        }
    }

    fn bindings() -> DataMap {
        [(CUSTOMER_ID_KEY, "C1"), (CUSTOMER_ADDRESS_KEY, "Main St 1, Skopje")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn broadband_with_cpe_installs_first() {
        let p = SimPlatform::for_target("broadband", 7);
        let mut so = suborder("broadband", SubOrderKind::Service, &["BROADBAND"]);
        so.provides_data.insert(CPE_MAC_KEY.into());
        let verbs: Vec<_> = translate(&so, &p, &bindings()).unwrap().iter().map(|a| a.verb).collect();
        assert_eq!(verbs, vec![Verb::InstallCpe, Verb::CreateSubscription]);
    }

    #[test]
    fn billing_gets_one_action_per_item() {
        let p = SimPlatform::for_target("billing", 7);
        let mut so = suborder("billing", SubOrderKind::Billing, &["BROADBAND", "TELEPHONY"]);
        so.line_id = None;
        let actions = translate(&so, &p, &bindings()).unwrap();
        let verbs: Vec<_> = actions.iter().map(|a| a.verb).collect();
        assert_eq!(verbs, vec![Verb::ProvisionBilling, Verb::ProvisionBilling]);
        let idx: Vec<_> = actions.iter().map(|a| a.action_idx).collect();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn empty_items_translate_to_nothing() {
        let p = SimPlatform::for_target("voice", 7);
        let so = suborder("voice", SubOrderKind::Service, &[]);
        assert!(translate(&so, &p, &bindings()).unwrap().is_empty());
    }

    #[test]
    fn wrong_target_and_missing_binding() {
        let p = SimPlatform::for_target("voice", 7);
        let so = suborder("broadband", SubOrderKind::Service, &["X"]);
        assert!(matches!(translate(&so, &p, &bindings()), Err(FulfillmentError::TargetMismatch { .. })));
        let mut so = suborder("voice", SubOrderKind::Service, &["TELEPHONY"]);
        so.requires_data.insert(CPE_MAC_KEY.into());
        assert!(matches!(translate(&so, &p, &bindings()), Err(FulfillmentError::MissingBinding { .. })));
    }

    #[test]
    fn mac_is_seed_dependent_and_well_formed() {
        let a = mac_address(1, "broadband", "C1", "L1");
        let b = mac_address(2, "broadband", "C1", "L1");
        assert_ne!(a, b);
        assert_eq!(a, mac_address(1, "broadband", "C1", "L1"));
        assert_eq!(a.len(), 17);
        assert_eq!(a.split(':').count(), 6);
    }

    #[test]
    fn snapshot_restore_and_mismatch() {
        let mut bb = SimPlatform::for_target("broadband", 7);
        let fresh = snapshot(&bb, "s0");
        let mut so = suborder("broadband", SubOrderKind::Service, &["BROADBAND"]);
        so.provides_data.insert(CPE_MAC_KEY.into());
        for a in translate(&so, &bb, &bindings()).unwrap() {
            bb.apply(&a).unwrap();
        }
        assert_ne!(bb.state().dump(), fresh.state.dump());
        restore(&mut bb, &fresh).unwrap();
        assert_eq!(bb.state().dump(), fresh.state.dump());
        assert!(fresh.verify());

        let mut voice = SimPlatform::for_target("voice", 7);
        assert!(matches!(
            restore(&mut voice, &fresh),
            Err(FulfillmentError::SnapshotMismatch { .. })
        ));
    }

    #[test]
    fn create_on_existing_record_fails_without_change() {
        let mut v = SimPlatform::for_target("voice", 1);
        let so = suborder("voice", SubOrderKind::Service, &["TELEPHONY"]);
        let a = translate(&so, &v, &bindings()).unwrap().remove(0);
        v.apply(&a).unwrap();
        let before = v.state().dump();
        let err = v.apply(&a).unwrap_err();
        assert_eq!(err.code, "DUPLICATE_RECORD");
        assert_eq!(before, v.state().dump());
    }

    #[test]
    fn extra_outputs_are_generated_and_stored() {
        let mut g = SimPlatform::for_target("iptv", 3);
        let mut so = suborder("iptv", SubOrderKind::Service, &["TV"]);
        so.provides_data.insert("tv.card".into());
        let a = translate(&so, &g, &bindings()).unwrap().remove(0);
        let out = g.apply(&a).unwrap();
        let v = out.get("tv.card").unwrap();
        assert_eq!(g.state().records["sub/C1/L1/TV"]["tv.card"], *v);
    }
}
