//! Order capture. Each channel has its own document format; all of them end
//! up as the same [`CanonicalOrder`] on the management queue.
//!
//! This module only knows the order model, the envelope, the bus and the
//! journal. It never reaches into management or fulfillment.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::envelope::b2b_open;
use crate::journal::{Journal, JournalError, OrderEvent};
use crate::msgbus::{Bus, BusError};
use crate::order::{CanonicalOrder, ChannelId, CustomerRef, OrderLine};
use crate::parse::ParseError;

pub const MANAGEMENT_QUEUE: &str = "orders.management";

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("malformed document: {0}")]
    MalformedDocument(ParseError),
    #[error("order fails schema checks: {0:?}")]
    SchemaInvalid(Vec<SchemaFinding>),
    #[error("order `{0}` already submitted")]
    DuplicateOrder(String),
    #[error("message bus unavailable")]
    BusUnavailable,
    #[error("bus: {0}")]
    Bus(BusError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("channel {0} registered twice")]
    DuplicateChannel(ChannelId),
}

/// Order content as a channel document expresses it; identity is assigned
/// at capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderDraft {
    pub customer: CustomerRef,
    pub lines: Vec<OrderLine>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawChannelDocument {
    pub channel: String,
    pub bytes: Vec<u8>,
}

impl RawChannelDocument {
    pub fn new(channel: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            channel: channel.into(),
            bytes: bytes.into(),
        }
    }
}

pub trait ChannelAdapter: Send + Sync {
    fn channel_id(&self) -> ChannelId;
    fn parse(&self, bytes: &[u8]) -> Result<OrderDraft, ParseError>;
}

fn text(bytes: &[u8]) -> Result<&str, ParseError> {
    let s = std::str::from_utf8(bytes).map_err(|e| ParseError::new(1, e.valid_up_to() + 1, "not UTF-8"))?;
    if s.trim().is_empty() {
        return Err(ParseError::new(1, 1, "empty document"));
    }
    Ok(s)
}

fn tag_set(s: &str) -> BTreeSet<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Point-of-sale terminals: `key=value` lines, `#` comments, repeated
/// `line.N.*` groups.
#[derive(Debug, Default)]
pub struct PosAdapter;

#[derive(Default)]
struct PosLine {
    id: Option<String>,
    product: Option<String>,
    qty: Option<u32>,
    params: BTreeMap<String, String>,
    first_line: usize,
}

impl ChannelAdapter for PosAdapter {
    fn channel_id(&self) -> ChannelId {
        ChannelId::Pos
    }

    fn parse(&self, bytes: &[u8]) -> Result<OrderDraft, ParseError> {
        let doc = text(bytes)?;
        let mut cust: BTreeMap<&str, (String, usize)> = BTreeMap::new();
        let mut lines: BTreeMap<u32, PosLine> = BTreeMap::new();
        for (i, raw) in doc.lines().enumerate() {
            let n = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| ParseError::new(n, 1, format!("expected key=value, got `{t}`")))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            if let Some(field) = k.strip_prefix("customer.") {
                match field {
                    "id" | "credit_limit" | "address" | "cpe" | "terms" => {
                        if cust.insert(field_name(field), (v, n)).is_some() {
                            return Err(ParseError::new(n, 1, format!("`{k}` given twice")));
                        }
                    }
                    _ => return Err(ParseError::new(n, 1, format!("unknown key `{k}`"))),
                }
            } else if let Some(rest) = k.strip_prefix("line.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| ParseError::new(n, 1, format!("bad line key `{k}`")))?;
                let idx: u32 = idx
                    .parse()
                    .map_err(|_| ParseError::new(n, 6, format!("line index `{idx}` is not a number")))?;
                let l = lines.entry(idx).or_insert_with(|| PosLine {
                    first_line: n,
                    ..PosLine::default()
                });
                let dup = |present: bool| {
                    if present {
                        Err(ParseError::new(n, 1, format!("`{k}` given twice")))
                    } else {
                        Ok(())
                    }
                };
                match field {
                    "id" => {
                        dup(l.id.is_some())?;
                        l.id = Some(v);
                    }
                    "product" => {
                        dup(l.product.is_some())?;
                        l.product = Some(v);
                    }
                    "qty" => {
                        dup(l.qty.is_some())?;
                        l.qty = Some(v.parse().map_err(|_| ParseError::new(n, k.len() + 2, format!("bad qty `{v}`")))?);
                    }
                    _ => match field.strip_prefix("param.") {
                        Some(p) if !p.is_empty() => {
                            dup(l.params.contains_key(p))?;
                            l.params.insert(p.to_string(), v);
                        }
                        _ => return Err(ParseError::new(n, 1, format!("unknown key `{k}`"))),
                    },
                }
            } else {
                return Err(ParseError::new(n, 1, format!("unknown key `{k}`")));
            }
        }

        let last = doc.lines().count().max(1);
        let need = |f: &str| {
            cust.get(f)
                .map(|(v, _)| v.clone())
                .ok_or_else(|| ParseError::new(last, 1, format!("missing customer.{f}")))
        };
        let limit_raw = need("credit_limit")?;
        let credit_limit = limit_raw.parse().map_err(|_| {
            ParseError::new(cust["credit_limit"].1, 1, format!("bad credit_limit `{limit_raw}`"))
        })?;
        let customer = CustomerRef {
            customer_id: need("id")?,
            credit_limit,
            premises_address: need("address")?,
            cpe_capabilities: cust.get("cpe").map(|(v, _)| tag_set(v)).unwrap_or_default(),
            contract_terms: cust.get("terms").map(|(v, _)| tag_set(v)).unwrap_or_default(),
        };
        let lines = lines
            .into_values()
            .map(|l| {
                let missing = |f: &str| ParseError::new(l.first_line, 1, format!("line group missing `{f}`"));
                Ok(OrderLine {
                    line_id: l.id.clone().ok_or_else(|| missing("id"))?,
                    product_code: l.product.clone().ok_or_else(|| missing("product"))?,
                    qty: l.qty.ok_or_else(|| missing("qty"))?,
                    params: l.params,
                })
            })
            .collect::<Result<_, ParseError>>()?;
        Ok(OrderDraft { customer, lines })
    }
}

fn field_name(f: &str) -> &'static str {
    match f {
        "id" => "id",
        "credit_limit" => "credit_limit",
        "address" => "address",
        "cpe" => "cpe",
        _ => "terms",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebCustomer {
    pub id: String,
    pub credit_limit: u64,
    pub address: String,
    #[serde(default)]
    pub cpe: BTreeSet<String>,
    #[serde(default)]
    pub terms: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebLine {
    pub id: String,
    pub product: String,
    pub qty: u32,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

/// Web shop form, submitted as a JSON document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebOrder {
    pub customer: WebCustomer,
    pub lines: Vec<WebLine>,
}

impl WebOrder {
    pub fn into_draft(self) -> OrderDraft {
        OrderDraft {
            customer: CustomerRef {
                customer_id: self.customer.id,
                credit_limit: self.customer.credit_limit,
                premises_address: self.customer.address,
                cpe_capabilities: self.customer.cpe,
                contract_terms: self.customer.terms,
            },
            lines: self
                .lines
                .into_iter()
                .map(|l| OrderLine {
                    line_id: l.id,
                    product_code: l.product,
                    qty: l.qty,
                    params: l.params,
                })
                .collect(),
        }
    }

    pub fn from_order(o: &CanonicalOrder) -> Self {
        WebOrder {
            customer: WebCustomer {
                id: o.customer.customer_id.clone(),
                credit_limit: o.customer.credit_limit,
                address: o.customer.premises_address.clone(),
                cpe: o.customer.cpe_capabilities.clone(),
                terms: o.customer.contract_terms.clone(),
            },
            lines: o
                .lines
                .iter()
                .map(|l| WebLine {
                    id: l.line_id.clone(),
                    product: l.product_code.clone(),
                    qty: l.qty,
                    params: l.params.clone(),
                })
                .collect(),
        }
    }
}

fn parse_web(doc: &str) -> Result<OrderDraft, ParseError> {
    let w: WebOrder = serde_json::from_str(doc).map_err(|e| ParseError::from_json(&e))?;
    Ok(w.into_draft())
}

#[derive(Debug, Default)]
pub struct WebAdapter;

impl ChannelAdapter for WebAdapter {
    fn channel_id(&self) -> ChannelId {
        ChannelId::Web
    }

    fn parse(&self, bytes: &[u8]) -> Result<OrderDraft, ParseError> {
        parse_web(text(bytes)?)
    }
}

/// Partner orders: a B2B envelope around a web-format body.
#[derive(Debug, Default)]
pub struct B2bAdapter;

impl ChannelAdapter for B2bAdapter {
    fn channel_id(&self) -> ChannelId {
        ChannelId::B2b
    }

    fn parse(&self, bytes: &[u8]) -> Result<OrderDraft, ParseError> {
        let env = b2b_open(text(bytes)?).map_err(|e| ParseError::new(1, 1, e.to_string()))?;
        parse_web(&env.body)
    }
}

/// Order ids: channel prefix, monotone counter, seeded random suffix.
#[derive(Debug)]
pub struct OrderIdGen {
    counter: AtomicU64,
    rng: Mutex<ChaCha8Rng>,
}

impl OrderIdGen {
    pub fn new(seed: u64, start: u64) -> Self {
        Self {
            counter: AtomicU64::new(start),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ start)),
        }
    }

    pub fn next(&self, channel: ChannelId) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        let suffix: u16 = self.rng.lock().unwrap_or_else(|p| p.into_inner()).gen();
        format!("{channel}-{n:06}-{suffix:04x}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaFinding {
    pub code: String,
    pub detail: String,
}

pub fn shipped_channels() -> BTreeSet<ChannelId> {
    BTreeSet::from([ChannelId::Pos, ChannelId::Web, ChannelId::B2b])
}

/// Structural checks only; business rules belong to management.
pub fn schema_validate(order: &CanonicalOrder) -> Vec<SchemaFinding> {
    schema_validate_with(order, &shipped_channels())
}

pub fn schema_validate_with(order: &CanonicalOrder, channels: &BTreeSet<ChannelId>) -> Vec<SchemaFinding> {
    let mut f = Vec::new();
    let mut push = |code: &str, detail: String| {
        f.push(SchemaFinding {
            code: code.into(),
            detail,
        })
    };
    if !channels.contains(&order.channel_id) {
        push("UNKNOWN_CHANNEL", format!("no adapter for {}", order.channel_id));
    }
    if order.lines.is_empty() {
        push("NO_LINES", "order has no lines".into());
    }
    let mut ids = BTreeSet::new();
    for l in &order.lines {
        if l.qty < 1 {
            push("BAD_QTY", format!("line {} has qty {}", l.line_id, l.qty));
        }
        if l.line_id.is_empty() || l.line_id.contains('/') {
            push("BAD_LINE_ID", format!("line id `{}`", l.line_id));
        }
        if !ids.insert(l.line_id.as_str()) {
            push("DUPLICATE_LINE", format!("line id {} repeated", l.line_id));
        }
    }
    f
}

/// Channel adapters plus order-id assignment.
pub struct Capture {
    adapters: BTreeMap<ChannelId, Box<dyn ChannelAdapter>>,
    ids: OrderIdGen,
}

impl std::fmt::Debug for Capture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Capture").field("channels", &self.adapters.keys().collect::<Vec<_>>()).finish()
    }
}

impl Capture {
    pub fn empty(seed: u64, start: u64) -> Self {
        Self {
            adapters: BTreeMap::new(),
            ids: OrderIdGen::new(seed, start),
        }
    }

    /// POS, WEB and B2B. `start` is the number of orders already issued.
    pub fn new(seed: u64, start: u64) -> Self {
        let mut c = Self::empty(seed, start);
        c.register(Box::new(PosAdapter)).expect("fresh");
        c.register(Box::new(WebAdapter)).expect("fresh");
        c.register(Box::new(B2bAdapter)).expect("fresh");
        c
    }

    pub fn register(&mut self, adapter: Box<dyn ChannelAdapter>) -> Result<(), CaptureError> {
        let id = adapter.channel_id();
        if self.adapters.contains_key(&id) {
            return Err(CaptureError::DuplicateChannel(id));
        }
        self.adapters.insert(id, adapter);
        Ok(())
    }

    pub fn channels(&self) -> BTreeSet<ChannelId> {
        self.adapters.keys().copied().collect()
    }

    pub fn parse_channel_order(&self, raw: &RawChannelDocument, clock: &dyn Clock) -> Result<CanonicalOrder, CaptureError> {
        let channel: ChannelId = raw
            .channel
            .parse()
            .map_err(|_| CaptureError::UnknownChannel(raw.channel.clone()))?;
        let adapter = self
            .adapters
            .get(&channel)
            .ok_or_else(|| CaptureError::UnknownChannel(raw.channel.clone()))?;
        let draft = adapter.parse(&raw.bytes).map_err(CaptureError::MalformedDocument)?;
        Ok(CanonicalOrder {
            order_id: self.ids.next(channel),
            channel_id: channel,
            customer: draft.customer,
            lines: draft.lines,
            created_at: clock.now(),
        })
    }
}

/// Puts a schema-valid order on the management queue and journals it.
pub fn submit(order: &CanonicalOrder, bus: &Bus, journal: &Journal, clock: &dyn Clock) -> Result<String, CaptureError> {
    let findings = schema_validate(order);
    if !findings.is_empty() {
        return Err(CaptureError::SchemaInvalid(findings));
    }
    if !journal.records_for(&order.order_id).is_empty() {
        return Err(CaptureError::DuplicateOrder(order.order_id.clone()));
    }
    let payload = serde_json::to_value(order).expect("order serializes");
    bus.send(MANAGEMENT_QUEUE, payload, None, None).map_err(|e| match e {
        BusError::Unavailable => CaptureError::BusUnavailable,
        other => CaptureError::Bus(other),
    })?;
    journal.append(&order.order_id, OrderEvent::Captured { order: order.clone() }, clock.now())?;
    Ok(order.order_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::envelope::b2b_wrap;
    use std::sync::Arc;

    const POS: &str = "\
# counter 4, Skopje centre
customer.id=C-100
customer.credit_limit=500
customer.address=Main St 1, Skopje
customer.cpe=VOIP, DOCSIS3
line.1.id=L1
line.1.product=MULTIPLAY_1
line.1.qty=1
line.1.param.bb.speed=100
";

    const WEB: &str = r#"{
  "customer": {"id": "C-100", "credit_limit": 500, "address": "Main St 1, Skopje", "cpe": ["DOCSIS3", "VOIP"]},
  "lines": [{"id": "L1", "product": "MULTIPLAY_1", "qty": 1, "params": {"bb.speed": "100"}}]
}"#;

    fn capture() -> (Capture, Arc<SimClock>) {
        (Capture::new(7, 0), SimClock::shared())
    }

    #[test]
    fn pos_document_parses() {
        let (c, clock) = capture();
        let o = c.parse_channel_order(&RawChannelDocument::new("POS", POS), clock.as_ref()).unwrap();
        assert_eq!(o.channel_id, ChannelId::Pos);
        assert_eq!(o.lines.len(), 1);
        assert_eq!(o.lines[0].product_code, "MULTIPLAY_1");
        assert_eq!(o.lines[0].params["bb.speed"], "100");
        assert_eq!(o.customer.credit_limit, 500);
        assert_eq!(o.customer.cpe_capabilities.len(), 2);
        assert!(o.order_id.starts_with("POS-000001-"));
    }

    #[test]
    fn channels_agree_on_content() {
        let (c, clock) = capture();
        let pos = c.parse_channel_order(&RawChannelDocument::new("POS", POS), clock.as_ref()).unwrap();
        let web = c.parse_channel_order(&RawChannelDocument::new("web", WEB), clock.as_ref()).unwrap();
        let env = b2b_wrap("acme-telecom", "po-1", 0, WEB).to_document();
        let b2b = c.parse_channel_order(&RawChannelDocument::new("B2B", env), clock.as_ref()).unwrap();
        assert_ne!(pos.order_id, web.order_id);
        assert_eq!(pos.logical_content(), web.logical_content());
        assert_eq!(pos.logical_content(), b2b.logical_content());
    }

    #[test]
    fn bad_documents() {
        let (c, clock) = capture();
        let clock = clock.as_ref();
        for ch in ["POS", "WEB", "B2B"] {
            assert!(matches!(
                c.parse_channel_order(&RawChannelDocument::new(ch, ""), clock),
                Err(CaptureError::MalformedDocument(_))
            ));
        }
        assert!(matches!(
            c.parse_channel_order(&RawChannelDocument::new("IVR", "x"), clock),
            Err(CaptureError::UnknownChannel(_))
        ));
        assert!(matches!(
            c.parse_channel_order(&RawChannelDocument::new("FAX", "x"), clock),
            Err(CaptureError::UnknownChannel(_))
        ));
        let bad = POS.replace("line.1.qty=1", "line.1.qty=one");
        match c.parse_channel_order(&RawChannelDocument::new("POS", bad), clock) {
            Err(CaptureError::MalformedDocument(e)) => assert_eq!(e.line, 8),
            other => panic!("{other:?}"),
        }
        // web body handed in raw to the partner channel
        assert!(c.parse_channel_order(&RawChannelDocument::new("B2B", WEB), clock).is_err());
    }

    #[test]
    fn schema_findings() {
        let (c, clock) = capture();
        let mut o = c.parse_channel_order(&RawChannelDocument::new("WEB", WEB), clock.as_ref()).unwrap();
        assert!(schema_validate(&o).is_empty());
        o.customer.credit_limit = 0;
        assert!(schema_validate(&o).is_empty(), "credit is not a schema concern");
        o.lines[0].qty = 0;
        assert_eq!(schema_validate(&o)[0].code, "BAD_QTY");
        o.lines.clear();
        assert_eq!(schema_validate(&o)[0].code, "NO_LINES");
        o.channel_id = ChannelId::Ivr;
        assert!(schema_validate(&o).iter().any(|f| f.code == "UNKNOWN_CHANNEL"));
    }

    #[test]
    fn submit_paths() {
        let (c, clock) = capture();
        let bus = Bus::new(clock.clone());
        bus.declare_default(MANAGEMENT_QUEUE);
        let journal = Journal::in_memory();
        let o = c.parse_channel_order(&RawChannelDocument::new("WEB", WEB), clock.as_ref()).unwrap();
        submit(&o, &bus, &journal, clock.as_ref()).unwrap();
        let msg = bus.receive(MANAGEMENT_QUEUE).unwrap();
        let back: CanonicalOrder = serde_json::from_value(msg.payload).unwrap();
        assert_eq!(back, o);
        assert_eq!(journal.records_for(&o.order_id).len(), 1);
        assert!(matches!(submit(&o, &bus, &journal, clock.as_ref()), Err(CaptureError::DuplicateOrder(_))));

        let o2 = c.parse_channel_order(&RawChannelDocument::new("WEB", WEB), clock.as_ref()).unwrap();
        bus.set_available(false);
        assert!(matches!(submit(&o2, &bus, &journal, clock.as_ref()), Err(CaptureError::BusUnavailable)));
        assert!(journal.records_for(&o2.order_id).is_empty());
    }

    #[test]
    fn ids_are_unique_and_monotone() {
        let g = OrderIdGen::new(1, 0);
        let ids: Vec<String> = (0..50).map(|_| g.next(ChannelId::Web)).collect();
        let set: BTreeSet<&String> = ids.iter().collect();
        assert_eq!(set.len(), 50);
        assert!(ids[9].starts_with("WEB-000010-"));
    }

    #[test]
    fn no_dependency_on_downstream_modules() {
        let src = include_str!("capture.rs");
        let code = &src[..src.find("#[cfg(test)]").unwrap()];
        assert!(!code.contains("crate::management"));
        assert!(!code.contains("crate::fulfillment"));
    }
}
