//! Canonical order model and the order / sub-order state machines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelId {
    Pos,
    Web,
    Ivr,
    Csr,
    B2b,
}

impl ChannelId {
    pub const ALL: [ChannelId; 5] = [ChannelId::Pos, ChannelId::Web, ChannelId::Ivr, ChannelId::Csr, ChannelId::B2b];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelId::Pos => "POS",
            ChannelId::Web => "WEB",
            ChannelId::Ivr => "IVR",
            ChannelId::Csr => "CSR",
            ChannelId::B2b => "B2B",
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown channel `{0}`")]
pub struct UnknownChannel(pub String);

impl FromStr for ChannelId {
    type Err = UnknownChannel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChannelId::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownChannel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomerRef {
    pub customer_id: String,
    pub credit_limit: u64,
    pub premises_address: String,
    #[serde(default)]
    pub cpe_capabilities: BTreeSet<String>,
    #[serde(default)]
    pub contract_terms: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderLine {
    pub line_id: String,
    pub product_code: String,
    pub qty: u32,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalOrder {
    pub order_id: String,
    pub channel_id: ChannelId,
    pub customer: CustomerRef,
    pub lines: Vec<OrderLine>,
    pub created_at: Timestamp,
}

impl CanonicalOrder {
    pub fn line(&self, line_id: &str) -> Option<&OrderLine> {
        self.lines.iter().find(|l| l.line_id == line_id)
    }

    /// Copy with the capture-assigned identity fields blanked, for comparing
    /// the same logical order arriving through different channels.
    pub fn logical_content(&self) -> CanonicalOrder {
        CanonicalOrder {
            order_id: String::new(),
            channel_id: ChannelId::Pos,
            created_at: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubOrderKind {
    Service,
    Billing,
    WorkOrder,
    HumanTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubOrderState {
    Pending,
    Ready,
    Dispatched,
    WaitingHuman,
    Done,
    Failed,
    Compensated,
}

/// One service to provision, as seen by the fulfillment target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Item {
    pub line_id: String,
    pub component_code: String,
    pub service_code: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubOrder {
    pub suborder_id: String,
    pub order_id: String,
    /// Absent for order-level sub-orders (billing).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_id: Option<String>,
    pub target_id: String,
    pub kind: SubOrderKind,
    pub items: Vec<Item>,
    #[serde(default)]
    pub requires_data: BTreeSet<String>,
    #[serde(default)]
    pub provides_data: BTreeSet<String>,
    #[serde(default)]
    pub depends_on: BTreeSet<String>,
    pub state: SubOrderState,
}

impl SubOrder {
    /// Namespace this sub-order's data keys live in.
    pub fn scope(&self) -> &str {
        self.line_id.as_deref().unwrap_or(ORDER_SCOPE)
    }
}

/// Binding scope for order-level data (customer facts, billing outputs).
pub const ORDER_SCOPE: &str = "_order";

/// Plan bindings are keyed `<scope>/<data key>` so that two lines ordering
/// the same product never collide on a key.
pub fn binding_key(scope: &str, key: &str) -> String {
    format!("{scope}/{key}")
}

pub fn split_binding_key(qualified: &str) -> Option<(&str, &str)> {
    qualified.split_once('/')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderState {
    Captured,
    Rejected,
    Validated,
    Decomposed,
    InProgress,
    Completed,
    Compensating,
    Compensated,
    Failed,
}

impl OrderState {
    pub const ALL: [OrderState; 9] = [
        OrderState::Captured,
        OrderState::Rejected,
        OrderState::Validated,
        OrderState::Decomposed,
        OrderState::InProgress,
        OrderState::Completed,
        OrderState::Compensating,
        OrderState::Compensated,
        OrderState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            OrderState::Rejected | OrderState::Completed | OrderState::Compensated | OrderState::Failed
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OrderState::Captured => "CAPTURED",
            OrderState::Rejected => "REJECTED",
            OrderState::Validated => "VALIDATED",
            OrderState::Decomposed => "DECOMPOSED",
            OrderState::InProgress => "IN_PROGRESS",
            OrderState::Completed => "COMPLETED",
            OrderState::Compensating => "COMPENSATING",
            OrderState::Compensated => "COMPENSATED",
            OrderState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for OrderState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OrderState::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown order state `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderTransition {
    ValidationPassed,
    ValidationFailed,
    Decomposed,
    /// Decomposition or planning rejected a validated order.
    PlanningFailed,
    FulfillmentStarted,
    AllFulfilled,
    FatalFulfillmentFailure,
    CompensationSucceeded,
    CompensationFailed,
}

impl OrderTransition {
    pub const ALL: [OrderTransition; 9] = [
        OrderTransition::ValidationPassed,
        OrderTransition::ValidationFailed,
        OrderTransition::Decomposed,
        OrderTransition::PlanningFailed,
        OrderTransition::FulfillmentStarted,
        OrderTransition::AllFulfilled,
        OrderTransition::FatalFulfillmentFailure,
        OrderTransition::CompensationSucceeded,
        OrderTransition::CompensationFailed,
    ];
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("illegal transition {event:?} from {from}")]
pub struct IllegalTransition {
    pub from: OrderState,
    pub event: OrderTransition,
}

pub fn transition(state: OrderState, event: OrderTransition) -> Result<OrderState, IllegalTransition> {
    use OrderState as S;
    use OrderTransition as T;
    let next = match (state, event) {
        (S::Captured, T::ValidationPassed) => S::Validated,
        (S::Captured, T::ValidationFailed) => S::Rejected,
        (S::Validated, T::Decomposed) => S::Decomposed,
        (S::Validated, T::PlanningFailed) => S::Failed,
        (S::Decomposed, T::PlanningFailed) => S::Failed,
        (S::Decomposed, T::FulfillmentStarted) => S::InProgress,
        (S::InProgress, T::AllFulfilled) => S::Completed,
        (S::InProgress, T::FatalFulfillmentFailure) => S::Compensating,
        (S::Compensating, T::CompensationSucceeded) => S::Compensated,
        (S::Compensating, T::CompensationFailed) => S::Failed,
        _ => return Err(IllegalTransition { from: state, event }),
    };
    Ok(next)
}
