use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verb {
    CommitAddress,
    CreateSubscription,
    CancelSubscription,
    InstallCpe,
    RemoveCpe,
    ScheduleVisit,
    CancelVisit,
    ProvisionBilling,
    DeprovisionBilling,
    CompleteTask,
}

impl Verb {
    pub const ALL: [Verb; 10] = [
        Verb::CommitAddress,
        Verb::CreateSubscription,
        Verb::CancelSubscription,
        Verb::InstallCpe,
        Verb::RemoveCpe,
        Verb::ScheduleVisit,
        Verb::CancelVisit,
        Verb::ProvisionBilling,
        Verb::DeprovisionBilling,
        Verb::CompleteTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::CommitAddress => "COMMIT_ADDRESS",
            Verb::CreateSubscription => "CREATE_SUBSCRIPTION",
            Verb::CancelSubscription => "CANCEL_SUBSCRIPTION",
            Verb::InstallCpe => "INSTALL_CPE",
            Verb::RemoveCpe => "REMOVE_CPE",
            Verb::ScheduleVisit => "SCHEDULE_VISIT",
            Verb::CancelVisit => "CANCEL_VISIT",
            Verb::ProvisionBilling => "PROVISION_BILLING",
            Verb::DeprovisionBilling => "DEPROVISION_BILLING",
            Verb::CompleteTask => "COMPLETE_TASK",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| format!("unknown verb `{s}`"))
    }
}

pub type DataMap = BTreeMap<String, String>;

/// Action parameter naming the data keys the platform must generate and
/// return (comma separated).
pub const OUTPUTS_PARAM: &str = "outputs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub action_idx: u32,
    pub verb: Verb,
    pub params: DataMap,
    pub idempotency_key: String,
}

impl Action {
    pub fn new(order_id: &str, suborder_id: &str, action_idx: u32, verb: Verb, params: DataMap) -> Self {
        Self {
            action_idx,
            verb,
            params,
            idempotency_key: format!("{order_id}:{suborder_id}:{action_idx}"),
        }
    }

    pub fn param(&self, key: &str) -> &str {
        self.params.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn output_keys(&self) -> Vec<String> {
        self.params
            .get(OUTPUTS_PARAM)
            .map(|s| s.split(',').filter(|k| !k.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResultStatus {
    Success,
    RetryableFailure,
    FatalFailure,
    PendingHuman,
}

impl ResultStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultStatus::Success => "SUCCESS",
            ResultStatus::RetryableFailure => "RETRYABLE_FAILURE",
            ResultStatus::FatalFailure => "FATAL_FAILURE",
            ResultStatus::PendingHuman => "PENDING_HUMAN",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, ResultStatus::RetryableFailure | ResultStatus::FatalFailure)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FulfillmentResult {
    pub suborder_id: String,
    pub status: ResultStatus,
    #[serde(default)]
    pub provided_data: DataMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ResultError>,
    /// Actions whose effects are on the platform after this execution, in
    /// the order they were applied.
    #[serde(default)]
    pub applied_actions: Vec<Action>,
    /// Pre-execution snapshot held by the target for this sub-order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_ref: Option<String>,
    /// Position of this sub-order's first execution on its target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

impl FulfillmentResult {
    pub fn success(suborder_id: &str, provided_data: DataMap) -> Self {
        Self {
            suborder_id: suborder_id.to_string(),
            status: ResultStatus::Success,
            provided_data,
            error: None,
            applied_actions: Vec::new(),
            checkpoint_ref: None,
            exec_seq: None,
            task_id: None,
        }
    }

    pub fn failure(suborder_id: &str, status: ResultStatus, code: &str, message: impl Into<String>) -> Self {
        debug_assert!(status.is_failure());
        Self {
            error: Some(ResultError {
                code: code.to_string(),
                message: message.into(),
            }),
            status,
            ..Self::success(suborder_id, DataMap::new())
        }
    }

    pub fn pending_human(suborder_id: &str, task_id: &str) -> Self {
        Self {
            status: ResultStatus::PendingHuman,
            task_id: Some(task_id.to_string()),
            ..Self::success(suborder_id, DataMap::new())
        }
    }

    /// Shape check: data only on success, error iff failure.
    pub fn is_well_formed(&self) -> bool {
        let data_ok = self.provided_data.is_empty() || self.status == ResultStatus::Success;
        let err_ok = self.error.is_some() == self.status.is_failure();
        data_ok && err_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idempotency_key_layout() {
        let a = Action::new("O1", "O1-L1-voice", 2, Verb::CreateSubscription, DataMap::new());
        assert_eq!(a.idempotency_key, "O1:O1-L1-voice:2");
    }

    #[test]
    fn verb_names_round_trip() {
        for v in Verb::ALL {
            assert_eq!(v.as_str().parse::<Verb>(), Ok(v));
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
    }

    #[test]
    fn result_shapes() {
        assert!(FulfillmentResult::success("s", DataMap::new()).is_well_formed());
        assert!(FulfillmentResult::failure("s", ResultStatus::FatalFailure, "X", "boom").is_well_formed());
        assert!(FulfillmentResult::pending_human("s", "T-1").is_well_formed());
        let mut bad = FulfillmentResult::pending_human("s", "T-1");
        bad.provided_data.insert("k".into(), "v".into());
        assert!(!bad.is_well_formed());
    }
}
