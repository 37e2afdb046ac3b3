//! Fulfillment: turns sub-orders into platform actions and runs them on the
//! registered target adapters.

pub mod action;
pub mod b2b;
pub mod host;
pub mod platform;
pub mod tasks;

use thiserror::Error;

pub use action::{Action, DataMap, FulfillmentResult, ResultError, ResultStatus, Verb, OUTPUTS_PARAM};
pub use b2b::{b2b_open, b2b_unwrap, b2b_wrap, B2BEnvelope, PartnerGateway, PartnerPlatform};
pub use host::{FaultKind, FaultSpec, HostRecord, Registry, DEFAULT_TARGETS, PARTNER_TARGET};
pub use platform::{
    content_hash, restore, snapshot, translate, PlatformProfile, PlatformState, SimPlatform, StateSnapshot, TargetAdapter,
};
pub use tasks::{complete_task, create_task, HumanTask, TaskError, TaskState, TaskStore, TaskStoreData};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FulfillmentError {
    #[error("sub-order for `{got}` given to adapter `{expected}`")]
    TargetMismatch { expected: String, got: String },
    #[error("sub-order {suborder_id}: {detail}")]
    UnsupportedItem { suborder_id: String, detail: String },
    #[error("sub-order {suborder_id}: no binding for `{key}`")]
    MissingBinding { suborder_id: String, key: String },
    #[error("snapshot of `{got}` cannot be restored into `{expected}`")]
    SnapshotMismatch { expected: String, got: String },
    #[error("bad envelope: {0}")]
    BadEnvelope(String),
    #[error("target `{0}` already registered")]
    DuplicateTarget(String),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),
    #[error("bad fault spec `{0}`")]
    BadFaultSpec(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

impl FulfillmentError {
    /// Error code used when the failure is reported inside a result.
    pub fn code(&self) -> &'static str {
        match self {
            FulfillmentError::TargetMismatch { .. } => "TARGET_MISMATCH",
            FulfillmentError::UnsupportedItem { .. } => "UNSUPPORTED_ITEM",
            FulfillmentError::MissingBinding { .. } => "MISSING_BINDING",
            FulfillmentError::SnapshotMismatch { .. } => "SNAPSHOT_MISMATCH",
            FulfillmentError::BadEnvelope(_) => "BAD_ENVELOPE",
            FulfillmentError::DuplicateTarget(_) => "DUPLICATE_TARGET",
            FulfillmentError::UnknownTarget(_) => "UNKNOWN_TARGET",
            FulfillmentError::UnknownCheckpoint(_) => "UNKNOWN_CHECKPOINT",
            FulfillmentError::BadFaultSpec(_) => "BAD_FAULT_SPEC",
            FulfillmentError::Task(_) => "TASK",
        }
    }
}
