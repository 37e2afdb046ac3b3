//! Append-only order journal and the aggregate it rebuilds.
//!
//! The live engine mutates an [`OrderAggregate`] only by appending an event
//! and then applying that same event, so replaying the journal always lands
//! on the state the engine had.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::compensation::{CompensationReport, CompensationStep, UndoBuffer, UndoEntry};
use crate::fulfillment::{DataMap, FulfillmentResult};
use crate::management::plan::{ExecutionPlan, PlanError};
use crate::management::rules::ValidationResult;
use crate::order::{transition, CanonicalOrder, IllegalTransition, OrderState, OrderTransition, SubOrderState};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("corrupt journal at line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },
    #[error("order `{0}` not found")]
    NotFound(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregateError {
    #[error(transparent)]
    Transition(#[from] IllegalTransition),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderEvent {
    Captured {
        order: CanonicalOrder,
    },
    Validated {
        result: ValidationResult,
    },
    Rejected {
        result: ValidationResult,
    },
    Decomposed {
        plan: ExecutionPlan,
    },
    PlanningFailed {
        reason: String,
    },
    Started,
    Dispatched {
        suborder_id: String,
        dispatch_id: String,
        attempt: u32,
        bindings: DataMap,
    },
    ResultApplied {
        dispatch_id: String,
        result: FulfillmentResult,
    },
    RetryScheduled {
        suborder_id: String,
        attempt: u32,
    },
    UndoRecorded {
        entry: UndoEntry,
    },
    Resumed {
        suborder_id: String,
        task_id: String,
    },
    Completed,
    CompensationStarted {
        reason: String,
    },
    CompensationStep {
        step: CompensationStep,
    },
    Compensated {
        report: CompensationReport,
    },
    Failed {
        diagnostic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<CompensationReport>,
    },
}

impl OrderEvent {
    pub fn name(&self) -> &'static str {
        match self {
            OrderEvent::Captured { .. } => "CAPTURED",
            OrderEvent::Validated { .. } => "VALIDATED",
            OrderEvent::Rejected { .. } => "REJECTED",
            OrderEvent::Decomposed { .. } => "DECOMPOSED",
            OrderEvent::PlanningFailed { .. } => "PLANNING_FAILED",
            OrderEvent::Started => "STARTED",
            OrderEvent::Dispatched { .. } => "DISPATCHED",
            OrderEvent::ResultApplied { .. } => "RESULT_APPLIED",
            OrderEvent::RetryScheduled { .. } => "RETRY_SCHEDULED",
            OrderEvent::UndoRecorded { .. } => "UNDO_RECORDED",
            OrderEvent::Resumed { .. } => "RESUMED",
            OrderEvent::Completed => "COMPLETED",
            OrderEvent::CompensationStarted { .. } => "COMPENSATION_STARTED",
            OrderEvent::CompensationStep { .. } => "COMPENSATION_STEP",
            OrderEvent::Compensated { .. } => "COMPENSATED",
            OrderEvent::Failed { .. } => "FAILED",
        }
    }

    /// Sub-order the event is about, if any.
    pub fn suborder_id(&self) -> Option<&str> {
        match self {
            OrderEvent::Dispatched { suborder_id, .. }
            | OrderEvent::RetryScheduled { suborder_id, .. }
            | OrderEvent::Resumed { suborder_id, .. } => Some(suborder_id),
            OrderEvent::ResultApplied { result, .. } => Some(&result.suborder_id),
            OrderEvent::UndoRecorded { entry } => Some(&entry.suborder_id),
            OrderEvent::CompensationStep { step } => Some(&step.suborder_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub suborder_id: String,
    pub attempt: u32,
    pub bindings: DataMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<FulfillmentResult>,
}

/// Everything known about one order, rebuilt purely from its events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderAggregate {
    pub order_id: String,
    pub state: OrderState,
    pub order: Option<CanonicalOrder>,
    pub validation: Option<ValidationResult>,
    pub plan: Option<ExecutionPlan>,
    pub undo: UndoBuffer,
    pub dispatches: BTreeMap<String, DispatchRecord>,
    /// Dispatch ids in the order they were issued.
    pub dispatch_log: Vec<String>,
    pub compensation_steps: Vec<CompensationStep>,
    pub compensation: Option<CompensationReport>,
    pub diagnostic: Option<String>,
}

impl OrderAggregate {
    pub fn new(order_id: &str) -> Self {
        Self {
            order_id: order_id.to_string(),
            state: OrderState::Captured,
            order: None,
            validation: None,
            plan: None,
            undo: UndoBuffer::new(),
            dispatches: BTreeMap::new(),
            dispatch_log: Vec::new(),
            compensation_steps: Vec::new(),
            compensation: None,
            diagnostic: None,
        }
    }

    fn plan_mut(&mut self) -> Result<&mut ExecutionPlan, AggregateError> {
        self.plan.as_mut().ok_or_else(|| AggregateError::Invalid("no plan yet".into()))
    }

    fn step(&mut self, t: OrderTransition) -> Result<(), AggregateError> {
        self.state = transition(self.state, t)?;
        Ok(())
    }

    /// Attempts so far for a sub-order.
    pub fn attempts(&self, suborder_id: &str) -> u32 {
        self.dispatches.values().filter(|d| d.suborder_id == suborder_id).count() as u32
    }

    /// Sub-order ids in dispatch order (repeats for retries).
    pub fn dispatch_sequence(&self) -> Vec<String> {
        self.dispatch_log.iter().map(|d| self.dispatches[d].suborder_id.clone()).collect()
    }

    /// Latest dispatch id issued for a sub-order.
    pub fn current_dispatch(&self, suborder_id: &str) -> Option<&str> {
        self.dispatch_log
            .iter()
            .rev()
            .find(|d| self.dispatches[*d].suborder_id == suborder_id)
            .map(String::as_str)
    }

    /// Validates and applies one event. On error the aggregate is unchanged.
    pub fn apply(&mut self, event: &OrderEvent) -> Result<(), AggregateError> {
        let mut next = self.clone();
        next.apply_in_place(event)?;
        *self = next;
        Ok(())
    }

    fn apply_in_place(&mut self, event: &OrderEvent) -> Result<(), AggregateError> {
        use OrderEvent as E;
        match event {
            E::Captured { order } => {
                if self.order.is_some() {
                    return Err(AggregateError::Invalid("order captured twice".into()));
                }
                if order.order_id != self.order_id {
                    return Err(AggregateError::Invalid(format!("event for {}", order.order_id)));
                }
                self.order = Some(order.clone());
            }
            E::Validated { result } => {
                self.step(OrderTransition::ValidationPassed)?;
                self.validation = Some(result.clone());
            }
            E::Rejected { result } => {
                self.step(OrderTransition::ValidationFailed)?;
                self.validation = Some(result.clone());
            }
            E::Decomposed { plan } => {
                self.step(OrderTransition::Decomposed)?;
                self.plan = Some(plan.clone());
            }
            E::PlanningFailed { reason } => {
                self.step(OrderTransition::PlanningFailed)?;
                self.diagnostic = Some(reason.clone());
            }
            E::Started => self.step(OrderTransition::FulfillmentStarted)?,
            E::Dispatched {
                suborder_id,
                dispatch_id,
                attempt,
                bindings,
            } => {
                if self.state != OrderState::InProgress {
                    return Err(AggregateError::Invalid(format!("dispatch while {}", self.state)));
                }
                if self.dispatches.contains_key(dispatch_id) {
                    return Err(AggregateError::Invalid(format!("dispatch {dispatch_id} repeated")));
                }
                let plan = self.plan_mut()?;
                match plan.state(suborder_id) {
                    Some(SubOrderState::Pending) => plan.set_state(suborder_id, SubOrderState::Dispatched)?,
                    Some(s) => return Err(AggregateError::Invalid(format!("dispatch of {suborder_id} in {s:?}"))),
                    None => return Err(PlanError::UnknownSubOrder(suborder_id.clone()).into()),
                }
                self.dispatches.insert(
                    dispatch_id.clone(),
                    DispatchRecord {
                        suborder_id: suborder_id.clone(),
                        attempt: *attempt,
                        bindings: bindings.clone(),
                        result: None,
                    },
                );
                self.dispatch_log.push(dispatch_id.clone());
            }
            E::ResultApplied { dispatch_id, result } => {
                let rec = self
                    .dispatches
                    .get(dispatch_id)
                    .ok_or_else(|| AggregateError::Invalid(format!("result for unknown dispatch {dispatch_id}")))?;
                if rec.result.is_some() || rec.suborder_id != result.suborder_id {
                    return Err(AggregateError::Invalid(format!("result for {dispatch_id} does not fit")));
                }
                self.plan_mut()?.apply_result(result)?;
                self.dispatches.get_mut(dispatch_id).expect("checked").result = Some(result.clone());
            }
            E::RetryScheduled { suborder_id, .. } => {
                let plan = self.plan_mut()?;
                if plan.state(suborder_id) != Some(SubOrderState::Failed) {
                    return Err(AggregateError::Invalid(format!("retry of {suborder_id} that has not failed")));
                }
                plan.set_state(suborder_id, SubOrderState::Pending)?;
            }
            E::UndoRecorded { entry } => {
                self.undo
                    .insert(entry.clone())
                    .map_err(|e| AggregateError::Invalid(e.to_string()))?;
            }
            E::Resumed { suborder_id, .. } => {
                let plan = self.plan_mut()?;
                if plan.state(suborder_id) != Some(SubOrderState::WaitingHuman) {
                    return Err(AggregateError::Invalid(format!("{suborder_id} is not waiting")));
                }
                plan.set_state(suborder_id, SubOrderState::Pending)?;
            }
            E::Completed => {
                if !self.plan.as_ref().map(|p| p.all_done()).unwrap_or(false) {
                    return Err(AggregateError::Invalid("completed with unfinished sub-orders".into()));
                }
                self.step(OrderTransition::AllFulfilled)?;
            }
            E::CompensationStarted { reason } => {
                self.step(OrderTransition::FatalFulfillmentFailure)?;
                self.diagnostic = Some(reason.clone());
            }
            E::CompensationStep { step } => {
                if self.state != OrderState::Compensating {
                    return Err(AggregateError::Invalid("compensation step outside compensation".into()));
                }
                if step.ok {
                    self.plan_mut()?.set_state(&step.suborder_id, SubOrderState::Compensated)?;
                }
                self.compensation_steps.push(step.clone());
            }
            E::Compensated { report } => {
                self.step(OrderTransition::CompensationSucceeded)?;
                self.compensation = Some(report.clone());
            }
            E::Failed { diagnostic, report } => {
                self.step(OrderTransition::CompensationFailed)?;
                self.diagnostic = Some(diagnostic.clone());
                self.compensation = report.clone();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub ts: Timestamp,
    pub order_id: String,
    #[serde(flatten)]
    pub event: OrderEvent,
}

#[derive(Debug, Default)]
struct Inner {
    records: Vec<JournalRecord>,
    file: Option<File>,
}

/// Line-delimited journal. In-memory unless opened on a path.
#[derive(Debug)]
pub struct Journal {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
}

impl Default for Journal {
    fn default() -> Self {
        Self::in_memory()
    }
}

fn decode(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Vec<JournalRecord>, JournalError> {
    let mut out: Vec<JournalRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JournalRecord = serde_json::from_str(&line).map_err(|e| JournalError::CorruptJournal {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let expected = out.len() as u64 + 1;
        if rec.seq != expected {
            return Err(JournalError::CorruptJournal {
                line: i + 1,
                reason: format!("seq {} where {expected} was expected", rec.seq),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

impl Journal {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            path: None,
        }
    }

    /// Opens (creating if needed) a journal file and loads its records.
    pub fn open(path: &Path) -> Result<Self, JournalError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let records = if path.exists() {
            decode(BufReader::new(File::open(path)?).lines())?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                records,
                file: Some(file),
            }),
            path: Some(path.to_path_buf()),
        })
    }

    /// Parses journal text without opening anything.
    pub fn from_text(text: &str) -> Result<Self, JournalError> {
        let records = decode(text.lines().map(|l| Ok(l.to_string())))?;
        Ok(Self {
            inner: Mutex::new(Inner { records, file: None }),
            path: None,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends one event. Timestamps are forced strictly increasing so the
    /// journal order and the time order agree.
    pub fn append(&self, order_id: &str, event: OrderEvent, now: Timestamp) -> Result<JournalRecord, JournalError> {
        let mut inner = self.lock();
        let (seq, ts) = match inner.records.last() {
            Some(last) => (last.seq + 1, now.max(last.ts + 1)),
            None => (1, now),
        };
        let rec = JournalRecord {
            seq,
            ts,
            order_id: order_id.to_string(),
            event,
        };
        if let Some(f) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&rec).expect("journal record serializes");
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        inner.records.push(rec.clone());
        Ok(rec)
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<JournalRecord> {
        self.lock().records.clone()
    }

    pub fn records_for(&self, order_id: &str) -> Vec<JournalRecord> {
        self.lock().records.iter().filter(|r| r.order_id == order_id).cloned().collect()
    }

    pub fn order_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in self.lock().records.iter() {
            if !seen.contains(&r.order_id) {
                seen.push(r.order_id.clone());
            }
        }
        seen
    }

    pub fn to_text(&self) -> String {
        self.lock()
            .records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
            .collect()
    }

    pub fn replay(&self, order_id: &str) -> Result<OrderAggregate, JournalError> {
        replay_records(order_id, &self.records_for(order_id))
    }
}

pub fn replay_records(order_id: &str, records: &[JournalRecord]) -> Result<OrderAggregate, JournalError> {
    if records.is_empty() {
        return Err(JournalError::NotFound(order_id.to_string()));
    }
    let mut agg = OrderAggregate::new(order_id);
    for r in records {
        agg.apply(&r.event).map_err(|e| JournalError::CorruptJournal {
            line: r.seq as usize,
            reason: e.to_string(),
        })?;
    }
    Ok(agg)
}
