//! Target registry. Wraps every raw adapter with the per-target machinery:
//! idempotency store, fault injection, pre-execution checkpoints and the
//! human-task gate in front of `COMPLETE_TASK`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::action::{Action, DataMap, FulfillmentResult, ResultStatus, Verb};
use super::b2b::PartnerGateway;
use super::platform::{self, ActionFailure, PlatformState, SimPlatform, StateSnapshot, TargetAdapter};
use super::tasks::{TaskState, TaskStore};
use super::FulfillmentError;
use crate::order::SubOrder;

/// Target id of the partner platform reached through the B2B gateway.
pub const PARTNER_TARGET: &str = "partner-voice";
pub const PARTNER_ID: &str = "acme-telecom";

/// Targets registered by [`Registry::with_defaults`].
pub const DEFAULT_TARGETS: [&str; 6] = ["crm", "broadband", "voice", "billing", "workforce", PARTNER_TARGET];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    Retryable,
    Fatal,
}

/// `target:VERB:occurrence:KIND`. Occurrence counts real (non-replayed)
/// executions of that verb on that target, starting at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target_id: String,
    pub verb: Verb,
    pub occurrence: u32,
    pub kind: FaultKind,
}

impl FromStr for FaultSpec {
    type Err = FulfillmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FulfillmentError::BadFaultSpec(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [target, verb, occ, kind] = parts.as_slice() else {
            return Err(bad());
        };
        let occurrence: u32 = occ.parse().map_err(|_| bad())?;
        if target.is_empty() || occurrence == 0 {
            return Err(bad());
        }
        let kind = match *kind {
            "RETRYABLE" => FaultKind::Retryable,
            "FATAL" => FaultKind::Fatal,
            _ => return Err(bad()),
        };
        Ok(FaultSpec {
            target_id: target.to_string(),
            verb: verb.parse().map_err(|_| bad())?,
            occurrence,
            kind,
        })
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FaultKind::Retryable => "RETRYABLE",
            FaultKind::Fatal => "FATAL",
        };
        write!(f, "{}:{}:{}:{}", self.target_id, self.verb, self.occurrence, kind)
    }
}

/// Everything a target keeps besides the adapter itself. Persisted per
/// target so a restarted engine sees the same idempotency store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostRecord {
    pub state: PlatformState,
    /// idempotency key -> recorded outputs
    pub idempotency: BTreeMap<String, DataMap>,
    /// idempotency key -> number of times the platform really applied it
    pub effects: BTreeMap<String, u32>,
    pub checkpoints: BTreeMap<String, StateSnapshot>,
    /// suborder id -> position of its first execution on this target
    pub exec_seqs: BTreeMap<String, u64>,
    pub next_seq: u64,
    /// verb name -> real executions so far (fault occurrence counter)
    pub verb_counts: BTreeMap<String, u32>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

struct Slot {
    adapter: Box<dyn TargetAdapter>,
    rec: HostRecord,
}

impl Slot {
    /// Runs one action through fault injection and the idempotency store.
    fn run(&mut self, action: &Action) -> Result<DataMap, (ResultStatus, ActionFailure)> {
        if let Some(out) = self.rec.idempotency.get(&action.idempotency_key) {
            return Ok(out.clone());
        }
        let count = self.rec.verb_counts.entry(action.verb.as_str().to_string()).or_insert(0);
        *count += 1;
        let n = *count;
        if let Some(f) = self.rec.faults.iter().find(|f| f.verb == action.verb && f.occurrence == n) {
            let status = match f.kind {
                FaultKind::Retryable => ResultStatus::RetryableFailure,
                FaultKind::Fatal => ResultStatus::FatalFailure,
            };
            return Err((
                status,
                ActionFailure {
                    code: "INJECTED_FAULT".into(),
                    message: format!("injected {f}"),
                },
            ));
        }
        let out = self
            .adapter
            .apply(action)
            .map_err(|e| (ResultStatus::FatalFailure, e))?;
        self.rec.idempotency.insert(action.idempotency_key.clone(), out.clone());
        *self.rec.effects.entry(action.idempotency_key.clone()).or_insert(0) += 1;
        Ok(out)
    }
}

pub struct Registry {
    slots: BTreeMap<String, Mutex<Slot>>,
    tasks: Arc<TaskStore>,
    seed: u64,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("targets", &self.target_ids()).finish()
    }
}

impl Registry {
    pub fn new(seed: u64) -> Self {
        Self {
            slots: BTreeMap::new(),
            tasks: Arc::new(TaskStore::new()),
            seed,
        }
    }

    /// The shipped platforms: crm, broadband, voice, billing, workforce and
    /// the partner reached over the gateway.
    pub fn with_defaults(seed: u64) -> Self {
        let mut r = Self::new(seed);
        for t in DEFAULT_TARGETS {
            if t == PARTNER_TARGET {
                r.register_target(Box::new(PartnerGateway::new(t, PARTNER_ID, seed))).expect("fresh");
            } else {
                r.register_target(Box::new(SimPlatform::for_target(t, seed))).expect("fresh");
            }
        }
        r
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tasks(&self) -> &Arc<TaskStore> {
        &self.tasks
    }

    pub fn set_tasks(&mut self, tasks: Arc<TaskStore>) {
        self.tasks = tasks;
    }

    pub fn register_target(&mut self, adapter: Box<dyn TargetAdapter>) -> Result<(), FulfillmentError> {
        let id = adapter.target_id().to_string();
        if self.slots.contains_key(&id) {
            return Err(FulfillmentError::DuplicateTarget(id));
        }
        let rec = HostRecord {
            state: adapter.state().clone(),
            ..HostRecord::default()
        };
        self.slots.insert(id, Mutex::new(Slot { adapter, rec }));
        Ok(())
    }

    /// Registers a generic simulated platform for `target_id` unless one is
    /// already present.
    pub fn ensure_target(&mut self, target_id: &str) {
        if !self.slots.contains_key(target_id) {
            let seed = self.seed;
            self.register_target(Box::new(SimPlatform::for_target(target_id, seed)))
                .expect("checked absent");
        }
    }

    pub fn contains(&self, target_id: &str) -> bool {
        self.slots.contains_key(target_id)
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.slots.keys().cloned().collect()
    }

    fn slot(&self, target_id: &str) -> Result<MutexGuard<'_, Slot>, FulfillmentError> {
        let m = self
            .slots
            .get(target_id)
            .ok_or_else(|| FulfillmentError::UnknownTarget(target_id.to_string()))?;
        Ok(m.lock().unwrap_or_else(|p| p.into_inner()))
    }

    pub fn set_faults(&self, faults: &[FaultSpec]) -> Result<(), FulfillmentError> {
        for f in faults {
            if !self.contains(&f.target_id) {
                return Err(FulfillmentError::UnknownTarget(f.target_id.clone()));
            }
        }
        for (id, m) in &self.slots {
            let mut s = m.lock().unwrap_or_else(|p| p.into_inner());
            s.rec.faults = faults.iter().filter(|f| &f.target_id == id).cloned().collect();
        }
        Ok(())
    }

    pub fn platform_state(&self, target_id: &str) -> Result<PlatformState, FulfillmentError> {
        Ok(self.slot(target_id)?.adapter.state().clone())
    }

    pub fn set_platform_state(&self, state: PlatformState) -> Result<(), FulfillmentError> {
        let mut s = self.slot(&state.target_id)?;
        s.adapter.set_state(state);
        Ok(())
    }

    pub fn dump(&self, target_id: &str) -> Result<String, FulfillmentError> {
        Ok(self.platform_state(target_id)?.dump())
    }

    /// Canonical dumps of every platform, keyed by target.
    pub fn dumps(&self) -> BTreeMap<String, String> {
        self.slots
            .keys()
            .map(|t| (t.clone(), self.dump(t).expect("registered")))
            .collect()
    }

    /// How many times the platform really applied `idempotency_key`.
    pub fn effect_count(&self, target_id: &str, idempotency_key: &str) -> u32 {
        self.slot(target_id)
            .map(|s| s.rec.effects.get(idempotency_key).copied().unwrap_or(0))
            .unwrap_or(0)
    }

    pub fn record(&self, target_id: &str) -> Result<HostRecord, FulfillmentError> {
        let s = self.slot(target_id)?;
        Ok(HostRecord {
            state: s.adapter.state().clone(),
            ..s.rec.clone()
        })
    }

    pub fn load_record(&self, target_id: &str, rec: HostRecord) -> Result<(), FulfillmentError> {
        let mut s = self.slot(target_id)?;
        s.adapter.set_state(rec.state.clone());
        s.rec = rec;
        Ok(())
    }

    /// Translates and executes a sub-order. Never fails past this boundary:
    /// every problem comes back inside the result.
    pub fn execute(&self, suborder: &SubOrder, bindings: &DataMap) -> FulfillmentResult {
        let sid = suborder.suborder_id.as_str();
        let mut slot = match self.slot(&suborder.target_id) {
            Ok(s) => s,
            Err(e) => return FulfillmentResult::failure(sid, ResultStatus::FatalFailure, e.code(), e.to_string()),
        };
        let actions = match platform::translate(suborder, slot.adapter.as_ref(), bindings) {
            Ok(a) => a,
            Err(e) => return FulfillmentResult::failure(sid, ResultStatus::FatalFailure, e.code(), e.to_string()),
        };

        let checkpoint_id = format!("{}@{}", suborder.target_id, sid);
        if !slot.rec.exec_seqs.contains_key(sid) {
            slot.rec.next_seq += 1;
            let seq = slot.rec.next_seq;
            slot.rec.exec_seqs.insert(sid.to_string(), seq);
            let snap = platform::snapshot(slot.adapter.as_ref(), &checkpoint_id);
            slot.rec.checkpoints.insert(checkpoint_id.clone(), snap);
        }
        let exec_seq = slot.rec.exec_seqs.get(sid).copied();
        let finish = |mut r: FulfillmentResult, applied: Vec<Action>| {
            r.applied_actions = applied;
            r.checkpoint_ref = Some(checkpoint_id.clone());
            r.exec_seq = exec_seq;
            r
        };

        let mut applied = Vec::new();
        let mut data = DataMap::new();
        for action in actions {
            let mut action = action;
            if action.verb == Verb::CompleteTask && !slot.rec.idempotency.contains_key(&action.idempotency_key) {
                match self.tasks.for_suborder(sid) {
                    None => {
                        let instructions = action.param("instructions").to_string();
                        let task = self
                            .tasks
                            .open(suborder, action.output_keys().into_iter().collect(), &instructions);
                        return finish(FulfillmentResult::pending_human(sid, &task.task_id), applied);
                    }
                    Some(t) if t.state == TaskState::Open => {
                        return finish(FulfillmentResult::pending_human(sid, &t.task_id), applied);
                    }
                    Some(t) if t.state == TaskState::Cancelled => {
                        let r = FulfillmentResult::failure(
                            sid,
                            ResultStatus::FatalFailure,
                            "TASK_CANCELLED",
                            format!("task {} was cancelled", t.task_id),
                        );
                        return finish(r, applied);
                    }
                    Some(t) => {
                        action.params.extend(t.data.clone());
                    }
                }
            }
            match slot.run(&action) {
                Ok(out) => {
                    data.extend(out);
                    applied.push(action);
                }
                Err((status, f)) => {
                    let msg = format!("{} {}: {}", action.verb, action.idempotency_key, f.message);
                    return finish(FulfillmentResult::failure(sid, status, &f.code, msg), applied);
                }
            }
        }

        let missing: Vec<&String> = suborder.provides_data.iter().filter(|k| !data.contains_key(*k)).collect();
        if !missing.is_empty() {
            let r = FulfillmentResult::failure(
                sid,
                ResultStatus::FatalFailure,
                "MISSING_OUTPUT",
                format!("target did not produce {missing:?}"),
            );
            return finish(r, applied);
        }
        data.retain(|k, _| suborder.provides_data.contains(k));
        let mut r = finish(FulfillmentResult::success(sid, data), applied);
        r.task_id = self.tasks.for_suborder(sid).map(|t| t.task_id);
        r
    }

    /// Applies compensating actions on one target, stopping at the first
    /// failure.
    pub fn run_actions(&self, target_id: &str, actions: &[Action]) -> Result<(), FulfillmentError> {
        let mut slot = self.slot(target_id)?;
        for a in actions {
            slot.run(a).map_err(|(_, f)| FulfillmentError::UnsupportedItem {
                suborder_id: a.idempotency_key.clone(),
                detail: format!("{} failed: {} {}", a.verb, f.code, f.message),
            })?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, target_id: &str, checkpoint_ref: &str) -> Result<StateSnapshot, FulfillmentError> {
        self.slot(target_id)?
            .rec
            .checkpoints
            .get(checkpoint_ref)
            .cloned()
            .ok_or_else(|| FulfillmentError::UnknownCheckpoint(checkpoint_ref.to_string()))
    }

    pub fn restore_checkpoint(&self, target_id: &str, checkpoint_ref: &str) -> Result<(), FulfillmentError> {
        let mut slot = self.slot(target_id)?;
        let snap = slot
            .rec
            .checkpoints
            .get(checkpoint_ref)
            .cloned()
            .ok_or_else(|| FulfillmentError::UnknownCheckpoint(checkpoint_ref.to_string()))?;
        if !snap.verify() {
            return Err(FulfillmentError::UnknownCheckpoint(format!("{checkpoint_ref} (hash mismatch)")));
        }
        platform::restore(slot.adapter.as_mut(), &snap)
    }
}
