//! Order orchestration over the message bus.
//!
//! The engine consumes four queues: new orders, task completions,
//! fulfillment requests and fulfillment results. Every state change goes
//! through the journal first, so a fresh engine can pick up where a stopped
//! one left off.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::Catalog;
use crate::clock::{SharedClock, Timestamp};
use crate::compensation::{compensate_observed, entry_id_for, Recording, StrategyConfig};
use crate::fulfillment::{DataMap, FulfillmentResult, Registry, ResultError, ResultStatus};
use crate::journal::{replay_records, AggregateError, Journal, JournalError, JournalRecord, OrderAggregate, OrderEvent};
use crate::management::decompose::decompose;
use crate::management::plan::{build_plan, initial_bindings, PlanError};
use crate::management::rules::{validate_order, Environment, Facts, RuleSet};
use crate::msgbus::{Bus, BusError, Message};
use crate::order::{CanonicalOrder, OrderState, SubOrder, SubOrderState};

pub const ORDERS_QUEUE: &str = "orders.management";
pub const TASKS_QUEUE: &str = "orders.tasks";
pub const REQUESTS_QUEUE: &str = "fulfillment.requests";
pub const RESULTS_QUEUE: &str = "orders.results";

/// Polled in this order, so in-flight work finishes before new orders start.
const POLL_ORDER: [&str; 4] = [RESULTS_QUEUE, TASKS_QUEUE, REQUESTS_QUEUE, ORDERS_QUEUE];

/// Every queue the engine uses.
pub const QUEUES: [&str; 4] = POLL_ORDER;

pub fn declare_queues(bus: &Bus) {
    for q in POLL_ORDER {
        if !bus.has_queue(q) {
            bus.declare_default(q);
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("order {order_id}: {source}")]
    Aggregate { order_id: String, source: AggregateError },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown order `{0}`")]
    UnknownOrder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRequest {
    pub dispatch_id: String,
    pub order_id: String,
    pub suborder: SubOrder,
    pub bindings: DataMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub dispatch_id: String,
    pub order_id: String,
    pub result: FulfillmentResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCompletion {
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineOptions {
    pub max_retries: u32,
    pub retry_backoff: Duration,
    /// Dispatch every ready sub-order of an order at once instead of one at
    /// a time. Also runs independent compensation steps concurrently.
    pub parallel_dispatch: bool,
    pub workers: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            retry_backoff: Duration::from_millis(100),
            parallel_dispatch: false,
            workers: 1,
        }
    }
}

/// Read-only configuration shared by all orders.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub catalog: Catalog,
    pub rules: RuleSet,
    pub facts: Facts,
    pub strategy: StrategyConfig,
    pub options: EngineOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub orders: usize,
    pub resumed: Vec<String>,
    pub redispatched: Vec<String>,
}

/// Something the engine received but could not use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedMessage {
    pub queue: String,
    pub message_id: String,
    pub reason: String,
}

type Slot = Arc<Mutex<OrderAggregate>>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    bus: Arc<Bus>,
    registry: Arc<Registry>,
    journal: Arc<Journal>,
    clock: SharedClock,
    orders: Mutex<BTreeMap<String, Slot>>,
    /// Orders that must compensate once their in-flight dispatches return.
    doomed: Mutex<BTreeMap<String, String>>,
    dropped: Mutex<Vec<DroppedMessage>>,
    /// Dispatch ids the fulfillment side has taken, with the result once it
    /// is known. A redelivered request is answered from here instead of
    /// being executed again.
    served: Mutex<BTreeMap<String, Option<FulfillmentResult>>>,
}

enum Handled {
    Done,
    Drop(String),
}

impl Engine {
    pub fn new(config: EngineConfig, bus: Arc<Bus>, registry: Arc<Registry>, journal: Arc<Journal>, clock: SharedClock) -> Self {
        declare_queues(&bus);
        Self {
            config,
            bus,
            registry,
            journal,
            clock,
            orders: Mutex::new(BTreeMap::new()),
            doomed: Mutex::new(BTreeMap::new()),
            served: Mutex::new(BTreeMap::new()),
            dropped: Mutex::new(Vec::new()),
        }
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.bus
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn journal(&self) -> &Arc<Journal> {
        &self.journal
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn dropped(&self) -> Vec<DroppedMessage> {
        lock(&self.dropped).clone()
    }

    /// Current aggregate, rebuilt from the journal if not cached.
    pub fn aggregate(&self, order_id: &str) -> Result<OrderAggregate, EngineError> {
        let slot = self.slot(order_id)?.ok_or_else(|| EngineError::UnknownOrder(order_id.to_string()))?;
        let agg = lock(&slot).clone();
        Ok(agg)
    }

    pub fn order_ids(&self) -> Vec<String> {
        self.journal.order_ids()
    }

    fn slot(&self, order_id: &str) -> Result<Option<Slot>, EngineError> {
        let mut m = lock(&self.orders);
        if let Some(s) = m.get(order_id) {
            return Ok(Some(s.clone()));
        }
        let recs = self.journal.records_for(order_id);
        if recs.is_empty() {
            return Ok(None);
        }
        let agg = replay_records(order_id, &recs)?;
        let s = Arc::new(Mutex::new(agg));
        m.insert(order_id.to_string(), s.clone());
        Ok(Some(s))
    }

    fn emit(&self, agg: &mut OrderAggregate, event: OrderEvent) -> Result<(), EngineError> {
        let mut next = agg.clone();
        next.apply(&event).map_err(|source| EngineError::Aggregate {
            order_id: agg.order_id.clone(),
            source,
        })?;
        self.journal.append(&agg.order_id, event, self.clock.now())?;
        *agg = next;
        Ok(())
    }

    /// Processes one message, if any is waiting. Returns whether it did.
    pub fn step(&self) -> Result<bool, EngineError> {
        for q in POLL_ORDER {
            let msg = match self.bus.receive(q) {
                Ok(m) => m,
                Err(BusError::Empty(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            match self.handle(q, &msg)? {
                Handled::Done => {}
                Handled::Drop(reason) => lock(&self.dropped).push(DroppedMessage {
                    queue: q.to_string(),
                    message_id: msg.message_id.clone(),
                    reason,
                }),
            }
            match self.bus.ack(&msg) {
                Ok(()) | Err(BusError::NotInFlight(_)) => {}
                Err(e) => return Err(e.into()),
            }
            return Ok(true);
        }
        Ok(false)
    }

    fn idle(&self) -> bool {
        POLL_ORDER
            .iter()
            .all(|q| self.bus.depth(q).unwrap_or(0) == 0 && self.bus.in_flight(q).unwrap_or(0) == 0)
    }

    /// Runs until every queue is drained. Returns the number of messages
    /// handled.
    pub fn run_until_idle(&self) -> Result<usize, EngineError> {
        let workers = self.config.options.workers.max(1);
        if workers == 1 {
            let mut n = 0;
            while self.step()? {
                n += 1;
            }
            return Ok(n);
        }
        let count = AtomicUsize::new(0);
        let failure: Mutex<Option<EngineError>> = Mutex::new(None);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if lock(&failure).is_some() {
                        break;
                    }
                    match self.step() {
                        Ok(true) => {
                            count.fetch_add(1, Ordering::SeqCst);
                        }
                        Ok(false) if self.idle() => break,
                        Ok(false) => std::thread::sleep(Duration::from_micros(200)),
                        Err(e) => {
                            lock(&failure).get_or_insert(e);
                            break;
                        }
                    }
                });
            }
        });
        match failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
            Some(e) => Err(e),
            None => Ok(count.into_inner()),
        }
    }

    fn handle(&self, queue: &str, msg: &Message) -> Result<Handled, EngineError> {
        let bad = |e: serde_json::Error| Ok(Handled::Drop(format!("bad payload: {e}")));
        match queue {
            ORDERS_QUEUE => match serde_json::from_value::<CanonicalOrder>(msg.payload.clone()) {
                Ok(o) => self.on_order(o),
                Err(e) => bad(e),
            },
            TASKS_QUEUE => match serde_json::from_value::<TaskCompletion>(msg.payload.clone()) {
                Ok(t) => self.on_task(&t.task_id),
                Err(e) => bad(e),
            },
            REQUESTS_QUEUE => match serde_json::from_value::<DispatchRequest>(msg.payload.clone()) {
                Ok(r) => self.on_request(r),
                Err(e) => bad(e),
            },
            RESULTS_QUEUE => match serde_json::from_value::<ResultMessage>(msg.payload.clone()) {
                Ok(r) => self.on_result(r),
                Err(e) => bad(e),
            },
            other => Ok(Handled::Drop(format!("no handler for {other}"))),
        }
    }

    fn on_order(&self, order: CanonicalOrder) -> Result<Handled, EngineError> {
        let slot = match self.slot(&order.order_id)? {
            Some(s) => s,
            None => {
                // Sent without going through capture; journal it here.
                let mut agg = OrderAggregate::new(&order.order_id);
                self.emit(&mut agg, OrderEvent::Captured { order: order.clone() })?;
                let s = Arc::new(Mutex::new(agg));
                lock(&self.orders).insert(order.order_id.clone(), s.clone());
                s
            }
        };
        let mut agg = lock(&slot);
        if agg.state != OrderState::Captured {
            return Ok(Handled::Drop(format!("order {} already {}", order.order_id, agg.state)));
        }
        self.manage(&mut agg)?;
        Ok(Handled::Done)
    }

    /// Moves an order forward from wherever the management phase left it.
    fn manage(&self, agg: &mut OrderAggregate) -> Result<(), EngineError> {
        let order = agg
            .order
            .clone()
            .ok_or_else(|| EngineError::Invariant(format!("{} has no captured order", agg.order_id)))?;
        if agg.state == OrderState::Captured {
            let env = Environment {
                facts: &self.config.facts,
                catalog: &self.config.catalog,
            };
            let result = validate_order(&order, &order.customer, &self.config.rules, env);
            if !result.passed {
                return self.emit(agg, OrderEvent::Rejected { result });
            }
            self.emit(agg, OrderEvent::Validated { result })?;
        }
        if agg.state == OrderState::Validated {
            let planned = decompose(&order, &self.config.catalog)
                .map_err(|e| e.to_string())
                .and_then(|subs| build_plan(subs, initial_bindings(&order)).map_err(|e| e.to_string()));
            match planned {
                Ok(plan) => self.emit(agg, OrderEvent::Decomposed { plan })?,
                Err(reason) => return self.emit(agg, OrderEvent::PlanningFailed { reason }),
            }
        }
        if agg.state == OrderState::Decomposed {
            self.emit(agg, OrderEvent::Started)?;
        }
        self.advance(agg)
    }

    fn latest_result<'a>(agg: &'a OrderAggregate, suborder_id: &str) -> Option<&'a FulfillmentResult> {
        agg.current_dispatch(suborder_id)
            .and_then(|d| agg.dispatches[d].result.as_ref())
    }

    fn retryable_failures(agg: &OrderAggregate, suborder_id: &str) -> u32 {
        agg.dispatches
            .values()
            .filter(|d| d.suborder_id == suborder_id)
            .filter(|d| d.result.as_ref().map(|r| r.status) == Some(ResultStatus::RetryableFailure))
            .count() as u32
    }

    fn describe(r: &FulfillmentResult) -> String {
        match &r.error {
            Some(e) => format!("{}: {}: {}", r.suborder_id, e.code, e.message),
            None => format!("{}: {}", r.suborder_id, r.status.as_str()),
        }
    }

    /// Schedules retries, dispatches ready work, completes or compensates.
    fn advance(&self, agg: &mut OrderAggregate) -> Result<(), EngineError> {
        if agg.state != OrderState::InProgress {
            return Ok(());
        }
        let plan = agg.plan.clone().ok_or_else(|| EngineError::Invariant("in progress without plan".into()))?;
        let already_doomed = lock(&self.doomed).contains_key(&agg.order_id);
        for node in plan.nodes.values().filter(|n| n.state == SubOrderState::Failed) {
            let sid = &node.suborder_id;
            let Some(last) = Self::latest_result(agg, sid).cloned() else {
                continue;
            };
            let failures = Self::retryable_failures(agg, sid);
            if last.status == ResultStatus::RetryableFailure && failures <= self.config.options.max_retries && !already_doomed {
                self.clock.sleep(self.config.options.retry_backoff);
                self.emit(
                    agg,
                    OrderEvent::RetryScheduled {
                        suborder_id: sid.clone(),
                        attempt: failures + 1,
                    },
                )?;
            } else {
                let mut reason = Self::describe(&last);
                if last.status == ResultStatus::RetryableFailure {
                    reason = format!("{reason} (gave up after {failures} attempts)");
                }
                lock(&self.doomed).entry(agg.order_id.clone()).or_insert(reason);
            }
        }

        let plan = agg.plan.clone().expect("checked above");
        let in_flight = plan.nodes.values().filter(|n| n.state == SubOrderState::Dispatched).count();
        let doom = lock(&self.doomed).get(&agg.order_id).cloned();
        if let Some(reason) = doom {
            if in_flight == 0 {
                lock(&self.doomed).remove(&agg.order_id);
                self.start_compensation(agg, reason)?;
            }
            return Ok(());
        }
        if plan.all_done() {
            return self.emit(agg, OrderEvent::Completed);
        }
        let ready: Vec<SubOrder> = plan.ready().into_iter().cloned().collect();
        let picks: Vec<SubOrder> = if self.config.options.parallel_dispatch {
            ready
        } else if in_flight == 0 {
            ready.into_iter().take(1).collect()
        } else {
            Vec::new()
        };
        for node in picks {
            self.dispatch(agg, &node)?;
        }
        Ok(())
    }

    fn dispatch(&self, agg: &mut OrderAggregate, node: &SubOrder) -> Result<(), EngineError> {
        let plan = agg.plan.as_ref().expect("dispatch needs a plan");
        let bindings = plan.view_for(node);
        if let Some(k) = node.requires_data.iter().find(|k| !bindings.contains_key(*k)) {
            return Err(EngineError::Invariant(format!("{} dispatched without `{k}`", node.suborder_id)));
        }
        let sid = node.suborder_id.clone();
        let dispatch_id = format!("{sid}#{}", agg.attempts(&sid) + 1);
        self.emit(
            agg,
            OrderEvent::Dispatched {
                suborder_id: sid.clone(),
                dispatch_id: dispatch_id.clone(),
                attempt: agg.attempts(&sid) + 1,
                bindings: bindings.clone(),
            },
        )?;
        let suborder = agg.plan.as_ref().and_then(|p| p.node(&sid)).cloned().expect("node exists");
        self.send_request(DispatchRequest {
            dispatch_id,
            order_id: agg.order_id.clone(),
            suborder,
            bindings,
        })
    }

    fn send_request(&self, req: DispatchRequest) -> Result<(), EngineError> {
        let corr = Some(req.dispatch_id.clone());
        let payload = serde_json::to_value(&req).expect("request serializes");
        self.bus.send(REQUESTS_QUEUE, payload, corr, Some(RESULTS_QUEUE.into()))?;
        Ok(())
    }

    /// Fulfillment side: run the sub-order on its target and report back.
    fn on_request(&self, req: DispatchRequest) -> Result<Handled, EngineError> {
        let cached = {
            let mut served = lock(&self.served);
            match served.get(&req.dispatch_id) {
                Some(None) => return Ok(Handled::Drop(format!("{} already executing", req.dispatch_id))),
                Some(Some(r)) => Some(r.clone()),
                None => {
                    served.insert(req.dispatch_id.clone(), None);
                    None
                }
            }
        };
        let result = match cached {
            Some(r) => r,
            None => {
                let r = self.registry.execute(&req.suborder, &req.bindings);
                lock(&self.served).insert(req.dispatch_id.clone(), Some(r.clone()));
                r
            }
        };
        let msg = ResultMessage {
            dispatch_id: req.dispatch_id.clone(),
            order_id: req.order_id,
            result,
        };
        let payload: Value = serde_json::to_value(&msg).expect("result serializes");
        self.bus.send(RESULTS_QUEUE, payload, Some(req.dispatch_id), None)?;
        Ok(Handled::Done)
    }

    fn on_result(&self, msg: ResultMessage) -> Result<Handled, EngineError> {
        let Some(slot) = self.slot(&msg.order_id)? else {
            return Ok(Handled::Drop(format!("result for unknown order {}", msg.order_id)));
        };
        let mut agg = lock(&slot);
        let Some(rec) = agg.dispatches.get(&msg.dispatch_id) else {
            return Ok(Handled::Drop(format!("result for unknown dispatch {}", msg.dispatch_id)));
        };
        if rec.suborder_id != msg.result.suborder_id {
            return Ok(Handled::Drop(format!("result for {} under dispatch {}", msg.result.suborder_id, msg.dispatch_id)));
        }
        if let Some(prev) = &rec.result {
            // Only two successes can disagree about data. Anything else is a
            // stale copy of an attempt the order has already moved past.
            let conflict = prev.status == ResultStatus::Success
                && msg.result.status == ResultStatus::Success
                && prev.provided_data != msg.result.provided_data;
            if conflict && agg.state == OrderState::InProgress {
                let reason = format!("BINDING_CONFLICT: redelivered result for {} differs", msg.dispatch_id);
                lock(&self.doomed).entry(agg.order_id.clone()).or_insert(reason);
                self.advance(&mut agg)?;
                return Ok(Handled::Done);
            }
            return Ok(Handled::Drop(format!("duplicate result for {}", msg.dispatch_id)));
        }
        if agg.state != OrderState::InProgress {
            return Ok(Handled::Drop(format!("result while order is {}", agg.state)));
        }
        if agg.current_dispatch(&rec.suborder_id) != Some(msg.dispatch_id.as_str()) {
            return Ok(Handled::Drop(format!("stale dispatch {}", msg.dispatch_id)));
        }

        let mut result = msg.result;
        let plan = agg.plan.as_ref().expect("in progress");
        match plan.check_result(&result) {
            Ok(()) => {}
            Err(PlanError::BindingConflict { key, existing, new }) => {
                result = FulfillmentResult {
                    status: ResultStatus::FatalFailure,
                    provided_data: DataMap::new(),
                    error: Some(ResultError {
                        code: "BINDING_CONFLICT".into(),
                        message: format!("{key} already bound to {existing}, result says {new}"),
                    }),
                    ..result
                };
            }
            Err(e) => return Ok(Handled::Drop(e.to_string())),
        }
        self.emit(
            &mut agg,
            OrderEvent::ResultApplied {
                dispatch_id: msg.dispatch_id,
                result: result.clone(),
            },
        )?;
        if result.status == ResultStatus::Success && !result.applied_actions.is_empty() {
            self.record_undo(&mut agg, &result, false)?;
        }
        self.advance(&mut agg)?;
        Ok(Handled::Done)
    }

    fn record_undo(&self, agg: &mut OrderAggregate, result: &FulfillmentResult, partial: bool) -> Result<bool, EngineError> {
        let plan = agg.plan.as_ref().expect("recording needs a plan");
        let node = plan.node(&result.suborder_id).cloned().expect("known node");
        let ancestors = plan.ancestors(&node.suborder_id);
        let rec = Recording {
            suborder: &node,
            forward: &result.applied_actions,
            checkpoint_ref: result.checkpoint_ref.as_deref(),
            exec_seq: result.exec_seq.unwrap_or(0),
            ancestors: &ancestors,
            recorded_at: self.clock.now(),
            partial,
        };
        match agg.undo.prepare(&rec, &self.config.strategy) {
            Ok(entry) => {
                self.emit(agg, OrderEvent::UndoRecorded { entry })?;
                Ok(true)
            }
            Err(e) => {
                let reason = format!("UNDO_NOT_RECORDED: {}: {e}", node.suborder_id);
                lock(&self.doomed).entry(agg.order_id.clone()).or_insert(reason);
                Ok(false)
            }
        }
    }

    fn start_compensation(&self, agg: &mut OrderAggregate, reason: String) -> Result<(), EngineError> {
        let plan = agg.plan.clone().expect("in progress");
        let mut unrecorded = Vec::new();
        for node in plan.nodes.values() {
            if node.state == SubOrderState::Done || agg.undo.get(&entry_id_for(&node.suborder_id)).is_some() {
                continue;
            }
            let Some(last) = Self::latest_result(agg, &node.suborder_id).cloned() else {
                continue;
            };
            if last.applied_actions.is_empty() {
                continue;
            }
            if !self.record_undo(agg, &last, true)? {
                unrecorded.push(node.suborder_id.clone());
            }
        }
        lock(&self.doomed).remove(&agg.order_id);
        self.emit(agg, OrderEvent::CompensationStarted { reason })?;
        for node in plan.nodes.values().filter(|n| n.state == SubOrderState::WaitingHuman) {
            self.registry.tasks().cancel_for_suborder(&node.suborder_id);
        }
        self.run_compensation(agg, unrecorded)
    }

    fn run_compensation(&self, agg: &mut OrderAggregate, unrecorded: Vec<String>) -> Result<(), EngineError> {
        let done: BTreeSet<String> = agg
            .compensation_steps
            .iter()
            .filter(|s| s.ok)
            .map(|s| s.entry_id.clone())
            .collect();
        let mut buffer = agg.undo.clone();
        buffer.entries.retain(|k, _| !done.contains(k));

        let mut err = None;
        let report = compensate_observed(&buffer, &self.registry, self.config.options.parallel_dispatch, |step| {
            if err.is_none() {
                if let Err(e) = self.emit(agg, OrderEvent::CompensationStep { step: step.clone() }) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if report.succeeded() && unrecorded.is_empty() {
            self.emit(agg, OrderEvent::Compensated { report })
        } else {
            let mut diag: Vec<String> = report
                .steps
                .iter()
                .filter(|s| !s.ok)
                .map(|s| format!("{} failed: {}", s.entry_id, s.error.clone().unwrap_or_default()))
                .collect();
            if !report.skipped.is_empty() {
                diag.push(format!("not attempted: {}", report.skipped.join(",")));
            }
            if !unrecorded.is_empty() {
                diag.push(format!("no undo entry for {}", unrecorded.join(",")));
            }
            self.emit(
                agg,
                OrderEvent::Failed {
                    diagnostic: format!("compensation incomplete: {}", diag.join("; ")),
                    report: Some(report),
                },
            )
        }
    }

    fn on_task(&self, task_id: &str) -> Result<Handled, EngineError> {
        let Some(task) = self.registry.tasks().get(task_id) else {
            return Ok(Handled::Drop(format!("unknown task {task_id}")));
        };
        let Some(slot) = self.slot(&task.order_id)? else {
            return Ok(Handled::Drop(format!("task for unknown order {}", task.order_id)));
        };
        let mut agg = lock(&slot);
        let waiting = agg.plan.as_ref().and_then(|p| p.state(&task.suborder_id)) == Some(SubOrderState::WaitingHuman);
        if agg.state != OrderState::InProgress || !waiting {
            return Ok(Handled::Drop(format!("{} is not waiting", task.suborder_id)));
        }
        if task.state != crate::fulfillment::TaskState::Done {
            return Ok(Handled::Drop(format!("task {task_id} is not done")));
        }
        self.emit(
            &mut agg,
            OrderEvent::Resumed {
                suborder_id: task.suborder_id.clone(),
                task_id: task_id.to_string(),
            },
        )?;
        self.advance(&mut agg)?;
        Ok(Handled::Done)
    }

    /// Completes a human task and tells the order manager about it.
    pub fn complete_task(&self, task_id: &str, data: DataMap) -> Result<(), EngineError> {
        self.registry
            .tasks()
            .complete(task_id, data)
            .map_err(|e| EngineError::Invariant(e.to_string()))?;
        self.publish_task_completion(task_id)
    }

    pub fn publish_task_completion(&self, task_id: &str) -> Result<(), EngineError> {
        let payload = serde_json::to_value(TaskCompletion {
            task_id: task_id.to_string(),
        })
        .expect("serializes");
        self.bus.send(TASKS_QUEUE, payload, None, None)?;
        Ok(())
    }

    /// Continues every unfinished order found in the journal. Meant for a
    /// fresh engine whose bus lost its messages.
    pub fn recover(&self) -> Result<RecoveryReport, EngineError> {
        let mut report = RecoveryReport::default();
        for order_id in self.journal.order_ids() {
            let Some(slot) = self.slot(&order_id)? else { continue };
            report.orders += 1;
            let mut agg = lock(&slot);
            match agg.state {
                OrderState::Captured | OrderState::Validated | OrderState::Decomposed => {
                    self.manage(&mut agg)?;
                    report.resumed.push(order_id.clone());
                }
                OrderState::InProgress => {
                    for did in agg.dispatch_log.clone() {
                        let rec = &agg.dispatches[&did];
                        let plan = agg.plan.as_ref().expect("in progress");
                        if rec.result.is_some() || plan.state(&rec.suborder_id) != Some(SubOrderState::Dispatched) {
                            continue;
                        }
                        let suborder = plan.node(&rec.suborder_id).cloned().expect("known node");
                        self.send_request(DispatchRequest {
                            dispatch_id: did.clone(),
                            order_id: order_id.clone(),
                            suborder,
                            bindings: rec.bindings.clone(),
                        })?;
                        report.redispatched.push(did.clone());
                    }
                    self.advance(&mut agg)?;
                    report.resumed.push(order_id.clone());
                }
                OrderState::Compensating => {
                    self.run_compensation(&mut agg, Vec::new())?;
                    report.resumed.push(order_id.clone());
                }
                _ => {}
            }
        }
        Ok(report)
    }
}

/// One line of the operator-facing event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: Timestamp,
    pub order_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suborder_id: Option<String>,
    pub event: String,
    pub detail: String,
}

fn kv(data: &DataMap) -> String {
    data.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

fn detail(event: &OrderEvent) -> String {
    use OrderEvent as E;
    match event {
        E::Captured { order } => format!("channel={} lines={}", order.channel_id, order.lines.len()),
        E::Validated { .. } => "passed".into(),
        E::Rejected { result } => result.failures.iter().map(|f| f.rule_id.as_str()).collect::<Vec<_>>().join(","),
        E::Decomposed { plan } => format!("suborders={} edges={}", plan.nodes.len(), plan.edges.len()),
        E::PlanningFailed { reason } => reason.clone(),
        E::Started | E::Completed => String::new(),
        E::Dispatched { dispatch_id, attempt, .. } => format!("dispatch={dispatch_id} attempt={attempt}"),
        E::ResultApplied { dispatch_id, result } => {
            let mut d = format!("dispatch={dispatch_id} status={}", result.status.as_str());
            if let Some(e) = &result.error {
                d.push_str(&format!(" error={}", e.code));
            }
            if !result.provided_data.is_empty() {
                d.push_str(&format!(" data={}", kv(&result.provided_data)));
            }
            if let Some(t) = &result.task_id {
                d.push_str(&format!(" task={t}"));
            }
            d
        }
        E::RetryScheduled { attempt, .. } => format!("attempt={attempt}"),
        E::UndoRecorded { entry } => format!("strategy={} partial={}", entry.strategy, entry.partial),
        E::Resumed { task_id, .. } => format!("task={task_id}"),
        E::CompensationStarted { reason } => reason.clone(),
        E::CompensationStep { step } => format!("entry={} strategy={} ok={}", step.entry_id, step.strategy, step.ok),
        E::Compensated { report } => format!("steps={}", report.steps.len()),
        E::Failed { diagnostic, .. } => diagnostic.clone(),
    }
}

pub fn event_log(records: &[JournalRecord]) -> Vec<LogRecord> {
    records
        .iter()
        .map(|r| LogRecord {
            ts: r.ts,
            order_id: r.order_id.clone(),
            suborder_id: r.event.suborder_id().map(str::to_string),
            event: r.event.name().to_string(),
            detail: detail(&r.event),
        })
        .collect()
}

/// JSON lines. With `normalize`, timestamps become their position in the
/// log so logs from different runs compare byte for byte.
pub fn event_log_text(log: &[LogRecord], normalize: bool) -> String {
    let mut out = String::new();
    for (i, r) in log.iter().enumerate() {
        let mut r = r.clone();
        if normalize {
            r.ts = i as Timestamp;
        }
        out.push_str(&serde_json::to_string(&r).expect("log serializes"));
        out.push('\n');
    }
    out
}
