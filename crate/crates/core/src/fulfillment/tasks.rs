//! Human task store. A task stands in for a manual step (a technician visit,
//! a back-office check) inside a sub-order's action list.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::action::{DataMap, FulfillmentResult};
use crate::order::SubOrder;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task_id}` is missing output keys {missing:?}")]
    MissingOutputKeys { task_id: String, missing: Vec<String> },
    #[error("task `{0}` is already done")]
    AlreadyDone(String),
    #[error("task `{0}` was cancelled")]
    Cancelled(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Open,
    Done,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanTask {
    pub task_id: String,
    pub suborder_id: String,
    pub order_id: String,
    pub target_id: String,
    pub instructions: String,
    pub required_output_keys: BTreeSet<String>,
    pub state: TaskState,
    #[serde(default)]
    pub data: DataMap,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStoreData {
    pub tasks: BTreeMap<String, HumanTask>,
    pub next_id: u64,
}

#[derive(Debug, Default)]
pub struct TaskStore {
    inner: Mutex<TaskStoreData>,
}

impl TaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_data(data: TaskStoreData) -> Self {
        Self {
            inner: Mutex::new(data),
        }
    }

    pub fn data(&self) -> TaskStoreData {
        self.lock().clone()
    }

    fn lock(&self) -> MutexGuard<'_, TaskStoreData> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Opens a task for `suborder`, or returns the one already opened for it.
    pub fn open(&self, suborder: &SubOrder, required: BTreeSet<String>, instructions: &str) -> HumanTask {
        let mut st = self.lock();
        if let Some(t) = st.tasks.values().find(|t| t.suborder_id == suborder.suborder_id) {
            return t.clone();
        }
        st.next_id += 1;
        let task = HumanTask {
            task_id: format!("T-{}", st.next_id),
            suborder_id: suborder.suborder_id.clone(),
            order_id: suborder.order_id.clone(),
            target_id: suborder.target_id.clone(),
            instructions: instructions.to_string(),
            required_output_keys: required,
            state: TaskState::Open,
            data: DataMap::new(),
        };
        st.tasks.insert(task.task_id.clone(), task.clone());
        task
    }

    pub fn get(&self, task_id: &str) -> Option<HumanTask> {
        self.lock().tasks.get(task_id).cloned()
    }

    pub fn for_suborder(&self, suborder_id: &str) -> Option<HumanTask> {
        self.lock().tasks.values().find(|t| t.suborder_id == suborder_id).cloned()
    }

    pub fn list(&self) -> Vec<HumanTask> {
        self.lock().tasks.values().cloned().collect()
    }

    pub fn complete(&self, task_id: &str, data: DataMap) -> Result<FulfillmentResult, TaskError> {
        let mut st = self.lock();
        let task = st
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| TaskError::UnknownTask(task_id.to_string()))?;
        match task.state {
            TaskState::Done => return Err(TaskError::AlreadyDone(task_id.to_string())),
            TaskState::Cancelled => return Err(TaskError::Cancelled(task_id.to_string())),
            TaskState::Open => {}
        }
        let missing: Vec<String> = task
            .required_output_keys
            .iter()
            .filter(|k| !data.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(TaskError::MissingOutputKeys {
                task_id: task_id.to_string(),
                missing,
            });
        }
        task.state = TaskState::Done;
        task.data = data.clone();
        let mut result = FulfillmentResult::success(&task.suborder_id, data);
        result.task_id = Some(task.task_id.clone());
        Ok(result)
    }

    /// Cancels the open task of a sub-order being compensated.
    pub fn cancel_for_suborder(&self, suborder_id: &str) -> Option<String> {
        let mut st = self.lock();
        let task = st
            .tasks
            .values_mut()
            .find(|t| t.suborder_id == suborder_id && t.state == TaskState::Open)?;
        task.state = TaskState::Cancelled;
        Some(task.task_id.clone())
    }
}

/// Opens a task requiring every data key the sub-order declares.
pub fn create_task(store: &TaskStore, suborder: &SubOrder) -> (HumanTask, FulfillmentResult) {
    let instructions = match suborder.items.first() {
        Some(item) => format!("visit premises: {}", item.service_code),
        None => "visit premises".to_string(),
    };
    let task = store.open(suborder, suborder.provides_data.clone(), &instructions);
    let result = FulfillmentResult::pending_human(&suborder.suborder_id, &task.task_id);
    (task, result)
}

pub fn complete_task(store: &TaskStore, task_id: &str, data: DataMap) -> Result<FulfillmentResult, TaskError> {
    store.complete(task_id, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fulfillment::action::ResultStatus;
    use crate::order::{SubOrderKind, SubOrderState};

    fn visit(provides: &[&str]) -> SubOrder {
        SubOrder {
            suborder_id: "O1-L1-workforce".into(),
            order_id: "O1".into(),
            line_id: Some("L1".into()),
            target_id: "workforce".into(),
            kind: SubOrderKind::HumanTask,
            items: vec![],
            requires_data: BTreeSet::new(),
            provides_data: provides.iter().map(|s| s.to_string()).collect(),
            depends_on: BTreeSet::new(),
            state: SubOrderState::Dispatched,
        }
    }

    fn data(kv: &[(&str, &str)]) -> DataMap {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn visit_task_requires_confirmation() {
        let store = TaskStore::new();
        let (task, result) = create_task(&store, &visit(&["visit.confirmation"]));
        assert_eq!(task.state, TaskState::Open);
        assert!(task.instructions.starts_with("visit premises"));
        assert_eq!(task.required_output_keys, BTreeSet::from(["visit.confirmation".to_string()]));
        assert_eq!(result.status, ResultStatus::PendingHuman);
        assert_eq!(result.task_id.as_deref(), Some("T-1"));
    }

    #[test]
    fn duplicate_create_returns_existing() {
        let store = TaskStore::new();
        let (a, _) = create_task(&store, &visit(&["k"]));
        let (b, _) = create_task(&store, &visit(&["k"]));
        assert_eq!(a, b);
        assert_eq!(store.list().len(), 1);
    }

    #[test]
    fn task_without_required_keys_completes_with_nothing() {
        let store = TaskStore::new();
        let (t, _) = create_task(&store, &visit(&[]));
        let r = complete_task(&store, &t.task_id, DataMap::new()).unwrap();
        assert_eq!(r.status, ResultStatus::Success);
        assert!(r.provided_data.is_empty());
    }

    #[test]
    fn completion_paths() {
        let store = TaskStore::new();
        let (t, _) = create_task(&store, &visit(&["visit.confirmation"]));
        let err = complete_task(&store, &t.task_id, data(&[("other", "x")])).unwrap_err();
        assert!(matches!(err, TaskError::MissingOutputKeys { .. }));
        assert_eq!(store.get(&t.task_id).unwrap().state, TaskState::Open);

        let ok = complete_task(&store, &t.task_id, data(&[("visit.confirmation", "OK")])).unwrap();
        assert_eq!(ok.provided_data, data(&[("visit.confirmation", "OK")]));
        assert_eq!(ok.suborder_id, "O1-L1-workforce");

        assert_eq!(
            complete_task(&store, &t.task_id, data(&[("visit.confirmation", "OK")])),
            Err(TaskError::AlreadyDone(t.task_id.clone()))
        );
        assert_eq!(
            complete_task(&store, "T-99", DataMap::new()),
            Err(TaskError::UnknownTask("T-99".into()))
        );
    }

    #[test]
    fn cancelled_task_cannot_complete() {
        let store = TaskStore::new();
        let (t, _) = create_task(&store, &visit(&[]));
        assert_eq!(store.cancel_for_suborder("O1-L1-workforce"), Some(t.task_id.clone()));
        assert_eq!(complete_task(&store, &t.task_id, DataMap::new()), Err(TaskError::Cancelled(t.task_id)));
    }
}
