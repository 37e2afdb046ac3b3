//! Execution plan: the sub-order DAG plus the data bindings produced so far.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::find_cycle;
use crate::fulfillment::{DataMap, FulfillmentResult, ResultStatus};
use crate::order::{binding_key, split_binding_key, SubOrder, SubOrderKind, SubOrderState, ORDER_SCOPE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("cyclic dependency {}", .0.join(" -> "))]
    CyclicDependency(Vec<String>),
    #[error("sub-order {suborder_id} requires `{key}` but no ancestor provides it")]
    UnsatisfiableData { suborder_id: String, key: String },
    #[error("sub-order {suborder_id} depends on unknown `{dependency}`")]
    UnknownDependency { suborder_id: String, dependency: String },
    #[error("billing sub-order {0} does not follow every other sub-order")]
    BillingNotLast(String),
    #[error("unknown sub-order `{0}`")]
    UnknownSubOrder(String),
    #[error("binding conflict on `{key}`: `{existing}` vs `{new}`")]
    BindingConflict { key: String, existing: String, new: String },
    #[error("sub-order {suborder_id} is {state:?}, cannot take a result")]
    NotAwaitingResult { suborder_id: String, state: SubOrderState },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub nodes: BTreeMap<String, SubOrder>,
    /// (blocker, blocked)
    pub edges: BTreeSet<(String, String)>,
    /// Qualified `<scope>/<key>` bindings.
    pub bindings: BTreeMap<String, String>,
}

/// Initial bindings for an order: each line's parameters in the line's
/// scope, customer facts in the order scope.
pub fn initial_bindings(order: &crate::order::CanonicalOrder) -> BTreeMap<String, String> {
    use crate::fulfillment::platform::{CUSTOMER_ADDRESS_KEY, CUSTOMER_ID_KEY};
    let mut b = BTreeMap::new();
    b.insert(binding_key(ORDER_SCOPE, CUSTOMER_ID_KEY), order.customer.customer_id.clone());
    b.insert(binding_key(ORDER_SCOPE, CUSTOMER_ADDRESS_KEY), order.customer.premises_address.clone());
    for l in &order.lines {
        for (k, v) in &l.params {
            b.insert(binding_key(&l.line_id, k), v.clone());
        }
    }
    b
}

fn ancestors_of(id: &str, preds: &BTreeMap<&str, Vec<&str>>) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![id];
    while let Some(n) = stack.pop() {
        for &p in preds.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(p.to_string()) {
                stack.push(p);
            }
        }
    }
    seen
}

/// A requirement is met by a binding in the node's own scope or the order
/// scope, or by an ancestor in one of those scopes that provides it.
fn key_reachable(plan: &ExecutionPlan, node: &SubOrder, key: &str, ancestors: &BTreeSet<String>) -> bool {
    let scope = node.scope();
    let scopes = [scope, ORDER_SCOPE];
    scopes.iter().any(|s| plan.bindings.contains_key(&binding_key(s, key)))
        || ancestors.iter().any(|a| {
            let an = &plan.nodes[a];
            an.provides_data.contains(key) && scopes.contains(&an.scope())
        })
}

pub fn build_plan(suborders: Vec<SubOrder>, bindings: BTreeMap<String, String>) -> Result<ExecutionPlan, PlanError> {
    let nodes: BTreeMap<String, SubOrder> = suborders
        .into_iter()
        .map(|mut s| {
            s.state = SubOrderState::Pending;
            (s.suborder_id.clone(), s)
        })
        .collect();
    let mut edges = BTreeSet::new();
    for n in nodes.values() {
        for d in &n.depends_on {
            if !nodes.contains_key(d) {
                return Err(PlanError::UnknownDependency {
                    suborder_id: n.suborder_id.clone(),
                    dependency: d.clone(),
                });
            }
            edges.insert((d.clone(), n.suborder_id.clone()));
        }
    }
    let ids: BTreeSet<String> = nodes.keys().cloned().collect();
    if let Some(cycle) = find_cycle(&ids, &edges) {
        return Err(PlanError::CyclicDependency(cycle));
    }
    let plan = ExecutionPlan { nodes, edges, bindings };
    let preds = plan.preds();
    for n in plan.nodes.values() {
        let anc = ancestors_of(&n.suborder_id, &preds);
        if let Some(k) = n.requires_data.iter().find(|k| !key_reachable(&plan, n, k, &anc)) {
            return Err(PlanError::UnsatisfiableData {
                suborder_id: n.suborder_id.clone(),
                key: k.clone(),
            });
        }
        if n.kind == SubOrderKind::Billing {
            let others = plan.nodes.values().filter(|o| o.kind != SubOrderKind::Billing);
            if others.into_iter().any(|o| !anc.contains(&o.suborder_id)) {
                return Err(PlanError::BillingNotLast(n.suborder_id.clone()));
            }
        }
    }
    Ok(plan)
}

impl ExecutionPlan {
    fn preds(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut p: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (a, b) in &self.edges {
            p.entry(b.as_str()).or_default().push(a.as_str());
        }
        p
    }

    pub fn node(&self, id: &str) -> Option<&SubOrder> {
        self.nodes.get(id)
    }

    pub fn state(&self, id: &str) -> Option<SubOrderState> {
        self.nodes.get(id).map(|n| n.state)
    }

    pub fn set_state(&mut self, id: &str, state: SubOrderState) -> Result<(), PlanError> {
        self.nodes
            .get_mut(id)
            .map(|n| n.state = state)
            .ok_or_else(|| PlanError::UnknownSubOrder(id.to_string()))
    }

    pub fn predecessors(&self, id: &str) -> BTreeSet<String> {
        self.edges.iter().filter(|(_, b)| b == id).map(|(a, _)| a.clone()).collect()
    }

    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        ancestors_of(id, &self.preds())
    }

    /// Unqualified view of the bindings a sub-order may read: the order
    /// scope, overlaid with its own scope.
    pub fn view_for(&self, node: &SubOrder) -> DataMap {
        let mut view = DataMap::new();
        for scope in [ORDER_SCOPE, node.scope()] {
            for (q, v) in &self.bindings {
                if let Some((s, k)) = split_binding_key(q) {
                    if s == scope {
                        view.insert(k.to_string(), v.clone());
                    }
                }
            }
        }
        view
    }

    fn is_ready(&self, n: &SubOrder) -> bool {
        if n.state != SubOrderState::Pending {
            return false;
        }
        if !self.predecessors(&n.suborder_id).iter().all(|p| self.state(p) == Some(SubOrderState::Done)) {
            return false;
        }
        let view = self.view_for(n);
        n.requires_data.iter().all(|k| view.contains_key(k))
    }

    /// Every node that could be dispatched now, in id order.
    pub fn ready(&self) -> Vec<&SubOrder> {
        self.nodes.values().filter(|n| self.is_ready(n)).collect()
    }

    pub fn next_ready(&self) -> Option<&SubOrder> {
        self.ready().into_iter().next()
    }

    pub fn all_done(&self) -> bool {
        self.nodes.values().all(|n| n.state == SubOrderState::Done)
    }

    /// Bindings a result would add, checked against existing ones.
    fn new_bindings(&self, node: &SubOrder, data: &DataMap) -> Result<Vec<(String, String)>, PlanError> {
        let mut add = Vec::new();
        for (k, v) in data {
            let q = binding_key(node.scope(), k);
            match self.bindings.get(&q) {
                Some(existing) if existing != v => {
                    return Err(PlanError::BindingConflict {
                        key: q,
                        existing: existing.clone(),
                        new: v.clone(),
                    })
                }
                Some(_) => {}
                None => add.push((q, v.clone())),
            }
        }
        Ok(add)
    }

    pub fn check_result(&self, result: &FulfillmentResult) -> Result<(), PlanError> {
        let node = self
            .nodes
            .get(&result.suborder_id)
            .ok_or_else(|| PlanError::UnknownSubOrder(result.suborder_id.clone()))?;
        let ok_state = match node.state {
            SubOrderState::Dispatched | SubOrderState::WaitingHuman => true,
            SubOrderState::Done => result.status == ResultStatus::Success,
            _ => false,
        };
        if !ok_state {
            return Err(PlanError::NotAwaitingResult {
                suborder_id: node.suborder_id.clone(),
                state: node.state,
            });
        }
        if result.status == ResultStatus::Success {
            self.new_bindings(node, &result.provided_data)?;
        }
        Ok(())
    }

    /// Records a result. On error the plan is unchanged.
    pub fn apply_result(&mut self, result: &FulfillmentResult) -> Result<(), PlanError> {
        self.check_result(result)?;
        let node = &self.nodes[&result.suborder_id];
        let next = match result.status {
            ResultStatus::Success => SubOrderState::Done,
            ResultStatus::PendingHuman => SubOrderState::WaitingHuman,
            ResultStatus::RetryableFailure | ResultStatus::FatalFailure => SubOrderState::Failed,
        };
        if result.status == ResultStatus::Success {
            let add = self.new_bindings(node, &result.provided_data)?;
            self.bindings.extend(add);
        }
        self.set_state(&result.suborder_id, next)
    }

    /// True if `seq` lists every node exactly once with each node after all
    /// its predecessors.
    pub fn is_topological(&self, seq: &[String]) -> bool {
        let pos: BTreeMap<&str, usize> = seq.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        pos.len() == seq.len()
            && pos.len() == self.nodes.len()
            && self.nodes.keys().all(|k| pos.contains_key(k.as_str()))
            && self.edges.iter().all(|(a, b)| pos[a.as_str()] < pos[b.as_str()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fulfillment::platform::CPE_MAC_KEY;

    fn node(id: &str, line: Option<&str>, deps: &[&str], req: &[&str], prov: &[&str]) -> SubOrder {
        SubOrder {
            suborder_id: id.into(),
            order_id: "O1".into(),
            line_id: line.map(str::to_string),
            target_id: id.rsplit('-').next().unwrap().into(),
            kind: if line.is_none() { SubOrderKind::Billing } else { SubOrderKind::Service },
            items: vec![],
            requires_data: req.iter().map(|s| s.to_string()).collect(),
            provides_data: prov.iter().map(|s| s.to_string()).collect(),
            depends_on: deps.iter().map(|s| s.to_string()).collect(),
            state: SubOrderState::Pending,
        }
    }

    fn multiplay() -> ExecutionPlan {
        build_plan(
            vec![
                node("O1-L1-broadband", Some("L1"), &[], &[], &[CPE_MAC_KEY]),
                node("O1-L1-voice", Some("L1"), &["O1-L1-broadband"], &[CPE_MAC_KEY], &[]),
                node("O1-billing", None, &["O1-L1-broadband", "O1-L1-voice"], &[], &[]),
            ],
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn dispatch(p: &mut ExecutionPlan, id: &str) {
        p.set_state(id, SubOrderState::Dispatched).unwrap();
    }

    #[test]
    fn multiplay_edges() {
        let p = multiplay();
        let e: Vec<(&str, &str)> = p.edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        assert_eq!(
            e,
            [
                ("O1-L1-broadband", "O1-L1-voice"),
                ("O1-L1-broadband", "O1-billing"),
                ("O1-L1-voice", "O1-billing")
            ]
        );
        assert_eq!(p.next_ready().unwrap().suborder_id, "O1-L1-broadband");
    }

    #[test]
    fn single_node_plan() {
        let p = build_plan(vec![node("O1-L1-x", Some("L1"), &[], &[], &[])], BTreeMap::new()).unwrap();
        assert_eq!(p.nodes.len(), 1);
        assert!(p.edges.is_empty());
    }

    #[test]
    fn cycle_is_rejected() {
        let err = build_plan(
            vec![node("A-L1-a", Some("L1"), &["A-L1-b"], &[], &[]), node("A-L1-b", Some("L1"), &["A-L1-a"], &[], &[])],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert_eq!(err, PlanError::CyclicDependency(vec!["A-L1-a".into(), "A-L1-b".into()]));
    }

    #[test]
    fn unsatisfiable_is_rejected() {
        let err = build_plan(vec![node("O1-L1-v", Some("L1"), &[], &["k"], &[])], BTreeMap::new()).unwrap_err();
        assert!(matches!(err, PlanError::UnsatisfiableData { .. }));
        let ok = build_plan(
            vec![node("O1-L1-v", Some("L1"), &[], &["k"], &[])],
            BTreeMap::from([(binding_key("L1", "k"), "1".to_string())]),
        );
        assert!(ok.is_ok());
        // a producer on another line does not help
        let err = build_plan(
            vec![node("O1-L2-p", Some("L2"), &[], &[], &["k"]), node("O1-L1-v", Some("L1"), &["O1-L2-p"], &["k"], &[])],
            BTreeMap::new(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn billing_must_follow_everything() {
        let err = build_plan(
            vec![node("O1-L1-a", Some("L1"), &[], &[], &[]), node("O1-billing", None, &[], &[], &[])],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert_eq!(err, PlanError::BillingNotLast("O1-billing".into()));
    }

    #[test]
    fn voice_waits_for_mac_binding() {
        let mut p = multiplay();
        dispatch(&mut p, "O1-L1-broadband");
        // forced DONE without the binding
        p.set_state("O1-L1-broadband", SubOrderState::Done).unwrap();
        assert!(p.next_ready().is_none());
        p.bindings.insert(binding_key("L1", CPE_MAC_KEY), "AA".into());
        assert_eq!(p.next_ready().unwrap().suborder_id, "O1-L1-voice");
    }

    #[test]
    fn results_bind_and_conflict() {
        let mut p = multiplay();
        dispatch(&mut p, "O1-L1-broadband");
        let mac: DataMap = [(CPE_MAC_KEY.to_string(), "AA:BB".to_string())].into();
        p.apply_result(&FulfillmentResult::success("O1-L1-broadband", mac.clone())).unwrap();
        assert_eq!(p.bindings[&binding_key("L1", CPE_MAC_KEY)], "AA:BB");
        assert_eq!(p.view_for(&p.nodes["O1-L1-voice"])[CPE_MAC_KEY], "AA:BB");
        assert_eq!(p.next_ready().unwrap().suborder_id, "O1-L1-voice");
        // same value again is harmless
        p.apply_result(&FulfillmentResult::success("O1-L1-broadband", mac)).unwrap();
        let other: DataMap = [(CPE_MAC_KEY.to_string(), "CC:DD".to_string())].into();
        let before = p.clone();
        assert!(matches!(
            p.apply_result(&FulfillmentResult::success("O1-L1-broadband", other)),
            Err(PlanError::BindingConflict { .. })
        ));
        assert_eq!(p, before);
        assert!(matches!(
            p.apply_result(&FulfillmentResult::success("nope", DataMap::new())),
            Err(PlanError::UnknownSubOrder(_))
        ));
    }

    #[test]
    fn all_done_means_nothing_ready() {
        let mut p = multiplay();
        for id in ["O1-L1-broadband", "O1-L1-voice", "O1-billing"] {
            p.set_state(id, SubOrderState::Done).unwrap();
        }
        assert!(p.next_ready().is_none());
        assert!(p.all_done());
        assert!(p.is_topological(&["O1-L1-broadband".into(), "O1-L1-voice".into(), "O1-billing".into()]));
        assert!(!p.is_topological(&["O1-L1-voice".into(), "O1-L1-broadband".into(), "O1-billing".into()]));
    }
}
