//! Non-linear undo buffer. Each completed (or partially applied) sub-order
//! leaves one entry; compensation walks the entry DAG backwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::fulfillment::{Action, Registry, Verb, OUTPUTS_PARAM};
use crate::order::SubOrder;
use crate::parse::ParseError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompensationError {
    #[error("undo entry for `{0}` already recorded")]
    DuplicateEntry(String),
    #[error("{0} has no inverse")]
    NoInverse(Verb),
    #[error("checkpoint strategy selected for `{0}` but no checkpoint was taken")]
    MissingCheckpoint(String),
    #[error("bad strategy override `{0}`")]
    BadOverride(String),
    #[error("override references unknown target `{0}`")]
    UnknownTarget(String),
    #[error("order `{0}` does not respect the undo dependencies")]
    InvalidOrder(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UndoStrategy {
    InverseCommand,
    Checkpoint,
}

impl UndoStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            UndoStrategy::InverseCommand => "INVERSE_COMMAND",
            UndoStrategy::Checkpoint => "CHECKPOINT",
        }
    }
}

impl fmt::Display for UndoStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UndoStrategy {
    type Err = CompensationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "INVERSE" | "INVERSE_COMMAND" => Ok(UndoStrategy::InverseCommand),
            "CHECKPOINT" => Ok(UndoStrategy::Checkpoint),
            other => Err(CompensationError::BadOverride(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyConfig {
    pub default: UndoStrategy,
    pub overrides: BTreeMap<(String, Verb), UndoStrategy>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::all(UndoStrategy::InverseCommand)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    default: String,
    #[serde(default)]
    overrides: Vec<String>,
}

impl StrategyConfig {
    pub fn all(default: UndoStrategy) -> Self {
        Self {
            default,
            overrides: BTreeMap::new(),
        }
    }

    /// Parses `target:VERB=STRATEGY`.
    pub fn add_override(&mut self, spec: &str) -> Result<(), CompensationError> {
        let bad = || CompensationError::BadOverride(spec.to_string());
        let (lhs, strategy) = spec.split_once('=').ok_or_else(bad)?;
        let (target, verb) = lhs.trim().split_once(':').ok_or_else(bad)?;
        let verb: Verb = verb.parse().map_err(|_| bad())?;
        if target.is_empty() {
            return Err(bad());
        }
        self.overrides.insert((target.to_string(), verb), strategy.parse()?);
        Ok(())
    }

    pub fn from_toml(doc: &str) -> Result<Self, CompensationError> {
        let raw: RawConfig = toml::from_str(doc).map_err(|e| ParseError::from_toml(doc, &e))?;
        let mut cfg = Self::all(raw.default.parse()?);
        for o in &raw.overrides {
            cfg.add_override(o)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut s = format!("default = \"{}\"\noverrides = [", self.default);
        let items: Vec<String> = self
            .overrides
            .iter()
            .map(|((t, v), st)| format!("\"{t}:{v}={st}\""))
            .collect();
        s.push_str(&items.join(", "));
        s.push_str("]\n");
        s
    }

    pub fn check_targets(&self, known: &BTreeSet<String>) -> Result<(), CompensationError> {
        match self.overrides.keys().find(|(t, _)| !known.contains(t)) {
            Some((t, _)) => Err(CompensationError::UnknownTarget(t.clone())),
            None => Ok(()),
        }
    }
}

pub fn select_strategy(config: &StrategyConfig, target_id: &str, verb: Verb) -> UndoStrategy {
    config
        .overrides
        .get(&(target_id.to_string(), verb))
        .copied()
        .unwrap_or(config.default)
}

pub fn inverse_of(verb: Verb) -> Result<Verb, CompensationError> {
    use Verb::*;
    Ok(match verb {
        CreateSubscription => CancelSubscription,
        CancelSubscription => CreateSubscription,
        InstallCpe => RemoveCpe,
        RemoveCpe => InstallCpe,
        ScheduleVisit => CancelVisit,
        CancelVisit => ScheduleVisit,
        ProvisionBilling => DeprovisionBilling,
        DeprovisionBilling => ProvisionBilling,
        CommitAddress | CompleteTask => return Err(CompensationError::NoInverse(verb)),
    })
}

/// Compensating actions for `forward`: reverse order, inverted verbs, same
/// params, idempotency keys suffixed `:undo`.
pub fn inverse_actions(forward: &[Action]) -> Result<Vec<Action>, CompensationError> {
    forward
        .iter()
        .rev()
        .map(|a| {
            let mut params = a.params.clone();
            params.remove(OUTPUTS_PARAM);
            Ok(Action {
                action_idx: a.action_idx,
                verb: inverse_of(a.verb)?,
                params,
                idempotency_key: format!("{}:undo", a.idempotency_key),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndoEntry {
    pub entry_id: String,
    pub suborder_id: String,
    pub target_id: String,
    pub strategy: UndoStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse_actions: Option<Vec<Action>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_ref: Option<String>,
    /// Entries of completed plan ancestors.
    pub depends_on: BTreeSet<String>,
    pub recorded_at: Timestamp,
    /// Position of the sub-order's first execution on its target.
    pub exec_seq: u64,
    /// The sub-order did not complete; only some of its actions applied.
    #[serde(default)]
    pub partial: bool,
    /// CHECKPOINT was imposed because a verb has no inverse.
    #[serde(default)]
    pub forced_checkpoint: bool,
}

pub fn entry_id_for(suborder_id: &str) -> String {
    format!("undo:{suborder_id}")
}

/// What `record` needs to know about one sub-order execution.
#[derive(Debug, Clone)]
pub struct Recording<'a> {
    pub suborder: &'a SubOrder,
    /// Actions whose effects are on the platform, in forward order.
    pub forward: &'a [Action],
    /// Pre-execution checkpoint held by the target.
    pub checkpoint_ref: Option<&'a str>,
    pub exec_seq: u64,
    /// Suborder ids of completed plan ancestors.
    pub ancestors: &'a BTreeSet<String>,
    pub recorded_at: Timestamp,
    pub partial: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndoBuffer {
    pub entries: BTreeMap<String, UndoEntry>,
}

impl UndoBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, entry_id: &str) -> Option<&UndoEntry> {
        self.entries.get(entry_id)
    }

    /// Builds the entry for one execution without inserting it.
    pub fn prepare(&self, rec: &Recording<'_>, config: &StrategyConfig) -> Result<UndoEntry, CompensationError> {
        let so = rec.suborder;
        let entry_id = entry_id_for(&so.suborder_id);
        if self.entries.contains_key(&entry_id) {
            return Err(CompensationError::DuplicateEntry(so.suborder_id.clone()));
        }
        let configured = rec
            .forward
            .iter()
            .map(|a| select_strategy(config, &so.target_id, a.verb))
            .max()
            .unwrap_or(config.default);
        let needs_checkpoint = rec.forward.iter().any(|a| inverse_of(a.verb).is_err());
        let strategy = if needs_checkpoint {
            UndoStrategy::Checkpoint
        } else {
            configured
        };
        let (inverse, checkpoint_ref) = match strategy {
            UndoStrategy::InverseCommand => (Some(inverse_actions(rec.forward)?), None),
            UndoStrategy::Checkpoint => {
                let cp = rec
                    .checkpoint_ref
                    .ok_or_else(|| CompensationError::MissingCheckpoint(so.suborder_id.clone()))?;
                (None, Some(cp.to_string()))
            }
        };
        Ok(UndoEntry {
            entry_id,
            suborder_id: so.suborder_id.clone(),
            target_id: so.target_id.clone(),
            strategy,
            inverse_actions: inverse,
            checkpoint_ref,
            depends_on: rec
                .ancestors
                .iter()
                .map(|s| entry_id_for(s))
                .filter(|e| self.entries.contains_key(e))
                .collect(),
            recorded_at: rec.recorded_at,
            exec_seq: rec.exec_seq,
            partial: rec.partial,
            forced_checkpoint: needs_checkpoint && configured != UndoStrategy::Checkpoint,
        })
    }

    pub fn insert(&mut self, entry: UndoEntry) -> Result<(), CompensationError> {
        if self.entries.contains_key(&entry.entry_id) {
            return Err(CompensationError::DuplicateEntry(entry.suborder_id));
        }
        self.entries.insert(entry.entry_id.clone(), entry);
        Ok(())
    }

    pub fn record(&mut self, rec: &Recording<'_>, config: &StrategyConfig) -> Result<&UndoEntry, CompensationError> {
        let e = self.prepare(rec, config)?;
        let id = e.entry_id.clone();
        self.insert(e)?;
        Ok(&self.entries[&id])
    }

    /// Full dependency relation used for ordering: recorded plan ancestry
    /// plus, per target, every earlier execution on that target. The second
    /// part keeps checkpoint restores on one platform in reverse order.
    pub fn effective_deps(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut deps: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in self.entries.values() {
            let d = deps.entry(e.entry_id.clone()).or_default();
            d.extend(e.depends_on.iter().filter(|x| self.entries.contains_key(*x)).cloned());
            for other in self.entries.values() {
                if other.target_id == e.target_id && other.exec_seq < e.exec_seq {
                    d.insert(other.entry_id.clone());
                }
            }
        }
        deps
    }

    /// Entry ids grouped in waves: every entry comes after all entries that
    /// depend on it. Within a wave, ids are in descending exec order.
    pub fn reverse_waves(&self) -> Vec<Vec<String>> {
        let deps = self.effective_deps();
        let mut dependents: BTreeMap<&str, usize> = self.entries.keys().map(|k| (k.as_str(), 0)).collect();
        for ds in deps.values() {
            for d in ds {
                *dependents.get_mut(d.as_str()).expect("filtered to known entries") += 1;
            }
        }
        let mut waves = Vec::new();
        let mut done: BTreeSet<String> = BTreeSet::new();
        while done.len() < self.entries.len() {
            let mut wave: Vec<String> = dependents
                .iter()
                .filter(|(k, n)| **n == 0 && !done.contains(**k))
                .map(|(k, _)| k.to_string())
                .collect();
            assert!(!wave.is_empty(), "undo graph has a cycle");
            wave.sort_by(|a, b| {
                let (ea, eb) = (&self.entries[a], &self.entries[b]);
                (eb.recorded_at, eb.exec_seq, b).cmp(&(ea.recorded_at, ea.exec_seq, a))
            });
            for id in &wave {
                for d in &deps[id] {
                    *dependents.get_mut(d.as_str()).expect("known") -= 1;
                }
                done.insert(id.clone());
            }
            waves.push(wave);
        }
        waves
    }

    pub fn reverse_topological(&self) -> Vec<String> {
        self.reverse_waves().into_iter().flatten().collect()
    }

    /// True when no entry runs before an entry that depends on it.
    pub fn respects_dependencies(&self, order: &[String]) -> bool {
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if pos.len() != self.entries.len() || !self.entries.keys().all(|k| pos.contains_key(k.as_str())) {
            return false;
        }
        self.effective_deps()
            .iter()
            .all(|(e, ds)| ds.iter().all(|d| pos[e.as_str()] < pos[d.as_str()]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationStep {
    pub entry_id: String,
    pub suborder_id: String,
    pub target_id: String,
    pub strategy: UndoStrategy,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationReport {
    pub steps: Vec<CompensationStep>,
    /// Entries never attempted because an earlier step failed.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl CompensationReport {
    pub fn succeeded(&self) -> bool {
        self.skipped.is_empty() && self.steps.iter().all(|s| s.ok)
    }

    pub fn executed_order(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.entry_id.clone()).collect()
    }
}

pub fn undo_entry(entry: &UndoEntry, registry: &Registry) -> CompensationStep {
    let res = match entry.strategy {
        UndoStrategy::InverseCommand => {
            registry.run_actions(&entry.target_id, entry.inverse_actions.as_deref().unwrap_or(&[]))
        }
        UndoStrategy::Checkpoint => match &entry.checkpoint_ref {
            Some(cp) => registry.restore_checkpoint(&entry.target_id, cp),
            None => Err(crate::fulfillment::FulfillmentError::UnknownCheckpoint(entry.entry_id.clone())),
        },
    };
    CompensationStep {
        entry_id: entry.entry_id.clone(),
        suborder_id: entry.suborder_id.clone(),
        target_id: entry.target_id.clone(),
        strategy: entry.strategy,
        ok: res.is_ok(),
        error: res.err().map(|e| e.to_string()),
    }
}

/// Runs the buffer in reverse dependency order and stops at the first failed
/// step. With `parallel`, each wave of mutually independent entries runs on
/// its own threads.
pub fn compensate(buffer: &UndoBuffer, registry: &Registry, parallel: bool) -> CompensationReport {
    compensate_observed(buffer, registry, parallel, |_| {})
}

/// As [`compensate`], calling `on_step` after every finished step.
pub fn compensate_observed(
    buffer: &UndoBuffer,
    registry: &Registry,
    parallel: bool,
    mut on_step: impl FnMut(&CompensationStep),
) -> CompensationReport {
    let mut report = CompensationReport::default();
    let waves = buffer.reverse_waves();
    let mut failed = false;
    for wave in waves {
        if failed {
            report.skipped.extend(wave);
            continue;
        }
        let steps: Vec<CompensationStep> = if parallel && wave.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|id| {
                        let e = &buffer.entries[id];
                        s.spawn(move || undo_entry(e, registry))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("undo worker")).collect()
            })
        } else {
            let mut out = Vec::new();
            for id in &wave {
                if out.iter().any(|s: &CompensationStep| !s.ok) {
                    report.skipped.push(id.clone());
                    continue;
                }
                out.push(undo_entry(&buffer.entries[id], registry));
            }
            out
        };
        for st in steps {
            failed |= !st.ok;
            on_step(&st);
            report.steps.push(st);
        }
    }
    report
}

/// Runs the entries in exactly `order`, which must respect the undo
/// dependencies.
pub fn compensate_in_order(
    buffer: &UndoBuffer,
    registry: &Registry,
    order: &[String],
) -> Result<CompensationReport, CompensationError> {
    if !buffer.respects_dependencies(order) {
        return Err(CompensationError::InvalidOrder(order.join(",")));
    }
    let mut report = CompensationReport::default();
    for (i, id) in order.iter().enumerate() {
        let st = undo_entry(&buffer.entries[id], registry);
        let ok = st.ok;
        report.steps.push(st);
        if !ok {
            report.skipped.extend(order[i + 1..].iter().cloned());
            break;
        }
    }
    Ok(report)
}

/// Every order of the entries that respects the undo dependencies. Intended
/// for small buffers in tests.
pub fn all_valid_orders(buffer: &UndoBuffer) -> Vec<Vec<String>> {
    fn go(
        deps: &BTreeMap<String, BTreeSet<String>>,
        remaining: &mut BTreeSet<String>,
        cur: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        if remaining.is_empty() {
            out.push(cur.clone());
            return;
        }
        let candidates: Vec<String> = remaining
            .iter()
            .filter(|c| !remaining.iter().any(|o| deps[o].contains(*c)))
            .cloned()
            .collect();
        for c in candidates {
            remaining.remove(&c);
            cur.push(c.clone());
            go(deps, remaining, cur, out);
            cur.pop();
            remaining.insert(c);
        }
    }
    let deps = buffer.effective_deps();
    let mut out = Vec::new();
    go(&deps, &mut buffer.entries.keys().cloned().collect(), &mut Vec::new(), &mut out);
    out
}
