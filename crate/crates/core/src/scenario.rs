//! Scenario files: a catalog, rule and fact files, platform start states,
//! orders in channel formats, faults and expectations, run end to end on a
//! simulated clock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{submit, Capture, CaptureError, RawChannelDocument};
use crate::catalog::{load_catalog, Catalog, CatalogError};
use crate::clock::{SharedClock, SimClock};
use crate::compensation::{CompensationError, CompensationReport, StrategyConfig};
use crate::fulfillment::platform::PlatformState;
use crate::fulfillment::{content_hash, DataMap, FaultSpec, Registry, TaskState};
use crate::journal::{Journal, JournalError};
use crate::management::orchestrator::{event_log, Engine, EngineConfig, EngineError, EngineOptions, LogRecord};
use crate::management::rules::{Facts, RuleSet};
use crate::msgbus::Bus;
use crate::order::{OrderState, SubOrderKind, SubOrderState};
use crate::parse::ParseError;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{}: {error}", path.display())]
    Parse { path: PathBuf, error: ParseError },
    #[error("{}: file not found", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("capture: {0}")]
    Capture(#[from] CaptureError),
}

impl ScenarioError {
    /// Problems with the inputs, as opposed to failures while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            ScenarioError::Parse { .. } | ScenarioError::Missing(_) | ScenarioError::Io { .. } | ScenarioError::Invalid(_)
        ) || matches!(self, ScenarioError::Capture(CaptureError::MalformedDocument(_) | CaptureError::UnknownChannel(_)))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrder {
    channel: String,
    file: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Display state per order, in submission order.
    #[serde(default)]
    pub states: Option<Vec<String>>,
    /// Every platform dump equals its pre-run dump.
    #[serde(default)]
    pub platforms_unchanged: bool,
    /// target -> SHA-256 of its final dump
    #[serde(default)]
    pub dump_hashes: BTreeMap<String, String>,
    /// Billing dispatched only after every other sub-order completed.
    #[serde(default)]
    pub billing_last: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    seed: u64,
    catalog: PathBuf,
    #[serde(default)]
    rules: Option<PathBuf>,
    #[serde(default)]
    facts: Option<PathBuf>,
    #[serde(default)]
    strategy: Option<PathBuf>,
    #[serde(default)]
    platforms: BTreeMap<String, PathBuf>,
    #[serde(default)]
    orders: Vec<RawOrder>,
    #[serde(default)]
    faults: Vec<String>,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    parallel_dispatch: bool,
    #[serde(default)]
    duplicate_delivery: bool,
    #[serde(default)]
    auto_complete_tasks: bool,
    #[serde(default)]
    task_data: DataMap,
    #[serde(default)]
    expect: Expectations,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioOrder {
    pub channel: String,
    pub file: PathBuf,
    pub bytes: Vec<u8>,
}

/// A loaded scenario. Every referenced file has been read.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub path: PathBuf,
    pub seed: u64,
    pub catalog: Catalog,
    pub rules: RuleSet,
    pub facts: Facts,
    pub strategy: StrategyConfig,
    pub platforms: BTreeMap<String, PlatformState>,
    pub orders: Vec<ScenarioOrder>,
    pub faults: Vec<FaultSpec>,
    pub options: EngineOptions,
    pub duplicate_delivery: bool,
    /// Complete open human tasks with `task_data` whenever the run goes
    /// quiet, until none are left.
    pub auto_complete_tasks: bool,
    pub task_data: DataMap,
    pub expect: Expectations,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    if !path.exists() {
        return Err(ScenarioError::Missing(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path) -> impl Fn(ParseError) -> ScenarioError + '_ {
    move |error| ScenarioError::Parse {
        path: path.to_path_buf(),
        error,
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = read(path)?;
        let raw: RawScenario = toml::from_str(&text).map_err(|e| parse_err(path)(ParseError::from_toml(&text, &e)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let at = |p: &Path| base.join(p);

        let cat_path = at(&raw.catalog);
        let catalog = load_catalog(&read(&cat_path)?).map_err(|e| match e {
            CatalogError::Parse(p) => parse_err(&cat_path)(p),
            other => ScenarioError::Invalid(other.to_string()),
        })?;
        let rules = match &raw.rules {
            Some(p) => {
                let p = at(p);
                RuleSet::from_toml(&read(&p)?).map_err(parse_err(&p))?
            }
            None => RuleSet::default(),
        };
        let facts = match &raw.facts {
            Some(p) => {
                let p = at(p);
                Facts::from_toml(&read(&p)?).map_err(parse_err(&p))?
            }
            None => Facts::default(),
        };
        let strategy = match &raw.strategy {
            Some(p) => {
                let p = at(p);
                StrategyConfig::from_toml(&read(&p)?).map_err(|e| match e {
                    CompensationError::Parse(pe) => parse_err(&p)(pe),
                    other => ScenarioError::Invalid(format!("{}: {other}", p.display())),
                })?
            }
            None => StrategyConfig::default(),
        };
        let mut platforms = BTreeMap::new();
        for (target, p) in &raw.platforms {
            let p = at(p);
            let mut st = PlatformState::from_dump(&read(&p)?).map_err(parse_err(&p))?;
            st.target_id = target.clone();
            platforms.insert(target.clone(), st);
        }
        let mut orders = Vec::new();
        for o in &raw.orders {
            let p = at(&o.file);
            orders.push(ScenarioOrder {
                channel: o.channel.clone(),
                bytes: read(&p)?.into_bytes(),
                file: p,
            });
        }
        let faults = raw
            .faults
            .iter()
            .map(|f| f.parse::<FaultSpec>().map_err(|e| ScenarioError::Invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let options = EngineOptions {
            workers: raw.workers.unwrap_or(1).max(1),
            parallel_dispatch: raw.parallel_dispatch,
            ..EngineOptions::default()
        };
        Ok(Scenario {
            path: path.to_path_buf(),
            seed: raw.seed,
            catalog,
            rules,
            facts,
            strategy,
            platforms,
            orders,
            faults,
            options,
            duplicate_delivery: raw.duplicate_delivery,
            auto_complete_tasks: raw.auto_complete_tasks,
            task_data: raw.task_data,
            expect: raw.expect,
        })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            catalog: self.catalog.clone(),
            rules: self.rules.clone(),
            facts: self.facts.clone(),
            strategy: self.strategy.clone(),
            options: self.options.clone(),
        }
    }

    /// Registry with the shipped platforms, every catalog target, and the
    /// scenario's start states and faults.
    pub fn registry(&self) -> Result<Registry, ScenarioError> {
        let mut reg = Registry::with_defaults(self.seed);
        for t in self.catalog.target_ids() {
            reg.ensure_target(&t);
        }
        for (t, st) in &self.platforms {
            if !reg.contains(t) {
                return Err(ScenarioError::Invalid(format!("start state for unknown target `{t}`")));
            }
            reg.set_platform_state(st.clone())
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        reg.set_faults(&self.faults).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let known = reg.target_ids().into_iter().collect();
        self.strategy
            .check_targets(&known)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(reg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderReport {
    pub order_id: String,
    pub channel: String,
    pub state: String,
    pub dispatch_sequence: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation_failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensation: Option<CompensationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub orders: Vec<OrderReport>,
    pub platform_hashes: BTreeMap<String, String>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// State shown to operators: IN_PROGRESS orders parked on a human task
/// show as WAITING_HUMAN.
pub fn display_state(agg: &crate::journal::OrderAggregate) -> String {
    if agg.state == OrderState::InProgress {
        if let Some(plan) = &agg.plan {
            let waiting = plan.nodes.values().any(|n| n.state == SubOrderState::WaitingHuman);
            let busy = plan.nodes.values().any(|n| n.state == SubOrderState::Dispatched);
            if waiting && !busy {
                return "WAITING_HUMAN".into();
            }
        }
    }
    agg.state.as_str().to_string()
}

pub fn order_report(agg: &crate::journal::OrderAggregate) -> OrderReport {
    OrderReport {
        order_id: agg.order_id.clone(),
        channel: agg.order.as_ref().map(|o| o.channel_id.to_string()).unwrap_or_default(),
        state: display_state(agg),
        dispatch_sequence: agg.dispatch_sequence(),
        validation_failures: agg
            .validation
            .as_ref()
            .map(|v| v.failures.iter().map(|f| f.rule_id.clone()).collect())
            .unwrap_or_default(),
        compensation: agg.compensation.clone(),
        diagnostic: agg.diagnostic.clone(),
    }
}

/// Billing dispatches that happened before some other sub-order of the same
/// order had completed. Looks only at the event log.
pub fn billing_last_violations(engine: &Engine, log: &[LogRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for order_id in engine.order_ids() {
        let Ok(agg) = engine.aggregate(&order_id) else { continue };
        let Some(plan) = &agg.plan else { continue };
        let kind = |sid: &str| plan.node(sid).map(|n| n.kind);
        let mut completed: BTreeMap<String, u64> = BTreeMap::new();
        for r in log.iter().filter(|r| r.order_id == order_id) {
            let Some(sid) = r.suborder_id.as_deref() else { continue };
            if r.event == "RESULT_APPLIED" && r.detail.contains("status=SUCCESS") {
                completed.insert(sid.to_string(), r.ts);
            }
            if r.event == "DISPATCHED" && kind(sid) == Some(SubOrderKind::Billing) {
                for other in plan.nodes.values().filter(|n| n.kind != SubOrderKind::Billing) {
                    match completed.get(&other.suborder_id) {
                        Some(ts) if *ts < r.ts => {}
                        _ => out.push(format!("{sid} dispatched before {} completed", other.suborder_id)),
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Journal file; replaced if it exists. In memory when absent.
    pub journal: Option<PathBuf>,
    pub workers: Option<usize>,
    pub parallel_dispatch: Option<bool>,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub engine: Engine,
    pub initial_dumps: BTreeMap<String, String>,
    pub event_log: Vec<LogRecord>,
    pub clock: SharedClock,
}

impl ScenarioRun {
    pub fn final_dumps(&self) -> BTreeMap<String, String> {
        self.engine.registry().dumps()
    }
}

/// Completes every open task with `data`, filling missing required keys
/// with "OK". Returns how many were completed.
pub fn complete_open_tasks(engine: &Engine, data: &DataMap) -> Result<usize, EngineError> {
    let open: Vec<_> = engine
        .registry()
        .tasks()
        .list()
        .into_iter()
        .filter(|t| t.state == TaskState::Open)
        .collect();
    for t in &open {
        let mut d = DataMap::new();
        for k in &t.required_output_keys {
            d.insert(k.clone(), data.get(k).cloned().unwrap_or_else(|| "OK".into()));
        }
        engine.complete_task(&t.task_id, d)?;
    }
    Ok(open.len())
}

pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<ScenarioRun, ScenarioError> {
    let sim = SimClock::shared();
    let clock: SharedClock = sim.clone();
    let registry = Arc::new(scenario.registry()?);
    let initial_dumps = registry.dumps();

    let journal = match &opts.journal {
        Some(p) => {
            if p.exists() {
                std::fs::remove_file(p).map_err(|source| ScenarioError::Io {
                    path: p.clone(),
                    source,
                })?;
            }
            Journal::open(p)?
        }
        None => Journal::in_memory(),
    };
    let bus = Arc::new(Bus::new(clock.clone()));
    bus.set_duplicate_delivery(scenario.duplicate_delivery);

    let mut config = scenario.engine_config();
    if let Some(w) = opts.workers {
        config.options.workers = w.max(1);
    }
    if let Some(p) = opts.parallel_dispatch {
        config.options.parallel_dispatch = p;
    }
    let engine = Engine::new(config, bus, registry, Arc::new(journal), clock.clone());

    let capture = Capture::new(scenario.seed, 0);
    let mut order_ids = Vec::new();
    for o in &scenario.orders {
        let order = capture.parse_channel_order(&RawChannelDocument::new(o.channel.clone(), o.bytes.clone()), clock.as_ref())?;
        order_ids.push(submit(&order, engine.bus(), engine.journal(), clock.as_ref())?);
        sim.advance(Duration::from_millis(1));
    }
    engine.run_until_idle()?;
    if scenario.auto_complete_tasks {
        while complete_open_tasks(&engine, &scenario.task_data)? > 0 {
            engine.run_until_idle()?;
        }
    }

    let log = event_log(&engine.journal().records());
    let mut orders = Vec::new();
    for id in &order_ids {
        orders.push(order_report(&engine.aggregate(id)?));
    }
    let final_dumps = engine.registry().dumps();
    let platform_hashes: BTreeMap<String, String> = final_dumps
        .iter()
        .map(|(t, d)| (t.clone(), content_hash(d.as_bytes())))
        .collect();

    let mut checks = Vec::new();
    let exp = &scenario.expect;
    if let Some(states) = &exp.states {
        let got: Vec<String> = orders.iter().map(|o| o.state.clone()).collect();
        checks.push(CheckResult {
            check: "states".into(),
            passed: &got == states,
            detail: format!("expected {states:?}, got {got:?}"),
        });
    }
    if exp.platforms_unchanged {
        let changed: Vec<&String> = final_dumps
            .iter()
            .filter(|(t, d)| initial_dumps.get(*t) != Some(*d))
            .map(|(t, _)| t)
            .collect();
        checks.push(CheckResult {
            check: "platforms_unchanged".into(),
            passed: changed.is_empty(),
            detail: format!("changed: {changed:?}"),
        });
    }
    for (t, want) in &exp.dump_hashes {
        let got = platform_hashes.get(t).cloned().unwrap_or_default();
        checks.push(CheckResult {
            check: format!("dump_hash:{t}"),
            passed: &got == want,
            detail: format!("expected {want}, got {got}"),
        });
    }
    if exp.billing_last {
        let v = billing_last_violations(&engine, &log);
        checks.push(CheckResult {
            check: "billing_last".into(),
            passed: v.is_empty(),
            detail: v.join("; "),
        });
    }

    let report = ScenarioReport {
        scenario: scenario
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: scenario.seed,
        passed: checks.iter().all(|c| c.passed),
        orders,
        platform_hashes,
        checks,
    };
    Ok(ScenarioRun {
        report,
        engine,
        initial_dumps,
        event_log: log,
        clock,
    })
}

pub fn load_and_run(path: &Path, opts: &RunOptions) -> Result<ScenarioRun, ScenarioError> {
    run_scenario(&Scenario::load(path)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    fn fixture(dir: &Path, faults: &str, expect: &str) -> PathBuf {
        write(
            dir,
            "catalog.toml",
            r#"
[[targets]]
id = "broadband"
[[targets]]
id = "voice"
[[targets]]
id = "billing"
[[products]]
code = "MP"
name = "Multi-play"
price = 40
[[products.components]]
code = "bb"
service = "BROADBAND"
target = "broadband"
billable = true
provides = ["cpe.mac"]
[[products.components]]
code = "voice"
service = "TELEPHONY"
target = "voice"
billable = true
requires = ["cpe.mac"]
"#,
        );
        write(
            dir,
            "o.pos",
            "customer.id=C1\ncustomer.credit_limit=100\ncustomer.address=Main 1, Skopje\nline.1.id=L1\nline.1.product=MP\nline.1.qty=1\n",
        );
        let s = format!(
            "seed = 5\ncatalog = \"catalog.toml\"\nfaults = [{faults}]\n[[orders]]\nchannel = \"POS\"\nfile = \"o.pos\"\n[expect]\n{expect}\n"
        );
        write(dir, "s.toml", &s);
        dir.join("s.toml")
    }

    #[test]
    fn clean_run_passes_expectations() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(d.path(), "", "states = [\"COMPLETED\"]\nbilling_last = true");
        let run = load_and_run(&p, &RunOptions::default()).unwrap();
        assert!(run.report.passed, "{:#?}", run.report);
        assert_eq!(run.report.orders[0].dispatch_sequence.len(), 3);
    }

    #[test]
    fn fault_compensates_and_restores_platforms() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(
            d.path(),
            "\"billing:PROVISION_BILLING:1:FATAL\"",
            "states = [\"COMPENSATED\"]\nplatforms_unchanged = true",
        );
        let run = load_and_run(&p, &RunOptions::default()).unwrap();
        assert!(run.report.passed, "{:#?}", run.report);
    }

    #[test]
    fn failed_expectation_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(d.path(), "", "states = [\"COMPENSATED\"]");
        let run = load_and_run(&p, &RunOptions::default()).unwrap();
        assert!(!run.report.passed);
    }

    #[test]
    fn missing_catalog_is_an_input_error() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(d.path(), "", "");
        std::fs::remove_file(d.path().join("catalog.toml")).unwrap();
        let e = Scenario::load(&p).unwrap_err();
        assert!(matches!(e, ScenarioError::Missing(_)));
        assert!(e.is_input_error());
    }

    #[test]
    fn same_seed_same_log() {
        let d = tempfile::tempdir().unwrap();
        let p = fixture(d.path(), "\"voice:CREATE_SUBSCRIPTION:1:RETRYABLE\"", "");
        let a = load_and_run(&p, &RunOptions::default()).unwrap();
        let b = load_and_run(&p, &RunOptions::default()).unwrap();
        use crate::management::orchestrator::event_log_text;
        assert_eq!(event_log_text(&a.event_log, true), event_log_text(&b.event_log, true));
    }
}
