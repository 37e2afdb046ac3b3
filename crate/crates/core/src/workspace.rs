//! On-disk state shared by successive CLI invocations: configuration,
//! journal, platform records, human tasks and dead letters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::Capture;
use crate::catalog::Catalog;
use crate::clock::{SharedClock, SimClock, SIM_EPOCH};
use crate::compensation::StrategyConfig;
use crate::fulfillment::{HostRecord, Registry, TaskStore, TaskStoreData};
use crate::journal::{Journal, JournalError};
use crate::management::orchestrator::{declare_queues, Engine, EngineConfig, EngineError, EngineOptions, RecoveryReport};
use crate::management::rules::{Facts, RuleSet};
use crate::msgbus::{Bus, Message};
use crate::scenario::Scenario;

const CONFIG: &str = "config.json";
const JOURNAL: &str = "journal.jsonl";
const PLATFORMS: &str = "platforms.json";
const TASKS: &str = "tasks.json";
const DEAD: &str = "dead_letters.json";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("no workspace at {} (run a scenario or `init` first)", .0.display())]
    NotInitialized(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub seed: u64,
    pub catalog: Catalog,
    pub rules: RuleSet,
    pub facts: Facts,
    /// Strategy file contents.
    pub strategy: String,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub parallel_dispatch: bool,
    pub workers: usize,
}

impl WorkspaceConfig {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            seed: s.seed,
            catalog: s.catalog.clone(),
            rules: s.rules.clone(),
            facts: s.facts.clone(),
            strategy: s.strategy.to_toml(),
            max_retries: s.options.max_retries,
            retry_backoff_ms: s.options.retry_backoff.as_millis() as u64,
            parallel_dispatch: s.options.parallel_dispatch,
            workers: s.options.workers,
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig, String> {
        Ok(EngineConfig {
            catalog: self.catalog.clone(),
            rules: self.rules.clone(),
            facts: self.facts.clone(),
            strategy: StrategyConfig::from_toml(&self.strategy).map_err(|e| e.to_string())?,
            options: EngineOptions {
                max_retries: self.max_retries,
                retry_backoff: Duration::from_millis(self.retry_backoff_ms),
                parallel_dispatch: self.parallel_dispatch,
                workers: self.workers,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    dir: PathBuf,
}

/// A running engine built from a workspace.
#[derive(Debug)]
pub struct Session {
    pub engine: Engine,
    pub capture: Capture,
    pub clock: SharedClock,
    pub recovery: RecoveryReport,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dir.join(JOURNAL)
    }

    pub fn exists(&self) -> bool {
        self.dir.join(CONFIG).exists()
    }

    fn write(&self, name: &str, text: &str) -> Result<(), WorkspaceError> {
        let p = self.dir.join(name);
        let tmp = self.dir.join(format!("{name}.tmp"));
        std::fs::write(&tmp, text).map_err(io(&tmp))?;
        std::fs::rename(&tmp, &p).map_err(io(&p))
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Option<T>, WorkspaceError> {
        let p = self.dir.join(name);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(io(&p))?;
        serde_json::from_str(&text).map(Some).map_err(|e| WorkspaceError::Corrupt {
            path: p,
            reason: e.to_string(),
        })
    }

    /// Wipes the directory's workspace files and writes a fresh config.
    pub fn init(&self, config: &WorkspaceConfig, registry: &Registry) -> Result<(), WorkspaceError> {
        std::fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        for f in [JOURNAL, PLATFORMS, TASKS, DEAD] {
            let p = self.dir.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(io(&p))?;
            }
        }
        self.write(CONFIG, &serde_json::to_string_pretty(config).expect("config serializes"))?;
        self.save_registry(registry)
    }

    pub fn config(&self) -> Result<WorkspaceConfig, WorkspaceError> {
        self.read_json(CONFIG)?
            .ok_or_else(|| WorkspaceError::NotInitialized(self.dir.clone()))
    }

    fn save_registry(&self, registry: &Registry) -> Result<(), WorkspaceError> {
        let mut recs = BTreeMap::new();
        for t in registry.target_ids() {
            recs.insert(t.clone(), registry.record(&t).expect("listed target"));
        }
        self.write(PLATFORMS, &serde_json::to_string_pretty(&recs).expect("records serialize"))?;
        self.write(TASKS, &serde_json::to_string_pretty(&registry.tasks().data()).expect("tasks serialize"))
    }

    /// Persists everything the engine holds outside the journal.
    pub fn save(&self, engine: &Engine) -> Result<(), WorkspaceError> {
        self.save_registry(engine.registry())?;
        let mut dead: BTreeMap<String, Vec<Message>> = BTreeMap::new();
        for q in crate::management::orchestrator::QUEUES {
            let msgs = engine.bus().dead_letters(q).unwrap_or_default();
            if !msgs.is_empty() {
                dead.insert(q.to_string(), msgs);
            }
        }
        self.write(DEAD, &serde_json::to_string_pretty(&dead).expect("messages serialize"))?;
        if engine.journal().path() != Some(self.journal_path().as_path()) {
            self.write(JOURNAL, &engine.journal().to_text())?;
        }
        Ok(())
    }

    /// Rebuilds the engine and lets it continue unfinished orders.
    pub fn open(&self) -> Result<Session, WorkspaceError> {
        let cfg = self.config()?;
        let engine_cfg = cfg.engine_config().map_err(|reason| WorkspaceError::Corrupt {
            path: self.dir.join(CONFIG),
            reason,
        })?;

        let mut registry = Registry::with_defaults(cfg.seed);
        for t in cfg.catalog.target_ids() {
            registry.ensure_target(&t);
        }
        if let Some(data) = self.read_json::<TaskStoreData>(TASKS)? {
            registry.set_tasks(Arc::new(TaskStore::from_data(data)));
        }
        let recs: BTreeMap<String, HostRecord> = self.read_json(PLATFORMS)?.unwrap_or_default();
        for t in recs.keys() {
            registry.ensure_target(t);
        }
        for (t, rec) in recs {
            registry.load_record(&t, rec).map_err(|e| WorkspaceError::Corrupt {
                path: self.dir.join(PLATFORMS),
                reason: e.to_string(),
            })?;
        }

        let journal = Journal::open(&self.journal_path())?;
        let start = journal.records().last().map(|r| r.ts + 1).unwrap_or(SIM_EPOCH).max(SIM_EPOCH);
        let clock: SharedClock = Arc::new(SimClock::new(start));
        let bus = Arc::new(Bus::new(clock.clone()));
        declare_queues(&bus);
        let dead: BTreeMap<String, Vec<Message>> = self.read_json(DEAD)?.unwrap_or_default();
        for (q, msgs) in dead {
            if bus.has_queue(&q) {
                bus.restore_dead_letters(&q, msgs).map_err(EngineError::from)?;
            }
        }

        let orders_so_far = journal.order_ids().len() as u64;
        let engine = Engine::new(engine_cfg, bus, Arc::new(registry), Arc::new(journal), clock.clone());
        let recovery = engine.recover()?;
        engine.run_until_idle()?;
        Ok(Session {
            engine,
            capture: Capture::new(cfg.seed, orders_so_far),
            clock,
            recovery,
        })
    }
}
