//! Command-line front end.
//!
//! Exit codes: 0 success, 1 the command ran but something was not found or
//! an expectation failed, 2 bad usage or unreadable input.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::capture::{submit, CaptureError, RawChannelDocument};
use crate::catalog::{load_catalog, validate_catalog};
use crate::fulfillment::{DataMap, TaskError};
use crate::management::orchestrator::{event_log, event_log_text};
use crate::scenario::{order_report, run_scenario, RunOptions, Scenario};
use crate::workspace::{Session, Workspace, WorkspaceConfig, WorkspaceError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "orderflow", version, about = "Order capture, orchestration and fulfillment simulator")]
struct Cli {
    /// Workspace directory holding journal and platform state.
    #[arg(long, global = true, default_value = ".orderflow")]
    state: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Product catalog tools.
    Catalog {
        #[command(subcommand)]
        cmd: CatalogCmd,
    },
    /// Submit orders and inspect them.
    Order {
        #[command(subcommand)]
        cmd: OrderCmd,
    },
    /// Run scenario files.
    Run {
        #[command(subcommand)]
        cmd: RunCmd,
    },
    /// Human tasks.
    Task {
        #[command(subcommand)]
        cmd: TaskCmd,
    },
    /// Simulated platforms.
    Platform {
        #[command(subcommand)]
        cmd: PlatformCmd,
    },
    /// Message bus.
    Bus {
        #[command(subcommand)]
        cmd: BusCmd,
    },
    /// Create a workspace from a scenario's configuration without running
    /// its orders.
    Init { scenario: PathBuf },
    /// Print the event log, optionally for one order.
    Events {
        order_id: Option<String>,
        /// Replace timestamps by log positions.
        #[arg(long)]
        normalize: bool,
    },
}

#[derive(Debug, Subcommand)]
enum CatalogCmd {
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum OrderCmd {
    Submit {
        #[arg(long)]
        channel: String,
        file: PathBuf,
    },
    Status { order_id: String },
}

#[derive(Debug, Subcommand)]
enum RunCmd {
    Scenario {
        file: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Journal file (default: inside the workspace).
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Dispatch independent sub-orders of one order concurrently.
        #[arg(long)]
        parallel: bool,
        /// Write the event log here.
        #[arg(long)]
        event_log: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the JSON report instead of the summary.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum TaskCmd {
    List,
    Complete {
        task_id: String,
        /// Task outputs as key=value.
        #[arg(long, num_args = 1..)]
        data: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum PlatformCmd {
    Dump { target_id: String },
}

#[derive(Debug, Subcommand)]
enum BusCmd {
    Dead { queue: String },
}

/// Runs the CLI against the process's stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let ws = Workspace::new(&cli.state);
    let res = match cli.cmd {
        Cmd::Catalog {
            cmd: CatalogCmd::Validate { file },
        } => catalog_validate(&file, out),
        Cmd::Order {
            cmd: OrderCmd::Submit { channel, file },
        } => order_submit(&ws, &channel, &file, out),
        Cmd::Order {
            cmd: OrderCmd::Status { order_id },
        } => order_status(&ws, &order_id, out),
        Cmd::Run {
            cmd:
                RunCmd::Scenario {
                    file,
                    workers,
                    journal,
                    parallel,
                    event_log,
                    report,
                    json,
                },
        } => run_scenario_cmd(&ws, &file, workers, journal, parallel, event_log, report, json, out),
        Cmd::Task { cmd: TaskCmd::List } => task_list(&ws, out),
        Cmd::Task {
            cmd: TaskCmd::Complete { task_id, data },
        } => task_complete(&ws, &task_id, &data, out),
        Cmd::Platform {
            cmd: PlatformCmd::Dump { target_id },
        } => platform_dump(&ws, &target_id, out),
        Cmd::Bus {
            cmd: BusCmd::Dead { queue },
        } => bus_dead(&ws, &queue, out),
        Cmd::Init { scenario } => init(&ws, &scenario, out),
        Cmd::Events { order_id, normalize } => events(&ws, order_id.as_deref(), normalize, out),
    };
    match res {
        Ok(code) => code,
        Err(Failure(code, msg)) => {
            let _ = writeln!(err, "error: {msg}");
            code
        }
    }
}

struct Failure(i32, String);

type CmdResult = Result<i32, Failure>;

fn usage(msg: impl ToString) -> Failure {
    Failure(EXIT_USAGE, msg.to_string())
}

fn fail(msg: impl ToString) -> Failure {
    Failure(EXIT_FAIL, msg.to_string())
}

fn ws_err(e: WorkspaceError) -> Failure {
    match e {
        WorkspaceError::NotInitialized(_) | WorkspaceError::Corrupt { .. } => usage(e),
        other => fail(other),
    }
}

fn open(ws: &Workspace) -> Result<Session, Failure> {
    ws.open().map_err(ws_err)
}

fn save(ws: &Workspace, s: &Session) -> Result<(), Failure> {
    ws.save(&s.engine).map_err(ws_err)
}

fn w(out: &mut dyn Write, text: &str) {
    let _ = out.write_all(text.as_bytes());
}

fn catalog_validate(file: &Path, out: &mut dyn Write) -> CmdResult {
    let text = std::fs::read_to_string(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
    let cat = load_catalog(&text).map_err(|e| usage(format!("{}: {e}", file.display())))?;
    let report = validate_catalog(&cat);
    if report.is_clean() {
        w(out, &format!("{}: ok ({} products)\n", file.display(), cat.products.len()));
        return Ok(EXIT_OK);
    }
    for f in &report.findings {
        w(out, &format!("{f}\n"));
    }
    Ok(EXIT_FAIL)
}

fn order_submit(ws: &Workspace, channel: &str, file: &Path, out: &mut dyn Write) -> CmdResult {
    let bytes = std::fs::read(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
    let s = open(ws)?;
    let order = s
        .capture
        .parse_channel_order(&RawChannelDocument::new(channel, bytes), s.clock.as_ref())
        .map_err(|e| match e {
            CaptureError::MalformedDocument(p) => usage(format!("{}: {p}", file.display())),
            other => usage(other),
        })?;
    let submitted = submit(&order, s.engine.bus(), s.engine.journal(), s.clock.as_ref());
    let code = match submitted {
        Ok(id) => {
            s.engine.run_until_idle().map_err(fail)?;
            let agg = s.engine.aggregate(&id).map_err(fail)?;
            w(out, &format!("{id} {}\n", order_report(&agg).state));
            EXIT_OK
        }
        Err(CaptureError::SchemaInvalid(f)) => {
            let codes: Vec<String> = f.iter().map(|x| format!("{}: {}", x.code, x.detail)).collect();
            return Err(usage(format!("order rejected at capture: {}", codes.join("; "))));
        }
        Err(e) => return Err(fail(e)),
    };
    save(ws, &s)?;
    Ok(code)
}

fn order_status(ws: &Workspace, order_id: &str, out: &mut dyn Write) -> CmdResult {
    let s = open(ws)?;
    save(ws, &s)?;
    let agg = s
        .engine
        .aggregate(order_id)
        .map_err(|_| fail(format!("order `{order_id}` not found")))?;
    let mut text = serde_json::to_string_pretty(&order_report(&agg)).expect("report serializes");
    text.push('\n');
    w(out, &text);
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn run_scenario_cmd(
    ws: &Workspace,
    file: &Path,
    workers: Option<usize>,
    journal: Option<PathBuf>,
    parallel: bool,
    event_log_path: Option<PathBuf>,
    report_path: Option<PathBuf>,
    json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let scenario = Scenario::load(file).map_err(usage)?;
    let registry = scenario.registry().map_err(usage)?;
    ws.init(&WorkspaceConfig::from_scenario(&scenario), &registry).map_err(ws_err)?;
    let opts = RunOptions {
        journal: Some(journal.unwrap_or_else(|| ws.journal_path())),
        workers,
        parallel_dispatch: parallel.then_some(true),
    };
    let run = run_scenario(&scenario, &opts).map_err(|e| if e.is_input_error() { usage(e) } else { fail(e) })?;
    ws.save(&run.engine).map_err(ws_err)?;

    if let Some(p) = event_log_path {
        std::fs::write(&p, event_log_text(&run.event_log, false)).map_err(|e| fail(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = report_path {
        std::fs::write(&p, run.report.to_json()).map_err(|e| fail(format!("{}: {e}", p.display())))?;
    }
    if json {
        w(out, &run.report.to_json());
    } else {
        for o in &run.report.orders {
            w(out, &format!("{} {} [{}]\n", o.order_id, o.state, o.dispatch_sequence.join(" ")));
        }
        for c in &run.report.checks {
            let mark = if c.passed { "ok" } else { "FAILED" };
            w(out, &format!("check {}: {mark} {}\n", c.check, c.detail));
        }
        w(out, if run.report.passed { "PASS\n" } else { "FAIL\n" });
    }
    Ok(if run.report.passed { EXIT_OK } else { EXIT_FAIL })
}

fn task_list(ws: &Workspace, out: &mut dyn Write) -> CmdResult {
    let s = open(ws)?;
    save(ws, &s)?;
    for t in s.engine.registry().tasks().list() {
        let keys: Vec<&str> = t.required_output_keys.iter().map(String::as_str).collect();
        w(
            out,
            &format!("{} {:?} {} needs [{}] {}\n", t.task_id, t.state, t.suborder_id, keys.join(","), t.instructions),
        );
    }
    Ok(EXIT_OK)
}

fn parse_data(items: &[String]) -> Result<DataMap, Failure> {
    items
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .filter(|(k, _)| !k.is_empty())
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| usage(format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

fn task_complete(ws: &Workspace, task_id: &str, data: &[String], out: &mut dyn Write) -> CmdResult {
    let data = parse_data(data)?;
    let s = open(ws)?;
    match s.engine.registry().tasks().complete(task_id, data) {
        Ok(_) => {}
        Err(e @ TaskError::MissingOutputKeys { .. }) => return Err(usage(e)),
        Err(e) => return Err(fail(e)),
    }
    s.engine.publish_task_completion(task_id).map_err(fail)?;
    s.engine.run_until_idle().map_err(fail)?;
    save(ws, &s)?;
    let task = s.engine.registry().tasks().get(task_id).expect("just completed");
    let state = s
        .engine
        .aggregate(&task.order_id)
        .map(|a| order_report(&a).state)
        .unwrap_or_default();
    w(out, &format!("{task_id} done; order {} {state}\n", task.order_id));
    Ok(EXIT_OK)
}

fn platform_dump(ws: &Workspace, target_id: &str, out: &mut dyn Write) -> CmdResult {
    let s = open(ws)?;
    save(ws, &s)?;
    let dump = s.engine.registry().dump(target_id).map_err(fail)?;
    w(out, &dump);
    Ok(EXIT_OK)
}

fn bus_dead(ws: &Workspace, queue: &str, out: &mut dyn Write) -> CmdResult {
    let s = open(ws)?;
    save(ws, &s)?;
    if !s.engine.bus().has_queue(queue) {
        return Err(fail(format!("unknown queue `{queue}`")));
    }
    for m in s.engine.bus().dead_letters(queue).map_err(fail)? {
        w(out, &format!("{}\n", m.to_wire()));
    }
    Ok(EXIT_OK)
}

fn init(ws: &Workspace, scenario: &Path, out: &mut dyn Write) -> CmdResult {
    let sc = Scenario::load(scenario).map_err(usage)?;
    let registry = sc.registry().map_err(usage)?;
    ws.init(&WorkspaceConfig::from_scenario(&sc), &registry).map_err(ws_err)?;
    w(out, &format!("initialized {}\n", ws.dir().display()));
    Ok(EXIT_OK)
}

fn events(ws: &Workspace, order_id: Option<&str>, normalize: bool, out: &mut dyn Write) -> CmdResult {
    let s = open(ws)?;
    save(ws, &s)?;
    let records = match order_id {
        Some(id) => {
            let r = s.engine.journal().records_for(id);
            if r.is_empty() {
                return Err(fail(format!("order `{id}` not found")));
            }
            r
        }
        None => s.engine.journal().records(),
    };
    w(out, &event_log_text(&event_log(&records), normalize));
    Ok(EXIT_OK)
}
