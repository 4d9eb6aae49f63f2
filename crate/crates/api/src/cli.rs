//! `perfbaron` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use perfbaron_core::changepoint::{CpdParams, TriageState};
use perfbaron_core::compare::{self, ComparisonReport, DEFAULT_MIN_DEVIATION};
use perfbaron_core::error::{Error, ErrorKind, Result};
use perfbaron_core::ingest;
use perfbaron_core::model::{MetricKey, Resolution, RootCause, RunId};
use perfbaron_core::triage::{ActionKind, ActionPayload, Targets, TransitionRequest, TriageFilter, TriageGroup};
use perfbaron_core::{KeyFilter, Store};

use crate::http::{self, ServeConfig};
use crate::parse_time;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "perfbaron", version, about = "CI performance results: change points, canaries, comparisons, triage")]
pub struct Cli {
    /// Store journal path.
    #[arg(long, env = "PERFBARON_DB", global = true)]
    pub db: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a newline-delimited JSON file of runs and results.
    Ingest {
        #[arg(long)]
        file: PathBuf,
        /// The file holds raw per-operation events.
        #[arg(long)]
        raw: bool,
    },
    /// Run change point detection.
    Detect(DetectArgs),
    /// Compare two revisions.
    Compare {
        #[arg(long)]
        base: String,
        #[arg(long)]
        candidate: String,
        #[arg(long, default_value_t = DEFAULT_MIN_DEVIATION)]
        min_deviation: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List and act on change point groups and tickets.
    #[command(subcommand)]
    Triage(TriageCommand),
    /// Evaluate canaries, manage mutes and the rerun policy.
    #[command(subcommand)]
    Canary(CanaryCommand),
    /// Ticket summary over `[start, end)`.
    Report {
        #[arg(long)]
        start: String,
        #[arg(long)]
        end: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 64)]
        concurrency: usize,
        /// Require this bearer token on every request.
        #[arg(long, env = "PERFBARON_TOKEN")]
        token: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Metric key `project/configuration/task/test/measurement`; repeatable.
    #[arg(long = "key")]
    pub keys: Vec<String>,
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub significance: Option<f64>,
    #[arg(long)]
    pub min_segment: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum TriageCommand {
    /// Change points grouped by revision, newest first.
    List {
        #[arg(long)]
        measurement_regex: Option<String>,
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        include_canaries: bool,
    },
    /// Apply a triage action.
    Act {
        #[arg(long)]
        action: String,
        #[arg(long, num_args = 1..)]
        targets: Vec<String>,
        /// Act on every change point of this revision.
        #[arg(long)]
        group: Option<String>,
        #[arg(long, default_value = "cli")]
        actor: String,
        #[arg(long)]
        ticket_id: Option<String>,
        #[arg(long)]
        summary: Option<String>,
        #[arg(long)]
        root_cause: Option<String>,
        #[arg(long)]
        resolution: Option<String>,
    },
    /// Set a ticket's root cause and resolution.
    Label {
        #[arg(long)]
        ticket: String,
        #[arg(long)]
        root_cause: String,
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long, default_value = "cli")]
        actor: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum CanaryCommand {
    /// Apply the canary policy to a task run.
    Evaluate {
        /// Task run id.
        #[arg(long)]
        task: String,
    },
    /// Mute canary outliers for keys matching a regex.
    Mute {
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        start: Option<i64>,
        #[arg(long)]
        end: Option<i64>,
        #[arg(long, default_value = "cli")]
        created_by: String,
        #[arg(long, default_value = "")]
        reason: String,
    },
    /// Show or change the canary policy.
    Policy {
        #[arg(long)]
        enabled: Option<bool>,
        #[arg(long)]
        max_reruns: Option<u32>,
    },
    /// Show or replace the test-name patterns that designate canaries.
    Patterns { patterns: Vec<String> },
}

fn enum_arg<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_")))
        .map_err(|_| Error::Validation(format!("unknown {what} {s:?}")))
}

fn open_store(db: &Option<PathBuf>) -> Result<Store> {
    match db {
        Some(path) => Store::open(path),
        None => Err(Error::Validation("no store: pass --db or set PERFBARON_DB".into())),
    }
}

fn emit<T: Serialize>(
    out: &mut dyn Write,
    json: bool,
    value: &T,
    text: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    if json {
        let s = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{s}")?;
    } else {
        text(out)?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn write_report(out: &mut dyn Write, report: &ComparisonReport) -> std::io::Result<()> {
    writeln!(out, "{} -> {}: {} rows", report.base_revision, report.cand_revision, report.rows.len())?;
    writeln!(out, "key\tbase_mean\tcand_mean\tpercent_change\tdeviation\tzero_variance")?;
    for r in &report.rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.key,
            r.base.mean,
            r.cand.mean,
            opt(r.percent_change),
            opt(r.deviation),
            r.zero_variance
        )?;
    }
    for s in &report.skipped {
        writeln!(out, "skipped {} (missing {})", s.key, s.missing.join(", "))?;
    }
    Ok(())
}

fn write_groups(out: &mut dyn Write, groups: &[TriageGroup]) -> std::io::Result<()> {
    for g in groups {
        writeln!(out, "{}\t{}\t{} change points", g.revision, g.commit_date.to_rfc3339(), g.change_points.len())?;
        for cp in &g.change_points {
            let change = (cp.after.stats.mean / cp.before.stats.mean - 1.0) * 100.0;
            writeln!(
                out,
                "  {}\t{}\t{:+.2}%\tcalculated {}",
                cp.id,
                cp.triage_state,
                change,
                cp.calculated_on.to_rfc3339()
            )?;
        }
    }
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let json = cli.json;
    if let Command::Serve { port, bind, concurrency, token } = &cli.command {
        let store = Arc::new(open_store(&cli.db)?);
        let config = ServeConfig { concurrency: *concurrency, token: token.clone() };
        let addr = format!("{bind}:{port}");
        let runtime = tokio::runtime::Runtime::new()?;
        return runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind(&addr).await?;
            writeln!(out, "listening on http://{}", listener.local_addr()?)?;
            axum::serve(listener, http::router(store, &config)).await?;
            Ok(())
        });
    }
    let store = open_store(&cli.db)?;
    match cli.command {
        Command::Serve { .. } => unreachable!("handled above"),
        Command::Ingest { file, raw } => {
            let records = ingest::parse_ndjson(BufReader::new(File::open(&file)?))?;
            let summary = store.ingest_records(records, raw)?;
            emit(out, json, &summary, |o| {
                writeln!(o, "ingested {} runs, {} measurements", summary.runs, summary.measurements)
            })
        }
        Command::Detect(args) => {
            let defaults = CpdParams::default();
            let params = CpdParams {
                permutations: args.permutations.unwrap_or(defaults.permutations),
                rng_seed: args.seed.unwrap_or(defaults.rng_seed),
                significance: args.significance.unwrap_or(defaults.significance),
                min_segment: args.min_segment.unwrap_or(defaults.min_segment),
                ..defaults
            };
            let keys = args.keys.iter().map(|k| k.parse::<MetricKey>()).collect::<Result<Vec<_>>>()?;
            let filter = KeyFilter { keys, ..KeyFilter::default() };
            let summary = store.detect(&filter, &params)?;
            emit(out, json, &summary, |o| writeln!(o, "{} keys, {} change points", summary.keys, summary.change_points))
        }
        Command::Compare { base, candidate, min_deviation, csv } => {
            let report = compare::filter_and_sort(
                store.compare_revisions(&base, &candidate, &KeyFilter::all())?,
                min_deviation,
            )?;
            if let Some(path) = csv {
                std::fs::write(path, compare::export_csv(&report))?;
            }
            emit(out, json, &report, |o| write_report(o, &report))
        }
        Command::Triage(TriageCommand::List { measurement_regex, state, include_canaries }) => {
            let filter = TriageFilter {
                measurement_regex,
                state: state.map(|s| s.parse::<TriageState>()).transpose()?,
                include_canaries,
                ..TriageFilter::default()
            };
            let groups = store.list_groups(&filter)?;
            emit(out, json, &groups, |o| write_groups(o, &groups))
        }
        Command::Triage(TriageCommand::Act {
            action,
            targets,
            group,
            actor,
            ticket_id,
            summary,
            root_cause,
            resolution,
        }) => {
            let request = TransitionRequest {
                actor,
                action: action.parse::<ActionKind>()?,
                targets: Targets { ids: targets, group },
                payload: ActionPayload {
                    ticket_id,
                    summary,
                    root_cause: root_cause.map(|r| enum_arg::<RootCause>("root cause", &r)).transpose()?,
                    resolution: resolution.map(|r| enum_arg::<Resolution>("resolution", &r)).transpose()?,
                },
                expected_versions: Default::default(),
            };
            let outcome = store.transition(request)?;
            emit(out, json, &outcome, |o| {
                for cp in &outcome.change_points {
                    writeln!(o, "{}\t{}", cp.id, cp.triage_state)?;
                }
                if let Some(t) = &outcome.ticket {
                    writeln!(o, "ticket {}", t.ticket_id)?;
                }
                Ok(())
            })
        }
        Command::Triage(TriageCommand::Label { ticket, root_cause, resolution, actor }) => {
            let t = store.label_ticket(
                &ticket,
                enum_arg("root cause", &root_cause)?,
                resolution.map(|r| enum_arg("resolution", &r)).transpose()?,
                &actor,
            )?;
            emit(out, json, &t, |o| writeln!(o, "{}\t{:?}\t{:?}", t.ticket_id, t.root_cause, t.resolution))
        }
        Command::Canary(CanaryCommand::Evaluate { task }) => {
            let eval = store.evaluate_canaries(&RunId(task))?;
            emit(out, json, &eval, |o| {
                writeln!(o, "{:?}", eval.decision.verdict)?;
                for k in &eval.decision.triggering_keys {
                    writeln!(o, "  outlier {k}")?;
                }
                Ok(())
            })
        }
        Command::Canary(CanaryCommand::Mute { pattern, start, end, created_by, reason }) => {
            let mute = store.apply_mute(perfbaron_core::canary::NewMute {
                key_pattern: pattern,
                order_range: perfbaron_core::canary::OrderRange { start, end },
                created_by,
                reason,
            })?;
            emit(out, json, &mute, |o| writeln!(o, "mute {}", mute.id))
        }
        Command::Canary(CanaryCommand::Policy { enabled, max_reruns }) => {
            if enabled.is_some() || max_reruns.is_some() {
                let mut config = store.read().policy().clone();
                config.enabled = enabled.unwrap_or(config.enabled);
                config.max_reruns = max_reruns.unwrap_or(config.max_reruns);
                store.set_policy(config)?;
            }
            let config = store.read().policy().clone();
            emit(out, json, &config, |o| writeln!(o, "enabled {}, max_reruns {}", config.enabled, config.max_reruns))
        }
        Command::Canary(CanaryCommand::Patterns { patterns }) => {
            if !patterns.is_empty() {
                store.set_canary_patterns(patterns)?;
            }
            let current = store.read().canary_patterns().to_vec();
            emit(out, json, &current, |o| current.iter().try_for_each(|p| writeln!(o, "{p}")))
        }
        Command::Report { start, end } => {
            let report = store.summary_report(parse_time(&start)?, parse_time(&end)?)?;
            emit(out, json, &report, |o| {
                writeln!(
                    o,
                    "tickets {} ({:.2}/day), resolved {:.1}%",
                    report.total, report.tickets_per_day, report.percent_resolved
                )?;
                writeln!(o, "improvements {}, regressions {}", report.improvements, report.regressions)?;
                for (rc, share) in &report.root_causes {
                    writeln!(o, "  {rc:?}\t{}\t{:.1}%", share.count, share.percent)?;
                }
                Ok(())
            })
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e.kind() {
                ErrorKind::Internal => EXIT_INTERNAL,
                _ => EXIT_VALIDATION,
            }
        }
    }
}
