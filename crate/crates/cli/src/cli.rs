//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use coconstruct_core::graph::ArtifactId;
use coconstruct_core::session::{
    load_session, verify_replay, Feedback, ReviewerMode, Session, SessionPolicy, SessionState,
};
use serde_json::json;

use crate::config::EngineConfig;
use crate::error::ErrorEnvelope;
use crate::service::{serve, ServiceConfig};
use crate::simulate::{ranking_recovery, simulate, SimulationParams};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "coconstruct", version, about = "Human-AI co-construction of programs by preference feedback")]
pub struct Cli {
    /// Directory holding session files.
    #[arg(long, global = true, env = "COCONSTRUCT_STORAGE", default_value = ".coconstruct")]
    pub storage: PathBuf,
    /// Session to operate on; defaults to the most recently created one.
    #[arg(long, global = true)]
    pub session: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a session from a problem statement.
    New(NewArgs),
    /// Review the specification.
    #[command(subcommand)]
    Spec(SpecCommand),
    /// Run one sample, tournament and refinement cycle.
    Iterate,
    /// Send expert feedback.
    #[command(subcommand)]
    Feedback(FeedbackCommand),
    /// Inspect the session.
    Show {
        #[command(subcommand)]
        what: Option<ShowCommand>,
    },
    /// Write the session file, or the event log with --events.
    Export {
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Line-delimited event records: index, kind, payload digest.
        #[arg(long)]
        events: bool,
    },
    /// Re-execute a session file's event log and compare the result.
    Replay {
        file: PathBuf,
        /// Replay with this seed instead of the recorded one.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte-Carlo tournaments over synthetic candidates.
    Simulate(SimulateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct NewArgs {
    /// Problem statement; read from --file when omitted.
    pub statement: Vec<String>,
    #[arg(long, conflicts_with = "statement")]
    pub file: Option<PathBuf>,
    /// Use deterministic mock backends (default).
    #[arg(long, conflicts_with = "live")]
    pub mock: bool,
    /// Use the backends named in --config.
    #[arg(long, requires = "config")]
    pub live: bool,
    /// Backend configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Refinements sampled per iteration.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value_t = Mode::Lazy)]
    pub mode: Mode,
    #[arg(long, default_value_t = 10)]
    pub max_iterations: usize,
    /// Concurrent judge calls per tournament round.
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Preemptive,
    Lazy,
}

#[derive(Debug, Subcommand)]
pub enum SpecCommand {
    /// Print the current specification.
    Show,
    /// Replace the specification.
    Edit {
        content: Option<String>,
        #[arg(long, conflicts_with = "content")]
        file: Option<PathBuf>,
    },
    /// Accept the generated specification as is.
    Approve,
}

#[derive(Debug, Subcommand)]
pub enum FeedbackCommand {
    /// Pick one of the two finalist programs.
    Choose {
        id: ArtifactId,
        #[arg(long)]
        why: Option<String>,
    },
    /// Free-text critique for the next iteration.
    Critique {
        text: String,
        #[arg(long)]
        target: Option<ArtifactId>,
    },
    /// Replace an artifact's content.
    Edit {
        id: ArtifactId,
        content: Option<String>,
        #[arg(long, conflicts_with = "content")]
        file: Option<PathBuf>,
    },
    /// Report running a program.
    Report {
        id: ArtifactId,
        #[arg(long)]
        failed: bool,
        #[arg(long)]
        not_run: bool,
        #[arg(long, default_value = "")]
        log: String,
    },
    /// Finish with the given artifact.
    Accept { id: ArtifactId },
    /// Stop the session.
    Abort {
        #[arg(long)]
        reason: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ShowCommand {
    /// Status and counts.
    State,
    /// One artifact with its chain of abstractions.
    Lineage { id: ArtifactId },
    /// Fitted utilities, highest first.
    Utilities,
    /// Match log of an iteration (latest by default).
    Matches {
        #[arg(long)]
        iteration: Option<usize>,
    },
    /// Event log.
    Events,
    /// Context the next iteration will be conditioned on.
    Context,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Probability the judge prefers the truly better candidate.
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Instead of tournaments, fit utilities from this many random pairs.
    #[arg(long)]
    pub comparisons: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    #[arg(long, env = "RUST_LOG", default_value = "info")]
    pub log_level: String,
}

/// Output sink; separated so tests can capture it.
pub struct Output<'a> {
    pub out: &'a mut dyn Write,
    pub json: bool,
}

impl Output<'_> {
    fn emit(&mut self, text: impl AsRef<str>, value: serde_json::Value) -> Result<(), ErrorEnvelope> {
        let result = if self.json {
            writeln!(self.out, "{value}")
        } else {
            write!(self.out, "{}", text.as_ref()).and_then(|_| {
                if text.as_ref().ends_with('\n') {
                    Ok(())
                } else {
                    writeln!(self.out)
                }
            })
        };
        result.map_err(|e| ErrorEnvelope::new("io", e.to_string()))
    }
}

/// Parses arguments and runs; returns the process exit code. Usage errors
/// exit through clap with status 2.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are not errors and go to stdout.
            let _ = if err.use_stderr() {
                write!(stderr, "{}", err.render())
            } else {
                write!(stdout, "{}", err.render())
            };
            return err.exit_code();
        }
    };
    let mut output = Output { out: stdout, json: cli.json };
    match run(cli, &mut output) {
        Ok(()) => 0,
        Err(envelope) => {
            let _ = writeln!(stderr, "{}", envelope.to_json());
            1
        }
    }
}

struct Context {
    store: Store,
    session: Option<String>,
}

impl Context {
    fn session_id(&self) -> Result<String, ErrorEnvelope> {
        self.session
            .clone()
            .or_else(|| self.store.current())
            .ok_or_else(|| ErrorEnvelope::new("validation", "no session selected; run `new` or pass --session"))
    }

    fn load(&self) -> Result<SessionState, ErrorEnvelope> {
        self.store.load(&self.session_id()?)
    }

    /// Loads the session, applies `op`, and saves whatever state results.
    fn mutate<T>(
        &self,
        op: impl FnOnce(&mut Session) -> Result<T, coconstruct_core::session::SessionError>,
    ) -> Result<(T, SessionState), ErrorEnvelope> {
        let mut session = Session::from_state(self.load()?)?;
        let before = session.state().event_log.len();
        let result = op(&mut session);
        if session.state().event_log.len() != before {
            self.store.save(session.state())?;
        }
        let value = result?;
        Ok((value, session.into_state()))
    }
}

fn read_text(inline: Option<String>, file: Option<&Path>, what: &str) -> Result<String, ErrorEnvelope> {
    match (inline, file) {
        (Some(text), _) => Ok(text),
        (None, Some(path)) => std::fs::read_to_string(path)
            .map_err(|e| ErrorEnvelope::new("io", format!("{}: {e}", path.display()))),
        (None, None) => Err(ErrorEnvelope::new("validation", format!("{what} is required"))),
    }
}

fn state_summary(state: &SessionState) -> (String, serde_json::Value) {
    let completed = state.completed_iterations();
    let mut text = format!(
        "session\t{}\nstatus\t{}\nseed\t{}\nartifacts\t{}\npreference_records\t{}\niterations\t{}\nevents\t{}\n",
        state.session_id,
        state.status,
        state.seed,
        state.graph.len(),
        state.preference_log.len(),
        completed,
        state.event_log.len()
    );
    if let Some(spec) = state.current_spec {
        text.push_str(&format!("specification\t{spec}\n"));
    }
    if let Some((a, b)) = state.current_finalists {
        text.push_str(&format!("finalists\t{a}\t{b}\n"));
    }
    if let Some(id) = state.accepted {
        text.push_str(&format!("accepted\t{id}\n"));
    }
    if let Some(err) = &state.last_error {
        text.push_str(&format!("last_error\t{err}\n"));
    }
    let value = json!({
        "session_id": state.session_id,
        "status": state.status,
        "seed": state.seed,
        "artifacts": state.graph.len(),
        "preference_records": state.preference_log.len(),
        "iterations": completed,
        "events": state.event_log.len(),
        "current_spec": state.current_spec,
        "current_finalists": state.current_finalists,
        "accepted": state.accepted,
        "last_error": state.last_error,
    });
    (text, value)
}

pub fn run(cli: Cli, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    match cli.command {
        Command::Simulate(args) => return run_simulate(args, output),
        Command::Replay { file, seed } => return run_replay(&file, seed, output),
        Command::Serve(args) => {
            let config = ServiceConfig {
                bind: args.bind,
                storage: cli.storage,
                backend_config: args.config,
                parallelism: args.parallelism,
                log_level: args.log_level,
            };
            crate::init_logging(&config.log_level);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ErrorEnvelope::new("io", e.to_string()))?;
            return runtime
                .block_on(serve(config))
                .map_err(|e| ErrorEnvelope::new("io", e.to_string()));
        }
        _ => {}
    }

    let ctx = Context {
        store: Store::open(&cli.storage)?,
        session: cli.session,
    };
    match cli.command {
        Command::New(args) => run_new(&ctx, args, output),
        Command::Spec(command) => run_spec(&ctx, command, output),
        Command::Iterate => run_iterate(&ctx, output),
        Command::Feedback(command) => run_feedback(&ctx, command, output),
        Command::Show { what } => run_show(&ctx, what.unwrap_or(ShowCommand::State), output),
        Command::Export { out, events } => run_export(&ctx, out, events, output),
        Command::Simulate(_) | Command::Replay { .. } | Command::Serve(_) => unreachable!("handled above"),
    }
}

fn run_new(ctx: &Context, args: NewArgs, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let statement = if args.statement.is_empty() {
        read_text(None, args.file.as_deref(), "a problem statement")?
    } else {
        args.statement.join(" ")
    };
    let engine = match &args.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    let mut policy = SessionPolicy {
        sample_count: args.k,
        temperature: args.temperature,
        reviewer_mode: match args.mode {
            Mode::Preemptive => ReviewerMode::Preemptive,
            Mode::Lazy => ReviewerMode::Lazy,
        },
        max_iterations: args.max_iterations,
        parallelism: args.parallelism,
        ..SessionPolicy::default()
    };
    if args.live {
        let (generator, judge) = engine.live_pair()?;
        policy.generator_backend = generator;
        policy.judge_backend = judge;
    }
    let seed = args.seed.unwrap_or_else(rand::random);
    let id = format!("s-{}", uuid::Uuid::new_v4().simple());
    let session = Session::create(&statement, policy, engine.registry(), seed, Some(id))?;
    let state = session.state();
    ctx.store.save(state)?;
    ctx.store.set_current(&state.session_id)?;
    let (mut text, value) = state_summary(state);
    if let Some(spec) = state.current_spec {
        text.push_str(&format!("\n{}\n", state.display_content(spec)?));
    }
    output.emit(text, value)?;
    if state.status == coconstruct_core::session::SessionStatus::Aborted {
        let message = state.last_error.clone().unwrap_or_default();
        return Err(ErrorEnvelope::new("backend-failure", message)
            .with_detail(json!({ "session_id": state.session_id })));
    }
    Ok(())
}

fn run_spec(ctx: &Context, command: SpecCommand, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    match command {
        SpecCommand::Show => {
            let state = ctx.load()?;
            let id = state
                .current_spec
                .ok_or_else(|| ErrorEnvelope::new("validation", "session has no specification"))?;
            let content = state.display_content(id)?;
            output.emit(content, json!({ "id": id, "content": content }))
        }
        SpecCommand::Edit { content, file } => {
            let content = read_text(content, file.as_deref(), "new specification content")?;
            let (id, state) = ctx.mutate(|s| s.edit_specification(&content))?;
            output.emit(
                format!("specification\t{id}\nstatus\t{}\n", state.status),
                json!({ "id": id, "status": state.status }),
            )
        }
        SpecCommand::Approve => {
            let (_, state) = ctx.mutate(|s| s.approve_specification())?;
            output.emit(format!("status\t{}\n", state.status), json!({ "status": state.status }))
        }
    }
}

fn run_iterate(ctx: &Context, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let (index, state) = ctx.mutate(|s| s.run_iteration().map(|r| r.index))?;
    let record = &state.iterations[index - 1];
    let outcome = record.tournament_outcome.as_ref().expect("completed iterations have a tournament");
    let (a, b) = record.finalist_program_ids.expect("completed iterations have finalists");
    let text = format!(
        "iteration\t{index}\nfinalists\t{a}\t{b}\nmatches\t{}\npreference_records\t{}\nstatus\t{}\n{}",
        outcome.match_log.len(),
        state.preference_log.len(),
        state.status,
        outcome.match_lines()
    );
    output.emit(
        text,
        json!({
            "iteration": index,
            "finalists": [a, b],
            "refinement_finalists": outcome.finalists,
            "matches": outcome.match_log,
            "summary": outcome.summary,
            "preference_records": state.preference_log.len(),
            "status": state.status,
        }),
    )
}

fn run_feedback(ctx: &Context, command: FeedbackCommand, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let feedback = match command {
        FeedbackCommand::Choose { id, why } => Feedback::BinaryChoice {
            chosen: id,
            justification: why,
        },
        FeedbackCommand::Critique { text, target } => Feedback::NlCritique { text, target },
        FeedbackCommand::Edit { id, content, file } => Feedback::DirectEdit {
            target: id,
            content: read_text(content, file.as_deref(), "edited content")?,
            diff: String::new(),
        },
        FeedbackCommand::Report {
            id,
            failed,
            not_run,
            log,
        } => Feedback::ExecutionReport {
            target: id,
            ran: !not_run,
            failed,
            log_excerpt: log,
        },
        FeedbackCommand::Accept { id } => Feedback::Accept { chosen: id },
        FeedbackCommand::Abort { reason } => Feedback::Abort { reason },
    };
    let kind = feedback.kind();
    let (_, state) = ctx.mutate(|s| s.apply_feedback(feedback))?;
    let event = state
        .event_log
        .iter()
        .rev()
        .find(|e| e.is_feedback())
        .expect("feedback was logged");
    let mut text = format!(
        "recorded\t{kind}\nevent\t{}\nstatus\t{}\npreference_records\t{}\n",
        event.event_index,
        state.status,
        state.preference_log.len()
    );
    if let coconstruct_core::session::EventBody::Feedback(Feedback::DirectEdit { diff, .. }) = &event.body {
        text.push_str(diff);
    }
    output.emit(
        text,
        json!({
            "event": event,
            "status": state.status,
            "preference_records": state.preference_log.len(),
        }),
    )
}

fn run_show(ctx: &Context, what: ShowCommand, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let state = ctx.load()?;
    match what {
        ShowCommand::State => {
            let (text, value) = state_summary(&state);
            output.emit(text, value)
        }
        ShowCommand::Lineage { id } => {
            let chain = state.graph.lineage(id).map_err(coconstruct_core::session::SessionError::from)?;
            let mut text = String::new();
            let mut items = Vec::new();
            for ancestor in chain {
                let artifact = state.graph.get(ancestor).map_err(coconstruct_core::session::SessionError::from)?;
                let level_name = &state.graph.levels[artifact.level].name;
                let content = state.display_content(ancestor)?;
                text.push_str(&format!(
                    "== {ancestor} (level {} {level_name}, {:?})\n{content}\n",
                    artifact.level, artifact.provenance
                ));
                items.push(json!({ "artifact": artifact, "display_content": content }));
            }
            output.emit(text, json!({ "lineage": items }))
        }
        ShowCommand::Utilities => match &state.utility_snapshot {
            Some(estimate) => {
                let rows: Vec<_> = estimate.ranked().into_iter().map(|(id, score)| json!({ "id": id, "score": score })).collect();
                output.emit(estimate.to_table(), json!({ "rows": rows, "converged": estimate.converged }))
            }
            None => output.emit("id\tscore\n", json!({ "rows": [] })),
        },
        ShowCommand::Matches { iteration } => {
            let record = match iteration {
                Some(i) => state.iterations.get(i.wrapping_sub(1)),
                None => state.iterations.iter().rev().find(|r| r.tournament_outcome.is_some()),
            }
            .ok_or_else(|| ErrorEnvelope::new("unknown-id", "no such iteration"))?;
            match &record.tournament_outcome {
                Some(outcome) => output.emit(outcome.match_lines(), json!({ "iteration": record.index, "matches": outcome.match_log })),
                None => output.emit("", json!({ "iteration": record.index, "matches": [] })),
            }
        }
        ShowCommand::Events => {
            let text: String = state.event_log.iter().map(|e| format!("{}\n", e.export_line())).collect();
            output.emit(text, json!({ "events": state.event_log }))
        }
        ShowCommand::Context => {
            let context = state.next_context();
            output.emit(&context, json!({ "context": context }))
        }
    }
}

fn run_export(ctx: &Context, out: Option<PathBuf>, events: bool, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let state = ctx.load()?;
    let body = if events {
        state.event_log.iter().map(|e| format!("{}\n", e.export_line())).collect()
    } else {
        state.to_json()
    };
    match out {
        Some(path) => {
            std::fs::write(&path, body).map_err(|e| ErrorEnvelope::new("io", format!("{}: {e}", path.display())))?;
            output.emit(format!("wrote\t{}\n", path.display()), json!({ "path": path }))
        }
        None => {
            output.out.write_all(body.as_bytes()).map_err(|e| ErrorEnvelope::new("io", e.to_string()))?;
            if !body.ends_with('\n') {
                writeln!(output.out).map_err(|e| ErrorEnvelope::new("io", e.to_string()))?;
            }
            Ok(())
        }
    }
}

fn run_replay(file: &Path, seed: Option<u64>, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let state = load_session(file)?;
    let digest = match seed {
        None => verify_replay(&state)?,
        Some(seed) => {
            let mut altered = state.clone();
            altered.seed = seed;
            verify_replay(&altered)?
        }
    };
    output.emit(
        format!("deterministic\t{digest}\n"),
        json!({ "deterministic": true, "sha256": digest, "events": state.event_log.len() }),
    )
}

fn run_simulate(args: SimulateArgs, output: &mut Output<'_>) -> Result<(), ErrorEnvelope> {
    let invalid = |e: crate::simulate::SimulationError| ErrorEnvelope::new("validation", e.to_string());
    if let Some(comparisons) = args.comparisons {
        let report = ranking_recovery(args.n, comparisons, args.p, args.seed).map_err(invalid)?;
        let text = format!(
            "candidates\t{}\ncomparisons\t{}\nkendall_tau\t{:.6}\nfit_converged\t{}\n",
            report.n, report.comparisons, report.kendall_tau, report.fit_converged
        );
        let value = serde_json::to_value(&report).expect("report serializes");
        return output.emit(text, value);
    }
    let report = simulate(SimulationParams {
        n: args.n,
        noise_p: args.p,
        trials: args.trials,
        seed: args.seed,
    })
    .map_err(invalid)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    output.emit(report.to_text(), value)
}
