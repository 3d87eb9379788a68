use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use llmnas_core::distill::test_vectors;
use llmnas_core::estimator::{check_constraints, estimate_in_space, ConstraintSet, GateVerdict};
use llmnas_core::llm::{request_explanation, LlmClient, LlmConfig, TransportKind};
use llmnas_core::orchestrator::{
    replay_entries, select_final, surrogate_evaluate, verify_snapshots, EvaluationRequest,
    EvaluationResult, Event, LedgerWriter, RunConfig, RunLedger, SearchRunner, SelectionPolicy,
    StopReason,
};
use llmnas_core::space::{ArchitectureConfig, ParseError, SearchSpace, Source};
use serde_json::json;

/// Exit status for a well-formed request whose answer is "no"
/// (gate rejection, invalid architecture, replay mismatch).
const EXIT_REJECTED: u8 = 2;

#[derive(Parser)]
#[command(name = "llmnas", version, about = "LLM-guided architecture search for microcontrollers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search described by a JSON config file.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Override the ledger directory from the config.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Override the iteration budget from the config.
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Print the resource estimate and gate verdict for an architecture file ("-" for stdin).
    Estimate {
        arch: PathBuf,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// Check an architecture file against the search space.
    Validate {
        arch: PathBuf,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// Inspect the Pareto front stored in a run ledger.
    Pareto {
        #[command(subcommand)]
        action: ParetoAction,
    },
    /// Rebuild the front from evaluation events and check every stored snapshot.
    Replay { ledger: PathBuf },
    /// Pick the final architecture from a run's front.
    Select {
        /// `best-accuracy` or `min-macs:<percent>`.
        #[arg(long)]
        policy: SelectionPolicy,
        ledger: PathBuf,
    },
    /// Ask the model why an architecture was designed the way it was.
    Explain {
        arch: PathBuf,
        #[arg(long, conflicts_with = "mock_script")]
        endpoint: Option<String>,
        /// Answer from a scripted reply file instead of a live endpoint.
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[arg(long, default_value = "LLMNAS_API_KEY")]
        api_key_env: String,
        /// Append the explanation to this run ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        candidate_id: Option<String>,
    },
    /// Write the distillation reference vectors shared with the trainer.
    KdVectors {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the evaluator protocol on stdin/stdout.
    Evaluator {
        /// Answer with the surrogate formula instead of training.
        #[arg(long)]
        fake: bool,
        #[command(flatten)]
        space: SpaceArgs,
    },
}

#[derive(Subcommand)]
enum ParetoAction {
    Show {
        ledger: PathBuf,
        /// Emit the snapshot as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args)]
struct SpaceArgs {
    /// Search-space JSON; defaults to the built-in space.
    #[arg(long)]
    space: Option<PathBuf>,
}

impl SpaceArgs {
    fn load(&self) -> Result<SearchSpace> {
        let Some(path) = &self.space else { return Ok(SearchSpace::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let space: SearchSpace =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        space.check().with_context(|| format!("checking {}", path.display()))?;
        Ok(space)
    }
}

fn read_input(path: &Path) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn candidate_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// `llmnas ... | head` should end quietly rather than panic inside `println!`.
fn exit_quietly_on_broken_pipe() {
    let default = std::panic::take_hook();
    std::panic::set_hook(Box::new(move |info| {
        let msg = info
            .payload()
            .downcast_ref::<String>()
            .map(String::as_str)
            .or_else(|| info.payload().downcast_ref::<&str>().copied())
            .unwrap_or_default();
        if msg.contains("Broken pipe") {
            std::process::exit(0);
        }
        default(info);
    }));
}

fn main() -> ExitCode {
    exit_quietly_on_broken_pipe();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Search { config, ledger, iterations } => search(&config, ledger, iterations),
        Command::Estimate { arch, space } => estimate(&arch, &space.load()?),
        Command::Validate { arch, space } => validate(&arch, &space.load()?),
        Command::Pareto { action: ParetoAction::Show { ledger, json } } => pareto_show(&ledger, json),
        Command::Replay { ledger } => replay(&ledger),
        Command::Select { policy, ledger } => select(policy, &ledger),
        Command::Explain { arch, endpoint, mock_script, api_key_env, ledger, candidate_id } => {
            let llm = match (endpoint, mock_script) {
                (_, Some(script)) => LlmConfig {
                    transport: TransportKind::Mock,
                    script_path: Some(script),
                    ..LlmConfig::default()
                },
                (Some(endpoint), None) => LlmConfig { endpoint, api_key_env, ..LlmConfig::default() },
                (None, None) => bail!("explain needs --endpoint or --mock-script"),
            };
            explain(&arch, &llm, ledger.as_deref(), candidate_id)
        }
        Command::KdVectors { out } => {
            let text = serde_json::to_string_pretty(&test_vectors())?;
            std::fs::write(&out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluator { fake, space } => {
            if !fake {
                bail!("no training backend in this binary; run the trainer, or pass --fake for surrogate answers");
            }
            serve_fake(&space.load()?, io::stdin().lock(), io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn search(path: &Path, ledger: Option<PathBuf>, iterations: Option<u32>) -> Result<ExitCode> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(dir) = ledger {
        cfg.ledger_dir = dir;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
        cfg.validate()?;
    }
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received; finishing the current iteration (press again to abort)");
    })
    .context("installing interrupt handler")?;

    let out = SearchRunner::from_config(cfg)?.with_stop_flag(stop).run()?;
    let c = out.counts;
    println!("ledger: {}", out.ledger_dir.display());
    println!(
        "iterations: {}  evaluated: {}  failed: {}  duplicates: {}  gate-rejected: {}  invalid: {}  skipped: {}",
        c.iterations, c.evaluated, c.failed, c.duplicates, c.gate_rejected, c.invalid, c.skipped
    );
    match &out.stop {
        StopReason::Budget => {}
        StopReason::Interrupted => println!("stopped early: interrupted"),
        StopReason::LlmFatal(e) => println!("stopped early: {e}"),
    }
    match out.front.statistics() {
        Ok(stats) => println!("{}", stats.render()),
        Err(_) => println!("Pareto candidates: 0"),
    }
    println!("digest: {}", out.digest());
    Ok(ExitCode::SUCCESS)
}

fn parse_arch(path: &Path, space: &SearchSpace) -> Result<Result<ArchitectureConfig, ParseError>> {
    let text = read_input(path)?;
    Ok(space.parse_architecture(&text).map(|mut a| {
        a.candidate_id = candidate_name(path);
        a.source = Source::Manual;
        a
    }))
}

fn estimate(path: &Path, space: &SearchSpace) -> Result<ExitCode> {
    let arch = match parse_arch(path, space)? {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
    };
    let est = estimate_in_space(&arch, space)?;
    let limits = ConstraintSet::default();
    let verdict = check_constraints(&est, &limits);
    print_json(&json!({
        "arch_hash": arch.canonical_hash(),
        "input": [space.input_resolution, space.input_resolution, 3],
        "num_classes": space.num_classes,
        "total_macs": est.total_macs,
        "total_params": est.total_params,
        "peak_sram_bytes": est.peak_sram_bytes,
        "flash_bytes": est.flash_bytes,
        "constraints": limits,
        "gate": verdict,
        "layers": est.layers,
    }))?;
    Ok(match verdict {
        GateVerdict::Accept => ExitCode::SUCCESS,
        GateVerdict::Reject(vs) => {
            for v in vs {
                eprintln!("{v}");
            }
            ExitCode::from(EXIT_REJECTED)
        }
    })
}

fn validate(path: &Path, space: &SearchSpace) -> Result<ExitCode> {
    match parse_arch(path, space)? {
        Ok(arch) => {
            println!("ok {}", arch.canonical_hash());
            Ok(ExitCode::SUCCESS)
        }
        Err(ParseError::Space(verdict)) => {
            for v in &verdict.violations {
                println!("{v}");
            }
            Ok(ExitCode::from(EXIT_REJECTED))
        }
        Err(e) => {
            println!("{e}");
            Ok(ExitCode::from(EXIT_REJECTED))
        }
    }
}

fn with_commas(n: u128) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn ledger_space(ledger: &RunLedger) -> SearchSpace {
    ledger
        .manifest
        .as_ref()
        .and_then(|m| m.config.get("space").cloned())
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or_default()
}

fn space_header(space: &SearchSpace) -> String {
    let per_stage = space.count_stage_configs();
    let total = space
        .total_cardinality()
        .map(with_commas)
        .unwrap_or_else(|| "more than 2^128".into());
    format!(
        "Search space: {} configurations per stage, {} stages: {}^{} = {} architectures",
        with_commas(per_stage as u128),
        space.stage_count,
        with_commas(per_stage as u128),
        space.stage_count,
        total
    )
}

fn pareto_show(dir: &Path, as_json: bool) -> Result<ExitCode> {
    let ledger = RunLedger::load(dir)?;
    let snapshot = match ledger.final_snapshot() {
        Some(s) => s.clone(),
        None => replay_entries(&ledger.entries).snapshot(),
    };
    if as_json {
        print_json(&snapshot)?;
        return Ok(ExitCode::SUCCESS);
    }
    println!("{}", space_header(&ledger_space(&ledger)));
    match &snapshot.statistics {
        Some(stats) => println!("{}", stats.render()),
        None => println!("Pareto candidates: 0"),
    }
    if let Some(best) = &snapshot.best_accuracy {
        println!("Best accuracy: {} ({}%)", best.candidate_id, best.accuracy);
    }
    if !snapshot.members.is_empty() {
        println!("{:<8} {:>9} {:>10} {:>10} {:>11}  hash", "id", "acc (%)", "MACs (M)", "params (M)", "SRAM (KB)");
        for m in &snapshot.members {
            println!(
                "{:<8} {:>9} {:>10.2} {:>10.3} {:>11.2}  {}",
                m.candidate_id,
                m.accuracy.to_string(),
                m.macs as f64 / 1e6,
                m.params as f64 / 1e6,
                m.peak_sram_bytes as f64 / 1024.0,
                &m.arch_hash[..m.arch_hash.len().min(12)]
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn replay(dir: &Path) -> Result<ExitCode> {
    let ledger = RunLedger::load(dir)?;
    let front = replay_entries(&ledger.entries);
    let checked = match verify_snapshots(&ledger.entries) {
        Ok(n) => n,
        Err(m) => {
            eprintln!("snapshot at seq {} does not match the replayed front", m.seq);
            eprintln!("stored:   {}", m.stored);
            eprintln!("replayed: {}", m.replayed);
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
    };
    print_json(&front.snapshot())?;
    eprintln!(
        "replayed {} evaluation records; {} snapshots match; digest {}",
        ledger.records().count(),
        checked,
        ledger.digest()
    );
    Ok(ExitCode::SUCCESS)
}

fn select(policy: SelectionPolicy, dir: &Path) -> Result<ExitCode> {
    let ledger = RunLedger::load(dir)?;
    let front = replay_entries(&ledger.entries);
    let chosen = match select_final(&front, policy) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
    };
    let arch = ledger.entries.iter().find_map(|e| match &e.event {
        Event::CandidateParsed { candidate_id, arch: Some(a), .. } if *candidate_id == chosen.candidate_id => {
            Some(a.clone())
        }
        _ => None,
    });
    print_json(&json!({ "policy": policy.to_string(), "record": chosen, "arch": arch }))?;
    Ok(ExitCode::SUCCESS)
}

fn explain(
    path: &Path,
    llm: &LlmConfig,
    ledger: Option<&Path>,
    candidate_id: Option<String>,
) -> Result<ExitCode> {
    let space = SearchSpace::default();
    let mut arch = match parse_arch(path, &space)? {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
    };
    if let Some(id) = candidate_id {
        arch.candidate_id = id;
    }
    let client = LlmClient::from_config(llm, None)?;
    let explanation = request_explanation(&client, &arch)?;
    println!("{}", explanation.response);
    if let Some(dir) = ledger {
        let mut writer = LedgerWriter::append_to(dir)?;
        let iteration = writer
            .entries()
            .iter()
            .find(|e| matches!(&e.event, Event::CandidateParsed { candidate_id, .. } if *candidate_id == arch.candidate_id))
            .map(|e| e.iteration)
            .unwrap_or(0);
        writer.append(iteration, Event::ExplanationRecorded { explanation })?;
        eprintln!("recorded explanation in {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Answers each protocol request with the surrogate accuracy the orchestrator
/// would compute in-process for the same architecture and seed.
fn serve_fake(space: &SearchSpace, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<EvaluationRequest>(&line) {
            Ok(req) => {
                let arch = ArchitectureConfig::new(req.arch.stages, req.id.clone(), Source::Replay);
                match estimate_in_space(&arch, space) {
                    Ok(est) => surrogate_evaluate(
                        &req.id,
                        est.total_macs,
                        est.total_params,
                        &arch.canonical_hash(),
                        req.seed,
                    ),
                    Err(e) => EvaluationResult::failed(req.id, e.to_string()),
                }
            }
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_owned))
                    .unwrap_or_default();
                EvaluationResult::failed(id, format!("bad request: {e}"))
            }
        };
        writeln!(output, "{}", serde_json::to_string(&reply)?)?;
        output.flush()?;
    }
    Ok(())
}
