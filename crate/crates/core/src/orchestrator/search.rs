//! The generate, gate, evaluate, feed back loop.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::evaluator::{
    Dispatcher, EvalError, EvalStatus, EvaluationJob, EvaluationRequest, EvaluationResult, EvaluatorConfig,
    PhaseHyperparams,
};
use super::ledger::{Event, GateOutcome, LedgerEntry, LedgerError, LedgerWriter, Manifest};
use crate::estimator::{check_constraints, estimate_in_space, ConstraintSet, GateVerdict};
use crate::llm::{
    build_generation_prompt, build_pareto_feedback, build_rejection_feedback, extract_candidate,
    ChatTranscript, LlmClient, LlmConfig, LlmError, Rejection,
};
use crate::pareto::{Accuracy, CandidateRecord, ParetoFront, Phase, RecordStatus};
use crate::space::{HashRegistry, SearchSpace, Source};

pub const LEDGER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub space: SearchSpace,
    pub constraints: ConstraintSet,
    pub iterations: u32,
    pub llm: LlmConfig,
    pub evaluator: EvaluatorConfig,
    pub parallel_evaluations: usize,
    pub seed: u64,
    pub ledger_dir: PathBuf,
    /// Directory that relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            space: SearchSpace::default(),
            constraints: ConstraintSet::default(),
            iterations: 500,
            llm: LlmConfig::default(),
            evaluator: EvaluatorConfig::default(),
            parallel_evaluations: 1,
            seed: 0,
            ledger_dir: PathBuf::from("runs/latest"),
            base_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, SearchError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| SearchError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, SearchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SearchError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.iterations == 0 {
            return Err(SearchError::Config("iterations must be at least 1".into()));
        }
        if self.parallel_evaluations == 0 {
            return Err(SearchError::Config("parallel_evaluations must be at least 1".into()));
        }
        if self.constraints.macs_min > self.constraints.macs_max {
            return Err(SearchError::Config("constraints.macs_min exceeds macs_max".into()));
        }
        self.space.check().map_err(|e| SearchError::Config(e.to_string()))?;
        self.llm.decoding.check().map_err(|e| SearchError::Config(e.to_string()))
    }

    pub fn resolved_ledger_dir(&self) -> PathBuf {
        match &self.base_dir {
            Some(base) if self.ledger_dir.is_relative() => base.join(&self.ledger_dir),
            _ => self.ledger_dir.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Evaluator(#[from] EvalError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Interrupted,
    /// A non-retryable LLM failure; continuing would fail the same way.
    LlmFatal(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunCounts {
    pub iterations: u32,
    pub skipped: u32,
    pub invalid: u32,
    pub duplicates: u32,
    pub gate_rejected: u32,
    pub evaluated: u32,
    pub failed: u32,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub ledger_dir: PathBuf,
    pub entries: Vec<LedgerEntry>,
    pub front: ParetoFront,
    pub counts: RunCounts,
    pub stop: StopReason,
}

impl SearchOutcome {
    pub fn digest(&self) -> String {
        super::ledger::ledger_digest(&self.entries)
    }
}

/// Called after each iteration with the live front and the ledger so far.
pub type IterationObserver<'a> = Box<dyn FnMut(u32, &ParetoFront, &[LedgerEntry]) + 'a>;

struct Pending {
    iteration: u32,
    job: EvaluationJob,
    peak_sram_bytes: u64,
}

/// Owns the front and the ledger for one run.
pub struct SearchRunner<'a> {
    config: RunConfig,
    client: LlmClient,
    dispatcher: Dispatcher,
    stop: Arc<AtomicBool>,
    observer: Option<IterationObserver<'a>>,
}

impl<'a> SearchRunner<'a> {
    /// Builds the LLM client and evaluator named by the config.
    pub fn from_config(config: RunConfig) -> Result<Self, SearchError> {
        config.validate()?;
        let client = LlmClient::from_config(&config.llm, config.base_dir.as_deref())?;
        let dispatcher = Dispatcher::new(&config.evaluator, config.parallel_evaluations)?;
        Ok(Self::with_parts(config, client, dispatcher))
    }

    pub fn with_parts(config: RunConfig, client: LlmClient, dispatcher: Dispatcher) -> Self {
        Self { config, client, dispatcher, stop: Arc::new(AtomicBool::new(false)), observer: None }
    }

    /// Shares a flag that, once set, ends the run after the current iteration.
    pub fn with_stop_flag(mut self, stop: Arc<AtomicBool>) -> Self {
        self.stop = stop;
        self
    }

    pub fn with_observer(mut self, observer: IterationObserver<'a>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn run(self) -> Result<SearchOutcome, SearchError> {
        let manifest = Manifest {
            format_version: LEDGER_FORMAT_VERSION,
            seed: self.config.seed,
            created_ms: super::ledger::now_ms(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
        };
        let ledger_dir = self.config.resolved_ledger_dir();
        let ledger = LedgerWriter::create(&ledger_dir, &manifest)?;
        let base = build_generation_prompt(&self.config.space, &self.config.constraints);
        let mut state = LoopState {
            cfg: &self.config,
            client: &self.client,
            dispatcher: &self.dispatcher,
            ledger,
            front: ParetoFront::new(),
            seen: HashRegistry::default(),
            feedback: None,
            pending: Vec::new(),
            counts: RunCounts::default(),
        };
        let mut observer = self.observer;
        let mut stop = StopReason::Budget;
        for iteration in 1..=self.config.iterations {
            if self.stop.load(Ordering::SeqCst) {
                stop = StopReason::Interrupted;
                break;
            }
            state.counts.iterations = iteration;
            let fatal = state.iterate(iteration, &base)?;
            if state.pending.len() >= self.config.parallel_evaluations {
                state.flush()?;
            }
            if let Some(obs) = observer.as_mut() {
                if state.pending.is_empty() {
                    obs(iteration, &state.front, state.ledger.entries());
                }
            }
            if let Some(reason) = fatal {
                stop = StopReason::LlmFatal(reason);
                break;
            }
        }
        if !state.pending.is_empty() {
            let last = state.pending.last().map(|p| p.iteration).unwrap_or(0);
            state.flush()?;
            if let Some(obs) = observer.as_mut() {
                obs(last, &state.front, state.ledger.entries());
            }
        }
        log::info!(
            "search stopped ({stop:?}): {} evaluated, front size {}",
            state.counts.evaluated,
            state.front.len()
        );
        Ok(SearchOutcome {
            ledger_dir,
            counts: state.counts,
            front: state.front,
            entries: state.ledger.into_entries(),
            stop,
        })
    }
}

struct LoopState<'c> {
    cfg: &'c RunConfig,
    client: &'c LlmClient,
    dispatcher: &'c Dispatcher,
    ledger: LedgerWriter,
    front: ParetoFront,
    seen: HashRegistry,
    feedback: Option<String>,
    pending: Vec<Pending>,
    counts: RunCounts,
}

impl LoopState<'_> {
    fn prompt(&self, base: &ChatTranscript) -> ChatTranscript {
        match &self.feedback {
            Some(f) => base.with_feedback(f),
            None => base.clone(),
        }
    }

    fn reject(&mut self, rejection: Rejection) {
        self.feedback = Some(build_rejection_feedback(&rejection));
    }

    /// One LLM round trip plus gating. Returns a reason when the loop must stop.
    fn iterate(&mut self, it: u32, base: &ChatTranscript) -> Result<Option<String>, SearchError> {
        let transcript = self.prompt(base);
        self.ledger.append(it, Event::PromptSent { transcript: transcript.clone() })?;
        let raw = match self.client.request_completion(&transcript) {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!("iteration {it}: {e}");
                self.ledger.append(
                    it,
                    Event::CompletionReceived { content: None, error: Some(e.to_string()) },
                )?;
                self.counts.skipped += 1;
                let fatal = matches!(
                    e,
                    LlmError::Transport(_) | LlmError::Config(_)
                );
                return Ok(fatal.then(|| e.to_string()));
            }
        };
        self.ledger.append(it, Event::CompletionReceived { content: Some(raw.clone()), error: None })?;

        let candidate_id = format!("c{it:04}");
        let proposal = extract_candidate(&raw, &self.cfg.space);
        let mut arch = match proposal.result {
            Ok(arch) => arch,
            Err(e) => {
                self.ledger.append(
                    it,
                    Event::CandidateParsed {
                        candidate_id,
                        arch_hash: None,
                        arch: None,
                        error: Some(e.to_string()),
                    },
                )?;
                self.counts.invalid += 1;
                self.reject(Rejection::Invalid { reason: e.to_string() });
                return Ok(None);
            }
        };
        arch.candidate_id = candidate_id.clone();
        arch.source = Source::Llm;
        let arch_hash = arch.canonical_hash();
        let estimate = estimate_in_space(&arch, &self.cfg.space);
        self.ledger.append(
            it,
            Event::CandidateParsed {
                candidate_id: candidate_id.clone(),
                arch_hash: Some(arch_hash.clone()),
                arch: Some(arch.document()),
                error: estimate.as_ref().err().map(ToString::to_string),
            },
        )?;
        let estimate = match estimate {
            Ok(e) => e,
            Err(e) => {
                self.counts.invalid += 1;
                self.reject(Rejection::Invalid { reason: e.to_string() });
                return Ok(None);
            }
        };

        if !self.seen.insert(&arch_hash) {
            self.ledger.append(
                it,
                Event::GateVerdict {
                    candidate_id,
                    arch_hash: arch_hash.clone(),
                    outcome: GateOutcome::Duplicate,
                    macs: None,
                    params: None,
                    peak_sram_bytes: None,
                },
            )?;
            self.counts.duplicates += 1;
            self.reject(Rejection::Duplicate { arch_hash });
            return Ok(None);
        }

        let verdict = check_constraints(&estimate, &self.cfg.constraints);
        let outcome = match &verdict {
            GateVerdict::Accept => GateOutcome::Accept,
            GateVerdict::Reject(v) => GateOutcome::Reject { violations: v.clone() },
        };
        self.ledger.append(
            it,
            Event::GateVerdict {
                candidate_id: candidate_id.clone(),
                arch_hash: arch_hash.clone(),
                outcome,
                macs: Some(estimate.total_macs),
                params: Some(estimate.total_params),
                peak_sram_bytes: Some(estimate.peak_sram_bytes),
            },
        )?;
        if let GateVerdict::Reject(violations) = verdict {
            self.counts.gate_rejected += 1;
            self.reject(Rejection::Gate { violations });
            return Ok(None);
        }

        let request = EvaluationRequest {
            id: candidate_id,
            arch: arch.document(),
            phase: Phase::Mini,
            seed: self.cfg.seed,
            hparams: PhaseHyperparams::for_phase(Phase::Mini, self.cfg.space.input_resolution),
        };
        self.pending.push(Pending {
            iteration: it,
            job: EvaluationJob {
                request,
                arch_hash,
                macs: estimate.total_macs,
                params: estimate.total_params,
            },
            peak_sram_bytes: estimate.peak_sram_bytes,
        });
        Ok(None)
    }

    /// Evaluates pending candidates concurrently, then applies results in iteration order.
    fn flush(&mut self) -> Result<(), SearchError> {
        let pending = std::mem::take(&mut self.pending);
        let jobs: Vec<EvaluationJob> = pending.iter().map(|p| p.job.clone()).collect();
        let results = self.dispatcher.dispatch_batch(&jobs);
        for (p, result) in pending.into_iter().zip(results) {
            self.apply(p, result)?;
        }
        Ok(())
    }

    fn apply(&mut self, p: Pending, result: EvaluationResult) -> Result<(), SearchError> {
        let record = result.test_accuracy.filter(|_| result.status == EvalStatus::Ok).map(|acc| CandidateRecord {
            candidate_id: p.job.request.id.clone(),
            arch_hash: p.job.arch_hash.clone(),
            accuracy: Accuracy::from_percent(acc),
            macs: p.job.macs,
            params: p.job.params,
            peak_sram_bytes: p.peak_sram_bytes,
            phase: Phase::Mini,
            iteration: p.iteration,
            status: RecordStatus::Evaluated,
        });
        if record.is_none() {
            log::warn!(
                "evaluation of {} failed: {}",
                p.job.request.id,
                result.reason.as_deref().unwrap_or("unknown")
            );
        }
        self.ledger
            .append(p.iteration, Event::EvaluationResult { result, record: record.clone() })?;
        if let Some(rec) = record {
            self.counts.evaluated += 1;
            self.front.update(rec);
            if let (Ok(stats), Some(best)) = (self.front.statistics(), self.front.best_accuracy()) {
                self.feedback = Some(build_pareto_feedback(&stats, best, &self.cfg.constraints));
            }
        } else {
            self.counts.failed += 1;
        }
        self.ledger.append(p.iteration, Event::FrontSnapshot { snapshot: self.front.snapshot() })?;
        Ok(())
    }
}

/// Runs a search with the client and evaluator named by `config`.
pub fn search(config: RunConfig) -> Result<SearchOutcome, SearchError> {
    SearchRunner::from_config(config)?.run()
}
