//! Candidate evaluation: the in-process surrogate and the newline-delimited
//! JSON subprocess protocol.
//!
//! Request, one line on the evaluator's stdin:
//! `{"id":…,"arch":{…},"phase":"mini","seed":…,"hparams":{…}}`
//!
//! Response, one line on its stdout:
//! `{"id":…,"status":"ok","test_accuracy":61.9,"wall_seconds":…}` or
//! `{"id":…,"status":"failed","reason":…}`

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pareto::Phase;
use crate::space::ArchitectureDocument;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: String,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { kind: "sgd".into(), momentum: 0.9, nesterov: true, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup to `initial_lr`, then ×`gamma` every `step_epochs`.
    Step { initial_lr: f64, gamma: f64, step_epochs: u32, warmup_epochs: u32 },
    /// Linear warmup from `start_lr` to `peak_lr`, then cosine decay.
    WarmupCosine { start_lr: f64, peak_lr: f64, warmup_epochs: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub resize: u32,
    pub autoaugment: bool,
    pub mixup_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdSettings {
    pub teacher: String,
    pub temperature: f64,
    pub alpha0: f64,
    pub alpha_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHyperparams {
    pub epochs: u32,
    pub batch_size: u32,
    pub optimizer: OptimizerSpec,
    pub lr_schedule: LrSchedule,
    pub augmentation: Augmentation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd: Option<KdSettings>,
}

impl PhaseHyperparams {
    pub fn mini(resolution: u32) -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            optimizer: OptimizerSpec::default(),
            lr_schedule: LrSchedule::Step {
                initial_lr: 0.5,
                gamma: 0.1,
                step_epochs: 10,
                warmup_epochs: 10,
            },
            augmentation: Augmentation { resize: resolution, autoaugment: true, mixup_alpha: None },
            kd: None,
        }
    }

    pub fn full(resolution: u32) -> Self {
        Self {
            epochs: 120,
            lr_schedule: LrSchedule::WarmupCosine { start_lr: 0.0, peak_lr: 0.5, warmup_epochs: 20 },
            augmentation: Augmentation {
                resize: resolution,
                autoaugment: true,
                mixup_alpha: Some(0.2),
            },
            ..Self::mini(resolution)
        }
    }

    pub fn kd(resolution: u32) -> Self {
        Self {
            epochs: 50,
            // fine-tuning schedule: no warmup, cosine from a small peak
            lr_schedule: LrSchedule::WarmupCosine { start_lr: 0.05, peak_lr: 0.05, warmup_epochs: 0 },
            augmentation: Augmentation { resize: resolution, autoaugment: false, mixup_alpha: None },
            kd: Some(KdSettings {
                teacher: "google/vit-base-patch16-224-in21k".into(),
                temperature: 10.0,
                alpha0: 0.4,
                alpha_final: 0.8,
            }),
            ..Self::mini(resolution)
        }
    }

    pub fn for_phase(phase: Phase, resolution: u32) -> Self {
        match phase {
            Phase::Mini => Self::mini(resolution),
            Phase::Full => Self::full(resolution),
            Phase::Kd => Self::kd(resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRequest {
    pub id: String,
    pub arch: ArchitectureDocument,
    pub phase: Phase,
    pub seed: u64,
    pub hparams: PhaseHyperparams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Ok,
    Failed,
}

/// Accuracy is present iff `status` is ok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    #[serde(rename = "id")]
    pub candidate_id: String,
    pub status: EvalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(default)]
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl EvaluationResult {
    pub fn ok(candidate_id: impl Into<String>, accuracy: f64, wall_seconds: f64) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            status: EvalStatus::Ok,
            test_accuracy: Some(accuracy),
            wall_seconds,
            reason: None,
        }
    }

    pub fn failed(candidate_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            candidate_id: candidate_id.into(),
            status: EvalStatus::Failed,
            test_accuracy: None,
            wall_seconds: 0.0,
            reason: Some(reason.into()),
        }
    }

    /// Parses one protocol response line and checks its shape.
    pub fn from_line(line: &str) -> Result<Self, String> {
        let r: EvaluationResult =
            serde_json::from_str(line.trim()).map_err(|e| format!("unparseable response: {e}"))?;
        match (r.status, r.test_accuracy) {
            (EvalStatus::Ok, Some(a)) if (0.0..=100.0).contains(&a) => Ok(r),
            (EvalStatus::Ok, Some(a)) => Err(format!("test_accuracy {a} outside [0, 100]")),
            (EvalStatus::Ok, None) => Err("ok response without test_accuracy".into()),
            (EvalStatus::Failed, None) => Ok(r),
            (EvalStatus::Failed, Some(_)) => Err("failed response carries test_accuracy".into()),
        }
    }
}

/// `5·ln(macs/10⁶) + 2·ln(params/10³) + noise`, clamped to [1, 90].
pub fn surrogate_accuracy(macs: u64, params: u64, noise: f64) -> f64 {
    let raw = 5.0 * (macs as f64 / 1e6).ln() + 2.0 * (params as f64 / 1e3).ln() + noise;
    raw.clamp(1.0, 90.0)
}

/// Uniform noise in [−2, 2) derived from SHA-256(hash ∥ seed as 8 big-endian bytes).
pub fn surrogate_noise(candidate_hash: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(candidate_hash.as_bytes());
    h.update(seed.to_be_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    let x = u64::from_be_bytes(first) as f64 / 18_446_744_073_709_551_616.0;
    4.0 * x - 2.0
}

/// Deterministic stand-in for mini-phase training.
pub fn surrogate_evaluate(
    candidate_id: &str,
    macs: u64,
    params: u64,
    candidate_hash: &str,
    seed: u64,
) -> EvaluationResult {
    let acc = surrogate_accuracy(macs, params, surrogate_noise(candidate_hash, seed));
    EvaluationResult::ok(candidate_id, acc, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    #[default]
    Surrogate,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub kind: EvaluatorKind,
    /// Program and arguments of the external evaluator.
    pub command: Vec<String>,
    pub timeout_secs: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self { kind: EvaluatorKind::Surrogate, command: Vec::new(), timeout_secs: 4 * 3600 }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluator unavailable: {0}")]
    Unavailable(String),
}

/// Everything needed to evaluate one candidate by either route.
#[derive(Debug, Clone)]
pub struct EvaluationJob {
    pub request: EvaluationRequest,
    pub arch_hash: String,
    pub macs: u64,
    pub params: u64,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &[String]) -> Result<Self, String> {
        let (program, args) =
            command.split_first().ok_or_else(|| "no evaluator command configured".to_string())?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawning {program}: {e}"))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, lines: rx })
    }

    /// Ok(result) keeps the worker; Err(result) means it must be discarded.
    fn evaluate(
        &mut self,
        req: &EvaluationRequest,
        timeout: Duration,
    ) -> Result<EvaluationResult, EvaluationResult> {
        let id = req.id.as_str();
        let line = serde_json::to_string(req).expect("request serializes");
        if let Err(e) = writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush()) {
            return Err(EvaluationResult::failed(id, format!("evaluator-crash: {e}")));
        }
        let started = Instant::now();
        let reply = match self.lines.recv_timeout(timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(EvaluationResult::failed(id, format!("evaluator-crash: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(EvaluationResult::failed(
                    id,
                    format!("timeout: no response within {}s", timeout.as_secs_f64()),
                ))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(EvaluationResult::failed(id, "evaluator-crash: evaluator exited"))
            }
        };
        match EvaluationResult::from_line(&reply) {
            Ok(r) if r.candidate_id == id => {
                let mut r = r;
                if r.wall_seconds == 0.0 {
                    r.wall_seconds = started.elapsed().as_secs_f64();
                }
                Ok(r)
            }
            Ok(r) => Err(EvaluationResult::failed(
                id,
                format!("protocol-violation: response id {} does not match request", r.candidate_id),
            )),
            Err(e) => Err(EvaluationResult::failed(id, format!("protocol-violation: {e}"))),
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Backend {
    Surrogate,
    External { command: Vec<String>, timeout: Duration, slots: Vec<Mutex<Option<Worker>>> },
}

/// Runs evaluations with at most `parallel` outstanding at once.
pub struct Dispatcher {
    backend: Backend,
    parallel: usize,
}

impl Dispatcher {
    pub fn surrogate() -> Self {
        Self { backend: Backend::Surrogate, parallel: 1 }
    }

    /// External workers are started eagerly so a missing program fails fast.
    pub fn new(cfg: &EvaluatorConfig, parallel: usize) -> Result<Self, EvalError> {
        let parallel = parallel.max(1);
        let backend = match cfg.kind {
            EvaluatorKind::Surrogate => Backend::Surrogate,
            EvaluatorKind::External => {
                let slots = (0..parallel)
                    .map(|_| Worker::spawn(&cfg.command).map(|w| Mutex::new(Some(w))))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(EvalError::Unavailable)?;
                Backend::External {
                    command: cfg.command.clone(),
                    timeout: Duration::from_secs(cfg.timeout_secs.max(1)),
                    slots,
                }
            }
        };
        Ok(Self { backend, parallel })
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        if let Backend::External { timeout, .. } = &mut self.backend {
            *timeout = t;
        }
        self
    }

    pub fn parallel(&self) -> usize {
        self.parallel
    }

    fn run_in_slot(&self, slot: usize, job: &EvaluationJob) -> EvaluationResult {
        match &self.backend {
            Backend::Surrogate => surrogate_evaluate(
                &job.request.id,
                job.macs,
                job.params,
                &job.arch_hash,
                job.request.seed,
            ),
            Backend::External { command, timeout, slots } => {
                let mut guard = slots[slot].lock().unwrap();
                if guard.is_none() {
                    match Worker::spawn(command) {
                        Ok(w) => *guard = Some(w),
                        Err(e) => {
                            return EvaluationResult::failed(
                                &job.request.id,
                                format!("evaluator-crash: restart failed: {e}"),
                            )
                        }
                    }
                }
                let worker = guard.as_mut().expect("worker present");
                match worker.evaluate(&job.request, *timeout) {
                    Ok(r) => r,
                    Err(r) => {
                        log::warn!("discarding evaluator worker: {}", r.reason.as_deref().unwrap_or(""));
                        *guard = None;
                        r
                    }
                }
            }
        }
    }

    pub fn dispatch(&self, job: &EvaluationJob) -> EvaluationResult {
        self.run_in_slot(0, job)
    }

    /// Evaluates all jobs concurrently; results come back in job order.
    pub fn dispatch_batch(&self, jobs: &[EvaluationJob]) -> Vec<EvaluationResult> {
        if jobs.len() <= 1 || self.parallel == 1 {
            return jobs.iter().map(|j| self.dispatch(j)).collect();
        }
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<EvaluationResult>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for slot in 0..self.parallel.min(jobs.len()) {
                let (next, results) = (&next, &results);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(i) else { break };
                    let r = self.run_in_slot(slot, job);
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
        results.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect()
    }
}
