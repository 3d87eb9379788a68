//! Search loop, evaluator dispatch, run ledger, and final selection.

pub mod evaluator;
pub mod ledger;
pub mod search;
pub mod select;

pub use evaluator::{
    surrogate_accuracy, surrogate_evaluate, surrogate_noise, Dispatcher, EvalError, EvalStatus,
    EvaluationJob, EvaluationRequest, EvaluationResult, EvaluatorConfig, EvaluatorKind,
    PhaseHyperparams,
};
pub use ledger::{
    ledger_digest, replay, replay_entries, verify_snapshots, Event, GateOutcome, LedgerEntry,
    LedgerError, LedgerWriter, Manifest, RunLedger,
};
pub use search::{
    search, RunConfig, RunCounts, SearchError, SearchOutcome, SearchRunner, StopReason,
};
pub use select::{select_final, SelectError, SelectionPolicy};
