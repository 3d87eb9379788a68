use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pareto::{Accuracy, CandidateRecord, ParetoFront};

/// How the final architecture is picked from the front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "threshold", rename_all = "snake_case")]
pub enum SelectionPolicy {
    BestAccuracyInBudget,
    /// Cheapest member whose accuracy (percent) is at least the threshold.
    MinMacsAtAccuracyFloor(f64),
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::BestAccuracyInBudget => f.write_str("best-accuracy"),
            SelectionPolicy::MinMacsAtAccuracyFloor(t) => write!(f, "min-macs:{t}"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = String;

    /// Accepts `best-accuracy` or `min-macs:<percent>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if matches!(s, "best-accuracy" | "best_accuracy_in_budget") {
            return Ok(SelectionPolicy::BestAccuracyInBudget);
        }
        let threshold = s
            .strip_prefix("min-macs:")
            .or_else(|| s.strip_prefix("min_macs_at_accuracy_floor:"))
            .ok_or_else(|| format!("unknown policy {s:?}; use best-accuracy or min-macs:<percent>"))?;
        let t: f64 = threshold.parse().map_err(|_| format!("bad accuracy threshold {threshold:?}"))?;
        if !(0.0..=100.0).contains(&t) {
            return Err(format!("accuracy threshold {t} outside [0, 100]"));
        }
        Ok(SelectionPolicy::MinMacsAtAccuracyFloor(t))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SelectError {
    #[error("front is empty")]
    EmptyFront,
    #[error("no candidate meets policy {0}")]
    NoCandidateMeetsPolicy(SelectionPolicy),
}

fn tie_break(a: &CandidateRecord, b: &CandidateRecord) -> Ordering {
    a.macs
        .cmp(&b.macs)
        .then(a.params.cmp(&b.params))
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

/// Front members only ever enter after passing the gate, so every member is in budget.
pub fn select_final(
    front: &ParetoFront,
    policy: SelectionPolicy,
) -> Result<CandidateRecord, SelectError> {
    if front.is_empty() {
        return Err(SelectError::EmptyFront);
    }
    let members = front.members().iter();
    let chosen = match policy {
        SelectionPolicy::BestAccuracyInBudget => {
            members.min_by(|a, b| b.accuracy.cmp(&a.accuracy).then_with(|| tie_break(a, b)))
        }
        SelectionPolicy::MinMacsAtAccuracyFloor(t) => {
            let floor = Accuracy::from_percent(t);
            members.filter(|m| m.accuracy >= floor).min_by(|a, b| tie_break(a, b))
        }
    };
    chosen.cloned().ok_or(SelectError::NoCandidateMeetsPolicy(policy))
}
