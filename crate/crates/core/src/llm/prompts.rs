use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{ConstraintSet, GateViolation};
use crate::pareto::{CandidateRecord, FrontStatistics};
use crate::space::{ArchitectureConfig, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// Ordered chat messages, always opened by a system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChatTranscript {
    messages: Vec<ChatMessage>,
}

impl ChatTranscript {
    pub fn new(system: impl Into<String>) -> Self {
        Self { messages: vec![ChatMessage::system(system)] }
    }

    pub fn push_user(&mut self, content: impl Into<String>) {
        self.messages.push(ChatMessage::user(content));
    }

    /// Copy of this transcript with one more user turn appended.
    pub fn with_feedback(&self, feedback: &str) -> Self {
        let mut t = self.clone();
        t.push_user(feedback);
        t
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("architecture has no stages")]
    EmptyArchitecture,
}

pub const GENERATION_ROLE: &str = "You are a neural architecture design algorithm that exclusively outputs configurations in JSON format.";

pub const EXPLANATION_REQUEST: &str = "Explain why this design was chosen for the current iteration. Highlight the reasoning behind these choices.";

pub const EXPLANATION_TOPICS: [&str; 6] = [
    "Kernel sizes",
    "Expansion factors",
    "Stride",
    "SE ratio",
    "Activation functions",
    "Skip operations",
];

/// MACs in millions; integral values print without decimals (`350M`).
pub fn format_mmacs(macs: u64) -> String {
    if macs % 1_000_000 == 0 {
        format!("{}M", macs / 1_000_000)
    } else {
        format!("{:.2}M", macs as f64 / 1e6)
    }
}

/// Bytes in KiB, two decimals.
pub fn format_kb(bytes: u64) -> String {
    format!("{:.2} KB", bytes as f64 / 1024.0)
}

fn task_name(num_classes: u32) -> String {
    match num_classes {
        10 | 100 => format!("CIFAR-{num_classes} image classification"),
        n => format!("{n}-class image classification"),
    }
}

fn key_list(space: &SearchSpace) -> String {
    format!(
        "Respond with a single JSON object of the form {{\"stages\": [...]}} holding exactly {} stage objects with the keys out_channels, kernel, stride, expansion, se, se_ratio, conv_block, skip, activation, layers.",
        space.stage_count
    )
}

/// Initial generation prompt: role, task, objective, constraints and the
/// serialized search space.
pub fn build_generation_prompt(space: &SearchSpace, limits: &ConstraintSet) -> ChatTranscript {
    let res = space.input_resolution;
    let user = format!(
        "Task: Generate a lightweight neural network architecture tailored for {task}.\n\
         Objective: Achieve at least 70% accuracy while minimizing computational cost and memory usage.\n\
         Constraints:\n\
         - Minimize RAM usage by reducing intermediate activation size.\n\
         - Prioritize stride=2 in early blocks for downsampling.\n\
         - Use smaller expansion_factor and output_channels in early blocks.\n\
         - Limit SE blocks and their ratios to reduce activation memory.\n\
         - Ensure total MACs ≤ {macs}.\n\
         - Ensure peak SRAM of the int8 model ≤ {sram}.\n\
         - Image size: {res}×{res}.\n\
         Search Space: Use only values from the hierarchical search space: {json}\n\
         {keys}",
        task = task_name(space.num_classes),
        macs = format_mmacs(limits.macs_max),
        sram = format_kb(limits.sram_limit_bytes),
        json = space.to_json(),
        keys = key_list(space),
    );
    let mut t = ChatTranscript::new(GENERATION_ROLE);
    t.push_user(user);
    t
}

/// Why the previous proposal was not trained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rejection {
    Gate { violations: Vec<GateViolation> },
    Duplicate { arch_hash: String },
    Invalid { reason: String },
}

impl fmt::Display for GateViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GateViolation::MacsLow { current, min, max } => write!(
                f,
                "Total MACs too low: current {} ({current} MACs); required range [{}, {}] ([{min}, {max}] MACs).",
                format_mmacs(current),
                format_mmacs(min),
                format_mmacs(max)
            ),
            GateViolation::MacsHigh { current, min, max } => write!(
                f,
                "Total MACs too high: current {} ({current} MACs); required range [{}, {}] ([{min}, {max}] MACs).",
                format_mmacs(current),
                format_mmacs(min),
                format_mmacs(max)
            ),
            GateViolation::Sram { current, limit } => write!(
                f,
                "Peak SRAM too high: current {} ({current} bytes); limit {} ({limit} bytes).",
                format_kb(current),
                format_kb(limit)
            ),
        }
    }
}

pub fn build_rejection_feedback(rejection: &Rejection) -> String {
    let mut msg = String::new();
    match rejection {
        Rejection::Gate { violations } => {
            msg.push_str("The previous architecture was rejected by the resource checks:\n");
            for v in violations {
                msg.push_str(&format!("- {v}\n"));
            }
            msg.push_str(
                "Propose a corrected architecture that satisfies these bounds, using only values from the same search space.",
            );
        }
        Rejection::Duplicate { arch_hash } => {
            msg.push_str(&format!(
                "The previous architecture was already explored in an earlier iteration (hash {arch_hash}). \
                 Propose a novel architecture that has not been generated before, using only values from the same search space."
            ));
        }
        Rejection::Invalid { reason } => {
            msg.push_str(&format!(
                "The previous response could not be used: {reason}\n\
                 Propose a valid architecture using only values from the same search space."
            ));
        }
    }
    msg.push_str(" Output JSON only.");
    msg
}

/// Share of `macs_max` above which the front's mean MACs triggers a cost-reduction hint.
pub const MACS_PRESSURE: f64 = 0.75;

pub fn build_pareto_feedback(
    stats: &FrontStatistics,
    best: &CandidateRecord,
    limits: &ConstraintSet,
) -> String {
    let mut msg = format!(
        "Pareto front feedback (format: [Min, Max] Avg)\n{}\n\
         Best accuracy so far: {} with {}% at {} MACs and {:.2}M params.\n",
        stats.render(),
        best.candidate_id,
        best.accuracy,
        format_mmacs(best.macs),
        best.params as f64 / 1e6,
    );
    let threshold = MACS_PRESSURE * limits.macs_max as f64;
    if stats.macs.mean > threshold {
        msg.push_str(&format!(
            "Suggestion: the average MACs of the front ({:.2}M) exceed {:.0}% of the {} budget. \
             Reduce MACs and parameters (fewer layers, smaller expansion factors, narrower early stages) \
             while keeping accuracy.",
            stats.macs.mean / 1e6,
            MACS_PRESSURE * 100.0,
            format_mmacs(limits.macs_max)
        ));
    } else {
        msg.push_str(
            "Suggestion: focus on improving accuracy while maintaining resource efficiency; \
             explore designs at similar MACs and parameters.",
        );
    }
    msg.push_str(" Propose the next architecture as JSON only.");
    msg
}

pub fn build_explanation_prompt(arch: &ArchitectureConfig) -> Result<ChatTranscript, PromptError> {
    if arch.stages.is_empty() {
        return Err(PromptError::EmptyArchitecture);
    }
    let topics: String = EXPLANATION_TOPICS.iter().map(|t| format!("- {t}\n")).collect();
    let mut t = ChatTranscript::new(
        "You are a neural architecture design expert explaining configurations generated for microcontroller deployment.",
    );
    t.push_user(format!(
        "{EXPLANATION_REQUEST}\n\nArchitecture:\n{}\n\nCover each of the following:\n{topics}",
        arch.to_json()
    ));
    Ok(t)
}
