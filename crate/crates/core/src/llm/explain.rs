use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::client::{LlmClient, LlmError};
use super::prompts::{build_explanation_prompt, ChatTranscript, PromptError};
use crate::space::ArchitectureConfig;

/// A design rationale returned by the model for one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub candidate_id: String,
    pub arch_hash: String,
    pub prompt: ChatTranscript,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

pub fn request_explanation(
    client: &LlmClient,
    arch: &ArchitectureConfig,
) -> Result<Explanation, ExplainError> {
    let prompt = build_explanation_prompt(arch)?;
    let response = client.request_completion(&prompt)?;
    Ok(Explanation {
        candidate_id: arch.candidate_id.clone(),
        arch_hash: arch.canonical_hash(),
        prompt,
        response,
    })
}
