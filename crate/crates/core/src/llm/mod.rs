//! Prompt construction, chat-completions transport, and candidate extraction.

pub mod client;
pub mod explain;
pub mod extract;
pub mod prompts;

pub use client::{
    ChatRequest, DecodingParams, HttpTransport, LlmClient, LlmConfig, LlmError, MockTransport,
    ScriptEntry, Transport, TransportError, TransportKind,
};
pub use explain::{request_explanation, ExplainError, Explanation};
pub use extract::{extract_candidate, first_json_object, CandidateProposal, ExtractError};
pub use prompts::{
    build_explanation_prompt, build_generation_prompt, build_pareto_feedback,
    build_rejection_feedback, ChatMessage, ChatTranscript, PromptError, Rejection, Role,
};
