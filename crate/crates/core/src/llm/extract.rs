use thiserror::Error;

use crate::space::{ArchitectureConfig, ParseError, SearchSpace};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExtractError {
    #[error("no JSON object found in the response")]
    NoJsonObject,
    #[error("{0}")]
    Parse(#[from] ParseError),
}

/// Model output together with what could be made of it.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateProposal {
    pub raw_text: String,
    pub result: Result<ArchitectureConfig, ExtractError>,
}

impl CandidateProposal {
    pub fn extracted(&self) -> Option<&ArchitectureConfig> {
        self.result.as_ref().ok()
    }

    pub fn extraction_error(&self) -> Option<&ExtractError> {
        self.result.as_ref().err()
    }
}

/// End offset (exclusive) of the balanced object opening at `start`, if any.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let (mut depth, mut in_string, mut escaped) = (0usize, false, false);
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// The first brace-balanced `{...}` span, ignoring braces inside strings.
/// Surrounding prose and code fences are skipped over.
pub fn first_json_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'{')
        .find_map(|(start, _)| balanced_end(bytes, start).map(|end| &raw[start..end]))
}

pub fn extract_candidate(raw: &str, space: &SearchSpace) -> CandidateProposal {
    let result = match first_json_object(raw) {
        None => Err(ExtractError::NoJsonObject),
        Some(obj) => space.parse_architecture(obj).map_err(ExtractError::from),
    };
    CandidateProposal { raw_text: raw.to_owned(), result }
}
