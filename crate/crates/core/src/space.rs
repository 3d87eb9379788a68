//! Hierarchical stage search space and candidate architecture documents.
//!
//! A candidate network is a fixed skeleton of `stage_count` sequential stages.
//! Every block inside a stage shares one [`StageConfig`]; the LLM proposes all
//! stages at once as a JSON document of the form
//!
//! ```text
//! {"stages":[{"out_channels":16,"kernel":3,"stride":2,"expansion":3,"se":false,
//!             "se_ratio":0.25,"conv_block":"dwsepconv","skip":false,
//!             "activation":"relu6","layers":1}, ...]}
//! ```

use std::collections::HashSet;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvBlock {
    /// Depthwise-separable block. `dwconv` is accepted as an alias on input.
    #[serde(alias = "dwconv")]
    DwSepConv,
    MbConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu6,
    LeakyRelu,
    Swish,
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvBlock::DwSepConv => "dwsepconv",
            ConvBlock::MbConv => "mbconv",
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu6 => "relu6",
            Activation::LeakyRelu => "leakyrelu",
            Activation::Swish => "swish",
        })
    }
}

/// Configuration shared by every block of one stage.
///
/// Field order is the canonical serialization order used for hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: u32,
    pub kernel: u32,
    pub stride: u32,
    /// Only meaningful for [`ConvBlock::MbConv`]; kept for every stage.
    pub expansion: u32,
    #[serde(rename = "se")]
    pub se_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_ratio: Option<f64>,
    pub conv_block: ConvBlock,
    pub skip: bool,
    pub activation: Activation,
    pub layers: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Llm,
    Replay,
    Manual,
}

/// An N-stage candidate network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub stages: Vec<StageConfig>,
    pub candidate_id: String,
    pub source: Source,
}

/// The wire form of an architecture: stages only, unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDocument {
    pub stages: Vec<StageConfig>,
}

impl ArchitectureConfig {
    pub fn new(stages: Vec<StageConfig>, candidate_id: impl Into<String>, source: Source) -> Self {
        Self { stages, candidate_id: candidate_id.into(), source }
    }

    pub fn document(&self) -> ArchitectureDocument {
        ArchitectureDocument { stages: self.stages.clone() }
    }

    /// Compact canonical JSON: declared field order, no whitespace, lowercase enums.
    /// `candidate_id` and `source` are not part of it.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.document()).expect("architecture document serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.document()).expect("architecture document serializes")
    }

    /// SHA-256 of [`ArchitectureConfig::to_json`], as 64 lowercase hex characters.
    pub fn canonical_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Choice lists for every searchable stage parameter plus the fixed task shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub stage_count: usize,
    #[serde(rename = "out_channels")]
    pub out_channel_choices: Vec<u32>,
    #[serde(rename = "kernel")]
    pub kernel_choices: Vec<u32>,
    #[serde(rename = "stride")]
    pub stride_choices: Vec<u32>,
    #[serde(rename = "expansion")]
    pub expansion_choices: Vec<u32>,
    #[serde(rename = "se")]
    pub se_enable_choices: Vec<bool>,
    #[serde(rename = "se_ratio")]
    pub se_ratio_choices: Vec<f64>,
    #[serde(rename = "conv_block")]
    pub conv_block_choices: Vec<ConvBlock>,
    #[serde(rename = "skip")]
    pub skip_choices: Vec<bool>,
    #[serde(rename = "activation")]
    pub activation_choices: Vec<Activation>,
    #[serde(rename = "layers")]
    pub layers_choices: Vec<u32>,
    pub input_resolution: u32,
    pub num_classes: u32,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            stage_count: 5,
            out_channel_choices: vec![16, 24, 32, 48, 64, 96, 128, 160],
            kernel_choices: vec![3, 5, 7],
            stride_choices: vec![1, 2],
            expansion_choices: vec![3, 4, 6],
            se_enable_choices: vec![true, false],
            se_ratio_choices: vec![0.25, 0.5],
            conv_block_choices: vec![ConvBlock::DwSepConv, ConvBlock::MbConv],
            skip_choices: vec![true, false],
            activation_choices: vec![Activation::Relu6, Activation::LeakyRelu, Activation::Swish],
            layers_choices: vec![1, 2, 3, 4, 6],
            input_resolution: 160,
            num_classes: 100,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("choice list `{0}` is empty")]
    Empty(&'static str),
    #[error("choice list `{0}` contains duplicates")]
    Duplicate(&'static str),
    #[error("choice list `{field}` contains invalid value {value}")]
    InvalidChoice { field: &'static str, value: String },
    #[error("`{0}` must be positive")]
    NotPositive(&'static str),
}

/// One reason a stage or architecture falls outside the search space.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    StageCount { got: usize, want: usize },
    /// `stage` is 1-based; `None` when a stage is validated on its own.
    Field { stage: Option<usize>, field: &'static str, value: String, allowed: String },
    MissingSeRatio { stage: Option<usize> },
}

impl Violation {
    fn with_stage(self, index: usize) -> Self {
        match self {
            Violation::Field { field, value, allowed, .. } => {
                Violation::Field { stage: Some(index), field, value, allowed }
            }
            Violation::MissingSeRatio { .. } => Violation::MissingSeRatio { stage: Some(index) },
            other => other,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StageCount { got, want } => {
                write!(f, "expected exactly {want} stages, got {got}")
            }
            Violation::Field { stage, field, value, allowed } => {
                if let Some(s) = stage {
                    write!(f, "stage {s}: ")?;
                }
                write!(f, "{field}={value} is not allowed; choose from {allowed}")
            }
            Violation::MissingSeRatio { stage } => {
                if let Some(s) = stage {
                    write!(f, "stage {s}: ")?;
                }
                f.write_str("se is true but se_ratio is missing")
            }
        }
    }
}

/// Outcome of validating against a [`SearchSpace`]: ok iff no violations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed architecture document: {0}")]
    Malformed(String),
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("architecture outside the search space: {0}")]
    Space(Verdict),
}

fn render_set<T: fmt::Display>(items: &[T]) -> String {
    let inner: Vec<String> = items.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", inner.join(", "))
}

fn check_choice<T: PartialEq + fmt::Display>(
    out: &mut Vec<Violation>,
    field: &'static str,
    value: &T,
    allowed: &[T],
) {
    if !allowed.contains(value) {
        out.push(Violation::Field {
            stage: None,
            field,
            value: value.to_string(),
            allowed: render_set(allowed),
        });
    }
}

fn check_list<T: PartialEq>(field: &'static str, list: &[T]) -> Result<(), SpaceError> {
    if list.is_empty() {
        return Err(SpaceError::Empty(field));
    }
    for (i, a) in list.iter().enumerate() {
        if list[..i].contains(a) {
            return Err(SpaceError::Duplicate(field));
        }
    }
    Ok(())
}

impl SearchSpace {
    /// Checks the structural invariants of the space itself.
    pub fn check(&self) -> Result<(), SpaceError> {
        if self.stage_count == 0 {
            return Err(SpaceError::NotPositive("stage_count"));
        }
        if self.input_resolution == 0 {
            return Err(SpaceError::NotPositive("input_resolution"));
        }
        if self.num_classes == 0 {
            return Err(SpaceError::NotPositive("num_classes"));
        }
        check_list("out_channels", &self.out_channel_choices)?;
        check_list("kernel", &self.kernel_choices)?;
        check_list("stride", &self.stride_choices)?;
        check_list("expansion", &self.expansion_choices)?;
        check_list("se", &self.se_enable_choices)?;
        check_list("se_ratio", &self.se_ratio_choices)?;
        check_list("conv_block", &self.conv_block_choices)?;
        check_list("skip", &self.skip_choices)?;
        check_list("activation", &self.activation_choices)?;
        check_list("layers", &self.layers_choices)?;
        let invalid = |field, value: String| Err(SpaceError::InvalidChoice { field, value });
        for &c in &self.out_channel_choices {
            if c == 0 {
                return invalid("out_channels", c.to_string());
            }
        }
        for &k in &self.kernel_choices {
            if k % 2 == 0 {
                return invalid("kernel", k.to_string());
            }
        }
        for &s in &self.stride_choices {
            if s != 1 && s != 2 {
                return invalid("stride", s.to_string());
            }
        }
        for &e in &self.expansion_choices {
            if e == 0 {
                return invalid("expansion", e.to_string());
            }
        }
        for &r in &self.se_ratio_choices {
            if !(r > 0.0 && r <= 1.0) {
                return invalid("se_ratio", r.to_string());
            }
        }
        for &l in &self.layers_choices {
            if l == 0 {
                return invalid("layers", l.to_string());
            }
        }
        Ok(())
    }

    /// The search-space document embedded in generation prompts.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("search space serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ParseError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ParseError::Malformed(e.to_string()))?;
        serde_path_to_error::deserialize(value).map_err(|e| ParseError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn validate_stage(&self, stage: &StageConfig) -> Verdict {
        let mut v = Vec::new();
        check_choice(&mut v, "out_channels", &stage.out_channels, &self.out_channel_choices);
        check_choice(&mut v, "kernel", &stage.kernel, &self.kernel_choices);
        check_choice(&mut v, "stride", &stage.stride, &self.stride_choices);
        check_choice(&mut v, "expansion", &stage.expansion, &self.expansion_choices);
        check_choice(&mut v, "se", &stage.se_enabled, &self.se_enable_choices);
        match stage.se_ratio {
            Some(r) => check_choice(&mut v, "se_ratio", &r, &self.se_ratio_choices),
            None if stage.se_enabled => v.push(Violation::MissingSeRatio { stage: None }),
            None => {}
        }
        check_choice(&mut v, "conv_block", &stage.conv_block, &self.conv_block_choices);
        check_choice(&mut v, "skip", &stage.skip, &self.skip_choices);
        check_choice(&mut v, "activation", &stage.activation, &self.activation_choices);
        check_choice(&mut v, "layers", &stage.layers, &self.layers_choices);
        Verdict { violations: v }
    }

    pub fn validate_stages(&self, stages: &[StageConfig]) -> Verdict {
        let mut violations = Vec::new();
        if stages.len() != self.stage_count {
            violations.push(Violation::StageCount { got: stages.len(), want: self.stage_count });
        }
        for (i, stage) in stages.iter().enumerate() {
            violations.extend(
                self.validate_stage(stage).violations.into_iter().map(|v| v.with_stage(i + 1)),
            );
        }
        Verdict { violations }
    }

    pub fn validate_architecture(&self, arch: &ArchitectureConfig) -> Verdict {
        self.validate_stages(&arch.stages)
    }

    /// Number of distinct single-stage configurations.
    ///
    /// Counts nine factors (kernel, stride, se, conv block, skip, expansion,
    /// activation, layers, out channels); `se_ratio` does not enter the count.
    pub fn count_stage_configs(&self) -> u64 {
        [
            self.kernel_choices.len(),
            self.stride_choices.len(),
            self.se_enable_choices.len(),
            self.conv_block_choices.len(),
            self.skip_choices.len(),
            self.expansion_choices.len(),
            self.activation_choices.len(),
            self.layers_choices.len(),
            self.out_channel_choices.len(),
        ]
        .iter()
        .map(|&n| n as u64)
        .product()
    }

    /// `count_stage_configs ^ stage_count`, or `None` on overflow.
    pub fn total_cardinality(&self) -> Option<u128> {
        let per_stage = self.count_stage_configs() as u128;
        (0..self.stage_count).try_fold(1u128, |acc, _| acc.checked_mul(per_stage))
    }

    /// Parses an LLM-produced architecture document and validates it against the space.
    ///
    /// The returned config has an empty `candidate_id` and [`Source::Manual`];
    /// callers assign identity.
    pub fn parse_architecture(&self, text: &str) -> Result<ArchitectureConfig, ParseError> {
        let value: serde_json::Value =
            serde_json::from_str(text.trim()).map_err(|e| ParseError::Malformed(e.to_string()))?;
        if !value.is_object() {
            return Err(ParseError::Malformed("expected a JSON object".into()));
        }
        let doc: ArchitectureDocument =
            serde_path_to_error::deserialize(value).map_err(|e| ParseError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        let verdict = self.validate_stages(&doc.stages);
        if !verdict.is_ok() {
            return Err(ParseError::Space(verdict));
        }
        let mut stages = doc.stages;
        // A ratio on a stage without SE has no effect; drop it so equal networks hash equally.
        for s in stages.iter_mut().filter(|s| !s.se_enabled) {
            s.se_ratio = None;
        }
        Ok(ArchitectureConfig::new(stages, "", Source::Manual))
    }

    pub fn sample_stage<R: Rng + ?Sized>(&self, rng: &mut R) -> StageConfig {
        let se_enabled = *self.se_enable_choices.choose(rng).unwrap();
        StageConfig {
            out_channels: *self.out_channel_choices.choose(rng).unwrap(),
            kernel: *self.kernel_choices.choose(rng).unwrap(),
            stride: *self.stride_choices.choose(rng).unwrap(),
            expansion: *self.expansion_choices.choose(rng).unwrap(),
            se_enabled,
            se_ratio: se_enabled.then(|| *self.se_ratio_choices.choose(rng).unwrap()),
            conv_block: *self.conv_block_choices.choose(rng).unwrap(),
            skip: *self.skip_choices.choose(rng).unwrap(),
            activation: *self.activation_choices.choose(rng).unwrap(),
            layers: *self.layers_choices.choose(rng).unwrap(),
        }
    }

    pub fn sample_architecture<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchitectureConfig {
        let stages = (0..self.stage_count).map(|_| self.sample_stage(rng)).collect();
        ArchitectureConfig::new(stages, "", Source::Manual)
    }
}

/// Tracks canonical hashes already seen in a run.
#[derive(Debug, Default, Clone)]
pub struct HashRegistry {
    seen: HashSet<String>,
}

impl HashRegistry {
    /// Returns `true` if the hash was new.
    pub fn insert(&mut self, hash: &str) -> bool {
        self.seen.insert(hash.to_owned())
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.seen.contains(hash)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
