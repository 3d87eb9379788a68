//! Scripted LLM replies built from seeded sampling and the estimator.

#![allow(dead_code)]

use llmnas_core::estimator::{check_constraints, estimate_in_space, ConstraintSet, GateViolation, GateVerdict};
use llmnas_core::space::{ArchitectureConfig, SearchSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_until(seed: u64, mut keep: impl FnMut(&GateVerdict) -> bool) -> ArchitectureConfig {
    let space = SearchSpace::default();
    let limits = ConstraintSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let arch = space.sample_architecture(&mut rng);
        let est = estimate_in_space(&arch, &space).unwrap();
        if keep(&check_constraints(&est, &limits)) {
            return arch;
        }
    }
}

/// `n` distinct architectures that pass the default gate.
pub fn accepted(n: usize, seed: u64) -> Vec<ArchitectureConfig> {
    let mut out: Vec<ArchitectureConfig> = Vec::new();
    let mut s = seed;
    while out.len() < n {
        let a = sample_until(s, GateVerdict::is_accept);
        if !out.iter().any(|o| o.canonical_hash() == a.canonical_hash()) {
            out.push(a);
        }
        s += 1;
    }
    out
}

/// An in-space architecture whose MACs exceed the default maximum.
pub fn over_budget(seed: u64) -> ArchitectureConfig {
    sample_until(seed, |v| match v {
        GateVerdict::Reject(vs) => vs.iter().any(|x| matches!(x, GateViolation::MacsHigh { .. })),
        GateVerdict::Accept => false,
    })
}

/// A reply whose architecture uses kernel 9, which the space does not offer.
pub fn out_of_space(seed: u64) -> String {
    let mut a = accepted(1, seed).remove(0);
    a.stages[1].kernel = 9;
    a.to_json()
}

/// Wraps an architecture the way a chatty model might.
pub fn chatty(arch: &ArchitectureConfig) -> String {
    format!("Here is the design:\n```json\n{}\n```\nIt balances depth and width.", arch.to_json_pretty())
}
