//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fail.

#[path = "../../core/tests/common/candidates.rs"]
mod candidates;
#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use llmnas_core::distill::{kd_loss, softened_probs, AlphaSchedule, LogitVector};
use llmnas_core::estimator::{
    check_constraints, estimate, ConstraintSet, GateVerdict, ResourceEstimate, TensorShape,
};
use llmnas_core::llm::{build_rejection_feedback, DecodingParams, LlmClient, MockTransport, Rejection};
use llmnas_core::orchestrator::{
    replay, replay_entries, verify_snapshots, Dispatcher, Event, GateOutcome, RunConfig,
    SearchOutcome, SearchRunner,
};
use llmnas_core::pareto::{
    dominates, Accuracy, CandidateRecord, FrontStatistics, ParetoFront, Phase, RecordStatus,
};
use llmnas_core::space::SearchSpace;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Duration, Check); 7] = [
        ("search-space cardinality", Duration::from_secs(5), cardinality),
        ("estimator equals scalar oracle", Duration::from_secs(120), estimator_oracle),
        ("gate conformance", Duration::from_secs(10), gate_conformance),
        ("pareto correctness", Duration::from_secs(30), pareto_correctness),
        ("kd math", Duration::from_secs(10), kd_math),
        ("deterministic end-to-end loop", Duration::from_secs(60), deterministic_loop),
        ("statistics format [Min, Max] Avg", Duration::from_secs(5), statistics_format),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        let took = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; too slow: {took:.2?} > {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}  ({took:.2?})  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  ({took:.2?})  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn cardinality() -> Result<String, String> {
    let space = SearchSpace::default();
    ensure!(space.count_stage_configs() == 17_280, "got {}", space.count_stage_configs());
    ensure!(space.total_cardinality() == Some(17_280u128.pow(5)), "total {:?}", space.total_cardinality());

    // The header of `pareto show` on a real (tiny) run.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let arch = candidates::accepted(1, 1).remove(0);
    run_search(dir.path().join("run"), vec![arch.to_json()], 1);
    let out = Command::new(env!("CARGO_BIN_EXE_llmnas"))
        .args(["pareto", "show"])
        .arg(dir.path().join("run"))
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let header = text.lines().next().unwrap_or_default().to_string();
    ensure!(header.contains("17,280^5"), "header lacks 17,280^5: {header}");
    Ok(format!("17,280 per stage; header: {header}"))
}

fn estimator_oracle() -> Result<String, String> {
    let space = SearchSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc);
    let n = 100;
    for i in 0..n {
        let mut arch = space.sample_architecture(&mut rng);
        for s in &mut arch.stages {
            s.layers = s.layers.min(2);
        }
        let res = rng.random_range(8..=32usize);
        let est = estimate(&arch, TensorShape::square(res as u64, 3), 100).map_err(|e| e.to_string())?;
        let (macs, params) = oracle::run(&arch, res, 100);
        ensure!(
            est.total_macs == macs && est.total_params == params,
            "case {i} ({res}px): estimate {}/{} vs oracle {macs}/{params}",
            est.total_macs,
            est.total_params
        );
    }
    Ok(format!("{n} architectures, MACs and params exact"))
}

fn totals(macs: u64, sram: u64) -> ResourceEstimate {
    ResourceEstimate { total_macs: macs, total_params: 1, peak_sram_bytes: sram, flash_bytes: 1, layers: vec![] }
}

fn gate_conformance() -> Result<String, String> {
    let limits = ConstraintSet::default();
    let fine_sram = 100 * 1024;
    let rejected = [
        (totals(400_000_000, fine_sram), vec!["400M", "70M", "350M"]),
        (totals(50_000_000, fine_sram), vec!["50M", "70M", "350M"]),
        (totals(200_000_000, 350 * 1024), vec!["350.00 KB", "320.00 KB"]),
    ];
    for (est, needles) in &rejected {
        let GateVerdict::Reject(violations) = check_constraints(est, &limits) else {
            return Err(format!("accepted {} MACs / {} B", est.total_macs, est.peak_sram_bytes));
        };
        let text = build_rejection_feedback(&Rejection::Gate { violations });
        for n in needles {
            ensure!(text.contains(n), "feedback lacks {n}: {text}");
        }
    }
    for est in [
        totals(70_000_000, fine_sram),
        totals(350_000_000, fine_sram),
        totals(200_000_000, 320 * 1024),
        totals(70_000_000, 320 * 1024),
    ] {
        ensure!(
            check_constraints(&est, &limits).is_accept(),
            "boundary rejected: {} MACs / {} B",
            est.total_macs,
            est.peak_sram_bytes
        );
    }
    ensure!(
        !check_constraints(&totals(350_000_001, fine_sram), &limits).is_accept()
            && !check_constraints(&totals(69_999_999, fine_sram), &limits).is_accept()
            && !check_constraints(&totals(200_000_000, 320 * 1024 + 1), &limits).is_accept(),
        "one past a boundary was accepted"
    );
    // A real over-budget architecture through the estimator.
    let heavy = candidates::over_budget(77);
    let est = llmnas_core::estimator::estimate_in_space(&heavy, &SearchSpace::default())
        .map_err(|e| e.to_string())?;
    let verdict = check_constraints(&est, &limits);
    let GateVerdict::Reject(v) = verdict else { return Err("heavy arch accepted".into()) };
    let text = build_rejection_feedback(&Rejection::Gate { violations: v });
    ensure!(text.contains(&est.total_macs.to_string()), "{text}");
    Ok("400M/50M/350 KB rejected with values and bounds; 70M, 350M, 327680 B accepted".into())
}

fn record(i: usize, rng: &mut ChaCha8Rng) -> CandidateRecord {
    CandidateRecord {
        candidate_id: format!("r{i:04}"),
        arch_hash: format!("{:016x}", rng.random::<u64>() % 900),
        accuracy: Accuracy::from_hundredths(rng.random_range(0..=60) * 50),
        macs: rng.random_range(70..=350) * 1_000_000,
        params: rng.random_range(1..=60) * 10_000,
        peak_sram_bytes: 0,
        phase: Phase::Mini,
        iteration: i as u32,
        status: RecordStatus::Evaluated,
    }
}

fn key(r: &CandidateRecord) -> (u32, u64, u64, String) {
    (r.accuracy.hundredths(), r.macs, r.params, r.arch_hash.clone())
}

fn pareto_correctness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1_000);
    let mut records: Vec<CandidateRecord> = (0..1000).map(|i| record(i, &mut rng)).collect();
    let expected: BTreeSet<_> = records
        .iter()
        .filter(|a| !records.iter().any(|b| dominates(b, a)))
        .map(key)
        .collect();
    for order in 0..10 {
        records.shuffle(&mut rng);
        let mut front = ParetoFront::new();
        for r in &records {
            front.update(r.clone());
        }
        let got: BTreeSet<_> = front.members().iter().map(key).collect();
        ensure!(got == expected, "order {order}: {} members vs oracle {}", got.len(), expected.len());
        ensure!(got.len() == front.len(), "order {order}: repeated member");
    }
    Ok(format!("1000 records, 10 orders, front of {}", expected.len()))
}

fn kd_math() -> Result<String, String> {
    let lv = |v: &[f64]| LogitVector::new(v.to_vec()).map_err(|e| e.to_string());
    let z = lv(&[1.5, -0.5, 0.25, 3.0])?;
    ensure!(kd_loss(&z, &z, 10.0).map_err(|e| e.to_string())? == 0.0, "kd(z, z) != 0");
    let (t, s) = (lv(&[2.0, 0.0])?, lv(&[0.0, 0.0])?);
    let k1 = kd_loss(&t, &s, 1.0).map_err(|e| e.to_string())?;
    let k2 = kd_loss(&t, &s, 2.0).map_err(|e| e.to_string())?;
    ensure!((k1 - 0.3278).abs() < 1e-3, "T=1 gives {k1}");
    ensure!((k2 - 0.4444).abs() < 1e-3, "T=2 gives {k2}");

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let temp = rng.random_range(0.5..20.0);
        let direct = kd_loss(&lv(&a)?, &lv(&b)?, temp).map_err(|e| e.to_string())?;
        let div = |v: &[f64]| lv(&v.iter().map(|x| x / temp).collect::<Vec<_>>());
        let unit = temp * temp * kd_loss(&div(&a)?, &div(&b)?, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max((direct - unit).abs());
        let p = softened_probs(&lv(&a)?, temp).map_err(|e| e.to_string())?;
        ensure!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, "probabilities do not sum to 1");
    }
    ensure!(worst < 1e-9, "scaling identity off by {worst:e}");

    let traj = AlphaSchedule::new(0.4, 0.8, 50).map_err(|e| e.to_string())?.trajectory();
    ensure!(traj.len() == 50 && *traj.last().unwrap() == 0.8, "alpha ends at {:?}", traj.last());
    ensure!(traj.windows(2).all(|w| w[0] <= w[1]) && traj[0] >= 0.4, "alpha not monotone");
    Ok(format!("kd(2,0|0,0) = {k1:.4} (T=1), {k2:.4} (T=2); scaling identity max err {worst:.1e}; alpha ends at 0.8"))
}

/// 50 replies: valid, duplicate, out-of-space, prose and over-budget, in a fixed shuffled order.
fn loop_script() -> Vec<String> {
    let valid = candidates::accepted(28, 5_000);
    let mut script: Vec<String> = valid.iter().map(|a| a.to_json()).collect();
    for a in valid.iter().take(8) {
        script.push(candidates::chatty(a));
    }
    for i in 0..5 {
        script.push(candidates::out_of_space(6_000 + i));
    }
    script.push("Sorry, I need more details first.".into());
    for i in 0..8 {
        script.push(candidates::over_budget(7_000 + i).to_json());
    }
    script.shuffle(&mut ChaCha8Rng::seed_from_u64(50));
    script
}

struct LoopRun {
    out: SearchOutcome,
    replay_mismatches: Vec<u32>,
    observed: u32,
}

fn run_search(dir: std::path::PathBuf, script: Vec<String>, iterations: u32) -> LoopRun {
    let mock = Arc::new(MockTransport::from_replies(script));
    let client = LlmClient::new(mock, DecodingParams::default()).with_retries(0, Duration::ZERO);
    let cfg = RunConfig { iterations, seed: 7, ledger_dir: dir, ..RunConfig::default() };
    let mut mismatches = Vec::new();
    let mut observed = 0;
    let out = {
        let observer = Box::new(|it: u32, live: &ParetoFront, entries: &[_]| {
            observed += 1;
            let replayed = replay_entries(entries);
            if serde_json::to_string(&replayed.snapshot()).unwrap()
                != serde_json::to_string(&live.snapshot()).unwrap()
            {
                mismatches.push(it);
            }
        });
        let runner = SearchRunner::with_parts(cfg, client, Dispatcher::surrogate()).with_observer(observer);
        runner.run().expect("search runs")
    };
    LoopRun { out, replay_mismatches: mismatches, observed }
}

fn deterministic_loop() -> Result<String, String> {
    let script = loop_script();
    ensure!(script.len() == 50, "script has {} replies", script.len());
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let runs: Vec<LoopRun> = dirs.iter().map(|d| run_search(d.path().join("run"), script.clone(), 50)).collect();
    let (a, b) = (&runs[0], &runs[1]);
    ensure!(a.out.digest() == b.out.digest(), "digests differ: {} vs {}", a.out.digest(), b.out.digest());
    ensure!(a.out.counts.iterations == 50, "ran {} iterations", a.out.counts.iterations);
    ensure!(a.observed == 50, "observed {} iterations", a.observed);
    ensure!(a.replay_mismatches.is_empty(), "replay differs after iterations {:?}", a.replay_mismatches);

    let from_disk = replay(&a.out.ledger_dir).map_err(|e| e.to_string())?;
    ensure!(from_disk.snapshot() == a.out.front.snapshot(), "replay from disk differs from live front");
    let snapshots = verify_snapshots(&a.out.entries).map_err(|m| format!("snapshot {} differs", m.seq))?;

    let mut evaluated = HashSet::new();
    for e in &a.out.entries {
        if let Event::EvaluationResult { record: Some(r), .. } = &e.event {
            ensure!(evaluated.insert(r.arch_hash.clone()), "{} evaluated twice", r.arch_hash);
        }
    }
    let c = a.out.counts;
    ensure!(c.duplicates == 8 && c.invalid == 6 && c.gate_rejected == 8, "unexpected mix {c:?}");
    ensure!(c.evaluated == 28, "evaluated {}", c.evaluated);
    let rejects = a
        .out
        .entries
        .iter()
        .filter(|e| matches!(&e.event, Event::GateVerdict { outcome: GateOutcome::Reject { .. }, .. }))
        .count();
    ensure!(rejects == 8, "{rejects} reject verdicts");
    Ok(format!(
        "digest {}; {} evaluated, {} duplicates, {} invalid, {} over budget; {} snapshots replayed",
        &a.out.digest()[..16],
        c.evaluated,
        c.duplicates,
        c.invalid,
        c.gate_rejected,
        snapshots
    ))
}

fn statistics_format() -> Result<String, String> {
    let rec = |id: &str, acc: u32, macs: u64, params: u64| CandidateRecord {
        candidate_id: id.into(),
        arch_hash: id.into(),
        accuracy: Accuracy::from_hundredths(acc),
        macs,
        params,
        peak_sram_bytes: 0,
        phase: Phase::Mini,
        iteration: 0,
        status: RecordStatus::Evaluated,
    };
    let members = [rec("a", 38_68, 90_000_000, 300_000), rec("b", 74_24, 300_000_000, 900_000), rec("c", 68_58, 200_000_000, 600_000)];
    let stats = FrontStatistics::of(&members).map_err(|e| e.to_string())?;
    let line = stats.accuracy.to_string();
    ensure!(line == "[38.68, 74.24] 60.50", "accuracy line {line}");
    let rendered = stats.render();
    for l in rendered.lines().skip(1) {
        let triple = l.split_once(": ").map(|(_, t)| t).unwrap_or_default();
        let ok = triple.starts_with('[')
            && triple.matches('.').count() == 3
            && triple.split(['[', ']', ',', ' ']).filter(|t| !t.is_empty()).all(|t| {
                t.split_once('.').is_some_and(|(_, d)| d.len() == 2)
            });
        ensure!(ok, "not [Min, Max] Avg: {l}");
    }
    Ok(rendered.replace('\n', " | "))
}
