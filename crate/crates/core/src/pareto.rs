//! Three-objective Pareto front: accuracy (maximize), MACs and parameters (minimize).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Test accuracy in percent, stored at two-decimal resolution so that
/// comparisons are exact and replays are bit-stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Accuracy(u32);

impl Accuracy {
    pub const MAX: Accuracy = Accuracy(100_00);

    /// Rounds to the nearest hundredth of a percent and clamps to [0, 100].
    pub fn from_percent(percent: f64) -> Self {
        let hundredths = (percent * 100.0).round().clamp(0.0, 100_00.0);
        Accuracy(hundredths as u32)
    }

    pub const fn from_hundredths(h: u32) -> Self {
        Accuracy(if h > 100_00 { 100_00 } else { h })
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn percent(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Accuracy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.percent())
    }
}

impl<'de> Deserialize<'de> for Accuracy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=100.0).contains(&v) {
            return Err(serde::de::Error::custom(format!("accuracy {v} outside [0, 100]")));
        }
        Ok(Accuracy::from_percent(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mini,
    Full,
    Kd,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Mini => "mini",
            Phase::Full => "full",
            Phase::Kd => "kd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Evaluated,
    RejectedGate,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub arch_hash: String,
    pub accuracy: Accuracy,
    pub macs: u64,
    pub params: u64,
    pub peak_sram_bytes: u64,
    pub phase: Phase,
    pub iteration: u32,
    pub status: RecordStatus,
}

impl CandidateRecord {
    fn same_metrics(&self, other: &Self) -> bool {
        self.accuracy == other.accuracy && self.macs == other.macs && self.params == other.params
    }
}

/// `a` is no worse than `b` on every objective and strictly better on one.
pub fn dominates(a: &CandidateRecord, b: &CandidateRecord) -> bool {
    let no_worse = a.accuracy >= b.accuracy && a.macs <= b.macs && a.params <= b.params;
    let better = a.accuracy > b.accuracy || a.macs < b.macs || a.params < b.params;
    no_worse && better
}

/// What one [`ParetoFront::update`] changed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrontDelta {
    pub added: bool,
    pub removed: Vec<CandidateRecord>,
    pub new_best: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParetoFront {
    members: Vec<CandidateRecord>,
    best_accuracy: Option<CandidateRecord>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParetoError {
    #[error("the Pareto front is empty")]
    EmptyFront,
}

impl ParetoFront {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn members(&self) -> &[CandidateRecord] {
        &self.members
    }

    pub fn best_accuracy(&self) -> Option<&CandidateRecord> {
        self.best_accuracy.as_ref()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Tracks the highest accuracy seen, regardless of front membership.
    /// Only records that actually carry a measured accuracy are considered.
    pub fn observe_best(&mut self, rec: &CandidateRecord) -> bool {
        if rec.status == RecordStatus::Duplicate {
            return false;
        }
        match &self.best_accuracy {
            Some(best) if rec.accuracy <= best.accuracy => false,
            _ => {
                self.best_accuracy = Some(rec.clone());
                true
            }
        }
    }

    /// Offers one record to the front.
    ///
    /// Evaluated records join when no member dominates them and evict every
    /// member they dominate. A record repeating both the metric triple and the
    /// architecture hash of a member is ignored. Gate-rejected records only
    /// feed the best-accuracy tracker.
    pub fn update(&mut self, rec: CandidateRecord) -> FrontDelta {
        let mut delta = FrontDelta { new_best: self.observe_best(&rec), ..FrontDelta::default() };
        if rec.status != RecordStatus::Evaluated {
            return delta;
        }
        let repeated = self
            .members
            .iter()
            .any(|m| m.arch_hash == rec.arch_hash && m.same_metrics(&rec));
        if repeated || self.members.iter().any(|m| dominates(m, &rec)) {
            return delta;
        }
        let (removed, kept): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.members).into_iter().partition(|m| dominates(&rec, m));
        self.members = kept;
        self.members.push(rec);
        delta.added = true;
        delta.removed = removed;
        delta
    }

    pub fn statistics(&self) -> Result<FrontStatistics, ParetoError> {
        FrontStatistics::of(&self.members)
    }

    /// Canonical, order-independent view: members sorted by candidate id.
    pub fn snapshot(&self) -> FrontSnapshot {
        let mut members = self.members.clone();
        members.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        FrontSnapshot {
            statistics: self.statistics().ok(),
            members,
            best_accuracy: self.best_accuracy.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl MetricSummary {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        MetricSummary { min, max, mean: sum / n as f64 }
    }

    pub fn scaled(&self, divisor: f64) -> Self {
        MetricSummary { min: self.min / divisor, max: self.max / divisor, mean: self.mean / divisor }
    }
}

/// `[min, max] mean` with two decimals, e.g. `[38.68, 68.58] 60.50`.
impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.2}, {:.2}] {:.2}", self.min, self.max, self.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontStatistics {
    pub count: usize,
    /// Percent.
    pub accuracy: MetricSummary,
    /// Raw MAC counts.
    pub macs: MetricSummary,
    /// Raw parameter counts.
    pub params: MetricSummary,
}

impl FrontStatistics {
    pub fn of(members: &[CandidateRecord]) -> Result<Self, ParetoError> {
        if members.is_empty() {
            return Err(ParetoError::EmptyFront);
        }
        // accuracy mean over hundredths keeps the sum exact
        let acc = MetricSummary::of(members.iter().map(|m| m.accuracy.hundredths() as f64))
            .scaled(100.0);
        Ok(FrontStatistics {
            count: members.len(),
            accuracy: acc,
            macs: MetricSummary::of(members.iter().map(|m| m.macs as f64)),
            params: MetricSummary::of(members.iter().map(|m| m.params as f64)),
        })
    }

    /// Accuracy in percent, MACs and params in millions, one line each.
    pub fn render(&self) -> String {
        format!(
            "Pareto candidates: {}\nAccuracy (%): {}\nMACs (M): {}\nParams (M): {}",
            self.count,
            self.accuracy,
            self.macs.scaled(1e6),
            self.params.scaled(1e6)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontSnapshot {
    pub members: Vec<CandidateRecord>,
    pub best_accuracy: Option<CandidateRecord>,
    pub statistics: Option<FrontStatistics>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, acc: f64, macs: u64, params: u64) -> CandidateRecord {
        CandidateRecord {
            candidate_id: id.into(),
            arch_hash: format!("hash-{id}"),
            accuracy: Accuracy::from_percent(acc),
            macs,
            params,
            peak_sram_bytes: 1,
            phase: Phase::Mini,
            iteration: 0,
            status: RecordStatus::Evaluated,
        }
    }

    #[test]
    fn accuracy_resolution_and_format() {
        assert_eq!(Accuracy::from_percent(60.504).to_string(), "60.50");
        assert_eq!(Accuracy::from_percent(7.5).to_string(), "7.50");
        assert_eq!(Accuracy::from_percent(120.0), Accuracy::MAX);
        let json = serde_json::to_string(&Accuracy::from_percent(61.9)).unwrap();
        assert_eq!(json, "61.9");
        let back: Accuracy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Accuracy::from_percent(61.9));
        assert!(serde_json::from_str::<Accuracy>("101").is_err());
    }

    #[test]
    fn domination_cases() {
        let a = rec("a", 70.0, 100_000_000, 500_000);
        let b = rec("b", 69.0, 120_000_000, 600_000);
        let c = rec("c", 72.0, 90_000_000, 700_000);
        assert!(dominates(&a, &b));
        assert!(!dominates(&a, &c));
        assert!(!dominates(&c, &a));
        let a2 = rec("a2", 70.0, 100_000_000, 500_000);
        assert!(!dominates(&a, &a2));
        assert!(!dominates(&a2, &a));
    }

    #[test]
    fn update_adds_and_evicts() {
        let mut front = ParetoFront::new();
        let a = rec("a", 70.0, 100_000_000, 500_000);
        let d = front.update(a.clone());
        assert!(d.added && d.removed.is_empty() && d.new_best);

        let r = rec("r", 71.0, 90_000_000, 400_000);
        let d = front.update(r.clone());
        assert!(d.added);
        assert_eq!(d.removed, vec![a]);
        assert_eq!(front.members(), &[r.clone()]);

        let worse = rec("w", 60.0, 95_000_000, 450_000);
        let d = front.update(worse);
        assert!(!d.added && !d.new_best);
        assert_eq!(front.best_accuracy(), Some(&r));
    }

    #[test]
    fn exact_repeat_is_ignored_but_metric_tie_is_kept() {
        let mut front = ParetoFront::new();
        front.update(rec("a", 70.0, 100, 5));
        let mut same = rec("b", 70.0, 100, 5);
        same.arch_hash = "hash-a".into();
        assert!(!front.update(same).added);
        assert!(front.update(rec("c", 70.0, 100, 5)).added);
        assert_eq!(front.len(), 2);
    }

    #[test]
    fn gate_rejected_records_only_touch_best() {
        let mut front = ParetoFront::new();
        front.update(rec("a", 50.0, 100, 5));
        let mut big = rec("big", 90.0, 10_000, 5_000);
        big.status = RecordStatus::RejectedGate;
        let d = front.update(big.clone());
        assert!(!d.added && d.new_best);
        assert_eq!(front.len(), 1);
        assert_eq!(front.best_accuracy(), Some(&big));
    }

    #[test]
    fn statistics_values_and_format() {
        let one = FrontStatistics::of(&[rec("a", 60.0, 100_000_000, 200_000)]).unwrap();
        assert_eq!(one.accuracy.mean, 60.0);
        assert_eq!(one.macs.mean, 1e8);
        assert_eq!(one.params.mean, 2e5);

        let two = FrontStatistics::of(&[
            rec("a", 60.0, 100_000_000, 100_000),
            rec("b", 70.0, 200_000_000, 300_000),
        ])
        .unwrap();
        assert_eq!(two.accuracy.mean, 65.0);
        assert_eq!(two.macs.mean, 150e6);
        assert_eq!(two.params.mean, 200e3);

        let s = MetricSummary { min: 38.68, max: 68.58, mean: 60.5 };
        assert_eq!(s.to_string(), "[38.68, 68.58] 60.50");
        assert!(two.render().contains("MACs (M): [100.00, 200.00] 150.00"));

        assert_eq!(FrontStatistics::of(&[]), Err(ParetoError::EmptyFront));
        assert_eq!(ParetoFront::new().statistics(), Err(ParetoError::EmptyFront));
    }

    #[test]
    fn snapshot_is_sorted() {
        let mut front = ParetoFront::new();
        front.update(rec("z", 70.0, 100, 5));
        front.update(rec("a", 80.0, 200, 5));
        let snap = front.snapshot();
        let ids: Vec<_> = snap.members.iter().map(|m| m.candidate_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "z"]);
        assert_eq!(snap.statistics.unwrap().count, 2);
    }
}
