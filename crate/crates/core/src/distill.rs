//! Logit-based knowledge-distillation kernels.
//!
//! ```text
//! p      = softmax(z / T)
//! L_KD   = T² · Σ_i p_t(i) · ln(p_t(i) / p_s(i))
//! L      = α · L_CE + (1 − α) · L_KD
//! α_next = α + (α_final − α) · epoch / num_epochs      (epoch = 1..=num_epochs)
//! ```
//!
//! These are per-sample definitions; the training side mirrors them and is
//! checked against the vectors produced by [`test_vectors`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("logit vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("teacher has {teacher} classes, student has {student}")]
    MismatchedLength { teacher: usize, student: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("epoch {epoch} outside 1..={num_epochs}")]
    EpochOutOfRange { epoch: u32, num_epochs: u32 },
    #[error("num_epochs must be at least 1")]
    NoEpochs,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Raw class scores for one sample: at least two, all finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DistillError> {
        if values.len() < 2 {
            return Err(DistillError::TooFewClasses(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DistillError::NonFinite("logits"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = DistillError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

fn check_temperature(t: f64) -> Result<(), DistillError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DistillError::BadTemperature(t))
    }
}

/// `ln softmax(z / T)` with max subtraction.
fn log_softened(z: &LogitVector, t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.values().iter().map(|v| v / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - max - log_sum).collect()
}

/// Temperature-softened class probabilities.
pub fn softened_probs(z: &LogitVector, temperature: f64) -> Result<Vec<f64>, DistillError> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = z.values().iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// T²-scaled KL(p_t ‖ p_s), natural log. Classes with p_t = 0 contribute nothing.
pub fn kd_loss(
    teacher: &LogitVector,
    student: &LogitVector,
    temperature: f64,
) -> Result<f64, DistillError> {
    check_temperature(temperature)?;
    if teacher.len() != student.len() {
        return Err(DistillError::MismatchedLength {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    let log_t = log_softened(teacher, temperature);
    let log_s = log_softened(student, temperature);
    let kl: f64 = log_t
        .iter()
        .zip(&log_s)
        .map(|(&lt, &ls)| {
            let p = lt.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lt - ls)
            }
        })
        .sum();
    // rounding can push an exact zero slightly negative
    Ok(temperature * temperature * kl.max(0.0))
}

/// Hard-label cross-entropy `−ln softmax(z)[label]` at temperature 1.
pub fn cross_entropy(z: &LogitVector, label: usize) -> Result<f64, DistillError> {
    if label >= z.len() {
        return Err(DistillError::LabelOutOfRange { label, classes: z.len() });
    }
    Ok(-log_softened(z, 1.0)[label])
}

pub fn combined_loss(ce: f64, kd: f64, alpha: f64) -> Result<f64, DistillError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DistillError::AlphaOutOfRange(alpha));
    }
    if !ce.is_finite() || !kd.is_finite() {
        return Err(DistillError::NonFinite("loss terms"));
    }
    Ok(alpha * ce + (1.0 - alpha) * kd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    pub alpha_final: f64,
    pub num_epochs: u32,
}

impl AlphaSchedule {
    pub fn new(alpha0: f64, alpha_final: f64, num_epochs: u32) -> Result<Self, DistillError> {
        for a in [alpha0, alpha_final] {
            if !(0.0..=1.0).contains(&a) {
                return Err(DistillError::AlphaOutOfRange(a));
            }
        }
        if num_epochs == 0 {
            return Err(DistillError::NoEpochs);
        }
        Ok(Self { alpha0, alpha_final, num_epochs })
    }

    /// α after each epoch 1..=num_epochs, starting from `alpha0`.
    pub fn trajectory(&self) -> Vec<f64> {
        let mut alpha = self.alpha0;
        (1..=self.num_epochs)
            .map(|epoch| {
                alpha = alpha_step(alpha, self, epoch).expect("epoch within schedule");
                alpha
            })
            .collect()
    }
}

/// One end-of-epoch update of the CE weight. The final epoch lands exactly on
/// `alpha_final`.
pub fn alpha_step(alpha: f64, sched: &AlphaSchedule, epoch: u32) -> Result<f64, DistillError> {
    if epoch == 0 || epoch > sched.num_epochs {
        return Err(DistillError::EpochOutOfRange { epoch, num_epochs: sched.num_epochs });
    }
    if epoch == sched.num_epochs {
        return Ok(sched.alpha_final);
    }
    let frac = epoch as f64 / sched.num_epochs as f64;
    Ok(alpha + (sched.alpha_final - alpha) * frac)
}

/// One per-sample reference case shared with the training side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub teacher_logits: Vec<f64>,
    pub student_logits: Vec<f64>,
    pub label: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub ce: f64,
    pub kd: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVectors {
    pub tolerance: f64,
    pub losses: Vec<LossVector>,
    pub alpha_schedule: AlphaSchedule,
    pub alpha_trajectory: Vec<f64>,
}

/// Deterministic reference vectors for cross-runtime parity checks.
pub fn test_vectors() -> TestVectors {
    let cases: [(&[f64], &[f64], usize, f64, f64); 8] = [
        (&[2.0, 0.0], &[0.0, 0.0], 0, 1.0, 0.4),
        (&[2.0, 0.0], &[0.0, 0.0], 0, 2.0, 0.4),
        (&[1.5, -0.5, 0.25], &[1.5, -0.5, 0.25], 2, 10.0, 0.6),
        (&[3.0, 1.0, -2.0, 0.5], &[0.2, 0.1, 0.0, -0.1], 0, 10.0, 0.4),
        (&[-1.0, 4.0, 2.0, 0.0, 1.0], &[0.5, 2.5, 2.5, -1.0, 0.0], 1, 4.0, 0.8),
        (&[12.0, -7.0, 3.5], &[-4.0, 9.0, 0.5], 2, 10.0, 0.5),
        (&[0.0, 0.0, 0.0], &[5.0, -5.0, 0.0], 1, 1.0, 0.0),
        (&[40.0, -40.0], &[-40.0, 40.0], 0, 1.0, 1.0),
    ];
    let losses = cases
        .iter()
        .map(|&(t, s, label, temperature, alpha)| {
            let zt = LogitVector::new(t.to_vec()).expect("fixed vector");
            let zs = LogitVector::new(s.to_vec()).expect("fixed vector");
            let ce = cross_entropy(&zs, label).expect("fixed vector");
            let kd = kd_loss(&zt, &zs, temperature).expect("fixed vector");
            LossVector {
                teacher_logits: t.to_vec(),
                student_logits: s.to_vec(),
                label,
                temperature,
                alpha,
                ce,
                kd,
                combined: combined_loss(ce, kd, alpha).expect("fixed vector"),
            }
        })
        .collect();
    let alpha_schedule = AlphaSchedule::new(0.4, 0.8, 50).expect("fixed schedule");
    TestVectors {
        tolerance: 1e-6,
        losses,
        alpha_trajectory: alpha_schedule.trajectory(),
        alpha_schedule,
    }
}
