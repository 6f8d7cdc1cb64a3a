//! Recall at (translation, rotation) thresholds and mean rotation error.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::LocalizationResult;
use crate::geometry::{pose_error, Pose, PoseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("threshold set is empty")]
    Empty,
    #[error("threshold {0} is not finite and positive")]
    Invalid(usize),
    #[error("threshold {0} is looser than or equal to its successor in neither component")]
    Order(usize),
}

/// Ordered `(meters, degrees)` pairs. Each entry is at least as loose as the
/// previous one in both components and differs from it in at least one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct ThresholdSet {
    pairs: Vec<(f64, f64)>,
}

impl Default for ThresholdSet {
    fn default() -> Self {
        Self {
            pairs: vec![
                (0.01, 1.0),
                (0.03, 1.0),
                (0.05, 1.0),
                (0.10, 1.0),
                (0.10, 10.0),
                (0.25, 10.0),
                (1.0, 10.0),
            ],
        }
    }
}

impl ThresholdSet {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, ThresholdError> {
        if pairs.is_empty() {
            return Err(ThresholdError::Empty);
        }
        for (i, &(t, r)) in pairs.iter().enumerate() {
            if !(t.is_finite() && r.is_finite() && t > 0.0 && r > 0.0) {
                return Err(ThresholdError::Invalid(i));
            }
        }
        for (i, w) in pairs.windows(2).enumerate() {
            let ((t0, r0), (t1, r1)) = (w[0], w[1]);
            if t1 < t0 || r1 < r0 || (t1 == t0 && r1 == r0) {
                return Err(ThresholdError::Order(i + 1));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Whether an error is within each threshold (both components at or below).
    pub fn passes(&self, e: &PoseError) -> Vec<bool> {
        self.pairs
            .iter()
            .map(|&(t, r)| e.translation_m <= t && e.rotation_deg <= r)
            .collect()
    }

    /// Column labels such as `0.01m_1deg`.
    pub fn labels(&self) -> Vec<String> {
        self.pairs.iter().map(|(t, r)| format!("{t}m_{r}deg")).collect()
    }
}

impl TryFrom<Vec<(f64, f64)>> for ThresholdSet {
    type Error = ThresholdError;
    fn try_from(pairs: Vec<(f64, f64)>) -> Result<Self, Self::Error> {
        Self::new(pairs)
    }
}

impl From<ThresholdSet> for Vec<(f64, f64)> {
    fn from(set: ThresholdSet) -> Self {
        set.pairs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub thresholds: ThresholdSet,
    /// Percent of all queries within each threshold.
    pub recall_percent: Vec<f64>,
    /// Mean rotation error over localized queries; `None` if none localized.
    pub mean_rre_deg: Option<f64>,
    pub localized: usize,
    pub total: usize,
    /// Per query, the error of its estimate (`None` for failures).
    pub errors: Vec<Option<PoseError>>,
}

/// Scores results against ground truth given in the same order.
///
/// # Panics
/// If the two slices differ in length.
pub fn evaluate(results: &[LocalizationResult], truths: &[Pose], thresholds: &ThresholdSet) -> Evaluation {
    assert_eq!(results.len(), truths.len(), "one ground-truth pose per result");
    let errors: Vec<Option<PoseError>> = results
        .iter()
        .zip(truths)
        .map(|(r, t)| r.pose.as_ref().map(|p| pose_error(p, t)))
        .collect();
    let total = results.len();
    let mut hits = vec![0usize; thresholds.len()];
    for e in errors.iter().flatten() {
        for (h, pass) in hits.iter_mut().zip(thresholds.passes(e)) {
            *h += pass as usize;
        }
    }
    let localized = errors.iter().flatten().count();
    let rre_sum: f64 = errors.iter().flatten().map(|e| e.rotation_deg).sum();
    Evaluation {
        thresholds: thresholds.clone(),
        recall_percent: hits
            .iter()
            .map(|&h| if total == 0 { 0.0 } else { 100.0 * h as f64 / total as f64 })
            .collect(),
        mean_rre_deg: (localized > 0).then(|| rre_sum / localized as f64),
        localized,
        total,
        errors,
    }
}

impl Evaluation {
    /// Recall at the first threshold equal to `(t, r)`.
    pub fn recall_at(&self, t: f64, r: f64) -> Option<f64> {
        self.thresholds
            .pairs()
            .iter()
            .position(|&p| p == (t, r))
            .map(|i| self.recall_percent[i])
    }

    pub fn write_csv_header(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "config,{},mean_rre_deg,localized,total", self.thresholds.labels().join(","))
    }

    pub fn write_csv_row(&self, label: &str, out: &mut impl Write) -> io::Result<()> {
        let recall: Vec<String> = self.recall_percent.iter().map(|r| format!("{r:.2}")).collect();
        let rre = self.mean_rre_deg.map_or(String::new(), |r| format!("{r:.6}"));
        writeln!(out, "{label},{},{rre},{},{}", recall.join(","), self.localized, self.total)
    }
}
