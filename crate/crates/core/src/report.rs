//! Verdict records shared by the checkers and experiments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    HypothesisViolation,
}

impl Verdict {
    /// Process exit code for a run ending in this verdict.
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 2,
            Verdict::HypothesisViolation => 3,
        }
    }

    /// The more severe of two verdicts.
    pub fn combine(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (HypothesisViolation, _) | (_, HypothesisViolation) => HypothesisViolation,
            (Fail, _) | (_, Fail) => Fail,
            _ => Pass,
        }
    }
}

/// Outcome of a condition check. A positive margin means the condition holds
/// with room to spare; the check passes iff `worst_margin >= -tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub id: String,
    pub samples: usize,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub stage: Option<String>,
    pub witness: Option<serde_json::Value>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl ConditionReport {
    pub fn new(id: &str, samples: usize, worst_margin: f64, tolerance: f64) -> Self {
        let verdict = if worst_margin >= -tolerance { Verdict::Pass } else { Verdict::Fail };
        ConditionReport {
            id: id.to_string(),
            samples,
            worst_margin,
            tolerance,
            verdict,
            stage: None,
            witness: None,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn hypothesis_violation(id: &str, stage: &str, note: String) -> Self {
        let mut r = ConditionReport::new(id, 0, f64::NAN, 0.0);
        r.verdict = Verdict::HypothesisViolation;
        r.stage = Some(stage.to_string());
        r.notes.push(note);
        r
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn with_metric(mut self, key: &str, v: f64) -> Self {
        self.metrics.insert(key.to_string(), v);
        self
    }
}
