//! Structured verdicts for the kernel, dispersion and measure conditions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    /// Fail dominates, then inconclusive.
    pub fn combine(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    E1,
    E2,
    E3,
    E4,
    E5,
    ES,
    S0,
    S1,
    S2,
    S3,
    /// Combined E1-E3 report.
    #[serde(rename = "E1-E3")]
    E123,
    /// Combined E4-E5 report.
    #[serde(rename = "E4-E5")]
    E45,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::E123 => f.write_str("E1-E3"),
            Condition::E45 => f.write_str("E4-E5"),
            other => write!(f, "{other:?}"),
        }
    }
}

/// Where a witness was observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Theta(Vec<f64>),
    Offset(Vec<i32>),
    Branch { branch: usize, theta: Vec<f64> },
    Pair { k: usize, l: usize },
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub location: Location,
    pub value: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Witness {
    pub fn new(location: Location, value: f64) -> Self {
        Self { location, value, note: String::new() }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub verdict: Verdict,
    pub witnesses: Vec<Witness>,
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<ConditionReport>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl ConditionReport {
    pub fn new(condition: Condition, verdict: Verdict) -> Self {
        Self {
            condition,
            verdict,
            witnesses: Vec::new(),
            tolerances: BTreeMap::new(),
            parts: Vec::new(),
            note: String::new(),
        }
    }

    /// Combine sub-reports; the verdict is the worst of the parts.
    pub fn composite(condition: Condition, parts: Vec<ConditionReport>) -> Self {
        let verdict = parts.iter().fold(Verdict::Pass, |v, p| v.combine(p.verdict));
        Self { parts, ..Self::new(condition, verdict) }
    }

    pub fn tolerance(mut self, name: &str, value: f64) -> Self {
        self.tolerances.insert(name.to_string(), value);
        self
    }

    pub fn witness(mut self, w: Witness) -> Self {
        self.witnesses.push(w);
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn part(&self, condition: Condition) -> Option<&ConditionReport> {
        if self.condition == condition {
            return Some(self);
        }
        self.parts.iter().find_map(|p| p.part(condition))
    }

    /// A fail verdict must carry a witness, here or in a failing part.
    pub fn is_well_formed(&self) -> bool {
        let own = self.verdict != Verdict::Fail
            || !self.witnesses.is_empty()
            || self.parts.iter().any(|p| p.verdict == Verdict::Fail);
        own && self.parts.iter().all(ConditionReport::is_well_formed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_takes_worst_verdict() {
        let a = ConditionReport::new(Condition::E4, Verdict::Pass);
        let b = ConditionReport::new(Condition::E5, Verdict::Inconclusive);
        let r = ConditionReport::composite(Condition::E45, vec![a, b]);
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert_eq!(r.part(Condition::E5).unwrap().verdict, Verdict::Inconclusive);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"E4-E5\""));
    }

    #[test]
    fn fail_without_witness_is_malformed() {
        let r = ConditionReport::new(Condition::E3, Verdict::Fail);
        assert!(!r.is_well_formed());
        let r = r.witness(Witness::new(Location::Theta(vec![0.0]), -1.0));
        assert!(r.is_well_formed());
    }
}
