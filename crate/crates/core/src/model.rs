//! Shared data model for every pipeline stage.
//!
//! All types are plain values: once built they are never mutated in place by
//! the pipeline, so they can be shared freely between workers. Scores that
//! could not be produced are represented as `None` (MISSING) and are never
//! encoded as a number.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// The regularizing requirement appended to every checklist.
pub const UNIVERSAL_REQUIREMENT: &str = "Does the response satisfy the following two criteria: 1) The response directly address the request without excessive or off-topic information not necessary for addressing the user's instruction? 2) The response should match the context and the instruction, whether it requires professionalism, friendliness, formality, or neutrality.";

/// Weight carried by the universal requirement.
pub const UNIVERSAL_WEIGHT: f64 = 100.0;

pub const MIN_WEIGHT: f64 = 0.0;
pub const MAX_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("instruction id must not be empty")]
    EmptyInstructionId,
    #[error("instruction {0}: text is empty after trimming")]
    EmptyInstructionText(String),
    #[error("instruction {0}: turn_count must be positive")]
    ZeroTurnCount(String),
}

/// A user prompt, the unit of checklist generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    /// Free-form provenance tag, usually the corpus name.
    pub source: String,
    pub turn_count: u32,
}

impl Instruction {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        source: impl Into<String>,
        turn_count: u32,
    ) -> Result<Self, ModelError> {
        let instruction = Self {
            id: id.into(),
            text: text.into(),
            source: source.into(),
            turn_count,
        };
        instruction.check()?;
        Ok(instruction)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyInstructionId);
        }
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyInstructionText(self.id.clone()));
        }
        if self.turn_count == 0 {
            return Err(ModelError::ZeroTurnCount(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementKind {
    Generated,
    Universal,
}

/// One yes/no criterion of a checklist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    /// 0-based position in the checklist.
    pub index: usize,
    pub text: String,
    /// Importance in [0, 100].
    pub weight: f64,
    pub kind: RequirementKind,
    /// Verification program source, filled in by the verifier stage.
    #[serde(default)]
    pub verifier_source: Option<String>,
}

impl Requirement {
    pub fn generated(index: usize, text: impl Into<String>, weight: f64) -> Self {
        Self {
            index,
            text: text.into(),
            weight,
            kind: RequirementKind::Generated,
            verifier_source: None,
        }
    }

    pub fn universal(index: usize) -> Self {
        Self {
            index,
            text: UNIVERSAL_REQUIREMENT.to_string(),
            weight: UNIVERSAL_WEIGHT,
            kind: RequirementKind::Universal,
            verifier_source: None,
        }
    }

    pub fn is_universal(&self) -> bool {
        self.kind == RequirementKind::Universal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChecklistMethod {
    Direct,
    CandidateBased,
}

impl fmt::Display for ChecklistMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Direct => f.write_str("direct"),
            Self::CandidateBased => f.write_str("candidate_based"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checklist {
    pub instruction_id: String,
    pub requirements: Vec<Requirement>,
    pub method: ChecklistMethod,
}

impl Checklist {
    /// Identifier used in exported preference records.
    pub fn id(&self) -> String {
        format!("{}/{}", self.instruction_id, self.method)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.requirements.iter().map(|r| r.weight).collect()
    }
}

/// A single failed structural rule, naming the offending requirement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub requirement: Option<usize>,
    pub rule: String,
}

impl Violation {
    fn checklist(rule: impl Into<String>) -> Self {
        Self {
            requirement: None,
            rule: rule.into(),
        }
    }

    fn at(index: usize, rule: impl Into<String>) -> Self {
        Self {
            requirement: Some(index),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.requirement {
            Some(i) => write!(f, "req {i}: {}", self.rule),
            None => f.write_str(&self.rule),
        }
    }
}

/// Checks every hard structural invariant of a checklist.
///
/// Returns an empty list iff the checklist is well formed. Question phrasing
/// is reported separately by [`question_form_warnings`] because imperative
/// items are still usable.
pub fn validate_checklist(checklist: &Checklist) -> Vec<Violation> {
    let mut violations = Vec::new();
    if checklist.requirements.is_empty() {
        violations.push(Violation::checklist("checklist empty"));
        return violations;
    }
    if checklist.instruction_id.is_empty() {
        violations.push(Violation::checklist("checklist has empty instruction id"));
    }

    let mut universal_count = 0;
    for (position, req) in checklist.requirements.iter().enumerate() {
        if req.index != position {
            violations.push(Violation::at(
                position,
                format!("index {} breaks contiguous numbering", req.index),
            ));
        }
        if req.text.trim().is_empty() {
            violations.push(Violation::at(position, "text must not be empty"));
        }
        if !(MIN_WEIGHT..=MAX_WEIGHT).contains(&req.weight) {
            violations.push(Violation::at(
                position,
                format!("weight {} outside [0, 100]", req.weight),
            ));
        }
        if req.is_universal() {
            universal_count += 1;
            if req.weight != UNIVERSAL_WEIGHT {
                violations.push(Violation::at(position, "universal weight must be 100"));
            }
            if req.text != UNIVERSAL_REQUIREMENT {
                violations.push(Violation::at(
                    position,
                    "universal text must match the canonical universal requirement",
                ));
            }
            if req.verifier_source.is_some() {
                violations.push(Violation::at(
                    position,
                    "universal requirement cannot carry a verifier program",
                ));
            }
        }
    }
    if universal_count != 1 {
        violations.push(Violation::checklist(format!(
            "checklist must contain exactly one universal requirement (found {universal_count})"
        )));
    }
    violations
}

/// Generated requirements that are not phrased as questions.
pub fn question_form_warnings(checklist: &Checklist) -> Vec<Violation> {
    checklist
        .requirements
        .iter()
        .filter(|r| !r.is_universal() && !r.text.trim().ends_with('?'))
        .map(|r| Violation::at(r.index, "not phrased as a yes/no question"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

impl Slot {
    pub const BOTH: [Slot; 2] = [Slot::A, Slot::B];

    pub fn other(self) -> Slot {
        match self {
            Slot::A => Slot::B,
            Slot::B => Slot::A,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::A => f.write_str("A"),
            Slot::B => f.write_str("B"),
        }
    }
}

/// Decoding parameters a response was sampled with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub temperature: f64,
    pub top_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub instruction_id: String,
    pub slot: Slot,
    pub text: String,
    pub sampler: SamplerParams,
}

/// Outcome of running a requirement's verification program on a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramResult {
    Pass,
    Fail,
    Error,
    Absent,
}

impl ProgramResult {
    /// Score contributed by a definite verdict.
    pub fn program_score(self) -> Option<f64> {
        match self {
            ProgramResult::Pass => Some(100.0),
            ProgramResult::Fail => Some(0.0),
            ProgramResult::Error | ProgramResult::Absent => None,
        }
    }
}

/// Score of one response on one requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    /// Parsed judge samples in [0, 100]; sentinels and garbage excluded.
    pub judge_samples: Vec<f64>,
    /// Number of completions that were excluded from `judge_samples`.
    pub discarded_samples: u32,
    /// Mean of `judge_samples`, `None` when MISSING.
    pub judge_mean: Option<f64>,
    pub program_result: ProgramResult,
    /// Final per-item score, `None` when MISSING.
    pub combined: Option<f64>,
    /// Why the cell is MISSING or degraded, when known.
    #[serde(default)]
    pub note: Option<String>,
}

impl ScoreCell {
    /// A cell with judge fields only; fusion has not run yet.
    pub fn from_samples(judge_samples: Vec<f64>, discarded_samples: u32) -> Self {
        let judge_mean = mean(&judge_samples);
        Self {
            judge_samples,
            discarded_samples,
            judge_mean,
            program_result: ProgramResult::Absent,
            combined: judge_mean,
            note: None,
        }
    }

    pub fn missing(note: impl Into<String>) -> Self {
        Self {
            judge_samples: Vec::new(),
            discarded_samples: 0,
            judge_mean: None,
            program_result: ProgramResult::Absent,
            combined: None,
            note: Some(note.into()),
        }
    }
}

pub(crate) fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub slot: Slot,
    pub requirement: usize,
}

impl CellKey {
    pub fn new(slot: Slot, requirement: usize) -> Self {
        Self { slot, requirement }
    }
}

/// All cells and per-slot aggregates for one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub instruction_id: String,
    /// Requirement weights, by requirement index.
    pub weights: Vec<f64>,
    #[serde(with = "cell_list")]
    pub cells: BTreeMap<CellKey, ScoreCell>,
    /// Weighted score per slot, `None` when MISSING.
    pub aggregate: BTreeMap<Slot, Option<f64>>,
}

impl ScoreMatrix {
    pub fn cell(&self, slot: Slot, requirement: usize) -> Option<&ScoreCell> {
        self.cells.get(&CellKey::new(slot, requirement))
    }

    pub fn aggregate(&self, slot: Slot) -> Option<f64> {
        self.aggregate.get(&slot).copied().flatten()
    }

    /// Combined scores of one slot in requirement order.
    pub fn combined(&self, slot: Slot) -> Vec<Option<f64>> {
        (0..self.weights.len())
            .map(|i| self.cell(slot, i).and_then(|c| c.combined))
            .collect()
    }
}

mod cell_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{CellKey, ScoreCell, Slot};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        slot: Slot,
        requirement: usize,
        #[serde(flatten)]
        cell: ScoreCell,
    }

    pub fn serialize<S: Serializer>(
        cells: &BTreeMap<CellKey, ScoreCell>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = cells
            .iter()
            .map(|(key, cell)| Entry {
                slot: key.slot,
                requirement: key.requirement,
                cell: cell.clone(),
            })
            .collect();
        entries.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<BTreeMap<CellKey, ScoreCell>, D::Error> {
        let entries = Vec::<Entry>::deserialize(deserializer)?;
        Ok(entries
            .into_iter()
            .map(|e| (CellKey::new(e.slot, e.requirement), e.cell))
            .collect())
    }
}

/// A chosen/rejected pair mined from one score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instruction_id: String,
    pub chosen_slot: Slot,
    pub rejected_slot: Slot,
    pub chosen_score: f64,
    pub rejected_score: f64,
    /// Largest per-requirement gap over requirements scored on both slots.
    pub max_criterion_diff: f64,
    pub overall_diff: f64,
    pub retained: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checklist(reqs: Vec<Requirement>) -> Checklist {
        Checklist {
            instruction_id: "i1".into(),
            requirements: reqs,
            method: ChecklistMethod::Direct,
        }
    }

    #[test]
    fn well_formed_checklist_has_no_violations() {
        let c = checklist(vec![
            Requirement::universal(0),
            Requirement::generated(1, "Is the generated text in Spanish?", 100.0),
            Requirement::generated(2, "Is the translation complete?", 90.0),
        ]);
        assert!(validate_checklist(&c).is_empty());
    }

    #[test]
    fn universal_weight_80_is_reported() {
        let mut universal = Requirement::universal(0);
        universal.weight = 80.0;
        let c = checklist(vec![
            universal,
            Requirement::generated(1, "Is it short?", 50.0),
            Requirement::generated(2, "Is it polite?", 50.0),
        ]);
        let found: Vec<String> = validate_checklist(&c)
            .iter()
            .map(|v| v.to_string())
            .collect();
        assert_eq!(found, vec!["req 0: universal weight must be 100"]);
    }

    #[test]
    fn empty_checklist_is_reported() {
        let found: Vec<String> = validate_checklist(&checklist(vec![]))
            .iter()
            .map(|v| v.to_string())
            .collect();
        assert_eq!(found, vec!["checklist empty"]);
    }

    #[test]
    fn missing_and_duplicate_universal_are_reported() {
        let none = checklist(vec![Requirement::generated(0, "Is it short?", 50.0)]);
        assert_eq!(validate_checklist(&none).len(), 1);
        let two = checklist(vec![Requirement::universal(0), Requirement::universal(1)]);
        assert_eq!(validate_checklist(&two).len(), 1);
    }

    #[test]
    fn bad_weights_indices_and_text_are_reported() {
        let c = checklist(vec![
            Requirement::generated(0, "  ", 50.0),
            Requirement::generated(5, "Is it short?", 120.0),
            Requirement::generated(2, "Is it long?", f64::NAN),
            Requirement::universal(3),
        ]);
        let found: Vec<String> = validate_checklist(&c)
            .iter()
            .map(|v| v.to_string())
            .collect();
        assert_eq!(
            found,
            vec![
                "req 0: text must not be empty",
                "req 1: index 5 breaks contiguous numbering",
                "req 1: weight 120 outside [0, 100]",
                "req 2: weight NaN outside [0, 100]",
            ]
        );
    }

    #[test]
    fn imperative_items_only_warn() {
        let c = checklist(vec![
            Requirement::generated(0, "Is the text concise", 75.0),
            Requirement::generated(1, "Does it rhyme?", 75.0),
            Requirement::universal(2),
        ]);
        assert!(validate_checklist(&c).is_empty());
        let warnings = question_form_warnings(&c);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].requirement, Some(0));
    }

    #[test]
    fn instruction_rejects_blank_text() {
        assert_eq!(
            Instruction::new("x", " \n\t", "wildchat", 1),
            Err(ModelError::EmptyInstructionText("x".into()))
        );
        assert_eq!(
            Instruction::new("", "hi", "wildchat", 1),
            Err(ModelError::EmptyInstructionId)
        );
    }

    #[test]
    fn program_scores() {
        assert_eq!(ProgramResult::Pass.program_score(), Some(100.0));
        assert_eq!(ProgramResult::Fail.program_score(), Some(0.0));
        assert_eq!(ProgramResult::Error.program_score(), None);
        assert_eq!(ProgramResult::Absent.program_score(), None);
    }
}
