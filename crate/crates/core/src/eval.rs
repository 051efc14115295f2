//! Teacher-judged quality of generated checklists.

use std::collections::BTreeMap;
use std::fmt;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::gateway::{Gateway, GatewayError, TeacherRequest};
use crate::model::{mean, validate_checklist, Checklist, ChecklistMethod, Instruction};
use crate::prompts::{self, Template};
use crate::scoring::parse_judge_completion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    Naturalness,
    Objectiveness,
    Comprehensiveness,
    Atomicity,
}

impl QualityMetric {
    pub const ALL: [QualityMetric; 4] = [
        QualityMetric::Naturalness,
        QualityMetric::Objectiveness,
        QualityMetric::Comprehensiveness,
        QualityMetric::Atomicity,
    ];

    fn template(self) -> Template {
        match self {
            QualityMetric::Naturalness => prompts::EVAL_NATURALNESS,
            QualityMetric::Objectiveness => prompts::EVAL_OBJECTIVENESS,
            QualityMetric::Comprehensiveness => prompts::EVAL_COMPREHENSIVENESS,
            QualityMetric::Atomicity => prompts::EVAL_ATOMICITY,
        }
    }
}

impl fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityMetric::Naturalness => "naturalness",
            QualityMetric::Objectiveness => "objectiveness",
            QualityMetric::Comprehensiveness => "comprehensiveness",
            QualityMetric::Atomicity => "atomicity",
        })
    }
}

/// Mean teacher rating per metric; `None` when every sample was unusable.
pub type QualityScores = BTreeMap<QualityMetric, Option<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    First,
    Second,
    Tie,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("checklist {0} is invalid: {1}")]
    InvalidChecklist(String, String),
    #[error("checklists belong to different instructions ({0} vs {1})")]
    Mismatch(String, String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub judge_model: String,
    pub sample_count: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl From<&PipelineConfig> for EvalSettings {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            judge_model: c.teacher_model.clone(),
            sample_count: c.judge_sample_count,
            temperature: c.judge_temperature,
            max_tokens: c.gateway.max_tokens_judge,
            seed: c.seed,
        }
    }
}

/// Checklist as shown to the grader: one numbered line per requirement.
pub fn render_checklist(checklist: &Checklist) -> String {
    let mut reqs: Vec<_> = checklist.requirements.iter().collect();
    reqs.sort_by_key(|r| r.index);
    reqs.iter()
        .map(|r| format!("{}. {} (weight: {}/100)", r.index + 1, r.text, r.weight))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reads "1" or "2" from a comparison answer.
pub fn parse_choice(completion: &str) -> Option<u8> {
    completion
        .chars()
        .find(|c| c.is_ascii_digit())
        .and_then(|c| match c {
            '1' => Some(1),
            '2' => Some(2),
            _ => None,
        })
}

fn ensure_valid(checklist: &Checklist) -> Result<(), EvalError> {
    let violations = validate_checklist(checklist);
    if violations.is_empty() {
        Ok(())
    } else {
        let joined = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(EvalError::InvalidChecklist(checklist.id(), joined))
    }
}

pub struct ChecklistEvaluator<'a> {
    gateway: &'a Gateway,
    settings: EvalSettings,
}

impl<'a> ChecklistEvaluator<'a> {
    pub fn new(gateway: &'a Gateway, settings: EvalSettings) -> Self {
        Self { gateway, settings }
    }

    pub async fn score_checklist_quality(
        &self,
        instruction: &Instruction,
        checklist: &Checklist,
    ) -> Result<QualityScores, EvalError> {
        ensure_valid(checklist)?;
        let rendered = render_checklist(checklist);
        let requests: Vec<_> = QualityMetric::ALL
            .iter()
            .map(|metric| {
                let prompt = metric
                    .template()
                    .render(&[("instruction", &instruction.text), ("checklist", &rendered)]);
                TeacherRequest::new(self.settings.judge_model.clone(), prompt)
                    .temperature(self.settings.temperature)
                    .n(self.settings.sample_count)
                    .max_tokens(self.settings.max_tokens)
                    .seed(Some(self.settings.seed))
            })
            .collect();
        let results = join_all(requests.iter().map(|r| self.gateway.complete(r))).await;
        let mut scores = QualityScores::new();
        for (metric, result) in QualityMetric::ALL.iter().zip(results) {
            let samples: Vec<f64> = result?
                .iter()
                .filter_map(|c| parse_judge_completion(c))
                .filter(|v| *v >= 0.0)
                .collect();
            scores.insert(*metric, mean(&samples));
        }
        Ok(scores)
    }

    /// Asks for a preference in both presentation orders. Only a consistent
    /// answer counts; anything else is a tie.
    pub async fn compare_checklists(
        &self,
        instruction: &Instruction,
        first: &Checklist,
        second: &Checklist,
    ) -> Result<Preference, EvalError> {
        if first.instruction_id != second.instruction_id {
            return Err(EvalError::Mismatch(
                first.instruction_id.clone(),
                second.instruction_id.clone(),
            ));
        }
        ensure_valid(first)?;
        ensure_valid(second)?;
        let (a, b) = (render_checklist(first), render_checklist(second));
        if a == b {
            return Ok(Preference::Tie);
        }
        let ask = |x: &str, y: &str| {
            let prompt = prompts::EVAL_COMPARE.render(&[
                ("instruction", &instruction.text),
                ("first", x),
                ("second", y),
            ]);
            TeacherRequest::new(self.settings.judge_model.clone(), prompt)
                .temperature(0.0)
                .max_tokens(self.settings.max_tokens)
                .seed(Some(self.settings.seed))
        };
        let (forward, backward) = (ask(&a, &b), ask(&b, &a));
        let (fwd, bwd) = futures::join!(
            self.gateway.complete(&forward),
            self.gateway.complete(&backward)
        );
        let fwd = parse_choice(&fwd?[0]);
        let bwd = parse_choice(&bwd?[0]);
        Ok(match (fwd, bwd) {
            (Some(1), Some(2)) => Preference::First,
            (Some(2), Some(1)) => Preference::Second,
            _ => Preference::Tie,
        })
    }
}

/// Both checklists of one instruction, judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionEval {
    pub instruction_id: String,
    pub quality: BTreeMap<ChecklistMethod, QualityScores>,
    /// Preferred method, or `None` for a tie.
    pub preferred: Option<ChecklistMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: ChecklistMethod,
    pub instructions: usize,
    /// Mean over instructions of each metric, MISSING values skipped.
    pub metrics: BTreeMap<QualityMetric, Option<f64>>,
    /// Share of compared instructions where this method was preferred, in %.
    pub preferred_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub tie_pct: Option<f64>,
    pub compared: usize,
    pub per_instruction: Vec<InstructionEval>,
}

/// Builds the method-by-metric table from per-instruction results.
pub fn build_report(mut per_instruction: Vec<InstructionEval>) -> EvalReport {
    per_instruction.sort_by(|a, b| a.instruction_id.cmp(&b.instruction_id));
    let compared = per_instruction.len();
    let pct = |count: usize| (compared > 0).then(|| 100.0 * count as f64 / compared as f64);
    let rows = [ChecklistMethod::Direct, ChecklistMethod::CandidateBased]
        .into_iter()
        .map(|method| {
            let metrics = QualityMetric::ALL
                .iter()
                .map(|metric| {
                    let values: Vec<f64> = per_instruction
                        .iter()
                        .filter_map(|e| e.quality.get(&method)?.get(metric).copied().flatten())
                        .collect();
                    (*metric, mean(&values))
                })
                .collect();
            EvalRow {
                method,
                instructions: per_instruction
                    .iter()
                    .filter(|e| e.quality.contains_key(&method))
                    .count(),
                metrics,
                preferred_pct: pct(per_instruction
                    .iter()
                    .filter(|e| e.preferred == Some(method))
                    .count()),
            }
        })
        .collect();
    EvalReport {
        rows,
        tie_pct: pct(per_instruction
            .iter()
            .filter(|e| e.preferred.is_none())
            .count()),
        compared,
        per_instruction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Requirement;

    fn checklist(method: ChecklistMethod, texts: &[&str]) -> Checklist {
        let mut requirements: Vec<Requirement> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Requirement::generated(i, *t, 80.0))
            .collect();
        requirements.push(Requirement::universal(texts.len()));
        Checklist {
            instruction_id: "i".into(),
            requirements,
            method,
        }
    }

    #[test]
    fn rendering_lists_items_in_index_order() {
        let mut c = checklist(ChecklistMethod::Direct, &["Is it short?", "Is it polite?"]);
        c.requirements.swap(0, 1);
        let text = render_checklist(&c);
        assert!(text.starts_with("1. Is it short? (weight: 80/100)\n2. Is it polite?"));
        assert!(text
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("3. Does the response satisfy"));
    }

    #[test]
    fn choice_parsing() {
        assert_eq!(parse_choice("1"), Some(1));
        assert_eq!(parse_choice(" Checklist 2 is better"), Some(2));
        assert_eq!(parse_choice("3"), None);
        assert_eq!(parse_choice("neither"), None);
    }

    #[test]
    fn report_rows_and_percentages() {
        let q = |v: f64| {
            QualityMetric::ALL
                .iter()
                .map(|m| (*m, Some(v)))
                .collect::<QualityScores>()
        };
        let evals = vec![
            InstructionEval {
                instruction_id: "b".into(),
                quality: [
                    (ChecklistMethod::Direct, q(60.0)),
                    (ChecklistMethod::CandidateBased, q(80.0)),
                ]
                .into(),
                preferred: Some(ChecklistMethod::CandidateBased),
            },
            InstructionEval {
                instruction_id: "a".into(),
                quality: [
                    (ChecklistMethod::Direct, q(70.0)),
                    (ChecklistMethod::CandidateBased, q(90.0)),
                ]
                .into(),
                preferred: None,
            },
        ];
        let report = build_report(evals);
        assert_eq!(report.per_instruction[0].instruction_id, "a");
        assert_eq!(report.rows[0].method, ChecklistMethod::Direct);
        assert_eq!(
            report.rows[0].metrics[&QualityMetric::Naturalness],
            Some(65.0)
        );
        assert_eq!(
            report.rows[1].metrics[&QualityMetric::Atomicity],
            Some(85.0)
        );
        assert_eq!(report.rows[1].preferred_pct, Some(50.0));
        assert_eq!(report.rows[0].preferred_pct, Some(0.0));
        assert_eq!(report.tie_pct, Some(50.0));
    }
}
