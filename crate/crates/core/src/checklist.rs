//! Checklist extraction from instructions.
//!
//! Two generation paths share one completion format: a numbered list of
//! yes/no questions, each followed by a `(weight: N/100)` annotation. Parsed
//! items are capped, given weights in [0, 100], and closed with the universal
//! requirement.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::gateway::{ChatMessage, Gateway, GatewayError, TeacherRequest};
use crate::model::{Checklist, ChecklistMethod, Instruction, Requirement, MAX_WEIGHT, MIN_WEIGHT};
use crate::prompts;

/// Weight given to an item whose annotation is missing or unreadable.
pub const DEFAULT_WEIGHT: f64 = 75.0;

#[derive(Debug, thiserror::Error)]
pub enum ChecklistError {
    #[error("instruction {0} has empty text")]
    EmptyInstruction(String),
    #[error("instruction {id}: no parseable checklist after {attempts} attempts")]
    Unparseable { id: String, attempts: u32 },
    #[error("instruction {id}: only {succeeded} candidate responses succeeded ({reasons})")]
    TooFewCandidates {
        id: String,
        succeeded: usize,
        reasons: String,
    },
    #[error("checklist for {0} already has a universal requirement")]
    AlreadyInjected(String),
    #[error("instruction {id}: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
}

/// Items parsed from one teacher completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedItems {
    pub items: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

static ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•])\s*(.+?)\s*$").unwrap());
static WEIGHT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)[\(\[]?\s*\**\s*weight\s*\**\s*[:=]?\s*\**\s*(-?\d+(?:\.\d+)?)\s*(?:/\s*100)?\s*[\)\]]?\s*\.?\s*$",
    )
    .unwrap()
});

/// Parses a numbered checklist completion.
///
/// Returns `None` when no item line is found. A missing weight defaults to
/// [`DEFAULT_WEIGHT`]; out-of-range weights are clamped; items beyond
/// `max_items` are dropped from the tail. Each adjustment adds a warning.
pub fn parse_checklist_completion(completion: &str, max_items: usize) -> Option<ParsedItems> {
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for line in completion.lines() {
        let Some(caps) = ITEM.captures(line) else {
            continue;
        };
        let body = caps[1].trim();
        let (text, weight) = match WEIGHT.captures(body) {
            Some(w) => {
                let start = w.get(0).expect("whole match").start();
                let text = body[..start]
                    .trim()
                    .trim_end_matches([',', ';', '-', '–', '—'])
                    .trim();
                let raw: f64 = w[1].parse().unwrap_or(DEFAULT_WEIGHT);
                let clamped = raw.clamp(MIN_WEIGHT, MAX_WEIGHT);
                if clamped != raw {
                    warnings.push(format!(
                        "item {}: weight {raw} clamped to {clamped}",
                        items.len()
                    ));
                }
                (text.to_string(), clamped)
            }
            None => {
                warnings.push(format!(
                    "item {}: missing weight, defaulted to {DEFAULT_WEIGHT}",
                    items.len()
                ));
                (body.to_string(), DEFAULT_WEIGHT)
            }
        };
        let text = text.trim_matches('*').trim().to_string();
        if text.is_empty() {
            warnings.push(format!("item {}: empty text dropped", items.len()));
            continue;
        }
        items.push((text, weight));
    }
    if items.is_empty() {
        return None;
    }
    if items.len() > max_items {
        warnings.push(format!(
            "{} items exceed the cap of {max_items}; tail dropped",
            items.len()
        ));
        items.truncate(max_items);
    }
    Some(ParsedItems { items, warnings })
}

/// Appends the universal requirement.
pub fn inject_universal(mut checklist: Checklist) -> Result<Checklist, ChecklistError> {
    if checklist.requirements.iter().any(Requirement::is_universal) {
        return Err(ChecklistError::AlreadyInjected(checklist.instruction_id));
    }
    let index = checklist.requirements.len();
    checklist.requirements.push(Requirement::universal(index));
    Ok(checklist)
}

/// One candidate response used to expose failure modes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub model: String,
    pub text: String,
}

/// Responses of varying quality for one instruction, weakest model first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub instruction_id: String,
    pub candidates: Vec<Candidate>,
    /// Models that failed, with the reason.
    pub failures: Vec<(String, String)>,
}

/// A generated checklist with the warnings raised while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub checklist: Checklist,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ChecklistSettings {
    pub teacher_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_items: usize,
    pub candidate_models: Vec<String>,
    pub candidate_max_chars: usize,
    pub candidate_max_tokens: u32,
    pub seed: u64,
}

impl From<&PipelineConfig> for ChecklistSettings {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            teacher_model: c.teacher_model.clone(),
            temperature: c.checklist_temperature,
            max_tokens: c.gateway.max_tokens_checklist,
            max_items: c.max_checklist_items,
            candidate_models: c.candidate_model_set.clone(),
            candidate_max_chars: c.candidate_max_chars,
            candidate_max_tokens: c.gateway.max_tokens_candidate,
            seed: c.seed,
        }
    }
}

pub struct ChecklistGenerator<'a> {
    gateway: &'a Gateway,
    settings: ChecklistSettings,
}

impl<'a> ChecklistGenerator<'a> {
    pub fn new(gateway: &'a Gateway, settings: ChecklistSettings) -> Self {
        Self { gateway, settings }
    }

    pub async fn generate_direct(
        &self,
        instruction: &Instruction,
    ) -> Result<Generated, ChecklistError> {
        ensure_text(instruction)?;
        let prompt = prompts::CHECKLIST_DIRECT.render(&[("instruction", &instruction.text)]);
        self.extract(instruction, prompt, ChecklistMethod::Direct)
            .await
    }

    /// Samples one response from every configured candidate model.
    pub async fn generate_candidates(
        &self,
        instruction: &Instruction,
    ) -> Result<CandidateSet, ChecklistError> {
        ensure_text(instruction)?;
        let requests = self.settings.candidate_models.iter().map(|model| {
            let request = TeacherRequest::new(model.clone(), instruction.text.clone())
                .max_tokens(self.settings.candidate_max_tokens)
                .seed(Some(self.settings.seed));
            async move { (model.clone(), self.gateway.complete(&request).await) }
        });
        let results = futures::future::join_all(requests).await;

        let mut candidates = Vec::new();
        let mut failures = Vec::new();
        for (model, result) in results {
            match result {
                Ok(mut texts) => candidates.push(Candidate {
                    model,
                    text: texts.swap_remove(0),
                }),
                Err(e) => failures.push((model, e.to_string())),
            }
        }
        if candidates.len() < 2 {
            return Err(ChecklistError::TooFewCandidates {
                id: instruction.id.clone(),
                succeeded: candidates.len(),
                reasons: failures
                    .iter()
                    .map(|(m, e)| format!("{m}: {e}"))
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
        Ok(CandidateSet {
            instruction_id: instruction.id.clone(),
            candidates,
            failures,
        })
    }

    pub async fn generate_candidate_based(
        &self,
        instruction: &Instruction,
        candidates: &CandidateSet,
    ) -> Result<Generated, ChecklistError> {
        ensure_text(instruction)?;
        let rendered = render_candidates(candidates, self.settings.candidate_max_chars);
        let prompt = prompts::CHECKLIST_CANDIDATES.render(&[
            ("instruction", &instruction.text),
            ("candidates", &rendered),
        ]);
        self.extract(instruction, prompt, ChecklistMethod::CandidateBased)
            .await
    }

    /// Runs whichever method is requested, sampling candidates as needed.
    pub async fn generate(
        &self,
        instruction: &Instruction,
        method: ChecklistMethod,
    ) -> Result<Generated, ChecklistError> {
        match method {
            ChecklistMethod::Direct => self.generate_direct(instruction).await,
            ChecklistMethod::CandidateBased => {
                let candidates = self.generate_candidates(instruction).await?;
                let mut generated = self
                    .generate_candidate_based(instruction, &candidates)
                    .await?;
                generated.warnings.extend(
                    candidates
                        .failures
                        .iter()
                        .map(|(m, e)| format!("candidate {m} failed: {e}")),
                );
                Ok(generated)
            }
        }
    }

    async fn extract(
        &self,
        instruction: &Instruction,
        prompt: String,
        method: ChecklistMethod,
    ) -> Result<Generated, ChecklistError> {
        let mut request = TeacherRequest::new(self.settings.teacher_model.clone(), prompt)
            .temperature(self.settings.temperature)
            .max_tokens(self.settings.max_tokens)
            .seed(Some(self.settings.seed));
        let gateway_err = |source| ChecklistError::Gateway {
            id: instruction.id.clone(),
            source,
        };

        let first = self
            .gateway
            .complete(&request)
            .await
            .map_err(gateway_err)?
            .swap_remove(0);
        let mut reprompted = false;
        let parsed = match parse_checklist_completion(&first, self.settings.max_items) {
            Some(p) => p,
            None => {
                reprompted = true;
                request.messages.push(ChatMessage::assistant(first));
                request
                    .messages
                    .push(ChatMessage::user(prompts::CHECKLIST_REPROMPT.render(&[])));
                let second = self
                    .gateway
                    .complete(&request)
                    .await
                    .map_err(gateway_err)?
                    .swap_remove(0);
                parse_checklist_completion(&second, self.settings.max_items).ok_or_else(|| {
                    ChecklistError::Unparseable {
                        id: instruction.id.clone(),
                        attempts: 2,
                    }
                })?
            }
        };

        let requirements = parsed
            .items
            .into_iter()
            .enumerate()
            .map(|(i, (text, weight))| Requirement::generated(i, text, weight))
            .collect();
        let checklist = inject_universal(Checklist {
            instruction_id: instruction.id.clone(),
            requirements,
            method,
        })?;
        let mut warnings = parsed.warnings;
        if reprompted {
            warnings.insert(0, "first completion unparseable; reprompted".into());
        }
        Ok(Generated {
            checklist,
            warnings,
        })
    }
}

fn ensure_text(instruction: &Instruction) -> Result<(), ChecklistError> {
    if instruction.text.trim().is_empty() {
        Err(ChecklistError::EmptyInstruction(instruction.id.clone()))
    } else {
        Ok(())
    }
}

fn render_candidates(set: &CandidateSet, max_chars: usize) -> String {
    set.candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let text: String = c.text.chars().take(max_chars).collect();
            format!("### Response {}\n{}", i + 1, text.trim_end())
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}
