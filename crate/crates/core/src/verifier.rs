//! Verification-program generation.
//!
//! The teacher either answers with exactly one fenced code block holding a
//! single-argument predicate, or with the deferral marker. Anything else is
//! malformed: it gets one reprompt and then falls back to judge-only scoring.
//! Accepted sources are statically screened before they can reach a sandbox.

use std::sync::LazyLock;

use regex::Regex;

use crate::config::PipelineConfig;
use crate::gateway::{ChatMessage, Gateway, GatewayError, TeacherRequest};
use crate::model::{Instruction, Requirement};
use crate::prompts;

pub const DEFERRAL_MARKER: &str = "defer to human expert ####";
pub const MAX_PROGRAM_CHARS: usize = 4000;

/// Standard-library modules a verification program may import.
pub const ALLOWED_MODULES: &[&str] = &[
    "collections",
    "datetime",
    "decimal",
    "fractions",
    "functools",
    "itertools",
    "json",
    "math",
    "operator",
    "re",
    "statistics",
    "string",
    "textwrap",
    "typing",
    "unicodedata",
];

/// Names whose appearance as a call or attribute disqualifies a program.
const FORBIDDEN_CALLS: &[&str] = &[
    "__import__",
    "breakpoint",
    "compile",
    "delattr",
    "eval",
    "exec",
    "getattr",
    "globals",
    "input",
    "locals",
    "memoryview",
    "open",
    "setattr",
    "vars",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifierParse {
    Code(String),
    Defer,
    Malformed(String),
}

static DEFERRAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)defer\s+to\s+human\s+expert\s*####").unwrap());

/// Classifies a teacher completion without any heuristic code extraction.
pub fn parse_verifier_completion(completion: &str) -> VerifierParse {
    let fences: Vec<usize> = completion.match_indices("```").map(|(i, _)| i).collect();
    let deferred = DEFERRAL.is_match(completion);
    match (fences.len(), deferred) {
        (2, false) => {
            let inner = &completion[fences[0] + 3..fences[1]];
            // The opening line may carry a language tag.
            let body = match inner.split_once('\n') {
                Some((tag, rest)) if !tag.trim().contains(char::is_whitespace) => rest,
                _ => inner,
            };
            let body = body.trim_matches('\n').to_string();
            if body.trim().is_empty() {
                VerifierParse::Malformed("empty code block".into())
            } else {
                VerifierParse::Code(body)
            }
        }
        (0, true) => VerifierParse::Defer,
        (0, false) => {
            VerifierParse::Malformed("neither a code block nor the deferral marker".into())
        }
        (2, true) => VerifierParse::Malformed("both a code block and the deferral marker".into()),
        (n, _) if n % 2 == 1 => VerifierParse::Malformed("unterminated code block".into()),
        (n, _) => VerifierParse::Malformed(format!("{} code blocks", n / 2)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScreenRejection {
    #[error("program is {0} characters, limit is {MAX_PROGRAM_CHARS}")]
    TooLong(usize),
    #[error("imports non-allowlisted module `{0}`")]
    DisallowedImport(String),
    #[error("uses forbidden builtin `{0}`")]
    ForbiddenCall(String),
    #[error("accesses dunder attribute `{0}`")]
    DunderAccess(String),
    #[error("must define exactly one top-level function, found {0}")]
    FunctionCount(usize),
    #[error("predicate `{0}` must take exactly one argument")]
    Arity(String),
}

static IMPORT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^\s*(?:import\s+([\w.]+(?:\s*(?:as\s+\w+)?\s*,\s*[\w.]+)*)|from\s+([\w.]+)\s+import\b)").unwrap()
});
static CALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Za-z_]\w*)\s*\(").unwrap());
static DUNDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(__\w+__)").unwrap());
static TOP_DEF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^def\s+([A-Za-z_]\w*)\s*\(([^)]*)\)").unwrap());

/// Static screening of an untrusted program. Returns the predicate name.
pub fn screen_program(source: &str) -> Result<String, ScreenRejection> {
    let chars = source.chars().count();
    if chars > MAX_PROGRAM_CHARS {
        return Err(ScreenRejection::TooLong(chars));
    }
    for caps in IMPORT.captures_iter(source) {
        let modules: Vec<&str> = match (caps.get(1), caps.get(2)) {
            (Some(list), _) => list
                .as_str()
                .split(',')
                .map(|m| m.split_whitespace().next().unwrap_or(""))
                .collect(),
            (None, Some(from)) => vec![from.as_str()],
            _ => continue,
        };
        for module in modules {
            let root = module.split('.').next().unwrap_or(module);
            if !ALLOWED_MODULES.contains(&root) {
                return Err(ScreenRejection::DisallowedImport(module.to_string()));
            }
        }
    }
    if let Some(m) = DUNDER.captures(source) {
        let name = m[1].to_string();
        if name != "__name__" {
            return Err(ScreenRejection::DunderAccess(name));
        }
    }
    for caps in CALL.captures_iter(source) {
        let name = &caps[1];
        if FORBIDDEN_CALLS.contains(&name) {
            return Err(ScreenRejection::ForbiddenCall(name.to_string()));
        }
    }
    let defs: Vec<_> = TOP_DEF.captures_iter(source).collect();
    if defs.len() != 1 {
        return Err(ScreenRejection::FunctionCount(defs.len()));
    }
    let name = defs[0][1].to_string();
    let params: Vec<&str> = defs[0][2]
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    if params.len() != 1 || params[0].starts_with('*') {
        return Err(ScreenRejection::Arity(name));
    }
    Ok(name)
}

#[derive(Debug, thiserror::Error)]
pub enum VerifierError {
    #[error("requirement {0} is universal and never program-checked")]
    UniversalRequirement(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifierStatus {
    Program,
    Deferred,
    /// A program was written but failed static screening.
    Rejected,
    /// Still malformed after the reprompt.
    Malformed,
}

/// Result of asking the teacher for one requirement's program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierOutcome {
    pub source: Option<String>,
    pub status: VerifierStatus,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VerifierSettings {
    pub teacher_model: String,
    pub max_tokens: u32,
    pub seed: u64,
}

impl From<&PipelineConfig> for VerifierSettings {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            teacher_model: c.teacher_model.clone(),
            max_tokens: c.gateway.max_tokens_verifier,
            seed: c.seed,
        }
    }
}

pub struct VerifierGenerator<'a> {
    gateway: &'a Gateway,
    settings: VerifierSettings,
}

impl<'a> VerifierGenerator<'a> {
    pub fn new(gateway: &'a Gateway, settings: VerifierSettings) -> Self {
        Self { gateway, settings }
    }

    /// Asks for a verification program. The predicate receives the raw
    /// response text, unstripped.
    pub async fn generate_verifier(
        &self,
        instruction: &Instruction,
        requirement: &Requirement,
    ) -> Result<VerifierOutcome, VerifierError> {
        if requirement.is_universal() {
            return Err(VerifierError::UniversalRequirement(requirement.index));
        }
        let prompt = prompts::VERIFIER.render(&[
            ("input", &instruction.text),
            ("requirement", &requirement.text),
        ]);
        let mut request = TeacherRequest::new(self.settings.teacher_model.clone(), prompt)
            .temperature(0.0)
            .max_tokens(self.settings.max_tokens)
            .seed(Some(self.settings.seed));
        let mut warnings = Vec::new();

        let first = self.gateway.complete(&request).await?.swap_remove(0);
        let parsed = match parse_verifier_completion(&first) {
            VerifierParse::Malformed(reason) => {
                warnings.push(format!(
                    "malformed verifier completion ({reason}); reprompted"
                ));
                request.messages.push(ChatMessage::assistant(first));
                request
                    .messages
                    .push(ChatMessage::user(prompts::VERIFIER_REPROMPT.render(&[])));
                let second = self.gateway.complete(&request).await?.swap_remove(0);
                parse_verifier_completion(&second)
            }
            other => other,
        };

        let (source, status) = match parsed {
            VerifierParse::Code(source) => match screen_program(&source) {
                Ok(_) => (Some(source), VerifierStatus::Program),
                Err(rejection) => {
                    warnings.push(format!("program rejected by screening: {rejection}"));
                    (None, VerifierStatus::Rejected)
                }
            },
            VerifierParse::Defer => (None, VerifierStatus::Deferred),
            VerifierParse::Malformed(reason) => {
                warnings.push(format!(
                    "still malformed after reprompt ({reason}); deferring"
                ));
                (None, VerifierStatus::Malformed)
            }
        };
        Ok(VerifierOutcome {
            source,
            status,
            warnings,
        })
    }
}
