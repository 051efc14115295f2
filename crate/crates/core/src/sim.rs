//! Deterministic stand-in for a teacher endpoint.
//!
//! Every completion is a pure function of the request, so runs against it
//! are reproducible and can be recorded into a transcript store. It answers
//! each prompt family in the expected format, with a small share of
//! sentinel, garbage and malformed replies mixed in to exercise the
//! recovery paths.

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use crate::gateway::{BackendError, CompletionBackend, Role, TeacherRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PromptKind {
    Judge,
    Verifier,
    Checklist,
    QualityMetric,
    Compare,
    Free,
}

fn classify(prompt: &str) -> PromptKind {
    if prompt.starts_with("Based on the provided input instruction") {
        PromptKind::Judge
    } else if prompt.starts_with("You are responsible for helping me verify") {
        PromptKind::Verifier
    } else if prompt.starts_with("You are writing an evaluation checklist") {
        PromptKind::Checklist
    } else if prompt.starts_with("You are grading a checklist") {
        PromptKind::QualityMetric
    } else if prompt.starts_with("You are comparing two checklists") {
        PromptKind::Compare
    } else {
        PromptKind::Free
    }
}

fn hash(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Text between `start` and `end` markers of a rendered prompt.
fn section<'a>(prompt: &'a str, start: &str, end: &str) -> &'a str {
    let Some(from) = prompt.find(start).map(|i| i + start.len()) else {
        return "";
    };
    let rest = &prompt[from..];
    rest.find(end).map_or(rest, |to| &rest[..to]).trim()
}

const WORDS: &[&str] = &[
    "the", "answer", "should", "clearly", "explain", "each", "step", "with", "care", "and", "a",
    "short", "example", "that", "covers", "edge", "cases", "while", "staying", "polite", "concise",
    "accurate", "list", "summary", "because", "details", "matter", "here", "first", "then",
    "finally", "note",
];

const QUESTIONS: &[&str] = &[
    "Does the response directly answer the request about {topic}?",
    "Is the response written entirely in English?",
    "Does the response avoid factual errors about {topic}?",
    "Is the response shorter than 200 words?",
    "Does the response include at least one concrete example?",
    "Does the response use a numbered or bulleted list?",
    "Does the response end with a one-sentence summary?",
    "Is the tone of the response polite and professional?",
    "Does the response mention {topic} explicitly?",
    "Does the response avoid repeating the question verbatim?",
];

const PROGRAMS: &[&str] = &[
    "def verify_length(text):\n    return len(text.split()) < 200",
    "import re\n\ndef has_list(text):\n    return re.search(r'^\\s*(?:\\d+[.)]|[-*])\\s', text, re.M) is not None",
    "def ends_with_period(text):\n    return text.rstrip().endswith('.')",
];

/// A teacher that needs no network.
#[derive(Debug, Clone, Default)]
pub struct SimulatedTeacher {
    supports_n: bool,
}

impl SimulatedTeacher {
    pub fn new() -> Self {
        Self { supports_n: true }
    }

    /// A variant that rejects `n > 1`, for exercising n-emulation.
    pub fn single_sample() -> Self {
        Self { supports_n: false }
    }

    fn judge(prompt: &str, seed: &str, i: usize) -> String {
        let response = section(prompt, "Generated Text:\n", "\n\nQuestion:\n");
        let question = section(prompt, "\n\nQuestion:\n", "\n\nScore:");
        let base = (hash(&["quality", response, question]) % 101) as i64;
        let h = hash(&["judge", response, question, seed, &i.to_string()]);
        match h % 50 {
            0 | 1 => "-1".into(),
            2 => "I cannot grade this".into(),
            r => {
                let value = (base + (h / 50 % 21) as i64 - 10).clamp(0, 100);
                if r % 3 == 0 {
                    format!("Score: {value}")
                } else if r % 7 == 0 {
                    format!("{value}.5").replace("100.5", "100")
                } else {
                    value.to_string()
                }
            }
        }
    }

    fn verifier(prompt: &str, reprompted: bool) -> String {
        if reprompted {
            return "defer to human expert ####".into();
        }
        let requirement = prompt
            .rsplit("Requirement:")
            .next()
            .unwrap_or(prompt)
            .trim();
        let h = hash(&["verifier", requirement]);
        match h % 10 {
            0..=4 => "defer to human expert ####".into(),
            5..=7 => format!("```python\n{}\n```", PROGRAMS[(h / 10 % PROGRAMS.len() as u64) as usize]),
            8 => "I think maybe this could be checked, but I am not sure.".into(),
            _ => "```python\nimport socket\n\ndef f(text):\n    socket.create_connection(('example.com', 80))\n    return True\n```"
                .into(),
        }
    }

    fn checklist(prompt: &str, seed: &str, reprompted: bool) -> String {
        let instruction = section(prompt, "Instruction:\n", "\n\n");
        let h = hash(&["checklist", instruction, seed]);
        if h.is_multiple_of(10) && !reprompted {
            return "Sure! A good response would be clear and helpful.".into();
        }
        let topic = instruction
            .split_whitespace()
            .max_by_key(|w| (w.len(), *w))
            .unwrap_or("the topic")
            .trim_matches(|c: char| !c.is_alphanumeric());
        let count = 3 + (h / 10 % 4) as usize;
        let start = (h / 40 % QUESTIONS.len() as u64) as usize;
        (0..count)
            .map(|k| {
                let q = QUESTIONS[(start + k) % QUESTIONS.len()].replace("{topic}", topic);
                let w = 50 + 5 * (hash(&["weight", &q]) % 11);
                if hash(&["annotated", &q]).is_multiple_of(8) {
                    format!("{}. {q}", k + 1)
                } else {
                    format!("{}. {q} (weight: {w}/100)", k + 1)
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn free_text(model: &str, prompt: &str, seed: &str, i: usize) -> String {
        let h = hash(&["free", model, prompt, seed, &i.to_string()]);
        let len = 12 + (h % 40) as usize;
        let mut words: Vec<&str> = (0..len)
            .map(|k| WORDS[(hash(&[&h.to_string(), &k.to_string()]) % WORDS.len() as u64) as usize])
            .collect();
        if h.is_multiple_of(3) {
            words.insert(0, "1.");
        }
        let mut text = words.join(" ");
        if h.is_multiple_of(2) {
            text.push('.');
        }
        text
    }
}

#[async_trait]
impl CompletionBackend for SimulatedTeacher {
    fn supports_n(&self) -> bool {
        self.supports_n
    }

    async fn complete(&self, request: &TeacherRequest) -> Result<Vec<String>, BackendError> {
        if !self.supports_n && request.n > 1 {
            return Err(BackendError::Fatal("n > 1 not supported".into()));
        }
        // Classify by the original prompt; later user turns are reprompts.
        let mut user_turns = request.messages.iter().filter(|m| m.role == Role::User);
        let prompt = user_turns.next().map_or("", |m| m.content.as_str());
        let reprompted = user_turns.next().is_some();
        let seed = request
            .seed
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        let sampling = format!("{seed}/{}/{}", request.temperature, request.top_p);
        let out = (0..request.n as usize)
            .map(|i| match classify(prompt) {
                PromptKind::Judge | PromptKind::QualityMetric => Self::judge(prompt, &sampling, i),
                PromptKind::Verifier => Self::verifier(prompt, reprompted),
                PromptKind::Checklist => Self::checklist(prompt, &sampling, reprompted),
                PromptKind::Compare => {
                    let first = section(prompt, "Checklist 1:\n", "\n\nChecklist 2:");
                    let second = section(prompt, "Checklist 2:\n", "\n\nAnswer");
                    // Prefers the longer checklist, with an order-dependent wobble.
                    let pick = match first.len().cmp(&second.len()) {
                        std::cmp::Ordering::Greater => 1,
                        std::cmp::Ordering::Less => 2,
                        std::cmp::Ordering::Equal => 1 + (hash(&[first]) % 2),
                    };
                    pick.to_string()
                }
                PromptKind::Free => Self::free_text(&request.model, prompt, &sampling, i),
            })
            .collect();
        Ok(out)
    }
}
