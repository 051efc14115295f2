//! Pipeline configuration, loaded from a TOML file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical::to_canonical_string;
use crate::model::ChecklistMethod;
use crate::pairs::FilterStrategy;
use crate::prompts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Judge completions sampled per (response, requirement) cell.
    pub judge_sample_count: u32,
    pub judge_temperature: f64,
    pub response_temperature: f64,
    pub response_top_p: f64,
    /// Fraction of formed pairs kept by the retention filter, in (0, 1].
    pub retention_fraction: f64,
    pub filter_strategy: FilterStrategy,
    /// Candidate models for candidate-based checklists, weakest first.
    pub candidate_model_set: Vec<String>,
    pub teacher_model: String,
    /// Policy whose response pairs are scored and mined.
    pub policy_model: String,
    pub sandbox_timeout_ms: u64,
    pub sandbox_memory_limit_mb: u64,
    /// Command that starts a sandbox child. Without one, no verification
    /// program is executed and every program result is absent.
    pub sandbox_command: Option<Vec<String>>,

    pub checklist_method: ChecklistMethod,
    pub checklist_temperature: f64,
    pub max_checklist_items: usize,
    /// Candidate responses are cut to this many characters in the prompt.
    pub candidate_max_chars: usize,
    /// Passed to seedable endpoints on every request.
    pub seed: u64,

    pub gateway: GatewayConfig,
    pub ingest: IngestConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub max_concurrency: usize,
    /// Whether the endpoint honours `n`; otherwise n-sampling is emulated.
    pub supports_n: bool,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
    pub request_timeout_ms: u64,
    pub max_tokens_checklist: u32,
    pub max_tokens_candidate: u32,
    pub max_tokens_response: u32,
    pub max_tokens_judge: u32,
    pub max_tokens_verifier: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Keep only records tagged with this language; untagged records pass.
    pub language: Option<String>,
    pub max_turns: u32,
    pub exclude_toxic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            judge_sample_count: 25,
            judge_temperature: 1.3,
            response_temperature: 1.3,
            response_top_p: 0.9,
            retention_fraction: 0.40,
            filter_strategy: FilterStrategy::MaxSingleAspect,
            candidate_model_set: vec![
                "Qwen2.5-0.5B".into(),
                "Qwen2.5-1.5B".into(),
                "Qwen2.5-3B".into(),
                "Qwen2.5-7B".into(),
            ],
            teacher_model: "Qwen2.5-72B-Instruct".into(),
            policy_model: "Qwen2.5-7B-Instruct".into(),
            sandbox_timeout_ms: 2000,
            sandbox_memory_limit_mb: 256,
            sandbox_command: None,
            checklist_method: ChecklistMethod::CandidateBased,
            checklist_temperature: 0.7,
            max_checklist_items: 12,
            candidate_max_chars: 2048,
            seed: 0,
            gateway: GatewayConfig::default(),
            ingest: IngestConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_concurrency: 16,
            supports_n: true,
            retry_attempts: 3,
            retry_base_delay_ms: 500,
            request_timeout_ms: 120_000,
            max_tokens_checklist: 1024,
            max_tokens_candidate: 1024,
            max_tokens_response: 2048,
            max_tokens_judge: 16,
            max_tokens_verifier: 1024,
        }
    }
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            language: Some("en".into()),
            max_turns: 2,
            exclude_toxic: true,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            work_dir: PathBuf::from("work"),
        }
    }
}

/// A single invalid field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldIssue>),
}

impl PipelineConfig {
    /// Reads, parses and validates a config file. Relative paths inside it
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.paths.corpus = resolve(base, &config.paths.corpus);
        config.paths.work_dir = resolve(base, &config.paths.work_dir);
        config.validate().map_err(ConfigError::Invalid)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Vec<FieldIssue>> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: String| {
            if !ok {
                issues.push(FieldIssue { field, message });
            }
        };
        check(
            self.judge_sample_count >= 1,
            "judge_sample_count",
            "must be a positive integer".into(),
        );
        check(
            self.judge_temperature.is_finite() && self.judge_temperature >= 0.0,
            "judge_temperature",
            format!(
                "must be a non-negative number, got {}",
                self.judge_temperature
            ),
        );
        check(
            self.response_temperature.is_finite() && self.response_temperature >= 0.0,
            "response_temperature",
            format!(
                "must be a non-negative number, got {}",
                self.response_temperature
            ),
        );
        check(
            self.response_top_p > 0.0 && self.response_top_p <= 1.0,
            "response_top_p",
            format!("must be in (0, 1], got {}", self.response_top_p),
        );
        check(
            self.retention_fraction > 0.0 && self.retention_fraction <= 1.0,
            "retention_fraction",
            format!("must be in (0, 1], got {}", self.retention_fraction),
        );
        check(
            self.checklist_method != ChecklistMethod::CandidateBased
                || self.candidate_model_set.len() >= 2,
            "candidate_model_set",
            "candidate-based checklists need at least two candidate models".into(),
        );
        check(
            self.candidate_model_set
                .iter()
                .all(|m| !m.trim().is_empty()),
            "candidate_model_set",
            "model identifiers must not be empty".into(),
        );
        check(
            !self.teacher_model.trim().is_empty(),
            "teacher_model",
            "must not be empty".into(),
        );
        check(
            !self.policy_model.trim().is_empty(),
            "policy_model",
            "must not be empty".into(),
        );
        check(
            self.sandbox_timeout_ms > 0,
            "sandbox_timeout_ms",
            "must be a positive integer".into(),
        );
        check(
            self.sandbox_memory_limit_mb > 0,
            "sandbox_memory_limit_mb",
            "must be a positive integer".into(),
        );
        check(
            self.sandbox_command.as_ref().is_none_or(|c| !c.is_empty()),
            "sandbox_command",
            "must name a program when set".into(),
        );
        check(
            self.checklist_temperature.is_finite() && self.checklist_temperature >= 0.0,
            "checklist_temperature",
            format!(
                "must be a non-negative number, got {}",
                self.checklist_temperature
            ),
        );
        check(
            self.max_checklist_items >= 1,
            "max_checklist_items",
            "must be a positive integer".into(),
        );
        check(
            self.candidate_max_chars >= 1,
            "candidate_max_chars",
            "must be a positive integer".into(),
        );
        check(
            self.gateway.max_concurrency >= 1,
            "gateway.max_concurrency",
            "must be a positive integer".into(),
        );
        check(
            self.gateway.retry_attempts >= 1,
            "gateway.retry_attempts",
            "must be a positive integer".into(),
        );
        check(
            self.ingest.max_turns >= 1,
            "ingest.max_turns",
            "must be a positive integer".into(),
        );
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// Hash over every config field and every prompt template.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(
            to_canonical_string(self)
                .expect("validated config is finite")
                .as_bytes(),
        );
        for (name, hash) in prompts::template_hashes() {
            hasher.update(b"\n");
            hasher.update(name.as_bytes());
            hasher.update(b"=");
            hasher.update(hash.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn instructions_path(&self) -> PathBuf {
        self.paths.work_dir.join("instructions.jsonl")
    }
    pub fn checklists_path(&self) -> PathBuf {
        self.paths.work_dir.join("checklists.jsonl")
    }
    pub fn verified_checklists_path(&self) -> PathBuf {
        self.paths.work_dir.join("verified_checklists.jsonl")
    }
    pub fn responses_path(&self) -> PathBuf {
        self.paths.work_dir.join("responses.jsonl")
    }
    pub fn scores_path(&self) -> PathBuf {
        self.paths.work_dir.join("scores.jsonl")
    }
    pub fn pairs_path(&self) -> PathBuf {
        self.paths.work_dir.join("pairs.jsonl")
    }
    pub fn preferences_path(&self) -> PathBuf {
        self.paths.work_dir.join("preferences.jsonl")
    }
    pub fn mine_summary_path(&self) -> PathBuf {
        self.paths.work_dir.join("mine_summary.json")
    }
    pub fn eval_report_path(&self) -> PathBuf {
        self.paths.work_dir.join("eval_report.json")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.paths.work_dir.join("manifest.json")
    }
    pub fn warnings_path(&self, stage: &str) -> PathBuf {
        self.paths
            .work_dir
            .join("warnings")
            .join(format!("{stage}.jsonl"))
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_values() {
        let c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.judge_sample_count, 25);
        assert_eq!(c.judge_temperature, 1.3);
        assert_eq!(c.response_temperature, 1.3);
        assert_eq!(c.response_top_p, 0.9);
        assert_eq!(c.retention_fraction, 0.40);
        assert_eq!(c.candidate_model_set.len(), 4);
    }

    #[test]
    fn invalid_fields_are_named() {
        let c = PipelineConfig {
            retention_fraction: 0.0,
            judge_sample_count: 0,
            ..Default::default()
        };
        let issues = c.validate().unwrap_err();
        let fields: Vec<_> = issues.iter().map(|i| i.field).collect();
        assert_eq!(fields, vec!["judge_sample_count", "retention_fraction"]);
    }

    #[test]
    fn load_resolves_relative_paths_and_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forge.toml");
        std::fs::write(
            &path,
            "judge_sample_count = 5\nfilter_strategy = \"overall_score\"\n[paths]\ncorpus = \"raw.jsonl\"\nwork_dir = \"out\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.judge_sample_count, 5);
        assert_eq!(c.filter_strategy, FilterStrategy::OverallScore);
        assert_eq!(c.paths.corpus, dir.path().join("raw.jsonl"));

        std::fs::write(&path, "judge_samples = 5\n").unwrap();
        assert!(matches!(
            PipelineConfig::load(&path),
            Err(ConfigError::Parse { .. })
        ));
        std::fs::write(&path, "retention_fraction = 1.5\n").unwrap();
        let err = PipelineConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("retention_fraction"));
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = PipelineConfig::default();
        let h = base.config_hash();
        assert_eq!(h, PipelineConfig::default().config_hash());
        let mut changed = base.clone();
        changed.judge_sample_count = 5;
        assert_ne!(h, changed.config_hash());
        let mut changed = base.clone();
        changed.gateway.max_tokens_judge = 17;
        assert_ne!(h, changed.config_hash());
        let mut changed = base;
        changed.ingest.language = None;
        assert_ne!(h, changed.config_hash());
    }
}
