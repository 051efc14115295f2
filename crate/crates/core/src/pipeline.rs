//! Stage orchestration, manifest bookkeeping and gateway setup.
//!
//! Each stage reads its upstream files from the work directory, writes its
//! outputs atomically and records a manifest entry. An entry stores a hash of
//! everything that determines the stage's output: the relevant config fields,
//! the templates it renders and the hashes of its upstream stages. A stage
//! whose entry matches and whose outputs are intact is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::canonical::{self, read_records, to_canonical_string, CanonicalError};
use crate::checklist::ChecklistGenerator;
use crate::config::{ConfigError, PipelineConfig};
use crate::eval::{build_report, ChecklistEvaluator, InstructionEval, Preference};
use crate::gateway::{
    Gateway, GatewayError, GatewayMetrics, GatewayMode, HttpBackend, RetryPolicy, TeacherRequest,
    TranscriptStore,
};
use crate::ingest::{default_filters, ingest, IngestError};
use crate::model::{
    question_form_warnings, validate_checklist, Checklist, ChecklistMethod, Instruction, Response,
    SamplerParams, ScoreMatrix, Slot,
};
use crate::pairs::{export_preferences, mine, ExportError};
use crate::prompts::{self, Template};
use crate::sandbox::{NullExecutor, ProgramExecutor, SubprocessExecutor};
use crate::scoring::{ScoreDiagnostics, Scorer};
use crate::sim::SimulatedTeacher;
use crate::verifier::{VerifierGenerator, VerifierStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Checklists,
    Verifiers,
    Responses,
    Score,
    Mine,
    EvalChecklists,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Checklists,
        Stage::Verifiers,
        Stage::Responses,
        Stage::Score,
        Stage::Mine,
        Stage::EvalChecklists,
    ];

    /// Stages run by `all`, in order. Checklist evaluation is separate.
    pub const MAIN: [Stage; 6] = [
        Stage::Ingest,
        Stage::Checklists,
        Stage::Verifiers,
        Stage::Responses,
        Stage::Score,
        Stage::Mine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Checklists => "checklists",
            Stage::Verifiers => "verifiers",
            Stage::Responses => "responses",
            Stage::Score => "score",
            Stage::Mine => "mine",
            Stage::EvalChecklists => "eval-checklists",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Checklists | Stage::Responses | Stage::EvalChecklists => &[Stage::Ingest],
            Stage::Verifiers => &[Stage::Checklists],
            Stage::Score => &[Stage::Verifiers, Stage::Responses],
            Stage::Mine => &[Stage::Score],
        }
    }

    fn depends_on(self, other: Stage) -> bool {
        self.upstream()
            .iter()
            .any(|u| *u == other || u.depends_on(other))
    }

    fn templates(self) -> Vec<Template> {
        match self {
            Stage::Ingest | Stage::Responses | Stage::Mine => vec![],
            Stage::Checklists => vec![
                prompts::CHECKLIST_DIRECT,
                prompts::CHECKLIST_CANDIDATES,
                prompts::CHECKLIST_REPROMPT,
            ],
            Stage::Verifiers => vec![prompts::VERIFIER, prompts::VERIFIER_REPROMPT],
            Stage::Score => vec![prompts::JUDGE],
            Stage::EvalChecklists => vec![
                prompts::CHECKLIST_DIRECT,
                prompts::CHECKLIST_CANDIDATES,
                prompts::CHECKLIST_REPROMPT,
                prompts::EVAL_NATURALNESS,
                prompts::EVAL_OBJECTIVENESS,
                prompts::EVAL_COMPREHENSIVENESS,
                prompts::EVAL_ATOMICITY,
                prompts::EVAL_COMPARE,
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage_hash: String,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    /// Output file, relative to the work directory, to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| {
                PipelineError::Stage(format!("unreadable manifest {}: {e}", path.display()))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(PipelineError::Io(path.to_path_buf(), e)),
        }
    }

    fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = to_canonical_string(self)?;
        text.push('\n');
        canonical::write_atomic(path, text.as_bytes())
            .map_err(|e| PipelineError::Io(path.to_path_buf(), e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error("stage {stage} needs {upstream} to be completed first with the current configuration")]
    MissingUpstream { stage: Stage, upstream: Stage },
    #[error("replay store is missing {0} transcripts")]
    ReplayIncomplete(u64),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Stage(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Setup(_) => 2,
            PipelineError::MissingUpstream { .. } => 3,
            _ => 1,
        }
    }
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherSource {
    /// The HTTP endpoint named by the environment.
    Endpoint,
    /// The built-in simulated teacher.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayOptions {
    pub source: TeacherSource,
    pub record: Option<PathBuf>,
    pub replay: Option<PathBuf>,
}

pub fn build_gateway(
    config: &PipelineConfig,
    options: &GatewayOptions,
) -> Result<Gateway, PipelineError> {
    let g = &config.gateway;
    let retry = RetryPolicy {
        attempts: g.retry_attempts,
        base_delay: Duration::from_millis(g.retry_base_delay_ms),
    };
    let open = |path: &Path| {
        TranscriptStore::open(path)
            .map_err(|e| PipelineError::Setup(format!("cannot open transcript store: {e}")))
    };
    if options.record.is_some() && options.replay.is_some() {
        return Err(PipelineError::Setup(
            "--record and --replay are mutually exclusive".into(),
        ));
    }
    if let Some(path) = &options.replay {
        return Ok(Gateway::replay(open(path)?, g.max_concurrency).with_retry(retry));
    }
    let backend: Arc<dyn crate::gateway::CompletionBackend> = match options.source {
        TeacherSource::Simulated if g.supports_n => Arc::new(SimulatedTeacher::new()),
        TeacherSource::Simulated => Arc::new(SimulatedTeacher::single_sample()),
        TeacherSource::Endpoint => Arc::new(
            HttpBackend::from_env(g.supports_n, Duration::from_millis(g.request_timeout_ms))
                .ok_or_else(|| {
                    PipelineError::Setup(format!(
                        "no teacher endpoint: set {} or use --replay",
                        crate::gateway::ENDPOINT_ENV
                    ))
                })?,
        ),
    };
    Ok(match &options.record {
        Some(path) => Gateway::record(backend, open(path)?, g.max_concurrency),
        None => Gateway::live(backend, g.max_concurrency),
    }
    .with_retry(retry))
}

pub fn build_executor(config: &PipelineConfig) -> Arc<dyn ProgramExecutor> {
    match &config.sandbox_command {
        Some(cmd) if !cmd.is_empty() => Arc::new(SubprocessExecutor::new(cmd.clone())),
        _ => Arc::new(NullExecutor),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    pub counts: BTreeMap<String, u64>,
    pub metrics: GatewayMetrics,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct Warning {
    instruction_id: String,
    message: String,
}

#[derive(Default)]
struct StageOutput {
    files: Vec<(PathBuf, Vec<u8>)>,
    counts: BTreeMap<String, u64>,
    warnings: Vec<Warning>,
}

impl StageOutput {
    fn count(&mut self, key: &str, n: u64) {
        *self.counts.entry(key.to_string()).or_default() += n;
    }

    fn warn(&mut self, id: &str, message: impl Into<String>) {
        self.warnings.push(Warning {
            instruction_id: id.to_string(),
            message: message.into(),
        });
    }

    fn records<T: Serialize>(&mut self, path: PathBuf, records: &[T]) -> Result<(), PipelineError> {
        let mut bytes = Vec::new();
        for r in records {
            bytes.extend(canonical::canonical_serialize(r)?);
        }
        self.files.push((path, bytes));
        Ok(())
    }

    fn document<T: Serialize>(&mut self, path: PathBuf, doc: &T) -> Result<(), PipelineError> {
        let mut text = to_canonical_string(doc)?;
        text.push('\n');
        self.files.push((path, text.into_bytes()));
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Option<String> {
    std::fs::read(path)
        .ok()
        .map(|b| hex::encode(Sha256::digest(&b)))
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    executor: Arc<dyn ProgramExecutor>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        gateway: Gateway,
        executor: Arc<dyn ProgramExecutor>,
    ) -> Self {
        Self {
            config,
            gateway,
            executor,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn workers(&self) -> usize {
        self.gateway.max_concurrency().max(1)
    }

    /// Config fields that affect a stage's output.
    fn stage_settings(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        let g = &c.gateway;
        let checklist = json!({
            "teacher_model": c.teacher_model,
            "checklist_method": c.checklist_method,
            "checklist_temperature": c.checklist_temperature,
            "max_checklist_items": c.max_checklist_items,
            "candidate_model_set": c.candidate_model_set,
            "candidate_max_chars": c.candidate_max_chars,
            "max_tokens_checklist": g.max_tokens_checklist,
            "max_tokens_candidate": g.max_tokens_candidate,
            "seed": c.seed,
        });
        match stage {
            Stage::Ingest => json!({
                "corpus": c.paths.corpus,
                "corpus_sha256": sha256_file(&c.paths.corpus),
                "ingest": c.ingest,
            }),
            Stage::Checklists => checklist,
            Stage::Verifiers => json!({
                "teacher_model": c.teacher_model,
                "max_tokens_verifier": g.max_tokens_verifier,
                "seed": c.seed,
            }),
            Stage::Responses => json!({
                "policy_model": c.policy_model,
                "response_temperature": c.response_temperature,
                "response_top_p": c.response_top_p,
                "max_tokens_response": g.max_tokens_response,
                "seed": c.seed,
            }),
            Stage::Score => json!({
                "teacher_model": c.teacher_model,
                "judge_sample_count": c.judge_sample_count,
                "judge_temperature": c.judge_temperature,
                "max_tokens_judge": g.max_tokens_judge,
                "sandbox_command": c.sandbox_command,
                "sandbox_timeout_ms": c.sandbox_timeout_ms,
                "sandbox_memory_limit_mb": c.sandbox_memory_limit_mb,
                "seed": c.seed,
            }),
            Stage::Mine => json!({
                "retention_fraction": c.retention_fraction,
                "filter_strategy": c.filter_strategy,
            }),
            Stage::EvalChecklists => json!({
                "checklist": checklist,
                "judge_sample_count": c.judge_sample_count,
                "judge_temperature": c.judge_temperature,
                "max_tokens_judge": g.max_tokens_judge,
            }),
        }
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut hasher = Sha256::new();
        hasher.update(stage.name().as_bytes());
        hasher.update(b"\n");
        hasher.update(canonical::value_to_canonical_string(&self.stage_settings(stage)).as_bytes());
        for t in stage.templates() {
            hasher.update(format!("\n{}={}", t.name, t.hash()).as_bytes());
        }
        for up in stage.upstream() {
            hasher.update(format!("\n{}={}", up.name(), self.stage_hash(*up)).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn entry_is_current(&self, stage: Stage, manifest: &Manifest) -> bool {
        let Some(entry) = manifest.stages.get(stage.name()) else {
            return false;
        };
        entry.stage_hash == self.stage_hash(stage)
            && entry.outputs.iter().all(|(name, hash)| {
                sha256_file(&self.config.paths.work_dir.join(name)).as_deref() == Some(hash)
            })
    }

    /// Runs every main stage in order; completed stages are skipped.
    pub async fn run_all(&self) -> Result<Vec<StageReport>, PipelineError> {
        let mut reports = Vec::new();
        for stage in Stage::MAIN {
            reports.push(self.run_stage(stage).await?);
        }
        Ok(reports)
    }

    pub async fn run_stage(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        let manifest_path = self.config.manifest_path();
        let mut manifest = Manifest::load(&manifest_path)?;
        for up in stage.upstream() {
            if !self.entry_is_current(*up, &manifest) {
                return Err(PipelineError::MissingUpstream {
                    stage,
                    upstream: *up,
                });
            }
        }
        let before = self.gateway.metrics();
        if self.entry_is_current(stage, &manifest) {
            tracing::info!(%stage, "outputs current, skipping");
            return Ok(StageReport {
                stage,
                skipped: true,
                counts: manifest.stages[stage.name()].counts.clone(),
                metrics: GatewayMetrics::default(),
            });
        }
        manifest.stages.retain(|name, _| {
            Stage::from_str(name).map_or(true, |s| s != stage && !s.depends_on(stage))
        });
        manifest.save(&manifest_path)?;

        tracing::info!(%stage, "running");
        let mut output = match stage {
            Stage::Ingest => self.ingest_stage()?,
            Stage::Checklists => self.checklists_stage().await?,
            Stage::Verifiers => self.verifiers_stage().await?,
            Stage::Responses => self.responses_stage().await?,
            Stage::Score => self.score_stage().await?,
            Stage::Mine => self.mine_stage()?,
            Stage::EvalChecklists => self.eval_stage().await?,
        };
        let metrics = self.gateway.metrics().since(&before);
        if self.gateway.mode() == GatewayMode::Replay && metrics.failures > 0 {
            return Err(PipelineError::ReplayIncomplete(metrics.failures));
        }

        let work_dir = &self.config.paths.work_dir;
        let mut outputs = BTreeMap::new();
        for (path, bytes) in &output.files {
            canonical::write_atomic(path, bytes).map_err(|e| PipelineError::Io(path.clone(), e))?;
            let name = path
                .strip_prefix(work_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            outputs.insert(name, hex::encode(Sha256::digest(bytes)));
        }
        output.warnings.sort();
        output.count("warnings", output.warnings.len() as u64);
        let warnings_path = self.config.warnings_path(stage.name());
        canonical::write_records(&warnings_path, &output.warnings)?;

        manifest.stages.insert(
            stage.name().to_string(),
            StageEntry {
                stage_hash: self.stage_hash(stage),
                config_hash: self.config.config_hash(),
                template_hashes: stage
                    .templates()
                    .iter()
                    .map(|t| (t.name.to_string(), t.hash()))
                    .collect(),
                outputs,
                counts: output.counts.clone(),
            },
        );
        manifest.save(&manifest_path)?;
        tracing::info!(%stage, ?metrics, "done");
        Ok(StageReport {
            stage,
            skipped: false,
            counts: output.counts,
            metrics,
        })
    }

    fn ingest_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let filters = default_filters(&self.config.ingest);
        let (instructions, report) = ingest(&self.config.paths.corpus, &filters)?;
        out.count("lines", report.lines as u64);
        out.count("instructions", report.kept as u64);
        out.count("duplicates", report.duplicates as u64);
        out.count("malformed", report.malformed.len() as u64);
        for (name, n) in &report.rejected {
            out.count(&format!("rejected_{name}"), *n as u64);
        }
        for line in &report.malformed {
            out.warn("", format!("corpus line {line} is not a valid record"));
        }
        out.records(self.config.instructions_path(), &instructions)?;
        Ok(out)
    }

    async fn checklists_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let instructions: Vec<Instruction> = read_records(&self.config.instructions_path())?;
        let generator = ChecklistGenerator::new(&self.gateway, (&self.config).into());
        let method = self.config.checklist_method;
        let results: Vec<_> = stream::iter(&instructions)
            .map(|inst| {
                let generator = &generator;
                async move { (inst, generator.generate(inst, method).await) }
            })
            .buffered(self.workers())
            .collect()
            .await;

        let mut checklists = Vec::new();
        out.count("instructions", instructions.len() as u64);
        for (inst, result) in results {
            match result {
                Ok(generated) => {
                    let violations = validate_checklist(&generated.checklist);
                    if !violations.is_empty() {
                        out.count("invalid", 1);
                        for v in violations {
                            out.warn(&inst.id, format!("dropped invalid checklist: {v}"));
                        }
                        continue;
                    }
                    for w in generated.warnings {
                        out.warn(&inst.id, w);
                    }
                    for v in question_form_warnings(&generated.checklist) {
                        out.warn(&inst.id, v.to_string());
                    }
                    out.count(
                        "requirements",
                        generated.checklist.requirements.len() as u64,
                    );
                    checklists.push(generated.checklist);
                }
                Err(e) => {
                    out.count("failed", 1);
                    out.warn(&inst.id, e.to_string());
                }
            }
        }
        out.count("checklists", checklists.len() as u64);
        checklists.sort_by(|a, b| a.instruction_id.cmp(&b.instruction_id));
        out.records(self.config.checklists_path(), &checklists)?;
        Ok(out)
    }

    async fn verifiers_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let instructions = self.instruction_map()?;
        let checklists: Vec<Checklist> = read_records(&self.config.checklists_path())?;
        let generator = VerifierGenerator::new(&self.gateway, (&self.config).into());

        let results: Vec<_> = stream::iter(checklists)
            .map(|mut checklist| {
                let generator = &generator;
                let instruction = instructions.get(&checklist.instruction_id).cloned();
                async move {
                    let Some(instruction) = instruction else {
                        return (
                            checklist,
                            Err("checklist has no matching instruction".to_string()),
                        );
                    };
                    let targets: Vec<usize> = (0..checklist.requirements.len())
                        .filter(|i| !checklist.requirements[*i].is_universal())
                        .collect();
                    let outcomes = futures::future::join_all(targets.iter().map(|i| {
                        generator.generate_verifier(&instruction, &checklist.requirements[*i])
                    }))
                    .await;
                    let mut notes = Vec::new();
                    for (i, outcome) in targets.into_iter().zip(outcomes) {
                        let req = &mut checklist.requirements[i];
                        match outcome {
                            Ok(o) => {
                                notes.extend(
                                    o.warnings
                                        .iter()
                                        .map(|w| (format!("req {}: {w}", req.index), None)),
                                );
                                notes.push((String::new(), Some(o.status)));
                                req.verifier_source = o.source;
                            }
                            Err(e) => notes.push((
                                format!("req {}: {e}; judged without program", req.index),
                                None,
                            )),
                        }
                    }
                    (checklist, Ok(notes))
                }
            })
            .buffered(self.workers())
            .collect()
            .await;

        let mut verified = Vec::new();
        for (checklist, result) in results {
            match result {
                Ok(notes) => {
                    for (message, status) in notes {
                        match status {
                            Some(VerifierStatus::Program) => out.count("programs", 1),
                            Some(VerifierStatus::Deferred) => out.count("deferred", 1),
                            Some(VerifierStatus::Rejected) => out.count("rejected", 1),
                            Some(VerifierStatus::Malformed) => out.count("malformed", 1),
                            None => out.warn(&checklist.instruction_id, message),
                        }
                    }
                    verified.push(checklist);
                }
                Err(message) => {
                    out.count("orphaned", 1);
                    out.warn(&checklist.instruction_id, message);
                }
            }
        }
        verified.sort_by(|a, b| a.instruction_id.cmp(&b.instruction_id));
        out.count("checklists", verified.len() as u64);
        out.records(self.config.verified_checklists_path(), &verified)?;
        Ok(out)
    }

    async fn responses_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let instructions: Vec<Instruction> = read_records(&self.config.instructions_path())?;
        let c = &self.config;
        let sampler = SamplerParams {
            temperature: c.response_temperature,
            top_p: c.response_top_p,
        };
        let results: Vec<_> = stream::iter(&instructions)
            .map(|inst| {
                let request = TeacherRequest::new(c.policy_model.clone(), inst.text.clone())
                    .temperature(sampler.temperature)
                    .top_p(sampler.top_p)
                    .n(2)
                    .max_tokens(c.gateway.max_tokens_response)
                    .seed(Some(c.seed));
                async move { (inst, self.gateway.complete(&request).await) }
            })
            .buffered(self.workers())
            .collect()
            .await;

        let mut responses = Vec::new();
        for (inst, result) in results {
            match result {
                Ok(texts) => {
                    for (slot, text) in Slot::BOTH.into_iter().zip(texts) {
                        responses.push(Response {
                            instruction_id: inst.id.clone(),
                            slot,
                            text,
                            sampler,
                        });
                    }
                }
                Err(e) => {
                    out.count("failed", 1);
                    out.warn(&inst.id, e.to_string());
                }
            }
        }
        responses.sort_by(|a, b| (&a.instruction_id, a.slot).cmp(&(&b.instruction_id, b.slot)));
        out.count("responses", responses.len() as u64);
        out.records(self.config.responses_path(), &responses)?;
        Ok(out)
    }

    async fn score_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let instructions: Vec<Instruction> = read_records(&self.config.instructions_path())?;
        let checklists: BTreeMap<String, Checklist> =
            read_records::<Checklist>(&self.config.verified_checklists_path())?
                .into_iter()
                .map(|c| (c.instruction_id.clone(), c))
                .collect();
        let mut responses: BTreeMap<String, Vec<Response>> = BTreeMap::new();
        for r in read_records::<Response>(&self.config.responses_path())? {
            responses
                .entry(r.instruction_id.clone())
                .or_default()
                .push(r);
        }
        let scorer = Scorer::new(&self.gateway, self.executor.as_ref(), (&self.config).into());

        let mut jobs = Vec::new();
        for inst in &instructions {
            match (checklists.get(&inst.id), responses.get(&inst.id)) {
                (Some(c), Some(r)) => jobs.push((inst, c, r)),
                (None, _) => {
                    out.count("skipped", 1);
                    out.warn(&inst.id, "no checklist; not scored");
                }
                (_, None) => {
                    out.count("skipped", 1);
                    out.warn(&inst.id, "no responses; not scored");
                }
            }
        }
        let results: Vec<_> = stream::iter(jobs)
            .map(|(inst, checklist, resp)| {
                let scorer = &scorer;
                async move { (inst, scorer.score_instruction(inst, checklist, resp).await) }
            })
            .buffered(self.workers())
            .collect()
            .await;

        let mut matrices: Vec<ScoreMatrix> = Vec::new();
        let mut diagnostics = ScoreDiagnostics::default();
        for (inst, result) in results {
            match result {
                Ok((matrix, diag)) => {
                    diagnostics.absorb(&diag);
                    out.count("cells", matrix.cells.len() as u64);
                    matrices.push(matrix);
                }
                Err(e) => {
                    out.count("skipped", 1);
                    out.warn(&inst.id, e.to_string());
                }
            }
        }
        out.count("scored", matrices.len() as u64);
        out.count("judge_failures", diagnostics.judge_failures);
        out.count("discarded_samples", diagnostics.discarded_samples);
        out.count("missing_cells", diagnostics.missing_cells);
        out.count("program_runs", diagnostics.program_runs);
        out.count("program_errors", diagnostics.program_errors);
        matrices.sort_by(|a, b| a.instruction_id.cmp(&b.instruction_id));
        out.records(self.config.scores_path(), &matrices)?;
        Ok(out)
    }

    fn mine_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let matrices: Vec<ScoreMatrix> = read_records(&self.config.scores_path())?;
        let instructions: Vec<Instruction> = read_records(&self.config.instructions_path())?;
        let responses: Vec<Response> = read_records(&self.config.responses_path())?;
        let (pairs, summary) = mine(
            &matrices,
            self.config.filter_strategy,
            self.config.retention_fraction,
        );
        let records = export_preferences(&pairs, &instructions, &responses)?;
        out.count("pairs", pairs.len() as u64);
        out.count("retained", records.len() as u64);
        for (reason, n) in &summary.unpaired {
            let key = serde_json::to_value(reason)
                .ok()
                .and_then(|v| v.as_str().map(String::from));
            out.count(&format!("unpaired_{}", key.unwrap_or_default()), *n as u64);
        }
        out.records(self.config.pairs_path(), &pairs)?;
        out.records(self.config.preferences_path(), &records)?;
        out.document(self.config.mine_summary_path(), &summary)?;
        Ok(out)
    }

    async fn eval_stage(&self) -> Result<StageOutput, PipelineError> {
        let mut out = StageOutput::default();
        let instructions: Vec<Instruction> = read_records(&self.config.instructions_path())?;
        let generator = ChecklistGenerator::new(&self.gateway, (&self.config).into());
        let evaluator = ChecklistEvaluator::new(&self.gateway, (&self.config).into());

        let results: Vec<_> = stream::iter(&instructions)
            .map(|inst| {
                let (generator, evaluator) = (&generator, &evaluator);
                async move {
                    let (direct, candidate) = futures::join!(
                        generator.generate(inst, ChecklistMethod::Direct),
                        generator.generate(inst, ChecklistMethod::CandidateBased)
                    );
                    let (direct, candidate) = (
                        direct.map_err(|e| e.to_string())?,
                        candidate.map_err(|e| e.to_string())?,
                    );
                    let (d, c) = (&direct.checklist, &candidate.checklist);
                    let (qd, qc, pref) = futures::join!(
                        evaluator.score_checklist_quality(inst, d),
                        evaluator.score_checklist_quality(inst, c),
                        evaluator.compare_checklists(inst, d, c)
                    );
                    let quality = BTreeMap::from([
                        (ChecklistMethod::Direct, qd.map_err(|e| e.to_string())?),
                        (
                            ChecklistMethod::CandidateBased,
                            qc.map_err(|e| e.to_string())?,
                        ),
                    ]);
                    let preferred = match pref.map_err(|e| e.to_string())? {
                        Preference::First => Some(ChecklistMethod::Direct),
                        Preference::Second => Some(ChecklistMethod::CandidateBased),
                        Preference::Tie => None,
                    };
                    Ok::<_, String>(InstructionEval {
                        instruction_id: inst.id.clone(),
                        quality,
                        preferred,
                    })
                }
            })
            .buffered(self.workers())
            .collect()
            .await;

        let mut evals = Vec::new();
        for (inst, result) in instructions.iter().zip(results) {
            match result {
                Ok(e) => evals.push(e),
                Err(message) => {
                    out.count("failed", 1);
                    out.warn(&inst.id, message);
                }
            }
        }
        out.count("evaluated", evals.len() as u64);
        out.document(self.config.eval_report_path(), &build_report(evals))?;
        Ok(out)
    }

    fn instruction_map(&self) -> Result<BTreeMap<String, Instruction>, PipelineError> {
        Ok(
            read_records::<Instruction>(&self.config.instructions_path())?
                .into_iter()
                .map(|i| (i.id.clone(), i))
                .collect(),
        )
    }
}
