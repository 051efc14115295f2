#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use checklist_forge::pipeline::{build_gateway, GatewayOptions, TeacherSource};
use checklist_forge::sandbox::NullExecutor;
use checklist_forge::{Pipeline, PipelineConfig};

pub const INSTRUCTIONS: [&str; 10] = [
    "Write a haiku about autumn leaves falling in a quiet park.",
    "Explain the difference between TCP and UDP in under 150 words.",
    "List three healthy breakfast ideas that contain no dairy.",
    "Translate 'Where is the train station?' into Spanish and French.",
    "Summarize the plot of Romeo and Juliet in exactly two sentences.",
    "Give me a Python one-liner that reverses a string.",
    "Draft a polite email declining a meeting invitation for Friday.",
    "What are the main causes of inflation? Answer with a bulleted list.",
    "Describe a sunset to someone who has never seen one, without using the word 'orange'.",
    "Recommend two board games for a family with young children and explain why.",
];

/// Ten usable records plus a few that the default filters drop.
pub fn write_corpus(dir: &Path) -> PathBuf {
    let mut lines: Vec<String> = INSTRUCTIONS
        .iter()
        .enumerate()
        .map(|(i, text)| {
            serde_json::json!({
                "id": format!("inst-{i:02}"),
                "turns": [{"role": "user", "content": text}, {"role": "assistant", "content": "..."}],
                "language": "en",
            })
            .to_string()
        })
        .collect();
    lines
        .push(r#"{"id":"es-1","turns":[{"role":"user","content":"Hola"}],"language":"es"}"#.into());
    lines.push(
        r#"{"id":"tox-1","turns":[{"role":"user","content":"be rude"}],"toxic":true}"#.into(),
    );
    lines.push(r#"{"id":"inst-03","turns":[{"role":"user","content":"duplicate id"}]}"#.into());
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

pub fn config(corpus: &Path, work_dir: &Path) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.paths.corpus = corpus.to_path_buf();
    config.paths.work_dir = work_dir.to_path_buf();
    config.gateway.max_concurrency = 8;
    config.gateway.retry_base_delay_ms = 0;
    config
}

pub fn pipeline(config: PipelineConfig, options: &GatewayOptions) -> Pipeline {
    let gateway = build_gateway(&config, options).unwrap();
    Pipeline::new(config, gateway, Arc::new(NullExecutor))
}

pub fn record_options(store: &Path) -> GatewayOptions {
    GatewayOptions {
        source: TeacherSource::Simulated,
        record: Some(store.to_path_buf()),
        replay: None,
    }
}

pub fn replay_options(store: &Path) -> GatewayOptions {
    GatewayOptions {
        source: TeacherSource::Endpoint,
        record: None,
        replay: Some(store.to_path_buf()),
    }
}

pub const OUTPUT_FILES: [&str; 8] = [
    "instructions.jsonl",
    "checklists.jsonl",
    "verified_checklists.jsonl",
    "responses.jsonl",
    "scores.jsonl",
    "pairs.jsonl",
    "preferences.jsonl",
    "mine_summary.json",
];

pub fn outputs(work_dir: &Path) -> BTreeMap<&'static str, Vec<u8>> {
    OUTPUT_FILES
        .iter()
        .map(|name| {
            (
                *name,
                std::fs::read(work_dir.join(name)).unwrap_or_default(),
            )
        })
        .collect()
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}
