use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_serialize, CanonicalError};

/// One recorded exchange with a model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTranscript {
    pub request_fingerprint: String,
    pub completions: Vec<String>,
    pub latency_ms: u64,
    /// Unix epoch milliseconds.
    pub recorded_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("transcript store {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("transcript store {path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Encode(#[from] CanonicalError),
}

struct Inner {
    transcripts: HashMap<String, TeacherTranscript>,
    writer: Option<File>,
}

/// Append-only transcript file keyed by request fingerprint.
///
/// Later lines win when a fingerprint appears more than once. All access is
/// serialized through one lock.
pub struct TranscriptStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl TranscriptStore {
    /// Loads `path` if it exists; a missing file is an empty store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut transcripts = HashMap::new();
        match File::open(&path) {
            Ok(file) => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|source| StoreError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let t: TeacherTranscript =
                        serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                            path: path.clone(),
                            line: i + 1,
                            message: e.to_string(),
                        })?;
                    transcripts.insert(t.request_fingerprint.clone(), t);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(StoreError::Io { path, source }),
        }
        Ok(Self {
            path,
            inner: Mutex::new(Inner {
                transcripts,
                writer: None,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, fingerprint: &str) -> Option<TeacherTranscript> {
        self.inner
            .lock()
            .expect("store lock")
            .transcripts
            .get(fingerprint)
            .cloned()
    }

    /// Appends and flushes one transcript line.
    pub fn append(&self, transcript: TeacherTranscript) -> Result<(), StoreError> {
        let line = canonical_serialize(&transcript)?;
        let mut inner = self.inner.lock().expect("store lock");
        let io_err = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        if inner.writer.is_none() {
            if let Some(parent) = self.path.parent() {
                fs::create_dir_all(parent).map_err(io_err)?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err)?;
            inner.writer = Some(file);
        }
        let writer = inner.writer.as_mut().expect("writer opened above");
        writer.write_all(&line).map_err(io_err)?;
        writer.flush().map_err(io_err)?;
        inner
            .transcripts
            .insert(transcript.request_fingerprint.clone(), transcript);
        Ok(())
    }
}

pub(crate) fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
