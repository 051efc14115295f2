//! Parent side of the program-execution protocol.
//!
//! A sandbox child is started per program. The parent writes one preamble
//! line followed by the raw program source, then one request line per
//! response; the child answers each request with one verdict line. Closing
//! stdin ends the child. Isolation itself is the child's job.

use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

use crate::model::ProgramResult;

pub const STDERR_LIMIT: usize = 2048;
pub const DEFAULT_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preamble {
    pub program_id: String,
    pub source_bytes: usize,
    pub timeout_ms: u64,
    pub memory_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub program_id: String,
    pub response_id: String,
    pub response_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxVerdict {
    pub response_id: String,
    pub status: VerdictStatus,
    #[serde(default)]
    pub detail: Option<String>,
    #[serde(default)]
    pub wall_ms: u64,
}

impl SandboxVerdict {
    fn local(response_id: &str, status: VerdictStatus, detail: impl Into<String>) -> Self {
        Self {
            response_id: response_id.to_string(),
            status,
            detail: Some(truncate(detail.into(), STDERR_LIMIT)),
            wall_ms: 0,
        }
    }

    pub fn program_result(&self) -> ProgramResult {
        match self.status {
            VerdictStatus::Pass => ProgramResult::Pass,
            VerdictStatus::Fail => ProgramResult::Fail,
            VerdictStatus::Error | VerdictStatus::Timeout => ProgramResult::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SandboxLimits {
    pub timeout_ms: u64,
    pub memory_mb: u64,
}

/// One response to run a program against.
#[derive(Debug, Clone, Copy)]
pub struct ProgramInput<'a> {
    pub response_id: &'a str,
    pub text: &'a str,
}

#[async_trait]
pub trait ProgramExecutor: Send + Sync {
    /// Runs `source` once per input. `None` means the program was never
    /// executed for that input.
    async fn execute(
        &self,
        program_id: &str,
        source: &str,
        inputs: &[ProgramInput<'_>],
        limits: SandboxLimits,
    ) -> Vec<Option<SandboxVerdict>>;
}

/// Executor for runs without a sandbox: every result is absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullExecutor;

#[async_trait]
impl ProgramExecutor for NullExecutor {
    async fn execute(
        &self,
        _program_id: &str,
        _source: &str,
        inputs: &[ProgramInput<'_>],
        _limits: SandboxLimits,
    ) -> Vec<Option<SandboxVerdict>> {
        vec![None; inputs.len()]
    }
}

/// Talks to a sandbox child started from `command`.
#[derive(Debug, Clone)]
pub struct SubprocessExecutor {
    command: Vec<String>,
    grace: Duration,
}

impl SubprocessExecutor {
    pub fn new(command: Vec<String>) -> Self {
        assert!(!command.is_empty(), "sandbox command must name a program");
        Self {
            command,
            grace: DEFAULT_GRACE,
        }
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    stderr: Arc<Mutex<Vec<u8>>>,
}

impl Session {
    async fn start(command: &[String], preamble: &Preamble, source: &str) -> std::io::Result<Self> {
        let mut cmd = Command::new(&command[0]);
        cmd.args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .process_group(0);
        let mut child = cmd.spawn()?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&stderr);
        tokio::spawn(async move {
            let mut chunk = [0u8; 1024];
            while let Ok(n) = stderr_pipe.read(&mut chunk).await {
                if n == 0 {
                    break;
                }
                let mut buf = sink.lock().unwrap();
                let room = STDERR_LIMIT.saturating_sub(buf.len());
                buf.extend_from_slice(&chunk[..n.min(room)]);
            }
        });
        let mut head = serde_json::to_vec(preamble).expect("preamble serializes");
        head.push(b'\n');
        head.extend_from_slice(source.as_bytes());
        head.push(b'\n');
        stdin.write_all(&head).await?;
        stdin.flush().await?;
        Ok(Self {
            child,
            stdin,
            stdout,
            stderr,
        })
    }

    async fn ask(&mut self, request: &ExecRequest) -> std::io::Result<Option<String>> {
        let mut line = serde_json::to_vec(request).expect("request serializes");
        line.push(b'\n');
        self.stdin.write_all(&line).await?;
        self.stdin.flush().await?;
        let mut reply = String::new();
        let read = self.stdout.read_line(&mut reply).await?;
        Ok((read > 0).then_some(reply))
    }

    fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr.lock().unwrap()).into_owned()
    }

    /// Kills the whole process group so grandchildren go too.
    fn kill(&mut self) {
        if let Some(pid) = self.child.id() {
            // SAFETY: signalling a process group we created has no memory effects.
            unsafe {
                libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
            }
        }
        let _ = self.child.start_kill();
    }

    async fn finish(mut self, grace: Duration) {
        drop(self.stdin);
        if tokio::time::timeout(grace, self.child.wait())
            .await
            .is_err()
        {
            if let Some(pid) = self.child.id() {
                // SAFETY: as in `kill`.
                unsafe {
                    libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
                }
            }
            let _ = self.child.kill().await;
        }
    }
}

#[async_trait]
impl ProgramExecutor for SubprocessExecutor {
    async fn execute(
        &self,
        program_id: &str,
        source: &str,
        inputs: &[ProgramInput<'_>],
        limits: SandboxLimits,
    ) -> Vec<Option<SandboxVerdict>> {
        let preamble = Preamble {
            program_id: program_id.to_string(),
            source_bytes: source.len(),
            timeout_ms: limits.timeout_ms,
            memory_mb: limits.memory_mb,
        };
        let deadline = Duration::from_millis(limits.timeout_ms) + self.grace;
        let mut verdicts = Vec::with_capacity(inputs.len());
        let mut session: Option<Session> = None;

        for input in inputs {
            if session.is_none() {
                match Session::start(&self.command, &preamble, source).await {
                    Ok(s) => session = Some(s),
                    Err(e) => {
                        verdicts.push(Some(SandboxVerdict::local(
                            input.response_id,
                            VerdictStatus::Error,
                            format!("sandbox failed to start: {e}"),
                        )));
                        continue;
                    }
                }
            }
            let s = session.as_mut().expect("session started above");
            let request = ExecRequest {
                program_id: program_id.to_string(),
                response_id: input.response_id.to_string(),
                response_text: input.text.to_string(),
            };
            let verdict = match tokio::time::timeout(deadline, s.ask(&request)).await {
                Ok(Ok(Some(line))) => match serde_json::from_str::<SandboxVerdict>(line.trim_end())
                {
                    Ok(v) if v.response_id == input.response_id => {
                        let detail = v.detail.map(|d| truncate(d, STDERR_LIMIT));
                        SandboxVerdict { detail, ..v }
                    }
                    Ok(v) => {
                        s.kill();
                        session = None;
                        SandboxVerdict::local(
                            input.response_id,
                            VerdictStatus::Error,
                            format!("verdict for unexpected response `{}`", v.response_id),
                        )
                    }
                    Err(e) => {
                        s.kill();
                        session = None;
                        SandboxVerdict::local(
                            input.response_id,
                            VerdictStatus::Error,
                            format!("unreadable verdict: {e}"),
                        )
                    }
                },
                Ok(Ok(None)) | Ok(Err(_)) => {
                    // The child died mid-request; give its stderr a moment to drain.
                    let _ = tokio::time::timeout(Duration::from_millis(200), s.child.wait()).await;
                    let detail = format!("sandbox exited: {}", s.stderr_text().trim());
                    s.kill();
                    session = None;
                    SandboxVerdict::local(input.response_id, VerdictStatus::Error, detail)
                }
                Err(_) => {
                    s.kill();
                    session = None;
                    SandboxVerdict::local(
                        input.response_id,
                        VerdictStatus::Timeout,
                        format!("no verdict within {} ms", deadline.as_millis()),
                    )
                }
            };
            verdicts.push(Some(verdict));
        }
        if let Some(s) = session {
            s.finish(self.grace).await;
        }
        verdicts
    }
}

fn truncate(mut text: String, limit: usize) -> String {
    if text.len() > limit {
        let mut cut = limit;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        text.truncate(cut);
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn null_executor_is_always_absent() {
        let inputs = [
            ProgramInput {
                response_id: "a",
                text: "x",
            },
            ProgramInput {
                response_id: "b",
                text: "y",
            },
        ];
        let limits = SandboxLimits {
            timeout_ms: 10,
            memory_mb: 1,
        };
        let out = NullExecutor
            .execute("p", "def f(t):\n    return True", &inputs, limits)
            .await;
        assert_eq!(out, vec![None, None]);
    }

    #[test]
    fn verdict_wire_format() {
        let v: SandboxVerdict = serde_json::from_str(
            r#"{"response_id":"i/A","status":"timeout","detail":null,"wall_ms":2500}"#,
        )
        .unwrap();
        assert_eq!(v.status, VerdictStatus::Timeout);
        assert_eq!(v.program_result(), ProgramResult::Error);
        let pass: SandboxVerdict =
            serde_json::from_str(r#"{"response_id":"x","status":"pass"}"#).unwrap();
        assert_eq!(pass.program_result(), ProgramResult::Pass);
        assert!(
            serde_json::from_str::<SandboxVerdict>(r#"{"response_id":"x","status":"maybe"}"#)
                .is_err()
        );
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let text = "é".repeat(STDERR_LIMIT);
        let cut = truncate(text, STDERR_LIMIT);
        assert!(cut.len() <= STDERR_LIMIT);
        assert_eq!(cut.chars().count(), STDERR_LIMIT / 2);
    }
}
