use std::time::{Duration, Instant};

use checklist_forge::sandbox::{
    ProgramExecutor, ProgramInput, SandboxLimits, SubprocessExecutor, VerdictStatus,
};

fn executor() -> SubprocessExecutor {
    let script = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/fake_sandbox.py"
    );
    SubprocessExecutor::new(vec!["python3".into(), script.into()])
        .with_grace(Duration::from_millis(300))
}

const LIMITS: SandboxLimits = SandboxLimits {
    timeout_ms: 700,
    memory_mb: 256,
};

const ARABIC: &str = "def verify_requirement(text):\n    return any(('\\u0600' <= char <= '\\u06FF') for char in text)";

fn inputs<'a>(texts: &'a [&'a str], ids: &'a [String]) -> Vec<ProgramInput<'a>> {
    texts
        .iter()
        .zip(ids)
        .map(|(t, id)| ProgramInput {
            response_id: id,
            text: t,
        })
        .collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

#[tokio::test]
async fn pass_and_fail_round_trip() {
    let texts = ["مرحبا", "hello"];
    let ids = ids(2);
    let out = executor()
        .execute("p1", ARABIC, &inputs(&texts, &ids), LIMITS)
        .await;
    let statuses: Vec<_> = out.iter().map(|v| v.as_ref().unwrap().status).collect();
    assert_eq!(statuses, [VerdictStatus::Pass, VerdictStatus::Fail]);
    assert_eq!(out[1].as_ref().unwrap().response_id, "r1");
}

#[tokio::test]
async fn raising_program_is_error() {
    let texts = ["x"];
    let ids = ids(1);
    let src = "def f(t):\n    raise ValueError('boom')";
    let out = executor()
        .execute("p2", src, &inputs(&texts, &ids), LIMITS)
        .await;
    let v = out[0].as_ref().unwrap();
    assert_eq!(v.status, VerdictStatus::Error);
    assert!(v.detail.as_deref().unwrap().contains("boom"));
}

#[tokio::test]
async fn hanging_program_times_out_and_child_is_respawned() {
    let src =
        "import time\ndef f(t):\n    if t == 'slow':\n        time.sleep(60)\n    return t == 'ok'";
    let texts = ["slow", "ok"];
    let ids = ids(2);
    let started = Instant::now();
    let out = executor()
        .execute("p3", src, &inputs(&texts, &ids), LIMITS)
        .await;
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(out[0].as_ref().unwrap().status, VerdictStatus::Timeout);
    assert_eq!(out[1].as_ref().unwrap().status, VerdictStatus::Pass);
}

#[tokio::test]
async fn crashed_child_reports_stderr_and_recovers() {
    let texts = ["CRASH", "hello"];
    let ids = ids(2);
    let src = "def f(t):\n    return t == 'hello'";
    let out = executor()
        .execute("p4", src, &inputs(&texts, &ids), LIMITS)
        .await;
    let crash = out[0].as_ref().unwrap();
    assert_eq!(crash.status, VerdictStatus::Error);
    assert!(crash
        .detail
        .as_deref()
        .unwrap()
        .contains("crashed on purpose"));
    assert_eq!(out[1].as_ref().unwrap().status, VerdictStatus::Pass);
}

#[tokio::test]
async fn unreadable_verdict_is_error() {
    let texts = ["GARBAGE", "hello"];
    let ids = ids(2);
    let src = "def f(t):\n    return True";
    let out = executor()
        .execute("p5", src, &inputs(&texts, &ids), LIMITS)
        .await;
    assert_eq!(out[0].as_ref().unwrap().status, VerdictStatus::Error);
    assert_eq!(out[1].as_ref().unwrap().status, VerdictStatus::Pass);
}

#[tokio::test]
async fn missing_sandbox_binary_is_error_not_panic() {
    let exec = SubprocessExecutor::new(vec!["/nonexistent/sandbox".into()]);
    let texts = ["a"];
    let ids = ids(1);
    let out = exec
        .execute(
            "p6",
            "def f(t):\n    return True",
            &inputs(&texts, &ids),
            LIMITS,
        )
        .await;
    assert_eq!(out[0].as_ref().unwrap().status, VerdictStatus::Error);
}
