//! Hybrid scoring of response pairs against a checklist.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use futures::future::join_all;
use regex::Regex;

use crate::config::PipelineConfig;
use crate::gateway::{Gateway, TeacherRequest};
use crate::model::{
    validate_checklist, CellKey, Checklist, Instruction, ProgramResult, Requirement, Response,
    ScoreCell, ScoreMatrix, Slot,
};
use crate::prompts;
use crate::sandbox::{ProgramExecutor, ProgramInput, SandboxLimits, SandboxVerdict};

/// Judge reply meaning the grader could not make sense of the response.
pub const CONFUSED_SENTINEL: f64 = -1.0;

const JUDGE_FAILED: &str = "judge request failed";

static NUMERAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());

/// First decimal numeral in a judge completion, if it is a score in
/// [0, 100] or the sentinel.
pub fn parse_judge_completion(completion: &str) -> Option<f64> {
    let value: f64 = NUMERAL.find(completion)?.as_str().parse().ok()?;
    ((0.0..=100.0).contains(&value) || value == CONFUSED_SENTINEL).then_some(value)
}

/// Judge samples with sentinels and garbage removed.
pub fn collect_samples(completions: &[String]) -> ScoreCell {
    let kept: Vec<f64> = completions
        .iter()
        .filter_map(|c| parse_judge_completion(c))
        .filter(|v| *v != CONFUSED_SENTINEL)
        .collect();
    let discarded = (completions.len() - kept.len()) as u32;
    let mut cell = ScoreCell::from_samples(kept, discarded);
    if cell.judge_mean.is_none() {
        cell.note = Some(format!("all {} judge samples discarded", completions.len()));
    }
    cell
}

/// Folds a program verdict into a judged cell.
///
/// A definite verdict is averaged with the judge mean; otherwise the judge
/// mean stands alone. A MISSING judge mean stays MISSING.
pub fn fuse(mut cell: ScoreCell, verdict: Option<&SandboxVerdict>) -> ScoreCell {
    cell.program_result = verdict.map_or(ProgramResult::Absent, SandboxVerdict::program_result);
    if let Some(v) = verdict.filter(|v| v.program_result() == ProgramResult::Error) {
        let detail = v.detail.as_deref().unwrap_or("no detail");
        cell.note = Some(format!("program {:?}: {detail}", v.status).to_lowercase());
    }
    cell.combined = cell
        .judge_mean
        .map(|m| match cell.program_result.program_score() {
            Some(p) => (m + p) / 2.0,
            None => m,
        });
    cell
}

/// Weighted mean over the scored items, `None` if nothing carries weight.
pub fn aggregate(weights: &[f64], combined: &[Option<f64>]) -> Option<f64> {
    assert_eq!(weights.len(), combined.len(), "one score per weight");
    let (num, den) = weights
        .iter()
        .zip(combined)
        .filter_map(|(w, c)| c.map(|c| (w * c, *w)))
        .fold((0.0, 0.0), |(n, d), (wc, w)| (n + wc, d + w));
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone)]
pub struct ScoringSettings {
    pub judge_model: String,
    pub sample_count: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub limits: SandboxLimits,
}

impl From<&PipelineConfig> for ScoringSettings {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            judge_model: c.teacher_model.clone(),
            sample_count: c.judge_sample_count,
            temperature: c.judge_temperature,
            max_tokens: c.gateway.max_tokens_judge,
            seed: c.seed,
            limits: SandboxLimits {
                timeout_ms: c.sandbox_timeout_ms,
                memory_mb: c.sandbox_memory_limit_mb,
            },
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("checklist for {0} is invalid: {1}")]
    InvalidChecklist(String, String),
    #[error("expected responses A and B for {instruction}, got {found}")]
    Responses { instruction: String, found: String },
}

/// Counters reported alongside each scored instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoreDiagnostics {
    pub judge_failures: u64,
    pub discarded_samples: u64,
    pub missing_cells: u64,
    pub program_runs: u64,
    pub program_errors: u64,
}

impl ScoreDiagnostics {
    pub fn absorb(&mut self, other: &ScoreDiagnostics) {
        self.judge_failures += other.judge_failures;
        self.discarded_samples += other.discarded_samples;
        self.missing_cells += other.missing_cells;
        self.program_runs += other.program_runs;
        self.program_errors += other.program_errors;
    }
}

pub struct Scorer<'a> {
    gateway: &'a Gateway,
    executor: &'a dyn ProgramExecutor,
    settings: ScoringSettings,
}

impl<'a> Scorer<'a> {
    pub fn new(
        gateway: &'a Gateway,
        executor: &'a dyn ProgramExecutor,
        settings: ScoringSettings,
    ) -> Self {
        Self {
            gateway,
            executor,
            settings,
        }
    }

    /// One teacher request with `sample_count` completions. Gateway failure
    /// yields a MISSING cell.
    pub async fn judge_item(
        &self,
        instruction: &Instruction,
        response: &str,
        requirement: &Requirement,
    ) -> ScoreCell {
        let prompt = prompts::JUDGE.render(&[
            ("instruction", &instruction.text),
            ("response", response),
            ("requirement", &requirement.text),
        ]);
        let request = TeacherRequest::new(self.settings.judge_model.clone(), prompt)
            .temperature(self.settings.temperature)
            .n(self.settings.sample_count)
            .max_tokens(self.settings.max_tokens)
            .seed(Some(self.settings.seed));
        match self.gateway.complete(&request).await {
            Ok(completions) => collect_samples(&completions),
            Err(e) => ScoreCell::missing(format!("{JUDGE_FAILED}: {e}")),
        }
    }

    pub async fn score_instruction(
        &self,
        instruction: &Instruction,
        checklist: &Checklist,
        responses: &[Response],
    ) -> Result<(ScoreMatrix, ScoreDiagnostics), ScoringError> {
        let violations = validate_checklist(checklist);
        if !violations.is_empty() {
            let joined = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(ScoringError::InvalidChecklist(
                checklist.instruction_id.clone(),
                joined,
            ));
        }
        let by_slot: BTreeMap<Slot, &Response> = responses
            .iter()
            .filter(|r| r.instruction_id == instruction.id)
            .map(|r| (r.slot, r))
            .collect();
        if by_slot.len() != 2 || responses.len() != 2 {
            let found = responses
                .iter()
                .map(|r| format!("{}/{}", r.instruction_id, r.slot))
                .collect::<Vec<_>>();
            return Err(ScoringError::Responses {
                instruction: instruction.id.clone(),
                found: found.join(", "),
            });
        }

        let jobs: Vec<(CellKey, &Requirement, &Response)> = Slot::BOTH
            .iter()
            .flat_map(|slot| {
                checklist
                    .requirements
                    .iter()
                    .map(|req| (CellKey::new(*slot, req.index), req, by_slot[slot]))
            })
            .collect();
        let judged = join_all(
            jobs.iter()
                .map(|(_, req, resp)| self.judge_item(instruction, &resp.text, req)),
        )
        .await;

        let mut verdicts: BTreeMap<CellKey, SandboxVerdict> = BTreeMap::new();
        let mut diagnostics = ScoreDiagnostics::default();
        let response_ids: Vec<String> = Slot::BOTH
            .iter()
            .map(|s| format!("{}/{s}", instruction.id))
            .collect();
        for req in &checklist.requirements {
            let Some(source) = &req.verifier_source else {
                continue;
            };
            let inputs: Vec<ProgramInput> = Slot::BOTH
                .iter()
                .zip(&response_ids)
                .map(|(slot, id)| ProgramInput {
                    response_id: id,
                    text: &by_slot[slot].text,
                })
                .collect();
            let program_id = format!("{}#{}", instruction.id, req.index);
            let out = self
                .executor
                .execute(&program_id, source, &inputs, self.settings.limits)
                .await;
            for (slot, verdict) in Slot::BOTH.iter().zip(out) {
                if let Some(v) = verdict {
                    diagnostics.program_runs += 1;
                    if v.program_result() == ProgramResult::Error {
                        diagnostics.program_errors += 1;
                    }
                    verdicts.insert(CellKey::new(*slot, req.index), v);
                }
            }
        }

        let mut cells = BTreeMap::new();
        for ((key, _, _), cell) in jobs.iter().zip(judged) {
            if cell
                .note
                .as_deref()
                .is_some_and(|n| n.starts_with(JUDGE_FAILED))
            {
                diagnostics.judge_failures += 1;
            }
            diagnostics.discarded_samples += u64::from(cell.discarded_samples);
            let cell = fuse(cell, verdicts.get(key));
            if cell.combined.is_none() {
                diagnostics.missing_cells += 1;
            }
            cells.insert(*key, cell);
        }

        let weights = checklist.weights();
        let mut matrix = ScoreMatrix {
            instruction_id: instruction.id.clone(),
            weights,
            cells,
            aggregate: BTreeMap::new(),
        };
        for slot in Slot::BOTH {
            let agg = aggregate(&matrix.weights, &matrix.combined(slot));
            matrix.aggregate.insert(slot, agg);
        }
        Ok((matrix, diagnostics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::VerdictStatus;
    use proptest::prelude::*;

    fn verdict(status: VerdictStatus) -> SandboxVerdict {
        SandboxVerdict {
            response_id: "r".into(),
            status,
            detail: None,
            wall_ms: 1,
        }
    }

    fn judged(mean: f64) -> ScoreCell {
        ScoreCell::from_samples(vec![mean], 0)
    }

    #[test]
    fn judge_parsing_fixtures() {
        assert_eq!(parse_judge_completion("85"), Some(85.0));
        assert_eq!(parse_judge_completion("Score: 92.5"), Some(92.5));
        assert_eq!(parse_judge_completion("-1"), Some(-1.0));
        assert_eq!(parse_judge_completion("150"), None);
        assert_eq!(parse_judge_completion("I cannot grade this"), None);
        assert_eq!(parse_judge_completion("-5"), None);
        assert_eq!(parse_judge_completion("100"), Some(100.0));
        assert_eq!(parse_judge_completion("0"), Some(0.0));
    }

    #[test]
    fn sentinels_are_excluded_and_all_sentinel_is_missing() {
        let cell = collect_samples(&["-1".into(), "80".into(), "90".into(), "junk".into()]);
        assert_eq!(cell.judge_samples, vec![80.0, 90.0]);
        assert_eq!(cell.discarded_samples, 2);
        assert_eq!(cell.judge_mean, Some(85.0));
        let all = collect_samples(&["-1".into(), "-1".into()]);
        assert_eq!(all.judge_mean, None);
        assert_eq!(all.combined, None);
        assert_eq!(all.discarded_samples, 2);
    }

    #[test]
    fn fusion_reference_rows() {
        assert_eq!(
            fuse(judged(95.2), Some(&verdict(VerdictStatus::Pass))).combined,
            Some(97.6)
        );
        assert_eq!(
            fuse(judged(0.0), Some(&verdict(VerdictStatus::Pass))).combined,
            Some(50.0)
        );
        assert_eq!(fuse(judged(83.6), None).combined, Some(83.6));
        assert_eq!(
            fuse(judged(60.0), Some(&verdict(VerdictStatus::Fail))).combined,
            Some(30.0)
        );
        let timeout = fuse(judged(70.0), Some(&verdict(VerdictStatus::Timeout)));
        assert_eq!(timeout.combined, Some(70.0));
        assert_eq!(timeout.program_result, ProgramResult::Error);
        let missing = fuse(ScoreCell::missing("x"), Some(&verdict(VerdictStatus::Pass)));
        assert_eq!(missing.combined, None);
        assert_eq!(missing.program_result, ProgramResult::Pass);
    }

    #[test]
    fn weighted_mean_reference_and_missing() {
        let w = [100.0, 90.0, 80.0, 75.0, 75.0];
        let s = [Some(100.0), Some(80.0), Some(60.0), Some(40.0), Some(20.0)];
        assert!((aggregate(&w, &s).unwrap() - 26500.0 / 420.0).abs() < 1e-12);
        let mut partial = s;
        partial[0] = None;
        assert!((aggregate(&w, &partial).unwrap() - 16500.0 / 320.0).abs() < 1e-12);
        assert_eq!(aggregate(&w, &[None; 5]), None);
        assert_eq!(aggregate(&[0.0, 0.0], &[Some(5.0), Some(6.0)]), None);
    }

    fn oracle(weights: &[f64], scores: &[Option<f64>]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..weights.len() {
            if let Some(s) = scores[i] {
                num += weights[i] * s;
                den += weights[i];
            }
        }
        if den == 0.0 {
            None
        } else {
            Some(num / den)
        }
    }

    fn items() -> impl Strategy<Value = Vec<(f64, Option<f64>)>> {
        prop::collection::vec(
            (0.0..=100.0f64, prop::option::weighted(0.8, 0.0..=100.0f64)),
            1..14,
        )
    }

    proptest! {
        #[test]
        fn aggregate_matches_oracle(items in items()) {
            let (w, s): (Vec<f64>, Vec<Option<f64>>) = items.into_iter().unzip();
            match (aggregate(&w, &s), oracle(&w, &s)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn aggregate_is_permutation_invariant(items in items(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
            let (w1, s1): (Vec<f64>, Vec<_>) = items.into_iter().unzip();
            let (w2, s2): (Vec<f64>, Vec<_>) = shuffled.into_iter().unzip();
            match (aggregate(&w1, &s1), aggregate(&w2, &s2)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn aggregate_is_scale_invariant(items in items(), k in 0.01..50.0f64) {
            let (w, s): (Vec<f64>, Vec<_>) = items.into_iter().unzip();
            let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
            match (aggregate(&w, &s), aggregate(&scaled, &s)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn constant_scores_aggregate_to_the_constant(w in prop::collection::vec(1.0..=100.0f64, 1..14), c in 0.0..=100.0f64) {
            let s = vec![Some(c); w.len()];
            prop_assert!((aggregate(&w, &s).unwrap() - c).abs() < 1e-9);
        }

        #[test]
        fn aggregate_stays_within_score_range(items in items()) {
            let (w, s): (Vec<f64>, Vec<_>) = items.into_iter().unzip();
            if let Some(a) = aggregate(&w, &s) {
                let scored: Vec<f64> = w.iter().zip(&s).filter(|(w, _)| **w > 0.0).filter_map(|(_, s)| *s).collect();
                let lo = scored.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = scored.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
            }
        }

        #[test]
        fn fusion_is_monotone_in_judge_mean(a in 0.0..=100.0f64, b in 0.0..=100.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for v in [None, Some(verdict(VerdictStatus::Pass)), Some(verdict(VerdictStatus::Fail)), Some(verdict(VerdictStatus::Error))] {
                let l = fuse(judged(lo), v.as_ref()).combined.unwrap();
                let h = fuse(judged(hi), v.as_ref()).combined.unwrap();
                prop_assert!(l <= h);
                prop_assert!((0.0..=100.0).contains(&l) && (0.0..=100.0).contains(&h));
            }
        }

        #[test]
        fn judge_mean_lies_within_samples(samples in prop::collection::vec(0u32..=100, 1..30)) {
            let completions: Vec<String> = samples.iter().map(|s| s.to_string()).collect();
            let cell = collect_samples(&completions);
            let m = cell.judge_mean.unwrap();
            let lo = *samples.iter().min().unwrap() as f64;
            let hi = *samples.iter().max().unwrap() as f64;
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        }
    }
}
