//! Preference-pair mining.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Instruction, PreferencePair, Response, ScoreMatrix, Slot};

/// Ranking key used by the retention filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStrategy {
    /// Largest single-requirement gap between the two responses.
    MaxSingleAspect,
    /// Gap between the two weighted aggregates.
    OverallScore,
}

impl FilterStrategy {
    pub fn key(self, pair: &PreferencePair) -> f64 {
        match self {
            FilterStrategy::MaxSingleAspect => pair.max_criterion_diff,
            FilterStrategy::OverallScore => pair.overall_diff,
        }
    }
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterStrategy::MaxSingleAspect => "max_single_aspect",
            FilterStrategy::OverallScore => "overall_score",
        })
    }
}

/// Why a score matrix produced no pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unpaired {
    Tie,
    MissingAggregate,
    NoSharedCriterion,
}

pub fn form_pair(matrix: &ScoreMatrix) -> Result<PreferencePair, Unpaired> {
    let (Some(a), Some(b)) = (matrix.aggregate(Slot::A), matrix.aggregate(Slot::B)) else {
        return Err(Unpaired::MissingAggregate);
    };
    let (chosen, chosen_score, rejected_score) = match a.partial_cmp(&b) {
        Some(Ordering::Greater) => (Slot::A, a, b),
        Some(Ordering::Less) => (Slot::B, b, a),
        _ => return Err(Unpaired::Tie),
    };
    let max_criterion_diff = matrix
        .combined(Slot::A)
        .into_iter()
        .zip(matrix.combined(Slot::B))
        .filter_map(|(x, y)| Some((x? - y?).abs()))
        .fold(None, |acc: Option<f64>, d| {
            Some(acc.map_or(d, |m| m.max(d)))
        })
        .ok_or(Unpaired::NoSharedCriterion)?;
    Ok(PreferencePair {
        instruction_id: matrix.instruction_id.clone(),
        chosen_slot: chosen,
        rejected_slot: chosen.other(),
        chosen_score,
        rejected_score,
        max_criterion_diff,
        overall_diff: chosen_score - rejected_score,
        retained: false,
    })
}

/// Number of pairs kept out of `n`: the ceiling of `fraction * n`, at least
/// one when there is anything to keep.
pub fn retention_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // The slack absorbs products like 0.7 * 10 = 7.000000000000001.
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Marks the top pairs by the strategy key as retained.
///
/// Every input pair is returned, ordered by instruction id; equal keys are
/// ranked by instruction id so the retained set is deterministic.
pub fn filter_pairs(
    mut pairs: Vec<PreferencePair>,
    strategy: FilterStrategy,
    fraction: f64,
) -> Vec<PreferencePair> {
    pairs.sort_by(|x, y| {
        strategy
            .key(y)
            .total_cmp(&strategy.key(x))
            .then_with(|| x.instruction_id.cmp(&y.instruction_id))
    });
    let keep = retention_count(pairs.len(), fraction);
    for (rank, pair) in pairs.iter_mut().enumerate() {
        pair.retained = rank < keep;
    }
    pairs.sort_by(|x, y| x.instruction_id.cmp(&y.instruction_id));
    pairs
}

/// One training record for preference optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub instruction_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_score: f64,
    pub rejected_score: f64,
    pub max_criterion_diff: f64,
    pub overall_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExportError {
    #[error("pair {0} references an unknown instruction")]
    UnknownInstruction(String),
    #[error("pair {0} references missing response {1}")]
    MissingResponse(String, Slot),
}

/// Resolves retained pairs into training records. Any dangling reference
/// aborts the export.
pub fn export_preferences(
    pairs: &[PreferencePair],
    instructions: &[Instruction],
    responses: &[Response],
) -> Result<Vec<PreferenceRecord>, ExportError> {
    let texts: BTreeMap<&str, &str> = instructions
        .iter()
        .map(|i| (i.id.as_str(), i.text.as_str()))
        .collect();
    let answers: BTreeMap<(&str, Slot), &str> = responses
        .iter()
        .map(|r| ((r.instruction_id.as_str(), r.slot), r.text.as_str()))
        .collect();
    let mut records = Vec::new();
    for pair in pairs.iter().filter(|p| p.retained) {
        let id = pair.instruction_id.as_str();
        let prompt = texts
            .get(id)
            .ok_or_else(|| ExportError::UnknownInstruction(id.to_string()))?;
        let answer = |slot: Slot| {
            answers
                .get(&(id, slot))
                .map(|t| t.to_string())
                .ok_or_else(|| ExportError::MissingResponse(id.to_string(), slot))
        };
        records.push(PreferenceRecord {
            instruction_id: id.to_string(),
            prompt: prompt.to_string(),
            chosen: answer(pair.chosen_slot)?,
            rejected: answer(pair.rejected_slot)?,
            chosen_score: pair.chosen_score,
            rejected_score: pair.rejected_score,
            max_criterion_diff: pair.max_criterion_diff,
            overall_diff: pair.overall_diff,
        });
    }
    records.sort_by(|a, b| a.instruction_id.cmp(&b.instruction_id));
    Ok(records)
}

pub const HISTOGRAM_BINS: usize = 10;
pub const SWEEP_FRACTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Counts in ten equal bins over [0, 100]; the last bin includes 100.
pub fn histogram(values: impl IntoIterator<Item = f64>) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        let i =
            ((v / 100.0 * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub retained: usize,
    /// Smallest key that still made the cut.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub all: Vec<u64>,
    pub retained: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineSummary {
    pub strategy: FilterStrategy,
    pub retention_fraction: f64,
    pub scored_instructions: usize,
    pub pairs_formed: usize,
    pub pairs_retained: usize,
    pub unpaired: BTreeMap<Unpaired, usize>,
    pub max_criterion_diff: Histograms,
    pub overall_diff: Histograms,
    pub sweep: Vec<SweepPoint>,
}

/// Pairs every matrix, applies the filter and summarizes the result.
pub fn mine(
    matrices: &[ScoreMatrix],
    strategy: FilterStrategy,
    fraction: f64,
) -> (Vec<PreferencePair>, MineSummary) {
    let mut formed = Vec::new();
    let mut unpaired: BTreeMap<Unpaired, usize> = BTreeMap::new();
    for m in matrices {
        match form_pair(m) {
            Ok(p) => formed.push(p),
            Err(reason) => *unpaired.entry(reason).or_default() += 1,
        }
    }
    let pairs = filter_pairs(formed, strategy, fraction);

    let mut keys: Vec<f64> = pairs.iter().map(|p| strategy.key(p)).collect();
    keys.sort_by(|a, b| b.total_cmp(a));
    let sweep = SWEEP_FRACTIONS
        .iter()
        .map(|&f| {
            let n = retention_count(keys.len(), f);
            SweepPoint {
                fraction: f,
                retained: n,
                threshold: n.checked_sub(1).map(|i| keys[i]),
            }
        })
        .collect();
    let hist = |get: fn(&PreferencePair) -> f64| Histograms {
        all: histogram(pairs.iter().map(get)),
        retained: histogram(pairs.iter().filter(|p| p.retained).map(get)),
    };
    let summary = MineSummary {
        strategy,
        retention_fraction: fraction,
        scored_instructions: matrices.len(),
        pairs_formed: pairs.len(),
        pairs_retained: pairs.iter().filter(|p| p.retained).count(),
        unpaired,
        max_criterion_diff: hist(|p| p.max_criterion_diff),
        overall_diff: hist(|p| p.overall_diff),
        sweep,
    };
    (pairs, summary)
}
