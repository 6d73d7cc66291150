//! Measurement: soft-F1 of goal maps, rollout success rates, IQM with
//! bootstrap intervals, and word/attribute correspondence statistics.

use std::fmt::Write as _;

use diffcore::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expert::{plan, ExpertError};
use crate::gridworld::{self, Action, EnvConfig, EnvError, EpisodeState, NUM_ACTIONS, VOCAB};
use crate::goalid::{ground_truth_pairs, interaction_matrix, InteractionModel, Variant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("truth mask has no positive cell")]
    EmptyTruth,
    #[error("length mismatch: {0} scores vs {1} truth cells")]
    Length(usize, usize),
    #[error("need at least 4 scores, got {0}")]
    TooFewScores(usize),
    #[error("correspondence report needs a factored model, got `{0}`")]
    NotFactored(Variant),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Model(#[from] diffcore::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Weight-aware precision/recall of map `s` against boolean `truth`.
pub fn soft_f1(s: &[f64], truth: &[bool]) -> Result<SoftF1, EvalError> {
    if s.len() != truth.len() {
        return Err(EvalError::Length(s.len(), truth.len()));
    }
    let positives = truth.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(EvalError::EmptyTruth);
    }
    let hit: f64 = s.iter().zip(truth).filter(|(_, &y)| y).map(|(v, _)| v).sum();
    let total: f64 = s.iter().sum();
    let precision = if total == 0.0 { 0.0 } else { hit / total };
    let recall = hit / positives as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SoftF1 { precision, recall, f1 })
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean of the values lying within the inclusive 25th–75th percentile band.
pub fn iqm(scores: &[f64]) -> Result<f64, EvalError> {
    if scores.len() < 4 {
        return Err(EvalError::TooFewScores(scores.len()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(iqm_sorted(&sorted))
}

fn iqm_sorted(sorted: &[f64]) -> f64 {
    let (lo, hi) = (percentile(sorted, 25.0), percentile(sorted, 75.0));
    let (sum, n) = sorted
        .iter()
        .filter(|&&v| v >= lo && v <= hi)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    sum / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub iqm: f64,
    pub lo: f64,
    pub hi: f64,
}

/// IQM with a percentile-bootstrap interval at `level` from `resamples`
/// draws of a ChaCha8 stream seeded with `seed`.
pub fn iqm_ci(scores: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval, EvalError> {
    let point = iqm(scores)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scores.len();
    let mut stats = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for slot in buf.iter_mut() {
            *slot = scores[rng.random_range(0..n)];
        }
        buf.sort_by(f64::total_cmp);
        stats.push(iqm_sorted(&buf));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0 * 100.0;
    Ok(Interval {
        iqm: point,
        lo: percentile(&stats, tail),
        hi: percentile(&stats, 100.0 - tail),
    })
}

/// Anything that picks one action per live episode.
pub trait Policy {
    fn act_batch(&mut self, states: &[&EpisodeState]) -> Result<Vec<Action>, EvalError>;
}

/// First action of the shortest plan.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act_batch(&mut self, states: &[&EpisodeState]) -> Result<Vec<Action>, EvalError> {
        states.iter().map(|s| Ok(plan(s)?[0])).collect()
    }
}

pub struct RandomPolicy(pub ChaCha8Rng);

impl Policy for RandomPolicy {
    fn act_batch(&mut self, states: &[&EpisodeState]) -> Result<Vec<Action>, EvalError> {
        Ok(states.iter().map(|_| Action::ALL[self.0.random_range(0..NUM_ACTIONS)]).collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessReport {
    pub seeds: Vec<u64>,
    pub success: Vec<bool>,
    pub steps: Vec<u32>,
}

impl SuccessReport {
    pub fn rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Rolls `policy` out from each seed's reset state, all episodes advancing
/// in lock-step, for at most 64 steps each.
pub fn success_rate(policy: &mut dyn Policy, seeds: &[u64], env: &EnvConfig) -> Result<SuccessReport, EvalError> {
    let mut states: Vec<EpisodeState> = seeds.iter().map(|&s| gridworld::reset(s, env)).collect::<Result<_, _>>()?;
    let mut success = vec![false; seeds.len()];
    loop {
        let live: Vec<usize> = (0..states.len()).filter(|&i| !states[i].terminated).collect();
        if live.is_empty() {
            break;
        }
        let refs: Vec<&EpisodeState> = live.iter().map(|&i| &states[i]).collect();
        let actions = policy.act_batch(&refs)?;
        for (&i, a) in live.iter().zip(actions) {
            let out = gridworld::step(&states[i], a)?;
            success[i] = out.reward > 0.0;
            states[i] = out.state;
        }
    }
    Ok(SuccessReport {
        seeds: seeds.to_vec(),
        success,
        steps: states.iter().map(|s| s.step_count).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordGrounding {
    pub word: &'static str,
    pub factor: &'static str,
    pub expected: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub words: Vec<WordGrounding>,
    pub off_target_mass: f64,
}

impl CorrelationReport {
    pub fn correct(&self) -> usize {
        self.words.iter().filter(|w| w.expected == w.predicted).count()
    }
}

/// Per content word, the attribute value it matches best in its own factor,
/// plus the share of |cosine| mass outside the nine true pairs.
pub fn correlation_report(model: &InteractionModel, p: &ParamStore) -> Result<CorrelationReport, EvalError> {
    if model.config.variant == Variant::Sparse {
        return Err(EvalError::NotFactored(model.config.variant));
    }
    let mats = interaction_matrix(model, p);
    let by_name = |name: &str| mats.iter().find(|m| m.factor == name).expect("factor matrix");
    let truth = ground_truth_pairs();
    let mut words = Vec::new();
    let mut on_target = 0.0;
    for &(w, factor, value) in &truth {
        let m = by_name(factor);
        words.push(WordGrounding {
            word: VOCAB[w],
            factor,
            expected: value,
            predicted: argmax(&m.entries[w]),
        });
        on_target += m.get(w, value).abs();
    }
    let total: f64 = mats
        .iter()
        .filter(|m| m.factor != "held")
        .flat_map(|m| m.entries.iter().flatten())
        .map(|v| v.abs())
        .sum();
    Ok(CorrelationReport {
        words,
        off_target_mass: if total == 0.0 { 0.0 } else { (total - on_target) / total },
    })
}

/// Fixed-width table with a header row; columns are left as given.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
