//! Brute-force reference implementations and the randomized equivalence
//! suite built on them.
//!
//! Everything here recomputes the pipeline's answers from first principles
//! with plain loops — no shared helpers, no vectorized shortcuts — so a bug
//! in the production path and a bug in the reference are unlikely to
//! coincide. The suite generates random instances (with deliberate duplicate
//! rows, so distance ties actually occur), runs both implementations, and
//! demands identical selections, identical merge assignments, and merged
//! values equal to within 1e-9.
//!
//! The reference path is O(n²·d) per step and exists purely for checking;
//! nothing in the training stack calls it.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::distance::DistanceMetric;
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline_with_tie_break, PipelineConfig, TieBreak};
use crate::schedule::GrowthSchedule;
use crate::tokens::TokenSet;

/// Distance between two rows, written as the textbook formula.
fn naive_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    match metric {
        DistanceMetric::Cosine => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::non_finite("cosine distance of a zero-norm row"));
            }
            Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
        }
        DistanceMetric::Euclidean => {
            let mut sum = 0.0;
            for (x, y) in a.iter().zip(b) {
                sum += (x - y) * (x - y);
            }
            Ok(sum.sqrt())
        }
        DistanceMetric::Manhattan => {
            let mut sum = 0.0;
            for (x, y) in a.iter().zip(b) {
                sum += (x - y).abs();
            }
            Ok(sum)
        }
    }
}

fn row(tokens: &TokenSet, index: usize) -> Vec<f64> {
    tokens.row(index).expect("index validated by caller").to_vec()
}

/// Strided initialization, recomputed: stride `s = ⌊1 / rate⌋`, keep 1-based
/// indices with `i mod s == 1`, everything when `s ≤ 1`.
pub fn naive_initialize(num_tokens: usize, initial_rate: f64) -> Vec<usize> {
    let stride = (1.0 / initial_rate).floor() as usize;
    if stride <= 1 {
        (1..=num_tokens).collect()
    } else {
        (1..=num_tokens).filter(|i| i % stride == 1).collect()
    }
}

fn nearest_selected_distance(
    tokens: &TokenSet,
    candidate: usize,
    selected: &[usize],
    metric: DistanceMetric,
) -> Result<f64> {
    let c = row(tokens, candidate);
    let mut best = f64::INFINITY;
    for &s in selected {
        let d = naive_distance(&c, &row(tokens, s), metric)?;
        if d < best {
            best = d;
        }
    }
    Ok(best)
}

/// One-at-a-time farthest-point expansion: each step scores every unselected
/// token afresh and admits the one farthest from its nearest selected token,
/// lowest index on ties.
pub fn naive_expand_sequential(
    tokens: &TokenSet,
    selected: &mut Vec<usize>,
    count: usize,
    metric: DistanceMetric,
) -> Result<()> {
    for _ in 0..count {
        let mut best: Option<(usize, f64)> = None;
        for i in 1..=tokens.num_tokens() {
            if selected.contains(&i) {
                continue;
            }
            let score = nearest_selected_distance(tokens, i, selected, metric)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (chosen, _) = best.ok_or(Error::ExpansionTooLarge {
            requested: count,
            available: 0,
        })?;
        selected.push(chosen);
        selected.sort_unstable();
    }
    Ok(())
}

/// Round-based expansion: `⌊count / rounds⌋` admissions per round with the
/// remainder in the final rounds; each round scores once and repeatedly takes
/// the strict maximum (lowest index on ties) from that round's scores.
pub fn naive_expand_parallel(
    tokens: &TokenSet,
    selected: &mut Vec<usize>,
    count: usize,
    rounds: usize,
    metric: DistanceMetric,
) -> Result<()> {
    for r in 0..rounds {
        let mut size = count / rounds;
        if r >= rounds - count % rounds {
            size += 1;
        }
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for i in 1..=tokens.num_tokens() {
            if !selected.contains(&i) {
                scored.push((i, nearest_selected_distance(tokens, i, selected, metric)?));
            }
        }
        for _ in 0..size {
            if scored.is_empty() {
                return Err(Error::ExpansionTooLarge { requested: count, available: 0 });
            }
            let mut best_pos = 0;
            for pos in 1..scored.len() {
                if scored[pos].1 > scored[best_pos].1 {
                    best_pos = pos;
                }
            }
            selected.push(scored.remove(best_pos).0);
        }
        selected.sort_unstable();
    }
    Ok(())
}

/// Merged rows plus the `(token, owner)` assignment pairs.
pub type MergeOutcome = (Array2<f64>, Vec<(usize, usize)>);

/// Nearest-selected merge: owner of each unselected token is the selected
/// token at minimum distance (lowest index on ties); each output row is the
/// plain mean of the selected token and its assigned tokens in ascending
/// index order.
pub fn naive_merge(
    tokens: &TokenSet,
    selected: &[usize],
    metric: DistanceMetric,
) -> Result<MergeOutcome> {
    let mut pairs = Vec::new();
    for b in 1..=tokens.num_tokens() {
        if selected.contains(&b) {
            continue;
        }
        let bd = row(tokens, b);
        let mut owner = selected[0];
        let mut best = f64::INFINITY;
        for &s in selected {
            let d = naive_distance(&bd, &row(tokens, s), metric)?;
            if d < best {
                best = d;
                owner = s;
            }
        }
        pairs.push((b, owner));
    }
    let dim = tokens.dim();
    let mut merged = Array2::zeros((selected.len(), dim));
    for (slot, &s) in selected.iter().enumerate() {
        let mut members = vec![s];
        members.extend(pairs.iter().filter(|&&(_, o)| o == s).map(|&(b, _)| b));
        let mut acc = vec![0.0; dim];
        for &m in &members {
            for (a, v) in acc.iter_mut().zip(row(tokens, m)) {
                *a += v;
            }
        }
        for (j, a) in acc.iter().enumerate() {
            merged[(slot, j)] = a / members.len() as f64;
        }
    }
    Ok((merged, pairs))
}

/// The reference answer for a full pipeline pass at one iteration.
pub struct NaiveOutput {
    pub stage: usize,
    pub selected: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub merged: Array2<f64>,
}

/// Recomputes the whole pass — stage, cumulative expansion, merge — from
/// first principles.
pub fn naive_pipeline(
    tokens: &TokenSet,
    config: &PipelineConfig,
    iteration: usize,
    total_iterations: usize,
) -> Result<NaiveOutput> {
    let n = tokens.num_tokens();
    let num_stages = config.schedule.num_stages();
    let first = config.schedule.first_stage_rate();
    // Stage of iteration t: ⌈num_stages · t / total⌉, spelled out instead of
    // delegating to the helper the production schedule calls.
    #[allow(clippy::manual_div_ceil)]
    let stage = (num_stages * iteration + total_iterations - 1) / total_iterations;
    let mut selected = naive_initialize(n, first / 2.0);
    for s in 1..=stage {
        // Stage rate: linear from the first-stage rate to exactly 1.
        let rate = if s == num_stages {
            1.0
        } else {
            first + (s - 1) as f64 * (1.0 - first) / (num_stages - 1) as f64
        };
        let target = (((rate * n as f64) + 1e-9).floor() as usize).min(n);
        let add = target.saturating_sub(selected.len());
        naive_expand_parallel(
            tokens,
            &mut selected,
            add,
            config.schedule.repetition_steps(),
            config.metric,
        )?;
    }
    let (merged, pairs) = naive_merge(tokens, &selected, config.metric)?;
    Ok(NaiveOutput { stage, selected, pairs, merged })
}

/// One randomized test case.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub tokens: TokenSet,
    pub config: PipelineConfig,
    pub iteration: usize,
    pub total_iterations: usize,
}

/// Bounds for instance generation.
#[derive(Debug, Clone, Copy)]
pub struct OracleLimits {
    pub max_tokens: usize,
    pub max_dim: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_tokens: 64, max_dim: 16 }
    }
}

/// Generates instance `index` of a suite. Every third instance duplicates
/// some rows so that exact distance ties occur and the tie-break rule is
/// actually exercised; metrics, schedule shapes, and iterations all vary.
pub fn random_instance(seed: u64, index: usize, limits: &OracleLimits) -> OracleInstance {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = rng.random_range(2..=limits.max_tokens.max(2));
    let d = rng.random_range(1..=limits.max_dim.max(1));
    let mut values = Array2::zeros((n, d));
    for v in values.iter_mut() {
        // Offset away from zero so cosine never sees a zero-norm row.
        *v = 0.25 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    if index.is_multiple_of(3) && n >= 4 {
        // Duplicate a handful of rows to force ties.
        for _ in 0..rng.random_range(1..=n / 2) {
            let src = rng.random_range(0..n);
            let dst = rng.random_range(0..n);
            let src_row = values.row(src).to_owned();
            values.row_mut(dst).assign(&src_row);
        }
    }
    let tokens = TokenSet::new(values).expect("generated tokens are valid");

    let num_stages = rng.random_range(1..=5);
    let first_stage_rate =
        if num_stages == 1 { 1.0 } else { rng.random_range(0.2..0.9) };
    let repetition_steps = rng.random_range(1..=3);
    let schedule = GrowthSchedule::new(num_stages, first_stage_rate, repetition_steps)
        .expect("generated schedule is valid");
    let metric = DistanceMetric::ALL[index % DistanceMetric::ALL.len()];
    let mut config = PipelineConfig::new(schedule);
    config.metric = metric;

    let total_iterations = rng.random_range(1..=40);
    let iteration = rng.random_range(1..=total_iterations);
    OracleInstance { tokens, config, iteration, total_iterations }
}

/// Runs one instance through both implementations and describes the first
/// disagreement, if any.
pub fn compare_instance(instance: &OracleInstance, tie_break: TieBreak) -> Result<Option<String>> {
    let real = run_pipeline_with_tie_break(
        &instance.tokens,
        &instance.config,
        instance.iteration,
        instance.total_iterations,
        tie_break,
    )?;
    let naive = naive_pipeline(
        &instance.tokens,
        &instance.config,
        instance.iteration,
        instance.total_iterations,
    )?;

    if real.stage.stage != naive.stage {
        return Ok(Some(format!("stage {} vs {}", real.stage.stage, naive.stage)));
    }
    let real_selected: Vec<usize> = real.selection.selected().iter().collect();
    if real_selected != naive.selected {
        return Ok(Some(format!(
            "selection {real_selected:?} vs {:?}",
            naive.selected
        )));
    }
    if real.assignment.pairs() != naive.pairs.as_slice() {
        return Ok(Some(format!(
            "assignment {:?} vs {:?}",
            real.assignment.pairs(),
            naive.pairs
        )));
    }
    for (slot, s) in naive.selected.iter().enumerate() {
        for j in 0..instance.tokens.dim() {
            let a = real.tokens.row(slot + 1)?[j];
            let b = naive.merged[(slot, j)];
            if (a - b).abs() > 1e-9 {
                return Ok(Some(format!(
                    "merged token {s} component {j}: {a} vs {b}"
                )));
            }
        }
    }
    Ok(None)
}

/// Result of an equivalence suite run.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub mismatches: Vec<OracleMismatch>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleMismatch {
    pub index: usize,
    pub num_tokens: usize,
    pub dim: usize,
    pub metric: DistanceMetric,
    pub detail: String,
}

impl OracleReport {
    pub fn all_match(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Runs `instances` randomized comparisons. `tie_break` selects the
/// production path's tie rule — pass [`TieBreak::HighestIndex`] to verify the
/// suite detects a broken tie-break (it must report mismatches).
pub fn run_suite(
    instances: usize,
    seed: u64,
    limits: &OracleLimits,
    tie_break: TieBreak,
) -> Result<OracleReport> {
    let mut report = OracleReport { instances, mismatches: Vec::new() };
    for index in 0..instances {
        let instance = random_instance(seed, index, limits);
        if let Some(detail) = compare_instance(&instance, tie_break)? {
            report.mismatches.push(OracleMismatch {
                index,
                num_tokens: instance.tokens.num_tokens(),
                dim: instance.tokens.dim(),
                metric: instance.config.metric,
                detail,
            });
        }
    }
    Ok(report)
}
