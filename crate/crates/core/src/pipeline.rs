//! The initialize → expand → merge token pipeline.
//!
//! One pass over a token set produces the reduced set used for the rest of
//! the forward pass at the current training stage:
//!
//! 1. [`initialize`] picks an evenly strided subset at the schedule's
//!    initial rate.
//! 2. [`expand_parallel`] (or the reference [`expand_sequential`]) grows the
//!    subset to each stage's target by repeatedly adding the unselected
//!    tokens farthest from the selected set.
//! 3. [`merge`] folds every remaining unselected token into its nearest
//!    selected token by unweighted averaging.
//!
//! Every argmax/argmin breaks ties toward the lowest token index, which —
//! together with deterministic distance computation — makes the whole pass a
//! pure function of its inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distance::{
    min_distance_to_selected, pairwise_distance_within, DistanceMetric, DistanceMatrix,
};
use crate::error::{Error, Result};
use crate::schedule::{GrowthSchedule, StageState};
use crate::tokens::{IndexSet, SelectionState, TokenSet};

/// Options for applying the pipeline inside a transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Stage schedule for the kept-token rate.
    pub schedule: GrowthSchedule,
    /// Metric used for expansion scores and merge assignment.
    pub metric: DistanceMetric,
    /// Transformer block after whose output the pipeline runs (0 = directly
    /// on the embedding output).
    pub apply_after_block: usize,
    /// If true, merged tokens are scattered back to their original sequence
    /// positions after the last block (unselected positions read as zeros).
    pub restore_indices: bool,
}

impl PipelineConfig {
    /// Pipeline with default placement: cosine metric, applied after block 1,
    /// no index restoration.
    pub fn new(schedule: GrowthSchedule) -> Self {
        PipelineConfig {
            schedule,
            metric: DistanceMetric::Cosine,
            apply_after_block: 1,
            restore_indices: false,
        }
    }
}

/// Ordering used to resolve score ties between candidate tokens.
///
/// `LowestIndex` is the crate-wide contract. `HighestIndex` exists only so
/// the oracle CLI can demonstrate that its equivalence suite catches a
/// deliberately broken tie-break; it is not part of the public contract.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    LowestIndex,
    HighestIndex,
}

/// The mapping from merged-away tokens to the selected tokens that absorbed
/// them, as `(unselected index, selected index)` pairs sorted by the first
/// component. Indices are 1-based positions in the original token set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeAssignment {
    pairs: Vec<(usize, usize)>,
}

impl MergeAssignment {
    fn new(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        MergeAssignment { pairs }
    }

    /// Number of merged-away tokens.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(unselected, selected)` pairs sorted by unselected index.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// The selected token that absorbed `index`, if `index` was merged away.
    pub fn owner_of(&self, index: usize) -> Option<usize> {
        self.pairs
            .binary_search_by_key(&index, |&(b, _)| b)
            .ok()
            .map(|pos| self.pairs[pos].1)
    }

    /// Merge groups in selected-index order: group `i` lists the 1-based
    /// token indices averaged into output row `i`, starting with the
    /// selected token itself, followed by its absorbed tokens ascending.
    pub fn groups(&self, selected: &IndexSet) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = selected.iter().map(|s| vec![s]).collect();
        for &(b, a) in &self.pairs {
            let slot = selected
                .as_slice()
                .binary_search(&a)
                .expect("assignment references a selected index");
            groups[slot].push(b);
        }
        groups
    }
}

/// Result of a full pipeline pass at one training iteration.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Merged token set, one row per selected token in ascending index order.
    pub tokens: TokenSet,
    /// Final selected/unselected partition.
    pub selection: SelectionState,
    /// Merge assignment of the unselected tokens.
    pub assignment: MergeAssignment,
    /// Schedule position the pass was run at.
    pub stage: StageState,
}

/// Selects the strided initial subset: with stride `s = ⌊1 / initial_rate⌋`,
/// keeps the 1-based indices `i` with `i mod s == 1` (every index when
/// `s == 1`). Index 1 is always selected.
pub fn initialize(tokens: &TokenSet, initial_rate: f64) -> Result<SelectionState> {
    if !(initial_rate > 0.0 && initial_rate <= 1.0) || !initial_rate.is_finite() {
        return Err(Error::InvalidRate { name: "initial_rate", value: initial_rate });
    }
    let n = tokens.num_tokens();
    let stride = (1.0 / initial_rate).floor() as usize;
    let indices: Vec<usize> = if stride <= 1 {
        (1..=n).collect()
    } else {
        (1..=n).filter(|i| i % stride == 1).collect()
    };
    SelectionState::new(IndexSet::new(indices, n)?, n)
}

/// Per-unselected-token distances to the nearest selected token.
fn expansion_scores(
    tokens: &TokenSet,
    state: &SelectionState,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    let distances: DistanceMatrix =
        pairwise_distance_within(tokens, state.unselected(), state.selected(), metric)?;
    min_distance_to_selected(&distances)
}

/// Grows the selection by `count` tokens, one at a time: each step adds the
/// unselected token whose distance to its nearest selected token is largest,
/// recomputing all distances after every addition. Ties pick the lowest
/// token index.
///
/// This is the reference implementation the parallel variant is checked
/// against; it is O(count · |B| · |A| · d).
pub fn expand_sequential(
    tokens: &TokenSet,
    state: &SelectionState,
    count: usize,
    metric: DistanceMetric,
) -> Result<SelectionState> {
    let mut state = state.clone();
    if count > state.unselected().len() {
        return Err(Error::ExpansionTooLarge {
            requested: count,
            available: state.unselected().len(),
        });
    }
    for _ in 0..count {
        let scores = expansion_scores(tokens, &state, metric)?;
        let candidates = state.unselected().as_slice();
        let mut best_pos = 0;
        for (pos, &score) in scores.iter().enumerate() {
            if score > scores[best_pos] {
                best_pos = pos;
            }
        }
        let chosen = candidates[best_pos];
        state.select(chosen)?;
    }
    Ok(state)
}

/// Splits `count` additions into `rounds` parallel rounds: every round gets
/// `⌊count / rounds⌋` tokens and the remainder goes to the final rounds, so
/// the sizes sum to exactly `count`.
pub fn round_sizes(count: usize, rounds: usize) -> Vec<usize> {
    assert!(rounds > 0, "rounds must be positive");
    let base = count / rounds;
    let extra = count % rounds;
    (0..rounds).map(|r| base + usize::from(r >= rounds - extra)).collect()
}

/// Grows the selection by `count` tokens in `rounds` top-k rounds: each
/// round scores all unselected tokens against the current selection once and
/// admits the highest-scoring `⌊count / rounds⌋` of them together (the
/// division remainder goes to the final rounds). Ties pick the lowest token
/// index.
///
/// With `rounds == count` this reduces to one token per round and is
/// *exactly* equivalent to [`expand_sequential`] — that equivalence is the
/// correctness oracle for this function.
pub fn expand_parallel(
    tokens: &TokenSet,
    state: &SelectionState,
    count: usize,
    rounds: usize,
    metric: DistanceMetric,
) -> Result<SelectionState> {
    expand_parallel_with_tie_break(tokens, state, count, rounds, metric, TieBreak::LowestIndex)
}

/// [`expand_parallel`] with an explicit tie-break rule. See [`TieBreak`].
#[doc(hidden)]
pub fn expand_parallel_with_tie_break(
    tokens: &TokenSet,
    state: &SelectionState,
    count: usize,
    rounds: usize,
    metric: DistanceMetric,
    tie_break: TieBreak,
) -> Result<SelectionState> {
    if rounds == 0 {
        return Err(Error::InvalidSchedule("repetition_steps must be at least 1".into()));
    }
    let mut state = state.clone();
    if count > state.unselected().len() {
        return Err(Error::ExpansionTooLarge {
            requested: count,
            available: state.unselected().len(),
        });
    }
    for size in round_sizes(count, rounds) {
        if size == 0 {
            continue;
        }
        let scores = expansion_scores(tokens, &state, metric)?;
        let candidates = state.unselected().as_slice().to_vec();
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&i, &j| {
            scores[j].total_cmp(&scores[i]).then_with(|| match tie_break {
                TieBreak::LowestIndex => candidates[i].cmp(&candidates[j]),
                TieBreak::HighestIndex => candidates[j].cmp(&candidates[i]),
            })
        });
        for &pos in order.iter().take(size) {
            state.select(candidates[pos])?;
        }
    }
    Ok(state)
}

/// Merges every unselected token into its nearest selected token and returns
/// the merged token set (one row per selected token, ascending index order)
/// plus the assignment that produced it.
///
/// Each output row is the unweighted mean of the selected token and all
/// tokens assigned to it. With nothing unselected the output rows equal the
/// selected rows exactly. Assignment ties pick the lowest selected index.
pub fn merge(
    tokens: &TokenSet,
    state: &SelectionState,
    metric: DistanceMetric,
) -> Result<(TokenSet, MergeAssignment)> {
    let selected = state.selected();
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    if state.unselected().is_empty() {
        return Ok((tokens.gather(selected)?, MergeAssignment::new(Vec::new())));
    }
    let distances = pairwise_distance_within(tokens, state.unselected(), selected, metric)?;
    let sel_indices: Vec<usize> = selected.iter().collect();
    let mut pairs = Vec::with_capacity(state.unselected().len());
    for (row, b) in state.unselected().iter().enumerate() {
        let mut best = 0;
        for col in 1..distances.num_references() {
            if distances.get(row, col) < distances.get(row, best) {
                best = col;
            }
        }
        pairs.push((b, sel_indices[best]));
    }
    let assignment = MergeAssignment::new(pairs);

    let mut merged = Array2::zeros((selected.len(), tokens.dim()));
    for (slot, group) in assignment.groups(selected).iter().enumerate() {
        let mut acc = tokens.row(group[0])?.to_owned();
        for &member in &group[1..] {
            acc += &tokens.row(member)?;
        }
        acc /= group.len() as f64;
        merged.row_mut(slot).assign(&acc);
    }
    Ok((TokenSet::new(merged)?, assignment))
}

/// Runs the full pipeline for iteration `iteration` of `total_iterations`:
/// strided initialization, then one parallel expansion per stage up to the
/// current stage's target, then the merge.
///
/// Stage targets are cumulative, so reaching stage `δ` replays the expansion
/// of stages `1..δ` first. If the strided initialization already meets a
/// stage's target, that stage expands by zero tokens. In the final stage the
/// target is the full token count and the pass returns the input set
/// unchanged.
pub fn run_pipeline(
    tokens: &TokenSet,
    config: &PipelineConfig,
    iteration: usize,
    total_iterations: usize,
) -> Result<PipelineOutput> {
    run_pipeline_with_tie_break(
        tokens,
        config,
        iteration,
        total_iterations,
        TieBreak::LowestIndex,
    )
}

/// [`run_pipeline`] with an explicit expansion tie-break rule. See
/// [`TieBreak`].
#[doc(hidden)]
pub fn run_pipeline_with_tie_break(
    tokens: &TokenSet,
    config: &PipelineConfig,
    iteration: usize,
    total_iterations: usize,
    tie_break: TieBreak,
) -> Result<PipelineOutput> {
    let stage =
        config.schedule.stage_state(iteration, total_iterations, tokens.num_tokens())?;
    let targets = config.schedule.stage_targets(tokens.num_tokens());
    let mut state = initialize(tokens, config.schedule.initial_rate())?;
    for target in targets.iter().take(stage.stage) {
        let add = target.saturating_sub(state.selected().len());
        state = expand_parallel_with_tie_break(
            tokens,
            &state,
            add,
            config.schedule.repetition_steps(),
            config.metric,
            tie_break,
        )?;
    }
    let (merged, assignment) = merge(tokens, &state, config.metric)?;
    Ok(PipelineOutput { tokens: merged, selection: state, assignment, stage })
}

/// Scatters a reduced token set back to its original sequence positions:
/// row `i` of `reduced` lands at the `i`-th selected index, and all other
/// positions are zero.
pub fn restore_indices(
    reduced: &TokenSet,
    selected: &IndexSet,
    original_len: usize,
) -> Result<TokenSet> {
    if selected.len() != reduced.num_tokens() {
        return Err(Error::InvalidIndices(format!(
            "{} selected indices for {} reduced tokens",
            selected.len(),
            reduced.num_tokens()
        )));
    }
    if selected.max().is_some_and(|m| m > original_len) {
        return Err(Error::IndexOutOfRange { index: selected.max().unwrap(), n: original_len });
    }
    let mut out = Array2::zeros((original_len, reduced.dim()));
    for (row, idx) in selected.iter().enumerate() {
        out.row_mut(idx - 1).assign(&reduced.row(row + 1)?);
    }
    TokenSet::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn set(rows: &[&[f64]]) -> TokenSet {
        TokenSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn initialize_strided_examples() {
        let eight = TokenSet::new(Array2::ones((8, 2))).unwrap();
        let state = initialize(&eight, 0.5).unwrap();
        assert_eq!(state.selected().as_slice(), &[1, 3, 5, 7]);

        let ten = TokenSet::new(Array2::ones((10, 2))).unwrap();
        let state = initialize(&ten, 0.25).unwrap();
        assert_eq!(state.selected().as_slice(), &[1, 5, 9]);

        let one = TokenSet::new(Array2::ones((1, 2))).unwrap();
        let state = initialize(&one, 0.3).unwrap();
        assert_eq!(state.selected().as_slice(), &[1]);
    }

    #[test]
    fn initialize_with_rate_one_selects_everything() {
        let tokens = TokenSet::new(Array2::ones((5, 2))).unwrap();
        let state = initialize(&tokens, 1.0).unwrap();
        assert_eq!(state.selected().len(), 5);
        assert!(state.unselected().is_empty());
    }

    #[test]
    fn initialize_rejects_bad_rates() {
        let tokens = TokenSet::new(Array2::ones((5, 2))).unwrap();
        for rate in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(initialize(&tokens, rate).is_err(), "rate {rate} should fail");
        }
    }

    #[test]
    fn sequential_expansion_picks_farthest_token() {
        // Token 2 is orthogonal to the selected token 1 (distance 1.0);
        // token 3 is nearly parallel to it (distance ≈ 0.006).
        let tokens = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.9, 0.1]]);
        let state =
            SelectionState::new(IndexSet::new(vec![1], 3).unwrap(), 3).unwrap();
        let grown = expand_sequential(&tokens, &state, 1, DistanceMetric::Cosine).unwrap();
        assert_eq!(grown.selected().as_slice(), &[1, 2]);
    }

    #[test]
    fn expansion_count_edge_cases() {
        let tokens = set(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let state = SelectionState::new(IndexSet::new(vec![1], 3).unwrap(), 3).unwrap();
        let unchanged = expand_sequential(&tokens, &state, 0, DistanceMetric::Cosine).unwrap();
        assert_eq!(&unchanged, &state);
        let all = expand_sequential(&tokens, &state, 2, DistanceMetric::Cosine).unwrap();
        assert_eq!(all.selected().len(), 3);
        assert!(matches!(
            expand_sequential(&tokens, &state, 3, DistanceMetric::Cosine),
            Err(Error::ExpansionTooLarge { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn ties_resolve_to_the_lowest_index() {
        // Tokens 2 and 3 are identical and farthest from the selection,
        // hence exactly tied for the next pick.
        let tokens = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &[0.9, 0.1]]);
        let state = SelectionState::new(IndexSet::new(vec![1], 4).unwrap(), 4).unwrap();
        let grown = expand_sequential(&tokens, &state, 1, DistanceMetric::Euclidean).unwrap();
        assert_eq!(grown.selected().as_slice(), &[1, 2]);
        let grown = expand_parallel(&tokens, &state, 1, 1, DistanceMetric::Euclidean).unwrap();
        assert_eq!(grown.selected().as_slice(), &[1, 2]);
    }

    #[test]
    fn round_sizes_distribute_remainder_to_final_rounds() {
        assert_eq!(round_sizes(5, 2), vec![2, 3]);
        assert_eq!(round_sizes(6, 2), vec![3, 3]);
        assert_eq!(round_sizes(1, 2), vec![0, 1]);
        assert_eq!(round_sizes(0, 3), vec![0, 0, 0]);
        assert_eq!(round_sizes(7, 3), vec![2, 2, 3]);
        for (count, rounds) in [(9, 4), (17, 5), (3, 7)] {
            assert_eq!(round_sizes(count, rounds).iter().sum::<usize>(), count);
        }
    }

    #[test]
    fn parallel_with_one_token_per_round_matches_sequential() {
        let tokens = set(&[
            &[1.0, 0.2],
            &[0.1, 1.0],
            &[0.9, 0.9],
            &[-1.0, 0.4],
            &[0.3, -0.8],
            &[1.0, 0.2], // duplicate of token 1: guarantees a tie
        ]);
        let state = SelectionState::new(IndexSet::new(vec![1], 6).unwrap(), 6).unwrap();
        for metric in DistanceMetric::ALL {
            let seq = expand_sequential(&tokens, &state, 4, metric).unwrap();
            let par = expand_parallel(&tokens, &state, 4, 4, metric).unwrap();
            assert_eq!(seq.selected(), par.selected(), "metric {metric}");
        }
    }

    #[test]
    fn broken_tie_break_diverges_from_sequential() {
        // Two exactly tied candidates (identical rows): the corrupted rule
        // must pick the other one, which the oracle comparison detects.
        let tokens = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let state = SelectionState::new(IndexSet::new(vec![1], 3).unwrap(), 3).unwrap();
        let seq = expand_sequential(&tokens, &state, 1, DistanceMetric::Euclidean).unwrap();
        let bad = expand_parallel_with_tie_break(
            &tokens,
            &state,
            1,
            1,
            DistanceMetric::Euclidean,
            TieBreak::HighestIndex,
        )
        .unwrap();
        assert_eq!(seq.selected().as_slice(), &[1, 2]);
        assert_eq!(bad.selected().as_slice(), &[1, 3]);
    }

    #[test]
    fn merge_single_owner_takes_the_mean() {
        let tokens = set(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 0.0]]);
        let state = SelectionState::new(IndexSet::new(vec![1], 3).unwrap(), 3).unwrap();
        let (merged, assignment) = merge(&tokens, &state, DistanceMetric::Euclidean).unwrap();
        assert_eq!(assignment.pairs(), &[(2, 1), (3, 1)]);
        assert_abs_diff_eq!(merged.data()[[0, 0]], 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(merged.data()[[0, 1]], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn merge_assigns_to_nearest_selected_token() {
        let tokens = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.9, 0.1]]);
        let state = SelectionState::new(IndexSet::new(vec![1, 2], 3).unwrap(), 3).unwrap();
        let (merged, assignment) = merge(&tokens, &state, DistanceMetric::Cosine).unwrap();
        assert_eq!(assignment.pairs(), &[(3, 1)]);
        assert_eq!(assignment.owner_of(3), Some(1));
        assert_eq!(assignment.owner_of(2), None);
        assert_abs_diff_eq!(merged.data()[[0, 0]], 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(merged.data()[[0, 1]], 0.05, epsilon = 1e-12);
        assert_eq!(merged.data().row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn merge_tie_goes_to_lowest_selected_index() {
        let tokens = set(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 0.0]]);
        let state = SelectionState::new(IndexSet::new(vec![1, 2], 3).unwrap(), 3).unwrap();
        let (_, assignment) = merge(&tokens, &state, DistanceMetric::Euclidean).unwrap();
        assert_eq!(assignment.pairs(), &[(3, 1)]);
    }

    #[test]
    fn merge_with_everything_selected_is_identity() {
        let tokens = set(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let state = SelectionState::new(IndexSet::full(2), 2).unwrap();
        let (merged, assignment) = merge(&tokens, &state, DistanceMetric::Cosine).unwrap();
        assert!(assignment.is_empty());
        assert_eq!(merged.data(), tokens.data());
    }

    #[test]
    fn merge_groups_start_with_the_selected_token() {
        let assignment = MergeAssignment::new(vec![(2, 1), (4, 3), (5, 1)]);
        let selected = IndexSet::new(vec![1, 3], 5).unwrap();
        assert_eq!(assignment.groups(&selected), vec![vec![1, 2, 5], vec![3, 4]]);
    }

    #[test]
    fn run_pipeline_final_stage_is_identity() {
        let tokens = set(&[&[1.0, 0.1], &[0.2, 1.0], &[0.5, 0.5], &[2.0, 0.3]]);
        let config = PipelineConfig::new(GrowthSchedule::new(3, 0.5, 2).unwrap());
        let out = run_pipeline(&tokens, &config, 300, 300).unwrap();
        assert_eq!(out.stage.stage, 3);
        assert_eq!(out.tokens.data(), tokens.data());
        assert!(out.assignment.is_empty());
        assert_eq!(out.selection.selected().len(), 4);
    }

    #[test]
    fn run_pipeline_hits_the_stage_target() {
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(vec![(i as f64 * 0.7).sin() + 1.5, (i as f64 * 1.3).cos() + 1.5]);
        }
        let tokens = TokenSet::from_rows(&rows).unwrap();
        let config = PipelineConfig::new(GrowthSchedule::new(3, 0.5, 2).unwrap());
        let out = run_pipeline(&tokens, &config, 1, 300).unwrap();
        assert_eq!(out.stage.target_count, 5);
        assert_eq!(out.selection.selected().len(), 5);
        assert_eq!(out.tokens.num_tokens(), 5);
        // Every token is accounted for exactly once.
        assert_eq!(out.assignment.len() + out.selection.selected().len(), 10);
    }

    #[test]
    fn run_pipeline_is_deterministic() {
        let mut rows = Vec::new();
        for i in 0..12 {
            rows.push(vec![
                (i as f64 * 0.9).sin(),
                (i as f64 * 0.4).cos(),
                (i as f64 * 1.7).sin() * 0.5 + 0.1,
            ]);
        }
        let tokens = TokenSet::from_rows(&rows).unwrap();
        let config = PipelineConfig::new(GrowthSchedule::new(3, 0.5, 2).unwrap());
        let a = run_pipeline(&tokens, &config, 7, 30).unwrap();
        let b = run_pipeline(&tokens, &config, 7, 30).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
        assert_eq!(a.selection.selected(), b.selection.selected());
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn run_pipeline_tolerates_strided_overshoot() {
        // With 3 tokens at first_stage_rate 0.3 the stage-1 target is
        // ⌊0.9⌋ = 0, yet the strided initialization always keeps token 1.
        // The stage must expand by zero rather than fail.
        let tokens = set(&[&[1.0, 0.3], &[0.4, 1.0], &[0.8, 0.8]]);
        let config = PipelineConfig::new(GrowthSchedule::new(3, 0.3, 2).unwrap());
        let out = run_pipeline(&tokens, &config, 1, 30).unwrap();
        assert_eq!(out.selection.selected().as_slice(), &[1]);
        assert_eq!(out.tokens.num_tokens(), 1);
        // The final stage still reaches the full set.
        let out = run_pipeline(&tokens, &config, 30, 30).unwrap();
        assert_eq!(out.selection.selected().len(), 3);
        assert_eq!(out.tokens.data(), tokens.data());
    }

    #[test]
    fn restore_indices_examples() {
        let reduced = set(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let selected = IndexSet::new(vec![1, 3], 4).unwrap();
        let restored = restore_indices(&reduced, &selected, 4).unwrap();
        assert_eq!(
            restored.data(),
            &array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0], [0.0, 0.0]]
        );

        assert!(restore_indices(&reduced, &IndexSet::new(vec![1], 4).unwrap(), 4).is_err());
        assert!(restore_indices(&reduced, &IndexSet::new(vec![1, 3], 3).unwrap(), 2).is_err());
    }
}
