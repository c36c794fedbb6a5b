//! Analytic FLOPs accounting for the transformer and its growth schedule.
//!
//! Counts follow the convention of the usual profiler tooling: one
//! multiply-accumulate in a *parameterized* layer (patch embedding, QKV /
//! attention-output projections, MLP, classifier head) counts as one FLOP,
//! and the backward pass costs twice the forward pass. The token-quadratic
//! attention products `QKᵀ` and `attn·V` carry no parameters and are
//! excluded from those headline numbers — as they are in the reference
//! tables this module reproduces — but they are computed alongside and
//! reported separately, since they are exactly the terms that shrink
//! *faster* than linearly as tokens are dropped.
//!
//! All values are per sample unless a batch size is applied by the caller.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{self, PipelineConfig};
use crate::schedule::GrowthSchedule;
use crate::vit::ModelConfig;

/// Per-sample forward-pass cost of one model at a fixed kept-token count,
/// split by component. All fields are multiply-accumulate counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    /// Patch embedding projection.
    pub patch_embed: f64,
    /// QKV, attention-output, and MLP projections over all blocks
    /// (token-linear).
    pub block_projections: f64,
    /// `QKᵀ` and `attn·V` products over all blocks (token-quadratic,
    /// parameter-free).
    pub attention_matmul: f64,
    /// Classifier head on the class row.
    pub head: f64,
}

impl FlopsBreakdown {
    /// Parameterized-layer MACs: the profiler-comparable forward cost.
    pub fn parameterized(&self) -> f64 {
        self.patch_embed + self.block_projections + self.head
    }

    /// Parameterized MACs plus the attention matmuls.
    pub fn with_attention(&self) -> f64 {
        self.parameterized() + self.attention_matmul
    }
}

/// Forward and backward cost of one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingFlops {
    pub forward: f64,
    /// Always exactly twice the forward cost.
    pub backward: f64,
}

impl TrainingFlops {
    fn from_forward(forward: f64) -> Self {
        TrainingFlops { forward, backward: 2.0 * forward }
    }

    /// Forward plus backward.
    pub fn total(&self) -> f64 {
        self.forward + self.backward
    }
}

/// Cost of one schedule stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageFlops {
    /// 1-based stage index.
    pub stage: usize,
    /// Tokens kept after the pipeline at this stage.
    pub kept_tokens: usize,
    /// Parameterized forward/backward cost per sample.
    pub forward: f64,
    pub backward: f64,
    /// Estimated per-sample cost of the selection and merge distance
    /// computations at this stage.
    pub selection_overhead: f64,
}

/// Training-cost summary of a model under its growth schedule, per sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    /// Full-token training cost (parameterized convention).
    pub full: TrainingFlops,
    /// Per-stage costs; stages are weighted equally in the averages, which
    /// matches a total iteration count divisible by the stage count.
    pub stages: Vec<StageFlops>,
    /// Mean stage cost (parameterized convention).
    pub average: TrainingFlops,
    /// `full / average`: the training-cost ratio in the parameterized
    /// convention used by the reference tables.
    pub speedup: f64,
    /// The same three quantities with the attention matmuls included.
    pub full_with_attention: TrainingFlops,
    pub average_with_attention: TrainingFlops,
    pub speedup_with_attention: f64,
    /// Mean per-sample selection/merge overhead across stages.
    pub average_selection_overhead: f64,
    /// Overhead as a fraction of the average forward+backward cost.
    pub overhead_fraction: f64,
}

fn block_projection_macs(config: &ModelConfig, tokens: usize) -> f64 {
    let n = tokens as f64;
    let d = config.dim as f64;
    let hidden = config.hidden_dim() as f64;
    // QKV (3d·d) + output projection (d·d) + MLP (2·d·hidden), per token.
    n * (4.0 * d * d + 2.0 * d * hidden)
}

fn attention_matmul_macs(config: &ModelConfig, tokens: usize) -> f64 {
    let n = tokens as f64;
    let d = config.dim as f64;
    // QKᵀ and attn·V are each n²·d across all heads.
    2.0 * n * n * d
}

/// Per-sample forward cost at `kept_tokens` active tokens.
///
/// Blocks up to and including the pipeline's `apply_after_block` run on the
/// full sequence; the rest run on `kept_tokens`. With `kept_tokens` equal to
/// the full sequence length the placement is irrelevant; below it the model
/// must have a pipeline configured.
pub fn forward_flops(config: &ModelConfig, kept_tokens: usize) -> Result<FlopsBreakdown> {
    config.validate()?;
    let n = config.num_tokens();
    if kept_tokens == 0 || kept_tokens > n {
        return Err(Error::InvalidModel(format!(
            "kept_tokens {kept_tokens} out of range 1..={n}"
        )));
    }
    let apply_after = match (&config.pipeline, kept_tokens == n) {
        (Some(pipeline), _) => pipeline.apply_after_block,
        (None, true) => config.depth,
        (None, false) => {
            return Err(Error::InvalidModel(
                "reduced token counts require a pipeline configuration".into(),
            ))
        }
    };
    let full_blocks = apply_after.min(config.depth) as f64;
    let reduced_blocks = config.depth as f64 - full_blocks;
    Ok(FlopsBreakdown {
        patch_embed: (config.num_patches() * config.patch_dim() * config.dim) as f64,
        block_projections: full_blocks * block_projection_macs(config, n)
            + reduced_blocks * block_projection_macs(config, kept_tokens),
        attention_matmul: full_blocks * attention_matmul_macs(config, n)
            + reduced_blocks * attention_matmul_macs(config, kept_tokens),
        head: (config.dim * config.num_classes) as f64,
    })
}

/// Per-sample forward+backward cost at `kept_tokens` active tokens, in the
/// parameterized convention.
pub fn training_flops(config: &ModelConfig, kept_tokens: usize) -> Result<TrainingFlops> {
    Ok(TrainingFlops::from_forward(forward_flops(config, kept_tokens)?.parameterized()))
}

/// Parameterized forward MACs of only the blocks *after* `apply_after_block`
/// at `kept_tokens` tokens — the compute the pipeline actually reduces.
pub fn post_block_flops(
    config: &ModelConfig,
    apply_after_block: usize,
    kept_tokens: usize,
) -> Result<f64> {
    config.validate()?;
    if kept_tokens == 0 || kept_tokens > config.num_tokens() {
        return Err(Error::InvalidModel(format!(
            "kept_tokens {kept_tokens} out of range 1..={}",
            config.num_tokens()
        )));
    }
    let reduced_blocks = config.depth.saturating_sub(apply_after_block) as f64;
    Ok(reduced_blocks * block_projection_macs(config, kept_tokens))
}

/// Number of tokens the strided initialization selects out of `num_tokens`.
pub fn initial_selection_count(num_tokens: usize, initial_rate: f64) -> Result<usize> {
    if !(initial_rate > 0.0 && initial_rate <= 1.0) || !initial_rate.is_finite() {
        return Err(Error::InvalidRate { name: "initial_rate", value: initial_rate });
    }
    let stride = (1.0 / initial_rate).floor() as usize;
    if stride <= 1 || num_tokens == 0 {
        Ok(num_tokens)
    } else {
        Ok((num_tokens - 1) / stride + 1)
    }
}

/// Estimated per-sample MACs spent on selection and merge distance
/// computations when the pipeline runs at `stage`.
///
/// The estimate replays the exact expansion round sizes of the pipeline and
/// charges `d + 2` MACs per distance-matrix entry (a `d`-wide dot product
/// plus the norm scaling) plus `d` MACs per row norm and per merge
/// accumulation. It is an upper-bound-flavored estimate for the cosine
/// metric; the point of reporting it is to show it is small next to the
/// transformer blocks it saves.
pub fn selection_overhead_flops(
    num_tokens: usize,
    dim: usize,
    schedule: &GrowthSchedule,
    stage: usize,
) -> Result<f64> {
    if stage == 0 || stage > schedule.num_stages() {
        return Err(Error::IterationOutOfRange { iteration: stage, total: schedule.num_stages() });
    }
    let d = dim as f64;
    let pair_cost = d + 2.0;
    let targets = schedule.stage_targets(num_tokens);
    let mut selected = initial_selection_count(num_tokens, schedule.initial_rate())?;
    let mut cost = 0.0;
    for &target in targets.iter().take(stage) {
        let add = target.saturating_sub(selected);
        for size in pipeline::round_sizes(add, schedule.repetition_steps()) {
            if size == 0 {
                continue;
            }
            let unselected = num_tokens - selected;
            cost += (unselected * selected) as f64 * pair_cost // distance matrix
                + num_tokens as f64 * d; // row norms
            selected += size;
        }
    }
    // Merge: one more distance matrix plus the group averaging.
    let unselected = num_tokens - selected;
    if unselected > 0 {
        cost += (unselected * selected) as f64 * pair_cost
            + num_tokens as f64 * d
            + unselected as f64 * d;
    }
    Ok(cost)
}

/// Builds the full per-sample training-cost report for a model with a
/// configured pipeline.
pub fn schedule_report(config: &ModelConfig) -> Result<FlopsReport> {
    config.validate()?;
    let pipeline = config.pipeline.as_ref().ok_or_else(|| {
        Error::InvalidModel("the schedule report requires a pipeline configuration".into())
    })?;
    let n = config.num_tokens();
    let full_breakdown = forward_flops(config, n)?;
    let full = TrainingFlops::from_forward(full_breakdown.parameterized());
    let full_with_attention = TrainingFlops::from_forward(full_breakdown.with_attention());

    let targets = pipeline.schedule.stage_targets(n);
    let initial = initial_selection_count(n, pipeline.schedule.initial_rate())?;
    let mut stages = Vec::with_capacity(targets.len());
    let mut sum_param = 0.0;
    let mut sum_attn = 0.0;
    let mut sum_overhead = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let stage = i + 1;
        // The strided initialization can exceed a small stage's target; the
        // pipeline then keeps the larger set.
        let kept = target.max(initial).min(n);
        let breakdown = forward_flops(config, kept)?;
        let overhead = selection_overhead_flops(n, config.dim, &pipeline.schedule, stage)?;
        sum_param += breakdown.parameterized();
        sum_attn += breakdown.with_attention();
        sum_overhead += overhead;
        stages.push(StageFlops {
            stage,
            kept_tokens: kept,
            forward: breakdown.parameterized(),
            backward: 2.0 * breakdown.parameterized(),
            selection_overhead: overhead,
        });
    }
    let count = stages.len() as f64;
    let average = TrainingFlops::from_forward(sum_param / count);
    let average_with_attention = TrainingFlops::from_forward(sum_attn / count);
    let average_selection_overhead = sum_overhead / count;
    Ok(FlopsReport {
        full,
        speedup: full.total() / average.total(),
        full_with_attention,
        speedup_with_attention: full_with_attention.total() / average_with_attention.total(),
        overhead_fraction: average_selection_overhead / average.total(),
        stages,
        average,
        average_with_attention,
        average_selection_overhead,
    })
}

/// Standard model geometries, with the default growth pipeline attached
/// (three stages, first-stage rate 0.5, two expansion rounds, cosine,
/// applied after block 1).
///
/// Known names: `deit-tiny`, `deit-small`, `deit-base`, `lvvit-s`.
pub fn preset(name: &str) -> Option<ModelConfig> {
    let (depth, dim, heads, mlp_ratio) = match name {
        "deit-tiny" => (12, 192, 3, 4.0),
        "deit-small" => (12, 384, 6, 4.0),
        "deit-base" => (12, 768, 12, 4.0),
        "lvvit-s" => (16, 384, 6, 3.0),
        _ => return None,
    };
    let schedule = GrowthSchedule::new(3, 0.5, 2).expect("default schedule is valid");
    Some(ModelConfig {
        image_size: 224,
        patch_size: 16,
        channels: 3,
        depth,
        dim,
        heads,
        mlp_ratio,
        num_classes: 1000,
        pipeline: Some(PipelineConfig::new(schedule)),
    })
}
