//! Browser demo of the token-growth pipeline.
//!
//! Three operations, each JSON in → JSON out so the page's JavaScript stays
//! trivial and the logic stays testable on the host:
//!
//! * [`pipeline_step`] — run the pipeline on user-supplied 2-D tokens at one
//!   iteration and report the selection, merge assignment, and merged points;
//! * [`schedule_table`] — stage rates, targets, and the iteration → stage
//!   map for a schedule;
//! * [`flops_table`] — the per-stage cost table and speedups for a preset
//!   geometry.
//!
//! The `#[wasm_bindgen]` exports live in [`bindings`] and only exist on the
//! `wasm32` target; everything else compiles and runs natively, which is how
//! the unit tests exercise it. See `README.md` for the wasm-pack build.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use tokex_core::distance::DistanceMetric;
use tokex_core::flops;
use tokex_core::pipeline::{run_pipeline, PipelineConfig};
use tokex_core::schedule::GrowthSchedule;
use tokex_core::tokens::TokenSet;

#[derive(Deserialize)]
struct PipelineRequest {
    /// 2-D points; the demo works in the plane so the canvas can show it.
    points: Vec<[f64; 2]>,
    #[serde(default = "default_stages")]
    num_stages: usize,
    #[serde(default = "default_rate")]
    first_stage_rate: f64,
    #[serde(default = "default_rounds")]
    repetition_steps: usize,
    #[serde(default)]
    metric: Option<String>,
    iteration: usize,
    total_iterations: usize,
}

fn default_stages() -> usize {
    3
}
fn default_rate() -> f64 {
    0.5
}
fn default_rounds() -> usize {
    2
}

#[derive(Serialize)]
struct PipelineResponse {
    stage: usize,
    num_stages: usize,
    kept_rate: f64,
    /// 1-based indices of the kept tokens.
    selected: Vec<usize>,
    /// `(unselected, owner)` pairs, 1-based.
    assignment: Vec<[usize; 2]>,
    /// Positions of the merged tokens, aligned with `selected`.
    merged: Vec<[f64; 2]>,
}

/// Runs the pipeline at one iteration over 2-D tokens.
pub fn pipeline_step(request_json: &str) -> Result<String, String> {
    let request: PipelineRequest =
        serde_json::from_str(request_json).map_err(|e| e.to_string())?;
    if request.points.len() < 2 {
        return Err("need at least 2 points".into());
    }
    let mut values = Array2::zeros((request.points.len(), 2));
    for (i, p) in request.points.iter().enumerate() {
        values[(i, 0)] = p[0];
        values[(i, 1)] = p[1];
    }
    let tokens = TokenSet::new(values).map_err(|e| e.to_string())?;
    let metric = match request.metric.as_deref() {
        // Euclidean is the demo default: canvas points are positions, and
        // screen distance is what the eye checks.
        None => DistanceMetric::Euclidean,
        Some(name) => name.parse().map_err(|e: tokex_core::Error| e.to_string())?,
    };
    let schedule = GrowthSchedule::new(
        request.num_stages,
        request.first_stage_rate,
        request.repetition_steps,
    )
    .map_err(|e| e.to_string())?;
    let mut config = PipelineConfig::new(schedule);
    config.metric = metric;

    let output = run_pipeline(&tokens, &config, request.iteration, request.total_iterations)
        .map_err(|e| e.to_string())?;
    let selected: Vec<usize> = output.selection.selected().iter().collect();
    let merged = (1..=output.tokens.num_tokens())
        .map(|i| {
            let row = output.tokens.row(i).expect("row in range");
            [row[0], row[1]]
        })
        .collect();
    let response = PipelineResponse {
        stage: output.stage.stage,
        num_stages: request.num_stages,
        kept_rate: output.stage.kept_rate,
        selected,
        assignment: output.assignment.pairs().iter().map(|&(b, a)| [b, a]).collect(),
        merged,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct ScheduleRequest {
    #[serde(default = "default_stages")]
    num_stages: usize,
    #[serde(default = "default_rate")]
    first_stage_rate: f64,
    #[serde(default = "default_rounds")]
    repetition_steps: usize,
    num_tokens: usize,
    total_iterations: usize,
}

#[derive(Serialize)]
struct ScheduleResponse {
    initial_rate: f64,
    initial_count: usize,
    stages: Vec<ScheduleStage>,
    /// `stage_of[t - 1]` is the stage of iteration `t`.
    stage_of: Vec<usize>,
}

#[derive(Serialize)]
struct ScheduleStage {
    stage: usize,
    kept_rate: f64,
    target: usize,
}

/// Stage rates, token targets, and the iteration → stage map.
pub fn schedule_table(request_json: &str) -> Result<String, String> {
    let request: ScheduleRequest =
        serde_json::from_str(request_json).map_err(|e| e.to_string())?;
    let schedule = GrowthSchedule::new(
        request.num_stages,
        request.first_stage_rate,
        request.repetition_steps,
    )
    .map_err(|e| e.to_string())?;
    let targets = schedule.stage_targets(request.num_tokens);
    let stages = schedule
        .stage_rates()
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(i, (r, &target))| ScheduleStage {
            stage: i + 1,
            kept_rate: r.kept_rate,
            target,
        })
        .collect();
    let stage_of = (1..=request.total_iterations)
        .map(|t| schedule.current_stage(t, request.total_iterations))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let response = ScheduleResponse {
        initial_rate: schedule.initial_rate(),
        initial_count: flops::initial_selection_count(
            request.num_tokens.max(1),
            schedule.initial_rate(),
        )
        .map_err(|e| e.to_string())?,
        stages,
        stage_of,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct FlopsRequest {
    preset: String,
    #[serde(default)]
    first_stage_rate: Option<f64>,
}

/// Per-stage cost table and speedups for a preset geometry.
pub fn flops_table(request_json: &str) -> Result<String, String> {
    let request: FlopsRequest =
        serde_json::from_str(request_json).map_err(|e| e.to_string())?;
    let mut config = flops::preset(&request.preset)
        .ok_or_else(|| format!("unknown preset {:?}", request.preset))?;
    if let Some(rate) = request.first_stage_rate {
        let pipeline = config.pipeline.as_mut().expect("presets carry a pipeline");
        pipeline.schedule = GrowthSchedule::new(
            pipeline.schedule.num_stages(),
            rate,
            pipeline.schedule.repetition_steps(),
        )
        .map_err(|e| e.to_string())?;
    }
    let report = flops::schedule_report(&config).map_err(|e| e.to_string())?;
    let value = serde_json::json!({
        "preset": request.preset,
        "num_tokens": config.num_tokens(),
        "dim": config.dim,
        "depth": config.depth,
        "report": report,
    });
    serde_json::to_string(&value).map_err(|e| e.to_string())
}

/// The wasm exports. Identical names and signatures as the host functions,
/// with errors surfaced as JavaScript exceptions.
#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen]
    pub fn pipeline_step(request_json: &str) -> Result<String, JsValue> {
        super::pipeline_step(request_json).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen]
    pub fn schedule_table(request_json: &str) -> Result<String, JsValue> {
        super::schedule_table(request_json).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen]
    pub fn flops_table(request_json: &str) -> Result<String, JsValue> {
        super::flops_table(request_json).map_err(|e| JsValue::from_str(&e))
    }
}
