//! The deterministic training loop.
//!
//! One run wires together the model, the optimizer, the batch sampler, and —
//! when the model carries a pipeline configuration — the per-iteration token
//! growth pass. Every source of randomness is seeded, so two runs with the
//! same configuration produce byte-identical metrics streams; wall-clock
//! information goes to a sidecar log file only.
//!
//! Metrics are emitted as JSON Lines: one `iteration` record per step,
//! `eval` records at the configured interval and at the end, and a final
//! `summary` record. FLOPs figures in the records are analytic
//! (parameterized-layer convention, backward = 2× forward) and account for
//! the whole batch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::flops;
use crate::optim::{learning_rate_at, Optimizer, OptimizerKind};
use crate::vit::TinyVit;

const EVAL_CHUNK: usize = 64;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_fraction: f64,
    /// Cosine-decay floor as a fraction of the base learning rate.
    pub min_lr_fraction: f64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: 100,
            batch_size: 16,
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.03,
            min_lr_fraction: 0.01,
            eval_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.total_iterations == 0 {
            return fail("total_iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} must be in [0, 1]", self.warmup_fraction));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return fail(format!("min_lr_fraction {} must be in [0, 1]", self.min_lr_fraction));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Iteration {
        iteration: usize,
        /// 1-based schedule stage; 0 when the pipeline is disabled.
        stage: usize,
        kept_rate: f64,
        /// Tokens active in the reduced blocks for this iteration.
        active_tokens: usize,
        loss: f64,
        learning_rate: f64,
        /// Whole-batch analytic cost of this iteration.
        forward_flops: f64,
        backward_flops: f64,
        selection_overhead_flops: f64,
    },
    Eval {
        iteration: usize,
        accuracy: f64,
        samples: usize,
    },
    /// Emitted once if the loss or the activations leave the finite range;
    /// the run then aborts. `reason` is a short human-readable description
    /// (JSON cannot carry the non-finite value itself).
    Abort {
        iteration: usize,
        reason: String,
    },
    Summary {
        total_iterations: usize,
        final_accuracy: f64,
        /// Whole-run forward+backward cost actually spent.
        total_training_flops: f64,
        /// What the same run would have cost on the full token sequence.
        full_token_training_flops: f64,
        /// `full_token_training_flops / total_training_flops`.
        flops_ratio: f64,
        total_selection_overhead_flops: f64,
    },
}

/// The complete metrics stream of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
}

impl RunMetrics {
    /// Serializes the stream as JSON Lines. The output is byte-identical
    /// across runs with identical configurations and seeds.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses a stream written by [`RunMetrics::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("metrics line {}: {e}", lineno + 1))
            })?;
            records.push(record);
        }
        Ok(RunMetrics { records })
    }

    pub fn iterations(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, MetricRecord::Iteration { .. }))
    }
}

/// Aggregate result of one run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub final_accuracy: f64,
    /// Whole-run forward+backward cost actually spent (batch included).
    pub total_training_flops: f64,
    /// Full-token cost of a run of the same length.
    pub full_token_training_flops: f64,
    pub total_selection_overhead_flops: f64,
    /// Cumulative forward+backward cost of the blocks after the pipeline
    /// placement (after block 1 for pipeline-less runs, so baselines compare
    /// like for like), including the selection overhead when the pipeline
    /// is on.
    pub post_block_training_flops: f64,
    /// Files written when an output directory was given.
    pub artifacts: Vec<PathBuf>,
}

/// Classification accuracy of `model` on `data`, evaluated on the full token
/// sequence (the pipeline is always bypassed at inference).
pub fn evaluate(model: &TinyVit, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for chunk_start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (chunk_start + EVAL_CHUNK).min(data.len());
        let images = &data.images[chunk_start..end];
        let logits = model.forward_eval(images)?;
        for (row, &label) in logits.rows().into_iter().zip(&data.labels[chunk_start..end]) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_dataset(model: &TinyVit, data: &Dataset, name: &str) -> Result<()> {
    let cfg = model.config();
    if data.is_empty() {
        return Err(Error::Data(format!("{name} dataset is empty")));
    }
    if data.num_classes != cfg.num_classes {
        return Err(Error::Data(format!(
            "{name} dataset has {} classes; model expects {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let expected = (cfg.channels, cfg.image_size, cfg.image_size);
    if let Some(bad) = data.images.iter().find(|img| img.dim() != expected) {
        return Err(Error::Data(format!(
            "{name} dataset image is {:?}; model expects {expected:?}",
            bad.dim()
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns the metrics stream and cost summary.
///
/// With `output` set, the run writes `metrics.jsonl`, a checkpoint at every
/// stage boundary (`checkpoint_stage<k>.ckpt`), a final checkpoint
/// (`checkpoint_final.ckpt`), and a human-oriented `run.log` (the only file
/// allowed to contain wall-clock information).
pub fn train(
    model: &mut TinyVit,
    config: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    output: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.config().validate()?;
    check_dataset(model, train_data, "train")?;
    check_dataset(model, eval_data, "eval")?;

    let started = std::time::Instant::now();
    let mut artifacts = Vec::new();
    let mut metrics_file = match output {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.jsonl");
            artifacts.push(path.clone());
            Some(BufWriter::new(File::create(path)?))
        }
        None => None,
    };

    let model_config = model.config().clone();
    let pipeline = model_config.pipeline.clone();
    let n = model_config.num_tokens();
    let total = config.total_iterations;
    let mut sampler = BatchSampler::new(train_data.len(), config.batch_size, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, model.params(), config.weight_decay);

    let mut metrics = RunMetrics::default();
    let emit = |metrics: &mut RunMetrics,
                    file: &mut Option<BufWriter<File>>,
                    record: MetricRecord|
     -> Result<()> {
        if let Some(f) = file {
            serde_json::to_writer(&mut *f, &record)
                .map_err(|e| Error::Data(format!("cannot write metrics: {e}")))?;
            f.write_all(b"\n")?;
        }
        metrics.records.push(record);
        Ok(())
    };

    let full_per_iter =
        flops::training_flops(&model_config, n)?.total() * config.batch_size as f64;
    let apply_after = pipeline.as_ref().map(|t| t.apply_after_block).unwrap_or(1);
    let mut total_flops = 0.0;
    let mut total_overhead = 0.0;
    let mut post_block_total = 0.0;
    let mut final_accuracy = 0.0;

    for t in 1..=total {
        let lr = learning_rate_at(
            config.learning_rate,
            t,
            total,
            config.warmup_fraction,
            config.min_lr_fraction,
        );
        let batch_indices = sampler.next_batch().to_vec();
        let images: Vec<Array3<f64>> =
            batch_indices.iter().map(|&i| train_data.images[i].clone()).collect();
        let labels: Vec<usize> =
            batch_indices.iter().map(|&i| train_data.labels[i]).collect();

        // Divergence can surface either as a non-finite loss or, earlier, as
        // non-finite activations rejected inside the forward pass. Both end
        // the run with a diagnostic record.
        let abort = |metrics: &mut RunMetrics,
                         file: &mut Option<BufWriter<File>>,
                         reason: String|
         -> Error {
            let record = MetricRecord::Abort { iteration: t, reason };
            if let Some(f) = file {
                let _ = serde_json::to_writer(&mut *f, &record);
                let _ = f.write_all(b"\n");
                let _ = f.flush();
            }
            metrics.records.push(record);
            Error::NonFiniteLoss { iteration: t }
        };
        let pass = match model.forward_train(&images, &labels, pipeline.as_ref().map(|_| (t, total)))
        {
            Ok(pass) => pass,
            Err(Error::NonFinite { context }) => {
                return Err(abort(&mut metrics, &mut metrics_file, context))
            }
            Err(e) => return Err(e),
        };
        if !pass.mean_loss.is_finite() {
            return Err(abort(
                &mut metrics,
                &mut metrics_file,
                format!("loss is {}", pass.mean_loss),
            ));
        }
        model.params_mut().zero_grad();
        model.backward(&pass);
        optimizer.step(model.params_mut(), lr);

        let (stage, kept_rate, active) = match (&pipeline, &pass.routings[0]) {
            (Some(_), Some(routing)) => {
                (routing.stage.stage, routing.stage.kept_rate, routing.selected.len())
            }
            _ => (0, 1.0, n),
        };
        let per_sample = flops::training_flops(&model_config, active)?;
        let overhead = match &pipeline {
            Some(pipeline) => {
                flops::selection_overhead_flops(n, model_config.dim, &pipeline.schedule, stage)?
                    * config.batch_size as f64
            }
            None => 0.0,
        };
        let fwd = per_sample.forward * config.batch_size as f64;
        let bwd = per_sample.backward * config.batch_size as f64;
        total_flops += fwd + bwd;
        total_overhead += overhead;
        post_block_total += 3.0
            * flops::post_block_flops(&model_config, apply_after, active)?
            * config.batch_size as f64
            + overhead;

        emit(
            &mut metrics,
            &mut metrics_file,
            MetricRecord::Iteration {
                iteration: t,
                stage,
                kept_rate,
                active_tokens: active,
                loss: pass.mean_loss,
                learning_rate: lr,
                forward_flops: fwd,
                backward_flops: bwd,
                selection_overhead_flops: overhead,
            },
        )?;

        let eval_due =
            t == total || (config.eval_interval > 0 && t % config.eval_interval == 0);
        if eval_due {
            let accuracy = evaluate(model, eval_data)?;
            final_accuracy = accuracy;
            emit(
                &mut metrics,
                &mut metrics_file,
                MetricRecord::Eval { iteration: t, accuracy, samples: eval_data.len() },
            )?;
        }

        if let (Some(dir), Some(pipeline)) = (output, &pipeline) {
            let boundary = t == total
                || pipeline.schedule.current_stage(t, total)?
                    != pipeline.schedule.current_stage(t + 1, total)?;
            if boundary {
                let path = dir.join(format!("checkpoint_stage{stage}.ckpt"));
                model.save(&path)?;
                artifacts.push(path);
            }
        }
    }

    emit(
        &mut metrics,
        &mut metrics_file,
        MetricRecord::Summary {
            total_iterations: total,
            final_accuracy,
            total_training_flops: total_flops,
            full_token_training_flops: full_per_iter * total as f64,
            flops_ratio: full_per_iter * total as f64 / total_flops,
            total_selection_overhead_flops: total_overhead,
        },
    )?;

    if let Some(f) = &mut metrics_file {
        f.flush()?;
    }
    if let Some(dir) = output {
        let final_path = dir.join("checkpoint_final.ckpt");
        model.save(&final_path)?;
        artifacts.push(final_path);
        let log_path = dir.join("run.log");
        let mut log = BufWriter::new(File::create(&log_path)?);
        writeln!(log, "iterations: {total}")?;
        writeln!(log, "final accuracy: {final_accuracy:.4}")?;
        writeln!(log, "wall seconds: {:.3}", started.elapsed().as_secs_f64())?;
        log.flush()?;
        artifacts.push(log_path);
    }

    Ok(TrainOutcome {
        metrics,
        final_accuracy,
        total_training_flops: total_flops,
        full_token_training_flops: full_per_iter * total as f64,
        total_selection_overhead_flops: total_overhead,
        post_block_training_flops: post_block_total,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::pipeline::PipelineConfig;
    use crate::schedule::GrowthSchedule;
    use crate::vit::ModelConfig;

    fn model_config(pipeline: bool) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
            pipeline: pipeline.then(|| PipelineConfig::new(GrowthSchedule::new(3, 0.5, 2).unwrap())),
        }
    }

    fn datasets(seed: u64) -> (Dataset, Dataset) {
        synthetic(&SyntheticSpec {
            num_classes: 4,
            image_size: 8,
            channels: 1,
            patch_size: 4,
            train_samples: 32,
            eval_samples: 16,
            noise: 0.2,
            seed,
        })
        .unwrap()
    }

    fn quick_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            total_iterations: iterations,
            batch_size: 8,
            learning_rate: 3e-3,
            eval_interval: 0,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stages_progress_and_targets_hold() {
        let (train_data, eval_data) = datasets(1);
        let mut model = TinyVit::new(model_config(true), 11).unwrap();
        let outcome =
            train(&mut model, &quick_config(9), &train_data, &eval_data, None).unwrap();

        let mut seen_stages = Vec::new();
        for record in outcome.metrics.iterations() {
            let MetricRecord::Iteration { stage, active_tokens, forward_flops, backward_flops, .. } =
                record
            else {
                unreachable!()
            };
            seen_stages.push(*stage);
            // 5 tokens, rates (0.5, 0.75, 1.0) → targets (2, 3, 5).
            let expected = match stage {
                1 => 2,
                2 => 3,
                3 => 5,
                _ => panic!("stage {stage}"),
            };
            assert_eq!(*active_tokens, expected);
            assert_eq!(*backward_flops, 2.0 * *forward_flops);
        }
        assert_eq!(seen_stages, vec![1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn metrics_sum_matches_the_analytic_per_stage_cost() {
        let (train_data, eval_data) = datasets(2);
        let config = model_config(true);
        let mut model = TinyVit::new(config.clone(), 3).unwrap();
        let tc = quick_config(9);
        let outcome = train(&mut model, &tc, &train_data, &eval_data, None).unwrap();

        let mut expected = 0.0;
        for (active, iters) in [(2, 3.0), (3, 3.0), (5, 3.0)] {
            expected += flops::training_flops(&config, active).unwrap().total()
                * tc.batch_size as f64
                * iters;
        }
        assert_eq!(outcome.total_training_flops, expected);
        assert!(outcome.full_token_training_flops > outcome.total_training_flops);
    }

    #[test]
    fn metrics_streams_are_byte_identical_across_runs() {
        let (train_data, eval_data) = datasets(3);
        let tc = TrainConfig { eval_interval: 4, ..quick_config(10) };
        let run = || {
            let mut model = TinyVit::new(model_config(true), 5).unwrap();
            train(&mut model, &tc, &train_data, &eval_data, None).unwrap().metrics.to_jsonl()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.ends_with('\n'));
        // And the stream parses back losslessly.
        let parsed = RunMetrics::from_jsonl(&a).unwrap();
        assert_eq!(parsed.to_jsonl(), a);
    }

    #[test]
    fn disabled_pipeline_runs_at_full_tokens() {
        let (train_data, eval_data) = datasets(4);
        let mut model = TinyVit::new(model_config(false), 5).unwrap();
        let outcome =
            train(&mut model, &quick_config(4), &train_data, &eval_data, None).unwrap();
        for record in outcome.metrics.iterations() {
            let MetricRecord::Iteration { stage, active_tokens, selection_overhead_flops, .. } =
                record
            else {
                unreachable!()
            };
            assert_eq!(*stage, 0);
            assert_eq!(*active_tokens, 5);
            assert_eq!(*selection_overhead_flops, 0.0);
        }
        assert_eq!(outcome.total_training_flops, outcome.full_token_training_flops);
        assert_eq!(outcome.total_selection_overhead_flops, 0.0);
    }

    #[test]
    fn training_reduces_the_loss() {
        let (train_data, eval_data) = datasets(5);
        let mut model = TinyVit::new(model_config(true), 9).unwrap();
        let outcome =
            train(&mut model, &quick_config(60), &train_data, &eval_data, None).unwrap();
        let losses: Vec<f64> = outcome
            .metrics
            .iterations()
            .map(|r| match r {
                MetricRecord::Iteration { loss, .. } => *loss,
                _ => unreachable!(),
            })
            .collect();
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "loss did not fall: {first} → {last}");
        assert!(outcome.final_accuracy > 1.0 / 4.0, "no better than chance");
    }

    #[test]
    fn checkpoints_appear_at_stage_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let (train_data, eval_data) = datasets(6);
        let mut model = TinyVit::new(model_config(true), 2).unwrap();
        let outcome =
            train(&mut model, &quick_config(9), &train_data, &eval_data, Some(dir.path()))
                .unwrap();
        for name in [
            "metrics.jsonl",
            "checkpoint_stage1.ckpt",
            "checkpoint_stage2.ckpt",
            "checkpoint_stage3.ckpt",
            "checkpoint_final.ckpt",
            "run.log",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        assert_eq!(outcome.artifacts.len(), 6);
        // Checkpoints are loadable and the final one matches the model.
        let final_model = TinyVit::load(&dir.path().join("checkpoint_final.ckpt")).unwrap();
        for (a, b) in model.params().iter().zip(final_model.params().iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        // The on-disk metrics equal the in-memory stream.
        let disk = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(disk, outcome.metrics.to_jsonl());
    }

    #[test]
    fn diverging_runs_abort_with_a_diagnostic() {
        let (train_data, eval_data) = datasets(7);
        let mut model = TinyVit::new(model_config(true), 2).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e18, // guaranteed blow-up
            optimizer: OptimizerKind::Sgd,
            ..quick_config(30)
        };
        let err = train(&mut model, &tc, &train_data, &eval_data, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "got {err}");
    }

    #[test]
    fn dataset_and_config_mismatches_are_rejected() {
        let (train_data, eval_data) = datasets(8);
        let mut model = TinyVit::new(model_config(true), 2).unwrap();

        let bad = TrainConfig { batch_size: 0, ..quick_config(4) };
        assert!(train(&mut model, &bad, &train_data, &eval_data, None).is_err());

        let mut wrong_classes = train_data.clone();
        wrong_classes.num_classes = 7;
        assert!(
            train(&mut model, &quick_config(4), &wrong_classes, &eval_data, None).is_err()
        );

        let mut wrong_shape = train_data.clone();
        wrong_shape.images[0] = Array3::zeros((1, 4, 4));
        assert!(train(&mut model, &quick_config(4), &wrong_shape, &eval_data, None).is_err());
    }

    #[test]
    fn evaluate_is_deterministic_and_bounded() {
        let (_, eval_data) = datasets(9);
        let model = TinyVit::new(model_config(false), 4).unwrap();
        let a = evaluate(&model, &eval_data).unwrap();
        let b = evaluate(&model, &eval_data).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }
}
