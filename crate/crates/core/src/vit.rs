//! A minimal trainable vision transformer with staged token growth.
//!
//! The model is a standard pre-norm ViT: patch embedding, a learned class
//! token prepended at sequence position 1, learned position embeddings,
//! `depth` blocks of multi-head self-attention and a GELU MLP, a final layer
//! norm, and a linear head on the class row. Everything runs in `f64` on a
//! per-sample [`Tape`](crate::autodiff::Tape).
//!
//! When token growth is enabled, the training forward pass hands the output
//! of block `apply_after_block` to [`crate::pipeline::run_pipeline`] and
//! continues on the merged (reduced) sequence; evaluation always bypasses the
//! pipeline and uses the full sequence. Because the class token sits at
//! index 1, the strided initialization always keeps it, so the head input is
//! well defined at every stage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape};
use crate::distance::DistanceMetric;
use crate::error::{Error, Result};
use crate::pipeline::{self, MergeAssignment, PipelineConfig, PipelineOutput};
use crate::schedule::{GrowthSchedule, StageState};
use crate::tokens::{IndexSet, TokenSet};

/// Magic number of the binary checkpoint format (`b"TVITCKP1"`).
pub const CHECKPOINT_MAGIC: u64 = u64::from_le_bytes(*b"TVITCKP1");
/// Current version of the binary checkpoint format.
pub const CHECKPOINT_VERSION: u64 = 1;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Geometry and token-growth placement of a [`TinyVit`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input images are `channels × image_size × image_size`.
    pub image_size: usize,
    /// Side length of the square patches the image is cut into.
    pub patch_size: usize,
    /// Number of image channels.
    pub channels: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Embedding width.
    pub dim: usize,
    /// Number of attention heads; must divide `dim`.
    pub heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: f64,
    /// Number of output classes.
    pub num_classes: usize,
    /// Token-growth pipeline applied during training, if any.
    pub pipeline: Option<PipelineConfig>,
}

impl ModelConfig {
    /// Number of patches per image.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Sequence length: patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Features per patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Width of one attention head.
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Hidden width of the MLP.
    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Checks the geometry for internal consistency.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidModel(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.hidden_dim() == 0 {
            return fail(format!("mlp_ratio {} yields an empty MLP", self.mlp_ratio));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if let Some(pipeline) = &self.pipeline {
            if pipeline.apply_after_block >= self.depth {
                return fail(format!(
                    "apply_after_block {} must be less than depth {} so at least one block \
                     sees the reduced sequence",
                    pipeline.apply_after_block, self.depth
                ));
            }
        }
        Ok(())
    }
}

/// One named parameter matrix with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// All parameters of a model, in a fixed construction order that doubles as
/// the tape slot numbering and the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        let grad = Array2::zeros(value.dim());
        self.params.push(Param { name: name.into(), value, grad });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param {
        &mut self.params[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Resets every gradient buffer to exactly zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

/// How one sample's tokens were reduced during a training forward pass.
#[derive(Debug, Clone)]
pub struct TokenRouting {
    /// Schedule position the pipeline ran at.
    pub stage: StageState,
    /// Selected token indices (1-based).
    pub selected: IndexSet,
    /// Merge groups as 0-based row indices into the block output, one group
    /// per selected token, each starting with the selected row itself.
    pub groups: Vec<Vec<usize>>,
    /// The raw merge assignment (1-based), for inspection.
    pub assignment: MergeAssignment,
}

impl TokenRouting {
    fn from_pipeline(out: &PipelineOutput) -> Self {
        let groups = out
            .assignment
            .groups(out.selection.selected())
            .into_iter()
            .map(|g| g.into_iter().map(|idx| idx - 1).collect())
            .collect();
        TokenRouting {
            stage: out.stage,
            selected: out.selection.selected().clone(),
            groups,
            assignment: out.assignment.clone(),
        }
    }
}

/// The recorded tapes, losses, and routing decisions of one forward pass.
pub struct ForwardPass {
    tapes: Vec<Tape>,
    loss_nodes: Vec<NodeId>,
    /// Per-sample logits, one row per sample.
    pub logits: Array2<f64>,
    /// Per-sample cross-entropy losses.
    pub losses: Vec<f64>,
    /// Mean loss over the batch.
    pub mean_loss: f64,
    /// Per-sample token routing; `None` when the pipeline was bypassed.
    pub routings: Vec<Option<TokenRouting>>,
}

/// Cuts a `channels × H × W` image into the row-major patch matrix the model
/// consumes: one row per patch (left-to-right, top-to-bottom), each row
/// laid out channel-major, then pixel-row, then pixel-column.
pub fn patchify(image: &Array3<f64>, patch_size: usize) -> Result<Array2<f64>> {
    let (channels, height, width) = image.dim();
    if height != width || patch_size == 0 || height % patch_size != 0 {
        return Err(Error::Data(format!(
            "image {channels}×{height}×{width} cannot be cut into {patch_size}×{patch_size} patches"
        )));
    }
    let per_side = height / patch_size;
    let mut out = Array2::zeros((per_side * per_side, channels * patch_size * patch_size));
    for py in 0..per_side {
        for px in 0..per_side {
            let row = py * per_side + px;
            let mut col = 0;
            for c in 0..channels {
                for iy in 0..patch_size {
                    for ix in 0..patch_size {
                        out[[row, col]] =
                            image[[c, py * patch_size + iy, px * patch_size + ix]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Slot numbers of the parameters used while recording one forward pass.
struct Slots {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockSlots>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

struct BlockSlots {
    norm1_g: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_g: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// The model: a configuration plus its parameter store.
#[derive(Debug, Clone)]
pub struct TinyVit {
    config: ModelConfig,
    params: ParameterStore,
    slots: std::ops::Range<usize>,
}

impl TinyVit {
    /// Builds a model with truncated-normal(0, 0.02) weights, zero biases,
    /// and unit layer-norm gains, all drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut trunc = |shape: (usize, usize)| -> Array2<f64> {
            Array2::from_shape_fn(shape, |_| loop {
                let x = normal.sample(&mut rng);
                if x.abs() <= 2.0 * INIT_STD {
                    break x;
                }
            })
        };

        let d = config.dim;
        let n = config.num_tokens();
        let hidden = config.hidden_dim();
        let mut params = ParameterStore::default();
        params.add("patch_embed.weight", trunc((config.patch_dim(), d)));
        params.add("patch_embed.bias", Array2::zeros((1, d)));
        params.add("cls_token", trunc((1, d)));
        params.add("pos_embed", trunc((n, d)));
        for b in 0..config.depth {
            params.add(format!("blocks.{b}.norm1.gain"), Array2::ones((1, d)));
            params.add(format!("blocks.{b}.norm1.bias"), Array2::zeros((1, d)));
            params.add(format!("blocks.{b}.attn.qkv.weight"), trunc((d, 3 * d)));
            params.add(format!("blocks.{b}.attn.qkv.bias"), Array2::zeros((1, 3 * d)));
            params.add(format!("blocks.{b}.attn.proj.weight"), trunc((d, d)));
            params.add(format!("blocks.{b}.attn.proj.bias"), Array2::zeros((1, d)));
            params.add(format!("blocks.{b}.norm2.gain"), Array2::ones((1, d)));
            params.add(format!("blocks.{b}.norm2.bias"), Array2::zeros((1, d)));
            params.add(format!("blocks.{b}.mlp.fc1.weight"), trunc((d, hidden)));
            params.add(format!("blocks.{b}.mlp.fc1.bias"), Array2::zeros((1, hidden)));
            params.add(format!("blocks.{b}.mlp.fc2.weight"), trunc((hidden, d)));
            params.add(format!("blocks.{b}.mlp.fc2.bias"), Array2::zeros((1, d)));
        }
        params.add("norm.gain", Array2::ones((1, d)));
        params.add("norm.bias", Array2::zeros((1, d)));
        params.add("head.weight", trunc((d, config.num_classes)));
        params.add("head.bias", Array2::zeros((1, config.num_classes)));

        let slots = 0..params.len();
        Ok(TinyVit { config, params, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn slot_layout(&self) -> Slots {
        let mut next = self.slots.start;
        let mut take = || {
            let s = next;
            next += 1;
            s
        };
        let (patch_w, patch_b, cls, pos) = (take(), take(), take(), take());
        let blocks = (0..self.config.depth)
            .map(|_| BlockSlots {
                norm1_g: take(),
                norm1_b: take(),
                qkv_w: take(),
                qkv_b: take(),
                proj_w: take(),
                proj_b: take(),
                norm2_g: take(),
                norm2_b: take(),
                fc1_w: take(),
                fc1_b: take(),
                fc2_w: take(),
                fc2_b: take(),
            })
            .collect();
        Slots {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g: take(),
            norm_b: take(),
            head_w: take(),
            head_b: take(),
        }
    }

    fn param_node(&self, tape: &mut Tape, slot: usize) -> NodeId {
        tape.param(slot, self.params.get(slot).value.clone())
    }

    fn record_block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        slots: &BlockSlots,
    ) -> NodeId {
        let d = self.config.dim;
        let dh = self.config.head_dim();

        let n1g = self.param_node(tape, slots.norm1_g);
        let n1b = self.param_node(tape, slots.norm1_b);
        let normed = tape.layer_norm(x, n1g, n1b);

        let qkv_w = self.param_node(tape, slots.qkv_w);
        let qkv_b = self.param_node(tape, slots.qkv_b);
        let qkv = tape.matmul(normed, qkv_w);
        let qkv = tape.add_row(qkv, qkv_b);

        let mut head_outputs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh);
            let k = tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            let scores = tape.matmul_nt(q, k);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax_rows(scaled);
            head_outputs.push(tape.matmul(probs, v));
        }
        let joined = tape.concat_cols(head_outputs);
        let proj_w = self.param_node(tape, slots.proj_w);
        let proj_b = self.param_node(tape, slots.proj_b);
        let attn = tape.matmul(joined, proj_w);
        let attn = tape.add_row(attn, proj_b);
        let x = tape.add(x, attn);

        let n2g = self.param_node(tape, slots.norm2_g);
        let n2b = self.param_node(tape, slots.norm2_b);
        let normed = tape.layer_norm(x, n2g, n2b);
        let fc1_w = self.param_node(tape, slots.fc1_w);
        let fc1_b = self.param_node(tape, slots.fc1_b);
        let hidden = tape.matmul(normed, fc1_w);
        let hidden = tape.add_row(hidden, fc1_b);
        let activated = tape.gelu(hidden);
        let fc2_w = self.param_node(tape, slots.fc2_w);
        let fc2_b = self.param_node(tape, slots.fc2_b);
        let mlp = tape.matmul(activated, fc2_w);
        let mlp = tape.add_row(mlp, fc2_b);
        tape.add(x, mlp)
    }

    /// Routing source for one sample: either run the pipeline on the block
    /// output (train mode) or use a precomputed routing (frozen mode).
    #[allow(clippy::type_complexity)]
    fn record_sample(
        &self,
        image: &Array3<f64>,
        routing_plan: RoutingPlan<'_>,
    ) -> Result<(Tape, NodeId, Option<TokenRouting>)> {
        let cfg = &self.config;
        let slots = self.slot_layout();
        let patches = patchify(image, cfg.patch_size)?;
        if patches.dim() != (cfg.num_patches(), cfg.patch_dim()) {
            return Err(Error::Data(format!(
                "image yields {} patches of {} features; model expects {}×{}",
                patches.nrows(),
                patches.ncols(),
                cfg.num_patches(),
                cfg.patch_dim()
            )));
        }

        let mut tape = Tape::new();
        let input = tape.input(patches);
        let patch_w = self.param_node(&mut tape, slots.patch_w);
        let patch_b = self.param_node(&mut tape, slots.patch_b);
        let embedded = tape.matmul(input, patch_w);
        let embedded = tape.add_row(embedded, patch_b);
        let cls = self.param_node(&mut tape, slots.cls);
        let with_cls = tape.concat_rows(cls, embedded);
        let pos = self.param_node(&mut tape, slots.pos);
        let mut x = tape.add(with_cls, pos);

        let apply_after = match &routing_plan {
            RoutingPlan::Bypass => None,
            _ => self.config.pipeline.as_ref().map(|t| t.apply_after_block),
        };

        let mut routing: Option<TokenRouting> = None;
        let mut reduce = |tape: &mut Tape, x: NodeId, plan: &RoutingPlan<'_>| -> Result<NodeId> {
            let chosen = match plan {
                RoutingPlan::Bypass => return Ok(x),
                RoutingPlan::Live { iteration, total } => {
                    let config =
                        self.config.pipeline.as_ref().expect("live plan requires pipeline config");
                    let features = TokenSet::new(tape.value(x).clone())?;
                    let out = pipeline::run_pipeline(&features, config, *iteration, *total)?;
                    TokenRouting::from_pipeline(&out)
                }
                RoutingPlan::Frozen(r) => (*r).clone(),
            };
            let reduced = tape.mean_groups(x, chosen.groups.clone());
            routing = Some(chosen);
            Ok(reduced)
        };

        if apply_after == Some(0) {
            x = reduce(&mut tape, x, &routing_plan)?;
        }
        for (b, block) in slots.blocks.iter().enumerate() {
            x = self.record_block(&mut tape, x, block);
            if apply_after == Some(b + 1) {
                x = reduce(&mut tape, x, &routing_plan)?;
            }
        }

        if let (Some(r), Some(pipeline)) = (&routing, &self.config.pipeline) {
            if pipeline.restore_indices {
                let index: Vec<usize> = r.selected.iter().map(|idx| idx - 1).collect();
                x = tape.scatter_rows(x, index, cfg.num_tokens());
            }
        }

        let ng = self.param_node(&mut tape, slots.norm_g);
        let nb = self.param_node(&mut tape, slots.norm_b);
        let x = tape.layer_norm(x, ng, nb);
        let cls_row = tape.gather_rows(x, vec![0]);
        let head_w = self.param_node(&mut tape, slots.head_w);
        let head_b = self.param_node(&mut tape, slots.head_b);
        let logits = tape.matmul(cls_row, head_w);
        let logits = tape.add_row(logits, head_b);
        Ok((tape, logits, routing))
    }

    fn forward_batch(
        &self,
        images: &[Array3<f64>],
        labels: &[usize],
        plans: Vec<RoutingPlan<'_>>,
    ) -> Result<ForwardPass> {
        if images.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if images.len() != labels.len() || images.len() != plans.len() {
            return Err(Error::Data(format!(
                "batch size mismatch: {} images, {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let mut tapes = Vec::with_capacity(images.len());
        let mut loss_nodes = Vec::with_capacity(images.len());
        let mut routings = Vec::with_capacity(images.len());
        let mut losses = Vec::with_capacity(images.len());
        let mut logits = Array2::zeros((images.len(), self.config.num_classes));
        for (i, ((image, &label), plan)) in
            images.iter().zip(labels.iter()).zip(plans).enumerate()
        {
            let (mut tape, logit_node, routing) = self.record_sample(image, plan)?;
            logits.row_mut(i).assign(&tape.value(logit_node).row(0));
            let loss = tape.cross_entropy(logit_node, label);
            losses.push(tape.value(loss)[[0, 0]]);
            tapes.push(tape);
            loss_nodes.push(loss);
            routings.push(routing);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok(ForwardPass { tapes, loss_nodes, logits, losses, mean_loss, routings })
    }

    /// Training forward pass. With `schedule_pos = Some((iteration, total))`
    /// and a configured pipeline, each sample's tokens are reduced at the
    /// configured block; otherwise the full sequence is used.
    pub fn forward_train(
        &self,
        images: &[Array3<f64>],
        labels: &[usize],
        schedule_pos: Option<(usize, usize)>,
    ) -> Result<ForwardPass> {
        let plan = match (schedule_pos, &self.config.pipeline) {
            (Some((iteration, total)), Some(_)) => RoutingPlan::Live { iteration, total },
            _ => RoutingPlan::Bypass,
        };
        let plans = images.iter().map(|_| plan.clone()).collect();
        self.forward_batch(images, labels, plans)
    }

    /// Training forward pass with the token routing held fixed per sample
    /// (`None` bypasses reduction for that sample). Used to probe gradients:
    /// with the routing frozen, the loss is differentiable in the parameters.
    pub fn forward_with_routing(
        &self,
        images: &[Array3<f64>],
        labels: &[usize],
        routings: &[Option<TokenRouting>],
    ) -> Result<ForwardPass> {
        if routings.len() != images.len() {
            return Err(Error::Data("one routing per image required".into()));
        }
        let plans = routings
            .iter()
            .map(|r| match r {
                Some(r) => RoutingPlan::Frozen(r),
                None => RoutingPlan::Bypass,
            })
            .collect();
        self.forward_batch(images, labels, plans)
    }

    /// Inference forward pass: full token sequence, no pipeline, no labels.
    pub fn forward_eval(&self, images: &[Array3<f64>]) -> Result<Array2<f64>> {
        let labels = vec![0; images.len()];
        let plans = images.iter().map(|_| RoutingPlan::Bypass).collect();
        let pass = self.forward_batch(images, &labels, plans)?;
        Ok(pass.logits)
    }

    /// Accumulates `d(mean batch loss)/d(params)` into the parameter
    /// gradients. Call [`ParameterStore::zero_grad`] first for a fresh
    /// gradient; accumulation across calls is intentional.
    pub fn backward(&mut self, pass: &ForwardPass) {
        let scale = 1.0 / pass.tapes.len() as f64;
        for (tape, &root) in pass.tapes.iter().zip(&pass.loss_nodes) {
            let grads = tape.backward(root, scale);
            for (slot, grad) in grads.iter() {
                self.params.get_mut(slot).grad += grad;
            }
        }
    }

    /// Writes config and parameters to `path` in the `TVITCKP1` binary
    /// format: a little-endian header followed by each parameter's name,
    /// shape, and row-major `f64` payload in store order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let pipeline = self.config.pipeline.as_ref();
        let mut header: Vec<u64> = vec![
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            self.config.image_size as u64,
            self.config.patch_size as u64,
            self.config.channels as u64,
            self.config.depth as u64,
            self.config.dim as u64,
            self.config.heads as u64,
            self.config.num_classes as u64,
            self.config.mlp_ratio.to_bits(),
            u64::from(pipeline.is_some()),
        ];
        if let Some(pipeline) = pipeline {
            header.extend([
                match pipeline.metric {
                    DistanceMetric::Cosine => 0,
                    DistanceMetric::Euclidean => 1,
                    DistanceMetric::Manhattan => 2,
                },
                pipeline.apply_after_block as u64,
                u64::from(pipeline.restore_indices),
                pipeline.schedule.num_stages() as u64,
                pipeline.schedule.first_stage_rate().to_bits(),
                pipeline.schedule.repetition_steps() as u64,
            ]);
        }
        header.push(self.params.len() as u64);
        for word in header {
            w.write_all(&word.to_le_bytes())?;
        }
        for p in self.params.iter() {
            w.write_all(&(p.name.len() as u64).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.nrows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.ncols() as u64).to_le_bytes())?;
            for v in p.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint written by [`TinyVit::save`], re-validating the
    /// configuration and checking every parameter's name and shape against
    /// the reconstructed layout.
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let mut r = BufReader::new(File::open(path)?);
        let next = |r: &mut BufReader<File>| -> Result<u64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(&display, "truncated header"))?;
            Ok(u64::from_le_bytes(buf))
        };
        if next(&mut r)? != CHECKPOINT_MAGIC {
            return Err(Error::format(&display, "bad magic; not a checkpoint"));
        }
        let version = next(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(&display, format!("unsupported version {version}")));
        }
        let image_size = next(&mut r)? as usize;
        let patch_size = next(&mut r)? as usize;
        let channels = next(&mut r)? as usize;
        let depth = next(&mut r)? as usize;
        let dim = next(&mut r)? as usize;
        let heads = next(&mut r)? as usize;
        let num_classes = next(&mut r)? as usize;
        let mlp_ratio = f64::from_bits(next(&mut r)?);
        let pipeline = if next(&mut r)? != 0 {
            let metric = match next(&mut r)? {
                0 => DistanceMetric::Cosine,
                1 => DistanceMetric::Euclidean,
                2 => DistanceMetric::Manhattan,
                other => {
                    return Err(Error::format(&display, format!("unknown metric tag {other}")))
                }
            };
            let apply_after_block = next(&mut r)? as usize;
            let restore_indices = next(&mut r)? != 0;
            let num_stages = next(&mut r)? as usize;
            let first_stage_rate = f64::from_bits(next(&mut r)?);
            let repetition_steps = next(&mut r)? as usize;
            let schedule = GrowthSchedule::new(num_stages, first_stage_rate, repetition_steps)?;
            Some(PipelineConfig { schedule, metric, apply_after_block, restore_indices })
        } else {
            None
        };
        let num_params = next(&mut r)? as usize;

        let config = ModelConfig {
            image_size,
            patch_size,
            channels,
            depth,
            dim,
            heads,
            mlp_ratio,
            num_classes,
            pipeline,
        };
        let mut model = TinyVit::new(config, 0)?;
        if num_params != model.params.len() {
            return Err(Error::format(
                &display,
                format!("{} parameters on disk, {} expected", num_params, model.params.len()),
            ));
        }
        for slot in 0..num_params {
            let name_len = next(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::format(&display, "truncated parameter name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format(&display, "parameter name is not UTF-8"))?;
            let rows = next(&mut r)? as usize;
            let cols = next(&mut r)? as usize;
            let expected = model.params.get(slot);
            if expected.name != name || expected.value.dim() != (rows, cols) {
                return Err(Error::format(
                    &display,
                    format!(
                        "parameter {slot} is {name} [{rows}×{cols}]; expected {} [{}×{}]",
                        expected.name,
                        expected.value.nrows(),
                        expected.value.ncols()
                    ),
                ));
            }
            let mut flat = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::format(&display, "truncated parameter payload"))?;
                flat.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows, cols), flat)
                .expect("shape matches element count");
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::format(&display, format!("parameter {name} is non-finite")));
            }
            model.params.get_mut(slot).value = value;
        }
        Ok(model)
    }
}

/// Per-sample decision on how to reduce tokens during a forward pass.
#[derive(Clone)]
enum RoutingPlan<'a> {
    /// No reduction; the full sequence flows through every block.
    Bypass,
    /// Run the pipeline on the block output at this schedule position.
    Live { iteration: usize, total: usize },
    /// Apply a previously computed routing verbatim.
    Frozen(&'a TokenRouting),
}
