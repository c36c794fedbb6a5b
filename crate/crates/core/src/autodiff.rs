//! A small reverse-mode autodiff tape over `f64` matrices.
//!
//! The transformer in [`crate::vit`] records one tape per sample: every
//! operation eagerly computes its forward value and appends a node, and
//! [`Tape::backward`] walks the nodes in reverse, accumulating gradients for
//! every parameter leaf. The op set is exactly what a pre-norm ViT with
//! token selection needs — matrix products, row broadcasts, concatenation
//! and slicing, softmax, layer norm, GELU, row gather/scatter, group
//! averaging, and a cross-entropy head.
//!
//! Shapes are validated with assertions: a mismatch is a bug in the calling
//! code, not a recoverable condition.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// Epsilon added to the variance inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEFF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient is tracked.
    Input,
    /// Parameter leaf identified by the caller's slot id.
    Param(usize),
    Add(NodeId, NodeId),
    /// `a + row` with `row` a `1 × c` vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    /// `[a; b]` stacked by rows.
    ConcatRows(NodeId, NodeId),
    /// `[p₁ p₂ …]` joined by columns.
    ConcatCols(Vec<NodeId>),
    /// Columns `start..end` of `a`.
    SliceCols(NodeId, usize, usize),
    SoftmaxRows(NodeId),
    /// Row-wise layer norm with learned gain and bias (`1 × c` each).
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// GELU, tanh approximation.
    Gelu(NodeId),
    /// Row `i` of the output is row `rows[i]` of the input (0-based).
    GatherRows(NodeId, Vec<usize>),
    /// Row `i` of the output is the mean of input rows `groups[i]` (0-based).
    MeanGroups(NodeId, Vec<Vec<usize>>),
    /// Row `i` of the input lands at output row `index[i]`; other output
    /// rows are zero. `index` entries must be distinct.
    ScatterRows { x: NodeId, index: Vec<usize> },
    /// Cross-entropy of a `1 × k` logits row against a class index; `1 × 1`.
    CrossEntropy { logits: NodeId, class: usize },
    /// `Σ a ⊙ w` as a `1 × 1` value; a scalar probe used by tests.
    FrobeniusDot(NodeId, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by one backward pass, keyed by parameter slot.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<usize, Array2<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to the parameter in `slot`, if the
    /// parameter participated in the graph.
    pub fn param(&self, slot: usize) -> Option<&Array2<f64>> {
        self.params.get(&slot)
    }

    /// Iterates over `(slot, gradient)` pairs in unspecified order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-row (mean, 1/√(var+ε), normalized x̂) for layer norm.
fn layer_norm_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mu = mean[i];
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = inv;
        row.mapv_inplace(|v| (v - mu) * inv);
    }
    (mean, inv_std, xhat)
}

fn gelu_value(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Records a constant input (no gradient).
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Records a parameter leaf. `slot` identifies the parameter in the
    /// [`Gradients`] returned by [`Tape::backward`].
    pub fn param(&mut self, slot: usize, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Param(slot))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be 1 × c");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row: width mismatch");
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul: inner dim mismatch");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "matmul_nt: width mismatch");
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "concat_rows: width mismatch");
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("widths checked");
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        assert!(start < end && end <= self.value(a).ncols(), "slice_cols: bad range");
        let value = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows_value(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let c = self.value(x).ncols();
        assert_eq!(self.value(gain).dim(), (1, c), "layer_norm: gain must be 1 × c");
        assert_eq!(self.value(bias).dim(), (1, c), "layer_norm: bias must be 1 × c");
        let (_, _, xhat) = layer_norm_stats(self.value(x));
        let value = &xhat * &self.value(gain).row(0) + self.value(bias).row(0);
        self.push(value, Op::LayerNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(gelu_value);
        self.push(value, Op::Gelu(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        assert!(rows.iter().all(|&r| r < self.value(a).nrows()), "gather_rows: row out of range");
        let src = self.value(a);
        let mut value = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        self.push(value, Op::GatherRows(a, rows))
    }

    pub fn mean_groups(&mut self, a: NodeId, groups: Vec<Vec<usize>>) -> NodeId {
        let src = self.value(a);
        assert!(
            groups.iter().flatten().all(|&r| r < src.nrows()),
            "mean_groups: row out of range"
        );
        assert!(groups.iter().all(|g| !g.is_empty()), "mean_groups: empty group");
        let mut value = Array2::zeros((groups.len(), src.ncols()));
        for (i, group) in groups.iter().enumerate() {
            let mut acc = src.row(group[0]).to_owned();
            for &m in &group[1..] {
                acc += &src.row(m);
            }
            acc /= group.len() as f64;
            value.row_mut(i).assign(&acc);
        }
        self.push(value, Op::MeanGroups(a, groups))
    }

    pub fn scatter_rows(&mut self, x: NodeId, index: Vec<usize>, rows: usize) -> NodeId {
        let src = self.value(x);
        assert_eq!(index.len(), src.nrows(), "scatter_rows: one target per input row");
        assert!(index.iter().all(|&r| r < rows), "scatter_rows: target out of range");
        let mut value = Array2::zeros((rows, src.ncols()));
        for (i, &r) in index.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        self.push(value, Op::ScatterRows { x, index })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, class: usize) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.nrows(), 1, "cross_entropy: logits must be 1 × k");
        assert!(class < z.ncols(), "cross_entropy: class out of range");
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[[0, class]];
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy { logits, class })
    }

    pub fn frobenius_dot(&mut self, a: NodeId, weights: Array2<f64>) -> NodeId {
        assert_eq!(self.value(a).dim(), weights.dim(), "frobenius_dot: shape mismatch");
        let value = (self.value(a) * &weights).sum();
        self.push(Array2::from_elem((1, 1), value), Op::FrobeniusDot(a, weights))
    }

    /// Runs the backward pass from `root` (which must be `1 × 1`) with the
    /// given seed gradient and returns the parameter gradients.
    pub fn backward(&self, root: NodeId, seed: f64) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), seed));

        let mut out = Gradients::default();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(slot) => {
                    out.params
                        .entry(*slot)
                        .and_modify(|acc| *acc += &g)
                        .or_insert_with(|| g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let row_grad =
                        g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, &g * *factor);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).nrows();
                    let da = g.slice(ndarray::s![..split, ..]).to_owned();
                    let db = g.slice(ndarray::s![split.., ..]).to_owned();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &part in parts {
                        let width = self.value(part).ncols();
                        let dp = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        accumulate(&mut grads, part, dp);
                        start += width;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut da: Array2<f64> = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let yi = y.row(i);
                        let gi = g.row(i);
                        let inner: f64 = yi.iter().zip(gi.iter()).map(|(y, g)| y * g).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = yi[j] * (gi[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (_, inv_std, xhat) = layer_norm_stats(self.value(*x));
                    let gain_row = self.value(*gain).row(0).to_owned();
                    let d = xhat.ncols() as f64;

                    let dgain = (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));

                    let mut dx = Array2::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dxhat: Vec<f64> =
                            (0..xhat.ncols()).map(|j| g[[i, j]] * gain_row[j]).collect();
                        let m1: f64 = dxhat.iter().sum::<f64>() / d;
                        let m2: f64 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * xhat[[i, j]])
                            .sum::<f64>()
                            / d;
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = inv_std[i] * (dxhat[j] - m1 - xhat[[i, j]] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Gelu(a) => {
                    let da = self.value(*a).mapv(gelu_derivative) * &g;
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let mut da: Array2<f64> = Array2::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut target = da.row_mut(r);
                        target += &g.row(i);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanGroups(a, groups) => {
                    let mut da: Array2<f64> = Array2::zeros(self.value(*a).dim());
                    for (i, group) in groups.iter().enumerate() {
                        let scale = 1.0 / group.len() as f64;
                        for &m in group {
                            let mut target = da.row_mut(m);
                            target.scaled_add(scale, &g.row(i));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ScatterRows { x, index } => {
                    let src_rows = self.value(*x).nrows();
                    let mut dx = Array2::zeros((src_rows, g.ncols()));
                    for (i, &r) in index.iter().enumerate() {
                        dx.row_mut(i).assign(&g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, class } => {
                    let mut dz = softmax_rows_value(self.value(*logits));
                    dz[[0, *class]] -= 1.0;
                    accumulate(&mut grads, *logits, dz * g[[0, 0]]);
                }
                Op::FrobeniusDot(a, weights) => {
                    accumulate(&mut grads, *a, weights * g[[0, 0]]);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, contribution: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &contribution,
        slot => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(root)/d(param) for a graph built by
    /// `build` from a single parameter leaf.
    fn fd_check<F>(param: &Array2<f64>, build: F)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let p = tape.param(0, param.clone());
        let root = build(&mut tape, p);
        let grads = tape.backward(root, 1.0);
        let analytic = grads
            .param(0)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(param.dim()));

        let eval = |value: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let p = tape.param(0, value.clone());
            let root = build(&mut tape, p);
            tape.value(root)[[0, 0]]
        };

        let h = 1e-6;
        for i in 0..param.nrows() {
            for j in 0..param.ncols() {
                let mut plus = param.clone();
                plus[[i, j]] += h;
                let mut minus = param.clone();
                minus[[i, j]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let diff = (analytic[[i, j]] - numeric).abs();
                assert!(
                    diff <= 1e-5 * (1.0 + numeric.abs()),
                    "entry ({i}, {j}): analytic {} vs numeric {numeric}",
                    analytic[[i, j]]
                );
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let param = random_matrix(&mut rng, 3, 4);
        let other = random_matrix(&mut rng, 4, 2);
        let probe = random_matrix(&mut rng, 3, 2);
        fd_check(&param, move |tape, p| {
            let w = tape.input(other.clone());
            let y = tape.matmul(p, w);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn matmul_nt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let param = random_matrix(&mut rng, 3, 4);
        let other = random_matrix(&mut rng, 5, 4);
        let probe = random_matrix(&mut rng, 3, 5);
        fd_check(&param, move |tape, p| {
            let w = tape.input(other.clone());
            let y = tape.matmul_nt(p, w);
            tape.frobenius_dot(y, probe.clone())
        });
        // And as the right-hand operand.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let param = random_matrix(&mut rng, 5, 4);
        let other = random_matrix(&mut rng, 3, 4);
        let probe = random_matrix(&mut rng, 3, 5);
        fd_check(&param, move |tape, p| {
            let x = tape.input(other.clone());
            let y = tape.matmul_nt(x, p);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn add_scale_and_row_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let param = random_matrix(&mut rng, 3, 3);
        let other = random_matrix(&mut rng, 3, 3);
        let probe = random_matrix(&mut rng, 3, 3);
        fd_check(&param, {
            let (other, probe) = (other.clone(), probe.clone());
            move |tape, p| {
                let o = tape.input(other.clone());
                let sum = tape.add(p, o);
                let scaled = tape.scale(sum, -2.5);
                tape.frobenius_dot(scaled, probe.clone())
            }
        });

        // Bias as the broadcast row.
        let bias = random_matrix(&mut rng, 1, 3);
        fd_check(&bias, move |tape, p| {
            let x = tape.input(other.clone());
            let y = tape.add_row(x, p);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn concat_and_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let param = random_matrix(&mut rng, 2, 6);
        let other = random_matrix(&mut rng, 3, 6);
        let probe = random_matrix(&mut rng, 5, 3);
        fd_check(&param, move |tape, p| {
            let o = tape.input(other.clone());
            let joined = tape.concat_rows(p, o);
            let left = tape.slice_cols(joined, 0, 2);
            let mid = tape.slice_cols(joined, 2, 5);
            let narrowed = tape.slice_cols(mid, 0, 1);
            let back = tape.concat_cols(vec![left, narrowed]);
            tape.frobenius_dot(back, probe.clone())
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let param = random_matrix(&mut rng, 3, 5) * 3.0;
        let mut tape = Tape::new();
        let p = tape.param(0, param.clone());
        let y = tape.softmax_rows(p);
        for row in tape.value(y).rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let probe = random_matrix(&mut rng, 3, 5);
        fd_check(&param, move |tape, p| {
            let y = tape.softmax_rows(p);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn layer_norm_gradients_for_input_gain_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 4, 6);
        let gain = random_matrix(&mut rng, 1, 6) + 1.0;
        let bias = random_matrix(&mut rng, 1, 6);
        let probe = random_matrix(&mut rng, 4, 6);

        fd_check(&x, {
            let (gain, bias, probe) = (gain.clone(), bias.clone(), probe.clone());
            move |tape, p| {
                let g = tape.input(gain.clone());
                let b = tape.input(bias.clone());
                let y = tape.layer_norm(p, g, b);
                tape.frobenius_dot(y, probe.clone())
            }
        });
        fd_check(&gain, {
            let (x, bias, probe) = (x.clone(), bias.clone(), probe.clone());
            move |tape, p| {
                let xn = tape.input(x.clone());
                let b = tape.input(bias.clone());
                let y = tape.layer_norm(xn, p, b);
                tape.frobenius_dot(y, probe.clone())
            }
        });
        fd_check(&bias, move |tape, p| {
            let xn = tape.input(x.clone());
            let g = tape.input(gain.clone());
            let y = tape.layer_norm(xn, g, p);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let g = tape.input(Array2::ones((1, 4)));
        let b = tape.input(Array2::zeros((1, 4)));
        let y = tape.layer_norm(xn, g, b);
        for row in tape.value(y).rows() {
            let mean: f64 = row.sum() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "variance {var}");
        }
    }

    #[test]
    fn gelu_values_and_gradients() {
        assert_eq!(gelu_value(0.0), 0.0);
        assert!((gelu_value(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_value(-10.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let param = random_matrix(&mut rng, 3, 4) * 2.0;
        let probe = random_matrix(&mut rng, 3, 4);
        fd_check(&param, move |tape, p| {
            let y = tape.gelu(p);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn gather_mean_groups_and_scatter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let param = random_matrix(&mut rng, 5, 3);

        let probe = random_matrix(&mut rng, 3, 3);
        fd_check(&param, {
            let probe = probe.clone();
            // Repeated row 1 checks gradient accumulation across gathers.
            move |tape, p| {
                let y = tape.gather_rows(p, vec![1, 1, 4]);
                tape.frobenius_dot(y, probe.clone())
            }
        });

        let probe = random_matrix(&mut rng, 2, 3);
        fd_check(&param, {
            let probe = probe.clone();
            move |tape, p| {
                let y = tape.mean_groups(p, vec![vec![0, 2, 3], vec![1, 4]]);
                tape.frobenius_dot(y, probe.clone())
            }
        });

        let probe = random_matrix(&mut rng, 8, 3);
        fd_check(&param, move |tape, p| {
            let y = tape.scatter_rows(p, vec![7, 0, 3, 5, 2], 8);
            tape.frobenius_dot(y, probe.clone())
        });
    }

    #[test]
    fn mean_groups_forward_averages() {
        let x = array![[2.0, 0.0], [4.0, 2.0], [0.0, 4.0]];
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let y = tape.mean_groups(xn, vec![vec![0, 1, 2], vec![1]]);
        assert_eq!(tape.value(y), &array![[2.0, 2.0], [4.0, 2.0]]);
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        // Uniform logits over k classes give loss ln(k).
        let mut tape = Tape::new();
        let z = tape.input(Array2::zeros((1, 4)));
        let loss = tape.cross_entropy(z, 2);
        assert!((tape.value(loss)[[0, 0]] - 4.0f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let param = random_matrix(&mut rng, 1, 6) * 2.0;
        fd_check(&param, |tape, p| tape.cross_entropy(p, 3));
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let param = random_matrix(&mut rng, 2, 3);
        let probe = random_matrix(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let p = tape.param(0, param);
        let y = tape.gelu(p);
        let root = tape.frobenius_dot(y, probe);
        let g1 = tape.backward(root, 1.0);
        let g2 = tape.backward(root, 2.0);
        let a = g1.param(0).unwrap();
        let b = g2.param(0).unwrap();
        let diff = (&(a * 2.0) - b).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn params_off_the_path_get_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(0, Array2::ones((1, 2)));
        let _unused = tape.param(1, Array2::ones((1, 2)));
        let root = tape.frobenius_dot(used, Array2::ones((1, 2)));
        let grads = tape.backward(root, 1.0);
        assert!(grads.param(0).is_some());
        assert!(grads.param(1).is_none());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // y = p + p ⇒ dy/dp = 2.
        let mut tape = Tape::new();
        let p = tape.param(0, Array2::ones((1, 1)));
        let y = tape.add(p, p);
        let root = tape.frobenius_dot(y, Array2::ones((1, 1)));
        let grads = tape.backward(root, 1.0);
        assert_eq!(grads.param(0).unwrap()[[0, 0]], 2.0);
    }
}
