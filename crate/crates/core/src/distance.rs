//! Distance metrics between token feature distributions.
//!
//! Selection treats each token's feature vector as its "distribution" and
//! scores candidates by distance matrices between the unselected set `B`
//! (rows) and the selected set `A` (columns). Three metrics are supported;
//! cosine is the default used by the growth pipeline.
//!
//! All tie-sensitive consumers rely on these functions being deterministic:
//! entries are computed in row-major order with plain `f64` arithmetic, so
//! equal inputs always produce bit-equal matrices.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{IndexSet, TokenSet};

/// Metric used to compare two token feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// `1 − cos(x, y)`; range `[0, 2]`, undefined for zero-norm vectors.
    #[default]
    Cosine,
    /// Euclidean (L2) distance.
    Euclidean,
    /// Manhattan (L1) distance.
    Manhattan,
}

impl DistanceMetric {
    /// All supported metrics, in a fixed order.
    pub const ALL: [DistanceMetric; 3] =
        [DistanceMetric::Cosine, DistanceMetric::Euclidean, DistanceMetric::Manhattan];

    /// Canonical lowercase name.
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Manhattan => "manhattan",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "manhattan" => Ok(DistanceMetric::Manhattan),
            other => Err(Error::Config(format!(
                "unknown distance metric {other:?}; expected cosine, euclidean, or manhattan"
            ))),
        }
    }
}

/// A `|B| × |A|` matrix of distances from query tokens to reference tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
    metric: DistanceMetric,
}

impl DistanceMatrix {
    /// Number of query (row) tokens.
    pub fn num_queries(&self) -> usize {
        self.values.nrows()
    }

    /// Number of reference (column) tokens.
    pub fn num_references(&self) -> usize {
        self.values.ncols()
    }

    /// Distance between query `i` and reference `j` (0-based positions).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

fn dot(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

fn metric_distance(
    metric: DistanceMetric,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    x_norm: f64,
    y_norm: f64,
) -> f64 {
    match metric {
        DistanceMetric::Cosine => 1.0 - dot(x, y) / (x_norm * y_norm),
        DistanceMetric::Euclidean => {
            x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        }
        DistanceMetric::Manhattan => {
            x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum()
        }
    }
}

fn l2_norms(set: &TokenSet) -> Vec<f64> {
    (1..=set.num_tokens())
        .map(|i| dot(set.row(i).unwrap(), set.row(i).unwrap()).sqrt())
        .collect()
}

/// For cosine, rejects zero-norm rows; `labels` are the 1-based token indices
/// reported in the error.
fn check_norms(norms: &[f64], labels: &[usize], set: &'static str) -> Result<()> {
    for (pos, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { set, index: labels[pos] });
        }
    }
    Ok(())
}

/// Computes the distance matrix between two token sets: entry `(i, j)` is the
/// distance from token `i` of `queries` to token `j` of `references`.
///
/// Errors if the feature dimensions differ, or (cosine only) if either set
/// contains a zero-norm row.
pub fn pairwise_distance(
    queries: &TokenSet,
    references: &TokenSet,
    metric: DistanceMetric,
) -> Result<DistanceMatrix> {
    if queries.dim() != references.dim() {
        return Err(Error::DimensionMismatch { left: queries.dim(), right: references.dim() });
    }
    let q_norms = l2_norms(queries);
    let r_norms = l2_norms(references);
    if metric == DistanceMetric::Cosine {
        let q_labels: Vec<usize> = (1..=queries.num_tokens()).collect();
        let r_labels: Vec<usize> = (1..=references.num_tokens()).collect();
        check_norms(&q_norms, &q_labels, "the query set")?;
        check_norms(&r_norms, &r_labels, "the reference set")?;
    }
    let mut values = Array2::zeros((queries.num_tokens(), references.num_tokens()));
    for i in 0..queries.num_tokens() {
        let x = queries.row(i + 1).unwrap();
        for j in 0..references.num_tokens() {
            let y = references.row(j + 1).unwrap();
            values[[i, j]] = metric_distance(metric, x, y, q_norms[i], r_norms[j]);
        }
    }
    Ok(DistanceMatrix { values, metric })
}

/// Like [`pairwise_distance`], but between two index subsets of a single
/// token set. Row `i` of the result corresponds to the `i`-th index of
/// `queries` in ascending order, and likewise for columns and `references`.
///
/// Zero-norm errors report the offending token's index within `tokens`.
pub fn pairwise_distance_within(
    tokens: &TokenSet,
    queries: &IndexSet,
    references: &IndexSet,
    metric: DistanceMetric,
) -> Result<DistanceMatrix> {
    for idx in queries.iter().chain(references.iter()) {
        if idx > tokens.num_tokens() {
            return Err(Error::IndexOutOfRange { index: idx, n: tokens.num_tokens() });
        }
    }
    let norm_of = |idx: usize| dot(tokens.row(idx).unwrap(), tokens.row(idx).unwrap()).sqrt();
    let q_norms: Vec<f64> = queries.iter().map(norm_of).collect();
    let r_norms: Vec<f64> = references.iter().map(norm_of).collect();
    if metric == DistanceMetric::Cosine {
        let q_labels: Vec<usize> = queries.iter().collect();
        let r_labels: Vec<usize> = references.iter().collect();
        check_norms(&q_norms, &q_labels, "the query set")?;
        check_norms(&r_norms, &r_labels, "the reference set")?;
    }
    let mut values = Array2::zeros((queries.len(), references.len()));
    for (i, qi) in queries.iter().enumerate() {
        let x = tokens.row(qi).unwrap();
        for (j, rj) in references.iter().enumerate() {
            let y = tokens.row(rj).unwrap();
            values[[i, j]] = metric_distance(metric, x, y, q_norms[i], r_norms[j]);
        }
    }
    Ok(DistanceMatrix { values, metric })
}

/// Per-query minimum over the reference columns: the distance from each
/// unselected token to its nearest selected token.
///
/// Errors if there are no reference columns. An empty query set yields an
/// empty vector.
pub fn min_distance_to_selected(distances: &DistanceMatrix) -> Result<Vec<f64>> {
    if distances.num_references() == 0 {
        return Err(Error::EmptySelection);
    }
    Ok((0..distances.num_queries())
        .map(|i| {
            (0..distances.num_references())
                .map(|j| distances.get(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}
