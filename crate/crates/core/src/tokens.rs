//! Token sets, 1-based index sets, and the selection state they form.
//!
//! A token set is an `N × d` matrix of feature vectors, one row per token.
//! Selection bookkeeping uses **1-based** token indices throughout: index 1
//! is the first row. This keeps the strided initialization rule (`i mod s ==
//! 1`) readable and matches how the indices are printed by the CLI; row
//! access converts to 0-based internally.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Magic number of the binary token-set format (`b"TOKSET01"`, little endian).
pub const TOKEN_SET_MAGIC: u64 = u64::from_le_bytes(*b"TOKSET01");
/// Current version of the binary token-set format.
pub const TOKEN_SET_VERSION: u64 = 1;

/// An immutable `N × d` matrix of token feature vectors.
///
/// Invariants, enforced at construction and on load:
/// - at least one token and one feature dimension,
/// - every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    data: Array2<f64>,
}

impl TokenSet {
    /// Wraps a matrix as a token set, validating its shape and entries.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyTokenSet);
        }
        if data.ncols() == 0 {
            return Err(Error::EmptyFeatureDim);
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("token set"));
        }
        Ok(TokenSet { data })
    }

    /// Builds a token set from row slices. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTokenSet);
        }
        let dim = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { left: dim, right: bad.len() });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), dim), flat)
            .expect("row-major collection matches shape");
        TokenSet::new(data)
    }

    /// Number of tokens (rows).
    pub fn num_tokens(&self) -> usize {
        self.data.nrows()
    }

    /// Feature dimension (columns).
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// View of the token with 1-based index `index`.
    pub fn row(&self, index: usize) -> Result<ArrayView1<'_, f64>> {
        if index == 0 || index > self.num_tokens() {
            return Err(Error::IndexOutOfRange { index, n: self.num_tokens() });
        }
        Ok(self.data.row(index - 1))
    }

    /// The underlying matrix.
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Gathers the rows named by `indices` (1-based) into a new token set.
    pub fn gather(&self, indices: &IndexSet) -> Result<Self> {
        if indices.max().is_some_and(|m| m > self.num_tokens()) {
            return Err(Error::IndexOutOfRange {
                index: indices.max().unwrap(),
                n: self.num_tokens(),
            });
        }
        if indices.is_empty() {
            return Err(Error::EmptyTokenSet);
        }
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (row, &idx) in indices.as_slice().iter().enumerate() {
            out.row_mut(row).assign(&self.data.row(idx - 1));
        }
        TokenSet::new(out)
    }

    /// Serializes the token set to `writer` in the `TOKSET01` binary format:
    /// magic, version, token count, and feature dimension as little-endian
    /// `u64`, followed by the matrix entries row-major as little-endian `f64`.
    pub fn write_to<W: Write>(&self, writer: &mut W) -> Result<()> {
        for header in [
            TOKEN_SET_MAGIC,
            TOKEN_SET_VERSION,
            self.num_tokens() as u64,
            self.dim() as u64,
        ] {
            writer.write_all(&header.to_le_bytes())?;
        }
        for v in self.data.iter() {
            writer.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Deserializes a token set written by [`TokenSet::write_to`].
    ///
    /// `path` is used only for error messages. The payload is re-validated,
    /// so a file with non-finite entries is rejected.
    pub fn read_from<R: Read>(reader: &mut R, path: &str) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next_u64 = |reader: &mut R, what: &str| -> Result<u64> {
            reader
                .read_exact(&mut word)
                .map_err(|_| Error::format(path, format!("truncated {what}")))?;
            Ok(u64::from_le_bytes(word))
        };
        let magic = next_u64(reader, "header")?;
        if magic != TOKEN_SET_MAGIC {
            return Err(Error::format(path, "bad magic; not a token-set file"));
        }
        let version = next_u64(reader, "header")?;
        if version != TOKEN_SET_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = next_u64(reader, "header")? as usize;
        let dim = next_u64(reader, "header")? as usize;
        let expected = n
            .checked_mul(dim)
            .ok_or_else(|| Error::format(path, "token count overflows"))?;
        let mut flat = Vec::with_capacity(expected);
        let mut buf = [0u8; 8];
        for _ in 0..expected {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::format(path, "truncated payload"))?;
            flat.push(f64::from_le_bytes(buf));
        }
        let data = Array2::from_shape_vec((n, dim), flat)
            .map_err(|e| Error::format(path, e.to_string()))?;
        TokenSet::new(data)
    }

    /// Writes the token set to a file. See [`TokenSet::write_to`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write_to(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    /// Reads a token set from a file. See [`TokenSet::read_from`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        Self::read_from(&mut reader, &path.display().to_string())
    }
}

/// A sorted set of distinct 1-based token indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    /// Validates that `indices` are distinct, in range `1..=n`, and returns
    /// them in ascending order.
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        for pair in indices.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::InvalidIndices(format!("duplicate index {}", pair[0])));
            }
        }
        for &idx in &indices {
            if idx == 0 || idx > n {
                return Err(Error::IndexOutOfRange { index: idx, n });
            }
        }
        Ok(IndexSet { indices })
    }

    /// The empty index set.
    pub fn empty() -> Self {
        IndexSet { indices: Vec::new() }
    }

    /// The full index set `{1, …, n}`.
    pub fn full(n: usize) -> Self {
        IndexSet { indices: (1..=n).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Largest index, if any.
    pub fn max(&self) -> Option<usize> {
        self.indices.last().copied()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Ascending slice of the indices.
    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    /// Indices in `1..=n` that are *not* in this set, ascending.
    pub fn complement(&self, n: usize) -> IndexSet {
        let indices = (1..=n).filter(|i| !self.contains(*i)).collect();
        IndexSet { indices }
    }

    /// Inserts `index`, keeping the set sorted. No-op if already present.
    pub(crate) fn insert(&mut self, index: usize) {
        if let Err(pos) = self.indices.binary_search(&index) {
            self.indices.insert(pos, index);
        }
    }

    /// Removes `index` if present.
    pub(crate) fn remove(&mut self, index: usize) {
        if let Ok(pos) = self.indices.binary_search(&index) {
            self.indices.remove(pos);
        }
    }
}

/// A partition of `{1, …, n}` into selected and unselected token indices.
///
/// The two halves are kept mutually consistent: every index is in exactly
/// one of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionState {
    selected: IndexSet,
    unselected: IndexSet,
    num_tokens: usize,
}

impl SelectionState {
    /// Builds a state from the selected half; the unselected half is its
    /// complement in `1..=num_tokens`.
    pub fn new(selected: IndexSet, num_tokens: usize) -> Result<Self> {
        if num_tokens == 0 {
            return Err(Error::EmptyTokenSet);
        }
        if selected.max().is_some_and(|m| m > num_tokens) {
            return Err(Error::IndexOutOfRange { index: selected.max().unwrap(), n: num_tokens });
        }
        let unselected = selected.complement(num_tokens);
        Ok(SelectionState { selected, unselected, num_tokens })
    }

    pub fn selected(&self) -> &IndexSet {
        &self.selected
    }

    pub fn unselected(&self) -> &IndexSet {
        &self.unselected
    }

    /// Total number of tokens being partitioned.
    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    /// Moves `index` from the unselected to the selected half.
    pub(crate) fn select(&mut self, index: usize) -> Result<()> {
        if !self.unselected.contains(index) {
            return Err(Error::InvalidIndices(format!(
                "index {index} is not currently unselected"
            )));
        }
        self.unselected.remove(index);
        self.selected.insert(index);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn token_set_validates_shape_and_entries() {
        assert!(matches!(
            TokenSet::new(Array2::zeros((0, 3))),
            Err(Error::EmptyTokenSet)
        ));
        assert!(matches!(
            TokenSet::new(Array2::zeros((3, 0))),
            Err(Error::EmptyFeatureDim)
        ));
        assert!(matches!(
            TokenSet::new(array![[1.0, f64::NAN]]),
            Err(Error::NonFinite { .. })
        ));
        let ok = TokenSet::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(ok.num_tokens(), 2);
        assert_eq!(ok.dim(), 2);
    }

    #[test]
    fn rows_are_one_indexed() {
        let set = TokenSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(set.row(1).unwrap().to_vec(), vec![1.0, 0.0]);
        assert_eq!(set.row(2).unwrap().to_vec(), vec![0.0, 1.0]);
        assert!(set.row(0).is_err());
        assert!(set.row(3).is_err());
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        let err = TokenSet::from_rows(&[vec![1.0], vec![1.0, 2.0]]);
        assert!(matches!(err, Err(Error::DimensionMismatch { left: 1, right: 2 })));
    }

    #[test]
    fn gather_selects_rows_in_index_order() {
        let set = TokenSet::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let idx = IndexSet::new(vec![4, 1], 4).unwrap();
        let picked = set.gather(&idx).unwrap();
        assert_eq!(picked.data(), &array![[1.0], [4.0]]);
    }

    #[test]
    fn binary_round_trip_is_lossless() {
        let set = TokenSet::from_rows(&[
            vec![0.1, -2.5e300, 3.0],
            vec![f64::MIN_POSITIVE, 0.0, -0.0],
        ])
        .unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = TokenSet::read_from(&mut buf.as_slice(), "buf").unwrap();
        assert_eq!(set.data(), back.data());
    }

    #[test]
    fn read_rejects_bad_magic_version_and_truncation() {
        let set = TokenSet::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] ^= 0xff;
        assert!(TokenSet::read_from(&mut bad_magic.as_slice(), "x").is_err());

        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(TokenSet::read_from(&mut bad_version.as_slice(), "x").is_err());

        let truncated = &buf[..buf.len() - 4];
        let err = TokenSet::read_from(&mut &truncated[..], "x").unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn index_set_sorts_and_validates() {
        let idx = IndexSet::new(vec![5, 1, 3], 5).unwrap();
        assert_eq!(idx.as_slice(), &[1, 3, 5]);
        assert!(idx.contains(3));
        assert!(!idx.contains(2));
        assert!(IndexSet::new(vec![1, 1], 5).is_err());
        assert!(IndexSet::new(vec![0], 5).is_err());
        assert!(IndexSet::new(vec![6], 5).is_err());
    }

    #[test]
    fn complement_partitions_the_range() {
        let idx = IndexSet::new(vec![1, 4], 5).unwrap();
        assert_eq!(idx.complement(5).as_slice(), &[2, 3, 5]);
        assert_eq!(IndexSet::full(3).complement(3).as_slice(), &[] as &[usize]);
    }

    #[test]
    fn selection_state_stays_consistent() {
        let selected = IndexSet::new(vec![1, 3], 4).unwrap();
        let mut state = SelectionState::new(selected, 4).unwrap();
        assert_eq!(state.unselected().as_slice(), &[2, 4]);
        state.select(4).unwrap();
        assert_eq!(state.selected().as_slice(), &[1, 3, 4]);
        assert_eq!(state.unselected().as_slice(), &[2]);
        assert!(state.select(4).is_err());
    }
}
