//! Embedding containers, the TVEM binary format, and dataset manifests.
//!
//! All embeddings are stored as 32-bit floats and L2-normalized at ingestion,
//! so downstream cosine similarity is a plain dot product accumulated in f64.

mod manifest;
mod tvem;

pub use manifest::{
    validate_manifest, Dataset, DatasetManifest, EncoderSpace, SampleRecord, Split, Violation,
};
pub use tvem::{read_embeddings, write_embeddings, TVEM_HEADER_LEN, TVEM_MAGIC, TVEM_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a row norm from 1.0 for a matrix tagged [`NormState::Unit`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormState {
    Raw,
    Unit,
}

impl NormState {
    pub fn code(self) -> u8 {
        match self {
            NormState::Raw => 0,
            NormState::Unit => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NormState::Raw),
            1 => Some(NormState::Unit),
            _ => None,
        }
    }
}

/// Dense row-major matrix of sample embeddings from one encoder space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    values: Vec<f32>,
    norm_state: NormState,
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking shape, finiteness and (for `Unit`) row norms.
    pub fn new(rows: usize, dims: usize, values: Vec<f32>, norm_state: NormState) -> Result<Self> {
        if rows == 0 || dims == 0 {
            return Err(Error::Shape(format!(
                "rows and dims must be at least 1 (got {rows}x{dims})"
            )));
        }
        if values.len() != rows * dims {
            return Err(Error::Shape(format!(
                "{rows}x{dims} matrix needs {} values, got {}",
                rows * dims,
                values.len()
            )));
        }
        let m = EmbeddingMatrix {
            rows,
            dims,
            values,
            norm_state,
        };
        m.check_finite()?;
        if norm_state == NormState::Unit {
            m.check_unit()?;
        }
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], norm_state: NormState) -> Result<Self> {
        let dims = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * dims);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dims {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {dims}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, values, norm_state)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm_state(&self) -> NormState {
        self.norm_state
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dims)
    }

    /// Copies the given rows, in order, into a new matrix with the same norm state.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dims, values, self.norm_state)
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.dims,
                col: pos % self.dims,
            });
        }
        Ok(())
    }

    fn check_unit(&self) -> Result<()> {
        for (row, r) in self.iter_rows().enumerate() {
            let norm = norm_f64(r);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::NotUnitNorm { row, norm });
            }
        }
        Ok(())
    }
}

/// One unit-norm text embedding per class, index-aligned with the class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassEmbeddings {
    matrix: EmbeddingMatrix,
    template: Option<String>,
}

impl TextClassEmbeddings {
    /// Wraps a matrix, normalizing it first if it is still raw.
    pub fn new(matrix: EmbeddingMatrix, template: Option<String>) -> Result<Self> {
        let matrix = match matrix.norm_state() {
            NormState::Unit => matrix,
            NormState::Raw => l2_normalize(&matrix)?,
        };
        Ok(TextClassEmbeddings { matrix, template })
    }

    pub fn class_count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dims(&self) -> usize {
        self.matrix.dims()
    }

    pub fn class_embedding(&self, class: usize) -> &[f32] {
        self.matrix.row(class)
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    /// Prompt template used to embed the class names, e.g. `a photo of a [CLASS]`.
    pub fn template(&self) -> Option<&str> {
        self.template.as_deref()
    }
}

pub(crate) fn norm_f64(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Dot product of two f32 vectors accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Cosine similarity accumulated in f64. Zero vectors yield 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let denom = norm_f64(a) * norm_f64(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Scales a vector to unit L2 norm in f64. Returns `None` for the zero vector.
pub(crate) fn normalize_f64(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Returns a copy with every row scaled to unit L2 norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut values = Vec::with_capacity(matrix.values.len());
    for (row, r) in matrix.iter_rows().enumerate() {
        let norm = norm_f64(r);
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row });
        }
        values.extend(r.iter().map(|&x| (f64::from(x) / norm) as f32));
    }
    EmbeddingMatrix::new(matrix.rows, matrix.dims, values, NormState::Unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(&[[3.0f32, 4.0]], NormState::Raw).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert_eq!(n.row(0), &[0.6f32, 0.8]);
        assert_eq!(n.norm_state(), NormState::Unit);
    }

    #[test]
    fn normalize_unit_row_is_unchanged() {
        let m = EmbeddingMatrix::from_rows(&[[0.6f32, 0.8], [1.0, 0.0]], NormState::Raw).unwrap();
        let n = l2_normalize(&m).unwrap();
        for (a, b) in m.values().iter().zip(n.values()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn normalize_zero_row_names_the_row() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 0.0]], NormState::Raw).unwrap();
        match l2_normalize(&m) {
            Err(Error::ZeroNormRow { row }) => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_nan_with_position() {
        let err = EmbeddingMatrix::new(2, 2, vec![0.0, 1.0, f32::NAN, 0.0], NormState::Raw)
            .unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at (1, 0)");
    }

    #[test]
    fn rejects_empty_shapes() {
        assert!(EmbeddingMatrix::new(0, 3, vec![], NormState::Raw).is_err());
        assert!(EmbeddingMatrix::new(1, 0, vec![], NormState::Raw).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0], NormState::Raw).is_err());
    }

    #[test]
    fn unit_tag_is_checked() {
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0, 1.0], NormState::Unit).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0, 0.0], NormState::Unit).is_ok());
    }

    fn raw_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
        (1usize..6, 1usize..10).prop_flat_map(|(rows, dims)| {
            prop::collection::vec(-10.0f32..10.0, rows * dims).prop_filter_map(
                "zero row",
                move |values| {
                    let m = EmbeddingMatrix::new(rows, dims, values, NormState::Raw).ok()?;
                    let ok = m.iter_rows().all(|r| norm_f64(r) > 1e-3);
                    ok.then_some(m)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(m in raw_matrix()) {
            let once = l2_normalize(&m).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }

        #[test]
        fn dot_matches_cosine_on_unit_rows(m in raw_matrix()) {
            let n = l2_normalize(&m).unwrap();
            for a in n.iter_rows() {
                for b in n.iter_rows() {
                    prop_assert!((dot(a, b) - cosine(a, b)).abs() < 1e-6);
                }
            }
        }
    }
}
