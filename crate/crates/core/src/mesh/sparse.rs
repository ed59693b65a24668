//! Compressed sparse row matrices used for fixed adjacency and sampling operators.

use ndarray::{Array2, ArrayView2};

use super::MeshError;

/// Real-valued sparse matrix. Entries are kept sorted by (row, col), which
/// makes every product below accumulate in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets in any order.
    ///
    /// Duplicate coordinates and out-of-shape indices are rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self, MeshError> {
        for &(r, c, _) in &triplets {
            if r >= rows || c >= cols {
                return Err(MeshError::SparseIndex { row: r, col: c, rows, cols });
            }
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(MeshError::SparseDuplicate { row: w[0].0, col: w[0].1 });
            }
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let col_idx = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(Self { rows, cols, row_ptr, col_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Keeps every entry whose magnitude is nonzero.
    pub fn from_dense(dense: ArrayView2<'_, f64>) -> Self {
        let (rows, cols) = dense.dim();
        let mut triplets = Vec::new();
        for ((r, c), &v) in dense.indexed_iter() {
            if v != 0.0 {
                triplets.push((r, c, v));
            }
        }
        Self::from_triplets(rows, cols, triplets).expect("dense indices are in range and unique")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of one row, columns ascending.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .binary_search(&c)
            .ok()
            .map(|i| self.values[span.start + i])
    }

    /// All entries in (row, col) order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let t = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, t).expect("transpose preserves validity")
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.triplets() {
            out[[r, c]] = v;
        }
        out
    }

    /// `self · x` for a dense `x` with `self.cols()` rows.
    ///
    /// Each output row accumulates its terms in ascending column order.
    pub fn mul_dense(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.cols, "sparse product inner dimension");
        let width = x.ncols();
        let mut out = Array2::zeros((self.rows, width));
        for r in 0..self.rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    /// `selfᵀ · x`, used for the backward pass of [`SparseMatrix::mul_dense`].
    pub fn transpose_mul_dense(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.rows, "sparse transpose product inner dimension");
        let mut out = Array2::zeros((self.cols, x.ncols()));
        for r in 0..self.rows {
            let x_row = x.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &x_row);
            }
        }
        out
    }

    /// Sparse-sparse product `self · other`.
    pub fn compose(&self, other: &SparseMatrix) -> Self {
        assert_eq!(self.cols, other.rows, "sparse compose inner dimension");
        let mut triplets = Vec::new();
        let mut acc = vec![0.0; other.cols];
        let mut touched = vec![false; other.cols];
        for r in 0..self.rows {
            let mut cols_hit = Vec::new();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        cols_hit.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols_hit.sort_unstable();
            for c in cols_hit {
                triplets.push((r, c, acc[c]));
                acc[c] = 0.0;
                touched[c] = false;
            }
        }
        Self::from_triplets(self.rows, other.cols, triplets).expect("product entries are unique")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        assert!(matches!(
            SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0)]),
            Err(MeshError::SparseDuplicate { row: 0, col: 0 })
        ));
        assert!(matches!(
            SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]),
            Err(MeshError::SparseIndex { .. })
        ));
    }

    #[test]
    fn products_match_dense() {
        let s = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 2.0), (0, 0, 1.0), (0, 2, -1.0)])
            .unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(s.mul_dense(x.view()), s.to_dense().dot(&x));
        let y = array![[1.0], [2.0]];
        assert_eq!(s.transpose_mul_dense(y.view()), s.to_dense().t().dot(&y));
        let t = s.transpose();
        assert_eq!(s.compose(&t).to_dense(), s.to_dense().dot(&t.to_dense()));
    }
}
