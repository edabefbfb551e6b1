//! Compressed sparse row storage for graph operators.

use ndarray::{Array2, ArrayView2};

/// A real-valued sparse matrix in compressed row layout.
///
/// Column indices inside each row are strictly increasing and explicit zeros
/// are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed
    /// and entries that end up exactly zero are dropped.
    ///
    /// Panics if an index is out of bounds.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(i, j, v) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            rows[i].push((j, v));
        }
        let mut out = CsrMatrix::zeros(nrows, ncols);
        out.indptr.clear();
        out.indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut acc = 0.0;
                while k < row.len() && row[k].0 == j {
                    acc += row[k].1;
                    k += 1;
                }
                if acc != 0.0 {
                    out.indices.push(j);
                    out.values.push(acc);
                }
            }
            out.indptr.push(out.indices.len());
        }
        out
    }

    pub fn from_dense(dense: ArrayView2<f64>) -> Self {
        let (n, m) = dense.dim();
        let mut trips = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let v = dense[[i, j]];
                if v != 0.0 {
                    trips.push((i, j, v));
                }
            }
        }
        CsrMatrix::from_triplets(n, m, &trips)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> CsrMatrix {
        let trips: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, &trips)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (_, j, v) in self.triplets() {
            out[j] += v;
        }
        out
    }

    /// Largest row sum of absolute values.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiplies row `i` by `scale[i]`. Rows scaled by zero are emptied.
    pub fn scale_rows(&self, scale: &[f64]) -> CsrMatrix {
        assert_eq!(scale.len(), self.nrows);
        let trips: Vec<_> = self
            .triplets()
            .map(|(i, j, v)| (i, j, v * scale[i]))
            .collect();
        CsrMatrix::from_triplets(self.nrows, self.ncols, &trips)
    }

    pub fn scale(&self, s: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        if s == 0.0 {
            return CsrMatrix::zeros(self.nrows, self.ncols);
        }
        out
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: f64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.shape(), other.shape());
        let mut trips: Vec<_> = self.triplets().collect();
        trips.extend(other.triplets().map(|(i, j, v)| (i, j, s * v)));
        CsrMatrix::from_triplets(self.nrows, self.ncols, &trips)
    }

    /// Sparse-sparse product using a dense row accumulator.
    pub fn matmul(&self, rhs: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, rhs.nrows, "matmul inner dimension");
        let m = rhs.ncols;
        let mut acc = vec![0.0; m];
        let mut touched = vec![false; m];
        let mut cols_in_row = Vec::new();
        let mut out = CsrMatrix::zeros(self.nrows, m);
        out.indptr.clear();
        out.indptr.push(0);
        for i in 0..self.nrows {
            let (ci, vi) = self.row(i);
            for (&k, &a) in ci.iter().zip(vi) {
                let (ck, vk) = rhs.row(k);
                for (&j, &b) in ck.iter().zip(vk) {
                    if !touched[j] {
                        touched[j] = true;
                        cols_in_row.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            cols_in_row.sort_unstable();
            for &j in &cols_in_row {
                if acc[j] != 0.0 {
                    out.indices.push(j);
                    out.values.push(acc[j]);
                }
                acc[j] = 0.0;
                touched[j] = false;
            }
            cols_in_row.clear();
            out.indptr.push(out.indices.len());
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    /// `selfᵀ · x` without materialising the transpose.
    pub fn transpose_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        y
    }

    /// `self · X` for a dense right-hand side.
    pub fn mul_dense(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.ncols, "mul_dense shape");
        let mut out = Array2::zeros((self.nrows, x.ncols()));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut out_row = out.row_mut(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out_row.scaled_add(v, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · X` for a dense right-hand side.
    pub fn transpose_mul_dense(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.nrows, "transpose_mul_dense shape");
        let mut out = Array2::zeros((self.ncols, x.ncols()));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let xi = x.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out.row_mut(j).scaled_add(v, &xi);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for (i, j, v) in self.triplets() {
            out[[i, j]] = v;
        }
        out
    }

    /// Extracts the block with the given rows and columns, in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut col_pos = vec![usize::MAX; self.ncols];
        for (p, &c) in cols.iter().enumerate() {
            col_pos[c] = p;
        }
        let mut trips = Vec::new();
        for (p, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_pos[c] != usize::MAX {
                    trips.push((p, col_pos[c], v));
                }
            }
        }
        CsrMatrix::from_triplets(rows.len(), cols.len(), &trips)
    }
}
