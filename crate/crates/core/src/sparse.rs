//! Compressed-row sparse matrices and the sparse-dense kernels used by the
//! graph filter and the bag-of-words input layer.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Row-compressed sparse matrix over `f64`.
///
/// Column indices are strictly increasing within a row, so there are never
/// duplicate `(row, col)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets in any order.
    ///
    /// Duplicate coordinates, out-of-range indices and non-finite values are
    /// rejected. Explicit zeros are kept.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value at ({r}, {c})")));
            }
        }
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Data(format!(
                    "duplicate entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        for &(r, _, _) in &triplets {
            indptr[r + 1] += 1;
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        let indices = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Sparsifies a dense matrix, dropping exact zeros.
    pub fn from_dense(d: &ArrayView2<f64>) -> Result<Self> {
        let mut t = Vec::new();
        for ((r, c), &v) in d.indexed_iter() {
            if v != 0.0 {
                t.push((r, c, v));
            }
        }
        Self::from_triplets(d.nrows(), d.ncols(), t)
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (idx, vals) = self.row(r);
            idx.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Same sparsity pattern, new values (one per stored entry).
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    /// Keeps only the listed columns, renumbered in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.cols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let t = self
            .triplets()
            .filter(|&(_, c, _)| map[c] != usize::MAX)
            .map(|(r, c, v)| (r, map[c], v))
            .collect();
        Self::from_triplets(self.rows, keep.len(), t).expect("column selection preserves validity")
    }

    pub fn transpose(&self) -> Self {
        let t = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, t).expect("transpose preserves validity")
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.triplets() {
            d[[r, c]] = v;
        }
        d
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.triplets().all(|(r, c, v)| self.get(c, r) == v)
    }

    /// `self · d`.
    pub fn mul_dense(&self, d: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.cols != d.nrows() {
            return Err(Error::Shape(format!(
                "spmm: {}x{} times {}x{}",
                self.rows,
                self.cols,
                d.nrows(),
                d.ncols()
            )));
        }
        let width = d.ncols();
        let mut out = Array2::<f64>::zeros((self.rows, width));
        let dense = d.as_standard_layout();
        let src = dense.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("fresh array");
        gather(self, src, dst, width);
        Ok(out)
    }

    /// `selfᵀ · g` without materializing the transpose.
    pub fn transpose_mul_dense(&self, g: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.rows != g.nrows() {
            return Err(Error::Shape(format!(
                "spmm transpose: ({}x{})^T times {}x{}",
                self.rows,
                self.cols,
                g.nrows(),
                g.ncols()
            )));
        }
        let width = g.ncols();
        let mut out = Array2::<f64>::zeros((self.cols, width));
        let dense = g.as_standard_layout();
        let src = dense.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("fresh array");
        scatter(self, src, dst, width);
        Ok(out)
    }
}

/// `acc += v · x`.
#[inline(always)]
fn axpy(acc: &mut [f64], v: f64, x: &[f64]) {
    for (a, &x) in acc.iter_mut().zip(x) {
        *a += v * x;
    }
}

/// Row `r` of the output accumulates the stored entries of row `r`.
#[inline(always)]
fn gather_rows(m: &CsrMatrix, src: &[f64], dst: &mut [f64], width: usize) {
    for r in 0..m.rows {
        let acc = &mut dst[r * width..(r + 1) * width];
        let (idx, vals) = m.row(r);
        for (&c, &v) in idx.iter().zip(vals) {
            axpy(acc, v, &src[c * width..(c + 1) * width]);
        }
    }
}

/// Row `r` of the input is spread over the columns of row `r`.
#[inline(always)]
fn scatter_rows(m: &CsrMatrix, src: &[f64], dst: &mut [f64], width: usize) {
    for r in 0..m.rows {
        let row = &src[r * width..(r + 1) * width];
        let (idx, vals) = m.row(r);
        for (&c, &v) in idx.iter().zip(vals) {
            axpy(&mut dst[c * width..(c + 1) * width], v, row);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gather_avx2(m: &CsrMatrix, src: &[f64], dst: &mut [f64], width: usize) {
    gather_rows(m, src, dst, width)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scatter_avx2(m: &CsrMatrix, src: &[f64], dst: &mut [f64], width: usize) {
    scatter_rows(m, src, dst, width)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// The kernels are also compiled for AVX2 and picked at run time. FMA is
/// left off so both builds round identically.
fn gather(m: &CsrMatrix, src: &[f64], dst: &mut [f64], width: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at run time.
        return unsafe { gather_avx2(m, src, dst, width) };
    }
    gather_rows(m, src, dst, width)
}

fn scatter(m: &CsrMatrix, src: &[f64], dst: &mut [f64], width: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at run time.
        return unsafe { scatter_avx2(m, src, dst, width) };
    }
    scatter_rows(m, src, dst, width)
}
