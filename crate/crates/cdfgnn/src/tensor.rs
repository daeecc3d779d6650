//! Dense and sparse kernels shared by the distributed engine and the
//! single-device oracle.
//!
//! Every reduction accumulates in ascending index order: matmul sums over k
//! ascending, spmm walks each CSR row left to right, norms scan row-major.
//! Workers therefore produce bitwise identical results for identical inputs,
//! which the exact-mode acceptance checks rely on.

use std::fmt;

/// Element type for all numeric payloads: f32 or f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + num_traits::Float
{
    /// Bit width of the format, the `T` in message-size accounting.
    const BITS: u32;
    /// Dtype tag used by the feature file header (0 = f32, 1 = f64).
    const DTYPE_TAG: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the start of `bytes`. Caller checks length.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    const DTYPE_TAG: u8 = 0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("short f32"))
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    const DTYPE_TAG: u8 = 1;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("short f64"))
    }
}

// ---------------------------------------------------------------------------
// DenseMatrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, values: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Self {
        assert_eq!(values.len(), rows * cols, "value count must match shape");
        DenseMatrix { rows, cols, values }
    }

    /// Test-friendly constructor from row slices.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            values.extend_from_slice(r);
        }
        DenseMatrix { rows: rows.len(), cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.values[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// CSR sparse matrix
// ---------------------------------------------------------------------------

/// CSR sparse matrix with per-entry weights. Column indices within each row
/// are strictly ascending; spmm accumulates in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds from per-row (column, weight) lists. Entries within a row must
    /// be strictly ascending by column.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(u32, T)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in rows {
            let mut prev: Option<u32> = None;
            for &(c, w) in row {
                assert!((c as usize) < n_cols, "column out of range");
                if let Some(p) = prev {
                    assert!(c > p, "row columns must be strictly ascending");
                }
                prev = Some(c);
                indices.push(c);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        CsrMatrix { n_rows: rows.len(), n_cols, offsets, indices, weights }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (u32, T)> + '_ {
        let lo = self.offsets[r];
        let hi = self.offsets[r + 1];
        self.indices[lo..hi].iter().copied().zip(self.weights[lo..hi].iter().copied())
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Sparse-dense product `A * X`. Each output row accumulates its CSR entries
/// left to right.
pub fn spmm<T: Scalar>(a: &CsrMatrix<T>, x: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.n_cols(), x.rows(), "spmm shape mismatch");
    let mut out = DenseMatrix::zeros(a.n_rows(), x.cols());
    for r in 0..a.n_rows() {
        let lo = a.offsets[r];
        let hi = a.offsets[r + 1];
        let row_out = out.row_mut(r);
        for k in lo..hi {
            let c = a.indices[k] as usize;
            let w = a.weights[k];
            let row_in = x.row(c);
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = *o + w * v;
            }
        }
    }
    out
}

/// Dense product `A * B`; per output entry the k-sum runs ascending.
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.cols(), b.rows(), "matmul shape mismatch");
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            let o_row = out.row_mut(i);
            for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
    out
}

/// `A^T * B` without materializing the transpose; the row-sum runs ascending.
pub fn matmul_at_b<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.rows(), b.rows(), "matmul_at_b shape mismatch");
    let mut out = DenseMatrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &ari) in a_row.iter().enumerate() {
            let o_row = out.row_mut(i);
            for (o, &brj) in o_row.iter_mut().zip(b_row) {
                *o = *o + ari * brj;
            }
        }
    }
    out
}

/// `A * B^T` without materializing the transpose; the k-sum runs ascending.
pub fn matmul_a_bt<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    assert_eq!(a.cols(), b.cols(), "matmul_a_bt shape mismatch");
    let mut out = DenseMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let a_row = a.row(i);
        for j in 0..b.rows() {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out.set(i, j, acc);
        }
    }
    out
}

pub fn add<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    zip_elementwise(a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    zip_elementwise(a, b, |x, y| x - y)
}

/// Elementwise (Hadamard) product.
pub fn hadamard<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    zip_elementwise(a, b, |x, y| x * y)
}

fn zip_elementwise<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    f: impl Fn(T, T) -> T,
) -> DenseMatrix<T> {
    assert_eq!(a.rows(), b.rows(), "elementwise shape mismatch");
    assert_eq!(a.cols(), b.cols(), "elementwise shape mismatch");
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), values)
}

/// Entrywise max-norm of a matrix. NaN input is a programming error.
pub fn linf_norm<T: Scalar>(a: &DenseMatrix<T>) -> T {
    linf_norm_slice(a.values())
}

/// Entrywise max-norm of a vector slice.
pub fn linf_norm_slice<T: Scalar>(v: &[T]) -> T {
    let mut best = T::zero();
    for &x in v {
        debug_assert!(!x.is_nan(), "NaN reached a norm");
        let a = x.abs();
        if a > best {
            best = a;
        }
    }
    best
}

pub fn relu<T: Scalar>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Derivative of relu; the subgradient at exactly zero is zero.
pub fn relu_grad<T: Scalar>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    a.map(|x| if x > T::zero() { T::one() } else { T::zero() })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(a: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = DenseMatrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), |acc, x| if x > acc { x } else { acc });
        let mut sum = T::zero();
        let o = out.row_mut(r);
        for (dst, &x) in o.iter_mut().zip(row) {
            let e = (x - m).exp();
            *dst = e;
            sum = sum + e;
        }
        for dst in o.iter_mut() {
            *dst = *dst / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csr_from_dense(rows: &[&[f64]]) -> CsrMatrix<f64> {
        let n_cols = rows[0].len();
        let lists: Vec<Vec<(u32, f64)>> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c as u32, v))
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(n_cols, &lists)
    }

    #[test]
    fn spmm_small() {
        let a = csr_from_dense(&[&[0.0, 2.0], &[3.0, 0.0]]);
        let x = DenseMatrix::from_rows(&[&[1.0, 1.0], &[2.0, 0.5]]);
        let y = spmm(&a, &x);
        assert_eq!(y, DenseMatrix::from_rows(&[&[4.0, 1.0], &[3.0, 3.0]]));
    }

    #[test]
    fn matmul_small() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(matmul(&a, &b), DenseMatrix::from_rows(&[&[4.0, 5.0], &[10.0, 11.0]]));
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = DenseMatrix::from_rows(&[&[1.0, -1.0, 0.5], &[2.0, 0.0, 1.0], &[0.0, 3.0, 2.0]]);
        // a^T (2x3) * b (3x3)
        let at = DenseMatrix::from_rows(&[&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]]);
        assert_eq!(matmul_at_b(&a, &b), matmul(&at, &b));
        // b (3x3) * a^T? shapes: use a_bt with matching cols
        let c = DenseMatrix::from_rows(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let ct = DenseMatrix::from_rows(&[&[1.0, 0.5], &[2.0, -1.0]]);
        assert_eq!(matmul_a_bt(&a, &c), matmul(&a, &ct));
    }

    #[test]
    fn linf_examples() {
        let a = DenseMatrix::from_rows(&[&[1.0, -7.0], &[3.0, 5.0]]);
        assert_eq!(linf_norm(&a), 7.0);
        assert_eq!(linf_norm_slice::<f64>(&[]), 0.0);
    }

    #[test]
    fn relu_and_grad() {
        let a = DenseMatrix::from_rows(&[&[-1.0, 0.0, 2.0]]);
        assert_eq!(relu(&a), DenseMatrix::from_rows(&[&[0.0, 0.0, 2.0]]));
        assert_eq!(relu_grad(&a), DenseMatrix::from_rows(&[&[0.0, 0.0, 1.0]]));
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let a: DenseMatrix<f64> = DenseMatrix::zeros(1, 4);
        let s = softmax_rows(&a);
        for &p in s.values() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let b = DenseMatrix::from_rows(&[&[0.0, 3.0f64.ln()]]);
        let s = softmax_rows(&b);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
        // shift invariance
        let c = DenseMatrix::from_rows(&[&[100.0, 100.0 + 3.0f64.ln()]]);
        let sc = softmax_rows(&c);
        assert!((sc.get(0, 0) - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn norm_triangle_inequality(
            vals_a in proptest::collection::vec(-100.0f64..100.0, 12),
            vals_b in proptest::collection::vec(-100.0f64..100.0, 12),
        ) {
            let a = DenseMatrix::from_vec(3, 4, vals_a);
            let b = DenseMatrix::from_vec(3, 4, vals_b);
            prop_assert!(linf_norm(&add(&a, &b)) <= linf_norm(&a) + linf_norm(&b));
            prop_assert!(linf_norm(&hadamard(&a, &b)) <= linf_norm(&a) * linf_norm(&b));
        }

        #[test]
        fn norm_product_inequality(
            vals_a in proptest::collection::vec(-10.0f64..10.0, 6),
            vals_b in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            // A is 2x3 so the bound carries q = 3 columns.
            let a = DenseMatrix::from_vec(2, 3, vals_a);
            let b = DenseMatrix::from_vec(3, 4, vals_b.clone());
            let bound = 3.0 * linf_norm(&a) * linf_norm(&b);
            prop_assert!(linf_norm(&matmul(&a, &b)) <= bound);
        }
    }
}
