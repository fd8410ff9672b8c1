//! Dense row-major `f64` tensors of rank 0, 1, or 2, plus the raw math
//! kernels shared by the tape operations and the direct (no-tape) forward
//! paths in the model code.

use serde::{Deserialize, Serialize};

use super::AutodiffError;
use crate::parallel;

/// A dense tensor. Rank 0 is a scalar (`shape == []`), rank 1 a vector, rank 2
/// a row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor after checking that `shape` and `data` agree.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::WrongRank {
                op,
                rank: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<(), AutodiffError> {
        if self.shape != rhs.shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        self.same_shape(rhs, op)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Adds a length-`d` bias vector to every row of an `[n, d]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, AutodiffError> {
        let (_, cols) = self.dims2("add_bias")?;
        if bias.shape.as_slice() != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sums of an `[n, d]` matrix, as a length-`d` vector.
    pub fn col_sums(&self) -> Result<Tensor, AutodiffError> {
        let (_, cols) = self.dims2("col_sums")?;
        let mut sums = vec![0.0; cols];
        for row in self.data.chunks(cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        Ok(Tensor::vector(sums))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        parallel::for_each_row(&mut out, m.max(1), |i, out_row| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (&a, b_row) in a_row.iter().zip(rhs.data.chunks(m)) {
                if a != 0.0 {
                    for (o, &b) in out_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        });
        Tensor::new(vec![n, m], out)
    }

    /// `[n, k] x [m, k]^T -> [n, m]` (right operand transposed).
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, k) = self.dims2("matmul_nt")?;
        let (m, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        parallel::for_each_row(&mut out, m.max(1), |i, out_row| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (o, b_row) in out_row.iter_mut().zip(rhs.data.chunks(k)) {
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        });
        Tensor::new(vec![n, m], out)
    }

    /// `[n, k]^T x [n, m] -> [k, m]` (left operand transposed).
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, k) = self.dims2("matmul_tn")?;
        let (n2, m) = rhs.dims2("matmul_tn")?;
        if n != n2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; k * m];
        parallel::for_each_row(&mut out, m.max(1), |col, out_row| {
            // Output row `col` is sum_i A[i, col] * B[i, :].
            for i in 0..n {
                let a = self.data[i * k + col];
                if a != 0.0 {
                    let b_row = &rhs.data[i * m..(i + 1) * m];
                    for (o, &b) in out_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        });
        Tensor::new(vec![k, m], out)
    }

    /// Gathers rows of an `[n, d]` matrix by index; indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor, AutodiffError> {
        let (n, d) = self.dims2("row-select")?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(AutodiffError::RowIndex { index: i, rows: n });
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, c1) = self.dims2("concat")?;
        let (n2, c2) = rhs.dims2("concat")?;
        if n != n2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(n * (c1 + c2));
        for i in 0..n {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(rhs.row(i));
        }
        Tensor::new(vec![n, c1 + c2], data)
    }

    /// Row-wise softmax of an `[n, d]` matrix, stabilized by subtracting each
    /// row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor, AutodiffError> {
        let (_, cols) = self.dims2("softmax")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(out)
    }

    /// Row-wise log-softmax of an `[n, d]` matrix.
    pub fn log_softmax_rows(&self) -> Result<Tensor, AutodiffError> {
        let (_, cols) = self.dims2("log-softmax")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= log_sum;
            }
        }
        Ok(out)
    }

    /// All-pairs Euclidean distances between the rows of `[n1, d]` and
    /// `[n2, d]`, as an `[n1, n2]` matrix.
    pub fn pairwise_l2(&self, rhs: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n1, d) = self.dims2("pairwise_l2")?;
        let (n2, d2) = rhs.dims2("pairwise_l2")?;
        if d != d2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "pairwise_l2",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; n1 * n2];
        parallel::for_each_row(&mut out, n2.max(1), |i, out_row| {
            let a = &self.data[i * d..(i + 1) * d];
            for (o, b) in out_row.iter_mut().zip(rhs.data.chunks(d)) {
                let mut sq = 0.0;
                for (&av, &bv) in a.iter().zip(b) {
                    let diff = av - bv;
                    sq += diff * diff;
                }
                *o = sq.sqrt();
            }
        });
        Tensor::new(vec![n1, n2], out)
    }
}
