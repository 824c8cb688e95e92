use crate::{Result, TensorError};

/// Dense row-major f64 matrix. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("{} values cannot fill {rows}x{cols}", data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Scalar payload of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows * self.cols != 1 {
            return Err(TensorError::NonScalarLoss { rows: self.rows, cols: self.cols });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `C = A B` for `A: r x k`, `B: k x c`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.rows {
            return Err(shape_err("matmul", self, b));
        }
        let mut out = Tensor::zeros(self.rows, b.cols);
        matmul_into(&self.data, &b.data, &mut out.data, self.rows, self.cols, b.cols);
        Ok(out)
    }

    /// `C = A B^T` for `A: r x k`, `B: c x k`.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.cols {
            return Err(shape_err("matmul_nt", self, b));
        }
        let (r, k, c) = (self.rows, self.cols, b.rows);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let a_row = self.row(i);
            let o_row = out.row_mut(i);
            for (j, o) in o_row.iter_mut().enumerate() {
                let b_row = &b.data[j * k..(j + 1) * k];
                *o = dot(a_row, b_row);
            }
        }
        Ok(out)
    }

    /// `C = A^T B` for `A: k x r`, `B: k x c`.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        if self.rows != b.rows {
            return Err(shape_err("matmul_tn", self, b));
        }
        let (k, r, c) = (self.rows, self.cols, b.cols);
        let mut out = Tensor::zeros(r, c);
        for l in 0..k {
            let a_row = self.row(l);
            let b_row = &b.data[l * c..(l + 1) * c];
            for (i, &a) in a_row.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, b_row, &mut out.data[i * c..(i + 1) * c]);
                }
            }
        }
        Ok(out)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs_rows: a.rows,
        lhs_cols: a.cols,
        rhs_rows: b.rows,
        rhs_cols: b.cols,
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += a * x[i];
    }
}

/// ikj matrix multiply accumulating into `out` (must be zeroed by the caller).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * c..(i + 1) * c];
        for (l, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[l * c..(l + 1) * c], o_row);
            }
        }
    }
}
