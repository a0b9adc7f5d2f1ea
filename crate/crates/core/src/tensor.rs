//! Dense row-major `f64` tensors and the deterministic kernels shared by the
//! autodiff tape.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) || n != data.len() {
            return Err(Error::shape("tensor", &dims, &[data.len()]));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.dims.last().expect("tensor has at least one axis");
        (self.data.len() / cols, cols)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape("elementwise", &self.dims, &other.dims));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// Plain matrix product, no tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.dims[1] != other.dims[0] {
            return Err(Error::shape("matmul", &self.dims, &other.dims));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }
}

/// `out += a[m×k] · b[k×n]`, row-major, fixed i-p-j order.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Rotary embedding angle frequency for pair `j` of a head of width `head_dim`.
pub fn rope_frequency(j: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * j as f64 / head_dim as f64)
}

/// Rotates interleaved pairs `(2j, 2j+1)` inside each head of every row by
/// `sign · position · θ_j`.
pub(crate) fn rope_rotate(
    data: &[f64],
    out: &mut [f64],
    cols: usize,
    head_dim: usize,
    positions: &[f64],
    base: f64,
    sign: f64,
) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|j| rope_frequency(j, head_dim, base)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &data[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for h in 0..cols / head_dim {
            for (j, &f) in freqs.iter().enumerate() {
                let (s, c) = (sign * pos * f).sin_cos();
                let i0 = h * head_dim + 2 * j;
                let (x0, x1) = (row[i0], row[i0 + 1]);
                orow[i0] = x0 * c - x1 * s;
                orow[i0 + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Applies rotary position embedding to the rows of `x` (`[L × d]`), one
/// position per row, heads of width `head_dim`, base 10000.
pub fn rope_apply(x: &Tensor, positions: &[i64], head_dim: usize) -> Result<Tensor> {
    let (rows, cols) = x.matrix_dims();
    if !head_dim.is_multiple_of(2) || cols % head_dim != 0 || positions.len() != rows {
        return Err(Error::shape("rope", x.dims(), &[positions.len(), head_dim]));
    }
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    let mut out = vec![0.0; x.len()];
    rope_rotate(x.data(), &mut out, cols, head_dim, &pos, ROPE_BASE, 1.0);
    Tensor::new(x.dims().to_vec(), out)
}

pub const ROPE_BASE: f64 = 10000.0;
