//! Dense row-major `f32` tensors.
//!
//! Tensors are plain contiguous buffers. The last two axes of a tensor of
//! rank >= 2 are treated as a matrix by [`Tensor::matmul`]; all leading axes
//! are batch axes. A tensor of shape `[]` is a scalar.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced for shape {shape:?}"
        );
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Row-major 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Normal samples with standard deviation `std`, resampled outside two
    /// standard deviations.
    pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f32 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of trailing-axis rows.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient of length {} for tensor of shape {:?}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Copy of the given trailing-axis rows, stacked in order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let w = self.last_dim();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor::from_parts(vec![rows.len(), w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Batch axes must either match or be absent on one side, in which case
    /// that operand is shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let dims = MatmulDims::infer(&self.shape, &other.shape)?;
        let mut out = vec![0.0; dims.out_len()];
        dims.forward(&self.data, &other.data, &mut out);
        Ok(Tensor::from_parts(dims.out_shape.clone(), out))
    }

    /// Softmax over the trailing axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Tensor {
        let w = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    /// `x * sigmoid(x)` elementwise.
    pub fn silu(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| silu(x)).collect())
    }

    /// Writes `rank: u64`, `dims: [u64; rank]`, then the `f32` payload, all
    /// little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word) as usize;
        if rank > 16 {
            return Err(Error::Parse(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (1 + self.rank()) + 4 * self.numel());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Resolved shapes of a batched matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    pub fn infer(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (a_batch, a_mat) = a.split_at(a.len() - 2);
        let (b_batch, b_mat) = b.split_at(b.len() - 2);
        if a_mat[1] != b_mat[0] {
            return Err(Error::shape("matmul", a, b));
        }
        let batch_shape = match (a_batch.is_empty(), b_batch.is_empty()) {
            (_, true) => a_batch,
            (true, false) => b_batch,
            (false, false) if a_batch == b_batch => a_batch,
            _ => return Err(Error::shape("matmul", a, b)),
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend_from_slice(&[a_mat[0], b_mat[1]]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            m: a_mat[0],
            k: a_mat[1],
            n: b_mat[1],
            a_batched: !a_batch.is_empty(),
            b_batched: !b_batch.is_empty(),
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward(&self, a: &[f32], b: &[f32], c: &mut [f32]) {
        if !self.b_batched {
            // Shared right operand: fold the batch into the row axis.
            gemm(self.batch * self.m, self.k, self.n, a, Layout::Normal, b, Layout::Normal, c, false);
            return;
        }
        for bi in 0..self.batch {
            let a_off = if self.a_batched { bi * self.m * self.k } else { 0 };
            gemm(
                self.m,
                self.k,
                self.n,
                &a[a_off..a_off + self.m * self.k],
                Layout::Normal,
                &b[bi * self.k * self.n..(bi + 1) * self.k * self.n],
                Layout::Normal,
                &mut c[bi * self.m * self.n..(bi + 1) * self.m * self.n],
                false,
            );
        }
    }

    /// Accumulates dA += dC Bᵀ and dB += Aᵀ dC.
    pub fn backward(
        &self,
        a: &[f32],
        b: &[f32],
        dc: &[f32],
        da: Option<&mut [f32]>,
        db: Option<&mut [f32]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            let rows = self.batch * m;
            if let Some(da) = da {
                gemm(rows, n, k, dc, Layout::Normal, b, Layout::Transposed { ld: n }, da, true);
            }
            if let Some(db) = db {
                gemm(k, rows, n, a, Layout::Transposed { ld: k }, dc, Layout::Normal, db, true);
            }
            return;
        }
        let mut da = da;
        let mut db = db;
        for bi in 0..self.batch {
            let a_off = if self.a_batched { bi * m * k } else { 0 };
            let a_blk = &a[a_off..a_off + m * k];
            let b_blk = &b[bi * k * n..(bi + 1) * k * n];
            let dc_blk = &dc[bi * m * n..(bi + 1) * m * n];
            if let Some(da) = da.as_deref_mut() {
                gemm(m, n, k, dc_blk, Layout::Normal, b_blk, Layout::Transposed { ld: n }, &mut da[a_off..a_off + m * k], true);
            }
            if let Some(db) = db.as_deref_mut() {
                gemm(k, m, n, a_blk, Layout::Transposed { ld: k }, dc_blk, Layout::Normal, &mut db[bi * k * n..(bi + 1) * k * n], true);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Layout {
    Normal,
    /// Operand stored as its transpose with the given row length.
    Transposed { ld: usize },
}

/// `c (+)= a · b` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed { ld } => (1, ld as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed { ld } => (1, ld as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index touched by the given
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
