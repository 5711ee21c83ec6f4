//! Dense row-major tensors and the handful of kernels the network needs.
//!
//! Everything is `f64`. Matrix products go through a strided GEMM so that
//! transposed operands never have to be materialized.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor shape must have at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!(
            "tensor dimensions must be >= 1, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
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
}

/// Strided matrix view handed to [`gemm`]: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], usize, usize);

fn view_fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c ← alpha·a·b + beta·c` with `a` m×k, `b` k×n, `c` m×n, each a strided view.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsc, csc) = c_strides;
    assert!(view_fits(a.0.len(), m, k, a.1, a.2), "gemm: lhs view out of bounds");
    assert!(view_fits(b.0.len(), k, n, b.1, b.2), "gemm: rhs view out of bounds");
    assert!(view_fits(c.len(), m, n, rsc, csc), "gemm: output view out of bounds");
    // SAFETY: every index touched by dgemm is (i*rs + j*cs) for i, j inside
    // the stated extents, which the asserts above bound by the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul of {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        1.0,
        (&a.data, k, 1),
        (&b.data, n, 1),
        0.0,
        &mut out.data,
        (n, 1),
    );
    Ok(out)
}

/// Left padding for a "same" convolution; the extra zero of an even kernel
/// goes on the right.
pub fn same_pad_left(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Output rows `t` for which input row `t + offset` exists, as
/// `(first_output_row, first_input_row, count)`.
fn tap_range(len: usize, tap: usize, pad_left: usize) -> Option<(usize, usize, usize)> {
    let offset = tap as isize - pad_left as isize;
    let t0 = (-offset).max(0) as usize;
    let t1 = (len as isize - offset).min(len as isize);
    if t1 <= t0 as isize {
        return None;
    }
    let count = t1 as usize - t0;
    Some((t0, (t0 as isize + offset) as usize, count))
}

/// Single-sample "same" cross-correlation, accumulating into `out` (L×Cout),
/// which must already hold the bias.
pub(crate) fn conv1d_same_accumulate(
    x: &[f64],
    len: usize,
    cin: usize,
    kernels: &[f64],
    k: usize,
    cout: usize,
    out: &mut [f64],
) {
    let pad = same_pad_left(k);
    for tap in 0..k {
        let Some((t0, s0, count)) = tap_range(len, tap, pad) else {
            continue;
        };
        let w = &kernels[tap * cin * cout..(tap + 1) * cin * cout];
        gemm(
            count,
            cin,
            cout,
            1.0,
            (&x[s0 * cin..], cin, 1),
            (w, cout, 1),
            1.0,
            &mut out[t0 * cout..],
            (cout, 1),
        );
    }
}

/// Backward pass of [`conv1d_same_accumulate`] for one sample. Gradients are
/// accumulated (not overwritten) into `dx`, `dkernels` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_same_backward(
    x: &[f64],
    len: usize,
    cin: usize,
    kernels: &[f64],
    k: usize,
    cout: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dkernels: &mut [f64],
    dbias: &mut [f64],
) {
    let pad = same_pad_left(k);
    for t in 0..len {
        for (db, g) in dbias.iter_mut().zip(&dy[t * cout..(t + 1) * cout]) {
            *db += g;
        }
    }
    let mut dx = dx;
    for tap in 0..k {
        let Some((t0, s0, count)) = tap_range(len, tap, pad) else {
            continue;
        };
        let w = &kernels[tap * cin * cout..(tap + 1) * cin * cout];
        let dw = &mut dkernels[tap * cin * cout..(tap + 1) * cin * cout];
        // dW_tap += x[s0..]^T · dy[t0..]
        gemm(
            cin,
            count,
            cout,
            1.0,
            (&x[s0 * cin..], 1, cin),
            (&dy[t0 * cout..], cout, 1),
            1.0,
            dw,
            (cout, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dx[s0..] += dy[t0..] · W_tap^T
            gemm(
                count,
                cout,
                cin,
                1.0,
                (&dy[t0 * cout..], cout, 1),
                (w, 1, cout),
                1.0,
                &mut dx[s0 * cin..],
                (cin, 1),
            );
        }
    }
}

/// Stride-1 "same" cross-correlation of `input` (L×Cin) with `kernels`
/// (k×Cin×Cout) plus a per-channel `bias` (Cout).
pub fn conv1d_same(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if kernels.rank() != 3 {
        return Err(Error::arg(format!(
            "kernels must be k×Cin×Cout, got {:?}",
            kernels.shape
        )));
    }
    let (k, cin, cout) = (kernels.shape[0], kernels.shape[1], kernels.shape[2]);
    if input.rank() != 2 || input.shape[1] != cin {
        return Err(Error::dim(format!(
            "conv input {:?} does not match kernels {:?}",
            input.shape, kernels.shape
        )));
    }
    if bias.shape != [cout] {
        return Err(Error::dim(format!(
            "conv bias {:?} does not match kernels {:?}",
            bias.shape, kernels.shape
        )));
    }
    let len = input.shape[0];
    let mut out = Tensor::zeros(&[len, cout]);
    for row in out.data.chunks_mut(cout) {
        row.copy_from_slice(&bias.data);
    }
    conv1d_same_accumulate(&input.data, len, cin, &kernels.data, k, cout, &mut out.data);
    Ok(out)
}
