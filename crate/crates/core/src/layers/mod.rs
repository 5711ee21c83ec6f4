//! Forward and backward passes for every layer of the network.

mod conv;
mod dense;
mod dropout;
mod pool;
mod recurrent;

pub use conv::{ConvBlock, ConvBlockCache, ConvBlockGrads};
pub use dense::{cross_entropy, softmax_rows, DenseCache, DenseGrads, DenseSoftmax};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use pool::{global_avg_pool, global_avg_pool_backward};
pub use recurrent::{
    GruCell, GruGrads, GruStepCache, LstmCell, LstmGrads, LstmStepCache,
};

/// clamp(0.2u + 0.5, 0, 1)
#[inline]
pub fn hard_sigmoid(u: f64) -> f64 {
    (0.2 * u + 0.5).clamp(0.0, 1.0)
}

/// 0.2 strictly inside the linear region, 0 where the clamp is active.
#[inline]
pub fn hard_sigmoid_grad(u: f64) -> f64 {
    if u > -2.5 && u < 2.5 {
        0.2
    } else {
        0.0
    }
}

/// `out += x · w` for a row vector `x` (len `rows`) and row-major `w` (rows×cols).
#[inline]
pub(crate) fn vecmat_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (xi, wrow) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
}

/// `out += d · wᵀ` for `w` row-major (rows×cols), `d` of len `cols`.
#[inline]
pub(crate) fn mat_t_acc(d: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (o, wrow) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += wrow.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dw += xᵀ d` (outer product) for `dw` row-major (len(x)×len(d)).
#[inline]
pub(crate) fn outer_acc(x: &[f64], d: &[f64], dw: &mut [f64]) {
    let cols = d.len();
    for (xi, row) in x.iter().zip(dw.chunks_exact_mut(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (r, dv) in row.iter_mut().zip(d) {
            *r += xi * dv;
        }
    }
}

#[inline]
pub(crate) fn add_assign(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_sigmoid_shape() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_sigmoid(2.5), 1.0);
        assert_eq!(hard_sigmoid(-3.0), 0.0);
        assert!((hard_sigmoid(1.0) - 0.7).abs() < 1e-15);
        assert_eq!(hard_sigmoid_grad(0.0), 0.2);
        assert_eq!(hard_sigmoid_grad(2.5), 0.0);
        assert_eq!(hard_sigmoid_grad(-2.6), 0.0);
    }
}
