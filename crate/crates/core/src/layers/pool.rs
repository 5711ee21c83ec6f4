use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, l, c] => Ok((b, l, c)),
        _ => Err(Error::dim(format!("{what}: expected B×L×C, got {:?}", x.shape()))),
    }
}

/// Mean over the time axis: B×L×C -> B×C.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, l, c) = dims3(x, "global_avg_pool")?;
    let mut out = vec![0.0; b * c];
    for (n, sample) in x.data().chunks_exact(l * c).enumerate() {
        let acc = &mut out[n * c..(n + 1) * c];
        for row in sample.chunks_exact(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= l as f64);
    }
    Tensor::new(&[b, c], out)
}

/// Spreads each B×C gradient evenly over `len` time steps.
pub fn global_avg_pool_backward(grad: &Tensor, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::arg("global_avg_pool_backward: length must be >= 1"));
    }
    let (b, c) = match *grad.shape() {
        [b, c] => (b, c),
        _ => return Err(Error::dim(format!("pool gradient must be B×C, got {:?}", grad.shape()))),
    };
    let mut out = Vec::with_capacity(b * len * c);
    for row in grad.data().chunks_exact(c) {
        for _ in 0..len {
            out.extend(row.iter().map(|g| g / len as f64));
        }
    }
    Tensor::new(&[b, len, c], out)
}
