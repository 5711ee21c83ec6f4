use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-element multipliers: 0 for dropped units, 1/(1-rate) for survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn survivors(&self) -> usize {
        self.scale.iter().filter(|&&s| s != 0.0).count()
    }
}

/// Inverted dropout. Each element is zeroed with probability `rate`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::arg(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..x.len())
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    let y = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
    Ok((Tensor::new(x.shape(), y)?, DropoutMask { scale }))
}

pub fn dropout_backward(grad: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    if grad.len() != mask.scale.len() {
        return Err(Error::dim(format!(
            "dropout gradient has {} elements, mask has {}",
            grad.len(),
            mask.scale.len()
        )));
    }
    let d = grad.data().iter().zip(&mask.scale).map(|(g, s)| g * s).collect();
    Tensor::new(grad.shape(), d)
}
