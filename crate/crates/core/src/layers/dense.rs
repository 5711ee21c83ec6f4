//! Fully connected layer followed by softmax and mean cross-entropy.

use crate::error::{Error, Result};
use crate::rng::{glorot_uniform, Rng};
use crate::tensor::{matmul, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::dim(format!("softmax expects B×C, got {:?}", logits.shape())));
    }
    let c = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSoftmax {
    /// F×C
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Tensor,
    probs: Tensor,
}

impl DenseCache {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Checks that `targets` is B×C with exactly one 1 per row.
pub(crate) fn validate_one_hot(targets: &Tensor, batch: usize, classes: usize) -> Result<()> {
    if targets.shape() != [batch, classes] {
        return Err(Error::dim(format!(
            "targets {:?} do not match predictions [{batch}, {classes}]",
            targets.shape()
        )));
    }
    for (i, row) in targets.data().chunks_exact(classes).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(Error::arg(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}

impl DenseSoftmax {
    pub fn zeros(features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(Error::arg("dense layer needs at least one feature and one class"));
        }
        Ok(Self {
            weights: Tensor::zeros(&[features, classes]),
            bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn glorot(rng: &mut Rng, features: usize, classes: usize) -> Result<Self> {
        let mut layer = Self::zeros(features, classes)?;
        layer.weights = glorot_uniform(rng, features, classes, &[features, classes])?;
        Ok(layer)
    }

    pub fn features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = matmul(x, &self.weights)?;
        let c = self.classes();
        for row in z.data_mut().chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, DenseCache)> {
        let probs = softmax_rows(&self.logits(x)?)?;
        Ok((
            probs.clone(),
            DenseCache {
                input: x.clone(),
                probs,
            },
        ))
    }

    /// Gradients of the batch-mean cross-entropy, using dL/dz = (p - y)/B.
    pub fn backward(&self, cache: &DenseCache, targets: &Tensor) -> Result<(Tensor, DenseGrads)> {
        let (b, c) = (cache.probs.shape()[0], self.classes());
        validate_one_hot(targets, b, c)?;
        let mut dz = cache.probs.clone();
        for (d, y) in dz.data_mut().iter_mut().zip(targets.data()) {
            *d = (*d - y) / b as f64;
        }
        let mut bias = vec![0.0; c];
        for row in dz.data().chunks_exact(c) {
            for (g, v) in bias.iter_mut().zip(row) {
                *g += v;
            }
        }
        let f = self.features();
        let mut dw = vec![0.0; f * c];
        crate::tensor::gemm(
            f,
            b,
            c,
            1.0,
            (cache.input.data(), 1, f),
            (dz.data(), c, 1),
            0.0,
            &mut dw,
            (c, 1),
        );
        let mut dx = vec![0.0; b * f];
        crate::tensor::gemm(
            b,
            c,
            f,
            1.0,
            (dz.data(), c, 1),
            (self.weights.data(), 1, c),
            0.0,
            &mut dx,
            (f, 1),
        );
        Ok((
            Tensor::new(&[b, f], dx)?,
            DenseGrads {
                weights: Tensor::new(&[f, c], dw)?,
                bias: Tensor::new(&[c], bias)?,
            },
        ))
    }
}

/// Mean over the batch of -Σ y·ln p. Probabilities are floored at the
/// smallest positive double so a confident miss stays finite.
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.rank() != 2 {
        return Err(Error::dim(format!("probabilities must be B×C, got {:?}", probs.shape())));
    }
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    validate_one_hot(targets, b, c)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(_, &y)| y == 1.0)
        .map(|(&p, _)| -p.max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / b as f64)
}
