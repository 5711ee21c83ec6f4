use crate::error::{Error, Result};
use crate::rng::{he_uniform, Rng};
use crate::tensor::{conv1d_same_accumulate, conv1d_same_backward, Tensor};

/// Convolution, batch normalization and ReLU: `relu(bn(conv(x)))`.
///
/// Inputs are batches shaped B×L×Cin. Batch statistics are taken over all
/// B·L positions of each channel, and the variance is the biased one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    /// k×Cin×Cout
    pub kernels: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Everything the backward pass needs from a training-mode forward.
#[derive(Clone, Debug)]
pub struct ConvBlockCache {
    x: Tensor,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl ConvBlockCache {
    /// Normalized pre-affine activations, (B·L)×Cout.
    pub fn normalized(&self) -> &[f64] {
        &self.xhat
    }

    pub fn batch_mean(&self) -> &[f64] {
        &self.batch_mean
    }

    pub fn batch_var(&self) -> &[f64] {
        &self.batch_var
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlockGrads {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl ConvBlock {
    /// Zero kernels, unit scale, zero shift, moving statistics (0, 1).
    pub fn new(name: impl Into<String>, kernel: usize, cin: usize, cout: usize) -> Result<Self> {
        if kernel < 1 || cin < 1 || cout < 1 {
            return Err(Error::arg(format!(
                "conv block needs kernel, Cin, Cout >= 1 (got {kernel}, {cin}, {cout})"
            )));
        }
        Ok(Self {
            name: name.into(),
            kernels: Tensor::zeros(&[kernel, cin, cout]),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            moving_mean: Tensor::zeros(&[cout]),
            moving_var: Tensor::full(&[cout], 1.0),
            momentum: 0.99,
            epsilon: 1e-3,
        })
    }

    /// He-uniform kernels with fan_in = k·Cin.
    pub fn he_init(&mut self, rng: &mut Rng) -> Result<()> {
        let (k, cin, _) = self.dims();
        self.kernels = he_uniform(rng, k * cin, self.kernels.shape())?;
        Ok(())
    }

    /// (kernel, Cin, Cout)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.kernels.shape();
        (s[0], s[1], s[2])
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (_, cin, _) = self.dims();
        if x.rank() != 3 || x.shape()[2] != cin {
            return Err(Error::dim(format!(
                "{}: input {:?} does not match kernels {:?}",
                self.name,
                x.shape(),
                self.kernels.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::Numeric {
                layer: self.name.clone(),
                detail: "input contains NaN or infinity".into(),
            });
        }
        Ok((x.shape()[0], x.shape()[1]))
    }

    fn convolve(&self, x: &Tensor, batch: usize, len: usize) -> Vec<f64> {
        let (k, cin, cout) = self.dims();
        let mut y = vec![0.0; batch * len * cout];
        for row in y.chunks_exact_mut(cout) {
            row.copy_from_slice(self.bias.data());
        }
        for (xs, ys) in x
            .data()
            .chunks_exact(len * cin)
            .zip(y.chunks_exact_mut(len * cout))
        {
            conv1d_same_accumulate(xs, len, cin, self.kernels.data(), k, cout, ys);
        }
        y
    }

    /// Training-mode forward using batch statistics. Does not touch the
    /// moving statistics; see [`ConvBlock::update_moving_stats`].
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, ConvBlockCache)> {
        let (batch, len) = self.check_input(x)?;
        let (_, _, cout) = self.dims();
        let mut y = self.convolve(x, batch, len);
        let n = (batch * len) as f64;

        let mut mean = vec![0.0; cout];
        for row in y.chunks_exact(cout) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cout];
        for row in y.chunks_exact(cout) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();

        let mut out = vec![0.0; y.len()];
        for (row, orow) in y.chunks_exact_mut(cout).zip(out.chunks_exact_mut(cout)) {
            for c in 0..cout {
                let xhat = (row[c] - mean[c]) * inv_std[c];
                row[c] = xhat;
                orow[c] = (self.gamma.data()[c] * xhat + self.beta.data()[c]).max(0.0);
            }
        }
        let result = Tensor::new(&[batch, len, cout], out.clone())?;
        Ok((
            result,
            ConvBlockCache {
                x: x.clone(),
                xhat: y,
                inv_std,
                out,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// moving ← momentum·moving + (1 − momentum)·batch
    pub fn update_moving_stats(&mut self, cache: &ConvBlockCache) {
        let m = self.momentum;
        for (mm, b) in self.moving_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *mm = m * *mm + (1.0 - m) * b;
        }
        for (mv, b) in self.moving_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *mv = m * *mv + (1.0 - m) * b;
        }
    }

    /// Inference-mode forward with the moving statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, len) = self.check_input(x)?;
        let (_, _, cout) = self.dims();
        let mut y = self.convolve(x, batch, len);
        let scale: Vec<f64> = (0..cout)
            .map(|c| self.gamma.data()[c] / (self.moving_var.data()[c] + self.epsilon).sqrt())
            .collect();
        for row in y.chunks_exact_mut(cout) {
            for c in 0..cout {
                let z = (row[c] - self.moving_mean.data()[c]) * scale[c] + self.beta.data()[c];
                row[c] = z.max(0.0);
            }
        }
        Tensor::new(&[batch, len, cout], y)
    }

    /// Training mode computes batch statistics and folds them into the moving
    /// averages; inference mode uses the moving averages and returns no cache.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<(Tensor, Option<ConvBlockCache>)> {
        if training {
            let (out, cache) = self.forward_batch(x)?;
            self.update_moving_stats(&cache);
            Ok((out, Some(cache)))
        } else {
            Ok((self.infer(x)?, None))
        }
    }

    pub fn backward(&self, cache: &ConvBlockCache, grad_out: &Tensor) -> Result<(Tensor, ConvBlockGrads)> {
        let (k, cin, cout) = self.dims();
        if grad_out.len() != cache.out.len() || grad_out.shape().last() != Some(&cout) {
            return Err(Error::dim(format!(
                "{}: gradient {:?} does not match cached output of {} values",
                self.name,
                grad_out.shape(),
                cache.out.len()
            )));
        }
        let (batch, len) = (cache.x.shape()[0], cache.x.shape()[1]);
        let n = (batch * len) as f64;
        let gamma = self.gamma.data();

        // Through ReLU (derivative 0 at 0) and the affine step.
        let mut dxhat = vec![0.0; cache.out.len()];
        let mut dgamma = vec![0.0; cout];
        let mut dbeta = vec![0.0; cout];
        for (i, (&g, &o)) in grad_out.data().iter().zip(&cache.out).enumerate() {
            if o > 0.0 {
                let c = i % cout;
                dgamma[c] += g * cache.xhat[i];
                dbeta[c] += g;
                dxhat[i] = g * gamma[c];
            }
        }

        // Through the batch statistics.
        let mut sum_d = vec![0.0; cout];
        let mut sum_dx = vec![0.0; cout];
        for (drow, xrow) in dxhat.chunks_exact(cout).zip(cache.xhat.chunks_exact(cout)) {
            for c in 0..cout {
                sum_d[c] += drow[c];
                sum_dx[c] += drow[c] * xrow[c];
            }
        }
        let mut dy = dxhat;
        for (drow, xrow) in dy.chunks_exact_mut(cout).zip(cache.xhat.chunks_exact(cout)) {
            for c in 0..cout {
                drow[c] = cache.inv_std[c] / n * (n * drow[c] - sum_d[c] - xrow[c] * sum_dx[c]);
            }
        }

        // Through the convolution.
        let mut dx = vec![0.0; cache.x.len()];
        let mut dk = vec![0.0; self.kernels.len()];
        let mut db = vec![0.0; cout];
        for ((xs, dys), dxs) in cache
            .x
            .data()
            .chunks_exact(len * cin)
            .zip(dy.chunks_exact(len * cout))
            .zip(dx.chunks_exact_mut(len * cin))
        {
            conv1d_same_backward(
                xs,
                len,
                cin,
                self.kernels.data(),
                k,
                cout,
                dys,
                Some(dxs),
                &mut dk,
                &mut db,
            );
        }

        Ok((
            Tensor::new(cache.x.shape(), dx)?,
            ConvBlockGrads {
                kernels: Tensor::new(self.kernels.shape(), dk)?,
                bias: Tensor::new(&[cout], db)?,
                gamma: Tensor::new(&[cout], dgamma)?,
                beta: Tensor::new(&[cout], dbeta)?,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};

    fn random_block(rng: &mut Rng, k: usize, cin: usize, cout: usize) -> ConvBlock {
        let mut b = ConvBlock::new("conv_test", k, cin, cout).unwrap();
        b.he_init(rng).unwrap();
        b.bias = random_tensor(rng, &[cout], 0.5);
        b.gamma = random_tensor(rng, &[cout], 1.0).map(|v| v + 1.5);
        b.beta = random_tensor(rng, &[cout], 0.5);
        b
    }

    /// Loss = Σ w ⊙ out for a fixed random projection w.
    fn projected_loss(block: &ConvBlock, x: &Tensor, w: &Tensor) -> f64 {
        let (out, _) = block.forward_batch(x).unwrap();
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut b = ConvBlock::new("c", 3, 1, 4).unwrap();
        b.he_init(&mut Rng::new(1)).unwrap();
        let (out, _) = b.forward(&Tensor::zeros(&[2, 5, 1]), true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_negative_shift_clips_everything() {
        let mut rng = Rng::new(2);
        let mut b = random_block(&mut rng, 5, 2, 3);
        b.beta.fill(-10.0);
        b.gamma.fill(1.0);
        let x = random_tensor(&mut rng, &[3, 9, 2], 1.0);
        let (out, _) = b.forward(&x, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = b.infer(&x).unwrap();
        // moving stats after one update are near (0, 1); -10 still dominates
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        let mut rng = Rng::new(3);
        let mut b = random_block(&mut rng, 8, 1, 6);
        let x = random_tensor(&mut rng, &[4, 20, 1], 3.0);

        let (_, cache) = b.forward_batch(&x).unwrap();
        let cout = 6;
        let n = 80.0;
        for c in 0..cout {
            let col: Vec<f64> = cache.normalized().iter().skip(c).step_by(cout).copied().collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            let bv = cache.batch_var()[c];
            assert!((var - bv / (bv + b.epsilon)).abs() < 1e-9);
        }

        b.epsilon = 1e-12;
        let (_, cache) = b.forward_batch(&x).unwrap();
        for c in 0..cout {
            let col: Vec<f64> = cache.normalized().iter().skip(c).step_by(cout).copied().collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn moving_stats_follow_momentum_rule() {
        let mut rng = Rng::new(4);
        let mut b = random_block(&mut rng, 3, 2, 2);
        let x = random_tensor(&mut rng, &[2, 6, 2], 1.0);
        let (_, cache) = b.forward(&x, true).unwrap();
        let cache = cache.unwrap();
        for c in 0..2 {
            assert!((b.moving_mean.data()[c] - 0.01 * cache.batch_mean()[c]).abs() < 1e-15);
            let expect = 0.99 + 0.01 * cache.batch_var()[c];
            assert!((b.moving_var.data()[c] - expect).abs() < 1e-15);
            assert!(b.moving_var.data()[c] >= 0.0);
        }
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let b = ConvBlock::new("conv2", 3, 1, 2).unwrap();
        let mut x = Tensor::zeros(&[1, 4, 1]);
        x.data_mut()[2] = f64::NAN;
        let err = b.forward_batch(&x).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref layer, .. } if layer == "conv2"));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let b = random_block(&mut rng, 5, 2, 3);
        let x = random_tensor(&mut rng, &[2, 7, 2], 1.0);
        let (out, cache) = b.forward_batch(&x).unwrap();
        let (dx, g) = b.backward(&cache, &Tensor::zeros(out.shape())).unwrap();
        for t in [&dx, &g.kernels, &g.bias, &g.gamma, &g.beta] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let mut rng = Rng::new(6);
        let b = random_block(&mut rng, 3, 1, 2);
        let x = random_tensor(&mut rng, &[1, 4, 1], 1.0);
        let (_, cache) = b.forward_batch(&x).unwrap();
        assert!(matches!(
            b.backward(&cache, &Tensor::zeros(&[1, 5, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sum_loss_gradient_matches_finite_differences() {
        // loss = Σ out: upstream gradient of ones, so dx is the chain through
        // the ReLU mask and batch statistics.
        let mut rng = Rng::new(7);
        let block = random_block(&mut rng, 5, 2, 2);
        let x = random_tensor(&mut rng, &[2, 16, 2], 1.0);
        let (out, cache) = block.forward_batch(&x).unwrap();
        let ones = Tensor::full(out.shape(), 1.0);
        let (dx, _) = block.backward(&cache, &ones).unwrap();
        check_gradient("x", &x, &dx, |xp| projected_loss(&block, xp, &ones)).unwrap();
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(100 + seed);
            let block = random_block(&mut rng, [3, 5, 8][seed as usize % 3], 2, 2);
            let x = random_tensor(&mut rng, &[2, 16, 2], 1.0);
            let w = random_tensor(&mut rng, &[2, 16, 2], 1.0);
            let (_, cache) = block.forward_batch(&x).unwrap();
            let (dx, g) = block.backward(&cache, &w).unwrap();

            check_gradient("x", &x, &dx, |p| projected_loss(&block, p, &w)).unwrap();
            let fields: [(&str, &Tensor, fn(&mut ConvBlock) -> &mut Tensor); 4] = [
                ("kernels", &g.kernels, |b| &mut b.kernels),
                ("bias", &g.bias, |b| &mut b.bias),
                ("gamma", &g.gamma, |b| &mut b.gamma),
                ("beta", &g.beta, |b| &mut b.beta),
            ];
            for (name, grad, field) in fields {
                let mut probe = block.clone();
                let base = field(&mut probe).clone();
                check_gradient(name, &base, grad, |p| {
                    *field(&mut probe) = p.clone();
                    projected_loss(&probe, &x, &w)
                })
                .unwrap();
            }
        }
    }
}
