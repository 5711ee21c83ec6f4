//! Adam, the step-decay schedule, evaluation and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{one_hot, UcrDataset};
use crate::error::{Error, Result};
use crate::layers::cross_entropy;
use crate::model::GruFcnModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// lr(e) = max(floor, initial · factor^⌊e / interval⌋)
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub interval: usize,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.01,
            factor: 0.8,
            interval: 100,
            floor: 1e-4,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.interval.max(1)).min(i32::MAX as usize) as i32;
        (self.initial * self.factor.powi(decays)).max(self.floor)
    }
}

/// Adam with bias-corrected moments. Moment buffers are allocated on the
/// first step to match the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "parameter {i} is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return Err(Error::dim("parameter list changed between optimizer steps"));
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_error: f64,
}

/// Settings of one training run and, once fitted, its history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub epochs: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub history: Vec<EpochRecord>,
    /// Where the best-so-far model is written; `None` disables saving.
    pub best_checkpoint_path: Option<PathBuf>,
    /// Epoch of the lowest eval loss seen.
    pub best_epoch: Option<usize>,
}

impl TrainRun {
    pub fn new(epochs: usize, train_batch: usize, eval_batch: usize, seed: u64) -> Self {
        Self {
            epochs,
            train_batch,
            eval_batch,
            seed,
            schedule: LrSchedule::default(),
            history: Vec::new(),
            best_checkpoint_path: None,
            best_epoch: None,
        }
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.best_checkpoint_path = Some(path.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error: f64,
    pub predictions: Vec<usize>,
    /// N×C
    pub probs: Tensor,
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(&[idx.len(), w], data)
}

fn check_data(model: &GruFcnModel, x: &Tensor, y: &[usize]) -> Result<()> {
    let cfg = model.config();
    if x.rank() != 2 || x.shape()[1] != cfg.series_length {
        return Err(Error::arg(format!(
            "series {:?} do not match the model's length {}",
            x.shape(),
            cfg.series_length
        )));
    }
    if x.shape()[0] != y.len() {
        return Err(Error::arg(format!("{} series but {} labels", x.shape()[0], y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= cfg.num_classes) {
        return Err(Error::arg(format!("class {bad} out of range for {} classes", cfg.num_classes)));
    }
    Ok(())
}

/// Inference-mode pass in chunks of `batch` rows (capped at N).
pub fn evaluate(model: &GruFcnModel, x: &Tensor, y: &[usize], batch: usize) -> Result<Evaluation> {
    check_data(model, x, y)?;
    if batch == 0 {
        return Err(Error::arg("evaluation batch size must be >= 1"));
    }
    let n = y.len();
    let c = model.config().num_classes;
    let mut probs = Vec::with_capacity(n * c);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.min(n)) {
        probs.extend_from_slice(model.predict(&gather_rows(x, chunk)?)?.data());
    }
    let probs = Tensor::new(&[n, c], probs)?;
    let loss = cross_entropy(&probs, &one_hot(y, c)?)?;
    let predictions: Vec<usize> = probs.data().chunks_exact(c).map(argmax).collect();
    let wrong = predictions.iter().zip(y).filter(|(p, t)| p != t).count();
    Ok(Evaluation {
        loss,
        error: wrong as f64 / n as f64,
        predictions,
        probs,
    })
}

/// [`fit_with`] without a progress callback.
pub fn fit(model: &mut GruFcnModel, data: &UcrDataset, run: TrainRun) -> Result<TrainRun> {
    fit_with(model, data, run, |_| {})
}

/// Trains on the train split and evaluates on the test split after every
/// epoch. Each epoch reseeds its generator with `seed + epoch` for the
/// shuffle and the dropout masks. Whenever the eval loss improves, the
/// model is written to `best_checkpoint_path`.
pub fn fit_with(
    model: &mut GruFcnModel,
    data: &UcrDataset,
    mut run: TrainRun,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    check_data(model, &data.train_x, &data.train_y)?;
    check_data(model, &data.test_x, &data.test_y)?;
    if run.train_batch == 0 || run.eval_batch == 0 {
        return Err(Error::arg("batch sizes must be >= 1"));
    }
    let n = data.train_y.len();
    let classes = model.config().num_classes;
    let mut adam = AdamState::new(run.schedule.lr_at(0));
    let mut best_loss = f64::INFINITY;
    let start = run.history.len();

    for epoch in start..start + run.epochs {
        let mut rng = Rng::new(run.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        adam.lr = run.schedule.lr_at(epoch);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(run.train_batch) {
            let x = gather_rows(&data.train_x, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train_y[i]).collect();
            let y = one_hot(&labels, classes)?;
            let (probs, cache) = model.forward_train(&x, &mut rng)?;
            let loss = cross_entropy(&probs, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    layer: "loss".into(),
                    detail: format!("non-finite training loss at epoch {epoch}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = model.backward(&cache, &y)?;
            model.commit_batch_stats(&cache);
            let grads = grads.tensors();
            adam.step(&mut model.trainable_mut(), &grads)?;
        }

        let eval = evaluate(model, &data.test_x, &data.test_y, run.eval_batch)?;
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: loss_sum / n as f64,
            eval_loss: eval.loss,
            eval_error: eval.error,
        };
        if eval.loss < best_loss {
            best_loss = eval.loss;
            run.best_epoch = Some(epoch);
            if let Some(path) = &run.best_checkpoint_path {
                model.save(path)?;
            }
        }
        on_epoch(&record);
        run.history.push(record);
    }
    Ok(run)
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,eval_loss,eval_error";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.lr, r.train_loss, r.eval_loss, r.eval_error
        )
        .unwrap();
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::model::{ArchConfig, CellKind};
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(99), 0.01);
        assert!((s.lr_at(100) - 0.008).abs() < 1e-15);
        assert!((s.lr_at(2050) - 1.152921504606847e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(2150), 1e-4);
        assert_eq!(s.lr_at(usize::MAX), 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, orig);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::new(&[3], vec![2.0, -0.5, 1e3]).unwrap();
        AdamState::new(0.01).step(&mut [&mut p], &[&g]).unwrap();
        for (w, gi) in p.data().iter().zip(g.data()) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        assert!(matches!(AdamState::new(0.1).step(&mut [&mut p], &[&g]), Err(Error::Dimension(_))));
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p], &[&Tensor::zeros(&[2])]).unwrap();
        let mut q = Tensor::zeros(&[4]);
        assert!(adam.step(&mut [&mut q], &[&Tensor::zeros(&[4])]).is_err());
    }

    #[test]
    fn matches_a_straight_line_recurrence() {
        let mut rng = Rng::new(8);
        let mut p = random_tensor(&mut rng, &[5], 1.0);
        let mut oracle: Vec<f64> = p.data().to_vec();
        let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
        let mut adam = AdamState::new(0.003);
        for t in 1..=50 {
            let g = random_tensor(&mut rng, &[5], 2.0);
            adam.step(&mut [&mut p], &[&g]).unwrap();
            for i in 0..5 {
                m[i] = 0.9 * m[i] + 0.1 * g.data()[i];
                v[i] = 0.999 * v[i] + 0.001 * g.data()[i] * g.data()[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                oracle[i] -= 0.003 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(adam.second_moments()[0].data().iter().all(|&x| x >= 0.0));
    }

    fn separable(l: usize, n: usize) -> UcrDataset {
        let mut x = Vec::with_capacity(n * l);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            x.extend(std::iter::repeat_n(if c == 0 { -1.0 } else { 1.0 }, l));
            y.push(c);
        }
        let x = Tensor::new(&[n, l], x).unwrap();
        UcrDataset {
            name: "separable".into(),
            train_x: x.clone(),
            train_y: y.clone(),
            test_x: x,
            test_y: y,
            label_map: vec![0.0, 1.0],
        }
    }

    fn small_model(l: usize, dropout: f64, seed: u64) -> GruFcnModel {
        let config = ArchConfig {
            conv_filters: vec![8, 16, 8],
            dropout_rate: dropout,
            seed,
            ..ArchConfig::new(l, 2, CellKind::Gru)
        };
        GruFcnModel::from_seed(config).unwrap()
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let data = separable(16, 8);
        let mut model = small_model(16, 0.8, 1);
        let before = model.clone();
        let run = fit(&mut model, &data, TrainRun::new(0, 4, 4, 1)).unwrap();
        assert!(run.history.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn separable_set_is_learned() {
        let data = separable(32, 64);
        let mut model = small_model(32, 0.8, 3);
        let run = fit(&mut model, &data, TrainRun::new(50, 16, 64, 3)).unwrap();
        assert_eq!(run.history.len(), 50);
        let last = run.history.last().unwrap();
        assert!(last.train_loss < 2f64.ln() / 10.0, "{last:?}");
        let eval = evaluate(&model, &data.train_x, &data.train_y, 64).unwrap();
        assert_eq!(eval.error, 0.0);
    }

    #[test]
    fn fixed_seed_reproduces_history_and_checkpoint() {
        let data = separable(12, 10);
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        for k in 0..2 {
            let path = dir.path().join(format!("best{k}.ckpt"));
            let mut model = small_model(12, 0.5, 9);
            let run = fit(&mut model, &data, TrainRun::new(4, 3, 4, 11).with_checkpoint(&path)).unwrap();
            outputs.push((history_csv(&run.history), fs::read(&path).unwrap(), model.to_checkpoint_bytes()));
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn best_checkpoint_follows_eval_loss() {
        let data = separable(12, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let mut model = small_model(12, 0.0, 2);
        let mut seen = 0;
        let run = fit_with(&mut model, &data, TrainRun::new(6, 4, 10, 2).with_checkpoint(&path), |_| seen += 1).unwrap();
        assert_eq!(seen, 6);
        let best = run.best_epoch.unwrap();
        let min = run.history.iter().map(|r| r.eval_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(run.history[best].eval_loss, min);
        let saved = GruFcnModel::load(&path).unwrap();
        let reloaded = evaluate(&saved, &data.test_x, &data.test_y, 10).unwrap();
        assert!((reloaded.loss - min).abs() < 1e-4);
    }

    #[test]
    fn length_mismatch_is_an_argument_error() {
        let data = separable(12, 4);
        let mut model = small_model(13, 0.0, 0);
        assert!(matches!(fit(&mut model, &data, TrainRun::new(1, 2, 2, 0)), Err(Error::Argument(_))));
    }

    #[test]
    fn history_format() {
        let rows = [EpochRecord { epoch: 0, lr: 0.01, train_loss: 0.5, eval_loss: 1.0 / 3.0, eval_error: 0.25 }];
        assert_eq!(
            history_csv(&rows),
            "epoch,lr,train_loss,eval_loss,eval_error\n0,0.010000,0.500000,0.333333,0.250000\n"
        );
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_and_floored(a in 0usize..100_000, b in 0usize..100_000) {
            let s = LrSchedule::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
            prop_assert!(s.lr_at(hi) >= 1e-4);
        }
    }
}
