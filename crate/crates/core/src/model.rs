//! Two-branch classifier: a fully convolutional branch over the series as
//! L positions × 1 channel, and a recurrent branch that sees the whole
//! series as a single time step with L features. Their features are
//! concatenated (FCN first) and fed to a softmax layer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::layers::{
    dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, ConvBlock, ConvBlockCache,
    ConvBlockGrads, DenseCache, DenseGrads, DenseSoftmax, DropoutMask, GruCell, GruStepCache, LstmCell,
    LstmStepCache,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRUFCN1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::arg(format!("unknown cell kind `{s}` (expected gru or lstm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub series_length: usize,
    pub num_classes: usize,
    pub cell_kind: CellKind,
    pub hidden_size: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl ArchConfig {
    /// Defaults: H = 8, filters 128/256/128, kernels 8/5/3, dropout 0.8,
    /// BN momentum 0.99 and epsilon 1e-3.
    pub fn new(series_length: usize, num_classes: usize, cell_kind: CellKind) -> Self {
        Self {
            series_length,
            num_classes,
            cell_kind,
            hidden_size: 8,
            conv_filters: vec![128, 256, 128],
            conv_kernels: vec![8, 5, 3],
            dropout_rate: 0.8,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::arg(format!("invalid architecture: {msg}")));
        if self.series_length < 1 {
            return bad("series length must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.hidden_size < 1 {
            return bad("hidden size must be >= 1".into());
        }
        if self.conv_filters.is_empty() || self.conv_filters.len() != self.conv_kernels.len() {
            return bad(format!(
                "{} filter counts for {} kernel sizes",
                self.conv_filters.len(),
                self.conv_kernels.len()
            ));
        }
        if self.conv_filters.iter().chain(&self.conv_kernels).any(|&v| v == 0) {
            return bad("filter counts and kernel sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("BN momentum {} outside [0, 1]", self.bn_momentum));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return bad(format!("BN epsilon must be positive, got {}", self.bn_epsilon));
        }
        Ok(())
    }

    /// Width of the classifier input: last filter count plus H.
    pub fn head_width(&self) -> usize {
        self.conv_filters.last().copied().unwrap_or(0) + self.hidden_size
    }
}

/// Total parameter count, including the BN moving mean and variance.
pub fn parameter_count(config: &ArchConfig) -> usize {
    let mut cin = 1;
    let mut total = 0;
    for (&cout, &k) in config.conv_filters.iter().zip(&config.conv_kernels) {
        total += k * cin * cout + cout + 4 * cout;
        cin = cout;
    }
    let (l, h) = (config.series_length, config.hidden_size);
    total += match config.cell_kind {
        CellKind::Gru => GruCell::parameter_count(l, h),
        CellKind::Lstm => LstmCell::parameter_count(l, h),
    };
    total + (config.head_width() + 1) * config.num_classes
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recurrent {
    Gru(GruCell),
    Lstm(LstmCell),
}

impl Recurrent {
    fn prefix(&self) -> &'static str {
        match self {
            Recurrent::Gru(_) => "gru",
            Recurrent::Lstm(_) => "lstm",
        }
    }

    fn names(&self) -> &'static [&'static str] {
        match self {
            Recurrent::Gru(_) => &GruCell::NAMES,
            Recurrent::Lstm(_) => &LstmCell::NAMES,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Recurrent::Gru(c) => c.tensors().to_vec(),
            Recurrent::Lstm(c) => c.tensors().to_vec(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Recurrent::Gru(c) => c.tensors_mut().into_iter().collect(),
            Recurrent::Lstm(c) => c.tensors_mut().into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum RecurrentCache {
    Gru(Vec<Vec<GruStepCache>>),
    Lstm(Vec<Vec<LstmStepCache>>),
}

/// State kept by a training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    conv: Vec<ConvBlockCache>,
    recurrent: RecurrentCache,
    dropout: Option<DropoutMask>,
    dense: DenseCache,
}

/// Gradients of the mean cross-entropy, laid out like the model.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub conv: Vec<ConvBlockGrads>,
    pub cell: Recurrent,
    pub head: DenseGrads,
}

impl ModelGrads {
    /// Same order as [`GruFcnModel::trainable_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for g in &self.conv {
            out.extend([&g.kernels, &g.bias, &g.gamma, &g.beta]);
        }
        out.extend(self.cell.tensors());
        out.extend([&self.head.weights, &self.head.bias]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruFcnModel {
    config: ArchConfig,
    pub blocks: Vec<ConvBlock>,
    pub cell: Recurrent,
    pub head: DenseSoftmax,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ArchConfig,
    manifest: Vec<(String, Vec<usize>)>,
}

impl GruFcnModel {
    /// All-zero kernels and weights, identity BN. Used as the skeleton that
    /// checkpoints are loaded into.
    pub fn zeros(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.conv_filters.len());
        let mut cin = 1;
        for (i, (&cout, &k)) in config.conv_filters.iter().zip(&config.conv_kernels).enumerate() {
            let mut block = ConvBlock::new(format!("conv{}", i + 1), k, cin, cout)?;
            block.momentum = config.bn_momentum;
            block.epsilon = config.bn_epsilon;
            blocks.push(block);
            cin = cout;
        }
        let (l, h) = (config.series_length, config.hidden_size);
        let cell = match config.cell_kind {
            CellKind::Gru => Recurrent::Gru(GruCell::zeros(l, h)?),
            CellKind::Lstm => Recurrent::Lstm(LstmCell::zeros(l, h)?),
        };
        let head = DenseSoftmax::zeros(config.head_width(), config.num_classes)?;
        Ok(Self {
            config,
            blocks,
            cell,
            head,
        })
    }

    /// He-uniform conv kernels, Glorot-uniform recurrent and dense weights,
    /// zero biases. Draws happen in network order.
    pub fn build(config: ArchConfig, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        for block in &mut model.blocks {
            block.he_init(rng)?;
        }
        let (l, h) = (model.config.series_length, model.config.hidden_size);
        model.cell = match model.config.cell_kind {
            CellKind::Gru => Recurrent::Gru(GruCell::glorot(rng, l, h)?),
            CellKind::Lstm => Recurrent::Lstm(LstmCell::glorot(rng, l, h)?),
        };
        model.head = DenseSoftmax::glorot(rng, model.config.head_width(), model.config.num_classes)?;
        Ok(model)
    }

    /// [`GruFcnModel::build`] seeded from `config.seed`.
    pub fn from_seed(config: ArchConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        Self::build(config, &mut rng)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    /// Element count of every allocated tensor, moving statistics included.
    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every stored tensor in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for (field, t) in [
                ("kernels", &b.kernels),
                ("bias", &b.bias),
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("moving_mean", &b.moving_mean),
                ("moving_var", &b.moving_var),
            ] {
                out.push((format!("{}.{field}", b.name), t));
            }
        }
        let prefix = self.cell.prefix();
        for (name, t) in self.cell.names().iter().zip(self.cell.tensors()) {
            out.push((format!("{prefix}.{name}"), t));
        }
        out.push(("dense.W".into(), &self.head.weights));
        out.push(("dense.b".into(), &self.head.bias));
        out
    }

    fn stored_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([
                &mut b.kernels,
                &mut b.bias,
                &mut b.gamma,
                &mut b.beta,
                &mut b.moving_mean,
                &mut b.moving_var,
            ]);
        }
        out.extend(self.cell.tensors_mut());
        out.extend([&mut self.head.weights, &mut self.head.bias]);
        out
    }

    /// Parameters updated by the optimizer (no moving statistics), in the
    /// order of [`ModelGrads::tensors`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.kernels, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.extend(self.cell.tensors_mut());
        out.extend([&mut self.head.weights, &mut self.head.bias]);
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let l = self.config.series_length;
        if batch.rank() != 2 || batch.shape()[1] != l {
            return Err(Error::dim(format!(
                "batch {:?} does not match series length {l}",
                batch.shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    fn recurrent_features(&self, batch: &Tensor) -> Result<(Tensor, RecurrentCache)> {
        let (b, h) = (batch.shape()[0], self.config.hidden_size);
        let mut out = Vec::with_capacity(b * h);
        let zeros = vec![0.0; h];
        let cache = match &self.cell {
            Recurrent::Gru(cell) => {
                let mut caches = Vec::with_capacity(b);
                for i in 0..b {
                    let (state, c) = cell.step(batch.row(i), &zeros)?;
                    out.extend(state);
                    caches.push(vec![c]);
                }
                RecurrentCache::Gru(caches)
            }
            Recurrent::Lstm(cell) => {
                let mut caches = Vec::with_capacity(b);
                for i in 0..b {
                    let (state, _, c) = cell.step(batch.row(i), &zeros, &zeros)?;
                    out.extend(state);
                    caches.push(vec![c]);
                }
                RecurrentCache::Lstm(caches)
            }
        };
        Ok((Tensor::new(&[b, h], out)?, cache))
    }

    fn concat(fcn: &Tensor, rnn: &Tensor) -> Result<Tensor> {
        let (f, h) = (fcn.shape()[1], rnn.shape()[1]);
        let mut data = Vec::with_capacity(fcn.len() + rnn.len());
        for (a, b) in fcn.data().chunks_exact(f).zip(rnn.data().chunks_exact(h)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Tensor::new(&[fcn.shape()[0], f + h], data)
    }

    /// Training-mode forward: BN uses batch statistics, dropout draws from
    /// `rng`. Moving statistics are left alone until
    /// [`GruFcnModel::commit_batch_stats`].
    pub fn forward_train(&self, batch: &Tensor, rng: &mut Rng) -> Result<(Tensor, ForwardCache)> {
        let b = self.check_batch(batch)?;
        let l = self.config.series_length;
        let mut x = batch.clone().reshape(&[b, l, 1])?;
        let mut conv = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_batch(&x)?;
            conv.push(cache);
            x = y;
        }
        let fcn = global_avg_pool(&x)?;
        let (mut rnn, recurrent) = self.recurrent_features(batch)?;
        let mut mask = None;
        if self.config.dropout_rate > 0.0 {
            let (dropped, m) = dropout(&rnn, self.config.dropout_rate, rng)?;
            rnn = dropped;
            mask = Some(m);
        }
        let (probs, dense) = self.head.forward(&Self::concat(&fcn, &rnn)?)?;
        Ok((
            probs,
            ForwardCache {
                conv,
                recurrent,
                dropout: mask,
                dense,
            },
        ))
    }

    /// Folds the batch statistics of a training forward into each block's
    /// moving mean and variance.
    pub fn commit_batch_stats(&mut self, cache: &ForwardCache) {
        for (block, c) in self.blocks.iter_mut().zip(&cache.conv) {
            block.update_moving_stats(c);
        }
    }

    /// Inference-mode forward: moving statistics, no dropout.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let mut x = batch.clone().reshape(&[b, self.config.series_length, 1])?;
        for block in &self.blocks {
            x = block.infer(&x)?;
        }
        let fcn = global_avg_pool(&x)?;
        let (rnn, _) = self.recurrent_features(batch)?;
        Ok(self.head.forward(&Self::concat(&fcn, &rnn)?)?.0)
    }

    /// Gradients of the batch-mean cross-entropy against one-hot `targets`.
    pub fn backward(&self, cache: &ForwardCache, targets: &Tensor) -> Result<ModelGrads> {
        let (dfeat, head) = self.head.backward(&cache.dense, targets)?;
        let b = dfeat.shape()[0];
        let f = self.config.conv_filters.last().copied().unwrap_or(0);
        let h = self.config.hidden_size;
        let mut dfcn = Vec::with_capacity(b * f);
        let mut drnn = Vec::with_capacity(b * h);
        for row in dfeat.data().chunks_exact(f + h) {
            dfcn.extend_from_slice(&row[..f]);
            drnn.extend_from_slice(&row[f..]);
        }

        let mut g = global_avg_pool_backward(&Tensor::new(&[b, f], dfcn)?, self.config.series_length)?;
        let mut conv = Vec::with_capacity(self.blocks.len());
        for (block, c) in self.blocks.iter().zip(&cache.conv).rev() {
            let (dx, grads) = block.backward(c, &g)?;
            conv.push(grads);
            g = dx;
        }
        conv.reverse();

        let mut drnn = Tensor::new(&[b, h], drnn)?;
        if let Some(mask) = &cache.dropout {
            drnn = dropout_backward(&drnn, mask)?;
        }
        let cell = match (&self.cell, &cache.recurrent) {
            (Recurrent::Gru(cell), RecurrentCache::Gru(caches)) => {
                let (l, hs) = (cell.input_size(), cell.hidden_size());
                let mut acc = GruCell::zeros(l, hs)?;
                for (i, c) in caches.iter().enumerate() {
                    let (_, part) = cell.backward(c, drnn.row(i))?;
                    for (a, p) in acc.tensors_mut().into_iter().zip(part.tensors()) {
                        crate::layers::add_assign(a.data_mut(), p.data());
                    }
                }
                Recurrent::Gru(acc)
            }
            (Recurrent::Lstm(cell), RecurrentCache::Lstm(caches)) => {
                let (l, hs) = (cell.input_size(), cell.hidden_size());
                let mut acc = LstmCell::zeros(l, hs)?;
                for (i, c) in caches.iter().enumerate() {
                    let (_, part) = cell.backward(c, drnn.row(i))?;
                    for (a, p) in acc.tensors_mut().into_iter().zip(part.tensors()) {
                        crate::layers::add_assign(a.data_mut(), p.data());
                    }
                }
                Recurrent::Lstm(acc)
            }
            _ => return Err(Error::dim("forward cache was produced by a different cell kind")),
        };
        Ok(ModelGrads { conv, cell, head })
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.config.clone(),
            manifest: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for (_, t) in self.named_tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or(CheckpointError::BadMagic)?;
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Header("no newline after header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&rest[..newline])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut model =
            Self::zeros(header.config).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let expected = model.header().manifest;
        if expected != header.manifest {
            let first = expected
                .iter()
                .zip(&header.manifest)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", expected.len(), header.manifest.len())
                });
            return Err(CheckpointError::ManifestMismatch(first).into());
        }

        let payload = &rest[newline + 1..];
        let want = 4 * model.parameter_count();
        if payload.len() < want {
            return Err(CheckpointError::Truncated {
                expected: want,
                found: payload.len(),
            }
            .into());
        }
        if payload.len() > want {
            return Err(CheckpointError::ManifestMismatch(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - want
            ))
            .into());
        }
        let mut words = payload
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64);
        for t in model.stored_tensors_mut() {
            for v in t.data_mut() {
                *v = words.next().expect("payload length checked");
            }
        }
        Ok(model)
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_checkpoint_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient_with, random_tensor, MODEL_TOLERANCE};
    use crate::layers::cross_entropy;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn one_hot(labels: &[usize], classes: usize) -> Tensor {
        let mut t = Tensor::zeros(&[labels.len(), classes]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[i * classes + l] = 1.0;
        }
        t
    }

    #[test]
    fn closed_form_counts_from_the_reference_table() {
        let gru = |l, c| parameter_count(&ArchConfig::new(l, c, CellKind::Gru));
        let lstm = |l, c| parameter_count(&ArchConfig::new(l, c, CellKind::Lstm));
        assert_eq!(gru(176, 37), 275_237);
        assert_eq!(lstm(176, 37), 276_717);
        assert_eq!(gru(286, 2), 273_082);
        assert_eq!(gru(234, 2), 271_834);
        // FCN core alone.
        let core: usize = [(8, 1, 128), (5, 128, 256), (3, 256, 128)]
            .iter()
            .map(|&(k, cin, cout)| k * cin * cout + 5 * cout)
            .sum();
        assert_eq!(core, 265_728);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ArchConfig::new(10, 1, CellKind::Gru);
        assert!(matches!(GruFcnModel::zeros(c.clone()), Err(Error::Argument(_))));
        c.num_classes = 2;
        c.conv_kernels.pop();
        assert!(GruFcnModel::zeros(c.clone()).is_err());
        let mut c = ArchConfig::new(0, 2, CellKind::Gru);
        assert!(GruFcnModel::zeros(c.clone()).is_err());
        c.series_length = 3;
        c.dropout_rate = 1.0;
        assert!(GruFcnModel::zeros(c).is_err());
    }

    #[test]
    fn build_initialization() {
        let config = ArchConfig::new(50, 3, CellKind::Gru);
        let model = GruFcnModel::from_seed(config.clone()).unwrap();
        for (name, t) in model.named_tensors() {
            let d = t.data();
            if name.ends_with(".bias") || name.ends_with(".b") || name.ends_with("b_z")
                || name.ends_with("b_r") || name.ends_with(".beta") || name.ends_with("moving_mean")
            {
                assert!(d.iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with(".gamma") || name.ends_with("moving_var") {
                assert!(d.iter().all(|&v| v == 1.0), "{name}");
            } else {
                assert!(d.iter().any(|&v| v != 0.0), "{name}");
            }
        }
        let limit = (6.0f64 / 8.0).sqrt();
        assert!(model.blocks[0].kernels.data().iter().all(|v| v.abs() <= limit));
        let again = GruFcnModel::from_seed(config).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn structural_count_matches_closed_form_for_defaults() {
        for (l, c, kind) in [(176, 37, CellKind::Gru), (24, 2, CellKind::Lstm)] {
            let config = ArchConfig::new(l, c, kind);
            let model = GruFcnModel::zeros(config.clone()).unwrap();
            assert_eq!(model.parameter_count(), parameter_count(&config));
        }
    }

    fn small_config(l: usize, c: usize, kind: CellKind) -> ArchConfig {
        ArchConfig {
            conv_filters: vec![4, 6, 4],
            dropout_rate: 0.0,
            ..ArchConfig::new(l, c, kind)
        }
    }

    #[test]
    fn forward_contracts() {
        let model = GruFcnModel::from_seed(small_config(12, 4, CellKind::Gru)).unwrap();
        let x = random_tensor(&mut Rng::new(1), &[5, 12], 2.0);
        let p = model.predict(&x).unwrap();
        assert_eq!(p.shape(), &[5, 4]);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, model.predict(&x).unwrap());
        assert!(matches!(model.predict(&Tensor::zeros(&[2, 11])), Err(Error::Dimension(_))));

        let (rnn, _) = model.recurrent_features(&Tensor::zeros(&[3, 12])).unwrap();
        assert!(rnn.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_forward_is_deterministic() {
        let mut config = small_config(10, 3, CellKind::Gru);
        config.dropout_rate = 0.5;
        let model = GruFcnModel::from_seed(config).unwrap();
        let x = random_tensor(&mut Rng::new(2), &[4, 10], 1.0);
        let (a, _) = model.forward_train(&x, &mut Rng::new(3)).unwrap();
        let (b, _) = model.forward_train(&x, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    fn loss_of(model: &GruFcnModel, x: &Tensor, y: &Tensor) -> f64 {
        let (p, _) = model.forward_train(x, &mut Rng::new(0)).unwrap();
        cross_entropy(&p, y).unwrap()
    }

    /// End-to-end finite-difference check of every trainable tensor.
    pub(crate) fn check_model_gradients(seed: u64, kind: CellKind) -> f64 {
        let mut rng = Rng::new(seed);
        let mut config = small_config(16, 3, kind);
        config.seed = seed;
        let mut model = GruFcnModel::from_seed(config).unwrap();
        for t in model.trainable_mut() {
            if t.rank() == 1 {
                let shift = random_tensor(&mut rng, t.shape(), 0.3);
                for (v, s) in t.data_mut().iter_mut().zip(shift.data()) {
                    *v += s;
                }
            }
        }
        let x = random_tensor(&mut rng, &[2, 16], 1.5);
        let y = one_hot(&[rng.below(3), rng.below(3)], 3);
        let (_, cache) = model.forward_train(&x, &mut Rng::new(0)).unwrap();
        let grads = model.backward(&cache, &y).unwrap();
        let analytic: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
        let bases: Vec<Tensor> = model.trainable_mut().into_iter().map(|t| t.clone()).collect();

        let mut worst = 0.0f64;
        for (k, (base, g)) in bases.iter().zip(&analytic).enumerate() {
            let mut probe = model.clone();
            let rel = check_gradient_with(&format!("tensor {k}"), MODEL_TOLERANCE, base, g, |p| {
                *probe.trainable_mut()[k] = p.clone();
                loss_of(&probe, &x, &y)
            })
            .unwrap_or_else(|e| panic!("seed {seed} {kind}: {e}"));
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn end_to_end_gradients_gru() {
        for seed in 0..3 {
            check_model_gradients(seed, CellKind::Gru);
        }
    }

    #[test]
    fn end_to_end_gradients_lstm() {
        check_model_gradients(40, CellKind::Lstm);
    }

    #[test]
    fn grads_and_trainables_align() {
        let mut model = GruFcnModel::from_seed(small_config(8, 2, CellKind::Lstm)).unwrap();
        let x = random_tensor(&mut Rng::new(5), &[3, 8], 1.0);
        let (_, cache) = model.forward_train(&x, &mut Rng::new(0)).unwrap();
        let grads = model.backward(&cache, &one_hot(&[0, 1, 1], 2)).unwrap();
        let shapes: Vec<Vec<usize>> = grads.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let want: Vec<Vec<usize>> = model.trainable_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, want);
    }

    #[test]
    fn commit_moves_the_moving_statistics() {
        let mut model = GruFcnModel::from_seed(small_config(8, 2, CellKind::Gru)).unwrap();
        let x = random_tensor(&mut Rng::new(5), &[3, 8], 1.0);
        let (_, cache) = model.forward_train(&x, &mut Rng::new(0)).unwrap();
        let before = model.blocks[0].moving_mean.clone();
        model.commit_batch_stats(&cache);
        assert_ne!(before, model.blocks[0].moving_mean);
    }

    #[test]
    fn checkpoint_round_trip_is_the_f32_image() {
        let mut config = small_config(20, 3, CellKind::Gru);
        config.bn_epsilon = 1e-3 + 1e-17;
        config.seed = 77;
        let model = GruFcnModel::from_seed(config).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let loaded = GruFcnModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(loaded.config(), model.config());
        for ((na, a), (nb, b)) in model.named_tensors().into_iter().zip(loaded.named_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(a.map(|v| v as f32 as f64), *b);
        }
        assert_eq!(loaded.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let model = GruFcnModel::from_seed(small_config(6, 2, CellKind::Gru)).unwrap();
        let bytes = model.to_checkpoint_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            GruFcnModel::from_checkpoint_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
        assert!(matches!(
            GruFcnModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            GruFcnModel::from_checkpoint_bytes(&long),
            Err(Error::Checkpoint(CheckpointError::ManifestMismatch(_)))
        ));
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().skip(8).position(|&b| b == b'\n').unwrap() + 8]).to_string();
        let tampered = text.replace("\"conv1.kernels\"", "\"conv1.weights\"");
        let mut t = tampered.into_bytes();
        t.extend_from_slice(&bytes[t.len()..]);
        assert!(matches!(
            GruFcnModel::from_checkpoint_bytes(&t),
            Err(Error::Checkpoint(CheckpointError::ManifestMismatch(_)))
        ));
        let mut junk = CHECKPOINT_MAGIC.to_vec();
        junk.extend_from_slice(b"{not json\n");
        assert!(matches!(
            GruFcnModel::from_checkpoint_bytes(&junk),
            Err(Error::Checkpoint(CheckpointError::Header(_)))
        ));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = GruFcnModel::from_seed(small_config(9, 2, CellKind::Lstm)).unwrap();
        model.save(&path).unwrap();
        let loaded = GruFcnModel::load(&path).unwrap();
        assert_eq!(loaded.parameter_count(), model.parameter_count());
        assert!(matches!(GruFcnModel::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn structural_count_matches_closed_form(l in 1usize..400, c in 2usize..60, lstm in any::<bool>(), h in 1usize..12) {
            let kind = if lstm { CellKind::Lstm } else { CellKind::Gru };
            let config = ArchConfig { hidden_size: h, conv_filters: vec![3, 5, 2], ..ArchConfig::new(l, c, kind) };
            let model = GruFcnModel::zeros(config.clone()).unwrap();
            prop_assert_eq!(model.parameter_count(), parameter_count(&config));
        }
    }
}
