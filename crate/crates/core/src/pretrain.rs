//! Unsupervised layer-wise pre-training.
//!
//! Two flavors: restricted Boltzmann machines trained with one-step
//! contrastive divergence (Gaussian-Bernoulli for the real-valued first
//! layer, Bernoulli-Bernoulli above), and denoising autoencoders with tied
//! weights trained to reconstruct clean inputs from masked ones. Either
//! produces a stack of (weights, hidden bias) pairs that the fine-tuning
//! stage uses as initialization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::{apply_activation, ActivationKind};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::matrix::{sample_bernoulli, Matrix};
use crate::network::NetSpec;
use crate::rng::SeededRng;

/// Visible-unit model of an RBM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RbmKind {
    /// Real-valued visibles with unit variance; reconstructions use the
    /// Gaussian mean. First layer of a stack.
    GaussianBernoulli,
    /// Binary visibles; reconstructions are Bernoulli samples. All upper
    /// layers of a stack.
    BernoulliBernoulli,
}

/// Restricted Boltzmann machine: `weights` is visible x hidden.
#[derive(Clone, Debug)]
pub struct Rbm {
    pub kind: RbmKind,
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl Rbm {
    /// Small Gaussian (sigma = 0.01) weights, zero biases.
    pub fn init(kind: RbmKind, visible: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let data = (0..visible * hidden).map(|_| 0.01 * rng.next_normal()).collect();
        Rbm {
            kind,
            weights: Matrix::from_vec(visible, hidden, data).expect("shape matches"),
            visible_bias: vec![0.0; visible],
            hidden_bias: vec![0.0; hidden],
        }
    }

    pub fn visible_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.cols()
    }

    /// p(h = 1 | v), one row per example.
    pub fn hidden_probs(&self, visible: &Matrix) -> Result<Matrix> {
        let pre = visible.affine(&self.weights, &self.hidden_bias)?;
        Ok(apply_activation(ActivationKind::Sigmoid, &pre))
    }

    /// Visible pre-activation from a hidden configuration: Gaussian mean or
    /// Bernoulli probabilities depending on the kind.
    fn visible_from_hidden(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut mean = hidden.matmul_transpose_other(&self.weights)?;
        for i in 0..mean.rows() {
            for (j, &b) in self.visible_bias.iter().enumerate() {
                mean.set(i, j, mean.get(i, j) + b);
            }
        }
        match self.kind {
            RbmKind::GaussianBernoulli => Ok(mean),
            RbmKind::BernoulliBernoulli => Ok(apply_activation(ActivationKind::Sigmoid, &mean)),
        }
    }

    /// One reconstruction: the Gaussian mean for real-valued visibles, a
    /// Bernoulli sample for binary visibles.
    fn reconstruct(&self, hidden_sample: &Matrix, rng: &mut SeededRng) -> Result<Matrix> {
        let v = self.visible_from_hidden(hidden_sample)?;
        match self.kind {
            RbmKind::GaussianBernoulli => Ok(v),
            RbmKind::BernoulliBernoulli => sample_bernoulli(rng, &v),
        }
    }

    /// One CD-1 step on a minibatch; returns the mean squared
    /// reconstruction error between the batch and its reconstruction.
    ///
    /// Positive statistics use hidden probabilities; the reconstruction is
    /// driven by a sampled hidden state. Gaussian-Bernoulli machines assume
    /// standardized inputs (mean 0, variance 1 per dimension).
    pub fn cd1_update(&mut self, batch: &Matrix, lr: f64, rng: &mut SeededRng) -> Result<f64> {
        self.cd_update(batch, lr, 1, rng)
    }

    /// Contrastive divergence with `steps` Gibbs sweeps (CD-k).
    pub fn cd_update(
        &mut self,
        batch: &Matrix,
        lr: f64,
        steps: usize,
        rng: &mut SeededRng,
    ) -> Result<f64> {
        if batch.cols() != self.visible_dim() {
            return Err(Error::ShapeMismatch {
                op: "cd_update",
                left: batch.shape(),
                right: self.weights.shape(),
            });
        }
        if steps == 0 {
            return Err(Error::Domain(String::from("cd steps must be >= 1")));
        }
        let n = batch.rows() as f64;
        let h0_probs = self.hidden_probs(batch)?;
        let mut h_sample = sample_bernoulli(rng, &h0_probs)?;
        let mut v1 = self.reconstruct(&h_sample, rng)?;
        let mut h1_probs = self.hidden_probs(&v1)?;
        for _ in 1..steps {
            h_sample = sample_bernoulli(rng, &h1_probs)?;
            v1 = self.reconstruct(&h_sample, rng)?;
            h1_probs = self.hidden_probs(&v1)?;
        }

        // W += lr * (v0' h0_probs - v1' h1_probs) / n
        let positive = batch.matmul_transpose_self(&h0_probs)?;
        let negative = v1.matmul_transpose_self(&h1_probs)?;
        let mut delta = positive.sub(&negative)?;
        delta = delta.scale(lr / n);
        self.weights.add_scaled(&delta, 1.0)?;

        let v_diff = batch.sub(&v1)?;
        for (b, d) in self.visible_bias.iter_mut().zip(v_diff.col_sums()) {
            *b += lr * d / n;
        }
        let h_diff = h0_probs.sub(&h1_probs)?;
        for (b, d) in self.hidden_bias.iter_mut().zip(h_diff.col_sums()) {
            *b += lr * d / n;
        }

        let err: f64 = v_diff.as_slice().iter().map(|&d| d * d).sum::<f64>()
            / (v_diff.rows() * v_diff.cols()) as f64;
        Ok(err)
    }
}

/// Form of a denoising autoencoder's reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaKind {
    /// Linear decode, squared-error loss. First layer of a stack.
    RealInput,
    /// Sigmoid decode, cross-entropy loss. Upper layers, whose inputs are
    /// sigmoid codes in (0, 1).
    BinaryInput,
}

/// Denoising autoencoder with tied weights: decode weights are exactly the
/// transpose of `weights`, by representation.
#[derive(Clone, Debug)]
pub struct DaLayer {
    pub kind: DaKind,
    pub weights: Matrix,
    pub encode_bias: Vec<f64>,
    pub decode_bias: Vec<f64>,
    pub corruption_level: f64,
}

impl DaLayer {
    pub fn init(
        kind: DaKind,
        visible: usize,
        hidden: usize,
        corruption_level: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&corruption_level) {
            return Err(Error::Domain(format!(
                "corruption level {corruption_level} outside [0, 1]"
            )));
        }
        let bound = libm::sqrt(6.0 / (visible + hidden) as f64);
        let data = (0..visible * hidden)
            .map(|_| (rng.next_f64() * 2.0 - 1.0) * bound)
            .collect();
        Ok(DaLayer {
            kind,
            weights: Matrix::from_vec(visible, hidden, data).expect("shape matches"),
            encode_bias: vec![0.0; hidden],
            decode_bias: vec![0.0; visible],
            corruption_level,
        })
    }

    pub fn visible_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Clean encoding h = sigmoid(x W + b).
    pub fn encode(&self, input: &Matrix) -> Result<Matrix> {
        let pre = input.affine(&self.weights, &self.encode_bias)?;
        Ok(apply_activation(ActivationKind::Sigmoid, &pre))
    }

    fn decode(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut pre = hidden.matmul_transpose_other(&self.weights)?;
        for i in 0..pre.rows() {
            for (j, &b) in self.decode_bias.iter().enumerate() {
                pre.set(i, j, pre.get(i, j) + b);
            }
        }
        match self.kind {
            DaKind::RealInput => Ok(pre),
            DaKind::BinaryInput => Ok(apply_activation(ActivationKind::Sigmoid, &pre)),
        }
    }

    /// One SGD step reconstructing the clean `batch` from its corrupted
    /// version. Returns the reconstruction loss (mean squared error for
    /// real-input layers, mean cross-entropy for binary-input layers).
    pub fn sgd_step(&mut self, batch: &Matrix, lr: f64, rng: &mut SeededRng) -> Result<f64> {
        if batch.cols() != self.visible_dim() {
            return Err(Error::ShapeMismatch {
                op: "da sgd_step",
                left: batch.shape(),
                right: self.weights.shape(),
            });
        }
        let n = batch.rows() as f64;
        let corrupted = corrupt_masking(batch, self.corruption_level, rng)?;
        let hidden = self.encode(&corrupted)?;
        let reconstruction = self.decode(&hidden)?;

        // For both losses the gradient at the decode pre-activation is
        // (reconstruction - batch) / n.
        let d_pre_decode = reconstruction.sub(batch)?.scale(1.0 / n);

        // Decode path: x_hat = h W^T + b_v, so dW gets d' h and db_v sums.
        let d_w_decode = d_pre_decode.matmul_transpose_self(&hidden)?;
        // Encode path.
        let d_hidden = d_pre_decode.matmul(&self.weights)?;
        let mut d_pre_encode = d_hidden;
        for i in 0..d_pre_encode.rows() {
            for j in 0..d_pre_encode.cols() {
                let y = hidden.get(i, j);
                d_pre_encode.set(i, j, d_pre_encode.get(i, j) * y * (1.0 - y));
            }
        }
        let d_w_encode = corrupted.matmul_transpose_self(&d_pre_encode)?;

        self.weights.add_scaled(&d_w_encode, -lr)?;
        self.weights.add_scaled(&d_w_decode, -lr)?;
        for (b, d) in self.decode_bias.iter_mut().zip(d_pre_decode.col_sums()) {
            *b -= lr * d;
        }
        for (b, d) in self.encode_bias.iter_mut().zip(d_pre_encode.col_sums()) {
            *b -= lr * d;
        }

        let loss = match self.kind {
            DaKind::RealInput => {
                reconstruction
                    .sub(batch)?
                    .as_slice()
                    .iter()
                    .map(|&d| d * d)
                    .sum::<f64>()
                    / (batch.rows() * batch.cols()) as f64
            }
            DaKind::BinaryInput => {
                let mut ce = 0.0;
                for (&x, &xh) in batch.as_slice().iter().zip(reconstruction.as_slice()) {
                    let xh = xh.clamp(1e-12, 1.0 - 1e-12);
                    ce -= x * libm::log(xh) + (1.0 - x) * libm::log(1.0 - xh);
                }
                ce / n
            }
        };
        Ok(loss)
    }
}

/// Masking noise: each entry is independently zeroed with probability
/// `level`, otherwise left untouched.
pub fn corrupt_masking(input: &Matrix, level: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Domain(format!(
            "corruption level {level} outside [0, 1]"
        )));
    }
    if level == 0.0 {
        return Ok(input.clone());
    }
    let data = input
        .as_slice()
        .iter()
        .map(|&x| if rng.next_f64() < level { 0.0 } else { x })
        .collect();
    Matrix::from_vec(input.rows(), input.cols(), data)
}

/// Hyperparameters shared by both pre-training flavors.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs_per_layer: usize,
    pub learning_rate: f64,
    /// Learning rate for the first (Gaussian-visible / real-input) layer,
    /// which tolerates much less than the binary upper layers.
    pub first_layer_lr: f64,
    pub batch_size: usize,
    /// Masking-noise probability for denoising autoencoders.
    pub corruption_level: f64,
    /// Gibbs steps per contrastive-divergence update.
    pub cd_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs_per_layer: 10,
            learning_rate: 0.08,
            first_layer_lr: 0.005,
            batch_size: 128,
            corruption_level: 0.2,
            cd_steps: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.first_layer_lr <= 0.0 {
            return Err(Error::Domain(String::from(
                "pre-training learning rates must be positive",
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain(String::from("batch size must be positive")));
        }
        if !(0.0..=1.0).contains(&self.corruption_level) {
            return Err(Error::Domain(format!(
                "corruption level {} outside [0, 1]",
                self.corruption_level
            )));
        }
        if self.cd_steps == 0 {
            return Err(Error::Domain(String::from("cd steps must be >= 1")));
        }
        Ok(())
    }
}

/// One pre-trained layer: the parameters the fine-tuning stage consumes
/// plus the per-epoch reconstruction-error trace.
#[derive(Clone, Debug)]
pub struct PretrainedLayer {
    pub weights: Matrix,
    pub hidden_bias: Vec<f64>,
    pub epoch_errors: Vec<f64>,
}

/// Full state of a pre-trained RBM stack layer.
#[derive(Clone, Debug)]
pub struct PretrainedRbm {
    pub rbm: Rbm,
    pub epoch_errors: Vec<f64>,
}

/// Full state of a pre-trained denoising-autoencoder stack layer.
#[derive(Clone, Debug)]
pub struct PretrainedDa {
    pub da: DaLayer,
    pub epoch_errors: Vec<f64>,
}

impl PretrainedRbm {
    pub fn to_init_layer(&self) -> PretrainedLayer {
        PretrainedLayer {
            weights: self.rbm.weights.clone(),
            hidden_bias: self.rbm.hidden_bias.clone(),
            epoch_errors: self.epoch_errors.clone(),
        }
    }
}

impl PretrainedDa {
    pub fn to_init_layer(&self) -> PretrainedLayer {
        PretrainedLayer {
            weights: self.da.weights.clone(),
            hidden_bias: self.da.encode_bias.clone(),
            epoch_errors: self.epoch_errors.clone(),
        }
    }
}

// Deterministic projection of a partition through already-trained RBM
// layers (hidden probabilities, no sampling).
fn project_through_rbms(stack: &[PretrainedRbm], features: Matrix) -> Result<Matrix> {
    let mut current = features;
    for layer in stack {
        current = layer.rbm.hidden_probs(&current)?;
    }
    Ok(current)
}

fn project_through_das(stack: &[PretrainedDa], features: Matrix) -> Result<Matrix> {
    let mut current = features;
    for layer in stack {
        current = layer.da.encode(&current)?;
    }
    Ok(current)
}

fn for_each_batch<E>(
    source: &mut dyn DataSource,
    batch_size: usize,
    mut f: impl FnMut(Matrix) -> Result<E>,
) -> Result<Vec<E>> {
    source.start_pass()?;
    let mut out = Vec::new();
    while let Some(chunk) = source.next_partition()? {
        let rows = chunk.features.rows();
        let mut start = 0;
        while start < rows {
            let end = (start + batch_size).min(rows);
            out.push(f(chunk.features.slice_rows(start, end))?);
            start = end;
        }
    }
    Ok(out)
}

/// Greedy layer-wise RBM pre-training over the hidden layers of `spec`.
///
/// Layer k is trained on the deterministic hidden probabilities of the
/// already-trained layers below it; the softmax output layer is untouched.
/// The first machine is Gaussian-Bernoulli, all others Bernoulli-Bernoulli.
pub fn pretrain_rbm_stack(
    spec: &NetSpec,
    source: &mut dyn DataSource,
    config: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<PretrainedRbm>> {
    config.validate()?;
    if spec.maxout_group != 1 {
        return Err(Error::Unsupported(String::from(
            "pre-training is defined for plain dense layers, not maxout groups",
        )));
    }
    let mut stack: Vec<PretrainedRbm> = Vec::new();
    let mut visible_dim = spec.input_dim();
    for (k, &hidden_dim) in spec.hidden_sizes().iter().enumerate() {
        let kind = if k == 0 {
            RbmKind::GaussianBernoulli
        } else {
            RbmKind::BernoulliBernoulli
        };
        let lr = if k == 0 {
            config.first_layer_lr
        } else {
            config.learning_rate
        };
        let mut rbm = Rbm::init(kind, visible_dim, hidden_dim, rng);
        let mut epoch_errors = Vec::with_capacity(config.epochs_per_layer);
        for _ in 0..config.epochs_per_layer {
            let mut total = 0.0;
            let mut batches = 0usize;
            let errs = for_each_batch(source, config.batch_size, |batch| {
                let projected = project_through_rbms(&stack, batch)?;
                rbm.cd_update(&projected, lr, config.cd_steps, rng)
            })?;
            for e in errs {
                total += e;
                batches += 1;
            }
            if batches == 0 {
                return Err(Error::Data(String::from("pre-training data is empty")));
            }
            epoch_errors.push(total / batches as f64);
        }
        visible_dim = hidden_dim;
        stack.push(PretrainedRbm { rbm, epoch_errors });
    }
    Ok(stack)
}

/// Greedy layer-wise denoising-autoencoder pre-training.
///
/// Each layer reconstructs its clean input from a masked version; deeper
/// layers consume the clean encodings of the layers below. The first layer
/// uses linear decoding with squared error, upper layers sigmoid decoding
/// with cross-entropy.
pub fn pretrain_sda_stack(
    spec: &NetSpec,
    source: &mut dyn DataSource,
    config: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<PretrainedDa>> {
    config.validate()?;
    if spec.maxout_group != 1 {
        return Err(Error::Unsupported(String::from(
            "pre-training is defined for plain dense layers, not maxout groups",
        )));
    }
    let mut stack: Vec<PretrainedDa> = Vec::new();
    let mut visible_dim = spec.input_dim();
    for (k, &hidden_dim) in spec.hidden_sizes().iter().enumerate() {
        let kind = if k == 0 { DaKind::RealInput } else { DaKind::BinaryInput };
        let lr = if k == 0 {
            config.first_layer_lr
        } else {
            config.learning_rate
        };
        let mut da = DaLayer::init(kind, visible_dim, hidden_dim, config.corruption_level, rng)?;
        let mut epoch_errors = Vec::with_capacity(config.epochs_per_layer);
        for _ in 0..config.epochs_per_layer {
            let mut total = 0.0;
            let mut batches = 0usize;
            let errs = for_each_batch(source, config.batch_size, |batch| {
                let projected = project_through_das(&stack, batch)?;
                da.sgd_step(&projected, lr, rng)
            })?;
            for e in errs {
                total += e;
                batches += 1;
            }
            if batches == 0 {
                return Err(Error::Data(String::from("pre-training data is empty")));
            }
            epoch_errors.push(total / batches as f64);
        }
        visible_dim = hidden_dim;
        stack.push(PretrainedDa { da, epoch_errors });
    }
    Ok(stack)
}
