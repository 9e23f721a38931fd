//! Layer stacks: dense layers with optional maxout grouping and dropout,
//! frequency-axis 1-D convolution with max-pooling, and a terminal softmax
//! classifier. Forward passes record everything backward needs; backward
//! produces exact gradients of the mean cross-entropy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::{apply_activation, ActivationKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

/// Options that accompany a parsed layer-size string.
#[derive(Clone, Debug)]
pub struct NetOptions {
    pub hidden_activation: ActivationKind,
    /// Maxout group size g; 1 disables maxout. Hidden sizes always denote
    /// post-pooling units, so the underlying linear width is g * size.
    pub maxout_group: usize,
    /// Probability of zeroing a hidden output during training; in [0, 1).
    pub dropout_factor: f64,
    /// Position of the bottleneck layer in the size list (1 = first hidden).
    pub bottleneck_index: Option<usize>,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            hidden_activation: ActivationKind::Sigmoid,
            maxout_group: 1,
            dropout_factor: 0.0,
            bottleneck_index: None,
        }
    }
}

/// A fully validated network description: sizes from input to output plus
/// the knobs from [`NetOptions`].
#[derive(Clone, Debug)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: ActivationKind,
    pub maxout_group: usize,
    pub dropout_factor: f64,
    pub bottleneck_index: Option<usize>,
}

impl NetSpec {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn target_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }
}

/// Parses a colon-separated size string such as "250:1024:1024:1901".
///
/// At least two positive integers are required; parse errors carry the
/// zero-based position of the offending token.
pub fn parse_nnet_spec(text: &str, options: &NetOptions) -> Result<NetSpec> {
    let mut layer_sizes = Vec::new();
    for (position, token) in text.split(':').enumerate() {
        let size: usize = token.trim().parse().map_err(|_| Error::Parse {
            what: "nnet spec",
            position,
            message: format!("'{token}' is not a positive integer"),
        })?;
        if size == 0 {
            return Err(Error::Parse {
                what: "nnet spec",
                position,
                message: String::from("layer size must be nonzero"),
            });
        }
        layer_sizes.push(size);
    }
    if layer_sizes.len() < 2 {
        return Err(Error::Parse {
            what: "nnet spec",
            position: layer_sizes.len(),
            message: String::from("need at least input and output sizes"),
        });
    }
    if options.maxout_group == 0 {
        return Err(Error::Domain(String::from("maxout group must be >= 1")));
    }
    if !(0.0..1.0).contains(&options.dropout_factor) {
        return Err(Error::Domain(format!(
            "dropout factor {} outside [0, 1)",
            options.dropout_factor
        )));
    }
    if let Some(b) = options.bottleneck_index {
        if b == 0 || b + 1 >= layer_sizes.len() {
            return Err(Error::Domain(format!(
                "bottleneck index {b} does not point at a hidden layer (1..={})",
                layer_sizes.len().saturating_sub(2)
            )));
        }
    }
    Ok(NetSpec {
        layer_sizes,
        hidden_activation: options.hidden_activation,
        maxout_group: options.maxout_group,
        dropout_factor: options.dropout_factor,
        bottleneck_index: options.bottleneck_index,
    })
}

/// Fully connected hidden layer. `weights` is in_dim x out_linear where
/// out_linear = maxout_group * out_dim.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: ActivationKind,
    pub maxout_group: usize,
    pub dropout_factor: f64,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_linear(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols() / self.maxout_group
    }

    fn validate(&self) -> Result<()> {
        if self.maxout_group == 0 || self.weights.cols() % self.maxout_group != 0 {
            return Err(Error::Domain(format!(
                "linear width {} not divisible by maxout group {}",
                self.weights.cols(),
                self.maxout_group
            )));
        }
        if self.bias.len() != self.weights.cols() {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: (1, self.bias.len()),
                right: self.weights.shape(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_factor) {
            return Err(Error::Domain(format!(
                "dropout factor {} outside [0, 1)",
                self.dropout_factor
            )));
        }
        Ok(())
    }
}

/// Shape of one frequency-axis convolution + max-pooling block.
///
/// The input is `input_maps` maps of `input_band_len` frequency bins each,
/// laid out map-major in the feature vector. Filters slide along the
/// frequency axis only; pooling is non-overlapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub input_maps: usize,
    pub input_band_len: usize,
    pub num_filters: usize,
    pub filter_width: usize,
    pub pool_size: usize,
    pub activation: ActivationKind,
}

impl ConvLayerSpec {
    pub fn conv_len(&self) -> usize {
        self.input_band_len + 1 - self.filter_width
    }

    pub fn pooled_len(&self) -> usize {
        self.conv_len() / self.pool_size
    }

    pub fn in_dim(&self) -> usize {
        self.input_maps * self.input_band_len
    }

    pub fn out_dim(&self) -> usize {
        self.num_filters * self.pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_maps == 0 || self.num_filters == 0 || self.pool_size == 0 {
            return Err(Error::Domain(String::from(
                "conv layer counts must be positive",
            )));
        }
        if self.filter_width == 0 || self.filter_width > self.input_band_len {
            return Err(Error::ShapeMismatch {
                op: "conv filter",
                left: (1, self.filter_width),
                right: (1, self.input_band_len),
            });
        }
        let conv_len = self.conv_len();
        if conv_len % self.pool_size != 0 {
            return Err(Error::ShapeMismatch {
                op: "conv pooling (conv length vs pool size)",
                left: (1, conv_len),
                right: (1, self.pool_size),
            });
        }
        Ok(())
    }
}

/// Convolution parameters: row f of `weights` holds filter f's taps,
/// map-major (`m * filter_width + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expected = (self.spec.num_filters, self.spec.input_maps * self.spec.filter_width);
        if self.weights.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv weights",
                left: self.weights.shape(),
                right: expected,
            });
        }
        if self.bias.len() != self.spec.num_filters {
            return Err(Error::ShapeMismatch {
                op: "conv bias",
                left: (1, self.bias.len()),
                right: (1, self.spec.num_filters),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.in_dim(),
            Layer::Conv(c) => c.spec.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.out_dim(),
            Layer::Conv(c) => c.spec.out_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Dense(d) => d.validate(),
            Layer::Conv(c) => c.validate(),
        }
    }
}

/// Max over non-overlapping groups of `group` adjacent columns.
///
/// Returns the pooled matrix and, per pooled entry, the absolute source
/// column index (ties resolved to the lowest index) for gradient routing.
pub fn maxout_pool(linear_out: &Matrix, group: usize) -> Result<(Matrix, Vec<usize>)> {
    if group == 0 || linear_out.cols() % group != 0 {
        return Err(Error::ShapeMismatch {
            op: "maxout_pool (columns vs group)",
            left: linear_out.shape(),
            right: (1, group),
        });
    }
    let out_cols = linear_out.cols() / group;
    let mut pooled = Matrix::zeros(linear_out.rows(), out_cols);
    let mut argmax = vec![0usize; linear_out.rows() * out_cols];
    for i in 0..linear_out.rows() {
        let row = linear_out.row(i);
        for j in 0..out_cols {
            let base = j * group;
            let mut best = row[base];
            let mut best_col = base;
            for (off, &v) in row[base..base + group].iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_col = base + off;
                }
            }
            pooled.set(i, j, best);
            argmax[i * out_cols + j] = best_col;
        }
    }
    Ok((pooled, argmax))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum LayerCache {
    Dense {
        /// Activated linear outputs, n x out_linear (pre-pooling).
        activated: Matrix,
        /// Absolute linear column chosen per pooled unit (empty when g = 1).
        argmax: Vec<usize>,
        /// 0/1 dropout mask on the pooled output (None when p = 0 or infer).
        mask: Option<Matrix>,
        /// Layer output fed to the next layer.
        output: Matrix,
    },
    Conv {
        /// Activated conv outputs, n x (num_filters * conv_len).
        activated: Matrix,
        /// Absolute conv position chosen per pooled entry.
        argmax: Vec<usize>,
        output: Matrix,
    },
}

impl LayerCache {
    fn output(&self) -> &Matrix {
        match self {
            LayerCache::Dense { output, .. } => output,
            LayerCache::Conv { output, .. } => output,
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
pub struct ForwardCache {
    version: u64,
    mode: Mode,
    input: Matrix,
    layers: Vec<LayerCache>,
    posteriors: Matrix,
}

impl ForwardCache {
    /// Softmax posteriors, one row per example.
    pub fn posteriors(&self) -> &Matrix {
        &self.posteriors
    }

    /// Output of hidden layer `k` as fed to the next layer (after maxout
    /// and dropout masking / scaling).
    pub fn layer_output(&self, k: usize) -> &Matrix {
        self.layers[k].output()
    }

    /// Dropout masks drawn during a train-mode pass, one entry per hidden
    /// layer (None where no mask was applied).
    pub fn masks(&self) -> Vec<Option<Matrix>> {
        self.layers
            .iter()
            .map(|c| match c {
                LayerCache::Dense { mask, .. } => mask.clone(),
                LayerCache::Conv { .. } => None,
            })
            .collect()
    }
}

/// Parameter gradients for one layer; shapes mirror the layer's parameters.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients of the mean cross-entropy for every parameter in the network.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<ParamGrads>,
    pub output: ParamGrads,
}

/// Ordered layer stack ending in a softmax output layer.
///
/// The softmax is structural: it is always present, always last, and not a
/// configurable layer. Hidden layers may be dense or convolution blocks as
/// long as adjacent dimensions conform.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    output_weights: Matrix,
    output_bias: Vec<f64>,
    bottleneck_index: Option<usize>,
    version: u64,
}

impl Network {
    /// Assembles a network from parts, validating dimension chaining.
    pub fn from_parts(
        layers: Vec<Layer>,
        output_weights: Matrix,
        output_bias: Vec<f64>,
        bottleneck_index: Option<usize>,
    ) -> Result<Self> {
        for layer in &layers {
            layer.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    left: (1, pair[0].out_dim()),
                    right: (pair[1].in_dim(), 1),
                });
            }
        }
        if let Some(last) = layers.last() {
            if last.out_dim() != output_weights.rows() {
                return Err(Error::ShapeMismatch {
                    op: "output layer input",
                    left: (1, last.out_dim()),
                    right: output_weights.shape(),
                });
            }
        }
        if output_bias.len() != output_weights.cols() {
            return Err(Error::ShapeMismatch {
                op: "output bias",
                left: (1, output_bias.len()),
                right: output_weights.shape(),
            });
        }
        if let Some(b) = bottleneck_index {
            if b == 0 || b > layers.len() {
                return Err(Error::Domain(format!(
                    "bottleneck index {b} outside 1..={}",
                    layers.len()
                )));
            }
        }
        Ok(Network {
            layers,
            output_weights,
            output_bias,
            bottleneck_index,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.output_weights.rows(), Layer::in_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.output_weights.cols()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_weights(&self) -> &Matrix {
        &self.output_weights
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.output_bias
    }

    pub fn bottleneck_index(&self) -> Option<usize> {
        self.bottleneck_index
    }

    /// Monotone counter bumped on every parameter change; forward caches
    /// remember the version they were computed against.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = self.output_weights.rows() * self.output_weights.cols()
            + self.output_bias.len();
        for layer in &self.layers {
            n += match layer {
                Layer::Dense(d) => d.weights.rows() * d.weights.cols() + d.bias.len(),
                Layer::Conv(c) => c.weights.rows() * c.weights.cols() + c.bias.len(),
            };
        }
        n
    }

    /// Replaces the parameters of the leading dense layers with a
    /// pre-trained stack of (weights, hidden bias) pairs.
    pub fn load_pretrained_stack(&mut self, stack: &[(Matrix, Vec<f64>)]) -> Result<()> {
        if stack.len() > self.layers.len() {
            return Err(Error::Data(format!(
                "pre-trained stack has {} layers but the network has {}",
                stack.len(),
                self.layers.len()
            )));
        }
        for (k, (weights, bias)) in stack.iter().enumerate() {
            match &mut self.layers[k] {
                Layer::Dense(d) => {
                    if d.maxout_group != 1 {
                        return Err(Error::Unsupported(String::from(
                            "pre-trained initialization of maxout layers",
                        )));
                    }
                    if d.weights.shape() != weights.shape() || d.bias.len() != bias.len() {
                        return Err(Error::ShapeMismatch {
                            op: "pre-trained layer",
                            left: weights.shape(),
                            right: d.weights.shape(),
                        });
                    }
                    d.weights = weights.clone();
                    d.bias = bias.clone();
                }
                Layer::Conv(_) => {
                    return Err(Error::Unsupported(String::from(
                        "pre-trained initialization of convolution layers",
                    )))
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    fn forward_impl(
        &self,
        batch: &Matrix,
        mode: Mode,
        mut rng: Option<&mut SeededRng>,
        fixed_masks: Option<&[Option<Matrix>]>,
    ) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward input",
                left: batch.shape(),
                right: (self.input_dim(), 0),
            });
        }
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    let linear = current.affine(&d.weights, &d.bias)?;
                    let activated = apply_activation(d.activation, &linear);
                    let (mut output, argmax) = if d.maxout_group > 1 {
                        maxout_pool(&activated, d.maxout_group)?
                    } else {
                        (activated.clone(), Vec::new())
                    };
                    let mask = if d.dropout_factor > 0.0 {
                        match mode {
                            Mode::Train => {
                                let keep = 1.0 - d.dropout_factor;
                                let mask = if let Some(masks) = fixed_masks {
                                    masks[k].clone().ok_or_else(|| {
                                        Error::Contract(String::from(
                                            "missing fixed dropout mask for a dropout layer",
                                        ))
                                    })?
                                } else {
                                    let rng = rng.as_deref_mut().ok_or_else(|| {
                                        Error::Contract(String::from(
                                            "train-mode forward with dropout requires an rng",
                                        ))
                                    })?;
                                    draw_mask(rng, output.shape(), keep)
                                };
                                if mask.shape() != output.shape() {
                                    return Err(Error::ShapeMismatch {
                                        op: "dropout mask",
                                        left: mask.shape(),
                                        right: output.shape(),
                                    });
                                }
                                output = output.hadamard(&mask)?;
                                Some(mask)
                            }
                            Mode::Infer => {
                                output = output.scale(1.0 - d.dropout_factor);
                                None
                            }
                        }
                    } else {
                        None
                    };
                    caches.push(LayerCache::Dense {
                        activated,
                        argmax,
                        mask,
                        output: output.clone(),
                    });
                    current = output;
                }
                Layer::Conv(c) => {
                    let (activated, output, argmax) = conv_forward(c, &current)?;
                    caches.push(LayerCache::Conv {
                        activated,
                        argmax,
                        output: output.clone(),
                    });
                    current = output;
                }
            }
        }
        let logits = current.affine(&self.output_weights, &self.output_bias)?;
        let posteriors = logits.softmax_rows();
        Ok(ForwardCache {
            version: self.version,
            mode,
            input: batch.clone(),
            layers: caches,
            posteriors,
        })
    }

    /// Training-mode forward: dropout masks are drawn from `rng`.
    pub fn forward_train(&self, batch: &Matrix, rng: &mut SeededRng) -> Result<ForwardCache> {
        self.forward_impl(batch, Mode::Train, Some(rng), None)
    }

    /// Training-mode forward that reuses previously drawn dropout masks.
    /// This is what makes finite-difference checks of a stochastic forward
    /// well-defined.
    pub fn forward_train_masked(
        &self,
        batch: &Matrix,
        masks: &[Option<Matrix>],
    ) -> Result<ForwardCache> {
        if masks.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "expected {} masks, got {}",
                self.layers.len(),
                masks.len()
            )));
        }
        self.forward_impl(batch, Mode::Train, None, Some(masks))
    }

    /// Inference-mode forward: no masks; dropout layers scale their output
    /// by (1 - dropout_factor). Deterministic.
    pub fn forward_infer(&self, batch: &Matrix) -> Result<ForwardCache> {
        self.forward_impl(batch, Mode::Infer, None, None)
    }

    /// Gradients of mean cross-entropy between `targets` (one row of class
    /// probabilities per example, typically one-hot) and the cached
    /// posteriors. The cache must come from a train-mode forward against
    /// the current parameters.
    pub fn backward(&self, cache: &ForwardCache, targets: &Matrix) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::Contract(String::from(
                "forward cache is stale: parameters changed since it was recorded",
            )));
        }
        if cache.mode != Mode::Train {
            return Err(Error::Contract(String::from(
                "backward requires a train-mode forward cache",
            )));
        }
        if targets.shape() != cache.posteriors.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward targets",
                left: targets.shape(),
                right: cache.posteriors.shape(),
            });
        }
        let n = cache.posteriors.rows() as f64;
        // Softmax + cross-entropy: dL/dlogits = (posteriors - targets) / n.
        let mut delta = cache.posteriors.sub(targets)?.scale(1.0 / n);

        let last_hidden = cache
            .layers
            .last()
            .map_or(&cache.input, LayerCache::output);
        let output_grads = ParamGrads {
            weights: last_hidden.matmul_transpose_self(&delta)?,
            bias: delta.col_sums(),
        };
        delta = delta.matmul_transpose_other(&self.output_weights)?;

        let mut layer_grads: Vec<ParamGrads> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = if k == 0 {
                &cache.input
            } else {
                cache.layers[k - 1].output()
            };
            match (layer, &cache.layers[k]) {
                (
                    Layer::Dense(d),
                    LayerCache::Dense {
                        activated,
                        argmax,
                        mask,
                        ..
                    },
                ) => {
                    if let Some(mask) = mask {
                        delta = delta.hadamard(mask)?;
                    }
                    // Route pooled gradients back to the winning linear unit.
                    let mut d_linear = if d.maxout_group > 1 {
                        let mut expanded = Matrix::zeros(delta.rows(), d.out_linear());
                        let out_dim = d.out_dim();
                        for i in 0..delta.rows() {
                            for j in 0..out_dim {
                                expanded.set(i, argmax[i * out_dim + j], delta.get(i, j));
                            }
                        }
                        expanded
                    } else {
                        delta
                    };
                    for i in 0..d_linear.rows() {
                        for j in 0..d_linear.cols() {
                            let g = d.activation.derivative_from_output(activated.get(i, j));
                            d_linear.set(i, j, d_linear.get(i, j) * g);
                        }
                    }
                    layer_grads.push(ParamGrads {
                        weights: input.matmul_transpose_self(&d_linear)?,
                        bias: d_linear.col_sums(),
                    });
                    delta = d_linear.matmul_transpose_other(&d.weights)?;
                }
                (Layer::Conv(c), LayerCache::Conv { activated, argmax, .. }) => {
                    let (grads, d_input) = conv_backward(c, input, activated, argmax, &delta)?;
                    layer_grads.push(grads);
                    delta = d_input;
                }
                _ => unreachable!("cache layout always mirrors the layer stack"),
            }
        }
        layer_grads.reverse();
        Ok(Gradients {
            layers: layer_grads,
            output: output_grads,
        })
    }

    /// [`Network::backward`] with one-hot targets built from label ids.
    pub fn backward_labels(&self, cache: &ForwardCache, labels: &[u32]) -> Result<Gradients> {
        let targets = one_hot(labels, self.num_classes(), cache.posteriors.rows())?;
        self.backward(cache, &targets)
    }

    /// params <- params - lr * grads. Invalidates outstanding caches.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "gradients cover {} layers, network has {}",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            let (w, b) = match layer {
                Layer::Dense(d) => (&mut d.weights, &mut d.bias),
                Layer::Conv(c) => (&mut c.weights, &mut c.bias),
            };
            w.add_scaled(&g.weights, -lr)?;
            for (bi, gi) in b.iter_mut().zip(&g.bias) {
                *bi -= lr * gi;
            }
        }
        self.output_weights.add_scaled(&grads.output.weights, -lr)?;
        for (bi, gi) in self.output_bias.iter_mut().zip(&grads.output.bias) {
            *bi -= lr * gi;
        }
        self.version += 1;
        Ok(())
    }

    /// Drops every layer above the bottleneck (and the softmax), leaving a
    /// feature extractor whose output is the bottleneck activation.
    /// `bottleneck_index` is 1-based over hidden layers, matching the
    /// position in the layer-size list. The source network is not changed.
    pub fn truncate_to_bottleneck(&self, bottleneck_index: usize) -> Result<Extractor> {
        if bottleneck_index == 0 || bottleneck_index > self.layers.len() {
            return Err(Error::Domain(format!(
                "bottleneck index {bottleneck_index} outside 1..={}",
                self.layers.len()
            )));
        }
        let layers: Vec<Layer> = self.layers[..bottleneck_index].to_vec();
        Ok(Extractor {
            input_dim: self.input_dim(),
            output_dim: layers.last().map_or(self.input_dim(), Layer::out_dim),
            layers,
        })
    }
}

/// Hidden-layer prefix of a trained network, used for feature extraction.
/// Runs in inference mode only.
#[derive(Clone, Debug)]
pub struct Extractor {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl Extractor {
    /// An extractor with no layers: output equals input.
    pub fn identity(dim: usize) -> Self {
        Extractor {
            layers: Vec::new(),
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, input_dim: usize) -> Result<Self> {
        for layer in &layers {
            layer.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "extractor chain",
                    left: (1, pair[0].out_dim()),
                    right: (pair[1].in_dim(), 1),
                });
            }
        }
        if let Some(first) = layers.first() {
            if first.in_dim() != input_dim {
                return Err(Error::ShapeMismatch {
                    op: "extractor input",
                    left: (1, input_dim),
                    right: (first.in_dim(), 1),
                });
            }
        }
        let output_dim = layers.last().map_or(input_dim, Layer::out_dim);
        Ok(Extractor {
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Inference-mode forward through the retained layers.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "extractor input",
                left: batch.shape(),
                right: (self.input_dim, 0),
            });
        }
        let mut current = batch.clone();
        for layer in &self.layers {
            current = match layer {
                Layer::Dense(d) => {
                    let linear = current.affine(&d.weights, &d.bias)?;
                    let activated = apply_activation(d.activation, &linear);
                    let pooled = if d.maxout_group > 1 {
                        maxout_pool(&activated, d.maxout_group)?.0
                    } else {
                        activated
                    };
                    if d.dropout_factor > 0.0 {
                        pooled.scale(1.0 - d.dropout_factor)
                    } else {
                        pooled
                    }
                }
                Layer::Conv(c) => conv_forward(c, &current)?.1,
            };
        }
        Ok(current)
    }
}

fn draw_mask(rng: &mut SeededRng, shape: (usize, usize), keep: f64) -> Matrix {
    let data = (0..shape.0 * shape.1)
        .map(|_| if rng.next_f64() < keep { 1.0 } else { 0.0 })
        .collect();
    Matrix::from_vec(shape.0, shape.1, data).expect("shape matches data length")
}

/// One-hot rows for a label vector.
pub fn one_hot(labels: &[u32], classes: usize, rows: usize) -> Result<Matrix> {
    if labels.len() != rows {
        return Err(Error::Data(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    let mut m = Matrix::zeros(rows, classes);
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        m.set(i, label as usize, 1.0);
    }
    Ok(m)
}

/// Convolution + activation + max-pool forward for one batch.
///
/// Returns (activated conv outputs, pooled outputs, pool argmax positions).
fn conv_forward(layer: &ConvLayer, batch: &Matrix) -> Result<(Matrix, Matrix, Vec<usize>)> {
    let s = &layer.spec;
    if batch.cols() != s.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "conv input",
            left: batch.shape(),
            right: (1, s.in_dim()),
        });
    }
    let n = batch.rows();
    let conv_len = s.conv_len();
    let pooled_len = s.pooled_len();
    let out_dim = s.out_dim();
    let mut activated = Matrix::zeros(n, s.num_filters * conv_len);
    let mut output = Matrix::zeros(n, out_dim);
    let mut argmax = vec![0usize; n * out_dim];
    for i in 0..n {
        let x = batch.row(i);
        for f in 0..s.num_filters {
            let w = layer.weights.row(f);
            for t in 0..conv_len {
                let mut acc = layer.bias[f];
                for m in 0..s.input_maps {
                    let taps = &w[m * s.filter_width..(m + 1) * s.filter_width];
                    let band = &x[m * s.input_band_len + t..m * s.input_band_len + t + s.filter_width];
                    for (&wk, &xk) in taps.iter().zip(band) {
                        acc += wk * xk;
                    }
                }
                activated.set(i, f * conv_len + t, s.activation.apply_scalar(acc));
            }
            for u in 0..pooled_len {
                let base = u * s.pool_size;
                let mut best = activated.get(i, f * conv_len + base);
                let mut best_t = base;
                for t in base + 1..base + s.pool_size {
                    let v = activated.get(i, f * conv_len + t);
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                output.set(i, f * pooled_len + u, best);
                argmax[i * out_dim + f * pooled_len + u] = best_t;
            }
        }
    }
    Ok((activated, output, argmax))
}

fn conv_backward(
    layer: &ConvLayer,
    input: &Matrix,
    activated: &Matrix,
    argmax: &[usize],
    d_out: &Matrix,
) -> Result<(ParamGrads, Matrix)> {
    let s = &layer.spec;
    let n = input.rows();
    let conv_len = s.conv_len();
    let pooled_len = s.pooled_len();
    let out_dim = s.out_dim();
    if d_out.shape() != (n, out_dim) {
        return Err(Error::ShapeMismatch {
            op: "conv backward",
            left: d_out.shape(),
            right: (n, out_dim),
        });
    }
    let mut d_weights = Matrix::zeros(s.num_filters, s.input_maps * s.filter_width);
    let mut d_bias = vec![0.0; s.num_filters];
    let mut d_input = Matrix::zeros(n, s.in_dim());
    for i in 0..n {
        for f in 0..s.num_filters {
            for u in 0..pooled_len {
                let g_out = d_out.get(i, f * pooled_len + u);
                if g_out == 0.0 {
                    continue;
                }
                let t = argmax[i * out_dim + f * pooled_len + u];
                let y = activated.get(i, f * conv_len + t);
                let g_pre = g_out * s.activation.derivative_from_output(y);
                d_bias[f] += g_pre;
                for m in 0..s.input_maps {
                    for k in 0..s.filter_width {
                        let x = input.get(i, m * s.input_band_len + t + k);
                        let w = layer.weights.get(f, m * s.filter_width + k);
                        *d_weights
                            .as_mut_slice()
                            .get_mut(f * s.input_maps * s.filter_width + m * s.filter_width + k)
                            .unwrap() += g_pre * x;
                        *d_input
                            .as_mut_slice()
                            .get_mut(i * s.in_dim() + m * s.input_band_len + t + k)
                            .unwrap() += g_pre * w;
                    }
                }
            }
        }
    }
    Ok((
        ParamGrads {
            weights: d_weights,
            bias: d_bias,
        },
        d_input,
    ))
}

fn glorot_uniform(rng: &mut SeededRng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..rows * cols)
        .map(|_| (rng.next_f64() * 2.0 - 1.0) * bound)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data length")
}

/// Random initialization: weights uniform in +/-sqrt(6 / (fan_in + fan_out)),
/// biases zero. Deterministic given the rng seed.
pub fn init_network(spec: &NetSpec, rng: &mut SeededRng) -> Result<Network> {
    let mut layers = Vec::new();
    let sizes = &spec.layer_sizes;
    for k in 1..sizes.len() - 1 {
        let in_dim = if k == 1 {
            sizes[0]
        } else {
            sizes[k - 1]
        };
        let out_linear = sizes[k] * spec.maxout_group;
        layers.push(Layer::Dense(DenseLayer {
            weights: glorot_uniform(rng, in_dim, out_linear, in_dim, out_linear),
            bias: vec![0.0; out_linear],
            activation: spec.hidden_activation,
            maxout_group: spec.maxout_group,
            dropout_factor: spec.dropout_factor,
        }));
    }
    let last_dim = sizes[sizes.len() - 2];
    let classes = sizes[sizes.len() - 1];
    let output_weights = glorot_uniform(rng, last_dim, classes, last_dim, classes);
    Network::from_parts(layers, output_weights, vec![0.0; classes], spec.bottleneck_index)
}

/// Plan for one convolution block of a CNN; band lengths are chained
/// automatically when the network is built.
#[derive(Clone, Copy, Debug)]
pub struct ConvPlan {
    pub num_filters: usize,
    pub filter_width: usize,
    pub pool_size: usize,
}

/// Description of a convolution network: conv blocks, then fully connected
/// hidden layers, then the softmax over `target_count` classes.
#[derive(Clone, Debug)]
pub struct CnnSpec {
    pub input_maps: usize,
    pub input_band_len: usize,
    pub conv_layers: Vec<ConvPlan>,
    pub conv_activation: ActivationKind,
    pub dense_sizes: Vec<usize>,
    pub dense_activation: ActivationKind,
    pub maxout_group: usize,
    pub dropout_factor: f64,
    pub target_count: usize,
}

impl CnnSpec {
    /// Resolves the conv chain into per-layer shapes, validating that every
    /// stage conforms.
    pub fn resolve_conv_specs(&self) -> Result<Vec<ConvLayerSpec>> {
        let mut specs = Vec::with_capacity(self.conv_layers.len());
        let mut maps = self.input_maps;
        let mut band = self.input_band_len;
        for plan in &self.conv_layers {
            let spec = ConvLayerSpec {
                input_maps: maps,
                input_band_len: band,
                num_filters: plan.num_filters,
                filter_width: plan.filter_width,
                pool_size: plan.pool_size,
                activation: self.conv_activation,
            };
            spec.validate()?;
            maps = plan.num_filters;
            band = spec.pooled_len();
            specs.push(spec);
        }
        Ok(specs)
    }
}

/// Builds and initializes a convolution network per `spec`.
pub fn init_cnn_network(spec: &CnnSpec, rng: &mut SeededRng) -> Result<Network> {
    if spec.target_count == 0 {
        return Err(Error::Domain(String::from("target count must be nonzero")));
    }
    let conv_specs = spec.resolve_conv_specs()?;
    let mut layers: Vec<Layer> = Vec::new();
    let mut current_dim = spec.input_maps * spec.input_band_len;
    for cs in conv_specs {
        let fan_in = cs.input_maps * cs.filter_width;
        let fan_out = cs.num_filters * cs.filter_width;
        let weights = glorot_uniform(
            rng,
            cs.num_filters,
            cs.input_maps * cs.filter_width,
            fan_in,
            fan_out,
        );
        current_dim = cs.out_dim();
        layers.push(Layer::Conv(ConvLayer {
            spec: cs,
            weights,
            bias: vec![0.0; cs.num_filters],
        }));
    }
    for &size in &spec.dense_sizes {
        let out_linear = size * spec.maxout_group;
        layers.push(Layer::Dense(DenseLayer {
            weights: glorot_uniform(rng, current_dim, out_linear, current_dim, out_linear),
            bias: vec![0.0; out_linear],
            activation: spec.dense_activation,
            maxout_group: spec.maxout_group,
            dropout_factor: spec.dropout_factor,
        }));
        current_dim = size;
    }
    let output_weights = glorot_uniform(
        rng,
        current_dim,
        spec.target_count,
        current_dim,
        spec.target_count,
    );
    Network::from_parts(
        layers,
        output_weights,
        vec![0.0; spec.target_count],
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn parse_paper_spec() {
        let spec = parse_nnet_spec("250:1024:1024:1024:1024:1024:1901", &NetOptions::default())
            .unwrap();
        assert_eq!(
            spec.layer_sizes,
            vec![250, 1024, 1024, 1024, 1024, 1024, 1901]
        );
        assert_eq!(spec.input_dim(), 250);
        assert_eq!(spec.target_count(), 1901);
    }

    #[test]
    fn parse_bottleneck_spec() {
        let opts = NetOptions {
            bottleneck_index: Some(6),
            ..NetOptions::default()
        };
        let spec =
            parse_nnet_spec("250:1024:1024:1024:1024:1024:42:1024:1901", &opts).unwrap();
        assert_eq!(spec.layer_sizes[6], 42);
    }

    #[test]
    fn parse_minimal_and_errors() {
        assert!(parse_nnet_spec("10:3", &NetOptions::default()).is_ok());
        match parse_nnet_spec("10:x:3", &NetOptions::default()) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_nnet_spec("10", &NetOptions::default()).is_err());
        assert!(parse_nnet_spec("10:0:3", &NetOptions::default()).is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        let spec = parse_nnet_spec("250:1024:1901", &NetOptions::default()).unwrap();
        let net_a = init_network(&spec, &mut SeededRng::new(3)).unwrap();
        let net_b = init_network(&spec, &mut SeededRng::new(3)).unwrap();
        match (&net_a.layers()[0], &net_b.layers()[0]) {
            (Layer::Dense(a), Layer::Dense(b)) => {
                assert_eq!(a.weights.shape(), (250, 1024));
                assert_eq!(a.weights, b.weights);
            }
            _ => panic!("expected dense layers"),
        }
        assert_eq!(net_a.output_weights().shape(), (1024, 1901));
        assert_eq!(net_a.output_weights(), net_b.output_weights());
    }

    #[test]
    fn maxout_widens_linear_layer() {
        let opts = NetOptions {
            maxout_group: 3,
            hidden_activation: ActivationKind::Identity,
            ..NetOptions::default()
        };
        let spec = parse_nnet_spec("8:1024:10", &opts).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(1)).unwrap();
        match &net.layers()[0] {
            Layer::Dense(d) => {
                assert_eq!(d.out_linear(), 3072);
                assert_eq!(d.out_dim(), 1024);
            }
            _ => panic!("expected dense"),
        }
    }

    #[test]
    fn maxout_pool_examples() {
        let (pooled, _) = maxout_pool(&mat(1, 3, &[1.0, -2.0, 0.5]), 3).unwrap();
        assert_eq!(pooled.as_slice(), &[1.0]);

        let m = mat(1, 6, &[0.2, 0.9, 0.4, -1.0, -2.0, -3.0]);
        let (pooled, argmax) = maxout_pool(&m, 3).unwrap();
        assert_eq!(pooled.as_slice(), &[0.9, -1.0]);
        assert_eq!(argmax, vec![1, 3]);

        let m = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let (pooled, _) = maxout_pool(&m, 1).unwrap();
        assert_eq!(pooled, m);

        assert!(maxout_pool(&mat(1, 5, &[0.0; 5]), 3).is_err());
    }

    #[test]
    fn maxout_ties_take_lowest_index() {
        let (pooled, argmax) = maxout_pool(&mat(1, 3, &[7.0, 7.0, 7.0]), 3).unwrap();
        assert_eq!(pooled.as_slice(), &[7.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn forward_without_dropout_matches_across_modes() {
        let spec = parse_nnet_spec("4:5:3", &NetOptions::default()).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(7)).unwrap();
        let batch = mat(2, 4, &[0.1, -0.2, 0.3, 0.4, 1.0, 0.5, -0.5, 0.0]);
        let mut rng = SeededRng::new(1);
        let train = net.forward_train(&batch, &mut rng).unwrap();
        let infer = net.forward_infer(&batch).unwrap();
        assert_eq!(train.posteriors(), infer.posteriors());
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let spec = parse_nnet_spec("6:8:5", &NetOptions::default()).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(9)).unwrap();
        let batch = Matrix::from_vec(3, 6, (0..18).map(|i| i as f64 * 0.1).collect()).unwrap();
        let cache = net.forward_infer(&batch).unwrap();
        for i in 0..3 {
            let sum: f64 = cache.posteriors().row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_when_targets_equal_posteriors() {
        let spec = parse_nnet_spec("3:4:2", &NetOptions::default()).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(2)).unwrap();
        let batch = mat(2, 3, &[0.5, -1.0, 0.25, 0.0, 2.0, -0.5]);
        let mut rng = SeededRng::new(3);
        let cache = net.forward_train(&batch, &mut rng).unwrap();
        let grads = net.backward(&cache, cache.posteriors()).unwrap();
        for g in &grads.output.bias {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let spec = parse_nnet_spec("3:4:2", &NetOptions::default()).unwrap();
        let mut net = init_network(&spec, &mut SeededRng::new(2)).unwrap();
        let batch = mat(1, 3, &[0.5, -1.0, 0.25]);
        let mut rng = SeededRng::new(3);
        let cache = net.forward_train(&batch, &mut rng).unwrap();
        let grads = net.backward_labels(&cache, &[1]).unwrap();
        net.apply_gradients(&grads, 0.1).unwrap();
        assert!(matches!(
            net.backward_labels(&cache, &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn conv_length_arithmetic() {
        let spec = ConvLayerSpec {
            input_maps: 1,
            input_band_len: 8,
            num_filters: 1,
            filter_width: 3,
            pool_size: 2,
            activation: ActivationKind::Identity,
        };
        spec.validate().unwrap();
        assert_eq!(spec.conv_len(), 6);
        assert_eq!(spec.pooled_len(), 3);
    }

    #[test]
    fn conv_divisibility_enforced() {
        let spec = ConvLayerSpec {
            input_maps: 1,
            input_band_len: 8,
            num_filters: 1,
            filter_width: 2,
            pool_size: 3,
            activation: ActivationKind::Identity,
        };
        // conv length 7 is not divisible by 3
        assert!(matches!(spec.validate(), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_delta_filter_is_shifted_identity() {
        let spec = ConvLayerSpec {
            input_maps: 1,
            input_band_len: 6,
            num_filters: 1,
            filter_width: 3,
            pool_size: 1,
            activation: ActivationKind::Identity,
        };
        let layer = ConvLayer {
            spec,
            weights: mat(1, 3, &[1.0, 0.0, 0.0]),
            bias: vec![0.0],
        };
        let x = mat(1, 6, &[5.0, -1.0, 2.0, 7.0, 0.5, 3.0]);
        let (_, out, _) = conv_forward(&layer, &x).unwrap();
        assert_eq!(out.as_slice(), &[5.0, -1.0, 2.0, 7.0]);
    }

    #[test]
    fn cnn_recipe_shapes_chain() {
        // 11 input maps of 40 bands, two conv blocks, three dense layers.
        let spec = CnnSpec {
            input_maps: 11,
            input_band_len: 40,
            conv_layers: vec![
                ConvPlan { num_filters: 64, filter_width: 5, pool_size: 2 },
                ConvPlan { num_filters: 128, filter_width: 5, pool_size: 2 },
            ],
            conv_activation: ActivationKind::Sigmoid,
            dense_sizes: vec![1024, 1024, 1024],
            dense_activation: ActivationKind::Sigmoid,
            maxout_group: 1,
            dropout_factor: 0.0,
            target_count: 1901,
        };
        let conv_specs = spec.resolve_conv_specs().unwrap();
        assert_eq!(conv_specs[0].in_dim(), 440);
        assert_eq!(conv_specs[0].pooled_len(), 18); // (40-5+1)/2
        assert_eq!(conv_specs[1].input_maps, 64);
        assert_eq!(conv_specs[1].pooled_len(), 7); // (18-5+1)/2
        assert_eq!(conv_specs[1].out_dim(), 896);

        let net = init_cnn_network(&spec, &mut SeededRng::new(4)).unwrap();
        assert_eq!(net.input_dim(), 440);
        assert_eq!(net.num_classes(), 1901);
        let batch = Matrix::zeros(2, 440);
        let cache = net.forward_infer(&batch).unwrap();
        assert_eq!(cache.posteriors().shape(), (2, 1901));
    }

    #[test]
    fn truncate_keeps_prefix_and_source_unchanged() {
        let opts = NetOptions {
            bottleneck_index: Some(2),
            ..NetOptions::default()
        };
        let spec = parse_nnet_spec("10:8:4:8:3", &opts).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(5)).unwrap();
        let extractor = net.truncate_to_bottleneck(2).unwrap();
        assert_eq!(extractor.output_dim(), 4);
        assert_eq!(extractor.layers().len(), 2);
        assert_eq!(net.layers().len(), 3);

        let batch = Matrix::from_vec(2, 10, (0..20).map(|i| i as f64 * 0.05).collect()).unwrap();
        let tapped = net.forward_infer(&batch).unwrap();
        let extracted = extractor.forward(&batch).unwrap();
        assert_eq!(tapped.layer_output(1), &extracted);

        assert!(net.truncate_to_bottleneck(0).is_err());
        assert!(net.truncate_to_bottleneck(4).is_err());
    }

    #[test]
    fn identity_extractor_passes_through() {
        let x = mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let extractor = Extractor::identity(3);
        assert_eq!(extractor.forward(&x).unwrap(), x);
    }

    #[test]
    fn eleven_map_input_accepted() {
        let spec = ConvLayerSpec {
            input_maps: 11,
            input_band_len: 40,
            num_filters: 4,
            filter_width: 5,
            pool_size: 2,
            activation: ActivationKind::Sigmoid,
        };
        spec.validate().unwrap();
        assert_eq!(spec.in_dim(), 440);
    }
}
