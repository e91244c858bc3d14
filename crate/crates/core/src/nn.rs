//! Feedforward networks: conv/pool/dense/relu/softmax/dropout layers,
//! Adadelta training, and the gradient machinery used by the attacks
//! (loss gradient w.r.t. the input, per-class output Jacobians).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    MaxPool2d {
        window: usize,
        /// Defaults to `window` (non-overlapping pooling).
        #[serde(default)]
        stride: Option<usize>,
    },
    Dense {
        out_dim: usize,
    },
    Relu,
    Softmax,
    Dropout {
        rate: f64,
    },
}

fn default_stride() -> usize {
    1
}

impl LayerSpec {
    /// Output shape for a given input shape, or why the two do not compose.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
                stride,
            } => {
                if stride == 0 || kernel_size == 0 || out_channels == 0 {
                    return Err(Error::InvalidSpec("conv parameters must be positive".into()));
                }
                let [_, h, w] = as_chw(input)?;
                if h < kernel_size || w < kernel_size {
                    return Err(Error::ShapeMismatch(format!(
                        "conv kernel {kernel_size} exceeds input {input:?}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel_size) / stride + 1,
                    (w - kernel_size) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let s = stride.unwrap_or(window);
                if window == 0 || s == 0 {
                    return Err(Error::InvalidSpec("pool parameters must be positive".into()));
                }
                let [c, h, w] = as_chw(input)?;
                if h < window || w < window {
                    return Err(Error::ShapeMismatch(format!(
                        "pool window {window} exceeds input {input:?}"
                    )));
                }
                Ok(vec![c, (h - window) / s + 1, (w - window) / s + 1])
            }
            LayerSpec::Dense { out_dim } => {
                if out_dim == 0 {
                    return Err(Error::InvalidSpec("dense out_dim must be positive".into()));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Relu | LayerSpec::Softmax | LayerSpec::Dropout { .. } => {
                Ok(input.to_vec())
            }
        }
    }
}

fn as_chw(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::ShapeMismatch(format!(
            "expected [channels, height, width], got {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// Scales each dropout layer's input by its keep probability (1-p).
    Deterministic,
    /// Applies i.i.d. Bernoulli(1-p) 0/1 masks drawn from the seed.
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub layers: Vec<LayerSpec>,
    /// One entry per layer; `None` for layers without parameters.
    pub weights: Vec<Option<LayerParams>>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adadelta_rho: f64,
    pub adadelta_epsilon: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            adadelta_rho: 0.95,
            adadelta_epsilon: 1e-6,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean deterministic-mode cross-entropy before the first update.
    pub initial_loss: f64,
    /// Mean deterministic-mode cross-entropy after the last epoch.
    pub final_loss: f64,
    /// Mean sampled-mode batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Builds a shape-checked model with Glorot-uniform weights and zero biases.
pub fn build_model(
    specs: &[LayerSpec],
    input_shape: &[usize],
    num_classes: usize,
    rng_seed: u64,
) -> Result<NetworkModel> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("empty layer list".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidSpec("num_classes must be positive".into()));
    }
    for spec in specs {
        if let LayerSpec::Dropout { rate } = spec {
            if !(0.0..1.0).contains(rate) {
                return Err(Error::InvalidSpec(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
    }
    if !matches!(specs.last(), Some(LayerSpec::Softmax)) {
        return Err(Error::InvalidSpec("final layer must be softmax".into()));
    }
    // The feature vector used downstream is the input to this dense layer.
    match specs.len().checked_sub(2).map(|i| &specs[i]) {
        Some(LayerSpec::Dense { out_dim }) if *out_dim == num_classes => {}
        _ => {
            return Err(Error::InvalidSpec(format!(
                "network must end with dense({num_classes}) followed by softmax"
            )));
        }
    }

    let mut weights = Vec::with_capacity(specs.len());
    let mut shape = input_shape.to_vec();
    for (index, spec) in specs.iter().enumerate() {
        let params = match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
                ..
            } => {
                let [in_c, _, _] = as_chw(&shape)?;
                let fan_in = in_c * kernel_size * kernel_size;
                let fan_out = out_channels * kernel_size * kernel_size;
                let w = glorot_uniform(
                    vec![out_channels, in_c, kernel_size, kernel_size],
                    fan_in,
                    fan_out,
                    rng_seed,
                    index as u64,
                );
                Some(LayerParams {
                    w,
                    b: Tensor::zeros(vec![out_channels]),
                })
            }
            LayerSpec::Dense { out_dim } => {
                let in_dim: usize = shape.iter().product();
                let w = glorot_uniform(
                    vec![out_dim, in_dim],
                    in_dim,
                    out_dim,
                    rng_seed,
                    index as u64,
                );
                Some(LayerParams {
                    w,
                    b: Tensor::zeros(vec![out_dim]),
                })
            }
            _ => None,
        };
        shape = spec.output_shape(&shape)?;
        weights.push(params);
    }
    if shape != [num_classes] {
        return Err(Error::ShapeMismatch(format!(
            "network output shape {shape:?} does not match {num_classes} classes"
        )));
    }
    Ok(NetworkModel {
        layers: specs.to_vec(),
        weights,
        input_shape: input_shape.to_vec(),
        num_classes,
    })
}

fn glorot_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, seed: u64, layer: u64) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = seeded_rng(seed, &[layer]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_raw(shape, data)
}

/// Per-layer activations captured during a forward pass, enough to run
/// any backward pass afterwards.
pub(crate) struct ForwardCache {
    /// `inputs[i]` is the input to layer i; the softmax layer's input is the
    /// logit vector.
    inputs: Vec<Vec<f64>>,
    /// Shape of each layer input.
    shapes: Vec<Vec<usize>>,
    probs: Vec<f64>,
    /// Multiplicative dropout factors actually applied, per layer.
    dropout_factors: Vec<Option<DropoutFactor>>,
    /// For each pool layer, the flat input index that won each output cell.
    pool_sources: Vec<Option<Vec<usize>>>,
}

enum DropoutFactor {
    Scale(f64),
    Mask(Vec<f64>),
}

impl ForwardCache {
    pub(crate) fn logits(&self) -> &[f64] {
        self.inputs.last().unwrap()
    }

    fn hidden_index(&self) -> usize {
        // Input to the final dense layer, which sits just before softmax.
        self.inputs.len() - 2
    }
}

pub(crate) fn forward_cached(
    model: &NetworkModel,
    x: &Tensor,
    mode: DropoutMode,
) -> Result<ForwardCache> {
    if x.shape() != model.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            model.input_shape
        )));
    }
    let mut rng = match mode {
        DropoutMode::Sampled { seed } => Some(seeded_rng(seed, &[])),
        DropoutMode::Deterministic => None,
    };
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut shapes = Vec::with_capacity(model.layers.len());
    let mut dropout_factors = Vec::with_capacity(model.layers.len());
    let mut pool_sources = Vec::with_capacity(model.layers.len());
    let mut current = x.data().to_vec();
    let mut shape = model.input_shape.clone();
    let mut probs = Vec::new();

    for (i, layer) in model.layers.iter().enumerate() {
        inputs.push(current.clone());
        shapes.push(shape.clone());
        let mut factor = None;
        let mut sources = None;
        current = match layer {
            LayerSpec::Conv2d { stride, .. } => {
                let params = model.weights[i].as_ref().unwrap();
                conv2d_forward(&current, &shape, params, *stride)
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let s = stride.unwrap_or(*window);
                let (out, src) = maxpool_forward(&current, &shape, *window, s);
                sources = Some(src);
                out
            }
            LayerSpec::Dense { .. } => {
                let params = model.weights[i].as_ref().unwrap();
                dense_forward(&current, params)
            }
            LayerSpec::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Softmax => {
                probs = softmax(&current);
                probs.clone()
            }
            LayerSpec::Dropout { rate } => match &mut rng {
                None => {
                    let keep = 1.0 - rate;
                    factor = Some(DropoutFactor::Scale(keep));
                    current.iter().map(|v| v * keep).collect()
                }
                Some(rng) => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..current.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 } else { 0.0 })
                        .collect();
                    let out = current.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    factor = Some(DropoutFactor::Mask(mask));
                    out
                }
            },
        };
        shape = layer.output_shape(&shape)?;
        dropout_factors.push(factor);
        pool_sources.push(sources);
    }

    Ok(ForwardCache {
        inputs,
        shapes,
        probs,
        dropout_factors,
        pool_sources,
    })
}

/// Runs the network on one sample. Returns the softmax output and the last
/// hidden activation (the input to the final dense layer).
pub fn forward(model: &NetworkModel, x: &Tensor, mode: DropoutMode) -> Result<(Tensor, Tensor)> {
    let cache = forward_cached(model, x, mode)?;
    let hidden_index = cache.hidden_index();
    let hidden = Tensor::from_raw(
        vec![cache.inputs[hidden_index].len()],
        cache.inputs[hidden_index].clone(),
    );
    let probs = Tensor::from_raw(vec![model.num_classes], cache.probs);
    Ok((probs, hidden))
}

/// Pre-softmax logits in deterministic mode.
pub fn logits(model: &NetworkModel, x: &Tensor) -> Result<Tensor> {
    let cache = forward_cached(model, x, DropoutMode::Deterministic)?;
    Ok(Tensor::from_raw(
        vec![model.num_classes],
        cache.logits().to_vec(),
    ))
}

/// Deterministic-mode argmax prediction; ties resolve to the lowest index.
pub fn predict(model: &NetworkModel, x: &Tensor) -> Result<usize> {
    let (probs, _) = forward(model, x, DropoutMode::Deterministic)?;
    Ok(probs.argmax())
}

/// T stochastic forward passes with dropout masks derived from (seed, t).
pub fn sample_predictions(
    model: &NetworkModel,
    x: &Tensor,
    t_samples: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if t_samples < 1 {
        return Err(Error::InvalidSpec("need at least one sample".into()));
    }
    (0..t_samples)
        .map(|t| {
            let mode = DropoutMode::Sampled {
                seed: derive_seed(seed, &[t as u64]),
            };
            forward(model, x, mode).map(|(probs, _)| probs)
        })
        .collect()
}

/// Gradient of the cross-entropy loss w.r.t. the input, in deterministic mode.
pub fn input_gradient(model: &NetworkModel, x: &Tensor, y_onehot: &Tensor) -> Result<Tensor> {
    if y_onehot.len() != model.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "label length {} does not match {} classes",
            y_onehot.len(),
            model.num_classes
        )));
    }
    let cache = forward_cached(model, x, DropoutMode::Deterministic)?;
    let dlogits: Vec<f64> = cache
        .probs
        .iter()
        .zip(y_onehot.data())
        .map(|(p, y)| p - y)
        .collect();
    let (dx, _) = backward(model, &cache, &dlogits, false);
    Ok(Tensor::from_raw(x.shape().to_vec(), dx))
}

/// Row j of `dF` is the gradient of softmax output j w.r.t. the input; row j
/// of `dZ` is the gradient of logit j. Both in deterministic mode.
pub fn class_jacobians(model: &NetworkModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let cache = forward_cached(model, x, DropoutMode::Deterministic)?;
    let k = model.num_classes;
    let d = x.len();
    let mut df = Vec::with_capacity(k * d);
    let mut dz = Vec::with_capacity(k * d);
    for j in 0..k {
        df.extend_from_slice(&prob_row_gradient(model, &cache, j));
        dz.extend_from_slice(&logit_row_gradient(model, &cache, j));
    }
    Ok((
        Tensor::from_raw(vec![k, d], df),
        Tensor::from_raw(vec![k, d], dz),
    ))
}

/// Gradient of softmax output `class` w.r.t. the input.
pub(crate) fn prob_jacobian_rows(model: &NetworkModel, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let cache = forward_cached(model, x, DropoutMode::Deterministic)?;
    Ok((0..model.num_classes)
        .map(|j| prob_row_gradient(model, &cache, j))
        .collect())
}

fn prob_row_gradient(model: &NetworkModel, cache: &ForwardCache, j: usize) -> Vec<f64> {
    // dF_j/dz_k = F_j (delta_jk - F_k)
    let f = &cache.probs;
    let dlogits: Vec<f64> = f
        .iter()
        .enumerate()
        .map(|(k, fk)| f[j] * (if k == j { 1.0 } else { 0.0 } - fk))
        .collect();
    backward(model, cache, &dlogits, false).0
}

pub(crate) fn logit_row_gradient(model: &NetworkModel, cache: &ForwardCache, j: usize) -> Vec<f64> {
    let mut dlogits = vec![0.0; cache.probs.len()];
    dlogits[j] = 1.0;
    backward(model, cache, &dlogits, false).0
}

/// Trains with Adadelta on mean cross-entropy, sampled dropout per batch.
/// Returns the updated model and a loss report.
pub fn train(
    model: &NetworkModel,
    train_x: &Tensor,
    train_y: &Tensor,
    config: &TrainConfig,
) -> Result<(NetworkModel, TrainReport)> {
    if config.epochs < 1 || config.batch_size < 1 {
        return Err(Error::InvalidSpec(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    if !(0.0 < config.adadelta_rho && config.adadelta_rho < 1.0) || config.adadelta_epsilon <= 0.0 {
        return Err(Error::InvalidSpec("bad adadelta parameters".into()));
    }
    let n = check_batch_shapes(model, train_x, train_y)?;
    check_one_hot(train_y)?;

    let mut model = model.clone();
    let mut opt = AdadeltaState::new(&model);
    let initial_loss = mean_deterministic_loss(&model, train_x, train_y)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        shuffle(&mut indices, derive_seed(config.rng_seed, &[0, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in indices.chunks(config.batch_size).enumerate() {
            let mut grads = GradAccumulator::new(&model);
            let mut batch_loss = 0.0;
            for (j, &s) in batch.iter().enumerate() {
                let x = Tensor::from_raw(model.input_shape.clone(), train_x.row(s).to_vec());
                let y = train_y.row(s);
                let seed =
                    derive_seed(config.rng_seed, &[1, epoch as u64, batch_idx as u64, j as u64]);
                let cache = forward_cached(&model, &x, DropoutMode::Sampled { seed })?;
                batch_loss += cross_entropy(&cache.probs, y);
                let dlogits: Vec<f64> =
                    cache.probs.iter().zip(y).map(|(p, t)| p - t).collect();
                let (_, wgrads) = backward(&model, &cache, &dlogits, true);
                grads.add(wgrads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            opt.apply(&mut model, &grads, config.adadelta_rho, config.adadelta_epsilon)?;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }

    let final_loss = mean_deterministic_loss(&model, train_x, train_y)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}

/// Fraction of samples whose deterministic prediction matches the label row.
pub fn accuracy(model: &NetworkModel, xs: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = xs.shape()[0];
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} samples vs {} labels",
            labels.len()
        )));
    }
    let mut hits = 0;
    for i in 0..n {
        let x = Tensor::from_raw(model.input_shape.clone(), xs.row(i).to_vec());
        if predict(model, &x)? == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn check_batch_shapes(model: &NetworkModel, xs: &Tensor, ys: &Tensor) -> Result<usize> {
    let xs_shape = xs.shape();
    if xs_shape.len() != model.input_shape.len() + 1 || xs_shape[1..] != model.input_shape[..] {
        return Err(Error::ShapeMismatch(format!(
            "batch shape {:?} does not match model input {:?}",
            xs_shape, model.input_shape
        )));
    }
    let n = xs_shape[0];
    if ys.shape() != [n, model.num_classes] {
        return Err(Error::ShapeMismatch(format!(
            "label shape {:?}, expected [{n}, {}]",
            ys.shape(),
            model.num_classes
        )));
    }
    Ok(n)
}

fn check_one_hot(ys: &Tensor) -> Result<()> {
    let k = ys.shape()[1];
    for i in 0..ys.shape()[0] {
        let row = ys.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::InvalidSpec(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

fn cross_entropy(probs: &[f64], y: &[f64]) -> f64 {
    probs
        .iter()
        .zip(y)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -t * p.max(1e-300).ln())
        .sum()
}

fn mean_deterministic_loss(model: &NetworkModel, xs: &Tensor, ys: &Tensor) -> Result<f64> {
    let n = xs.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let x = Tensor::from_raw(model.input_shape.clone(), xs.row(i).to_vec());
        let cache = forward_cached(model, &x, DropoutMode::Deterministic)?;
        total += cross_entropy(&cache.probs, ys.row(i));
    }
    Ok(total / n as f64)
}

fn shuffle(indices: &mut [usize], seed: u64) {
    let mut rng = seeded_rng(seed, &[]);
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

struct GradAccumulator {
    grads: Vec<Option<LayerGrads>>,
}

struct LayerGrads {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl GradAccumulator {
    fn new(model: &NetworkModel) -> Self {
        let grads = model
            .weights
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerGrads {
                    w: vec![0.0; p.w.len()],
                    b: vec![0.0; p.b.len()],
                })
            })
            .collect();
        Self { grads }
    }

    fn add(&mut self, other: Vec<Option<LayerGrads>>) {
        for (acc, add) in self.grads.iter_mut().zip(other) {
            if let (Some(acc), Some(add)) = (acc, add) {
                for (a, g) in acc.w.iter_mut().zip(&add.w) {
                    *a += g;
                }
                for (a, g) in acc.b.iter_mut().zip(&add.b) {
                    *a += g;
                }
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for grads in self.grads.iter_mut().flatten() {
            for g in &mut grads.w {
                *g *= factor;
            }
            for g in &mut grads.b {
                *g *= factor;
            }
        }
    }
}

struct AdadeltaState {
    // Accumulated squared gradients and squared updates, per parameter.
    slots: Vec<Option<(LayerGrads, LayerGrads)>>,
}

impl AdadeltaState {
    fn new(model: &NetworkModel) -> Self {
        let slots = model
            .weights
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    (
                        LayerGrads {
                            w: vec![0.0; p.w.len()],
                            b: vec![0.0; p.b.len()],
                        },
                        LayerGrads {
                            w: vec![0.0; p.w.len()],
                            b: vec![0.0; p.b.len()],
                        },
                    )
                })
            })
            .collect();
        Self { slots }
    }

    fn apply(
        &mut self,
        model: &mut NetworkModel,
        grads: &GradAccumulator,
        rho: f64,
        eps: f64,
    ) -> Result<()> {
        for (slot, (params, grads)) in self
            .slots
            .iter_mut()
            .zip(model.weights.iter_mut().zip(&grads.grads))
        {
            let (Some((eg2, ed2)), Some(params), Some(grads)) = (slot, params, grads) else {
                continue;
            };
            adadelta_update(params.w.data_mut(), &grads.w, &mut eg2.w, &mut ed2.w, rho, eps)?;
            adadelta_update(params.b.data_mut(), &grads.b, &mut eg2.b, &mut ed2.b, rho, eps)?;
        }
        Ok(())
    }
}

fn adadelta_update(
    w: &mut [f64],
    g: &[f64],
    eg2: &mut [f64],
    ed2: &mut [f64],
    rho: f64,
    eps: f64,
) -> Result<()> {
    for i in 0..w.len() {
        eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
        let delta = -((ed2[i] + eps) / (eg2[i] + eps)).sqrt() * g[i];
        ed2[i] = rho * ed2[i] + (1.0 - rho) * delta * delta;
        w[i] += delta;
        if !w[i].is_finite() {
            return Err(Error::NonFiniteLoss);
        }
    }
    Ok(())
}

/// Backward pass from a gradient at the logits (the softmax input). Returns
/// the gradient w.r.t. the network input and, when requested, per-layer
/// weight gradients.
fn backward(
    model: &NetworkModel,
    cache: &ForwardCache,
    dlogits: &[f64],
    weight_grads: bool,
) -> (Vec<f64>, Vec<Option<LayerGrads>>) {
    let mut grads: Vec<Option<LayerGrads>> = model.weights.iter().map(|_| None).collect();
    let mut g = dlogits.to_vec();
    // Skip the softmax layer itself; the seed gradient is already w.r.t. its
    // input.
    for i in (0..model.layers.len() - 1).rev() {
        let input = &cache.inputs[i];
        let shape = &cache.shapes[i];
        g = match &model.layers[i] {
            LayerSpec::Conv2d { stride, .. } => {
                let params = model.weights[i].as_ref().unwrap();
                let (dx, dw, db) =
                    conv2d_backward(input, shape, params, *stride, &g, weight_grads);
                if weight_grads {
                    grads[i] = Some(LayerGrads { w: dw, b: db });
                }
                dx
            }
            LayerSpec::MaxPool2d { .. } => {
                let sources = cache.pool_sources[i].as_ref().unwrap();
                let mut dx = vec![0.0; input.len()];
                for (out_idx, &src) in sources.iter().enumerate() {
                    dx[src] += g[out_idx];
                }
                dx
            }
            LayerSpec::Dense { .. } => {
                let params = model.weights[i].as_ref().unwrap();
                let (dx, dw) = dense_backward(input, params, &g, weight_grads);
                if weight_grads {
                    grads[i] = Some(LayerGrads { w: dw, b: g.clone() });
                }
                dx
            }
            LayerSpec::Relu => input
                .iter()
                .zip(&g)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::Softmax => unreachable!("softmax is only the final layer"),
            LayerSpec::Dropout { .. } => match cache.dropout_factors[i].as_ref().unwrap() {
                DropoutFactor::Scale(keep) => g.iter().map(|v| v * keep).collect(),
                DropoutFactor::Mask(mask) => g.iter().zip(mask).map(|(v, m)| v * m).collect(),
            },
        };
    }
    (g, grads)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn dense_forward(input: &[f64], params: &LayerParams) -> Vec<f64> {
    let out_dim = params.b.len();
    let in_dim = input.len();
    let w = params.w.data();
    let b = params.b.data();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(input) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

fn dense_backward(
    input: &[f64],
    params: &LayerParams,
    g: &[f64],
    weight_grads: bool,
) -> (Vec<f64>, Vec<f64>) {
    let out_dim = params.b.len();
    let in_dim = input.len();
    let w = params.w.data();
    let mut dx = vec![0.0; in_dim];
    let mut dw = if weight_grads {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let go = g[o];
        for (i, (wv, xv)) in row.iter().zip(input).enumerate() {
            dx[i] += wv * go;
            if weight_grads {
                dw[o * in_dim + i] = go * xv;
            }
        }
    }
    (dx, dw)
}

fn conv2d_forward(input: &[f64], shape: &[usize], params: &LayerParams, stride: usize) -> Vec<f64> {
    let [in_c, h, w] = [shape[0], shape[1], shape[2]];
    let w_shape = params.w.shape();
    let (out_c, k) = (w_shape[0], w_shape[2]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let weights = params.w.data();
    let bias = params.b.data();
    let mut out = vec![0.0; out_c * oh * ow];
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    let w_base = ((oc * in_c + ic) * k) * k;
                    let in_base = ic * h * w + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        let wrow = &weights[w_base + ky * k..w_base + ky * k + k];
                        let irow = &input[in_base + ky * w..in_base + ky * w + k];
                        for (wv, iv) in wrow.iter().zip(irow) {
                            acc += wv * iv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &[f64],
    shape: &[usize],
    params: &LayerParams,
    stride: usize,
    g: &[f64],
    weight_grads: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [in_c, h, w] = [shape[0], shape[1], shape[2]];
    let w_shape = params.w.shape();
    let (out_c, k) = (w_shape[0], w_shape[2]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let weights = params.w.data();
    let mut dx = vec![0.0; input.len()];
    let mut dw = if weight_grads {
        vec![0.0; weights.len()]
    } else {
        Vec::new()
    };
    let mut db = if weight_grads {
        vec![0.0; out_c]
    } else {
        Vec::new()
    };
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(oc * oh + oy) * ow + ox];
                if weight_grads {
                    db[oc] += go;
                }
                for ic in 0..in_c {
                    let w_base = ((oc * in_c + ic) * k) * k;
                    let in_base = ic * h * w + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iv = input[in_base + ky * w + kx];
                            dx[in_base + ky * w + kx] += weights[w_base + ky * k + kx] * go;
                            if weight_grads {
                                dw[w_base + ky * k + kx] += iv * go;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn maxpool_forward(
    input: &[f64],
    shape: &[usize],
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let [c, h, w] = [shape[0], shape[1], shape[2]];
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut sources = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                sources.push(best_idx);
            }
        }
    }
    (out, sources)
}

/// The standard small convolutional stack used in the experiments:
/// two conv/pool blocks, a 128-unit hidden layer, dropout, softmax head.
pub fn lenet_small(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            out_channels: 8,
            kernel_size: 5,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d {
            window: 2,
            stride: None,
        },
        LayerSpec::Conv2d {
            out_channels: 16,
            kernel_size: 5,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d {
            window: 2,
            stride: None,
        },
        LayerSpec::Dense { out_dim: 128 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense {
            out_dim: num_classes,
        },
        LayerSpec::Softmax,
    ]
}
