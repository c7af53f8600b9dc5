//! ReLU multilayer perceptron with a softmax output layer.

mod checkpoint;

pub use checkpoint::{load_checkpoint, model_from_bytes, model_hash, model_to_bytes, save_checkpoint};

use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor2D};
use crate::noise::MaskTrace;

/// Affine map `h = a·W + b` with `W` stored `in_dim x out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    weights: Tensor2D,
    bias: Tensor2D,
    bias_enabled: bool,
}

impl Layer {
    pub fn new(weights: Tensor2D, bias: Tensor2D, bias_enabled: bool) -> Result<Self> {
        if bias.shape() != (1, weights.cols()) {
            return Err(Error::Shape(format!(
                "bias {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        if !bias_enabled && bias.data().iter().any(|&b| b != 0.0) {
            return Err(Error::Config("a layer without bias must carry a zero bias".into()));
        }
        Ok(Self {
            weights,
            bias,
            bias_enabled,
        })
    }

    pub fn weights(&self) -> &Tensor2D {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor2D {
        &self.bias
    }

    pub fn bias_enabled(&self) -> bool {
        self.bias_enabled
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    fn affine(&self, a: &Tensor2D) -> Result<Tensor2D> {
        a.matmul(&self.weights)?.add_row(&self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases; every hidden layer carries a bias.
    pub fn init(layer_dims: &[usize], stream: &mut RngStream) -> Result<Self> {
        Self::init_with(layer_dims, true, stream)
    }

    /// As [`MlpModel::init`]; `hidden_bias = false` removes the bias of every
    /// hidden layer (the output layer keeps its bias).
    pub fn init_with(layer_dims: &[usize], hidden_bias: bool, stream: &mut RngStream) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!("layer dims must be positive: {layer_dims:?}")));
        }
        let n = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = stream.uniform(fan_in * fan_out, -bound, bound)?;
                Ok(Layer {
                    weights: Tensor2D::from_parts(fan_in, fan_out, w),
                    bias: Tensor2D::zeros(1, fan_out),
                    bias_enabled: hidden_bias || i == n - 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Layer::out_dim).collect()
    }

    /// Input width followed by hidden widths: the slots of a [`MaskTrace`].
    pub fn noise_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.hidden_widths());
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + if l.bias_enabled { l.bias.len() } else { 0 })
            .sum()
    }

    /// In-place `θ ← θ − lr·∇θ`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !lr.is_finite() {
            return Err(Error::Domain(format!("learning rate {lr} is not finite")));
        }
        self.check_gradient_shapes(grads)?;
        let mut next = self.layers.clone();
        for (layer, g) in next.iter_mut().zip(&grads.layers) {
            for (w, d) in layer.weights.data_mut().iter_mut().zip(g.d_weights.data()) {
                *w -= lr * d;
            }
            if layer.bias_enabled {
                for (b, d) in layer.bias.data_mut().iter_mut().zip(g.d_bias.data()) {
                    *b -= lr * d;
                }
            }
            if !layer.weights.data().iter().chain(layer.bias.data()).all(|v| v.is_finite()) {
                return Err(Error::Numeric("parameter update produced a non-finite value".into()));
            }
        }
        self.layers = next;
        Ok(())
    }

    fn check_gradient_shapes(&self, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} gradient layers for a {}-layer model",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (l, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if l.weights.shape() != g.d_weights.shape() || l.bias.shape() != g.d_bias.shape() {
                return Err(Error::Shape(format!("gradient shapes differ from layer {i}")));
            }
        }
        Ok(())
    }
}

pub fn init_model(layer_dims: &[usize], stream: &mut RngStream) -> Result<MlpModel> {
    MlpModel::init(layer_dims, stream)
}

/// Values computed by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input actually fed to the first layer (after input masking).
    pub input: Tensor2D,
    /// Hidden pre-activations `h^(i)`.
    pub pre_activations: Vec<Tensor2D>,
    /// Hidden activations after rect and, when noisy, masking and scaling.
    pub activations: Vec<Tensor2D>,
    pub logits: Tensor2D,
    pub probabilities: Tensor2D,
    pub mask_trace: Option<MaskTrace>,
    multipliers: Vec<Option<Tensor2D>>,
    sigmas: Vec<Option<Tensor2D>>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.logits.rows()
    }

    /// Per-row cross-entropy computed from the logits (stable for saturated softmax).
    fn row_losses(&self, labels: &[usize]) -> Result<Vec<f64>> {
        let classes = self.logits.cols();
        if labels.len() != self.batch() {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                self.batch()
            )));
        }
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                if y >= classes {
                    return Err(Error::Domain(format!("label {y} outside 0..{classes}")));
                }
                let row = self.logits.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                Ok(lse - row[y])
            })
            .collect()
    }
}

pub(crate) fn rect(t: &Tensor2D) -> Tensor2D {
    let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor2D::from_parts(t.rows(), t.cols(), data)
}

fn softmax(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Pre-activation `mean + z·σ + b` where `σ_j = sqrt(Σ_i (a_i w_ij)²)` unless overridden.
/// `mean` must equal `a·W`. Returns the pre-activation and `σ`.
pub(crate) fn gaussian_pre_activation(
    a: &Tensor2D,
    weights: &Tensor2D,
    bias: &Tensor2D,
    mean: &Tensor2D,
    z: &Tensor2D,
    sigma_override: Option<f64>,
) -> Result<(Tensor2D, Tensor2D)> {
    let sigma = match sigma_override {
        Some(s) => Tensor2D::filled(mean.rows(), mean.cols(), s),
        None => {
            let sq = |t: &Tensor2D| t.map(|v| v * v);
            sq(a)?.matmul(&sq(weights)?)?.map(f64::sqrt)?
        }
    };
    let pre = mean.add(&z.mul(&sigma)?)?.add_row(bias)?;
    Ok((pre, sigma))
}

enum Noise<'a> {
    Clean,
    Masked(&'a MaskTrace),
    EvalFactors(&'a [f64]),
}

fn forward_impl(model: &MlpModel, x: &Tensor2D, noise: Noise<'_>) -> Result<ForwardTrace> {
    if x.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let hidden = model.hidden_layers();
    let mut multipliers = vec![None; hidden + 1];
    let mut sigmas = vec![None; hidden];
    if let Noise::Masked(trace) = &noise {
        let expected = model.noise_widths();
        if trace.widths() != expected || trace.batch() != x.rows() {
            return Err(Error::Shape(format!(
                "mask trace {:?} x {} does not match widths {expected:?} x {}",
                trace.widths(),
                trace.batch(),
                x.rows()
            )));
        }
        for (slot, m) in multipliers.iter_mut().enumerate() {
            *m = Some(trace.multiplier(slot)?);
        }
    }
    if let Noise::EvalFactors(f) = &noise {
        if f.len() != hidden + 1 {
            return Err(Error::Shape(format!("{} evaluation factors for {} slots", f.len(), hidden + 1)));
        }
    }
    let corrupt = |t: Tensor2D, slot: usize, multipliers: &[Option<Tensor2D>]| -> Result<Tensor2D> {
        match (&noise, &multipliers[slot]) {
            (Noise::Masked(_), Some(m)) => t.mul(m),
            (Noise::EvalFactors(f), _) if f[slot] != 1.0 => t.scale(f[slot]),
            _ => Ok(t),
        }
    };

    let input = corrupt(x.clone(), 0, &multipliers)?;
    let mut pre_activations = Vec::with_capacity(hidden);
    let mut activations: Vec<Tensor2D> = Vec::with_capacity(hidden);
    for (k, layer) in model.layers[..hidden].iter().enumerate() {
        let a = activations.last().unwrap_or(&input);
        let gaussian = match &noise {
            Noise::Masked(trace) => trace.gaussian(k).map(|z| (z, trace.sigma_override())),
            _ => None,
        };
        let pre = match gaussian {
            Some((z, sigma_override)) => {
                let mean = a.matmul(&layer.weights)?;
                let (pre, sigma) = gaussian_pre_activation(a, &layer.weights, &layer.bias, &mean, z, sigma_override)?;
                sigmas[k] = Some(sigma);
                pre
            }
            None => layer.affine(a)?,
        };
        let act = corrupt(rect(&pre), k + 1, &multipliers)?;
        pre_activations.push(pre);
        activations.push(act);
    }
    let last = activations.last().unwrap_or(&input);
    let logits = model.layers[hidden].affine(last)?;
    let probabilities = softmax(&logits);
    let mask_trace = match noise {
        Noise::Masked(t) => Some(t.clone()),
        _ => None,
    };
    Ok(ForwardTrace {
        input,
        pre_activations,
        activations,
        logits,
        probabilities,
        mask_trace,
        multipliers,
        sigmas,
    })
}

/// Forward pass; with `masks`, hidden (and input) activations are corrupted as
/// the trace prescribes.
pub fn forward(model: &MlpModel, x: &Tensor2D, masks: Option<&MaskTrace>) -> Result<ForwardTrace> {
    match masks {
        Some(m) => forward_impl(model, x, Noise::Masked(m)),
        None => forward_impl(model, x, Noise::Clean),
    }
}

/// Noiseless forward pass that multiplies each slot's outgoing activations by
/// `factors[slot]` (test-time dropout scaling).
pub fn forward_eval(model: &MlpModel, x: &Tensor2D, factors: &[f64]) -> Result<ForwardTrace> {
    forward_impl(model, x, Noise::EvalFactors(factors))
}

/// Clean hidden chain `f^(i)(x)` for every hidden layer, returning pre-activations and activations.
pub fn hidden_forward(model: &MlpModel, x: &Tensor2D, depth: usize) -> Result<(Vec<Tensor2D>, Vec<Tensor2D>)> {
    if x.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let mut pres = Vec::with_capacity(depth);
    let mut acts: Vec<Tensor2D> = Vec::with_capacity(depth);
    for layer in &model.layers[..depth.min(model.hidden_layers())] {
        let pre = layer.affine(acts.last().unwrap_or(x))?;
        acts.push(rect(&pre));
        pres.push(pre);
    }
    Ok((pres, acts))
}

/// Mean cross-entropy of the true classes.
pub fn loss_ce(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    let losses = trace.row_losses(labels)?;
    let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric("cross-entropy is not finite".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub d_weights: Tensor2D,
    pub d_bias: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    pub d_input: Tensor2D,
}

/// Gaussian-path corrections for `pre = a·W + z·σ(a, W) + b`.
fn gaussian_backward(
    a: &Tensor2D,
    weights: &Tensor2D,
    d_pre: &Tensor2D,
    z: &Tensor2D,
    sigma: &Tensor2D,
) -> Result<(Tensor2D, Tensor2D)> {
    // g = d_pre · z / σ, with σ = 0 contributing nothing.
    let g: Vec<f64> = d_pre
        .data()
        .iter()
        .zip(z.data())
        .zip(sigma.data())
        .map(|((d, z), s)| if *s > 0.0 { d * z / s } else { 0.0 })
        .collect();
    let g = Tensor2D::from_parts(d_pre.rows(), d_pre.cols(), g);
    let a_sq = a.map(|v| v * v)?;
    let w_sq = weights.map(|v| v * v)?;
    let d_w = a_sq.t_matmul(&g)?.mul(weights)?;
    let d_a = a.mul(&g.matmul_t(&w_sq)?)?;
    Ok((d_w, d_a))
}

/// Exact gradients of [`loss_ce`] with respect to every parameter and the raw input.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    let hidden = model.hidden_layers();
    if trace.activations.len() != hidden
        || trace.logits.cols() != model.classes()
        || trace.input.cols() != model.input_dim()
    {
        return Err(Error::Shape("forward trace was not produced by this model".into()));
    }
    trace.row_losses(labels)?;
    let batch = trace.batch() as f64;

    let mut d = trace.probabilities.clone();
    for (r, &y) in labels.iter().enumerate() {
        d.row_mut(r)[y] -= 1.0;
    }
    let mut d = d.scale(1.0 / batch)?;

    let mut grads = Vec::with_capacity(hidden + 1);
    for l in (0..=hidden).rev() {
        let layer = &model.layers[l];
        let a_in = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
        let mut d_w = a_in.t_matmul(&d)?;
        let d_b = if layer.bias_enabled {
            d.sum_rows()
        } else {
            Tensor2D::zeros(1, layer.out_dim())
        };
        let mut d_a = d.matmul_t(&layer.weights)?;
        if l < hidden {
            if let (Some(sigma), Some(z)) = (
                &trace.sigmas[l],
                trace.mask_trace.as_ref().and_then(|t| t.gaussian(l)),
            ) {
                if trace.mask_trace.as_ref().and_then(MaskTrace::sigma_override).is_none() {
                    let (gw, ga) = gaussian_backward(a_in, &layer.weights, &d, z, sigma)?;
                    d_w = d_w.add(&gw)?;
                    d_a = d_a.add(&ga)?;
                }
            }
        }
        grads.push(LayerGradients {
            d_weights: d_w,
            d_bias: d_b,
        });

        // Through the corruption applied to this layer's input slot.
        if let Some(m) = &trace.multipliers[l] {
            d_a = d_a.mul(m)?;
        }
        if l == 0 {
            grads.reverse();
            return Ok(Gradients {
                layers: grads,
                d_input: d_a,
            });
        }
        // rect'(h) = 1 for h > 0, and 0 otherwise (including h = 0).
        let pre = &trace.pre_activations[l - 1];
        let data = d_a
            .data()
            .iter()
            .zip(pre.data())
            .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
            .collect();
        d = Tensor2D::from_parts(d_a.rows(), d_a.cols(), data);
    }
    unreachable!("loop returns at the input layer")
}

pub fn sgd_step(model: &MlpModel, grads: &Gradients, lr: f64) -> Result<MlpModel> {
    let mut next = model.clone();
    next.apply_gradients(grads, lr)?;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub error_rate: f64,
    pub mean_loss: f64,
    /// Fraction of strictly positive rect outputs per hidden layer.
    pub sparsity: Vec<f64>,
}

const EVAL_CHUNK: usize = 1000;

/// Noiseless evaluation: argmax error rate and mean cross-entropy.
pub fn evaluate(model: &MlpModel, x: &Tensor2D, labels: &[usize]) -> Result<Evaluation> {
    evaluate_scaled(model, x, labels, &vec![1.0; model.hidden_layers() + 1])
}

/// Evaluation with per-slot test-time factors (see [`forward_eval`]).
pub fn evaluate_scaled(model: &MlpModel, x: &Tensor2D, labels: &[usize], factors: &[f64]) -> Result<Evaluation> {
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if x.rows() == 0 {
        return Err(Error::Domain("cannot evaluate an empty dataset".into()));
    }
    let hidden = model.hidden_layers();
    let mut wrong = 0usize;
    let mut loss_sum = 0.0;
    let mut active = vec![0usize; hidden];
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let xb = x.select_rows(chunk)?;
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let trace = forward_eval(model, &xb, factors)?;
        loss_sum += trace.row_losses(&yb)?.iter().sum::<f64>();
        let pred = trace.probabilities.argmax_per_row()?;
        wrong += pred.iter().zip(&yb).filter(|(p, y)| p != y).count();
        for (k, pre) in trace.pre_activations.iter().enumerate() {
            active[k] += pre.data().iter().filter(|&&h| h > 0.0).count();
        }
    }
    let n = x.rows() as f64;
    let mean_loss = loss_sum / n;
    if !mean_loss.is_finite() {
        return Err(Error::Numeric("evaluation loss is not finite".into()));
    }
    let widths = model.hidden_widths();
    Ok(Evaluation {
        error_rate: wrong as f64 / n,
        mean_loss,
        sparsity: active
            .iter()
            .zip(widths)
            .map(|(&a, w)| a as f64 / (n * w as f64))
            .collect(),
    })
}

#[cfg(test)]
mod tests;
