//! Back-projection of hidden-layer noise into input space.
//!
//! For an input `x` and sampled masks, the noisy chain `f̃^(i)(x)` of every
//! hidden layer is frozen as a target. Inputs `x*` are then moved by plain
//! gradient descent so that the CLEAN chain reproduces those targets:
//!
//! `L = Σ_i λ_i |f^(i)(x^(i)*) − f̃^(i)(x)|²`
//!
//! `joint_shared` uses one `x*` for every term, `joint_distinct` and
//! `per_layer` keep one `x^(i)*` per hidden layer (they differ only in how
//! learning rates are assigned).

mod analysis;
mod dump;

pub use analysis::{mask_identity_monte_carlo, mask_identity_probability, mean_sparsity, MaskIdentity};
pub use dump::{read_tensor_f64, render_pgm, write_pgm, write_tensor_f64};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::network::{forward, hidden_forward, MlpModel};
use crate::noise::{MaskTrace, Scaling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpMode {
    PerLayer,
    JointDistinct,
    JointShared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpInit {
    #[default]
    CopyOfX,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackProjectionConfig {
    pub steps: usize,
    /// Rate used for `x^(i)*` in `per_layer` mode.
    pub lr_per_layer: Vec<f64>,
    /// Rate for the joint modes; falls back to `lr_per_layer[0]`.
    #[serde(default)]
    pub joint_lr: Option<f64>,
    pub lambda: Vec<f64>,
    pub mode: BpMode,
    #[serde(default)]
    pub init: BpInit,
    #[serde(default)]
    pub clip_range: Option<(f64, f64)>,
    /// Build targets with the trace's own scaling instead of raw masks.
    #[serde(default)]
    pub scaled_targets: bool,
}

/// Rates searched by [`calibrate_rates`].
pub const RATE_GRID: [f64; 13] = [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0];

impl BackProjectionConfig {
    /// 20 steps, rates 300 then 30 for deeper layers, unit λ, shared `x*`.
    pub fn default_for(hidden_layers: usize) -> Self {
        Self {
            steps: 20,
            lr_per_layer: (0..hidden_layers).map(|i| if i == 0 { 300.0 } else { 30.0 }).collect(),
            joint_lr: None,
            lambda: vec![1.0; hidden_layers],
            mode: BpMode::JointShared,
            init: BpInit::CopyOfX,
            clip_range: None,
            scaled_targets: false,
        }
    }

    pub fn validate(&self, hidden_layers: usize) -> Result<()> {
        if self.lambda.len() != hidden_layers {
            return Err(Error::Config(format!(
                "{} lambda weights for {hidden_layers} hidden layers",
                self.lambda.len()
            )));
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda weights must be finite and >= 0".into()));
        }
        if self.lr_per_layer.len() != hidden_layers {
            return Err(Error::Config(format!(
                "{} learning rates for {hidden_layers} hidden layers",
                self.lr_per_layer.len()
            )));
        }
        if self
            .lr_per_layer
            .iter()
            .chain(self.joint_lr.iter())
            .any(|r| !(*r > 0.0 && r.is_finite()))
        {
            return Err(Error::Config("learning rates must be finite and > 0".into()));
        }
        if let Some((lo, hi)) = self.clip_range {
            if !(lo <= hi) {
                return Err(Error::Config(format!("clip range ({lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }

    fn joint_rate(&self) -> f64 {
        self.joint_lr.unwrap_or(self.lr_per_layer[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackProjectionResult {
    /// One tensor per hidden layer, or a single shared tensor.
    pub x_star: Vec<Tensor2D>,
    /// Loss before the first step followed by the loss after every step.
    pub loss_history: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Per-sample losses before and after optimisation.
    pub initial_row_losses: Vec<f64>,
    pub final_row_losses: Vec<f64>,
}

impl BackProjectionResult {
    /// `(initial − final) / initial` per sample; samples with zero initial loss give 0.
    pub fn relative_reductions(&self) -> Vec<f64> {
        self.initial_row_losses
            .iter()
            .zip(&self.final_row_losses)
            .map(|(&i, &f)| if i > 0.0 { (i - f) / i } else { 0.0 })
            .collect()
    }
}

/// Noisy hidden activations `f̃^(i)(x)` for every hidden layer.
///
/// With `scaled = false` masks are applied raw (no inverse scaling); otherwise
/// the trace's own scaling is used.
pub fn bp_target(model: &MlpModel, x: &Tensor2D, masks: &MaskTrace, scaled: bool) -> Result<Vec<Tensor2D>> {
    let trace = if scaled {
        forward(model, x, Some(masks))?
    } else {
        forward(model, x, Some(&masks.clone().with_scaling(Scaling::Off)))?
    };
    Ok(trace.activations)
}

fn check_targets(model: &MlpModel, targets: &[Tensor2D], lambda: &[f64]) -> Result<()> {
    let widths = model.hidden_widths();
    if targets.len() != widths.len() || lambda.len() != widths.len() {
        return Err(Error::Config(format!(
            "{} targets and {} lambda weights for {} hidden layers",
            targets.len(),
            lambda.len(),
            widths.len()
        )));
    }
    for (i, (t, w)) in targets.iter().zip(widths).enumerate() {
        if t.cols() != w {
            return Err(Error::Shape(format!("target {i} has {} columns, layer has {w}", t.cols())));
        }
    }
    Ok(())
}

/// Per-row `Σ_{i ∈ layers} λ_i |f^(i)(x*) − t_i|²` on the clean chain.
fn row_terms(model: &MlpModel, x_star: &Tensor2D, targets: &[Tensor2D], lambda: &[f64], layers: &[usize]) -> Result<Vec<f64>> {
    let depth = layers.iter().max().map_or(0, |m| m + 1);
    let (_, acts) = hidden_forward(model, x_star, depth)?;
    let mut rows = vec![0.0; x_star.rows()];
    for &i in layers {
        if targets[i].rows() != x_star.rows() {
            return Err(Error::Shape(format!(
                "target {i} has {} rows, x* has {}",
                targets[i].rows(),
                x_star.rows()
            )));
        }
        let diff = acts[i].sub(&targets[i])?;
        for (acc, sq) in rows.iter_mut().zip(diff.row_sq_norms()) {
            *acc += lambda[i] * sq;
        }
    }
    Ok(rows)
}

fn mode_layers(mode: BpMode, hidden: usize, slot: usize) -> Vec<usize> {
    match mode {
        BpMode::JointShared => (0..hidden).collect(),
        BpMode::JointDistinct | BpMode::PerLayer => vec![slot],
    }
}

fn check_x_star_count(mode: BpMode, count: usize, hidden: usize) -> Result<()> {
    let expected = if mode == BpMode::JointShared { 1 } else { hidden };
    if count == expected {
        Ok(())
    } else {
        Err(Error::Config(format!("{mode:?} needs {expected} x* tensors, got {count}")))
    }
}

fn per_row_losses(model: &MlpModel, x_star: &[Tensor2D], targets: &[Tensor2D], lambda: &[f64], mode: BpMode) -> Result<Vec<f64>> {
    check_targets(model, targets, lambda)?;
    let hidden = model.hidden_layers();
    check_x_star_count(mode, x_star.len(), hidden)?;
    let mut total = vec![0.0; x_star[0].rows()];
    for (slot, xs) in x_star.iter().enumerate() {
        let rows = row_terms(model, xs, targets, lambda, &mode_layers(mode, hidden, slot))?;
        if rows.len() != total.len() {
            return Err(Error::Shape("x* tensors differ in batch size".into()));
        }
        for (t, r) in total.iter_mut().zip(rows) {
            *t += r;
        }
    }
    Ok(total)
}

/// Back-projection loss summed over the batch.
pub fn bp_loss(model: &MlpModel, x_star: &[Tensor2D], targets: &[Tensor2D], lambda: &[f64], mode: BpMode) -> Result<f64> {
    Ok(per_row_losses(model, x_star, targets, lambda, mode)?.iter().sum())
}

/// Gradient with respect to `x_star` of the loss terms listed in `layers`,
/// taken through the clean chain (`rect'(0) = 0`).
pub fn bp_input_gradient(
    model: &MlpModel,
    x_star: &Tensor2D,
    targets: &[Tensor2D],
    lambda: &[f64],
    layers: &[usize],
) -> Result<Tensor2D> {
    check_targets(model, targets, lambda)?;
    let hidden = model.hidden_layers();
    if let Some(&bad) = layers.iter().find(|&&l| l >= hidden) {
        return Err(Error::Config(format!("layer {bad} is not a hidden layer")));
    }
    let Some(depth) = layers.iter().max().map(|m| m + 1) else {
        return Ok(Tensor2D::zeros(x_star.rows(), x_star.cols()));
    };
    let (pres, acts) = hidden_forward(model, x_star, depth)?;
    let mut d_act = Tensor2D::zeros(x_star.rows(), acts[depth - 1].cols());
    for k in (0..depth).rev() {
        if layers.contains(&k) {
            let residual = acts[k].sub(&targets[k])?.scale(2.0 * lambda[k])?;
            d_act = d_act.add(&residual)?;
        }
        let masked: Vec<f64> = d_act
            .data()
            .iter()
            .zip(pres[k].data())
            .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
            .collect();
        let d_pre = Tensor2D::from_parts(d_act.rows(), d_act.cols(), masked);
        d_act = d_pre.matmul_t(model.layers()[k].weights())?;
    }
    Ok(d_act)
}

/// Runs `config.steps` gradient-descent updates on `x*`, starting from `x`.
pub fn backproject(model: &MlpModel, x: &Tensor2D, masks: &MaskTrace, config: &BackProjectionConfig) -> Result<BackProjectionResult> {
    let hidden = model.hidden_layers();
    if hidden == 0 {
        return Err(Error::Config("back-projection needs at least one hidden layer".into()));
    }
    config.validate(hidden)?;
    let targets = bp_target(model, x, masks, config.scaled_targets)?;
    let mut x_star = match config.mode {
        BpMode::JointShared => vec![x.clone()],
        BpMode::JointDistinct | BpMode::PerLayer => vec![x.clone(); hidden],
    };
    let initial_rows = per_row_losses(model, &x_star, &targets, &config.lambda, config.mode)?;
    let initial_loss: f64 = initial_rows.iter().sum();
    let mut loss_history = Vec::with_capacity(config.steps + 1);
    loss_history.push(initial_loss);
    let mut final_rows = initial_rows.clone();

    for step in 0..config.steps {
        let diverged = |e: Error| Error::Numeric(format!("back-projection diverged at step {step}: {e}"));
        for (slot, xs) in x_star.iter_mut().enumerate() {
            let layers = mode_layers(config.mode, hidden, slot);
            let grad = bp_input_gradient(model, xs, &targets, &config.lambda, &layers).map_err(diverged)?;
            let lr = match config.mode {
                BpMode::PerLayer => config.lr_per_layer[slot],
                BpMode::JointDistinct | BpMode::JointShared => config.joint_rate(),
            };
            let mut next = xs.sub(&grad.scale(lr).map_err(diverged)?).map_err(diverged)?;
            if let Some((lo, hi)) = config.clip_range {
                next.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            }
            *xs = next;
        }
        final_rows = per_row_losses(model, &x_star, &targets, &config.lambda, config.mode).map_err(diverged)?;
        let loss: f64 = final_rows.iter().sum();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("back-projection loss became non-finite at step {step}")));
        }
        loss_history.push(loss);
    }
    let final_loss = *loss_history.last().expect("initial loss recorded");
    Ok(BackProjectionResult {
        x_star,
        loss_history,
        initial_loss,
        final_loss,
        initial_row_losses: initial_rows,
        final_row_losses: final_rows,
    })
}

/// Grid-searches learning rates on a probe batch, minimising the final loss.
///
/// `per_layer` picks one rate per hidden layer (each layer's term depends only
/// on its own `x^(i)*`); the joint modes pick one shared rate. Rates that make
/// the optimisation diverge are skipped.
pub fn calibrate_rates(
    model: &MlpModel,
    probe_x: &Tensor2D,
    masks: &MaskTrace,
    config: &BackProjectionConfig,
    grid: &[f64],
) -> Result<BackProjectionConfig> {
    let hidden = model.hidden_layers();
    config.validate(hidden)?;
    let targets = bp_target(model, probe_x, masks, config.scaled_targets)?;
    let mut best: Vec<Option<(f64, f64)>> = vec![None; hidden];
    let mut best_joint: Option<(f64, f64)> = None;
    for &rate in grid {
        let trial = BackProjectionConfig {
            lr_per_layer: vec![rate; hidden],
            joint_lr: Some(rate),
            ..config.clone()
        };
        let Ok(result) = backproject(model, probe_x, masks, &trial) else {
            continue;
        };
        if config.mode == BpMode::PerLayer {
            for (i, b) in best.iter_mut().enumerate() {
                let term: f64 = row_terms(model, &result.x_star[i], &targets, &config.lambda, &[i])?.iter().sum();
                if b.is_none_or(|(l, _)| term < l) {
                    *b = Some((term, rate));
                }
            }
        } else if best_joint.is_none_or(|(l, _)| result.final_loss < l) {
            best_joint = Some((result.final_loss, rate));
        }
    }
    let none_converged = || Error::Numeric("every calibration rate diverged".into());
    let mut tuned = config.clone();
    if config.mode == BpMode::PerLayer {
        tuned.lr_per_layer = best
            .into_iter()
            .map(|b| b.map(|(_, r)| r).ok_or_else(none_converged))
            .collect::<Result<_>>()?;
    } else {
        let (_, rate) = best_joint.ok_or_else(none_converged)?;
        tuned.joint_lr = Some(rate);
    }
    Ok(tuned)
}
