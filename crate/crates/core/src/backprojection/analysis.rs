//! How likely is it that one input reproduces the noisy activations of every
//! layer at once? Only when the mask leaves every active unit untouched, which
//! happens with probability `p_keep^(d·s)`.

use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor2D};
use crate::network::{hidden_forward, MlpModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskIdentity {
    pub probability: f64,
    /// Exact even when `probability` underflows; `-inf` when the probability is 0.
    pub log10: f64,
}

/// `p_keep^(d·s)` computed in the log domain.
pub fn mask_identity_probability(p_keep: f64, d: usize, s: f64) -> Result<MaskIdentity> {
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(Error::Domain(format!("keep probability {p_keep} outside [0, 1]")));
    }
    if d == 0 {
        return Err(Error::Domain("unit count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("sparsity {s} outside [0, 1]")));
    }
    let exponent = d as f64 * s;
    if exponent == 0.0 || p_keep == 1.0 {
        return Ok(MaskIdentity {
            probability: 1.0,
            log10: 0.0,
        });
    }
    if p_keep == 0.0 {
        return Ok(MaskIdentity {
            probability: 0.0,
            log10: f64::NEG_INFINITY,
        });
    }
    let log10 = exponent * p_keep.log10();
    Ok(MaskIdentity {
        probability: 10f64.powf(log10),
        log10,
    })
}

/// Fraction of sampled masks that keep all of the first `active_units` positions.
pub fn mask_identity_monte_carlo(
    p_keep: f64,
    active_units: usize,
    total_units: usize,
    trials: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(Error::Domain(format!("keep probability {p_keep} outside [0, 1]")));
    }
    if active_units > total_units || trials == 0 {
        return Err(Error::Domain(format!(
            "need active <= total and trials >= 1 (active={active_units}, total={total_units}, trials={trials})"
        )));
    }
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut all_kept = true;
        for j in 0..total_units {
            let kept = stream.bernoulli_one(p_keep);
            if j < active_units && !kept {
                all_kept = false;
            }
        }
        hits += usize::from(all_kept);
    }
    Ok(hits as f64 / trials as f64)
}

/// Mean fraction of strictly positive rect outputs of hidden layer `layer`
/// (0-based) under the clean forward pass.
pub fn mean_sparsity(model: &MlpModel, x: &Tensor2D, layer: usize) -> Result<f64> {
    if layer >= model.hidden_layers() {
        return Err(Error::Config(format!(
            "layer {layer} is not one of the {} hidden layers",
            model.hidden_layers()
        )));
    }
    let (pres, _) = hidden_forward(model, x, layer + 1)?;
    let pre = &pres[layer];
    if pre.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    Ok(pre.data().iter().filter(|&&h| h > 0.0).count() as f64 / pre.len() as f64)
}
