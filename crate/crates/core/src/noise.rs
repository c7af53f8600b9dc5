//! Corruption schemes applied to the input and hidden layers.
//!
//! All probabilities are DROP probabilities: a mask entry is 0 with
//! probability `p` and 1 (keep) otherwise. Slot 0 of a [`MaskTrace`] is the
//! input layer; slots `1..=H` are the hidden layers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{RngStream, Tensor2D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Kept units are multiplied by `1 / (1 - level)` while training.
    #[default]
    TrainTimeInverse,
    /// Raw masks while training; evaluation multiplies by `1 - p`.
    TestTime,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseVariant {
    None,
    Dropout {
        p_input: f64,
        p_hidden: f64,
    },
    /// Per (layer, sample) level `ρ ~ U(0, p_max)` shared by every unit of the layer.
    RandomDropout {
        p_max_input: f64,
        p_max_hidden: f64,
    },
    /// Hidden pre-activations drawn from `Normal(Σ s_i, Σ s_i²)` with
    /// `s_i = a_i w_i`; the input layer may still use plain dropout.
    GaussianMatched {
        #[serde(default)]
        p_input: f64,
        /// Replaces the input-dependent standard deviation with a constant.
        #[serde(default)]
        sigma: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScheme {
    pub variant: NoiseVariant,
    #[serde(default)]
    pub scaling: Scaling,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} must lie in [0, 1)")))
    }
}

impl NoiseScheme {
    pub fn none() -> Self {
        Self {
            variant: NoiseVariant::None,
            scaling: Scaling::default(),
        }
    }

    pub fn dropout(p_input: f64, p_hidden: f64) -> Self {
        Self {
            variant: NoiseVariant::Dropout { p_input, p_hidden },
            scaling: Scaling::default(),
        }
    }

    pub fn random_dropout(p_max_input: f64, p_max_hidden: f64) -> Self {
        Self {
            variant: NoiseVariant::RandomDropout {
                p_max_input,
                p_max_hidden,
            },
            scaling: Scaling::default(),
        }
    }

    pub fn gaussian_matched(p_input: f64) -> Self {
        Self {
            variant: NoiseVariant::GaussianMatched {
                p_input,
                sigma: None,
            },
            scaling: Scaling::default(),
        }
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn is_none(&self) -> bool {
        matches!(self.variant, NoiseVariant::None)
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            NoiseVariant::None => Ok(()),
            NoiseVariant::Dropout { p_input, p_hidden } => {
                check_prob("p_input", p_input)?;
                check_prob("p_hidden", p_hidden)
            }
            NoiseVariant::RandomDropout {
                p_max_input,
                p_max_hidden,
            } => {
                check_prob("p_max_input", p_max_input)?;
                check_prob("p_max_hidden", p_max_hidden)?;
                if self.scaling == Scaling::TestTime {
                    return Err(Error::Config(
                        "random dropout needs train_time_inverse or off scaling: \
                         the per-sample level is unknown at evaluation"
                            .into(),
                    ));
                }
                Ok(())
            }
            NoiseVariant::GaussianMatched { p_input, sigma } => {
                check_prob("p_input", p_input)?;
                match sigma {
                    Some(s) if !(s >= 0.0 && s.is_finite()) => {
                        Err(Error::Config(format!("sigma override {s} must be finite and >= 0")))
                    }
                    _ => Ok(()),
                }
            }
        }
    }

    /// Per-slot multipliers applied to outgoing activations at evaluation time.
    /// Only `test_time` scaling produces factors other than 1.
    pub fn eval_factors(&self, hidden_layers: usize) -> Vec<f64> {
        let mut f = vec![1.0; hidden_layers + 1];
        if self.scaling != Scaling::TestTime {
            return f;
        }
        match self.variant {
            NoiseVariant::Dropout { p_input, p_hidden } => {
                f[0] = 1.0 - p_input;
                for v in &mut f[1..] {
                    *v = 1.0 - p_hidden;
                }
            }
            NoiseVariant::GaussianMatched { p_input, .. } => f[0] = 1.0 - p_input,
            NoiseVariant::None | NoiseVariant::RandomDropout { .. } => {}
        }
        f
    }
}

/// Mask and level for one layer slot of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    /// `batch x width`, entries in {0, 1}.
    pub mask: Tensor2D,
    /// `batch x 1`, the drop level each sample row was drawn with.
    pub level: Tensor2D,
}

/// Concrete noise sampled for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTrace {
    layers: Vec<LayerNoise>,
    scaling: Scaling,
    /// Standard-normal draws per hidden layer for Gaussian-matched noise.
    gaussian: Vec<Option<Tensor2D>>,
    sigma_override: Option<f64>,
}

fn check_level(level: &Tensor2D, batch: usize) -> Result<()> {
    if level.shape() != (batch, 1) {
        return Err(Error::Shape(format!(
            "level must be {batch}x1, got {}x{}",
            level.rows(),
            level.cols()
        )));
    }
    if let Some(&l) = level.data().iter().find(|&&l| !(0.0..1.0).contains(&l)) {
        return Err(Error::Domain(format!("drop level {l} outside [0, 1)")));
    }
    Ok(())
}

impl MaskTrace {
    pub fn new(layers: Vec<LayerNoise>, scaling: Scaling) -> Result<Self> {
        let hidden = layers.len().saturating_sub(1);
        Self::with_gaussian(layers, scaling, vec![None; hidden], None)
    }

    pub fn with_gaussian(
        layers: Vec<LayerNoise>,
        scaling: Scaling,
        gaussian: Vec<Option<Tensor2D>>,
        sigma_override: Option<f64>,
    ) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Shape("a mask trace needs at least the input slot".into()));
        };
        let batch = first.mask.rows();
        for (i, l) in layers.iter().enumerate() {
            if l.mask.rows() != batch {
                return Err(Error::Shape(format!(
                    "slot {i} mask has {} rows, expected {batch}",
                    l.mask.rows()
                )));
            }
            if l.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::Domain(format!("slot {i} mask has entries outside {{0, 1}}")));
            }
            check_level(&l.level, batch)?;
        }
        if gaussian.len() != layers.len() - 1 {
            return Err(Error::Shape(format!(
                "{} gaussian slots for {} hidden layers",
                gaussian.len(),
                layers.len() - 1
            )));
        }
        for (k, z) in gaussian.iter().enumerate() {
            if let Some(z) = z {
                if z.shape() != layers[k + 1].mask.shape() {
                    return Err(Error::Shape(format!("gaussian draws for hidden layer {k} misshaped")));
                }
            }
        }
        Ok(Self {
            layers,
            scaling,
            gaussian,
            sigma_override,
        })
    }

    /// Identity corruption: all-ones masks, zero levels.
    pub fn all_ones(widths: &[usize], batch: usize, scaling: Scaling) -> Self {
        let layers = widths
            .iter()
            .map(|&w| LayerNoise {
                mask: Tensor2D::ones(batch, w),
                level: Tensor2D::zeros(batch, 1),
            })
            .collect::<Vec<_>>();
        let hidden = widths.len().saturating_sub(1);
        Self {
            layers,
            scaling,
            gaussian: vec![None; hidden],
            sigma_override: None,
        }
    }

    pub fn batch(&self) -> usize {
        self.layers[0].mask.rows()
    }

    pub fn slots(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.mask.cols()).collect()
    }

    pub fn layer(&self, slot: usize) -> &LayerNoise {
        &self.layers[slot]
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn gaussian(&self, hidden: usize) -> Option<&Tensor2D> {
        self.gaussian.get(hidden).and_then(Option::as_ref)
    }

    pub fn sigma_override(&self) -> Option<f64> {
        self.sigma_override
    }

    /// Effective per-entry multiplier `mask * scale` for a slot.
    pub fn multiplier(&self, slot: usize) -> Result<Tensor2D> {
        let l = &self.layers[slot];
        mask_multiplier(&l.mask, &l.level, self.scaling)
    }
}

fn mask_multiplier(mask: &Tensor2D, level: &Tensor2D, scaling: Scaling) -> Result<Tensor2D> {
    check_level(level, mask.rows())?;
    match scaling {
        Scaling::TrainTimeInverse => {
            let factors: Vec<f64> = level.data().iter().map(|l| 1.0 / (1.0 - l)).collect();
            mask.scale_rows(&factors)
        }
        Scaling::TestTime | Scaling::Off => Ok(mask.clone()),
    }
}

/// Masks (and, for `train_time_inverse`, rescales per sample row) a batch of activations.
pub fn apply_mask(acts: &Tensor2D, mask: &Tensor2D, level: &Tensor2D, scaling: Scaling) -> Result<Tensor2D> {
    if acts.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "activations {:?} vs mask {:?}",
            acts.shape(),
            mask.shape()
        )));
    }
    acts.mul(&mask_multiplier(mask, level, scaling)?)
}

fn slot_probability(variant: &NoiseVariant, slot: usize) -> f64 {
    match *variant {
        NoiseVariant::None => 0.0,
        NoiseVariant::Dropout { p_input, p_hidden } => {
            if slot == 0 {
                p_input
            } else {
                p_hidden
            }
        }
        NoiseVariant::RandomDropout {
            p_max_input,
            p_max_hidden,
        } => {
            if slot == 0 {
                p_max_input
            } else {
                p_max_hidden
            }
        }
        NoiseVariant::GaussianMatched { p_input, .. } => {
            if slot == 0 {
                p_input
            } else {
                0.0
            }
        }
    }
}

fn sample_layer(variant: &NoiseVariant, slot: usize, width: usize, batch: usize, stream: &mut RngStream) -> LayerNoise {
    let p = slot_probability(variant, slot);
    let random_level = matches!(variant, NoiseVariant::RandomDropout { .. });
    let mut mask = Vec::with_capacity(batch * width);
    let mut level = Vec::with_capacity(batch);
    for _ in 0..batch {
        // One level per (layer, sample), shared by all of the layer's units.
        let rho = if random_level {
            stream.uniform_one(0.0, p)
        } else {
            p
        };
        level.push(rho);
        mask.extend((0..width).map(|_| if stream.bernoulli_one(rho) { 0.0 } else { 1.0 }));
    }
    LayerNoise {
        mask: Tensor2D::from_parts(batch, width, mask),
        level: Tensor2D::from_parts(batch, 1, level),
    }
}

/// Draws the corruption for one batch.
///
/// `layer_widths` lists the input width followed by every hidden width.
pub fn sample_mask_trace(
    scheme: &NoiseScheme,
    layer_widths: &[usize],
    batch: usize,
    stream: &mut RngStream,
) -> Result<MaskTrace> {
    scheme.validate()?;
    if layer_widths.is_empty() || layer_widths.contains(&0) {
        return Err(Error::Config(format!("invalid layer widths {layer_widths:?}")));
    }
    let gaussian_hidden = matches!(scheme.variant, NoiseVariant::GaussianMatched { .. });
    let mut layers = Vec::with_capacity(layer_widths.len());
    let mut gaussian = Vec::with_capacity(layer_widths.len() - 1);
    for (slot, &w) in layer_widths.iter().enumerate() {
        layers.push(sample_layer(&scheme.variant, slot, w, batch, stream));
        if slot > 0 {
            gaussian.push(gaussian_hidden.then(|| {
                let z = (0..batch * w).map(|_| stream.standard_normal()).collect();
                Tensor2D::from_parts(batch, w, z)
            }));
        }
    }
    let sigma_override = match scheme.variant {
        NoiseVariant::GaussianMatched { sigma, .. } => sigma,
        _ => None,
    };
    MaskTrace::with_gaussian(layers, scheme.scaling, gaussian, sigma_override)
}

/// Draws `h_j ~ Normal(Σ_i x_i w_ij, Σ_i (x_i w_ij)²) + b_j` for one sample row.
pub fn gaussian_matched_pre_activation(
    x_row: &Tensor2D,
    weights: &Tensor2D,
    bias: &Tensor2D,
    stream: &mut RngStream,
) -> Result<Tensor2D> {
    if x_row.rows() != 1 {
        return Err(Error::Shape(format!("expected one sample row, got {}", x_row.rows())));
    }
    if bias.shape() != (1, weights.cols()) {
        return Err(Error::Shape(format!(
            "bias {:?} does not match weights {:?}",
            bias.shape(),
            weights.shape()
        )));
    }
    let mean = x_row.matmul(weights)?;
    let z: Vec<f64> = (0..weights.cols()).map(|_| stream.standard_normal()).collect();
    let z = Tensor2D::from_parts(1, weights.cols(), z);
    let (pre, _) = crate::network::gaussian_pre_activation(x_row, weights, bias, &mean, &z, None)?;
    Ok(pre)
}

/// Fraction of dropped hidden units per sampled mask row.
pub fn drop_proportions(scheme: &NoiseScheme, layer_width: usize, trials: usize, stream: &mut RngStream) -> Result<Vec<f64>> {
    scheme.validate()?;
    if layer_width == 0 {
        return Err(Error::Config("layer width must be positive".into()));
    }
    let layer = sample_layer(&scheme.variant, 1, layer_width, trials, stream);
    Ok((0..trials)
        .map(|r| {
            let dropped = layer.mask.row(r).iter().filter(|&&m| m == 0.0).count();
            dropped as f64 / layer_width as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    /// Probability density per bin (mass / bin width).
    pub densities: Vec<f64>,
}

impl Histogram {
    /// Bins `values` on `[lo, hi]`; the last bin is closed. Values outside the
    /// range carry no mass in any bin.
    pub fn from_values(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) || values.is_empty() {
            return Err(Error::Config(format!(
                "histogram needs bins > 0, hi > lo and data (bins={bins}, [{lo}, {hi}])"
            )));
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in values {
            if v < lo || v > hi {
                continue;
            }
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let n = values.len() as f64;
        let densities = counts.iter().map(|&c| c as f64 / (n * width)).collect();
        Ok(Self { edges, densities })
    }

    pub fn masses(&self) -> Vec<f64> {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,density\n");
        for (d, e) in self.densities.iter().zip(self.edges.windows(2)) {
            let _ = writeln!(out, "{},{},{}", e[0], e[1], d);
        }
        out
    }
}

/// Empirical density of the per-sample dropped fraction on `[0, 1]`.
pub fn drop_proportion_histogram(
    scheme: &NoiseScheme,
    layer_width: usize,
    trials: usize,
    bins: usize,
    stream: &mut RngStream,
) -> Result<Histogram> {
    drop_proportion_histogram_in(scheme, layer_width, trials, bins, (0.0, 1.0), stream)
}

pub fn drop_proportion_histogram_in(
    scheme: &NoiseScheme,
    layer_width: usize,
    trials: usize,
    bins: usize,
    range: (f64, f64),
    stream: &mut RngStream,
) -> Result<Histogram> {
    if bins < 2 || trials < bins {
        return Err(Error::Config(format!("need trials >= bins >= 2 (trials={trials}, bins={bins})")));
    }
    let props = drop_proportions(scheme, layer_width, trials, stream)?;
    Histogram::from_values(&props, bins, range.0, range.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kept_fraction(t: &MaskTrace, slot: usize) -> f64 {
        t.layer(slot).mask.mean().unwrap()
    }

    #[test]
    fn none_scheme_gives_identity_masks() {
        let mut s = RngStream::new(1, 1);
        let t = sample_mask_trace(&NoiseScheme::none(), &[5, 4, 3], 6, &mut s).unwrap();
        assert_eq!(t, MaskTrace::all_ones(&[5, 4, 3], 6, Scaling::TrainTimeInverse));
    }

    #[test]
    fn dropout_keeps_half() {
        let n = 100_000;
        let mut s = RngStream::new(2, 1);
        let t = sample_mask_trace(&NoiseScheme::dropout(0.0, 0.5), &[1, n], 1, &mut s).unwrap();
        let bound = 3.0 * (0.25 / n as f64).sqrt();
        assert!((kept_fraction(&t, 1) - 0.5).abs() <= bound);
        assert_eq!(t.layer(1).level.data(), &[0.5]);
        assert_eq!(kept_fraction(&t, 0), 1.0);
    }

    #[test]
    fn random_dropout_mean_is_half_of_max() {
        let mut s = RngStream::new(3, 1);
        let t = sample_mask_trace(&NoiseScheme::random_dropout(0.0, 0.8), &[1, 20], 100_000, &mut s).unwrap();
        let dropped = 1.0 - kept_fraction(&t, 1);
        assert!((dropped - 0.4).abs() < 0.01, "{dropped}");
        let levels = t.layer(1).level.data();
        assert!(levels.iter().all(|&r| (0.0..0.8).contains(&r)));
    }

    #[test]
    fn apply_mask_cases() {
        let acts = Tensor2D::from_rows(&[[2.0, 4.0]]).unwrap();
        for mode in [Scaling::TrainTimeInverse, Scaling::TestTime, Scaling::Off] {
            let out = apply_mask(&acts, &Tensor2D::ones(1, 2), &Tensor2D::zeros(1, 1), mode).unwrap();
            assert_eq!(out, acts);
        }
        let out = apply_mask(
            &acts,
            &Tensor2D::from_rows(&[[1.0, 0.0]]).unwrap(),
            &Tensor2D::filled(1, 1, 0.5),
            Scaling::TrainTimeInverse,
        )
        .unwrap();
        assert_eq!(out.data(), &[4.0, 0.0]);
        let err = apply_mask(&acts, &Tensor2D::ones(1, 2), &Tensor2D::filled(1, 1, 1.0), Scaling::Off);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_scaling_is_unbiased() {
        let acts = Tensor2D::from_rows(&[[0.3, 1.7, 2.0, 0.9]]).unwrap();
        let n = 100_000;
        let mut s = RngStream::new(4, 0);
        let scheme = NoiseScheme::dropout(0.0, 0.5);
        let trace = sample_mask_trace(&scheme, &[1, 4], n, &mut s).unwrap();
        let l = trace.layer(1);
        let mut sums = [0.0; 4];
        for r in 0..n {
            let m = Tensor2D::new(1, 4, l.mask.row(r).to_vec()).unwrap();
            let lv = Tensor2D::filled(1, 1, 0.5);
            let out = apply_mask(&acts, &m, &lv, Scaling::TrainTimeInverse).unwrap();
            for (acc, v) in sums.iter_mut().zip(out.data()) {
                *acc += v;
            }
        }
        for (sum, a) in sums.iter().zip(acts.data()) {
            assert!((sum / n as f64 - a).abs() <= 0.01 * a, "{} vs {a}", sum / n as f64);
        }
    }

    #[test]
    fn gaussian_matched_degenerate_and_moments() {
        let mut s = RngStream::new(5, 0);
        let w = Tensor2D::ones(2, 1);
        let b = Tensor2D::filled(1, 1, 0.25);
        let zero = gaussian_matched_pre_activation(&Tensor2D::zeros(1, 2), &w, &b, &mut s).unwrap();
        assert_eq!(zero.data(), &[0.25]);

        let x = Tensor2D::from_rows(&[[3.0, 4.0]]).unwrap();
        let b0 = Tensor2D::zeros(1, 1);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_matched_pre_activation(&x, &w, &b0, &mut s).unwrap().data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 7.0).abs() < 0.05, "mean {mean}");
        assert!((var - 25.0).abs() < 0.8, "variance {var}");
    }

    #[test]
    fn histogram_of_no_noise_is_a_spike_at_zero() {
        let mut s = RngStream::new(6, 0);
        let h = drop_proportion_histogram(&NoiseScheme::none(), 100, 50, 10, &mut s).unwrap();
        let m = h.masses();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!(m[1..].iter().all(|&v| v == 0.0));
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,density\n"));
    }

    #[test]
    fn scheme_validation_and_parsing() {
        assert!(NoiseScheme::dropout(1.0, 0.5).validate().is_err());
        assert!(NoiseScheme::random_dropout(0.2, 0.5)
            .with_scaling(Scaling::TestTime)
            .validate()
            .is_err());
        let s: NoiseScheme = serde_json::from_str(
            r#"{"variant": {"kind": "dropout", "p_input": 0.2, "p_hidden": 0.5}, "scaling": "test_time"}"#,
        )
        .unwrap();
        assert_eq!(s, NoiseScheme::dropout(0.2, 0.5).with_scaling(Scaling::TestTime));
        assert_eq!(s.eval_factors(2), vec![0.8, 0.5, 0.5]);
        let bad = serde_json::from_str::<NoiseScheme>(
            r#"{"variant": {"kind": "dropout", "p_input": 0.2, "p_hiden": 0.5}}"#,
        );
        assert!(bad.is_err());
    }
}
