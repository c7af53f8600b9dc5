//! Training protocols.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, phase,
//! epoch, batch)`, so runs are reproducible bit-for-bit and the shuffling
//! order never depends on how many masks were sampled.

use std::fmt::Write as _;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::backprojection::{backproject, BackProjectionConfig, BpMode};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::linalg::{stream_id_for, RngStream, Tensor2D};
use crate::network::{backward, evaluate_scaled, forward, loss_ce, model_hash, MlpModel};
use crate::noise::{sample_mask_trace, NoiseScheme};

const KEY_INIT: u64 = 1;
const KEY_SHUFFLE: u64 = 2;
const KEY_MASKS: u64 = 3;
const KEY_BP_MASKS: u64 = 4;

const PHASE_MAIN: u64 = 0;
const PHASE_REFIT: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Noiseless minibatch SGD.
    Standard,
    /// Masks resampled for every batch.
    Noise,
    /// Clean epochs alternating with epochs on back-projected inputs.
    Backprojected,
}

fn default_true() -> bool {
    true
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    100
}
fn default_lr() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}
fn default_chunk() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub layer_dims: Vec<usize>,
    #[serde(default = "default_true")]
    pub hidden_bias: bool,
    pub protocol: Protocol,
    #[serde(default = "NoiseScheme::none")]
    pub scheme: NoiseScheme,
    #[serde(default)]
    pub bp_config: Option<BackProjectionConfig>,
    /// Total epochs; for the back-projected protocol a clean epoch and an `x*`
    /// epoch count as two.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub refit_epochs: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Samples back-projected together (each row is optimised independently).
    #[serde(default = "default_chunk")]
    pub bp_chunk: usize,
}

impl ExperimentConfig {
    pub fn new(layer_dims: Vec<usize>, protocol: Protocol, seed: u64) -> Self {
        Self {
            layer_dims,
            hidden_bias: true,
            protocol,
            scheme: NoiseScheme::none(),
            bp_config: None,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            seed,
            refit_epochs: 0,
            eval_every: 1,
            bp_chunk: default_chunk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.bp_chunk == 0 {
            return Err(Error::Config(
                "epochs, batch_size, eval_every and bp_chunk must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("layer_dims needs input and output sizes".into()));
        }
        self.scheme.validate()?;
        match self.protocol {
            Protocol::Standard if !self.scheme.is_none() => Err(Error::Config(
                "the standard protocol takes no noise scheme".into(),
            )),
            Protocol::Noise if self.scheme.is_none() => Err(Error::Config(
                "the noise protocol needs a dropout, random_dropout or gaussian_matched scheme".into(),
            )),
            Protocol::Backprojected => {
                let hidden = self.layer_dims.len() - 2;
                self.bp_config
                    .as_ref()
                    .ok_or_else(|| Error::Config("the backprojected protocol needs bp_config".into()))?
                    .validate(hidden)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochKind {
    Clean,
    Noisy,
    XStar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub kind: EpochKind,
    pub train_loss: f64,
    pub valid_error: Option<f64>,
    pub test_error: Option<f64>,
    /// Active-unit fraction per hidden layer on the validation (else test) set.
    pub sparsity: Vec<f64>,
}

/// Provenance of one `x*` generation round: regenerating with the same seed,
/// stream path and snapshot reproduces every row byte-for-byte. Row `i` of the
/// round's data comes from training sample `i` (repeated once per hidden layer
/// for the per-layer modes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XStarRound {
    pub epoch: usize,
    pub model_hash: String,
    /// Mask stream for chunk `c` is keyed by this path followed by `c`.
    pub mask_stream_path: Vec<u64>,
    pub chunk_size: usize,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch with the lowest validation error (earliest on ties), or the last
    /// epoch when nothing was validated.
    pub best_epoch: usize,
    pub best_model: MlpModel,
    pub final_model: MlpModel,
    pub xstar_rounds: Vec<XStarRound>,
}

impl TrainHistory {
    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    /// `epoch,train_loss,valid_error,test_error,sparsity_l1,...`; missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let layers = self.best_model.hidden_layers();
        let mut out = String::from("epoch,train_loss,valid_error,test_error");
        for l in 1..=layers {
            let _ = write!(out, ",sparsity_l{l}");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = write!(out, "{},{},{},{}", r.epoch, r.train_loss, opt(r.valid_error), opt(r.test_error));
            for l in 0..layers {
                let _ = write!(out, ",{}", opt(r.sparsity.get(l).copied()));
            }
            out.push('\n');
        }
        out
    }
}

/// Earliest epoch with the minimum validation error; the last epoch if none was validated.
pub fn best_epoch_of(records: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for r in records {
        if let Some(v) = r.valid_error {
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, r.epoch));
            }
        }
    }
    best.map(|(_, e)| e).or_else(|| records.last().map(|r| r.epoch))
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    phase: u64,
}

struct EvalSets<'a> {
    valid: Option<&'a Dataset>,
    test: Option<&'a Dataset>,
}

impl Runner<'_> {
    fn train_epoch(&self, model: &mut MlpModel, data: &Dataset, noise: Option<&NoiseScheme>, epoch: usize) -> Result<f64> {
        let cfg = self.config;
        let n = data.len();
        if n == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let order = RngStream::keyed(cfg.seed, &[KEY_SHUFFLE, self.phase, epoch as u64]).permutation(n);
        let widths = model.noise_widths();
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let at = |e: Error| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}"));
            let xb = data.features.select_rows(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let trace = match noise {
                Some(scheme) => {
                    let mut stream = RngStream::keyed(cfg.seed, &[KEY_MASKS, self.phase, epoch as u64, b as u64]);
                    let masks = sample_mask_trace(scheme, &widths, chunk.len(), &mut stream)?;
                    forward(model, &xb, Some(&masks)).map_err(at)?
                }
                None => forward(model, &xb, None).map_err(at)?,
            };
            let loss = loss_ce(&trace, &yb).map_err(at)?;
            let grads = backward(model, &trace, &yb).map_err(at)?;
            model.apply_gradients(&grads, cfg.lr).map_err(at)?;
            loss_sum += loss * chunk.len() as f64;
        }
        Ok(loss_sum / n as f64)
    }

    /// Back-projects every training row using a frozen snapshot of the model.
    fn generate_x_star(&self, snapshot: &MlpModel, data: &Dataset, epoch: usize) -> Result<(Dataset, XStarRound)> {
        let cfg = self.config;
        let bp = cfg.bp_config.as_ref().expect("validated");
        let widths = snapshot.noise_widths();
        let path = vec![KEY_BP_MASKS, self.phase, epoch as u64];
        let hidden = snapshot.hidden_layers();
        let copies = if bp.mode == BpMode::JointShared { 1 } else { hidden };
        let mut per_copy: Vec<Vec<Tensor2D>> = vec![Vec::new(); copies];
        let (mut init_sum, mut final_sum) = (0.0, 0.0);
        let idx: Vec<usize> = (0..data.len()).collect();
        for (c, chunk) in idx.chunks(cfg.bp_chunk).enumerate() {
            let mut key = path.clone();
            key.push(c as u64);
            let mut stream = RngStream::keyed(cfg.seed, &key);
            let masks = sample_mask_trace(&cfg.scheme, &widths, chunk.len(), &mut stream)?;
            let xc = data.features.select_rows(chunk)?;
            let result = backproject(snapshot, &xc, &masks, bp).map_err(|e| {
                Error::Numeric(format!(
                    "x* generation for samples {}..{} in epoch {epoch}: {e}",
                    chunk[0],
                    chunk[chunk.len() - 1] + 1
                ))
            })?;
            init_sum += result.initial_loss;
            final_sum += result.final_loss;
            for (bucket, xs) in per_copy.iter_mut().zip(result.x_star) {
                bucket.push(xs);
            }
        }
        let stacked: Vec<Tensor2D> = per_copy
            .iter()
            .map(|parts| Tensor2D::vstack(&parts.iter().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let features = Tensor2D::vstack(&stacked.iter().collect::<Vec<_>>())?;
        let labels = (0..copies).flat_map(|_| data.labels.iter().copied()).collect();
        let round = XStarRound {
            epoch,
            model_hash: model_hash(snapshot),
            mask_stream_path: path,
            chunk_size: cfg.bp_chunk,
            mean_initial_loss: init_sum / data.len() as f64,
            mean_final_loss: final_sum / data.len() as f64,
        };
        info!(
            "x* round at epoch {epoch}: snapshot {}, mean loss {:.6} -> {:.6}",
            &round.model_hash[..16],
            round.mean_initial_loss,
            round.mean_final_loss
        );
        Ok((
            Dataset::new(features, labels)?.with_image_shape(data.image_shape),
            round,
        ))
    }

    fn run(&self, mut model: MlpModel, train: &Dataset, eval: EvalSets<'_>, epochs: usize) -> Result<TrainHistory> {
        let cfg = self.config;
        let factors = match cfg.protocol {
            Protocol::Noise => cfg.scheme.eval_factors(model.hidden_layers()),
            Protocol::Standard | Protocol::Backprojected => vec![1.0; model.hidden_layers() + 1],
        };
        let evaluate_on = |m: &MlpModel, d: Option<&Dataset>| -> Result<Option<crate::network::Evaluation>> {
            match d {
                Some(d) if !d.is_empty() => Ok(Some(evaluate_scaled(m, &d.features, &d.labels, &factors)?)),
                _ => Ok(None),
            }
        };
        let mut records = Vec::with_capacity(epochs);
        let mut xstar_rounds = Vec::new();
        let mut best: Option<(f64, usize, MlpModel)> = None;
        for epoch in 0..epochs {
            let kind = match cfg.protocol {
                Protocol::Standard => EpochKind::Clean,
                Protocol::Noise => EpochKind::Noisy,
                Protocol::Backprojected if epoch % 2 == 0 => EpochKind::Clean,
                Protocol::Backprojected => EpochKind::XStar,
            };
            let train_loss = match kind {
                EpochKind::Clean => self.train_epoch(&mut model, train, None, epoch)?,
                EpochKind::Noisy => self.train_epoch(&mut model, train, Some(&cfg.scheme), epoch)?,
                EpochKind::XStar => {
                    let snapshot = model.clone();
                    let (x_star, round) = self.generate_x_star(&snapshot, train, epoch)?;
                    xstar_rounds.push(round);
                    self.train_epoch(&mut model, &x_star, None, epoch)?
                }
            };
            let evaluated = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == epochs;
            let (valid, test) = if evaluated {
                (evaluate_on(&model, eval.valid)?, evaluate_on(&model, eval.test)?)
            } else {
                (None, None)
            };
            let sparsity = valid
                .as_ref()
                .or(test.as_ref())
                .map(|e| e.sparsity.clone())
                .unwrap_or_default();
            let record = EpochRecord {
                epoch,
                kind,
                train_loss,
                valid_error: valid.map(|e| e.error_rate),
                test_error: test.map(|e| e.error_rate),
                sparsity,
            };
            debug!("{record:?}");
            if let Some(v) = record.valid_error {
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, model.clone()));
                }
            }
            records.push(record);
        }
        let (best_epoch, best_model) = match best {
            Some((_, e, m)) => (e, m),
            None => (epochs - 1, model.clone()),
        };
        Ok(TrainHistory {
            records,
            best_epoch,
            best_model,
            final_model: model,
            xstar_rounds,
        })
    }
}

fn initial_model(config: &ExperimentConfig) -> Result<MlpModel> {
    let mut stream = RngStream::keyed(config.seed, &[KEY_INIT]);
    MlpModel::init_with(&config.layer_dims, config.hidden_bias, &mut stream)
}

fn check_data(config: &ExperimentConfig, data: &Splits) -> Result<()> {
    let dims = config.layer_dims[0];
    let classes = *config.layer_dims.last().expect("validated");
    for (name, d) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if !d.is_empty() && d.dims() != dims {
            return Err(Error::Shape(format!("{name} data has {} features, model expects {dims}", d.dims())));
        }
        if d.classes() > classes {
            return Err(Error::Config(format!(
                "{name} data has {} classes, model outputs {classes}",
                d.classes()
            )));
        }
    }
    Ok(())
}

/// Runs whichever protocol the configuration names.
pub fn run_experiment(config: &ExperimentConfig, data: &Splits) -> Result<TrainHistory> {
    config.validate()?;
    check_data(config, data)?;
    let runner = Runner {
        config,
        phase: PHASE_MAIN,
    };
    let eval = EvalSets {
        valid: Some(&data.valid),
        test: Some(&data.test),
    };
    runner.run(initial_model(config)?, &data.train, eval, config.epochs)
}

fn expect_protocol(config: &ExperimentConfig, protocol: Protocol) -> Result<()> {
    if config.protocol == protocol {
        Ok(())
    } else {
        Err(Error::Config(format!("configuration names {:?}, not {protocol:?}", config.protocol)))
    }
}

pub fn train_standard(config: &ExperimentConfig, data: &Splits) -> Result<TrainHistory> {
    expect_protocol(config, Protocol::Standard)?;
    run_experiment(config, data)
}

pub fn train_with_noise(config: &ExperimentConfig, data: &Splits) -> Result<TrainHistory> {
    expect_protocol(config, Protocol::Noise)?;
    run_experiment(config, data)
}

pub fn train_backprojected(config: &ExperimentConfig, data: &Splits) -> Result<TrainHistory> {
    expect_protocol(config, Protocol::Backprojected)?;
    run_experiment(config, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitReport {
    pub best_epoch: usize,
    pub best_test_error: f64,
    /// Test error after every refit epoch.
    pub refit_test_errors: Vec<f64>,
    /// Mean and population standard deviation over the final half of the refit epochs.
    pub mean_test_error: f64,
    pub std_test_error: f64,
}

/// Number of trailing refit epochs averaged in the report.
pub fn report_window(refit_epochs: usize) -> usize {
    (refit_epochs / 2).max(1).min(refit_epochs)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Restores the best checkpoint, keeps training it on train+valid for
/// `refit_epochs`, and summarises the test error over the final half.
pub fn select_and_refit(history: &TrainHistory, config: &ExperimentConfig, data: &Splits) -> Result<(MlpModel, RefitReport)> {
    config.validate()?;
    let best = history
        .record(history.best_epoch)
        .ok_or_else(|| Error::State(format!("no checkpoint recorded for epoch {}", history.best_epoch)))?;
    let best_test_error = match best.test_error {
        Some(e) => e,
        None if !data.test.is_empty() => {
            evaluate_scaled(
                &history.best_model,
                &data.test.features,
                &data.test.labels,
                &config.scheme.eval_factors(history.best_model.hidden_layers()),
            )?
            .error_rate
        }
        None => return Err(Error::State("no test set to report on".into())),
    };
    if config.refit_epochs == 0 {
        return Ok((
            history.best_model.clone(),
            RefitReport {
                best_epoch: history.best_epoch,
                best_test_error,
                refit_test_errors: Vec::new(),
                mean_test_error: best_test_error,
                std_test_error: 0.0,
            },
        ));
    }
    let merged = data.train.concat(&data.valid)?;
    let refit_config = ExperimentConfig {
        eval_every: 1,
        ..config.clone()
    };
    let runner = Runner {
        config: &refit_config,
        phase: PHASE_REFIT,
    };
    let eval = EvalSets {
        valid: None,
        test: Some(&data.test),
    };
    let refit = runner.run(history.best_model.clone(), &merged, eval, config.refit_epochs)?;
    let errors: Vec<f64> = refit
        .records
        .iter()
        .map(|r| r.test_error.ok_or_else(|| Error::State("refit epoch without test error".into())))
        .collect::<Result<_>>()?;
    let window = &errors[errors.len() - report_window(errors.len())..];
    let (mean, std) = mean_std(window);
    Ok((
        refit.final_model,
        RefitReport {
            best_epoch: history.best_epoch,
            best_test_error,
            refit_test_errors: errors,
            mean_test_error: mean,
            std_test_error: std,
        },
    ))
}

/// Stream id used for the `x*` masks of one chunk; exposed for provenance checks.
pub fn x_star_mask_stream_id(round: &XStarRound, chunk: usize) -> u64 {
    let mut key = round.mask_stream_path.clone();
    key.push(chunk as u64);
    stream_id_for(&key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_blobs};

    fn blob_splits(dims: usize, classes: usize, per_class: usize, sep: f64, seed: u64) -> Splits {
        let data = synth_blobs(classes, per_class, dims, sep, &mut RngStream::new(seed, 0)).unwrap();
        split(&data, (0.6, 0.2, 0.2), &mut RngStream::new(seed, 1)).unwrap()
    }

    fn config(protocol: Protocol, epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            epochs,
            batch_size: 16,
            ..ExperimentConfig::new(vec![8, 16, 12, 3], protocol, 5)
        }
    }

    type Row = (usize, f64, Option<f64>, Option<f64>, Vec<f64>);

    fn strip(h: &TrainHistory) -> Vec<Row> {
        h.records
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.valid_error, r.test_error, r.sparsity.clone()))
            .collect()
    }

    #[test]
    fn separable_blobs_reach_zero_training_error() {
        let data = synth_blobs(2, 100, 6, 8.0, &mut RngStream::new(2, 0)).unwrap();
        // Oracle: nearest-centroid (a linear rule for two classes) separates the training set.
        let centroid = |c: usize| -> Vec<f64> {
            let rows: Vec<usize> = (0..data.len()).filter(|&r| data.labels[r] == c).collect();
            let sub = data.subset(&rows).unwrap();
            sub.features.sum_rows().scale(1.0 / rows.len() as f64).unwrap().into_data()
        };
        let (c0, c1) = (centroid(0), centroid(1));
        let d = |c: &[f64], r: usize| -> f64 { c.iter().zip(data.features.row(r)).map(|(a, b)| (a - b).powi(2)).sum() };
        assert!((0..data.len()).all(|r| (d(&c0, r) > d(&c1, r)) == (data.labels[r] == 1)));

        let splits = Splits {
            train: data.clone(),
            valid: data.clone(),
            test: data.clone(),
        };
        let cfg = ExperimentConfig {
            epochs: 20,
            batch_size: 20,
            ..ExperimentConfig::new(vec![6, 16, 2], Protocol::Standard, 1)
        };
        let h = train_standard(&cfg, &splits).unwrap();
        let train_error = crate::network::evaluate(&h.final_model, &data.features, &data.labels).unwrap().error_rate;
        assert_eq!(train_error, 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let splits = blob_splits(8, 3, 30, 3.0, 3);
        let cfg = ExperimentConfig {
            lr: 0.0,
            ..config(Protocol::Standard, 1)
        };
        let h = train_standard(&cfg, &splits).unwrap();
        let init = initial_model(&cfg).unwrap();
        assert_eq!(h.final_model, init);
        let e = crate::network::evaluate(&init, &splits.valid.features, &splits.valid.labels).unwrap();
        assert_eq!(h.records[0].valid_error, Some(e.error_rate));
    }

    #[test]
    fn runs_are_deterministic() {
        let splits = blob_splits(8, 3, 30, 3.0, 4);
        let cfg = config(Protocol::Standard, 3);
        let a = train_standard(&cfg, &splits).unwrap();
        let b = train_standard(&cfg, &splits).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("epoch,train_loss,valid_error,test_error,sparsity_l1,sparsity_l2\n"));
    }

    #[test]
    fn zero_noise_schemes_reproduce_the_baseline() {
        let splits = blob_splits(8, 3, 30, 3.0, 5);
        let base = train_standard(&config(Protocol::Standard, 3), &splits).unwrap();
        for scheme in [NoiseScheme::dropout(0.0, 0.0), NoiseScheme::random_dropout(0.0, 0.0)] {
            let cfg = ExperimentConfig {
                scheme,
                ..config(Protocol::Noise, 3)
            };
            let noisy = train_with_noise(&cfg, &splits).unwrap();
            assert_eq!(strip(&noisy), strip(&base));
            assert_eq!(noisy.final_model, base.final_model);
        }
    }

    #[test]
    fn zero_step_backprojection_replays_clean_training() {
        let splits = blob_splits(8, 3, 30, 3.0, 6);
        let base = train_standard(&config(Protocol::Standard, 4), &splits).unwrap();
        let mut bp = BackProjectionConfig::default_for(2);
        bp.steps = 0;
        let cfg = ExperimentConfig {
            scheme: NoiseScheme::dropout(0.2, 0.5),
            bp_config: Some(bp),
            ..config(Protocol::Backprojected, 4)
        };
        let h = train_backprojected(&cfg, &splits).unwrap();
        assert_eq!(strip(&h), strip(&base));
        assert_eq!(h.xstar_rounds.len(), 2);
        assert_eq!(h.records[1].kind, EpochKind::XStar);
    }

    #[test]
    fn identity_masks_replay_inputs_in_x_star_epochs() {
        let splits = blob_splits(8, 3, 30, 3.0, 7);
        let base = train_standard(&config(Protocol::Standard, 2), &splits).unwrap();
        let cfg = ExperimentConfig {
            bp_config: Some(BackProjectionConfig::default_for(2)),
            ..config(Protocol::Backprojected, 2)
        };
        let h = train_backprojected(&cfg, &splits).unwrap();
        assert_eq!(strip(&h), strip(&base));
        assert_eq!(h.xstar_rounds[0].mean_final_loss, 0.0);
    }

    #[test]
    fn x_star_rounds_are_traceable() {
        let splits = blob_splits(8, 3, 30, 3.0, 8);
        let cfg = ExperimentConfig {
            scheme: NoiseScheme::dropout(0.2, 0.5),
            bp_config: Some(BackProjectionConfig {
                joint_lr: Some(1.0),
                steps: 3,
                ..BackProjectionConfig::default_for(2)
            }),
            bp_chunk: 7,
            ..config(Protocol::Backprojected, 2)
        };
        let h = train_backprojected(&cfg, &splits).unwrap();
        let round = &h.xstar_rounds[0];
        assert_eq!(round.epoch, 1);
        // The snapshot is the model after the clean epoch.
        let mut clean_only = cfg.clone();
        clean_only.protocol = Protocol::Standard;
        clean_only.scheme = NoiseScheme::none();
        clean_only.bp_config = None;
        clean_only.epochs = 1;
        let after_clean = train_standard(&clean_only, &splits).unwrap().final_model;
        assert_eq!(round.model_hash, model_hash(&after_clean));

        // Regenerate the first chunk from the recorded provenance.
        let runner = Runner {
            config: &cfg,
            phase: PHASE_MAIN,
        };
        let (x_star, again) = runner.generate_x_star(&after_clean, &splits.train, 1).unwrap();
        assert_eq!(&again, round);
        let mut stream = RngStream::new(cfg.seed, x_star_mask_stream_id(round, 0));
        let masks = sample_mask_trace(&cfg.scheme, &after_clean.noise_widths(), 7, &mut stream).unwrap();
        let first = splits.train.features.select_rows(&(0..7).collect::<Vec<_>>()).unwrap();
        let r = backproject(&after_clean, &first, &masks, cfg.bp_config.as_ref().unwrap()).unwrap();
        assert_eq!(
            r.x_star[0].data(),
            &x_star.features.data()[..7 * 8]
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(Protocol::Standard, 1);
        cfg.scheme = NoiseScheme::dropout(0.2, 0.5);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(config(Protocol::Noise, 1).validate().is_err());
        assert!(config(Protocol::Backprojected, 1).validate().is_err());
        let bad: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"layer_dims": [2, 2], "protocol": "standard", "seed": 1, "epoch": 3}"#);
        assert!(bad.is_err());
    }

    fn record(epoch: usize, valid: f64, test: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            kind: EpochKind::Clean,
            train_loss: 0.0,
            valid_error: Some(valid),
            test_error: Some(test),
            sparsity: vec![],
        }
    }

    #[test]
    fn best_epoch_selection() {
        let improving: Vec<EpochRecord> = (0..5).map(|e| record(e, 0.5 - 0.1 * e as f64, 0.0)).collect();
        assert_eq!(best_epoch_of(&improving), Some(4));
        let tied = vec![record(0, 0.3, 0.0), record(1, 0.2, 0.0), record(2, 0.2, 0.0)];
        assert_eq!(best_epoch_of(&tied), Some(1));
    }

    #[test]
    fn refit_reports() {
        let splits = blob_splits(8, 3, 30, 3.0, 9);
        let cfg = config(Protocol::Standard, 3);
        let h = train_standard(&cfg, &splits).unwrap();
        let (_, r0) = select_and_refit(&h, &cfg, &splits).unwrap();
        assert_eq!(r0.mean_test_error, h.record(h.best_epoch).unwrap().test_error.unwrap());
        assert_eq!(r0.std_test_error, 0.0);

        let cfg6 = ExperimentConfig {
            refit_epochs: 6,
            ..cfg.clone()
        };
        let (_, r) = select_and_refit(&h, &cfg6, &splits).unwrap();
        assert_eq!(r.refit_test_errors.len(), 6);
        let tail = &r.refit_test_errors[3..];
        let mean = tail.iter().sum::<f64>() / 3.0;
        assert!((r.mean_test_error - mean).abs() < 1e-15);
        assert_eq!(report_window(150), 75);
        assert_eq!(report_window(1), 1);
    }

    #[test]
    fn missing_checkpoint_is_a_state_error() {
        let splits = blob_splits(8, 3, 30, 3.0, 10);
        let cfg = config(Protocol::Standard, 2);
        let mut h = train_standard(&cfg, &splits).unwrap();
        h.records.clear();
        assert!(matches!(select_and_refit(&h, &cfg, &splits), Err(Error::State(_))));
    }
}
