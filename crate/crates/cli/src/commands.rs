use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dropaug::backprojection::{backproject as run_backprojection, mask_identity_monte_carlo, mask_identity_probability, write_pgm, write_tensor_f64, BackProjectionConfig};
use dropaug::data::{pca_fit, pca_transform, write_csv_features, Dataset};
use dropaug::network::{load_checkpoint, model_hash, save_checkpoint, MlpModel};
use dropaug::noise::{drop_proportion_histogram_in, sample_mask_trace, MaskTrace, NoiseScheme, NoiseVariant};
use dropaug::training::{run_experiment, select_and_refit};
use dropaug::{Error, RngStream};
use log::info;
use serde_json::json;

use crate::config::{CliConfig, Partition};
use crate::{CliError, Common};

type CliResult<T> = std::result::Result<T, CliError>;

const STREAM_BP_MASKS: u64 = 0xB9;
const STREAM_ANALYZE: u64 = 0xA7;
const STREAM_HISTOGRAM: u64 = 0x415;

fn load_config(common: &Common) -> CliResult<CliConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config <path>".into()))?;
    let mut cfg = CliConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write(path, text)
}

/// Same scheme with its hidden-layer level replaced.
fn at_level(scheme: &NoiseScheme, level: f64) -> CliResult<NoiseScheme> {
    let variant = match scheme.variant {
        NoiseVariant::Dropout { p_input, .. } => NoiseVariant::Dropout {
            p_input,
            p_hidden: level,
        },
        NoiseVariant::RandomDropout { p_max_input, .. } => NoiseVariant::RandomDropout {
            p_max_input,
            p_max_hidden: level,
        },
        _ => {
            return Err(CliError::Usage(
                "--grid needs a dropout or random_dropout scheme".into(),
            ))
        }
    };
    Ok(NoiseScheme {
        variant,
        scaling: scheme.scaling,
    })
}

pub fn train(common: &Common, grid: &[f64]) -> CliResult<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    if grid.is_empty() {
        train_one(&cfg, &out)?;
        return Ok(());
    }
    let mut summary = String::from("level,best_epoch,mean_test_error,std_test_error\n");
    for &level in grid {
        let mut run = cfg.clone();
        run.scheme = at_level(&cfg.scheme, level)?;
        let dir = out.join(format!("p{level}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let r = train_one(&run, &dir)?;
        let _ = writeln!(summary, "{level},{},{},{}", r.best_epoch, r.mean_test_error, r.std_test_error);
    }
    write(&out.join("grid.csv"), summary)
}

fn train_one(cfg: &CliConfig, out: &Path) -> CliResult<dropaug::training::RefitReport> {
    let splits = cfg.load_splits()?;
    let exp = cfg.experiment(&splits);
    let config_hash = cfg.hash();
    info!(
        "training {:?} {:?} on {}/{}/{} samples (config {})",
        exp.protocol,
        exp.layer_dims,
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        &config_hash[..12]
    );
    let history = run_experiment(&exp, &splits)?;
    let (refit_model, refit) = select_and_refit(&history, &exp, &splits)?;

    write(&out.join("history.csv"), history.to_csv())?;
    save_checkpoint(&history.best_model, &out.join("best.ckpt"))?;
    write_json(
        &out.join("best.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": config_hash,
            "epoch": history.best_epoch,
            "model_hash": model_hash(&history.best_model),
        }),
    )?;
    if exp.refit_epochs > 0 {
        save_checkpoint(&refit_model, &out.join("refit.ckpt"))?;
    }
    write_json(
        &out.join("report.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": config_hash,
            "protocol": exp.protocol,
            "layer_dims": exp.layer_dims,
            "samples": {"train": splits.train.len(), "valid": splits.valid.len(), "test": splits.test.len()},
            "best_epoch": history.best_epoch,
            "refit": refit,
            "x_star_rounds": history.xstar_rounds,
        }),
    )?;
    info!(
        "best epoch {}, test error {:.4} (+/- {:.4})",
        refit.best_epoch, refit.mean_test_error, refit.std_test_error
    );
    Ok(refit)
}

fn checkpoint_model(cfg: &CliConfig, flag: Option<PathBuf>) -> CliResult<MlpModel> {
    let path = flag
        .or_else(|| cfg.backproject.as_ref().map(|b| b.checkpoint.clone()))
        .ok_or_else(|| Error::State("no checkpoint given (--checkpoint or backproject.checkpoint)".into()))?;
    if !path.is_file() {
        return Err(Error::State(format!("checkpoint {} does not exist; run `train` first", path.display())).into());
    }
    Ok(load_checkpoint(&path)?)
}

fn render(path: &Path, values: &[f64], shape: Option<(usize, usize)>) -> CliResult<()> {
    match shape {
        Some((h, w)) if h * w == values.len() => Ok(write_pgm(path, values, h, w)?),
        _ => Ok(()),
    }
}

pub fn backproject(common: &Common, checkpoint: Option<PathBuf>, samples: Option<usize>, all_ones: bool) -> CliResult<()> {
    let cfg = load_config(common)?;
    let model = checkpoint_model(&cfg, checkpoint)?;
    let out = out_dir(common)?;
    let splits = cfg.load_splits()?;
    let section = cfg.backproject.as_ref();
    let data: &Dataset = match section.map_or(Partition::Test, |s| s.partition) {
        Partition::Train => &splits.train,
        Partition::Valid => &splits.valid,
        Partition::Test => &splits.test,
    };
    if data.dims() != model.input_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} inputs, data has {}",
            model.input_dim(),
            data.dims()
        ))
        .into());
    }
    let bp = cfg
        .backprojection
        .clone()
        .unwrap_or_else(|| BackProjectionConfig::default_for(model.hidden_layers()));
    bp.validate(model.hidden_layers())?;
    let n = samples.or(section.map(|s| s.samples)).unwrap_or(16).min(data.len());
    let widths = model.noise_widths();
    let shape = data.image_shape;
    let mut summary = String::from("sample,label,initial_loss,final_loss,relative_reduction\n");
    for i in 0..n {
        let x = data.features.select_rows(&[i])?;
        let masks = if all_ones {
            MaskTrace::all_ones(&widths, 1, cfg.scheme.scaling)
        } else {
            let mut stream = RngStream::keyed(cfg.seed, &[STREAM_BP_MASKS, i as u64]);
            sample_mask_trace(&cfg.scheme, &widths, 1, &mut stream)?
        };
        let r = run_backprojection(&model, &x, &masks, &bp)
            .map_err(|e| Error::Numeric(format!("sample {i}: {e}")))?;
        write_tensor_f64(&out.join(format!("x_{i:03}.f64")), &x)?;
        render(&out.join(format!("x_{i:03}.pgm")), x.data(), shape)?;
        for (j, xs) in r.x_star.iter().enumerate() {
            let stem = if r.x_star.len() == 1 {
                format!("x_star_{i:03}")
            } else {
                format!("x_star_{i:03}_l{}", j + 1)
            };
            write_tensor_f64(&out.join(format!("{stem}.f64")), xs)?;
            render(&out.join(format!("{stem}.pgm")), xs.data(), shape)?;
        }
        let mut losses = String::from("step,loss\n");
        for (step, l) in r.loss_history.iter().enumerate() {
            let _ = writeln!(losses, "{step},{l}");
        }
        write(&out.join(format!("loss_{i:03}.csv")), losses)?;
        let reduction = r.relative_reductions()[0];
        let _ = writeln!(summary, "{i},{},{},{},{reduction}", data.labels[i], r.initial_loss, r.final_loss);
    }
    write(&out.join("summary.csv"), summary)?;
    info!("back-projected {n} samples into {}", out.display());
    Ok(())
}

fn keep_probability(p_drop: f64) -> CliResult<f64> {
    if (0.0..=1.0).contains(&p_drop) {
        Ok(1.0 - p_drop)
    } else {
        Err(CliError::Usage(format!("--p-drop {p_drop} must lie in [0, 1]")))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn analyze(
    common: &Common,
    p_drop: f64,
    d: Option<usize>,
    s: Option<f64>,
    trials: Option<usize>,
    active: Option<usize>,
    total: Option<usize>,
) -> CliResult<()> {
    let keep = keep_probability(p_drop)?;
    let mut table = format!("keep_probability\t{keep}\n");
    match trials {
        None => {
            let (d, s) = match (d, s) {
                (Some(d), Some(s)) => (d, s),
                _ => return Err(CliError::Usage("closed form needs --d and --s".into())),
            };
            if !(0.0..=1.0).contains(&s) || d == 0 {
                return Err(CliError::Usage(format!("need d >= 1 and s in [0, 1] (d={d}, s={s})")));
            }
            let r = mask_identity_probability(keep, d, s)?;
            let _ = writeln!(table, "d_times_s\t{}", d as f64 * s);
            let _ = writeln!(table, "probability\t{:e}", r.probability);
            let _ = writeln!(table, "log10\t{:.6}", r.log10);
        }
        Some(trials) => {
            let active = active.ok_or_else(|| CliError::Usage("Monte Carlo needs --active".into()))?;
            let total = total.unwrap_or(active);
            if active > total || trials == 0 {
                return Err(CliError::Usage("need active <= total and trials >= 1".into()));
            }
            let mut stream = RngStream::new(common.seed.unwrap_or(0), STREAM_ANALYZE);
            let estimate = mask_identity_monte_carlo(keep, active, total, trials, &mut stream)?;
            let exact = keep.powi(active as i32);
            let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
            let _ = writeln!(table, "active\t{active}");
            let _ = writeln!(table, "trials\t{trials}");
            let _ = writeln!(table, "probability\t{exact:e}");
            let _ = writeln!(table, "log10\t{:.6}", exact.log10());
            let _ = writeln!(table, "empirical\t{estimate}");
            let _ = writeln!(table, "interval_3sigma\t[{}, {}]", exact - 3.0 * sigma, exact + 3.0 * sigma);
            let _ = writeln!(table, "within_interval\t{}", (estimate - exact).abs() <= 3.0 * sigma);
        }
    }
    print!("{table}");
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("analysis.tsv"), table)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn histogram(
    common: &Common,
    scheme_name: &str,
    p_drop: f64,
    width: usize,
    trials: usize,
    bins: usize,
    range: (f64, f64),
) -> CliResult<()> {
    let (scheme, seed) = match &common.config {
        Some(_) => {
            let cfg = load_config(common)?;
            (cfg.scheme, cfg.seed)
        }
        None => {
            let scheme = match scheme_name {
                "dropout" => NoiseScheme::dropout(0.0, p_drop),
                "random_dropout" => NoiseScheme::random_dropout(0.0, p_drop),
                other => return Err(CliError::Usage(format!("unknown scheme `{other}` (dropout, random_dropout)"))),
            };
            (scheme, common.seed.unwrap_or(0))
        }
    };
    if range.0.partial_cmp(&range.1) != Some(std::cmp::Ordering::Less) {
        return Err(CliError::Usage(format!("empty range {range:?}")));
    }
    let mut stream = RngStream::new(seed, STREAM_HISTOGRAM);
    let h = drop_proportion_histogram_in(&scheme, width, trials, bins, range, &mut stream)?;
    match &common.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write(&dir.join("histogram.csv"), h.to_csv())
        }
        None => {
            print!("{}", h.to_csv());
            Ok(())
        }
    }
}

pub fn pca(common: &Common, k: Option<usize>) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    let k = k
        .or(cfg.pca_k)
        .ok_or_else(|| CliError::Usage("PCA needs --k or pca_k in the config".into()))?;
    cfg.pca_k = None;
    let splits = cfg.load_splits()?;
    let out = out_dir(common)?;
    let t = pca_fit(&splits.train, k)?;
    let total: f64 = t.eigenvalues.iter().sum();
    let mut table = String::from("component,eigenvalue,explained_ratio\n");
    for (i, ev) in t.eigenvalues.iter().enumerate() {
        let ratio = if total > 0.0 { ev / total } else { 0.0 };
        let _ = writeln!(table, "{},{ev},{ratio}", i + 1);
    }
    write(&out.join("eigenvalues.csv"), table)?;
    write_tensor_f64(&out.join("mean.f64"), &t.mean)?;
    write_tensor_f64(&out.join("components.f64"), &t.components)?;
    let projected = Dataset::new(pca_transform(&t, &splits.train.features)?, splits.train.labels.clone())?;
    write_csv_features(&out.join("train_projected.csv"), &projected, "label")?;
    info!(
        "kept {k} of {} components ({} x {} components)",
        t.eigenvalues.len(),
        t.components.rows(),
        t.components.cols()
    );
    Ok(())
}
