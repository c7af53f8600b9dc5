use dropaug::backprojection::{backproject, calibrate_rates, BackProjectionConfig, BpMode, RATE_GRID};
use dropaug::data::{split, synth_blobs, Splits};
use dropaug::network::MlpModel;
use dropaug::noise::{sample_mask_trace, NoiseScheme};
use dropaug::training::{train_standard, ExperimentConfig, Protocol};
use dropaug::{RngStream, Tensor2D};

fn trained_net(seed: u64) -> (MlpModel, Splits) {
    let data = synth_blobs(10, 40, 100, 4.0, &mut RngStream::new(seed, 0)).unwrap();
    let splits = split(&data, (0.8, 0.1, 0.1), &mut RngStream::new(seed, 1)).unwrap();
    let cfg = ExperimentConfig {
        epochs: 3,
        ..ExperimentConfig::new(vec![100, 64, 32, 10], Protocol::Standard, seed)
    };
    (train_standard(&cfg, &splits).unwrap().final_model, splits)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn small_rates_give_non_increasing_losses() {
    let (model, splits) = trained_net(11);
    let scheme = NoiseScheme::dropout(0.2, 0.5);
    let widths = model.noise_widths();
    let probe = splits.train.features.select_rows(&(0..20).collect::<Vec<_>>()).unwrap();
    let probe_masks = sample_mask_trace(&scheme, &widths, 20, &mut RngStream::new(11, 2)).unwrap();
    for mode in [BpMode::JointShared, BpMode::JointDistinct, BpMode::PerLayer] {
        let base = BackProjectionConfig {
            mode,
            ..BackProjectionConfig::default_for(2)
        };
        let tuned = calibrate_rates(&model, &probe, &probe_masks, &base, &RATE_GRID).unwrap();
        let slow = BackProjectionConfig {
            lr_per_layer: tuned.lr_per_layer.iter().map(|r| r / 10.0).collect(),
            joint_lr: tuned.joint_lr.map(|r| r / 10.0),
            ..tuned
        };
        let (mut steps, mut ok) = (0usize, 0usize);
        for i in 0..100 {
            let x = splits.train.features.select_rows(&[20 + i]).unwrap();
            let masks = sample_mask_trace(&scheme, &widths, 1, &mut RngStream::keyed(11, &[3, i as u64])).unwrap();
            let r = backproject(&model, &x, &masks, &slow).unwrap();
            for w in r.loss_history.windows(2) {
                steps += 1;
                ok += usize::from(w[1] <= w[0]);
            }
        }
        let frac = ok as f64 / steps as f64;
        assert!(frac >= 0.95, "{mode:?}: only {frac} of steps non-increasing");
    }
}

#[test]
fn shared_point_never_beats_distinct_points_in_median() {
    let scheme = NoiseScheme::dropout(0.2, 0.5);
    let mut gaps = Vec::new();
    for seed in 0..30u64 {
        let mut s = RngStream::new(seed, 0);
        let model = MlpModel::init(&[20, 16, 12, 4], &mut s).unwrap();
        let x = Tensor2D::new(8, 20, s.uniform(160, 0.0, 1.0).unwrap()).unwrap();
        let masks = sample_mask_trace(&scheme, &model.noise_widths(), 8, &mut s).unwrap();
        let run = |mode| {
            let cfg = BackProjectionConfig {
                mode,
                joint_lr: Some(0.1),
                ..BackProjectionConfig::default_for(2)
            };
            backproject(&model, &x, &masks, &cfg).unwrap().final_loss
        };
        gaps.push(run(BpMode::JointShared) - run(BpMode::JointDistinct));
    }
    assert!(median(gaps) >= 0.0);
}
