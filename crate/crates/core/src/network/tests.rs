use super::*;
use crate::noise::{sample_mask_trace, LayerNoise, NoiseScheme, Scaling};

fn random_input(rows: usize, cols: usize, s: &mut RngStream) -> Tensor2D {
    Tensor2D::new(rows, cols, s.uniform(rows * cols, -1.0, 1.0).unwrap()).unwrap()
}

fn random_labels(n: usize, classes: usize, s: &mut RngStream) -> Vec<usize> {
    (0..n).map(|_| s.below(classes)).collect()
}

/// Rebuilds `model` with one scalar parameter replaced.
fn perturbed(model: &MlpModel, layer: usize, bias: bool, idx: usize, delta: f64) -> MlpModel {
    let mut layers = model.layers().to_vec();
    let l = &mut layers[layer];
    let t = if bias { &mut l.bias } else { &mut l.weights };
    t.data_mut()[idx] += delta;
    MlpModel { layers }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

const EPS: f64 = 1e-5;

/// Central differences of the loss over every parameter and input coordinate,
/// compared with `backward`. Returns the worst relative error.
fn max_gradient_error(model: &MlpModel, x: &Tensor2D, y: &[usize], masks: Option<&MaskTrace>) -> f64 {
    let loss = |m: &MlpModel, x: &Tensor2D| loss_ce(&forward(m, x, masks).unwrap(), y).unwrap();
    let g = backward(model, &forward(model, x, masks).unwrap(), y).unwrap();
    let mut worst: f64 = 0.0;
    for (li, layer) in model.layers().iter().enumerate() {
        for (bias, n) in [(false, layer.weights.len()), (true, layer.bias.len())] {
            if bias && !layer.bias_enabled {
                continue;
            }
            for i in 0..n {
                let fd = (loss(&perturbed(model, li, bias, i, EPS), x) - loss(&perturbed(model, li, bias, i, -EPS), x))
                    / (2.0 * EPS);
                let an = if bias { g.layers[li].d_bias.data()[i] } else { g.layers[li].d_weights.data()[i] };
                worst = worst.max(rel_err(an, fd));
            }
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let fd = (loss(model, &xp) - loss(model, &xm)) / (2.0 * EPS);
        worst = worst.max(rel_err(g.d_input.data()[i], fd));
    }
    worst
}

/// Nets whose pre-activations sit well away from the rect kink.
fn kink_free_instance(dims: &[usize], batch: usize, seed: u64) -> (MlpModel, Tensor2D, Vec<usize>) {
    for attempt in 0.. {
        let mut s = RngStream::new(seed, attempt);
        let mut model = MlpModel::init(dims, &mut s).unwrap();
        for l in &mut model.layers {
            let b = s.uniform(l.bias.len(), -0.3, 0.3).unwrap();
            l.bias = Tensor2D::new(1, l.bias.cols(), b).unwrap();
        }
        let x = random_input(batch, dims[0], &mut s);
        let y = random_labels(batch, *dims.last().unwrap(), &mut s);
        let tr = forward(&model, &x, None).unwrap();
        if tr.pre_activations.iter().all(|p| p.data().iter().all(|h| h.abs() > 1e-3)) {
            return (model, x, y);
        }
    }
    unreachable!()
}

#[test]
fn init_bounds_and_determinism() {
    let m = MlpModel::init(&[4, 3], &mut RngStream::new(11, 0)).unwrap();
    let bound = (6.0f64 / 7.0).sqrt();
    assert!(m.layers()[0].weights().data().iter().all(|w| w.abs() <= bound));
    assert_eq!(m.layers()[0].bias().data(), &[0.0; 3]);
    let big = MlpModel::init(&[784, 256, 128, 10], &mut RngStream::new(1, 0)).unwrap();
    assert_eq!(big.layer_dims(), vec![784, 256, 128, 10]);
    assert_eq!(big.layers().len(), 3);
    let again = MlpModel::init(&[4, 3], &mut RngStream::new(11, 0)).unwrap();
    assert_eq!(m, again);
    assert!(matches!(MlpModel::init(&[4], &mut RngStream::new(1, 0)), Err(Error::Config(_))));
}

#[test]
fn rect_clips_negative_hidden_units() {
    let layers = vec![
        Layer::new(Tensor2D::identity(2), Tensor2D::zeros(1, 2), true).unwrap(),
        Layer::new(Tensor2D::identity(2), Tensor2D::zeros(1, 2), true).unwrap(),
    ];
    let model = MlpModel::new(layers).unwrap();
    let tr = forward(&model, &Tensor2D::from_rows(&[[-1.0, 2.0]]).unwrap(), None).unwrap();
    assert_eq!(tr.activations[0].data(), &[0.0, 2.0]);
}

#[test]
fn identity_masks_match_clean_pass_bitwise() {
    let mut s = RngStream::new(2, 0);
    let model = MlpModel::init(&[6, 5, 4, 3], &mut s).unwrap();
    let x = random_input(4, 6, &mut s);
    let clean = forward(&model, &x, None).unwrap();
    for scaling in [Scaling::Off, Scaling::TrainTimeInverse, Scaling::TestTime] {
        let ones = MaskTrace::all_ones(&model.noise_widths(), 4, scaling);
        let masked = forward(&model, &x, Some(&ones)).unwrap();
        assert_eq!(masked.activations, clean.activations);
        assert_eq!(masked.probabilities, clean.probabilities);
    }
}

#[test]
fn softmax_rows_are_normalised() {
    let mut s = RngStream::new(3, 0);
    let model = MlpModel::init(&[7, 6, 5, 4], &mut s).unwrap();
    let x = random_input(9, 7, &mut s).scale(50.0).unwrap();
    let tr = forward(&model, &x, None).unwrap();
    for r in 0..9 {
        let row = tr.probabilities.row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn cross_entropy_cases() {
    let model = MlpModel::new(vec![Layer::new(Tensor2D::zeros(2, 10), Tensor2D::zeros(1, 10), true).unwrap()]).unwrap();
    let tr = forward(&model, &Tensor2D::zeros(3, 2), None).unwrap();
    let l = loss_ce(&tr, &[0, 4, 9]).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-12);
    assert!(matches!(loss_ce(&tr, &[0, 4, 10]), Err(Error::Domain(_))));

    // Saturated logits: one-hot probabilities on the true class.
    let mut w = Tensor2D::zeros(2, 3);
    w.set(0, 1, 1e4).unwrap();
    let model = MlpModel::new(vec![Layer::new(w, Tensor2D::zeros(1, 3), true).unwrap()]).unwrap();
    let tr = forward(&model, &Tensor2D::from_rows(&[[1.0, 0.0]]).unwrap(), None).unwrap();
    assert_eq!(loss_ce(&tr, &[1]).unwrap(), 0.0);
    assert!(loss_ce(&tr, &[0]).unwrap() > 0.0);
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..4 {
        let (model, x, y) = kink_free_instance(&[6, 5, 4, 3], 4, seed);
        let err = max_gradient_error(&model, &x, &y, None);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn backward_through_masks_and_scaling() {
    let (model, x, y) = kink_free_instance(&[6, 5, 4, 3], 3, 9);
    let mut s = RngStream::new(9, 99);
    for scheme in [NoiseScheme::dropout(0.2, 0.5), NoiseScheme::random_dropout(0.3, 0.6)] {
        let masks = sample_mask_trace(&scheme, &model.noise_widths(), 3, &mut s).unwrap();
        let err = max_gradient_error(&model, &x, &y, Some(&masks));
        assert!(err < 1e-6, "{scheme:?}: {err}");
    }
}

#[test]
fn backward_through_gaussian_matched_pre_activations() {
    let (model, x, y) = kink_free_instance(&[5, 4, 4, 3], 2, 21);
    let mut s = RngStream::new(21, 5);
    let masks = sample_mask_trace(&NoiseScheme::gaussian_matched(0.2), &model.noise_widths(), 2, &mut s).unwrap();
    let tr = forward(&model, &x, Some(&masks)).unwrap();
    if tr.pre_activations.iter().all(|p| p.data().iter().all(|h| h.abs() > 1e-3)) {
        let err = max_gradient_error(&model, &x, &y, Some(&masks));
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn dropped_unit_gets_no_incoming_gradient() {
    let (model, x, y) = kink_free_instance(&[6, 5, 4, 3], 2, 3);
    let mut masks: Vec<LayerNoise> = model
        .noise_widths()
        .iter()
        .map(|&w| LayerNoise {
            mask: Tensor2D::ones(2, w),
            level: Tensor2D::zeros(2, 1),
        })
        .collect();
    for r in 0..2 {
        masks[1].mask.set(r, 2, 0.0).unwrap();
    }
    let trace = MaskTrace::new(masks, Scaling::Off).unwrap();
    let g = backward(&model, &forward(&model, &x, Some(&trace)).unwrap(), &y).unwrap();
    for i in 0..6 {
        assert_eq!(g.layers[0].d_weights.get(i, 2), 0.0);
    }
    assert_eq!(g.layers[0].d_bias.get(0, 2), 0.0);
}

#[test]
fn sgd_step_cases() {
    let model = MlpModel::new(vec![Layer::new(Tensor2D::ones(1, 1), Tensor2D::zeros(1, 1), true).unwrap()]).unwrap();
    let grads = Gradients {
        layers: vec![LayerGradients {
            d_weights: Tensor2D::filled(1, 1, 2.0),
            d_bias: Tensor2D::zeros(1, 1),
        }],
        d_input: Tensor2D::zeros(1, 1),
    };
    assert_eq!(sgd_step(&model, &grads, 0.0).unwrap(), model);
    let stepped = sgd_step(&model, &grads, 0.1).unwrap();
    assert!((stepped.layers()[0].weights().data()[0] - 0.8).abs() < 1e-15);

    let mut s = RngStream::new(4, 0);
    let big = MlpModel::init(&[3, 4, 2], &mut s).unwrap();
    let x = random_input(2, 3, &mut s);
    let g = backward(&big, &forward(&big, &x, None).unwrap(), &[0, 1]).unwrap();
    // Powers of two keep the round trip exact.
    let back = sgd_step(&sgd_step(&big, &g, 0.5).unwrap(), &g, -0.5).unwrap();
    for (a, b) in back.layers().iter().zip(big.layers()) {
        for (u, v) in a.weights().data().iter().zip(b.weights().data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }
}

#[test]
fn evaluation_error_rates() {
    // Identity output layer predicts the argmax input coordinate.
    let model = MlpModel::new(vec![Layer::new(Tensor2D::identity(3), Tensor2D::zeros(1, 3), true).unwrap()]).unwrap();
    let x = Tensor2D::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]).unwrap();
    assert_eq!(evaluate(&model, &x, &[0, 1, 2]).unwrap().error_rate, 0.0);
    assert_eq!(evaluate(&model, &x, &[1, 2, 0]).unwrap().error_rate, 1.0);
    let a = evaluate(&model, &x, &[0, 1, 2]).unwrap();
    assert_eq!(a, evaluate(&model, &x, &[0, 1, 2]).unwrap());
}

#[test]
fn untrained_network_is_at_chance() {
    let mut s = RngStream::new(12, 0);
    let blobs = crate::data::synth_blobs(10, 200, 20, 3.0, &mut s).unwrap();
    let mut errs: Vec<f64> = (0..5)
        .map(|k| {
            let model = MlpModel::init(&[20, 32, 10], &mut RngStream::new(100 + k, 0)).unwrap();
            evaluate(&model, &blobs.features, &blobs.labels).unwrap().error_rate
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!((errs[2] - 0.9).abs() <= 0.05, "{errs:?}");
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut s = RngStream::new(5, 0);
    let model = MlpModel::init_with(&[4, 3, 2], false, &mut s).unwrap();
    let bytes = model_to_bytes(&model);
    assert_eq!(&bytes[..4], b"DAUG");
    assert_eq!(model_from_bytes(&bytes).unwrap(), model);
    assert!(!model.layers()[0].bias_enabled());
    assert!(model.layers()[1].bias_enabled());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(model_from_bytes(&bad), Err(Error::Format(m)) if m.contains("offset 0")));
    assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    assert_eq!(model_hash(&model), model_hash(&model_from_bytes(&bytes).unwrap()));
}

#[test]
fn test_time_factors_scale_outgoing_activations() {
    let mut s = RngStream::new(8, 0);
    let model = MlpModel::init(&[3, 4, 2], &mut s).unwrap();
    let x = random_input(2, 3, &mut s);
    let scaled = forward_eval(&model, &x, &[0.5, 0.25]).unwrap();
    let manual = forward(&model, &x.scale(0.5).unwrap(), None).unwrap();
    assert_eq!(scaled.pre_activations, manual.pre_activations);
    let expected_logits = model.layers()[1]
        .affine(&manual.activations[0].scale(0.25).unwrap())
        .unwrap();
    assert_eq!(scaled.logits, expected_logits);
}
