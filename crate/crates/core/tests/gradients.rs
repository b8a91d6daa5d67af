//! Analytic gradients against finite differences of independent f64 oracles.

use samlp::layers::{
    adder_backward, adder_forward, mul_backward, mul_forward, shift_backward, shift_forward, AdderWeights, BatchNorm,
    Layer, MaxPool, Mode, Relu, ShiftWeights,
};
use samlp::tensor::softmax_cross_entropy;
use samlp::{Rng, Tensor};

mod common;
use common::{batch_norm64, dot, linear64, numeric_grad, rel_err, to64};

#[test]
fn mul_layer_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let (rows, c_in, c_out) = (5, 4, 3);
    let x = rng.uniform_tensor(&[rows, c_in], -1.0, 1.0);
    let w = rng.uniform_tensor(&[c_out, c_in], -1.0, 1.0);
    let b = rng.uniform_tensor(&[c_out], -1.0, 1.0);
    let r = to64(&rng.uniform_tensor(&[rows, c_out], -1.0, 1.0));
    let dy = Tensor::new(vec![rows, c_out], r.iter().map(|&v| v as f32).collect()).unwrap();
    let (_, ctx) = mul_forward(&x, &w, Some(&b)).unwrap();
    let (dx, dw, db) = mul_backward(&dy, ctx).unwrap();
    let (x64, w64, b64) = (to64(&x), to64(&w), to64(&b));

    let fx = numeric_grad(&x64, |x| dot(&linear64(x, &w64, Some(&b64), c_in, c_out), &r));
    let fw = numeric_grad(&w64, |w| dot(&linear64(&x64, w, Some(&b64), c_in, c_out), &r));
    let fb = numeric_grad(&b64, |b| dot(&linear64(&x64, &w64, Some(b), c_in, c_out), &r));
    assert!(rel_err(&dx, &fx) <= 1e-4);
    assert!(rel_err(&dw, &fw) <= 1e-4);
    assert!(rel_err(&db, &fb) <= 1e-4);
}

#[test]
fn batch_norm_train_mode_matches_finite_differences() {
    let mut rng = Rng::new(12);
    let (rows, c) = (6, 3);
    let x = rng.uniform_tensor(&[rows, c], -2.0, 2.0);
    let mut bn = BatchNorm::new(c);
    bn.gamma = rng.uniform_tensor(&[c], 0.5, 1.5);
    bn.beta = rng.uniform_tensor(&[c], -0.5, 0.5);
    let r = to64(&rng.uniform_tensor(&[rows, c], -1.0, 1.0));
    let dy = Tensor::new(vec![rows, c], r.iter().map(|&v| v as f32).collect()).unwrap();
    bn.forward(&x, Mode::Train).unwrap();
    let dx = bn.backward(&dy).unwrap();
    let (gamma, beta) = (to64(&bn.gamma), to64(&bn.beta));
    let (dgamma, dbeta) = {
        let params = bn.params_mut("bn");
        (params[0].grad.clone(), params[1].grad.clone())
    };
    let x64 = to64(&x);

    let fx = numeric_grad(&x64, |x| dot(&batch_norm64(x, &gamma, &beta, c), &r));
    let fg = numeric_grad(&gamma, |g| dot(&batch_norm64(&x64, g, &beta, c), &r));
    let fb = numeric_grad(&beta, |b| dot(&batch_norm64(&x64, &gamma, b, c), &r));
    assert!(rel_err(&dx, &fx) <= 1e-4, "dx {}", rel_err(&dx, &fx));
    assert!(rel_err(&dgamma, &fg) <= 1e-4);
    assert!(rel_err(&dbeta, &fb) <= 1e-4);
}

#[test]
fn relu_and_pool_match_finite_differences() {
    let mut rng = Rng::new(13);
    // keep inputs away from the ReLU kink
    let x = Tensor::from_fn(&[2, 5, 3], |_| {
        let v = rng.uniform(0.05, 1.0);
        if rng.below(2) == 0 {
            v
        } else {
            -v
        }
    });
    let r = to64(&rng.uniform_tensor(&[2, 5, 3], -1.0, 1.0));
    let dy = Tensor::new(vec![2, 5, 3], r.iter().map(|&v| v as f32).collect()).unwrap();
    let mut relu = Relu::default();
    relu.forward(&x, Mode::Train).unwrap();
    let dx = relu.backward(&dy).unwrap();
    let fx = numeric_grad(&to64(&x), |x| x.iter().zip(&r).map(|(v, g)| v.max(0.0) * g).sum());
    assert!(rel_err(&dx, &fx) <= 1e-4);

    let rp = to64(&rng.uniform_tensor(&[2, 3], -1.0, 1.0));
    let dyp = Tensor::new(vec![2, 3], rp.iter().map(|&v| v as f32).collect()).unwrap();
    let mut pool = MaxPool::default();
    pool.forward(&x, Mode::Train).unwrap();
    let dx = pool.backward(&dyp).unwrap();
    let pool64 = |x: &[f64]| -> f64 {
        let mut total = 0.0;
        for g in 0..2 {
            for ch in 0..3 {
                let m = (0..5)
                    .map(|p| x[(g * 5 + p) * 3 + ch])
                    .fold(f64::NEG_INFINITY, f64::max);
                total += m * rp[g * 3 + ch];
            }
        }
        total
    };
    let fx = numeric_grad(&to64(&x), pool64);
    assert!(rel_err(&dx, &fx) <= 1e-4);
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut rng = Rng::new(14);
    let logits = rng.uniform_tensor(&[4, 5], -3.0, 3.0);
    let labels = [0, 4, 2, 2];
    let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let ce64 = |z: &[f64]| -> f64 {
        let mut total = 0.0;
        for (b, &l) in labels.iter().enumerate() {
            let row = &z[b * 5..(b + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        total / labels.len() as f64
    };
    let z = to64(&logits);
    assert!((f64::from(loss) - ce64(&z)).abs() < 1e-5);
    assert!(rel_err(&grad, &numeric_grad(&z, ce64)) <= 1e-4);
}

#[test]
fn shift_input_gradient_with_frozen_quantized_weights() {
    let mut rng = Rng::new(15);
    let (rows, c_in, c_out) = (4, 6, 3);
    let x = rng.uniform_tensor(&[rows, c_in], -1.0, 1.0);
    let mut weights = ShiftWeights::new(rng.uniform_tensor(&[c_out, c_in], -1.0, 1.0));
    let r = to64(&rng.uniform_tensor(&[rows, c_out], -1.0, 1.0));
    let dy = Tensor::new(vec![rows, c_out], r.iter().map(|&v| v as f32).collect()).unwrap();
    let (_, ctx) = shift_forward(&x, &mut weights).unwrap();
    let wq = to64(&weights.quantized().w_q);
    let (dx, _) = shift_backward(&dy, ctx).unwrap();
    let fx = numeric_grad(&to64(&x), |x| dot(&linear64(x, &wq, None, c_in, c_out), &r));
    assert!(rel_err(&dx, &fx) <= 1e-4);
}

#[test]
fn shift_weight_gradient_is_straight_through() {
    let mut rng = Rng::new(16);
    for _ in 0..50 {
        let rows = 1 + rng.below(20);
        let (c_in, c_out) = (1 + rng.below(12), 1 + rng.below(12));
        let x = rng.uniform_tensor(&[rows, c_in], -4.0, 4.0);
        let dy = rng.uniform_tensor(&[rows, c_out], -1.0, 1.0);
        let mut weights = ShiftWeights::new(rng.uniform_tensor(&[c_out, c_in], -2.0, 2.0));
        let (_, ctx) = shift_forward(&x, &mut weights).unwrap();
        let (_, dw) = shift_backward(&dy, ctx).unwrap();
        // dW = dYᵀX, independent of the quantized values
        for o in 0..c_out {
            for i in 0..c_in {
                let mut acc = 0.0f64;
                for r in 0..rows {
                    acc += f64::from(dy.data()[r * c_out + o]) * f64::from(x.data()[r * c_in + i]);
                }
                assert_eq!(dw.data()[o * c_in + i], acc as f32);
            }
        }
    }
}

#[test]
fn adder_gradients_match_oracles_including_saturation() {
    let mut rng = Rng::new(17);
    let mut saturated = 0;
    for _ in 0..200 {
        let rows = 1 + rng.below(8);
        let (c_in, c_out) = (1 + rng.below(10), 1 + rng.below(10));
        let x = rng.uniform_tensor(&[rows, c_in], -3.0, 3.0);
        let w = rng.uniform_tensor(&[c_out, c_in], -3.0, 3.0);
        let dy = rng.uniform_tensor(&[rows, c_out], -1.0, 1.0);
        let weights = AdderWeights { w: w.clone() };
        let (_, ctx) = adder_forward(&x, &weights).unwrap();
        let (dx, dw) = adder_backward(&dy, ctx).unwrap();
        let (xd, wd, gd) = (to64(&x), to64(&w), to64(&dy));
        for o in 0..c_out {
            for i in 0..c_in {
                let expect: f64 = (0..rows)
                    .map(|r| gd[r * c_out + o] * (xd[r * c_in + i] - wd[o * c_in + i]))
                    .sum();
                assert!((f64::from(dw.data()[o * c_in + i]) - expect).abs() <= 1e-6 * expect.abs().max(1.0));
            }
        }
        for r in 0..rows {
            for i in 0..c_in {
                let expect: f64 = -(0..c_out)
                    .map(|o| {
                        let d = xd[r * c_in + i] - wd[o * c_in + i];
                        if d.abs() > 1.0 {
                            saturated += 1;
                        }
                        gd[r * c_out + o] * d.clamp(-1.0, 1.0)
                    })
                    .sum::<f64>();
                assert!((f64::from(dx.data()[r * c_in + i]) - expect).abs() <= 1e-6 * expect.abs().max(1.0));
            }
        }
    }
    assert!(saturated > 100, "saturation cases exercised: {saturated}");
}

#[test]
fn whole_mul_model_gradient_matches_finite_differences() {
    use samlp::models::{build_model, ModelConfig, Variant};
    // f32 forward with a wide step; checks wiring across every block
    let cfg = ModelConfig {
        variant: Variant::Mul,
        embed_widths: vec![3, 3, 4, 4],
        encoder_widths: vec![4, 5],
        head_widths: vec![4],
        num_classes: 3,
        knn_k: 2,
        points_in: 6,
        seed: 5,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg).unwrap();
    let mut rng = Rng::new(18);
    let points = rng.uniform_tensor(&[3, 6, 3], -1.0, 1.0);
    let labels = [0, 1, 2];
    let out = model.forward(&points, Mode::Eval).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&out.logits, &labels).unwrap();
    model.backward(&dlogits).unwrap();
    for name in ["embed.0.weight", "encoder.1.weight", "classifier.weight"] {
        let analytic = {
            let params = model.params_mut();
            params.iter().find(|p| p.name == name).unwrap().grad.clone()
        };
        let h = 1e-3f32;
        let mut worst = 0.0f64;
        for idx in 0..analytic.len() {
            let mut loss_at = |delta: f32| {
                let mut params = model.params_mut();
                let p = params.iter_mut().find(|p| p.name == name).unwrap();
                let orig = p.value.data()[idx];
                p.value.data_mut()[idx] = orig + delta;
                drop(params);
                let out = model.forward(&points, Mode::Eval).unwrap();
                let loss = softmax_cross_entropy(&out.logits, &labels).unwrap().0;
                let mut params = model.params_mut();
                params.iter_mut().find(|p| p.name == name).unwrap().value.data_mut()[idx] = orig;
                f64::from(loss)
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * f64::from(h));
            worst = worst.max((fd - f64::from(analytic.data()[idx])).abs());
        }
        let scale = analytic.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(
            worst <= 1e-3 + 1e-2 * f64::from(scale),
            "{name}: worst {worst}, scale {scale}"
        );
    }
}
