use irgrid_core::model::{attention_alpha_concat, attention_gate, AttUNet, AttUNetConfig, GateLayout, Mode};
use irgrid_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random::<f64>()).collect())
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn double(cin: usize, cout: usize) -> usize {
    conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    let model = AttUNet::<f32>::new(AttUNetConfig::default(), 0).unwrap();
    let enc = [32, 64, 128, 256];
    let mut expected = 12 * 4 + 12;
    let mut cin = 12;
    for &f in &enc {
        expected += double(cin, f);
        cin = f;
    }
    expected += double(256, 512);
    let mut deeper = 512;
    for &cx in enc.iter().rev() {
        let cl = cx / 2;
        expected += cl * cx + cl * deeper + cl + cl + 1;
        expected += conv(deeper, cx, 3) + 2 * cx;
        expected += double(2 * cx, cx);
        deeper = cx;
    }
    expected += conv(32, 1, 1);
    assert_eq!(model.param_count(), expected);
    let named: usize = model.param_specs().iter().map(|s| s.len()).sum();
    assert_eq!(named, expected);
    // Two running statistics per batch-norm channel.
    let bn_channels: usize = enc.iter().sum::<usize>() * 2 + 512 * 2 + enc.iter().sum::<usize>() * 3;
    assert_eq!(model.buffers.len(), 2 * bn_channels);
}

#[test]
fn activation_audit_at_full_resolution() {
    let model = AttUNet::<f32>::new(AttUNetConfig::default(), 0).unwrap();
    let shapes = model.activation_shapes(512, 512);
    let get = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1;
    assert_eq!(get("preconv"), [12, 512, 512]);
    assert_eq!(get("encoder.0"), [32, 512, 512]);
    assert_eq!(get("encoder.1"), [64, 256, 256]);
    assert_eq!(get("encoder.2"), [128, 128, 128]);
    assert_eq!(get("encoder.3"), [256, 64, 64]);
    assert_eq!(get("bottleneck"), [512, 32, 32]);
    assert_eq!(get("decoder.0"), [32, 512, 512]);
    assert_eq!(get("head"), [1, 512, 512]);
    for spec in model.param_specs() {
        if spec.name.starts_with("encoder.") && spec.name.ends_with("conv.weight") {
            assert_eq!(&spec.shape[2..], &[3, 3], "{}", spec.name);
        }
    }
}

#[test]
fn forward_shape_and_determinism() {
    let model = AttUNet::<f32>::new(AttUNetConfig::narrowed(8), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x64 = uniform(&mut rng, 1, 12, 512, 512);
    let x = Tensor::from_vec(1, 12, 512, 512, x64.data.iter().map(|&v| v as f32).collect());
    let a = model.predict(&x).unwrap();
    assert_eq!(a.shape(), [1, 1, 512, 512]);
    let b = model.predict(&x).unwrap();
    assert_eq!(a.data, b.data);
    assert!(a.data.iter().all(|&v| v >= 0.0));
}

#[test]
fn bad_inputs_are_rejected() {
    let model = AttUNet::<f32>::new(AttUNetConfig::narrowed(8), 1).unwrap();
    assert!(model.predict(&Tensor::zeros(1, 11, 32, 32)).is_err());
    assert!(model.predict(&Tensor::zeros(1, 12, 24, 24)).is_err());
    let mut cfg = AttUNetConfig::narrowed(8);
    cfg.dropout.pop();
    assert!(AttUNet::<f32>::new(cfg, 0).is_err());
}

#[test]
fn preconv_examples() {
    let mut model = AttUNet::<f64>::new(AttUNetConfig::narrowed(8), 0).unwrap();
    let spec = model.param_specs().iter().find(|s| s.name == "preconv.weight").unwrap().clone();
    let bias = model.param_specs().iter().find(|s| s.name == "preconv.bias").unwrap().clone();
    for c in 0..12 {
        let k = &mut model.params[spec.offset + 4 * c..spec.offset + 4 * c + 4];
        k.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    }
    model.params[bias.offset..bias.offset + 12].fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&mut rng, 1, 12, 8, 8);
    assert_eq!(model.preconv(&x).unwrap().data, x.data);
    assert!(model.preconv(&Tensor::zeros(1, 12, 8, 8)).unwrap().data.iter().all(|&v| v == 0.0));
    let mut neg = x.clone();
    neg.data[3] = -2.0;
    assert_eq!(model.preconv(&neg).unwrap().data[3], 0.0);
}

fn random_gate(rng: &mut ChaCha8Rng, cx: usize, cg: usize, cl: usize, scale: f64) -> (Vec<f64>, GateLayout) {
    let lay = GateLayout { offset: 0, cx, cg, cl };
    let p = (0..lay.len()).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    (p, lay)
}

#[test]
fn gate_alpha_open_interval_and_attenuation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (p, lay) = random_gate(&mut rng, 3, 4, 2, 2.0);
        let x = Tensor::from_vec(1, 3, 2, 2, (0..12).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect());
        let g = Tensor::from_vec(1, 4, 1, 1, (0..4).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect());
        let (out, tape) = attention_gate(&p, &lay, &x, &g).unwrap();
        assert!(tape.alpha.data.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(out.data.iter().zip(&x.data).all(|(o, i)| o.abs() <= i.abs()));
    }
}

#[test]
fn gate_with_zero_psi_halves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut p, lay) = random_gate(&mut rng, 4, 6, 2, 1.0);
    let n = p.len();
    p[n - 3..].fill(0.0);
    let x = uniform(&mut rng, 2, 4, 8, 8);
    let g = uniform(&mut rng, 2, 6, 4, 4);
    let (out, _) = attention_gate(&p, &lay, &x, &g).unwrap();
    for (o, i) in out.data.iter().zip(&x.data) {
        assert_eq!(*o, 0.5 * i);
    }
}

#[test]
fn separate_and_concatenated_gate_forms_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (p, lay) = random_gate(&mut rng, 5, 7, 3, 1.0);
        let x = uniform(&mut rng, 1, 5, 8, 6);
        let g = uniform(&mut rng, 1, 7, 4, 3);
        let (_, tape) = attention_gate(&p, &lay, &x, &g).unwrap();
        let alpha = attention_alpha_concat(&p, &lay, &x, &g);
        for (a, b) in tape.alpha.data.iter().zip(&alpha.data) {
            assert!((a - b).abs() <= 1e-6);
        }
        let pf: Vec<f32> = p.iter().map(|&v| v as f32).collect();
        let xf = Tensor::from_vec(1, 5, 8, 6, x.data.iter().map(|&v| v as f32).collect());
        let gf = Tensor::from_vec(1, 7, 4, 3, g.data.iter().map(|&v| v as f32).collect());
        let (_, tf) = attention_gate(&pf, &lay, &xf, &gf).unwrap();
        let af = attention_alpha_concat(&pf, &lay, &xf, &gf);
        for (a, b) in tf.alpha.data.iter().zip(&af.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn gate_spatial_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (p, lay) = random_gate(&mut rng, 2, 2, 1, 1.0);
    assert!(attention_gate(&p, &lay, &Tensor::<f64>::zeros(1, 2, 8, 8), &Tensor::zeros(1, 2, 3, 4)).is_err());
}

fn weighted_output(model: &AttUNet<f64>, x: &Tensor<f64>, r: &[f64], mode: &Mode) -> f64 {
    let (y, _) = model.forward(x, mode).unwrap();
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

#[test]
fn backward_matches_central_differences() {
    let mut model = AttUNet::<f64>::new(AttUNetConfig::narrowed(8), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // Move batch-norm affine terms away from their trivial initial values.
    for spec in model.param_specs().to_vec() {
        if spec.name.ends_with("gamma") || spec.name.ends_with("beta") || spec.name.ends_with("bias") {
            for v in &mut model.params[spec.offset..spec.offset + spec.len()] {
                *v += rng.random::<f64>() * 0.4 - 0.2;
            }
        }
    }
    let mut x = uniform(&mut rng, 2, 12, 32, 32);
    let mode = Mode::Train {
        dropout: vec![0.2, 0.15, 0.1, 0.1, 0.1],
        seed: 23,
    };
    let (y, tape) = model.forward(&x, &mode).unwrap();
    let r: Vec<f64> = (0..y.data.len()).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut grads = vec![0.0; model.param_count()];
    let dx = model
        .backward(&tape, &Tensor::from_vec(2, 1, 32, 32, r.clone()), &mut grads, true)
        .unwrap();

    // One coordinate from every named tensor, then random ones.
    let mut coords: Vec<usize> = model.param_specs().iter().map(|s| s.offset + rng.random_range(0..s.len())).collect();
    while coords.len() < 180 {
        coords.push(rng.random_range(0..model.param_count()));
    }
    let h = 1e-7;
    let mut checked = 0;
    for &i in &coords {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = weighted_output(&model, &x, &r, &mode);
        model.params[i] = orig - h;
        let down = weighted_output(&model, &x, &r, &mode);
        model.params[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(grads[i], fd);
        assert!(e <= 1e-2, "param {i}: analytic {} vs fd {fd} (rel {e})", grads[i]);
        checked += 1;
    }
    for _ in 0..40 {
        let i = rng.random_range(0..x.data.len());
        let orig = x.data[i];
        x.data[i] = orig + h;
        let up = weighted_output(&model, &x, &r, &mode);
        x.data[i] = orig - h;
        let down = weighted_output(&model, &x, &r, &mode);
        x.data[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(dx.data[i], fd);
        assert!(e <= 1e-2, "input {i}: analytic {} vs fd {fd} (rel {e})", dx.data[i]);
        checked += 1;
    }
    assert!(checked >= 200);
}

#[test]
fn output_depends_on_nearly_every_input_pixel() {
    let model = AttUNet::<f64>::new(AttUNetConfig::narrowed(8), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut x = uniform(&mut rng, 1, 12, 64, 64);
    let (y, tape) = model.forward(&x, &Mode::Eval).unwrap();
    let ones = Tensor::from_vec(1, 1, 64, 64, vec![1.0; y.data.len()]);
    let mut grads = vec![0.0; model.param_count()];
    let dx = model.backward(&tape, &ones, &mut grads, true).unwrap();
    let p = 64 * 64;
    let live = (0..p).filter(|&k| (0..12).any(|c| dx.data[c * p + k] != 0.0)).count();
    assert!(live as f64 >= 0.99 * p as f64, "{live} of {p}");
    // Spot-check the analytic map by finite differences.
    let sum = |m: &AttUNet<f64>, x: &Tensor<f64>| m.forward(x, &Mode::Eval).unwrap().0.data.iter().sum::<f64>();
    for _ in 0..5 {
        let i = rng.random_range(0..x.data.len());
        let orig = x.data[i];
        x.data[i] = orig + 1e-6;
        let up = sum(&model, &x);
        x.data[i] = orig - 1e-6;
        let down = sum(&model, &x);
        x.data[i] = orig;
        assert!(rel_err(dx.data[i], (up - down) / 2e-6) <= 1e-2);
    }
}

#[test]
fn running_statistics_follow_training_batches() {
    let mut model = AttUNet::<f32>::new(AttUNetConfig::narrowed(8), 41).unwrap();
    let before = model.buffers.clone();
    let x = Tensor::from_vec(2, 12, 32, 32, (0..2 * 12 * 32 * 32).map(|i| (i % 7) as f32 / 7.0).collect());
    let (_, tape) = model
        .forward(&x, &Mode::Train { dropout: vec![0.0; 5], seed: 0 })
        .unwrap();
    model.update_running_stats(&tape);
    assert_ne!(before, model.buffers);
    assert!(model.buffers.iter().all(|v| v.is_finite()));
}

