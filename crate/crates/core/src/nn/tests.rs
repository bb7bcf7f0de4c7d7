use super::*;
use crate::oracle;

fn tiny_spec(norm: NormKind) -> ModelSpec {
    ModelSpec::conv_net([2, 4, 4], &[4], norm, Some(2), 3)
}

fn batch(n: usize, seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[n, 2, 4, 4], data).unwrap()
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut m = Model::<f64>::new(tiny_spec(NormKind::Layer), 0).unwrap();
    for t in m.params_mut().into_iter().rev().take(2) {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let y = m.forward(&batch(3, 1), Mode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_dense_layer() {
    let spec = ModelSpec {
        input_channels: 2,
        input_height: 1,
        input_width: 1,
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 2, outputs: 2 }],
    };
    let mut m = Model::<f32>::new(spec, 0).unwrap();
    {
        let mut p = m.params_mut();
        p[0].data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p[1].data_mut().copy_from_slice(&[0.0, 0.0]);
    }
    let x = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
    assert_eq!(m.forward(&x, Mode::Eval).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn two_layer_net_matches_straight_line_recomputation() {
    let spec = ModelSpec {
        input_channels: 3,
        input_height: 1,
        input_width: 1,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 3, outputs: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 4, outputs: 2 },
        ],
    };
    let m = Model::<f64>::new(spec, 0).unwrap();
    let x = [0.5, -1.25, 2.0];
    let p = m.params();
    let (w1, b1, w2, b2) = (p[0].tensor.data(), p[1].tensor.data(), p[2].tensor.data(), p[3].tensor.data());
    let mut hidden = [0.0; 4];
    for j in 0..4 {
        let mut s = b1[j];
        for i in 0..3 {
            s += w1[j * 3 + i] * x[i];
        }
        hidden[j] = s.max(0.0);
    }
    let mut expect = [0.0; 2];
    for j in 0..2 {
        expect[j] = b2[j] + (0..4).map(|i| w2[j * 4 + i] * hidden[i]).sum::<f64>();
    }
    let y = m.forward(&Tensor::from_vec(&[1, 3, 1, 1], x.to_vec()).unwrap(), Mode::Eval).unwrap();
    for j in 0..2 {
        assert!((y.data()[j] - expect[j]).abs() < 1e-12);
    }
}

#[test]
fn uniform_logits_loss_is_ln2() {
    let logits = Tensor::<f64>::zeros(&[1, 2]);
    let (loss, _, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(softmax_cross_entropy(&logits, &[2]), Err(Error::Label { .. })));
}

#[test]
fn duplicated_sample_has_same_gradient() {
    let spec = tiny_spec(NormKind::Layer);
    let x1 = batch(1, 4);
    let mut x2 = Tensor::zeros(&[2, 2, 4, 4]);
    x2.data_mut()[..32].copy_from_slice(x1.data());
    x2.data_mut()[32..].copy_from_slice(x1.data());
    let mut a = Model::<f64>::new(spec.clone(), 5).unwrap();
    let mut b = a.clone();
    a.loss_backward(&x1, &[2], Mode::Train, 0).unwrap();
    b.loss_backward(&x2, &[2, 2], Mode::Train, 0).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        for (ga, gb) in pa.tensor.grad().unwrap().iter().zip(pb.tensor.grad().unwrap()) {
            assert!((ga - gb).abs() < 1e-12, "{}", pa.name);
        }
    }
}

#[test]
fn gradients_accumulate_without_zeroing() {
    let mut m = Model::<f64>::new(tiny_spec(NormKind::Group), 2).unwrap();
    let x = batch(2, 6);
    m.loss_backward(&x, &[0, 1], Mode::Train, 0).unwrap();
    let once: Vec<f64> = m.params()[0].tensor.grad().unwrap().to_vec();
    m.loss_backward(&x, &[0, 1], Mode::Train, 0).unwrap();
    for (a, b) in once.iter().zip(m.params()[0].tensor.grad().unwrap()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences_for_every_norm_kind() {
    for (i, kind) in [NormKind::Batch, NormKind::Instance, NormKind::Group, NormKind::Layer].into_iter().enumerate() {
        let m = Model::<f64>::new(tiny_spec(kind), 10 + i as u64).unwrap();
        let r = oracle::gradient_check(&m, &batch(3, 20 + i as u64), &[0, 2, 1], 1e-3, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{kind:?}: {} ({})", r.max_rel_error, r.worst);
        assert!(r.skipped_kinks * 10 < r.checked, "{kind:?}: {} kinks", r.skipped_kinks);
    }
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let a = Model::<f32>::new(tiny_spec(NormKind::Batch), 42).unwrap();
    let b = Model::<f32>::new(tiny_spec(NormKind::Batch), 42).unwrap();
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert_eq!(pa.tensor.data(), pb.tensor.data());
        if pa.name.ends_with("bias") || pa.name.ends_with("beta") {
            assert!(pa.tensor.data().iter().all(|&v| v == 0.0));
        }
        if pa.name.ends_with("gamma") {
            assert!(pa.tensor.data().iter().all(|&v| v == 1.0));
        }
    }
}

#[test]
fn init_variance_is_two_over_fan_in() {
    let spec = ModelSpec {
        input_channels: 512,
        input_height: 1,
        input_width: 1,
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 512, outputs: 64 }],
    };
    let m = Model::<f64>::new(spec, 9).unwrap();
    let w = m.params()[0].tensor.data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
    assert!((var / (2.0 / 512.0) - 1.0).abs() < 0.1, "{var}");
}

#[test]
fn shape_errors_name_the_layer() {
    let mut spec = tiny_spec(NormKind::Layer);
    if let LayerSpec::Dense { inputs, .. } = spec.layers.last_mut().unwrap() {
        *inputs += 1;
    }
    match spec.validate() {
        Err(Error::Layer { index, kind, .. }) => assert_eq!((index, kind), (4, "dense")),
        other => panic!("{other:?}"),
    }
    let m = Model::<f32>::new(tiny_spec(NormKind::Layer), 0).unwrap();
    assert!(m.forward(&Tensor::zeros(&[1, 3, 4, 4]), Mode::Eval).is_err());
    let no_head = ModelSpec { layers: vec![LayerSpec::Relu], ..tiny_spec(NormKind::Layer) };
    assert!(no_head.validate().is_err());
}

#[test]
fn linearly_separable_toy_problem_is_learned() {
    use crate::optim::{Sgd, SgdConfig};
    let spec = ModelSpec {
        input_channels: 2,
        input_height: 1,
        input_width: 1,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 2, outputs: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 8, outputs: 2 },
        ],
    };
    let mut m = Model::<f32>::new(spec, 1).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..32 {
        let t = i as f32 / 32.0;
        let (a, b) = ((t * 6.3).cos(), (t * 6.3).sin());
        let label = usize::from(a + 0.5 * b > 0.0);
        let push = if label == 1 { 0.5 } else { -0.5 };
        xs.extend_from_slice(&[a + push, b + push * 0.5]);
        ys.push(label);
    }
    let x = Tensor::from_vec(&[32, 2, 1, 1], xs).unwrap();
    let cfg = SgdConfig {
        base_lr: 0.1,
        momentum: 0.9,
        epochs: 1,
        warmup_epochs: 0,
        batch_size: 32,
    };
    let mut opt = Sgd::new(cfg).unwrap();
    let trainable = vec![true; 4];
    let mut last = f64::MAX;
    for _ in 0..200 {
        m.zero_grad();
        last = m.loss_backward(&x, &ys, Mode::Train, 0).unwrap().loss;
        // constant learning rate: stay at progress 0 with no warmup
        opt.step(&mut m.params_mut(), &trainable, 0.0);
    }
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn replace_head_keeps_body() {
    let m = Model::<f32>::new(ModelSpec::conv_net([1, 6, 6], &[4], NormKind::Batch, None, 5), 3).unwrap();
    let mut swapped = m.clone();
    swapped.replace_head(3, 8).unwrap();
    assert_eq!(swapped.num_classes(), 3);
    let body = |l: usize| l != m.head_index();
    assert_eq!(m.param_checksum(body), swapped.param_checksum(body));
    let mut same = m.clone();
    same.replace_head(5, 8).unwrap();
    assert_ne!(m.param_checksum(|_| true), same.param_checksum(|_| true));
    assert!(swapped.replace_head(1, 0).is_err());
}
