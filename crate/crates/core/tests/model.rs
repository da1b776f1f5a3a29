mod common;

use common::{rng, toy_network_fd_error};
use rand::Rng;
use riunet::loss::{argmax_channels, masked_weighted_cross_entropy};
use riunet::model::{ModelConfig, UNet};
use riunet::tensor::{adam_step, AdamConfig, Graph, Mode, Tensor};

fn cfg(depth: usize, base: usize, k: usize, h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        num_classes: k,
        depth_levels: depth,
        base_features: base,
        input_height: h,
        input_width: w,
    }
}

/// Parameter count from the layer shapes, written out independently of the
/// model code.
fn hand_count(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let bn = |ch: usize| 2 * ch;
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
    let f = |l: usize| c.base_features * (1 << l);
    let mut total = 0;
    let mut cin = c.in_channels;
    for l in 0..c.depth_levels {
        total += block(cin, f(l));
        cin = f(l);
    }
    total += block(cin, f(c.depth_levels));
    for l in 0..c.depth_levels {
        total += 2 * f(l) * f(l) * 4 + f(l);
        total += block(2 * f(l), f(l));
    }
    total + conv(c.base_features, c.num_classes, 1)
}

#[test]
fn toy_parameter_count_matches_hand_count() {
    let c = cfg(1, 4, 2, 8, 16);
    let m = UNet::<f32>::build(c, 0).unwrap();
    // enc0 240, bottleneck 912, up0 132, dec0 456, head 10
    assert_eq!(m.parameter_count(), 1750);
    assert_eq!(hand_count(&c), 1750);
    for c in [cfg(2, 8, 4, 16, 32), ModelConfig::default()] {
        assert_eq!(UNet::<f32>::build(c, 0).unwrap().parameter_count(), hand_count(&c));
    }
}

#[test]
fn output_shape_and_finiteness() {
    let m = UNet::<f32>::build(cfg(2, 4, 3, 16, 32), 5).unwrap();
    let zeros = m.predict(&Tensor::zeros(&[2, 2, 16, 32])).unwrap();
    assert_eq!(zeros.shape(), &[2, 3, 16, 32]);
    assert!(zeros.all_finite());
    let x = Tensor::<f32>::uniform(&[1, 2, 16, 32], -1.0, 1.0, &mut rng(1));
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 16, 32]);
    assert!(y.all_finite());
}

#[test]
fn eval_is_pure_and_train_updates_running_stats() {
    let mut m = UNet::<f32>::build(cfg(1, 4, 2, 8, 16), 3).unwrap();
    let x = Tensor::<f32>::uniform(&[2, 2, 8, 16], -1.0, 1.0, &mut rng(2));
    let before: Vec<Vec<f32>> = m.batchnorms().iter().map(|b| b.running_mean.clone()).collect();
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    m.forward(&mut g, xv, Mode::Eval).unwrap();
    let after_eval: Vec<Vec<f32>> = m.batchnorms().iter().map(|b| b.running_mean.clone()).collect();
    assert_eq!(before, after_eval);
    let mut g = Graph::new();
    let xv = g.constant(x);
    m.forward(&mut g, xv, Mode::Train).unwrap();
    let after_train: Vec<Vec<f32>> = m.batchnorms().iter().map(|b| b.running_mean.clone()).collect();
    assert_ne!(before, after_train);
}

#[test]
fn toy_network_gradients_match_finite_differences() {
    let (worst, checked) = toy_network_fd_error(11);
    assert!(worst < 1e-4, "{worst}");
    assert!(checked > 100);
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.riuw");
    let c = cfg(2, 4, 3, 16, 32);
    let mut m = UNet::<f32>::build(c, 9).unwrap();
    let x = Tensor::<f32>::uniform(&[2, 2, 16, 32], -1.0, 1.0, &mut rng(4));
    // one optimizer step so running stats and moments are non-trivial
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = m.forward(&mut g, xv, Mode::Train).unwrap();
    let s = g.sum(pass.logits);
    let mut grads = g.backward(s).unwrap();
    m.collect_grads(&pass, &mut grads).unwrap();
    adam_step(m.parameters_mut(), &AdamConfig::default()).unwrap();

    m.save_weights(&path, true).unwrap();
    let back = UNet::<f32>::load_weights(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (p, q) in m.parameters().iter().zip(back.parameters()) {
        assert_eq!(p.value, q.value);
        assert_eq!(p.adam_m, q.adam_m);
        assert_eq!(p.adam_v, q.adam_v);
        assert_eq!(p.step_count, q.step_count);
    }
    for (a, b) in m.batchnorms().iter().zip(back.batchnorms()) {
        assert_eq!(a.running_mean, b.running_mean);
        assert_eq!(a.running_var, b.running_var);
    }
    let ya = m.predict(&x).unwrap();
    let yb = back.predict(&x).unwrap();
    assert_eq!(
        ya.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        yb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(std::fs::read(&path).unwrap(), back.to_checkpoint(true).to_bytes());

    let weights_only = back.to_checkpoint(false);
    let mut fresh = UNet::<f32>::build(c, 0).unwrap();
    fresh.load_state(&weights_only).unwrap();
    assert!(fresh.parameters().iter().all(|p| p.step_count == 0));
}

#[test]
fn mismatched_config_names_first_parameter() {
    let ck = UNet::<f32>::build(cfg(1, 4, 2, 8, 16), 0).unwrap().to_checkpoint(false);
    let mut wider = UNet::<f32>::build(cfg(1, 8, 2, 8, 16), 0).unwrap();
    let err = wider.load_state(&ck).unwrap_err().to_string();
    assert!(err.contains("enc0.conv1.weight"), "{err}");
    let mut classes = UNet::<f32>::build(cfg(1, 4, 3, 8, 16), 0).unwrap();
    let err = classes.load_state(&ck).unwrap_err().to_string();
    assert!(err.contains("head.weight"), "{err}");
    let mut deeper = UNet::<f32>::build(cfg(2, 4, 2, 8, 16), 0).unwrap();
    let before = deeper.parameters()[0].value.clone();
    let err = deeper.load_state(&ck).unwrap_err().to_string();
    assert!(err.contains("enc1.conv1.weight"), "{err}");
    assert_eq!(deeper.parameters()[0].value, before);
}

#[test]
fn toy_model_memorizes_one_image() {
    let (h, w) = (16, 32);
    let mut r = rng(21);
    let mut labels = vec![0u8; h * w];
    for _ in 0..4 {
        let (y0, x0) = (r.gen_range(2..h - 5), r.gen_range(0..w - 8));
        let (bh, bw) = (r.gen_range(3..6), r.gen_range(3..8));
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                labels[y * w + x] = 1;
            }
        }
    }
    let mask: Vec<u8> = (0..h * w).map(|_| u8::from(r.gen_bool(0.9))).collect();
    let mut data = vec![0f32; 2 * h * w];
    for i in 0..h * w {
        if mask[i] == 1 {
            let base = if labels[i] == 1 { -0.5 } else { 0.8 };
            data[i] = base + r.gen_range(-0.3..0.3);
            data[h * w + i] = (i / w) as f32 / h as f32 - 0.5 + r.gen_range(-0.2..0.2);
        }
    }
    let x = Tensor::from_vec(&[1, 2, h, w], data).unwrap();
    let weights = vec![1f32; h * w];
    let mut m = UNet::<f32>::build(cfg(1, 4, 2, h, w), 3).unwrap();
    let adam = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    for _ in 0..200 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pass = m.forward(&mut g, xv, Mode::Train).unwrap();
        let l = masked_weighted_cross_entropy(&mut g, pass.logits, &labels, &mask, &weights).unwrap();
        let mut grads = g.backward(l.value).unwrap();
        m.collect_grads(&pass, &mut grads).unwrap();
        adam_step(m.parameters_mut(), &adam).unwrap();
    }
    let pred = argmax_channels(&m.predict(&x).unwrap()).unwrap();
    let valid = mask.iter().filter(|&&v| v == 1).count();
    let correct = (0..h * w).filter(|&i| mask[i] == 1 && pred[i] == labels[i]).count();
    let acc = correct as f64 / valid as f64;
    assert!(acc >= 0.99, "accuracy {acc}");
}
