use super::*;
use crate::rng;
use crate::tensor::{Graph, Tensor};

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 6,
        w_dim: 5,
        mapping_layers: 2,
        resolutions: vec![4, 8, 16],
        channels_per_resolution: vec![4, 3, 2],
        ..Default::default()
    }
}

fn latent(v: Vec<f64>, space: LatentSpace) -> LatentVector {
    LatentVector::new(v, space).unwrap()
}

#[test]
fn identity_mapping_passes_positive_z() {
    let cfg = GeneratorConfig {
        z_dim: 4,
        w_dim: 4,
        mapping_layers: 1,
        ..tiny()
    };
    let mut w = init_generator(&cfg, 0).unwrap();
    w.set("mapping.0.weight", Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
    let z = latent(vec![0.5, 1.5, 2.0, 3.25], LatentSpace::Z);
    let out = map_latent(&w, &z).unwrap();
    assert_eq!(out.space, LatentSpace::W);
    assert!(out.values.bit_eq(&z.values));
}

#[test]
fn zero_mapping_weights_yield_last_bias() {
    let cfg = tiny();
    let mut w = init_generator(&cfg, 1).unwrap();
    for i in 0..cfg.mapping_layers {
        let shape = w.get(&mapping_weight(i)).shape().to_vec();
        w.set(&mapping_weight(i), Tensor::zeros(&shape));
    }
    let bias = Tensor::from_fn(&[cfg.w_dim], |i| i as f64 - 1.5);
    w.set(&mapping_bias(cfg.mapping_layers - 1), bias.clone());
    let z = latent(vec![1.0, -2.0, 0.3, 0.0, 4.0, 2.0], LatentSpace::Z);
    assert_eq!(map_latent(&w, &z).unwrap().values, bias);
}

#[test]
fn mapping_matches_matmul_oracle() {
    let cfg = tiny();
    let w = init_generator(&cfg, 2).unwrap();
    let mut r = rng::stream(9, 0);
    let z = rng::normal_vec(cfg.z_dim, &mut r);
    let mut h = z.clone();
    for layer in 0..cfg.mapping_layers {
        let wt = w.get(&mapping_weight(layer));
        let b = w.get(&mapping_bias(layer));
        let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
        h = (0..rows)
            .map(|o| {
                let v: f64 = (0..cols).map(|i| wt.data()[o * cols + i] * h[i]).sum::<f64>() + b.data()[o];
                if layer + 1 < cfg.mapping_layers && v <= 0.0 {
                    0.2 * v
                } else {
                    v
                }
            })
            .collect();
    }
    let got = map_latent(&w, &latent(z, LatentSpace::Z)).unwrap();
    for (a, b) in got.as_slice().iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mapping_rejects_wrong_dimension() {
    let w = init_generator(&tiny(), 0).unwrap();
    let z = latent(vec![0.0; 3], LatentSpace::Z);
    assert!(matches!(map_latent(&w, &z), Err(SynthError::Dimension { .. })));
    let ws = latent(vec![0.0; 5], LatentSpace::W);
    assert!(synthesize(&w, &latent(vec![0.0; 4], LatentSpace::W)).is_err());
    assert!(synthesize(&w, &ws).is_ok());
}

#[test]
fn truncation_examples() {
    let w = latent(vec![2.0, 0.0], LatentSpace::W);
    let m = latent(vec![0.0, 0.0], LatentSpace::W);
    assert_eq!(truncate(&w, &m, 1.0), w);
    assert_eq!(truncate(&w, &m, 0.0), m);
    assert_eq!(truncate(&w, &m, 0.5).as_slice(), &[1.0, 0.0]);
}

#[test]
fn zero_conv_weights_give_summed_rgb_biases() {
    let cfg = tiny();
    let mut w = init_generator(&cfg, 3).unwrap();
    let mut expected = [0.0f64; 3];
    for (i, &res) in cfg.resolutions.iter().enumerate() {
        let n = BlockNames::new(res);
        for name in [&n.conv_weight, &n.torgb_weight] {
            let shape = w.get(name).shape().to_vec();
            w.set(name, Tensor::zeros(&shape));
        }
        let b = Tensor::from_fn(&[3], |c| 0.1 * (c as f64 + 1.0) * (i as f64 + 1.0));
        for (e, v) in expected.iter_mut().zip(b.data()) {
            *e += v;
        }
        w.set(&n.torgb_bias, b);
    }
    let img = synthesize(&w, &latent(vec![0.3, -1.0, 2.0, 0.5, 0.1], LatentSpace::W)).unwrap();
    assert_eq!(img.shape(), &[3, 16, 16]);
    for c in 0..3 {
        for p in 0..256 {
            assert_eq!(img.data()[c * 256 + p], expected[c]);
        }
    }
}

#[test]
fn default_output_shape_and_determinism() {
    let cfg = GeneratorConfig::default();
    let w = init_generator(&cfg, 4).unwrap();
    let mut r = rng::stream(4, 0);
    let wl = latent(rng::normal_vec(64, &mut r), LatentSpace::W);
    let a = synthesize(&w, &wl).unwrap();
    assert_eq!(a.shape(), &[3, 32, 32]);
    assert!(a.is_finite());
    assert!(a.bit_eq(&synthesize(&w, &wl).unwrap()));
}

#[test]
fn noise_only_with_seed_and_flag() {
    let mut cfg = tiny();
    cfg.noise_enabled = true;
    let w = init_generator(&cfg, 5).unwrap();
    let ws = Tensor::full(&[1, 5], 0.2);
    let plain = synthesize_batch(&w, &ws, &ForwardOptions::default()).unwrap();
    let opts = ForwardOptions {
        noise_seed: Some(1),
        ..Default::default()
    };
    let noisy = synthesize_batch(&w, &ws, &opts).unwrap();
    assert!(!plain.bit_eq(&noisy));
    assert!(noisy.bit_eq(&synthesize_batch(&w, &ws, &opts).unwrap()));
}

/// With only one layer's style depending on `w` and demodulation off, the
/// network is piecewise linear in `w`.
#[test]
fn piecewise_linear_in_w_without_demodulation() {
    let cfg = tiny();
    let mut w = init_generator(&cfg, 6).unwrap();
    for (i, &res) in cfg.resolutions.iter().enumerate() {
        let n = BlockNames::new(res);
        let mut names = vec![n.torgb_affine_weight.clone()];
        if i > 0 {
            names.push(n.affine_weight.clone());
        }
        for name in names {
            let shape = w.get(&name).shape().to_vec();
            w.set(&name, Tensor::zeros(&shape));
        }
    }
    let opts = ForwardOptions {
        demodulate: false,
        noise_seed: None,
    };
    let mut r = rng::stream(6, 1);
    let base = rng::normal_vec(5, &mut r);
    let dir = rng::normal_vec(5, &mut r);
    let mut checked = 0;
    for step in [1e-3, 1e-4, 1e-5, 1e-6] {
        let ws = Tensor::from_fn(&[3, 5], |k| base[k % 5] + (k / 5) as f64 * step * dir[k % 5]);
        // Collect leaky-ReLU pre-activation signs to confirm no kink is crossed.
        let mut g = Graph::new();
        let p = GraphParams::constant(&mut g, &w);
        let wv = g.constant(ws);
        let out = synthesis_forward(&mut g, &p, &cfg, wv, &opts).unwrap();
        let img = g.value(out.image);
        let n = img.numel() / 3;
        let rows: Vec<&[f64]> = (0..3).map(|b| &img.data()[b * n..(b + 1) * n]).collect();
        let residual = (0..n)
            .map(|k| (rows[0][k] - 2.0 * rows[1][k] + rows[2][k]).abs())
            .fold(0.0, f64::max);
        let feats = g.value(out.features);
        let fnum = feats.numel() / 3;
        let same_side = (0..fnum).all(|k| {
            let s: Vec<bool> = (0..3).map(|b| feats.data()[b * fnum + k] > 0.0).collect();
            s[0] == s[1] && s[1] == s[2]
        });
        if same_side {
            assert!(residual < 1e-8, "residual {residual} at step {step}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

/// Empirical mean of `f(z)` for a fresh two-layer mapping versus its
/// analytic expectation `W2 · 0.8·σ_j/√(2π)`, with `σ_j = ‖W1[j]‖`.
#[test]
fn mapped_latent_mean_matches_expectation() {
    let cfg = GeneratorConfig::default();
    let weights = init_generator(&cfg, 7).unwrap();
    let k = 10_000;
    let mut r = rng::stream(7, 1);
    let z = rng::normal_tensor(&[k, cfg.z_dim], &mut r);
    let w = map_batch(&weights, &z).unwrap();
    assert!(w.is_finite());

    let w1 = weights.get("mapping.0.weight");
    let w2 = weights.get("mapping.1.weight");
    let d = cfg.w_dim;
    let hidden_mean: Vec<f64> = (0..d)
        .map(|j| {
            let sigma = (0..cfg.z_dim).map(|i| w1.data()[j * cfg.z_dim + i].powi(2)).sum::<f64>().sqrt();
            0.8 * sigma / (2.0 * std::f64::consts::PI).sqrt()
        })
        .collect();
    for o in 0..d {
        let expect: f64 = (0..d).map(|j| w2.data()[o * d + j] * hidden_mean[j]).sum();
        let col: Vec<f64> = (0..k).map(|s| w.data()[s * d + o]).collect();
        let mean = col.iter().sum::<f64>() / k as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let se = (var / k as f64).sqrt();
        assert!((mean - expect).abs() < 5.0 * se, "coord {o}: {mean} vs {expect} (se {se})");
    }
}
