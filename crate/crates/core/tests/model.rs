mod common;

use std::path::PathBuf;

use common::{attention_oracle, end_to_end_grad_error, max_rel_err, random_tensor, random_views, randomize};
use refine3d::model::{param_count, Mode, ModelConfig, Partition, Refine3dNet};
use refine3d::{Graph, Tensor, ViewSet};

fn attention_weights(net: &Refine3dNet<f64>, heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let get = |n: String| net.params().get(&n).unwrap().tensor.data().to_vec();
    (
        (0..heads).map(|h| get(format!("attention.head{h}.query"))).collect(),
        (0..heads).map(|h| get(format!("attention.head{h}.key"))).collect(),
        (0..heads).map(|h| get(format!("attention.head{h}.value"))).collect(),
        get("attention.output".into()),
    )
}

#[test]
fn attention_matches_loop_transcription() {
    for seed in 0..4 {
        let mut net = Refine3dNet::<f64>::new(ModelConfig::desk(), seed).unwrap();
        randomize(&mut net, "attention.output", seed + 50, 0.2);
        let (wq, wk, wv, wo) = attention_weights(&net, 2);
        let x = random_tensor(&[3, 64], seed + 7);
        let (tok_o, fused_o) = attention_oracle(x.data(), 3, 64, &wq, &wk, &wv, &wo);
        let g = Graph::new();
        let p = net.bind(&g, |_| false);
        let (tok, fused) = net.attend(&p, g.constant(x), 3).unwrap();
        assert!(max_rel_err(tok.value().data(), &tok_o) <= 1e-6);
        assert!(max_rel_err(fused.value().data(), &fused_o) <= 1e-6);
        assert_eq!(fused.shape(), vec![1, 64]);
    }
}

#[test]
fn zero_output_projection_is_identity() {
    let net = Refine3dNet::<f64>::new(ModelConfig::desk(), 3).unwrap();
    let x = random_tensor(&[5, 64], 9);
    let g = Graph::new();
    let p = net.bind(&g, |_| false);
    let (tok, fused) = net.attend(&p, g.constant(x.clone()), 5).unwrap();
    assert!(tok.value().bit_eq(&x));
    for j in 0..64 {
        let mean = (0..5).map(|t| x.data()[t * 64 + j]).sum::<f64>() / 5.0;
        assert!((fused.value().data()[j] - mean).abs() < 1e-15);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut net = Refine3dNet::<f64>::new(ModelConfig::desk(), 4).unwrap();
    randomize(&mut net, "attention.output", 1, 0.2);
    let x = random_tensor(&[4, 64], 2);
    let perm = [2usize, 0, 3, 1];
    let px = Tensor::from_fn([4, 64], |i| x.data()[perm[i / 64] * 64 + i % 64]);
    let g = Graph::new();
    let p = net.bind(&g, |_| false);
    let (a, _) = net.attend(&p, g.constant(x), 4).unwrap();
    let (b, _) = net.attend(&p, g.constant(px), 4).unwrap();
    let (a, b) = (a.value(), b.value());
    for (t, &src) in perm.iter().enumerate() {
        for j in 0..64 {
            assert!((b.data()[t * 64 + j] - a.data()[src * 64 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_tokens_give_identical_outputs() {
    let mut net = Refine3dNet::<f64>::new(ModelConfig::desk(), 5).unwrap();
    randomize(&mut net, "attention.output", 5, 0.2);
    let row = random_tensor(&[64], 1);
    let x = Tensor::from_fn([2, 64], |i| row.data()[i % 64]);
    let g = Graph::new();
    let p = net.bind(&g, |_| false);
    let (tok, fused) = net.attend(&p, g.constant(x), 2).unwrap();
    let t = tok.value();
    assert_eq!(t.data()[..64], t.data()[64..]);
    assert_eq!(fused.value().data(), &t.data()[..64]);
}

#[test]
fn empty_view_set_is_rejected() {
    assert!(ViewSet::new(Vec::new()).is_err());
    let net = Refine3dNet::<f64>::new(ModelConfig::desk(), 0).unwrap();
    let g = Graph::new();
    let p = net.bind(&g, |_| false);
    assert!(net.attend(&p, g.constant(Tensor::zeros([0, 64])), 1).is_err());
    assert!(net.attend(&p, g.constant(Tensor::zeros([3, 64])), 2).is_err());
}

#[test]
fn desk_shapes_and_ranges() {
    let net = Refine3dNet::<f32>::new(ModelConfig::desk(), 11).unwrap();
    let g = Graph::new();
    let p = net.bind(&g, |_| false);
    let zero = g.constant(Tensor::zeros([1, 3, 32, 32]));
    let z = net.encode(&p, zero).unwrap();
    assert_eq!(z.shape(), vec![1, 64]);
    assert!(z.value().all_finite());

    let rec = net.reconstruct(&random_views(3, 32, 1)).unwrap();
    assert_eq!(rec.decoded.dim(), 16);
    for v in rec.decoded.values().iter().chain(rec.refined.values()) {
        assert!(*v > 0.0 && *v < 1.0);
    }

    let half = g.constant(Tensor::full([1, 1, 16, 16, 16], 0.5f32));
    let out = net.refine(&p, half, Mode::Eval).unwrap();
    assert_eq!(out.refined.shape(), vec![1, 1, 16, 16, 16]);
    assert!(out.refined.value().data().iter().all(|&v| v > 0.0 && v < 1.0));

    let wrong = random_views(1, 24, 2);
    let err = net.reconstruct(&wrong).unwrap_err().to_string();
    assert!(err.contains("32×32"), "{err}");
}

#[test]
fn single_view_matches_batched_pipeline() {
    let net = Refine3dNet::<f32>::new(ModelConfig::desk(), 12).unwrap();
    let a = random_views(1, 32, 3);
    let b = random_views(1, 32, 4);
    let solo = net.reconstruct(&a).unwrap();
    let both = net.reconstruct_batch(&[&a, &b]).unwrap();
    let d = solo.refined.values().iter().zip(both[0].refined.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(d < 1e-6, "{d}");
}

/// Closed-form count, written out per layer type from the architecture
/// description rather than from the model's planner.
fn closed_form(cfg: &ModelConfig) -> (usize, usize, usize) {
    let conv = |cin: usize, cout: usize, taps: usize, bias: bool| cin * cout * taps + if bias { cout } else { 0 };
    let mut base = 0;
    let mut cin = 3;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        base += conv(cin, c, 9, true) + conv(c, c, 9, true);
        if i != 3 {
            base += conv(cin, c, 1, true);
        }
        cin = c;
    }
    let side = cfg.input_size >> cfg.encoder_channels.len();
    base += conv(cin * side * side, cfg.latent_dim, 1, true);
    let mut cin = cfg.latent_dim / 8;
    for &c in &cfg.decoder_channels {
        base += conv(cin, c, 27, true) + conv(c, c, 27, true) + conv(cin, c, 1, true);
        cin = c;
    }
    base += conv(cin, 1, 1, true);

    let l = cfg.latent_dim;
    let att = 3 * l * l + l * l;

    let r = &cfg.refiner_channels;
    let mut refine = 0;
    let mut cin = 1;
    for &c in r {
        refine += conv(cin, c, 64, false) + 2 * c;
        cin = c;
    }
    for j in 0..r.len() {
        let out = if j + 1 < r.len() { r[r.len() - 2 - j] } else { r[0] };
        refine += conv(cin, out, 64, false) + 2 * out;
        cin = if j + 1 < r.len() { 2 * out } else { out + 1 };
    }
    refine += conv(cin, 1, 27, true);
    (base, att, refine)
}

#[test]
fn desk_parameter_count_matches_closed_form() {
    let cfg = ModelConfig::desk();
    let c = param_count(&cfg);
    assert_eq!((c.theta_base, c.phi_att, c.phi_ref), closed_form(&cfg));
    assert_eq!((c.theta_base, c.phi_att, c.phi_ref), (51_745, 16_384, 99_236));
    let net = Refine3dNet::<f32>::new(cfg, 0).unwrap();
    assert_eq!(net.param_count(), c);
    assert_eq!(net.params().numel(), c.total());
}

#[test]
fn paper_parameter_count_is_reported() {
    let cfg = ModelConfig::paper();
    let c = param_count(&cfg);
    assert_eq!((c.theta_base, c.phi_att, c.phi_ref), closed_form(&cfg));
    println!("paper preset parameters: {} ({} / {} / {})", c.total(), c.theta_base, c.phi_att, c.phi_ref);
}

#[test]
fn zero_layer_config_has_no_parameters() {
    let cfg = ModelConfig {
        name: "empty".into(),
        input_size: 8,
        encoder_channels: vec![],
        latent_dim: 0,
        heads: 0,
        decoder_channels: vec![],
        voxel_dim: 2,
        refiner_channels: vec![],
    };
    assert_eq!(param_count(&cfg).total(), 0);
    assert!(cfg.validate().is_err());
}

#[test]
fn partitions_are_disjoint_and_stable() {
    let a = Refine3dNet::<f32>::new(ModelConfig::desk(), 1).unwrap();
    let b = Refine3dNet::<f32>::new(ModelConfig::desk(), 2).unwrap();
    let names_a: Vec<_> = a.params().iter().map(|(n, p)| (n.to_string(), p.partition)).collect();
    let names_b: Vec<_> = b.params().iter().map(|(n, p)| (n.to_string(), p.partition)).collect();
    assert_eq!(names_a, names_b);
    for (n, p) in &names_a {
        let expect = if n.starts_with("attention") {
            Partition::PhiAtt
        } else if n.starts_with("refiner") {
            Partition::PhiRef
        } else {
            Partition::ThetaBase
        };
        assert_eq!(*p, expect, "{n}");
    }
    let again = Refine3dNet::<f32>::new(ModelConfig::desk(), 1).unwrap();
    assert_eq!(a.params(), again.params());
}

#[test]
fn end_to_end_parameter_gradients_match_finite_differences() {
    let (worst, at, picks) = end_to_end_grad_error(21);
    assert!(picks >= 200, "{picks}");
    println!("end-to-end max relative error {worst:.3e} at {at}");
    assert!(worst <= 1e-4, "{at}");
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/desk_forward.json")
}

#[test]
fn desk_forward_regression_fixture() {
    let net = Refine3dNet::<f32>::new(ModelConfig::desk(), 2024).unwrap();
    let rec = net.reconstruct(&random_views(2, 32, 2025)).unwrap();
    let summary = |v: &[f32]| -> Vec<f64> {
        let mut s: Vec<f64> = v.iter().step_by(257).map(|&x| x as f64).collect();
        s.push(v.iter().map(|&x| x as f64).sum::<f64>());
        s
    };
    let current = serde_json::json!({
        "decoded": summary(rec.decoded.values()),
        "refined": summary(rec.refined.values()),
    });
    let path = fixture_path();
    if std::env::var_os("REFINE3D_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&current).unwrap()).unwrap();
    }
    let stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["decoded", "refined"] {
        let a = current[key].as_array().unwrap();
        let b = stored[key].as_array().unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{key}: {x} vs {y}");
        }
    }
}
