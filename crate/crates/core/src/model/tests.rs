use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tensor};
use crate::mask::{sample_tube_mask, Grid, MaskSpec};
use crate::synth::{gen_motion_clip, image_as_clip, MotionClass, MotionKind, VideoClip};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn clip() -> VideoClip {
    gen_motion_clip(MotionClass::from_kind(MotionKind::RotateCw), 3)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn zero(t: &mut Tensor) {
    *t = Tensor::zeros(t.shape()).requires_grad_();
}

#[test]
fn patchify_desk_clip() {
    let tokens = patchify(&clip(), 8, 2).unwrap();
    assert_eq!(tokens.grid, Grid::new(4, 4, 4).unwrap());
    assert_eq!(tokens.pixels.shape(), &[64, 128]);
    assert!(patchify(&clip(), 5, 2).is_err());
    assert!(patchify(&clip(), 8, 3).is_err());
}

#[test]
fn patchify_image_uses_single_frames() {
    let img = Tensor::new(&[32, 32, 1], vec![0.5; 1024]).unwrap();
    let tokens = patchify(&image_as_clip(&img, None).unwrap(), 8, 2).unwrap();
    assert_eq!(tokens.grid.t, 1);
    assert_eq!(tokens.pixels.shape(), &[16, 64]);
}

#[test]
fn one_pixel_changes_one_token() {
    let a = clip();
    let mut data = a.frames.to_vec();
    // Frame 5, row 17, column 30: tubelet block 2, spatial (2, 3).
    let idx = (5 * 32 + 17) * 32 + 30;
    data[idx] = 1.0 - data[idx];
    let b = VideoClip::new(Tensor::new(&[8, 32, 32, 1], data).unwrap(), a.label, "x").unwrap();
    let (ta, tb) = (patchify(&a, 8, 2).unwrap(), patchify(&b, 8, 2).unwrap());
    let changed: Vec<usize> = (0..64)
        .filter(|&i| ta.pixels.data()[i * 128..(i + 1) * 128] != tb.pixels.data()[i * 128..(i + 1) * 128])
        .collect();
    assert_eq!(changed, vec![2 * 16 + 2 * 4 + 3]);
}

#[test]
fn zero_residual_branches_pass_embeddings_through() {
    let mut enc = Encoder::new(ModelConfig::default(), &mut rng(0)).unwrap();
    for b in &mut enc.blocks {
        zero(&mut b.proj.w);
        zero(&mut b.ff2.w);
    }
    let tokens = patchify(&clip(), 8, 2).unwrap();
    let out = enc.encode(&tokens, None).unwrap();
    let expected = enc.norm.forward(&enc.embed_tokens(&tokens).unwrap()).unwrap();
    assert!(close(out.data(), expected.data(), 1e-12));
}

#[test]
fn attention_is_permutation_equivariant() {
    let enc = Encoder::new(ModelConfig::default(), &mut rng(1)).unwrap();
    let tokens = patchify(&clip(), 8, 2).unwrap();
    let x = enc.embed_tokens(&tokens).unwrap();
    let mut order: Vec<usize> = (0..64).collect();
    order.swap(3, 40);
    let out = enc.transform(&x).unwrap();
    let permuted = enc.transform(&x.gather_rows(&order).unwrap()).unwrap();
    assert!(close(permuted.data(), out.gather_rows(&order).unwrap().data(), 1e-12));
}

#[test]
fn encoding_is_deterministic_and_full_mask_matches() {
    let enc = Encoder::new(ModelConfig::default(), &mut rng(2)).unwrap().frozen();
    let tokens = patchify(&clip(), 8, 2).unwrap();
    let a = enc.encode(&tokens, None).unwrap();
    let b = enc.encode(&tokens, None).unwrap();
    assert_eq!(a.data(), b.data());
    let all: Vec<usize> = (0..64).collect();
    let via_rows = enc.transform(&enc.embed_tokens(&tokens).unwrap().gather_rows(&all).unwrap()).unwrap();
    assert_eq!(a.data(), via_rows.data());
}

#[test]
fn visible_encoding_returns_visible_rows() {
    let enc = Encoder::new(ModelConfig::default(), &mut rng(3)).unwrap();
    let tokens = patchify(&clip(), 8, 2).unwrap();
    let mask = sample_tube_mask(tokens.grid, 0.5, &mut rng(3)).unwrap();
    let z = enc.encode(&tokens, Some(&mask)).unwrap();
    assert_eq!(z.shape(), &[mask.n_visible(), 32]);
    let other = MaskSpec::from_visible(Grid::new(1, 4, 4).unwrap(), (0..16).map(|i| i < 8).collect()).unwrap();
    assert!(enc.encode(&tokens, Some(&other)).is_err());
}

#[test]
fn image_embeds_like_a_repeated_frame() {
    let enc = Encoder::new(ModelConfig::default(), &mut rng(4)).unwrap();
    let frame: Vec<f64> = clip().frames.data()[..1024].to_vec();
    let img = image_as_clip(&Tensor::new(&[32, 32, 1], frame.clone()).unwrap(), None).unwrap();
    let still = VideoClip::new(Tensor::new(&[2, 32, 32, 1], [frame.clone(), frame].concat()).unwrap(), None, "x").unwrap();
    let a = enc.embed_tokens(&patchify(&img, 8, 2).unwrap()).unwrap();
    let b = enc.embed_tokens(&patchify(&still, 8, 2).unwrap()).unwrap();
    assert!(close(a.data(), b.data(), 1e-12));
    let z1 = enc.encode(&patchify(&img, 8, 2).unwrap(), None).unwrap();
    let z2 = enc.encode(&patchify(&img, 8, 2).unwrap(), None).unwrap();
    assert_eq!(z1.data(), z2.data());
}

#[test]
fn predictor_shapes_and_query_equivariance() {
    let cfg = ModelConfig::default();
    let mut r = rng(5);
    let enc = Encoder::new(cfg, &mut r).unwrap();
    let heads = Heads::new(&cfg, HeadLayout::default(), &mut r);
    let tokens = patchify(&clip(), 8, 2).unwrap();
    let mask = sample_tube_mask(tokens.grid, 0.5, &mut r).unwrap();
    let z = enc.encode(&tokens, Some(&mask)).unwrap();
    let pred = heads.predictor.predict(&z, &mask).unwrap();
    assert_eq!(pred.shape(), &[mask.n_targets, 32]);

    let pos = sinusoidal_positions(4, 16, 32);
    let vis = mask.visible_indices();
    let tgt = mask.target_indices();
    let mut shuffled = tgt.clone();
    shuffled.reverse();
    let a = heads.predictor.predict_at(&z, &pos, &vis, &tgt).unwrap();
    let b = heads.predictor.predict_at(&z, &pos, &vis, &shuffled).unwrap();
    let back: Vec<usize> = (0..tgt.len()).rev().collect();
    assert!(close(b.gather_rows(&back).unwrap().data(), a.data(), 1e-12));
    assert!(close(a.data(), pred.data(), 0.0));
}

#[test]
fn predictor_gradients_reach_every_parameter() {
    let cfg = ModelConfig::default();
    let mut r = rng(6);
    let enc = Encoder::new(cfg, &mut r).unwrap();
    let teacher = enc.frozen();
    let heads = Heads::new(&cfg, HeadLayout::default(), &mut r);
    let tokens = patchify(&clip(), 8, 2).unwrap();
    let mask = sample_tube_mask(tokens.grid, 0.5, &mut r).unwrap();
    let z = enc.encode(&tokens, Some(&mask)).unwrap();
    let pred = heads.predictor.predict(&z, &mask).unwrap();
    let h = teacher.encode(&tokens, None).unwrap().gather_rows(&mask.target_indices()).unwrap();
    let loss = pred.sub(&h).unwrap().abs().unwrap().mean(None).unwrap();
    let grads = loss.backward().unwrap();
    for (name, t) in heads.predictor.named_params() {
        let g = grads.get(&t).unwrap_or_else(|| panic!("{name} unreached"));
        assert!(g.iter().any(|v| *v != 0.0), "{name} has zero gradient");
    }
    for (name, t) in teacher.named_params() {
        assert!(grads.get(&t).is_none(), "teacher {name} got a gradient");
    }
}

#[test]
fn ema_formula() {
    let cfg = ModelConfig {
        layers: 1,
        ..ModelConfig::default()
    };
    let student = Encoder::new(cfg, &mut rng(7)).unwrap();
    let mut teacher = Encoder::new(cfg, &mut rng(8)).unwrap().frozen();
    let before = teacher.named_params();
    ema_update(&mut teacher, &student, 0.99925).unwrap();
    for (((_, t0), (_, t1)), (_, s)) in before.iter().zip(teacher.named_params()).zip(student.named_params()) {
        for i in 0..t0.numel() {
            assert_eq!(t1.data()[i], 0.99925 * t0.data()[i] + (1.0 - 0.99925) * s.data()[i]);
        }
        assert!(!t1.requires_grad());
    }

    let mut ones = teacher.clone();
    for (_, t) in ones.named_params_mut() {
        *t = Tensor::full(t.shape(), 1.0);
    }
    let mut zeros = student.clone();
    for (_, t) in zeros.named_params_mut() {
        *t = Tensor::zeros(t.shape());
    }
    ema_update(&mut ones, &zeros, 0.99925).unwrap();
    assert!(ones.named_params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.99925)));

    let snapshot = teacher.named_params();
    ema_update(&mut teacher, &student, 1.0).unwrap();
    for ((_, a), (_, b)) in snapshot.iter().zip(teacher.named_params()) {
        assert_eq!(a.data(), b.data());
    }
    ema_update(&mut teacher, &student, 0.0).unwrap();
    for ((_, a), (_, b)) in student.named_params().iter().zip(teacher.named_params()) {
        assert_eq!(a.data(), b.data());
    }
    let other = Encoder::new(ModelConfig::default(), &mut rng(9)).unwrap();
    assert!(ema_update(&mut teacher, &other, 0.5).is_err());
}

#[test]
fn channel_split() {
    let z = LatentGrid::new(Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap(), 1).unwrap();
    let (app, dy) = split_channels(&z, 0.5).unwrap();
    assert_eq!(app.values.data(), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(dy.values.data(), &[2.0, 3.0, 6.0, 7.0]);
    let back = Tensor::concat(&[app.values, dy.values], 1).unwrap();
    assert_eq!(back.data(), z.values.data());
    assert!(split_channels(&z, 0.3).is_err());
}

#[test]
fn dyn_head_widths() {
    let cfg = ModelConfig::default();
    let (app, dy) = {
        let z = LatentGrid::new(Tensor::zeros(&[64, 32]), 4).unwrap();
        split_channels(&z, 0.5).unwrap()
    };
    let layout = HeadLayout {
        dyn_input: Some(dy.dim()),
        action_input: Some(dy.dim()),
        hamiltonian: false,
    };
    let mut heads = Heads::new(&cfg, layout, &mut rng(10));
    let head = heads.dyn_head.as_mut().unwrap();
    assert_eq!(head.input_width(), 16);
    assert_eq!(head.l1.fan_out(), 64);
    assert!(head.forward(&Tensor::zeros(&[3, 32])).is_err());
    assert_eq!(heads.action_head.as_ref().unwrap().input_width(), 16);
    let head = heads.dyn_head.as_mut().unwrap();
    for (_, t) in head.named_params_mut() {
        zero(t);
    }
    let out = head.forward(&app.values.add_scalar(0.7).unwrap()).unwrap();
    assert_eq!(out.shape(), &[64, 32]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hamiltonian_gradient_matches_energy_derivative() {
    let ham = HamNet::new(8, 6, &mut rng(11));
    let x = Tensor::new(&[3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let analytic = ham.grad(&x).unwrap();
    for i in 0..24 {
        let h = 1e-6;
        let mut up = x.to_vec();
        up[i] += h;
        let mut down = x.to_vec();
        down[i] -= h;
        let e = |d: Vec<f64>| ham.energy(&Tensor::new(&[3, 8], d).unwrap()).unwrap().data()[i / 8];
        let fd = (e(up) - e(down)) / (2.0 * h);
        assert!((fd - analytic.data()[i]).abs() < 1e-7);
    }
    // Second-order path: d/dW of sum(grad) matches finite differences.
    let report = grad_check(
        |p| {
            let net = HamNet {
                w1: p[0].clone(),
                b1: p[1].clone(),
                w2: p[2].clone(),
                activation: HamActivation::Tanh,
            };
            Ok::<_, crate::Error>(net.grad(&x)?.square()?.sum(None)?)
        },
        &[ham.w1.clone(), ham.b1.clone(), ham.w2.clone()],
    )
    .unwrap();
    assert!(report.worst() < 1e-6, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig::default();
    let enc = Encoder::new(cfg, &mut rng(12)).unwrap();
    let records = prefixed(&enc, "student");
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &records).unwrap();
    assert_eq!(&buf[..4], b"JPCK");
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.len(), records.len());
    let map: HashMap<String, Tensor> = back.into_iter().collect();
    let mut fresh = Encoder::new(cfg, &mut rng(99)).unwrap();
    load_module(&mut fresh, "student", &map).unwrap();
    for ((_, a), (_, b)) in enc.named_params().iter().zip(fresh.named_params()) {
        let rounded: Vec<f64> = a.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(rounded, b.data());
        assert!(b.requires_grad());
    }
    assert!(load_module(&mut fresh, "teacher", &map).is_err());
    buf[1] = b'X';
    assert!(read_checkpoint(&mut buf.as_slice()).is_err());
}
