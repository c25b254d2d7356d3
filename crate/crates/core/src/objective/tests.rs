use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::{grad_check, Tensor};
use crate::model::{split_channels, HamActivation, HamNet, LatentGrid};
use crate::synth::VideoClip;

const GRAD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn grid(values: Tensor, blocks: usize) -> LatentGrid {
    LatentGrid::new(values, blocks).unwrap()
}

/// Latent grid whose every fiber over time is `fiber`, for `s` spatial tokens.
fn fiber_grid(fiber: &[f64], s: usize, d: usize) -> LatentGrid {
    let data = fiber.iter().flat_map(|&v| std::iter::repeat_n(v, s * d)).collect();
    grid(Tensor::new(&[fiber.len() * s, d], data).unwrap(), fiber.len())
}

fn constant_in_time(blocks: usize, s: usize, d: usize, seed: u64) -> LatentGrid {
    let frame = random(&[s, d], seed);
    let frames: Vec<Tensor> = (0..blocks).map(|_| frame.clone()).collect();
    grid(Tensor::concat(&frames, 0).unwrap(), blocks)
}

fn scalar(t: &Tensor) -> f64 {
    t.item()
}

fn check(report: crate::autodiff::GradReport) {
    assert!(report.worst() <= GRAD_TOL, "relative error {}", report.worst());
}

// 2 temporal blocks of 4 spatial tokens with 8 channels.
const T: usize = 2;
const S: usize = 4;
const D: usize = 8;

#[test]
fn jepa_zero_and_hand_value() {
    let z = random(&[3, 4], 1);
    let t = jepa_loss(&z, &z, &[1.0; 3]).unwrap();
    assert_eq!(scalar(&t.loss), 0.0);
    let pred = Tensor::new(&[2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
    let target = Tensor::zeros(&[2, 2]);
    let t = jepa_loss(&pred, &target, &[1.0, 1.0]).unwrap();
    assert_eq!(scalar(&t.loss), 2.0);
    assert_eq!(t.token_errors.data(), &[1.0, 3.0]);
    assert!(jepa_loss(&pred, &Tensor::zeros(&[2, 3]), &[1.0, 1.0]).is_err());
    assert!(jepa_loss(&pred, &target, &[1.0]).is_err());
}

#[test]
fn jepa_sends_no_gradient_to_targets() {
    let pred = random(&[3, 4], 2).requires_grad_();
    let target = random(&[3, 4], 3).requires_grad_();
    let t = jepa_loss(&pred, &target, &[0.5, 1.0, 1.5]).unwrap();
    let g = t.loss.backward().unwrap();
    assert!(g.get(&target).is_none());
    assert!(g.get(&pred).is_some());
}

#[test]
fn kinematic_zero_on_constant_latents() {
    let z = constant_in_time(3, S, D, 4);
    for kind in [
        KinematicKind::L1,
        KinematicKind::Huber(1.0),
        KinematicKind::Accel,
        KinematicKind::Split,
        KinematicKind::Anneal,
    ] {
        assert_eq!(scalar(&kinematic_loss(&z, kind).unwrap()), 0.0, "{kind:?}");
    }
}

#[test]
fn kinematic_linear_fiber() {
    let z = fiber_grid(&[0.0, 1.0, 2.0, 3.0], 2, 4);
    assert!((scalar(&kinematic_loss(&z, KinematicKind::L1).unwrap()) - 1.0).abs() < 1e-12);
    assert!(scalar(&kinematic_loss(&z, KinematicKind::Accel).unwrap()).abs() < 1e-12);
    assert!(scalar(&kinematic_loss(&z, KinematicKind::Split).unwrap()).abs() < 1e-12);
}

#[test]
fn kinematic_extent_rules() {
    let image = random(&[S, D], 5);
    let z = grid(image, 1);
    assert_eq!(scalar(&kinematic_loss(&z, KinematicKind::Accel).unwrap()), 0.0);
    let two = grid(random(&[2 * S, D], 6), 2);
    assert!(kinematic_loss(&two, KinematicKind::Accel).is_err());
    assert!(kinematic_loss(&two, KinematicKind::L1).is_ok());
}

#[test]
fn anneal_coefficient_schedule() {
    let mut cfg = ObjectiveConfig::for_variant(Variant::KinAnneal);
    cfg.anneal_horizon = 100;
    assert_eq!(cfg.annealed_kin(0), cfg.lambda_kin);
    assert!(cfg.annealed_kin(100).abs() < 1e-15);
    assert!((cfg.annealed_kin(50) - cfg.lambda_kin / 2.0).abs() < 1e-12);
    assert!(cfg.annealed_kin(1000).abs() < 1e-15);
}

#[test]
fn sigreg_gaussian_sample_is_near_zero() {
    let mut r = rng(7);
    let data = (0..4096 * 8).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let z = Tensor::new(&[4096, 8], data).unwrap();
    let p = scalar(&sigreg_loss(&z, 32, &mut rng(8)).unwrap());
    assert!(p <= 0.05, "penalty {p}");
}

#[test]
fn sigreg_constant_latents() {
    let z = Tensor::zeros(&[16, 4]);
    let p = scalar(&sigreg_loss(&z, 5, &mut rng(9)).unwrap());
    assert!((p - 10.0).abs() < 1e-9, "penalty {p}");
    assert!(sigreg_loss(&Tensor::zeros(&[7, 4]), 5, &mut rng(9)).is_err());
    assert!(sigreg_loss(&z, 0, &mut rng(9)).is_err());
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
fn orthogonal(d: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    let data = (0..d * d).map(|k| cols[k % d][k / d]).collect();
    Tensor::new(&[d, d], data).unwrap()
}

#[test]
fn sigreg_rotation_invariant_in_distribution() {
    // Skewed, anisotropic cloud so the penalty is far from zero.
    let mut r = rng(10);
    let n = 2048;
    let d = 6;
    let data = (0..n * d)
        .map(|k| {
            let e: f64 = r.sample(rand_distr::Exp1);
            e * (1.0 + (k % d) as f64 * 0.3)
        })
        .collect();
    let z = Tensor::new(&[n, d], data).unwrap();
    let rotated = z.matmul(&orthogonal(d, 11)).unwrap();
    let a = scalar(&sigreg_loss(&z, 256, &mut rng(12)).unwrap());
    let b = scalar(&sigreg_loss(&rotated, 256, &mut rng(12)).unwrap());
    assert!(a > 1.0);
    assert!((a - b).abs() <= 0.1 * a.max(1.0), "{a} vs {b}");
}

fn quadratic_momentum_ham(d: usize) -> HamNet {
    let half = d / 2;
    let mut w1 = vec![0.0; d * half];
    for j in 0..half {
        w1[(half + j) * half + j] = 1.0;
    }
    HamNet {
        w1: Tensor::new(&[d, half], w1).unwrap(),
        b1: Tensor::zeros(&[half]),
        w2: Tensor::full(&[half], 1.0),
        activation: HamActivation::HalfSquare,
    }
}

#[test]
fn hamiltonian_zero_cases() {
    let zero_h = HamNet {
        w1: Tensor::zeros(&[D, 4]),
        b1: Tensor::zeros(&[4]),
        w2: Tensor::zeros(&[4]),
        activation: HamActivation::Tanh,
    };
    let z = constant_in_time(3, S, D, 13);
    assert_eq!(scalar(&hamiltonian_loss(&z, &zero_h).unwrap()), 0.0);

    // q(t+1) = q(t) + p, p constant, under H = |p|^2 / 2.
    let p = random(&[S, D / 2], 14);
    let q0 = random(&[S, D / 2], 15);
    let mut rows = Vec::new();
    let mut q = q0.clone();
    for _ in 0..4 {
        rows.push(Tensor::concat(&[q.clone(), p.clone()], 1).unwrap());
        q = q.add(&p).unwrap();
    }
    let z = grid(Tensor::concat(&rows, 0).unwrap(), 4);
    let v = scalar(&hamiltonian_loss(&z, &quadratic_momentum_ham(D)).unwrap());
    assert!(v.abs() < 1e-12, "residual {v}");

    let odd = grid(random(&[2 * S, 7], 16), 2);
    assert!(hamiltonian_loss(&odd, &quadratic_momentum_ham(8)).is_err());
}

#[test]
fn velocity_gate_tie_rule() {
    let z = fiber_grid(&[0.0, 1.0], 6, 3);
    assert_eq!(velocity_gate(&z).unwrap(), vec![0, 1, 2]);
    let z = fiber_grid(&[0.0, 1.0], 5, 3);
    assert_eq!(velocity_gate(&z).unwrap(), vec![0, 1]);
}

#[test]
fn velgate_only_static_token_contributes() {
    // Three spatial tokens: token 1 static, tokens 0 and 2 moving.
    let d = 2;
    let mut data = Vec::new();
    for t in 0..3 {
        for s in 0..3 {
            let v = if s == 1 { 0.5 } else { t as f64 * (1.0 + s as f64) };
            data.extend([v; 2]);
        }
    }
    let z = grid(Tensor::new(&[9, d], data).unwrap(), 3);
    assert_eq!(velocity_gate(&z).unwrap(), vec![1]);
    assert_eq!(scalar(&velgate_loss(&z).unwrap()), 0.0);
    assert!(scalar(&kinematic_loss(&z, KinematicKind::L1).unwrap()) > 0.0);
    assert_eq!(scalar(&velgate_loss(&grid(random(&[S, D], 1), 1)).unwrap()), 0.0);
}

#[test]
fn delta_cases() {
    let z = grid(random(&[T * S, D], 17), T);
    assert_eq!(scalar(&delta_loss(&z, &z).unwrap()), 0.0);
    let student = fiber_grid(&[0.0, 0.0], S, D);
    let teacher = fiber_grid(&[0.0, 1.0], S, D);
    assert_eq!(scalar(&delta_loss(&student, &teacher).unwrap()), 1.0);
    let h = grid(random(&[T * S, D], 18), T);
    let shifted = grid(z.values.add_scalar(3.0).unwrap(), T);
    let a = scalar(&delta_loss(&z, &h).unwrap());
    let b = scalar(&delta_loss(&shifted, &h).unwrap());
    assert!((a - b).abs() < 1e-12);
    let other = grid(random(&[T * S, D + 1], 19), T);
    assert!(delta_loss(&z, &other).is_err());
}

#[test]
fn ld_cases() {
    let h = grid(random(&[3 * S, D], 20), 3);
    let perfect = h.first_difference().unwrap();
    let t = ld_loss(&perfect, &h).unwrap();
    assert_eq!(scalar(&t.loss), 0.0);
    assert!(t.token_errors.data().iter().all(|&e| e == 0.0));

    let teacher = fiber_grid(&[0.0, 1.0], S, D);
    let t = ld_loss(&Tensor::zeros(&[S, D]), &teacher).unwrap();
    assert_eq!(scalar(&t.loss), 1.0);

    let pred = random(&[2 * S, D], 21);
    let t = ld_loss(&pred, &h).unwrap();
    let mean = t.token_errors.data().iter().sum::<f64>() / t.token_errors.numel() as f64;
    assert!((mean - scalar(&t.loss)).abs() < 1e-12);
    assert!(ld_loss(&random(&[S, D], 22), &h).is_err());
}

#[test]
fn spectral_zero_cases() {
    let z = grid(random(&[4 * S, D], 23), 4);
    assert_eq!(scalar(&spectral_loss(&z, &z).unwrap()), 0.0);
    let shifted = grid(z.values.add_scalar(2.5).unwrap(), 4);
    assert!(scalar(&spectral_loss(&shifted, &z).unwrap()).abs() < 1e-12);
    assert!(spectral_loss(&grid(random(&[S, D], 1), 1), &grid(random(&[S, D], 2), 1)).is_err());
}

#[test]
fn spectral_matches_naive_dft() {
    let (blocks, s, d) = (4, 3, 2);
    let z = grid(random(&[blocks * s, d], 24), blocks);
    let h = grid(random(&[blocks * s, d], 25), blocks);
    let mut acc = 0.0;
    for tok in 0..s {
        for c in 0..d {
            let fiber: Vec<f64> = (0..blocks)
                .map(|t| z.values.data()[(t * s + tok) * d + c] - h.values.data()[(t * s + tok) * d + c])
                .collect();
            for k in 0..blocks {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in fiber.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / blocks as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                acc += k as f64 / (blocks - 1) as f64 * (re.abs() + im.abs());
            }
        }
    }
    let expected = acc / (blocks * s * d) as f64;
    let got = scalar(&spectral_loss(&z, &h).unwrap());
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn ltc_cases() {
    // h^(0) = e0, h^(1) = e1, z^(0) = e0.
    let h = grid(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 2);
    let z = grid(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.3, 0.4]).unwrap(), 2);
    assert_eq!(scalar(&ltc_loss(&z, &h, 0.5).unwrap()), 0.0);

    let frame = random(&[S, D], 26);
    let h = grid(Tensor::concat(&[frame.clone(), frame], 0).unwrap(), 2);
    let z = grid(random(&[2 * S, D], 27), 2);
    assert!((scalar(&ltc_loss(&z, &h, 0.5).unwrap()) - 0.5).abs() < 1e-12);
}

#[test]
fn fwm_zero_cases() {
    let app = constant_in_time(2, S, 4, 28);
    let dynamics = grid(random(&[2 * S, 4], 29), 2);
    let (stat, _) = fwm_losses(&app, &dynamics).unwrap();
    assert_eq!(scalar(&stat), 0.0);

    let app = grid(Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap(), 1);
    let dynamics = grid(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap(), 1);
    let (_, orth) = fwm_losses(&app, &dynamics).unwrap();
    assert_eq!(scalar(&orth), 0.0);
}

#[test]
fn orth_matches_loop_oracle() {
    let n = 64;
    let app = random(&[n, 4], 30);
    let dynamics = random(&[n, 4], 31);
    let col_mean = |t: &Tensor, c: usize| (0..n).map(|i| t.data()[i * 4 + c]).sum::<f64>() / n as f64;
    let mut frob = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            let (ma, mb) = (col_mean(&app, a), col_mean(&dynamics, b));
            let mut s = 0.0;
            for i in 0..n {
                s += (app.data()[i * 4 + a] - ma) * (dynamics.data()[i * 4 + b] - mb);
            }
            frob += s * s;
        }
    }
    let expected = frob / n as f64;
    let (_, orth) = fwm_losses(&grid(app, 4), &grid(dynamics, 4)).unwrap();
    assert!((scalar(&orth) - expected).abs() < 1e-10);
}

#[test]
fn hard_weight_cases() {
    assert_eq!(hard_weights(&[0.3; 5], 1.0).unwrap(), vec![1.0; 5]);
    let w = hard_weights(&[0.0, 20.0], 1.0).unwrap();
    let expected_low = 2.0 / (1.0 + 20f64.exp());
    assert!((w[0] - expected_low).abs() < 1e-20);
    assert!((w[0] - 4.1e-9).abs() < 1e-10);
    assert!(w[0] < w[1] && (w[0] + w[1] - 2.0).abs() < 1e-12);
    let w = hard_weights(&[1.0, 1e6, 2.0], 1.0).unwrap();
    assert!(w.iter().all(|v| v.is_finite()));
    assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-9);
    assert!(hard_weights(&[], 1.0).is_err());
    assert!(hard_weights(&[1.0], 0.0).is_err());
}

#[test]
fn hw_loss_cases() {
    let c = Tensor::full(&[6], 0.7);
    assert!((scalar(&hard_weighted_loss(&c, 1.0).unwrap()) - 0.7).abs() < 1e-12);
    assert_eq!(scalar(&hard_weighted_loss(&Tensor::zeros(&[4]), 1.0).unwrap()), 0.0);
    for seed in 0..200 {
        let e = random(&[7], seed).abs().unwrap();
        let mean = e.data().iter().sum::<f64>() / 7.0;
        assert!(scalar(&hard_weighted_loss(&e, 1.0).unwrap()) > mean);
        let flat = scalar(&hard_weighted_loss(&e, 1e6).unwrap());
        assert!((flat - mean).abs() < 1e-6);
    }
}

#[test]
fn hard_weights_are_constants() {
    let e = random(&[5], 32).abs().unwrap().requires_grad_();
    let loss = hard_weighted_loss(&e, 1.0).unwrap();
    let g = loss.backward().unwrap();
    let w = hard_weights(e.data(), 1.0).unwrap();
    for (gi, wi) in g.get(&e).unwrap().iter().zip(&w) {
        assert!((gi - wi / 5.0).abs() < 1e-15);
    }
}

fn clip(frames: Vec<f64>, t: usize, h: usize, w: usize) -> VideoClip {
    VideoClip::new(Tensor::new(&[t, h, w, 1], frames).unwrap(), None, "test").unwrap()
}

#[test]
fn action_target_cases() {
    let still = clip(vec![0.2; 4 * 16 * 16], 4, 16, 16);
    let targets = action_targets(&still, 8, 2).unwrap();
    assert_eq!(targets.shape(), &[4, 1]);
    assert!(targets.data().iter().all(|&v| v == 0.0));
    assert_eq!(scalar(&ac_loss(&Tensor::zeros(&[4, 1]), &targets).unwrap()), 0.0);

    // Two frames; the top-right 8x8 patch brightens by 0.5.
    let mut frames = vec![0.1; 2 * 16 * 16];
    for y in 0..8 {
        for x in 8..16 {
            frames[256 + y * 16 + x] = 0.6;
        }
    }
    let targets = action_targets(&clip(frames, 2, 16, 16), 8, 1).unwrap();
    let expected = [0.0, 0.5, 0.0, 0.0];
    for (got, want) in targets.data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn factorized_heads_take_dynamics_channels() {
    let fac = ObjectiveConfig::for_variant(Variant::Fac).head_layout(32).unwrap();
    assert_eq!(fac.action_input, Some(16));
    assert_eq!(fac.dyn_input, None);
    let ac = ObjectiveConfig::for_variant(Variant::Ac).head_layout(32).unwrap();
    assert_eq!(ac.action_input, Some(32));
    let fwm = ObjectiveConfig::for_variant(Variant::FwmHwLd).head_layout(32).unwrap();
    assert_eq!(fwm.dyn_input, Some(16));
    assert!(ObjectiveConfig::for_variant(Variant::Hamiltonian).head_layout(32).unwrap().hamiltonian);
}

#[test]
fn labels_round_trip() {
    let mut seen = std::collections::HashSet::new();
    for v in Variant::ALL {
        assert_eq!(Variant::from_label(v.label()).unwrap(), v);
        assert!(seen.insert(v.label()));
    }
    assert_eq!(Variant::from_label("Baseline V-JEPA").unwrap(), Variant::Baseline);
    assert!(Variant::from_label("FWM-HW-LD-JEPA").is_err());
}

#[test]
fn config_defaults() {
    let c = ObjectiveConfig::for_variant(Variant::FwmHwLd);
    assert_eq!((c.lambda_s, c.lambda_o, c.lambda_d, c.lambda_hw), (0.05, 0.01, 1.0, 1.0));
    assert_eq!((c.tau, c.app_ratio), (1.0, 0.5));
    assert!(c.ema);
    for v in [Variant::Hw, Variant::AcHw, Variant::Combo] {
        assert_eq!(ObjectiveConfig::for_variant(v).lambda_hw, 0.3);
    }
    assert_eq!(ObjectiveConfig::for_variant(Variant::HwLd).lambda_hw, 1.0);
    assert!(!ObjectiveConfig::for_variant(Variant::KinL1).ema);
    assert!(!ObjectiveConfig::for_variant(Variant::SigRegNoEma).ema);
    assert!(ObjectiveConfig::for_variant(Variant::SigReg).ema);
    let amg = ObjectiveConfig::for_variant(Variant::Amg).mask;
    assert!(amg.motion_guided);
    assert_eq!((amg.motion_guided_strength, amg.motion_guided_random_rate), (5.0, 0.0));
    let mut bad = c.clone();
    bad.lambda_hw = -1.0;
    assert!(bad.validate().is_err());
    bad = c.clone();
    bad.app_ratio = 1.0;
    assert!(bad.validate().is_err());
    for v in Variant::ALL {
        ObjectiveConfig::for_variant(v).validate().unwrap();
    }
}

fn parts(values: &[(Component, f64)]) -> BTreeMap<Component, f64> {
    values.iter().copied().collect()
}

#[test]
fn compose_worked_example() {
    use Component as C;
    let cfg = ObjectiveConfig::for_variant(Variant::FwmHwLd);
    let p = parts(&[(C::Jepa, 0.1), (C::HwJepa, 0.2), (C::Static, 0.3), (C::Orth, 0.4), (C::LdHw, 0.5)]);
    let b = compose_total(&cfg, &p, 0).unwrap();
    assert!((b.total - 0.819).abs() < 1e-12);
    assert_eq!(b.parts.len(), 5);
}

#[test]
fn compose_baseline_and_missing_parts() {
    use Component as C;
    let cfg = ObjectiveConfig::for_variant(Variant::Baseline);
    let b = compose_total(&cfg, &parts(&[(C::Jepa, 0.37)]), 0).unwrap();
    assert_eq!(b.total, 0.37);
    let cfg = ObjectiveConfig::for_variant(Variant::HwLd);
    let err = compose_total(&cfg, &parts(&[(C::Jepa, 0.1), (C::HwJepa, 0.2)]), 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("HW-LD-JEPA") && msg.contains("ld_hw"), "{msg}");
}

#[test]
fn zero_coefficients_leave_jepa() {
    for v in Variant::ALL {
        let mut cfg = ObjectiveConfig::for_variant(v);
        cfg.lambda_kin = 0.0;
        cfg.lambda_s = 0.0;
        cfg.lambda_o = 0.0;
        cfg.lambda_d = 0.0;
        cfg.lambda_hw = 0.0;
        cfg.lambda_ac = 0.0;
        cfg.lambda_delta = 0.0;
        cfg.lambda_spec = 0.0;
        cfg.lambda_ltc = 0.0;
        cfg.lambda_sigreg = 0.0;
        cfg.lambda_ham = 0.0;
        cfg.lambda_velgate = 0.0;
        let all: BTreeMap<_, _> = Component::ALL.iter().map(|&c| (c, 0.25)).collect();
        let b = compose_total(&cfg, &all, 3).unwrap();
        assert_eq!(b.total, 0.25, "{v}");
    }
}

proptest! {
    #[test]
    fn bundle_total_is_weighted_sum(values in prop::collection::vec(0.0f64..10.0, 14), step in 0usize..1000) {
        let all: BTreeMap<_, _> = Component::ALL.iter().copied().zip(values).collect();
        for v in Variant::ALL {
            let cfg = ObjectiveConfig::for_variant(v);
            let b = compose_total(&cfg, &all, step).unwrap();
            let expected: f64 = cfg.recipe(step).iter().map(|(c, w)| all[c] * w).sum();
            prop_assert!((b.total - expected).abs() <= 1e-9);
            prop_assert!(b.parts.values().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn hard_weights_sum_to_count(e in prop::collection::vec(-1e3f64..1e3, 1..40), tau in 0.01f64..100.0) {
        let w = hard_weights(&e, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - e.len() as f64).abs() <= 1e-9);
    }

    #[test]
    fn velgate_bounded_by_l1(seed in 0u64..10_000) {
        let z = grid(random(&[3 * 5, 3], seed), 3);
        let gate = scalar(&velgate_loss(&z).unwrap());
        let l1 = scalar(&kinematic_loss(&z, KinematicKind::L1).unwrap());
        prop_assert!(gate <= l1 + 1e-12);
    }

    #[test]
    fn ltc_within_range(seed in 0u64..10_000, margin in 0.0f64..1.0) {
        let z = grid(random(&[3 * 2, 4], seed), 3);
        let h = grid(random(&[3 * 2, 4], seed + 1), 3);
        let v = scalar(&ltc_loss(&z, &h, margin).unwrap());
        prop_assert!((0.0..=margin + 2.0).contains(&v));
    }
}

fn latents(seed: u64) -> Tensor {
    random(&[T * S, D], seed)
}

#[test]
fn grad_check_prediction_and_hard_weighting() {
    let target = latents(40);
    let w: Vec<f64> = (0..T * S).map(|i| 0.5 + i as f64 * 0.125).collect();
    check(grad_check(|x: &[Tensor]| Ok::<_, crate::Error>(jepa_loss(&x[0], &target, &w)?.loss), &[latents(41)]).unwrap());
    // Weights are frozen at the base point, matching their constant role.
    let base = latents(42);
    let hw = hard_weights(jepa_loss(&base, &target, &w).unwrap().token_errors.data(), 1.0).unwrap();
    check(
        grad_check(
            |x: &[Tensor]| weighted_error_mean(&jepa_loss(&x[0], &target, &w)?.token_errors, &hw),
            &[base],
        )
        .unwrap(),
    );
}

#[test]
fn grad_check_temporal_penalties() {
    let g = |x: &Tensor, b| grid(x.clone(), b);
    for kind in [KinematicKind::L1, KinematicKind::Huber(0.3), KinematicKind::Anneal] {
        check(grad_check(|x: &[Tensor]| kinematic_loss(&g(&x[0], T), kind), &[latents(43)]).unwrap());
    }
    for kind in [KinematicKind::Accel, KinematicKind::Split] {
        check(grad_check(|x: &[Tensor]| kinematic_loss(&g(&x[0], 3), kind), &[random(&[3 * S, D], 44)]).unwrap());
    }
    check(grad_check(|x: &[Tensor]| velgate_loss(&g(&x[0], T)), &[latents(45)]).unwrap());
    let h = grid(latents(46), T);
    check(grad_check(|x: &[Tensor]| delta_loss(&g(&x[0], T), &h), &[latents(47)]).unwrap());
    check(grad_check(|x: &[Tensor]| spectral_loss(&g(&x[0], T), &h), &[latents(48)]).unwrap());
    check(grad_check(|x: &[Tensor]| ltc_loss(&g(&x[0], T), &h, 0.5), &[latents(49)]).unwrap());
    check(
        grad_check(
            |x: &[Tensor]| Ok::<_, crate::Error>(ld_loss(&x[0].narrow(0, 0, S)?, &h)?.loss),
            &[latents(50)],
        )
        .unwrap(),
    );
    let base = latents(51);
    let hw = hard_weights(ld_loss(&base.narrow(0, 0, S).unwrap(), &h).unwrap().token_errors.data(), 1.0).unwrap();
    check(
        grad_check(
            |x: &[Tensor]| weighted_error_mean(&ld_loss(&x[0].narrow(0, 0, S)?, &h)?.token_errors, &hw),
            &[base],
        )
        .unwrap(),
    );
}

#[test]
fn grad_check_factorization_and_regularizers() {
    let g = |x: &Tensor| grid(x.clone(), T);
    check(
        grad_check(
            |x: &[Tensor]| {
                let (app, dynamics) = split_channels(&g(&x[0]), 0.5)?;
                let (s, o) = fwm_losses(&app, &dynamics)?;
                Ok::<_, crate::Error>(s.add(&o)?)
            },
            &[latents(52)],
        )
        .unwrap(),
    );
    let dirs = random_directions(D, 16, &mut rng(53));
    check(grad_check(|x: &[Tensor]| sigreg_with_directions(&x[0], &dirs), &[latents(54)]).unwrap());
}

#[test]
fn grad_check_hamiltonian_second_order() {
    let ham = HamNet::new(D, 6, &mut rng(55));
    check(
        grad_check(
            |x: &[Tensor]| {
                let net = HamNet {
                    w1: x[1].clone(),
                    b1: x[2].clone(),
                    w2: x[3].clone(),
                    activation: HamActivation::Tanh,
                };
                hamiltonian_loss(&grid(x[0].clone(), T), &net)
            },
            &[latents(56), ham.w1.detach(), random(&[6], 57), ham.w2.detach()],
        )
        .unwrap(),
    );
}

#[test]
fn grad_check_action_loss() {
    let targets = random(&[S, 1], 58);
    check(
        grad_check(
            |x: &[Tensor]| ac_loss(&x[0].narrow(0, 0, S)?.matmul(&x[1])?, &targets),
            &[latents(59), random(&[D, 1], 60)],
        )
        .unwrap(),
    );
}
