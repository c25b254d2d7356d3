use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::autodiff::{fft_time, grad_check, ifft_time, GradReport, Tensor};
use crate::mask::{motion_energy, sample_future_predictive, sample_motion_guided, Grid};
use crate::model::{ema_update, patchify, split_channels, HamNet, LatentGrid, Module, ModelConfig};
use crate::objective::*;
use crate::synth::{gen_motion_clip, gen_motion_dataset, sample_mixture, Dataset, MixtureSpec, MotionClass};
use crate::train::TrainState;
use crate::Result;

/// One named check and what it found.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Outcome = std::result::Result<String, String>;

const GRAD_TOL: f64 = 1e-4;
const T: usize = 2;
const S: usize = 4;
const D: usize = 8;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn latents(seed: u64) -> Tensor {
    uniform(&[T * S, D], seed)
}

fn grid(values: &Tensor, blocks: usize) -> Result<LatentGrid> {
    LatentGrid::new(values.clone(), blocks)
}

fn within(report: Result<GradReport>) -> Outcome {
    let worst = report.map_err(|e| e.to_string())?.worst();
    if worst <= GRAD_TOL {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} exceeds {GRAD_TOL:.0e}"))
    }
}

fn all(outcomes: Vec<Outcome>) -> Outcome {
    let mut worst = Vec::new();
    for o in outcomes {
        worst.push(o?);
    }
    Ok(worst.join("; "))
}

fn grad_prediction() -> Outcome {
    let target = latents(40);
    let w: Vec<f64> = (0..T * S).map(|i| 0.5 + i as f64 * 0.125).collect();
    let plain = within(grad_check(|x: &[Tensor]| Ok(jepa_loss(&x[0], &target, &w)?.loss), &[latents(41)]));
    let base = latents(42);
    let errors = jepa_loss(&base, &target, &w).map_err(|e| e.to_string())?.token_errors;
    let hw = hard_weights(errors.data(), 1.0).map_err(|e| e.to_string())?;
    let weighted = within(grad_check(
        |x: &[Tensor]| weighted_error_mean(&jepa_loss(&x[0], &target, &w)?.token_errors, &hw),
        &[base],
    ));
    all(vec![plain, weighted])
}

fn grad_kinematic() -> Outcome {
    let mut out = Vec::new();
    for kind in [KinematicKind::L1, KinematicKind::Huber(0.3), KinematicKind::Anneal] {
        out.push(within(grad_check(|x: &[Tensor]| kinematic_loss(&grid(&x[0], T)?, kind), &[latents(43)])));
    }
    for kind in [KinematicKind::Accel, KinematicKind::Split] {
        let z = uniform(&[3 * S, D], 44);
        out.push(within(grad_check(|x: &[Tensor]| kinematic_loss(&grid(&x[0], 3)?, kind), &[z])));
    }
    all(out)
}

fn grad_teacher_relative() -> Outcome {
    let h = grid(&latents(46), T).map_err(|e| e.to_string())?;
    let base = latents(51);
    let ld_errors = ld_loss(&base.narrow(0, 0, S).map_err(|e| e.to_string())?, &h)
        .map_err(|e| e.to_string())?
        .token_errors;
    let hw = hard_weights(ld_errors.data(), 1.0).map_err(|e| e.to_string())?;
    all(vec![
        within(grad_check(|x: &[Tensor]| velgate_loss(&grid(&x[0], T)?), &[latents(45)])),
        within(grad_check(|x: &[Tensor]| delta_loss(&grid(&x[0], T)?, &h), &[latents(47)])),
        within(grad_check(|x: &[Tensor]| spectral_loss(&grid(&x[0], T)?, &h), &[latents(48)])),
        within(grad_check(|x: &[Tensor]| ltc_loss(&grid(&x[0], T)?, &h, 0.5), &[latents(49)])),
        within(grad_check(|x: &[Tensor]| Ok(ld_loss(&x[0].narrow(0, 0, S)?, &h)?.loss), &[latents(50)])),
        within(grad_check(
            |x: &[Tensor]| weighted_error_mean(&ld_loss(&x[0].narrow(0, 0, S)?, &h)?.token_errors, &hw),
            &[base],
        )),
    ])
}

fn grad_factorized_and_regularizers() -> Outcome {
    let dirs = random_directions(D, 16, &mut rng(53));
    let ham = HamNet::new(D, 6, &mut rng(55));
    let targets = uniform(&[S, 1], 58);
    all(vec![
        within(grad_check(
            |x: &[Tensor]| {
                let (app, dynamics) = split_channels(&grid(&x[0], T)?, 0.5)?;
                let (s, o) = fwm_losses(&app, &dynamics)?;
                Ok(s.add(&o)?)
            },
            &[latents(52)],
        )),
        within(grad_check(|x: &[Tensor]| sigreg_with_directions(&x[0], &dirs), &[latents(54)])),
        within(grad_check(
            |x: &[Tensor]| {
                let net = HamNet {
                    w1: x[1].clone(),
                    b1: x[2].clone(),
                    w2: x[3].clone(),
                    activation: ham.activation,
                };
                hamiltonian_loss(&grid(&x[0], T)?, &net)
            },
            &[latents(56), ham.w1.detach(), uniform(&[6], 57), ham.w2.detach()],
        )),
        within(grad_check(
            |x: &[Tensor]| ac_loss(&x[0].narrow(0, 0, S)?.matmul(&x[1])?, &targets),
            &[latents(59), uniform(&[D, 1], 60)],
        )),
    ])
}

fn hard_weight_identities() -> Outcome {
    let mut r = rng(61);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..64);
        let e: Vec<f64> = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
        let w = hard_weights(&e, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max((w.iter().sum::<f64>() - n as f64).abs());
    }
    if worst > 1e-9 {
        return Err(format!("weight sum off by {worst:.2e}"));
    }
    let flat = Tensor::full(&[16], 0.7);
    let hw = hard_weighted_loss(&flat, 1.0).map_err(|e| e.to_string())?.item();
    let plain = flat.mean(None).map_err(|e| e.to_string())?.item();
    if (hw - plain).abs() > 1e-12 {
        return Err(format!("uniform errors give {hw} against {plain}"));
    }
    let mut spike = vec![0.1; 16];
    spike[3] = 1e6;
    let w = hard_weights(&spike, 1.0).map_err(|e| e.to_string())?;
    if !w.iter().all(|v| v.is_finite()) {
        return Err("a 1e6 error produced non-finite weights".into());
    }
    Ok(format!("weight sums within {worst:.1e}"))
}

fn zero_cases() -> Outcome {
    let run = || -> Result<Vec<(&'static str, f64)>> {
        let frame = uniform(&[S, D], 62);
        let still = grid(&Tensor::concat(&[frame.clone(), frame], 0)?, T)?;
        let (app, _) = split_channels(&still, 0.5)?;
        let dynamics = LatentGrid::new(uniform(&[T * S, D / 2], 63), T)?;
        let (stat, _) = fwm_losses(&app, &dynamics)?;
        // Walsh columns: centered and mutually orthogonal.
        let walsh = |n: usize, k: usize| -> f64 { if (n >> k) & 1 == 0 { 1.0 } else { -1.0 } };
        let mut a = vec![0.0; T * S * 2];
        let mut b = vec![0.0; T * S * 2];
        for n in 0..T * S {
            a[n * 2] = walsh(n, 0);
            a[n * 2 + 1] = walsh(n, 2);
            b[n * 2] = walsh(n, 1);
            b[n * 2 + 1] = walsh(n, 0) * walsh(n, 1);
        }
        let a = LatentGrid::new(Tensor::new(&[T * S, 2], a)?, T)?;
        let b = LatentGrid::new(Tensor::new(&[T * S, 2], b)?, T)?;
        let (_, orth) = fwm_losses(&a, &b)?;
        let z = grid(&latents(64), T)?;
        Ok(vec![
            ("static", stat.item()),
            ("orth", orth.item()),
            ("delta", delta_loss(&z, &z)?.item()),
            ("ld", ld_loss(&z.first_difference()?, &z)?.loss.item()),
            ("spectral", spectral_loss(&z, &z)?.item()),
            ("jepa", jepa_loss(&z.values, &z.values, &[1.0; T * S])?.loss.item()),
        ])
    };
    let values = run().map_err(|e| e.to_string())?;
    let bad: Vec<String> = values
        .iter()
        .filter(|(_, v)| v.abs() > 1e-12)
        .map(|(n, v)| format!("{n} = {v:.2e}"))
        .collect();
    if bad.is_empty() {
        Ok(format!("{} losses vanish", values.len()))
    } else {
        Err(bad.join(", "))
    }
}

fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                let a = -2.0 * std::f64::consts::PI * k as f64 * t as f64 / n;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn fft_oracle() -> Outcome {
    let mut r = rng(65);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = r.random_range(2..33);
        let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[len, 1], x.clone()).map_err(|e| e.to_string())?;
        let fibers = fft_time(&t).map_err(|e| e.to_string())?;
        for (k, (re, im)) in naive_dft(&x).into_iter().enumerate() {
            worst = worst.max((fibers[0].real[k] - re).abs()).max((fibers[0].imag[k] - im).abs());
        }
        let back = ifft_time(&fibers, &[len, 1]).map_err(|e| e.to_string())?;
        for (a, b) in back.data().iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-9 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.2e}"))
    }
}

fn mask_checks() -> Outcome {
    let clip = gen_motion_clip(MotionClass::from_id(0).map_err(|e| e.to_string())?, 66);
    let tokens = patchify(&clip, 8, 2).map_err(|e| e.to_string())?;
    let energy = motion_energy(&clip, 8).map_err(|e| e.to_string())?;
    let mut r = rng(67);
    let draws = 10_000;
    let mut fell = 0;
    for _ in 0..draws {
        let d = sample_motion_guided(tokens.grid, 0.5, Some(&energy), 2.0, 0.1, &mut r).map_err(|e| e.to_string())?;
        fell += usize::from(d.fell_back);
    }
    let rate = fell as f64 / draws as f64;
    if (rate - 0.1).abs() > 0.01 {
        return Err(format!("fallback rate {rate}"));
    }
    let g = Grid::new(8, 4, 4).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let m = sample_future_predictive(g, 0.5, true, 0.5, &mut r).map_err(|e| e.to_string())?;
        if (0..g.n_tokens()).any(|i| m.visible[i] && g.coords(i).0 >= 4) {
            return Err("future-predictive mask exposed a late block".into());
        }
    }
    Ok(format!("fallback rate {rate:.4}; future blocks hidden"))
}

fn mixture_frequencies() -> Outcome {
    let sets: Vec<Dataset> = (0..3)
        .map(|i| gen_motion_dataset(1, i))
        .collect::<Result<_>>()
        .map_err(|e| e.to_string())?;
    let weights = [0.2, 0.6, 0.2];
    let spec = MixtureSpec::new(weights.to_vec(), 68).map_err(|e| e.to_string())?;
    let n = 30_000;
    let draws = sample_mixture(&spec, &sets, n).map_err(|e| e.to_string())?;
    for (k, w) in weights.iter().enumerate() {
        let f = draws.iter().filter(|d| d.dataset == k).count() as f64 / n as f64;
        if (f - w).abs() > 0.01 {
            return Err(format!("dataset {k} drawn at {f}, weight {w}"));
        }
    }
    Ok("frequencies within 0.01".into())
}

fn teacher_isolation() -> Outcome {
    let clip = gen_motion_clip(MotionClass::from_id(2).map_err(|e| e.to_string())?, 69);
    for variant in Variant::ALL {
        let run = || -> Result<bool> {
            let mut state = TrainState::new(ModelConfig::default(), ObjectiveConfig::for_variant(variant), 0.04, 70)?;
            let mut params = Vec::new();
            state.teacher.visit_mut("teacher", &mut params);
            for (_, p) in params {
                *p = p.detach().requires_grad_();
            }
            let total = state.clip_losses(&clip, 0)?.total;
            let grads = total.backward()?;
            Ok(state
                .teacher
                .named_params()
                .iter()
                .all(|(_, p)| grads.get(p).is_none_or(|g| g.iter().all(|v| *v == 0.0))))
        };
        if !run().map_err(|e| format!("{}: {e}", variant.label()))? {
            return Err(format!("{} sends gradient to the teacher", variant.label()));
        }
    }
    let mut r = rng(71);
    let student = crate::model::Encoder::new(ModelConfig::default(), &mut r).map_err(|e| e.to_string())?;
    let mut teacher = crate::model::Encoder::new(ModelConfig::default(), &mut r).map_err(|e| e.to_string())?;
    let before = teacher.named_params();
    ema_update(&mut teacher, &student, EMA_MOMENTUM).map_err(|e| e.to_string())?;
    let s = student.named_params();
    for ((name, old), ((_, new), (_, st))) in before.iter().zip(teacher.named_params().iter().zip(&s)) {
        for ((o, n), x) in old.data().iter().zip(new.data()).zip(st.data()) {
            if *n != EMA_MOMENTUM * o + (1.0 - EMA_MOMENTUM) * x {
                return Err(format!("EMA step differs in {name}"));
            }
        }
    }
    Ok(format!("{} variants isolated; EMA exact", Variant::ALL.len()))
}

fn config_round_trip() -> Outcome {
    for variant in Variant::ALL {
        let cfg = RunConfig::for_variant(variant);
        let back = RunConfig::parse(&cfg.serialize()).map_err(|e| e.to_string())?;
        if back != cfg {
            return Err(format!("{} does not round-trip", variant.label()));
        }
    }
    Ok(format!("{} presets round-trip", Variant::ALL.len()))
}

/// Every invariant and gradient check, in a fixed order.
pub(super) fn run_checks() -> VerifyReport {
    let checks: [(&str, fn() -> Outcome); 12] = [
        ("grad: prediction and hard weighting", grad_prediction),
        ("grad: kinematic penalties", grad_kinematic),
        ("grad: teacher-relative losses", grad_teacher_relative),
        ("grad: factorization, sigreg, hamiltonian, action", grad_factorized_and_regularizers),
        ("hard-weight identities", hard_weight_identities),
        ("zero cases", zero_cases),
        ("fft against naive dft", fft_oracle),
        ("mask fallback and future horizon", mask_checks),
        ("mixture frequencies", mixture_frequencies),
        ("teacher isolation and ema", teacher_isolation),
        ("config round trip", config_round_trip),
        ("schedule endpoints", schedule_endpoints),
    ];
    VerifyReport {
        checks: checks
            .into_iter()
            .map(|(name, f)| {
                let (passed, detail) = match f() {
                    Ok(d) => (true, d),
                    Err(d) => (false, d),
                };
                Check {
                    name: name.into(),
                    passed,
                    detail,
                }
            })
            .collect(),
    }
}

fn schedule_endpoints() -> Outcome {
    let cfg = crate::train::TrainConfig::default();
    let total = cfg.total_steps();
    let start = cfg.lr(0).map_err(|e| e.to_string())?;
    let peak = cfg.lr(cfg.warmup()).map_err(|e| e.to_string())?;
    let end = cfg.lr(total).map_err(|e| e.to_string())?;
    if start == cfg.lr_start && (peak - cfg.lr_peak).abs() < 1e-15 && end.abs() < 1e-12 {
        Ok(format!("lr {start} -> {peak} -> {end:.1e}"))
    } else {
        Err(format!("lr {start} -> {peak} -> {end}"))
    }
}
