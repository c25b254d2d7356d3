use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Naive DFT written independently of the transform module.
fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (j, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            re[k] += v * ang.cos();
            im[k] += v * ang.sin();
        }
    }
    (re, im)
}

#[test]
fn elementwise_examples() {
    let a = t(&[2], &[-1.0, 2.0]);
    assert_eq!(elementwise(ElementwiseOp::Abs, &a, None).unwrap().data(), &[1.0, 2.0]);
    let b = t(&[2], &[3.0, 3.0]);
    assert_eq!(b.sub(&b).unwrap().data(), &[0.0, 0.0]);
    let c = t(&[3], &[1.0, 2.0, 3.0]);
    assert_eq!(c.mul(&Tensor::scalar(2.0)).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn elementwise_errors() {
    let a = t(&[2], &[1.0, 2.0]);
    let b = t(&[3], &[1.0, 2.0, 3.0]);
    match a.add(&b) {
        Err(TensorError::ShapeMismatch { lhs, rhs }) => {
            assert_eq!(lhs, vec![2]);
            assert_eq!(rhs, vec![3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(a.div(&t(&[2], &[1.0, 0.0])).unwrap_err(), TensorError::DivisionByZero);
    assert_eq!(
        elementwise(ElementwiseOp::Add, &a, None).unwrap_err(),
        TensorError::MissingOperand
    );
}

#[test]
fn matmul_examples() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    let r = t(&[1, 2], &[1.0, 0.0]);
    let c = t(&[2, 1], &[0.0, 1.0]);
    assert_eq!(r.matmul(&c).unwrap().data(), &[0.0]);
    assert!(m.matmul(&t(&[3, 1], &[1.0, 1.0, 1.0])).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!((c.data()[i * 2 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn reduce_examples() {
    assert_eq!(reduce(ReduceOp::Mean, &t(&[2], &[2.0, 4.0]), None).unwrap().item(), 3.0);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let s = reduce(ReduceOp::Sum, &m, Some(0)).unwrap();
    assert_eq!(s.shape(), &[2]);
    assert_eq!(s.data(), &[4.0, 6.0]);
    assert!(matches!(m.sum(Some(2)), Err(TensorError::Axis { .. })));
}

#[test]
fn mean_matches_compensated_two_pass() {
    let x = random(&[1000], 9);
    // First pass: Kahan sum; second pass: correction from residuals.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in x.data() {
        let y = v - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    let first = sum / 1000.0;
    let correction = x.data().iter().map(|v| v - first).sum::<f64>() / 1000.0;
    let oracle = first + correction;
    assert!((x.mean(None).unwrap().item() - oracle).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let eq = t(&[4], &[5.0; 4]).softmax(1.0, None).unwrap();
    for v in eq.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let big = t(&[2], &[1000.0, 0.0]).softmax(1.0, Some((-20.0, 20.0))).unwrap();
    assert!(big.data().iter().all(|v| v.is_finite()));
    assert!((big.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let expected = 1.0 / (1.0 + (-20.0f64).exp());
    assert!((big.data()[0] - expected).abs() < 1e-15);

    let s = t(&[3], &[1.0, 2.0, 3.0]).softmax(1.0, None).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in s.data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-12);
    }

    assert!(t(&[2], &[1.0, 2.0]).softmax(0.0, None).is_err());
    assert!(t(&[2], &[1.0, 2.0]).softmax(1.0, Some((1.0, -1.0))).is_err());
}

#[test]
fn huber_examples() {
    let r = t(&[3], &[0.0, 0.5, 2.0]).huber(1.0).unwrap();
    assert_eq!(r.data(), &[0.0, 0.125, 1.5]);
    assert!(t(&[1], &[1.0]).huber(0.0).is_err());
    assert!(t(&[1], &[1.0]).huber(-1.0).is_err());
}

#[test]
fn fft_examples() {
    let c = 1.75;
    let constant = fft_time(&t(&[4, 1], &[c; 4])).unwrap();
    assert!((constant[0].real[0] - 4.0 * c).abs() < 1e-12);
    for k in 1..4 {
        assert!(constant[0].real[k].abs() < 1e-12 && constant[0].imag[k].abs() < 1e-12);
    }
    let imp = fft_time(&t(&[4], &[1.0, 0.0, 0.0, 0.0])).unwrap();
    for k in 0..4 {
        assert!((imp[0].real[k] - 1.0).abs() < 1e-12 && imp[0].imag[k].abs() < 1e-12);
    }
    let x = random(&[8], 4);
    let spec = fft_time(&x).unwrap();
    let (re, im) = naive_dft(x.data());
    for k in 0..8 {
        assert!((spec[0].real[k] - re[k]).abs() < 1e-9);
        assert!((spec[0].imag[k] - im[k]).abs() < 1e-9);
    }
}

#[test]
fn fft_time_runs_per_fiber() {
    // [t=3, 2 fibers], non-power-of-two path.
    let x = t(&[3, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
    let spec = fft_time(&x).unwrap();
    assert_eq!(spec.len(), 2);
    let (re, im) = naive_dft(&[10.0, 20.0, 30.0]);
    for k in 0..3 {
        assert!((spec[1].real[k] - re[k]).abs() < 1e-9);
        assert!((spec[1].imag[k] - im[k]).abs() < 1e-9);
    }
    let back = ifft_time(&spec, &[3, 2]).unwrap();
    for (a, b) in back.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let x = random(&[5], 3).requires_grad_();
    let g = x.sum(None).unwrap().backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.0; 5]);

    let c = Tensor::scalar(10.0);
    let loss = x.sub(&c).unwrap().abs().unwrap().mean(None).unwrap();
    let g = loss.backward().unwrap();
    for v in g.get(&x).unwrap() {
        assert_eq!(*v, -0.2);
    }

    let err = x.backward().unwrap_err();
    assert!(matches!(err, TensorError::NonScalarRoot { .. }));
}

#[test]
fn abs_subgradient_is_zero_at_kink() {
    let x = t(&[2], &[0.0, 1.0]).requires_grad_();
    let g = x.abs().unwrap().sum(None).unwrap().backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn grad_check_examples() {
    // Dyadic inputs and step keep every sum exact.
    let x = Tensor::from_vec((0..6).map(|i| (i as f64 - 2.5) / 8.0).collect());
    let r = grad_check_with_step(|v| v[0].sum(None), std::slice::from_ref(&x), 1.0 / 65536.0).unwrap();
    assert_eq!(r.worst(), 0.0);
    let x = random(&[6], 5);
    let r = grad_check(|v| v[0].square()?.sum(None)?.scale(0.5), std::slice::from_ref(&x)).unwrap();
    assert!(r.worst() <= 1e-9, "{}", r.worst());
    assert!(grad_check(|v| Ok::<_, TensorError>(v[0].clone()), &[x]).is_err());
}

#[test]
fn detach_examples() {
    let x = random(&[4], 6).requires_grad_();
    let d = x.detach();
    assert_eq!(d.data(), x.data());
    assert!(!d.requires_grad());

    // w * e with w detached: gradient reaches e with w as a constant.
    let w = x.square().unwrap().detach();
    let e = random(&[4], 7).requires_grad_();
    let g = w.mul(&e).unwrap().sum(None).unwrap().backward().unwrap();
    assert_eq!(g.get(&e).unwrap(), w.data());
    assert!(g.get(&x).is_none());
}

#[test]
fn detach_blocks_the_only_path() {
    let teacher = random(&[3], 8).requires_grad_();
    let student = random(&[3], 9).requires_grad_();
    let target = teacher.scale(2.0).unwrap().detach();
    let loss = student.sub(&target).unwrap().abs().unwrap().mean(None).unwrap();
    let g = loss.backward().unwrap();
    assert!(g.get(&student).is_some());
    assert_eq!(g.get_or_zeros(&teacher), vec![0.0; 3]);
}

#[test]
fn non_grad_tensors_collect_nothing() {
    let x = random(&[3], 10);
    let g = x.sum(None).unwrap().backward().unwrap();
    assert!(g.is_empty());
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = t(&[1], &[3.0]).requires_grad_();
    let y = x.mul(&x).unwrap().add(&x).unwrap();
    let g = y.sum(None).unwrap().backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[7.0]);
}

#[test]
fn structural_ops_round_trip_values() {
    let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(m.narrow(1, 1, 2).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    assert_eq!(m.gather_rows(&[1, 0]).unwrap().data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    let parts = [m.narrow(1, 0, 1).unwrap(), m.narrow(1, 1, 2).unwrap()];
    assert_eq!(Tensor::concat(&parts, 1).unwrap().data(), m.data());
    assert_eq!(m.transpose().unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    assert!(m.narrow(0, 1, 2).is_err());
}

#[test]
fn row_cosine_of_zero_vector_is_zero() {
    let a = t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
    let b = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
    let c = a.row_cosine(&b).unwrap();
    assert_eq!(c.data()[0], 0.0);
    assert!((c.data()[1] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn non_finite_results_are_rejected() {
    let x = t(&[1], &[1000.0]);
    assert!(matches!(x.exp(), Err(TensorError::NonFinite { op: "exp" })));
}

type UnaryFn = fn(&Tensor) -> Result<Tensor>;

fn unary_ops() -> Vec<(&'static str, UnaryFn)> {
    vec![
        ("neg", |x| x.neg()),
        ("exp", |x| x.exp()),
        ("tanh", |x| x.tanh()),
        ("gelu", |x| x.gelu()),
        ("square", |x| x.square()),
        ("huber", |x| x.huber(0.7)),
        ("scale", |x| x.scale(-1.3)),
        ("add_scalar", |x| x.add_scalar(0.4)),
        ("layer_norm", |x| x.reshape(&[2, 4])?.layer_norm(1e-5)),
        ("softmax", |x| x.reshape(&[2, 4])?.softmax(0.8, None)),
        ("softmax_clip", |x| x.reshape(&[2, 4])?.softmax(0.1, Some((-5.0, 5.0)))),
        ("transpose", |x| x.reshape(&[2, 4])?.transpose()),
        ("sum_axis", |x| x.reshape(&[2, 4])?.sum(Some(0))),
        ("mean_axis", |x| x.reshape(&[2, 2, 2])?.mean(Some(1))),
        ("narrow", |x| x.reshape(&[2, 4])?.narrow(1, 1, 2)),
        ("gather", |x| x.reshape(&[4, 2])?.gather_rows(&[3, 0, 3])),
        ("dft", |x| x.reshape(&[4, 2])?.temporal_dft(4)),
        ("dft3", |x| x.narrow(0, 0, 6)?.reshape(&[3, 2])?.temporal_dft(3)),
        ("cross_entropy", |x| x.reshape(&[2, 4])?.cross_entropy(&[1, 3])),
    ]
}

fn weighted_sum(y: &Tensor) -> Result<Tensor> {
    // Non-uniform weights so every output position matters.
    let w: Vec<f64> = (0..y.numel()).map(|i| 1.0 + (1.3 * i as f64 + 0.7).sin()).collect();
    y.reshape(&[y.numel()])?.mul(&Tensor::from_vec(w))?.sum(None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unary_gradients_match_finite_differences(v in prop::collection::vec(-2.0f64..2.0, 8)) {
        let x = Tensor::from_vec(v);
        for (name, op) in unary_ops() {
            let r = grad_check(|i| weighted_sum(&op(&i[0])?), std::slice::from_ref(&x)).unwrap();
            prop_assert!(r.worst() <= 1e-4, "{name}: {}", r.worst());
        }
    }

    #[test]
    fn abs_and_relu_gradients_away_from_zero(
        v in prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], 6)
    ) {
        let x = Tensor::from_vec(v);
        for op in [Tensor::abs as UnaryFn, Tensor::relu] {
            let r = grad_check(|i| weighted_sum(&op(&i[0])?), std::slice::from_ref(&x)).unwrap();
            prop_assert!(r.worst() <= 1e-4);
        }
    }

    #[test]
    fn binary_gradients_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(prop_oneof![-2.0f64..-0.2, 0.2f64..2.0], 6),
        s in 0.5f64..2.0,
    ) {
        let (a, b) = (Tensor::from_vec(a), Tensor::from_vec(b));
        let inputs = [a, b, Tensor::scalar(s)];
        let checks: Vec<fn(&[Tensor]) -> Result<Tensor>> = vec![
            |i| weighted_sum(&i[0].add(&i[1])?),
            |i| weighted_sum(&i[0].sub(&i[2])?),
            |i| weighted_sum(&i[0].mul(&i[1])?),
            |i| weighted_sum(&i[0].mul(&i[2])?),
            |i| weighted_sum(&i[0].div(&i[1])?),
            |i| weighted_sum(&i[0].div(&i[2])?),
            |i| weighted_sum(&i[0].reshape(&[2, 3])?.matmul(&i[1].reshape(&[3, 2])?)?),
            |i| weighted_sum(&i[0].reshape(&[2, 3])?.add_row(&i[1].narrow(0, 0, 3)?)?),
            |i| weighted_sum(&i[0].reshape(&[2, 3])?.mul_row(&i[1].narrow(0, 3, 3)?)?),
            |i| weighted_sum(&i[0].reshape(&[2, 3])?.row_cosine(&i[1].reshape(&[2, 3])?)?),
            |i| weighted_sum(&Tensor::concat(&[i[0].clone(), i[1].clone()], 0)?),
        ];
        for (k, f) in checks.iter().enumerate() {
            let r = grad_check(f, &inputs).unwrap();
            prop_assert!(r.worst() <= 1e-4, "check {k}: {}", r.worst());
        }
    }

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-1e6f64..1e6, 1..12), tau in 0.01f64..100.0) {
        let s = Tensor::from_vec(v).softmax(tau, Some((-20.0, 20.0))).unwrap();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.data().iter().all(|p| *p > 0.0));
    }

    #[test]
    fn fft_round_trip(v in prop::collection::vec(-5.0f64..5.0, 2..17)) {
        let n = v.len();
        let x = Tensor::new(&[n], v.clone()).unwrap();
        let back = ifft_time(&fft_time(&x).unwrap(), &[n]).unwrap();
        let scale = v.iter().map(|a| a.abs()).fold(1.0, f64::max);
        for (a, b) in back.data().iter().zip(&v) {
            prop_assert!((a - b).abs() / scale < 1e-9);
        }
    }

    #[test]
    fn huber_continuous_at_knee(delta in 1e-3f64..10.0, sign in prop::bool::ANY) {
        let r = if sign { delta } else { -delta };
        prop_assert_eq!(huber_value(r, delta), 0.5 * r * r);
    }
}
