use super::*;
use crate::gradcheck::check_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let v = tape.constant(t2(&[&[5.0], &[7.0]]));
    let c = tape.matmul(p, v).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let w = rand_tensor(&mut rng, &[3, 2]);
    let report = check_gradients(&[a, b], STEP, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let w = t.constant(w.clone());
        let cw = t.mul(c, w)?;
        Ok(t.sum(cw))
    })
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

    // closed form: e^k / (e + e^2 + e^3)
    let e = std::f64::consts::E;
    let z = e + e * e + e * e * e;
    let expect = [e / z, e * e / z, e * e * e / z];
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan_and_sums_to_one_on_any_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, f64::NAN]));
    assert_eq!(tape.softmax(x, 0), Err(TensorError::NonFinite("softmax")));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = tape.constant(rand_tensor(&mut rng, &[2, 3, 4]));
    for axis in 0..3 {
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y);
        let (outer, n, inner) = kernels::axis_split(v.shape(), axis);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| v.data()[(o * n + j) * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let a = tape.constant(Tensor::vector(vec![3.0, -2.0, 7.5]));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let p = tape.mul(a, zero).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.layer_norm(x, 0.0).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / 3.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    // direct formula: (x - 2) / sqrt(2/3)
    let s = (2.0f64 / 3.0).sqrt();
    for (a, b) in d.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn broadcasting_is_scalar_only() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
    let s = tape.constant(Tensor::scalar(2.0));
    let c = tape.add(a, s).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0; 6]);
    let c = tape.sub(s, a).unwrap();
    assert_eq!(tape.shape(c), &[2, 3]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]), true);
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let xx = tape.mul(x, x).unwrap();
    let l = tape.sum(xx);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(tape.grad(x).unwrap().shape(), tape.value(x).shape());
}

#[test]
fn backward_twice_requires_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert_eq!(tape.backward(l), Err(TensorError::BackwardTwice));
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert_eq!(tape.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 1.0]), true);
    let r = tape.relu(x);
    let l = tape.sum(r);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn gradients_accumulate_over_paths() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let a = tape.scale(x, 2.0);
    let b = tape.mul(x, x).unwrap();
    let c = tape.add(a, b).unwrap();
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 8.0);
}

#[test]
fn masked_softmax_zeros_disallowed_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[0.5, 0.5, 9.0]]));
    let y = tape.masked_softmax(x, &[true, true, false, false, true, true]).unwrap();
    let v = tape.value(y);
    assert_eq!(v.at2(0, 2), 0.0);
    assert_eq!(v.at2(1, 0), 0.0);
    assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // unmasked prefix matches the plain softmax of the prefix bit for bit
    let p = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let q = tape.softmax(p, 1).unwrap();
    assert_eq!(&tape.value(y).row(0)[..2], tape.value(q).data());
    let x = tape.constant(t2(&[&[1.0, 2.0]]));
    assert!(tape.masked_softmax(x, &[false, false]).is_err());
}

#[test]
fn focal_loss_reference_value() {
    // p_t = 0.5 at logit 0: alpha * (1 - 0.5)^2 * ln 2
    let v = ops::focal_element(0.0, 1.0, 0.25, 2.0);
    assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
    let v = ops::focal_element(0.0, 0.0, 0.25, 2.0);
    assert!((v - 0.75 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
}

/// Every differentiable op, checked against central differences.
#[test]
fn all_ops_pass_finite_difference_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);
    let w23 = rand_tensor(&mut rng, &[2, 3]);
    let w32 = rand_tensor(&mut rng, &[3, 2]);
    let w3 = rand_tensor(&mut rng, &[3]);
    let weigh = move |t: &mut Tape, y: Var, w: &Tensor| -> Result<Var> {
        let w = t.constant(w.clone());
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    };
    let (a, b, c, d, e, f, g) = (w23.clone(), w23.clone(), w23.clone(), w23.clone(), w23.clone(), w23.clone(), w23.clone());
    let (h, i, j, k, l, m) = (w23.clone(), w32.clone(), w23.clone(), w23.clone(), w23.clone(), w23.clone());
    let (n, o, p, q) = (w3.clone(), w23.clone(), w23.clone(), w23.clone());
    let cases: Vec<Case> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| { let y = t.add(v[0], v[1])?; weigh(t, y, &a) })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| { let y = t.sub(v[0], v[1])?; weigh(t, y, &b) })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| { let y = t.mul(v[0], v[1])?; weigh(t, y, &c) })),
        ("mul_scalar", vec![vec![2, 3], vec![]], Box::new(move |t, v| { let y = t.mul(v[0], v[1])?; weigh(t, y, &d) })),
        ("div", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| {
            let den = t.abs(v[1]);
            let den = t.add_scalar(den, 0.5);
            let y = t.div(v[0], den)?;
            weigh(t, y, &e)
        })),
        ("minimum", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| { let y = t.minimum(v[0], v[1])?; weigh(t, y, &f) })),
        ("maximum", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| { let y = t.maximum(v[0], v[1])?; weigh(t, y, &g) })),
        ("relu_sigmoid", vec![vec![2, 3]], Box::new(move |t, v| { let y = t.relu(v[0]); let y = t.sigmoid(y); weigh(t, y, &h) })),
        ("transpose", vec![vec![2, 3]], Box::new(move |t, v| { let y = t.transpose(v[0])?; weigh(t, y, &i) })),
        ("softmax0", vec![vec![2, 3]], Box::new(move |t, v| { let y = t.softmax(v[0], 0)?; weigh(t, y, &j) })),
        ("softmax1", vec![vec![2, 3]], Box::new(move |t, v| { let y = t.softmax(v[0], 1)?; weigh(t, y, &k) })),
        ("masked_softmax", vec![vec![2, 3]], Box::new(move |t, v| {
            let y = t.masked_softmax(v[0], &[true, false, true, true, true, false])?;
            weigh(t, y, &l)
        })),
        ("layer_norm", vec![vec![2, 3]], Box::new(move |t, v| { let y = t.layer_norm(v[0], 1e-5)?; weigh(t, y, &m) })),
        ("add_row_mul_row", vec![vec![2, 3], vec![3], vec![3]], Box::new(move |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            let y = t.add_row(y, v[2])?;
            let y = t.sum(y);
            let w = t.constant(Tensor::scalar(n.data()[0]));
            t.mul(y, w)
        })),
        ("concat_slice_gather", vec![vec![2, 3], vec![2, 2]], Box::new(move |t, v| {
            let c1 = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice_cols(c1, 1, 4)?;
            let c0 = t.concat(&[s, v[0]], 0)?;
            let r = t.slice_rows(c0, 1, 3)?;
            let gth = t.gather_rows(r, &[1, 0, 1])?;
            let gth = t.slice_rows(gth, 0, 2)?;
            weigh(t, gth, &o)
        })),
        ("reshape_mean_abs_sum", vec![vec![2, 3]], Box::new(move |t, v| {
            let r = t.reshape(v[0], &[3, 2])?;
            let s = t.mul(r, r)?;
            let m = t.mean(s);
            let a = t.abs_sum(v[0]);
            t.add(m, a)
        })),
        ("ln_clamp_scale", vec![vec![2, 3]], Box::new(move |t, v| {
            let s = t.sigmoid(v[0]);
            let l = t.ln(s)?;
            let c = t.clamp_min(v[0], -0.2);
            let y = t.add(l, c)?;
            let y = t.scale(y, -1.7);
            weigh(t, y, &p)
        })),
        ("sigmoid_focal", vec![vec![2, 3]], Box::new(move |t, v| {
            let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
            t.sigmoid_focal(v[0], &targets, 0.25, 2.0)
        })),
        ("cross_entropy", vec![vec![2, 3]], Box::new(move |t, v| {
            let y = t.cross_entropy(v[0], &[2, 0], &[1.0, 0.1])?;
            let w = t.constant(Tensor::scalar(q.data()[2]));
            t.mul(y, w)
        })),
    ];
    for (name, shapes, f) in cases {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = check_gradients(&inputs, STEP, |t, v| f(t, v)).unwrap();
        assert!(report.passes(TOL), "{name}: {report:?}");
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let a = tape.constant(rand_tensor(&mut rng, &[5, 7]));
        let b = tape.constant(rand_tensor(&mut rng, &[7, 3]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let n = tape.layer_norm(s, 1e-5).unwrap();
        tape.value(n).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matmul_and_softmax_gradients_on_random_shapes(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let w = rand_tensor(&mut rng, &[m, n]);
            let report = check_gradients(&[a, b], STEP, |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let s = t.softmax(c, 1)?;
                let w = t.constant(w.clone());
                let p = t.mul(s, w)?;
                Ok(t.sum(p))
            }).unwrap();
            prop_assert!(report.passes(TOL), "{:?}", report);
        }

        #[test]
        fn layer_norm_gradients_on_random_shapes(m in 1usize..4, n in 2usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[m, n]);
            let w = rand_tensor(&mut rng, &[m, n]);
            let report = check_gradients(&[x], 1e-5, |t, v| {
                let y = t.layer_norm(v[0], 1e-5)?;
                let w = t.constant(w.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            }).unwrap();
            prop_assert!(report.passes(TOL), "{:?}", report);
        }
    }
}
