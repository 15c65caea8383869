use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
    Array::from_f64(shape.to_vec(), v).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    arr(shape, &v)
}

/// Independent central-difference oracle over a plain closure.
fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            w[i] = x[i] + h;
            let p = f(&w);
            w[i] = x[i] - h;
            let m = f(&w);
            w[i] = x[i];
            (p - m) / (2.0 * h)
        })
        .collect()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Array::zeros(vec![3]));
    let y = t.softmax(x).unwrap();
    for &p in t.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn mse_of_identical_inputs_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::<f64>::new();
    let a = random(&mut rng, &[2, 5]);
    let x = t.constant(a.clone());
    let y = t.constant(a);
    let l = t.mse(x, y).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn mean_gradient_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.param(arr(&[4], &[1.0, -2.0, 3.0, 0.5]));
    let l = t.mean(x).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(arr(&[2], &[1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[3, 2]);
    let w = random(&mut rng, &[2, 2]);
    let loss_of = |av: &[f64], bv: &[f64]| {
        // sum_ij w_ij (a b)_ij computed by hand
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let c: f64 = (0..3).map(|k| av[i * 3 + k] * bv[k * 2 + j]).sum();
                s += w.data()[i * 2 + j] * c;
            }
        }
        s
    };
    let mut t = Tape::<f64>::new();
    let va = t.param(a.clone());
    let vb = t.param(b.clone());
    let vw = t.constant(w.clone());
    let c = t.matmul(va, vb).unwrap();
    let cw = t.mul(c, vw).unwrap();
    let l = t.sum(cw).unwrap();
    let g = t.backward(l).unwrap();
    let na = numeric_grad(|x| loss_of(x, b.data()), a.data(), 1e-6);
    let nb = numeric_grad(|x| loss_of(a.data(), x), b.data(), 1e-6);
    for (x, y) in g.get(va).unwrap().data().iter().zip(&na) {
        assert!(relative_error(*x, *y) < 1e-6, "{x} vs {y}");
    }
    for (x, y) in g.get(vb).unwrap().data().iter().zip(&nb) {
        assert!(relative_error(*x, *y) < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn three_layer_perceptron_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![
        random(&mut rng, &[4, 6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6, 5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[5, 3]),
        random(&mut rng, &[3]),
    ];
    let input = random(&mut rng, &[3, 4]);
    let target = random(&mut rng, &[3, 3]);
    let report = grad_check(
        |t, p| {
            let x = t.constant(input.clone());
            let y = t.constant(target.clone());
            let h = t.affine(x, p[0], p[1])?;
            let h = t.silu(h)?;
            let h = t.affine(h, p[2], p[3])?;
            let h = t.relu(h)?;
            let o = t.affine(h, p[4], p[5])?;
            t.mse(o, y)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.coordinates, 24 + 6 + 30 + 5 + 15 + 3);
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn quadratic_grad_check_is_near_exact() {
    let report = grad_check(|t, p| t.mul(p[0], p[0]), &[Array::scalar(3.0)], 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_rejects_bad_epsilon_and_non_finite_params() {
    let f = |t: &mut Tape<f64>, p: &[Var]| t.sum(p[0]);
    assert_eq!(grad_check(f, &[Array::scalar(1.0)], 0.0).unwrap_err(), AutodiffError::BadEpsilon(0.0));
    let bad = arr(&[2], &[1.0, f64::NAN]);
    assert_eq!(grad_check(f, &[bad], 1e-6).unwrap_err(), AutodiffError::NonFinite { param: 0, index: 1 });
}

#[test]
fn shared_subexpression_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random(&mut rng, &[5]);

    // u = silu(x) consumed twice
    let mut t = Tape::<f64>::new();
    let x = t.param(x0.clone());
    let u = t.silu(x).unwrap();
    let uu = t.mul(u, u).unwrap();
    let s = t.add(uu, u).unwrap();
    let l = t.sum(s).unwrap();
    let shared = t.backward(l).unwrap().get(x).unwrap().clone();

    // same function with the subgraph duplicated
    let mut t = Tape::<f64>::new();
    let x = t.param(x0);
    let u1 = t.silu(x).unwrap();
    let u2 = t.silu(x).unwrap();
    let u3 = t.silu(x).unwrap();
    let uu = t.mul(u1, u2).unwrap();
    let s = t.add(uu, u3).unwrap();
    let l = t.sum(s).unwrap();
    let dup = t.backward(l).unwrap().get(x).unwrap().clone();

    for (a, b) in shared.data().iter().zip(dup.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn second_backward_is_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Array::scalar(2.0));
    let l = t.mul(x, x).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.backward(l).unwrap_err(), AutodiffError::AlreadyConsumed);
}

#[test]
fn non_scalar_and_foreign_losses_are_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Array::zeros(vec![2]));
    assert_eq!(t.backward(x).unwrap_err(), AutodiffError::NonScalarLoss(vec![2]));

    let mut other = Tape::<f64>::new();
    let y = other.param(Array::scalar(1.0));
    assert_eq!(t.backward(y).unwrap_err(), AutodiffError::DetachedTape);
    assert_eq!(t.add(x, y).unwrap_err(), AutodiffError::DetachedTape);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Array::zeros(vec![2, 3]));
    let b = t.constant(Array::zeros(vec![2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(err, AutodiffError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    let msg = err.to_string();
    assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");

    let c = t.constant(Array::zeros(vec![4]));
    assert!(matches!(t.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn scalar_broadcast_in_add_and_mul() {
    let mut t = Tape::<f64>::new();
    let a = t.param(arr(&[3], &[1.0, 2.0, 3.0]));
    let s = t.param(Array::scalar(2.0));
    let m = t.mul(a, s).unwrap();
    let m = t.add(s, m).unwrap();
    assert_eq!(t.value(m).data(), &[4.0, 6.0, 8.0]);
    let l = t.sum(m).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[2.0; 3]);
    // d/ds (3 s + sum a s) = 3 + 6
    assert_eq!(g.get(s).unwrap().item(), 9.0);
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 2, 4, 5]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    let mut t = Tape::<f64>::new();
    let (vx, vw, vb) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(vx, vw, Some(vb)).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[2, 3, 4, 5]);
    let at = |n: usize, c: usize, yy: isize, xx: isize| -> f64 {
        if !(0..4).contains(&yy) || !(0..5).contains(&xx) {
            0.0
        } else {
            x.data()[((n * 2 + c) * 4 + yy as usize) * 5 + xx as usize]
        }
    };
    for n in 0..2 {
        for co in 0..3 {
            for yy in 0..4 {
                for xx in 0..5 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * at(n, ci, yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            }
                        }
                    }
                    let got = out.data()[((n * 3 + co) * 4 + yy) * 5 + xx];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn embedding_rejects_out_of_range_rows() {
    let mut t = Tape::<f64>::new();
    let table = t.param(Array::zeros(vec![3, 2]));
    assert_eq!(t.embedding(table, &[0, 3]).unwrap_err(), AutodiffError::IndexOutOfRange { index: 3, len: 3 });
}

#[test]
fn f32_storage_accumulates_reductions_in_f64() {
    // 1e7 ones plus a small value: f32 running sums would lose the tail
    let mut data = vec![1.0f32; 1 << 24];
    data.push(1.0);
    let mut t = Tape::<f32>::new();
    let x = t.constant(Array::new(vec![data.len()], data).unwrap());
    let s = t.sum(x).unwrap();
    assert_eq!(t.value(s).item(), (1u32 << 24) as f32 + 1.0);
}

mod properties {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Array::new(vec![v.len()], v).unwrap());
            let y = t.softmax(x).unwrap();
            let p = t.value(y).data();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&q| q > 0.0 && q < 1.0));
        }
    }
}
