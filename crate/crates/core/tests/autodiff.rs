mod common;

use common::{max_gradient_error, rng, uniform};
use cyclereward::kernels::conv3x3_direct;
use cyclereward::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn add_is_elementwise() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    assert_eq!(tape.add(&a, &b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut r = rng(1);
    let a = uniform(&[3, 3], -1.0, 1.0, &mut r);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let out = tape.matmul(&tape.constant(eye), &tape.constant(a.clone())).unwrap();
    assert!(out.value().max_abs_diff(&a) < 1e-15);
}

#[test]
fn conv_of_delta_image_reproduces_kernel() {
    let (h, w) = (7, 7);
    let mut delta = vec![0.0; h * w];
    delta[3 * w + 3] = 1.0;
    let mut r = rng(2);
    let kernel = uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut r);
    let tape = Tape::new();
    let out = tape
        .conv2d3x3(
            &tape.constant(t(&[1, h, w], &delta)),
            &tape.constant(kernel.clone()),
            None,
        )
        .unwrap();
    let oracle = conv3x3_direct(&delta, 1, h, w, kernel.data(), 1);
    assert_eq!(out.value().data(), oracle.as_slice());
    // correlation: output at (3+dy, 3+dx) is kernel[1-dy][1-dx]
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let y = (3 + dy) as usize;
            let x = (3 + dx) as usize;
            let k = ((1 - dy) * 3 + (1 - dx)) as usize;
            assert_eq!(out.value().data()[y * w + x], kernel.data()[k]);
        }
    }
}

#[test]
fn square_derivative_at_three() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(&x, &x).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.get(&x).unwrap().item(), 6.0);
}

#[test]
fn mean_relu_matvec_matches_finite_differences() {
    let mut r = rng(3);
    let w = uniform(&[5, 4], -2.0, 2.0, &mut r);
    let x = uniform(&[4, 1], -2.0, 2.0, &mut r);
    let f = |tape: &Tape, v: &[Var]| {
        let y = tape.matmul(&v[0], &v[1]).unwrap();
        tape.mean(&tape.relu(&y).unwrap()).unwrap()
    };
    assert!(max_gradient_error(&f, &[w, x], 1e-5) < 1e-4);
}

#[test]
fn detached_input_has_no_gradient_entry() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(&x, &c).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.len(), 1);
    assert!(g.get(&c).is_none());
    assert_eq!(g.get(&x).unwrap().item(), 5.0);
}

#[test]
fn detached_ops_record_nothing() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::full(&[4], 2.0));
    let c = tape.mul(&a, &b).unwrap();
    tape.relu(&c).unwrap();
    assert_eq!(tape.stats().nodes, 0);
}

#[test]
fn stats_count_recorded_ops() {
    let tape = Tape::new();
    assert_eq!(tape.stats().nodes, 0);
    assert_eq!(tape.stats().saved_elements, 0);
    let a = tape.leaf(Tensor::full(&[4], 1.0));
    let b = tape.leaf(Tensor::full(&[4], 2.0));
    tape.add(&a, &b).unwrap();
    assert_eq!(tape.stats().nodes, 1);
}

#[test]
fn repeated_blocks_scale_node_count() {
    let block = |tape: &Tape, x: &Var, w: &Var| {
        let y = tape.matmul(w, x).unwrap();
        let y = tape.sigmoid(&y).unwrap();
        tape.add(&y, x).unwrap()
    };
    let count = |k: usize| {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::full(&[3, 3], 0.1));
        let mut x = tape.constant(Tensor::full(&[3, 1], 1.0));
        for _ in 0..k {
            x = block(&tape, &x, &w);
        }
        tape.stats().nodes
    };
    let one = count(1);
    for k in 2..6 {
        assert_eq!(count(k), k * one);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    match tape.add(&a, &b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(tape.matmul(&a, &a).is_err());
}

#[test]
fn division_rejects_tiny_denominator() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[2], 1.0));
    let d = tape.constant(t(&[2], &[1.0, 1e-13]));
    assert!(matches!(tape.div(&a, &d), Err(Error::DivisionByZero(_))));
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 1.0));
    let y = tape.relu(&x).unwrap();
    assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(&y).unwrap();
    tape.backward(&s).unwrap();
    assert!(matches!(tape.backward(&s), Err(Error::TapeConsumed)));
    assert!(matches!(tape.relu(&x), Err(Error::TapeConsumed)));
}

#[test]
fn vars_from_other_tapes_are_rejected() {
    let a = Tape::new();
    let b = Tape::new();
    let x = a.leaf(Tensor::scalar(1.0));
    assert!(matches!(b.relu(&x), Err(Error::ForeignVar)));
}

#[test]
fn scalar_broadcast_gradient_sums() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[4], 2.0));
    let s = tape.leaf(Tensor::scalar(3.0));
    let y = tape.sum(&tape.mul(&x, &s).unwrap()).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.get(&s).unwrap().item(), 8.0);
    assert_eq!(g.get(&x).unwrap().data(), &[3.0; 4]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(4);
    let x = uniform(&[4, 3, 3], -3.0, 3.0, &mut r);
    let tape = Tape::new();
    let y = tape.softmax(&tape.constant(x)).unwrap();
    for p in 0..9 {
        let s: f64 = (0..4).map(|k| y.value().data()[k * 9 + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

// Every differentiable op against central differences, with inputs in
// [-2, 2]. Relu and clamp probes avoid the kinks by construction.
mod per_op {
    use super::*;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn check(seed: u64, shapes: &[&[usize]], lo: f64, hi: f64, f: &common::Objective) {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, lo, hi, &mut r)).collect();
        let err = max_gradient_error(f, &inputs, H);
        assert!(err < TOL, "relative error {err:e}");
    }

    fn away_from_zero(t: &Tensor) -> Tensor {
        t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn elementwise_binary(seed in 0u64..1000) {
            check(seed, &[&[6], &[6]], -2.0, 2.0, &|t, v| {
                let s = t.add(&v[0], &v[1]).unwrap();
                let d = t.sub(&s, &v[1]).unwrap();
                let m = t.mul(&d, &v[1]).unwrap();
                t.sum(&t.mul(&m, &s).unwrap()).unwrap()
            });
        }

        #[test]
        fn division(seed in 0u64..1000) {
            check(seed, &[&[5], &[5]], 0.5, 2.0, &|t, v| {
                t.mean(&t.div(&v[0], &v[1]).unwrap()).unwrap()
            });
        }

        #[test]
        fn matmul_and_sigmoid(seed in 0u64..1000) {
            check(seed, &[&[3, 4], &[4, 2]], -2.0, 2.0, &|t, v| {
                let y = t.matmul(&v[0], &v[1]).unwrap();
                t.sum(&t.sigmoid(&y).unwrap()).unwrap()
            });
        }

        #[test]
        fn conv3x3_with_bias(seed in 0u64..1000) {
            check(seed, &[&[2, 5, 4], &[3, 2, 3, 3], &[3]], -2.0, 2.0, &|t, v| {
                let y = t.conv2d3x3(&v[0], &v[1], Some(&v[2])).unwrap();
                let y = t.sigmoid(&y).unwrap();
                t.mean(&t.mul(&y, &y).unwrap()).unwrap()
            });
        }

        #[test]
        fn conv1x1_and_channel_bias(seed in 0u64..1000) {
            check(seed, &[&[3, 2, 3], &[2, 3], &[2], &[2]], -2.0, 2.0, &|t, v| {
                let y = t.conv1x1(&v[0], &v[1], Some(&v[2])).unwrap();
                let y = t.add_channel(&y, &v[3]).unwrap();
                t.sum(&t.mul(&y, &y).unwrap()).unwrap()
            });
        }

        #[test]
        fn replicate_pad_and_crop(seed in 0u64..1000) {
            check(seed, &[&[2, 3, 4], &[1, 2, 3, 3]], -2.0, 2.0, &|t, v| {
                let p = t.pad_replicate(&v[0]).unwrap();
                let y = t.conv2d3x3(&p, &v[1], None).unwrap();
                let y = t.crop(&y).unwrap();
                t.sum(&t.mul(&y, &y).unwrap()).unwrap()
            });
        }

        #[test]
        fn pool_and_upsample(seed in 0u64..1000) {
            check(seed, &[&[2, 4, 6], &[2, 2, 3, 3]], -2.0, 2.0, &|t, v| {
                let p = t.avg_pool2(&v[0]).unwrap();
                let y = t.conv2d3x3(&p, &v[1], None).unwrap();
                let u = t.upsample2(&y).unwrap();
                t.sum(&t.mul(&u, &v[0]).unwrap()).unwrap()
            });
        }

        #[test]
        fn log_and_sqrt(seed in 0u64..1000) {
            check(seed, &[&[6]], 0.2, 2.0, &|t, v| {
                let l = t.log(&v[0]).unwrap();
                let s = t.sqrt(&v[0]).unwrap();
                t.sum(&t.mul(&l, &s).unwrap()).unwrap()
            });
        }

        #[test]
        fn relu_away_from_kink(seed in 0u64..1000) {
            let mut r = rng(seed);
            let x = away_from_zero(&uniform(&[8], -2.0, 2.0, &mut r));
            let f = |t: &Tape, v: &[Var]| {
                let y = t.relu(&v[0]).unwrap();
                t.sum(&t.mul(&y, &v[0]).unwrap()).unwrap()
            };
            prop_assert!(max_gradient_error(&f, &[x], H) < TOL);
        }

        #[test]
        fn clamp_and_affine(seed in 0u64..1000) {
            let mut r = rng(seed);
            let x = uniform(&[8], -2.0, 2.0, &mut r)
                .map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v });
            let f = |t: &Tape, v: &[Var]| {
                let y = t.clamp(&v[0], -1.0, 1.0).unwrap();
                let y = t.affine(&y, 1.5, -0.25).unwrap();
                t.sum(&t.mul(&y, &y).unwrap()).unwrap()
            };
            prop_assert!(max_gradient_error(&f, &[x], H) < TOL);
        }

        #[test]
        fn softmax_weighted(seed in 0u64..1000) {
            check(seed, &[&[4, 2, 3], &[4, 2, 3]], -2.0, 2.0, &|t, v| {
                let p = t.softmax(&v[0]).unwrap();
                t.sum(&t.mul(&p, &v[1]).unwrap()).unwrap()
            });
        }

        #[test]
        fn cross_entropy_and_mse(seed in 0u64..1000) {
            let target = [0u8, 3, 1, 2, 2, 1];
            check(seed, &[&[4, 2, 3], &[4, 2, 3]], -2.0, 2.0, &|t, v| {
                let ce = t.cross_entropy(&v[0], &target).unwrap();
                let m = t.mse(&v[0], &v[1]).unwrap();
                t.add(&ce, &m).unwrap()
            });
        }
    }
}
