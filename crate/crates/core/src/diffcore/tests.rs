use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn relu_forward() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn matmul_first_identity_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.set(&[i, i], 1.0);
    }
    let mut tape = Tape::new();
    let w = tape.constant(eye);
    let f = tape.constant(t(&[3, 4, 4], &data));
    let y = tape.matmul_first(w, f).unwrap();
    assert_eq!(tape.value(y).data(), &data[..]);
}

#[test]
fn diag_of_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3, 3], 1.0));
    let d = tape.diag(x).unwrap();
    assert_eq!(tape.value(d).shape(), &[3]);
    assert_eq!(tape.value(d).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(tape.value(y).item(), 9.0);
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn product_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.param(Tensor::scalar(5.0));
    let z = tape.mul(x, y).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 5.0);
    assert_eq!(g.get(y).unwrap().item(), 2.0);
}

#[test]
fn unreachable_leaf_gets_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![3.0, 4.0, 5.0]));
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zeros(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(s)) if s == vec![2]));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let w = tape.param(Tensor::zeros(&[4, 5]));
    assert!(matches!(
        tape.matmul_first(w, a),
        Err(Error::ShapeMismatch { op: "matmul_first", .. })
    ));
}

/// Brute-force masked sums straight from the category definitions.
fn brute_masked(x: &[f64], n: usize, set: MaskedSet) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            let mut count = 0;
            for k in 0..n {
                for p in 0..n {
                    let inside = match set {
                        MaskedSet::SameTransmitter => p == j && k != i,
                        MaskedSet::SameReceiver => k == i && p != j,
                        MaskedSet::Unrelated => k != i && p != j,
                    };
                    if inside {
                        acc += x[k * n + p];
                        count += 1;
                    }
                }
            }
            out[i * n + j] = if count == 0 { 0.0 } else { acc / count as f64 };
        }
    }
    out
}

fn extraction(n: usize) -> Tensor {
    let mut e = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        e.set(&[i, i], 0.0);
    }
    e
}

#[test]
fn masked_mean_matches_definitions_and_extraction_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=5 {
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let e = extraction(n);
        let m = (n.max(2) - 1) as f64;
        for set in [MaskedSet::SameTransmitter, MaskedSet::SameReceiver, MaskedSet::Unrelated] {
            let mut tape = Tape::new();
            let xv = tape.constant(t(&[n, n], &x));
            let got = tape.masked_mean(xv, set).unwrap();
            let brute = brute_masked(&x, n, set);
            for (a, b) in tape.value(got).data().iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12);
            }
            if n > 1 {
                let via_e = match set {
                    MaskedSet::SameTransmitter => {
                        let y = tape.left_mat(&e, xv).unwrap();
                        tape.scale(y, 1.0 / m)
                    }
                    MaskedSet::SameReceiver => {
                        let y = tape.right_mat(xv, &e).unwrap();
                        tape.scale(y, 1.0 / m)
                    }
                    MaskedSet::Unrelated => {
                        let y = tape.left_mat(&e, xv).unwrap();
                        let y = tape.right_mat(y, &e).unwrap();
                        tape.scale(y, 1.0 / (m * m))
                    }
                };
                assert!(tape.value(via_e).max_abs_diff(tape.value(got)) < 1e-12);
            }
        }
    }
}

#[test]
fn broadcast_backward_sums() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.broadcast_to(x, &[2, 4, 3]).unwrap();
    assert_eq!(tape.value(y).at(&[1, 3, 2]), 6.0);
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0; 6]);
}

#[test]
fn fd_check_quadratic_passes_tight() {
    // f(x) = x^T A x with A symmetric; gradient 2 A x.
    let a = [[2.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 3.0]];
    let f = |x: &[f64]| {
        let mut v = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                v += x[i] * a[i][j] * x[j];
            }
        }
        Probe { value: v, signature: 0 }
    };
    let x = [0.3, -1.2, 0.7];
    let grad: Vec<f64> = (0..3)
        .map(|i| 2.0 * (0..3).map(|j| a[i][j] * x[j]).sum::<f64>())
        .collect();
    let opts = FdOptions {
        tol: 1e-7,
        ..FdOptions::default()
    };
    let rep = fd_check(f, &x, &grad, &opts);
    assert!(rep.passed, "{rep:?}");
    assert_eq!(rep.checked, 3);
}

#[test]
fn fd_check_skips_relu_kink() {
    let eval = |x: &[f64]| {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(x.to_vec()));
        let r = tape.relu(v);
        let s = tape.sum_all(r);
        let g = tape.backward(s).unwrap().get_or_zeros(v).into_data();
        (tape.value(s).item(), tape.branch_signature(), g)
    };
    let x = [0.0, 1.5, -0.5];
    let (_, _, grad) = eval(&x);
    let rep = fd_check(
        |p: &[f64]| {
            let (value, signature, _) = eval(p);
            Probe { value, signature }
        },
        &x,
        &grad,
        &FdOptions::default(),
    );
    assert_eq!(rep.skipped, vec![0]);
    assert_eq!(rep.checked, 2);
    assert!(rep.passed);
}

/// Builds a random composite graph of depth `depth` from `seed` over two
/// leaves of shape [2, 3, 3] and returns the scalar root.
fn random_graph(tape: &mut Tape, seed: u64, depth: usize, a: Var, b: Var) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = {
        let d: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.constant(t(&[2, 2], &d))
    };
    let bias = tape.constant(Tensor::vector(vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]));
    let perm = {
        let mut p = Tensor::zeros(&[3, 3]);
        for (i, j) in [(0, 2), (1, 0), (2, 1)] {
            p.set(&[i, j], 1.0);
        }
        p
    };
    let mut x = a;
    for _ in 0..depth {
        x = match rng.gen_range(0..9) {
            0 => tape.mul(x, b).unwrap(),
            1 => tape.affine(w, x, bias).unwrap(),
            2 => tape.masked_mean(x, MaskedSet::Unrelated).unwrap(),
            3 => tape.masked_mean(x, MaskedSet::SameTransmitter).unwrap(),
            4 => {
                let sq = tape.mul(x, x).unwrap();
                let pos = tape.add_scalar(sq, 1.0);
                tape.ln(pos)
            }
            5 => tape.left_mat(&perm, x).unwrap(),
            6 => tape.relu(x),
            7 => {
                let y = tape.add(x, b).unwrap();
                tape.scale(y, 0.7)
            }
            _ => {
                let d = tape.diag(x).unwrap();
                let r = tape.reshape(d, &[2, 3, 1]).unwrap();
                let e = tape.broadcast_to(r, &[2, 3, 3]).unwrap();
                tape.sub(x, e).unwrap()
            }
        };
    }
    let sq = tape.mul(x, x).unwrap();
    tape.sum_all(sq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_rule_matches_finite_differences(seed in any::<u64>(), depth in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let point: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.param(t(&[2, 3, 3], &p[..18]));
            let b = tape.param(t(&[2, 3, 3], &p[18..]));
            let root = random_graph(&mut tape, seed, depth, a, b);
            let g = tape.backward(root).unwrap();
            let mut grad = g.get_or_zeros(a).into_data();
            grad.extend(g.get_or_zeros(b).into_data());
            (tape.value(root).item(), tape.branch_signature(), grad)
        };
        let (_, _, grad) = eval(&point);
        let rep = fd_check(
            |p: &[f64]| { let (value, signature, _) = eval(p); Probe { value, signature } },
            &point,
            &grad,
            &FdOptions::default(),
        );
        prop_assert!(rep.passed, "{:?}", rep);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pa: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pb: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = |coef: (f64, f64)| {
            let mut tape = Tape::new();
            let a = tape.param(t(&[2, 3, 3], &pa));
            let b = tape.param(t(&[2, 3, 3], &pb));
            let f = random_graph(&mut tape, seed, 3, a, b);
            let g = random_graph(&mut tape, seed.wrapping_add(1), 4, b, a);
            let fs = tape.scale(f, coef.0);
            let gs = tape.scale(g, coef.1);
            let root = tape.add(fs, gs).unwrap();
            let gr = tape.backward(root).unwrap();
            let mut v = gr.get_or_zeros(a).into_data();
            v.extend(gr.get_or_zeros(b).into_data());
            v
        };
        let combined = grads((alpha, beta));
        let gf = grads((1.0, 0.0));
        let gg = grads((0.0, 1.0));
        for k in 0..combined.len() {
            let expect = alpha * gf[k] + beta * gg[k];
            prop_assert!((combined[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}

