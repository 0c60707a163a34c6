use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{fd_check, FdOptions, Probe};

fn random_channel(rng: &mut impl Rng, n: usize) -> ChannelMatrix {
    let gains = (0..n * n).map(|_| 10f64.powf(rng.gen_range(-3.0..3.0))).collect();
    ChannelMatrix::new(n, gains).unwrap()
}

fn random_params(rng: &mut impl Rng, shape: NetShape) -> NetParams {
    let count = shape.param_count();
    let flat: Vec<f64> = (0..count).map(|_| rng.gen_range(-0.5..0.5)).collect();
    NetParams::from_flat(shape, &flat).unwrap()
}

fn random_perm(rng: &mut impl Rng, n: usize) -> Permutation {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Permutation::from_indices(idx).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn input_of_unit_gains_is_zero() {
    let g = ChannelMatrix::new(3, vec![1.0; 9]).unwrap();
    assert!(init_input(&g).data().iter().all(|&v| v == 0.0));
    assert_eq!(init_input(&g).shape(), &[1, 3, 3]);
}

#[test]
fn input_is_decimal_log() {
    let g = ChannelMatrix::from_rows(&[vec![1e3, 1e-2], vec![10.0, 1e-5]]).unwrap();
    let f = init_input(&g);
    assert_eq!(f.data(), &[3.0, -2.0, 1.0, -5.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_channel(&mut rng, 4);
    for (i, v) in init_input(&g).data().iter().enumerate() {
        assert_eq!(*v, g.gains()[i].log10());
    }
}

#[test]
fn published_parameter_count() {
    let shape = NetShape::default();
    assert_eq!(shape.param_count(), 4 * (20 + 20) + 3 * 4 * (20 * 81 + 20) + 82);
    assert_eq!(shape.param_count(), 19922);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = NetParams::init(shape, -0.1, &mut rng).unwrap();
    let b = NetParams::init(shape, 1.2, &mut rng).unwrap();
    assert_eq!(a.param_count() + b.param_count(), 39844);
}

#[test]
fn zero_layer_keeps_only_log_gains() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_channel(&mut rng, 3);
    let layer = LayerParams::zeros(5, 1);
    let out = layer_forward(&init_input(&g), &layer, &g).unwrap();
    assert_eq!(out.shape(), &[21, 3, 3]);
    assert_eq!(&out.data()[..9], init_input(&g).data());
    assert!(out.data()[9..].iter().all(|&v| v == 0.0));
}

#[test]
fn first_channel_is_log_gain_for_any_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = NetShape {
        layers: 3,
        feature_dim: 4,
    };
    let p = random_params(&mut rng, shape);
    let g = random_channel(&mut rng, 4);
    let f1 = layer_forward(&init_input(&g), &p.layers[0], &g).unwrap();
    let f2 = layer_forward(&f1, &p.layers[1], &g).unwrap();
    assert_eq!(&f2.data()[..16], init_input(&g).data());
}

#[test]
fn two_user_layer_by_hand() {
    let g = ChannelMatrix::from_rows(&[vec![100.0, 0.1], vec![0.01, 1000.0]]).unwrap();
    let x = [[2.0, -1.0], [-2.0, 3.0]];
    let w = [1.0, -1.0, 0.5, 2.0];
    let b = [0.5, 0.25, -0.5, 1.0];
    let layer = LayerParams {
        weight: Tensor::new(vec![4, 1], w.to_vec()).unwrap(),
        bias: Tensor::new(vec![4], b.to_vec()).unwrap(),
    };
    let out = layer_forward(&init_input(&g), &layer, &g).unwrap();
    let h = |k: usize, i: usize, j: usize| (w[k] * x[i][j] + b[k]).max(0.0);
    for i in 0..2 {
        for j in 0..2 {
            let expect = [x[i][j], h(0, i, j), h(1, 1 - i, j), h(2, i, 1 - j), h(3, 1 - i, 1 - j)];
            for (c, e) in expect.iter().enumerate() {
                assert!((out.at(&[c, i, j]) - e).abs() < 1e-15, "channel {c} at ({i},{j})");
            }
        }
    }
}

#[test]
fn output_length_matches_users() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_params(&mut rng, NetShape::default());
    for n in [1, 2, 4, 7] {
        let g = random_channel(&mut rng, n);
        assert_eq!(net_forward(&g, &p, Head::Alpha, ELL_MIN).unwrap().len(), n);
    }
}

#[test]
fn beta_head_clamps_at_minimum_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = NetParams::init(NetShape::default(), -3.0, &mut rng).unwrap();
    let g = random_channel(&mut rng, 4);
    assert_eq!(net_forward(&g, &p, Head::Beta, ELL_MIN).unwrap(), vec![ELL_MIN; 4]);
    assert_eq!(net_forward(&g, &p, Head::Alpha, ELL_MIN).unwrap(), vec![-3.0; 4]);
}

#[test]
fn identity_permutation_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_channel(&mut rng, 5);
    assert_eq!(permute(&g, &Permutation::identity(5)).unwrap(), g);
}

#[test]
fn swapping_second_and_third_user() {
    let p = Permutation::from_matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let g = ChannelMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
    let pg = permute(&g, &p).unwrap();
    let expect = ChannelMatrix::from_rows(&[vec![1.0, 3.0, 2.0], vec![7.0, 9.0, 8.0], vec![4.0, 6.0, 5.0]]).unwrap();
    assert_eq!(pg, expect);
    assert_eq!(permute_vec(&[10.0, 20.0, 30.0], &p).unwrap(), vec![10.0, 30.0, 20.0]);
}

#[test]
fn permutation_then_transpose_restores() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..8 {
        let g = random_channel(&mut rng, n);
        let p = random_perm(&mut rng, n);
        let back = permute(&permute(&g, &p).unwrap(), &p.transpose()).unwrap();
        assert_eq!(back, g);
    }
}

#[test]
fn permute_matches_matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 5;
    let g = random_channel(&mut rng, n);
    let p = random_perm(&mut rng, n);
    let pm = p.matrix();
    let pg = permute(&g, &p).unwrap();
    for i in 0..n {
        for j in 0..n {
            let mut v = 0.0;
            for a in 0..n {
                for b in 0..n {
                    v += pm.at(&[i, a]) * g.get(a, b) * pm.at(&[j, b]);
                }
            }
            assert_eq!(pg.get(i, j), v);
        }
    }
}

#[test]
fn invalid_permutations_rejected() {
    assert!(Permutation::from_matrix(&[vec![1.0, 1.0], vec![0.0, 0.0]]).is_err());
    assert!(Permutation::from_matrix(&[vec![0.5, 0.5], vec![0.5, 0.5]]).is_err());
    assert!(Permutation::from_matrix(&[vec![1.0, 0.0], vec![1.0, 0.0]]).is_err());
    assert!(Permutation::from_matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0]]).is_err());
    assert!(Permutation::from_indices(vec![0, 0, 1]).is_err());
    let g = ChannelMatrix::new(2, vec![1.0; 4]).unwrap();
    assert!(matches!(permute(&g, &Permutation::identity(3)), Err(Error::InvalidPermutation(_))));
}

#[test]
fn extraction_matrix_commutes_with_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..9 {
        let e = extraction_matrix(n);
        for _ in 0..5 {
            let p = random_perm(&mut rng, n).matrix();
            let mut ep = vec![0.0; n * n];
            let mut pe = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        ep[i * n + j] += e.at(&[i, k]) * p.at(&[k, j]);
                        pe[i * n + j] += p.at(&[i, k]) * e.at(&[k, j]);
                    }
                }
            }
            assert_eq!(ep, pe);
        }
    }
}

#[test]
fn each_category_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for n in [2, 3, 5] {
        for k in 1..=4 {
            // isolate category k by zeroing the other filters
            let mut layer = LayerParams::zeros(3, 6);
            let d = 3;
            for r in 0..d {
                for c in 0..6 {
                    layer.weight.set(&[(k - 1) * d + r, c], rng.gen_range(-1.0..1.0));
                }
                layer.bias.set(&[(k - 1) * d + r], rng.gen_range(-0.5..0.5));
            }
            let g = random_channel(&mut rng, n);
            let f = Tensor::new(vec![6, n, n], (0..6 * n * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let p = random_perm(&mut rng, n);
            let lhs = layer_forward(&permute_features(&f, &p).unwrap(), &layer, &permute(&g, &p).unwrap()).unwrap();
            let rhs = permute_features(&layer_forward(&f, &layer, &g).unwrap(), &p).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12, "category {k}, n={n}");
        }
    }
}

#[test]
fn single_user_categories_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_channel(&mut rng, 1);
    let p = random_params(&mut rng, NetShape { layers: 2, feature_dim: 3 });
    let out = layer_forward(&init_input(&g), &p.layers[0], &g).unwrap();
    assert!(out.data()[4..].iter().all(|&v| v == 0.0));
    let t = net_forward(&g, &p, Head::Alpha, ELL_MIN).unwrap();
    let m = mp_forward(&g, &p, Head::Alpha, ELL_MIN).unwrap();
    assert_eq!(t, m);
}

#[test]
fn message_passing_matches_tensor_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [2, 3, 4, 7] {
        let p = random_params(&mut rng, NetShape::default());
        let g = random_channel(&mut rng, n);
        for head in [Head::Alpha, Head::Beta] {
            let t = net_forward(&g, &p, head, ELL_MIN).unwrap();
            let m = mp_forward(&g, &p, head, ELL_MIN).unwrap();
            assert!(max_abs(&t, &m) <= 1e-9, "n={n}: {t:?} vs {m:?}");
        }
    }
}

#[test]
fn message_passing_zero_single_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = random_channel(&mut rng, 3);
    let shape = NetShape { layers: 2, feature_dim: 2 };
    let mut p = NetParams::zeros(shape).unwrap();
    // read out log10 g_jj through the first concatenated channel
    p.final_layer.weight.set(&[0, 0], 1.0);
    let t = net_forward(&g, &p, Head::Alpha, ELL_MIN).unwrap();
    let m = mp_forward(&g, &p, Head::Alpha, ELL_MIN).unwrap();
    let expect: Vec<f64> = (0..3).map(|j| g.get(j, j).log10()).collect();
    assert_eq!(t, expect);
    assert_eq!(m, expect);
}

#[test]
fn batched_forward_matches_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = random_params(&mut rng, NetShape::default());
    let gs: Vec<ChannelMatrix> = (0..5).map(|_| random_channel(&mut rng, 4)).collect();
    let refs: Vec<&ChannelMatrix> = gs.iter().collect();
    let batch = net_forward_batch(&refs, &p, Head::Alpha, ELL_MIN).unwrap();
    for (b, g) in gs.iter().enumerate() {
        let single = net_forward(g, &p, Head::Alpha, ELL_MIN).unwrap();
        assert!(max_abs(&batch.data()[b * 4..(b + 1) * 4], &single) < 1e-13);
    }
}

#[test]
fn heads_have_isolated_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let shape = NetShape { layers: 3, feature_dim: 4 };
    let pa = random_params(&mut rng, shape);
    let pb = random_params(&mut rng, shape);
    let g = random_channel(&mut rng, 3);
    let mut tape = Tape::new();
    let va = NetVars::bind(&mut tape, &pa, true);
    let vb = NetVars::bind(&mut tape, &pb, true);
    let lg = tape.constant(init_input_batch(&[&g]).unwrap());
    let a = net_on_tape(&mut tape, &va, lg, Head::Alpha, ELL_MIN).unwrap();
    let b = net_on_tape(&mut tape, &vb, lg, Head::Beta, 0.0).unwrap();
    let only_b = tape.sum_all(b);
    let grads = tape.backward(only_b).unwrap();
    for v in va.vars() {
        assert!(grads.get_or_zeros(v).data().iter().all(|&x| x == 0.0));
    }
    assert!(vb.vars().iter().any(|&v| grads.get_or_zeros(v).data().iter().any(|&x| x != 0.0)));
    let only_a = tape.sum_all(a);
    let grads = tape.backward(only_a).unwrap();
    for v in vb.vars() {
        assert!(grads.get_or_zeros(v).data().iter().all(|&x| x == 0.0));
    }
}

fn probe_net(shape: NetShape, flat: &[f64], g: &ChannelMatrix, weights: &[f64]) -> (Probe, Vec<f64>) {
    let p = NetParams::from_flat(shape, flat).unwrap();
    let mut tape = Tape::new();
    let vars = NetVars::bind(&mut tape, &p, true);
    let lg = tape.constant(init_input_batch(&[g]).unwrap());
    let out = net_on_tape(&mut tape, &vars, lg, Head::Beta, 0.05).unwrap();
    let w = tape.constant(Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap());
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(weighted);
    let grads = tape.backward(loss).unwrap();
    let grad = vars.vars().iter().flat_map(|&v| grads.get_or_zeros(v).into_data()).collect();
    (
        Probe {
            value: tape.value(loss).item(),
            signature: tape.branch_signature(),
        },
        grad,
    )
}

#[test]
fn network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let shape = NetShape { layers: 4, feature_dim: 3 };
    for _ in 0..3 {
        let g = random_channel(&mut rng, 3);
        let flat = random_params(&mut rng, shape).to_flat();
        let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, grad) = probe_net(shape, &flat, &g, &weights);
        let report = fd_check(|x| probe_net(shape, x, &g, &weights).0, &flat, &grad, &FdOptions::default());
        assert!(report.passed, "{report:?}");
        assert!(report.checked > flat.len() / 2);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random_params(&mut rng, NetShape::default());
    let b = random_params(&mut rng, NetShape::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    save_checkpoint(&path, &a, &b).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert!(raw.starts_with(b"EEMAX-NET v1 L=5 d=20\n"));
    let (a2, b2) = load_checkpoint(&path).unwrap();
    assert_eq!((a2, b2), (a, b));
    std::fs::write(&path, &raw[..raw.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::DimensionMismatch(_))));
    std::fs::write(&path, b"EEMAX-NET v1 L=five d=20\n").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::MalformedHeader(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn network_is_permutation_equivariant(seed in any::<u64>(), pick in 0usize..3) {
        let n = [2, 4, 7][pick];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, NetShape::default());
        let g = random_channel(&mut rng, n);
        let p = random_perm(&mut rng, n);
        for head in [Head::Alpha, Head::Beta] {
            let lhs = net_forward(&permute(&g, &p).unwrap(), &params, head, ELL_MIN).unwrap();
            let rhs = permute_vec(&net_forward(&g, &params, head, ELL_MIN).unwrap(), &p).unwrap();
            prop_assert!(max_abs(&lhs, &rhs) <= 1e-9);
        }
    }

    #[test]
    fn flat_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = NetShape { layers: 3, feature_dim: 2 };
        let p = random_params(&mut rng, shape);
        prop_assert_eq!(NetParams::from_flat(shape, &p.to_flat()).unwrap(), p);
    }
}
