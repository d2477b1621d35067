use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::new();
    let a = g.input(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = g.input(&t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::new();
    let a = g.input(&t2(&[vec![1.5, -2.0], vec![0.25, 9.0]]));
    let id = g.input(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let z = g.input(&Tensor::zeros(vec![2, 2]));
    let ai = g.matmul(a, id).unwrap();
    assert_eq!(g.data(ai), g.data(a));
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.data(az), &[0.0; 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(&Tensor::zeros(vec![2, 3]));
    let b = g.input(&Tensor::zeros(vec![4, 5]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn masked_softmax_symmetric_row() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![0.0, 0.0]]));
    let y = g.masked_softmax(x, &Mask::filled(1, 2, true)).unwrap();
    assert_eq!(g.data(y), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_hand_example() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![0.0, 3f64.ln()]]));
    let y = g.masked_softmax(x, &Mask::filled(1, 2, true)).unwrap();
    assert!((g.data(y)[0] - 0.25).abs() < 1e-15);
    assert!((g.data(y)[1] - 0.75).abs() < 1e-15);
}

#[test]
fn masked_softmax_single_survivor() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![5.0, 100.0]]));
    let m = Mask::new(1, 2, vec![true, false]).unwrap();
    let y = g.masked_softmax(x, &m).unwrap();
    assert_eq!(g.data(y), &[1.0, 0.0]);
}

#[test]
fn masked_softmax_rejects_fully_masked_row() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![1.0, 2.0]]));
    let m = Mask::filled(1, 2, false);
    assert!(matches!(
        g.masked_softmax(x, &m),
        Err(Error::DegenerateMask(_))
    ));
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![3.0, 3.0, 3.0]]));
    let gain = g.input(&Tensor::new(vec![3], vec![1.0; 3]).unwrap());
    let bias = g.input(&Tensor::zeros(vec![3]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    for v in g.data(y) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_hand_example() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![1.0, 3.0]]));
    let gain = g.input(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let bias = g.input(&Tensor::zeros(vec![2]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.data(y), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_zero_gain_broadcasts_bias() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![1.0, -4.0, 2.5], vec![0.0, 7.0, 7.0]]));
    let gain = g.input(&Tensor::zeros(vec![3]));
    let bias = g.input(&Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![0.0; 4]]));
    let loss = g.cross_entropy_masked(x, &[2], &[true]).unwrap();
    assert!((g.data(loss)[0] - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_saturated_correct_prediction() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![1e4, 0.0, 0.0]]));
    let loss = g.cross_entropy_masked(x, &[0], &[true]).unwrap();
    assert!(g.data(loss)[0].abs() < 1e-9);
    assert!(g.data(loss)[0].is_finite());
}

#[test]
fn cross_entropy_mask_excludes_position() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![0.0, 0.0], vec![50.0, -50.0]]));
    let loss = g
        .cross_entropy_masked(x, &[1, 0], &[true, false])
        .unwrap();
    assert!((g.data(loss)[0] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_all_masked_and_bad_target() {
    let mut g = Graph::new();
    let x = g.input(&t2(&[vec![0.0, 0.0]]));
    assert!(matches!(
        g.cross_entropy_masked(x, &[0], &[false]),
        Err(Error::DegenerateMask(_))
    ));
    assert!(matches!(
        g.cross_entropy_masked(x, &[2], &[true]),
        Err(Error::Index(_))
    ));
}

#[test]
fn backward_of_sum_wx_gives_outer_product_rows() {
    // loss = sum(W . x): dW[i][j] = x[j] for every row i.
    let mut g = Graph::new();
    let w = g.param(
        "w",
        &t2(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.6]]).with_requires_grad(true),
    );
    let x = g.input(&Tensor::new(vec![3, 1], vec![2.0, -3.0, 5.0]).unwrap());
    let wx = g.matmul(w, x).unwrap();
    let loss = g.sum_all(wx);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, -3.0, 5.0, 2.0, -3.0, 5.0]);
}

#[test]
fn leaf_off_the_loss_path_gets_no_gradient() {
    let mut g = Graph::new();
    let used = g.param("used", &Tensor::scalar(2.0).with_requires_grad(true));
    let unused = g.param("unused", &Tensor::scalar(9.0).with_requires_grad(true));
    let loss = g.scale(used, 3.0);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(used).unwrap(), &[3.0]);
    assert!(g.grad(unused).is_none());
}

#[test]
fn constant_graph_yields_zero_gradients() {
    let mut g = Graph::new();
    let c = g.input(&Tensor::scalar(5.0));
    let loss = g.scale(c, 1.0);
    assert!(g.backward(loss).is_ok());
    assert!(g.grad(c).is_none()); // constants carry no gradient at all
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::zeros(vec![2]).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(Error::Dimension { .. })));
}

#[test]
fn repeated_backward_accumulates_exactly_twice() {
    let mut g = Graph::new();
    let x = g.param(
        "x",
        &Tensor::new(vec![2], vec![0.3, -1.2])
            .unwrap()
            .with_requires_grad(true),
    );
    let y = g.gelu(x);
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(loss).unwrap();
    let twice = g.grad(x).unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * *a);
    }
}

#[test]
fn tied_leaf_registered_twice_is_one_node() {
    let mut g = Graph::new();
    let t = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_requires_grad(true);
    let a = g.param("emb", &t);
    let b = g.param("emb", &t);
    assert_eq!(a, b);
}

#[test]
fn finite_diff_exact_for_linear_function() {
    let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
    let coeffs = Tensor::new(vec![4, 1], vec![3.0, -2.0, 0.7, 1.1]).unwrap();
    let err = finite_diff_check(
        |g, xid| {
            let c = g.input(&coeffs);
            let prod = g.matmul(xid, c)?;
            Ok(g.sum_all(prod))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-9, "linear FD error {err}");
}

#[test]
fn finite_diff_two_layer_mlp_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w1 = Tensor::randn(vec![8, 6], 0.5, &mut rng);
    let b1 = Tensor::randn(vec![8], 0.5, &mut rng);
    let w2 = Tensor::randn(vec![5, 8], 0.5, &mut rng);
    let x = Tensor::randn(vec![1, 6], 1.0, &mut rng);
    // Differentiate w.r.t. w1 through the whole stack.
    let err = finite_diff_check(
        |g, wid| {
            let xin = g.input(&x);
            let w1t = g.transpose(wid);
            let h = g.matmul(xin, w1t)?;
            let b = g.input(&b1);
            let h = g.add_bias(h, b)?;
            let h = g.gelu(h);
            let w2in = g.input(&w2);
            let w2t = g.transpose(w2in);
            let logits = g.matmul(h, w2t)?;
            g.cross_entropy_masked(logits, &[3], &[true])
        },
        &w1,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "mlp FD error {err}");
}

#[test]
fn corrupted_gradient_is_detected() {
    // Doubling a single analytic entry must show up as ~0.5 relative error.
    let analytic = vec![1.0, -2.0, 0.5, 4.0];
    let mut corrupted = analytic.clone();
    corrupted[2] *= 2.0;
    let err = max_rel_err(&corrupted, &analytic);
    assert!((err - 0.5).abs() < 1e-12, "got {err}");
}

#[test]
fn finite_diff_covers_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let aux = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let table_ids = [2usize, 0, 1];

    // Each case ends in sum_all (or is already scalar) to form a loss.
    let cases: Vec<(&str, Box<dyn FnMut(&mut Graph, NodeId) -> crate::error::Result<NodeId>>)> = vec![
        (
            "add",
            Box::new(|g: &mut Graph, xid: NodeId| {
                let other = g.input(&Tensor::new(vec![3, 4], vec![0.25; 12]).unwrap());
                let s = g.add(xid, other)?;
                let s = g.gelu(s);
                Ok(g.sum_all(s))
            }),
        ),
        (
            "scale",
            Box::new(|g, xid| {
                let s = g.scale(xid, -1.7);
                let s = g.gelu(s);
                Ok(g.sum_all(s))
            }),
        ),
        (
            "transpose",
            Box::new(|g, xid| {
                let t = g.transpose(xid);
                let t = g.gelu(t);
                Ok(g.sum_all(t))
            }),
        ),
        (
            "add_bias",
            Box::new(|g, xid| {
                let b = g.input(&Tensor::new(vec![4], vec![0.3, -0.1, 0.9, 0.0]).unwrap());
                let s = g.add_bias(xid, b)?;
                let s = g.gelu(s);
                Ok(g.sum_all(s))
            }),
        ),
        (
            "layer_norm",
            Box::new(|g, xid| {
                let gain = g.input(&Tensor::new(vec![4], vec![1.3, 0.7, -0.2, 1.0]).unwrap());
                let bias = g.input(&Tensor::new(vec![4], vec![0.1, 0.0, -0.5, 0.2]).unwrap());
                let y = g.layer_norm(xid, gain, bias, 1e-5)?;
                let y = g.gelu(y);
                Ok(g.sum_all(y))
            }),
        ),
        (
            "masked_softmax",
            Box::new(|g, xid| {
                let m = Mask::new(
                    3,
                    4,
                    vec![
                        true, true, false, true, //
                        true, false, true, true, //
                        true, true, true, true,
                    ],
                )
                .unwrap();
                let y = g.masked_softmax(xid, &m)?;
                let y = g.gelu(y);
                Ok(g.sum_all(y))
            }),
        ),
        (
            "cross_entropy_masked",
            Box::new(|g, xid| g.cross_entropy_masked(xid, &[1, 3, 0], &[true, false, true])),
        ),
        (
            "embedding_lookup",
            Box::new(move |g, xid| {
                let e = g.embedding_lookup(xid, &table_ids)?;
                let e = g.gelu(e);
                Ok(g.sum_all(e))
            }),
        ),
        (
            "concat_rows",
            Box::new(|g, xid| {
                let other = g.input(&Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap());
                let c = g.concat_rows(&[xid, other])?;
                let c = g.gelu(c);
                Ok(g.sum_all(c))
            }),
        ),
        (
            "concat_cols",
            Box::new(|g, xid| {
                let other = g.input(&Tensor::new(vec![3, 2], vec![-0.25; 6]).unwrap());
                let c = g.concat_cols(&[xid, other])?;
                let c = g.gelu(c);
                Ok(g.sum_all(c))
            }),
        ),
        (
            "slice_rows",
            Box::new(|g, xid| {
                let s = g.slice_rows(xid, 1, 2)?;
                let s = g.gelu(s);
                Ok(g.sum_all(s))
            }),
        ),
        (
            "slice_cols",
            Box::new(|g, xid| {
                let s = g.slice_cols(xid, 1, 3)?;
                let s = g.gelu(s);
                Ok(g.sum_all(s))
            }),
        ),
        (
            "reshape",
            Box::new(|g, xid| {
                let r = g.reshape(xid, vec![4, 3])?;
                let r = g.gelu(r);
                Ok(g.sum_all(r))
            }),
        ),
        (
            "matmul",
            Box::new(move |g, xid| {
                let a = g.input(&aux);
                let at = g.transpose(a);
                let p = g.matmul(xid, at)?;
                let p = g.gelu(p);
                Ok(g.sum_all(p))
            }),
        ),
    ];

    for (name, mut f) in cases {
        let err = finite_diff_check(&mut f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: FD error {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_sum_to_one(
        seed in 0u64..1000,
        rows in 1usize..5,
        cols in 1usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![rows, cols], 2.0, &mut rng);
        let mut bits = vec![false; rows * cols];
        for r in 0..rows {
            // at least one survivor per row
            let forced = (rng.next_u64() as usize) % cols;
            for c in 0..cols {
                bits[r * cols + c] = c == forced || rng.next_u64() % 2 == 0;
            }
        }
        let mask = Mask::new(rows, cols, bits).unwrap();
        let mut g = Graph::new();
        let xin = g.input(&x);
        let y = g.masked_softmax(xin, &mask).unwrap();
        for r in 0..rows {
            let mut sum = 0.0;
            for c in 0..cols {
                let v = g.data(y)[r * cols + c];
                if mask.get(r, c) {
                    sum += v;
                    prop_assert!(v >= 0.0);
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative_on_random_chains(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(vec![8, 8], 1.0, &mut rng);
        let b = Tensor::randn(vec![8, 8], 1.0, &mut rng);
        let c = Tensor::randn(vec![8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (ai, bi, ci) = (g.input(&a), g.input(&b), g.input(&c));
        let ab = g.matmul(ai, bi).unwrap();
        let ab_c = g.matmul(ab, ci).unwrap();
        let bc = g.matmul(bi, ci).unwrap();
        let a_bc = g.matmul(ai, bc).unwrap();
        let left = g.data(ab_c);
        let right = g.data(a_bc);
        for (l, r) in left.iter().zip(right) {
            let rel = (l - r).abs() / l.abs().max(r.abs()).max(1.0);
            prop_assert!(rel < 1e-9);
        }
    }

    #[test]
    fn random_expression_gradients_match_finite_differences(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, xid| {
                let wi = g.input(&w);
                let h = g.matmul(xid, wi)?;
                let h = g.gelu(h);
                let gain = g.input(&Tensor::new(vec![3], vec![1.0; 3]).unwrap());
                let bias = g.input(&Tensor::zeros(vec![3]));
                let h = g.layer_norm(h, gain, bias, 1e-5)?;
                g.cross_entropy_masked(h, &[0, 2], &[true, true])
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "FD error {}", err);
    }
}
