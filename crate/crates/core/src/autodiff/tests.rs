use alloc::vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum against a fixed random tensor, so every output entry matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let w = random(tape.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let p = tape.mul_const(y, &w)?;
    Ok(tape.sum(p))
}

#[test]
fn primitive_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data, vec![0.0, 2.0]);
    let z = tape.constant(Tensor::zeros(&[1, 3]));
    let s = tape.softmax_last(z).unwrap();
    for v in &tape.value(s).data {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = random(&[1, 1, 4, 4], &mut rng);
    let x = tape.constant(img.clone());
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data[4] = 1.0;
    let k = tape.constant(k);
    let y = tape.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &img);
}

#[test]
fn simple_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone(), 0);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(0).unwrap().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone(), 0);
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (a, b) in g.get(0).unwrap().iter().zip(&x0.data) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let s = tape.scale(c, 3.0);
    assert_eq!(tape.backward(s), Err(AutodiffError::DisconnectedLoss));
    let p = tape.param(Tensor::zeros(&[2]), 0);
    assert!(matches!(tape.backward(p), Err(AutodiffError::NotScalar(_))));
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn linear_map_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![random(&[5, 3], &mut rng), random(&[3], &mut rng)];
    let x = random(&[4, 5], &mut rng);
    let rep = gradcheck(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.linear(xv, v[0], Some(v[1]))?;
            probe(t, y, 9)
        },
        &params,
        // central differences are exact for a linear map, so a wide step avoids round-off
        1e-2,
        1e-10,
        None,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn two_layer_conv_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        random(&[2, 1, 3, 3], &mut rng),
        random(&[2], &mut rng),
        random(&[2, 2, 3, 3], &mut rng),
        random(&[2], &mut rng),
        random(&[2, 2, 1, 1], &mut rng),
        random(&[2], &mut rng),
    ];
    assert_eq!(params.iter().map(|t| t.len()).sum::<usize>(), 64);
    let x = random(&[2, 1, 6, 5], &mut rng);
    let rep = gradcheck(
        |t, v| {
            let xv = t.constant(x.clone());
            let h = t.conv2d(xv, v[0], Some(v[1]), 1, 1)?;
            let h = t.leaky_relu(h, 0.2);
            let h = t.conv2d(h, v[2], Some(v[3]), 2, 1)?;
            let h = t.relu(h);
            let h = t.conv2d(h, v[4], Some(v[5]), 1, 0)?;
            probe(t, h, 4)
        },
        &params,
        1e-5,
        1e-4,
        None,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn group_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![
        random(&[2, 8, 4, 4], &mut rng),
        random(&[8], &mut rng),
        random(&[8], &mut rng),
    ];
    let rep = gradcheck(
        |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 4)?;
            probe(t, y, 5)
        },
        &params,
        1e-5,
        1e-4,
        None,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn group_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Inputs with variance ~1e4 so that eps/var stays below 1e-8.
    let mut x = random(&[2, 16, 3, 3], &mut rng);
    x.data.iter_mut().for_each(|v| *v = 300.0 * *v + 7.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[16], 1.0));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = tape.group_norm(xv, g, b, 8).unwrap();
    for chunk in tape.value(y).data.chunks(18) {
        let mean = chunk.iter().sum::<f64>() / 18.0;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-8 && (var - 1.0).abs() < 1e-8, "{mean} {var}");
    }
}

#[test]
fn remaining_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = vec![
        random(&[2, 3, 5, 4], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[2], &mut rng),
        random(&[6], &mut rng),
        random(&[6], &mut rng),
        random(&[2, 4, 3], &mut rng),
    ];
    let rep = gradcheck(
        |t, v| {
            // transposed conv with output padding, max pool, avg pool
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, [1, 0])?;
            let m = t.max_pool2(y)?;
            let a = t.adaptive_avg_pool(m)?;
            // layer norm over a permuted, concatenated view
            let c = t.concat(&[a, a, a], 1)?;
            let ln = t.layer_norm(c, v[3], v[4])?;
            let r = t.reshape(ln, &[2, 2, 3])?;
            let p = t.permute(r, &[0, 2, 1])?;
            // attention-style products with every transpose combination
            let q = t.bmm(p, r, false, false)?;
            let k = t.bmm(v[5], r, false, true)?;
            let s = t.softmax_last(k)?;
            let u = t.bmm(s, v[5], true, false)?;
            let w = t.bmm(q, u, true, true)?;
            let sq = t.square(w);
            let d = t.sub(sq, w)?;
            let e = t.mul(d, w)?;
            let f = t.sum_rows(e)?;
            probe(t, f, 7)
        },
        &params,
        1e-5,
        1e-4,
        None,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let mut x = random(&[5, 7], &mut rng);
    x.data.iter_mut().for_each(|v| *v *= 30.0);
    let xv = tape.constant(x);
    let s = tape.softmax_last(xv).unwrap();
    for row in tape.value(s).data.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn nondeterminism_is_detected() {
    use core::cell::Cell;
    let counter = Cell::new(0.0);
    let res = gradcheck(
        |t, v| {
            counter.set(counter.get() + 1.0);
            let s = t.sum(v[0]);
            let c = t.constant(Tensor::scalar(counter.get()));
            t.add(s, c)
        },
        &[Tensor::zeros(&[2])],
        1e-5,
        1e-4,
        None,
    );
    assert!(matches!(res, Err(AutodiffError::NonDeterministicFunction(..))));
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 4, 6, 6], &mut rng);
        let w = random(&[8, 4, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.param(w, 0);
        let y = tape.conv2d(xv, wv, None, 2, 1).unwrap();
        let s = tape.square(y);
        let l = tape.sum(s);
        (tape.value(l).data[0].to_bits(), tape.backward(l).unwrap())
    };
    assert_eq!(run(), run());
}

fn adjoint_gap(x: &Tensor, y: &Tensor, w: &Tensor, stride: usize, pad: usize, op: [usize; 2]) -> (f64, f64) {
    let mut tape = Tape::new();
    let (xv, yv, wv) = (
        tape.constant(x.clone()),
        tape.constant(y.clone()),
        tape.constant(w.clone()),
    );
    let cx = tape.conv2d(xv, wv, None, stride, pad).unwrap();
    let ty = tape.conv_transpose2d(yv, wv, None, stride, pad, op).unwrap();
    assert_eq!(tape.shape(ty), x.shape.as_slice());
    let lhs = tape.value(cx).dot(y);
    let rhs = x.dot(tape.value(ty));
    (lhs, rhs)
}

#[test]
fn conv_transpose_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, h, w, stride, pad) in [(3, 4, 576 / 8, 2, 1), (3, 5, 7, 2, 1), (1, 6, 5, 2, 0), (3, 6, 6, 1, 1)] {
        let x = random(&[2, 3, h, w], &mut rng);
        let kern = random(&[4, 3, k, k], &mut rng);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let y = random(&[2, 4, oh, ow], &mut rng);
        let op = [(h + 2 * pad - k) % stride, (w + 2 * pad - k) % stride];
        let (a, b) = adjoint_gap(&x, &y, &kern, stride, pad, op);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn adjoint_identity_holds(seed in 0u64..1000, h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let pad = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, h, w], &mut rng);
        let kern = random(&[3, 2, k, k], &mut rng);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let y = random(&[1, 3, oh, ow], &mut rng);
        let op = [(h + 2 * pad - k) % stride, (w + 2 * pad - k) % stride];
        let (a, b) = adjoint_gap(&x, &y, &kern, stride, pad, op);
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn permute_round_trips(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.permute(xv, &[2, 0, 1]).unwrap();
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.value(q), &x);
    }
}

#[test]
fn param_store_rejects_duplicates() {
    let mut ps = ParamStore::new();
    ps.add("a", Tensor::zeros(&[2])).unwrap();
    assert!(matches!(
        ps.add("a", Tensor::zeros(&[1])),
        Err(AutodiffError::DuplicateName(_))
    ));
    let t = uniform_fan_in(&[3, 4], 4, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(t.data.iter().all(|v| v.abs() <= 0.5));
}
