use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Analytic grads for `ids` after one backward of `build`.
fn analytic<F>(store: &mut ParamStore, ids: &[ParamId], build: &F) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store).unwrap();
    ids.iter().map(|&id| store.grad(id).clone()).collect()
}

fn numeric<F>(store: &mut ParamStore, ids: &[ParamId], build: &F) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    finite_diff_grad(store, ids, 1e-6, |s| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s);
        Ok(tape.value(loss).data()[0])
    })
    .unwrap()
}

fn max_rel<F>(store: &mut ParamStore, ids: &[ParamId], build: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let a = analytic(store, ids, &build);
    let n = numeric(store, ids, &build);
    a.iter()
        .zip(&n)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[test]
fn linear_identity_map() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let w = t.constant(Tensor::identity(2));
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn linear_scalar_affine() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[&[2.0]]));
    let w = t.constant(Tensor::from_rows(&[&[3.0]]));
    let b = t.constant(Tensor::from_vec(vec![1.0]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[7.0]);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 4]));
    let w = t.constant(Tensor::zeros(&[2, 5]));
    let err = t.linear(x, w, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[2, 5]"), "{msg}");
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[3, 4]), true);
    let w = store.add("w", random(&mut rng, &[2, 4]), true);
    let b = store.add("b", random(&mut rng, &[2]), true);
    let weights = random(&mut rng, &[3, 2]);
    let err = max_rel(&mut store, &[x, w, b], |t, s| {
        let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.linear(xv, wv, Some(bv)).unwrap();
        let k = t.constant(weights.clone());
        let p = t.mul(y, k).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn sigmoid_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![0.0, 1e3]));
    let y = t.sigmoid(x);
    assert_eq!(t.value(y).data()[0], 0.5);
    assert!((t.value(y).data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn sigmoid_reflection_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-40.0..40.0);
        assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_examples() {
    let u = softmax(&Tensor::from_vec(vec![0.0, 0.0, 0.0]), 0).unwrap();
    for &p in u.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax(&Tensor::from_vec(vec![1000.0, 0.0]), 0).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);
    assert!(softmax(&u, 1).is_err());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[3, 5]), true);
    let target = random(&mut rng, &[3, 5]);
    for axis in 0..2 {
        let err = max_rel(&mut store, &[x], |t, s| {
            let xv = t.param(s, x);
            let y = t.softmax(xv, axis).unwrap();
            let k = t.constant(target.clone());
            let p = t.mul(y, k).unwrap();
            t.sum(p)
        });
        assert!(err < 1e-6, "axis {axis}: rel err {err}");
    }
}

#[test]
fn quadratic_loss_gradient_is_twice_value() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(vec![1.5, -2.0, 0.25]), true);
    let mut t = Tape::new();
    let v = t.param(&store, p);
    let sq = t.mul(v, v).unwrap();
    let loss = t.sum(sq);
    t.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[3.0, -4.0, 0.5]);
}

#[test]
fn sigmoid_linear_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(&mut rng, &[5, 4]), true);
    let b1 = store.add("b1", random(&mut rng, &[5]), true);
    let w2 = store.add("w2", random(&mut rng, &[1, 5]), true);
    let input = random(&mut rng, &[6, 4]);
    let err = max_rel(&mut store, &[w1, b1, w2], |t, s| {
        let x = t.constant(input.clone());
        let (w1v, b1v, w2v) = (t.param(s, w1), t.param(s, b1), t.param(s, w2));
        let h = t.linear(x, w1v, Some(b1v)).unwrap();
        let h = t.sigmoid(h);
        let y = t.linear(h, w2v, None).unwrap();
        t.mean(y)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn frozen_param_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let frozen = store.add("frozen", Tensor::from_rows(&[&[1.0, 2.0]]), false);
    let lora = store.add("lora", Tensor::from_rows(&[&[0.5, 0.5]]), true);
    let e = Tensor::from_rows(&[&[0.3, -0.7]]);
    let mut t = Tape::new();
    let x = t.constant(e);
    let (fv, lv) = (t.param(&store, frozen), t.param(&store, lora));
    let a = t.linear(x, fv, None).unwrap();
    let b = t.linear(x, lv, None).unwrap();
    let s = t.add(a, b).unwrap();
    let loss = t.sum(s);
    t.backward(loss, &mut store).unwrap();
    assert!(store.grad(frozen).data().iter().all(|&g| g == 0.0));
    assert_eq!(store.grad(lora).data(), &[0.3, -0.7]);
}

#[test]
fn backward_on_non_scalar_is_a_contract_error() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(vec![1.0, 2.0]), true);
    let mut t = Tape::new();
    let v = t.param(&store, p);
    let y = t.sigmoid(v);
    assert!(matches!(t.backward(y, &mut store), Err(Error::Contract(_))));
}

#[test]
fn channel_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[3, 7]), true);
    let w = store.add("w", random(&mut rng, &[4, 3]), true);
    let b = store.add("b", random(&mut rng, &[4]), true);
    let g = store.add("g", random(&mut rng, &[4]), true);
    let s = store.add("s", Tensor::scalar(0.3), true);
    let other = store.add("o", random(&mut rng, &[4, 7]), true);
    let readout = random(&mut rng, &[8, 7]);
    let err = max_rel(&mut store, &[x, w, b, g, s, other], |t, st| {
        let xv = t.param(st, x);
        let (wv, bv, gv, sv, ov) = (
            t.param(st, w),
            t.param(st, b),
            t.param(st, g),
            t.param(st, s),
            t.param(st, other),
        );
        let y = t.channel_mix(xv, wv, Some(bv)).unwrap();
        let y = t.channel_scale(y, gv).unwrap();
        let y = t.scalar_mul(y, sv).unwrap();
        let one_minus = t.scale_shift(sv, -1.0, 1.0);
        let o = t.scalar_mul(ov, one_minus).unwrap();
        let cat = t.concat0(y, o).unwrap();
        let k = t.constant(readout.clone());
        let p = t.mul(cat, k).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn channel_mix_blocks_agree_with_naive_product() {
    // Position count above the cache block size.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c_in, c_out, n) = (3, 2, 2500);
    let x = random(&mut rng, &[c_in, n]);
    let w = random(&mut rng, &[c_out, c_in]);
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.channel_mix(xv, wv, None).unwrap();
    for o in 0..c_out {
        for p in (0..n).step_by(97) {
            let naive: f64 = (0..c_in)
                .map(|i| w.data()[o * c_in + i] * x.data()[i * n + p])
                .sum();
            assert!((t.value(y).data()[o * n + p] - naive).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(values in proptest::collection::vec(-500.0f64..500.0, 1..24)) {
        let n = values.len();
        let t = Tensor::from_vec(values);
        let s = softmax(&t, 0).unwrap();
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        prop_assert!((s.sum() - 1.0).abs() < 1e-12, "n={}", n);
    }
}
