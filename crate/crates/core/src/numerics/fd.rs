//! Central finite differences, used as the independent gradient oracle.

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every listed param.
///
/// The store is restored bit-exactly before returning.
pub fn finite_diff_grad<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut f: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).len();
        let mut grad = Tensor::zeros(store.value(id).shape());
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = f(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = f(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let id = s.add("t", Tensor::scalar(3.0), true);
        let g =
            finite_diff_grad(&mut s, &[id], 1e-6, |s| Ok(s.value(id).data()[0].powi(2))).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
        assert_eq!(s.value(id).data()[0], 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("t", Tensor::from_vec(vec![1.0, -2.0, 0.5]), true);
        let g = finite_diff_grad(&mut s, &[id], 1e-6, |_| Ok(4.2)).unwrap();
        assert!(g[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut s = ParamStore::new();
        let id = s.add("t", Tensor::scalar(1.0), true);
        assert!(finite_diff_grad(&mut s, &[id], 0.0, |_| Ok(0.0)).is_err());
    }
}
