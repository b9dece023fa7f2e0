//! Small dense-layer building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Real;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: ArrayView2<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> (Array2<T>, LnCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &gamma + &beta;
    (y, LnCache { xhat, rstd })
}

/// Returns `dx` and accumulates `dgamma`, `dbeta` when given.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: ArrayView2<'_, T>,
    cache: &LnCache<T>,
    gamma: ArrayView1<'_, T>,
    param_grads: Option<(&mut Array1<T>, &mut Array1<T>)>,
) -> Array2<T> {
    if let Some((dg, db)) = param_grads {
        *dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = T::lit(dy.ncols() as f64);
    let mut dx = &dy * &gamma;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let m1 = row.sum() / d;
        let m2 = row.dot(&xh) / d;
        for (v, &h) in row.iter_mut().zip(xh.iter()) {
            *v = r * (*v - m1 - h * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Softmax backward for row-stochastic `p`: `ds = p * (dp - rowsum(dp * p))`.
pub(crate) fn softmax_backward_rows<T: Real>(p: ArrayView2<'_, T>, dp: ArrayView2<'_, T>) -> Array2<T> {
    let mut ds = dp.to_owned();
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let s = row.dot(&prow);
        for (v, &pv) in row.iter_mut().zip(prow.iter()) {
            *v = pv * (*v - s);
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.4, 1.3, 2.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let x = array![[0.3f64, -1.0, 2.0, 0.5], [1.0, 1.5, -0.5, 0.0]];
        let g = array![1.2f64, 0.7, -0.3, 1.0];
        let b = array![0.1f64, 0.0, 0.2, -0.1];
        let w = array![[0.4f64, -0.2, 0.9, 0.1], [0.3, 0.8, -0.6, 0.5]];
        let (_, cache) = layer_norm(x.view(), g.view(), b.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(w.view(), &cache, g.view(), Some((&mut dg, &mut db)));
        let f = |x: &Array2<f64>, g: &Array1<f64>| (layer_norm(x.view(), g.view(), b.view()).0 * &w).sum();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut p = x.clone();
                p[[i, j]] += h;
                let mut m = x.clone();
                m[[i, j]] -= h;
                let fd = (f(&p, &g) - f(&m, &g)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
        for j in 0..4 {
            let mut p = g.clone();
            p[j] += h;
            let mut m = g.clone();
            m[j] -= h;
            let fd = (f(&x, &p) - f(&x, &m)) / (2.0 * h);
            assert!((fd - dg[j]).abs() < 1e-7);
        }
        assert!((db - w.sum_axis(Axis(0))).iter().all(|v| v.abs() < 1e-12));
    }
}
