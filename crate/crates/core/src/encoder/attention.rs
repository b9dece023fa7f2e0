use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sphere::softmax_rows;

/// `W + scale * A B`.
pub fn lora_effective_weight<T: Real>(
    w: ArrayView2<'_, T>,
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    scale: T,
) -> Result<Array2<T>> {
    let (rows, cols) = w.dim();
    if a.nrows() != rows || b.ncols() != cols || a.ncols() != b.nrows() {
        return Err(Error::shape(format!(
            "W {:?}, A {:?}, B {:?}",
            w.dim(),
            a.dim(),
            b.dim()
        )));
    }
    let mut out = w.to_owned();
    out.scaled_add(scale, &a.dot(&b));
    Ok(out)
}

/// Scaled dot-product self-attention over the rows of `h` (`n x d`).
///
/// Projections act on row vectors (`Q = h W_Q`). With `heads > 1` the feature
/// dimension is split evenly, each head attends with scale `1/sqrt(d/heads)`, and
/// head outputs are concatenated.
pub fn attention_forward<T: Real>(
    h: ArrayView2<'_, T>,
    wq: ArrayView2<'_, T>,
    wk: ArrayView2<'_, T>,
    wv: ArrayView2<'_, T>,
    heads: usize,
) -> Result<Array2<T>> {
    let d = h.ncols();
    for (name, w) in [("W_Q", &wq), ("W_K", &wk), ("W_V", &wv)] {
        if w.dim() != (d, d) {
            return Err(Error::shape(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{d} features do not split into {heads} heads")));
    }
    let dh = d / heads;
    let q = h.dot(&wq);
    let k = h.dot(&wk);
    let v = h.dot(&wv);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Array2::zeros((h.nrows(), d));
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(scores.view());
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
    }
    Ok(out)
}
