//! Dense building blocks and their adjoints.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;
/// Slope of the sigmoid gate in `x · σ(1.702 x)`.
pub const GELU_SLOPE: f64 = 1.702;

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<f64>, w: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let y = &xhat * &w + &b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dw, db)`.
pub fn layer_norm_back(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    w: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dw = (&dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let c = dy.ncols() as f64;
    let mut dx = &dy * &w;
    for ((mut row, xh), is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let s1 = row.sum();
        let s2 = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>();
        for (g, x) in row.iter_mut().zip(xh.iter()) {
            *g = is / c * (c * *g - s1 - x * s2);
        }
    }
    (dx, dw, db)
}

/// `x · W + b` with `W` stored as `in × out`.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_back(
    dy: ArrayView2<f64>,
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&w.t()), x.t().dot(&dy), dy.sum_axis(Axis(0)))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(u: ArrayView2<f64>) -> Array2<f64> {
    u.mapv(|x| x * sigmoid(GELU_SLOPE * x))
}

pub fn gelu_back(dg: ArrayView2<f64>, u: ArrayView2<f64>) -> Array2<f64> {
    let mut out = dg.to_owned();
    out.zip_mut_with(&u, |g, &x| {
        let s = sigmoid(GELU_SLOPE * x);
        *g *= s + GELU_SLOPE * x * s * (1.0 - s);
    });
    out
}

pub fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(&[seed]);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f(x) · dy` against the analytic adjoint.
    fn check_input_grad(f: impl Fn(&Array2<f64>) -> Array2<f64>, x: &Array2<f64>, dy: &Array2<f64>, dx: &Array2<f64>) {
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = ((&f(&xp) * dy).sum() - (&f(&xm) * dy).sum()) / (2.0 * h);
                assert!((num - dx[[i, j]]).abs() < 1e-7, "({i},{j}) {num} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = rand_mat(5, 6, 1);
        let (y, _) = layer_norm(x.view(), Array1::ones(6).view(), Array1::zeros(6).view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_adjoint() {
        let x = rand_mat(4, 6, 2);
        let w = rand_mat(1, 6, 3).row(0).to_owned();
        let b = rand_mat(1, 6, 4).row(0).to_owned();
        let dy = rand_mat(4, 6, 5);
        let (_, cache) = layer_norm(x.view(), w.view(), b.view());
        let (dx, _, _) = layer_norm_back(dy.view(), &cache, w.view());
        check_input_grad(|x| layer_norm(x.view(), w.view(), b.view()).0, &x, &dy, &dx);
    }

    #[test]
    fn gelu_adjoint() {
        let u = rand_mat(3, 5, 6) * 3.0;
        let dy = rand_mat(3, 5, 7);
        let du = gelu_back(dy.view(), u.view());
        check_input_grad(|u| gelu(u.view()), &u, &dy, &du);
    }

    #[test]
    fn linear_adjoint() {
        let x = rand_mat(4, 3, 8);
        let w = rand_mat(3, 5, 9);
        let b = rand_mat(1, 5, 10).row(0).to_owned();
        let dy = rand_mat(4, 5, 11);
        let (dx, dw, db) = linear_back(dy.view(), x.view(), w.view());
        check_input_grad(|x| linear(x.view(), w.view(), b.view()), &x, &dy, &dx);
        check_input_grad(|w| linear(x.view(), w.view(), b.view()), &w, &dy, &dw);
        assert!((db.sum() - dy.sum()).abs() < 1e-12);
    }
}
