//! Row-wise building blocks with explicit backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;

use super::params::Scalar;
use crate::seed::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-12;

pub struct NormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub fn layer_norm<F: Scalar>(x: &Array2<F>, gamma: ArrayView1<F>, beta: ArrayView1<F>) -> (Array2<F>, NormCache<F>) {
    let h = F::of(x.ncols() as f64);
    let eps = F::of(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / h;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *s = inv;
    }
    let mut y = xhat.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(&gamma).and(&beta).for_each(|v, &g, &b| *v = *v * g + b);
    });
    (y, NormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates into `dgamma`/`dbeta`.
pub fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    gamma: ArrayView1<F>,
    mut dgamma: ndarray::ArrayViewMut1<F>,
    mut dbeta: ndarray::ArrayViewMut1<F>,
) -> Array2<F> {
    let h = F::of(dy.ncols() as f64);
    dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dyr), xr), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dy.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let dxhat: Array1<F> = &dyr * &gamma;
        let mean_d = dxhat.sum() / h;
        let mean_dx = dxhat.iter().zip(xr.iter()).fold(F::zero(), |a, (&d, &x)| a + d * x) / h;
        Zip::from(&mut out)
            .and(&dxhat)
            .and(&xr)
            .for_each(|o, &d, &x| *o = (d - mean_d - x * mean_dx) * inv);
    }
    dx
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(SQRT_2_OVER_PI);
    let k = F::of(GELU_C);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(SQRT_2_OVER_PI);
    let k = F::of(GELU_C);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

/// In-place row softmax with max subtraction. Entries where `valid` is
/// false get probability zero.
pub fn softmax_rows<F: Scalar>(s: &mut Array2<F>, valid: Option<&[bool]>) {
    for mut row in s.rows_mut() {
        if let Some(valid) = valid {
            for (v, &ok) in row.iter_mut().zip(valid) {
                if !ok {
                    *v = F::neg_infinity();
                }
            }
        }
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = F::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Backward of row softmax given probabilities `p` and upstream `dp`.
pub fn softmax_rows_backward<F: Scalar>(p: ArrayView2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut ds = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = pr.iter().zip(dr.iter()).fold(F::zero(), |a, (&x, &y)| a + x * y);
        Zip::from(&mut out).and(&pr).and(&dr).for_each(|o, &x, &y| *o = x * (y - dot));
    }
    ds
}

/// Replaces each row of `logits` by `scale * softmax(row)` and returns the
/// summed negative log-likelihood of `targets`, with one exponential per entry.
pub fn softmax_nll_rows<F: Scalar>(logits: &mut Array2<F>, targets: &[usize], scale: F) -> f64 {
    let mut nll = 0.0;
    for (mut row, &t) in logits.rows_mut().into_iter().zip(targets) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let shifted = row[t] - max;
        let sum = match row.as_slice_mut() {
            Some(xs) => F::exp_shifted(xs, max),
            None => {
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                sum
            }
        };
        nll -= (shifted - sum.ln()).to_f64().unwrap();
        let inv = scale / sum;
        row.mapv_inplace(|v| v * inv);
    }
    nll
}

/// `log softmax(logits)[target]` computed stably in log space.
pub fn log_softmax_at<F: Scalar>(logits: ArrayView1<F>, target: usize) -> F {
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = logits.iter().fold(F::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    logits[target] - lse
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask<F: Scalar>(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - p));
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { F::zero() } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut s = array![[1.0f64, 2.0, 3.0], [1000.0, -1000.0, 0.0]];
        softmax_rows(&mut s, Some(&[true, true, false]));
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s[[0, 2]], 0.0);
        assert_eq!(s[[1, 0]], 1.0);

        let logits = array![[0.5f64, -1.0, 2.0], [3.0, 3.0, -2.0]];
        let mut p = logits.clone();
        let nll = softmax_nll_rows(&mut p, &[1, 0], 1.0);
        let want = -(log_softmax_at(logits.row(0), 1) + log_softmax_at(logits.row(1), 0));
        assert!((nll - want).abs() < 1e-12);
        let mut q = logits.clone();
        softmax_rows(&mut q, None);
        assert!(p.iter().zip(q.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference_quotient() {
        let x = array![[0.3f64, -1.2, 2.0, 0.1], [1.0, 1.5, -0.5, 0.0]];
        let g = array![1.1f64, 0.9, 1.3, 0.7];
        let b = array![0.1f64, -0.2, 0.0, 0.3];
        let w = array![[0.5f64, -1.0, 2.0, 0.3], [1.0, 0.2, -0.7, 0.4]];
        let loss = |x: &Array2<f64>| (&layer_norm(x, g.view(), b.view()).0 * &w).sum();
        let (_, cache) = layer_norm(&x, g.view(), b.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(&w, &cache, g.view(), dg.view_mut(), db.view_mut());
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let fd = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn log_softmax_of_uniform_logits() {
        let z = Array1::<f64>::zeros(65540);
        assert!((log_softmax_at(z.view(), 7) + (65540f64).ln()).abs() < 1e-12);
    }
}
