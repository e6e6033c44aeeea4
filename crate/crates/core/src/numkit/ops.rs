//! Forward and backward transforms of the elementary operators.
//!
//! Reductions accumulate strictly left to right so results are bitwise
//! reproducible and comparable to naive loop oracles.

use crate::error::{DyrexError, Result};
use crate::numkit::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive constant applied to masked logits before normalization.
pub const MASK_NEG: f64 = -1e30;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(DyrexError::dim("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let bs = b.as_slice();
    // i-k-j order: each out[i][j] still receives its terms in ascending k.
    for i in 0..n {
        let arow = a.row(i);
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            let brow = &bs[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Matrix::from_parts(n, m, out))
}

/// Gradients of `a * b` given the upstream gradient of the product.
pub fn matmul_backward(a: &Matrix, b: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    if upstream.shape() != (a.rows(), b.cols()) {
        return Err(DyrexError::dim(
            "matmul_backward",
            (a.rows(), b.cols()),
            upstream.shape(),
        ));
    }
    let da = matmul(upstream, &b.transpose())?;
    let db = matmul(&a.transpose(), upstream)?;
    Ok((da, db))
}

/// Row-wise softmax. Where `mask` is 0 the output is exactly 0.
pub fn softmax_rows(x: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(DyrexError::dim("softmax_rows mask", x.shape(), m.shape()));
        }
    }
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    let mut shifted = vec![0.0; cols];
    for r in 0..x.rows() {
        let row = x.row(r);
        let allow = mask.map(|m| m.row(r));
        let allowed = |c: usize| allow.is_none_or(|a| a[c] != 0.0);
        if !(0..cols).any(allowed) {
            return Err(DyrexError::InvalidMask(format!("row {r} has no allowed entry")));
        }
        for c in 0..cols {
            shifted[c] = if allowed(c) { row[c] } else { row[c] + MASK_NEG };
        }
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in shifted.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for c in 0..cols {
            out.push(if allowed(c) { shifted[c] / sum } else { 0.0 });
        }
    }
    Ok(Matrix::from_parts(x.rows(), cols, out))
}

/// Gradient of `softmax_rows` given its output `y` and upstream `dy`.
pub fn softmax_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(DyrexError::dim("softmax_backward", y.shape(), dy.shape()));
    }
    let mut out = Vec::with_capacity(y.len());
    for r in 0..y.rows() {
        let (yr, dr) = (y.row(r), dy.row(r));
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(dr).map(|(&yv, &dv)| yv * (dv - dot)));
    }
    Ok(Matrix::from_parts(y.rows(), y.cols(), out))
}

/// Intermediates kept by [`layer_norm`] for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization with biased variance followed by `gamma`, `beta`.
pub fn layer_norm(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(DyrexError::dim("layer_norm affine", (1, d), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(DyrexError::Config("layer_norm eps must be positive".into()));
    }
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    let (g, b) = (gamma.as_slice(), beta.as_slice());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..d {
            let n = (row[c] - mean) * istd;
            normalized.push(n);
            out.push(n * g[c] + b[c]);
        }
    }
    Ok((
        Matrix::from_parts(x.rows(), d, out),
        LayerNormCache {
            normalized: Matrix::from_parts(x.rows(), d, normalized),
            inv_std,
        },
    ))
}

/// Gradients of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Matrix,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let xhat = &cache.normalized;
    if dy.shape() != xhat.shape() {
        return Err(DyrexError::dim("layer_norm_backward", xhat.shape(), dy.shape()));
    }
    let d = xhat.cols();
    let g = gamma.as_slice();
    let mut dx = Vec::with_capacity(dy.len());
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let (dr, xr) = (dy.row(r), xhat.row(r));
        for c in 0..d {
            dgamma[c] += dr[c] * xr[c];
            dbeta[c] += dr[c];
            dxhat[c] = dr[c] * g[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let istd = cache.inv_std[r];
        for c in 0..d {
            dx.push(istd * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_xhat));
        }
    }
    Ok((
        Matrix::from_parts(dy.rows(), d, dx),
        Matrix::from_parts(1, d, dgamma),
        Matrix::from_parts(1, d, dbeta),
    ))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(|v| v * std_normal_cdf(v))
}

pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if x.shape() != dy.shape() {
        return Err(DyrexError::dim("gelu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&v, &g)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
        .collect();
    Ok(Matrix::from_parts(x.rows(), x.cols(), data))
}

/// `x W + b`, with `b` a `1 x d_out` row broadcast over the rows of `x`.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.shape() != (1, w.cols()) {
        return Err(DyrexError::dim("linear bias", (1, w.cols()), b.shape()));
    }
    let mut y = matmul(x, w)?;
    let bias = b.as_slice();
    for r in 0..y.rows() {
        for (v, bv) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bv;
        }
    }
    Ok(y)
}

/// Gradients of [`linear_forward`]: returns `(dx, dw, db)`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if dy.shape() != (x.rows(), w.cols()) {
        return Err(DyrexError::dim("linear_backward", (x.rows(), w.cols()), dy.shape()));
    }
    let (dx, dw) = matmul_backward(x, w, dy)?;
    Ok((dx, dw, dy.sum_rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Central differences of a scalar function over every entry of `x`.
    fn fd_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut q = x.clone();
            q.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&p) - f(&q)) / (2.0 * h);
        }
        g
    }

    fn weighted_sum(y: &Matrix, w: &Matrix) -> f64 {
        y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn assert_rel_close(analytic: &Matrix, numeric: &Matrix, tol: f64) {
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < tol, "analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        assert_eq!(matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap().as_slice(), &[11.0]);
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(7);
        let a = rng.normal_matrix(4, 5, 1.0);
        let b = rng.normal_matrix(5, 3, 1.0);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]), None).unwrap();
        for v in y.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&m(&[&[1001.0, 1001.0]]), None).unwrap();
        assert_eq!(y.as_slice(), &[0.5, 0.5]);
        // Oracle: direct exponentiation without max shift.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let y = softmax_rows(&m(&[&[1.0, 2.0, 3.0]]), None).unwrap();
        for (v, ev) in y.as_slice().iter().zip(&e) {
            assert!((v - ev / z).abs() < 1e-15);
        }
        for (v, want) in y.as_slice().iter().zip([0.090031, 0.244728, 0.665241]) {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_mask_zeroes_and_rejects_full_mask() {
        let x = m(&[&[5.0, 1.0, 2.0], &[0.0, 0.0, 0.0]]);
        let mask = m(&[&[0.0, 1.0, 1.0], &[0.0, 0.0, 0.0]]);
        assert!(matches!(softmax_rows(&x, Some(&mask)), Err(DyrexError::InvalidMask(_))));
        let mask = m(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0]]);
        let y = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(y.get(0, 0), 0.0);
        assert_eq!(y.get(1, 1), 0.0);
        assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Matrix::filled(1, 2, 1.0);
        let zeros = Matrix::zeros(1, 2);
        let (y, _) = layer_norm(&m(&[&[1.0, 3.0]]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!((y.get(0, 0) + 1.0).abs() < 1e-5 && (y.get(0, 1) - 1.0).abs() < 1e-5);
        let (y, _) = layer_norm(&m(&[&[4.0, 4.0]]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(y.as_slice().iter().all(|v| v.abs() < 1e-12));
        let (y, _) = layer_norm(
            &m(&[&[1.0, 3.0]]),
            &Matrix::filled(1, 2, 2.0),
            &ones,
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert!((y.get(0, 0) + 1.0).abs() < 1e-4 && (y.get(0, 1) - 3.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&m(&[&[0.0, 10.0, 1.0]]));
        assert_eq!(y.get(0, 0), 0.0);
        assert!((y.get(0, 1) - 10.0).abs() < 1e-12);
        assert!((y.get(0, 2) - 0.841345).abs() < 1e-6);
        let g = gelu_backward(&m(&[&[0.0]]), &m(&[&[1.0]])).unwrap();
        assert_eq!(g.get(0, 0), 0.5);
    }

    #[test]
    fn linear_examples() {
        let x = m(&[&[1.0, 1.0]]);
        let y = linear_forward(&x, &Matrix::identity(2), &m(&[&[1.0, 2.0]])).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 3.0]);
        let y = linear_forward(&x, &Matrix::identity(2), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(y, x);

        let mut rng = Rng::new(3);
        let x = rng.normal_matrix(3, 4, 1.0);
        let w = rng.normal_matrix(4, 2, 1.0);
        let b = rng.normal_matrix(1, 2, 1.0);
        let y = linear_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert!((y.get(i, j) - (acc + b.get(0, j))).abs() < 1e-12);
            }
        }

        let up = rng.normal_matrix(3, 4, 1.0);
        let (dx, _, _) = linear_backward(&x, &Matrix::identity(4), &up).unwrap();
        assert_eq!(dx, up);
        assert!(linear_backward(&x, &w, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn backward_transforms_match_finite_differences() {
        let mut rng = Rng::new(11);
        let x = rng.normal_matrix(3, 4, 1.0);
        let w_out = rng.normal_matrix(3, 4, 1.0);

        // matmul
        let b = rng.normal_matrix(4, 4, 1.0);
        let (da, db) = matmul_backward(&x, &b, &w_out).unwrap();
        assert_rel_close(&da, &fd_grad(&x, |p| weighted_sum(&matmul(p, &b).unwrap(), &w_out)), 1e-6);
        assert_rel_close(&db, &fd_grad(&b, |p| weighted_sum(&matmul(&x, p).unwrap(), &w_out)), 1e-6);

        // softmax
        let y = softmax_rows(&x, None).unwrap();
        let dx = softmax_backward(&y, &w_out).unwrap();
        let fd = fd_grad(&x, |p| weighted_sum(&softmax_rows(p, None).unwrap(), &w_out));
        assert_rel_close(&dx, &fd, 1e-6);

        // layer norm
        let gamma = rng.normal_matrix(1, 4, 1.0);
        let beta = rng.normal_matrix(1, 4, 1.0);
        let (_, cache) = layer_norm(&x, &gamma, &beta, LAYER_NORM_EPS).unwrap();
        let (dx, dg, dbeta) = layer_norm_backward(&cache, &gamma, &w_out).unwrap();
        let ln = |xx: &Matrix, g: &Matrix, bb: &Matrix| {
            weighted_sum(&layer_norm(xx, g, bb, LAYER_NORM_EPS).unwrap().0, &w_out)
        };
        assert_rel_close(&dx, &fd_grad(&x, |p| ln(p, &gamma, &beta)), 1e-6);
        assert_rel_close(&dg, &fd_grad(&gamma, |p| ln(&x, p, &beta)), 1e-6);
        assert_rel_close(&dbeta, &fd_grad(&beta, |p| ln(&x, &gamma, p)), 1e-6);

        // gelu
        let dx = gelu_backward(&x, &w_out).unwrap();
        assert_rel_close(&dx, &fd_grad(&x, |p| weighted_sum(&gelu(p), &w_out)), 1e-6);

        // linear
        let w = rng.normal_matrix(4, 4, 1.0);
        let bias = rng.normal_matrix(1, 4, 1.0);
        let (dx, dw, db) = linear_backward(&x, &w, &w_out).unwrap();
        let lin = |xx: &Matrix, ww: &Matrix, bb: &Matrix| {
            weighted_sum(&linear_forward(xx, ww, bb).unwrap(), &w_out)
        };
        assert_rel_close(&dx, &fd_grad(&x, |p| lin(p, &w, &bias)), 1e-6);
        assert_rel_close(&dw, &fd_grad(&w, |p| lin(&x, p, &bias)), 1e-6);
        assert_rel_close(&db, &fd_grad(&bias, |p| lin(&x, &w, p)), 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            prop::collection::vec(-20.0f64..20.0, rows * cols)
                .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                x in matrix(3, 6),
                shift in prop::collection::vec(-100.0f64..100.0, 3),
            ) {
                let y = softmax_rows(&x, None).unwrap();
                let mut shifted = x.clone();
                for (r, s) in shift.iter().enumerate() {
                    shifted.row_mut(r).iter_mut().for_each(|v| *v += s);
                }
                let ys = softmax_rows(&shifted, None).unwrap();
                for r in 0..3 {
                    prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                prop_assert!(y.max_abs_diff(&ys) < 1e-9);
            }

            #[test]
            fn layer_norm_standardizes_rows(x in matrix(4, 8)) {
                let (_, cache) = layer_norm(
                    &x, &Matrix::filled(1, 8, 1.0), &Matrix::zeros(1, 8), LAYER_NORM_EPS,
                ).unwrap();
                for r in 0..4 {
                    let row = cache.normalized.row(r);
                    let mean = row.iter().sum::<f64>() / 8.0;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                    prop_assert!(mean.abs() < 1e-9);
                    // var = v / (v + eps) for raw variance v; within eps-tolerance of 1
                    // unless the row is nearly constant.
                    let raw = x.row(r);
                    let rm = raw.iter().sum::<f64>() / 8.0;
                    let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 8.0;
                    prop_assert!((var - rv / (rv + LAYER_NORM_EPS)).abs() < 1e-9);
                    if rv > 1e-2 {
                        prop_assert!((var - 1.0).abs() < LAYER_NORM_EPS / rv + 1e-9);
                    }
                }
            }
        }
    }
}
