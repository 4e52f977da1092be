//! Dense building blocks of the toy transformer and their backward passes.

use crate::numerics::{axpy, dot, gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
pub(crate) struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise `g ⊙ (x − μ)/σ + b`.
pub(crate) fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, LnCache) {
    let (rows, d) = x.shape();
    let mut xhat = Matrix::zeros(rows, d);
    let mut out = Matrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (r[j] - mean) * is;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = g[j] * xhat[(i, j)] + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(dy: &Matrix, g: &[f64], cache: &LnCache, dg: &mut [f64], db: &mut [f64]) -> Matrix {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

/// `x W + b` with `b` broadcast over rows.
pub(crate) fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    gemm(x.as_slice(), x.rows(), x.cols(), w.as_slice(), w.cols(), out.as_mut_slice());
    for i in 0..out.rows() {
        axpy(1.0, b, out.row_mut(i));
    }
    out
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dy Wᵀ`.
pub(crate) fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut [f64]) -> Matrix {
    gemm_tn_acc(x.as_slice(), x.rows(), x.cols(), dy.as_slice(), dy.cols(), dw.as_mut_slice());
    for i in 0..dy.rows() {
        axpy(1.0, dy.row(i), db);
    }
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    gemm_nt_acc(dy.as_slice(), dy.rows(), dy.cols(), w.as_slice(), w.rows(), dx.as_mut_slice());
    dx
}

/// `out += x W` for a single row.
pub(crate) fn row_linear_acc(x: &[f64], w: &Matrix, out: &mut [f64]) {
    gemm_acc(x, 1, x.len(), w.as_slice(), w.cols(), out);
}

/// Sinusoidal position encoding of one position.
pub(crate) fn position_row(pos: usize, d: usize, out: &mut [f64]) {
    for i in 0..d / 2 {
        let freq = (-(2.0 * i as f64) / d as f64 * 10000f64.ln()).exp();
        let angle = pos as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, SeededRng};

    #[test]
    fn gelu_derivative() {
        for z in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_grad(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut rng = SeededRng::new(3);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let g: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let w = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let f = |xs: &[f64]| {
            let m = Matrix::from_vec(3, 5, xs.to_vec()).unwrap();
            let (y, _) = layer_norm(&m, &g, &b);
            y.as_slice().iter().zip(w.as_slice()).map(|(a, c)| a * c).sum::<f64>()
        };
        let (_, cache) = layer_norm(&x, &g, &b);
        let mut dg = vec![0.0; 5];
        let mut db = vec![0.0; 5];
        let dx = layer_norm_backward(&w, &g, &cache, &mut dg, &mut db);
        let fd = finite_diff_grad(f, x.as_slice(), 1e-6).unwrap();
        for (a, e) in dx.as_slice().iter().zip(fd.iter()) {
            assert!((a - e).abs() < 1e-7);
        }
    }

    #[test]
    fn positions_are_bounded_and_distinct() {
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        position_row(3, 8, &mut a);
        position_row(4, 8, &mut b);
        assert!(a.iter().all(|x| x.abs() <= 1.0));
        assert_ne!(a, b);
        position_row(0, 8, &mut a);
        assert_eq!(a, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
