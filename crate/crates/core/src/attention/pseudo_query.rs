//! ABC_MLP memory as `n` independent softmax attentions whose queries are
//! the rows of `W_φ`.

use crate::error::{domain, Result};
use crate::numerics::{axpy, dot, softmax, Matrix};

/// Row `ℓ` is `attn(W_φ[ℓ], {x_i}, {k_i})` with unit temperature.
pub fn pseudo_query_memory(w_phi: &Matrix, xs: &Matrix, keys: &Matrix) -> Result<Matrix> {
    if w_phi.cols() != xs.cols() || xs.rows() != keys.rows() || xs.rows() == 0 {
        return domain(format!(
            "pseudo-query shapes disagree: W_phi {:?}, X {:?}, K {:?}",
            w_phi.shape(),
            xs.shape(),
            keys.shape()
        ));
    }
    let mut out = Matrix::zeros(w_phi.rows(), keys.cols());
    for l in 0..w_phi.rows() {
        let scores: Vec<f64> = (0..xs.rows()).map(|i| dot(w_phi.row(l), xs.row(i))).collect();
        let p = softmax(&scores)?;
        for (i, &pi) in p.iter().enumerate() {
            axpy(pi, keys.row(i), out.row_mut(l));
        }
    }
    Ok(out)
}
