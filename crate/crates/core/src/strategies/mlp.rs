//! Learned, contextualized control: `α_i = act(W_φ x_i)`, normalized by the
//! per-slot sum over the sequence or over the prefix.

use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::memory::ControlVector;
use crate::numerics::{dot, Matrix, Vector};

/// Elementwise non-negative activation producing raw control weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Exp,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Exp => z.exp(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Exp => a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// Which positions the normalizer sums over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Whole sequence (encoder self-attention, cross attention).
    Sequence,
    /// Positions up to and including the current one (causal attention).
    Prefix,
}

fn raw_alpha(x: &[f64], w_phi: &Matrix, activation: Activation) -> Result<Vector> {
    if x.len() != w_phi.cols() {
        return domain(format!("token dim {} does not match W_phi {:?}", x.len(), w_phi.shape()));
    }
    let alpha: Vector = (0..w_phi.rows()).map(|l| activation.apply(dot(w_phi.row(l), x))).collect::<Vec<_>>().into();
    if !alpha.is_finite() {
        return numeric("control activation overflowed");
    }
    Ok(alpha)
}

pub(crate) fn check_normalizer(sum: &[f64]) -> Result<()> {
    if let Some(slot) = sum.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        return numeric(format!("normalizer of slot {slot} is {}", sum[slot]));
    }
    Ok(())
}

/// Sequence-normalized control vectors: `φ_i = α_i / Σ_j α_j` per dimension.
pub fn phi_mlp_sequence(xs: &Matrix, w_phi: &Matrix, activation: Activation) -> Result<Vec<ControlVector>> {
    let alphas = (0..xs.rows()).map(|i| raw_alpha(xs.row(i), w_phi, activation)).collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; w_phi.rows()];
    for a in &alphas {
        for (s, x) in sum.iter_mut().zip(a.iter()) {
            *s += x;
        }
    }
    check_normalizer(&sum)?;
    Ok(alphas
        .into_iter()
        .map(|a| ControlVector::new(a.iter().zip(&sum).map(|(x, s)| x / s).collect()))
        .collect())
}

/// One causal step: returns the raw `α_t` and the running sum including it.
/// The implied control vector is `α_t / sum`.
pub fn phi_mlp_prefix(
    x: &[f64],
    w_phi: &Matrix,
    running_sum: &Vector,
    activation: Activation,
) -> Result<(Vector, Vector)> {
    if running_sum.dim() != w_phi.rows() {
        return domain("running sum has the wrong dimension");
    }
    let alpha = raw_alpha(x, w_phi, activation)?;
    let sum: Vector = running_sum.iter().zip(alpha.iter()).map(|(s, a)| s + a).collect::<Vec<_>>().into();
    Ok((alpha, sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{max_abs_diff, softmax, SeededRng};

    #[test]
    fn single_token_is_all_ones() {
        let mut rng = SeededRng::new(1);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let xs = Matrix::random_normal(1, 4, 1.0, &mut rng);
        for act in [Activation::Exp, Activation::Sigmoid] {
            let phis = phi_mlp_sequence(&xs, &w, act).unwrap();
            assert!(max_abs_diff(&phis[0], &[1.0; 3]) < 1e-15);
        }
    }

    #[test]
    fn zero_weights_uniform() {
        let mut rng = SeededRng::new(3);
        let xs = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let phis = phi_mlp_sequence(&xs, &Matrix::zeros(2, 5), Activation::Exp).unwrap();
        for p in &phis {
            assert!(max_abs_diff(p, &[0.25, 0.25]) < 1e-15);
        }
    }

    #[test]
    fn one_slot_is_softmax_over_positions() {
        let mut rng = SeededRng::new(17);
        let xs = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let w = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let phis = phi_mlp_sequence(&xs, &w, Activation::Exp).unwrap();
        let scores: Vec<f64> = (0..6).map(|i| dot(w.row(0), xs.row(i))).collect();
        let oracle = softmax(&scores).unwrap();
        let got: Vec<f64> = phis.iter().map(|p| p[0]).collect();
        assert!(max_abs_diff(&got, &oracle) < 1e-15);
    }

    #[test]
    fn prefix_final_step_matches_sequence() {
        let mut rng = SeededRng::new(5);
        let xs = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let w = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let seq = phi_mlp_sequence(&xs, &w, Activation::Exp).unwrap();
        let mut sum = Vector::zeros(3);
        let mut first = None;
        let mut last = None;
        for i in 0..7 {
            let (alpha, next) = phi_mlp_prefix(xs.row(i), &w, &sum, Activation::Exp).unwrap();
            sum = next;
            let phi: Vec<f64> = alpha.iter().zip(sum.iter()).map(|(a, s)| a / s).collect();
            if i == 0 {
                first = Some(phi.clone());
            }
            last = Some(phi);
        }
        assert!(max_abs_diff(&first.unwrap(), &[1.0; 3]) < 1e-15);
        assert!(max_abs_diff(&last.unwrap(), &seq[6]) < 1e-15);
    }

    #[test]
    fn overflow_is_reported() {
        let w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let xs = Matrix::from_vec(1, 1, vec![1000.0]).unwrap();
        assert!(matches!(phi_mlp_sequence(&xs, &w, Activation::Exp), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn relu_all_dead_slot_is_a_zero_normalizer() {
        let w = Matrix::from_vec(1, 1, vec![-1.0]).unwrap();
        let xs = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(phi_mlp_sequence(&xs, &w, Activation::Relu).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for act in [Activation::Exp, Activation::Relu, Activation::Sigmoid] {
            for z in [-1.3, 0.4, 2.1] {
                let h = 1e-6;
                let fd = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                assert!((fd - act.derivative(z, act.apply(z))).abs() < 1e-8);
            }
        }
    }
}
