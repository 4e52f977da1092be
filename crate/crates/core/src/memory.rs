//! Bounded memory: construction from control vectors, the recurrent update
//! (optionally with an upper-shift transition), readout, the
//! normalized-memory variant used by causal ABC_MLP, and the exact softmax
//! attention baseline.
//!
//! Unwritten slots are all-zero rows. Readout does not mask them: a zero key
//! scores `q·0 = 0` and still takes softmax weight.

use std::ops::Deref;

use crate::error::{domain, numeric, Result};
use crate::numerics::{axpy, dot, softmax_in_place, Matrix, Vector};

/// The `n`-dimensional weights deciding which slots a token is written to.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector(pub Vector);

impl ControlVector {
    pub fn new(weights: Vec<f64>) -> Self {
        Self(Vector::new(weights))
    }

    pub fn weights(&self) -> &Vector {
        &self.0
    }

    /// Number of nonzero entries.
    pub fn support(&self) -> usize {
        self.0.iter().filter(|w| **w != 0.0).count()
    }
}

impl Deref for ControlVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vector> for ControlVector {
    fn from(v: Vector) -> Self {
        Self(v)
    }
}

/// How the previous memory is carried into the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionOp {
    Identity,
    /// Left-multiplication by `U` with `U[i][j] = δ_{i+1,j}`: rows move up one
    /// slot and the last slot is cleared.
    UpperShift,
}

impl TransitionOp {
    /// The dense `n×n` transition matrix.
    pub fn matrix(self, n: usize) -> Matrix {
        match self {
            TransitionOp::Identity => Matrix::identity(n),
            TransitionOp::UpperShift => {
                let mut u = Matrix::zeros(n, n);
                for i in 0..n.saturating_sub(1) {
                    u[(i, i + 1)] = 1.0;
                }
                u
            }
        }
    }

    /// Applies the transition in place to a row-major `n×d` block.
    pub(crate) fn apply(self, rows: &mut [f64], d: usize) {
        if let TransitionOp::UpperShift = self {
            let len = rows.len();
            rows.copy_within(d..len, 0);
            rows[len - d..].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Applies `Uᵀ` in place (rows move down one slot, the first is cleared).
    pub(crate) fn apply_transpose(self, rows: &mut [f64], d: usize) {
        if let TransitionOp::UpperShift = self {
            let len = rows.len();
            rows.copy_within(0..len - d, d);
            rows[..d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// The pair of `n×d` slot matrices plus an optional running normalizer
/// (the per-slot sum of raw control weights written so far).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedMemory {
    pub ktilde: Matrix,
    pub vtilde: Matrix,
    pub norm_sum: Option<Vector>,
}

impl BoundedMemory {
    pub fn new(slots: usize, dim: usize) -> Self {
        Self { ktilde: Matrix::zeros(slots, dim), vtilde: Matrix::zeros(slots, dim), norm_sum: None }
    }

    /// Empty memory that also tracks the running normalizer.
    pub fn with_normalizer(slots: usize, dim: usize) -> Self {
        Self { norm_sum: Some(Vector::zeros(slots)), ..Self::new(slots, dim) }
    }

    pub fn slots(&self) -> usize {
        self.ktilde.rows()
    }

    pub fn dim(&self) -> usize {
        self.ktilde.cols()
    }

    /// Floats held by this state.
    pub fn float_count(&self) -> usize {
        self.ktilde.len() + self.vtilde.len() + self.norm_sum.as_ref().map_or(0, |s| s.dim())
    }

    /// One recurrent update: `M ← T·M + φ ⊗ k` (and likewise for values).
    /// When the normalizer is tracked, `φ` is taken to be the raw weight and
    /// is added to it.
    pub fn step(
        &mut self,
        phi: &[f64],
        k: &[f64],
        v: &[f64],
        transition: TransitionOp,
    ) -> Result<()> {
        let (n, d) = self.ktilde.shape();
        if phi.len() != n || k.len() != d || v.len() != d {
            return domain(format!(
                "step shape mismatch: memory {n}x{d}, phi {}, k {}, v {}",
                phi.len(),
                k.len(),
                v.len()
            ));
        }
        if transition == TransitionOp::UpperShift && self.norm_sum.is_some() {
            return domain("normalized memory does not support the shift transition");
        }
        transition.apply(self.ktilde.as_mut_slice(), d);
        transition.apply(self.vtilde.as_mut_slice(), d);
        for (slot, &w) in phi.iter().enumerate() {
            if w != 0.0 {
                axpy(w, k, self.ktilde.row_mut(slot));
                axpy(w, v, self.vtilde.row_mut(slot));
            }
        }
        if let Some(sum) = self.norm_sum.as_mut() {
            axpy(1.0, phi, sum);
        }
        if !self.ktilde.is_finite() || !self.vtilde.is_finite() {
            return numeric("memory update overflowed");
        }
        Ok(())
    }

    /// Value-returning form of [`BoundedMemory::step`].
    pub fn stepped(
        &self,
        phi: &[f64],
        k: &[f64],
        v: &[f64],
        transition: TransitionOp,
    ) -> Result<Self> {
        let mut next = self.clone();
        next.step(phi, k, v, transition)?;
        Ok(next)
    }

    /// The row-normalized views `(K̄, V̄)`: row `ℓ` divided by `norm_sum[ℓ]`.
    pub fn normalized(&self) -> Result<(Matrix, Matrix)> {
        let Some(sum) = self.norm_sum.as_ref() else {
            return domain("memory carries no normalizer");
        };
        if let Some(slot) = sum.iter().position(|s| !(*s > 0.0)) {
            return numeric(format!("normalizer of slot {slot} is not positive (nothing written yet)"));
        }
        let mut kbar = self.ktilde.clone();
        let mut vbar = self.vtilde.clone();
        for (slot, &s) in sum.iter().enumerate() {
            kbar.row_mut(slot).iter_mut().for_each(|x| *x /= s);
            vbar.row_mut(slot).iter_mut().for_each(|x| *x /= s);
        }
        Ok((kbar, vbar))
    }
}

/// `K̃ = Σ_i φ_i ⊗ k_i`, `Ṽ = Σ_i φ_i ⊗ v_i`.
pub fn build_memory(phis: &[ControlVector], keys: &Matrix, values: &Matrix) -> Result<BoundedMemory> {
    let n = phis.first().map_or(0, |p| p.len());
    if n == 0 {
        return domain("build_memory needs at least one nonempty control vector");
    }
    if phis.iter().any(|p| p.len() != n) {
        return domain("control vectors differ in dimension");
    }
    if keys.rows() != phis.len() || values.rows() != phis.len() || keys.cols() != values.cols() {
        return domain(format!(
            "build_memory shape mismatch: {} control vectors, keys {:?}, values {:?}",
            phis.len(),
            keys.shape(),
            values.shape()
        ));
    }
    let mut mem = BoundedMemory::new(n, keys.cols());
    for (i, phi) in phis.iter().enumerate() {
        mem.step(phi, keys.row(i), values.row(i), TransitionOp::Identity)?;
    }
    Ok(mem)
}

/// `Ṽᵀ softmax(K̃ q / temperature)`.
pub fn readout(q: &[f64], mem: &BoundedMemory, temperature: f64) -> Result<Vector> {
    attend(q, &mem.ktilde, &mem.vtilde, temperature)
}

/// Readout from the normalized views `V̄ᵀ softmax(K̄ q / temperature)`.
pub fn readout_normalized(q: &[f64], mem: &BoundedMemory, temperature: f64) -> Result<Vector> {
    let (kbar, vbar) = mem.normalized()?;
    attend(q, &kbar, &vbar, temperature)
}

/// Exact softmax attention over all `N` key/value rows.
pub fn full_attention(q: &[f64], keys: &Matrix, values: &Matrix, temperature: f64) -> Result<Vector> {
    attend(q, keys, values, temperature)
}

fn attend(q: &[f64], keys: &Matrix, values: &Matrix, temperature: f64) -> Result<Vector> {
    if !(temperature > 0.0) {
        return domain("temperature must be positive");
    }
    if keys.rows() == 0 || keys.shape() != values.shape() || q.len() != keys.cols() {
        return domain(format!(
            "attention shape mismatch: q {}, keys {:?}, values {:?}",
            q.len(),
            keys.shape(),
            values.shape()
        ));
    }
    let mut scores = vec![0.0; keys.rows()];
    let mut out = vec![0.0; keys.cols()];
    readout_kernel(q, keys.as_slice(), values.as_slice(), keys.cols(), 1.0 / temperature, &mut scores, &mut out);
    let out = Vector::new(out);
    if !out.is_finite() {
        return numeric("readout produced non-finite output");
    }
    Ok(out)
}

/// Slice-level readout. `scores` (len n) is left holding the softmax
/// probabilities; `out` (len d) is overwritten.
pub(crate) fn readout_kernel(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    d: usize,
    inv_temperature: f64,
    scores: &mut [f64],
    out: &mut [f64],
) {
    for (s, krow) in scores.iter_mut().zip(keys.chunks_exact(d)) {
        *s = dot(krow, q) * inv_temperature;
    }
    softmax_in_place(scores);
    out.iter_mut().for_each(|x| *x = 0.0);
    for (&p, vrow) in scores.iter().zip(values.chunks_exact(d)) {
        axpy(p, vrow, out);
    }
}
