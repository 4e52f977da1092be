//! Control-vector constructions. Each strategy decides, per position, which
//! memory slots receive that position's key and value and with what weight.
//!
//! Positions are zero based throughout: `pos = t - 1` for the one-based step
//! index `t` used when describing the recurrences.

mod cluster;
mod dilated;
mod mlp;

pub use cluster::{centroids_via_phi, cluster_assign, kmeans, BitMatrix, KMeans};
pub use dilated::{DilatedQueues, QueueParity};
pub use mlp::{phi_mlp_prefix, phi_mlp_sequence, Activation, Normalization};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::memory::{ControlVector, TransitionOp};
use crate::numerics::{Matrix, SeededRng, Vector};

/// Strategy family, without learned or materialized data. This is what
/// configuration files name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyKind {
    /// `φ_i = e_i` with a memory that grows with the sequence: exact softmax attention.
    Softmax,
    Linformer,
    LocalToGlobal {
        /// Zero-based positions of the global tokens, in slot order.
        globals: Vec<usize>,
    },
    Random {
        seed: u64,
    },
    Compressive {
        /// Compression ratio `c`: each slot mean-pools `c` consecutive tokens.
        ratio: usize,
    },
    Cluster {
        #[serde(default = "default_cluster_iters")]
        iters: usize,
        #[serde(default)]
        seed: u64,
    },
    Window,
    Dilated,
    Mlp {
        #[serde(default)]
        activation: Activation,
    },
}

fn default_cluster_iters() -> usize {
    10
}

impl StrategyKind {
    /// Short identifier used on the command line and in CSV output.
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Softmax => "softmax",
            StrategyKind::Linformer => "linformer",
            StrategyKind::LocalToGlobal { .. } => "local_to_global",
            StrategyKind::Random { .. } => "random",
            StrategyKind::Compressive { .. } => "compressive",
            StrategyKind::Cluster { .. } => "cluster",
            StrategyKind::Window => "window",
            StrategyKind::Dilated => "dilated",
            StrategyKind::Mlp { .. } => "mlp",
        }
    }

    /// Parses the command-line shorthand. Parameterized kinds get defaults
    /// that depend on the memory size `n`.
    pub fn from_name(name: &str, n: usize, seed: u64) -> Result<Self> {
        Ok(match name {
            "softmax" => StrategyKind::Softmax,
            "linformer" => StrategyKind::Linformer,
            "local_to_global" | "l2g" => StrategyKind::LocalToGlobal { globals: (0..n).collect() },
            "random" | "rd" => StrategyKind::Random { seed },
            "compressive" => StrategyKind::Compressive { ratio: 2 },
            "cluster" => StrategyKind::Cluster { iters: default_cluster_iters(), seed },
            "window" => StrategyKind::Window,
            "dilated" => StrategyKind::Dilated,
            "mlp" => StrategyKind::Mlp { activation: Activation::Exp },
            "mlp-relu" => StrategyKind::Mlp { activation: Activation::Relu },
            "mlp-sigmoid" => StrategyKind::Mlp { activation: Activation::Sigmoid },
            other => return domain(format!("unknown strategy `{other}`")),
        })
    }

    /// Whether the strategy carries trained parameters.
    pub fn is_learned(&self) -> bool {
        matches!(self, StrategyKind::Linformer | StrategyKind::Mlp { .. })
    }

    /// Whether the control vectors can be formed without seeing future tokens.
    pub fn is_causal_legal(&self) -> bool {
        !matches!(self, StrategyKind::Cluster { .. })
    }

    pub fn transition(&self) -> TransitionOp {
        match self {
            StrategyKind::Window | StrategyKind::Dilated => TransitionOp::UpperShift,
            _ => TransitionOp::Identity,
        }
    }
}

/// A fully materialized strategy: every parameter needed to produce `φ_t`.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlStrategy {
    /// `φ_t = e_t` over a memory of `len` slots.
    Softmax,
    /// `φ_t = W_LF[:, t]` for an `n × N_max` projection.
    Linformer { projection: Matrix },
    /// `φ_t = e_i` if `t` is the i-th global position, zero otherwise.
    LocalToGlobal { globals: Vec<usize>, slots: usize },
    /// `φ_t = e_{i_t}` with `i_t` drawn uniformly per position from a seeded stream.
    Random { seed: u64, slots: usize, draws: Vec<usize> },
    /// `φ_t = e_{⌊t/c⌋} / c`.
    Compressive { ratio: usize, slots: usize },
    /// `φ_t = Σ_j (M_tj / Σ_l M_lj) e_j` for a hard membership matrix.
    Cluster { membership: BitMatrix },
    /// `φ_t = e_n` with the upper-shift transition.
    Window { slots: usize },
    /// Two window queues over alternating positions.
    Dilated { slots: usize },
    /// `α_t = act(W_φ x_t)`, normalized over the sequence or the prefix.
    Mlp { w_phi: Matrix, normalization: Normalization, activation: Activation },
}

/// The control vector at one position and, for ABC_MLP, the raw weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiAt {
    pub phi: ControlVector,
    pub alpha: Option<Vector>,
}

impl ControlStrategy {
    /// Random slot draws for the first `capacity` positions.
    pub fn random(seed: u64, slots: usize, capacity: usize) -> Result<Self> {
        if slots == 0 {
            return domain("random strategy needs at least one slot");
        }
        let mut rng = SeededRng::new(seed);
        let draws = (0..capacity).map(|_| rng.below(slots)).collect();
        Ok(ControlStrategy::Random { seed, slots, draws })
    }

    /// Linformer projection initialized `N(0, 1/N_max)`.
    pub fn linformer(slots: usize, max_len: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (max_len as f64).sqrt();
        ControlStrategy::Linformer { projection: Matrix::random_normal(slots, max_len, std, rng) }
    }

    pub fn local_to_global(globals: Vec<usize>, slots: usize) -> Result<Self> {
        if globals.len() > slots {
            return domain(format!("{} global tokens do not fit in {slots} slots", globals.len()));
        }
        let mut sorted = globals.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != globals.len() {
            return domain("global positions must be distinct");
        }
        Ok(ControlStrategy::LocalToGlobal { globals, slots })
    }

    pub fn compressive(ratio: usize, slots: usize) -> Result<Self> {
        if ratio == 0 || slots == 0 {
            return domain("compressive strategy needs a positive ratio and slot count");
        }
        Ok(ControlStrategy::Compressive { ratio, slots })
    }

    /// Memory size for a sequence of `len` tokens.
    pub fn slots(&self, len: usize) -> usize {
        match self {
            ControlStrategy::Softmax => len,
            ControlStrategy::Linformer { projection } => projection.rows(),
            ControlStrategy::LocalToGlobal { slots, .. }
            | ControlStrategy::Random { slots, .. }
            | ControlStrategy::Compressive { slots, .. }
            | ControlStrategy::Window { slots }
            | ControlStrategy::Dilated { slots } => *slots,
            ControlStrategy::Cluster { membership } => membership.cols(),
            ControlStrategy::Mlp { w_phi, .. } => w_phi.rows(),
        }
    }

    pub fn transition(&self) -> TransitionOp {
        match self {
            ControlStrategy::Window { .. } | ControlStrategy::Dilated { .. } => TransitionOp::UpperShift,
            _ => TransitionOp::Identity,
        }
    }

    /// Whether every control vector is entrywise non-negative by construction.
    pub fn is_nonnegative(&self) -> bool {
        !matches!(self, ControlStrategy::Linformer { .. })
    }

    /// `φ` at zero-based position `pos` of a length-`len` sequence. `xs`
    /// holds token representations row by row and is required for ABC_MLP
    /// (rows `0..=pos` for prefix normalization, all `len` rows otherwise).
    pub fn phi_at(&self, pos: usize, xs: Option<&Matrix>, len: usize) -> Result<PhiAt> {
        if pos >= len {
            return domain(format!("position {pos} outside a sequence of length {len}"));
        }
        let basis = |n: usize, i: usize, w: f64| {
            let mut v = Vector::zeros(n);
            v[i] = w;
            PhiAt { phi: v.into(), alpha: None }
        };
        Ok(match self {
            ControlStrategy::Softmax => basis(len, pos, 1.0),
            ControlStrategy::Linformer { projection } => {
                if pos >= projection.cols() {
                    return domain(format!(
                        "linformer projection covers {} positions, got position {pos}",
                        projection.cols()
                    ));
                }
                PhiAt { phi: projection.column(pos).into(), alpha: None }
            }
            ControlStrategy::LocalToGlobal { globals, slots } => match globals.iter().position(|&g| g == pos) {
                Some(i) => basis(*slots, i, 1.0),
                None => PhiAt { phi: Vector::zeros(*slots).into(), alpha: None },
            },
            ControlStrategy::Random { slots, draws, .. } => {
                let Some(&slot) = draws.get(pos) else {
                    return domain(format!("random draws cover {} positions, got {pos}", draws.len()));
                };
                basis(*slots, slot, 1.0)
            }
            ControlStrategy::Compressive { ratio, slots } => {
                let slot = pos / ratio;
                if slot >= *slots {
                    return domain(format!(
                        "compressive memory of {slots} slots at ratio {ratio} holds {} tokens, got position {pos}",
                        slots * ratio
                    ));
                }
                basis(*slots, slot, 1.0 / *ratio as f64)
            }
            ControlStrategy::Cluster { membership } => {
                if pos >= membership.rows() {
                    return domain("position outside the cluster membership matrix");
                }
                let counts = membership.column_counts();
                let j = membership.assignment(pos);
                basis(membership.cols(), j, 1.0 / counts[j] as f64)
            }
            ControlStrategy::Window { slots } | ControlStrategy::Dilated { slots } => basis(*slots, slots - 1, 1.0),
            ControlStrategy::Mlp { w_phi, normalization, activation } => {
                let Some(xs) = xs else {
                    return domain("ABC_MLP needs token representations");
                };
                let upto = match normalization {
                    Normalization::Prefix => pos + 1,
                    Normalization::Sequence => len,
                };
                if xs.rows() < upto {
                    return domain(format!("need {upto} token representations, got {}", xs.rows()));
                }
                let mut sum = Vector::zeros(w_phi.rows());
                let mut alpha_pos = None;
                for i in 0..upto {
                    let (alpha, next) = phi_mlp_prefix(xs.row(i), w_phi, &sum, *activation)?;
                    sum = next;
                    if i == pos {
                        alpha_pos = Some(alpha);
                    }
                }
                let alpha = alpha_pos.expect("pos < upto");
                mlp::check_normalizer(&sum)?;
                let phi: Vec<f64> = alpha.iter().zip(sum.iter()).map(|(a, s)| a / s).collect();
                PhiAt { phi: ControlVector::new(phi), alpha: Some(alpha) }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::build_memory;
    use crate::numerics::max_abs_diff;

    #[test]
    fn compressive_slots() {
        let s = ControlStrategy::compressive(2, 3).unwrap();
        assert_eq!(&s.phi_at(0, None, 6).unwrap().phi[..], &[0.5, 0.0, 0.0]);
        assert_eq!(&s.phi_at(2, None, 6).unwrap().phi[..], &[0.0, 0.5, 0.0]);
        assert!(s.phi_at(6, None, 8).is_err());
    }

    #[test]
    fn compressive_rows_are_chunk_means() {
        let mut rng = SeededRng::new(4);
        let k = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let s = ControlStrategy::compressive(2, 3).unwrap();
        let phis: Vec<_> = (0..6).map(|p| s.phi_at(p, None, 6).unwrap().phi).collect();
        let mem = build_memory(&phis, &k, &k).unwrap();
        for slot in 0..3 {
            let mean: Vec<f64> = (0..3).map(|j| (k[(2 * slot, j)] + k[(2 * slot + 1, j)]) / 2.0).collect();
            assert_eq!(mem.ktilde.row(slot), &mean[..]);
        }
    }

    #[test]
    fn cluster_weights() {
        let m = BitMatrix::from_assignments(&[0, 0, 1], 2).unwrap();
        let s = ControlStrategy::Cluster { membership: m };
        assert_eq!(&s.phi_at(0, None, 3).unwrap().phi[..], &[0.5, 0.0]);
        assert_eq!(&s.phi_at(2, None, 3).unwrap().phi[..], &[0.0, 1.0]);
    }

    #[test]
    fn mlp_zero_weights_are_uniform() {
        let s = ControlStrategy::Mlp {
            w_phi: Matrix::zeros(3, 4),
            normalization: Normalization::Sequence,
            activation: Activation::Exp,
        };
        let mut rng = SeededRng::new(2);
        let xs = Matrix::random_normal(5, 4, 1.0, &mut rng);
        for pos in 0..5 {
            let phi = s.phi_at(pos, Some(&xs), 5).unwrap().phi;
            assert!(max_abs_diff(&phi, &[0.2; 3]) < 1e-15);
        }
        assert!(s.phi_at(0, None, 5).is_err());
    }

    #[test]
    fn random_is_reproducible_and_basis() {
        let a = ControlStrategy::random(99, 4, 32).unwrap();
        let b = ControlStrategy::random(99, 4, 32).unwrap();
        for pos in 0..32 {
            let pa = a.phi_at(pos, None, 32).unwrap().phi;
            assert_eq!(pa, b.phi_at(pos, None, 32).unwrap().phi);
            assert_eq!(pa.support(), 1);
        }
        assert!(a.phi_at(32, None, 40).is_err());
    }

    #[test]
    fn local_to_global_selects_globals() {
        let s = ControlStrategy::local_to_global(vec![3, 0], 3).unwrap();
        assert_eq!(&s.phi_at(3, None, 5).unwrap().phi[..], &[1.0, 0.0, 0.0]);
        assert_eq!(&s.phi_at(0, None, 5).unwrap().phi[..], &[0.0, 1.0, 0.0]);
        assert_eq!(s.phi_at(1, None, 5).unwrap().phi.support(), 0);
        assert!(ControlStrategy::local_to_global(vec![0, 1, 2, 3], 3).is_err());
        assert!(ControlStrategy::local_to_global(vec![1, 1], 3).is_err());
    }

    #[test]
    fn linformer_columns_and_bounds() {
        let mut rng = SeededRng::new(8);
        let s = ControlStrategy::linformer(3, 5, &mut rng);
        let ControlStrategy::Linformer { projection } = &s else { unreachable!() };
        assert_eq!(&s.phi_at(4, None, 5).unwrap().phi[..], &projection.column(4)[..]);
        assert!(s.phi_at(5, None, 6).is_err());
    }

    #[test]
    fn window_writes_last_slot() {
        let s = ControlStrategy::Window { slots: 4 };
        assert_eq!(&s.phi_at(7, None, 9).unwrap().phi[..], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.transition(), TransitionOp::UpperShift);
    }

    #[test]
    fn kind_names_round_trip() {
        for name in ["softmax", "linformer", "local_to_global", "random", "compressive", "cluster", "window", "dilated", "mlp"] {
            assert_eq!(StrategyKind::from_name(name, 4, 0).unwrap().name(), name);
        }
        assert!(StrategyKind::from_name("bogus", 4, 0).is_err());
        assert!(!StrategyKind::Cluster { iters: 1, seed: 0 }.is_causal_legal());
    }
}
